"""Federated unsupervised cluster-contrastive learning on synthetic part features."""
from ._accel import backend_name
from .clustering import ClusterAssignment, ClusteringConfig, pseudo_labels
from .data import ClientDataset, SyntheticConfig, generate
from .federation import PRESETS, StageSpec, TrainOptions, preset, run_training
from .model import Architecture, EncoderParams, forward, init_params

__all__ = [
    "Architecture", "ClientDataset", "ClusterAssignment", "ClusteringConfig", "EncoderParams",
    "PRESETS", "StageSpec", "SyntheticConfig", "TrainOptions", "backend_name", "forward",
    "generate", "init_params", "preset", "pseudo_labels", "run_training",
]
__version__ = "0.1.0"
