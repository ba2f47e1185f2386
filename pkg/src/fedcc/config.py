"""Run configuration: one YAML file, validated before any work starts.

Top-level keys (all optional, unknown keys are an error)::

    seed, output_dir, eval_interval, workers,
    data:       SyntheticConfig fields
    model:      hidden, embed_dim, bn_eps, bn_momentum
    schedule:   {preset: <name>, rounds_override: <int>}  or
                {stages: [{stage, local_epochs, rounds}, ...]}
    clustering: eps, min_samples, k1, k2, query_expansion
    memory:     tau, momentum
    optimizer:  lr, beta1, beta2, eps, batch_size, classifier_init_std

``d_in`` and ``n_parts`` of the encoder are taken from ``data``.
See ``configs/example.yaml`` for a commented file.
"""
from dataclasses import asdict, dataclass, field, fields

import yaml

from .clustering import ClusteringConfig
from .data import SyntheticConfig
from .federation import OptimizerConfig, PRESETS, StageSpec, TrainOptions, make_schedule, preset
from .memory import MemoryConfig
from .model import Architecture


class ConfigError(ValueError):
    pass


MODEL_KEYS = ("hidden", "embed_dim", "bn_eps", "bn_momentum")


def _model_defaults():
    a = Architecture()
    return {k: getattr(a, k) for k in MODEL_KEYS}


@dataclass
class ScheduleConfig:
    preset: str | None = "full"
    rounds_override: int | None = None
    stages: list | None = None

    def resolve(self):
        if self.stages is not None:
            specs = []
            for i, s in enumerate(self.stages):
                if not isinstance(s, dict):
                    raise ConfigError(f"schedule.stages[{i}] must be a mapping")
                _reject_unknown(s, ("stage", "local_epochs", "rounds"), f"schedule.stages[{i}]")
                specs.append(StageSpec(str(s.get("stage")), int(s.get("local_epochs", 1)),
                                       int(s.get("rounds", 1))))
            return make_schedule(specs, self.rounds_override)
        return preset(self.preset, self.rounds_override)


@dataclass
class RunConfig:
    seed: int = 0
    output_dir: str = "runs/default"
    eval_interval: int = 1
    workers: int = 1
    data: SyntheticConfig = field(default_factory=SyntheticConfig)
    model: dict = field(default_factory=_model_defaults)
    schedule: ScheduleConfig = field(default_factory=ScheduleConfig)
    clustering: ClusteringConfig = field(default_factory=ClusteringConfig)
    memory: MemoryConfig = field(default_factory=MemoryConfig)
    optimizer: OptimizerConfig = field(default_factory=OptimizerConfig)

    def architecture(self):
        return Architecture(d_in=self.data.d_in, n_parts=self.data.n_parts, **self.model)

    def train_options(self):
        return TrainOptions(clustering=self.clustering, memory=self.memory,
                            optimizer=self.optimizer, eval_interval=self.eval_interval)

    def stages(self):
        return self.schedule.resolve()

    def synthetic(self):
        """The data config, seeded from the run seed."""
        d = asdict(self.data)
        d["seed"] = self.seed
        return SyntheticConfig(**d)

    def to_dict(self):
        d = asdict(self)
        d["data"].pop("seed")
        return d


def _reject_unknown(section, allowed, where):
    extra = sorted(set(section) - set(allowed))
    if extra:
        raise ConfigError(f"unknown key(s) in {where}: {', '.join(map(str, extra))}")


def _section(raw, key, cls, exclude=()):
    sec = raw.get(key) or {}
    if not isinstance(sec, dict):
        raise ConfigError(f"'{key}' must be a mapping")
    allowed = [f.name for f in fields(cls) if f.name not in exclude]
    _reject_unknown(sec, allowed, key)
    try:
        return cls(**sec)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{key}: {exc}") from None


def from_dict(raw):
    """Validate a parsed config tree and build a ``RunConfig``."""
    if raw is None:
        raw = {}
    if not isinstance(raw, dict):
        raise ConfigError("config root must be a mapping")
    top = [f.name for f in fields(RunConfig)]
    _reject_unknown(raw, top, "config")

    model = raw.get("model") or {}
    if not isinstance(model, dict):
        raise ConfigError("'model' must be a mapping")
    _reject_unknown(model, MODEL_KEYS, "model")

    try:
        scalars = {k: int(raw.get(k, d)) for k, d in (("seed", 0), ("eval_interval", 1), ("workers", 1))}
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"seed, eval_interval and workers must be integers ({exc})") from None
    cfg = RunConfig(
        **scalars,
        output_dir=str(raw.get("output_dir", "runs/default")),
        data=_section(raw, "data", SyntheticConfig, exclude=("seed",)),
        model={**_model_defaults(), **model},
        schedule=_section(raw, "schedule", ScheduleConfig),
        clustering=_section(raw, "clustering", ClusteringConfig),
        memory=_section(raw, "memory", MemoryConfig),
        optimizer=_section(raw, "optimizer", OptimizerConfig),
    )
    if cfg.eval_interval < 1:
        raise ConfigError("eval_interval must be >= 1")
    if cfg.workers < 1:
        raise ConfigError("workers must be >= 1")
    if cfg.schedule.stages is None and cfg.schedule.preset not in PRESETS:
        raise ConfigError(f"schedule.preset must be one of {sorted(PRESETS)}")
    # surface architecture and schedule errors now, not mid-run
    try:
        cfg.architecture()
        cfg.stages()
    except ValueError as exc:
        raise ConfigError(str(exc)) from None
    return cfg


def load(path):
    with open(path) as fh:
        try:
            raw = yaml.safe_load(fh)
        except yaml.YAMLError as exc:
            raise ConfigError(f"{path}: not valid YAML: {exc}") from None
    return from_dict(raw)


def dump(cfg, path):
    with open(path, "w") as fh:
        yaml.safe_dump(cfg.to_dict(), fh, sort_keys=False)


# The setting the acceptance trend checks run on: noisier images, a rank-8
# nuisance subspace and a stronger client skew than the generator defaults,
# so that the stages are distinguishable in 20 rounds.
BENCHMARK = {
    "data": {"noise": 0.3, "nuisance_rank": 8, "nuisance_scale": 0.3,
             "skew_shift": 1.0, "skew_scale": 0.3},
    "clustering": {"k1": 10},
    "optimizer": {"lr": 3.5e-3},
    "schedule": {"preset": "full", "rounds_override": 20},
}


def benchmark(seed=0, schedule_preset="full", rounds=20):
    raw = {k: dict(v) for k, v in BENCHMARK.items()}
    raw["seed"] = seed
    raw["schedule"] = {"preset": schedule_preset, "rounds_override": rounds}
    return from_dict(raw)
