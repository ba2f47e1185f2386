"""Per-stage federated checkpoints.

One ``.npz`` per finished stage holding the global generic vector, every
client's specialized (batch-norm) vector and a JSON header with the
architecture, the stage and the evaluation feature mode.
"""
import json
import zipfile

import numpy as np

from .model import Architecture, ModelError, layout_of, merge, partition

FORMAT_VERSION = 1


def save_checkpoint(path, stage_index, spec, clients, global_generic):
    arch = clients[0].params.arch
    parts = [partition(c.params) for c in clients]
    if global_generic is None:
        global_generic = parts[0].generic
    header = {
        "version": FORMAT_VERSION,
        "arch": arch.to_dict(),
        "stage": spec.stage,
        "stage_index": stage_index,
        "local_epochs": spec.local_epochs,
        "rounds": spec.rounds,
        "aggregation": spec.aggregation.value,
        "concat": spec.uses_patches,
        "client_ids": [int(c.client_id) for c in clients],
    }
    with open(path, "wb") as fh:
        np.savez(fh, header=np.array(json.dumps(header, sort_keys=True)),
                 generic=np.asarray(global_generic, dtype=np.float64),
                 specialized=np.stack([p.specialized for p in parts]))


class Checkpoint:
    def __init__(self, header, generic, specialized):
        self.header = header
        self.arch = Architecture(**header["arch"])
        self.generic = generic
        self.specialized = specialized

    @property
    def client_ids(self):
        return self.header["client_ids"]

    @property
    def concat(self):
        return bool(self.header["concat"])

    def params_for(self, client_id):
        try:
            k = self.client_ids.index(int(client_id))
        except ValueError:
            raise ModelError(f"checkpoint has no client {client_id}; has {self.client_ids}") from None
        return merge(self.arch, self.generic, self.specialized[k])


def load_checkpoint(path):
    try:
        with np.load(path, allow_pickle=False) as z:
            header = json.loads(str(z["header"]))
            generic, specialized = z["generic"], z["specialized"]
    except KeyError as exc:
        raise ModelError(f"{path}: not a federated checkpoint (missing {exc})") from None
    except (ValueError, EOFError, zipfile.BadZipFile) as exc:
        raise ModelError(f"{path}: unreadable checkpoint ({exc})") from None
    if header.get("version") != FORMAT_VERSION:
        raise ModelError(f"{path}: unsupported checkpoint version {header.get('version')!r}")
    lay = layout_of(Architecture(**header["arch"]))
    n_spec = int(lay.specialized.sum())
    if specialized.ndim != 2 or specialized.shape[1] != n_spec:
        raise ModelError(f"{path}: specialized block has shape {specialized.shape}")
    if len(header["client_ids"]) != len(specialized):
        raise ModelError(f"{path}: client list and specialized block disagree")
    return Checkpoint(header, generic, specialized)

