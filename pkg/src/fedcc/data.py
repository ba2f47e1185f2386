"""Synthetic multi-client identity data and the feature CSV format.

Each client holds images of its own people. An image is ``n_parts`` segments
of ``d_in`` features: the identity's per-part prototype plus isotropic noise,
a per-camera offset and a low-rank per-image nuisance term, all pushed through
a client-specific affine map (feature skew). Identity ids never overlap
between clients.

CSV layout, one client per file::

    client_id,identity_id,camera_id,split,f_0,...,f_{p*d_in-1}

Segments are stored contiguously, strip 0 first. Floats are written with 17
significant digits so a save/load round trip is bit-exact.
"""
import csv
from dataclasses import dataclass, field, fields

import numpy as np

SPLITS = ("train", "query", "gallery")


class FeatureFileError(ValueError):
    pass


@dataclass(eq=False)
class ClientDataset:
    client_id: int
    features: np.ndarray  # (N, p, d_in)
    identity_ids: np.ndarray
    camera_ids: np.ndarray
    splits: np.ndarray

    def __post_init__(self):
        self.features = np.asarray(self.features, dtype=np.float64)
        self.identity_ids = np.asarray(self.identity_ids, dtype=np.int64)
        self.camera_ids = np.asarray(self.camera_ids, dtype=np.int64)
        self.splits = np.asarray(self.splits, dtype="<U7")
        n = len(self.features)
        if self.features.ndim != 3:
            raise ValueError(f"features must be (N, p, d_in), got {self.features.shape}")
        if not (len(self.identity_ids) == len(self.camera_ids) == len(self.splits) == n):
            raise ValueError("record fields have inconsistent lengths")
        bad = set(self.splits.tolist()) - set(SPLITS)
        if bad:
            raise ValueError(f"unknown split tag(s): {sorted(bad)}")

    def __len__(self):
        return len(self.features)

    @property
    def n_parts(self):
        return self.features.shape[1]

    @property
    def d_in(self):
        return self.features.shape[2]

    def select(self, split):
        m = self.splits == split
        return ClientDataset(self.client_id, self.features[m], self.identity_ids[m],
                             self.camera_ids[m], self.splits[m])

    def train_features(self):
        """The only view of the data the trainer gets: features, no labels."""
        f = self.features[self.splits == "train"]
        f.setflags(write=False)
        return f

    def equals(self, other):
        return (self.client_id == other.client_id
                and self.features.shape == other.features.shape
                and np.array_equal(self.features, other.features)
                and np.array_equal(self.identity_ids, other.identity_ids)
                and np.array_equal(self.camera_ids, other.camera_ids)
                and np.array_equal(self.splits, other.splits))


def concat_datasets(parts, client_id):
    parts = [p for p in parts if len(p)]
    if not parts:
        raise ValueError("nothing to concatenate")
    return ClientDataset(
        client_id,
        np.concatenate([p.features for p in parts]),
        np.concatenate([p.identity_ids for p in parts]),
        np.concatenate([p.camera_ids for p in parts]),
        np.concatenate([p.splits for p in parts]),
    )


@dataclass
class SyntheticConfig:
    n_clients: int = 4
    identities_per_client: int = 25
    images_per_identity: int = 8
    test_identities_per_client: int = 25
    d_in: int = 32
    n_parts: int = 2
    noise: float = 0.05
    camera_noise: float = 0.1
    n_cameras: int = 2
    nuisance_rank: int = 0
    nuisance_scale: float = 0.0
    skew_shift: float = 0.5
    skew_scale: float = 0.3
    identity_multipliers: list = field(default_factory=list)
    query_fraction: float = 0.25
    seed: int = 0

    def __post_init__(self):
        for name in ("n_clients", "identities_per_client", "images_per_identity",
                     "test_identities_per_client", "d_in", "n_parts", "n_cameras"):
            if int(getattr(self, name)) < 1:
                raise ValueError(f"{name} must be >= 1")
        for name in ("noise", "camera_noise", "nuisance_scale", "skew_shift", "skew_scale"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be >= 0")
        if self.nuisance_rank < 0 or self.nuisance_rank > self.d_in:
            raise ValueError("nuisance_rank must lie in [0, d_in]")
        if self.identity_multipliers and len(self.identity_multipliers) != self.n_clients:
            raise ValueError("identity_multipliers needs one entry per client")
        if any(m <= 0 for m in self.identity_multipliers):
            raise ValueError("identity_multipliers must be positive")
        if not 0.0 <= self.query_fraction < 1.0:
            raise ValueError("query_fraction must lie in [0, 1)")

    @classmethod
    def field_names(cls):
        return [f.name for f in fields(cls)]

    def n_identities(self, k):
        mult = self.identity_multipliers[k] if self.identity_multipliers else 1.0
        return max(1, int(round(self.identities_per_client * mult)))

    def n_test_identities(self, k):
        mult = self.identity_multipliers[k] if self.identity_multipliers else 1.0
        return max(1, int(round(self.test_identities_per_client * mult)))


def _client_images(cfg, rng, n_ids, first_id, split, style):
    p, d = cfg.n_parts, cfg.d_in
    shift, scale, cams, basis = style
    n_img = cfg.images_per_identity
    protos = rng.normal(size=(n_ids, p, d))
    feats = np.repeat(protos, n_img, axis=0)
    ids = np.repeat(np.arange(first_id, first_id + n_ids), n_img)
    cam = np.tile(np.arange(n_img) % cfg.n_cameras, n_ids)
    feats = feats + cfg.noise * rng.normal(size=feats.shape) + cams[cam]
    if basis is not None:
        coef = cfg.nuisance_scale * rng.normal(size=(len(feats), p, basis.shape[0]))
        feats = feats + coef @ basis
    feats = feats * scale + shift
    return ClientDataset(0, feats, ids, cam, np.full(len(feats), split))


def generate(cfg):
    """One ``ClientDataset`` per client, a pure function of ``cfg``."""
    seqs = np.random.SeedSequence(cfg.seed).spawn(cfg.n_clients)
    out = []
    next_id = 0
    for k in range(cfg.n_clients):
        rng = np.random.default_rng(seqs[k])
        p, d = cfg.n_parts, cfg.d_in
        shift = cfg.skew_shift * rng.normal(size=(p, d))
        scale = np.exp(cfg.skew_scale * rng.normal(size=(p, d)))
        cams = cfg.camera_noise * rng.normal(size=(cfg.n_cameras, p, d))
        basis = None
        if cfg.nuisance_rank > 0 and cfg.nuisance_scale > 0:
            q, _ = np.linalg.qr(rng.normal(size=(d, cfg.nuisance_rank)))
            basis = q.T * np.sqrt(d)
        style = (shift, scale, cams, basis)

        n_train, n_test = cfg.n_identities(k), cfg.n_test_identities(k)
        train = _client_images(cfg, rng, n_train, next_id, "train", style)
        test = _client_images(cfg, rng, n_test, next_id + n_train, "gallery", style)
        next_id += n_train + n_test
        query, gallery = split_eval(test, cfg.query_fraction, rng.integers(2**32))
        ds = concat_datasets([train, query, gallery], k)
        out.append(ds)
    return out


def split_eval(dataset, query_fraction, seed):
    """Split ``dataset`` into (query, gallery) per identity.

    ``floor(query_fraction * count)`` images of each identity become query
    candidates (at most count - 1); a candidate stays a query only if the
    gallery still holds the same identity under another camera.
    """
    if not 0.0 <= query_fraction < 1.0:
        raise ValueError("query_fraction must lie in [0, 1)")
    rng = np.random.default_rng(seed)
    is_query = np.zeros(len(dataset), dtype=bool)
    for pid in np.unique(dataset.identity_ids):
        idx = np.flatnonzero(dataset.identity_ids == pid)
        idx = idx[rng.permutation(len(idx))]
        n_q = min(int(np.floor(query_fraction * len(idx))), len(idx) - 1)
        for i in idx[:n_q]:
            is_query[i] = True
            queries = idx[is_query[idx]]
            gallery_cams = dataset.camera_ids[idx[~is_query[idx]]]
            if not all(np.any(gallery_cams != dataset.camera_ids[j]) for j in queries):
                is_query[i] = False
    splits = np.where(is_query, "query", "gallery")
    tagged = ClientDataset(dataset.client_id, dataset.features, dataset.identity_ids,
                           dataset.camera_ids, splits)
    return tagged.select("query"), tagged.select("gallery")


# ------------------------------------------------------------------- CSV I/O

def save_feature_file(dataset, path):
    n, p, d = dataset.features.shape
    flat = dataset.features.reshape(n, p * d)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["client_id", "identity_id", "camera_id", "split"]
                   + [f"f_{i}" for i in range(p * d)])
        for i in range(n):
            w.writerow([dataset.client_id, int(dataset.identity_ids[i]), int(dataset.camera_ids[i]),
                        dataset.splits[i]] + [format(x, ".17g") for x in flat[i]])


def load_feature_file(path, n_parts=2, client_id=None):
    with open(path, newline="") as fh:
        rows = list(enumerate(csv.reader(fh), start=1))
    if not rows:
        raise FeatureFileError(f"{path}:1: empty file, header expected")
    _, header = rows[0]
    if header[:4] != ["client_id", "identity_id", "camera_id", "split"]:
        raise FeatureFileError(f"{path}:1: bad header, expected client_id,identity_id,camera_id,split,f_0,...")
    n_feat = len(header) - 4
    if header[4:] != [f"f_{i}" for i in range(n_feat)]:
        raise FeatureFileError(f"{path}:1: feature columns must be f_0..f_{n_feat - 1}")
    if n_feat == 0 or n_feat % n_parts:
        raise FeatureFileError(f"{path}:1: {n_feat} feature columns do not split into {n_parts} parts")

    clients, ids, cams, splits, feats = [], [], [], [], []
    for lineno, row in rows[1:]:
        if len(row) != len(header):
            raise FeatureFileError(f"{path}:{lineno}: expected {len(header)} fields, got {len(row)}")
        try:
            clients.append(int(row[0]))
            ids.append(int(row[1]))
            cams.append(int(row[2]))
            feats.append([float(x) for x in row[4:]])
        except ValueError as exc:
            raise FeatureFileError(f"{path}:{lineno}: {exc}") from None
        if row[3] not in SPLITS:
            raise FeatureFileError(f"{path}:{lineno}: unknown split {row[3]!r}")
        splits.append(row[3])
    if len(set(clients)) > 1:
        raise FeatureFileError(f"{path}: rows from several clients {sorted(set(clients))}")
    cid = clients[0] if clients else (client_id if client_id is not None else 0)
    arr = np.array(feats, dtype=np.float64).reshape(len(feats), n_parts, n_feat // n_parts)
    return ClientDataset(cid, arr, ids, cams, splits)
