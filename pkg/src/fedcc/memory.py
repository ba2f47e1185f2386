"""Cluster-centroid memory and the contrastive losses built on it."""
from dataclasses import dataclass

import numpy as np

from .clustering import OUTLIER

TAU = 0.05
MOMENTUM = 0.2


class DegenerateClusterError(ValueError):
    pass


@dataclass
class MemoryConfig:
    tau: float = TAU
    momentum: float = MOMENTUM

    def __post_init__(self):
        if not self.tau > 0:
            raise ValueError("tau must be positive")
        if not 0.0 <= self.momentum <= 1.0:
            raise ValueError("momentum must lie in [0, 1]")


def _unit(v, what):
    n = np.linalg.norm(v, axis=-1, keepdims=True)
    if np.any(n <= 1e-12):
        raise DegenerateClusterError(f"{what} has zero norm; cannot normalize")
    return v / n


@dataclass
class CentroidMemory:
    holistic: np.ndarray  # (m, e)
    patch: np.ndarray | None  # (p, m, e), strip-aligned with the query patches
    tau: float = TAU
    momentum: float = MOMENTUM

    def __post_init__(self):
        if not self.tau > 0:
            raise ValueError(f"tau must be positive, got {self.tau}")
        if not 0.0 <= self.momentum <= 1.0:
            raise ValueError(f"momentum must lie in [0, 1], got {self.momentum}")

    @property
    def n_clusters(self):
        return self.holistic.shape[0]

    def update(self, j, u, q=None):
        """``c_j <- normalize(lam * c_j + (1 - lam) * u)``; same for each patch bank."""
        lam = self.momentum
        self.holistic[j] = _unit(lam * self.holistic[j] + (1.0 - lam) * u, f"centroid {j}")
        if q is not None and self.patch is not None:
            for r in range(self.patch.shape[0]):
                self.patch[r, j] = _unit(lam * self.patch[r, j] + (1.0 - lam) * q[r],
                                         f"patch centroid {j}/{r}")
        return self

    def update_batch(self, labels, u, q=None):
        # sequential, in batch order; a repeated label sees the earlier update
        for i, j in enumerate(labels):
            self.update(j, u[i], None if q is None else q[i])
        return self


def init_centroids(holistic, assignment, patches=None, tau=TAU, momentum=MOMENTUM):
    """Per-cluster mean of member embeddings, renormalized. Outliers contribute nothing."""
    labels = assignment.labels
    m = assignment.n_clusters
    if m < 1:
        raise DegenerateClusterError("no clusters to build a memory from")
    keep = labels != OUTLIER
    counts = np.bincount(labels[keep], minlength=m).astype(np.float64)

    def means(x):
        acc = np.zeros((m, x.shape[-1]))
        np.add.at(acc, labels[keep], x[keep])
        return acc / counts[:, None]

    c = _unit(means(np.asarray(holistic, dtype=np.float64)), "cluster mean")
    d = None
    if patches is not None:
        patches = np.asarray(patches, dtype=np.float64)
        d = np.stack([_unit(means(patches[:, r]), "patch cluster mean")
                      for r in range(patches.shape[1])])
    return CentroidMemory(holistic=c, patch=d, tau=tau, momentum=momentum)


def infonce_loss(query, j, bank, tau=TAU):
    """``-log softmax(bank @ query / tau)[j]`` and its gradient w.r.t. ``query``."""
    bank = np.asarray(bank, dtype=np.float64)
    if bank.ndim != 2 or bank.shape[0] == 0:
        raise ValueError("centroid bank is empty")
    if not 0 <= j < bank.shape[0]:
        raise ValueError(f"cluster index {j} out of range [0, {bank.shape[0]})")
    if not tau > 0:
        raise ValueError(f"tau must be positive, got {tau}")
    logits = bank @ query / tau
    shift = logits - logits.max()
    log_z = np.log(np.exp(shift).sum())
    loss = log_z - shift[j]
    prob = np.exp(shift - log_z)
    prob[j] -= 1.0
    return max(loss, 0.0), bank.T @ prob / tau


def infonce_batch(queries, labels, bank, tau=TAU):
    """Mean InfoNCE over a batch; gradients already carry the 1/B factor."""
    queries = np.asarray(queries, dtype=np.float64)
    labels = np.asarray(labels)
    b = queries.shape[0]
    logits = queries @ bank.T / tau
    shift = logits - logits.max(axis=1, keepdims=True)
    log_z = np.log(np.exp(shift).sum(axis=1))
    rows = np.arange(b)
    losses = np.maximum(log_z - shift[rows, labels], 0.0)
    prob = np.exp(shift - log_z[:, None])
    prob[rows, labels] -= 1.0
    grads = prob @ bank / (tau * b)
    return losses.mean(), grads


def patch_infonce_loss(patch_queries, j, memory):
    """Sum over strips ``r`` of InfoNCE of ``q_r`` against patch bank ``r``."""
    total = 0.0
    grads = np.zeros_like(np.asarray(patch_queries, dtype=np.float64))
    for r in range(grads.shape[0]):
        loss, g = infonce_loss(patch_queries[r], j, memory.patch[r], memory.tau)
        total += loss
        grads[r] = g
    return total, grads


def patch_infonce_batch(patch_queries, labels, memory):
    total = 0.0
    grads = np.zeros_like(patch_queries)
    for r in range(patch_queries.shape[1]):
        loss, g = infonce_batch(patch_queries[:, r], labels, memory.patch[r], memory.tau)
        total += loss
        grads[:, r] = g
    return total, grads


def joint_loss(holistic_loss, patch_loss=None):
    return holistic_loss + (0.0 if patch_loss is None else patch_loss)


def write_centroids_csv(memory, path):
    rows = [("holistic", -1, j, memory.holistic[j]) for j in range(memory.n_clusters)]
    if memory.patch is not None:
        for r in range(memory.patch.shape[0]):
            rows += [("patch", r, j, memory.patch[r, j]) for j in range(memory.n_clusters)]
    with open(path, "w") as fh:
        fh.write("bank,strip,cluster_id," + ",".join(f"c_{i}" for i in range(memory.holistic.shape[1])) + "\n")
        for bank, r, j, v in rows:
            fh.write(f"{bank},{r},{j}," + ",".join(format(x, ".17g") for x in v) + "\n")
