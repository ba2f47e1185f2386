"""Pseudo-label generation: cosine distances, k-reciprocal Jaccard, DBSCAN."""
import csv
import math
from dataclasses import dataclass

import numpy as np

from . import _kernels
from ._kernels import OUTLIER, neighbor_order

UNIT_TOL = 1e-6


class ClusteringError(ValueError):
    pass


@dataclass
class ClusteringConfig:
    eps: float = 0.5
    min_samples: int = 2
    k1: int = 20
    k2: int = 6
    query_expansion: bool = False

    def __post_init__(self):
        if not self.eps > 0:
            raise ValueError("eps must be positive")
        if self.min_samples < 1:
            raise ValueError("min_samples must be >= 1")
        if not self.k1 >= self.k2 >= 1:
            raise ValueError("need k1 >= k2 >= 1")


@dataclass(frozen=True)
class ClusterAssignment:
    labels: np.ndarray  # int64, OUTLIER (-1) for discarded points
    n_clusters: int

    @classmethod
    def from_labels(cls, labels):
        labels = np.asarray(labels, dtype=np.int64)
        m = int(labels.max()) + 1 if labels.size and labels.max() >= 0 else 0
        return cls(labels=labels, n_clusters=m)

    @property
    def n_outliers(self):
        return int((self.labels == OUTLIER).sum())

    def members(self, j):
        return np.flatnonzero(self.labels == j)

    def sizes(self):
        kept = self.labels[self.labels != OUTLIER]
        return np.bincount(kept, minlength=self.n_clusters)


def _check_unit(features):
    features = np.asarray(features, dtype=np.float64)
    if features.ndim != 2:
        raise ClusteringError(f"expected (n, d) features, got shape {features.shape}")
    if not np.all(np.isfinite(features)):
        raise ClusteringError("features contain non-finite values")
    norms = np.linalg.norm(features, axis=1)
    bad = np.flatnonzero(np.abs(norms - 1.0) > UNIT_TOL)
    if bad.size:
        raise ClusteringError(
            f"features must be unit-norm; row {bad[0]} has norm {norms[bad[0]]:.6g}"
        )
    return features


def check_distance_matrix(dist, tol=1e-12):
    dist = np.asarray(dist, dtype=np.float64)
    if dist.ndim != 2 or dist.shape[0] != dist.shape[1]:
        raise ClusteringError(f"distance matrix must be square, got {dist.shape}")
    if not np.all(np.isfinite(dist)) or (dist < 0).any():
        raise ClusteringError("distances must be finite and non-negative")
    if np.abs(dist - dist.T).max(initial=0.0) > tol:
        raise ClusteringError("distance matrix is not symmetric")
    if np.abs(np.diag(dist)).max(initial=0.0) > tol:
        raise ClusteringError("distance matrix has a non-zero diagonal")
    return dist


def cosine_distances(features):
    """``1 - <u_i, u_j>`` clamped to [0, 2], exactly symmetric, zero diagonal."""
    f = _check_unit(features)
    d = np.clip(1.0 - f @ f.T, 0.0, 2.0)
    upper = np.triu(d, 1)
    return upper + upper.T


def k_reciprocal_jaccard(dist, k1=20, k2=6, query_expansion=False):
    """Jaccard distance between expanded k-reciprocal neighbor sets.

    ``kNN(i, k)`` is ``i`` plus its ``k`` nearest others. ``R(i, k)`` keeps the
    members whose own k-NN list contains ``i``. Each ``R(i, k1)`` is enlarged
    with ``R(j, ceil(k1/2))`` for any member ``j`` whose half-size set overlaps
    ``R(i, k1)`` by at least two thirds. The distance is one minus the
    intersection-over-union of the enlarged sets.

    With ``query_expansion`` the 0/1 set indicators are averaged over the
    ``k2`` nearest neighbors first and the min/max form of Jaccard is used.
    Off by default, in which case ``k2`` is validated but unused.
    """
    dist = check_distance_matrix(dist, tol=1e-9)
    n = dist.shape[0]
    if not (k1 >= k2 >= 1):
        raise ClusteringError(f"need k1 >= k2 >= 1, got k1={k1}, k2={k2}")
    if k1 >= n:
        raise ClusteringError(f"k1={k1} must be smaller than the number of points ({n})")

    order = neighbor_order(dist)
    k_half = math.ceil(k1 / 2)
    r_full = _kernels.reciprocal_sets(order, k1)
    r_half = _kernels.reciprocal_sets(order, k_half)
    r_star = _kernels.expand_sets(r_full, r_half)

    if query_expansion and k2 > 1:
        v = r_star.astype(np.float64)
        v = v[order[:, :k2]].mean(axis=1)
        return _kernels.jaccard(v)
    return _kernels.jaccard(r_star)


def dbscan(dist, eps=0.5, min_samples=2):
    """DBSCAN over a precomputed distance matrix.

    Core points have at least ``min_samples`` points (themselves included)
    within ``eps``. Clusters are numbered by their lowest-index core point;
    a border point joins the cluster of its lowest-index core neighbor.
    """
    if min_samples < 1:
        raise ClusteringError(f"min_samples must be >= 1, got {min_samples}")
    if not eps > 0:
        raise ClusteringError(f"eps must be positive, got {eps}")
    dist = np.ascontiguousarray(dist, dtype=np.float64)
    if dist.ndim != 2 or dist.shape[0] != dist.shape[1]:
        raise ClusteringError(f"distance matrix must be square, got {dist.shape}")
    if dist.shape[0] == 0:
        return ClusterAssignment(labels=np.zeros(0, dtype=np.int64), n_clusters=0)
    labels = _kernels.dbscan(dist, float(eps), int(min_samples))
    return ClusterAssignment.from_labels(labels)


def pseudo_labels(features, eps=0.5, min_samples=2, k1=20, k2=6, query_expansion=False):
    """Features -> Jaccard distances -> DBSCAN. ``k1`` is capped at n-1."""
    n = len(features)
    if n < 2:
        return ClusterAssignment(labels=np.full(n, OUTLIER, dtype=np.int64), n_clusters=0)
    k1 = min(k1, n - 1)
    k2 = min(k2, k1)
    d = k_reciprocal_jaccard(cosine_distances(features), k1, k2, query_expansion)
    return dbscan(d, eps, min_samples)


def write_assignment_csv(assignment, path):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["image_index", "cluster_id"])
        for i, lab in enumerate(assignment.labels):
            w.writerow([i, int(lab)])
