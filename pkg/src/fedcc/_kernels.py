"""Hot loops of the clustering path, in two interchangeable flavours.

``*_loops`` functions are explicit loops compiled with numba; ``*_numpy``
functions are vectorized numpy/scipy. Both produce identical results on
indicator inputs. The public names at the bottom are bound according to
``fedcc._accel.USE_NUMBA``.
"""
import numpy as np
from scipy.sparse import csr_matrix
from scipy.sparse.csgraph import connected_components

from ._accel import USE_NUMBA, njit

OUTLIER = -1


def neighbor_order(dist):
    """Row-wise neighbor ranking with the query itself always first.

    Others are ordered by (distance, index); the stable sort gives the
    index tie-break.
    """
    d = np.array(dist, dtype=np.float64, copy=True)
    np.fill_diagonal(d, -np.inf)
    return np.argsort(d, axis=1, kind="stable")


# ---------------------------------------------------------------- numba loops

@njit
def reciprocal_sets_loops(order, k):
    n = order.shape[0]
    knn = np.zeros((n, n), dtype=np.bool_)
    for i in range(n):
        for t in range(k + 1):
            knn[i, order[i, t]] = True
    out = np.zeros((n, n), dtype=np.bool_)
    for i in range(n):
        for j in range(n):
            out[i, j] = knn[i, j] and knn[j, i]
    return out


@njit
def expand_sets_loops(r_full, r_half):
    n = r_full.shape[0]
    out = r_full.copy()
    half_size = np.zeros(n, dtype=np.int64)
    for j in range(n):
        for l in range(n):
            if r_half[j, l]:
                half_size[j] += 1
    for i in range(n):
        for j in range(n):
            if not r_full[i, j]:
                continue
            common = 0
            for l in range(n):
                if r_full[i, l] and r_half[j, l]:
                    common += 1
            if 3 * common >= 2 * half_size[j]:
                for l in range(n):
                    if r_half[j, l]:
                        out[i, l] = True
    return out


@njit
def jaccard_loops(v):
    # generalized (min/max) Jaccard; reduces to |A and B| / |A or B| on 0/1 rows.
    # Rows are sparse, so intersections are accumulated through an inverted
    # index over columns; max(a, b) = a + b - min(a, b) for non-negative entries.
    n, m = v.shape
    start = np.zeros(m + 1, dtype=np.int64)
    for i in range(n):
        for l in range(m):
            if v[i, l] != 0.0:
                start[l + 1] += 1
    for l in range(m):
        start[l + 1] += start[l]
    fill = start[:m].copy()
    rows = np.empty(start[m], dtype=np.int64)
    mass = np.zeros(n, dtype=np.float64)
    for i in range(n):
        for l in range(m):
            if v[i, l] != 0.0:
                rows[fill[l]] = i
                fill[l] += 1
                mass[i] += v[i, l]
    inter = np.zeros((n, n), dtype=np.float64)
    for l in range(m):
        for a in range(start[l], start[l + 1]):
            i = rows[a]
            vi = v[i, l]
            for b in range(a + 1, start[l + 1]):
                j = rows[b]
                inter[i, j] += min(vi, v[j, l])
    out = np.zeros((n, n), dtype=np.float64)
    for i in range(n):
        for j in range(i + 1, n):
            union = mass[i] + mass[j] - inter[i, j]
            d = 1.0 - inter[i, j] / union if union > 0.0 else 1.0
            out[i, j] = d
            out[j, i] = d
    return out


@njit
def dbscan_loops(dist, eps, min_samples):
    n = dist.shape[0]
    nbr = np.zeros((n, n), dtype=np.bool_)
    core = np.zeros(n, dtype=np.bool_)
    for i in range(n):
        cnt = 0
        for j in range(n):
            if dist[i, j] <= eps:
                nbr[i, j] = True
                cnt += 1
        core[i] = cnt >= min_samples

    labels = np.full(n, -1, dtype=np.int64)
    stack = np.empty(n, dtype=np.int64)
    cluster = 0
    for i in range(n):
        if not core[i] or labels[i] != -1:
            continue
        labels[i] = cluster
        stack[0] = i
        top = 1
        while top > 0:
            top -= 1
            a = stack[top]
            for b in range(n):
                if nbr[a, b] and core[b] and labels[b] == -1:
                    labels[b] = cluster
                    stack[top] = b
                    top += 1
        cluster += 1

    for i in range(n):
        if core[i]:
            continue
        for j in range(n):
            if core[j] and nbr[i, j]:
                labels[i] = labels[j]
                break
    return labels


# ------------------------------------------------------------- numpy versions

def reciprocal_sets_numpy(order, k):
    n = order.shape[0]
    knn = np.zeros((n, n), dtype=bool)
    rows = np.repeat(np.arange(n), k + 1)
    knn[rows, order[:, : k + 1].ravel()] = True
    return knn & knn.T


def expand_sets_numpy(r_full, r_half):
    f = r_full.astype(np.float64)
    h = r_half.astype(np.float64)
    common = f @ h.T  # common[i, j] = |R(i) & R_half(j)|
    half_size = h.sum(axis=1)
    accept = r_full & (3.0 * common >= 2.0 * half_size[None, :])
    return r_full | ((accept.astype(np.float64) @ h) > 0)


def jaccard_numpy(v):
    n = v.shape[0]
    if v.dtype == np.bool_:
        f = v.astype(np.float64)
        inter = f @ f.T
        size = f.sum(axis=1)
        union = size[:, None] + size[None, :] - inter
    else:
        inter = np.empty((n, n))
        union = np.empty((n, n))
        for i in range(n):
            inter[i] = np.minimum(v[i], v).sum(axis=1)
            union[i] = np.maximum(v[i], v).sum(axis=1)
    with np.errstate(invalid="ignore", divide="ignore"):
        out = np.where(union > 0, 1.0 - inter / np.where(union > 0, union, 1.0), 1.0)
    out = np.triu(out, 1)
    return out + out.T


def dbscan_numpy(dist, eps, min_samples):
    n = dist.shape[0]
    nbr = dist <= eps
    core = nbr.sum(axis=1) >= min_samples
    labels = np.full(n, OUTLIER, dtype=np.int64)
    core_idx = np.flatnonzero(core)
    if core_idx.size == 0:
        return labels
    sub = nbr[np.ix_(core_idx, core_idx)]
    _, comp = connected_components(csr_matrix(sub), directed=False)
    # number clusters by their lowest-index core point
    first = {}
    for c in comp:
        if c not in first:
            first[c] = len(first)
    labels[core_idx] = [first[c] for c in comp]

    border = ~core & nbr[:, core].any(axis=1)
    if border.any():
        hit = nbr[np.ix_(border, core_idx)]
        labels[border] = labels[core_idx[hit.argmax(axis=1)]]
    return labels


BACKENDS = {
    "numba": {
        "reciprocal_sets": reciprocal_sets_loops,
        "expand_sets": expand_sets_loops,
        "jaccard": lambda v: jaccard_loops(np.ascontiguousarray(v, dtype=np.float64)),
        "dbscan": dbscan_loops,
    },
    "numpy": {
        "reciprocal_sets": reciprocal_sets_numpy,
        "expand_sets": expand_sets_numpy,
        "jaccard": jaccard_numpy,
        "dbscan": dbscan_numpy,
    },
}

_active = BACKENDS["numba" if USE_NUMBA else "numpy"]
reciprocal_sets = _active["reciprocal_sets"]
expand_sets = _active["expand_sets"]
jaccard = _active["jaccard"]
dbscan = _active["dbscan"]
