"""Retrieval metrics (CMC, mAP) and pseudo-label diagnostics."""
import csv
from dataclasses import dataclass, field

import numpy as np

from .clustering import OUTLIER

RANKS = (1, 5, 10)


@dataclass
class RankingResult:
    orders: list  # per query: gallery indices, most similar first
    matches: list  # per query: bool flags aligned with ``orders``
    query_index: list  # original index of each ranked query
    skipped: list = field(default_factory=list)  # queries with an empty filtered gallery

    def __len__(self):
        return len(self.orders)


def rank(query_emb, gallery_emb, query_ids, query_cams, gallery_ids, gallery_cams):
    """Cosine ranking of the gallery for each query.

    Gallery entries with the query's identity *and* camera are dropped.
    Ties are broken by gallery index.
    """
    q = np.asarray(query_emb, dtype=np.float64)
    g = np.asarray(gallery_emb, dtype=np.float64)
    for name, x in (("query", q), ("gallery", g)):
        if len(x) and np.abs(np.linalg.norm(x, axis=1) - 1.0).max() > 1e-6:
            raise ValueError(f"{name} embeddings must be unit-norm")
    query_ids, query_cams = np.asarray(query_ids), np.asarray(query_cams)
    gallery_ids, gallery_cams = np.asarray(gallery_ids), np.asarray(gallery_cams)
    sim = q @ g.T if len(q) and len(g) else np.zeros((len(q), len(g)))
    gidx = np.arange(len(g))

    out = RankingResult([], [], [])
    for i in range(len(q)):
        keep = ~((gallery_ids == query_ids[i]) & (gallery_cams == query_cams[i]))
        if not keep.any():
            out.skipped.append(i)
            continue
        cand = gidx[keep]
        order = cand[np.lexsort((cand, -sim[i, cand]))]
        out.orders.append(order)
        out.matches.append(gallery_ids[order] == query_ids[i])
        out.query_index.append(i)
    return out


def _valid(result):
    return [m for m in result.matches if m.any()]


def cmc(result, ks=RANKS):
    """Fraction of queries with a true match in the top ``k``.

    Queries without any true match in the filtered gallery are left out,
    as in the usual Market-1501 protocol.
    """
    valid = _valid(result)
    if not valid:
        return np.zeros(len(ks))
    first = np.array([np.argmax(m) for m in valid])
    return np.array([np.mean(first < k) for k in ks])


def average_precision(matches):
    hits = np.flatnonzero(matches)
    if hits.size == 0:
        return 0.0
    return float(np.mean(np.arange(1, hits.size + 1) / (hits + 1)))


def mean_ap(result):
    valid = _valid(result)
    if not valid:
        return 0.0
    return float(np.mean([average_precision(m) for m in valid]))


def retrieval_metrics(result, ks=RANKS):
    c = cmc(result, ks)
    rec = {f"rank{k}": float(v) for k, v in zip(ks, c)}
    rec["mAP"] = mean_ap(result)
    rec["n_queries"] = len(_valid(result))
    rec["n_skipped"] = len(result) - len(_valid(result)) + len(result.skipped)
    return rec


def macro_average(records, keys=("rank1", "rank5", "rank10", "mAP")):
    return {k: float(np.mean([r[k] for r in records])) for k in keys}


def clustering_quality(labels, identities):
    """Pairwise precision/recall/F1 of a pseudo-labeling against true ids.

    Every outlier is its own singleton, so it pairs with nothing.
    """
    labels = np.asarray(labels)
    identities = np.asarray(identities)
    n = len(labels)
    if n != len(identities):
        raise ValueError("labels and identities differ in length")
    # relabel outliers as unique singletons
    lab = labels.astype(np.int64).copy()
    out = lab == OUTLIER
    lab[out] = lab.max(initial=-1) + 1 + np.arange(out.sum())

    def same_pairs(x):
        if len(x) == 0:
            return 0
        _, counts = np.unique(x, axis=0, return_counts=True)
        return int((counts * (counts - 1) // 2).sum())

    pred = same_pairs(lab)
    true = same_pairs(identities)
    joint = same_pairs(np.stack([lab, identities], axis=1))
    precision = joint / pred if pred else 1.0
    recall = joint / true if true else 1.0
    f1 = 2 * precision * recall / (precision + recall) if precision + recall > 0 else 0.0
    n_clusters = int(len(np.unique(labels[labels != OUTLIER])))
    return {"precision": precision, "recall": recall, "f1": f1, "n_clusters": n_clusters}


def write_ranklists(result, path, top=10):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["query_index", "rank", "gallery_index", "is_match"])
        for qi, order, match in zip(result.query_index, result.orders, result.matches):
            for r in range(min(top, len(order))):
                w.writerow([qi, r + 1, int(order[r]), int(match[r])])
