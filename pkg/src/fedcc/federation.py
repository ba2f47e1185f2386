"""Rounds, aggregation and the three-stage schedule.

A global round: every client re-clusters its data with the model it holds,
rebuilds its centroid memory, trains for ``local_epochs`` and uploads.
The server averages with weights ``n_k / n`` and sends the result back:

* Stage I  -- everything is averaged and every client gets the full model.
* Stage II -- only the generic vector is averaged; each client merges it with
  its own batch-norm state (localization).
* Stage III -- as Stage II, plus patch heads, patch centroids and the patch
  loss; clustering and evaluation use ``[u ; q_1 ; ... ; q_p]``.

The ``B`` stage is the plain baseline: DBSCAN labels, cross-entropy over a
fresh linear classifier, full averaging.
"""
import json
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from enum import Enum

import numpy as np

from . import evaluation
from .clustering import OUTLIER, ClusteringConfig, pseudo_labels
from .memory import MemoryConfig, infonce_batch, init_centroids, joint_loss, patch_infonce_batch
from .model import EncoderParams, embed, forward, backward, init_params, l2_normalize, merge, partition

LOG_SCHEMA_VERSION = 1


class TrainingError(RuntimeError):
    pass


class ScheduleError(ValueError):
    pass


class Aggregation(str, Enum):
    FULL = "full"
    GENERIC_ONLY = "generic_only"


class LossMode(str, Enum):
    HOLISTIC = "holistic"
    HOLISTIC_PLUS_PATCH = "holistic_plus_patch"
    CROSS_ENTROPY = "cross_entropy"


STAGE_RULES = {
    "I": (Aggregation.FULL, LossMode.HOLISTIC),
    "II": (Aggregation.GENERIC_ONLY, LossMode.HOLISTIC),
    "III": (Aggregation.GENERIC_ONLY, LossMode.HOLISTIC_PLUS_PATCH),
    "B": (Aggregation.FULL, LossMode.CROSS_ENTROPY),
}


@dataclass(frozen=True)
class StageSpec:
    stage: str
    local_epochs: int
    rounds: int

    def __post_init__(self):
        if self.stage not in STAGE_RULES:
            raise ScheduleError(f"unknown stage {self.stage!r}; expected one of {sorted(STAGE_RULES)}")
        if self.local_epochs < 1:
            raise ScheduleError(f"stage {self.stage}: local_epochs must be >= 1")
        if self.rounds < 1:
            raise ScheduleError(f"stage {self.stage}: rounds must be >= 1")

    @property
    def aggregation(self):
        return STAGE_RULES[self.stage][0]

    @property
    def loss(self):
        return STAGE_RULES[self.stage][1]

    @property
    def uses_patches(self):
        return self.loss is LossMode.HOLISTIC_PLUS_PATCH


_I, _II, _III = StageSpec("I", 1, 100), StageSpec("II", 5, 100), StageSpec("III", 5, 100)

PRESETS = {
    "backbone": (StageSpec("B", 5, 100),),
    "stage1": (_I,),
    "stage12": (_I, _II),
    "stage13": (_I, _III),
    "full": (_I, _II, _III),
}


def make_schedule(stages, rounds_override=None):
    stages = tuple(stages)
    if not stages:
        raise ScheduleError("schedule has no stages")
    if rounds_override is not None:
        stages = tuple(replace(s, rounds=int(rounds_override)) for s in stages)
    return stages


def preset(name, rounds_override=None):
    if name not in PRESETS:
        raise ScheduleError(f"unknown ablation preset {name!r}; expected one of {sorted(PRESETS)}")
    return make_schedule(PRESETS[name], rounds_override)


@dataclass
class OptimizerConfig:
    lr: float = 3.5e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    batch_size: int = 64
    classifier_init_std: float = 0.01

    def __post_init__(self):
        if not self.lr > 0:
            raise ValueError("lr must be positive")
        if not (0 <= self.beta1 < 1 and 0 <= self.beta2 < 1):
            raise ValueError("Adam betas must lie in [0, 1)")
        if self.batch_size < 2:
            raise ValueError("batch_size must be >= 2 (batch-norm statistics)")


class Adam:
    """Plain Adam over a flat vector; entries outside ``mask`` stay put."""

    def __init__(self, size, cfg, mask=None):
        self.cfg = cfg
        self.m = np.zeros(size)
        self.v = np.zeros(size)
        self.t = 0
        self.mask = np.ones(size, dtype=bool) if mask is None else mask

    def step(self, flat, grad):
        c = self.cfg
        self.t += 1
        g = np.where(self.mask, grad, 0.0)
        self.m = c.beta1 * self.m + (1 - c.beta1) * g
        self.v = c.beta2 * self.v + (1 - c.beta2) * g * g
        m_hat = self.m / (1 - c.beta1 ** self.t)
        v_hat = self.v / (1 - c.beta2 ** self.t)
        return np.where(self.mask, flat - c.lr * m_hat / (np.sqrt(v_hat) + c.eps), flat)


@dataclass
class TrainOptions:
    clustering: ClusteringConfig = field(default_factory=ClusteringConfig)
    memory: MemoryConfig = field(default_factory=MemoryConfig)
    optimizer: OptimizerConfig = field(default_factory=OptimizerConfig)
    eval_interval: int = 1

    def __post_init__(self):
        if self.eval_interval < 1:
            raise ValueError("eval_interval must be >= 1")


# ------------------------------------------------------------------- clients

@dataclass
class ClientState:
    client_id: int
    features: np.ndarray  # (n, p, d_in) training images, no labels
    params: EncoderParams
    optimizer: Adam | None = None
    memory: object = None
    last_assignment: object = None

    @property
    def n_images(self):
        return len(self.features)


@dataclass
class ClientReport:
    client_id: int
    n_images: int
    n_clusters: int
    n_outliers: int
    trained: bool
    loss: float | None
    epoch_losses: list


def extract(params, features, concat):
    """Eval-mode ``(clustering features, holistic, patches)`` for all images."""
    us, qs = [], []
    for start in range(0, len(features), 512):
        res = forward(params, features[start:start + 512], "eval")
        us.append(res.holistic)
        qs.append(res.patches)
    u, q = np.concatenate(us), np.concatenate(qs)
    feats = l2_normalize(np.concatenate([u, q.reshape(len(q), -1)], axis=1)) if concat else u
    return feats, u, q


def _batches(idx, batch_size, rng):
    order = idx[rng.permutation(len(idx))]
    bs = min(batch_size, len(order))
    for start in range(0, len(order), bs):
        b = order[start:start + bs]
        if len(b) >= 2:
            yield b


def client_local_round(client, spec, opts, rng):
    """One round of local work. Returns the updated client and its report.

    The input ``client`` is not modified.
    """
    if client.optimizer is None:
        raise TrainingError(f"client {client.client_id} has no optimizer; start a stage first")
    x = client.features
    feats, u_all, q_all = extract(client.params, x, spec.uses_patches)
    c = opts.clustering
    assign = pseudo_labels(feats, c.eps, c.min_samples, c.k1, c.k2, c.query_expansion)
    out = replace(client, last_assignment=assign)
    idx = np.flatnonzero(assign.labels != OUTLIER)
    report = ClientReport(client.client_id, client.n_images, assign.n_clusters,
                          assign.n_outliers, False, None, [])
    if assign.n_clusters == 0 or len(idx) < 2:
        return out, report

    labels = assign.labels
    params = client.params
    opt = _copy_adam(client.optimizer)
    mem = None
    classifier = None
    if spec.loss is LossMode.CROSS_ENTROPY:
        classifier = _Classifier(assign.n_clusters, params.arch.embed_dim, opts.optimizer, rng)
    else:
        mem = init_centroids(u_all, assign, q_all if spec.uses_patches else None,
                             opts.memory.tau, opts.memory.momentum)

    for _ in range(spec.local_epochs):
        losses = []
        for b in _batches(idx, opts.optimizer.batch_size, rng):
            res = forward(params, x[b], "train")
            y = labels[b]
            gq = None
            if classifier is not None:
                loss, gu = classifier.loss_and_step(res.holistic, y)
            else:
                lu, gu = infonce_batch(res.holistic, y, mem.holistic, mem.tau)
                lp = None
                if spec.uses_patches:
                    lp, gq = patch_infonce_batch(res.patches, y, mem)
                loss = joint_loss(lu, lp)
            if not math.isfinite(loss):
                raise TrainingError(f"non-finite loss on client {client.client_id}")
            grad = backward(params, res.cache, gu, gq)
            params = res.params.with_flat(opt.step(res.params.flat, grad))
            if mem is not None:
                mem.update_batch(y, res.holistic, res.patches if spec.uses_patches else None)
            losses.append(loss)
        if losses:
            report.epoch_losses.append(float(np.mean(losses)))

    if report.epoch_losses:
        report.trained = True
        report.loss = report.epoch_losses[-1]
    out = replace(out, params=params, optimizer=opt, memory=mem)
    return out, report


def _copy_adam(opt):
    new = Adam.__new__(Adam)
    new.cfg, new.m, new.v, new.t, new.mask = opt.cfg, opt.m.copy(), opt.v.copy(), opt.t, opt.mask
    return new


class _Classifier:
    """Linear softmax head for the baseline; rebuilt whenever labels change."""

    def __init__(self, n_classes, dim, cfg, rng):
        self.w = cfg.classifier_init_std * rng.normal(size=(n_classes, dim))
        self.b = np.zeros(n_classes)
        self.opt = Adam(self.w.size + self.b.size, cfg)

    def loss_and_step(self, u, y):
        n = len(y)
        logits = u @ self.w.T + self.b
        shift = logits - logits.max(axis=1, keepdims=True)
        log_z = np.log(np.exp(shift).sum(axis=1))
        rows = np.arange(n)
        loss = float(np.mean(log_z - shift[rows, y]))
        prob = np.exp(shift - log_z[:, None])
        prob[rows, y] -= 1.0
        prob /= n
        gu = prob @ self.w
        grad = np.concatenate([(prob.T @ u).ravel(), prob.sum(axis=0)])
        flat = self.opt.step(np.concatenate([self.w.ravel(), self.b]), grad)
        self.w = flat[: self.w.size].reshape(self.w.shape)
        self.b = flat[self.w.size:]
        return loss, gu


# -------------------------------------------------------------------- server

def aggregation_weights(sizes):
    sizes = [int(s) for s in sizes]
    if not sizes or any(s < 1 for s in sizes):
        raise ValueError("every client needs at least one image")
    n = sum(sizes)
    return [s / n for s in sizes]


def aggregate_full(uploads):
    """``sum_k (n_k / n) * theta_k`` over full parameter vectors.

    ``uploads`` is a list of ``(EncoderParams, n_k)`` in client-id order;
    summation follows that order.
    """
    if not uploads:
        raise ValueError("no clients to aggregate")
    arch = uploads[0][0].arch
    if any(p.arch != arch for p, _ in uploads):
        raise ValueError("cannot aggregate clients with different architectures")
    weights = aggregation_weights([n for _, n in uploads])
    acc = np.zeros_like(uploads[0][0].flat)
    for (p, _), w in zip(uploads, weights):
        acc += w * p.flat
    return EncoderParams(arch, acc)


def aggregate_generic(uploads):
    """Weighted average of generic vectors. ``uploads``: ``(generic, n_k)`` pairs."""
    if not uploads:
        raise ValueError("no clients to aggregate")
    size = len(uploads[0][0])
    if any(len(g) != size for g, _ in uploads):
        raise ValueError("generic vectors differ in length")
    weights = aggregation_weights([n for _, n in uploads])
    acc = np.zeros(size)
    for (g, _), w in zip(uploads, weights):
        acc += w * np.asarray(g, dtype=np.float64)
    return acc


def localize(global_generic, client_params):
    """Fresh generic weights + the client's own batch-norm state."""
    return merge(client_params.arch, global_generic, partition(client_params).specialized)


# ------------------------------------------------------------------ training

@dataclass
class EvalSet:
    query: np.ndarray
    gallery: np.ndarray
    query_ids: np.ndarray
    query_cams: np.ndarray
    gallery_ids: np.ndarray
    gallery_cams: np.ndarray

    @classmethod
    def from_dataset(cls, ds):
        q, g = ds.select("query"), ds.select("gallery")
        return cls(q.features, g.features, q.identity_ids, q.camera_ids, g.identity_ids, g.camera_ids)


def evaluate_client(params, eval_set, concat, return_ranking=False):
    qf = embed(params, eval_set.query, concat=concat)
    gf = embed(params, eval_set.gallery, concat=concat)
    result = evaluation.rank(qf, gf, eval_set.query_ids, eval_set.query_cams,
                             eval_set.gallery_ids, eval_set.gallery_cams)
    metrics = evaluation.retrieval_metrics(result)
    return (metrics, result) if return_ranking else metrics


@dataclass
class TrainingResult:
    records: list
    clients: list
    schedule: tuple
    final_metrics: list
    global_generic: np.ndarray | None = None


def run_training(datasets, schedule, arch, opts=None, seed=0, workers=1,
                 log=None, on_redistribute=None, on_stage_end=None):
    """Run every stage of ``schedule`` over the clients in ``datasets``.

    ``log`` receives each JSON-serializable metrics record as it is produced.
    ``on_redistribute(stage_spec, round, before, after)`` sees every client's
    params right before and after the server hands out the new model.
    ``on_stage_end(stage_index, stage_spec, clients, global_generic)`` fires
    after the last round of each stage.
    """
    opts = opts or TrainOptions()
    schedule = make_schedule(schedule)
    if not datasets:
        raise TrainingError("no clients")
    # client-id order fixes the summation order, hence bit-exact aggregates
    datasets = sorted(datasets, key=lambda d: d.client_id)
    ids = [d.client_id for d in datasets]
    if len(set(ids)) != len(ids):
        raise TrainingError(f"duplicate client ids: {ids}")
    init = init_params(arch, np.random.default_rng([seed, 0]))
    clients = [ClientState(ds.client_id, ds.train_features(), init) for ds in datasets]
    if any(c.n_images < 1 for c in clients):
        raise TrainingError("every client needs at least one training image")
    eval_sets = [EvalSet.from_dataset(ds) for ds in datasets]
    records = []
    final_metrics = []
    global_generic = None

    def emit(rec):
        records.append(rec)
        if log is not None:
            log(rec)

    trainable = init.layout.trainable
    global_round = 0
    pool = ThreadPoolExecutor(max_workers=workers) if workers > 1 else None
    try:
        for s_idx, spec in enumerate(schedule):
            for c in clients:
                c.optimizer = Adam(init.layout.size, opts.optimizer, trainable)
            for t in range(spec.rounds):
                global_round += 1
                rngs = [np.random.default_rng([seed, s_idx + 1, t, c.client_id]) for c in clients]
                jobs = [(c, spec, opts, r) for c, r in zip(clients, rngs)]
                try:
                    if pool is None:
                        outs = [client_local_round(*j) for j in jobs]
                    else:
                        outs = list(pool.map(lambda j: client_local_round(*j), jobs))
                except TrainingError as exc:
                    raise TrainingError(f"{exc} (stage {spec.stage}, round {t + 1})") from exc
                clients = [o[0] for o in outs]
                reports = [o[1] for o in outs]

                before = [c.params for c in clients]
                if spec.aggregation is Aggregation.FULL:
                    g = aggregate_full([(c.params, c.n_images) for c in clients])
                    after = [g for _ in clients]
                    global_generic = partition(g).generic
                else:
                    global_generic = aggregate_generic(
                        [(partition(c.params).generic, c.n_images) for c in clients])
                    after = [localize(global_generic, c.params) for c in clients]
                if on_redistribute is not None:
                    on_redistribute(spec, t, before, after)
                for c, p in zip(clients, after):
                    c.params = p

                evaluate = (t + 1) % opts.eval_interval == 0 or t == spec.rounds - 1
                metrics = [evaluate_client(c.params, e, spec.uses_patches) if evaluate else None
                           for c, e in zip(clients, eval_sets)]
                for rep, met in zip(reports, metrics):
                    emit({
                        "v": LOG_SCHEMA_VERSION, "kind": "client", "stage": spec.stage,
                        "stage_index": s_idx, "round": t + 1, "global_round": global_round,
                        "client": rep.client_id, "n_images": rep.n_images,
                        "n_clusters": rep.n_clusters, "n_outliers": rep.n_outliers,
                        "trained": rep.trained, "loss": rep.loss,
                        "epoch_losses": rep.epoch_losses, "metrics": met,
                    })
                emit({
                    "v": LOG_SCHEMA_VERSION, "kind": "server", "stage": spec.stage,
                    "stage_index": s_idx, "round": t + 1, "global_round": global_round,
                    "aggregation": spec.aggregation.value,
                    "n_clients_trained": sum(r.trained for r in reports),
                    "macro": evaluation.macro_average(metrics) if evaluate else None,
                })
                if evaluate:
                    final_metrics = metrics
            if on_stage_end is not None:
                on_stage_end(s_idx, spec, clients, global_generic)
    finally:
        if pool is not None:
            pool.shutdown()
    return TrainingResult(records, clients, schedule, final_metrics, global_generic)


def dump_record(rec):
    return json.dumps(rec, sort_keys=True)
