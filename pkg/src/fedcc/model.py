"""Small part-based encoder with batch normalization and hand-written backprop.

Each input carries ``n_parts`` pre-split segments. One shared trunk,

    linear -> BN -> ReLU -> linear -> BN

maps every segment to a part embedding ``z_r``. The holistic embedding is
``normalize(mean_r z_r)``; patch embedding ``r`` is ``normalize(head_r(z_r))``.
Batch-norm statistics are pooled over all segments of the batch, the way a
conv BN pools over spatial positions.

All weights live in one flat float64 vector. Batch-norm state (gamma, beta,
running mean and variance) is the *specialized* part; everything else,
patch heads included, is *generic*.
"""
import json
from dataclasses import dataclass, field

import numpy as np

CHECKPOINT_VERSION = 1
NORM_FLOOR = 1e-12


class ModelError(ValueError):
    pass


@dataclass(frozen=True)
class Architecture:
    d_in: int = 32
    hidden: int = 64
    embed_dim: int = 32
    n_parts: int = 2
    bn_eps: float = 1e-5
    bn_momentum: float = 0.1

    def __post_init__(self):
        for name in ("d_in", "hidden", "embed_dim", "n_parts"):
            if getattr(self, name) < 1:
                raise ModelError(f"{name} must be >= 1")
        if not self.bn_eps > 0:
            raise ModelError("bn_eps must be positive")
        if not 0.0 <= self.bn_momentum <= 1.0:
            raise ModelError("bn_momentum must lie in [0, 1]")

    def shapes(self):
        """Ordered ``(name, shape, specialized, trainable)`` table of every tensor."""
        d, h, e = self.d_in, self.hidden, self.embed_dim
        rows = [("lin1.weight", (h, d), False, True), ("lin1.bias", (h,), False, True)]
        rows += _bn_rows("bn1", h)
        rows += [("lin2.weight", (e, h), False, True), ("lin2.bias", (e,), False, True)]
        rows += _bn_rows("bn2", e)
        for r in range(self.n_parts):
            rows += [(f"head{r}.weight", (e, e), False, True), (f"head{r}.bias", (e,), False, True)]
        return rows

    def to_dict(self):
        return {k: getattr(self, k) for k in self.__dataclass_fields__}


def _bn_rows(prefix, c):
    return [
        (f"{prefix}.gamma", (c,), True, True),
        (f"{prefix}.beta", (c,), True, True),
        (f"{prefix}.running_mean", (c,), True, False),
        (f"{prefix}.running_var", (c,), True, False),
    ]


@dataclass(frozen=True)
class Layout:
    slices: dict
    shapes: dict
    size: int
    specialized: np.ndarray  # bool mask over the flat vector
    trainable: np.ndarray

    @classmethod
    def of(cls, arch):
        slices, shapes = {}, {}
        spec_parts, train_parts = [], []
        off = 0
        for name, shape, spec, train in arch.shapes():
            n = int(np.prod(shape))
            slices[name] = slice(off, off + n)
            shapes[name] = shape
            spec_parts.append(np.full(n, spec))
            train_parts.append(np.full(n, train))
            off += n
        return cls(slices, shapes, off, np.concatenate(spec_parts), np.concatenate(train_parts))


_LAYOUTS = {}


def layout_of(arch):
    if arch not in _LAYOUTS:
        _LAYOUTS[arch] = Layout.of(arch)
    return _LAYOUTS[arch]


@dataclass(frozen=True, eq=False)
class EncoderParams:
    """Immutable view over a flat parameter vector."""

    arch: Architecture
    flat: np.ndarray = field(repr=False)

    def __post_init__(self):
        flat = np.asarray(self.flat, dtype=np.float64)
        if flat.shape != (layout_of(self.arch).size,):
            raise ModelError(
                f"flat vector has shape {flat.shape}, architecture needs ({layout_of(self.arch).size},)"
            )
        flat = flat.copy()
        flat.setflags(write=False)
        object.__setattr__(self, "flat", flat)

    @property
    def layout(self):
        return layout_of(self.arch)

    def __getitem__(self, name):
        lay = self.layout
        return self.flat[lay.slices[name]].reshape(lay.shapes[name])

    def replace(self, **tensors):
        flat = self.flat.copy()
        lay = self.layout
        for key, value in tensors.items():
            name = key.replace("__", ".")
            flat[lay.slices[name]] = np.asarray(value, dtype=np.float64).ravel()
        return EncoderParams(self.arch, flat)

    def with_flat(self, flat):
        return EncoderParams(self.arch, flat)

    def equals(self, other):
        return self.arch == other.arch and np.array_equal(self.flat, other.flat)


def init_params(arch, rng):
    """He-normal linear layers, unit-gamma BN, identity patch heads."""
    tensors = {}
    tensors["lin1.weight"] = rng.normal(0.0, np.sqrt(2.0 / arch.d_in), (arch.hidden, arch.d_in))
    tensors["lin1.bias"] = np.zeros(arch.hidden)
    tensors["lin2.weight"] = rng.normal(0.0, np.sqrt(2.0 / arch.hidden), (arch.embed_dim, arch.hidden))
    tensors["lin2.bias"] = np.zeros(arch.embed_dim)
    for prefix, c in (("bn1", arch.hidden), ("bn2", arch.embed_dim)):
        tensors[f"{prefix}.gamma"] = np.ones(c)
        tensors[f"{prefix}.beta"] = np.zeros(c)
        tensors[f"{prefix}.running_mean"] = np.zeros(c)
        tensors[f"{prefix}.running_var"] = np.ones(c)
    for r in range(arch.n_parts):
        tensors[f"head{r}.weight"] = np.eye(arch.embed_dim)
        tensors[f"head{r}.bias"] = np.zeros(arch.embed_dim)
    lay = layout_of(arch)
    flat = np.empty(lay.size)
    for name, value in tensors.items():
        flat[lay.slices[name]] = value.ravel()
    return EncoderParams(arch, flat)


# ------------------------------------------------------------------ partition

@dataclass(frozen=True, eq=False)
class ParamPartition:
    generic: np.ndarray
    specialized: np.ndarray


def partition(params):
    mask = params.layout.specialized
    return ParamPartition(generic=params.flat[~mask].copy(), specialized=params.flat[mask].copy())


def merge(arch, generic, specialized):
    lay = layout_of(arch)
    n_spec = int(lay.specialized.sum())
    generic = np.asarray(generic, dtype=np.float64)
    specialized = np.asarray(specialized, dtype=np.float64)
    if generic.shape != (lay.size - n_spec,):
        raise ModelError(f"generic vector has {generic.size} entries, expected {lay.size - n_spec}")
    if specialized.shape != (n_spec,):
        raise ModelError(f"specialized vector has {specialized.size} entries, expected {n_spec}")
    flat = np.empty(lay.size)
    flat[~lay.specialized] = generic
    flat[lay.specialized] = specialized
    return EncoderParams(arch, flat)


# -------------------------------------------------------------------- forward

@dataclass
class ForwardResult:
    holistic: np.ndarray  # (B, e), unit rows
    patches: np.ndarray  # (B, p, e), unit rows
    params: EncoderParams  # running stats refreshed in train mode
    cache: dict = field(repr=False)

    def concat(self):
        """``[u ; q_1 ; ... ; q_p]`` renormalized to unit length."""
        b = self.holistic.shape[0]
        cat = np.concatenate([self.holistic, self.patches.reshape(b, -1)], axis=1)
        return l2_normalize(cat)


def l2_normalize(x):
    norm = np.linalg.norm(x, axis=-1, keepdims=True)
    return x / np.maximum(norm, NORM_FLOOR)


def _norm_backward(y, norm, dy):
    # y = x / |x|  =>  dx = (dy - y <y, dy>) / |x|
    return (dy - y * np.sum(y * dy, axis=-1, keepdims=True)) / np.maximum(norm, NORM_FLOOR)


def _bn_forward(x, gamma, beta, rmean, rvar, eps, train):
    if train:
        mu = x.mean(axis=0)
        var = x.var(axis=0)
    else:
        mu, var = rmean, rvar
    inv_std = 1.0 / np.sqrt(var + eps)
    xhat = (x - mu) * inv_std
    return gamma * xhat + beta, (xhat, inv_std, mu, var)


def _bn_backward(dy, gamma, xhat, inv_std):
    n = dy.shape[0]
    dgamma = np.sum(dy * xhat, axis=0)
    dbeta = dy.sum(axis=0)
    dxhat = dy * gamma
    dx = inv_std / n * (n * dxhat - dxhat.sum(axis=0) - xhat * np.sum(dxhat * xhat, axis=0))
    return dx, dgamma, dbeta


def _check_batch(params, batch):
    x = np.asarray(batch, dtype=np.float64)
    a = params.arch
    if x.ndim != 3 or x.shape[1:] != (a.n_parts, a.d_in):
        raise ModelError(f"batch must have shape (B, {a.n_parts}, {a.d_in}), got {x.shape}")
    if x.shape[0] == 0:
        raise ModelError("empty batch")
    if not np.all(np.isfinite(x)):
        raise ModelError("batch contains non-finite values")
    return x


def forward(params, batch, mode="eval"):
    """Run the encoder on ``batch`` of shape ``(B, n_parts, d_in)``."""
    if mode not in ("train", "eval"):
        raise ModelError(f"mode must be 'train' or 'eval', got {mode!r}")
    train = mode == "train"
    x3 = _check_batch(params, batch)
    if train and x3.shape[0] < 2:
        raise ModelError("train mode needs at least 2 inputs for batch statistics")
    a = params.arch
    b, p = x3.shape[0], a.n_parts
    x = x3.reshape(b * p, a.d_in)

    h1 = x @ params["lin1.weight"].T + params["lin1.bias"]
    y1, bn1 = _bn_forward(h1, params["bn1.gamma"], params["bn1.beta"],
                          params["bn1.running_mean"], params["bn1.running_var"], a.bn_eps, train)
    a1 = np.maximum(y1, 0.0)
    h2 = a1 @ params["lin2.weight"].T + params["lin2.bias"]
    z, bn2 = _bn_forward(h2, params["bn2.gamma"], params["bn2.beta"],
                         params["bn2.running_mean"], params["bn2.running_var"], a.bn_eps, train)
    z3 = z.reshape(b, p, a.embed_dim)

    f = z3.mean(axis=1)
    f_norm = np.linalg.norm(f, axis=1, keepdims=True)
    u = f / np.maximum(f_norm, NORM_FLOOR)

    g = np.empty_like(z3)
    for r in range(p):
        g[:, r] = z3[:, r] @ params[f"head{r}.weight"].T + params[f"head{r}.bias"]
    g_norm = np.linalg.norm(g, axis=2, keepdims=True)
    q = g / np.maximum(g_norm, NORM_FLOOR)

    out_params = params
    if train:
        m = a.bn_momentum
        rows = b * p
        unbias = rows / (rows - 1)
        out_params = params.replace(**{
            "bn1__running_mean": (1 - m) * params["bn1.running_mean"] + m * bn1[2],
            "bn1__running_var": (1 - m) * params["bn1.running_var"] + m * bn1[3] * unbias,
            "bn2__running_mean": (1 - m) * params["bn2.running_mean"] + m * bn2[2],
            "bn2__running_var": (1 - m) * params["bn2.running_var"] + m * bn2[3] * unbias,
        })

    cache = dict(train=train, x=x, y1=y1, a1=a1, bn1=bn1, bn2=bn2, z3=z3,
                 u=u, f_norm=f_norm, q=q, g_norm=g_norm, batch=b)
    return ForwardResult(holistic=u, patches=q, params=out_params, cache=cache)


def backward(params, cache, grad_holistic=None, grad_patches=None):
    """Exact gradient w.r.t. the flat parameter vector.

    Running statistics get zero gradient. ``cache`` must come from a
    train-mode ``forward`` on these same ``params``.
    """
    if not cache.get("train"):
        raise ModelError("backward needs the cache of a train-mode forward pass")
    a = params.arch
    b, p, e = cache["batch"], a.n_parts, a.embed_dim
    if grad_holistic is None:
        grad_holistic = np.zeros((b, e))
    if grad_patches is None:
        grad_patches = np.zeros((b, p, e))
    grad_holistic = np.asarray(grad_holistic, dtype=np.float64)
    grad_patches = np.asarray(grad_patches, dtype=np.float64)
    if grad_holistic.shape != (b, e):
        raise ModelError(f"grad_holistic must have shape {(b, e)}, got {grad_holistic.shape}")
    if grad_patches.shape != (b, p, e):
        raise ModelError(f"grad_patches must have shape {(b, p, e)}, got {grad_patches.shape}")

    lay = params.layout
    grad = np.zeros(lay.size)

    def put(name, value):
        grad[lay.slices[name]] = value.ravel()

    z3 = cache["z3"]
    df = _norm_backward(cache["u"], cache["f_norm"], grad_holistic)
    dz3 = np.repeat(df[:, None, :] / p, p, axis=1)
    dg = _norm_backward(cache["q"], cache["g_norm"], grad_patches)
    for r in range(p):
        put(f"head{r}.weight", dg[:, r].T @ z3[:, r])
        put(f"head{r}.bias", dg[:, r].sum(axis=0))
        dz3[:, r] += dg[:, r] @ params[f"head{r}.weight"]

    dz = dz3.reshape(b * p, e)
    xhat2, inv2 = cache["bn2"][0], cache["bn2"][1]
    dh2, dgam2, dbet2 = _bn_backward(dz, params["bn2.gamma"], xhat2, inv2)
    put("bn2.gamma", dgam2)
    put("bn2.beta", dbet2)
    put("lin2.weight", dh2.T @ cache["a1"])
    put("lin2.bias", dh2.sum(axis=0))

    da1 = dh2 @ params["lin2.weight"]
    dy1 = da1 * (cache["y1"] > 0)
    xhat1, inv1 = cache["bn1"][0], cache["bn1"][1]
    dh1, dgam1, dbet1 = _bn_backward(dy1, params["bn1.gamma"], xhat1, inv1)
    put("bn1.gamma", dgam1)
    put("bn1.beta", dbet1)
    put("lin1.weight", dh1.T @ cache["x"])
    put("lin1.bias", dh1.sum(axis=0))
    return grad


def embed(params, features, mode="eval", concat=False, chunk=512):
    """Eval-mode embeddings for a whole array, in chunks."""
    out = []
    for start in range(0, len(features), chunk):
        res = forward(params, features[start:start + chunk], mode)
        out.append(res.concat() if concat else res.holistic)
    if not out:
        dim = params.arch.embed_dim * (params.arch.n_parts + 1 if concat else 1)
        return np.zeros((0, dim))
    return np.concatenate(out)


# ---------------------------------------------------------------- checkpoints

def save_params(path, params, **meta):
    """Write ``params`` as an ``.npz`` with a JSON architecture header."""
    header = {"version": CHECKPOINT_VERSION, "arch": params.arch.to_dict(), "meta": meta}
    with open(path, "wb") as fh:
        np.savez(fh, header=np.array(json.dumps(header, sort_keys=True)), flat=params.flat)


def load_params(path):
    with np.load(path, allow_pickle=False) as z:
        header = json.loads(str(z["header"]))
        flat = z["flat"]
    if header.get("version") != CHECKPOINT_VERSION:
        raise ModelError(f"unsupported checkpoint version {header.get('version')!r}")
    return EncoderParams(Architecture(**header["arch"]), flat), header.get("meta", {})
