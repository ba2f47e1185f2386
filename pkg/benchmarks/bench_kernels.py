"""Time the numba and numpy clustering kernels side by side.

    python benchmarks/bench_kernels.py --sizes 100 200 400 --repeat 5

Both backends are run on the same inputs and their outputs are compared
before any timing is reported. Compile time of the numba kernels is paid
in a warm-up call and reported separately.
"""
import argparse
import math
import time

import numpy as np

from fedcc import _kernels
from fedcc._accel import HAVE_NUMBA
from fedcc.clustering import cosine_distances
from fedcc.model import l2_normalize


def make_distances(n, dim, seed):
    rng = np.random.default_rng(seed)
    # clumpy data: n/8 centers with 8 noisy members each, like the training sets
    centers = rng.normal(size=(max(1, n // 8), dim))
    x = centers[rng.integers(0, len(centers), n)] + 0.3 * rng.normal(size=(n, dim))
    return cosine_distances(l2_normalize(x))


def pipeline(kern, dist, k1):
    order = _kernels.neighbor_order(dist)
    r_full = kern["reciprocal_sets"](order, k1)
    r_half = kern["reciprocal_sets"](order, math.ceil(k1 / 2))
    r_star = kern["expand_sets"](r_full, r_half)
    jac = kern["jaccard"](r_star)
    labels = kern["dbscan"](jac, 0.5, 2)
    return {"reciprocal": r_full, "expand": r_star, "jaccard": jac, "dbscan": labels}


def time_stages(kern, dist, k1, repeat):
    order = _kernels.neighbor_order(dist)
    k_half = math.ceil(k1 / 2)
    r_full = kern["reciprocal_sets"](order, k1)
    r_half = kern["reciprocal_sets"](order, k_half)
    r_star = kern["expand_sets"](r_full, r_half)
    jac = kern["jaccard"](r_star)
    calls = {
        "reciprocal": lambda: kern["reciprocal_sets"](order, k1),
        "expand": lambda: kern["expand_sets"](r_full, r_half),
        "jaccard": lambda: kern["jaccard"](r_star),
        "dbscan": lambda: kern["dbscan"](jac, 0.5, 2),
    }
    out = {}
    for name, f in calls.items():
        best = math.inf
        for _ in range(repeat):
            t0 = time.perf_counter()
            f()
            best = min(best, time.perf_counter() - t0)
        out[name] = best
    return out


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--sizes", type=int, nargs="+", default=[100, 200, 400, 800])
    ap.add_argument("--dim", type=int, default=32)
    ap.add_argument("--k1", type=int, default=20)
    ap.add_argument("--repeat", type=int, default=5)
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args()

    if not HAVE_NUMBA:
        print("numba is not installed; only the numpy kernels can be timed")
    backends = ["numpy"] + (["numba"] if HAVE_NUMBA else [])

    if HAVE_NUMBA:
        t0 = time.perf_counter()
        pipeline(_kernels.BACKENDS["numba"], make_distances(30, args.dim, args.seed), 5)
        print(f"numba warm-up (compile or cache load): {time.perf_counter() - t0:.2f}s")

    print(f"{'n':>6} {'stage':>11} " + " ".join(f"{b + ' ms':>10}" for b in backends)
          + ("   speedup" if HAVE_NUMBA else ""))
    for n in args.sizes:
        dist = make_distances(n, args.dim, args.seed)
        k1 = min(args.k1, n - 1)
        if HAVE_NUMBA:
            a = pipeline(_kernels.BACKENDS["numpy"], dist, k1)
            b = pipeline(_kernels.BACKENDS["numba"], dist, k1)
            for key in a:
                if not np.array_equal(a[key], b[key]):
                    raise SystemExit(f"backends disagree on {key} at n={n}")
        times = {b: time_stages(_kernels.BACKENDS[b], dist, k1, args.repeat) for b in backends}
        for stage in times["numpy"]:
            cells = " ".join(f"{1e3 * times[b][stage]:10.3f}" for b in backends)
            ratio = f"{times['numpy'][stage] / times['numba'][stage]:9.2f}x" if HAVE_NUMBA else ""
            print(f"{n:>6} {stage:>11} {cells} {ratio}")


if __name__ == "__main__":
    main()
