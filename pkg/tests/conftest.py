import os
import sys

import numpy as np
import pytest

sys.path.insert(0, os.path.dirname(__file__))

from fedcc.data import SyntheticConfig, generate  # noqa: E402
from fedcc.model import Architecture, init_params  # noqa: E402


def random_params(arch, rng, perturb=0.3):
    """Init params with every tensor jittered, running stats included."""
    p = init_params(arch, rng)
    flat = p.flat + perturb * rng.normal(size=p.flat.shape)
    lay = p.layout
    for name in ("bn1.running_var", "bn2.running_var"):
        flat[lay.slices[name]] = rng.uniform(0.5, 2.0, lay.slices[name].stop - lay.slices[name].start)
    return p.with_flat(flat)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture
def small_arch():
    return Architecture(d_in=6, hidden=8, embed_dim=5, n_parts=2)


@pytest.fixture(scope="session")
def tiny_clients():
    cfg = SyntheticConfig(n_clients=3, identities_per_client=6, images_per_identity=6,
                          test_identities_per_client=5, d_in=8, n_parts=2, noise=0.2,
                          identity_multipliers=[1.0, 1.5, 0.5], seed=3)
    return cfg, generate(cfg)


# ------------------------------------------------------- acceptance report

@pytest.fixture
def criterion(request):
    """``criterion(n, ok, detail)`` records one acceptance line for the summary."""
    lines = request.config.__dict__.setdefault("_acceptance_lines", {})

    def record(n, ok, detail):
        lines[n] = f"CRITERION {n}: {'PASS' if ok else 'FAIL'}  {detail}"
        print(lines[n])
        return ok
    return record


def pytest_terminal_summary(terminalreporter, config):
    lines = config.__dict__.get("_acceptance_lines")
    if lines:
        terminalreporter.section("acceptance criteria")
        for n in sorted(lines):
            terminalreporter.write_line(lines[n])
