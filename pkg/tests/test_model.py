import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from conftest import random_params
from oracles import central_differences, rel_error, straight_line_forward
from fedcc.model import (Architecture, ModelError, backward, embed, forward, init_params,
                         load_params, merge, partition, save_params)


def _linear_loss(params, x, gh, gp):
    res = forward(params, x, "train")
    return float(np.sum(gh * res.holistic) + np.sum(gp * res.patches))


@settings(max_examples=30, deadline=None)
@given(seed=st.integers(0, 2**32 - 1), b=st.integers(1, 7), mode=st.sampled_from(["train", "eval"]))
def test_embeddings_are_unit_norm(seed, b, mode):
    rng = np.random.default_rng(seed)
    arch = Architecture(d_in=5, hidden=7, embed_dim=4, n_parts=3)
    if mode == "train" and b < 2:
        b = 2
    res = forward(random_params(arch, rng), 3 * rng.normal(size=(b, 3, 5)), mode)
    assert np.allclose(np.linalg.norm(res.holistic, axis=1), 1.0, atol=1e-9)
    assert np.allclose(np.linalg.norm(res.patches, axis=2), 1.0, atol=1e-9)


def test_identical_inputs_in_train_mode_collapse_to_beta(small_arch, rng):
    p = init_params(small_arch, rng)
    beta2 = rng.normal(size=small_arch.embed_dim)
    p = p.replace(bn2__beta=beta2)
    seg = rng.normal(size=small_arch.d_in)
    x = np.broadcast_to(seg, (2, small_arch.n_parts, small_arch.d_in)).copy()
    res = forward(p, x, "train")
    np.testing.assert_array_equal(res.cache["bn2"][0], 0.0)
    np.testing.assert_array_equal(res.holistic[0], res.holistic[1])
    np.testing.assert_allclose(res.holistic[0], beta2 / np.linalg.norm(beta2), rtol=0, atol=1e-15)


def test_forward_matches_straight_line_reimplementation(rng):
    arch = Architecture(d_in=6, hidden=9, embed_dim=4, n_parts=2)
    p = random_params(arch, np.random.default_rng(0))
    x = rng.normal(size=(5, 2, 6))
    res = forward(p, x, "eval")
    u, q = straight_line_forward(p, x)
    np.testing.assert_allclose(res.holistic, u, rtol=0, atol=1e-12)
    np.testing.assert_allclose(res.patches, q, rtol=0, atol=1e-12)


def test_zero_upstream_gradient_gives_zero(small_arch, rng):
    p = random_params(small_arch, rng)
    res = forward(p, rng.normal(size=(4, 2, 6)), "train")
    g = backward(p, res.cache, np.zeros((4, 5)), np.zeros((4, 2, 5)))
    assert not g.any()
    assert not backward(p, res.cache).any()


@pytest.mark.parametrize("seed", range(8))
def test_gradient_matches_finite_differences(seed):
    rng = np.random.default_rng(seed)
    arch = Architecture(d_in=int(rng.integers(2, 9)), hidden=int(rng.integers(2, 9)),
                        embed_dim=int(rng.integers(2, 9)), n_parts=int(rng.integers(1, 4)))
    p = random_params(arch, rng)
    b = int(rng.integers(2, 7))
    x = rng.normal(size=(b, arch.n_parts, arch.d_in))
    gh = rng.normal(size=(b, arch.embed_dim))
    gp = rng.normal(size=(b, arch.n_parts, arch.embed_dim))
    res = forward(p, x, "train")
    analytic = backward(p, res.cache, gh, gp)
    numeric = central_differences(lambda f: _linear_loss(p.with_flat(f), x, gh, gp), p.flat,
                                  mask=p.layout.trainable)
    assert rel_error(analytic, numeric) < 1e-6
    # running statistics are state, not weights
    assert not analytic[~p.layout.trainable].any()


def test_gradient_invariant_to_batch_order(small_arch, rng):
    p = random_params(small_arch, rng)
    x = rng.normal(size=(6, 2, 6))
    gh = rng.normal(size=(6, 5))
    gp = rng.normal(size=(6, 2, 5))
    perm = rng.permutation(6)
    g1 = backward(p, forward(p, x, "train").cache, gh, gp)
    g2 = backward(p, forward(p, x[perm], "train").cache, gh[perm], gp[perm])
    np.testing.assert_allclose(g1, g2, rtol=1e-11, atol=1e-13)


def test_backward_rejects_bad_shapes_and_eval_cache(small_arch, rng):
    p = random_params(small_arch, rng)
    x = rng.normal(size=(3, 2, 6))
    with pytest.raises(ModelError):
        backward(p, forward(p, x, "train").cache, np.zeros((3, 4)))
    with pytest.raises(ModelError):
        backward(p, forward(p, x, "eval").cache, np.zeros((3, 5)))


def test_forward_preconditions(small_arch, rng):
    p = init_params(small_arch, rng)
    with pytest.raises(ModelError, match="at least 2"):
        forward(p, rng.normal(size=(1, 2, 6)), "train")
    with pytest.raises(ModelError, match="empty"):
        forward(p, np.zeros((0, 2, 6)), "eval")
    bad = rng.normal(size=(2, 2, 6))
    bad[1, 0, 3] = np.nan
    with pytest.raises(ModelError, match="non-finite"):
        forward(p, bad, "eval")
    with pytest.raises(ModelError, match="shape"):
        forward(p, rng.normal(size=(2, 3, 6)), "eval")


def test_train_mode_updates_running_stats_only(small_arch, rng):
    p = init_params(small_arch, rng)
    res = forward(p, rng.normal(size=(4, 2, 6)), "train")
    changed = res.params.flat != p.flat
    assert changed.any()
    names = [n for n, *_ in small_arch.shapes() if "running" in n]
    allowed = np.zeros_like(changed)
    for n in names:
        allowed[p.layout.slices[n]] = True
    assert not (changed & ~allowed).any()


def test_eval_mode_independent_of_batch_composition(small_arch, rng):
    p = random_params(small_arch, rng)
    x = rng.normal(size=(9, 2, 6))
    alone = forward(p, x[4:5], "eval").holistic[0]
    together = forward(p, x, "eval").holistic[4]
    np.testing.assert_allclose(alone, together, rtol=0, atol=1e-15)
    np.testing.assert_array_equal(embed(p, x, chunk=2), embed(p, x, chunk=2))


@settings(max_examples=25, deadline=None)
@given(seed=st.integers(0, 2**32 - 1))
def test_partition_merge_round_trip(seed):
    rng = np.random.default_rng(seed)
    arch = Architecture(d_in=int(rng.integers(1, 6)), hidden=int(rng.integers(1, 6)),
                        embed_dim=int(rng.integers(1, 6)), n_parts=int(rng.integers(1, 4)))
    p = init_params(arch, rng).with_flat(rng.normal(size=init_params(arch, rng).flat.shape))
    part = partition(p)
    assert part.generic.size + part.specialized.size == p.flat.size
    assert merge(arch, part.generic, part.specialized).equals(p)


def test_specialized_count_is_four_per_bn_channel(small_arch, rng):
    part = partition(init_params(small_arch, rng))
    assert part.specialized.size == 4 * (small_arch.hidden + small_arch.embed_dim)


def test_bn_mutation_touches_only_specialized(small_arch, rng):
    p = init_params(small_arch, rng)
    q = p.replace(bn1__gamma=p["bn1.gamma"] + np.eye(small_arch.hidden)[2])
    a, b = partition(p), partition(q)
    np.testing.assert_array_equal(a.generic, b.generic)
    assert (a.specialized != b.specialized).sum() == 1


def test_merge_rejects_wrong_sizes(small_arch, rng):
    part = partition(init_params(small_arch, rng))
    with pytest.raises(ModelError):
        merge(small_arch, part.generic[:-1], part.specialized)
    with pytest.raises(ModelError):
        merge(small_arch, part.generic, np.append(part.specialized, 0.0))


def test_patch_heads_start_as_identity(small_arch, rng):
    p = init_params(small_arch, rng)
    for r in range(small_arch.n_parts):
        np.testing.assert_array_equal(p[f"head{r}.weight"], np.eye(small_arch.embed_dim))


def test_param_file_round_trip(tmp_path, small_arch, rng):
    p = random_params(small_arch, rng)
    save_params(tmp_path / "p.npz", p, stage="II")
    q, meta = load_params(tmp_path / "p.npz")
    assert q.equals(p) and meta == {"stage": "II"}


def test_params_are_immutable(small_arch, rng):
    p = init_params(small_arch, rng)
    with pytest.raises(ValueError):
        p.flat[0] = 1.0
