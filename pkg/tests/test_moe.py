import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from cbdes_moe import ops
from cbdes_moe.experts import ExpertBundle, ForwardCounter
from cbdes_moe.moe import (
    FusionMode,
    expert_load,
    expert_mean_activation,
    fuse_soft,
    infer_sparse,
    load_balance_closed_form,
    load_balance_loss,
    selection_counts,
    top_k_indices,
    total_loss,
    training_objective,
)
from cbdes_moe.router import SarConfig, SelfAttentionRouter
from cbdes_moe.tensor import ConfigError, Parameter, ShapeError, Tensor, no_grad

from helpers import random_stochastic


class FixedRouter:
    """Stand-in router returning a preset routing matrix."""

    def __init__(self, P):
        self.P = np.asarray(P, dtype=np.float64)

    def __call__(self, image):
        return Tensor(self.P)


@pytest.fixture(scope="module")
def bundle():
    b = ExpertBundle(3, seed=3)
    b.eval()
    return b


def images(n, seed=0):
    return Tensor(np.random.default_rng(seed).standard_normal((n, 3, 32, 32)))


# ---------------------------------------------------------------------------
# fuse_soft


def test_fuse_soft_selector_and_convexity():
    rng = np.random.default_rng(0)
    outs = [Tensor(rng.standard_normal((3, 2, 2, 2))) for _ in range(4)]
    P = np.eye(4)[[2, 0, 3]]
    fused = fuse_soft(outs, P).data
    for b, j in enumerate([2, 0, 3]):
        assert np.array_equal(fused[b], outs[j].data[b])
    same = [outs[0]] * 4
    P = random_stochastic(rng, 3, 4)
    np.testing.assert_allclose(fuse_soft(same, P).data, outs[0].data, rtol=1e-15, atol=1e-15)


def test_fuse_soft_loop_oracle():
    rng = np.random.default_rng(1)
    F = rng.standard_normal((4, 2, 2, 2, 2))
    P = random_stochastic(rng, 2, 4)
    ref = np.zeros((2, 2, 2, 2))
    for b in range(2):
        for k in range(4):
            ref[b] += P[b, k] * F[k, b]
    np.testing.assert_allclose(fuse_soft([Tensor(f) for f in F], P).data, ref, rtol=0, atol=1e-14)


def test_fuse_soft_shape_errors():
    outs = [Tensor(np.zeros((2, 1, 2, 2)))] * 3
    with pytest.raises(ShapeError):
        fuse_soft(outs, np.full((2, 4), 0.25))
    with pytest.raises(ShapeError):
        fuse_soft(outs[:2] + [Tensor(np.zeros((2, 1, 4, 4)))], np.full((2, 3), 1 / 3))


# ---------------------------------------------------------------------------
# infer_sparse


def test_top1_picks_argmax(bundle):
    x = images(1, 1)
    res = infer_sparse(bundle, FixedRouter([[0.1, 0.7, 0.15, 0.05]]), x, 1)
    assert res.selected.tolist() == [[1]]
    with no_grad():
        assert np.array_equal(res.output.data, bundle.expert_forward(1, x).data)


def test_uniform_row_tie_breaks_to_lowest(bundle):
    res = infer_sparse(bundle, FixedRouter([[0.25] * 4]), images(1), 1)
    assert res.selected.tolist() == [[0]]
    assert top_k_indices(np.array([[0.3, 0.3, 0.2, 0.2]]), 3).tolist() == [[0, 1, 2]]


def test_one_hot_rows_bitwise(bundle):
    x = images(6, 2)
    P = np.eye(4)[[3, 1, 1, 0, 2, 3]]
    res = infer_sparse(bundle, FixedRouter(P), x, 1)
    with no_grad():
        dense = fuse_soft(bundle.forward_all(x), P)
    assert np.array_equal(res.output.data, dense.data)
    assert res.per_expert == [1, 2, 1, 2]


def test_top_k_equals_soft(bundle):
    x = images(4, 3)
    P = random_stochastic(np.random.default_rng(5), 4, 4)
    res = infer_sparse(bundle, FixedRouter(P), x, 4)
    with no_grad():
        dense = fuse_soft(bundle.forward_all(x), P).data
    assert np.max(np.abs(res.output.data - dense)) <= 1e-12


def test_top2_renormalizes(bundle):
    x = images(1, 4)
    P = np.array([[0.1, 0.5, 0.3, 0.1]])
    res = infer_sparse(bundle, FixedRouter(P), x, 2)
    with no_grad():
        ref = (0.5 * bundle.expert_forward(1, x).data + 0.3 * bundle.expert_forward(2, x).data) / 0.8
    np.testing.assert_allclose(res.output.data, ref, rtol=0, atol=1e-12)


@pytest.mark.parametrize("B", [1, 3, 5])
def test_forward_counts(bundle, B):
    x = images(B, B)
    router = SelfAttentionRouter(3, SarConfig(), 0)
    router.eval()
    assert infer_sparse(bundle, router, x, 1).expert_forwards == B
    assert infer_sparse(bundle, router, x, 2).expert_forwards == 2 * B
    c = ForwardCounter()
    with no_grad():
        bundle.forward_all(x, c)
    assert c.count == B * 4


def test_infer_sparse_k_range(bundle):
    for k in (0, 5):
        with pytest.raises(ConfigError):
            infer_sparse(bundle, FixedRouter([[0.25] * 4]), images(1), k)


def test_fusion_mode():
    assert str(FusionMode.soft_all()) == "soft" and FusionMode.soft_all().is_soft
    assert str(FusionMode.top_k(1)) == "top1"
    with pytest.raises(ConfigError):
        FusionMode.top_k(0)
    with pytest.raises(ConfigError):
        FusionMode.top_k(5).validate(4)


# ---------------------------------------------------------------------------
# load balance


def test_load_balance_examples():
    assert load_balance_loss(np.full((4, 4), 0.25)).item() == 1.0
    one_hot = np.zeros((4, 4))
    one_hot[:, 0] = 1.0
    np.testing.assert_array_equal(expert_mean_activation(one_hot).data, [1, 0, 0, 0])
    np.testing.assert_array_equal(expert_load(one_hot).data, [4, 0, 0, 0])
    assert load_balance_loss(one_hot).item() == 4.0
    two = np.array([[1.0, 0, 0, 0], [0, 1.0, 0, 0]])
    np.testing.assert_array_equal(expert_mean_activation(two).data, [0.5, 0.5, 0, 0])
    assert load_balance_loss(two).item() == 1.0


def test_load_balance_empty():
    with pytest.raises(ShapeError):
        load_balance_loss(np.zeros((0, 4)))


@settings(max_examples=200, deadline=None)
@given(st.integers(1, 64), st.sampled_from([2, 4, 8]), st.integers(0, 2**32 - 1))
def test_load_balance_identity_property(N, K, seed):
    P = random_stochastic(np.random.default_rng(seed), N, K)
    L = load_balance_loss(P).item()
    assert abs(L - load_balance_closed_form(P)) <= 1e-12
    pbar, load = expert_mean_activation(P).data, expert_load(P).data
    assert abs(pbar.sum() - 1.0) <= 1e-9
    np.testing.assert_allclose(load, N * pbar, rtol=0, atol=1e-9)
    assert N / K - 1e-12 <= L <= N + 1e-12  # Cauchy-Schwarz lower bound, concentration upper bound


def test_total_loss_examples():
    P = np.full((2, 4), 0.25)
    r = total_loss(2.0, P, 0.0)
    assert r.total == 2.0
    r = total_loss(2.0, np.full((4, 4), 0.25), 0.01)
    assert r.balance_loss == 1.0 and abs(r.total - 2.01) < 1e-12
    np.testing.assert_allclose(r.load, 4 * r.mean_activation, atol=1e-12)
    with pytest.raises(ConfigError):
        total_loss(1.0, P, -0.1)


def test_training_objective_gradient_includes_balance():
    logits = Parameter(np.random.default_rng(0).standard_normal((5, 4)))
    P = ops.softmax(logits)
    task = (logits * 0.0).sum()
    obj, report = training_objective(task, P, 0.5)
    obj.backward()
    assert np.abs(logits.grad).max() > 0
    assert abs(report.total - 0.5 * report.balance_loss) < 1e-12


def test_selection_counts():
    P = np.array([[0.25] * 4, [0.1, 0.2, 0.6, 0.1], [0.0, 0.5, 0.5, 0.0]])
    assert selection_counts(P).tolist() == [1, 1, 1, 0]
