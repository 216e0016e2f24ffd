import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from conftest import rel_err
from tdnnas.numcore import Rng, finite_diff_grad, orthonormality_error
from tdnnas.supernet import candidate_param_count
from tdnnas.tdnnf import (
    Batch,
    CandidateSpec,
    ContextSpec,
    LayerParams,
    LayerSpec,
    Sequence,
    count_params,
    factored_layer_backward,
    factored_layer_forward,
    init_for,
    init_params,
    masked_loss,
    model_backward,
    model_forward_loss,
    model_param_count,
    predict,
    splice,
    splice_backward,
)


def random_layer(rng, d_in, H, n, ctx):
    tl, tr = len(ctx.left_offsets), len(ctx.right_offsets)
    return LayerParams(rng.normal((tl * d_in, n)), rng.normal((tr, H, n)) * 0.5, rng.normal(H) * 0.1)


# -- splicing ---------------------------------------------------------------


def test_splice_identity():
    x = np.arange(12.0).reshape(4, 3)
    np.testing.assert_array_equal(splice(x, [0]), x)


def test_splice_hand_clamped():
    out = splice(np.array([[1.0], [2.0], [3.0]]), [-1, 0])
    np.testing.assert_array_equal(out, [[1, 1], [1, 2], [2, 3]])


def test_splice_right_tap_clamps_at_end():
    x = np.arange(5.0)[:, None]
    assert splice(x, [0, 2])[-1].tolist() == [4.0, 4.0]


def test_splice_needs_offsets():
    with pytest.raises(ValueError):
        splice(np.zeros((3, 2)), [])


@settings(max_examples=60)
@given(st.integers(0, 2**32), st.integers(1, 12), st.integers(1, 4),
       st.lists(st.integers(-5, 5), min_size=1, max_size=4))
def test_splice_adjoint(seed, T, D, offsets):
    rng = Rng(seed)
    x, y = rng.normal((2, T, D)), rng.normal((2, T, D * len(offsets)))
    lhs = float(np.sum(splice(x, offsets) * y))
    rhs = float(np.sum(x * splice_backward(y, offsets, D)))
    assert lhs == pytest.approx(rhs, abs=1e-10 * max(1.0, abs(lhs)))


# -- factored layer -----------------------------------------------------------


def test_zero_weights_give_zero_output():
    ctx = ContextSpec(1, 2)
    p = LayerParams(np.zeros((6, 2)), np.zeros((2, 4, 2)), np.zeros(4))
    y, _ = factored_layer_forward(Rng(0).normal((7, 3)), ctx, p)
    assert np.all(y == 0)


def test_identity_layer():
    x = np.abs(Rng(1).normal((6, 3)))
    p = LayerParams(np.eye(3), np.eye(3)[None], np.zeros(3))
    y, _ = factored_layer_forward(x, ContextSpec(0, 0), p)
    np.testing.assert_array_equal(y, x)


def test_single_frame_hand_value():
    # T=1: every tap clamps to frame 0, so b = (0.5 + 2) * 2 and z = (1 - 0.25) * b + 0.1
    p = LayerParams(np.array([[0.5], [2.0]]), np.array([[[1.0]], [[-0.25]]]), np.array([0.1]))
    y, _ = factored_layer_forward(np.array([[2.0]]), ContextSpec(1, 1), p)
    assert y[0, 0] == pytest.approx(3.85, abs=1e-14)


def test_dimension_mismatch_names_layer():
    p = LayerParams(np.zeros((4, 2)), np.zeros((1, 3, 2)), np.zeros(3))
    with pytest.raises(ValueError, match="layer7"):
        factored_layer_forward(np.zeros((5, 3)), ContextSpec(1, 0), p, name="layer7")


def test_zero_grad_out():
    rng = Rng(2)
    ctx = ContextSpec(2, 1)
    _, cache = factored_layer_forward(rng.normal((6, 3)), ctx, random_layer(rng, 3, 4, 2, ctx))
    assert all(np.all(g == 0) for g in factored_layer_backward(cache, np.zeros((6, 4))))


def test_closed_relu_blocks_gradient():
    ctx = ContextSpec(1, 1)
    p = LayerParams(np.ones((4, 2)), np.zeros((2, 3, 2)), -np.ones(3))
    _, cache = factored_layer_forward(Rng(3).normal((5, 2)), ctx, p)
    g_in, *_ = factored_layer_backward(cache, np.ones((5, 3)))
    assert np.all(g_in == 0)


def test_stale_cache():
    ctx = ContextSpec(0, 0)
    rng = Rng(4)
    _, cache = factored_layer_forward(rng.normal((3, 2)), ctx, random_layer(rng, 2, 2, 2, ctx))
    factored_layer_backward(cache, np.ones((3, 2)))
    with pytest.raises(RuntimeError, match="stale cache"):
        factored_layer_backward(cache, np.ones((3, 2)))


@pytest.mark.parametrize("c,d", [(0, 0), (1, 0), (0, 2), (2, 3)])
def test_layer_backward_matches_finite_differences(c, d):
    rng = Rng(10 + c + d)
    ctx = ContextSpec(c, d)
    x = rng.normal((2, 9, 3))
    p = random_layer(rng, 3, 4, 2, ctx)
    probe = rng.normal((2, 9, 4))

    def loss():
        return float(np.sum(factored_layer_forward(x, ctx, p)[0] * probe))

    _, cache = factored_layer_forward(x, ctx, p)
    g_in, g_lin, g_aff, g_bias = factored_layer_backward(cache, probe)
    for analytic, target in ((g_in, x), (g_lin, p.w_lin), (g_aff, p.w_aff), (g_bias, p.bias)):
        assert rel_err(analytic, finite_diff_grad(loss, target)) < 1e-5


# -- candidate model ----------------------------------------------------------


def small_spec(skip=False):
    return CandidateSpec((LayerSpec(1, 2, 3), LayerSpec(2, 0, 4, skip)), input_dim=5, output_dim=3, hidden_dim=8)


def random_batch(seed, B=2, T=12, F=5, classes=3):
    rng = Rng(seed)
    mask = np.ones((B, T), bool)
    mask[:, :2] = False
    return Batch(rng.normal((B, T, F)), rng.integers(0, classes, (B, T)), mask)


@pytest.mark.parametrize("kind", ["ce", "mse"])
@pytest.mark.parametrize("skip", [False, True])
def test_model_gradient_matches_finite_differences(kind, skip):
    spec = small_spec(skip)
    params = init_params(spec, Rng(5))
    for k in params:
        params[k] = params[k] + 0.05 * Rng(hash(k) % 1000).normal(params[k].shape)
    batch = random_batch(6)
    loss, cache = model_forward_loss(spec, params, batch, kind)
    grads = model_backward(cache)
    numeric = finite_diff_grad(lambda: model_forward_loss(spec, params, batch, kind)[0], params)
    for name in params:
        assert rel_err(grads[name], numeric[name]) < 1e-4, name


def test_untrained_cross_entropy_near_ln2():
    spec = CandidateSpec((LayerSpec(1, 1, 8), LayerSpec(1, 1, 8)), 8, 2, 32)
    params = init_for(spec, 0)
    rng = Rng(7)
    losses = []
    for _ in range(100):
        seq = Sequence(rng.normal((30, 8)), rng.integers(0, 2, 30), np.ones(30, bool))
        losses.append(model_forward_loss(spec, params, seq)[0])
    assert abs(np.mean(losses) - math.log(2)) < 0.1


def test_skip_with_zero_layer_is_identity():
    spec = CandidateSpec((LayerSpec(0, 0, 2), LayerSpec(1, 1, 2, skip=True)), 3, 2, 4)
    params = init_params(spec, Rng(8))
    params["layer2.w_lin"][:] = 0
    params["layer2.w_aff"][:] = 0
    params["layer2.bias"][:] = 0
    x = Rng(9).normal((1, 6, 3))
    spec1 = CandidateSpec(spec.layers[:1], 3, 2, 4)
    np.testing.assert_allclose(predict(spec, params, x), predict(spec1, params, x), atol=1e-15)


def test_all_masked_rejected():
    with pytest.raises(ValueError, match="no supervised frames"):
        masked_loss(np.zeros((1, 3, 2)), np.zeros((1, 3), int), np.zeros((1, 3), bool))


def test_skip_requires_equal_widths():
    with pytest.raises(ValueError, match="skip"):
        CandidateSpec((LayerSpec(0, 0, 2, skip=True),), 3, 2, 4)


@settings(max_examples=40, deadline=None)
@given(st.lists(st.tuples(st.integers(0, 3), st.integers(0, 3)), min_size=1, max_size=3), st.integers(0, 2**16))
def test_receptive_field(ctx, seed):
    spec = CandidateSpec(tuple(LayerSpec(c, d, 3) for c, d in ctx), 2, 2, 4)
    params = init_for(spec, seed)
    T, t0 = 40, 20
    x = Rng(seed).normal((1, T, 2))
    base = predict(spec, params, x)
    x[0, t0] += 1.0
    moved = np.any(predict(spec, params, x) != base, axis=-1)[0]
    past, future = spec.receptive_field
    for t in np.flatnonzero(moved):
        assert -past <= t0 - t <= future


@given(st.lists(st.tuples(st.integers(0, 3), st.integers(0, 3), st.sampled_from([2, 4, 8])), min_size=1, max_size=4))
def test_param_count_matches_supernet_accounting(layers):
    spec = CandidateSpec(tuple(LayerSpec(c, d, n) for c, d, n in layers), 5, 3, 8)
    params = init_params(spec, Rng(0))
    hidden = sum(candidate_param_count(spec.layer_input_dim(i), 8, l) for i, l in enumerate(spec.layers))
    assert count_params(params) == model_param_count(spec) == hidden + 3 * 8 + 3


def test_linear_factor_stays_semi_orthogonal_after_training():
    from tdnnas.search import SearchConfig, TaskData, retrain
    from tdnnas.tasks import gen_lagged_product

    data = TaskData.from_split(gen_lagged_product(0, 2, 60, 40, 8), gen_lagged_product(0, 2, 10, 40, 8, part=1))
    spec = CandidateSpec((LayerSpec(2, 2, 8), LayerSpec(0, 0, 8)), 8, 2, 16)
    res = retrain(spec, data, SearchConfig(epochs_retrain=2))
    for i in range(2):
        assert orthonormality_error(res.params[f"layer{i + 1}.w_lin"]) < 0.05
