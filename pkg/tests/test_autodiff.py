"""Gradient and tape behavior of the reverse-mode engine.

Every op is checked against central finite differences on several random
shapes. Random inputs are drawn once per case and closed over, so the
checked function is deterministic; inputs are nudged away from kinks
(abs, relu, smooth_l1 boundary) where the derivative is not defined.
"""
import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from deformcast import autodiff as ad


def check(f, wrt, tol=1e-6, **kw):
    err = ad.grad_check(f, wrt, **kw)
    assert err <= tol, f"max relative gradient error {err:.3e} > {tol}"


def away_from(x, bad=0.0, gap=0.05):
    """Shift values lying within `gap` of `bad` outward past the kink."""
    x = np.asarray(x, dtype=np.float64).copy()
    close = np.abs(x - bad) < gap
    x[close] = bad + gap * np.where(x[close] >= bad, 1.0, -1.0)
    return x


SHAPES = [(3,), (2, 4), (3, 2, 5), (2, 1, 4)]


@pytest.mark.parametrize("shape", SHAPES)
def test_add_sub_mul_div_grads(rng, shape):
    a = ad.parameter(rng.normal(size=shape))
    b = ad.parameter(away_from(rng.normal(size=shape), 0.0, 0.3))
    check(lambda: ad.sum_(ad.add(a, b)), [a, b])
    check(lambda: ad.sum_(ad.sub(a, b)), [a, b])
    check(lambda: ad.sum_(ad.mul(a, b)), [a, b])
    check(lambda: ad.sum_(ad.div(a, b)), [a, b], tol=1e-5)


def test_scalar_operand_grads(rng):
    a = ad.parameter(rng.normal(size=(4, 3)))
    check(lambda: ad.sum_(ad.add(a, 2.5)), [a])
    check(lambda: ad.sum_(ad.mul(a, -1.25)), [a])
    check(lambda: ad.sum_(ad.div(a, 4.0)), [a])
    check(lambda: ad.sum_(ad.neg(a)), [a])


@pytest.mark.parametrize("shape", SHAPES)
def test_unary_grads(rng, shape):
    x = away_from(rng.normal(size=shape), 0.0, 0.08)
    a = ad.parameter(x)
    check(lambda: ad.sum_(ad.abs_(a)), [a])
    check(lambda: ad.sum_(ad.relu(a)), [a])
    check(lambda: ad.sum_(ad.gelu(a)), [a])
    check(lambda: ad.sum_(ad.sigmoid(a)), [a])
    p = ad.parameter(np.abs(x) + 0.5)
    check(lambda: ad.sum_(ad.sqrt(p)), [p], tol=1e-5)


def test_smooth_l1_grad_and_value(rng):
    # stay off |x| == beta where the second derivative jumps
    x = rng.normal(size=(40,)) * 2.0
    x = x[np.abs(np.abs(x) - 1.0) > 0.05][:20]
    a = ad.parameter(x)
    check(lambda: ad.sum_(ad.smooth_l1(a)), [a])
    out = ad.smooth_l1(a).data
    small = np.abs(x) < 1.0
    np.testing.assert_allclose(out[small], 0.5 * x[small] ** 2, rtol=1e-12)
    np.testing.assert_allclose(out[~small], np.abs(x[~small]) - 0.5, rtol=1e-12)


def test_reshape_transpose_grads(rng):
    a = ad.parameter(rng.normal(size=(2, 3, 4)))
    check(lambda: ad.sum_(ad.mul(ad.reshape(a, (6, 4)), 1.5)), [a])
    check(lambda: ad.sum_(ad.mul(ad.transpose(a, (2, 0, 1)), -0.5)), [a])


def test_expand_grad_and_errors(rng):
    a = ad.parameter(rng.normal(size=(1, 3)))
    w = ad.constant(rng.normal(size=(4, 3)))
    check(lambda: ad.sum_(ad.mul(ad.expand(a, (4, 3)), w)), [a])
    b = ad.parameter(rng.normal(size=(3,)))
    check(lambda: ad.sum_(ad.mul(ad.expand(b, (2, 5, 3)), 2.0)), [b])
    with pytest.raises(ValueError, match="cannot broadcast"):
        ad.expand(a, (4, 5))


def test_concat_slice_grads(rng):
    a = ad.parameter(rng.normal(size=(2, 3)))
    b = ad.parameter(rng.normal(size=(2, 5)))
    w = ad.constant(rng.normal(size=(2, 8)))
    check(lambda: ad.sum_(ad.mul(ad.concat([a, b], axis=1), w)), [a, b])
    c = ad.parameter(rng.normal(size=(4, 6)))
    check(lambda: ad.sum_(ad.mul(ad.slice_axis(c, 1, 2, 5), 3.0)), [c])


@pytest.mark.parametrize("axis,keepdims", [(None, False), (0, False), (1, True), ((0, 2), False)])
def test_sum_mean_grads(rng, axis, keepdims):
    a = ad.parameter(rng.normal(size=(3, 4, 2)))
    shape = np.sum(a.data, axis=axis, keepdims=keepdims).shape
    w = ad.constant(rng.normal(size=shape))
    check(lambda: ad.sum_(ad.mul(ad.sum_(a, axis=axis, keepdims=keepdims), w)), [a])
    check(lambda: ad.sum_(ad.mul(ad.mean(a, axis=axis, keepdims=keepdims), w)), [a])


def test_matmul_grads(rng):
    a = ad.parameter(rng.normal(size=(3, 4)))
    b = ad.parameter(rng.normal(size=(4, 5)))
    w = ad.constant(rng.normal(size=(3, 5)))
    check(lambda: ad.sum_(ad.mul(ad.matmul(a, b), w)), [a, b], tol=1e-5)
    # batched
    x = ad.parameter(rng.normal(size=(2, 6, 3, 4)))
    y = ad.parameter(rng.normal(size=(2, 6, 4, 2)))
    v = ad.constant(rng.normal(size=(2, 6, 3, 2)))
    check(lambda: ad.sum_(ad.mul(ad.matmul(x, y), v)), [x, y], tol=1e-5)


def test_matmul_broadcast_weight(rng):
    # (B, N, D) @ (D, M) used by every linear layer
    x = ad.parameter(rng.normal(size=(2, 5, 3)))
    w = ad.parameter(rng.normal(size=(3, 4)))
    v = ad.constant(rng.normal(size=(2, 5, 4)))
    check(lambda: ad.sum_(ad.mul(ad.matmul(x, w), v)), [x, w], tol=1e-5)


def test_softmax_grads_and_rows_sum_to_one(rng):
    a = ad.parameter(rng.normal(size=(2, 3, 5)))
    w = ad.constant(rng.normal(size=(2, 3, 5)))
    check(lambda: ad.sum_(ad.mul(ad.softmax_lastaxis(a), w)), [a], tol=1e-5)
    rows = ad.softmax_lastaxis(a).data.sum(axis=-1)
    np.testing.assert_allclose(rows, 1.0, atol=1e-12)


def test_softmax_mask_blocks_positions(rng):
    a = ad.parameter(rng.normal(size=(2, 4, 4)))
    mask = np.zeros((4, 4))
    mask[0, 2] = -1e9
    mask[3, 1] = -1e9
    w = ad.constant(rng.normal(size=(2, 4, 4)))
    check(lambda: ad.sum_(ad.mul(ad.softmax_lastaxis(a, mask=mask), w)), [a], tol=1e-5)
    p = ad.softmax_lastaxis(a, mask=mask).data
    assert p[:, 0, 2].max() < 1e-30
    assert p[:, 3, 1].max() < 1e-30


def test_layer_norm_grads_and_stats(rng):
    a = ad.parameter(rng.normal(size=(3, 4, 6)))
    g = ad.parameter(rng.normal(size=(6,)) + 1.5)
    b = ad.parameter(rng.normal(size=(6,)))
    w = ad.constant(rng.normal(size=(3, 4, 6)))
    check(lambda: ad.sum_(ad.mul(ad.layer_norm_lastaxis(a, g, b), w)), [a, g, b], tol=1e-5)
    ones = ad.constant(np.ones(6))
    zeros = ad.constant(np.zeros(6))
    out = ad.layer_norm_lastaxis(a, ones, zeros).data
    np.testing.assert_allclose(out.mean(axis=-1), 0.0, atol=1e-12)
    np.testing.assert_allclose(out.var(axis=-1), 1.0, atol=1e-4)


def test_conv1d_time_grads(rng):
    # (B, C_in, N, L) convolved along the trailing time axis
    x = ad.parameter(rng.normal(size=(2, 3, 4, 7)))
    w = ad.parameter(rng.normal(size=(5, 3, 3)))
    b = ad.parameter(rng.normal(size=(5,)))
    v = ad.constant(rng.normal(size=(2, 5, 4, 5)))
    check(lambda: ad.sum_(ad.mul(ad.conv1d_time(x, w, b), v)), [x, w, b], tol=1e-5)
    short = ad.parameter(rng.normal(size=(2, 3, 4, 2)))
    with pytest.raises(ValueError, match="shorter than kernel"):
        ad.conv1d_time(short, w, b)


def test_fixed_kernel_conv2d_grad(rng):
    k = np.array([[1.0, 0.0, -1.0], [2.0, 0.0, -2.0], [1.0, 0.0, -1.0]])
    x = ad.parameter(rng.normal(size=(2, 6, 7)))
    v = ad.constant(rng.normal(size=(2, 4, 5)))  # valid conv shrinks by 2
    check(lambda: ad.sum_(ad.mul(ad.fixed_kernel_conv2d(x, k), v)), [x], tol=1e-5)


def test_adj_matmul_grad(rng):
    from deformcast.stgcn import build_normalized_adjacency

    graph = build_normalized_adjacency(4, 5)  # N = 20 at axis -2
    x = ad.parameter(rng.normal(size=(2, 20, 3)))
    v = ad.constant(rng.normal(size=(2, 20, 3)))
    check(lambda: ad.sum_(ad.mul(ad.adj_matmul(x, graph.normalized), v)), [x], tol=1e-5)


def test_shape_mismatch_raises(rng):
    a = ad.parameter(rng.normal(size=(2, 3)))
    b = ad.parameter(rng.normal(size=(3, 2)))
    with pytest.raises(ValueError):
        ad.add(a, b)


def test_grad_accumulates_over_reuse(rng):
    a = ad.parameter(np.array([1.5, -2.0]))
    with ad.Tape():
        loss = ad.sum_(ad.add(ad.mul(a, a), a))  # x^2 + x
        ad.backward(loss)
    np.testing.assert_allclose(a.grad, 2.0 * a.data + 1.0, rtol=1e-12)


def test_constant_gets_no_grad(rng):
    a = ad.parameter(np.ones(3))
    c = ad.constant(np.full(3, 2.0))
    with ad.Tape():
        loss = ad.sum_(ad.mul(a, c))
        ad.backward(loss)
    assert c.grad is None
    np.testing.assert_allclose(a.grad, c.data)


def test_no_tape_means_no_graph(rng):
    # outside a tape ops run plain: no parents recorded, backward is a no-op
    a = ad.parameter(np.ones(4))
    out = ad.sum_(ad.mul(a, 3.0))
    assert out._parents == ()
    ad.backward(out)
    assert a.grad is None


def test_zero_grads_resets():
    a = ad.parameter(np.ones(3))
    with ad.Tape():
        ad.backward(ad.sum_(ad.mul(a, a)))
    assert a.grad is not None
    ad.zero_grads([a])
    assert a.grad is None


def test_grad_check_limit_probes_subset(rng):
    a = ad.parameter(rng.normal(size=(100,)))
    err = ad.grad_check(lambda: ad.sum_(ad.mul(a, a)), [a], limit=7)
    assert err <= 1e-6


@settings(max_examples=30, deadline=None)
@given(
    n=st.integers(1, 5),
    m=st.integers(1, 5),
    seed=st.integers(0, 2**31 - 1),
)
def test_mul_grad_property(n, m, seed):
    g = np.random.default_rng(seed)
    a = ad.parameter(g.normal(size=(n, m)))
    b = ad.parameter(g.normal(size=(n, m)))
    with ad.Tape():
        ad.backward(ad.sum_(ad.mul(a, b)))
    np.testing.assert_allclose(a.grad, b.data, rtol=1e-12)
    np.testing.assert_allclose(b.grad, a.data, rtol=1e-12)


@settings(max_examples=25, deadline=None)
@given(
    shape=st.tuples(st.integers(1, 4), st.integers(1, 4)),
    seed=st.integers(0, 2**31 - 1),
)
def test_sum_grad_is_ones(shape, seed):
    g = np.random.default_rng(seed)
    a = ad.parameter(g.normal(size=shape))
    with ad.Tape():
        ad.backward(ad.sum_(a))
    np.testing.assert_array_equal(a.grad, np.ones(shape))
