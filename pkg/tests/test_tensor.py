"""Reverse-mode engine: gradient checks (float64, eps=1e-4) and op semantics."""
import numpy as np
import pytest

from mbconvnext import tensor as T
from mbconvnext.errors import NonFiniteError, NonScalarLoss, ShapeMismatch
from oracles import conv2d_loops, depthwise_loops, numeric_grad, rel_err

SEEDS = range(20)
EPS = 1e-4
TOL = 1e-5
TOL_POINTWISE = 1e-6


def grad_check(build, arrays, seed, tol):
    """Compare analytic and central-difference gradients of sum(R * build(...))."""
    leaves = [T.Tensor(a, requires_grad=True) for a in arrays]
    out = build(*leaves)
    R = np.random.default_rng(seed + 999).standard_normal(out.shape)
    loss = T.tsum(T.mul(out, R))
    analytic = T.backward(loss, leaves)

    def f():
        return float((build(*[T.Tensor(a) for a in arrays]).data * R).sum())

    worst = 0.0
    for a, g in zip(arrays, analytic):
        worst = max(worst, rel_err(g, numeric_grad(f, a, EPS)))
    assert worst < tol, worst
    return worst


def _r(seed):
    return np.random.default_rng(seed)


@pytest.mark.parametrize("seed", SEEDS)
def test_grad_add_broadcast(seed):
    r = _r(seed)
    grad_check(T.add, [r.standard_normal((3, 4)), r.standard_normal((4,))], seed, TOL_POINTWISE)


@pytest.mark.parametrize("seed", SEEDS)
def test_grad_mul_broadcast(seed):
    r = _r(seed)
    grad_check(T.mul, [r.standard_normal((2, 3, 4)), r.standard_normal((1, 3, 1))], seed, TOL_POINTWISE)


@pytest.mark.parametrize("seed", SEEDS)
def test_grad_sigmoid(seed):
    grad_check(T.sigmoid, [_r(seed).standard_normal((5, 3)) * 3], seed, TOL_POINTWISE)


@pytest.mark.parametrize("seed", SEEDS)
def test_grad_gelu(seed, backend):
    grad_check(T.gelu, [_r(seed).standard_normal((4, 6)) * 2], seed, TOL_POINTWISE)


@pytest.mark.parametrize("seed", SEEDS)
def test_grad_dropout_fixed_mask(seed):
    grad_check(lambda x: T.dropout(x, 0.4, True, seed), [_r(seed).standard_normal((6, 5))], seed, TOL_POINTWISE)


@pytest.mark.parametrize("seed", SEEDS)
def test_grad_reshape_concat_sum(seed):
    r = _r(seed)

    def f(a, b):
        return T.reshape(T.concat([a, b]), (-1,))

    grad_check(f, [r.standard_normal((2, 3)), r.standard_normal((2, 5))], seed, TOL_POINTWISE)


@pytest.mark.parametrize("seed", SEEDS)
def test_grad_dense(seed):
    r = _r(seed)
    grad_check(T.dense, [r.standard_normal((2, 3, 5)), r.standard_normal((5, 4)), r.standard_normal(4)], seed, TOL)


@pytest.mark.parametrize("seed", SEEDS)
def test_grad_conv2d(seed):
    r = _r(seed)
    stride, pad, kh = [(1, 0, 3), (2, 1, 3), (2, 0, 2), (1, 1, 1)][seed % 4]
    x = r.standard_normal((2, 6, 7, 3))
    k = r.standard_normal((kh, kh, 3, 2))
    b = r.standard_normal(2)
    grad_check(lambda x, k, b: T.conv2d(x, k, b, stride, pad), [x, k, b], seed, TOL)


@pytest.mark.parametrize("seed", SEEDS)
def test_grad_depthwise(seed, backend):
    r = _r(seed)
    stride, pad, kh = [(1, 3, 7), (1, 1, 3), (2, 1, 3), (1, 0, 2)][seed % 4]
    x = r.standard_normal((2, 7, 6, 3))
    k = r.standard_normal((kh, kh, 3))
    b = r.standard_normal(3)
    grad_check(lambda x, k, b: T.depthwise_conv2d(x, k, b, stride, pad), [x, k, b], seed, TOL)


@pytest.mark.parametrize("seed", SEEDS)
def test_grad_layer_norm(seed, backend):
    r = _r(seed)
    grad_check(lambda x, g, b: T.layer_norm(x, g, b),
               [r.standard_normal((3, 4, 6)) * 2 + 1, r.standard_normal(6), r.standard_normal(6)], seed, TOL)


@pytest.mark.parametrize("seed", SEEDS)
@pytest.mark.parametrize("kind", ["avg", "max"])
def test_grad_global_pool(seed, kind):
    grad_check(lambda x: T.global_pool(x, kind), [_r(seed).standard_normal((2, 4, 5, 3))], seed, TOL)


@pytest.mark.parametrize("seed", SEEDS)
def test_grad_bce(seed):
    r = _r(seed)
    y = r.integers(0, 2, 8).astype(float)
    p = r.uniform(0.05, 0.95, 8)
    grad_check(lambda p: T.bce_loss(p, y, (1.0, 2.0)), [p], seed, TOL)


@pytest.mark.parametrize("seed", range(20))
def test_grad_composite_dense_gelu_bce(seed):
    r = _r(seed)
    y = r.integers(0, 2, 4).astype(float)

    def f(x, W, b):
        return T.bce_loss(T.sigmoid(T.reshape(T.dense(T.gelu(x), W, b), (4,))), y)

    grad_check(f, [r.standard_normal((4, 5)), r.standard_normal((5, 1)), r.standard_normal(1)], seed, TOL)


# ---------------------------------------------------------------------------
# forward semantics
# ---------------------------------------------------------------------------

def test_conv2d_matches_loops():
    r = _r(0)
    for stride, pad, kh in [(1, 0, 3), (2, 1, 3), (4, 0, 4), (2, 0, 2), (1, 2, 5)]:
        x = r.standard_normal((2, 8, 8, 4))
        k = r.standard_normal((kh, kh, 4, 3))
        b = r.standard_normal(3)
        np.testing.assert_allclose(T.conv2d(x, k, b, stride, pad).data, conv2d_loops(x, k, b, stride, pad), atol=1e-6)


def test_conv2d_patchify_with_remainder():
    r = _r(1)
    x = r.standard_normal((1, 10, 11, 1))
    k = r.standard_normal((4, 4, 1, 2))
    np.testing.assert_allclose(T.conv2d(x, k, None, 4).data, conv2d_loops(x, k, None, 4, 0), atol=1e-6)


def test_depthwise_matches_loops(backend):
    r = _r(2)
    for stride, pad, kh in [(1, 3, 7), (2, 1, 3), (1, 0, 1)]:
        x = r.standard_normal((2, 8, 8, 4))
        k = r.standard_normal((kh, kh, 4))
        b = r.standard_normal(4)
        np.testing.assert_allclose(T.depthwise_conv2d(x, k, b, stride, pad).data,
                                   depthwise_loops(x, k, b, stride, pad), atol=1e-6)


def test_backward_sum_gives_ones():
    x = T.Tensor(np.zeros((3, 2)), requires_grad=True)
    T.backward(T.tsum(x))
    np.testing.assert_array_equal(x.grad, np.ones((3, 2)))


def test_backward_accumulates():
    x = T.Tensor(np.arange(3.0), requires_grad=True)
    T.backward(T.tsum(T.mul(x, x)))
    T.backward(T.tsum(T.mul(x, x)))
    np.testing.assert_array_equal(x.grad, 4 * np.arange(3.0))
    T.zero_grad([x])
    assert x.grad is None


def test_unused_leaf_gets_zero_grad():
    x = T.Tensor(np.ones(2), requires_grad=True)
    u = T.Tensor(np.ones(3), requires_grad=True)
    gx, gu = T.backward(T.tsum(x), [x, u])
    np.testing.assert_array_equal(gu, np.zeros(3))


def test_non_scalar_loss_rejected():
    with pytest.raises(NonScalarLoss):
        T.backward(T.Tensor(np.ones(2), requires_grad=True))


def test_nan_trips_error():
    with pytest.raises(NonFiniteError), np.errstate(invalid="ignore"):
        T.mul(T.Tensor(np.array([np.inf])), T.Tensor(np.array([0.0])))


def test_shape_errors():
    with pytest.raises(ShapeMismatch):
        T.dense(np.ones((2, 3)), np.ones((4, 2)))
    with pytest.raises(ShapeMismatch):
        T.conv2d(np.ones((1, 4, 4, 2)), np.ones((3, 3, 1, 1)))
    with pytest.raises(ShapeMismatch):
        T.layer_norm(np.ones((2, 3)), np.ones(2), np.zeros(2))


def test_max_pool_tie_goes_to_first():
    x = T.Tensor(np.ones((1, 2, 2, 1)), requires_grad=True)
    T.backward(T.tsum(T.global_pool(x, "max")))
    np.testing.assert_array_equal(x.grad.ravel(), [1, 0, 0, 0])


def test_dropout_eval_identity_and_deterministic():
    x = T.Tensor(np.ones((50, 10)))
    assert T.dropout(x, 0.3, False) is x
    a = T.dropout(x, 0.3, True, seed=5).data
    b = T.dropout(x, 0.3, True, seed=5).data
    np.testing.assert_array_equal(a, b)
    assert set(np.unique(a)) <= {0.0, 1.0 / 0.7}


def test_bce_clamp_finite():
    loss = T.bce_loss(T.Tensor(np.array([0.0, 1.0]), requires_grad=True), [1, 0])
    assert np.isfinite(loss.data)
    assert float(loss.data) == pytest.approx(-np.log(1e-7), rel=1e-6)


def test_float32_stays_float32(backend):
    x = T.Tensor(np.ones((2, 4, 4, 3), np.float32))
    k = T.Tensor(np.ones((3, 3, 3), np.float32))
    y = T.gelu(T.layer_norm(T.depthwise_conv2d(x, k, None, 1, 1), np.ones(3, np.float32), np.zeros(3, np.float32)))
    assert y.dtype == np.float32
