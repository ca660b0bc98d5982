"""Finite-difference checks for every differentiable op, plus composites.

All checks run in float64 with central differences (h=1e-5) against the
analytic gradients from backward(). The 1e-4 relative tolerance is the
same one the acceptance gate uses.
"""

import numpy as np
import pytest

from somn.autodiff import (
    REL_TOL,
    Tensor,
    backward,
    concat,
    conv1d,
    finite_difference_check,
    gelu,
    layer_norm,
    masked_bce_with_logits,
    masked_cross_entropy,
    masked_mean_pool,
    matmul,
    relu,
    softmax,
    tensor_mean,
    tensor_sum,
)


def t64(arr, rng=None):
    if rng is not None:
        arr = rng.standard_normal(arr).astype(np.float64)
    return Tensor(np.asarray(arr, dtype=np.float64), requires_grad=True, dtype=np.float64)


def test_sum_of_squares_is_nearly_exact():
    x = t64([1.0, -2.0, 3.0])
    err = finite_difference_check(lambda a: tensor_sum(a * a), [x])
    assert err < 1e-8


def test_corrupted_gradient_is_detected():
    x = t64([1.0, -2.0, 3.0])

    def bad(a):
        out = tensor_sum(a * a)
        good_vjp = out._vjp
        out._vjp = lambda g: tuple(1.5 * p for p in good_vjp(g))
        return out

    assert finite_difference_check(bad, [x]) > 1e-2


@pytest.mark.parametrize("seed", range(5))
def test_matmul_gradcheck(seed):
    rng = np.random.default_rng(seed)
    a = t64((3, 4), rng)
    b = t64((4, 2), rng)
    assert finite_difference_check(lambda x, y: tensor_sum(matmul(x, y)), [a, b], seed=seed) < REL_TOL


@pytest.mark.parametrize("seed", range(5))
def test_batched_matmul_gradcheck(seed):
    rng = np.random.default_rng(seed)
    a = t64((2, 3, 4), rng)
    b = t64((4, 5), rng)

    def f(x, y):
        return tensor_sum(matmul(x, y) * matmul(x, y))

    assert finite_difference_check(f, [a, b], seed=seed) < REL_TOL


def test_gelu_gradcheck_at_fixed_points():
    x = t64([-2.0, -0.5, 0.5, 2.0])
    assert finite_difference_check(lambda a: tensor_sum(gelu(a) * gelu(a)), [x]) < REL_TOL


@pytest.mark.parametrize("seed", range(5))
def test_relu_gradcheck_away_from_kink(seed):
    rng = np.random.default_rng(seed)
    vals = rng.standard_normal(12)
    vals[np.abs(vals) < 0.05] = 0.5
    x = t64(vals)
    assert finite_difference_check(lambda a: tensor_sum(relu(a) * relu(a)), [x], seed=seed) < REL_TOL


@pytest.mark.parametrize("seed", range(5))
def test_softmax_gradcheck(seed):
    rng = np.random.default_rng(seed)
    x = t64((3, 6), rng)
    w = Tensor(rng.standard_normal((3, 6)), dtype=np.float64)

    def f(a):
        return tensor_sum(softmax(a, axis=-1) * w)

    assert finite_difference_check(f, [x], seed=seed) < REL_TOL


@pytest.mark.parametrize("seed", range(5))
def test_layer_norm_gradcheck(seed):
    rng = np.random.default_rng(seed)
    x = t64((4, 8), rng)
    g = t64(rng.standard_normal(8) + 1.0)
    b = t64((8,), rng)

    def f(xx, gg, bb):
        return tensor_sum(layer_norm(xx, gg, bb) * layer_norm(xx, gg, bb))

    assert finite_difference_check(f, [x, g, b], seed=seed) < REL_TOL


@pytest.mark.parametrize("seed", range(5))
def test_conv1d_gradcheck(seed):
    rng = np.random.default_rng(seed)
    x = t64((2, 3, 9), rng)
    w = t64((4, 3, 5), rng)
    b = t64((4,), rng)

    def f(xx, ww, bb):
        y = conv1d(xx, ww, bb)
        return tensor_sum(y * y)

    assert finite_difference_check(f, [x, w, b], seed=seed) < REL_TOL


@pytest.mark.parametrize("reduction", ["mean", "seq_sum_batch_mean"])
def test_masked_cross_entropy_gradcheck(reduction):
    rng = np.random.default_rng(17)
    x = t64((2, 5, 4), rng)
    labels = rng.integers(0, 4, size=(2, 5))
    mask = rng.random((2, 5)) < 0.7
    mask[:, 0] = True

    def f(a):
        return masked_cross_entropy(a, labels, mask, reduction=reduction)

    assert finite_difference_check(f, [x]) < REL_TOL


def test_masked_bce_gradcheck():
    rng = np.random.default_rng(23)
    x = t64((3, 4, 7), rng)
    targets = (rng.random((3, 4, 7)) < 0.4).astype(np.float64)
    mask = rng.random((3, 4)) < 0.8
    mask[:, 0] = True

    def f(a):
        return masked_bce_with_logits(a, targets, mask)

    assert finite_difference_check(f, [x]) < REL_TOL


def test_masked_mean_pool_gradcheck():
    rng = np.random.default_rng(47)
    x = t64((3, 6, 4), rng)
    mask = rng.random((3, 6)) < 0.6
    mask[:, 2] = True
    w = Tensor(rng.standard_normal((3, 4)), dtype=np.float64)

    def f(a):
        return tensor_sum(masked_mean_pool(a, mask) * w)

    assert finite_difference_check(f, [x]) < REL_TOL


def test_mean_and_concat_gradcheck():
    rng = np.random.default_rng(31)
    a = t64((3, 4), rng)
    b = t64((3, 2), rng)

    def f(x, y):
        c = concat([x, y], axis=1)
        return tensor_sum(tensor_mean(c, axis=1) * tensor_mean(c, axis=1))

    assert finite_difference_check(f, [a, b]) < REL_TOL


def test_transformer_style_block_gradcheck():
    # scaled-dot attention + residual + layer norm + mlp, small dims
    rng = np.random.default_rng(41)
    d, dk = 6, 4
    x = t64((5, d), rng)
    wq = t64((d, dk), rng)
    wk = t64((d, dk), rng)
    wv = t64((d, d), rng)
    g1 = t64(np.ones(d))
    b1 = t64(np.zeros(d))
    w1 = t64((d, 2 * d), rng)
    w2 = t64((2 * d, d), rng)

    def f(x_, wq_, wk_, wv_, g1_, b1_, w1_, w2_):
        q = matmul(x_, wq_)
        k = matmul(x_, wk_)
        v = matmul(x_, wv_)
        att = softmax(matmul(q, k.transpose((1, 0))) * (1.0 / np.sqrt(dk)), axis=-1)
        h = layer_norm(x_ + matmul(att, v), g1_, b1_)
        h2 = h + matmul(gelu(matmul(h, w1_)), w2_)
        return tensor_sum(h2 * h2)

    params = [x, wq, wk, wv, g1, b1, w1, w2]
    assert finite_difference_check(f, params, max_coords=8) < REL_TOL


def test_conv_stack_with_masked_loss_gradcheck():
    # two conv layers into a masked CE, the aggregator pattern in miniature
    rng = np.random.default_rng(43)
    x = t64((2, 4, 10), rng)
    w1 = t64((6, 4, 3), rng)
    b1 = t64((6,), rng)
    w2 = t64((5, 6, 3), rng)
    b2 = t64((5,), rng)
    labels = rng.integers(0, 5, size=(2, 10))
    mask = rng.random((2, 10)) < 0.8
    mask[:, 0] = True

    def f(x_, w1_, b1_, w2_, b2_):
        h = relu(conv1d(x_, w1_, b1_))
        logits = conv1d(h, w2_, b2_).transpose((0, 2, 1))
        return masked_cross_entropy(logits, labels, mask, reduction="seq_sum_batch_mean")

    assert finite_difference_check(f, [x, w1, b1, w2, b2], max_coords=12) < REL_TOL
