"""Finite-difference sweep over every differentiable op.

One named case per op plus two structural composites (a full encoder
block, a full aggregator stack). Each case builds float64 leaves, runs
``finite_difference_check``, and reports its worst relative error; the
CLI prints the table and the acceptance suite asserts every entry is
below ``REL_TOL``.
"""

from __future__ import annotations

import numpy as np

from .autodiff import (
    Tensor,
    add,
    concat,
    conv1d,
    dropout,
    finite_difference_check,
    gelu,
    layer_norm,
    masked_bce_with_logits,
    masked_cross_entropy,
    masked_mean_pool,
    matmul,
    mul,
    neg,
    relu,
    reshape,
    scale,
    softmax,
    sub,
    tensor_mean,
    tensor_sum,
    transpose,
)
from .model import (
    AggregatorConfig,
    EncoderConfig,
    aggregate,
    encode_epochs,
    init_aggregator_params,
    init_encoder_params,
)


def _leaf(rng, *shape):
    return Tensor(rng.standard_normal(shape), requires_grad=True, dtype=np.float64)


def _weighted(rng, shape):
    # fixed random weights turn any output into a scalar without
    # collapsing gradients the way a plain sum can for odd functions;
    # normalizing by the element count keeps the scalar O(1) so the
    # difference quotient at h=1e-5 stays clear of cancellation noise
    w = rng.standard_normal(shape) / float(np.prod(shape))
    return lambda t: tensor_sum(mul(t, Tensor(w, dtype=np.float64)))


def _case_binary(op):
    def run(rng):
        a, b = _leaf(rng, 4, 5), _leaf(rng, 4, 5)
        to_scalar = _weighted(rng, (4, 5))
        return finite_difference_check(lambda x, y: to_scalar(op(x, y)), [a, b])
    return run


def _case_unary(op, shape=(4, 5)):
    def run(rng):
        x = _leaf(rng, *shape)
        to_scalar = _weighted(rng, shape)
        return finite_difference_check(lambda t: to_scalar(op(t)), [x])
    return run


def _case_matmul(rng):
    a, b = _leaf(rng, 3, 4), _leaf(rng, 4, 6)
    to_scalar = _weighted(rng, (3, 6))
    return finite_difference_check(lambda x, y: to_scalar(matmul(x, y)), [a, b])


def _case_matmul_batched(rng):
    a, b = _leaf(rng, 2, 3, 4), _leaf(rng, 2, 4, 6)
    to_scalar = _weighted(rng, (2, 3, 6))
    return finite_difference_check(lambda x, y: to_scalar(matmul(x, y)), [a, b])


def _case_scale(rng):
    x = _leaf(rng, 4, 5)
    to_scalar = _weighted(rng, (4, 5))
    return finite_difference_check(lambda t: to_scalar(scale(t, -1.7)), [x])


def _case_transpose(rng):
    x = _leaf(rng, 3, 4, 5)
    to_scalar = _weighted(rng, (3, 5, 4))
    return finite_difference_check(
        lambda t: to_scalar(transpose(t, (0, 2, 1))), [x])


def _case_reshape(rng):
    x = _leaf(rng, 3, 8)
    to_scalar = _weighted(rng, (3, 2, 4))
    return finite_difference_check(lambda t: to_scalar(reshape(t, (3, 2, 4))), [x])


def _case_concat(rng):
    a, b = _leaf(rng, 3, 2), _leaf(rng, 3, 4)
    to_scalar = _weighted(rng, (3, 6))
    return finite_difference_check(
        lambda x, y: to_scalar(concat([x, y], axis=1)), [a, b])


def _case_sum(rng):
    x = _leaf(rng, 4, 5)
    return finite_difference_check(tensor_sum, [x])


def _case_mean(rng):
    x = _leaf(rng, 4, 5)
    return finite_difference_check(tensor_mean, [x])


def _case_softmax(rng):
    x = _leaf(rng, 4, 6)
    to_scalar = _weighted(rng, (4, 6))
    return finite_difference_check(lambda t: to_scalar(softmax(t)), [x])


def _case_layer_norm(rng):
    x, g, b = _leaf(rng, 4, 6), _leaf(rng, 6), _leaf(rng, 6)
    to_scalar = _weighted(rng, (4, 6))
    return finite_difference_check(
        lambda t, gg, bb: to_scalar(layer_norm(t, gg, bb)), [x, g, b])


def _case_conv1d(rng):
    x, w, b = _leaf(rng, 2, 3, 9), _leaf(rng, 4, 3, 5), _leaf(rng, 4)
    to_scalar = _weighted(rng, (2, 4, 9))
    return finite_difference_check(
        lambda xx, ww, bb: to_scalar(conv1d(xx, ww, bb)), [x, w, b])


def _case_dropout(rng):
    x = _leaf(rng, 6, 5)
    to_scalar = _weighted(rng, (6, 5))

    def f(t):
        # reseeding per evaluation keeps the mask constant, which finite
        # differencing requires
        return to_scalar(dropout(t, 0.4, np.random.default_rng(7)))

    return finite_difference_check(f, [x])


def _case_masked_ce(rng):
    logits = _leaf(rng, 3, 7, 5)
    labels = rng.integers(0, 5, size=(3, 7))
    mask = rng.random((3, 7)) > 0.3
    mask[:, 0] = True
    return finite_difference_check(
        lambda t: masked_cross_entropy(t, labels, mask), [logits])


def _case_masked_ce_seq(rng):
    logits = _leaf(rng, 3, 7, 5)
    labels = rng.integers(0, 5, size=(3, 7))
    mask = rng.random((3, 7)) > 0.3
    mask[:, 0] = True
    return finite_difference_check(
        lambda t: masked_cross_entropy(t, labels, mask,
                                       reduction="seq_sum_batch_mean"), [logits])


def _case_masked_bce(rng):
    logits = _leaf(rng, 3, 6, 4)
    targets = (rng.random((3, 6, 4)) > 0.5).astype(np.float64)
    mask = rng.random((3, 6)) > 0.3
    mask[:, 0] = True
    return finite_difference_check(
        lambda t: masked_bce_with_logits(t, targets, mask), [logits])


def _case_masked_pool(rng):
    x = _leaf(rng, 3, 6, 4)
    mask = rng.random((3, 6)) > 0.4
    mask[:, 2] = True
    to_scalar = _weighted(rng, (3, 4))
    return finite_difference_check(
        lambda t: to_scalar(masked_mean_pool(t, mask)), [x])


_ENC_CFG = EncoderConfig(n_layers=1, n_heads=2, d_model=8, d_ff=16,
                         patch_len_samples=5, samples_per_epoch=15)
_AGG_CFG = AggregatorConfig(in_dim=6, n_layers=3, d_hidden=10, kernel=3)


def _f64_params(params32):
    return {n: Tensor(p.data, requires_grad=True, dtype=np.float64)
            for n, p in params32.items()}


def _case_encoder_block(rng):
    params = _f64_params(init_encoder_params(_ENC_CFG, seed=5))
    x = Tensor(rng.standard_normal((2, 9, 15)), dtype=np.float64)
    names = sorted(params)
    to_scalar = _weighted(rng, (2, _ENC_CFG.n_patches, _ENC_CFG.d_model))

    def f(*leaves):
        live = dict(zip(names, leaves))
        tokens, _ = encode_epochs(live, _ENC_CFG, x)
        return to_scalar(tokens)

    return finite_difference_check(f, [params[n] for n in names], max_coords=6)


def _case_aggregator_stack(rng):
    params = _f64_params(init_aggregator_params(_AGG_CFG, seed=6))
    x = Tensor(rng.standard_normal((2, 12, _AGG_CFG.in_dim)), dtype=np.float64)
    names = sorted(params)
    to_scalar = _weighted(rng, (2, 12, 5))

    def f(*leaves):
        live = dict(zip(names, leaves))
        return to_scalar(aggregate(live, _AGG_CFG, x))

    return finite_difference_check(f, [params[n] for n in names], max_coords=6)


GRADCHECK_CASES = (
    ("add", _case_binary(add)),
    ("sub", _case_binary(sub)),
    ("mul", _case_binary(mul)),
    ("neg", _case_unary(neg)),
    ("scale", _case_scale),
    ("matmul", _case_matmul),
    ("matmul_batched", _case_matmul_batched),
    ("transpose", _case_transpose),
    ("reshape", _case_reshape),
    ("concat", _case_concat),
    ("tensor_sum", _case_sum),
    ("tensor_mean", _case_mean),
    ("relu", _case_unary(relu)),
    ("gelu", _case_unary(gelu)),
    ("softmax", _case_softmax),
    ("layer_norm", _case_layer_norm),
    ("conv1d", _case_conv1d),
    ("dropout", _case_dropout),
    ("masked_cross_entropy", _case_masked_ce),
    ("masked_cross_entropy_seq", _case_masked_ce_seq),
    ("masked_bce_with_logits", _case_masked_bce),
    ("masked_mean_pool", _case_masked_pool),
    ("encoder_block", _case_encoder_block),
    ("aggregator_stack", _case_aggregator_stack),
)


def run_gradcheck_suite(seed: int = 0) -> list[tuple[str, float]]:
    """Run every case; returns (name, worst relative error) pairs."""
    out = []
    for name, case in GRADCHECK_CASES:
        rng = np.random.default_rng(seed)
        out.append((name, float(case(rng))))
    return out
