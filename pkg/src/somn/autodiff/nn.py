"""Neural-network ops on top of the tensor graph.

Everything here follows the same convention as tensor.py: forward
computes a numpy array, the registered closure maps the incoming
gradient to per-parent gradients. Losses reduce in float64 so the
reduced value is independent of summation chunking.
"""

from __future__ import annotations

import math

import numpy as np

from .tensor import Tensor, _make_node

_GELU_C0 = math.sqrt(2.0 / math.pi)
_GELU_C1 = 0.044715


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0

    def vjp(g):
        return (g * mask,)

    return _make_node(np.where(mask, x.data, 0).astype(x.dtype, copy=False), (x,), vjp, "relu")


def gelu(x: Tensor) -> Tensor:
    """Gaussian error linear unit, tanh approximation."""
    xd = x.data
    inner = _GELU_C0 * (xd + _GELU_C1 * xd * xd * xd)
    t = np.tanh(inner)
    out = (0.5 * xd * (1.0 + t)).astype(x.dtype, copy=False)

    def vjp(g):
        dinner = _GELU_C0 * (1.0 + 3.0 * _GELU_C1 * xd * xd)
        dx = 0.5 * (1.0 + t) + 0.5 * xd * (1.0 - t * t) * dinner
        return ((g * dx).astype(x.dtype, copy=False),)

    return _make_node(out, (x,), vjp, "gelu")


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    """Softmax with max subtraction for overflow safety."""
    shifted = x.data - np.max(x.data, axis=axis, keepdims=True)
    e = np.exp(shifted)
    y = (e / np.sum(e, axis=axis, keepdims=True)).astype(x.dtype, copy=False)

    def vjp(g):
        dot = np.sum(g * y, axis=axis, keepdims=True)
        return ((g - dot) * y,)

    return _make_node(y, (x,), vjp, "softmax")


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalize the last axis to zero mean, unit variance, then affine.

    Statistics are computed in float64; the biased variance is used.
    """
    d = x.shape[-1]
    if d < 2:
        raise ValueError(f"layer_norm needs a last dim >= 2, got {d}")
    if gain.shape != (d,) or bias.shape != (d,):
        raise ValueError(f"layer_norm affine params must have shape ({d},)")
    xd = x.data.astype(np.float64, copy=False)
    mu = xd.mean(axis=-1, keepdims=True)
    var = xd.var(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = ((xd - mu) * inv).astype(x.dtype, copy=False)
    out = xhat * gain.data + bias.data

    def vjp(g):
        gg = None
        gb = None
        lead = tuple(range(g.ndim - 1))
        if gain.requires_grad:
            gg = np.sum((g * xhat).astype(np.float64, copy=False), axis=lead).astype(gain.dtype)
        if bias.requires_grad:
            gb = np.sum(g.astype(np.float64, copy=False), axis=lead).astype(bias.dtype)
        gx = None
        if x.requires_grad:
            h = (g * gain.data).astype(np.float64, copy=False)
            xh = xhat.astype(np.float64, copy=False)
            m1 = h.mean(axis=-1, keepdims=True)
            m2 = (h * xh).mean(axis=-1, keepdims=True)
            gx = ((h - m1 - xh * m2) * inv).astype(x.dtype)
        return (gx, gg, gb)

    return _make_node(out, (x, gain, bias), vjp, "layer_norm")


_CONV_GEMM_ROWS = 256


def _rowwise_matmul(a: np.ndarray, bmat: np.ndarray) -> np.ndarray:
    """``a @ bmat`` computed in fixed 256-row blocks, tail zero-padded.

    BLAS picks different kernel strategies by matrix size, which shifts
    row results by an ulp between calls with different row counts. Every
    block here is exactly [256, K] @ [K, N], so a row's bits depend only
    on its own values and its offset, never on the total length.
    """
    m = a.shape[0]
    rows = _CONV_GEMM_ROWS
    out = np.empty((m, bmat.shape[1]), dtype=np.result_type(a, bmat))
    for i in range(0, m, rows):
        block = a[i:i + rows]
        if block.shape[0] < rows:
            padded = np.zeros((rows, a.shape[1]), dtype=a.dtype)
            padded[:block.shape[0]] = block
            out[i:] = (padded @ bmat)[:block.shape[0]]
        else:
            out[i:i + rows] = block @ bmat
    return out


def conv1d(x: Tensor, w: Tensor, b: Tensor) -> Tensor:
    """1D convolution with 'same' zero padding, stride 1, odd kernel.

    ``x`` is [B, C_in, L] (or [C_in, L] for a single sequence), ``w`` is
    [C_out, C_in, k], ``b`` is [C_out]. Implemented as an im2col gather
    followed by a block GEMM; the gather buffer is rebuilt during
    backward rather than stored. The forward GEMM runs through
    ``_rowwise_matmul`` so that zero-padding a sequence cannot move the
    bits of any position inside it.
    """
    squeeze = x.ndim == 2
    xd = x.data[None] if squeeze else x.data
    if xd.ndim != 3:
        raise ValueError(f"conv1d input must be [B, C, L] or [C, L], got {x.shape}")
    B, Cin, L = xd.shape
    Cout, Cin_w, k = w.shape
    if Cin_w != Cin:
        raise ValueError(f"conv1d channel mismatch: input {Cin}, kernel {Cin_w}")
    if k % 2 == 0:
        raise ValueError(f"conv1d requires an odd kernel width, got {k}")
    if b.shape != (Cout,):
        raise ValueError(f"conv1d bias must have shape ({Cout},)")
    pad = k // 2

    xp = np.zeros((B, Cin, L + 2 * pad), dtype=xd.dtype)
    xp[:, :, pad:pad + L] = xd

    def gather(src):
        cols = np.empty((B, L, Cin, k), dtype=src.dtype)
        for j in range(k):
            cols[:, :, :, j] = src[:, :, j:j + L].transpose(0, 2, 1)
        return cols.reshape(B * L, Cin * k)

    wmat = w.data.transpose(1, 2, 0).reshape(Cin * k, Cout)
    cols = gather(xp)
    y = np.empty((B * L, Cout), dtype=np.result_type(cols, wmat))
    for i in range(B):  # block grid restarts per item so offsets ignore B and L
        y[i * L:(i + 1) * L] = _rowwise_matmul(cols[i * L:(i + 1) * L], wmat)
    y += b.data
    out = y.reshape(B, L, Cout).transpose(0, 2, 1)
    if squeeze:
        out = out[0]

    def vjp(g):
        gd = g[None] if squeeze else g
        g2 = np.ascontiguousarray(gd.transpose(0, 2, 1)).reshape(B * L, Cout)
        gx = gw = gb = None
        if b.requires_grad:
            gb = np.sum(g2.astype(np.float64, copy=False), axis=0).astype(b.dtype)
        if w.requires_grad:
            gw = (gather(xp).T @ g2).reshape(Cin, k, Cout).transpose(2, 0, 1)
            gw = np.ascontiguousarray(gw)
        if x.requires_grad:
            dcols = (g2 @ wmat.T).reshape(B, L, Cin, k)
            dxp = np.zeros_like(xp)
            for j in range(k):
                dxp[:, :, j:j + L] += dcols[:, :, :, j].transpose(0, 2, 1)
            gx = dxp[:, :, pad:pad + L]
            if squeeze:
                gx = gx[0]
        return (gx, gw, gb)

    return _make_node(np.ascontiguousarray(out), (x, w, b), vjp, "conv1d")


def dropout(x: Tensor, p: float, rng: np.random.Generator | None = None) -> Tensor:
    """Inverted dropout. ``p == 0`` is an exact identity (no graph node)."""
    if not 0.0 <= p < 1.0:
        raise ValueError(f"dropout probability must be in [0, 1), got {p}")
    if p == 0.0:
        return x
    if rng is None:
        raise ValueError("dropout with p > 0 requires an explicit generator")
    keep = (rng.random(x.shape) >= p).astype(x.dtype)
    scale_ = np.asarray(1.0 / (1.0 - p), dtype=x.dtype)

    def vjp(g):
        return (g * keep * scale_,)

    return _make_node(x.data * keep * scale_, (x,), vjp, "dropout")


def _logsumexp64(z: np.ndarray) -> np.ndarray:
    m = np.max(z, axis=-1, keepdims=True)
    return (m + np.log(np.sum(np.exp(z - m), axis=-1, keepdims=True)))[..., 0]


def masked_cross_entropy(logits: Tensor, labels: np.ndarray, mask: np.ndarray,
                         reduction: str = "mean") -> Tensor:
    """Cross entropy over positions where ``mask`` is true.

    ``logits`` is [..., C] with integer ``labels`` and boolean ``mask``
    of the leading shape. Masked-out positions are excluded by gathering
    the kept entries before any reduction, so the result is bit-identical
    under changes to padded content or padded length.

    reduction 'mean' divides the kept sum by the number of kept
    positions; 'seq_sum_batch_mean' divides by the leading batch size
    (sequence inputs [B, T, C] only), matching a per-sequence sum
    averaged over sequences.
    """
    if reduction not in ("mean", "seq_sum_batch_mean"):
        raise ValueError(f"unknown reduction {reduction!r}")
    labels = np.asarray(labels)
    mask = np.asarray(mask, dtype=bool)
    C = logits.shape[-1]
    if labels.shape != logits.shape[:-1] or mask.shape != labels.shape:
        raise ValueError(
            f"label/mask shape {labels.shape}/{mask.shape} does not match logits {logits.shape}")
    kept = np.flatnonzero(mask.reshape(-1))
    if kept.size == 0:
        raise ValueError("masked_cross_entropy: mask selects no positions")
    flat_labels = labels.reshape(-1)[kept]
    if flat_labels.min() < 0 or flat_labels.max() >= C:
        raise ValueError(f"labels out of range for {C} classes at unmasked positions")

    z = logits.data.reshape(-1, C)[kept].astype(np.float64, copy=False)
    lse = _logsumexp64(z)
    nll = lse - z[np.arange(kept.size), flat_labels]
    if reduction == "mean":
        denom = float(kept.size)
    else:
        if logits.ndim != 3:
            raise ValueError("seq_sum_batch_mean reduction requires [B, T, C] logits")
        denom = float(logits.shape[0])
    loss = np.asarray(nll.sum() / denom, dtype=logits.dtype)

    def vjp(g):
        p = np.exp(z - lse[:, None])
        p[np.arange(kept.size), flat_labels] -= 1.0
        p *= float(g) / denom
        gx = np.zeros((logits.data.size // C, C), dtype=logits.dtype)
        gx[kept] = p.astype(logits.dtype)
        return (gx.reshape(logits.shape),)

    return _make_node(loss, (logits,), vjp, "masked_cross_entropy")


def masked_bce_with_logits(logits: Tensor, targets: np.ndarray, mask: np.ndarray,
                           reduction: str = "mean") -> Tensor:
    """Element-wise binary cross entropy from logits over masked positions.

    ``logits`` is [..., K]; ``mask`` has the leading shape and keeps or
    drops whole K-vectors. Uses the standard stable form
    max(x, 0) - x*t + log1p(exp(-|x|)).
    """
    if reduction not in ("mean", "seq_sum_batch_mean"):
        raise ValueError(f"unknown reduction {reduction!r}")
    targets = np.asarray(targets)
    mask = np.asarray(mask, dtype=bool)
    K = logits.shape[-1]
    if targets.shape != logits.shape or mask.shape != logits.shape[:-1]:
        raise ValueError(
            f"target/mask shape {targets.shape}/{mask.shape} does not match logits {logits.shape}")
    kept = np.flatnonzero(mask.reshape(-1))
    if kept.size == 0:
        raise ValueError("masked_bce_with_logits: mask selects no positions")

    z = logits.data.reshape(-1, K)[kept].astype(np.float64, copy=False)
    t = targets.reshape(-1, K)[kept].astype(np.float64, copy=False)
    elem = np.maximum(z, 0.0) - z * t + np.log1p(np.exp(-np.abs(z)))
    if reduction == "mean":
        denom = float(kept.size * K)
    else:
        if logits.ndim != 3:
            raise ValueError("seq_sum_batch_mean reduction requires [B, T, K] logits")
        denom = float(logits.shape[0])
    loss = np.asarray(elem.sum() / denom, dtype=logits.dtype)

    def vjp(g):
        d = (1.0 / (1.0 + np.exp(-z)) - t) * (float(g) / denom)
        gx = np.zeros((logits.data.size // K, K), dtype=logits.dtype)
        gx[kept] = d.astype(logits.dtype)
        return (gx.reshape(logits.shape),)

    return _make_node(loss, (logits,), vjp, "masked_bce_with_logits")


def masked_mean_pool(x: Tensor, mask: np.ndarray) -> Tensor:
    """Mean over mask-true rows of [B, T, D] (or [T, D]) -> [B, D] (or [D]).

    Pools by gathering the kept rows first, so appending masked-out rows
    cannot perturb the result: the summation sees the same operands in
    the same order either way.
    """
    mask = np.asarray(mask, dtype=bool)
    single = x.ndim == 2
    shape = ((1,) + x.shape) if single else x.shape
    if single:
        mask = mask[None]
    if x.ndim not in (2, 3):
        raise ValueError(f"masked_mean_pool expects [B, T, D] or [T, D], got {x.shape}")
    b, t, d = shape
    if mask.shape != (b, t):
        raise ValueError(f"mask shape {mask.shape} does not match rows {(b, t)}")
    counts = mask.sum(axis=1)
    if (counts == 0).any():
        raise ValueError("masked_mean_pool: a sequence has no unmasked rows")

    rows = x.data.reshape(b, t, d)
    out = np.empty((b, d), dtype=np.float64)
    for i in range(b):
        out[i] = rows[i][mask[i]].sum(axis=0, dtype=np.float64) / counts[i]
    out = out.astype(x.dtype)
    if single:
        out = out.reshape(d)

    def vjp(g):
        g2 = g.reshape(b, d)
        gx = np.zeros((b, t, d), dtype=x.dtype)
        for i in range(b):
            gx[i, mask[i]] = (g2[i] / counts[i]).astype(x.dtype)
        return (gx.reshape(x.shape),)

    return _make_node(out, (x,), vjp, "masked_mean_pool")


def xavier_uniform(shape: tuple[int, ...], rng: np.random.Generator | int,
                   dtype=np.float32) -> np.ndarray:
    """Glorot uniform init, U(-a, a) with a = sqrt(6 / (fan_in + fan_out)).

    ``rng`` may be a Generator or an integer seed. For 2D weights laid
    out [in, out] the fans are the two dims. For conv kernels
    [C_out, C_in, k] the receptive field multiplies both fans:
    fan_in = C_in*k, fan_out = C_out*k.
    """
    if isinstance(rng, (int, np.integer)):
        rng = np.random.default_rng(rng)
    if len(shape) == 2:
        fan_in, fan_out = shape[0], shape[1]
    elif len(shape) == 3:
        fan_in = shape[1] * shape[2]
        fan_out = shape[0] * shape[2]
    else:
        raise ValueError(f"xavier_uniform expects a 2D or 3D shape, got {shape}")
    a = math.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-a, a, size=shape).astype(dtype)
