"""Per-epoch transformer encoder and its Stage-1 MLP classification head.

A 30 s epoch [9, S] is cut into P non-overlapping patches of
``patch_len_samples`` samples, each patch flattened (9 * patch_len
values) and linearly projected to d_model. Sinusoidal positions are
added, then pre-norm transformer blocks (multi-head attention + GELU
FFN, residual connections) with a final layer norm. The epoch embedding
handed to Stage 2 is the mean over token positions.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from ..autodiff import (
    Tensor,
    dropout,
    gelu,
    layer_norm,
    matmul,
    relu,
    reshape,
    softmax,
    tensor_mean,
    transpose,
    xavier_uniform,
)

N_CHANNELS = 9


@dataclass(frozen=True)
class EncoderConfig:
    n_layers: int = 6
    n_heads: int = 8
    d_model: int = 128
    d_ff: int = 512
    patch_len_samples: int = 25
    dropout: float = 0.0
    samples_per_epoch: int = 750

    def __post_init__(self):
        if self.d_model % self.n_heads != 0:
            raise ValueError(f"d_model {self.d_model} not divisible by {self.n_heads} heads")
        if self.samples_per_epoch % self.patch_len_samples != 0:
            raise ValueError(
                f"epoch of {self.samples_per_epoch} samples not divisible by "
                f"patch length {self.patch_len_samples}")
        if not 0.0 <= self.dropout < 1.0:
            raise ValueError(f"dropout must be in [0, 1), got {self.dropout}")

    @property
    def n_patches(self) -> int:
        return self.samples_per_epoch // self.patch_len_samples

    @property
    def patch_dim(self) -> int:
        return N_CHANNELS * self.patch_len_samples


def encoder_param_count(cfg: EncoderConfig) -> int:
    """Exact parameter count; a regression guard against silent drift."""
    d, f = cfg.d_model, cfg.d_ff
    patch = cfg.patch_dim * d + d
    per_block = (2 * d) + 4 * (d * d + d) + (2 * d) + (d * f + f) + (f * d + d)
    return patch + cfg.n_layers * per_block + 2 * d


def mlp_head_param_count(cfg: EncoderConfig, hidden: int = 256, n_classes: int = 5) -> int:
    flat = cfg.n_patches * cfg.d_model
    return flat * hidden + hidden + hidden * n_classes + n_classes


def init_encoder_params(cfg: EncoderConfig, seed: int) -> dict[str, Tensor]:
    """Xavier-uniform weights, zero biases, unit layer-norm gains."""
    rng = np.random.default_rng(seed)
    d, f = cfg.d_model, cfg.d_ff
    params: dict[str, Tensor] = {}

    def weight(name, shape):
        params[name] = Tensor(xavier_uniform(shape, rng), requires_grad=True)

    def bias(name, n):
        params[name] = Tensor(np.zeros(n, dtype=np.float32), requires_grad=True)

    def ln(name):
        params[f"{name}.g"] = Tensor(np.ones(d, dtype=np.float32), requires_grad=True)
        params[f"{name}.b"] = Tensor(np.zeros(d, dtype=np.float32), requires_grad=True)

    weight("patch.w", (cfg.patch_dim, d))
    bias("patch.b", d)
    for i in range(cfg.n_layers):
        p = f"block{i}"
        ln(f"{p}.ln1")
        for proj in ("q", "k", "v", "o"):
            weight(f"{p}.attn.w{proj}", (d, d))
            bias(f"{p}.attn.b{proj}", d)
        ln(f"{p}.ln2")
        weight(f"{p}.ffn.w1", (d, f))
        bias(f"{p}.ffn.b1", f)
        weight(f"{p}.ffn.w2", (f, d))
        bias(f"{p}.ffn.b2", d)
    ln("final_ln")
    return params


def init_mlp_head_params(cfg: EncoderConfig, seed: int, hidden: int = 256,
                         n_classes: int = 5) -> dict[str, Tensor]:
    rng = np.random.default_rng(seed)
    flat = cfg.n_patches * cfg.d_model
    return {
        "head.w1": Tensor(xavier_uniform((flat, hidden), rng), requires_grad=True),
        "head.b1": Tensor(np.zeros(hidden, dtype=np.float32), requires_grad=True),
        "head.w2": Tensor(xavier_uniform((hidden, n_classes), rng), requires_grad=True),
        "head.b2": Tensor(np.zeros(n_classes, dtype=np.float32), requires_grad=True),
    }


_PE_CACHE: dict[tuple[int, int], np.ndarray] = {}


def sinusoidal_positions(n_positions: int, d_model: int) -> np.ndarray:
    """Standard fixed position encoding: sin on even dims, cos on odd."""
    key = (n_positions, d_model)
    if key not in _PE_CACHE:
        pos = np.arange(n_positions, dtype=np.float64)[:, None]
        i = np.arange(d_model // 2, dtype=np.float64)[None, :]
        angles = pos / np.power(10000.0, 2.0 * i / d_model)
        pe = np.zeros((n_positions, d_model), dtype=np.float32)
        pe[:, 0::2] = np.sin(angles)
        pe[:, 1::2] = np.cos(angles)
        _PE_CACHE[key] = pe
    return _PE_CACHE[key]


def _attention(params: dict[str, Tensor], prefix: str, x: Tensor,
               cfg: EncoderConfig, rng: np.random.Generator | None) -> Tensor:
    b, p, d = x.shape
    h = cfg.n_heads
    dk = d // h

    def heads(t: Tensor) -> Tensor:
        return transpose(reshape(t, (b, p, h, dk)), (0, 2, 1, 3))

    q = heads(matmul(x, params[f"{prefix}.wq"]) + params[f"{prefix}.bq"])
    k = heads(matmul(x, params[f"{prefix}.wk"]) + params[f"{prefix}.bk"])
    v = heads(matmul(x, params[f"{prefix}.wv"]) + params[f"{prefix}.bv"])

    att = softmax(matmul(q, transpose(k, (0, 1, 3, 2))) * (1.0 / math.sqrt(dk)), axis=-1)
    if cfg.dropout > 0.0:
        att = dropout(att, cfg.dropout, rng)
    mixed = reshape(transpose(matmul(att, v), (0, 2, 1, 3)), (b, p, d))
    return matmul(mixed, params[f"{prefix}.wo"]) + params[f"{prefix}.bo"]


def encode_epochs(params: dict[str, Tensor], cfg: EncoderConfig, x: np.ndarray | Tensor,
                  rng: np.random.Generator | None = None) -> tuple[Tensor, Tensor]:
    """Encode a batch of epochs [B, 9, S] -> (tokens [B, P, d], pooled [B, d])."""
    if isinstance(x, np.ndarray):
        x = Tensor(np.ascontiguousarray(x, dtype=np.float32))
    if x.ndim != 3 or x.shape[1] != N_CHANNELS:
        raise ValueError(f"expected epochs [B, {N_CHANNELS}, S], got {x.shape}")
    b, _, s = x.shape
    if s != cfg.samples_per_epoch:
        raise ValueError(f"epoch has {s} samples, config expects {cfg.samples_per_epoch}")
    p, plen, d = cfg.n_patches, cfg.patch_len_samples, cfg.d_model

    # [B, 9, P*L] -> [B, P, 9*L]: patch p holds all channels' samples p*L..(p+1)*L
    patches = reshape(transpose(reshape(x, (b, N_CHANNELS, p, plen)), (0, 2, 1, 3)),
                      (b, p, N_CHANNELS * plen))
    tokens = matmul(patches, params["patch.w"]) + params["patch.b"]
    tokens = tokens + Tensor(sinusoidal_positions(p, d), dtype=tokens.dtype)

    for i in range(cfg.n_layers):
        pre = f"block{i}"
        normed = layer_norm(tokens, params[f"{pre}.ln1.g"], params[f"{pre}.ln1.b"])
        att = _attention(params, f"{pre}.attn", normed, cfg, rng)
        if cfg.dropout > 0.0:
            att = dropout(att, cfg.dropout, rng)
        tokens = tokens + att
        normed = layer_norm(tokens, params[f"{pre}.ln2.g"], params[f"{pre}.ln2.b"])
        ff = matmul(gelu(matmul(normed, params[f"{pre}.ffn.w1"]) + params[f"{pre}.ffn.b1"]),
                    params[f"{pre}.ffn.w2"]) + params[f"{pre}.ffn.b2"]
        if cfg.dropout > 0.0:
            ff = dropout(ff, cfg.dropout, rng)
        tokens = tokens + ff

    tokens = layer_norm(tokens, params["final_ln.g"], params["final_ln.b"])
    pooled = tensor_mean(tokens, axis=1)
    return tokens, pooled


def encode_epoch(params: dict[str, Tensor], cfg: EncoderConfig,
                 x: np.ndarray) -> tuple[Tensor, Tensor]:
    """Single-epoch convenience: [9, S] -> (tokens [P, d], pooled [d])."""
    tokens, pooled = encode_epochs(params, cfg, np.asarray(x)[None])
    return reshape(tokens, tokens.shape[1:]), reshape(pooled, pooled.shape[1:])


def mlp_head(params: dict[str, Tensor], tokens: Tensor) -> Tensor:
    """Flatten tokens and classify: [B, P, d] -> logits [B, 5] (or [P,d] -> [5])."""
    single = tokens.ndim == 2
    if single:
        tokens = reshape(tokens, (1,) + tokens.shape)
    b = tokens.shape[0]
    flat = reshape(tokens, (b, tokens.shape[1] * tokens.shape[2]))
    if flat.shape[1] != params["head.w1"].shape[0]:
        raise ValueError(f"token block of {flat.shape[1]} values does not match head "
                         f"input {params['head.w1'].shape[0]}")
    h = relu(matmul(flat, params["head.w1"]) + params["head.b1"])
    logits = matmul(h, params["head.w2"]) + params["head.b2"]
    return reshape(logits, (logits.shape[1],)) if single else logits
