"""Whole-night 1D-CNN aggregator over per-epoch features, plus the
multi-task auxiliary heads.

Twelve same-padded convolutions along the epoch axis: layer 1 maps the
fused input width to 512, layers 2..11 keep 512 (ReLU after layers
1..11), layer 12 maps to the 5 stage logits with no activation. With
kernel 7 the stack sees +/-36 epochs around each position (receptive
field 73). Because padding is zeros and convolutions are local, logits
at scored epochs are bit-identical no matter how much zero padding
follows the recording; tests pin that.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ..autodiff import Tensor, conv1d, masked_mean_pool, matmul, relu, reshape, transpose, xavier_uniform
from ..errors import DataError


@dataclass(frozen=True)
class AggregatorConfig:
    in_dim: int = 128
    n_layers: int = 12
    d_hidden: int = 512
    kernel: int = 7
    out_dim: int = 5

    def __post_init__(self):
        if self.kernel % 2 == 0:
            raise ValueError(f"kernel must be odd for same padding, got {self.kernel}")
        if self.n_layers < 2:
            raise ValueError("aggregator needs at least an input and an output layer")
        if self.out_dim != 5:
            raise ValueError(f"final layer must emit 5 stage logits, got {self.out_dim}")

    @property
    def receptive_field(self) -> int:
        return 1 + self.n_layers * (self.kernel - 1)


def aggregator_param_count(cfg: AggregatorConfig) -> int:
    k, d = cfg.kernel, cfg.d_hidden
    count = (d * cfg.in_dim * k + d)
    count += (cfg.n_layers - 2) * (d * d * k + d)
    count += cfg.out_dim * d * k + cfg.out_dim
    return count


def init_aggregator_params(cfg: AggregatorConfig, seed: int) -> dict[str, Tensor]:
    rng = np.random.default_rng(seed)
    params: dict[str, Tensor] = {}
    dims = [cfg.in_dim] + [cfg.d_hidden] * (cfg.n_layers - 1) + [cfg.out_dim]
    for i in range(cfg.n_layers):
        params[f"conv{i + 1}.w"] = Tensor(
            xavier_uniform((dims[i + 1], dims[i], cfg.kernel), rng), requires_grad=True)
        params[f"conv{i + 1}.b"] = Tensor(
            np.zeros(dims[i + 1], dtype=np.float32), requires_grad=True)
    return params


def aggregate_features(params: dict[str, Tensor], cfg: AggregatorConfig,
                       seq: Tensor | np.ndarray) -> tuple[Tensor, Tensor]:
    """Run the stack on [B, T, in_dim] (or [T, in_dim]).

    Returns (logits [B, T, 5], penultimate features [B, T, 512]); the
    penultimate output (layer 11, after ReLU) feeds the MTL heads.
    """
    if isinstance(seq, np.ndarray):
        seq = Tensor(np.ascontiguousarray(seq, dtype=np.float32))
    single = seq.ndim == 2
    if single:
        seq = reshape(seq, (1,) + seq.shape)
    if seq.shape[-1] != cfg.in_dim:
        raise ValueError(f"fused feature width {seq.shape[-1]} does not match "
                         f"aggregator input width {cfg.in_dim}")
    h = transpose(seq, (0, 2, 1))  # [B, in_dim, T]
    for i in range(cfg.n_layers - 1):
        h = relu(conv1d(h, params[f"conv{i + 1}.w"], params[f"conv{i + 1}.b"]))
    feats = transpose(h, (0, 2, 1))
    logits = transpose(
        conv1d(h, params[f"conv{cfg.n_layers}.w"], params[f"conv{cfg.n_layers}.b"]),
        (0, 2, 1))
    if single:
        logits = reshape(logits, logits.shape[1:])
        feats = reshape(feats, feats.shape[1:])
    return logits, feats


def aggregate(params: dict[str, Tensor], cfg: AggregatorConfig,
              seq: Tensor | np.ndarray) -> Tensor:
    """Stage logits per epoch: [B, T, in_dim] -> [B, T, 5]."""
    return aggregate_features(params, cfg, seq)[0]


def init_mtl_params(d_features: int = 512, n_event_kinds: int = 7,
                    seed: int = 0) -> dict[str, Tensor]:
    rng = np.random.default_rng(seed)
    return {
        "mtl.event.w": Tensor(xavier_uniform((d_features, n_event_kinds), rng), requires_grad=True),
        "mtl.event.b": Tensor(np.zeros(n_event_kinds, dtype=np.float32), requires_grad=True),
        "mtl.sex.w": Tensor(xavier_uniform((d_features, 1), rng), requires_grad=True),
        "mtl.sex.b": Tensor(np.zeros(1, dtype=np.float32), requires_grad=True),
        "mtl.age.w": Tensor(xavier_uniform((d_features, 1), rng), requires_grad=True),
        "mtl.age.b": Tensor(np.zeros(1, dtype=np.float32), requires_grad=True),
        "mtl.bmi.w": Tensor(xavier_uniform((d_features, 1), rng), requires_grad=True),
        "mtl.bmi.b": Tensor(np.zeros(1, dtype=np.float32), requires_grad=True),
    }


def mtl_heads(params: dict[str, Tensor], features: Tensor,
              mask: np.ndarray) -> tuple[Tensor, Tensor, Tensor, Tensor]:
    """Auxiliary outputs from penultimate features [B, T, 512] (or [T, 512]).

    Event logits are per epoch; the subject-level heads (sex logit, age
    and BMI predictions on z-scored targets) pool only mask-true epochs,
    so padding cannot change them.
    """
    single = features.ndim == 2
    if single:
        features = reshape(features, (1,) + features.shape)
        mask = np.asarray(mask)[None]
    mask = np.asarray(mask, dtype=bool)
    b, t, d = features.shape
    if mask.shape != (b, t):
        raise ValueError(f"mask shape {mask.shape} does not match features {(b, t)}")
    if not mask.any(axis=1).all():
        raise DataError("mtl_heads: a sequence has no scored epochs to pool")

    event_logits = matmul(features, params["mtl.event.w"]) + params["mtl.event.b"]
    pooled = masked_mean_pool(features, mask)  # [B, d]

    sex_logit = reshape(matmul(pooled, params["mtl.sex.w"]) + params["mtl.sex.b"], (b,))
    age_pred = reshape(matmul(pooled, params["mtl.age.w"]) + params["mtl.age.b"], (b,))
    bmi_pred = reshape(matmul(pooled, params["mtl.bmi.w"]) + params["mtl.bmi.b"], (b,))
    if single:
        event_logits = reshape(event_logits, event_logits.shape[1:])
        sex_logit = reshape(sex_logit, ())
        age_pred = reshape(age_pred, ())
        bmi_pred = reshape(bmi_pred, ())
    return event_logits, sex_logit, age_pred, bmi_pred
