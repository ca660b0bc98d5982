"""Two-stage sleep staging network: per-epoch transformer encoder,
context fusion, whole-night 1D-CNN aggregator, and MTL heads."""

from .aggregator import (
    AggregatorConfig,
    aggregate,
    aggregate_features,
    aggregator_param_count,
    init_aggregator_params,
    init_mtl_params,
    mtl_heads,
)
from .bundle import (
    FEATURE_MODES,
    ModelBundle,
    base_feature_dim,
    fuse_context,
    init_bundle,
    load_bundle,
    save_bundle,
)
from .encoder import (
    N_CHANNELS,
    EncoderConfig,
    encode_epoch,
    encode_epochs,
    encoder_param_count,
    init_encoder_params,
    init_mlp_head_params,
    mlp_head,
    mlp_head_param_count,
    sinusoidal_positions,
)

__all__ = [
    "AggregatorConfig",
    "EncoderConfig",
    "FEATURE_MODES",
    "ModelBundle",
    "N_CHANNELS",
    "aggregate",
    "aggregate_features",
    "aggregator_param_count",
    "base_feature_dim",
    "encode_epoch",
    "encode_epochs",
    "encoder_param_count",
    "fuse_context",
    "init_aggregator_params",
    "init_bundle",
    "init_encoder_params",
    "init_mlp_head_params",
    "init_mtl_params",
    "load_bundle",
    "mlp_head",
    "mlp_head_param_count",
    "mtl_heads",
    "save_bundle",
    "sinusoidal_positions",
]
