"""Whole-model container: encoder, MLP head, aggregator, optional MTL
heads, and the context-fusion step that joins the two stages.

Fused rows are laid out [embedding | clinical | event]. A bundle saves
as two files in one directory: ``params.somn`` (every weight, names
prefixed ``encoder.`` / ``head.`` / ``aggregator.`` / ``mtl.``) and
``config.json``.
"""

from __future__ import annotations

import dataclasses
import json
from pathlib import Path

import numpy as np

from ..autodiff import Tensor, load_checkpoint, save_checkpoint
from ..dataset import context_dim
from ..errors import DataError
from .aggregator import AggregatorConfig, init_aggregator_params, init_mtl_params
from .encoder import EncoderConfig, init_encoder_params, init_mlp_head_params

FEATURE_MODES = ("pooled", "flat")


def base_feature_dim(cfg: EncoderConfig, feature_mode: str = "pooled") -> int:
    """Width of the per-epoch feature Stage 2 consumes, before context."""
    if feature_mode == "pooled":
        return cfg.d_model
    if feature_mode == "flat":
        return cfg.n_patches * cfg.d_model
    raise ValueError(f"unknown feature mode {feature_mode!r}; expected one of {FEATURE_MODES}")


def fuse_context(embeddings: np.ndarray, clinical: np.ndarray | None = None,
                 events: np.ndarray | None = None) -> np.ndarray:
    """Concatenate per-epoch context onto epoch embeddings [T, D].

    The clinical vector (3 values) is repeated onto every row; event
    vectors are per-row already. With neither present this is the
    identity and the input array is returned as-is.
    """
    if embeddings.ndim != 2:
        raise ValueError(f"embeddings must be [T, D], got shape {embeddings.shape}")
    if clinical is None and events is None:
        return embeddings
    t = embeddings.shape[0]
    parts = [np.asarray(embeddings, dtype=np.float32)]
    if clinical is not None:
        clinical = np.asarray(clinical, dtype=np.float32)
        if clinical.shape != (3,):
            raise ValueError(f"clinical vector must have shape (3,), got {clinical.shape}")
        parts.append(np.tile(clinical, (t, 1)))
    if events is not None:
        events = np.asarray(events, dtype=np.float32)
        if events.ndim != 2 or events.shape[0] != t:
            raise ValueError(
                f"event rows {events.shape} do not match {t} embedding rows")
        parts.append(events)
    return np.concatenate(parts, axis=1)


@dataclasses.dataclass
class ModelBundle:
    encoder_cfg: EncoderConfig
    aggregator_cfg: AggregatorConfig
    context_mode: str
    encoder_params: dict[str, Tensor]
    head_params: dict[str, Tensor]
    aggregator_params: dict[str, Tensor]
    mtl_params: dict[str, Tensor] | None = None
    feature_mode: str = "pooled"
    encoder_frozen: bool = False

    def __post_init__(self):
        if self.feature_mode not in FEATURE_MODES:
            raise ValueError(f"unknown feature mode {self.feature_mode!r}")
        expected = base_feature_dim(self.encoder_cfg, self.feature_mode) \
            + context_dim(self.context_mode)
        if self.aggregator_cfg.in_dim != expected:
            raise ValueError(
                f"aggregator in_dim {self.aggregator_cfg.in_dim} does not match "
                f"feature width {expected} for context mode {self.context_mode!r}")
        if self.context_mode == "mtl" and self.mtl_params is None:
            raise ValueError("context mode 'mtl' requires MTL head parameters")

    def set_frozen(self, frozen: bool) -> None:
        """Mark the encoder (and its Stage-1 head) trainable or not."""
        self.encoder_frozen = frozen
        for p in self.encoder_params.values():
            p.requires_grad = not frozen
        for p in self.head_params.values():
            p.requires_grad = not frozen


def init_bundle(encoder_cfg: EncoderConfig, context_mode: str, seed: int,
                feature_mode: str = "pooled", kernel: int = 7,
                n_agg_layers: int = 12, d_hidden: int = 512) -> ModelBundle:
    in_dim = base_feature_dim(encoder_cfg, feature_mode) + context_dim(context_mode)
    agg_cfg = AggregatorConfig(in_dim=in_dim, n_layers=n_agg_layers,
                               d_hidden=d_hidden, kernel=kernel)
    mtl = init_mtl_params(d_hidden, seed=seed + 3) if context_mode == "mtl" else None
    return ModelBundle(
        encoder_cfg=encoder_cfg,
        aggregator_cfg=agg_cfg,
        context_mode=context_mode,
        encoder_params=init_encoder_params(encoder_cfg, seed),
        head_params=init_mlp_head_params(encoder_cfg, seed + 1),
        aggregator_params=init_aggregator_params(agg_cfg, seed + 2),
        mtl_params=mtl,
        feature_mode=feature_mode,
    )


def _namespaced(bundle: ModelBundle) -> dict[str, Tensor]:
    flat: dict[str, Tensor] = {}
    for name, p in bundle.encoder_params.items():
        flat[f"encoder.{name}"] = p
    flat.update(bundle.head_params)  # already prefixed "head."
    for name, p in bundle.aggregator_params.items():
        flat[f"aggregator.{name}"] = p
    if bundle.mtl_params is not None:
        flat.update(bundle.mtl_params)  # already prefixed "mtl."
    return flat


def save_bundle(bundle: ModelBundle, out_dir: str | Path) -> None:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    save_checkpoint(out_dir / "params.somn", _namespaced(bundle))
    config = {
        "encoder": dataclasses.asdict(bundle.encoder_cfg),
        "aggregator": dataclasses.asdict(bundle.aggregator_cfg),
        "context_mode": bundle.context_mode,
        "feature_mode": bundle.feature_mode,
        "encoder_frozen": bundle.encoder_frozen,
        "has_mtl": bundle.mtl_params is not None,
    }
    (out_dir / "config.json").write_text(json.dumps(config, indent=2, sort_keys=True) + "\n")


def load_bundle(in_dir: str | Path) -> ModelBundle:
    in_dir = Path(in_dir)
    cfg_path = in_dir / "config.json"
    if not cfg_path.exists():
        raise DataError(f"no config.json under {in_dir}")
    config = json.loads(cfg_path.read_text())
    encoder_cfg = EncoderConfig(**config["encoder"])
    agg_cfg = AggregatorConfig(**config["aggregator"])
    arrays = load_checkpoint(in_dir / "params.somn")

    groups: dict[str, dict[str, Tensor]] = {"encoder": {}, "head": {}, "aggregator": {}, "mtl": {}}
    for name, arr in arrays.items():
        prefix, _, rest = name.partition(".")
        if prefix not in groups or not rest:
            raise DataError(f"unrecognized parameter name {name!r} in bundle")
        key = rest if prefix in ("encoder", "aggregator") else name
        groups[prefix][key] = Tensor(arr, requires_grad=True)

    mtl = groups["mtl"] or None
    if config["has_mtl"] != (mtl is not None):
        raise DataError("bundle config and checkpoint disagree about MTL heads")
    bundle = ModelBundle(
        encoder_cfg=encoder_cfg,
        aggregator_cfg=agg_cfg,
        context_mode=config["context_mode"],
        encoder_params=groups["encoder"],
        head_params=groups["head"],
        aggregator_params=groups["aggregator"],
        mtl_params=mtl,
        feature_mode=config["feature_mode"],
    )
    bundle.set_frozen(bool(config["encoder_frozen"]))
    return bundle
