"""Run configuration: one JSON document drives every CLI subcommand.

The schema is strict on purpose. A key the program does not understand
is an error, never a silent no-op, so a typo like "lr_decy" cannot
quietly train with the default. Every message carries the full path of
the offending key ("train.stage2.lr0").

Sections, all optional, with their defaults:

    output_dir  "out"
    data        input/output paths, channel alias extensions,
                common_rate_hz (25.0), split fractions and seed
    model       encoder geometry, aggregator geometry, context mode
    train       optimizer settings shared by both stages, plus
                "stage1"/"stage2" sub-objects overriding per stage
    synth       synthetic cohort parameters

``--seed`` on the command line wins over every seed in the file,
including per-stage overrides.
"""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field
from pathlib import Path

from .dataset import CONTEXT_MODES
from .edf import ROLES
from .errors import ConfigError
from .model import AggregatorConfig, EncoderConfig
from .model.bundle import FEATURE_MODES
from .synth import SynthConfig
from .train import DEFAULT_MTL_WEIGHTS, TrainConfig

DEFAULT_SPLIT = (0.805, 0.094, 0.101)


# ---------------------------------------------------------------- helpers

def _require_object(doc, path: str) -> dict:
    if not isinstance(doc, dict):
        raise ConfigError(f"{path} must be a JSON object, got {type(doc).__name__}")
    return doc


def _reject_unknown(doc: dict, allowed, path: str) -> None:
    unknown = sorted(set(doc) - set(allowed))
    if unknown:
        raise ConfigError(
            f"unknown config key {path}.{unknown[0]}; allowed keys: "
            f"{', '.join(sorted(allowed))}")


def _number(doc: dict, key: str, path: str, default):
    val = doc.get(key, default)
    if isinstance(val, bool) or not isinstance(val, (int, float)):
        raise ConfigError(f"{path}.{key} must be a number, got {val!r}")
    return float(val)


def _integer(doc: dict, key: str, path: str, default):
    val = doc.get(key, default)
    if isinstance(val, bool) or not isinstance(val, int):
        raise ConfigError(f"{path}.{key} must be an integer, got {val!r}")
    return val


def _boolean(doc: dict, key: str, path: str, default):
    val = doc.get(key, default)
    if not isinstance(val, bool):
        raise ConfigError(f"{path}.{key} must be true or false, got {val!r}")
    return val


def _string(doc: dict, key: str, path: str, default):
    val = doc.get(key, default)
    if val is not None and not isinstance(val, str):
        raise ConfigError(f"{path}.{key} must be a string, got {val!r}")
    return val


def _choice(doc: dict, key: str, path: str, default: str, options) -> str:
    val = _string(doc, key, path, default)
    if val not in options:
        raise ConfigError(f"{path}.{key} must be one of {', '.join(options)}, got {val!r}")
    return val


def _number_pair(doc: dict, key: str, path: str, default) -> tuple[float, float]:
    val = doc.get(key)
    if val is None:
        return default
    if (not isinstance(val, list) or len(val) != 2
            or any(isinstance(v, bool) or not isinstance(v, (int, float)) for v in val)):
        raise ConfigError(f"{path}.{key} must be a two-number list, got {val!r}")
    return float(val[0]), float(val[1])


# ---------------------------------------------------------------- sections

@dataclass(frozen=True)
class DataSettings:
    """Where inputs live and how file ingestion conditions them."""

    cohort_dir: str | None = None        # directory of EDF/XML pairs (or a manifest)
    epst: str | None = None              # preprocessed epoch store to read or write
    metadata_csv: str | None = None      # defaults to <cohort_dir>/metadata.csv
    encoder_checkpoint: str | None = None  # defaults to <output_dir>/stage1/encoder.somn
    bundle: str | None = None            # defaults to <output_dir>/<context>/model
    channel_aliases: dict = field(default_factory=dict)  # role -> extra labels
    common_rate_hz: float = 25.0
    split: tuple[float, float, float] = DEFAULT_SPLIT
    split_seed: int = 0


def _parse_data(doc: dict, path: str) -> DataSettings:
    allowed = ("cohort_dir", "epst", "metadata_csv", "encoder_checkpoint",
               "bundle", "channel_aliases", "common_rate_hz", "split")
    _reject_unknown(doc, allowed, path)

    aliases = _require_object(doc.get("channel_aliases", {}), f"{path}.channel_aliases")
    clean_aliases: dict[str, tuple[str, ...]] = {}
    for role, labels in aliases.items():
        if role not in ROLES:
            raise ConfigError(
                f"{path}.channel_aliases: unknown channel role {role!r}; "
                f"known roles: {', '.join(ROLES)}")
        if (not isinstance(labels, list)
                or any(not isinstance(v, str) or not v for v in labels)):
            raise ConfigError(
                f"{path}.channel_aliases.{role} must be a list of non-empty strings")
        clean_aliases[role] = tuple(labels)

    split_doc = _require_object(doc.get("split", {}), f"{path}.split")
    _reject_unknown(split_doc, ("train", "val", "test", "seed"), f"{path}.split")
    fractions = (_number(split_doc, "train", f"{path}.split", DEFAULT_SPLIT[0]),
                 _number(split_doc, "val", f"{path}.split", DEFAULT_SPLIT[1]),
                 _number(split_doc, "test", f"{path}.split", DEFAULT_SPLIT[2]))
    if any(not 0.0 < f < 1.0 for f in fractions) or abs(sum(fractions) - 1.0) > 1e-6:
        raise ConfigError(
            f"{path}.split fractions must each lie in (0, 1) and sum to 1, "
            f"got {fractions}")

    rate = _number(doc, "common_rate_hz", path, 25.0)
    if rate <= 0:
        raise ConfigError(f"{path}.common_rate_hz must be positive, got {rate}")

    return DataSettings(
        cohort_dir=_string(doc, "cohort_dir", path, None),
        epst=_string(doc, "epst", path, None),
        metadata_csv=_string(doc, "metadata_csv", path, None),
        encoder_checkpoint=_string(doc, "encoder_checkpoint", path, None),
        bundle=_string(doc, "bundle", path, None),
        channel_aliases=clean_aliases,
        common_rate_hz=rate,
        split=fractions,
        split_seed=_integer(split_doc, "seed", f"{path}.split", 0),
    )


@dataclass(frozen=True)
class ModelSettings:
    encoder: EncoderConfig = EncoderConfig()
    agg_layers: int = 12
    agg_hidden: int = 512
    agg_kernel: int = 7
    context_mode: str = "none"
    feature_mode: str = "pooled"


def _parse_model(doc: dict, path: str) -> ModelSettings:
    _reject_unknown(doc, ("encoder", "aggregator", "context"), path)

    enc_doc = _require_object(doc.get("encoder", {}), f"{path}.encoder")
    enc_fields = [f.name for f in dataclasses.fields(EncoderConfig)]
    _reject_unknown(enc_doc, enc_fields, f"{path}.encoder")
    enc_kwargs = {}
    for name in ("n_layers", "n_heads", "d_model", "d_ff",
                 "patch_len_samples", "samples_per_epoch"):
        if name in enc_doc:
            enc_kwargs[name] = _integer(enc_doc, name, f"{path}.encoder", None)
    if "dropout" in enc_doc:
        enc_kwargs["dropout"] = _number(enc_doc, "dropout", f"{path}.encoder", None)
    try:
        encoder = EncoderConfig(**enc_kwargs)
    except ValueError as exc:
        raise ConfigError(f"{path}.encoder: {exc}") from exc

    agg_doc = _require_object(doc.get("aggregator", {}), f"{path}.aggregator")
    _reject_unknown(agg_doc, ("n_layers", "d_hidden", "kernel"), f"{path}.aggregator")
    layers = _integer(agg_doc, "n_layers", f"{path}.aggregator", 12)
    hidden = _integer(agg_doc, "d_hidden", f"{path}.aggregator", 512)
    kernel = _integer(agg_doc, "kernel", f"{path}.aggregator", 7)
    try:
        # in_dim depends on the context mode at runtime; geometry checks
        # (odd kernel, minimum depth) do not, so run them now
        AggregatorConfig(in_dim=1, n_layers=layers, d_hidden=hidden, kernel=kernel)
    except ValueError as exc:
        raise ConfigError(f"{path}.aggregator: {exc}") from exc

    ctx_doc = _require_object(doc.get("context", {}), f"{path}.context")
    _reject_unknown(ctx_doc, ("mode", "feature_mode"), f"{path}.context")

    return ModelSettings(
        encoder=encoder,
        agg_layers=layers,
        agg_hidden=hidden,
        agg_kernel=kernel,
        context_mode=_choice(ctx_doc, "mode", f"{path}.context", "none", CONTEXT_MODES),
        feature_mode=_choice(ctx_doc, "feature_mode", f"{path}.context",
                             "pooled", FEATURE_MODES),
    )


@dataclass(frozen=True)
class TrainSettings:
    """Optimizer settings shared by both stages plus per-stage overrides.

    The ``stage`` and ``context`` fields of TrainConfig never appear in
    the file: the subcommand fixes the stage and the model section fixes
    the context, so the two cannot drift apart.
    """

    shared: dict = field(default_factory=dict)
    stage1: dict = field(default_factory=dict)
    stage2: dict = field(default_factory=dict)

    def stage_config(self, stage: int, context_mode: str,
                     seed_override: int | None = None) -> TrainConfig:
        merged = {**self.shared, **(self.stage1 if stage == 1 else self.stage2)}
        if seed_override is not None:
            merged["seed"] = seed_override
        return TrainConfig(stage=stage, context=context_mode, **merged)


_TRAIN_KEYS = ("batch_size", "lr0", "lr_decay", "max_epochs", "seed",
               "loss_reduction", "mtl_weights")


def _parse_train_block(doc: dict, path: str) -> dict:
    out: dict = {}
    if "batch_size" in doc:
        out["batch_size"] = _integer(doc, "batch_size", path, None)
    if "lr0" in doc:
        out["lr0"] = _number(doc, "lr0", path, None)
    if "lr_decay" in doc:
        out["lr_decay"] = _number(doc, "lr_decay", path, None)
    if "max_epochs" in doc:
        out["max_epochs"] = _integer(doc, "max_epochs", path, None)
    if "seed" in doc:
        out["seed"] = _integer(doc, "seed", path, None)
    if "loss_reduction" in doc:
        out["loss_reduction"] = _choice(doc, "loss_reduction", path, None,
                                        ("mean", "seq_sum_batch_mean"))
    if "mtl_weights" in doc:
        weights = _require_object(doc["mtl_weights"], f"{path}.mtl_weights")
        _reject_unknown(weights, DEFAULT_MTL_WEIGHTS, f"{path}.mtl_weights")
        out["mtl_weights"] = {k: _number(weights, k, f"{path}.mtl_weights", None)
                              for k in weights}
    return out


def _parse_train(doc: dict, path: str) -> TrainSettings:
    _reject_unknown(doc, _TRAIN_KEYS + ("stage1", "stage2"), path)
    shared = _parse_train_block(doc, path)
    stages = {}
    for name in ("stage1", "stage2"):
        sub = _require_object(doc.get(name, {}), f"{path}.{name}")
        _reject_unknown(sub, _TRAIN_KEYS, f"{path}.{name}")
        stages[name] = _parse_train_block(sub, f"{path}.{name}")
    settings = TrainSettings(shared=shared, **stages)
    # surface value errors (negative lr, bad batch size) at load time,
    # not minutes into a run
    settings.stage_config(1, "none")
    settings.stage_config(2, "none")
    return settings


_SYNTH_KEYS = ("n_subjects", "epochs_per_subject", "sample_rate_hz", "transitions",
               "event_rates_per_hour", "arousal_lock_prob", "arousal_window_s",
               "post_event_fragmentation_prob", "render_arousal_in_eeg",
               "age_range_years", "seed")


def _parse_synth(doc: dict, path: str) -> SynthConfig:
    _reject_unknown(doc, _SYNTH_KEYS, path)
    kwargs: dict = {}
    for name in ("n_subjects", "epochs_per_subject", "seed"):
        if name in doc:
            kwargs[name] = _integer(doc, name, path, None)
    for name in ("sample_rate_hz", "arousal_lock_prob", "post_event_fragmentation_prob"):
        if name in doc:
            kwargs[name] = _number(doc, name, path, None)
    if "render_arousal_in_eeg" in doc:
        kwargs["render_arousal_in_eeg"] = _boolean(doc, "render_arousal_in_eeg", path, None)
    if "arousal_window_s" in doc:
        kwargs["arousal_window_s"] = _number_pair(doc, "arousal_window_s", path, None)
    if "age_range_years" in doc:
        kwargs["age_range_years"] = _number_pair(doc, "age_range_years", path, None)
    if "transitions" in doc:
        rows = doc["transitions"]
        if (not isinstance(rows, list) or len(rows) != 5
                or any(not isinstance(r, list) or len(r) != 5 for r in rows)):
            raise ConfigError(f"{path}.transitions must be a 5x5 list of numbers")
        kwargs["transitions"] = rows
    if "event_rates_per_hour" in doc:
        rates = _require_object(doc["event_rates_per_hour"], f"{path}.event_rates_per_hour")
        kwargs["event_rates_per_hour"] = {
            k: _number(rates, k, f"{path}.event_rates_per_hour", None) for k in rates}
    return SynthConfig(**kwargs)  # deep validation lives in SynthConfig


# ---------------------------------------------------------------- top level

@dataclass(frozen=True)
class RunConfig:
    output_dir: str = "out"
    data: DataSettings = DataSettings()
    model: ModelSettings = ModelSettings()
    train: TrainSettings = TrainSettings()
    synth: SynthConfig = field(default_factory=SynthConfig)

    def with_seed(self, seed: int | None) -> "RunConfig":
        """A copy with every seed replaced (--seed wins over the file)."""
        if seed is None:
            return self
        return dataclasses.replace(
            self,
            data=dataclasses.replace(self.data, split_seed=seed),
            train=TrainSettings(
                shared={**self.train.shared, "seed": seed},
                stage1={k: v for k, v in self.train.stage1.items() if k != "seed"},
                stage2={k: v for k, v in self.train.stage2.items() if k != "seed"},
            ),
            synth=dataclasses.replace(self.synth, seed=seed),
        )


def parse_run_config(doc: dict) -> RunConfig:
    _require_object(doc, "config")
    _reject_unknown(doc, ("output_dir", "data", "model", "train", "synth"), "config")
    output_dir = _string(doc, "output_dir", "config", "out")
    if not output_dir:
        raise ConfigError("config.output_dir must be a non-empty string")
    return RunConfig(
        output_dir=output_dir,
        data=_parse_data(_require_object(doc.get("data", {}), "config.data"), "data"),
        model=_parse_model(_require_object(doc.get("model", {}), "config.model"), "model"),
        train=_parse_train(_require_object(doc.get("train", {}), "config.train"), "train"),
        synth=_parse_synth(_require_object(doc.get("synth", {}), "config.synth"), "synth"),
    )


def load_run_config(path: str | Path) -> RunConfig:
    path = Path(path)
    try:
        text = path.read_text()
    except FileNotFoundError:
        raise ConfigError(f"config file not found: {path}") from None
    except OSError as exc:
        raise ConfigError(f"cannot read config file {path}: {exc}") from exc
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path} is not valid JSON: {exc}") from exc
    return parse_run_config(doc)
