"""Two-stage training: per-epoch encoder pretraining, then the frozen
encoder feeding the whole-night aggregator, with checkpoint selection by
validation loss.

Stage 1 treats every scored epoch as an independent example. Stage 2
runs per subject: frozen encoder features, context fusion, zero padding,
aggregator, and a masked cross entropy that sums each subject's loss
over its valid epochs and averages over the batch (a plain mean over
epochs is available as ``loss_reduction="mean"``).

Sequences are assembled at a compute window of max(valid length) plus
half the aggregator's receptive field rather than the full padded
length; the zero padding beyond that window cannot reach any scored
epoch's logit, so losses and predictions are bit-identical to the
full-length computation (tested).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .autodiff import (
    Adam,
    Tensor,
    backward,
    decayed_lr,
    masked_bce_with_logits,
    masked_cross_entropy,
    no_grad,
    reshape,
    save_checkpoint,
    tensor_sum,
)
from .dataset import MAX_SEQ_LEN, ClinicalStats, build_clinical_vector, context_dim
from .epoch_store import IGNORE_LABEL, SubjectEpochs
from .errors import ConfigError, DataError
from .metrics import EvalReport, confusion_matrix
from .model import ModelBundle, aggregate_features, encode_epochs, fuse_context, mlp_head, mtl_heads

DEFAULT_MTL_WEIGHTS = {"event": 1.0, "sex": 1.0, "age": 1.0, "bmi": 1.0}


@dataclass
class TrainConfig:
    stage: int
    batch_size: int = 16
    lr0: float = 1e-4
    lr_decay: float = 0.90
    max_epochs: int = 100
    seed: int = 0
    context: str = "none"
    loss_reduction: str = "seq_sum_batch_mean"
    mtl_weights: dict = field(default_factory=lambda: dict(DEFAULT_MTL_WEIGHTS))

    def __post_init__(self):
        if self.stage not in (1, 2):
            raise ConfigError(f"stage must be 1 or 2, got {self.stage}")
        if self.lr0 <= 0:
            raise ConfigError(f"lr0 must be positive, got {self.lr0}")
        if not 0.0 < self.lr_decay <= 1.0:
            raise ConfigError(f"lr_decay must be in (0, 1], got {self.lr_decay}")
        if self.batch_size < 1:
            raise ConfigError(f"batch_size must be at least 1, got {self.batch_size}")
        if self.max_epochs < 1:
            raise ConfigError(f"max_epochs must be at least 1, got {self.max_epochs}")
        if self.loss_reduction not in ("mean", "seq_sum_batch_mean"):
            raise ConfigError(f"unknown loss reduction {self.loss_reduction!r}")
        unknown = set(self.mtl_weights) - set(DEFAULT_MTL_WEIGHTS)
        if unknown:
            raise ConfigError(f"unknown MTL weight keys {sorted(unknown)}")
        self.mtl_weights = {**DEFAULT_MTL_WEIGHTS, **self.mtl_weights}


@dataclass
class HistoryEntry:
    epoch: int
    lr: float
    train_loss: float
    val_loss: float
    checkpoint_path: Path | None = None


class TrainHistory:
    """Per-pass losses plus the parameters of the best pass so far.

    Only the running-best snapshot is held in memory (strictly lower
    validation loss replaces it, so ties keep the earliest pass). With
    an output directory every pass additionally lands on disk.
    """

    def __init__(self):
        self.entries: list[HistoryEntry] = []
        self.best_epoch: int | None = None
        self.best_snapshot: dict[str, np.ndarray] | None = None

    def record(self, entry: HistoryEntry, params: dict[str, Tensor]) -> None:
        self.entries.append(entry)
        if self.best_epoch is None or entry.val_loss < self.entries[self.best_epoch].val_loss:
            self.best_epoch = len(self.entries) - 1
            self.best_snapshot = {n: p.data.copy() for n, p in params.items()}

    def restore_best(self, params: dict[str, Tensor]) -> None:
        if self.best_snapshot is None:
            raise DataError("no checkpoints recorded")
        for name, arr in self.best_snapshot.items():
            params[name].data[...] = arr


def select_checkpoint(history) -> HistoryEntry:
    """Entry with the lowest validation loss; ties go to the earliest."""
    entries = history.entries if isinstance(history, TrainHistory) else list(history)
    if not entries:
        raise DataError("cannot select a checkpoint from an empty history")
    best = entries[0]
    for e in entries[1:]:
        if e.val_loss < best.val_loss:
            best = e
    return best


# ------------------------------------------------------------------ stage 1


def collect_scored_epochs(subjects: list[SubjectEpochs]) -> tuple[np.ndarray, np.ndarray]:
    """Flatten scored epochs across subjects: [N, C, S] signals, [N] labels."""
    xs, ys = [], []
    for s in subjects:
        keep = s.mask
        if keep.any():
            xs.append(s.epochs[keep])
            ys.append(s.labels[keep])
    if not xs:
        raise DataError("no scored epochs in the given subjects")
    return np.concatenate(xs), np.concatenate(ys).astype(np.int64)


def _stage1_dataset_loss(encoder_params, head_params, enc_cfg, x, y,
                         batch_size: int = 256) -> float:
    total = 0.0
    with no_grad():
        for start in range(0, len(y), batch_size):
            xb, yb = x[start:start + batch_size], y[start:start + batch_size]
            tokens, _ = encode_epochs(encoder_params, enc_cfg, xb)
            loss = masked_cross_entropy(mlp_head(head_params, tokens), yb,
                                        np.ones(len(yb), dtype=bool))
            total += float(loss.data) * len(yb)
    return total / len(y)


def train_stage1(train_subjects, val_subjects, encoder_params, head_params,
                 enc_cfg, cfg: TrainConfig, out_dir: str | Path | None = None,
                 log=None) -> TrainHistory:
    """Train encoder + MLP head on shuffled scored epochs; returns history
    and leaves the parameters restored to the best validation pass."""
    if cfg.stage != 1:
        raise ConfigError(f"train_stage1 called with stage={cfg.stage}")
    x_train, y_train = collect_scored_epochs(train_subjects)
    x_val, y_val = collect_scored_epochs(val_subjects)

    params = {**encoder_params, **head_params}
    opt = Adam(params, lr=cfg.lr0)
    rng = np.random.default_rng(cfg.seed)
    history = TrainHistory()
    out_dir = Path(out_dir) if out_dir is not None else None
    if out_dir is not None:
        out_dir.mkdir(parents=True, exist_ok=True)

    for epoch in range(cfg.max_epochs):
        opt.lr = decayed_lr(cfg.lr0, epoch, cfg.lr_decay)
        order = rng.permutation(len(y_train))
        running, seen = 0.0, 0
        for start in range(0, len(order), cfg.batch_size):
            idx = order[start:start + cfg.batch_size]
            tokens, _ = encode_epochs(encoder_params, enc_cfg, x_train[idx])
            loss = masked_cross_entropy(mlp_head(head_params, tokens), y_train[idx],
                                        np.ones(len(idx), dtype=bool))
            opt.zero_grad()
            backward(loss, params=list(params.values()))
            opt.step()
            running += float(loss.data) * len(idx)
            seen += len(idx)

        entry = HistoryEntry(
            epoch=epoch, lr=opt.lr, train_loss=running / seen,
            val_loss=_stage1_dataset_loss(encoder_params, head_params, enc_cfg, x_val, y_val))
        if out_dir is not None:
            entry.checkpoint_path = out_dir / f"stage1_epoch{epoch:04d}.somn"
            save_checkpoint(entry.checkpoint_path, params)
        history.record(entry, params)
        if log:
            log(f"stage1 epoch {epoch}: lr {entry.lr:.3e} "
                f"train {entry.train_loss:.4f} val {entry.val_loss:.4f}")

    history.restore_best(params)
    return history


# ------------------------------------------------------------------ stage 2


@dataclass
class Stage2Subject:
    """Frozen-encoder features plus everything Stage 2 can be asked to use."""

    subject_id: str
    features: np.ndarray   # f32 [T, in_dim], context already fused
    labels: np.ndarray     # u8 [T]
    events: np.ndarray     # u8 [T, 7]
    sex: float = math.nan      # 1 male / 0 female, NaN unknown
    age_z: float = math.nan    # z-scored on train stats
    bmi_z: float = math.nan

    @property
    def n_epochs(self) -> int:
        return self.features.shape[0]


def extract_features(encoder_params, enc_cfg, subjects: list[SubjectEpochs],
                     feature_mode: str = "pooled", batch_size: int = 256) -> list[np.ndarray]:
    """Per-subject epoch embeddings [T, D] from the frozen encoder."""
    out = []
    with no_grad():
        for s in subjects:
            chunks = []
            for start in range(0, s.n_epochs, batch_size):
                tokens, pooled = encode_epochs(encoder_params, enc_cfg,
                                               s.epochs[start:start + batch_size])
                if feature_mode == "pooled":
                    chunks.append(pooled.data)
                elif feature_mode == "flat":
                    b = tokens.shape[0]
                    chunks.append(tokens.data.reshape(b, -1))
                else:
                    raise ConfigError(f"unknown feature mode {feature_mode!r}")
            out.append(np.concatenate(chunks) if chunks else
                       np.zeros((0, enc_cfg.d_model), dtype=np.float32))
    return out


def prepare_stage2_subjects(subjects: list[SubjectEpochs], features: list[np.ndarray],
                            context_mode: str, stats: ClinicalStats | None) -> list[Stage2Subject]:
    """Fuse the requested context onto precomputed embeddings."""
    if len(subjects) != len(features):
        raise ValueError(f"{len(subjects)} subjects but {len(features)} feature arrays")
    context_dim(context_mode)  # validates the mode name
    use_clinical = context_mode in ("clinical", "both")
    use_events = context_mode in ("event", "both")
    if use_clinical and stats is None:
        raise DataError(f"context mode {context_mode!r} needs clinical statistics "
                        "fitted on the training split")
    prepared = []
    for s, emb in zip(subjects, features):
        if emb.shape[0] != s.n_epochs:
            raise DataError(f"{s.subject_id}: {emb.shape[0]} feature rows for "
                            f"{s.n_epochs} epochs")
        clin = build_clinical_vector(s.clinical, stats) if use_clinical else None
        ev = s.events if use_events else None
        fused = fuse_context(emb, clin, ev)
        age, sex, bmi = (float(v) for v in s.clinical)
        prepared.append(Stage2Subject(
            subject_id=s.subject_id,
            features=fused,
            labels=s.labels,
            events=s.events,
            sex=sex,
            age_z=math.nan if (stats is None or math.isnan(age))
                  else (age - stats.age_mean) / stats.age_std,
            bmi_z=math.nan if (stats is None or math.isnan(bmi))
                  else (bmi - stats.bmi_mean) / stats.bmi_std,
        ))
    return prepared


def _compute_window(batch: list[Stage2Subject], half_rf: int, crop: int | None) -> int:
    longest = max(s.n_epochs for s in batch)
    if longest > MAX_SEQ_LEN:
        raise DataError(f"sequence of {longest} epochs exceeds the maximum of {MAX_SEQ_LEN}")
    least = min(MAX_SEQ_LEN, longest + half_rf)
    if crop is None:
        return least
    if not least <= crop <= MAX_SEQ_LEN:
        raise ValueError(f"compute window {crop} outside [{least}, {MAX_SEQ_LEN}]")
    return crop


def _assemble_stage2(batch: list[Stage2Subject], window: int):
    b, d = len(batch), batch[0].features.shape[1]
    feats = np.zeros((b, window, d), dtype=np.float32)
    labels = np.full((b, window), IGNORE_LABEL, dtype=np.uint8)
    events = np.zeros((b, window, batch[0].events.shape[1]), dtype=np.float32)
    recorded = np.zeros((b, window), dtype=bool)
    for i, s in enumerate(batch):
        t = s.n_epochs
        feats[i, :t] = s.features
        labels[i, :t] = s.labels
        events[i, :t] = s.events
        recorded[i, :t] = True
    return feats, labels, events, labels != IGNORE_LABEL, recorded


def _masked_scalar_mse(pred: Tensor, targets: np.ndarray, present: np.ndarray) -> Tensor:
    filled = np.where(present, np.nan_to_num(targets, nan=0.0), 0.0).astype(np.float32)
    m = present.astype(np.float32)
    diff = (pred - Tensor(filled)) * Tensor(m)
    return tensor_sum(diff * diff) * (1.0 / max(int(present.sum()), 1))


def stage2_loss(bundle: ModelBundle, batch: list[Stage2Subject], cfg: TrainConfig,
                crop: int | None = None) -> Tensor:
    """Composite Stage-2 loss for one batch of subjects.

    Staging cross entropy over scored epochs, plus (MTL mode only) event
    BCE over recorded epochs and logistic/squared-error subject losses,
    each weighted by cfg.mtl_weights and skipped when no subject in the
    batch carries the target.
    """
    half_rf = (bundle.aggregator_cfg.receptive_field - 1) // 2
    window = _compute_window(batch, half_rf, crop)
    feats, labels, events, scored, recorded = _assemble_stage2(batch, window)
    if not scored.any():
        raise DataError("no scored epochs in this batch")

    logits, penult = aggregate_features(bundle.aggregator_params, bundle.aggregator_cfg, feats)
    loss = masked_cross_entropy(logits, labels.astype(np.int64), scored,
                                reduction=cfg.loss_reduction)
    if bundle.context_mode != "mtl":
        return loss

    w = cfg.mtl_weights
    event_logits, sex_logit, age_pred, bmi_pred = mtl_heads(bundle.mtl_params, penult, recorded)
    if w["event"]:
        loss = loss + masked_bce_with_logits(event_logits, events, recorded,
                                             reduction=cfg.loss_reduction) * w["event"]
    sexes = np.array([s.sex for s in batch], dtype=np.float32)
    have_sex = ~np.isnan(sexes)
    if w["sex"] and have_sex.any():
        b = len(batch)
        loss = loss + masked_bce_with_logits(
            reshape(sex_logit, (b, 1)),
            np.nan_to_num(sexes, nan=0.0).reshape(b, 1), have_sex) * w["sex"]
    ages = np.array([s.age_z for s in batch], dtype=np.float32)
    if w["age"] and (~np.isnan(ages)).any():
        loss = loss + _masked_scalar_mse(age_pred, ages, ~np.isnan(ages)) * w["age"]
    bmis = np.array([s.bmi_z for s in batch], dtype=np.float32)
    if w["bmi"] and (~np.isnan(bmis)).any():
        loss = loss + _masked_scalar_mse(bmi_pred, bmis, ~np.isnan(bmis)) * w["bmi"]
    return loss


def _stage2_val_loss(bundle, subjects: list[Stage2Subject], cfg: TrainConfig) -> float:
    """Staging-only validation objective (MTL terms excluded on purpose:
    checkpoint selection targets staging quality)."""
    total = 0.0
    half_rf = (bundle.aggregator_cfg.receptive_field - 1) // 2
    with no_grad():
        for start in range(0, len(subjects), cfg.batch_size):
            batch = subjects[start:start + cfg.batch_size]
            window = _compute_window(batch, half_rf, None)
            feats, labels, _, scored, _ = _assemble_stage2(batch, window)
            logits, _ = aggregate_features(bundle.aggregator_params,
                                           bundle.aggregator_cfg, feats)
            loss = masked_cross_entropy(logits, labels.astype(np.int64), scored,
                                        reduction=cfg.loss_reduction)
            if cfg.loss_reduction == "seq_sum_batch_mean":
                total += float(loss.data) * len(batch)
            else:
                total += float(loss.data) * int(scored.sum())
    if cfg.loss_reduction == "seq_sum_batch_mean":
        return total / len(subjects)
    return total / sum(int((s.labels != IGNORE_LABEL).sum()) for s in subjects)


def train_stage2(train_subjects: list[Stage2Subject], val_subjects: list[Stage2Subject],
                 bundle: ModelBundle, cfg: TrainConfig,
                 out_dir: str | Path | None = None, log=None) -> TrainHistory:
    """Train the aggregator (and MTL heads) on frozen-encoder features."""
    if cfg.stage != 2:
        raise ConfigError(f"train_stage2 called with stage={cfg.stage}")
    if not bundle.encoder_frozen:
        raise ConfigError("Stage 2 requires a frozen encoder (bundle.set_frozen(True))")
    if not train_subjects or not val_subjects:
        raise DataError("stage 2 needs non-empty train and validation subject lists")
    width = train_subjects[0].features.shape[1]
    if width != bundle.aggregator_cfg.in_dim:
        raise DataError(f"prepared features are {width} wide but the aggregator "
                        f"expects {bundle.aggregator_cfg.in_dim}; context data missing "
                        f"or fused for a different mode")

    trained = dict(bundle.aggregator_params)
    if bundle.context_mode == "mtl":
        trained.update(bundle.mtl_params)
    opt = Adam(trained, lr=cfg.lr0)
    rng = np.random.default_rng(cfg.seed)
    history = TrainHistory()
    out_dir = Path(out_dir) if out_dir is not None else None
    if out_dir is not None:
        out_dir.mkdir(parents=True, exist_ok=True)

    order_pool = np.arange(len(train_subjects))
    for epoch in range(cfg.max_epochs):
        opt.lr = decayed_lr(cfg.lr0, epoch, cfg.lr_decay)
        order = rng.permutation(order_pool)
        running, batches = 0.0, 0
        for start in range(0, len(order), cfg.batch_size):
            batch = [train_subjects[i] for i in order[start:start + cfg.batch_size]]
            loss = stage2_loss(bundle, batch, cfg)
            opt.zero_grad()
            backward(loss, params=list(trained.values()))
            opt.step()
            running += float(loss.data)
            batches += 1

        entry = HistoryEntry(
            epoch=epoch, lr=opt.lr, train_loss=running / batches,
            val_loss=_stage2_val_loss(bundle, val_subjects, cfg))
        if out_dir is not None:
            entry.checkpoint_path = out_dir / f"stage2_epoch{epoch:04d}.somn"
            save_checkpoint(entry.checkpoint_path, trained)
        history.record(entry, trained)
        if log:
            log(f"stage2[{bundle.context_mode}] epoch {epoch}: lr {entry.lr:.3e} "
                f"train {entry.train_loss:.4f} val {entry.val_loss:.4f}")

    history.restore_best(trained)
    return history


def evaluate_staging(bundle: ModelBundle, subjects: list[Stage2Subject],
                     batch_size: int = 16, config_tag: str | None = None) -> EvalReport:
    """Confusion and F1 over every scored epoch of the given subjects."""
    if not subjects:
        raise DataError("nothing to evaluate")
    half_rf = (bundle.aggregator_cfg.receptive_field - 1) // 2
    confusion = np.zeros((5, 5), dtype=np.uint64)
    with no_grad():
        for start in range(0, len(subjects), batch_size):
            batch = subjects[start:start + batch_size]
            window = _compute_window(batch, half_rf, None)
            feats, labels, _, scored, _ = _assemble_stage2(batch, window)
            logits, _ = aggregate_features(bundle.aggregator_params,
                                           bundle.aggregator_cfg, feats)
            pred = np.argmax(logits.data, axis=-1)
            confusion += confusion_matrix(labels[scored].astype(np.int64), pred[scored])
    return EvalReport(config=config_tag or bundle.context_mode, confusion=confusion)
