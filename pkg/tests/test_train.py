"""Training-loop mechanics for both stages: schedules, checkpoint
selection, determinism, masking, and the freeze contract."""

import math

import numpy as np
import pytest

from somn.dataset import compute_clinical_stats
from somn.epoch_store import IGNORE_LABEL, SubjectEpochs
from somn.errors import ConfigError, DataError
from somn.model import EncoderConfig, init_encoder_params, init_mlp_head_params
from somn.train import (
    HistoryEntry,
    Stage2Subject,
    TrainConfig,
    collect_scored_epochs,
    evaluate_staging,
    extract_features,
    prepare_stage2_subjects,
    select_checkpoint,
    stage2_loss,
    train_stage1,
    train_stage2,
)
from tests.test_model import SMALL, small_bundle

S = SMALL.samples_per_epoch


def make_subject(rng, subject_id, n_epochs=16, n_unscored=2, clinical=None):
    """Random-signal subject; labels carry no signal correlation."""
    epochs = rng.standard_normal((n_epochs, 9, S)).astype(np.float32)
    labels = rng.integers(0, 5, size=n_epochs).astype(np.uint8)
    if n_unscored:
        labels[rng.choice(n_epochs, size=n_unscored, replace=False)] = IGNORE_LABEL
    events = (rng.random((n_epochs, 7)) < 0.15).astype(np.uint8)
    if clinical is None:
        clinical = [55.0 + float(rng.integers(-20, 20)), float(rng.integers(0, 2)),
                    27.0 + float(rng.standard_normal())]
    return SubjectEpochs(subject_id=subject_id, epochs=epochs, labels=labels,
                         events=events, clinical=np.array(clinical, dtype=np.float32))


def make_cohort(seed, n_subjects=4, **kw):
    rng = np.random.default_rng(seed)
    return [make_subject(rng, f"s{seed}_{i}", **kw) for i in range(n_subjects)]


# ------------------------------------------------------------------- config


def test_train_config_validation():
    TrainConfig(stage=1)
    with pytest.raises(ConfigError):
        TrainConfig(stage=3)
    with pytest.raises(ConfigError):
        TrainConfig(stage=1, lr0=0.0)
    with pytest.raises(ConfigError):
        TrainConfig(stage=1, lr_decay=0.0)
    with pytest.raises(ConfigError):
        TrainConfig(stage=1, lr_decay=1.2)
    with pytest.raises(ConfigError):
        TrainConfig(stage=2, loss_reduction="sum")
    with pytest.raises(ConfigError):
        TrainConfig(stage=2, mtl_weights={"weight_decay": 0.1})


def test_mtl_weights_merge_with_defaults():
    cfg = TrainConfig(stage=2, mtl_weights={"sex": 0.5})
    assert cfg.mtl_weights == {"event": 1.0, "sex": 0.5, "age": 1.0, "bmi": 1.0}


# --------------------------------------------------------------- selection


def entries(losses):
    return [HistoryEntry(epoch=i, lr=1e-4, train_loss=0.0, val_loss=v)
            for i, v in enumerate(losses)]


def test_select_checkpoint_argmin():
    assert select_checkpoint(entries([0.9, 0.7, 0.8])).epoch == 1


def test_select_checkpoint_tie_goes_earliest():
    assert select_checkpoint(entries([0.7, 0.7])).epoch == 0
    assert select_checkpoint(entries([0.8, 0.6, 0.6, 0.9])).epoch == 1


def test_select_checkpoint_single_and_empty():
    assert select_checkpoint(entries([0.42])).epoch == 0
    with pytest.raises(DataError):
        select_checkpoint([])


# ----------------------------------------------------------------- stage 1


def test_collect_scored_epochs_drops_ignore():
    cohort = make_cohort(0, n_subjects=2, n_epochs=10, n_unscored=3)
    x, y = collect_scored_epochs(cohort)
    assert x.shape == (14, 9, S)
    assert y.shape == (14,)
    assert y.max() <= 4

    blank = make_cohort(1, n_subjects=1, n_epochs=4, n_unscored=4)
    with pytest.raises(DataError):
        collect_scored_epochs(blank)


def run_tiny_stage1(seed, max_epochs=3, out_dir=None):
    train = make_cohort(10, n_subjects=3, n_epochs=12)
    val = make_cohort(11, n_subjects=1, n_epochs=12)
    enc = init_encoder_params(SMALL, seed=seed)
    head = init_mlp_head_params(SMALL, seed=seed + 1)
    cfg = TrainConfig(stage=1, batch_size=8, max_epochs=max_epochs, seed=seed)
    history = train_stage1(train, val, enc, head, SMALL, cfg, out_dir=out_dir)
    return history, enc, head


def test_stage1_lr_schedule_recorded_exactly():
    history, _, _ = run_tiny_stage1(seed=0, max_epochs=3)
    for k, entry in enumerate(history.entries):
        assert entry.lr == 1e-4 * 0.90 ** k


def test_stage1_is_deterministic():
    h1, enc1, _ = run_tiny_stage1(seed=5)
    h2, enc2, _ = run_tiny_stage1(seed=5)
    assert [e.train_loss for e in h1.entries] == [e.train_loss for e in h2.entries]
    assert [e.val_loss for e in h1.entries] == [e.val_loss for e in h2.entries]
    for name in enc1:
        assert enc1[name].data.tobytes() == enc2[name].data.tobytes()


def test_stage1_restores_best_checkpoint(tmp_path):
    history, enc, head = run_tiny_stage1(seed=7, max_epochs=4, out_dir=tmp_path)
    best = select_checkpoint(history)
    assert best.epoch == history.best_epoch
    assert best.val_loss == min(e.val_loss for e in history.entries)
    # the restored tensors must equal the best snapshot, not the last epoch
    for name, arr in history.best_snapshot.items():
        current = enc[name].data if name in enc else head[name].data
        assert current.tobytes() == arr.tobytes()
    assert (tmp_path / "stage1_epoch0003.somn").exists()
    assert best.checkpoint_path.exists()


def test_stage1_learns_separable_classes():
    """Epochs whose active channel encodes the label are learnable in a
    handful of passes, the per-epoch analogue of an overfit probe."""
    rng = np.random.default_rng(3)
    n = 40
    labels = rng.integers(0, 5, size=n).astype(np.uint8)
    epochs = 0.05 * rng.standard_normal((n, 9, S)).astype(np.float32)
    for i, lab in enumerate(labels):
        epochs[i, lab] += 3.0 * np.sin(np.linspace(0, 6.0, S, dtype=np.float32))
    subj = SubjectEpochs(subject_id="toy", epochs=epochs, labels=labels,
                         events=np.zeros((n, 7), np.uint8),
                         clinical=np.array([50, 1, 25], np.float32))

    enc = init_encoder_params(SMALL, seed=1)
    head = init_mlp_head_params(SMALL, seed=2)
    cfg = TrainConfig(stage=1, batch_size=20, lr0=3e-3, lr_decay=1.0,
                      max_epochs=40, seed=0)
    history = train_stage1([subj], [subj], enc, head, SMALL, cfg)
    assert history.entries[-1].val_loss < 0.25
    assert history.entries[-1].val_loss < history.entries[0].val_loss / 3


# ----------------------------------------------------------------- stage 2


def build_stage2_inputs(context_mode, seed=0, n_subjects=4, n_epochs=12):
    cohort = make_cohort(seed + 20, n_subjects=n_subjects, n_epochs=n_epochs)
    bundle = small_bundle(context_mode, seed=seed)
    bundle.set_frozen(True)
    stats = compute_clinical_stats([s.clinical for s in cohort])
    feats = extract_features(bundle.encoder_params, SMALL, cohort)
    prepared = prepare_stage2_subjects(cohort, feats, context_mode, stats)
    return bundle, prepared, stats


def test_extract_features_batch_size_agnostic():
    cohort = make_cohort(30, n_subjects=1, n_epochs=10)
    enc = init_encoder_params(SMALL, seed=4)
    big = extract_features(enc, SMALL, cohort, batch_size=64)[0]
    small = extract_features(enc, SMALL, cohort, batch_size=3)[0]
    assert big.shape == (10, SMALL.d_model)
    assert np.allclose(big, small, rtol=1e-5, atol=1e-6)


def test_prepare_widths_by_mode():
    for mode, width in (("none", 8), ("clinical", 11), ("event", 15),
                        ("both", 18), ("mtl", 8)):
        _, prepared, _ = build_stage2_inputs(mode)
        assert prepared[0].features.shape[1] == width


def test_prepare_clinical_needs_stats():
    cohort = make_cohort(21, n_subjects=2)
    enc = init_encoder_params(SMALL, seed=4)
    feats = extract_features(enc, SMALL, cohort)
    with pytest.raises(DataError):
        prepare_stage2_subjects(cohort, feats, "clinical", None)
    # event-only fusion has no clinical dependency
    prepared = prepare_stage2_subjects(cohort, feats, "event", None)
    assert math.isnan(prepared[0].age_z)


def test_prepare_z_scores_targets():
    cohort = [
        make_subject(np.random.default_rng(1), "a", clinical=[40.0, 1.0, 20.0]),
        make_subject(np.random.default_rng(2), "b", clinical=[60.0, 0.0, 30.0]),
    ]
    stats = compute_clinical_stats([s.clinical for s in cohort])
    enc = init_encoder_params(SMALL, seed=4)
    feats = extract_features(enc, SMALL, cohort)
    prepared = prepare_stage2_subjects(cohort, feats, "mtl", stats)
    assert prepared[0].age_z == pytest.approx(-1.0)
    assert prepared[1].age_z == pytest.approx(1.0)
    assert prepared[0].sex == 1.0 and prepared[1].sex == 0.0


def test_stage2_loss_invariant_to_pad_length():
    """The compute window is an implementation detail: minimal window and
    the full padded length give bit-identical losses."""
    bundle, prepared, _ = build_stage2_inputs("both", seed=3)
    cfg = TrainConfig(stage=2, batch_size=4, seed=0)
    tight = stage2_loss(bundle, prepared, cfg)
    halfway = stage2_loss(bundle, prepared, cfg, crop=200)
    full = stage2_loss(bundle, prepared, cfg, crop=1500)
    assert tight.data.tobytes() == full.data.tobytes()
    assert tight.data.tobytes() == halfway.data.tobytes()


def test_stage2_loss_invariant_for_mtl_arm():
    bundle, prepared, _ = build_stage2_inputs("mtl", seed=4)
    cfg = TrainConfig(stage=2, batch_size=4, seed=0)
    tight = stage2_loss(bundle, prepared, cfg)
    full = stage2_loss(bundle, prepared, cfg, crop=1500)
    assert tight.data.tobytes() == full.data.tobytes()


def test_stage2_window_bounds():
    bundle, prepared, _ = build_stage2_inputs("none", seed=5)
    cfg = TrainConfig(stage=2, seed=0)
    with pytest.raises(ValueError):
        stage2_loss(bundle, prepared, cfg, crop=6)  # below T+half_rf
    with pytest.raises(ValueError):
        stage2_loss(bundle, prepared, cfg, crop=1501)


def test_stage2_requires_frozen_encoder():
    bundle, prepared, _ = build_stage2_inputs("none", seed=6)
    bundle.set_frozen(False)
    cfg = TrainConfig(stage=2, batch_size=2, max_epochs=1, seed=0)
    with pytest.raises(ConfigError):
        train_stage2(prepared[:3], prepared[3:], bundle, cfg)


def test_stage2_rejects_mismatched_context_width():
    bundle, _, _ = build_stage2_inputs("both", seed=7)
    _, prepared_none, _ = build_stage2_inputs("none", seed=7)
    cfg = TrainConfig(stage=2, batch_size=2, max_epochs=1, seed=0)
    with pytest.raises(DataError):
        train_stage2(prepared_none[:3], prepared_none[3:], bundle, cfg)


def test_stage2_freeze_contract_through_training():
    bundle, prepared, _ = build_stage2_inputs("none", seed=8)
    before = {n: p.data.tobytes() for n, p in bundle.encoder_params.items()}
    cfg = TrainConfig(stage=2, batch_size=2, max_epochs=2, seed=1)
    train_stage2(prepared[:3], prepared[3:], bundle, cfg)
    assert {n: p.data.tobytes() for n, p in bundle.encoder_params.items()} == before


def test_stage2_deterministic_and_restores_best():
    def run():
        bundle, prepared, _ = build_stage2_inputs("event", seed=9)
        cfg = TrainConfig(stage=2, batch_size=2, max_epochs=3, seed=2)
        history = train_stage2(prepared[:3], prepared[3:], bundle, cfg)
        return history, bundle

    h1, b1 = run()
    h2, b2 = run()
    assert [e.val_loss for e in h1.entries] == [e.val_loss for e in h2.entries]
    for name in b1.aggregator_params:
        assert (b1.aggregator_params[name].data.tobytes()
                == b2.aggregator_params[name].data.tobytes())
    assert h1.best_epoch == select_checkpoint(h1).epoch


def test_stage2_mtl_heads_receive_gradient():
    bundle, prepared, _ = build_stage2_inputs("mtl", seed=10)
    before = {n: p.data.tobytes() for n, p in bundle.mtl_params.items()}
    cfg = TrainConfig(stage=2, batch_size=2, max_epochs=1, seed=3)
    train_stage2(prepared[:3], prepared[3:], bundle, cfg)
    after = {n: p.data.tobytes() for n, p in bundle.mtl_params.items()}
    assert any(before[n] != after[n] for n in before)


def test_stage2_mtl_tolerates_missing_targets():
    cohort = make_cohort(40, n_subjects=3)
    for s in cohort:
        s.clinical[:] = np.nan
    bundle = small_bundle("mtl", seed=11)
    bundle.set_frozen(True)
    feats = extract_features(bundle.encoder_params, SMALL, cohort)
    prepared = prepare_stage2_subjects(cohort, feats, "mtl", None)
    cfg = TrainConfig(stage=2, batch_size=3, max_epochs=1, seed=0)
    history = train_stage2(prepared[:2], prepared[2:], bundle, cfg)
    assert math.isfinite(history.entries[0].train_loss)


def test_stage2_training_loss_trends_down_on_informative_features():
    """Features that encode the label should be fit quickly: allow at
    most 2 increases over 20 passes."""
    rng = np.random.default_rng(12)
    subjects = []
    for i in range(8):
        t = 24
        labels = rng.integers(0, 5, size=t).astype(np.uint8)
        feats = 0.3 * rng.standard_normal((t, 8)).astype(np.float32)
        feats[np.arange(t), labels] += 2.0
        subjects.append(Stage2Subject(subject_id=f"m{i}", features=feats,
                                      labels=labels, events=np.zeros((t, 7), np.uint8)))
    bundle = small_bundle("none", seed=13)
    bundle.set_frozen(True)
    cfg = TrainConfig(stage=2, batch_size=4, lr0=1e-3, lr_decay=1.0,
                      max_epochs=20, seed=4)
    history = train_stage2(subjects[:6], subjects[6:], bundle, cfg)
    losses = [e.train_loss for e in history.entries]
    violations = sum(1 for a, b in zip(losses, losses[1:]) if b > a)
    assert violations <= 2
    assert losses[-1] < losses[0]


def test_evaluate_staging_counts_scored_epochs():
    bundle, prepared, _ = build_stage2_inputs("none", seed=14)
    report = evaluate_staging(bundle, prepared)
    scored = sum(int((s.labels != IGNORE_LABEL).sum()) for s in prepared)
    assert report.n_evaluated == scored
    assert report.config == "none"
    row_sums = report.confusion.sum(axis=1)
    true_counts = np.zeros(5, dtype=np.uint64)
    for s in prepared:
        kept = s.labels[s.labels != IGNORE_LABEL]
        true_counts += np.bincount(kept, minlength=5).astype(np.uint64)
    assert np.array_equal(row_sums, true_counts)
