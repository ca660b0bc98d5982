"""Confusion/F1 metrics against hand values and sklearn."""

import json

import numpy as np
import pytest
from sklearn.metrics import confusion_matrix as sk_confusion
from sklearn.metrics import f1_score

from somn.metrics import (
    EvalReport,
    compute_f1,
    confusion_matrix,
    confusion_to_csv,
    render_confusion,
    report_to_json,
)


def test_two_class_oracle():
    # class 0: TP=5 FP=2 FN=1 -> 10/13; class 1: TP=4 FP=1 FN=2 -> 8/11
    per_class, macro, micro = compute_f1(np.array([[5, 1], [2, 4]]))
    assert per_class[0] == pytest.approx(0.7692, abs=5e-5)
    assert per_class[1] == pytest.approx(0.7273, abs=5e-5)
    assert macro == pytest.approx(0.7483, abs=5e-5)
    assert micro == pytest.approx(9 / 12)


def test_diagonal_confusion_is_perfect():
    per_class, macro, micro = compute_f1(np.diag([3, 1, 4, 1, 5]))
    assert per_class.tolist() == [1.0] * 5
    assert macro == 1.0 and micro == 1.0


def test_all_zero_confusion_gives_zeros():
    per_class, macro, micro = compute_f1(np.zeros((5, 5), dtype=np.uint64))
    assert per_class.tolist() == [0.0] * 5
    assert macro == 0.0 and micro == 0.0


def test_absent_class_scores_zero_and_drags_macro():
    conf = np.zeros((5, 5), dtype=np.uint64)
    conf[0, 0] = 10
    per_class, macro, _ = compute_f1(conf)
    assert per_class[0] == 1.0
    assert per_class[1:].tolist() == [0.0] * 4
    assert macro == pytest.approx(0.2)


@pytest.mark.parametrize("seed", range(20))
def test_micro_f1_equals_accuracy(seed):
    rng = np.random.default_rng(seed)
    conf = rng.integers(0, 50, size=(5, 5)).astype(np.uint64)
    _, _, micro = compute_f1(conf)
    assert micro == pytest.approx(np.trace(conf) / conf.sum())


@pytest.mark.parametrize("seed", range(30))
def test_f1_matches_sklearn(seed):
    rng = np.random.default_rng(seed + 500)
    n = int(rng.integers(20, 200))
    y_true = rng.integers(0, 5, size=n)
    y_pred = rng.integers(0, 5, size=n)
    conf = confusion_matrix(y_true, y_pred)
    assert np.array_equal(conf, sk_confusion(y_true, y_pred, labels=range(5)))
    per_class, macro, micro = compute_f1(conf)
    ref = f1_score(y_true, y_pred, labels=range(5), average=None, zero_division=0)
    assert np.allclose(per_class, ref, atol=1e-12)
    assert macro == pytest.approx(
        f1_score(y_true, y_pred, labels=range(5), average="macro", zero_division=0))
    assert micro == pytest.approx(
        f1_score(y_true, y_pred, labels=range(5), average="micro", zero_division=0))


def test_confusion_matrix_counts_by_row_true():
    conf = confusion_matrix([0, 0, 1, 2], [0, 1, 1, 2])
    assert conf[0, 0] == 1 and conf[0, 1] == 1 and conf[1, 1] == 1 and conf[2, 2] == 1
    assert conf.sum() == 4
    assert conf.dtype == np.uint64


def test_confusion_matrix_validates_inputs():
    with pytest.raises(ValueError):
        confusion_matrix([0, 1], [0])
    with pytest.raises(ValueError):
        confusion_matrix([0, 5], [0, 1])
    with pytest.raises(ValueError):
        confusion_matrix([0, 1], [0, -1])


def test_eval_report_totals():
    conf = confusion_matrix([0, 1, 2, 3, 4, 4], [0, 1, 2, 3, 4, 0])
    report = EvalReport(config="none", confusion=conf)
    assert report.n_evaluated == 6
    assert report.confusion.sum() == 6
    assert 0.0 <= report.macro_f1 <= 1.0


def test_report_json_shape():
    report = EvalReport(config="both", confusion=np.diag([1, 2, 3, 4, 5]))
    payload = json.loads(report_to_json(report))
    assert payload["config"] == "both"
    assert payload["macro_f1"] == 1.0
    assert payload["n_evaluated_epochs"] == 15
    assert len(payload["confusion"]) == 5
    assert payload["stage_names"] == ["Wake", "N1", "N2", "N3", "REM"]


def test_confusion_csv_layout():
    conf = np.arange(25).reshape(5, 5)
    text = confusion_to_csv(conf)
    lines = text.strip().split("\n")
    assert lines[0] == "true\\pred,Wake,N1,N2,N3,REM"
    assert len(lines) == 6
    assert lines[1] == "Wake,0,1,2,3,4"
    parsed = [[int(v) for v in line.split(",")[1:]] for line in lines[1:]]
    assert np.array_equal(np.array(parsed), conf)


def test_confusion_csv_rejects_wrong_shape():
    with pytest.raises(ValueError):
        confusion_to_csv(np.zeros((4, 4)))


def test_render_confusion_mentions_every_stage():
    text = render_confusion(np.diag([10, 20, 30, 40, 50]))
    for name in ("Wake", "N1", "N2", "N3", "REM"):
        assert name in text
    assert "50" in text
