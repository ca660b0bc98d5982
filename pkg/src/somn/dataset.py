"""Model-ready datasets: label harmonization, context vectors, splits,
padding and masking.

Five output classes (Wake=0, N1=1, N2=2, N3=3, REM=4); the two R&K deep
stages merge into N3. Unscored epochs keep their place in the sequence
with the IGNORE label and a false mask so the aggregator sees contiguous
time. Clinical z-statistics always come from the training split alone.
"""

from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np

from .annotations import EVENT_KINDS, EventAnnotation
from .epoch_store import IGNORE_LABEL, SubjectEpochs
from .errors import DataError
from .metadata import SubjectMetadata

STAGE_NAMES = ("Wake", "N1", "N2", "N3", "REM")
N_CLASSES = 5
MAX_SEQ_LEN = 1500
EPOCH_S = 30.0

CONTEXT_MODES = ("none", "clinical", "event", "both", "mtl")

_RAW_TO_LABEL = {
    "Wake": 0,
    "S1": 1,
    "S2": 2,
    "S3": 3,
    "S4": 3,
    "REM": 4,
    "Unscored": IGNORE_LABEL,
}


def harmonize_labels(raw_stages: list[str]) -> np.ndarray:
    """Map raw R&K stages onto the five model classes (u8, 255=IGNORE)."""
    out = np.empty(len(raw_stages), dtype=np.uint8)
    for i, stage in enumerate(raw_stages):
        try:
            out[i] = _RAW_TO_LABEL[stage]
        except KeyError:
            raise DataError(f"unknown raw sleep stage {stage!r} at epoch {i}") from None
    return out


def build_event_vectors(events: list[EventAnnotation], n_epochs: int,
                        overlap_min_s: float = 0.0) -> np.ndarray:
    """Per-epoch binary indicators, one column per event kind.

    Epoch t covers [30t, 30t+30); an event flags it when their overlap
    exceeds ``overlap_min_s`` (strictly, so the default 0 means any
    positive overlap).
    """
    vec = np.zeros((n_epochs, len(EVENT_KINDS)), dtype=np.uint8)
    kind_index = {k: i for i, k in enumerate(EVENT_KINDS)}
    for ev in events:
        k = kind_index[ev.kind]
        first = max(0, int(ev.start_s // EPOCH_S))
        last = min(n_epochs, int(np.ceil(ev.end_s / EPOCH_S)))
        for t in range(first, last):
            lo = max(ev.start_s, t * EPOCH_S)
            hi = min(ev.end_s, (t + 1) * EPOCH_S)
            if hi - lo > overlap_min_s:
                vec[t, k] = 1
    return vec


@dataclass(frozen=True)
class ClinicalStats:
    """Training-split statistics for clinical normalization/imputation."""

    age_mean: float
    age_std: float
    bmi_mean: float
    bmi_std: float
    sex_mean: float  # fraction male; imputation value for missing sex


def compute_clinical_stats(raw_clinical: list[np.ndarray]) -> ClinicalStats:
    """Fit stats on raw [age, sex, bmi] vectors (NaN = missing) from train."""
    if not raw_clinical:
        raise DataError("cannot compute clinical statistics from zero training subjects")
    arr = np.asarray(raw_clinical, dtype=np.float64).reshape(len(raw_clinical), 3)

    def mean_std(col):
        vals = col[~np.isnan(col)]
        if len(vals) == 0:
            return 0.0, 1.0
        return float(vals.mean()), float(max(vals.std(), 1e-6))

    age_mean, age_std = mean_std(arr[:, 0])
    sex_vals = arr[:, 1][~np.isnan(arr[:, 1])]
    sex_mean = float(sex_vals.mean()) if len(sex_vals) else 0.5
    bmi_mean, bmi_std = mean_std(arr[:, 2])
    return ClinicalStats(age_mean, age_std, bmi_mean, bmi_std, sex_mean)


def clinical_raw_vector(meta: SubjectMetadata | None) -> np.ndarray:
    """Raw [age, sex(1=male), bmi] with NaN for anything missing."""
    if meta is None:
        return np.array([np.nan, np.nan, np.nan], dtype=np.float32)
    age = np.nan if meta.age_years is None else meta.age_years
    sex = np.nan if meta.sex is None else (1.0 if meta.sex == "male" else 0.0)
    bmi = np.nan if meta.bmi_kg_m2 is None else meta.bmi_kg_m2
    return np.array([age, sex, bmi], dtype=np.float32)


def build_clinical_vector(raw: np.ndarray, stats: ClinicalStats) -> np.ndarray:
    """[z(age), sex, z(BMI)]; missing values impute to the train mean."""
    if stats is None:
        raise DataError("clinical statistics not computed; fit them on the training split first")
    age, sex, bmi = (float(v) for v in raw)
    z_age = 0.0 if np.isnan(age) else (age - stats.age_mean) / stats.age_std
    sex_v = stats.sex_mean if np.isnan(sex) else sex
    z_bmi = 0.0 if np.isnan(bmi) else (bmi - stats.bmi_mean) / stats.bmi_std
    return np.array([z_age, sex_v, z_bmi], dtype=np.float32)


def split_subjects(ids: list[str], ratios=(0.805, 0.094, 0.101),
                   seed: int = 0) -> dict[str, list[str]]:
    """Deterministic subject-level split by largest-remainder apportionment."""
    if abs(sum(ratios) - 1.0) > 1e-9:
        raise ValueError(f"split ratios must sum to 1, got {sum(ratios)}")
    if len(ratios) != 3:
        raise ValueError("expected exactly (train, val, test) ratios")
    order = np.random.default_rng(seed).permutation(len(ids))
    shuffled = [ids[i] for i in order]

    n = len(ids)
    exact = [n * r for r in ratios]
    sizes = [int(np.floor(e)) for e in exact]
    remainders = sorted(range(3), key=lambda i: exact[i] - sizes[i], reverse=True)
    for i in range(n - sum(sizes)):
        sizes[remainders[i % 3]] += 1

    train = shuffled[:sizes[0]]
    val = shuffled[sizes[0]:sizes[0] + sizes[1]]
    test = shuffled[sizes[0] + sizes[1]:]
    return {"train": train, "val": val, "test": test}


def split_manifest_json(splits: dict[str, list[str]], seed: int,
                        subjects: list[SubjectEpochs] | None = None) -> str:
    """Split manifest; includes scored/total epoch counts when data is given."""
    doc: dict = {"seed": seed,
                 "train": splits["train"], "val": splits["val"], "test": splits["test"]}
    if subjects is not None:
        by_id = {s.subject_id: s for s in subjects}
        counts = {}
        for name in ("train", "val", "test"):
            present = [by_id[sid] for sid in splits[name] if sid in by_id]
            counts[name] = {
                "scored_epochs": int(sum(int(s.mask.sum()) for s in present)),
                "total_epochs": int(sum(s.n_epochs for s in present)),
            }
        doc["epoch_counts"] = counts
    return json.dumps(doc, indent=2, sort_keys=False)


def pad_and_mask(sequence: np.ndarray, labels: np.ndarray,
                 max_len: int = MAX_SEQ_LEN) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Zero-pad [T, D] features and labels to max_len; mask marks scored epochs."""
    t = sequence.shape[0]
    if labels.shape[0] != t:
        raise ValueError(f"sequence length {t} != labels length {labels.shape[0]}")
    if t > max_len:
        raise DataError(f"sequence of {t} epochs exceeds the maximum of {max_len}")
    padded = np.zeros((max_len,) + sequence.shape[1:], dtype=sequence.dtype)
    padded[:t] = sequence
    padded_labels = np.full(max_len, IGNORE_LABEL, dtype=np.uint8)
    padded_labels[:t] = labels
    mask = padded_labels != IGNORE_LABEL
    return padded, padded_labels, mask


def context_dim(mode: str) -> int:
    dims = {"none": 0, "clinical": 3, "event": 7, "both": 10, "mtl": 0}
    if mode not in dims:
        raise ValueError(f"unknown context mode {mode!r}; expected one of {CONTEXT_MODES}")
    return dims[mode]


def build_context(clinical_vec: np.ndarray, event_vectors: np.ndarray,
                  mode: str) -> np.ndarray:
    """Per-epoch context matrix [T, context_dim(mode)], order [clinical | event]."""
    t = event_vectors.shape[0]
    d = context_dim(mode)
    if d == 0:
        return np.zeros((t, 0), dtype=np.float32)
    parts = []
    if mode in ("clinical", "both"):
        parts.append(np.tile(clinical_vec.astype(np.float32), (t, 1)))
    if mode in ("event", "both"):
        parts.append(event_vectors.astype(np.float32))
    return np.concatenate(parts, axis=1)
