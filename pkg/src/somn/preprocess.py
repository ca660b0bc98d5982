"""Per-channel signal conditioning and epoch segmentation.

Each channel role has a fixed filter assignment (EEG/ECG/EOG bandpass,
respiratory effort lowpass, everything else unfiltered). Filters are
designed at the channel's native rate; when resampling to the common
rate would fold content past the new Nyquist, an anti-alias lowpass at
0.45x the target rate runs first. Signals are then z-normalized per
channel with per-recording statistics and cut into non-overlapping 30 s
epochs, dropping a trailing partial epoch.
"""

from __future__ import annotations

from dataclasses import replace

import numpy as np

from .dsp import FilterSpec, apply_filter, resample_linear
from .edf import PsgRecording
from .errors import DataError, ExcludedSubjectError

EPOCH_S = 30.0

# model input channel order; fixes the meaning of the C=9 axis
CHANNEL_ORDER = (
    "EEG", "EOG_L", "EOG_R", "EMG", "ECG",
    "THORACIC", "ABDOMINAL", "SPO2", "POSITION",
)

_RESP_LOWPASS = FilterSpec("lowpass", 0.0, 1.0)

CHANNEL_FILTERS: dict[str, FilterSpec | None] = {
    "EEG": FilterSpec("bandpass", 1.0, 50.0),
    "EEG_SEC": FilterSpec("bandpass", 1.0, 50.0),
    "ECG": FilterSpec("bandpass", 0.5, 50.0),
    "EOG_L": FilterSpec("bandpass", 0.1, 15.0),
    "EOG_R": FilterSpec("bandpass", 0.1, 15.0),
    "THORACIC": _RESP_LOWPASS,
    "ABDOMINAL": _RESP_LOWPASS,
    "EMG": None,
    "SPO2": None,
    "POSITION": None,
}


def _rate_limited(spec: FilterSpec | None, native_rate_hz: float) -> FilterSpec | None:
    """Clamp a band top the channel's rate cannot carry.

    A 25 Hz EEG channel cannot hold the upper half of the nominal 1-50 Hz
    band, so the design would put a cutoff past Nyquist. Content above
    Nyquist does not exist in the samples; only the realizable part of
    the band is filtered.
    """
    if spec is None or spec.high_hz < native_rate_hz / 2.0:
        return spec
    top = 0.45 * native_rate_hz
    if spec.kind == "bandpass" and spec.low_hz >= top:
        raise DataError(
            f"channel rate {native_rate_hz} Hz leaves no room for passband "
            f"{spec.low_hz}-{spec.high_hz} Hz")
    return replace(spec, high_hz=top)


def condition_channel(samples: np.ndarray, role: str, native_rate_hz: float,
                      common_rate_hz: float) -> np.ndarray:
    """Filter at native rate, anti-alias if needed, resample to common rate."""
    x = np.asarray(samples, dtype=np.float64)
    spec = _rate_limited(CHANNEL_FILTERS[role], native_rate_hz)
    if spec is not None:
        x = apply_filter(spec, x, native_rate_hz)
    if common_rate_hz < native_rate_hz:
        new_nyq = common_rate_hz / 2.0
        band_top = spec.high_hz if spec is not None else native_rate_hz / 2.0
        if band_top > new_nyq:
            x = apply_filter(FilterSpec("lowpass", 0.0, 0.45 * common_rate_hz),
                             x, native_rate_hz)
    return resample_linear(x, native_rate_hz, common_rate_hz)


def preprocess_recording(recording: PsgRecording, common_rate_hz: float = 25.0,
                         eeg_derivation: str = "primary") -> np.ndarray:
    """Condition all nine model channels; returns float64 [9, N]."""
    if eeg_derivation not in ("primary", "secondary"):
        raise ValueError(f"unknown EEG derivation {eeg_derivation!r}")
    roles = recording.roles()
    if eeg_derivation == "secondary":
        if "EEG_SEC" not in roles:
            raise ExcludedSubjectError(
                f"subject {recording.subject_id}: secondary EEG derivation requested "
                "but no such channel")
        roles = dict(roles)
        roles["EEG"] = roles["EEG_SEC"]

    missing = [r for r in CHANNEL_ORDER if r not in roles]
    if missing:
        raise ExcludedSubjectError(
            f"subject {recording.subject_id}: missing required channels {missing}")

    conditioned = []
    for role in CHANNEL_ORDER:
        ch = roles[role]
        conditioned.append(condition_channel(ch.samples, role, ch.sample_rate_hz,
                                             common_rate_hz))
    n = min(len(x) for x in conditioned)
    return np.stack([x[:n] for x in conditioned])


def segment_epochs(recording: PsgRecording, common_rate_hz: float = 25.0,
                   eeg_derivation: str = "primary") -> np.ndarray:
    """Full signal chain to a float32 epoch tensor [T, 9, S].

    S = 30 * common_rate_hz. Channels are z-normalized with mean/std
    taken over the T*S samples that survive the partial-epoch trim, so
    each output channel has zero mean and unit variance across the
    recording (constant channels are left at zero).
    """
    signals = preprocess_recording(recording, common_rate_hz, eeg_derivation)
    s_per_epoch = common_rate_hz * EPOCH_S
    if abs(s_per_epoch - round(s_per_epoch)) > 1e-9:
        raise ValueError(f"common rate {common_rate_hz} Hz does not tile 30 s epochs")
    s_per_epoch = int(round(s_per_epoch))
    t = signals.shape[1] // s_per_epoch
    if t == 0:
        raise DataError(
            f"subject {recording.subject_id}: recording shorter than one 30 s epoch")
    kept = signals[:, :t * s_per_epoch]
    mean = kept.mean(axis=1, keepdims=True)
    std = kept.std(axis=1, keepdims=True)
    std = np.where(std > 1e-8, std, 1.0)
    normed = (kept - mean) / std
    return normed.reshape(9, t, s_per_epoch).transpose(1, 0, 2).astype(np.float32)
