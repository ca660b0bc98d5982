import numpy as np
import pytest

from somn.edf import ChannelSignal, PsgRecording
from somn.errors import DataError, ExcludedSubjectError
from somn.preprocess import (
    CHANNEL_ORDER,
    condition_channel,
    preprocess_recording,
    segment_epochs,
)

NATIVE = {"EEG": 125.0, "EEG_SEC": 125.0, "EOG_L": 125.0, "EOG_R": 125.0,
          "EMG": 125.0, "ECG": 125.0, "THORACIC": 25.0, "ABDOMINAL": 25.0,
          "SPO2": 1.0, "POSITION": 1.0}

LABELS = {"EEG": "EEG", "EEG_SEC": "EEG(sec)", "EOG_L": "EOG(L)", "EOG_R": "EOG(R)",
          "EMG": "EMG", "ECG": "ECG", "THORACIC": "THOR RES",
          "ABDOMINAL": "ABDO RES", "SPO2": "SaO2", "POSITION": "POSITION"}


def _recording(duration_s=300.0, seed=0, drop=(), extra_eeg_sec=False):
    rng = np.random.default_rng(seed)
    channels = []
    roles = [r for r in CHANNEL_ORDER if r not in drop]
    if extra_eeg_sec:
        roles.append("EEG_SEC")
    for role in roles:
        rate = NATIVE[role]
        n = int(duration_s * rate)
        if role == "POSITION":
            x = np.repeat(np.arange(n // 30 + 1) % 3, 30)[:n].astype(float)
        elif role == "SPO2":
            x = 96.0 + rng.standard_normal(n) * 0.5
        else:
            x = rng.standard_normal(n)
        channels.append(ChannelSignal(label=LABELS[role], role=role, sample_rate_hz=rate,
                                      physical_unit="", samples=x))
    return PsgRecording("s1", channels, "", duration_s)


def test_segment_shapes_and_rate_arithmetic():
    epochs = segment_epochs(_recording(300.0), 25.0)
    assert epochs.shape == (10, 9, 750)
    assert epochs.dtype == np.float32
    # the 8 h cohort case is pure arithmetic on the same formula
    assert int(8 * 3600 // 30) == 960
    assert int(30 * 25.0) == 750


def test_exact_and_partial_epochs():
    assert segment_epochs(_recording(30.0), 25.0).shape[0] == 1
    assert segment_epochs(_recording(45.0), 25.0).shape[0] == 1
    with pytest.raises(DataError, match="shorter than one"):
        segment_epochs(_recording(20.0), 25.0)


def test_z_normalization_over_kept_samples():
    epochs = segment_epochs(_recording(95.0), 25.0)  # trailing 5 s dropped
    flat = epochs.transpose(1, 0, 2).reshape(9, -1).astype(np.float64)
    np.testing.assert_allclose(flat.mean(axis=1), 0.0, atol=1e-5)
    np.testing.assert_allclose(flat.std(axis=1), 1.0, atol=1e-4)


def test_missing_channel_excludes_subject():
    with pytest.raises(ExcludedSubjectError, match="EOG_R"):
        preprocess_recording(_recording(drop=("EOG_R",)))


def test_channel_order_is_fixed():
    rec = _recording(120.0)
    rec.channels = rec.channels[::-1]
    signals = preprocess_recording(rec, 25.0)
    assert signals.shape == (9, 3000)
    # SPO2 sits at index 7 regardless of file order; its mean is ~96
    assert abs(signals[7].mean() - 96.0) < 0.5


def test_anti_alias_before_downsampling():
    fs = 125.0
    t = np.arange(int(120 * fs)) / fs
    high = np.sin(2 * np.pi * 30.0 * t)   # would alias to 5 Hz at 25 Hz rate
    low = np.sin(2 * np.pi * 5.0 * t)
    out_high = condition_channel(high, "EEG", fs, 25.0)
    out_low = condition_channel(low, "EEG", fs, 25.0)
    core = slice(100, -100)
    rms = lambda x: np.sqrt(np.mean(x[core] ** 2))
    assert rms(out_high) < 0.05 * rms(high)
    assert abs(rms(out_low) - rms(low)) / rms(low) < 0.1


def test_respiratory_channel_keeps_slow_content():
    fs = 25.0
    t = np.arange(int(120 * fs)) / fs
    breath = np.sin(2 * np.pi * 0.25 * t)
    out = condition_channel(breath, "THORACIC", fs, 25.0)
    core = slice(100, -100)
    assert np.sqrt(np.mean(out[core] ** 2)) > 0.6


def test_unfiltered_roles_pass_through():
    x = np.linspace(90.0, 99.0, 250)
    out = condition_channel(x, "SPO2", 1.0, 1.0)
    np.testing.assert_array_equal(out, x)


def test_secondary_eeg_derivation():
    rec = _recording(120.0, extra_eeg_sec=True)
    fs = 125.0
    t = np.arange(int(120 * fs)) / fs
    rec.channel("EEG").samples = np.sin(2 * np.pi * 6.0 * t)
    rec.channel("EEG_SEC").samples = np.sin(2 * np.pi * 11.0 * t)

    def dominant_freq(sig, rate):
        spec = np.abs(np.fft.rfft(sig - sig.mean()))
        return np.fft.rfftfreq(len(sig), 1.0 / rate)[np.argmax(spec)]

    primary = preprocess_recording(rec, 25.0, eeg_derivation="primary")
    secondary = preprocess_recording(rec, 25.0, eeg_derivation="secondary")
    assert abs(dominant_freq(primary[0], 25.0) - 6.0) < 0.2
    assert abs(dominant_freq(secondary[0], 25.0) - 11.0) < 0.2

    plain = _recording(120.0)
    with pytest.raises(ExcludedSubjectError, match="secondary"):
        preprocess_recording(plain, 25.0, eeg_derivation="secondary")


def test_low_rate_channel_clamps_band_top():
    # a 25 Hz EEG channel cannot carry the upper half of the nominal
    # 1-50 Hz band; the design clamps below Nyquist instead of raising
    fs = 25.0
    rng = np.random.default_rng(4)
    x = rng.standard_normal(int(fs * 120))
    out = condition_channel(x, "EEG", fs, 25.0)
    assert out.shape == x.shape
    assert np.all(np.isfinite(out))

    t = np.arange(int(fs * 120)) / fs
    tone = np.sin(2 * np.pi * 5.0 * t)
    kept = condition_channel(tone, "EEG", fs, 25.0)
    core = slice(200, -200)
    assert np.sqrt(np.mean(kept[core] ** 2)) > 0.6


def test_low_rate_channel_without_passband_raises():
    with pytest.raises(DataError, match="no room"):
        condition_channel(np.zeros(100), "EEG", 2.0, 2.0)
