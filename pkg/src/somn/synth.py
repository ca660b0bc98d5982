"""Synthetic overnight polysomnography cohorts.

Stage sequences come from a first-order Markov chain. Every channel is
generated from the stage sequence with a seeded generator: EEG as a
stage-specific mixture of band-limited sinusoid banks over a small white
floor, EMG as stage-scaled noise, EOG with rapid-eye-movement
deflections, effort belts as a 0.25 Hz breathing oscillation, SpO2 as a
96% baseline, position as a piecewise-constant code.

Respiratory events are placed in sleep epochs at configured per-hour
rates. Each one gates the effort belts down for its span, is followed by
an SpO2 desaturation starting 10-30 s after its onset, and with
probability ``arousal_lock_prob`` gets an arousal whose start falls
inside ``arousal_window_s`` around the event end. Fragmentation then
relabels the epoch containing the event end to N1 or Wake; the signals
are left on the pre-fragmentation stage, so those label changes are
carried by the event annotations, not by the waveforms (an optional flag
renders an alpha burst for arousals). Fragmentation only rides on events
that drew an arousal, at conditional rate frag/lock, so its marginal
rate is exactly ``post_event_fragmentation_prob``.

Subjects are generated from independent child streams of the cohort
seed, so subject i is the same whether generated alone or in a loop.
"""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .annotations import EPOCH_S, EVENT_KINDS, EventAnnotation, write_annotation_xml
from .dataset import MAX_SEQ_LEN, STAGE_NAMES, build_event_vectors, clinical_raw_vector, harmonize_labels
from .edf import ChannelSignal, PsgRecording, write_edf
from .epoch_store import SubjectEpochs
from .errors import ConfigError, DataError
from .metadata import SubjectMetadata, write_metadata_table
from .preprocess import segment_epochs

# stage indices follow STAGE_NAMES: 0 Wake, 1 N1, 2 N2, 3 N3, 4 REM
_STAGE_TO_RAW = ("Wake", "S1", "S2", "S3", "REM")

# rows sum to 1; diagonal terms set bout lengths (N2 ~6 epochs, N3 ~7,
# REM ~8, Wake ~10, N1 ~2.5), off-diagonals keep the usual pathways
# (Wake->N1->N2->N3, REM entered mostly from N2)
DEFAULT_TRANSITIONS = np.array([
    [0.900, 0.070, 0.020, 0.005, 0.005],
    [0.090, 0.600, 0.280, 0.010, 0.020],
    [0.020, 0.050, 0.830, 0.070, 0.030],
    [0.010, 0.010, 0.100, 0.860, 0.020],
    [0.030, 0.050, 0.040, 0.005, 0.875],
])

DEFAULT_EVENT_RATES = {
    "Hypopnea": 12.0,
    "ObstructiveApnea": 6.0,
    "CentralApnea": 2.0,
}

# kinds that gate the belts and trigger the desaturation/arousal chain
_RESP_EVENT_KINDS = ("Hypopnea", "ObstructiveApnea", "CentralApnea", "MixedApnea")

# effort-belt amplitude inside an event span; apneas must push in-event
# RMS below 20% of baseline even with the noise floor on top, hypopneas
# only reduce it
_BELT_GATES = {
    "Hypopnea": 0.45,
    "ObstructiveApnea": 0.10,
    "CentralApnea": 0.10,
    "MixedApnea": 0.10,
}

# EEG band edges (Hz) and per-stage RMS weights; rows Wake..REM. Delta
# dominates N3 with enough margin that the 0.5-4 Hz band beats 8-12 Hz
# by far more than 6 dB, and delta power orders N3 > N2 > Wake.
_EEG_BANDS = ((0.5, 4.0), (4.0, 8.0), (8.0, 12.0), (12.0, 14.0), (15.0, 24.0))
_EEG_WEIGHTS = np.array([
    [0.30, 0.40, 1.20, 0.10, 0.50],
    [0.60, 1.00, 0.50, 0.10, 0.20],
    [1.20, 0.80, 0.45, 0.80, 0.15],
    [2.60, 0.70, 0.30, 0.20, 0.10],
    [0.50, 1.10, 0.45, 0.10, 0.30],
])
_EEG_NOISE_RMS = 0.05
_SINES_PER_BAND = 3

_EMG_RMS = np.array([1.00, 0.50, 0.35, 0.25, 0.08])

# seconds of recording left after an event so its desaturation (onset
# lag up to 30 s, up to 25 s long) and arousal (end offset up to 14 s,
# up to 10 s long) always fit
_DESAT_SLACK_S = 55.0
_CHAIN_TAIL_S = 24.0


@dataclass
class SynthConfig:
    n_subjects: int = 8
    epochs_per_subject: int = 120
    sample_rate_hz: float = 125.0
    transitions: np.ndarray = field(default_factory=lambda: DEFAULT_TRANSITIONS.copy())
    event_rates_per_hour: dict[str, float] = field(
        default_factory=lambda: dict(DEFAULT_EVENT_RATES))
    arousal_lock_prob: float = 0.90
    arousal_window_s: tuple[float, float] = (-6.0, 14.0)
    post_event_fragmentation_prob: float = 0.6
    render_arousal_in_eeg: bool = False
    age_range_years: tuple[float, float] = (40.0, 90.0)
    seed: int = 0

    def __post_init__(self):
        if self.n_subjects < 1:
            raise ConfigError(f"n_subjects must be >= 1, got {self.n_subjects}")
        if not 1 <= self.epochs_per_subject <= MAX_SEQ_LEN:
            raise ConfigError(
                f"epochs_per_subject must be in 1..{MAX_SEQ_LEN}, got "
                f"{self.epochs_per_subject}")
        r = self.sample_rate_hz
        if r < 25 or r % 5 != 0:
            raise ConfigError(
                f"sample_rate_hz must be a multiple of 5 Hz and >= 25, got {r}; "
                "the effort belts run at a fifth of it and EDF records are 1 s")
        self.transitions = np.asarray(self.transitions, dtype=np.float64)
        if self.transitions.shape != (5, 5):
            raise ConfigError(f"transitions must be 5x5, got {self.transitions.shape}")
        if np.any(self.transitions < 0):
            raise ConfigError("transition probabilities must be non-negative")
        sums = self.transitions.sum(axis=1)
        if np.any(np.abs(sums - 1.0) > 1e-9):
            raise ConfigError(f"transition rows must sum to 1, got {sums.tolist()}")
        for kind, rate in self.event_rates_per_hour.items():
            if kind not in _RESP_EVENT_KINDS and kind != "PeriodicBreathing":
                allowed = _RESP_EVENT_KINDS + ("PeriodicBreathing",)
                raise ConfigError(
                    f"cannot set a rate for {kind!r}; desaturations and arousals "
                    f"are consequences of respiratory events (allowed: {allowed})")
            if not np.isfinite(rate) or rate < 0:
                raise ConfigError(f"event rate for {kind} must be >= 0, got {rate}")
        if not 0.0 <= self.arousal_lock_prob <= 1.0:
            raise ConfigError(
                f"arousal_lock_prob must be in [0, 1], got {self.arousal_lock_prob}")
        frag = self.post_event_fragmentation_prob
        if not 0.0 <= frag <= 1.0:
            raise ConfigError(
                f"post_event_fragmentation_prob must be in [0, 1], got {frag}")
        if frag > self.arousal_lock_prob:
            raise ConfigError(
                f"post_event_fragmentation_prob ({frag}) cannot exceed "
                f"arousal_lock_prob ({self.arousal_lock_prob}): fragmentation only "
                "follows events that caused an arousal")
        lo, hi = self.arousal_window_s
        if not (np.isfinite(lo) and np.isfinite(hi) and lo < hi):
            raise ConfigError(f"arousal_window_s must be (lo, hi) with lo < hi, "
                              f"got {self.arousal_window_s}")
        lo_a, hi_a = self.age_range_years
        if not 0 < lo_a < hi_a:
            raise ConfigError(f"age_range_years must be increasing and positive, "
                              f"got {self.age_range_years}")


def subject_rng(cfg: SynthConfig, subject_index: int, stream: int) -> np.random.Generator:
    """Independent generator for one subject and purpose.

    Streams: 0 hypnogram, 1 events, 2 signals, 3 metadata. Spawn keys
    make subject i identical whether generated alone or inside a cohort
    loop.
    """
    ss = np.random.SeedSequence(cfg.seed, spawn_key=(subject_index, stream))
    return np.random.Generator(np.random.PCG64(ss))


def gen_hypnogram(cfg: SynthConfig, rng: np.random.Generator,
                  n_epochs: int | None = None) -> np.ndarray:
    """Sample a stage sequence; always starts in Wake.

    ``n_epochs`` overrides the per-subject count for chain diagnostics
    (empirical transition frequencies need far more than one night).
    """
    n = cfg.epochs_per_subject if n_epochs is None else int(n_epochs)
    if n < 1:
        raise ValueError(f"need at least one epoch, got {n}")
    cum = np.cumsum(cfg.transitions, axis=1)
    cum[:, -1] = 1.0
    out = np.empty(n, dtype=np.int64)
    out[0] = 0
    if n == 1:
        return out
    draws = rng.random(n - 1)
    prev = 0
    for t in range(1, n):
        prev = int(np.searchsorted(cum[prev], draws[t - 1], side="left"))
        out[t] = prev
    return out


def _round_ms(x: float) -> float:
    # annotation XML carries millisecond precision; quantizing here makes
    # the write/parse round trip exact
    return round(float(x), 3)


def _event_sort_key(ev: EventAnnotation):
    return (ev.start_s, EVENT_KINDS.index(ev.kind), ev.duration_s)


def gen_events(stages: np.ndarray, cfg: SynthConfig,
               rng: np.random.Generator) -> tuple[list[EventAnnotation], np.ndarray]:
    """Place events on a hypnogram; returns (events, relabeled stages).

    Respiratory events start inside sleep epochs of the given stages.
    Same-kind overlaps are thinned by keeping the earliest event. Each
    surviving respiratory event is followed by a desaturation, then with
    probability ``arousal_lock_prob`` an arousal near its end; a
    fragmentation draw (conditional rate frag/lock) rewrites the stage
    of the epoch holding the event end to N1 (70%) or Wake. The input
    stages are not modified.
    """
    stages = np.asarray(stages)
    out_stages = stages.copy()
    t_total = len(stages) * EPOCH_S
    sleep = np.flatnonzero(stages != 0)
    if sleep.size == 0:
        return [], out_stages
    hours = sleep.size * EPOCH_S / 3600.0

    placed: list[EventAnnotation] = []
    for kind in sorted(cfg.event_rates_per_hour):
        rate = cfg.event_rates_per_hour[kind]
        n = int(rng.poisson(rate * hours)) if rate > 0 else 0
        if n == 0:
            continue
        epochs_idx = rng.choice(sleep, size=n)
        offsets = rng.uniform(0.0, EPOCH_S, size=n)
        durations = rng.uniform(10.0, 40.0, size=n)
        cands = []
        for e, off, dur in zip(epochs_idx, offsets, durations):
            start = e * EPOCH_S + off
            if start + _DESAT_SLACK_S > t_total or start + dur + _CHAIN_TAIL_S > t_total:
                continue
            cands.append((_round_ms(start), _round_ms(dur)))
        cands.sort()
        last_end = -np.inf
        for start, dur in cands:
            if start < last_end:
                continue
            placed.append(EventAnnotation(kind, start, dur))
            last_end = start + dur

    placed.sort(key=_event_sort_key)
    events = list(placed)
    w_lo, w_hi = cfg.arousal_window_s
    for ev in placed:
        if ev.kind not in _RESP_EVENT_KINDS:
            continue
        lag = rng.uniform(10.0, 30.0)
        desat_dur = rng.uniform(10.0, 25.0)
        events.append(EventAnnotation("Desaturation", _round_ms(ev.start_s + lag),
                                      _round_ms(desat_dur)))
        if cfg.arousal_lock_prob > 0 and rng.random() < cfg.arousal_lock_prob:
            a_start = max(0.0, ev.end_s + rng.uniform(w_lo, w_hi))
            a_dur = rng.uniform(3.0, 10.0)
            events.append(EventAnnotation("RespEffortArousal", _round_ms(a_start),
                                          _round_ms(a_dur)))
            cond = cfg.post_event_fragmentation_prob / cfg.arousal_lock_prob
            if rng.random() < cond:
                k = min(int(ev.end_s // EPOCH_S), len(stages) - 1)
                out_stages[k] = 1 if rng.random() < 0.7 else 0

    events.sort(key=_event_sort_key)
    return events, out_stages


def _eeg_channel(stages: np.ndarray, cfg: SynthConfig, rng: np.random.Generator,
                 burst_rng: np.random.Generator,
                 events: list[EventAnnotation]) -> np.ndarray:
    rate = cfg.sample_rate_hz
    t_count = len(stages)
    s = int(round(rate * EPOCH_S))
    tloc = np.arange(s) / rate
    weights = _EEG_WEIGHTS[stages]
    out = np.zeros((t_count, s))
    amp_per_sine = np.sqrt(2.0 / _SINES_PER_BAND)
    for b, (lo, hi) in enumerate(_EEG_BANDS):
        freqs = rng.uniform(lo, hi, size=(t_count, _SINES_PER_BAND))
        phases = rng.uniform(0.0, 2.0 * np.pi, size=(t_count, _SINES_PER_BAND))
        if hi > 0.48 * rate:
            continue  # band not representable at this rate; draws stay aligned
        w = weights[:, b] * amp_per_sine
        for i0 in range(0, t_count, 256):
            i1 = min(i0 + 256, t_count)
            args = 2.0 * np.pi * freqs[i0:i1, :, None] * tloc + phases[i0:i1, :, None]
            out[i0:i1] += w[i0:i1, None] * np.sin(args).sum(axis=1)
    out += _EEG_NOISE_RMS * rng.standard_normal((t_count, s))
    flat = out.reshape(-1)
    if cfg.render_arousal_in_eeg:
        for ev in events:
            if ev.kind != "RespEffortArousal":
                continue
            i0 = int(ev.start_s * rate)
            i1 = min(int(ev.end_s * rate), len(flat))
            if i1 <= i0:
                continue
            f = burst_rng.uniform(8.5, 11.5)
            ph = burst_rng.uniform(0.0, 2.0 * np.pi)
            tt = np.arange(i0, i1) / rate
            flat[i0:i1] += 1.5 * np.sin(2.0 * np.pi * f * tt + ph)
    return flat


def _eog_channels(stages: np.ndarray, cfg: SynthConfig,
                  rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
    rate = cfg.sample_rate_hz
    s = int(round(rate * EPOCH_S))
    tloc = np.arange(s) / rate
    left = 0.35 * rng.standard_normal((len(stages), s))
    right = 0.35 * rng.standard_normal((len(stages), s))
    for t, stage in enumerate(stages):
        if stage == 1:
            f = rng.uniform(0.2, 0.5)
            roll = 0.5 * np.sin(2.0 * np.pi * f * tloc)
            left[t] += roll
            right[t] += roll
        elif stage == 4:
            for _ in range(int(rng.poisson(4.0))):
                center = rng.uniform(2.0, EPOCH_S - 2.0)
                width = rng.uniform(0.5, 1.2)
                amp = rng.uniform(1.5, 2.5) * (1.0 if rng.random() < 0.5 else -1.0)
                bump = amp * np.exp(-0.5 * ((tloc - center) / (width / 2.0)) ** 2)
                left[t] += bump
                right[t] -= bump  # conjugate deflection: opposite polarity
    return left.reshape(-1), right.reshape(-1)


def _ecg_channel(duration_s: float, rate: float, rng: np.random.Generator) -> np.ndarray:
    n = int(round(duration_s * rate))
    out = 0.08 * rng.standard_normal(n)
    max_beats = int(duration_s / 0.5) + 2
    rr = np.clip(rng.normal(0.85, 0.04, size=max_beats), 0.5, 1.5)
    beat_times = np.cumsum(rr)
    beat_times = beat_times[beat_times < duration_s - 0.2]
    half = max(int(0.12 * rate), 1)
    for bt in beat_times:
        c = int(bt * rate)
        i0, i1 = max(c - half, 0), min(c + half + 1, n)
        tt = (np.arange(i0, i1) / rate) - bt
        out[i0:i1] += 1.2 * np.exp(-0.5 * (tt / 0.02) ** 2)
    return out


def _belt_gate(events: list[EventAnnotation], n: int, rate: float) -> np.ndarray:
    """Amplitude gate for the effort belts, with 1 s ramps outside spans.

    Ramps sit outside the annotated interval so in-event RMS reflects
    the gated level alone; overlapping gates combine by minimum.
    """
    gate = np.ones(n)
    ramp = max(int(round(rate)), 1)
    for ev in events:
        g = _BELT_GATES.get(ev.kind)
        if g is None:
            continue
        i0 = int(ev.start_s * rate)
        i1 = min(int(ev.end_s * rate), n)
        if i1 <= i0:
            continue
        gate[i0:i1] = np.minimum(gate[i0:i1], g)
        j0 = max(i0 - ramp, 0)
        if j0 < i0:
            down = np.linspace(1.0, g, i0 - j0, endpoint=False)
            gate[j0:i0] = np.minimum(gate[j0:i0], down)
        j1 = min(i1 + ramp, n)
        if i1 < j1:
            up = np.linspace(g, 1.0, j1 - i1, endpoint=False)
            gate[i1:j1] = np.minimum(gate[i1:j1], up)
    return gate


def _belt_channels(duration_s: float, cfg: SynthConfig, rng: np.random.Generator,
                   events: list[EventAnnotation]) -> tuple[np.ndarray, np.ndarray, float]:
    rate = cfg.sample_rate_hz / 5.0
    n = int(round(duration_s * rate))
    tt = np.arange(n) / rate
    freq = rng.uniform(0.22, 0.28)
    phase = rng.uniform(0.0, 2.0 * np.pi)
    gate = _belt_gate(events, n, rate)
    thor = gate * np.sin(2.0 * np.pi * freq * tt + phase)
    thor += 0.05 * rng.standard_normal(n)
    abdo = 0.95 * gate * np.sin(2.0 * np.pi * freq * tt + phase - 0.35)
    abdo += 0.05 * rng.standard_normal(n)
    return thor, abdo, rate


def _spo2_channel(duration_s: float, rng: np.random.Generator,
                  events: list[EventAnnotation]) -> np.ndarray:
    n = int(round(duration_s))
    out = 96.0 + 0.15 * rng.standard_normal(n)
    for ev in events:
        if ev.kind != "Desaturation":
            continue
        depth = rng.uniform(4.0, 8.0)
        i0 = int(ev.start_s)
        i1 = min(int(np.ceil(ev.end_s)), n)
        if i1 <= i0:
            continue
        tt = np.arange(i0, i1, dtype=np.float64)
        out[i0:i1] -= depth * np.sin(np.pi * (tt - ev.start_s) / ev.duration_s).clip(0.0)
    return np.clip(out, 70.0, 100.0)


def _position_channel(duration_s: float, rng: np.random.Generator) -> np.ndarray:
    n = int(round(duration_s))
    out = np.empty(n)
    i = 0
    while i < n:
        value = float(rng.integers(0, 4))
        length = int(rng.uniform(300.0, 1200.0))
        out[i:i + length] = value
        i += length
    return out


def gen_signals(stages: np.ndarray, events: list[EventAnnotation], cfg: SynthConfig,
                rng: np.random.Generator, subject_id: str = "synth") -> PsgRecording:
    """Render all nine channels for one night.

    The channel draw order is fixed (EEG, EOG, EMG, ECG, belts, SpO2,
    position); arousal bursts use a spawned child stream, so toggling
    ``render_arousal_in_eeg`` changes the EEG channel only.
    """
    stages = np.asarray(stages)
    duration_s = len(stages) * EPOCH_S
    rate = float(cfg.sample_rate_hz)

    burst_rng = rng.spawn(1)[0]
    eeg = _eeg_channel(stages, cfg, rng, burst_rng, events)
    eog_l, eog_r = _eog_channels(stages, cfg, rng)
    emg = (_EMG_RMS[stages][:, None]
           * rng.standard_normal((len(stages), int(round(rate * EPOCH_S))))).reshape(-1)
    ecg = _ecg_channel(duration_s, rate, rng)
    thor, abdo, belt_rate = _belt_channels(duration_s, cfg, rng, events)
    spo2 = _spo2_channel(duration_s, rng, events)
    pos = _position_channel(duration_s, rng)

    def chan(label, role, hz, unit, data, lo, hi):
        return ChannelSignal(label=label, role=role, sample_rate_hz=hz,
                             physical_unit=unit, samples=np.clip(data, lo, hi),
                             phys_min=lo, phys_max=hi, dig_min=-32768, dig_max=32767)

    channels = [
        chan("C4-A1", "EEG", rate, "uV", eeg, -15.0, 15.0),
        chan("LOC", "EOG_L", rate, "uV", eog_l, -10.0, 10.0),
        chan("ROC", "EOG_R", rate, "uV", eog_r, -10.0, 10.0),
        chan("Chin", "EMG", rate, "uV", emg, -6.0, 6.0),
        chan("ECG", "ECG", rate, "mV", ecg, -4.0, 4.0),
        chan("Thor", "THORACIC", belt_rate, "arb", thor, -3.0, 3.0),
        chan("Abdo", "ABDOMINAL", belt_rate, "arb", abdo, -3.0, 3.0),
        chan("SpO2", "SPO2", 1.0, "%", spo2, 0.0, 100.0),
        chan("Position", "POSITION", 1.0, "code", pos, 0.0, 3.0),
    ]
    return PsgRecording(subject_id=subject_id, channels=channels,
                        start_time="22.00.00", duration_s=duration_s)


def gen_metadata(subject_id: str, cfg: SynthConfig,
                 rng: np.random.Generator) -> SubjectMetadata:
    """Age uniform in range, balanced sex, BMI ~ N(28, 4) clipped 18-45.

    A few subjects lose a field (4% sex, 8% BMI) so imputation paths see
    realistic gaps; age is always present.
    """
    age = round(float(rng.uniform(*cfg.age_range_years)), 1)
    sex: str | None = "male" if rng.random() < 0.5 else "female"
    bmi: float | None = round(float(np.clip(rng.normal(28.0, 4.0), 18.0, 45.0)), 1)
    if rng.random() < 0.04:
        sex = None
    if rng.random() < 0.08:
        bmi = None
    return SubjectMetadata(subject_id=subject_id, age_years=age, sex=sex, bmi_kg_m2=bmi)


@dataclass
class SynthSubject:
    """One generated night plus its ground truth."""

    subject_id: str
    stages: np.ndarray              # int 0..4 after fragmentation (the truth labels)
    signal_stages: np.ndarray       # pre-fragmentation stages the waveforms follow
    raw_stages: list[str]           # truth stages in annotation vocabulary
    events: list[EventAnnotation]
    recording: PsgRecording
    metadata: SubjectMetadata

    @property
    def n_epochs(self) -> int:
        return len(self.stages)


def gen_subject(cfg: SynthConfig, subject_index: int) -> SynthSubject:
    sid = f"subj-{subject_index:04d}"
    stages0 = gen_hypnogram(cfg, subject_rng(cfg, subject_index, 0))
    events, stages = gen_events(stages0, cfg, subject_rng(cfg, subject_index, 1))
    # signals follow the pre-fragmentation hypnogram: a fragmented epoch
    # keeps its original waveform and only the label moves
    recording = gen_signals(stages0, events, cfg, subject_rng(cfg, subject_index, 2),
                            subject_id=sid)
    metadata = gen_metadata(sid, cfg, subject_rng(cfg, subject_index, 3))
    raw = [_STAGE_TO_RAW[s] for s in stages]
    return SynthSubject(subject_id=sid, stages=stages, signal_stages=stages0,
                        raw_stages=raw, events=events, recording=recording,
                        metadata=metadata)


def subject_to_epochs(subject: SynthSubject,
                      common_rate_hz: float = 25.0) -> SubjectEpochs:
    """Run one generated subject through the in-memory signal pipeline.

    Identical to ingesting the written files except for int16
    quantization of the waveforms.
    """
    epochs = segment_epochs(subject.recording, common_rate_hz)
    labels = harmonize_labels(subject.raw_stages)
    if epochs.shape[0] != len(labels):
        raise DataError(
            f"{subject.subject_id}: {epochs.shape[0]} signal epochs for "
            f"{len(labels)} stage labels")
    events = build_event_vectors(subject.events, len(labels))
    clinical = clinical_raw_vector(subject.metadata)
    return SubjectEpochs(subject_id=subject.subject_id, epochs=epochs, labels=labels,
                         events=events, clinical=clinical)


def cohort_to_epochs(subjects: list[SynthSubject],
                     common_rate_hz: float = 25.0) -> list[SubjectEpochs]:
    return [subject_to_epochs(s, common_rate_hz) for s in subjects]


def _manifest(cfg: SynthConfig, subjects: list[SynthSubject],
              files: dict[str, dict[str, str]] | None) -> dict:
    cfg_dict = dataclasses.asdict(cfg)
    cfg_dict["transitions"] = cfg.transitions.tolist()
    cfg_dict["arousal_window_s"] = list(cfg.arousal_window_s)
    cfg_dict["age_range_years"] = list(cfg.age_range_years)
    rows = []
    for s in subjects:
        counts = {name: int((s.stages == i).sum()) for i, name in enumerate(STAGE_NAMES)}
        row = {
            "id": s.subject_id,
            "n_epochs": s.n_epochs,
            "n_events": len(s.events),
            "stage_counts": counts,
        }
        if files is not None:
            row.update(files[s.subject_id])
        rows.append(row)
    return {"config": cfg_dict, "subjects": rows}


def gen_cohort(cfg: SynthConfig,
               out_dir: str | Path | None = None) -> tuple[list[SynthSubject], dict]:
    """Generate all subjects; optionally write the cohort to disk.

    On disk each subject gets ``<id>.edf`` and ``<id>.xml``, the cohort
    shares ``metadata.csv`` and a ``manifest.json`` with per-subject
    stage and event counts.
    """
    subjects = [gen_subject(cfg, i) for i in range(cfg.n_subjects)]
    files: dict[str, dict[str, str]] | None = None
    if out_dir is not None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        files = {}
        for s in subjects:
            edf_name = f"{s.subject_id}.edf"
            xml_name = f"{s.subject_id}.xml"
            (out / edf_name).write_bytes(write_edf(s.recording))
            (out / xml_name).write_bytes(write_annotation_xml(s.raw_stages, s.events))
            files[s.subject_id] = {"edf": edf_name, "annotations": xml_name}
        (out / "metadata.csv").write_text(
            write_metadata_table([s.metadata for s in subjects]))
        manifest = _manifest(cfg, subjects, files)
        (out / "manifest.json").write_text(
            json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    else:
        manifest = _manifest(cfg, subjects, None)
    return subjects, manifest
