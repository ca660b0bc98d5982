"""EDF reading and writing for polysomnography recordings.

Implements the classic EDF layout: a 256-byte ASCII global header, 256
ASCII bytes per signal (fields grouped field-major), then data records
of little-endian 16-bit integers. Physical values are recovered with the
standard linear map. Channel roles (EEG, ECG, SpO2, ...) are resolved
from labels through a configurable alias table because acquisition sites
disagree on naming.

Writing reuses a parsed channel's calibration ranges when present, so
parse -> write -> parse is exact; fresh channels get ranges canonicalized
through the 8-character header fields before quantization for the same
reason.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import DataError, ExcludedSubjectError

ROLES = (
    "SPO2", "ECG", "EMG", "EOG_L", "EOG_R", "EEG", "EEG_SEC",
    "THORACIC", "ABDOMINAL", "POSITION",
)

REQUIRED_ROLES = (
    "SPO2", "ECG", "EMG", "EOG_L", "EOG_R", "EEG", "THORACIC", "ABDOMINAL", "POSITION",
)

# label aliases, matched after lowercasing and removing spaces; order
# matters: the secondary EEG derivation must claim its labels before the
# generic "eeg" alias does
DEFAULT_ALIASES: tuple[tuple[str, tuple[str, ...]], ...] = (
    ("EEG_SEC", ("eeg(sec)", "eegsec", "eeg2", "c3a2", "c3m1", "c3-a2", "c3-m1")),
    ("EEG", ("eeg", "eeg1", "c4a1", "c4m1", "c4-a1", "c4-m1")),
    ("SPO2", ("spo2", "sao2", "osat", "o2sat")),
    ("ECG", ("ecg", "ekg", "ecg1", "ecgl")),
    ("EMG", ("emg", "chin", "chinemg", "emgchin", "chin1-chin2")),
    ("EOG_L", ("eog(l)", "eogl", "loc", "eogleft", "e1", "e1-m2")),
    ("EOG_R", ("eog(r)", "eogr", "roc", "eogright", "e2", "e2-m2")),
    ("THORACIC", ("thorres", "thor", "thoracic", "chest", "thorax")),
    ("ABDOMINAL", ("abdores", "abdo", "abdominal", "abd", "abdomen")),
    ("POSITION", ("position", "pos", "bodypos", "bodyposition")),
)


@dataclass
class ChannelSignal:
    label: str
    role: str | None
    sample_rate_hz: float
    physical_unit: str
    samples: np.ndarray
    phys_min: float | None = None
    phys_max: float | None = None
    dig_min: int | None = None
    dig_max: int | None = None


@dataclass
class PsgRecording:
    subject_id: str
    channels: list[ChannelSignal]
    start_time: str
    duration_s: float

    def channel(self, role: str) -> ChannelSignal:
        for ch in self.channels:
            if ch.role == role:
                return ch
        raise KeyError(f"no channel with role {role}")

    def roles(self) -> dict[str, ChannelSignal]:
        out: dict[str, ChannelSignal] = {}
        for ch in self.channels:
            if ch.role is not None and ch.role not in out:
                out[ch.role] = ch
        return out


def _norm_label(label: str) -> str:
    return label.strip().lower().replace(" ", "")


def resolve_roles(labels: list[str],
                  alias_table=DEFAULT_ALIASES) -> list[str | None]:
    """Map channel labels to roles; first label wins when a role repeats."""
    lookup: dict[str, str] = {}
    for role, aliases in alias_table:
        if role not in ROLES:
            raise ValueError(f"unknown role {role!r} in alias table")
        for alias in aliases:
            lookup.setdefault(_norm_label(alias), role)
    assigned: set[str] = set()
    out: list[str | None] = []
    for label in labels:
        role = lookup.get(_norm_label(label))
        if role is not None and role not in assigned:
            assigned.add(role)
            out.append(role)
        else:
            out.append(None)
    return out


def _ascii_field(raw: bytes) -> str:
    return raw.decode("ascii", errors="replace").strip()


def _fmt8(value: float) -> str:
    """Shortest ASCII float that fits an 8-char EDF field, exact if possible."""
    for prec in range(1, 18):
        s = f"{value:.{prec}g}"
        if len(s) > 8:
            break
        if float(s) == value:
            return s
    best = f"{value:.1g}"
    for prec in range(2, 18):
        s = f"{value:.{prec}g}"
        if len(s) <= 8:
            best = s
    return best


def parse_edf(data: bytes, alias_table=DEFAULT_ALIASES,
              required_roles: tuple[str, ...] | None = None,
              subject_id: str | None = None) -> PsgRecording:
    """Parse EDF bytes into a recording with role-resolved channels.

    ``required_roles``, when given, raises ExcludedSubjectError if any
    role cannot be resolved (the caller drops that subject).
    """
    if len(data) < 256:
        raise DataError("EDF header truncated: file shorter than 256 bytes")
    if data[0:8] != b"0       ":
        raise DataError(f"not an EDF file: version field {data[0:8]!r}")

    patient = _ascii_field(data[8:88])
    start_date = _ascii_field(data[168:176])
    start_time = _ascii_field(data[176:184])
    try:
        header_bytes = int(_ascii_field(data[184:192]))
        n_records = int(_ascii_field(data[236:244]))
        record_duration = float(_ascii_field(data[244:252]))
        ns = int(_ascii_field(data[252:256]))
    except ValueError as exc:
        raise DataError(f"malformed EDF numeric header field: {exc}") from exc
    if ns <= 0:
        raise DataError(f"EDF declares {ns} signals")
    if header_bytes != 256 * (ns + 1):
        raise DataError(f"EDF header size {header_bytes} != 256*(ns+1) for ns={ns}")
    if len(data) < header_bytes:
        raise DataError("EDF header truncated: signal fields missing")
    if n_records < 0:
        raise DataError("EDF with unknown record count is not supported")

    # signal headers are field-major: all labels, then all transducers, ...
    cursor = 256

    def fields(width: int) -> list[str]:
        nonlocal cursor
        base = cursor
        cursor += width * ns
        return [_ascii_field(data[base + i * width: base + (i + 1) * width])
                for i in range(ns)]

    labels = fields(16)
    fields(80)  # transducer type, unused
    units = fields(8)
    try:
        phys_min = [float(v) for v in fields(8)]
        phys_max = [float(v) for v in fields(8)]
        dig_min = [int(v) for v in fields(8)]
        dig_max = [int(v) for v in fields(8)]
        fields(80)  # prefiltering, unused
        spr = [int(v) for v in fields(8)]
    except ValueError as exc:
        raise DataError(f"malformed EDF signal header field: {exc}") from exc

    record_words = sum(spr)
    expected = header_bytes + n_records * record_words * 2
    if len(data) < expected:
        raise DataError(f"EDF truncated: expected {expected} bytes, got {len(data)}")
    if len(data) > expected:
        raise DataError(f"EDF record count mismatch: {len(data) - expected} trailing bytes")

    raw = np.frombuffer(data, dtype="<i2", offset=header_bytes,
                        count=n_records * record_words).reshape(n_records, record_words)
    duration_s = n_records * record_duration
    roles = resolve_roles(labels, alias_table)

    channels: list[ChannelSignal] = []
    col = 0
    for i in range(ns):
        if dig_min[i] == dig_max[i]:
            raise DataError(f"channel {labels[i]!r}: dig_min == dig_max == {dig_min[i]}")
        if phys_min[i] == phys_max[i]:
            raise DataError(f"channel {labels[i]!r}: phys_min == phys_max")
        dig = raw[:, col:col + spr[i]].reshape(-1).astype(np.float64)
        col += spr[i]
        scale_ = (phys_max[i] - phys_min[i]) / (dig_max[i] - dig_min[i])
        phys = (dig - dig_min[i]) * scale_ + phys_min[i]
        rate = spr[i] / record_duration
        channels.append(ChannelSignal(
            label=labels[i], role=roles[i], sample_rate_hz=rate,
            physical_unit=units[i], samples=phys,
            phys_min=phys_min[i], phys_max=phys_max[i],
            dig_min=dig_min[i], dig_max=dig_max[i]))

    sid = subject_id if subject_id is not None else (patient.split() or ["unknown"])[0]
    if required_roles is not None:
        have = {ch.role for ch in channels}
        missing = [r for r in required_roles if r not in have]
        if missing:
            raise ExcludedSubjectError(f"subject {sid}: missing required channels {missing}")
    return PsgRecording(subject_id=sid, channels=channels,
                        start_time=f"{start_date} {start_time}".strip(),
                        duration_s=duration_s)


def write_edf(recording: PsgRecording, record_duration_s: float = 1.0,
              start_date: str = "01.01.85", start_time: str = "00.00.00") -> bytes:
    """Serialize a recording to EDF bytes.

    Channels must yield an integer number of samples per data record and
    share the recording duration. Calibration ranges stored on a channel
    are reused verbatim; otherwise the data range is widened through the
    8-character header formatting so quantization and header agree.
    """
    chans = recording.channels
    if not chans:
        raise DataError("cannot write an EDF with no channels")
    n_records_f = recording.duration_s / record_duration_s
    n_records = int(round(n_records_f))
    if abs(n_records_f - n_records) > 1e-9 or n_records <= 0:
        raise DataError(f"duration {recording.duration_s}s is not a whole number of "
                        f"{record_duration_s}s records")

    spr: list[int] = []
    for ch in chans:
        n_per = ch.sample_rate_hz * record_duration_s
        if abs(n_per - round(n_per)) > 1e-9 or n_per <= 0:
            raise DataError(f"channel {ch.label!r}: rate {ch.sample_rate_hz} Hz does not "
                            f"fill {record_duration_s}s records evenly")
        n_per = int(round(n_per))
        if len(ch.samples) != n_per * n_records:
            raise DataError(f"channel {ch.label!r}: {len(ch.samples)} samples, "
                            f"expected {n_per * n_records}")
        spr.append(n_per)

    headers = []
    digital = []
    for ch in chans:
        x = np.asarray(ch.samples, dtype=np.float64)
        if None not in (ch.phys_min, ch.phys_max, ch.dig_min, ch.dig_max):
            pmin, pmax = float(ch.phys_min), float(ch.phys_max)
            dmin, dmax = int(ch.dig_min), int(ch.dig_max)
        else:
            pmin = float(x.min()) if len(x) else 0.0
            pmax = float(x.max()) if len(x) else 1.0
            if pmax <= pmin:
                pmax = pmin + max(1.0, abs(pmin) * 0.01)
            pmin = float(_fmt8(pmin))
            pmax = float(_fmt8(pmax))
            if pmax <= pmin:
                pmax = float(_fmt8(pmin + max(1.0, abs(pmin) * 0.01)))
            dmin, dmax = -32768, 32767
        dig = np.round((x - pmin) * (dmax - dmin) / (pmax - pmin) + dmin)
        digital.append(np.clip(dig, dmin, dmax).astype("<i2"))
        headers.append((pmin, pmax, dmin, dmax))

    ns = len(chans)

    def pad(text: str, width: int) -> bytes:
        b = text.encode("ascii", errors="replace")[:width]
        return b + b" " * (width - len(b))

    out = bytearray()
    out += b"0       "
    out += pad(recording.subject_id, 80)
    out += pad("recording", 80)
    out += pad(start_date, 8)
    out += pad(start_time, 8)
    out += pad(str(256 * (ns + 1)), 8)
    out += pad("", 44)
    out += pad(str(n_records), 8)
    out += pad(_fmt8(record_duration_s), 8)
    out += pad(str(ns), 4)

    for ch in chans:
        out += pad(ch.label, 16)
    for _ in chans:
        out += pad("", 80)
    for ch in chans:
        out += pad(ch.physical_unit, 8)
    for pmin, _, _, _ in headers:
        out += pad(_fmt8(pmin), 8)
    for _, pmax, _, _ in headers:
        out += pad(_fmt8(pmax), 8)
    for _, _, dmin, _ in headers:
        out += pad(str(dmin), 8)
    for _, _, _, dmax in headers:
        out += pad(str(dmax), 8)
    for _ in chans:
        out += pad("", 80)
    for n_per in spr:
        out += pad(str(n_per), 8)
    for _ in chans:
        out += pad("", 32)

    for r in range(n_records):
        for i, n_per in enumerate(spr):
            out += digital[i][r * n_per:(r + 1) * n_per].tobytes()
    return bytes(out)
