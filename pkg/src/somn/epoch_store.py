"""EPST: a binary container for preprocessed per-epoch tensors.

Layout (little-endian throughout):

    magic    4 bytes  b"EPST"
    version  u32      currently 1
    count    u32      number of subjects
    then per subject one block:
        id_len   u32, id UTF-8 bytes
        T        u32  epochs
        C        u32  channels
        S        u32  samples per epoch per channel
        labels   u8[T]      harmonized stages 0..4, 255 = unscored
        events   u8[T*7]    per-epoch event indicators
        clinical f32[3]     raw age, sex (1=male, 0=female), BMI; NaN = missing
        epochs   f32[T*C*S] epoch tensor, C-order [T, C, S]
        crc      u32        CRC32 of the block bytes above

The per-block checksum localizes corruption to a subject. Round-trips
are bit-exact.
"""

from __future__ import annotations

import struct
import zlib
from dataclasses import dataclass, field

import numpy as np

from .errors import DataError

MAGIC = b"EPST"
VERSION = 1
N_EVENT_KINDS = 7
IGNORE_LABEL = 255


@dataclass
class SubjectEpochs:
    """One preprocessed recording: epochs plus per-epoch context."""

    subject_id: str
    epochs: np.ndarray    # float32 [T, C, S]
    labels: np.ndarray    # uint8 [T], 0..4 or 255
    events: np.ndarray    # uint8 [T, 7]
    clinical: np.ndarray  # float32 [3]: age, sex, bmi (NaN = missing)

    def __post_init__(self):
        self.epochs = np.ascontiguousarray(self.epochs, dtype=np.float32)
        self.labels = np.ascontiguousarray(self.labels, dtype=np.uint8)
        self.events = np.ascontiguousarray(self.events, dtype=np.uint8)
        self.clinical = np.ascontiguousarray(self.clinical, dtype=np.float32)
        if self.epochs.ndim != 3:
            raise DataError(f"{self.subject_id}: epochs must be [T, C, S], got {self.epochs.shape}")
        t = self.epochs.shape[0]
        if self.labels.shape != (t,):
            raise DataError(f"{self.subject_id}: labels shape {self.labels.shape} != ({t},)")
        if self.events.shape != (t, N_EVENT_KINDS):
            raise DataError(f"{self.subject_id}: events shape {self.events.shape} != ({t}, 7)")
        if self.clinical.shape != (3,):
            raise DataError(f"{self.subject_id}: clinical shape {self.clinical.shape} != (3,)")
        bad = (self.labels > 4) & (self.labels != IGNORE_LABEL)
        if np.any(bad):
            raise DataError(f"{self.subject_id}: labels must be 0..4 or 255")

    @property
    def n_epochs(self) -> int:
        return self.epochs.shape[0]

    @property
    def mask(self) -> np.ndarray:
        """True where the epoch is scored and counts toward loss/metrics."""
        return self.labels != IGNORE_LABEL


def _subject_block(s: SubjectEpochs) -> bytes:
    sid = s.subject_id.encode("utf-8")
    t, c, sp = s.epochs.shape
    parts = [
        struct.pack("<I", len(sid)), sid,
        struct.pack("<III", t, c, sp),
        s.labels.tobytes(),
        s.events.tobytes(),
        s.clinical.astype("<f4").tobytes(),
        s.epochs.astype("<f4").tobytes(),
    ]
    blob = b"".join(parts)
    return blob + struct.pack("<I", zlib.crc32(blob) & 0xFFFFFFFF)


def write_epoch_store(path: str, subjects: list[SubjectEpochs]) -> None:
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<II", VERSION, len(subjects)))
        for s in subjects:
            fh.write(_subject_block(s))


def read_epoch_store(path: str) -> list[SubjectEpochs]:
    with open(path, "rb") as fh:
        blob = fh.read()
    if blob[:4] != MAGIC:
        raise DataError(f"{path}: not an epoch store (bad magic {blob[:4]!r})")
    if len(blob) < 12:
        raise DataError(f"{path}: truncated header")
    version, count = struct.unpack_from("<II", blob, 4)
    if version != VERSION:
        raise DataError(f"{path}: unsupported epoch store version {version}")

    subjects: list[SubjectEpochs] = []
    off = 12
    for i in range(count):
        start = off
        try:
            (id_len,) = struct.unpack_from("<I", blob, off)
            off += 4
            sid = blob[off:off + id_len].decode("utf-8", errors="replace")
            off += id_len
            t, c, sp = struct.unpack_from("<III", blob, off)
            off += 12
        except struct.error as exc:
            raise DataError(f"{path}: truncated subject block {i}") from exc

        n_epoch_bytes = t * c * sp * 4
        need = t + t * N_EVENT_KINDS + 12 + n_epoch_bytes + 4
        if off + need > len(blob):
            raise DataError(f"{path}: truncated data for subject {sid!r}")
        labels = np.frombuffer(blob, dtype=np.uint8, count=t, offset=off).copy()
        off += t
        events = np.frombuffer(blob, dtype=np.uint8, count=t * N_EVENT_KINDS,
                               offset=off).reshape(t, N_EVENT_KINDS).copy()
        off += t * N_EVENT_KINDS
        clinical = np.frombuffer(blob, dtype="<f4", count=3, offset=off).astype(np.float32)
        off += 12
        epochs = np.frombuffer(blob, dtype="<f4", count=t * c * sp,
                               offset=off).reshape(t, c, sp).astype(np.float32)
        off += n_epoch_bytes
        (stored_crc,) = struct.unpack_from("<I", blob, off)
        off += 4
        actual_crc = zlib.crc32(blob[start:off - 4]) & 0xFFFFFFFF
        if stored_crc != actual_crc:
            raise DataError(f"{path}: checksum failure in block for subject {sid!r}")
        subjects.append(SubjectEpochs(subject_id=sid, epochs=epochs, labels=labels,
                                      events=events, clinical=clinical))
    if off != len(blob):
        raise DataError(f"{path}: {len(blob) - off} trailing bytes after last subject")
    return subjects
