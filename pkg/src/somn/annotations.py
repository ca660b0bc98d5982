"""Scored-event XML parsing: sleep stages and respiratory events.

The format is the NSRR scored-annotation layout: a list of ScoredEvent
elements, each with an EventConcept plus Start and Duration in seconds.
Stage events expand into a per-30s-epoch raw stage array; respiratory,
desaturation, and arousal events become typed intervals. Concept names
vary by site, so matching goes through an overridable name table.
"""

from __future__ import annotations

import xml.etree.ElementTree as ET
from dataclasses import dataclass
from xml.sax.saxutils import escape

from .errors import DataError

EPOCH_S = 30.0

# order fixes the layout of per-epoch event indicator vectors
EVENT_KINDS = (
    "Hypopnea",
    "ObstructiveApnea",
    "CentralApnea",
    "MixedApnea",
    "Desaturation",
    "RespEffortArousal",
    "PeriodicBreathing",
)

RAW_STAGES = ("Wake", "S1", "S2", "S3", "S4", "REM", "Unscored")

# lowercase concept name -> ("stage", raw stage) or ("event", kind);
# NSRR concepts usually look like "Stage 2 sleep|2", both halves match
DEFAULT_CONCEPTS: dict[str, tuple[str, str]] = {
    "wake": ("stage", "Wake"),
    "0": ("stage", "Wake"),
    "stage 1 sleep": ("stage", "S1"),
    "1": ("stage", "S1"),
    "stage 2 sleep": ("stage", "S2"),
    "2": ("stage", "S2"),
    "stage 3 sleep": ("stage", "S3"),
    "3": ("stage", "S3"),
    "stage 4 sleep": ("stage", "S4"),
    "4": ("stage", "S4"),
    "rem sleep": ("stage", "REM"),
    "5": ("stage", "REM"),
    "unscored": ("stage", "Unscored"),
    "9": ("stage", "Unscored"),
    "hypopnea": ("event", "Hypopnea"),
    "obstructive apnea": ("event", "ObstructiveApnea"),
    "central apnea": ("event", "CentralApnea"),
    "mixed apnea": ("event", "MixedApnea"),
    "spo2 desaturation": ("event", "Desaturation"),
    "desaturation": ("event", "Desaturation"),
    "respiratory effort related arousal": ("event", "RespEffortArousal"),
    "rera": ("event", "RespEffortArousal"),
    "periodic breathing": ("event", "PeriodicBreathing"),
}


@dataclass(frozen=True)
class EventAnnotation:
    kind: str
    start_s: float
    duration_s: float

    def __post_init__(self):
        if self.kind not in EVENT_KINDS:
            raise ValueError(f"unknown event kind {self.kind!r}")
        if self.start_s < 0:
            raise ValueError(f"event start {self.start_s} < 0")
        if self.duration_s <= 0:
            raise ValueError(f"event duration {self.duration_s} must be positive")

    @property
    def end_s(self) -> float:
        return self.start_s + self.duration_s


@dataclass
class ParsedAnnotations:
    stages: list[str]           # one raw stage per 30 s epoch
    events: list[EventAnnotation]
    unknown_concepts: int       # count of concepts the name table skipped


def _lookup(concept: str, table: dict[str, tuple[str, str]]) -> tuple[str, str] | None:
    text = concept.strip().lower()
    if text in table:
        return table[text]
    for part in text.split("|"):
        part = part.strip()
        if part in table:
            return table[part]
    return None


def parse_annotation_xml(data: bytes, recording_duration_s: float,
                         concept_table: dict[str, tuple[str, str]] | None = None,
                         ) -> ParsedAnnotations:
    """Parse scored-event XML against a recording of known duration.

    Epochs not covered by any stage event stay Unscored. Events that
    extend past the recording are an error; unknown concept names are
    counted and skipped.
    """
    table = DEFAULT_CONCEPTS if concept_table is None else concept_table
    try:
        root = ET.fromstring(data)
    except ET.ParseError as exc:
        raise DataError(f"malformed annotation XML: {exc}") from exc

    n_epochs = int(recording_duration_s // EPOCH_S)
    stages = ["Unscored"] * n_epochs
    events: list[EventAnnotation] = []
    unknown = 0

    for elem in root.iter("ScoredEvent"):
        concept = elem.findtext("EventConcept")
        start_text = elem.findtext("Start")
        duration_text = elem.findtext("Duration")
        if concept is None or start_text is None or duration_text is None:
            raise DataError("ScoredEvent missing EventConcept/Start/Duration")
        try:
            start = float(start_text)
            duration = float(duration_text)
        except ValueError as exc:
            raise DataError(f"non-numeric Start/Duration in {concept!r}") from exc
        if start < 0:
            raise DataError(f"event {concept!r} starts before the recording ({start}s)")
        if start + duration > recording_duration_s + 1e-6:
            raise DataError(
                f"event {concept!r} at {start}s+{duration}s extends past the "
                f"{recording_duration_s}s recording")

        resolved = _lookup(concept, table)
        if resolved is None:
            unknown += 1
            continue
        kind_class, name = resolved
        if kind_class == "stage":
            if duration <= 0:
                raise DataError(f"stage event {concept!r} with non-positive duration")
            first = int(round(start / EPOCH_S))
            count = int(round(duration / EPOCH_S))
            for k in range(first, min(first + count, n_epochs)):
                stages[k] = name
        else:
            events.append(EventAnnotation(kind=name, start_s=start, duration_s=duration))

    return ParsedAnnotations(stages=stages, events=events, unknown_concepts=unknown)


def write_annotation_xml(stages: list[str], events: list[EventAnnotation]) -> bytes:
    """Emit scored-event XML this module can parse back (synth cohorts)."""
    stage_concepts = {
        "Wake": "Wake|0",
        "S1": "Stage 1 sleep|1",
        "S2": "Stage 2 sleep|2",
        "S3": "Stage 3 sleep|3",
        "S4": "Stage 4 sleep|4",
        "REM": "REM sleep|5",
        "Unscored": "Unscored|9",
    }
    event_concepts = {
        "Hypopnea": "Hypopnea|Hypopnea",
        "ObstructiveApnea": "Obstructive apnea|Obstructive Apnea",
        "CentralApnea": "Central apnea|Central Apnea",
        "MixedApnea": "Mixed apnea|Mixed Apnea",
        "Desaturation": "SpO2 desaturation|SpO2 desaturation",
        "RespEffortArousal": "Respiratory effort related arousal|RERA",
        "PeriodicBreathing": "Periodic breathing|Periodic Breathing",
    }
    lines = ['<?xml version="1.0" encoding="UTF-8"?>', "<PSGAnnotation>", "<ScoredEvents>"]

    # merge runs of equal stages into single events
    i = 0
    while i < len(stages):
        j = i
        while j < len(stages) and stages[j] == stages[i]:
            j += 1
        lines.append("<ScoredEvent>"
                     f"<EventType>Stages|Stages</EventType>"
                     f"<EventConcept>{escape(stage_concepts[stages[i]])}</EventConcept>"
                     f"<Start>{i * EPOCH_S:.1f}</Start>"
                     f"<Duration>{(j - i) * EPOCH_S:.1f}</Duration>"
                     "</ScoredEvent>")
        i = j

    for ev in events:
        lines.append("<ScoredEvent>"
                     f"<EventType>Respiratory|Respiratory</EventType>"
                     f"<EventConcept>{escape(event_concepts[ev.kind])}</EventConcept>"
                     f"<Start>{ev.start_s:.3f}</Start>"
                     f"<Duration>{ev.duration_s:.3f}</Duration>"
                     "</ScoredEvent>")
    lines += ["</ScoredEvents>", "</PSGAnnotation>"]
    return "\n".join(lines).encode("utf-8")
