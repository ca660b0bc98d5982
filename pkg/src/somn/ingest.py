"""File-based cohort ingestion: find EDF/annotation pairs on disk and
turn them into the per-subject epoch tensors the training stages eat.

Discovery prefers a ``manifest.json`` listing subjects; without one,
every ``*.edf`` in the directory pairs with the annotation XML of the
same stem. A subject whose recording lacks a required channel is
excluded with a recorded reason rather than sinking the cohort;
structurally broken files abort the run.
"""

from __future__ import annotations

import json
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass
from pathlib import Path

from .annotations import parse_annotation_xml
from .dataset import build_event_vectors, clinical_raw_vector, harmonize_labels
from .edf import DEFAULT_ALIASES, REQUIRED_ROLES, parse_edf
from .epoch_store import IGNORE_LABEL, SubjectEpochs
from .errors import ConfigError, DataError, ExcludedSubjectError
from .metadata import SubjectMetadata, parse_metadata_table
from .preprocess import segment_epochs


@dataclass(frozen=True)
class CohortEntry:
    subject_id: str
    edf_path: Path
    annotation_path: Path


def extend_aliases(extra: dict | None):
    """The default channel alias table with per-role extensions.

    Extensions are matched before the built-in labels so a site-specific
    name can shadow a default one.
    """
    if not extra:
        return DEFAULT_ALIASES
    known = {role for role, _ in DEFAULT_ALIASES}
    unknown = sorted(set(extra) - known)
    if unknown:
        raise ConfigError(f"channel_aliases for unknown role {unknown[0]!r}; "
                          f"known roles: {', '.join(sorted(known))}")
    return tuple((role, tuple(extra.get(role, ())) + aliases)
                 for role, aliases in DEFAULT_ALIASES)


def discover_cohort(cohort_dir: str | Path) -> list[CohortEntry]:
    """List the subjects a cohort directory contains, in a stable order."""
    d = Path(cohort_dir)
    if not d.is_dir():
        raise DataError(f"cohort directory not found: {d}")
    manifest = d / "manifest.json"
    entries: list[CohortEntry] = []
    if manifest.is_file():
        try:
            doc = json.loads(manifest.read_text())
        except json.JSONDecodeError as exc:
            raise DataError(f"{manifest} is not valid JSON: {exc}") from exc
        rows = doc.get("subjects")
        if not isinstance(rows, list):
            raise DataError(f"{manifest} has no \"subjects\" list")
        for i, row in enumerate(rows):
            if not isinstance(row, dict) or not {"id", "edf", "annotations"} <= set(row):
                raise DataError(f"{manifest}: subject entry {i} needs id, edf "
                                f"and annotations fields")
            entries.append(CohortEntry(str(row["id"]), d / row["edf"],
                                       d / row["annotations"]))
    else:
        for edf_path in sorted(d.glob("*.edf")):
            xml_path = edf_path.with_suffix(".xml")
            if not xml_path.is_file():
                raise DataError(f"{edf_path.name} has no matching {xml_path.name}")
            entries.append(CohortEntry(edf_path.stem, edf_path, xml_path))
    if not entries:
        raise DataError(f"no subjects found in {d}")
    seen: set[str] = set()
    for e in entries:
        if e.subject_id in seen:
            raise DataError(f"duplicate subject id {e.subject_id!r} in {d}")
        seen.add(e.subject_id)
    return entries


def load_metadata_csv(path: str | Path) -> dict[str, SubjectMetadata]:
    path = Path(path)
    try:
        text = path.read_text()
    except FileNotFoundError:
        raise DataError(f"metadata table not found: {path}") from None
    return {m.subject_id: m for m in parse_metadata_table(text)}


def _read(path: Path, what: str) -> bytes:
    try:
        return path.read_bytes()
    except FileNotFoundError:
        raise DataError(f"{what} file not found: {path}") from None


def ingest_subject(entry: CohortEntry, alias_table=DEFAULT_ALIASES,
                   common_rate_hz: float = 25.0,
                   meta: SubjectMetadata | None = None) -> SubjectEpochs:
    """Parse, condition and label one recording.

    Raises ExcludedSubjectError when a required channel is missing and
    DataError for anything structurally wrong.
    """
    rec = parse_edf(_read(entry.edf_path, "EDF"), alias_table,
                    required_roles=REQUIRED_ROLES, subject_id=entry.subject_id)
    ann = parse_annotation_xml(_read(entry.annotation_path, "annotation"),
                               rec.duration_s)
    epochs = segment_epochs(rec, common_rate_hz)
    labels = harmonize_labels(ann.stages)
    if epochs.shape[0] != len(labels):
        raise DataError(f"{entry.subject_id}: {epochs.shape[0]} signal epochs for "
                        f"{len(labels)} stage labels")
    events = build_event_vectors(ann.events, len(labels))
    return SubjectEpochs(subject_id=entry.subject_id, epochs=epochs, labels=labels,
                         events=events, clinical=clinical_raw_vector(meta))


def _ingest_task(task):
    entry, alias_table, rate, meta = task
    try:
        return "ok", ingest_subject(entry, alias_table, rate, meta)
    except ExcludedSubjectError as exc:
        return "excluded", (entry.subject_id, str(exc))


def ingest_cohort(entries: list[CohortEntry], alias_table=DEFAULT_ALIASES,
                  common_rate_hz: float = 25.0,
                  metadata: dict[str, SubjectMetadata] | None = None,
                  jobs: int = 1, log=None):
    """Ingest every entry; returns (subjects, [(id, exclusion reason)]).

    With jobs > 1 the per-subject work fans out over processes; results
    keep the entry order either way.
    """
    metadata = metadata or {}
    tasks = [(e, alias_table, common_rate_hz, metadata.get(e.subject_id))
             for e in entries]
    if jobs > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            results = list(pool.map(_ingest_task, tasks))
    else:
        results = [_ingest_task(t) for t in tasks]

    subjects: list[SubjectEpochs] = []
    excluded: list[tuple[str, str]] = []
    for status, payload in results:
        if status == "ok":
            subjects.append(payload)
            if log:
                log(f"ingested {payload.subject_id}: {payload.n_epochs} epochs")
        else:
            excluded.append(payload)
            if log:
                log(f"excluded {payload[0]}: {payload[1]}")
    if not subjects:
        raise DataError("every subject in the cohort was excluded")
    return subjects, excluded


def cohort_inventory(cohort_dir: str | Path, alias_extensions: dict | None = None,
                     metadata_csv: str | Path | None = None) -> dict:
    """Catalog a cohort directory without conditioning any signals.

    Parses each recording and its annotations, resolves channel roles,
    and reports per-subject epoch/stage/event counts plus the subjects
    that ingestion would exclude and why.
    """
    entries = discover_cohort(cohort_dir)
    alias_table = extend_aliases(alias_extensions)
    metadata: dict[str, SubjectMetadata] = {}
    meta_path = Path(metadata_csv) if metadata_csv is not None \
        else Path(cohort_dir) / "metadata.csv"
    if meta_path.is_file():
        metadata = load_metadata_csv(meta_path)

    subjects, excluded = [], []
    for entry in entries:
        try:
            rec = parse_edf(_read(entry.edf_path, "EDF"), alias_table,
                            required_roles=REQUIRED_ROLES, subject_id=entry.subject_id)
        except ExcludedSubjectError as exc:
            excluded.append({"id": entry.subject_id, "reason": str(exc)})
            continue
        ann = parse_annotation_xml(_read(entry.annotation_path, "annotation"),
                                   rec.duration_s)
        labels = harmonize_labels(ann.stages)
        subjects.append({
            "id": entry.subject_id,
            "edf": entry.edf_path.name,
            "annotations": entry.annotation_path.name,
            "duration_s": rec.duration_s,
            "n_epochs": len(labels),
            "scored_epochs": int((labels != IGNORE_LABEL).sum()),
            "n_events": len(ann.events),
            "unknown_concepts": ann.unknown_concepts,
            "channels": {ch.role: ch.label for ch in rec.channels if ch.role},
            "has_metadata": entry.subject_id in metadata,
        })
    if not subjects:
        raise DataError("every subject in the cohort was excluded")
    return {
        "cohort_dir": str(cohort_dir),
        "n_subjects": len(subjects),
        "n_excluded": len(excluded),
        "subjects": subjects,
        "excluded": excluded,
    }
