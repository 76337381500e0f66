"""Directory-level glue: raw CSV directory -> cohort -> windowed events -> documents."""

from __future__ import annotations

import json
import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

from .io import atomic_open, write_json
from .schema import (
    ALL_SOURCES,
    CohortEntry,
    EventRecord,
    SourceKind,
    load_admissions,
    load_icustays,
    load_table,
    select_cohort,
    window_events,
)
from .tokenizer import AdmissionDocument, build_documents

log = logging.getLogger(__name__)


@dataclass
class IngestResult:
    cohort: list[CohortEntry]
    events: list[EventRecord]
    cohort_counts: dict[str, int] = field(default_factory=dict)
    table_counts: dict[str, dict[str, int]] = field(default_factory=dict)


def _table_path(data_dir: Path, source: SourceKind) -> Path:
    return data_dir / f"{source.value}.csv"


def ingest(data_dir, sources: Sequence[SourceKind] = ALL_SOURCES, threads: int = 1) -> IngestResult:
    """Select the cohort and keep each source's events from the first 24 ICU hours.

    Every table header is validated before any row is read. A missing
    table file is treated as an empty source.
    """
    data_dir = Path(data_dir)
    admissions = load_admissions(data_dir / "admissions.csv")
    stays = load_icustays(data_dir / "icustays.csv")
    cohort_counts: dict[str, int] = {}
    cohort = select_cohort(admissions, stays, cohort_counts)

    streams = {}
    for s in sources:
        path = _table_path(data_dir, s)
        if path.exists():
            streams[s] = load_table(path, s)
        else:
            log.warning("%s not found; source %s will be empty", path, s.value)

    def read(s: SourceKind):
        counts: dict[str, int] = {}
        kept = list(window_events(streams[s], cohort, counts))
        counts.update(streams[s].counts())
        return s, kept, counts

    order = [s for s in sources if s in streams]
    if threads > 1:
        with ThreadPoolExecutor(threads) as pool:
            results = list(pool.map(read, order))
    else:
        results = [read(s) for s in order]

    events: list[EventRecord] = []
    table_counts = {}
    for s, kept, counts in results:
        events.extend(kept)
        table_counts[s.value] = counts
    return IngestResult(cohort, events, cohort_counts, table_counts)


def tokenize_directory(
    data_dir, sources: Sequence[SourceKind] = ALL_SOURCES, include_label_text: bool = True, threads: int = 1
) -> tuple[list[AdmissionDocument], IngestResult]:
    result = ingest(data_dir, sources, threads)
    docs = build_documents(result.events, result.cohort, sources, include_label_text)
    return docs, result


COHORT_FILE = "cohort.jsonl"
EVENTS_FILE = "events.jsonl"
COUNTS_FILE = "ingest_counts.json"


def _write_jsonl(path: Path, items) -> None:
    with atomic_open(path) as fh:
        for item in items:
            fh.write(json.dumps(item.to_json(), separators=(",", ":")) + "\n")


def _read_jsonl(path: Path, cls) -> list:
    with open(path, encoding="utf-8") as fh:
        return [cls.from_json(json.loads(line)) for line in fh if line.strip()]


def write_ingest(result: IngestResult, out_dir) -> list[Path]:
    out = Path(out_dir)
    _write_jsonl(out / COHORT_FILE, result.cohort)
    _write_jsonl(out / EVENTS_FILE, result.events)
    write_json(out / COUNTS_FILE, {"cohort": result.cohort_counts, "tables": result.table_counts})
    return [out / COHORT_FILE, out / EVENTS_FILE, out / COUNTS_FILE]


def is_ingest_dir(path) -> bool:
    return (Path(path) / COHORT_FILE).is_file()


def read_ingest(in_dir) -> IngestResult:
    d = Path(in_dir)
    cohort = _read_jsonl(d / COHORT_FILE, CohortEntry)
    events = _read_jsonl(d / EVENTS_FILE, EventRecord) if (d / EVENTS_FILE).exists() else []
    counts = {}
    if (d / COUNTS_FILE).exists():
        with open(d / COUNTS_FILE, encoding="utf-8") as fh:
            counts = json.load(fh)
    return IngestResult(cohort, events, counts.get("cohort", {}), counts.get("tables", {}))


def load_cohort(data_dir) -> list[CohortEntry]:
    """Cohort from an ingest directory, or selected afresh from raw admissions/ICU stay tables."""
    d = Path(data_dir)
    if is_ingest_dir(d):
        return _read_jsonl(d / COHORT_FILE, CohortEntry)
    return select_cohort(load_admissions(d / "admissions.csv"), load_icustays(d / "icustays.csv"))


def documents_from(path, sources: Sequence[SourceKind] = ALL_SOURCES, include_label_text: bool = True, threads: int = 1):
    """Documents from either a raw CSV directory or an ingest directory."""
    if is_ingest_dir(path):
        result = read_ingest(path)
        return build_documents(result.events, result.cohort, sources, include_label_text), result
    return tokenize_directory(path, sources, include_label_text, threads)
