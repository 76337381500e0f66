"""Source-table formats, CSV ingestion, cohort selection and 24 h windowing.

Event tables are streamed row by row; the admissions and icustays tables are
small enough to hold in memory.
"""

from __future__ import annotations

import csv
import enum
import logging
import re
from collections import Counter, defaultdict
from dataclasses import dataclass, field
from datetime import datetime
from pathlib import Path
from typing import Iterable, Iterator, Mapping, MutableMapping, Sequence

import numpy as np

from .errors import EmptyCohort, MissingColumn, NoTimestamp

log = logging.getLogger(__name__)

WINDOW_SECONDS = 24 * 3600
MIN_STAY_DAYS = 1.0
LOS_THRESHOLD_DAYS = 7.0

_EPOCH = datetime(1970, 1, 1)
_TS_RE = re.compile(r"\d{4}-\d{2}-\d{2}(?: \d{2}:\d{2}:\d{2})?")


class SourceKind(enum.Enum):
    CHARTEVENTS = "chartevents"
    INPUTEVENTS = "inputevents"
    OUTPUTEVENTS = "outputevents"
    LABEVENTS = "labevents"
    MICROBIOLOGYEVENTS = "microbiologyevents"
    PROCEDUREEVENTS = "procedureevents"
    NOTEEVENTS = "noteevents"
    PRESCRIPTIONS = "prescriptions"

    @classmethod
    def parse(cls, name: str) -> "SourceKind":
        try:
            return cls(name.strip().lower())
        except ValueError:
            raise ValueError(f"unknown source '{name}'; expected one of {[s.value for s in cls]}") from None


ALL_SOURCES: tuple[SourceKind, ...] = tuple(SourceKind)


@dataclass(frozen=True)
class TableSpec:
    required: tuple[str, ...]
    store_col: str | None
    chart_col: str | None
    start_col: str | None
    structured: tuple[str, ...]
    text: tuple[str, ...] = ()
    # columns picked up as text when present, never required
    optional_text: tuple[str, ...] = ()


_ID_COLS = ("SUBJECT_ID", "HADM_ID")

TABLE_SPECS: dict[SourceKind, TableSpec] = {
    SourceKind.CHARTEVENTS: TableSpec(
        _ID_COLS + ("ITEMID", "CHARTTIME", "STORETIME", "VALUE", "VALUEUOM"),
        "STORETIME", "CHARTTIME", None,
        ("ITEMID", "VALUE", "VALUEUOM"),
        optional_text=("LABEL",),
    ),
    SourceKind.LABEVENTS: TableSpec(
        _ID_COLS + ("ITEMID", "CHARTTIME", "VALUE", "VALUEUOM", "FLAG"),
        None, "CHARTTIME", None,
        ("ITEMID", "VALUE", "VALUEUOM"),
        optional_text=("LABEL",),
    ),
    SourceKind.INPUTEVENTS: TableSpec(
        _ID_COLS + ("ITEMID", "STORETIME", "AMOUNT", "AMOUNTUOM"),
        "STORETIME", None, None,
        ("ITEMID", "AMOUNT", "AMOUNTUOM"),
        optional_text=("LABEL",),
    ),
    SourceKind.OUTPUTEVENTS: TableSpec(
        _ID_COLS + ("ITEMID", "STORETIME", "VALUE", "VALUEUOM"),
        "STORETIME", None, None,
        ("ITEMID", "VALUE", "VALUEUOM"),
        optional_text=("LABEL",),
    ),
    SourceKind.MICROBIOLOGYEVENTS: TableSpec(
        _ID_COLS + ("CHARTTIME", "SPEC_ITEMID", "ORG_ITEMID", "INTERPRETATION"),
        None, "CHARTTIME", None,
        ("SPEC_ITEMID", "ORG_ITEMID", "INTERPRETATION"),
    ),
    SourceKind.PROCEDUREEVENTS: TableSpec(
        _ID_COLS + ("ITEMID", "STORETIME", "VALUE", "VALUEUOM"),
        "STORETIME", None, None,
        ("ITEMID", "VALUE", "VALUEUOM"),
        optional_text=("LABEL",),
    ),
    SourceKind.NOTEEVENTS: TableSpec(
        _ID_COLS + ("STORETIME", "CATEGORY", "DESCRIPTION", "TEXT"),
        "STORETIME", None, None,
        ("CATEGORY", "DESCRIPTION"),
        text=("TEXT",),
    ),
    SourceKind.PRESCRIPTIONS: TableSpec(
        _ID_COLS + ("STARTDATE", "DRUG", "DOSE_VAL_RX", "DOSE_UNIT_RX"),
        None, None, "STARTDATE",
        ("DRUG", "DOSE_VAL_RX", "DOSE_UNIT_RX"),
    ),
}

ADMISSIONS_COLUMNS = ("SUBJECT_ID", "HADM_ID", "HOSPITAL_EXPIRE_FLAG")
ICUSTAYS_COLUMNS = ("SUBJECT_ID", "HADM_ID", "ICUSTAY_ID", "INTIME", "OUTTIME")


@dataclass(frozen=True, slots=True)
class EventRecord:
    patient_id: int
    admission_id: int
    source: SourceKind
    store_time: float | None = None
    chart_time: float | None = None
    start_date: float | None = None
    structured_fields: tuple[tuple[str, str | None], ...] = ()
    text_fields: tuple[tuple[str, str], ...] = ()

    def to_json(self) -> dict:
        return {
            "subject_id": self.patient_id,
            "hadm_id": self.admission_id,
            "source": self.source.value,
            "store_time": self.store_time,
            "chart_time": self.chart_time,
            "start_date": self.start_date,
            "structured": [list(kv) for kv in self.structured_fields],
            "text": [list(kv) for kv in self.text_fields],
        }

    @classmethod
    def from_json(cls, obj: Mapping) -> "EventRecord":
        return cls(
            patient_id=int(obj["subject_id"]),
            admission_id=int(obj["hadm_id"]),
            source=SourceKind(obj["source"]),
            store_time=obj.get("store_time"),
            chart_time=obj.get("chart_time"),
            start_date=obj.get("start_date"),
            structured_fields=tuple((k, v) for k, v in obj.get("structured", ())),
            text_fields=tuple((k, v) for k, v in obj.get("text", ())),
        )


@dataclass(frozen=True, slots=True)
class CohortEntry:
    admission_id: int
    patient_id: int
    icu_intime: float
    icu_outtime: float
    hospital_death: bool
    icu_los_days: float

    def to_json(self) -> dict:
        return {
            "hadm_id": self.admission_id,
            "subject_id": self.patient_id,
            "intime": self.icu_intime,
            "outtime": self.icu_outtime,
            "hospital_death": int(self.hospital_death),
            "icu_los_days": self.icu_los_days,
        }

    @classmethod
    def from_json(cls, obj: Mapping) -> "CohortEntry":
        return cls(
            admission_id=int(obj["hadm_id"]),
            patient_id=int(obj["subject_id"]),
            icu_intime=float(obj["intime"]),
            icu_outtime=float(obj["outtime"]),
            hospital_death=bool(obj["hospital_death"]),
            icu_los_days=float(obj["icu_los_days"]),
        )


@dataclass(frozen=True)
class IcuStay:
    patient_id: int
    admission_id: int
    icustay_id: int
    intime: float
    outtime: float


class UnparsableTimestamp(ValueError):
    pass


def parse_timestamp(text: str | None) -> float | None:
    """Parse ``YYYY-MM-DD HH:MM:SS`` or ``YYYY-MM-DD`` (midnight) to epoch seconds.

    Empty input gives ``None``. No timezone handling: all timestamps share
    one implicit clock.
    """
    if text is None:
        return None
    text = text.strip()
    if not text:
        return None
    if not _TS_RE.fullmatch(text):
        raise UnparsableTimestamp(text)
    try:
        dt = datetime.fromisoformat(text)
    except ValueError:
        raise UnparsableTimestamp(text) from None
    return (dt - _EPOCH).total_seconds()


def format_timestamp(seconds: float) -> str:
    from datetime import timedelta

    return (_EPOCH + timedelta(seconds=seconds)).strftime("%Y-%m-%d %H:%M:%S")


def _parse_id(text: str) -> int | None:
    text = text.strip()
    if not text:
        return None
    try:
        value = int(text)
    except ValueError:
        try:
            f = float(text)
        except ValueError:
            return None
        if not f.is_integer():
            return None
        value = int(f)
    return value if value > 0 else None


def _open_checked(path: Path, required: Sequence[str], source_name: str):
    fh = open(path, newline="", encoding="utf-8")
    reader = csv.reader(fh)
    try:
        header = next(reader)
    except StopIteration:
        fh.close()
        raise MissingColumn(path, source_name, required) from None
    header = [h.strip().upper() for h in header]
    missing = [c for c in required if c not in header]
    if missing:
        fh.close()
        raise MissingColumn(path, source_name, missing)
    return fh, reader, header


class TableStream:
    """Lazy iterator of :class:`EventRecord` over one event-table CSV.

    The header is validated at construction. Counters are filled while
    iterating: ``rows == emitted + malformed + bad_timestamp + no_timestamp``.
    """

    def __init__(self, path, source: SourceKind):
        self.path = Path(path)
        self.source = source
        self.spec = TABLE_SPECS[source]
        fh, _, header = _open_checked(self.path, self.spec.required, source.value)
        fh.close()
        self.header = header
        self.rows = 0
        self.emitted = 0
        self.malformed = 0
        self.bad_timestamp = 0
        self.no_timestamp = 0

    @property
    def skipped(self) -> int:
        return self.malformed + self.bad_timestamp + self.no_timestamp

    def counts(self) -> dict[str, int]:
        return {
            "rows": self.rows,
            "emitted": self.emitted,
            "malformed": self.malformed,
            "bad_timestamp": self.bad_timestamp,
            "no_timestamp": self.no_timestamp,
        }

    def __iter__(self) -> Iterator[EventRecord]:
        spec = self.spec
        source = self.source
        fh, reader, header = _open_checked(self.path, spec.required, source.value)
        col = {name: i for i, name in enumerate(header)}
        width = len(header)
        i_subj, i_hadm = col["SUBJECT_ID"], col["HADM_ID"]
        i_store = col[spec.store_col] if spec.store_col else None
        i_chart = col[spec.chart_col] if spec.chart_col else None
        i_start = col[spec.start_col] if spec.start_col else None
        structured = [(name, col[name]) for name in spec.structured]
        text = [(name, col[name]) for name in spec.text]
        text += [(name, col[name]) for name in spec.optional_text if name in col]
        with fh:
            for row in reader:
                self.rows += 1
                if len(row) != width:
                    self.malformed += 1
                    continue
                subj = _parse_id(row[i_subj])
                hadm = _parse_id(row[i_hadm])
                if subj is None or hadm is None:
                    self.malformed += 1
                    continue
                try:
                    store = parse_timestamp(row[i_store]) if i_store is not None else None
                    chart = parse_timestamp(row[i_chart]) if i_chart is not None else None
                    start = parse_timestamp(row[i_start]) if i_start is not None else None
                except UnparsableTimestamp:
                    self.bad_timestamp += 1
                    continue
                if store is None and chart is None and start is None:
                    self.no_timestamp += 1
                    continue
                self.emitted += 1
                yield EventRecord(
                    patient_id=subj,
                    admission_id=hadm,
                    source=source,
                    store_time=store,
                    chart_time=chart,
                    start_date=start,
                    structured_fields=tuple((name, row[i] if row[i] != "" else None) for name, i in structured),
                    text_fields=tuple((name, row[i]) for name, i in text if row[i] != ""),
                )
        log.debug("%s: %s", self.path.name, self.counts())


def load_table(path, source: SourceKind) -> TableStream:
    """Open an event table for streaming. Raises MissingColumn eagerly."""
    return TableStream(path, source)


@dataclass(frozen=True)
class AdmissionRow:
    admission_id: int
    patient_id: int
    hospital_death: bool


def load_admissions(path) -> dict[int, AdmissionRow]:
    path = Path(path)
    fh, reader, header = _open_checked(path, ADMISSIONS_COLUMNS, "admissions")
    col = {name: i for i, name in enumerate(header)}
    out: dict[int, AdmissionRow] = {}
    skipped = 0
    with fh:
        for row in reader:
            if len(row) != len(header):
                skipped += 1
                continue
            subj, hadm = _parse_id(row[col["SUBJECT_ID"]]), _parse_id(row[col["HADM_ID"]])
            flag = row[col["HOSPITAL_EXPIRE_FLAG"]].strip()
            if subj is None or hadm is None or flag not in ("0", "1"):
                skipped += 1
                continue
            out[hadm] = AdmissionRow(hadm, subj, flag == "1")
    if skipped:
        log.warning("%s: skipped %d malformed admission rows", path.name, skipped)
    return out


def load_icustays(path) -> list[IcuStay]:
    path = Path(path)
    fh, reader, header = _open_checked(path, ICUSTAYS_COLUMNS, "icustays")
    col = {name: i for i, name in enumerate(header)}
    out: list[IcuStay] = []
    skipped = 0
    with fh:
        for row in reader:
            if len(row) != len(header):
                skipped += 1
                continue
            subj, hadm = _parse_id(row[col["SUBJECT_ID"]]), _parse_id(row[col["HADM_ID"]])
            stay = _parse_id(row[col["ICUSTAY_ID"]])
            try:
                intime = parse_timestamp(row[col["INTIME"]])
                outtime = parse_timestamp(row[col["OUTTIME"]])
            except UnparsableTimestamp:
                intime = outtime = None
            if None in (subj, hadm, stay, intime, outtime):
                skipped += 1
                continue
            out.append(IcuStay(subj, hadm, stay, intime, outtime))
    if skipped:
        log.warning("%s: skipped %d malformed icustay rows", path.name, skipped)
    return out


def select_cohort(
    admissions: Mapping[int, AdmissionRow],
    icustays: Iterable[IcuStay],
    stats: MutableMapping[str, int] | None = None,
) -> list[CohortEntry]:
    """Admissions with exactly one ICU stay lasting at least 24 hours.

    Stays whose admission is unknown are excluded and counted as orphans.
    Output is sorted by admission id.
    """
    counts = Counter()
    by_hadm: dict[int, list[IcuStay]] = defaultdict(list)
    for stay in icustays:
        if stay.admission_id not in admissions:
            counts["orphan_stays"] += 1
            continue
        by_hadm[stay.admission_id].append(stay)

    cohort: list[CohortEntry] = []
    for hadm in sorted(admissions):
        stays = by_hadm.get(hadm, [])
        if len(stays) == 0:
            counts["no_stay"] += 1
            continue
        if len(stays) > 1:
            counts["multi_stay"] += 1
            continue
        stay = stays[0]
        if stay.outtime <= stay.intime:
            counts["invalid_stay"] += 1
            continue
        los = (stay.outtime - stay.intime) / 86400.0
        if los < MIN_STAY_DAYS:
            counts["short_stay"] += 1
            continue
        adm = admissions[hadm]
        cohort.append(
            CohortEntry(
                admission_id=hadm,
                patient_id=adm.patient_id,
                icu_intime=stay.intime,
                icu_outtime=stay.outtime,
                hospital_death=adm.hospital_death,
                icu_los_days=los,
            )
        )
    counts["selected"] = len(cohort)
    if counts["orphan_stays"]:
        log.warning("excluded %d icustays referencing unknown admissions", counts["orphan_stays"])
    if stats is not None:
        stats.update(counts)
    return cohort


def effective_timestamp(e: EventRecord) -> float:
    """STORETIME when recorded, else CHARTTIME, else STARTDATE."""
    if e.store_time is not None:
        return e.store_time
    if e.chart_time is not None:
        return e.chart_time
    if e.start_date is not None:
        return e.start_date
    raise NoTimestamp(f"event for admission {e.admission_id} ({e.source.value}) has no timestamp")


def window_events(
    events: Iterable[EventRecord],
    cohort: Iterable[CohortEntry],
    stats: MutableMapping[str, int] | None = None,
) -> Iterator[EventRecord]:
    """Keep cohort events with ``intime <= t < intime + 24h``."""
    intime = {c.admission_id: c.icu_intime for c in cohort}
    kept = not_cohort = outside = 0
    try:
        for e in events:
            start = intime.get(e.admission_id)
            if start is None:
                not_cohort += 1
                continue
            t = effective_timestamp(e)
            if start <= t < start + WINDOW_SECONDS:
                kept += 1
                yield e
            else:
                outside += 1
    finally:
        if stats is not None:
            stats["kept"] = stats.get("kept", 0) + kept
            stats["not_in_cohort"] = stats.get("not_in_cohort", 0) + not_cohort
            stats["outside_window"] = stats.get("outside_window", 0) + outside


def _quantiles(values) -> tuple[float, float, float]:
    q1, med, q3 = np.percentile(np.asarray(values, dtype=float), [25, 50, 75])
    return float(q1), float(med), float(q3)


def cohort_stats(cohort: Sequence[CohortEntry], documents: Sequence | None = None) -> dict:
    """Descriptive summary of a cohort and, optionally, its tokenized documents.

    Quartiles use linear interpolation between order statistics.
    """
    if not cohort:
        raise EmptyCohort("cohort is empty")
    n = len(cohort)
    los = [c.icu_los_days for c in cohort]
    q1, med, q3 = _quantiles(los)
    out = {
        "n_admissions": n,
        "n_patients": len({c.patient_id for c in cohort}),
        "ihm_rate": sum(c.hospital_death for c in cohort) / n,
        "los_ge7_rate": sum(c.icu_los_days >= LOS_THRESHOLD_DAYS for c in cohort) / n,
        "icu_los_days": {"median": med, "q1": q1, "q3": q3},
    }
    events = {s.value: 0 for s in ALL_SOURCES}
    tokens = {s.value: 0 for s in ALL_SOURCES}
    for doc in documents or ():
        for src, toks in doc.tokens_by_source.items():
            tokens[src.value] += len(toks)
        for src, k in doc.event_counts.items():
            events[src.value] += k
    out["events_per_source"] = events
    out["tokens_per_source"] = tokens
    return out
