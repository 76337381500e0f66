"""Event -> token conversion and per-admission document assembly."""

from __future__ import annotations

import json
from collections import defaultdict
from dataclasses import dataclass, field
from typing import Iterable, Mapping, Sequence

from .schema import ALL_SOURCES, CohortEntry, EventRecord, SourceKind, effective_timestamp

MISSING = "NaN"
JOIN = "-"
# free-text columns only tokenized when include_label_text is on
LABEL_FIELDS = frozenset({"LABEL"})


def tokenize_text(text: str) -> list[str]:
    """Split on runs of whitespace. Case and punctuation are kept."""
    return text.split()


def _clean(value: str | None) -> str:
    if value is None or value.strip() == "":
        return MISSING
    # keep the joined token a single whitespace-free unit
    return "_".join(value.split())


def tokenize_structured(e: EventRecord, include_label_text: bool = True) -> list[str]:
    """One ``code-value-unit`` token, then any free-text field tokens.

    >>> from ehrbag.schema import SourceKind
    >>> e = EventRecord(3, 145834, SourceKind.CHARTEVENTS, store_time=0.0,
    ...     structured_fields=(("ITEMID", "211"), ("VALUE", "104"), ("VALUEUOM", "BPM")))
    >>> tokenize_structured(e)
    ['211-104-BPM']
    """
    tokens = [JOIN.join(_clean(v) for _, v in e.structured_fields)] if e.structured_fields else []
    for name, value in e.text_fields:
        if name in LABEL_FIELDS and not include_label_text:
            continue
        tokens.extend(tokenize_text(value))
    return tokens


@dataclass
class AdmissionDocument:
    admission_id: int
    patient_id: int
    tokens_by_source: dict[SourceKind, list[str]]
    label_ihm: bool | None = None
    label_los: bool | None = None
    event_counts: dict[SourceKind, int] = field(default_factory=dict)

    def n_tokens(self) -> int:
        return sum(len(t) for t in self.tokens_by_source.values())

    def to_json(self) -> dict:
        return {
            "hadm_id": self.admission_id,
            "subject_id": self.patient_id,
            "label_ihm": None if self.label_ihm is None else int(self.label_ihm),
            "label_los": None if self.label_los is None else int(self.label_los),
            "tokens": {s.value: list(t) for s, t in self.tokens_by_source.items()},
            "n_events": {s.value: self.event_counts.get(s, 0) for s in self.tokens_by_source},
        }

    @classmethod
    def from_json(cls, obj: Mapping) -> "AdmissionDocument":
        def _label(v):
            return None if v is None else bool(v)

        tokens = {SourceKind(k): list(v) for k, v in obj["tokens"].items()}
        counts = {SourceKind(k): int(v) for k, v in obj.get("n_events", {}).items()}
        return cls(
            admission_id=int(obj["hadm_id"]),
            patient_id=int(obj["subject_id"]),
            tokens_by_source=tokens,
            label_ihm=_label(obj.get("label_ihm")),
            label_los=_label(obj.get("label_los")),
            event_counts=counts,
        )


def build_documents(
    events: Iterable[EventRecord],
    cohort: Sequence[CohortEntry],
    sources: Sequence[SourceKind] = ALL_SOURCES,
    include_label_text: bool = True,
) -> list[AdmissionDocument]:
    """Merge windowed events into one document per cohort admission.

    Within a source, events are ordered by effective timestamp with arrival
    order breaking ties. Every cohort admission gets a document, even with
    no events. Events outside ``sources`` or the cohort are ignored.
    """
    from .dataset import label_outcomes

    wanted = set(sources)
    members = {c.admission_id for c in cohort}
    buckets: dict[tuple[int, SourceKind], list[tuple[float, int, EventRecord]]] = defaultdict(list)
    for arrival, e in enumerate(events):
        if e.source not in wanted or e.admission_id not in members:
            continue
        buckets[(e.admission_id, e.source)].append((effective_timestamp(e), arrival, e))

    docs = []
    for entry in cohort:
        tokens_by_source: dict[SourceKind, list[str]] = {}
        counts: dict[SourceKind, int] = {}
        for src in sources:
            bucket = buckets.get((entry.admission_id, src), [])
            bucket.sort(key=lambda item: (item[0], item[1]))
            toks: list[str] = []
            for _, _, e in bucket:
                toks.extend(tokenize_structured(e, include_label_text))
            tokens_by_source[src] = toks
            counts[src] = len(bucket)
        ihm, los = label_outcomes(entry)
        docs.append(
            AdmissionDocument(
                admission_id=entry.admission_id,
                patient_id=entry.patient_id,
                tokens_by_source=tokens_by_source,
                label_ihm=ihm,
                label_los=los,
                event_counts=counts,
            )
        )
    return docs


def write_corpus(docs: Iterable[AdmissionDocument], fh) -> int:
    n = 0
    for doc in docs:
        fh.write(json.dumps(doc.to_json(), separators=(",", ":")))
        fh.write("\n")
        n += 1
    return n


def read_corpus(path) -> list[AdmissionDocument]:
    docs = []
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            line = line.strip()
            if line:
                docs.append(AdmissionDocument.from_json(json.loads(line)))
    return docs
