"""Per-source vocabularies and integer encoding."""

from __future__ import annotations

import hashlib
import json
from collections import Counter
from dataclasses import dataclass, field
from typing import Iterable, Mapping, Sequence

import numpy as np

from .io import atomic_open
from .schema import SourceKind
from .tokenizer import AdmissionDocument

PAD_ID = 0
OOV_ID = 1
FIRST_ID = 2


@dataclass
class Vocabulary:
    source: SourceKind
    token_to_id: dict[str, int]
    frequencies: dict[str, int]
    min_count: int = 2

    oov_id = OOV_ID
    pad_id = PAD_ID

    def __post_init__(self):
        self._id_to_token = {i: t for t, i in self.token_to_id.items()}

    def __len__(self) -> int:
        return len(self.token_to_id)

    @property
    def table_size(self) -> int:
        """Rows needed in an embedding table: vocabulary plus pad and OOV."""
        return len(self.token_to_id) + FIRST_ID

    def lookup(self, token: str) -> int:
        return self.token_to_id.get(token, OOV_ID)

    def decode(self, idx: int) -> str | None:
        return self._id_to_token.get(idx)

    def encode_tokens(self, tokens: Sequence[str]) -> np.ndarray:
        get = self.token_to_id.get
        return np.fromiter((get(t, OOV_ID) for t in tokens), dtype=np.int64, count=len(tokens))

    def to_json(self) -> dict:
        entries = sorted(self.token_to_id.items(), key=lambda kv: kv[1])
        return {
            "source": self.source.value,
            "min_count": self.min_count,
            "tokens": [[t, i, self.frequencies[t]] for t, i in entries],
        }

    @classmethod
    def from_json(cls, obj: Mapping) -> "Vocabulary":
        tokens = obj["tokens"]
        return cls(
            source=SourceKind(obj["source"]),
            token_to_id={t: int(i) for t, i, _ in tokens},
            frequencies={t: int(f) for t, _, f in tokens},
            min_count=int(obj.get("min_count", 2)),
        )

    def digest(self) -> str:
        blob = json.dumps(self.to_json(), sort_keys=True, separators=(",", ":")).encode()
        return hashlib.sha256(blob).hexdigest()


def build_vocabulary(
    corpus: Iterable[AdmissionDocument], source: SourceKind, min_count: int = 2
) -> Vocabulary:
    """Count tokens of one source; tokens seen at least ``min_count`` times get ids.

    Ids start at 2 and follow descending frequency, ties broken
    lexicographically. Rarer tokens stay in ``frequencies`` but encode to OOV.
    The corpus must be the training split only.
    """
    counts: Counter[str] = Counter()
    for doc in corpus:
        counts.update(doc.tokens_by_source.get(source, ()))
    kept = sorted((t for t, c in counts.items() if c >= min_count), key=lambda t: (-counts[t], t))
    token_to_id = {t: FIRST_ID + i for i, t in enumerate(kept)}
    return Vocabulary(source, token_to_id, dict(counts), min_count)


def build_vocabularies(
    corpus: Sequence[AdmissionDocument], sources: Sequence[SourceKind], min_count: int = 2
) -> dict[SourceKind, Vocabulary]:
    return {s: build_vocabulary(corpus, s, min_count) for s in sources}


@dataclass
class EncodedDocument:
    admission_id: int
    patient_id: int
    ids: dict[SourceKind, np.ndarray]
    label_ihm: bool | None = None
    label_los: bool | None = None

    def label(self, name: str) -> bool:
        if name == "ihm":
            value = self.label_ihm
        elif name == "los":
            value = self.label_los
        else:
            raise KeyError(name)
        if value is None:
            raise ValueError(f"admission {self.admission_id} has no '{name}' label")
        return value


def encode(doc: AdmissionDocument, vocabs: Mapping[SourceKind, Vocabulary]) -> EncodedDocument:
    ids = {s: v.encode_tokens(doc.tokens_by_source.get(s, ())) for s, v in vocabs.items()}
    return EncodedDocument(doc.admission_id, doc.patient_id, ids, doc.label_ihm, doc.label_los)


def encode_all(docs: Iterable[AdmissionDocument], vocabs: Mapping[SourceKind, Vocabulary]) -> list[EncodedDocument]:
    return [encode(d, vocabs) for d in docs]


def save_vocabularies(vocabs: Mapping[SourceKind, Vocabulary], path) -> None:
    with atomic_open(path) as fh:
        json.dump([v.to_json() for v in vocabs.values()], fh, separators=(",", ":"))


def load_vocabularies(path) -> dict[SourceKind, Vocabulary]:
    with open(path, encoding="utf-8") as fh:
        data = json.load(fh)
    if isinstance(data, dict):
        data = [data]
    vocabs = [Vocabulary.from_json(obj) for obj in data]
    return {v.source: v for v in vocabs}
