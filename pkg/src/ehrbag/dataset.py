"""Patient-disjoint splits, outcome labels and mini-batching."""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from fractions import Fraction
from typing import Iterable, Mapping, Sequence, TypeVar

import numpy as np

from .errors import EmptyDataset, TooFewPatients
from .io import atomic_open
from .schema import LOS_THRESHOLD_DAYS, CohortEntry, SourceKind

TEST_FRACTION = Fraction(15, 100)
VAL_FRACTION = Fraction(15, 100)
DEFAULT_BATCH_SIZE = 256

T = TypeVar("T")


def label_outcomes(entry: CohortEntry) -> tuple[bool, bool]:
    """(in-hospital death, ICU stay >= 7 days)."""
    return bool(entry.hospital_death), entry.icu_los_days >= LOS_THRESHOLD_DAYS


def _round_half_up(x: Fraction) -> int:
    return math.floor(x + Fraction(1, 2))


def split_sizes(n: int) -> tuple[int, int, int]:
    """(train, val, test) patient counts for ``n`` patients."""
    if n < 3:
        raise TooFewPatients(f"need at least 3 patients to populate train/val/test, got {n}")
    n_test = max(1, _round_half_up(TEST_FRACTION * n))
    rest = n - n_test
    n_val = max(1, _round_half_up(VAL_FRACTION * rest))
    return rest - n_val, n_val, n_test


@dataclass
class SplitAssignment:
    seed: int
    train: list[int]
    val: list[int]
    test: list[int]

    def of(self, patient_id: int) -> str:
        return self.lookup[patient_id]

    @property
    def lookup(self) -> dict[int, str]:
        out = {p: "train" for p in self.train}
        out.update({p: "val" for p in self.val})
        out.update({p: "test" for p in self.test})
        return out

    def partition(self, items: Iterable[T], patient_of=lambda x: x.patient_id) -> dict[str, list[T]]:
        """Route items (documents, cohort entries) to their patient's split, keeping order."""
        lookup = self.lookup
        out: dict[str, list[T]] = {"train": [], "val": [], "test": []}
        for item in items:
            out[lookup[patient_of(item)]].append(item)
        return out

    def to_json(self) -> dict:
        return {"seed": self.seed, "train": self.train, "val": self.val, "test": self.test}

    @classmethod
    def from_json(cls, obj: Mapping) -> "SplitAssignment":
        split = cls(int(obj["seed"]), list(obj["train"]), list(obj["val"]), list(obj["test"]))
        split.check_disjoint()
        return split

    def check_disjoint(self) -> None:
        a, b, c = set(self.train), set(self.val), set(self.test)
        if a & b or a & c or b & c:
            raise ValueError("split assignment shares patients across splits")


def split_patients(patient_ids: Sequence[int], seed: int) -> SplitAssignment:
    """Shuffle patients and carve off test, then validation, from the tail.

    The input is sorted first, so the result depends only on the id set and
    the seed.
    """
    ids = sorted(set(int(p) for p in patient_ids))
    if len(ids) != len(patient_ids):
        raise ValueError("patient ids must be unique")
    n_train, n_val, n_test = split_sizes(len(ids))
    order = np.random.default_rng(seed).permutation(len(ids))
    shuffled = [ids[i] for i in order]
    return SplitAssignment(
        seed=seed,
        train=shuffled[:n_train],
        val=shuffled[n_train : n_train + n_val],
        test=shuffled[n_train + n_val :],
    )


@dataclass
class EncodedBatch:
    ids: dict[SourceKind, list[np.ndarray]]
    labels: np.ndarray
    admission_ids: list[int]

    def __len__(self) -> int:
        return len(self.admission_ids)


def collate(docs: Sequence, label: str | None = "ihm", sources: Sequence[SourceKind] | None = None) -> EncodedBatch:
    if not docs:
        raise EmptyDataset("cannot build a batch from zero documents")
    if sources is None:
        sources = list(docs[0].ids)
    ids = {s: [d.ids.get(s, _EMPTY) for d in docs] for s in sources}
    if label is None:
        labels = np.zeros(len(docs))
    else:
        labels = np.array([float(d.label(label)) for d in docs])
    return EncodedBatch(ids, labels, [d.admission_id for d in docs])


_EMPTY = np.zeros(0, dtype=np.int64)


def make_batches(
    docs: Sequence,
    batch_size: int = DEFAULT_BATCH_SIZE,
    shuffle_seed: int | None = None,
    label: str | None = "ihm",
    sources: Sequence[SourceKind] | None = None,
) -> list[EncodedBatch]:
    if not docs:
        raise EmptyDataset("no documents to batch")
    if batch_size < 1:
        raise ValueError("batch_size must be >= 1")
    order = np.arange(len(docs))
    if shuffle_seed is not None:
        order = np.random.default_rng(shuffle_seed).permutation(len(docs))
    return [
        collate([docs[i] for i in order[k : k + batch_size]], label, sources)
        for k in range(0, len(docs), batch_size)
    ]


def save_split(split: SplitAssignment, path) -> None:
    with atomic_open(path) as fh:
        json.dump(split.to_json(), fh)


def load_split(path) -> SplitAssignment:
    with open(path, encoding="utf-8") as fh:
        return SplitAssignment.from_json(json.load(fh))
