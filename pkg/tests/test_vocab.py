import numpy as np
from hypothesis import given, settings
from hypothesis import strategies as st

from ehrbag.schema import SourceKind
from ehrbag.tokenizer import AdmissionDocument
from ehrbag.vocab import (
    OOV_ID,
    PAD_ID,
    Vocabulary,
    build_vocabulary,
    encode,
    load_vocabularies,
    save_vocabularies,
)

CHART = SourceKind.CHARTEVENTS
NOTE = SourceKind.NOTEEVENTS


def doc(tokens, hadm=1, note=None):
    by = {CHART: list(tokens)}
    if note is not None:
        by[NOTE] = list(note)
    return AdmissionDocument(hadm, hadm, by, False, False)


def test_frequency_then_lexicographic_ids():
    v = build_vocabulary([doc(["a", "b", "a"]), doc(["c", "a", "c"])], CHART)
    assert v.token_to_id == {"a": 2, "c": 3}
    assert v.frequencies == {"a": 3, "b": 1, "c": 2}
    assert v.lookup("b") == OOV_ID
    tie = build_vocabulary([doc(["y", "x", "y", "x"])], CHART)
    assert tie.token_to_id == {"x": 2, "y": 3}


def test_empty_corpus():
    v = build_vocabulary([], CHART)
    assert v.token_to_id == {} and v.table_size == 2
    assert list(v.encode_tokens(["q"])) == [OOV_ID]


def test_encode_examples():
    vocabs = {CHART: build_vocabulary([doc(["a", "a", "b"])], CHART)}
    enc = encode(doc(["a", "b", "a"]), vocabs)
    assert enc.ids[CHART].tolist() == [2, 1, 2]
    assert encode(doc(["z"]), vocabs).ids[CHART].tolist() == [1]
    empty = encode(doc([]), vocabs).ids[CHART]
    assert empty.size == 0 and empty.dtype == np.int64


def test_sources_are_independent():
    docs = [doc(["a", "a"], note=["a"]), doc(["b"], note=["a", "b", "b"])]
    assert build_vocabulary(docs, CHART).token_to_id == {"a": 2}
    assert build_vocabulary(docs, NOTE).token_to_id == {"a": 2, "b": 3}


def test_min_count_override():
    v = build_vocabulary([doc(["a", "b", "b", "c", "c", "c"])], CHART, min_count=3)
    assert v.token_to_id == {"c": 2}


def test_json_format_and_roundtrip(tmp_path):
    v = build_vocabulary([doc(["211-104-BPM"] * 3 + ["x", "x", "solo"])], CHART)
    assert v.to_json() == {"source": "chartevents", "min_count": 2, "tokens": [["211-104-BPM", 2, 3], ["x", 3, 2]]}
    assert Vocabulary.from_json(v.to_json()).token_to_id == v.token_to_id
    save_vocabularies({CHART: v}, tmp_path / "v.json")
    back = load_vocabularies(tmp_path / "v.json")[CHART]
    assert back.digest() == v.digest()


@settings(max_examples=100, deadline=None)
@given(
    st.lists(st.lists(st.sampled_from([f"t{i}" for i in range(15)]), max_size=12), min_size=1, max_size=10),
    st.lists(st.sampled_from([f"u{i}" for i in range(5)]), max_size=5),
)
def test_vocabulary_properties(corpus_tokens, unseen):
    corpus = [doc(toks, hadm=i + 1) for i, toks in enumerate(corpus_tokens)]
    v = build_vocabulary(corpus, CHART)
    counts = {}
    for toks in corpus_tokens:
        for t in toks:
            counts[t] = counts.get(t, 0) + 1
    ids = sorted(v.token_to_id.values())
    assert ids == list(range(2, 2 + len(ids)))
    assert PAD_ID not in ids and OOV_ID not in ids
    for t, c in counts.items():
        if c >= 2:
            assert v.decode(v.lookup(t)) == t
        else:
            assert v.lookup(t) == OOV_ID
    for t in unseen:
        assert v.lookup(t) == OOV_ID
    assert build_vocabulary(corpus, CHART).to_json() == v.to_json()
    for d in corpus:
        assert len(encode(d, {CHART: v}).ids[CHART]) == len(d.tokens_by_source[CHART])
