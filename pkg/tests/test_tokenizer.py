import io

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from ehrbag.schema import ALL_SOURCES, CohortEntry, EventRecord, SourceKind
from ehrbag.tokenizer import AdmissionDocument, build_documents, read_corpus, tokenize_structured, tokenize_text, write_corpus

CHART = SourceKind.CHARTEVENTS
NOTE = SourceKind.NOTEEVENTS


def chart(value="104", unit="BPM", t=0.0, hadm=1, item="211", label=None):
    text = (("LABEL", label),) if label else ()
    return EventRecord(1, hadm, CHART, store_time=t, structured_fields=(("ITEMID", item), ("VALUE", value), ("VALUEUOM", unit)), text_fields=text)


def note(text, t=0.0, hadm=1):
    return EventRecord(1, hadm, NOTE, store_time=t, structured_fields=(("CATEGORY", "Nursing"), ("DESCRIPTION", "Generic Note")), text_fields=(("TEXT", text),))


def test_structured_join():
    assert tokenize_structured(chart()) == ["211-104-BPM"]
    assert tokenize_structured(chart(unit=None)) == ["211-104-NaN"]
    lab = EventRecord(1, 1, SourceKind.LABEVENTS, chart_time=0.0, structured_fields=(("ITEMID", "50912"), ("VALUE", "1.2"), ("VALUEUOM", "mg/dL")))
    assert tokenize_structured(lab) == ["50912-1.2-mg/dL"]


def test_drug_whitespace_and_blank_values():
    rx = EventRecord(1, 1, SourceKind.PRESCRIPTIONS, start_date=0.0, structured_fields=(("DRUG", "Sodium Chloride 0.9%"), ("DOSE_VAL_RX", "1000"), ("DOSE_UNIT_RX", "  ")))
    assert tokenize_structured(rx) == ["Sodium_Chloride_0.9%-1000-NaN"]


def test_label_text_flag():
    e = chart(label="Heart Rate")
    assert tokenize_structured(e) == ["211-104-BPM", "Heart", "Rate"]
    assert tokenize_structured(e, include_label_text=False) == ["211-104-BPM"]


def test_note_tokens():
    assert tokenize_structured(note("pt stable,  BP ok")) == ["Nursing-Generic_Note", "pt", "stable,", "BP", "ok"]


def test_tokenize_text():
    assert tokenize_text("Heart Rate") == ["Heart", "Rate"]
    assert tokenize_text("") == []
    assert tokenize_text("BP:\n 120/80  mmHg") == ["BP:", "120/80", "mmHg"]
    assert tokenize_text("a b c") == ["a", "b", "c"]


@settings(max_examples=200, deadline=None)
@given(st.lists(st.one_of(st.none(), st.text(max_size=12)), min_size=3, max_size=3), st.text(max_size=30))
def test_tokens_never_empty_or_spaced(values, label):
    e = EventRecord(1, 1, CHART, store_time=0.0, structured_fields=tuple(zip(("ITEMID", "VALUE", "VALUEUOM"), values)), text_fields=(("LABEL", label),))
    toks = tokenize_structured(e)
    assert len(toks) >= 1
    for t in toks:
        assert t and not any(ch.isspace() for ch in t)


def _cohort(*hadms):
    return [CohortEntry(h, h, 0.0, 3 * 86400.0, False, 3.0) for h in hadms]


def test_build_documents_order_and_empty():
    events = [chart(value="2", t=20.0), note("hello world", t=5.0), chart(value="1", t=10.0)]
    docs = build_documents(events, _cohort(1, 2))
    assert [d.admission_id for d in docs] == [1, 2]
    d1, d2 = docs
    assert d1.tokens_by_source[CHART] == ["211-1-BPM", "211-2-BPM"]
    assert d1.tokens_by_source[NOTE] == ["Nursing-Generic_Note", "hello", "world"]
    assert set(d1.tokens_by_source) == set(ALL_SOURCES)
    assert sum(len(v) for v in d1.tokens_by_source.values()) == 5
    assert all(v == [] for v in d2.tokens_by_source.values())
    assert d1.event_counts[CHART] == 2 and d1.event_counts[NOTE] == 1


def test_ties_keep_arrival_order():
    events = [chart(value="b", t=1.0), chart(value="a", t=1.0)]
    (doc,) = build_documents(events, _cohort(1))
    assert doc.tokens_by_source[CHART] == ["211-b-BPM", "211-a-BPM"]


def test_documents_not_merged_across_admissions():
    docs = build_documents([chart(hadm=1), chart(hadm=2, value="9")], _cohort(1, 2))
    assert [d.tokens_by_source[CHART] for d in docs] == [["211-104-BPM"], ["211-9-BPM"]]


@settings(max_examples=50, deadline=None)
@given(st.permutations(list(range(8))))
def test_reordering_input_is_harmless(perm):
    events = [chart(value=str(i), t=float(i), hadm=1 + i % 2) for i in range(8)]
    base = build_documents(events, _cohort(1, 2))
    shuffled = build_documents([events[i] for i in perm], _cohort(1, 2))
    assert [d.to_json() for d in base] == [d.to_json() for d in shuffled]


def test_corpus_roundtrip(tmp_path):
    docs = build_documents([chart(), note("x y")], _cohort(1, 2))
    path = tmp_path / "c.jsonl"
    with open(path, "w", encoding="utf-8") as fh:
        assert write_corpus(docs, fh) == 2
    back = read_corpus(path)
    assert [d.to_json() for d in back] == [d.to_json() for d in docs]
    buf = io.StringIO()
    write_corpus(docs[:1], buf)
    assert buf.getvalue().startswith('{"hadm_id":1,"subject_id":1,"label_ihm":0,"label_los":0,"tokens":{"chartevents":["211-104-BPM"]')


def test_document_labels_from_cohort():
    cohort = [CohortEntry(1, 1, 0.0, 8 * 86400.0, True, 8.0)]
    (doc,) = build_documents([], cohort)
    assert doc.label_ihm is True and doc.label_los is True
    assert isinstance(doc, AdmissionDocument)
