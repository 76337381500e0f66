import csv
from pathlib import Path

import numpy as np
import pytest

from ehrbag.nncore import ModelConfig, Parameters
from ehrbag.schema import ALL_SOURCES, SourceKind
from ehrbag.vocab import EncodedDocument

CHART = SourceKind.CHARTEVENTS


def write_csv(path: Path, header, rows) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        w.writerows(rows)
    return path


def random_encoded_docs(rng, n, sizes, max_tokens=8, empty_prob=0.1):
    """Encoded documents with random ids per source, some of them empty."""
    docs = []
    for i in range(n):
        ids = {}
        for s, size in sizes.items():
            k = 0 if rng.random() < empty_prob else int(rng.integers(0, max_tokens + 1))
            ids[s] = rng.integers(0, size, size=k).astype(np.int64)
        docs.append(EncodedDocument(1000 + i, 1 + i, ids, bool(rng.random() < 0.4), bool(rng.random() < 0.3)))
    return docs


def random_model(rng, sources=(CHART,), d=None, n_dense=None, neurons=None, vocab=12, p_e=0.0, p_h=0.0):
    cfg = ModelConfig(
        sources=tuple(sources),
        embedding_dim=d or int(rng.integers(3, 9)),
        embedding_dropout=p_e,
        n_dense=n_dense or int(rng.integers(1, 3)),
        neurons_per_layer=neurons or 16,
        hidden_dropout=p_h,
        learning_rate=1e-2,
    )
    sizes = {s: vocab for s in cfg.sources}
    params = Parameters.init(cfg, sizes, rng)
    # larger than the default init so relu units and logits are far from flat
    for k in params.tensors:
        if k.startswith("emb/"):
            params[k][1:] = rng.normal(0, 1.0, size=params[k][1:].shape)
        elif k.endswith("/b"):
            params[k][:] = rng.normal(0, 0.3, size=params[k].shape)
    return cfg, params, sizes


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture
def all_sources():
    return ALL_SOURCES


def pytest_terminal_summary(terminalreporter):
    try:
        from test_acceptance import RESULTS
    except ImportError:
        return
    if not RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for key in sorted(RESULTS, key=lambda k: (int(k.split(".")[0]), k)):
        ok, detail = RESULTS[key]
        terminalreporter.write_line(f"criterion {key}: {'PASS' if ok else 'FAIL'}  {detail}")
