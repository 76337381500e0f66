"""Drive the command-line pipeline in-process: synth, ingest, tokenize, split, train twice, compare."""

import json
from pathlib import Path

from ehrbag.cli import main

SMALL_CONFIG = {
    "generator": {"n_patients": 300},
    "model": {"embedding_dim": 6, "neurons_per_layer": 32, "learning_rate": 0.01},
    "loop": {"max_epochs": 15, "patience": 3},
    "eval": {"n_resamples": 1000, "n_permutations": 1000},
}


def run(argv) -> None:
    code = main([str(a) for a in argv])
    assert code == 0, f"{argv[0]} exited {code}"


def run_pipeline(work: Path, seed: int = 0, config: dict | None = None) -> Path:
    """Return the path of the compare report."""
    work = Path(work)
    work.mkdir(parents=True, exist_ok=True)
    cfg_path = work / "config.json"
    cfg_path.write_text(json.dumps(config or SMALL_CONFIG))
    common = ["--config", cfg_path, "--seed", seed]
    run(["synth", work / "raw", *common])
    run(["ingest", work / "raw", work / "ingest", *common])
    run(["tokenize", work / "ingest", work / "corpus.jsonl", *common])
    run(["split", work / "corpus.jsonl", work / "split", *common])
    s = work / "split"
    run(["train", s / "train.jsonl", s / "val.jsonl", work / "as.model", *common])
    run(["train", s / "train.jsonl", s / "val.jsonl", work / "cs.model", "--sources", "chartevents", *common])
    report = work / "compare.json"
    run(["compare", "--model-a", work / "as.model", "--model-b", work / "cs.model", "--test", s / "test.jsonl", "-o", report, *common])
    return report
