import json
import subprocess
import sys

import pytest

from cli_pipeline import SMALL_CONFIG, run, run_pipeline
from conftest import write_csv
from ehrbag.cli import main


@pytest.fixture(scope="module")
def pipeline(tmp_path_factory):
    work = tmp_path_factory.mktemp("cli")
    report = run_pipeline(work, seed=3)
    return work, report


def test_compare_report_shape(pipeline):
    work, report = pipeline
    rep = json.loads(report.read_text())
    cmp = rep["comparison"]
    assert rep["model"] == "as" and cmp["other_model"]["model"] == "cs"
    assert cmp["delta_auc_roc"] == pytest.approx(rep["auc_roc"] - cmp["other_model"]["auc_roc"], abs=1e-12)
    assert 0 < cmp["p_auc_roc"] <= 1 and 0 < cmp["p_pr_auc"] <= 1
    assert rep["ci"]["auc_roc"]["lo"] <= rep["auc_roc"] <= rep["ci"]["auc_roc"]["hi"]
    assert (work / "compare.json.manifest.json").exists()


def test_manifests_written(pipeline):
    work, _ = pipeline
    for m in ("raw/run.manifest.json", "ingest/run.manifest.json", "corpus.jsonl.manifest.json",
              "split/run.manifest.json", "as.model.manifest.json", "cs.model.manifest.json"):
        man = json.loads((work / m).read_text())
        assert set(man) == {"command", "argv", "config_digest", "inputs", "outputs", "seeds", "tool_version", "wall_time_s"}
        assert man["seeds"]["config"] == 3
    man = json.loads((work / "corpus.jsonl.manifest.json").read_text())
    assert all(len(d) == 64 for d in man["inputs"].values())


def test_raw_and_ingested_inputs_tokenize_identically(pipeline, tmp_path):
    work, _ = pipeline
    run(["tokenize", work / "raw", tmp_path / "c.jsonl", "--seed", 3])
    assert (tmp_path / "c.jsonl").read_bytes() == (work / "corpus.jsonl").read_bytes()


def test_evaluate_and_describe(pipeline, tmp_path, capsys):
    work, _ = pipeline
    run(["evaluate", work / "as.model", work / "split" / "test.jsonl", "-o", tmp_path / "ev.json", "--seed", 3])
    rep = json.loads((tmp_path / "ev.json").read_text())
    assert rep["model"] == "as" and "comparison" not in rep
    run(["describe", work / "ingest", "-o", tmp_path / "d.json"])
    assert json.loads((tmp_path / "d.json").read_text())


def test_compare_refuses_training_patients(pipeline, capsys):
    work, _ = pipeline
    code = main(["compare", "--model-a", str(work / "as.model"), "--model-b", str(work / "cs.model"),
                 "--test", str(work / "split" / "train.jsonl")])
    assert code == 2
    assert "UnpairedSets" in capsys.readouterr().err


def test_usage_errors_exit_1(tmp_path, capsys):
    assert main(["nosuch"]) == 1
    assert main(["train"]) == 1
    assert main(["synth", str(tmp_path), "--config", str(tmp_path / "missing.json")]) == 1
    assert main(["tokenize", str(tmp_path), str(tmp_path / "c.jsonl"), "--sources", "bogus"]) == 1


def test_missing_column_exits_2(tmp_path, capsys):
    run(["synth", tmp_path / "raw", "--config", _small(tmp_path)])
    write_csv(tmp_path / "raw" / "labevents.csv", ["SUBJECT_ID", "HADM_ID", "ITEMID", "VALUE", "VALUEUOM"], [[1, 100001, 5, 1, "x"]])
    code = main(["tokenize", str(tmp_path / "raw"), str(tmp_path / "c.jsonl")])
    assert code == 2
    err = capsys.readouterr().err
    assert "CHARTTIME" in err and "labevents" in err
    assert not (tmp_path / "c.jsonl").exists()


def test_bad_config_exits_2(tmp_path):
    cfg = tmp_path / "c.json"
    cfg.write_text(json.dumps({"generator": {"base_rate_ihm": 2.0}}))
    assert main(["synth", str(tmp_path / "out"), "--config", str(cfg)]) == 2


def _small(tmp_path):
    p = tmp_path / "small.json"
    p.write_text(json.dumps({**SMALL_CONFIG, "generator": {"n_patients": 20}}))
    return p


def test_console_entry_point(tmp_path):
    out = subprocess.run([sys.executable, "-m", "ehrbag", "--version"], capture_output=True, text=True)
    assert out.returncode == 0 and out.stdout.strip()
    out = subprocess.run([sys.executable, "-m", "ehrbag", "synth", "--help"], capture_output=True, text=True)
    assert "--seed" in out.stdout and "--config" in out.stdout
