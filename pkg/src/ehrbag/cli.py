"""Command-line entry point: one subcommand per pipeline stage, handing off through files.

Exit codes: 0 success, 1 usage error, 2 data or contract error.
Every invocation writes a run manifest next to its main output.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

from . import __version__
from .dataset import save_split, split_patients
from .errors import DataError, Diverged, InvalidConfig, UnpairedSets
from .evaluation import EvalOptions, compare, evaluate
from .io import atomic_open, file_digest, json_digest, write_json
from .nncore import ModelConfig, load_model, save_model
from .pipeline import documents_from, ingest, load_cohort, write_ingest
from .schema import ALL_SOURCES, SourceKind, cohort_stats
from .synthgen import GeneratorConfig, generate
from .tokenizer import read_corpus, write_corpus
from .trainer import LoopConfig, SearchSpace, train_model, tune, write_trial_log
from .vocab import build_vocabularies, encode_all

log = logging.getLogger("ehrbag")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    # argparse exits with 2 by default, which is reserved for data errors here
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(1, f"{self.prog}: error: {message}\n")


@dataclass
class RunManifest:
    command: str
    config_digest: str
    inputs: dict[str, str]
    outputs: dict[str, str]
    seeds: dict[str, int]
    tool_version: str = __version__
    wall_time_s: float = 0.0
    argv: list[str] = field(default_factory=list)

    def to_json(self) -> dict:
        return {
            "command": self.command,
            "argv": self.argv,
            "config_digest": self.config_digest,
            "inputs": self.inputs,
            "outputs": self.outputs,
            "seeds": self.seeds,
            "tool_version": self.tool_version,
            "wall_time_s": self.wall_time_s,
        }


def _digests(paths) -> dict[str, str]:
    """Content hashes of files; directories contribute their top-level files."""
    out = {}
    for p in map(Path, paths):
        if p.is_dir():
            for f in sorted(p.iterdir()):
                if f.is_file() and not f.name.endswith(".manifest.json"):
                    out[str(f)] = file_digest(f)
        elif p.is_file():
            out[str(p)] = file_digest(p)
    return out


def _manifest_path(out: Path) -> Path:
    if out.is_dir():
        return out / "run.manifest.json"
    return out.with_name(out.name + ".manifest.json")


# --- config ------------------------------------------------------------------


def _load_config(args) -> dict:
    if not args.config:
        cfg = {}
    else:
        try:
            with open(args.config, encoding="utf-8") as fh:
                cfg = json.load(fh)
        except FileNotFoundError:
            raise UsageError(f"config file not found: {args.config}") from None
        except json.JSONDecodeError as exc:
            raise InvalidConfig(f"{args.config}: not valid JSON ({exc})") from None
        if not isinstance(cfg, dict):
            raise InvalidConfig(f"{args.config}: top level must be an object")
    if args.seed is not None:
        cfg["seed"] = args.seed
    cfg.setdefault("seed", 0)
    return cfg


def _sources(args, cfg) -> tuple[SourceKind, ...]:
    raw = getattr(args, "sources", None) or cfg.get("sources") or "all"
    if isinstance(raw, str):
        raw = [s for s in raw.split(",") if s.strip()]
    if list(raw) == ["all"]:
        return ALL_SOURCES
    try:
        return tuple(SourceKind.parse(s) for s in raw)
    except ValueError as exc:
        raise UsageError(str(exc)) from None


def _label(args, cfg, default: str = "ihm") -> str:
    return getattr(args, "label", None) or cfg.get("loop", {}).get("label") or default


def _loop(cfg, args) -> LoopConfig:
    loop = LoopConfig.from_json(cfg.get("loop"))
    loop.seed = int(cfg["seed"])
    loop.label = _label(args, cfg)
    return loop


def _eval_options(cfg, label: str) -> EvalOptions:
    opts = EvalOptions.from_json(cfg.get("eval"))
    opts.seed = int(cfg["seed"])
    opts.label = label
    return opts


def _require(path, kind: str = "file") -> Path:
    p = Path(path)
    if kind == "dir" and not p.is_dir():
        raise UsageError(f"not a directory: {p}")
    if kind == "file" and not p.is_file():
        raise UsageError(f"no such file: {p}")
    return p


# --- subcommands -------------------------------------------------------------


def cmd_synth(args, cfg):
    gen = GeneratorConfig.from_json(cfg.get("generator"))
    gen.seed = int(cfg["seed"])
    out = Path(args.out_dir)
    summary = generate(gen, out)
    log.info("wrote %d admissions to %s", summary["n_admissions"], out)
    return [], [out], {"generator": gen.seed}


def cmd_ingest(args, cfg):
    data = _require(args.data_dir, "dir")
    result = ingest(data, _sources(args, cfg), args.threads)
    write_ingest(result, args.out_dir)
    log.info("cohort %d admissions, %d windowed events", len(result.cohort), len(result.events))
    return [data], [Path(args.out_dir)], {}


def cmd_tokenize(args, cfg):
    src = _require(args.input, "dir")
    include = cfg.get("include_label_text", True) and not args.no_label_text
    docs, _ = documents_from(src, _sources(args, cfg), include, args.threads)
    out = Path(args.out)
    with atomic_open(out) as fh:
        write_corpus(docs, fh)
    log.info("wrote %d documents to %s", len(docs), out)
    return [src], [out], {}


def cmd_describe(args, cfg):
    src = _require(args.input, "dir")
    docs = read_corpus(_require(args.corpus)) if args.corpus else None
    stats = cohort_stats(load_cohort(src), docs)
    text = json.dumps(stats, indent=2, sort_keys=True)
    inputs = [src] + ([args.corpus] if args.corpus else [])
    if args.out:
        write_json(args.out, stats)
        return inputs, [Path(args.out)], {}
    print(text)
    return inputs, [], {}


def cmd_split(args, cfg):
    corpus = _require(args.corpus)
    docs = read_corpus(corpus)
    seed = int(cfg["seed"])
    split = split_patients(sorted({d.patient_id for d in docs}), seed)
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    save_split(split, out / "split.json")
    for name, part in split.partition(docs).items():
        with atomic_open(out / f"{name}.jsonl") as fh:
            write_corpus(part, fh)
    return [corpus], [out], {"split": seed}


def _train_meta(loop: LoopConfig, train, val, train_path, val_path, min_count: int) -> dict:
    return {
        "label": loop.label,
        "min_count": min_count,
        "train_digest": file_digest(train_path),
        "val_digest": file_digest(val_path),
        "train_patients": sorted({d.patient_id for d in train}),
        "val_patients": sorted({d.patient_id for d in val}),
    }


def _prepare(args, cfg):
    train_path, val_path = _require(args.train), _require(args.val)
    train, val = read_corpus(train_path), read_corpus(val_path)
    sources = _sources(args, cfg)
    min_count = int(cfg.get("min_count", 2))
    vocabs = build_vocabularies(train, sources, min_count)
    enc_train, enc_val = encode_all(train, vocabs), encode_all(val, vocabs)
    sizes = {s: v.table_size for s, v in vocabs.items()}
    loop = _loop(cfg, args)
    meta = _train_meta(loop, train, val, train_path, val_path, min_count)
    return sources, vocabs, enc_train, enc_val, sizes, loop, meta, [train_path, val_path]


def cmd_train(args, cfg):
    sources, vocabs, train, val, sizes, loop, meta, inputs = _prepare(args, cfg)
    try:
        model_cfg = ModelConfig(sources=sources, **cfg.get("model", {}))
    except TypeError as exc:
        raise InvalidConfig(f"model config: {exc}") from None
    run = train_model(model_cfg, train, val, sizes, loop)
    meta.update({"seeds": run.seeds, "best_epoch": run.best_epoch, "history": run.history})
    out = Path(args.out)
    save_model(run.best_params, model_cfg, vocabs, out, meta)
    log.info("best epoch %d, val loss %.5f", run.best_epoch, run.best_val_loss)
    return inputs, [out], run.seeds


def cmd_tune(args, cfg):
    sources, vocabs, train, val, sizes, loop, meta, inputs = _prepare(args, cfg)
    try:
        space = SearchSpace.from_json(cfg.get("search"))
    except TypeError as exc:
        raise InvalidConfig(f"search config: {exc}") from None
    n_trials = args.n_trials or int(cfg.get("n_trials", 10))
    seed = int(cfg["seed"])
    result = tune(space, n_trials, sources, train, val, sizes, loop, seed=seed, n_workers=args.threads)
    out = Path(args.out)
    trial_log = Path(args.trial_log) if args.trial_log else out.with_name(out.name + ".trials.jsonl")
    with atomic_open(trial_log) as fh:
        write_trial_log(result.trials, fh)
    run = result.best_run
    meta.update({"seeds": run.seeds, "best_epoch": run.best_epoch, "history": run.history, "tune_seed": seed})
    save_model(run.best_params, result.best_config, vocabs, out, meta)
    return inputs, [out, trial_log], {"tune": seed, **run.seeds}


def _check_disjoint(model, docs, name: str) -> None:
    test_patients = {d.patient_id for d in docs}
    for key in ("train_patients", "val_patients"):
        overlap = test_patients.intersection(model.meta.get(key, ()))
        if overlap:
            raise UnpairedSets(f"{name}: {len(overlap)} test patient(s) were in its {key.split('_')[0]} set")


def cmd_evaluate(args, cfg):
    model_path, test_path = _require(args.model), _require(args.test)
    model = load_model(model_path)
    docs = read_corpus(test_path)
    _check_disjoint(model, docs, str(model_path))
    opts = _eval_options(cfg, args.label or model.meta.get("label", "ihm"))
    report = evaluate(model, docs, opts, name=args.name or model_path.stem)
    return _emit_report(args, report.to_json(), [model_path, test_path], opts.seed)


def cmd_compare(args, cfg):
    path_a, path_b, test_path = _require(args.model_a), _require(args.model_b), _require(args.test)
    a, b = load_model(path_a), load_model(path_b)
    label_a, label_b = a.meta.get("label", "ihm"), b.meta.get("label", "ihm")
    label = args.label or label_a
    if not args.label and label_a != label_b:
        raise UnpairedSets(f"models were trained for different labels ({label_a} vs {label_b})")
    docs = read_corpus(test_path)
    _check_disjoint(a, docs, str(path_a))
    _check_disjoint(b, docs, str(path_b))
    opts = _eval_options(cfg, label)
    report = compare(a, b, docs, opts, names=(path_a.stem, path_b.stem))
    return _emit_report(args, report.to_json(), [path_a, path_b, test_path], opts.seed)


def _emit_report(args, obj, inputs, seed):
    if args.out:
        write_json(args.out, obj)
        return inputs, [Path(args.out)], {"eval": seed}
    print(json.dumps(obj, indent=2, sort_keys=True))
    return inputs, [], {"eval": seed}


# --- parser ------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON config file (sections: generator, model, loop, search, eval)")
    common.add_argument("--seed", type=int, help="override the config seed")
    common.add_argument("--threads", type=int, default=1, help="worker cap for ingest and tuning (default 1)")
    common.add_argument("-v", "--verbose", action="store_true")

    p = _Parser(prog="ehrbag", description="Embedding-bag outcome models over ICU event tables.")
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    s = sub.add_parser("synth", parents=[common], help="generate synthetic tables with planted signal")
    s.add_argument("out_dir")
    s.set_defaults(func=cmd_synth)

    s = sub.add_parser("ingest", parents=[common], help="select the cohort and window events")
    s.add_argument("data_dir")
    s.add_argument("out_dir")
    s.add_argument("--sources", help="comma-separated table names, or 'all'")
    s.set_defaults(func=cmd_ingest)

    s = sub.add_parser("tokenize", parents=[common], help="build one token document per admission")
    s.add_argument("input", help="raw CSV directory or ingest output directory")
    s.add_argument("out", help="corpus JSON-lines file")
    s.add_argument("--sources", help="comma-separated table names, or 'all'")
    s.add_argument("--no-label-text", action="store_true", help="drop item LABEL text from structured tokens")
    s.set_defaults(func=cmd_tokenize)

    s = sub.add_parser("describe", parents=[common], help="cohort statistics")
    s.add_argument("input", help="raw CSV directory or ingest output directory")
    s.add_argument("--corpus", help="corpus file for per-source event and token counts")
    s.add_argument("-o", "--out")
    s.set_defaults(func=cmd_describe)

    s = sub.add_parser("split", parents=[common], help="patient-level train/val/test split")
    s.add_argument("corpus")
    s.add_argument("out_dir")
    s.set_defaults(func=cmd_split)

    for name, func, helptext in (("train", cmd_train, "train one configuration"), ("tune", cmd_tune, "random hyperparameter search")):
        s = sub.add_parser(name, parents=[common], help=helptext)
        s.add_argument("train")
        s.add_argument("val")
        s.add_argument("out", help="checkpoint path")
        s.add_argument("--sources", help="comma-separated table names, or 'all' (default)")
        s.add_argument("--label", choices=("ihm", "los"))
        if name == "tune":
            s.add_argument("--n-trials", type=int)
            s.add_argument("--trial-log", help="default: <out>.trials.jsonl")
        s.set_defaults(func=func)

    s = sub.add_parser("evaluate", parents=[common], help="metrics, curves and bootstrap intervals")
    s.add_argument("model")
    s.add_argument("test")
    s.add_argument("-o", "--out")
    s.add_argument("--label", choices=("ihm", "los"))
    s.add_argument("--name")
    s.set_defaults(func=cmd_evaluate)

    s = sub.add_parser("compare", parents=[common], help="paired comparison of two models on one test set")
    s.add_argument("--model-a", required=True)
    s.add_argument("--model-b", required=True)
    s.add_argument("--test", required=True)
    s.add_argument("-o", "--out")
    s.add_argument("--label", choices=("ihm", "los"))
    s.set_defaults(func=cmd_compare)
    return p


def main(argv: Sequence[str] | None = None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    if args.threads < 1:
        print("ehrbag: error: --threads must be >= 1", file=sys.stderr)
        return 1

    start = time.perf_counter()
    try:
        cfg = _load_config(args)
        inputs, outputs, seeds = args.func(args, cfg)
    except UsageError as exc:
        print(f"ehrbag {args.command}: error: {exc}", file=sys.stderr)
        return 1
    except (DataError, Diverged, OSError) as exc:
        print(f"ehrbag {args.command}: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 2

    manifest = RunManifest(
        command=args.command,
        config_digest=json_digest(cfg),
        inputs=_digests(inputs + ([args.config] if args.config else [])),
        outputs=_digests(outputs),
        seeds={"config": int(cfg["seed"]), **seeds},
        wall_time_s=round(time.perf_counter() - start, 3),
        argv=argv,
    )
    anchor = Path(outputs[0]) if outputs else Path(f"{args.command}")
    write_json(_manifest_path(anchor), manifest.to_json())
    return 0


if __name__ == "__main__":
    sys.exit(main())
