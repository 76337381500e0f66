"""Model-level reports built from the metric functions."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from . import metrics as M
from .nncore import Checkpoint, predict
from .tokenizer import AdmissionDocument
from .vocab import encode_all


@dataclass
class EvalOptions:
    label: str = "ihm"
    threshold: float = 0.5
    n_bins: int = 10
    n_resamples: int = 10000
    n_permutations: int = 10000
    level: float = 0.95
    seed: int = 0

    @classmethod
    def from_json(cls, obj) -> "EvalOptions":
        obj = dict(obj or {})
        return cls(**{k: obj[k] for k in cls.__dataclass_fields__ if k in obj})


@dataclass
class EvalReport:
    model: str
    label: str
    n: int
    n_pos: int
    auc_roc: float
    pr_auc: float
    precision: float
    recall: float
    f1: float
    threshold: float
    roc_points: list
    pr_points: list
    calibration_points: list
    ci: dict = field(default_factory=dict)
    comparison: dict | None = None

    def to_json(self) -> dict:
        out = {
            "model": self.model,
            "label": self.label,
            "n": self.n,
            "n_pos": self.n_pos,
            "auc_roc": self.auc_roc,
            "pr_auc": self.pr_auc,
            "precision": self.precision,
            "recall": self.recall,
            "f1": self.f1,
            "threshold": self.threshold,
            "roc_points": [list(p) for p in self.roc_points],
            "pr_points": [list(p) for p in self.pr_points],
            "calibration_points": [list(p) for p in self.calibration_points],
            "ci": {k: v.to_json() for k, v in self.ci.items()},
        }
        if self.comparison is not None:
            out["comparison"] = self.comparison
        return out


def score(model: Checkpoint, docs: Sequence[AdmissionDocument], label: str) -> M.ScoredSet:
    encoded = encode_all(docs, model.vocabs)
    probs = predict(model.params, model.cfg, encoded)
    labels = np.array([d.label(label) for d in encoded])
    return M.ScoredSet(probs, labels, [d.admission_id for d in encoded])


def report_for(scored: M.ScoredSet, name: str, opts: EvalOptions) -> EvalReport:
    precision, recall, f1 = M.threshold_metrics(scored, opts.threshold)
    ci = {
        m: M.bootstrap_ci(scored, m, opts.n_resamples, opts.level, opts.seed)
        for m in (M.ROC_AUC, M.PR_AUC)
    }
    return EvalReport(
        model=name,
        label=opts.label,
        n=len(scored),
        n_pos=scored.n_pos,
        auc_roc=M.roc_auc(scored),
        pr_auc=M.pr_auc(scored),
        precision=precision,
        recall=recall,
        f1=f1,
        threshold=opts.threshold,
        roc_points=M.roc_points(scored),
        pr_points=M.pr_points(scored),
        calibration_points=M.calibration_curve(scored, opts.n_bins),
        ci=ci,
    )


def evaluate(model: Checkpoint, docs: Sequence[AdmissionDocument], opts: EvalOptions | None = None, name: str = "model") -> EvalReport:
    opts = opts or EvalOptions()
    return report_for(score(model, docs, opts.label), name, opts)


def compare_scored(a: M.ScoredSet, b: M.ScoredSet, opts: EvalOptions, names=("model_a", "model_b")) -> EvalReport:
    """Report for ``a`` whose comparison block holds ``b``'s report, deltas and p-values."""
    M.check_paired(a, b)
    rep_a = report_for(a, names[0], opts)
    rep_b = report_for(b, names[1], opts)
    tests = {m: M.permutation_test(a, b, m, opts.n_permutations, opts.seed) for m in (M.ROC_AUC, M.PR_AUC)}
    rep_a.comparison = {
        "other_model": rep_b.to_json(),
        "delta_auc_roc": rep_a.auc_roc - rep_b.auc_roc,
        "p_auc_roc": tests[M.ROC_AUC].p_value,
        "delta_pr_auc": rep_a.pr_auc - rep_b.pr_auc,
        "p_pr_auc": tests[M.PR_AUC].p_value,
        "n_resamples": opts.n_resamples,
        "n_permutations": tests[M.ROC_AUC].n_permutations,
        "exact_permutation": tests[M.ROC_AUC].exact,
        "seed": opts.seed,
    }
    return rep_a


def compare(
    model_a: Checkpoint,
    model_b: Checkpoint,
    docs: Sequence[AdmissionDocument],
    opts: EvalOptions | None = None,
    names=("model_a", "model_b"),
) -> EvalReport:
    opts = opts or EvalOptions()
    return compare_scored(score(model_a, docs, opts.label), score(model_b, docs, opts.label), opts, names)
