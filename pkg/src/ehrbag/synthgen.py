"""Seeded generator of MIMIC-shaped CSV tables with planted signal.

Each admission gets a latent risk ``z ~ N(0, 1)``. Every event of source
``s`` is, with probability ``informative_fraction``, drawn from a pair of
risk-informative code groups: the "high" group with probability
``sigmoid(strength_s * z)``, otherwise the "low" group. Remaining events use
neutral codes. Outcomes are ``Bernoulli(sigmoid(alpha + beta * z))`` with
``alpha`` solved so the population prevalence matches the configured base
rate. The ICU length of stay is then drawn on the correct side of 7 days.

Ground truth goes to ``truth/`` and must never be read by the model pipeline.
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Mapping

import numpy as np
from scipy import integrate, optimize
from scipy.special import expit

from .errors import InvalidConfig
from .io import atomic_open
from .metrics import ScoredSet, auc_standard_error, roc_auc
from .schema import (
    ADMISSIONS_COLUMNS,
    ALL_SOURCES,
    ICUSTAYS_COLUMNS,
    TABLE_SPECS,
    WINDOW_SECONDS,
    SourceKind,
    format_timestamp,
)

DAY = 86400
_BASE_TIME = 4102444800.0  # 2100-01-01 00:00:00

DEFAULT_EVENTS = {
    "chartevents": 100.0,
    "inputevents": 15.0,
    "outputevents": 10.0,
    "labevents": 30.0,
    "microbiologyevents": 3.0,
    "procedureevents": 4.0,
    "noteevents": 3.0,
    "prescriptions": 15.0,
}
DEFAULT_VOCAB = {
    "chartevents": 2000,
    "inputevents": 600,
    "outputevents": 400,
    "labevents": 1200,
    "microbiologyevents": 300,
    "procedureevents": 300,
    "noteevents": 2000,
    "prescriptions": 800,
}
DEFAULT_SIGNAL = {
    "chartevents": 1.0,
    "inputevents": 3.0,
    "outputevents": 3.0,
    "labevents": 3.0,
    "microbiologyevents": 3.0,
    "procedureevents": 3.0,
    "noteevents": 3.0,
    "prescriptions": 3.0,
}

_N_VALUES = 4
_UNITS = ("mg/dL", "mmHg", "BPM", "mL", "%", "mEq/L", "units", "cmH2O")
_LABEL_WORDS = ("Heart Rate", "Arterial BP", "Resp Rate", "SpO2", "Temperature C", "GCS Total", "CVP", "Urine Out")
_NOTE_CATEGORIES = (("Nursing", "Generic Note"), ("Physician", "ICU Progress"), ("Radiology", "CHEST (PORTABLE AP)"), ("ECG", "Report"))
_DOSE_UNITS = ("mg", "mL", "UNIT", "mcg", "g")
_INTERPRETATIONS = ("S", "R", "I", "")


@dataclass
class GeneratorConfig:
    n_patients: int = 2000
    extra_admission_rate: float = 0.1
    events_per_source: dict[str, float] = field(default_factory=lambda: dict(DEFAULT_EVENTS))
    vocab_size_per_source: dict[str, int] = field(default_factory=lambda: dict(DEFAULT_VOCAB))
    signal_strength_per_source: dict[str, float] = field(default_factory=lambda: dict(DEFAULT_SIGNAL))
    informative_fraction: float = 0.3
    words_per_note: int = 30
    beta_ihm: float = 4.0
    beta_los: float = 3.0
    base_rate_ihm: float = 0.2
    base_rate_los: float = 0.25
    multi_stay_fraction: float = 0.03
    short_stay_fraction: float = 0.03
    out_of_window_fraction: float = 0.05
    seed: int = 0

    def validate(self) -> None:
        if self.n_patients < 0:
            raise InvalidConfig("n_patients must be >= 0")
        for name in ("base_rate_ihm", "base_rate_los"):
            r = getattr(self, name)
            if not 0.0 < r < 1.0:
                raise InvalidConfig(f"{name} must lie in (0, 1), got {r}")
        for name in ("informative_fraction", "multi_stay_fraction", "short_stay_fraction", "out_of_window_fraction"):
            r = getattr(self, name)
            if not 0.0 <= r <= 1.0:
                raise InvalidConfig(f"{name} must lie in [0, 1], got {r}")
        if self.multi_stay_fraction + self.short_stay_fraction > 1.0:
            raise InvalidConfig("exclusion fractions sum to more than 1")
        if self.extra_admission_rate < 0:
            raise InvalidConfig("extra_admission_rate must be >= 0")
        for table in (self.events_per_source, self.vocab_size_per_source, self.signal_strength_per_source):
            unknown = set(table) - {s.value for s in ALL_SOURCES}
            if unknown:
                raise InvalidConfig(f"unknown sources in config: {sorted(unknown)}")
        for s in ALL_SOURCES:
            if self.vocab(s) < 3 * _N_VALUES:
                raise InvalidConfig(f"vocab_size_per_source[{s.value}] must be >= {3 * _N_VALUES}")
            if self.events(s) < 0:
                raise InvalidConfig(f"events_per_source[{s.value}] must be >= 0")
            if not math.isfinite(self.signal(s)) or self.signal(s) < 0:
                raise InvalidConfig(f"signal_strength_per_source[{s.value}] must be finite and >= 0")
        for name in ("beta_ihm", "beta_los"):
            if not math.isfinite(getattr(self, name)):
                raise InvalidConfig(f"{name} must be finite")

    def events(self, s: SourceKind) -> float:
        return float(self.events_per_source.get(s.value, DEFAULT_EVENTS[s.value]))

    def vocab(self, s: SourceKind) -> int:
        return int(self.vocab_size_per_source.get(s.value, DEFAULT_VOCAB[s.value]))

    def signal(self, s: SourceKind) -> float:
        return float(self.signal_strength_per_source.get(s.value, 0.0))

    def with_null_signal(self) -> "GeneratorConfig":
        d = asdict(self)
        d["signal_strength_per_source"] = {s.value: 0.0 for s in ALL_SOURCES}
        return GeneratorConfig(**d)

    def to_json(self) -> dict:
        return asdict(self)

    @classmethod
    def from_json(cls, obj: Mapping | None) -> "GeneratorConfig":
        obj = dict(obj or {})
        unknown = set(obj) - set(cls.__dataclass_fields__)
        if unknown:
            raise InvalidConfig(f"unknown generator config fields: {sorted(unknown)}")
        cfg = cls()
        for k, v in obj.items():
            if isinstance(getattr(cfg, k), dict):
                merged = dict(getattr(cfg, k))
                merged.update(v)
                v = merged
            setattr(cfg, k, v)
        return cfg


def _normal_expectation(fn) -> float:
    phi = lambda z: math.exp(-0.5 * z * z) / math.sqrt(2 * math.pi)
    val, _ = integrate.quad(lambda z: fn(z) * phi(z), -12, 12, limit=200)
    return val


def solve_intercept(base_rate: float, beta: float) -> float:
    """Intercept ``alpha`` with ``E[sigmoid(alpha + beta z)] = base_rate`` for z ~ N(0, 1)."""
    f = lambda a: _normal_expectation(lambda z: float(expit(a + beta * z))) - base_rate
    return float(optimize.brentq(f, -60.0, 60.0, xtol=1e-12))


def bayes_auc_exact(base_rate: float, beta: float) -> float:
    """AUC of the latent risk against its outcome, by numerical integration.

    Class densities are ``phi(z) p(z)`` and ``phi(z) (1 - p(z))``; the AUC is
    ``P(z1 > z0)`` under them, computed as a one-dimensional integral using
    the normal CDF weighted by the negative-class mass below ``z``.
    """
    if beta == 0:
        return 0.5
    alpha = solve_intercept(base_rate, beta)
    zs = np.linspace(-10, 10, 20001)
    phi = np.exp(-0.5 * zs**2) / math.sqrt(2 * math.pi)
    p = expit(alpha + beta * zs)
    f1 = phi * p
    f0 = phi * (1 - p)
    dz = zs[1] - zs[0]
    # trapezoid cumulative mass of negatives below each grid point
    cum0 = np.concatenate([[0.0], np.cumsum((f0[1:] + f0[:-1]) * dz / 2)])
    num = integrate.trapezoid(f1 * cum0, zs)
    return float(num / (integrate.trapezoid(f1, zs) * integrate.trapezoid(f0, zs)))


def bayes_auc(cfg: GeneratorConfig, n_mc: int = 100_000, label: str = "ihm", seed: int | None = None) -> tuple[float, float]:
    """Monte-Carlo AUC of the true latent risk against sampled outcomes.

    Returns ``(estimate, standard_error)``. No model can beat this in
    expectation on data from ``cfg``.
    """
    if n_mc < 10_000:
        raise ValueError("n_mc must be >= 10^4")
    beta, rate = (cfg.beta_ihm, cfg.base_rate_ihm) if label == "ihm" else (cfg.beta_los, cfg.base_rate_los)
    alpha = solve_intercept(rate, beta)
    rng = np.random.default_rng([cfg.seed if seed is None else seed, 7919])
    z = rng.standard_normal(n_mc)
    y = rng.random(n_mc) < expit(alpha + beta * z)
    s = ScoredSet(z, y)
    auc = roc_auc(s)
    return auc, auc_standard_error(auc, s.n_pos, n_mc - s.n_pos)


@dataclass
class _Admission:
    hadm: int
    subject: int
    z: float
    p_ihm: float
    p_los: float
    ihm: bool
    los_seconds: int
    intime: float
    exclusion: str  # "", "multi_stay", "short_stay"


def _codebook(vocab_size: int):
    """Split a source's code space into (high, low, neutral) code arrays."""
    n_codes = max(3, vocab_size // _N_VALUES)
    n_inf = max(1, n_codes // 5)
    codes = np.arange(n_codes)
    return codes[:n_inf], codes[n_inf : 2 * n_inf], codes[2 * n_inf :]


def _draw_codes(rng, n: int, z: float, strength: float, frac: float, book) -> np.ndarray:
    high, low, neutral = book
    informative = rng.random(n) < frac
    go_high = rng.random(n) < expit(strength * z)
    pick = rng.random(n)
    out = np.where(
        informative,
        np.where(go_high, high[(pick * len(high)).astype(int)], low[(pick * len(low)).astype(int)]),
        neutral[(pick * len(neutral)).astype(int)],
    )
    return out


def _draw_times(rng, n: int, intime: float, oow_frac: float) -> np.ndarray:
    offsets = rng.integers(0, WINDOW_SECONDS, size=n).astype(float)
    outside = rng.random(n) < oow_frac
    before = rng.random(n) < 0.5
    # out-of-window events land up to 6 h before intime or in the second 24 h
    alt = np.where(before, -rng.integers(1, 6 * 3600 + 1, size=n), WINDOW_SECONDS + rng.integers(0, WINDOW_SECONDS, size=n))
    return intime + np.where(outside, alt, offsets)


def _base_items(source: SourceKind) -> int:
    return {
        SourceKind.CHARTEVENTS: 200,
        SourceKind.INPUTEVENTS: 30000,
        SourceKind.OUTPUTEVENTS: 40000,
        SourceKind.LABEVENTS: 50000,
        SourceKind.MICROBIOLOGYEVENTS: 70000,
        SourceKind.PROCEDUREEVENTS: 220000,
    }.get(source, 0)


def _rows_for(source: SourceKind, rng, adm: _Admission, cfg: GeneratorConfig, book, word_book):
    """Yield CSV rows (dicts keyed by column) for one admission of one source."""
    n = int(rng.poisson(cfg.events(source)))
    if n == 0:
        return
    strength = cfg.signal(source)
    frac = cfg.informative_fraction
    times = _draw_times(rng, n, adm.intime, cfg.out_of_window_fraction)
    ids = {"SUBJECT_ID": adm.subject, "HADM_ID": adm.hadm}
    if source == SourceKind.NOTEEVENTS:
        cats = rng.integers(0, len(_NOTE_CATEGORIES), size=n)
        for t, c in zip(times, cats):
            words = _draw_codes(rng, cfg.words_per_note, adm.z, strength, frac, word_book)
            cat, desc = _NOTE_CATEGORIES[c]
            yield {**ids, "STORETIME": format_timestamp(t), "CATEGORY": cat, "DESCRIPTION": desc,
                   "TEXT": " ".join(f"w{w}" for w in words)}
        return
    codes = _draw_codes(rng, n, adm.z, strength, frac, book)
    values = rng.integers(0, _N_VALUES, size=n)
    missing = rng.random(n) < 0.02
    base = _base_items(source)
    for t, code, v, miss in zip(times, codes, values, missing):
        code = int(code)
        v = int(v)
        unit = "" if miss else _UNITS[code % len(_UNITS)]
        value = f"{(code % 97) + v * 0.5:g}"
        ts = format_timestamp(t)
        if source == SourceKind.CHARTEVENTS:
            charted = format_timestamp(t - int(rng.integers(0, 600)))
            yield {**ids, "ITEMID": base + code, "CHARTTIME": charted, "STORETIME": ts, "VALUE": value,
                   "VALUEUOM": unit, "LABEL": _LABEL_WORDS[code % len(_LABEL_WORDS)]}
        elif source == SourceKind.LABEVENTS:
            yield {**ids, "ITEMID": base + code, "CHARTTIME": ts, "VALUE": value, "VALUEUOM": unit,
                   "FLAG": "abnormal" if v == _N_VALUES - 1 else ""}
        elif source == SourceKind.INPUTEVENTS:
            yield {**ids, "ITEMID": base + code, "STORETIME": ts, "AMOUNT": value, "AMOUNTUOM": unit}
        elif source in (SourceKind.OUTPUTEVENTS, SourceKind.PROCEDUREEVENTS):
            yield {**ids, "ITEMID": base + code, "STORETIME": ts, "VALUE": value, "VALUEUOM": unit}
        elif source == SourceKind.MICROBIOLOGYEVENTS:
            yield {**ids, "CHARTTIME": ts, "SPEC_ITEMID": base + code, "ORG_ITEMID": 80000 + v,
                   "INTERPRETATION": _INTERPRETATIONS[v]}
        elif source == SourceKind.PRESCRIPTIONS:
            yield {**ids, "STARTDATE": ts, "DRUG": f"Drug {code} Tab", "DOSE_VAL_RX": f"{(v + 1) * 5}",
                   "DOSE_UNIT_RX": "" if miss else _DOSE_UNITS[code % len(_DOSE_UNITS)]}


def _columns(source: SourceKind) -> list[str]:
    cols = list(TABLE_SPECS[source].required)
    if source == SourceKind.CHARTEVENTS:
        cols.append("LABEL")
    return cols


def _admissions(cfg: GeneratorConfig) -> list[_Admission]:
    rng = np.random.default_rng([cfg.seed, 0])
    a_ihm = solve_intercept(cfg.base_rate_ihm, cfg.beta_ihm)
    a_los = solve_intercept(cfg.base_rate_los, cfg.beta_los)
    out = []
    hadm = 100000
    for subject in range(1, cfg.n_patients + 1):
        n_adm = 1 + int(rng.poisson(cfg.extra_admission_rate))
        t = _BASE_TIME + float(rng.integers(0, 3650)) * DAY
        for _ in range(n_adm):
            hadm += 1
            z = float(rng.standard_normal())
            p_ihm = float(expit(a_ihm + cfg.beta_ihm * z))
            p_los = float(expit(a_los + cfg.beta_los * z))
            ihm = bool(rng.random() < p_ihm)
            los = bool(rng.random() < p_los)
            u = rng.random()
            if u < cfg.multi_stay_fraction:
                exclusion = "multi_stay"
            elif u < cfg.multi_stay_fraction + cfg.short_stay_fraction:
                exclusion = "short_stay"
            else:
                exclusion = ""
            if exclusion == "short_stay":
                los_seconds = int(rng.integers(3 * 3600, DAY))
            elif los:
                los_seconds = int(rng.integers(7 * DAY, 21 * DAY))
            else:
                los_seconds = int(rng.integers(DAY, 7 * DAY))
            intime = t + float(rng.integers(0, DAY))
            out.append(_Admission(hadm, subject, z, p_ihm, p_los, ihm, los_seconds, intime, exclusion))
            t = intime + los_seconds + float(rng.integers(30, 400)) * DAY
    return out


def generate(cfg: GeneratorConfig, out_dir) -> dict:
    """Write all ten CSV tables plus ``truth/`` sidecars into ``out_dir``.

    Returns a summary dict (also written to ``truth/summary.json``).
    Output is byte-identical for identical configs.
    """
    cfg.validate()
    out = Path(out_dir)
    (out / "truth").mkdir(parents=True, exist_ok=True)
    adms = _admissions(cfg)

    with atomic_open(out / "admissions.csv") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(ADMISSIONS_COLUMNS)
        for a in adms:
            w.writerow([a.subject, a.hadm, int(a.ihm)])

    icu_id = 200000
    with atomic_open(out / "icustays.csv") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(ICUSTAYS_COLUMNS)
        for a in adms:
            icu_id += 1
            w.writerow([a.subject, a.hadm, icu_id, format_timestamp(a.intime), format_timestamp(a.intime + a.los_seconds)])
            if a.exclusion == "multi_stay":
                icu_id += 1
                second = a.intime + a.los_seconds + 3600
                w.writerow([a.subject, a.hadm, icu_id, format_timestamp(second), format_timestamp(second + 2 * DAY)])

    counts = {}
    word_book = _codebook(cfg.vocab(SourceKind.NOTEEVENTS))
    for idx, source in enumerate(ALL_SOURCES):
        rng = np.random.default_rng([cfg.seed, 1 + idx])
        book = _codebook(cfg.vocab(source))
        cols = _columns(source)
        n_rows = 0
        with atomic_open(out / f"{source.value}.csv") as fh:
            w = csv.DictWriter(fh, fieldnames=cols, lineterminator="\n")
            w.writeheader()
            for a in adms:
                for row in _rows_for(source, rng, a, cfg, book, word_book):
                    w.writerow(row)
                    n_rows += 1
        counts[source.value] = n_rows

    with atomic_open(out / "truth" / "admissions_truth.csv") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["HADM_ID", "Z", "P_IHM", "P_LOS"])
        for a in adms:
            w.writerow([a.hadm, repr(a.z), repr(a.p_ihm), repr(a.p_los)])
    with atomic_open(out / "truth" / "exclusions.csv") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["HADM_ID", "REASON"])
        for a in adms:
            if a.exclusion:
                w.writerow([a.hadm, a.exclusion])

    summary = {
        "config": cfg.to_json(),
        "n_admissions": len(adms),
        "n_excluded": sum(1 for a in adms if a.exclusion),
        "rows_per_table": counts,
        "alpha_ihm": solve_intercept(cfg.base_rate_ihm, cfg.beta_ihm),
        "alpha_los": solve_intercept(cfg.base_rate_los, cfg.beta_los),
    }
    with atomic_open(out / "truth" / "summary.json") as fh:
        json.dump(summary, fh, indent=2, sort_keys=True)
        fh.write("\n")
    return summary


def read_truth(data_dir) -> dict[int, dict[str, float]]:
    out = {}
    with open(Path(data_dir) / "truth" / "admissions_truth.csv", newline="", encoding="utf-8") as fh:
        for row in csv.DictReader(fh):
            out[int(row["HADM_ID"])] = {"z": float(row["Z"]), "p_ihm": float(row["P_IHM"]), "p_los": float(row["P_LOS"])}
    return out
