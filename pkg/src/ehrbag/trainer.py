"""Mini-batch Adam training with early stopping, and hyperparameter search."""

from __future__ import annotations

import json
import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from typing import Callable, Mapping, Sequence

import numpy as np

from .dataset import DEFAULT_BATCH_SIZE, make_batches
from .errors import Diverged, EmptyDataset, NonFiniteActivation, NonFiniteGradient
from .nncore import (
    TRAIN,
    AdamState,
    ModelConfig,
    Parameters,
    adam_step,
    backward,
    batch_loss,
    bce_loss,
    forward,
)
from .schema import SourceKind

log = logging.getLogger(__name__)

MIN_IMPROVEMENT = 1e-5


@dataclass
class LoopConfig:
    max_epochs: int = 100
    patience: int = 5
    batch_size: int = DEFAULT_BATCH_SIZE
    seed: int = 0
    label: str = "ihm"

    @classmethod
    def from_json(cls, obj: Mapping | None) -> "LoopConfig":
        obj = dict(obj or {})
        known = {k: obj[k] for k in cls.__dataclass_fields__ if k in obj}
        return cls(**known)


class EarlyStopping:
    """Tracks the best validation loss; ``update`` returns True when training should stop."""

    def __init__(self, patience: int, min_delta: float = MIN_IMPROVEMENT):
        self.patience = patience
        self.min_delta = min_delta
        self.best = math.inf
        self.best_epoch = 0
        self.bad_epochs = 0

    def update(self, epoch: int, val_loss: float) -> bool:
        if val_loss < self.best - self.min_delta:
            self.best = val_loss
            self.best_epoch = epoch
            self.bad_epochs = 0
            return False
        self.bad_epochs += 1
        return self.bad_epochs >= self.patience

    @property
    def improved_last(self) -> bool:
        return self.bad_epochs == 0


@dataclass
class TrainRunResult:
    best_params: Parameters
    history: list[tuple[float, float]]
    best_epoch: int
    seeds: dict[str, int]

    @property
    def best_val_loss(self) -> float:
        return self.history[self.best_epoch - 1][1]


def _substream(seed: int, *tag: int) -> np.random.Generator:
    return np.random.default_rng([seed, *tag])


def train_model(
    cfg: ModelConfig,
    train_docs: Sequence,
    val_docs: Sequence,
    table_sizes: Mapping[SourceKind, int],
    loop: LoopConfig | None = None,
    init_params: Parameters | None = None,
) -> TrainRunResult:
    """Train from scratch and return the parameters of the best validation epoch.

    ``table_sizes`` gives the embedding rows per source (vocabulary size + 2),
    from vocabularies built on ``train_docs`` only.
    """
    loop = loop or LoopConfig()
    if not train_docs or not val_docs:
        raise EmptyDataset("training and validation sets must be non-empty")
    seeds = {"init": loop.seed, "shuffle": loop.seed + 1, "dropout": loop.seed + 2}
    params = init_params.copy() if init_params is not None else Parameters.init(cfg, table_sizes, _substream(seeds["init"]))
    state = AdamState.zeros_like(params)
    dropout_rng = _substream(seeds["dropout"])
    val_batches = make_batches(val_docs, 4096, None, label=loop.label, sources=cfg.sources)

    stopper = EarlyStopping(loop.patience)
    history: list[tuple[float, float]] = []
    best = params.copy()
    for epoch in range(1, loop.max_epochs + 1):
        batches = make_batches(
            train_docs, loop.batch_size, shuffle_seed=seeds["shuffle"] * 100003 + epoch,
            label=loop.label, sources=cfg.sources,
        )
        total = 0.0
        try:
            for batch in batches:
                prob, cache = forward(params, cfg, batch, TRAIN, dropout_rng)
                total += bce_loss(prob, batch.labels) * len(batch)
                grads = backward(cache, batch.labels)
                adam_step(params, grads, state, cfg.learning_rate)
            val_loss = batch_loss(params, cfg, val_batches)
        except (NonFiniteActivation, NonFiniteGradient) as exc:
            raise Diverged(f"epoch {epoch}: {exc}") from exc
        train_loss = total / len(train_docs)
        if not (math.isfinite(train_loss) and math.isfinite(val_loss)):
            raise Diverged(f"epoch {epoch}: non-finite loss")
        history.append((train_loss, val_loss))
        stop = stopper.update(epoch, val_loss)
        if stopper.improved_last:
            best = params.copy()
        log.debug("epoch %d train %.5f val %.5f", epoch, train_loss, val_loss)
        if stop:
            break
    return TrainRunResult(best, history, stopper.best_epoch, seeds)


# --- hyperparameter search ---------------------------------------------------


@dataclass(frozen=True)
class SearchSpace:
    embedding_dim: tuple[int, int] = (3, 15)
    embedding_dropout: tuple[float, float] = (0.0, 0.8)
    n_dense: tuple[int, ...] = (1, 2, 3, 4, 5)
    neurons_per_layer: tuple[int, ...] = (16, 32, 64, 128, 256, 512)
    hidden_dropout: tuple[float, float] = (0.0, 0.8)
    learning_rate: tuple[float, float] = (1e-4, 0.1)

    @classmethod
    def from_json(cls, obj: Mapping | None) -> "SearchSpace":
        obj = dict(obj or {})
        return cls(**{k: tuple(obj[k]) for k in cls.__dataclass_fields__ if k in obj})

    def contains(self, cfg: ModelConfig) -> bool:
        lo, hi = self.embedding_dim
        return (
            lo <= cfg.embedding_dim <= hi
            and self.embedding_dropout[0] <= cfg.embedding_dropout <= self.embedding_dropout[1]
            and cfg.n_dense in self.n_dense
            and cfg.neurons_per_layer in self.neurons_per_layer
            and self.hidden_dropout[0] <= cfg.hidden_dropout <= self.hidden_dropout[1]
            and self.learning_rate[0] <= cfg.learning_rate <= self.learning_rate[1]
        )


def sample_random(space: SearchSpace, sources: Sequence[SourceKind], rng: np.random.Generator) -> ModelConfig:
    """Uniform per field; learning rate log-uniform."""
    lo, hi = space.learning_rate
    return ModelConfig(
        sources=tuple(sources),
        embedding_dim=int(rng.integers(space.embedding_dim[0], space.embedding_dim[1] + 1)),
        embedding_dropout=float(rng.uniform(*space.embedding_dropout)),
        n_dense=int(rng.choice(space.n_dense)),
        neurons_per_layer=int(rng.choice(space.neurons_per_layer)),
        hidden_dropout=float(rng.uniform(*space.hidden_dropout)),
        learning_rate=float(math.exp(rng.uniform(math.log(lo), math.log(hi)))),
    )


Sampler = Callable[[SearchSpace, Sequence[SourceKind], np.random.Generator], ModelConfig]


@dataclass
class TrialRecord:
    trial: int
    config: ModelConfig
    best_val_loss: float
    best_epoch: int
    status: str

    def to_json(self) -> dict:
        return {
            "trial": self.trial,
            "config": self.config.to_json(),
            "best_val_loss": self.best_val_loss if math.isfinite(self.best_val_loss) else None,
            "best_epoch": self.best_epoch,
            "status": self.status,
        }


@dataclass
class TuneResult:
    best_config: ModelConfig
    best_run: TrainRunResult
    trials: list[TrialRecord]


def tune(
    space: SearchSpace,
    n_trials: int,
    sources: Sequence[SourceKind],
    train_docs: Sequence,
    val_docs: Sequence,
    table_sizes: Mapping[SourceKind, int],
    loop: LoopConfig | None = None,
    seed: int = 0,
    strategy: str | Sampler = "random",
    n_workers: int = 1,
) -> TuneResult:
    """Sample ``n_trials`` configs, train each, keep the lowest validation loss.

    Trial ``k`` draws its config from substream ``(seed, k)`` and trains with
    seed ``seed * 1000 + k``, so results do not depend on ``n_workers``.
    A diverged trial is logged with infinite loss and skipped.
    """
    if n_trials < 1:
        raise ValueError("n_trials must be >= 1")
    loop = loop or LoopConfig()
    sampler: Sampler = sample_random if strategy == "random" else strategy
    if not callable(sampler):
        raise ValueError(f"unknown strategy {strategy!r}")

    def run(k: int):
        cfg = sampler(space, sources, _substream(seed, k))
        trial_loop = LoopConfig(**{**asdict(loop), "seed": seed * 1000 + k})
        try:
            result = train_model(cfg, train_docs, val_docs, table_sizes, trial_loop)
        except Diverged as exc:
            log.info("trial %d diverged: %s", k, exc)
            return TrialRecord(k, cfg, math.inf, 0, "diverged"), None
        log.info("trial %d val %.5f (epoch %d)", k, result.best_val_loss, result.best_epoch)
        return TrialRecord(k, cfg, result.best_val_loss, result.best_epoch, "ok"), result

    if n_workers > 1:
        with ThreadPoolExecutor(n_workers) as pool:
            outcomes = list(pool.map(run, range(n_trials)))
    else:
        outcomes = [run(k) for k in range(n_trials)]

    trials = [rec for rec, _ in outcomes]
    ok = [(rec, res) for rec, res in outcomes if res is not None]
    if not ok:
        raise Diverged("every trial diverged")
    rec, res = min(ok, key=lambda item: (item[0].best_val_loss, item[0].trial))
    return TuneResult(rec.config, res, trials)


def write_trial_log(trials: Sequence[TrialRecord], fh) -> None:
    for rec in trials:
        fh.write(json.dumps(rec.to_json(), sort_keys=True) + "\n")
