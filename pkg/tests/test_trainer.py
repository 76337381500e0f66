import math

import numpy as np
import pytest

from conftest import random_encoded_docs
from ehrbag.errors import Diverged, EmptyDataset
from ehrbag.nncore import ModelConfig, Parameters
from ehrbag.schema import SourceKind
from ehrbag.trainer import (
    EarlyStopping,
    LoopConfig,
    SearchSpace,
    sample_random,
    train_model,
    tune,
)
from ehrbag.vocab import EncodedDocument

CHART = SourceKind.CHARTEVENTS


def _separable(rng, n=50):
    # ids 2..5 mark positives, 6..9 negatives
    docs = []
    for i in range(n):
        y = i % 2 == 0
        lo = 2 if y else 6
        docs.append(EncodedDocument(i + 1, i + 1, {CHART: rng.integers(lo, lo + 4, size=5).astype(np.int64)}, y, False))
    return docs


def test_zero_learning_rate_is_a_no_op(rng):
    cfg = ModelConfig(sources=(CHART,), embedding_dim=4, learning_rate=0.0, embedding_dropout=0.3)
    docs = random_encoded_docs(rng, 40, {CHART: 12})
    init = Parameters.init(cfg, {CHART: 12}, rng)
    res = train_model(cfg, docs[:30], docs[30:], {CHART: 12}, LoopConfig(max_epochs=4, patience=10), init_params=init)
    for k in init:
        assert np.array_equal(init[k], res.best_params[k])
    vals = [v for _, v in res.history]
    assert len(vals) == 4 and len(set(vals)) == 1


def test_overfits_separable_task():
    rng = np.random.default_rng(0)
    docs = _separable(rng)
    cfg = ModelConfig(sources=(CHART,), embedding_dim=4, neurons_per_layer=16, learning_rate=0.05)
    res = train_model(cfg, docs, docs, {CHART: 10}, LoopConfig(max_epochs=200, patience=200, batch_size=16))
    assert res.history[-1][0] < 0.05
    # later epochs may improve by less than the 1e-5 threshold without moving best_epoch
    assert res.best_val_loss <= min(v for _, v in res.history) + 1e-5


def test_early_stopping_example():
    stop = EarlyStopping(patience=2)
    decisions = [stop.update(e, v) for e, v in enumerate([0.70, 0.65, 0.66, 0.67], start=1)]
    assert decisions == [False, False, False, True]
    assert stop.best_epoch == 2


def test_early_stopping_ignores_tiny_improvements():
    stop = EarlyStopping(patience=1)
    stop.update(1, 0.5)
    assert stop.update(2, 0.5 - 1e-6)


def test_best_epoch_has_min_val_loss(rng):
    docs = random_encoded_docs(rng, 60, {CHART: 12})
    cfg = ModelConfig(sources=(CHART,), embedding_dim=3, learning_rate=0.05)
    res = train_model(cfg, docs[:40], docs[40:], {CHART: 12}, LoopConfig(max_epochs=15, patience=3))
    vals = [v for _, v in res.history]
    assert res.best_val_loss == min(vals)


def test_empty_dataset(rng):
    cfg = ModelConfig(sources=(CHART,))
    with pytest.raises(EmptyDataset):
        train_model(cfg, [], random_encoded_docs(rng, 2, {CHART: 5}), {CHART: 5})


def test_sampled_configs_within_bounds():
    space = SearchSpace()
    assert space.embedding_dim == (3, 15) and space.learning_rate == (1e-4, 0.1)
    assert space.neurons_per_layer == (16, 32, 64, 128, 256, 512) and space.n_dense == (1, 2, 3, 4, 5)
    rng = np.random.default_rng(1)
    seen_dims = set()
    for _ in range(1000):
        cfg = sample_random(space, (CHART,), rng)
        assert space.contains(cfg)
        seen_dims.add(cfg.embedding_dim)
    assert seen_dims == set(range(3, 16))


def _tiny_task(rng):
    docs = _separable(rng, 40)
    return docs[:30], docs[30:]


def test_tune_single_trial(rng):
    train, val = _tiny_task(rng)
    loop = LoopConfig(max_epochs=3)
    res = tune(SearchSpace(), 1, (CHART,), train, val, {CHART: 10}, loop, seed=3)
    assert len(res.trials) == 1
    assert res.best_config == sample_random(SearchSpace(), (CHART,), np.random.default_rng([3, 0]))


def test_tune_deterministic_and_worker_independent(rng):
    train, val = _tiny_task(rng)
    loop = LoopConfig(max_epochs=3)
    runs = [tune(SearchSpace(), 5, (CHART,), train, val, {CHART: 10}, loop, seed=7, n_workers=w) for w in (1, 1, 3)]
    ref = [t.to_json() for t in runs[0].trials]
    for r in runs[1:]:
        assert r.best_config == runs[0].best_config
        assert [t.to_json() for t in r.trials] == ref


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_diverged_trial_is_recorded_and_skipped(rng):
    train, val = _tiny_task(rng)
    calls = []

    def sampler(space, sources, r):
        calls.append(1)
        lr = 1e300 if len(calls) == 1 else 0.01
        return ModelConfig(sources=tuple(sources), embedding_dim=3, learning_rate=lr)

    # an absurd step size pushes activations to inf
    res = tune(SearchSpace(), 2, (CHART,), train, val, {CHART: 10}, LoopConfig(max_epochs=3), strategy=sampler)
    assert res.trials[0].status == "diverged" and math.isinf(res.trials[0].best_val_loss)
    assert res.trials[0].to_json()["best_val_loss"] is None
    assert res.best_config.learning_rate == 0.01


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_all_trials_diverged(rng):
    train, val = _tiny_task(rng)

    def sampler(space, sources, r):
        return ModelConfig(sources=tuple(sources), embedding_dim=3, learning_rate=1e300)

    with pytest.raises(Diverged):
        tune(SearchSpace(), 2, (CHART,), train, val, {CHART: 10}, LoopConfig(max_epochs=3), strategy=sampler)
