"""Shared fixtures: worlds, trained classifiers and fine-tuned models.

Training is fully seeded, so results are identical whether or not the on-disk
cache under tests/.cache is present; the cache only saves wall-clock time on
repeated runs. Delete the directory (or bump CACHE_VERSION) to retrain.
"""

from pathlib import Path

import numpy as np
import pytest

from condiff.classifier import (
    ClassifierModel,
    FactoredClassifier,
    calibrate_temperature,
    sample_offline_dataset,
    train_mle,
)
from condiff.finetune import AugmentedDrift, ExploratoryDistribution, FinetuneConfig, finetune
from condiff.guidance import classifier_free_finetune
from condiff.neural import load_checkpoint, restore_into, save_checkpoint
from condiff.sde import RngStream
from condiff.worlds import make_world_w1, make_world_w2

CACHE_VERSION = "v5"
CACHE_DIR = Path(__file__).parent / ".cache"


def _cache_path(tag: str) -> Path:
    CACHE_DIR.mkdir(exist_ok=True)
    return CACHE_DIR / f"{tag}_{CACHE_VERSION}.npz"


@pytest.fixture(scope="session")
def w1():
    return make_world_w1()


@pytest.fixture(scope="session")
def w2():
    return make_world_w2()


def _train_classifier(world, seed: int, axes: int) -> FactoredClassifier:
    ds = sample_offline_dataset(world, 40_000, RngStream(seed))
    train, val = ds.split(0.8, np.random.default_rng(seed + 1))
    models = []
    for axis in range(axes):
        model = ClassifierModel(
            world.dim, world.oracles[axis].n_classes, np.random.default_rng(seed + 2 + axis), hidden=(64, 64)
        )
        train_mle(model, train, np.random.default_rng(seed + 10 + axis), epochs=60, label_axis=axis)
        calibrate_temperature(model, val, label_axis=axis)
        models.append(model)
    return FactoredClassifier(models)


def _cached_classifier(tag: str, world, seed: int, axes: int) -> FactoredClassifier:
    path = _cache_path(tag)
    if path.exists():
        models = []
        blob = load_checkpoint(path)
        for axis in range(axes):
            model = ClassifierModel(
                world.dim, world.oracles[axis].n_classes, np.random.default_rng(0), hidden=(64, 64)
            )
            lo, hi = blob["header"]["meta"]["spans"][axis]
            model.param_vector().assign(blob["params"][lo:hi])
            model.temperature = blob["header"]["meta"]["temperatures"][axis]
            models.append(model)
        return FactoredClassifier(models)
    fact = _train_classifier(world, seed, axes)
    flats = [m.param_vector().flatten() for m in fact.models]
    spans = []
    pos = 0
    for f in flats:
        spans.append([pos, pos + len(f)])
        pos += len(f)

    class _Joint:
        def __init__(self, vec):
            self._vec = vec

        def flatten(self):
            return self._vec

        def names(self):
            return ["joint"]

        @property
        def parts(self):
            return [("joint", self._vec)]

    save_checkpoint(
        path,
        _Joint(np.concatenate(flats)),
        meta={"spans": spans, "temperatures": [m.temperature for m in fact.models]},
    )
    return fact


@pytest.fixture(scope="session")
def w1_classifier(w1):
    return _cached_classifier("w1_classifier", w1, seed=101, axes=1)


@pytest.fixture(scope="session")
def w2_classifier(w2):
    return _cached_classifier("w2_classifier", w2, seed=201, axes=2)


def _cached_finetuned(tag: str, world, classifier, cfg: FinetuneConfig) -> AugmentedDrift:
    aug = AugmentedDrift(world, np.random.default_rng(cfg.seed), embed_dim=cfg.embed_dim, hidden=cfg.hidden)
    path = _cache_path(tag)
    if path.exists():
        try:
            restore_into(aug.param_vector, load_checkpoint(path))
            return aug
        except Exception:
            path.unlink()  # stale layout: retrain
    import time

    t0 = time.perf_counter()
    finetune(world, classifier, aug, ExploratoryDistribution.for_world(world), cfg)
    save_checkpoint(path, aug.param_vector, meta={"gamma": cfg.gamma, "train_seconds": time.perf_counter() - t0})
    return aug


@pytest.fixture(scope="session")
def w1_tuned_g1(w1, w1_classifier):
    cfg = FinetuneConfig(
        gamma=1.0, batch=128, updates=2200, reward="classifier", seed=301, init_law="exact_prior"
    )
    return _cached_finetuned("w1_tuned_g1", w1, w1_classifier, cfg)


@pytest.fixture(scope="session")
def w1_tuned_g10(w1, w1_classifier):
    cfg = FinetuneConfig(
        gamma=10.0, batch=128, updates=1400, reward="classifier", seed=302, init_law="exact_prior"
    )
    return _cached_finetuned("w1_tuned_g10", w1, w1_classifier, cfg)


@pytest.fixture(scope="session")
def w2_tuned_g10(w2, w2_classifier):
    cfg = FinetuneConfig(
        gamma=10.0, batch=128, updates=1600, reward="classifier", seed=303, init_law="exact_prior"
    )
    return _cached_finetuned("w2_tuned_g10", w2, w2_classifier, cfg)


@pytest.fixture(scope="session")
def w1_classifier_free(w1, w1_classifier):
    aug = AugmentedDrift(w1, np.random.default_rng(401))
    path = _cache_path("w1_classifier_free")
    if path.exists():
        restore_into(aug.param_vector, load_checkpoint(path))
        return aug
    classifier_free_finetune(w1, w1_classifier, aug, 10_000, RngStream(402), updates=4000)
    save_checkpoint(path, aug.param_vector, meta={})
    return aug
