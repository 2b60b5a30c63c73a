"""The synthetic dependency benchmark: a strongly coupled ground-truth CRF
(N=6 categories, K=8 predicates, potential scale 3) with about 5k training
and 1k test relationship instances per seed."""

from __future__ import annotations

import functools
from dataclasses import dataclass, replace
from typing import Optional

import numpy as np

from .data import Dataset, SyntheticSpec, instance_batch, split_dataset, synth_generate
from .drnet import (
    DrNetConfig,
    InstanceBatch,
    ModelConfig,
    RelationNet,
    TrainConfig,
    drnet_train,
    predicate_recall,
)
from .evaluation import prediction_perplexity
from .relmodel import CrfPotentials

BENCHMARK_EPOCHS = 15
# light L2 decay: without it the unshared stacks memorize the training split
BENCHMARK_WEIGHT_DECAY = 1e-3
# unshared stacks spend the first half tied (see TrainConfig.tied_epochs)
BENCHMARK_TIED_EPOCHS = 8


def dependency_spec(seed: int, potential_scale: float = 3.0, images: int = 6000) -> SyntheticSpec:
    # objects_per_image (2, 3): exactly one relationship per image, and a
    # far-away distractor object in roughly half of them
    return SyntheticSpec(n_categories=6, n_predicates=8, appearance_dim=16, union_dim=16,
                         class_separation=3.0, predicate_separation=1.0,
                         potential_scale=potential_scale, images=images,
                         objects_per_image=(2, 3), seed=seed)


@dataclass
class Benchmark:
    seed: int
    train: Dataset
    test: Dataset
    potentials: CrfPotentials
    train_batch: InstanceBatch
    test_batch: InstanceBatch


@functools.lru_cache(maxsize=8)
def load_benchmark(seed: int, potential_scale: float = 3.0, images: int = 6000) -> Benchmark:
    ds, theta = synth_generate(dependency_spec(seed, potential_scale, images))
    train, test = split_dataset(ds, [5 / 6, 1 / 6], seed=seed)
    return Benchmark(seed, train, test, theta, instance_batch(train), instance_batch(test))


def model_config(units: int = 8, share_weights: bool = False, relational: bool = True,
                 enforce_symmetry: bool = False) -> ModelConfig:
    return ModelConfig(6, 8, 16, 16, drnet=DrNetConfig(
        units=units, share_weights=share_weights, enforce_symmetry=enforce_symmetry,
        relational=relational))


def baseline_config() -> ModelConfig:
    """Unary-only recognizer: one unit without relational matrices."""
    return model_config(units=1, relational=False)


@functools.lru_cache(maxsize=64)
def trained_model(seed: int, units: int = 8, share_weights: bool = False, relational: bool = True,
                  epochs: int = BENCHMARK_EPOCHS) -> RelationNet:
    bench = load_benchmark(seed)
    cfg = model_config(units, share_weights, relational) if relational else baseline_config()
    hp = TrainConfig(epochs=epochs, seed=seed, weight_decay=BENCHMARK_WEIGHT_DECAY,
                     tied_epochs=0 if share_weights else min(BENCHMARK_TIED_EPOCHS, epochs))
    model, _ = drnet_train(bench.train_batch, cfg, hp,
                           label_space=bench.train.label_space)
    return model


def heldout_recall(model: RelationNet, seed: int) -> float:
    return predicate_recall(model, load_benchmark(seed).test_batch)


def heldout_perplexity(model: RelationNet, seed: int) -> float:
    bench = load_benchmark(seed)
    _, Qr, _ = model.predict(bench.test_batch)
    return prediction_perplexity(Qr, bench.test_batch.r)


def oracle_model(theta: CrfPotentials, label_space=None, units: int = 10) -> RelationNet:
    """A network that runs mean-field inference in the generating CRF.

    The pair compressor passes the enclosing-box feature straight through
    (relu(x) - relu(-x) = x) and ignores the spatial masks; every unit holds
    the CRF potentials.
    """
    N, K = theta.N, theta.K
    D_a, D_e = theta.W_a.shape[1], theta.W_r.shape[1]
    cfg = ModelConfig(N, K, D_a, D_e, pair_dim=D_e, hidden_dim=2 * D_e,
                      drnet=DrNetConfig(units=units, share_weights=True, enforce_symmetry=True))
    model = RelationNet(cfg, label_space).init_params(0)
    p = model.store.params
    eye = np.eye(D_e)
    p["pair.fc1.W"][...] = 0.0
    p["pair.fc1.W"][:D_e, :D_e] = eye
    p["pair.fc1.W"][D_e:, :D_e] = -eye
    p["pair.fc1.b"][...] = 0.0
    p["pair.fc2.W"][...] = np.hstack([eye, -eye])
    p["pair.fc2.b"][...] = 0.0
    model.tie_to_crf(theta)
    return model
