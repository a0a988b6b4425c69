"""Shared fixtures: one small trained 3-exit model reused across suites."""

import numpy as np
import pytest

from exitnet import data, models, training

SMALL_SHAPE = (16, 16, 3)
SMALL_CLASSES = 4


@pytest.fixture(scope="session")
def small_dataset():
    return data.synthetic_dataset(800, class_count=SMALL_CLASSES,
                                  input_shape=SMALL_SHAPE, seed=3)


@pytest.fixture(scope="session")
def small_spec():
    return models.ArchitectureSpec(family="plain-conv", stages=((8, 2), (16, 2), (32, 2)),
                                   input_shape=SMALL_SHAPE, class_count=SMALL_CLASSES,
                                   exit_positions=(2, 4, 6))


@pytest.fixture(scope="session")
def trained_model(small_spec, small_dataset):
    model = models.build_model(small_spec, seed=1)
    cfg = training.TrainingConfig(epochs=8, batch_size=32, learning_rate=0.05, seed=0)
    model, report = training.train(model, small_dataset, cfg)
    assert report.per_exit_accuracy[-1] >= 0.9, "fixture model failed to train"
    return model


def _train_family(family, dataset, seed):
    spec = models.ArchitectureSpec(family=family, stages=((8, 2), (16, 2), (32, 2)),
                                   input_shape=SMALL_SHAPE, class_count=SMALL_CLASSES,
                                   exit_positions=(2, 4, 6))
    model = models.build_model(spec, seed=seed)
    cfg = training.TrainingConfig(epochs=8, batch_size=32, learning_rate=0.05, seed=0)
    model, report = training.train(model, dataset, cfg)
    assert report.per_exit_accuracy[-1] >= 0.8, f"{family} fixture failed to train"
    return model


@pytest.fixture(scope="session")
def trained_residual(small_dataset):
    return _train_family("residual", small_dataset, seed=2)


@pytest.fixture(scope="session")
def trained_separable(small_dataset):
    return _train_family("depthwise-separable", small_dataset, seed=4)


@pytest.fixture()
def rng():
    return np.random.default_rng(0)
