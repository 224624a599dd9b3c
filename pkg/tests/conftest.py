from __future__ import annotations

import sys
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent))

from evoadapt.store import FeatureDataset, FewShotTask, SynthSpec, sample_few_shot, synth_dataset


def random_task(rng: np.random.Generator, d=6, num_classes=3, shots=2, n_test=5) -> FewShotTask:
    """Unit-norm random task, class-major train order, no dataset behind it."""

    def unit(rows):
        return (rows / np.linalg.norm(rows, axis=1, keepdims=True)).astype(np.float32)

    train = unit(rng.standard_normal((shots * num_classes, d)))
    labels = np.repeat(np.arange(num_classes, dtype=np.int32), shots)
    test = unit(rng.standard_normal((n_test, d)))
    test_labels = rng.integers(0, num_classes, size=n_test).astype(np.int32)
    w = unit(rng.standard_normal((num_classes, d))).T
    return FewShotTask(
        source="random",
        shots=shots,
        seed=0,
        train_feats=train,
        train_labels=labels,
        train_indices=np.arange(shots * num_classes),
        val_feats=test.copy(),
        val_labels=test_labels.copy(),
        test_feats=test,
        test_labels=test_labels,
        clip_weights=np.ascontiguousarray(w),
    )


@pytest.fixture
def small_synth() -> FeatureDataset:
    return synth_dataset(
        SynthSpec(d=8, num_classes=3, train_per_class=10, val_per_class=6,
                  test_per_class=12, sigma=0.2, tau=0.1, name="unit"),
        seed=11,
    )


@pytest.fixture
def separable_synth() -> FeatureDataset:
    return synth_dataset(
        SynthSpec(d=16, num_classes=4, train_per_class=32, val_per_class=16,
                  test_per_class=32, sigma=0.15, tau=0.05, name="sep"),
        seed=3,
    )


@pytest.fixture
def zero_noise_synth() -> FeatureDataset:
    return synth_dataset(
        SynthSpec(d=8, num_classes=3, train_per_class=8, val_per_class=4,
                  test_per_class=8, sigma=0.0, tau=0.0, name="clean"),
        seed=5,
    )


def holdout_tasks(ds: FeatureDataset, shots=(1, 2, 4, 8), seed=0) -> list[FewShotTask]:
    return [sample_few_shot(ds, k, seed) for k in shots]
