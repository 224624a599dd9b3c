"""Final evaluation of a searched algorithm pair on downstream datasets.

Per (dataset, shot, seed) cell: tune hyperparameters on the validation split
with seeded random search (log-uniform alphas, uniform integer topk), then
score the test split once with the winner.  Domain generalization freezes
everything fitted on the source task (few-shot features, channel indices,
hyperparameters, text embeddings) and only swaps in the target test features,
which the wire protocol expresses as a hybrid dataset file.
"""

from __future__ import annotations

import math
import os
import tempfile
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from .adaptation import HyperParams, TOPK_FRACTION
from .errors import DimensionMismatch, ExecutionError, NoViableTrial
from .fabric import ExecutionFabric, TaskRef
from .store import FeatureDataset, write_dataset

ALPHA_LO = 1e-9
ALPHA_HI = 100.0

# evaluation phase, observable by the split-access instrumentation
PHASE = {"current": "idle"}


@dataclass(frozen=True)
class AlgorithmPair:
    """A searched (or baseline) algorithm: logits code plus optional selection code."""

    lg_code: str
    fs_code: Optional[str] = None
    label: str = "searched"


@dataclass
class HpoSpace:
    alpha_lo: float = ALPHA_LO
    alpha_hi: float = ALPHA_HI
    include_topk: bool = True
    trials: int = 500
    explicit_points: Optional[Sequence[HyperParams]] = None

    def validate(self) -> None:
        if self.explicit_points is not None:
            if not self.explicit_points:
                raise ValueError("explicit point list must be non-empty")
            return
        if not (0 < self.alpha_lo <= self.alpha_hi):
            raise ValueError("need 0 < alpha_lo <= alpha_hi")
        if self.trials < 1:
            raise ValueError("trials must be >= 1")

    def draw(self, rng: np.random.Generator, d: int) -> HyperParams:
        lo, hi = math.log(self.alpha_lo), math.log(self.alpha_hi)
        alphas = [float(np.exp(rng.uniform(lo, hi))) for _ in range(3)]
        topk = int(rng.integers(1, d + 1)) if self.include_topk \
            else max(1, math.floor(TOPK_FRACTION * d))
        return HyperParams(w0=0.5, w1=0.5, topk=topk,
                           alpha0=alphas[0], alpha1=alphas[1], alpha2=alphas[2])


@dataclass
class HpoResult:
    hp: HyperParams
    val_accuracy: float
    trials_run: int
    trials_failed: int


def pair_accuracy(fabric: ExecutionFabric, pair: AlgorithmPair, ref: TaskRef,
                  hp: HyperParams, split: str) -> float:
    indices = None
    if pair.fs_code is not None:
        indices = fabric.call_feat_select(ref, pair.fs_code, hp)
    handle = fabric.call_logit_comput(ref, pair.lg_code, hp, indices=indices,
                                      split=split)
    return fabric.call_eval(handle)


def optimize_hyperparams(fabric: ExecutionFabric, pair: AlgorithmPair, ref: TaskRef,
                         space: HpoSpace, seed: int) -> HpoResult:
    """Seeded random search on the validation split; ties keep the earliest trial.

    Failing trials are skipped and counted; if every trial fails the search
    has nothing to return and raises NoViableTrial.
    """
    space.validate()
    d = fabric.task(ref).d
    rng = np.random.default_rng(seed)
    if space.explicit_points is not None:
        points = list(space.explicit_points)
    else:
        points = [space.draw(rng, d) for _ in range(space.trials)]

    PHASE["current"] = "hpo"
    best: Optional[tuple[float, HyperParams]] = None
    failed = 0
    try:
        for hp in points:
            try:
                acc = pair_accuracy(fabric, pair, ref, hp, "val")
            except ExecutionError:
                failed += 1
                continue
            if best is None or acc > best[0]:
                best = (acc, hp)
    finally:
        PHASE["current"] = "idle"
    if best is None:
        raise NoViableTrial(f"all {len(points)} trials failed")
    return HpoResult(hp=best[1], val_accuracy=best[0],
                     trials_run=len(points), trials_failed=failed)


@dataclass
class DownstreamReport:
    shots: list[int]
    cells: dict = field(default_factory=dict)   # (dataset_id, shot, seed) -> dict

    def per_shot_mean(self) -> dict[int, float]:
        out = {}
        for shot in self.shots:
            vals = [c["test_accuracy"] for (_, k, _), c in self.cells.items() if k == shot]
            out[shot] = float(np.mean(vals))
        return out

    def average(self) -> float:
        per_shot = self.per_shot_mean()
        return float(np.mean([per_shot[k] for k in self.shots]))

    def to_rows(self) -> list[tuple[str, float]]:
        per_shot = self.per_shot_mean()
        rows = [(str(k), per_shot[k]) for k in self.shots]
        rows.append(("average", self.average()))
        return rows

    def to_csv(self) -> str:
        lines = ["shot,accuracy"]
        lines += [f"{name},{value!r}" for name, value in self.to_rows()]
        return "\n".join(lines) + "\n"

    def to_json_summary(self) -> dict:
        return {
            "per_shot": {str(k): v for k, v in self.per_shot_mean().items()},
            "average": self.average(),
            "cells": [
                {"dataset": ds, "shot": shot, "seed": seed, **cell}
                for (ds, shot, seed), cell in sorted(self.cells.items())
            ],
        }


def evaluate_downstream(fabric: ExecutionFabric, pair: AlgorithmPair,
                        dataset_ids: Sequence[str], shots: Sequence[int],
                        seeds: Sequence[int], space: HpoSpace) -> DownstreamReport:
    """Per-cell validation tuning followed by one test scoring; means over
    datasets and seeds per shot, plus the grand average row."""
    report = DownstreamReport(shots=list(shots))
    for dataset_id in dataset_ids:
        for shot in shots:
            for seed in seeds:
                ref = TaskRef(dataset_id, shot, seed)
                result = optimize_hyperparams(fabric, pair, ref, space, seed)
                PHASE["current"] = "score"
                try:
                    test_acc = pair_accuracy(fabric, pair, ref, result.hp, "test")
                finally:
                    PHASE["current"] = "idle"
                report.cells[(dataset_id, shot, seed)] = {
                    "val_accuracy": result.val_accuracy,
                    "test_accuracy": test_acc,
                    "trials_failed": result.trials_failed,
                    "alpha0": result.hp.alpha0,
                    "alpha1": result.hp.alpha1,
                    "alpha2": result.hp.alpha2,
                    "topk": result.hp.topk,
                }
    return report


def hybrid_transfer_dataset(source: FeatureDataset, target: FeatureDataset) -> FeatureDataset:
    """Source classifier, target test set: everything train-derived (few-shot
    features, validation split, text embeddings) comes from the source."""
    if source.d != target.d or source.num_classes != target.num_classes:
        raise DimensionMismatch(
            f"source is d={source.d},C={source.num_classes}; "
            f"target is d={target.d},C={target.num_classes}"
        )
    return FeatureDataset(
        name=source.name,
        train_feats=source.train_feats,
        train_labels=source.train_labels,
        val_feats=source.val_feats,
        val_labels=source.val_labels,
        test_feats=target.test_feats,
        test_labels=target.test_labels,
        clip_weights=source.clip_weights,
    )


def domain_generalization_eval(fabric: ExecutionFabric, pair: AlgorithmPair,
                               source: FeatureDataset,
                               targets: dict[str, FeatureDataset],
                               space: HpoSpace, shots: int = 16, seed: int = 0,
                               work_dir: Optional[str] = None) -> dict[str, float]:
    """Accuracy per target domain under choices frozen on the source task."""
    with tempfile.TemporaryDirectory(dir=work_dir) as tmp:
        source_path = os.path.join(tmp, "source.evlf")
        write_dataset(source, source_path)
        source_id = fabric.register_dataset(source_path)
        source_ref = TaskRef(source_id, shots, seed)
        result = optimize_hyperparams(fabric, pair, source_ref, space, seed)

        accuracies: dict[str, float] = {}
        PHASE["current"] = "score"
        try:
            accuracies["source"] = pair_accuracy(fabric, pair, source_ref,
                                                 result.hp, "test")
            for label, target in targets.items():
                hybrid = hybrid_transfer_dataset(source, target)
                path = os.path.join(tmp, f"target_{label}.evlf")
                write_dataset(hybrid, path)
                ref = TaskRef(fabric.register_dataset(path), shots, seed)
                accuracies[label] = pair_accuracy(fabric, pair, ref, result.hp, "test")
        finally:
            PHASE["current"] = "idle"
    return accuracies
