"""Reference implementations of the baseline training-free classifiers.

These are the native execution backend and the oracle the rest of the
system is tested against.  Everything here is a pure function of its
arguments; all arithmetic runs in float64 regardless of input dtype.

Conventions pinned for reproducibility:
  * zero-shot logits are scaled by 100 (CLIP convention),
  * argmax ties break to the lowest class index,
  * the hyperparameter grid is lexicographic in (alpha0, alpha1, alpha2),
  * channel sets are ascending, duplicate-free index arrays.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable, Optional, Sequence

import numpy as np

from .errors import (
    EmptyChannelSet,
    EmptyInput,
    ExecutionError,
    LengthMismatch,
    MissingClass,
    NonFinite,
    ShapeMismatch,
    SingularCovariance,
    TopkOutOfRange,
)
from .store import FewShotTask

ZERO_SHOT_SCALE = 100.0
ALPHA_GRID = (0.1, 1.0, 10.0)
TOPK_FRACTION = 0.7


@dataclass(frozen=True)
class HyperParams:
    w0: float = 0.5
    w1: float = 0.5
    topk: int = 1
    alpha0: float = 1.0
    alpha1: float = 1.0
    alpha2: float = 1.0

    def validate(self, d: Optional[int] = None) -> None:
        if self.topk < 1 or (d is not None and self.topk > d):
            raise TopkOutOfRange(f"topk={self.topk} outside [1, {d}]")
        if min(self.alpha0, self.alpha1, self.alpha2) <= 0:
            raise ValueError("alphas must be positive")


def default_theta0(d: int) -> HyperParams:
    """Selection hyperparameters held fixed during search."""
    return HyperParams(w0=0.5, w1=0.5, topk=math.floor(TOPK_FRACTION * d))


def hyper_grid(d: int) -> list[HyperParams]:
    """The 27-point search space: {0.5}^2 x {0.7d} x {0.1, 1, 10}^3."""
    if d < 2:
        raise ValueError("d must be >= 2")
    topk = math.floor(TOPK_FRACTION * d)
    return [
        HyperParams(w0=0.5, w1=0.5, topk=topk, alpha0=a0, alpha1=a1, alpha2=a2)
        for a0 in ALPHA_GRID
        for a1 in ALPHA_GRID
        for a2 in ALPHA_GRID
    ]


def as_channel_set(indices, d: int, expect_len: Optional[int] = None) -> np.ndarray:
    """Validate and canonicalize channel indices: unique ints in [0, d), ascending."""
    arr = np.asarray(indices)
    if arr.size and not np.issubdtype(arr.dtype, np.integer):
        raise TopkOutOfRange("channel indices must be integers")
    arr = arr.astype(np.int64).ravel()
    if arr.size == 0:
        raise EmptyChannelSet("empty channel set")
    if arr.min() < 0 or arr.max() >= d:
        raise TopkOutOfRange(f"channel index outside [0, {d})")
    if np.unique(arr).size != arr.size:
        raise TopkOutOfRange("duplicate channel indices")
    if expect_len is not None and arr.size != expect_len:
        raise TopkOutOfRange(f"expected {expect_len} channels, got {arr.size}")
    return np.sort(arr)


def _f64(x: np.ndarray) -> np.ndarray:
    return np.asarray(x, dtype=np.float64)


def _one_hot(labels: np.ndarray, num_classes: int) -> np.ndarray:
    out = np.zeros((labels.shape[0], num_classes), dtype=np.float64)
    out[np.arange(labels.shape[0]), labels] = 1.0
    return out


def clip_zero_shot_logits(test_feats: np.ndarray, clip_weights: np.ndarray) -> np.ndarray:
    test_feats, clip_weights = _f64(test_feats), _f64(clip_weights)
    if test_feats.ndim != 2 or clip_weights.ndim != 2:
        raise ShapeMismatch("expected 2-d feature and weight matrices")
    if test_feats.shape[1] != clip_weights.shape[0]:
        raise ShapeMismatch(
            f"features have d={test_feats.shape[1]}, weights d={clip_weights.shape[0]}"
        )
    return ZERO_SHOT_SCALE * (test_feats @ clip_weights)


def tip_adapter_logits(task: FewShotTask, hp: HyperParams, split: str = "test") -> np.ndarray:
    """Zero-shot logits plus a one-hot cache model over the few-shot features."""
    feats, _ = task.split(split)
    z = clip_zero_shot_logits(feats, task.clip_weights)
    train = _f64(task.train_feats)
    affinity = np.exp(-hp.alpha1 * (1.0 - _f64(feats) @ train.T))
    logits = z + hp.alpha0 * affinity @ _one_hot(task.train_labels, task.num_classes)
    if not np.all(np.isfinite(logits)):
        raise NonFinite("tip_adapter_logits produced non-finite values")
    return logits


def ape_channel_scores(clip_weights: np.ndarray, train_feats: np.ndarray,
                       train_labels: np.ndarray, hp: HyperParams) -> np.ndarray:
    """Per-channel criterion: text variance up, visual/text inter-class similarity down.

    score_c = w1 * Var_i(t[i, c])
              - w0 * (mean_{i != j} v[i, c] v[j, c] + mean_{i != j} t[i, c] t[j, c])

    with v the per-class mean train feature and t the class text embeddings;
    off-diagonal means run over ordered pairs.
    """
    t = _f64(clip_weights).T            # (C, d)
    num_classes = t.shape[0]
    train = _f64(train_feats)
    labels = np.asarray(train_labels)
    v = np.empty_like(t)
    for c in range(num_classes):
        rows = labels == c
        if not rows.any():
            raise MissingClass(f"class {c} missing from train_labels")
        v[c] = train[rows].mean(axis=0)

    def offdiag_mean(m: np.ndarray) -> np.ndarray:
        total = m.sum(axis=0) ** 2 - (m**2).sum(axis=0)
        return total / (num_classes * (num_classes - 1))

    var_t = t.var(axis=0)
    return hp.w1 * var_t - hp.w0 * (offdiag_mean(v) + offdiag_mean(t))


def ape_select_channels(clip_weights: np.ndarray, train_feats: np.ndarray,
                        train_labels: np.ndarray, hp: HyperParams) -> np.ndarray:
    d = clip_weights.shape[0]
    if not 1 <= hp.topk <= d:
        raise TopkOutOfRange(f"topk={hp.topk} outside [1, {d}]")
    scores = ape_channel_scores(clip_weights, train_feats, train_labels, hp)
    # stable sort on negated scores: ties go to the lowest channel index
    best = np.argsort(-scores, kind="stable")[: hp.topk]
    return np.sort(best.astype(np.int64))


def _renorm_rows(rows: np.ndarray) -> np.ndarray:
    return rows / np.linalg.norm(rows, axis=1, keepdims=True)


def ape_logits(task: FewShotTask, channels, hp: HyperParams, split: str = "test") -> np.ndarray:
    """Tip-style cache on selected channels with confidence-weighted soft labels."""
    channels = as_channel_set(channels, task.d)
    feats, _ = task.split(split)
    z = clip_zero_shot_logits(feats, task.clip_weights)
    train = _f64(task.train_feats)
    sub_test = _renorm_rows(_f64(feats)[:, channels])
    sub_train = _renorm_rows(train[:, channels])
    affinity = np.exp(-hp.alpha1 * (1.0 - sub_test @ sub_train.T))

    # soft label: one-hot scaled by the sample's zero-shot confidence on its own class
    w = _f64(task.clip_weights)
    own = np.einsum("nd,dn->n", train, w[:, task.train_labels])
    soft = _one_hot(task.train_labels, task.num_classes) * np.exp(
        hp.alpha2 * (own - 1.0)
    )[:, None]

    logits = z + hp.alpha0 * affinity @ soft
    if not np.all(np.isfinite(logits)):
        raise NonFinite("ape_logits produced non-finite values")
    return logits


GDA_EPS_SCALE = 1e-4
GDA_EPS_FLOOR = 1e-8


def gda_logits(task: FewShotTask, hp: HyperParams, split: str = "test",
               eps: Optional[float] = None) -> np.ndarray:
    """Zero-shot logits plus a shared-covariance Gaussian discriminant.

    The covariance is the maximum-likelihood pooled estimate; ``eps`` defaults
    to 1e-4 * mean(diag(cov)) + 1e-8 ridge.  Class priors are uniform.
    """
    feats, _ = task.split(split)
    z = clip_zero_shot_logits(feats, task.clip_weights)
    train = _f64(task.train_feats)
    labels = task.train_labels
    num_classes, d = task.num_classes, task.d

    mu = np.empty((num_classes, d), dtype=np.float64)
    for c in range(num_classes):
        rows = labels == c
        if not rows.any():
            raise MissingClass(f"class {c} missing from train_labels")
        mu[c] = train[rows].mean(axis=0)
    resid = train - mu[labels]
    cov = resid.T @ resid / train.shape[0]
    if eps is None:
        eps = GDA_EPS_SCALE * float(np.mean(np.diag(cov))) + GDA_EPS_FLOOR
    try:
        precision = np.linalg.inv(cov + eps * np.eye(d))
    except np.linalg.LinAlgError as exc:
        raise SingularCovariance(str(exc)) from None
    if not np.all(np.isfinite(precision)):
        raise SingularCovariance("non-finite precision matrix")

    weight = precision @ mu.T                                   # (d, C)
    bias = math.log(1.0 / num_classes) - 0.5 * np.einsum(
        "cd,dc->c", mu, weight
    )
    logits = z + hp.alpha0 * (_f64(feats) @ weight + bias)
    if not np.all(np.isfinite(logits)):
        raise NonFinite("gda_logits produced non-finite values")
    return logits


def top1_accuracy(logits: np.ndarray, labels: np.ndarray) -> float:
    logits = np.asarray(logits)
    labels = np.asarray(labels)
    if logits.ndim != 2:
        raise ShapeMismatch("logits must be 2-d")
    if logits.shape[0] == 0:
        raise EmptyInput("no rows to score")
    if logits.shape[0] != labels.shape[0]:
        raise LengthMismatch(f"{logits.shape[0]} rows vs {labels.shape[0]} labels")
    pred = np.argmax(logits, axis=1)  # ties break to the lowest index
    return float(np.mean(pred == labels))


# --- fitness -------------------------------------------------------------------
#
# fs(task, theta0) -> channel indices (or None for algorithms without selection)
# lg(task, channels, theta1) -> top-1 accuracy on the task's test split
#
# The callables hide the execution route: the native route composes the
# functions above with top1_accuracy; the fabric route goes through the
# /feat_select, /logit_comput and /eval services.

SelectFn = Callable[[FewShotTask, HyperParams], Optional[np.ndarray]]
ScoreFn = Callable[[FewShotTask, Optional[np.ndarray], HyperParams], float]


def fitness_of(fs: Optional[SelectFn], lg: ScoreFn,
               tasks: Sequence[FewShotTask], grid: Sequence[HyperParams]) -> float:
    """1 minus the grid-maximized test accuracy, averaged over tasks.

    Selection runs once per task with theta0 fixed at (0.5, 0.5, floor(0.7 d));
    only the alphas vary over the grid.  Execution failures propagate with the
    failing grid point attached.
    """
    if not tasks:
        raise ValueError("tasks must be non-empty")
    if not grid:
        raise ValueError("grid must be non-empty")
    total = 0.0
    for task in tasks:
        theta0 = default_theta0(task.d)
        try:
            channels = fs(task, theta0) if fs is not None else None
        except ExecutionError as exc:
            if exc.hyperparams is None:
                exc.hyperparams = theta0
            raise
        best = 0.0
        for theta1 in grid:
            try:
                acc = float(lg(task, channels, theta1))
            except ExecutionError as exc:
                if exc.hyperparams is None:
                    exc.hyperparams = theta1
                raise
            if acc > best:
                best = acc
        total += best
    return 1.0 - total / len(tasks)


def native_select_fn(which: str = "ape") -> SelectFn:
    if which != "ape":
        raise ValueError(f"unknown native selection {which!r}")

    def fs(task: FewShotTask, hp: HyperParams) -> np.ndarray:
        return ape_select_channels(task.clip_weights, task.train_feats,
                                   task.train_labels, hp)

    return fs


def native_score_fn(which: str, split: str = "test") -> ScoreFn:
    """Accuracy through the reference logits functions, for use with fitness_of."""

    def lg(task: FewShotTask, channels, hp: HyperParams) -> float:
        logits = native_logits(which, task, channels, hp, split=split)
        _, labels = task.split(split)
        return top1_accuracy(logits, labels)

    return lg


def native_logits(which: str, task: FewShotTask, channels, hp: HyperParams,
                  split: str = "test") -> np.ndarray:
    if which == "zero_shot":
        feats, _ = task.split(split)
        return clip_zero_shot_logits(feats, task.clip_weights)
    if which == "tip":
        return tip_adapter_logits(task, hp, split=split)
    if which == "ape":
        if channels is None:
            channels = np.arange(task.d, dtype=np.int64)
        return ape_logits(task, channels, hp, split=split)
    if which == "gda":
        return gda_logits(task, hp, split=split)
    raise ValueError(f"unknown native logits {which!r}")
