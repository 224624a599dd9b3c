"""Directive-based execution of candidate code against the reference algorithms.

Candidate code whose first ``#native:`` line names a built-in routine runs
in-process, which keeps search and fabric tests deterministic and free of an
LLM or a code sandbox.  The grammar also includes fault-injection directives
(``broken``, ``wedge``, ``sleep``, ``nan``, ``handicap``) used by the test
suites to script failure and improvement sequences.
"""

from __future__ import annotations

import math
import time

import numpy as np

from .adaptation import (
    HyperParams,
    ape_select_channels,
    as_channel_set,
    native_logits,
)
from .errors import AdaptationError, CandidateError, InvalidOutput
from .store import FewShotTask

_ALIASES = {
    "ape_select": "select:ape",
    "zero_shot": "logits:zero_shot",
    "tip": "logits:tip",
    "ape": "logits:ape",
    "gda": "logits:gda",
}

WEDGE_SLEEP_S = 3600.0


def parse_directive(code: str) -> str | None:
    for line in code.splitlines():
        stripped = line.strip()
        if stripped.startswith("#native:"):
            directive = stripped[len("#native:"):].strip()
            return _ALIASES.get(directive, directive)
    return None


def _require_directive(code: str) -> str:
    directive = parse_directive(code)
    if directive is None:
        raise CandidateError("native backend needs a '#native:' directive")
    return directive


def _common_faults(directive: str) -> str | None:
    """Handle fault directives shared by both services; returns the follow-up
    directive for ``sleep`` or None when the directive was not a fault."""
    if directive == "broken":
        raise CandidateError("scripted failure")
    if directive == "wedge":
        time.sleep(WEDGE_SLEEP_S)
        raise CandidateError("woke up from wedge")
    if directive.startswith("sleep:"):
        time.sleep(float(directive.split(":", 1)[1]))
        return "slept"
    return None


def run_feat_select(code: str, task: FewShotTask, hp: HyperParams) -> np.ndarray:
    directive = _require_directive(code)
    if _common_faults(directive) == "slept":
        directive = "select:ape"

    if directive == "select:ape":
        try:
            raw = ape_select_channels(task.clip_weights, task.train_feats,
                                      task.train_labels, hp)
        except AdaptationError as exc:
            raise CandidateError(f"{type(exc).__name__}: {exc}") from None
    elif directive == "select:all":
        raw = np.arange(task.d, dtype=np.int64)
    elif directive == "select:first":
        raw = np.arange(hp.topk, dtype=np.int64)
    elif directive == "select:dup":
        raw = np.zeros(hp.topk, dtype=np.int64)
    elif directive == "select:floats":
        raw = np.linspace(0.0, 1.0, hp.topk)
    else:
        raise CandidateError(f"unknown selection directive {directive!r}")
    return validate_indices(raw, task.d, hp.topk)


def validate_indices(raw, d: int, topk: int) -> np.ndarray:
    try:
        return as_channel_set(raw, d, expect_len=topk)
    except AdaptationError as exc:
        raise InvalidOutput(f"bad channel indices: {exc}") from None


def run_logits(code: str, task: FewShotTask, indices, hp: HyperParams,
               split: str = "test") -> np.ndarray:
    directive = _require_directive(code)
    if _common_faults(directive) == "slept":
        directive = "logits:zero_shot"

    if directive.startswith("handicap:"):
        # scripted-search helper: force the first floor(frac*N) rows wrong,
        # so fitness of handicap:oracle:<frac> is exactly ceil-free frac
        _, base, frac = directive.split(":")
        logits = _base_logits(base, task, indices, hp, split)
        _, labels = task.split(split)
        cut = math.floor(float(frac) * logits.shape[0])
        logits[:cut] = 0.0
        logits[np.arange(cut), (labels[:cut] + 1) % task.num_classes] = 1.0
    elif directive.startswith("fragile:"):
        bad = float(directive.split(":", 1)[1])
        if hp.alpha0 == bad:
            raise CandidateError(f"scripted failure at alpha0={bad}")
        logits = _base_logits("logits:zero_shot", task, indices, hp, split)
    elif directive == "nan":
        logits = np.full((task.split(split)[0].shape[0], task.num_classes), np.nan)
    else:
        logits = _base_logits(directive, task, indices, hp, split)
    return validate_logits(logits, task, split)


def _base_logits(directive: str, task: FewShotTask, indices, hp: HyperParams,
                 split: str) -> np.ndarray:
    if directive.startswith("joint:"):
        kind = directive.split(":", 1)[1]
        theta0 = HyperParams(w0=hp.w0, w1=hp.w1, topk=hp.topk)
        try:
            selected = ape_select_channels(task.clip_weights, task.train_feats,
                                           task.train_labels, theta0)
        except AdaptationError as exc:
            raise CandidateError(f"{type(exc).__name__}: {exc}") from None
        return _dispatch(kind, task, selected, hp, split)
    kind = directive.split(":", 1)[1] if directive.startswith("logits:") else directive
    if kind == "oracle":
        # scripted-search helper: perfect logits, fitness exactly 0
        _, labels = task.split(split)
        logits = np.zeros((labels.shape[0], task.num_classes))
        logits[np.arange(labels.shape[0]), labels] = 1.0
        return logits
    return _dispatch(kind, task, indices, hp, split)


def _dispatch(kind: str, task, indices, hp, split) -> np.ndarray:
    try:
        return native_logits(kind, task, indices, hp, split=split)
    except AdaptationError as exc:
        raise CandidateError(f"{type(exc).__name__}: {exc}") from None
    except ValueError as exc:
        raise CandidateError(str(exc)) from None


def validate_logits(logits: np.ndarray, task: FewShotTask, split: str) -> np.ndarray:
    logits = np.asarray(logits)
    n = task.split(split)[0].shape[0]
    if logits.shape != (n, task.num_classes):
        raise InvalidOutput(
            f"logits shape {logits.shape}, expected {(n, task.num_classes)}"
        )
    if not np.all(np.isfinite(logits)):
        raise InvalidOutput("non-finite values in logits")
    return logits
