"""Execution of arbitrary candidate code against task tensors.

Each request gets a fresh namespace with only the numeric runtime bound
(torch, F, math, np) plus the task tensors as call arguments.  A candidate
exception of any kind becomes a CandidateError payload; nothing a candidate
raises may take the worker process down.  Deadlines are the supervisor's
job: genuinely wedged code blocks this process until the monitor replaces it.
"""

from __future__ import annotations

import inspect
import math

import numpy as np
import torch
import torch.nn.functional as F

from .store import Task


class ExecError(Exception):
    kind = "CandidateError"


class DefinitionMissing(ExecError):
    kind = "DefinitionMissing"


class CandidateError(ExecError):
    kind = "CandidateError"


class InvalidOutput(ExecError):
    kind = "InvalidOutput"


def _namespace() -> dict:
    return {"torch": torch, "F": F, "math": math, "np": np}


def _load_function(code: str, name: str):
    namespace = _namespace()
    try:
        exec(compile(code, "<candidate>", "exec"), namespace)
    except KeyboardInterrupt:
        raise
    except BaseException as exc:
        raise CandidateError(f"{type(exc).__name__} while defining: {exc}") from None
    fn = namespace.get(name)
    if not callable(fn):
        raise DefinitionMissing(f"candidate defines no function {name!r}")
    return fn


def _call(fn, *args):
    try:
        return fn(*args)
    except KeyboardInterrupt:
        raise
    except BaseException as exc:
        raise CandidateError(f"{type(exc).__name__}: {exc}") from None


def _tensors(task: Task, split: str, half: bool):
    dtype = torch.float16 if half else torch.float32
    train = torch.from_numpy(task.train_feats).to(dtype)
    labels = torch.from_numpy(task.train_labels.astype(np.int64))
    feats = torch.from_numpy(task.split(split)[0]).to(dtype)
    weights = torch.from_numpy(task.clip_weights).to(dtype)
    return train, labels, feats, weights


def exec_feat_select(code: str, task: Task, w0: float, w1: float, topk: int,
                     half: bool = False) -> np.ndarray:
    fn = _load_function(code, "feat_selection")
    train, _, _, weights = _tensors(task, "test", half)
    out = _call(fn, weights, train, w0, w1, topk)
    return validate_indices(out, task.d, topk)


def validate_indices(out, d: int, topk: int) -> np.ndarray:
    if isinstance(out, torch.Tensor):
        if out.dtype.is_floating_point or out.dtype is torch.bool:
            raise InvalidOutput(f"indices must be integers, got {out.dtype}")
        arr = out.detach().cpu().numpy()
    else:
        try:
            arr = np.asarray(out)
        except Exception:
            raise InvalidOutput("indices are not array-like") from None
        if arr.size and not np.issubdtype(arr.dtype, np.integer):
            raise InvalidOutput(f"indices must be integers, got {arr.dtype}")
    arr = np.asarray(arr, dtype=np.int64).ravel()
    if arr.size != topk:
        raise InvalidOutput(f"expected {topk} indices, got {arr.size}")
    if arr.size == 0 or arr.min() < 0 or arr.max() >= d:
        raise InvalidOutput(f"indices outside [0, {d})")
    if np.unique(arr).size != arr.size:
        raise InvalidOutput("duplicate indices")
    return np.sort(arr)


def exec_logits(code: str, task: Task, indices, alpha0: float, alpha1: float,
                alpha2: float, split: str = "test", w0: float = 0.5,
                w1: float = 0.5, topk: int | None = None,
                half: bool = False) -> np.ndarray:
    fn = _load_function(code, "compute_logits")
    train, labels, feats, weights = _tensors(task, split, half)
    idx_tensor = None
    if indices is not None:
        idx_tensor = torch.from_numpy(np.asarray(indices, dtype=np.int64))
    params = list(inspect.signature(fn).parameters)
    if "topk" in params:
        # combined selection+logits entry point carries the selection knobs
        if topk is None:
            topk = max(1, math.floor(0.7 * task.d))
        out = _call(fn, train, labels, feats, weights, w0, w1, topk,
                    alpha0, alpha1, alpha2)
    else:
        out = _call(fn, train, labels, feats, weights, idx_tensor,
                    alpha0, alpha1, alpha2)
    return validate_logits(out, feats.shape[0], task.num_classes)


def validate_logits(out, n: int, num_classes: int) -> np.ndarray:
    if isinstance(out, torch.Tensor):
        arr = out.detach().cpu().to(torch.float64).numpy()
    else:
        try:
            arr = np.asarray(out, dtype=np.float64)
        except Exception:
            raise InvalidOutput("logits are not array-like") from None
    if arr.shape != (n, num_classes):
        raise InvalidOutput(f"logits shape {arr.shape}, expected {(n, num_classes)}")
    if not np.all(np.isfinite(arr)):
        raise InvalidOutput("non-finite values in logits")
    return arr


def top1_accuracy(logits: np.ndarray, labels: np.ndarray) -> float:
    pred = np.argmax(logits, axis=1)  # first (lowest) index wins ties
    return float(np.mean(pred == labels))
