"""Reader side of the feature-container and task-sampling wire contracts.

Deliberately a re-implementation, not an import: the worker depends on the
orchestrator only through its published contracts (EVLF container layout,
sha256-seeded stratified sampling, probe micro-dataset).  Any drift from the
documented recipes is a protocol break and shows up as cross-backend
mismatches in the conformance tests.
"""

from __future__ import annotations

import hashlib
import json
import struct
from dataclasses import dataclass

import numpy as np

MAGIC = b"EVLF"
VERSION = 1


class ContainerError(Exception):
    pass


@dataclass
class Dataset:
    name: str
    train_feats: np.ndarray
    train_labels: np.ndarray
    val_feats: np.ndarray
    val_labels: np.ndarray
    test_feats: np.ndarray
    test_labels: np.ndarray
    clip_weights: np.ndarray

    @property
    def d(self) -> int:
        return int(self.clip_weights.shape[0])

    @property
    def num_classes(self) -> int:
        return int(self.clip_weights.shape[1])

    def split(self, name: str) -> tuple[np.ndarray, np.ndarray]:
        return getattr(self, f"{name}_feats"), getattr(self, f"{name}_labels")


def load_container(path: str) -> Dataset:
    with open(path, "rb") as f:
        raw = f.read()
    if raw[:4] != MAGIC:
        raise ContainerError(f"{path}: bad magic")
    (version,) = struct.unpack_from("<I", raw, 4)
    if version != VERSION:
        raise ContainerError(f"{path}: unsupported container version {version}")
    (hlen,) = struct.unpack_from("<Q", raw, 8)
    header = json.loads(raw[16 : 16 + hlen].decode("utf-8"))
    d, num_classes = int(header["d"]), int(header["C"])
    counts = [int(header[k]) for k in ("n_train", "n_val", "n_test")]
    offset = 16 + hlen
    expected = sum(n * d * 4 + n * 4 for n in counts) + d * num_classes * 4
    if len(raw) - offset != expected:
        raise ContainerError(f"{path}: truncated or oversized payload")

    def take(count, dtype):
        nonlocal offset
        arr = np.frombuffer(raw, dtype=dtype, count=count, offset=offset)
        offset += arr.nbytes
        return arr

    splits = {}
    for split, n in zip(("train", "val", "test"), counts):
        feats = take(n * d, "<f4").reshape(n, d).copy()
        labels = take(n, "<i4").copy()
        splits[split] = (feats, labels)
    weights = take(d * num_classes, "<f4").reshape(d, num_classes, order="F").copy()
    return Dataset(
        name=header["name"],
        train_feats=splits["train"][0], train_labels=splits["train"][1],
        val_feats=splits["val"][0], val_labels=splits["val"][1],
        test_feats=splits["test"][0], test_labels=splits["test"][1],
        clip_weights=weights,
    )


def dataset_id_for(path: str) -> str:
    with open(path, "rb") as f:
        return hashlib.sha256(f.read()).hexdigest()[:16]


def few_shot_indices(train_labels: np.ndarray, num_classes: int,
                     name: str, shots: int, seed: int) -> np.ndarray:
    """Pinned contract: sha256(f"{name}|{shots}|{seed}") seeds one PCG64
    stream; per class in ascending order, permute that class's row positions
    and keep the first `shots`."""
    digest = hashlib.sha256(f"{name}|{shots}|{seed}".encode("utf-8")).digest()
    rng = np.random.Generator(np.random.PCG64(int.from_bytes(digest[:8], "little")))
    picked = []
    for c in range(num_classes):
        rows = np.flatnonzero(train_labels == c)
        if rows.size < shots:
            raise ContainerError(f"class {c} has {rows.size} samples, need {shots}")
        picked.append(rng.permutation(rows)[:shots])
    return np.concatenate(picked)


@dataclass
class Task:
    train_feats: np.ndarray
    train_labels: np.ndarray
    val_feats: np.ndarray
    val_labels: np.ndarray
    test_feats: np.ndarray
    test_labels: np.ndarray
    clip_weights: np.ndarray

    @property
    def d(self) -> int:
        return int(self.clip_weights.shape[0])

    @property
    def num_classes(self) -> int:
        return int(self.clip_weights.shape[1])

    def split(self, name: str) -> tuple[np.ndarray, np.ndarray]:
        return getattr(self, f"{name}_feats"), getattr(self, f"{name}_labels")


def sample_task(ds: Dataset, shots: int, seed: int) -> Task:
    idx = few_shot_indices(ds.train_labels, ds.num_classes, ds.name, shots, seed)
    return Task(
        train_feats=ds.train_feats[idx].copy(),
        train_labels=ds.train_labels[idx].copy(),
        val_feats=ds.val_feats, val_labels=ds.val_labels,
        test_feats=ds.test_feats, test_labels=ds.test_labels,
        clip_weights=ds.clip_weights,
    )


def probe_dataset() -> Dataset:
    """Pinned 2-class micro-dataset shared with the orchestrator's monitor."""
    d, shots = 4, 2
    means = np.eye(2, d, dtype=np.float32)
    feats = np.repeat(means, shots, axis=0)
    labels = np.repeat(np.arange(2, dtype=np.int32), shots)
    return Dataset(
        name="__probe__",
        train_feats=feats.copy(), train_labels=labels.copy(),
        val_feats=means.copy(), val_labels=np.arange(2, dtype=np.int32),
        test_feats=means.copy(), test_labels=np.arange(2, dtype=np.int32),
        clip_weights=np.ascontiguousarray(means.T),
    )
