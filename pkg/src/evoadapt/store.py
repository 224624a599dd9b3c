"""Feature-space datasets: container I/O, few-shot sampling, synthesis.

All classification tasks are expressed over pre-extracted, unit-normalized
features; no encoder ever runs here.  The on-disk container (``EVLF``) and
the few-shot sampling recipe are wire contracts shared with out-of-process
workers, so both are pinned exactly (see README, "File and task contracts").
"""

from __future__ import annotations

import hashlib
import json
import struct
from dataclasses import dataclass, field

import numpy as np

from .errors import (
    BadMagic,
    InsufficientSamples,
    InvalidSpec,
    LabelOutOfRange,
    NormOutOfRange,
    ShapeMismatch,
    VersionMismatch,
)

MAGIC = b"EVLF"
VERSION = 1

# Optional observer for split access, fn(source_name, split_name).  All feature
# and label reads go through FeatureDataset.split / FewShotTask.split, so a
# hook here sees every data touch; tests use it to prove the hyperparameter
# stage never reads the test split.
_split_access_hook = None


def set_split_access_hook(fn) -> None:
    global _split_access_hook
    _split_access_hook = fn

# Row norms within RENORM_TOL of 1 are silently re-normalized on load
# (tolerates fp16-roundtripped inputs); larger deviations are corrupt data.
NORM_TOL = 1e-3
RENORM_TOL = 1e-2

SHOT_CHOICES = (1, 2, 4, 8, 16)


@dataclass
class FeatureDataset:
    """Unit-normalized image features, labels and per-class text embeddings."""

    name: str
    train_feats: np.ndarray   # (n_train, d) float32, unit rows
    train_labels: np.ndarray  # (n_train,) int32 in [0, C)
    val_feats: np.ndarray
    val_labels: np.ndarray
    test_feats: np.ndarray
    test_labels: np.ndarray
    clip_weights: np.ndarray  # (d, C) float32, unit columns

    @property
    def d(self) -> int:
        return int(self.clip_weights.shape[0])

    @property
    def num_classes(self) -> int:
        return int(self.clip_weights.shape[1])

    def split(self, name: str) -> tuple[np.ndarray, np.ndarray]:
        if name not in ("train", "val", "test"):
            raise KeyError(f"unknown split {name!r}")
        if _split_access_hook is not None:
            _split_access_hook(self.name, name)
        return getattr(self, f"{name}_feats"), getattr(self, f"{name}_labels")

    def validate(self) -> None:
        d, C = self.clip_weights.shape
        if d <= 0 or C <= 0:
            raise ShapeMismatch("d and C must be positive")
        for split in ("train", "val", "test"):
            # direct attribute access: integrity checking is not data
            # consumption and must stay invisible to the access hook
            feats = getattr(self, f"{split}_feats")
            labels = getattr(self, f"{split}_labels")
            if feats.ndim != 2 or feats.shape[1] != d:
                raise ShapeMismatch(f"{split}_feats must be (n, {d})")
            if labels.shape != (feats.shape[0],):
                raise ShapeMismatch(f"{split}_labels length mismatch")
            if feats.shape[0] == 0:
                raise ShapeMismatch(f"{split} split is empty")
            if labels.size and (labels.min() < 0 or labels.max() >= C):
                raise LabelOutOfRange(f"{split} labels outside [0, {C})")
            _check_unit_rows(feats, f"{split}_feats")
        _check_unit_rows(self.clip_weights.T, "clip_weights columns")


def _check_unit_rows(rows: np.ndarray, what: str) -> None:
    norms = np.linalg.norm(rows.astype(np.float64), axis=1)
    dev = np.abs(norms - 1.0)
    if dev.size and dev.max() > NORM_TOL:
        raise NormOutOfRange(f"{what}: norm deviates by {dev.max():.2e}")


def _renormalize_rows(rows: np.ndarray, what: str) -> np.ndarray:
    norms = np.linalg.norm(rows.astype(np.float64), axis=1)
    dev = np.abs(norms - 1.0)
    if dev.size and dev.max() >= RENORM_TOL:
        raise NormOutOfRange(f"{what}: norm deviates by {dev.max():.2e}")
    if dev.size and dev.max() > NORM_TOL:
        rows = (rows / norms[:, None]).astype(np.float32)
    return rows


# --- binary container --------------------------------------------------------
#
# Little-endian layout:
#   magic "EVLF" | u32 version | u64 header_len | UTF-8 JSON header
#   | train_feats f32 (n_train*d, row-major) | train_labels i32
#   | val_feats | val_labels | test_feats | test_labels
#   | clip_weights f32 (d*C, column-major)

def write_dataset(ds: FeatureDataset, path) -> None:
    ds.validate()
    header = {
        "name": ds.name,
        "d": ds.d,
        "C": ds.num_classes,
        "n_train": int(ds.train_feats.shape[0]),
        "n_val": int(ds.val_feats.shape[0]),
        "n_test": int(ds.test_feats.shape[0]),
    }
    blob = json.dumps(header, sort_keys=True).encode("utf-8")
    with open(path, "wb") as f:
        f.write(MAGIC)
        f.write(struct.pack("<I", VERSION))
        f.write(struct.pack("<Q", len(blob)))
        f.write(blob)
        for split in ("train", "val", "test"):
            # direct attribute access: serialization stays invisible to the
            # split-access hook, like validation
            feats = getattr(ds, f"{split}_feats")
            labels = getattr(ds, f"{split}_labels")
            f.write(np.ascontiguousarray(feats, dtype="<f4").tobytes())
            f.write(np.ascontiguousarray(labels, dtype="<i4").tobytes())
        f.write(np.asfortranarray(ds.clip_weights, dtype="<f4").tobytes(order="F"))


def load_dataset(path) -> FeatureDataset:
    with open(path, "rb") as f:
        raw = f.read()
    if raw[:4] != MAGIC:
        raise BadMagic(f"{path}: not an EVLF container")
    (version,) = struct.unpack_from("<I", raw, 4)
    if version != VERSION:
        raise VersionMismatch(f"{path}: container version {version}, expected {VERSION}")
    (hlen,) = struct.unpack_from("<Q", raw, 8)
    try:
        header = json.loads(raw[16 : 16 + hlen].decode("utf-8"))
        name = header["name"]
        d, C = int(header["d"]), int(header["C"])
        counts = [int(header[k]) for k in ("n_train", "n_val", "n_test")]
    except (ValueError, KeyError, UnicodeDecodeError) as exc:
        raise ShapeMismatch(f"{path}: bad header: {exc}") from None
    if d <= 0 or C <= 0 or any(n <= 0 for n in counts):
        raise ShapeMismatch(f"{path}: non-positive dimensions in header")

    offset = 16 + hlen
    expected = sum(n * d * 4 + n * 4 for n in counts) + d * C * 4
    if len(raw) - offset != expected:
        raise ShapeMismatch(
            f"{path}: payload is {len(raw) - offset} bytes, header implies {expected}"
        )

    def take(count, dtype):
        nonlocal offset
        arr = np.frombuffer(raw, dtype=dtype, count=count, offset=offset)
        offset += arr.nbytes
        return arr

    splits = {}
    for split, n in zip(("train", "val", "test"), counts):
        feats = take(n * d, "<f4").reshape(n, d).copy()
        labels = take(n, "<i4").copy()
        if labels.size and (labels.min() < 0 or labels.max() >= C):
            raise LabelOutOfRange(f"{path}: {split} label outside [0, {C})")
        splits[split] = (_renormalize_rows(feats, f"{split}_feats"), labels)
    w = take(d * C, "<f4").reshape(d, C, order="F").copy()
    w = _renormalize_rows(w.T, "clip_weights columns").T.copy()

    ds = FeatureDataset(
        name=name,
        train_feats=splits["train"][0],
        train_labels=splits["train"][1],
        val_feats=splits["val"][0],
        val_labels=splits["val"][1],
        test_feats=splits["test"][0],
        test_labels=splits["test"][1],
        clip_weights=w,
    )
    ds.validate()
    return ds


# --- few-shot sampling --------------------------------------------------------

@dataclass
class FewShotTask:
    """A k-shot view of a dataset; val/test tensors alias the parent arrays."""

    source: str
    shots: int
    seed: int
    train_feats: np.ndarray   # (shots*C, d), class-major order
    train_labels: np.ndarray  # (shots*C,)
    train_indices: np.ndarray
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
        if name not in ("train", "val", "test"):
            raise KeyError(f"unknown split {name!r}")
        if _split_access_hook is not None:
            _split_access_hook(self.source, name)
        return getattr(self, f"{name}_feats"), getattr(self, f"{name}_labels")


def task_rng_seed(name: str, shots: int, seed: int) -> int:
    digest = hashlib.sha256(f"{name}|{shots}|{seed}".encode("utf-8")).digest()
    return int.from_bytes(digest[:8], "little")


def few_shot_indices(train_labels: np.ndarray, num_classes: int,
                     name: str, shots: int, seed: int) -> np.ndarray:
    """Pinned stratified sampling.

    One PCG64 stream seeded from sha256(f"{name}|{shots}|{seed}"); for each
    class in ascending order, permute that class's row positions (ascending
    file order) and keep the first ``shots``.  Workers re-implement this
    recipe, so any change here is a protocol break.
    """
    rng = np.random.Generator(np.random.PCG64(task_rng_seed(name, shots, seed)))
    picked = []
    for c in range(num_classes):
        rows = np.flatnonzero(train_labels == c)
        if rows.size < shots:
            raise InsufficientSamples(
                f"class {c} has {rows.size} train samples, need {shots}"
            )
        picked.append(rng.permutation(rows)[:shots])
    return np.concatenate(picked)


def sample_few_shot(ds: FeatureDataset, shots: int, seed: int) -> FewShotTask:
    if shots < 1:
        raise InvalidSpec("shots must be >= 1")
    idx = few_shot_indices(ds.train_labels, ds.num_classes, ds.name, shots, seed)
    return FewShotTask(
        source=ds.name,
        shots=shots,
        seed=seed,
        train_feats=ds.train_feats[idx].copy(),
        train_labels=ds.train_labels[idx].copy(),
        train_indices=idx,
        val_feats=ds.val_feats,
        val_labels=ds.val_labels,
        test_feats=ds.test_feats,
        test_labels=ds.test_labels,
        clip_weights=ds.clip_weights,
    )


# --- synthetic data -----------------------------------------------------------

@dataclass
class SynthSpec:
    """Spherical-cluster generator settings.

    ``sigma`` spreads image features around their class mean, ``tau``
    misaligns the class text embedding from the same mean.
    """

    d: int
    num_classes: int
    train_per_class: int
    val_per_class: int = 16
    test_per_class: int = 32
    sigma: float = 0.1
    tau: float = 0.05
    name: str = field(default="synth")

    def validate(self) -> None:
        if self.d < 2 or self.num_classes < 2:
            raise InvalidSpec("need d >= 2 and num_classes >= 2")
        if min(self.train_per_class, self.val_per_class, self.test_per_class) < 1:
            raise InvalidSpec("per-class counts must be >= 1")
        if self.sigma < 0 or self.tau < 0:
            raise InvalidSpec("sigma and tau must be >= 0")


def _unit(rows: np.ndarray) -> np.ndarray:
    return (rows / np.linalg.norm(rows, axis=1, keepdims=True)).astype(np.float32)


def probe_dataset() -> FeatureDataset:
    """Pinned 2-class micro-dataset every worker embeds for health probes.

    Orthonormal class means, two exact-copy shots per class, test rows equal
    to the means: any sane classifier scores 1.0, which the monitor asserts.
    Part of the wire contract; do not change without versioning the protocol.
    """
    d, shots = 4, 2
    means = np.eye(2, d, dtype=np.float32)
    feats = np.repeat(means, shots, axis=0)
    labels = np.repeat(np.arange(2, dtype=np.int32), shots)
    return FeatureDataset(
        name="__probe__",
        train_feats=feats.copy(),
        train_labels=labels.copy(),
        val_feats=means.copy(),
        val_labels=np.arange(2, dtype=np.int32),
        test_feats=means.copy(),
        test_labels=np.arange(2, dtype=np.int32),
        clip_weights=np.ascontiguousarray(means.T),
    )


def synth_dataset(spec: SynthSpec, seed: int) -> FeatureDataset:
    """Class means on the unit sphere; samples are re-normalized mean + noise."""
    spec.validate()
    rng = np.random.Generator(np.random.PCG64(seed))
    means = _unit(rng.standard_normal((spec.num_classes, spec.d)))

    def draw(per_class: int) -> tuple[np.ndarray, np.ndarray]:
        noise = rng.standard_normal((spec.num_classes, per_class, spec.d))
        feats = means[:, None, :] + spec.sigma * noise
        labels = np.repeat(np.arange(spec.num_classes, dtype=np.int32), per_class)
        return _unit(feats.reshape(-1, spec.d)), labels

    train_feats, train_labels = draw(spec.train_per_class)
    val_feats, val_labels = draw(spec.val_per_class)
    test_feats, test_labels = draw(spec.test_per_class)
    text = _unit(means + spec.tau * rng.standard_normal((spec.num_classes, spec.d)))

    ds = FeatureDataset(
        name=spec.name,
        train_feats=train_feats,
        train_labels=train_labels,
        val_feats=val_feats,
        val_labels=val_labels,
        test_feats=test_feats,
        test_labels=test_labels,
        clip_weights=np.ascontiguousarray(text.T),
    )
    ds.validate()
    return ds
