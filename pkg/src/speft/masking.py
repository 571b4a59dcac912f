"""Binary sparsity masks built from salience scores by top-rho selection.

Global masks rank all layers' scores jointly and keep exactly
floor(rho * N_total) coordinates; local masks rank within each layer and keep
floor(rho * N_layer) per layer. Ties at the selection threshold break toward
the lowest flat index, so masks are deterministic for any score set.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass
from typing import Mapping

import numpy as np

from speft import fileio


class MaskError(ValueError):
    pass


@dataclass
class MaskSchedule:
    """interval <= 0 means one static mask built at step 1; interval >= 1
    refreshes whenever t is a multiple of the interval (and always at t=1)."""

    interval: int = -1

    @property
    def is_static(self) -> bool:
        return self.interval <= 0


def should_refresh(t: int, schedule: MaskSchedule) -> bool:
    if t < 1:
        raise MaskError(f"step must be >= 1, got {t}")
    if t == 1:
        return True
    return schedule.interval >= 1 and t % schedule.interval == 0


@dataclass
class SparsityMask:
    scope: str  # global | local
    rho: float
    layers: dict[str, np.ndarray]  # sorted row-major flat indices per layer
    layer_sizes: dict[str, int]
    step: int = 0
    metric: str | None = None

    def __post_init__(self):
        if self.scope not in ("global", "local"):
            raise MaskError(f"scope must be global or local, got {self.scope!r}")
        for name, idx in self.layers.items():
            idx = np.asarray(idx, dtype=np.int64)
            self.layers[name] = idx
            if idx.size:
                if idx[0] < 0 or idx[-1] >= self.layer_sizes[name]:
                    raise MaskError(f"{name}: index out of range for size {self.layer_sizes[name]}")
                if np.any(np.diff(idx) <= 0):
                    raise MaskError(f"{name}: indices must be strictly increasing")

    @property
    def nnz(self) -> int:
        return sum(idx.size for idx in self.layers.values())

    def counts(self) -> dict[str, int]:
        return {name: int(idx.size) for name, idx in self.layers.items()}


def _validate_scores(scores: Mapping[str, np.ndarray]) -> None:
    if not scores:
        raise MaskError("empty score set")
    for name, arr in scores.items():
        if not np.all(np.isfinite(arr)):
            raise MaskError(f"scores for {name} contain non-finite values")


def _check_rho(rho: float) -> None:
    if not (0.0 < rho <= 1.0):
        raise MaskError(f"rho must be in (0, 1], got {rho}")


def _top_k_flat(values: np.ndarray, k: int) -> np.ndarray:
    """Indices of the k largest values, ties broken by lowest index.

    Partial selection (partition plus a tie scan); the result is identical to
    a full sort by (value desc, index asc).
    """
    n = values.size
    if k <= 0:
        return np.empty(0, dtype=np.int64)
    if k >= n:
        return np.arange(n, dtype=np.int64)
    threshold = np.partition(values, n - k)[n - k]
    above = np.flatnonzero(values > threshold)
    need = k - above.size
    at_threshold = np.flatnonzero(values == threshold)[:need]
    return np.sort(np.concatenate([above, at_threshold])).astype(np.int64)


def budget(rho: float, n: int) -> int:
    return int(math.floor(rho * n))


def build_global_mask(
    scores: Mapping[str, np.ndarray], rho: float, step: int = 0, metric: str | None = None
) -> SparsityMask:
    """Top-rho selection over the concatenation of all layers' scores."""
    _check_rho(rho)
    _validate_scores(scores)
    names = list(scores)
    flats = [np.asarray(scores[n]).reshape(-1) for n in names]
    sizes = {n: f.size for n, f in zip(names, flats)}
    total = sum(sizes.values())
    k = budget(rho, total)
    picked = _top_k_flat(np.concatenate(flats), k)

    layers: dict[str, np.ndarray] = {}
    offset = 0
    for name, flat in zip(names, flats):
        in_layer = picked[(picked >= offset) & (picked < offset + flat.size)] - offset
        layers[name] = in_layer.astype(np.int64)
        offset += flat.size
    return SparsityMask("global", rho, layers, sizes, step=step, metric=metric)


def build_local_mask(
    scores: Mapping[str, np.ndarray], rho: float, step: int = 0, metric: str | None = None
) -> SparsityMask:
    """Independent top-rho selection inside each layer with a shared rho."""
    _check_rho(rho)
    _validate_scores(scores)
    layers: dict[str, np.ndarray] = {}
    sizes: dict[str, int] = {}
    for name, arr in scores.items():
        flat = np.asarray(arr).reshape(-1)
        sizes[name] = flat.size
        k = budget(rho, flat.size)
        if k == 0:
            warnings.warn(f"layer {name}: budget floor({rho} * {flat.size}) = 0, no trainable entries")
        layers[name] = _top_k_flat(flat, k)
    return SparsityMask("local", rho, layers, sizes, step=step, metric=metric)


@dataclass
class MaskDiff:
    entering: dict[str, np.ndarray]
    leaving: dict[str, np.ndarray]
    overlap: float


def mask_diff(old: SparsityMask, new: SparsityMask) -> MaskDiff:
    """Exact per-layer set difference; overlap = |old ∩ new| / |old|."""
    if set(old.layers) != set(new.layers):
        raise MaskError("mask_diff: layer sets differ")
    entering = {}
    leaving = {}
    shared = 0
    for name in old.layers:
        o, n = old.layers[name], new.layers[name]
        entering[name] = np.setdiff1d(n, o, assume_unique=True)
        leaving[name] = np.setdiff1d(o, n, assume_unique=True)
        shared += np.intersect1d(o, n, assume_unique=True).size
    old_total = old.nnz
    overlap = shared / old_total if old_total else (1.0 if new.nnz == 0 else 0.0)
    return MaskDiff(entering, leaving, overlap)


def save_mask(path, mask: SparsityMask) -> None:
    fileio.save_mask_data(path, mask.layers, mask.layer_sizes, mask.scope, mask.rho, mask.metric, mask.step)


def load_mask(path) -> SparsityMask:
    layers, sizes, header = fileio.load_mask_data(path)
    return SparsityMask(
        scope=header["scope"],
        rho=header["rho"],
        layers=layers,
        layer_sizes=sizes,
        step=header["step"],
        metric=header.get("metric"),
    )
