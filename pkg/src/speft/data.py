"""Dataset generation and ingestion for desk-scale experiments.

Three sources: a synthetic teacher-student regression generator, a byte-level
character LM corpus builder, and a CSV classification loader. Datasets are
immutable after construction; train/eval split membership is a pure function
of (seed, example index) so reruns reproduce splits exactly.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from typing import Mapping, NamedTuple

import numpy as np

from speft import models


class DataError(Exception):
    pass


class Batch(NamedTuple):
    inputs: np.ndarray
    targets: np.ndarray


def _splitmix64(x: int) -> int:
    """Deterministic 64-bit mix; split decisions depend on (seed, index) only."""
    x = (x + 0x9E3779B97F4A7C15) & 0xFFFFFFFFFFFFFFFF
    z = x
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & 0xFFFFFFFFFFFFFFFF
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & 0xFFFFFFFFFFFFFFFF
    return z ^ (z >> 31)


def _is_eval(seed: int, index: int, eval_fraction: float) -> bool:
    h = _splitmix64((seed & 0xFFFFFFFF) << 32 | (index & 0xFFFFFFFF))
    return (h % 10_000) < int(round(eval_fraction * 10_000))


@dataclass
class Dataset:
    kind: str  # regression | classification | lm
    train_inputs: np.ndarray
    train_targets: np.ndarray
    eval_inputs: np.ndarray
    eval_targets: np.ndarray
    seed: int
    meta: dict = field(default_factory=dict)

    @property
    def train_size(self) -> int:
        return self.train_inputs.shape[0]

    @property
    def eval_size(self) -> int:
        return self.eval_inputs.shape[0]

    def train_batch(self, indices: np.ndarray) -> Batch:
        return Batch(self.train_inputs[indices], self.train_targets[indices])

    def eval_batch(self) -> Batch:
        return Batch(self.eval_inputs, self.eval_targets)


class BatchSampler:
    """Shuffled mini-batch index stream; the permutation for an epoch is a
    pure function of (seed, epoch). Within an epoch every example appears
    exactly once; the final batch of an epoch may be short."""

    def __init__(self, n_examples: int, batch_size: int, seed: int):
        if n_examples < 1:
            raise DataError("sampler needs at least one example")
        if batch_size < 1:
            raise DataError("batch size must be >= 1")
        self.n = n_examples
        self.batch_size = batch_size
        self.seed = seed
        self.epoch = 0
        self._cursor = 0
        self._perm = self._permutation(0)

    def _permutation(self, epoch: int) -> np.ndarray:
        rng = np.random.default_rng(np.random.SeedSequence(entropy=self.seed, spawn_key=(epoch,)))
        return rng.permutation(self.n)

    def next_batch(self) -> np.ndarray:
        if self._cursor >= self.n:
            self.epoch += 1
            self._perm = self._permutation(self.epoch)
            self._cursor = 0
        end = min(self._cursor + self.batch_size, self.n)
        out = self._perm[self._cursor : end]
        self._cursor = end
        return out


# ---------------------------------------------------------------------------
# Teacher-student regression.
# ---------------------------------------------------------------------------

def build_teacher(dims, teacher_seed: int, activation: str = "tanh", weight_scale: float = 1.0):
    """A frozen MLP teacher with fan-in scaled weights so outputs are O(1)."""
    config = models.ModelConfig(architecture="mlp", widths=tuple(dims), activation=activation, seed=teacher_seed)
    teacher = models.build_model(config)
    for p in teacher.params:
        if p.kind == "weight":
            fan_in = p.tensor.shape[0]
            p.tensor.data = p.tensor.data * (weight_scale / (models.INIT_STD * np.sqrt(fan_in)))
    return teacher


def gen_teacher_student(
    dims,
    teacher_seed: int,
    noise_sigma: float,
    n_examples: int,
    seed: int | None = None,
    eval_fraction: float = 0.2,
    activation: str = "tanh",
    teacher_weights: Mapping[str, np.ndarray] | None = None,
) -> Dataset:
    """Draw x ~ N(0, I) and label with a frozen teacher MLP plus noise.

    ``teacher_weights`` overrides the generated teacher (used to label data
    with a perturbed teacher while keeping the input distribution fixed).
    """
    if n_examples < 1:
        raise DataError("n_examples must be >= 1")
    if seed is None:
        seed = teacher_seed + 1
    teacher = build_teacher(dims, teacher_seed, activation)
    if teacher_weights is not None:
        teacher.params.load_arrays({**teacher.params.arrays(), **dict(teacher_weights)})
    rng = np.random.default_rng(np.random.SeedSequence(entropy=seed, spawn_key=(0,)))
    x = rng.normal(size=(n_examples, dims[0]))
    y_clean = teacher.predictions(Batch(x, np.zeros(n_examples)))
    noise = rng.normal(size=y_clean.shape) * noise_sigma
    y = y_clean + noise

    is_eval = np.array([_is_eval(seed, i, eval_fraction) for i in range(n_examples)])
    if is_eval.all():
        is_eval[0] = False
    if not is_eval.any() and n_examples > 1 and eval_fraction > 0:
        is_eval[-1] = True
    ds = Dataset(
        kind="regression",
        train_inputs=x[~is_eval],
        train_targets=y[~is_eval],
        eval_inputs=x[is_eval],
        eval_targets=y[is_eval],
        seed=seed,
        meta={
            "task": "teacher_student",
            "dims": list(dims),
            "teacher_seed": teacher_seed,
            "noise_sigma": noise_sigma,
            "teacher_arrays": teacher.params.copy_arrays(),
            "n_features": int(dims[0]),
            "target_dim": int(dims[-1]),
        },
    )
    return ds


# ---------------------------------------------------------------------------
# Byte-level character LM corpus.
# ---------------------------------------------------------------------------

def gen_char_lm_corpus(
    source_path,
    seq_len: int,
    seed: int = 0,
    eval_fraction: float = 0.1,
) -> Dataset:
    """Sliding-window next-token sequences over a byte-level vocabulary.

    A window starting at position i spans seq_len+1 bytes (inputs plus
    shifted targets); the window count is len(text) - seq_len.
    """
    try:
        with open(source_path, "rb") as fh:
            raw = fh.read()
    except OSError as exc:
        raise DataError(f"cannot read corpus {source_path}: {exc}") from exc
    if not raw:
        raise DataError(f"corpus {source_path} is empty")
    return gen_char_lm_from_bytes(raw, seq_len, seed=seed, eval_fraction=eval_fraction)


def gen_char_lm_from_bytes(raw: bytes, seq_len: int, seed: int = 0, eval_fraction: float = 0.1) -> Dataset:
    if seq_len < 1:
        raise DataError("seq_len must be >= 1")
    if len(raw) < seq_len + 1:
        raise DataError(f"corpus too short: {len(raw)} bytes for seq_len {seq_len}")
    alphabet = sorted(set(raw))
    byte_to_id = {b: i for i, b in enumerate(alphabet)}
    ids = np.array([byte_to_id[b] for b in raw], dtype=np.int64)
    n_windows = len(raw) - seq_len
    windows = np.stack([ids[i : i + seq_len + 1] for i in range(n_windows)])

    is_eval = np.array([_is_eval(seed, i, eval_fraction) for i in range(n_windows)])
    if is_eval.all():
        is_eval[0] = False
    if not is_eval.any():
        is_eval[-1] = True
    inputs = windows[:, :-1]
    targets = windows[:, 1:]
    return Dataset(
        kind="lm",
        train_inputs=inputs[~is_eval],
        train_targets=targets[~is_eval],
        eval_inputs=inputs[is_eval],
        eval_targets=targets[is_eval],
        seed=seed,
        meta={
            "task": "char_lm",
            "vocab_size": len(alphabet),
            "seq_len": seq_len,
            "alphabet": [int(b) for b in alphabet],
            "window_count": n_windows,
        },
    )


def load_jsonl_tokens(
    path,
    seed: int = 0,
    eval_fraction: float = 0.1,
    vocab_size: int | None = None,
) -> Dataset:
    """Pre-tokenized LM sequences, one JSON record per line.

    Each line is either a bare integer list or an object with a "tokens"
    field; all sequences must share one length (>= 2). Targets are the inputs
    shifted by one position.
    """
    import json

    try:
        with open(path, encoding="utf-8") as fh:
            lines = fh.read().splitlines()
    except OSError as exc:
        raise DataError(f"cannot read {path}: {exc}") from exc
    sequences = []
    for line_no, line in enumerate(lines, start=1):
        if not line.strip():
            continue
        try:
            rec = json.loads(line)
        except json.JSONDecodeError as exc:
            raise DataError(f"{path}:{line_no}: invalid JSON ({exc})") from exc
        tokens = rec.get("tokens") if isinstance(rec, dict) else rec
        if not isinstance(tokens, list) or not all(isinstance(t, int) for t in tokens):
            raise DataError(f"{path}:{line_no}: expected an integer token list")
        sequences.append(tokens)
    if not sequences:
        raise DataError(f"{path}: no token sequences")
    length = len(sequences[0])
    if length < 2:
        raise DataError(f"{path}: sequences must have length >= 2, got {length}")
    for line_no, seq in enumerate(sequences, start=1):
        if len(seq) != length:
            raise DataError(f"{path}: sequence length mismatch at record {line_no}")
    arr = np.asarray(sequences, dtype=np.int64)
    if vocab_size is None:
        vocab_size = int(arr.max()) + 1
    elif arr.min() < 0 or arr.max() >= vocab_size:
        raise DataError(f"{path}: token outside [0, {vocab_size})")

    n = arr.shape[0]
    is_eval = np.array([_is_eval(seed, i, eval_fraction) for i in range(n)])
    if is_eval.all():
        is_eval[0] = False
    if not is_eval.any():
        is_eval[-1] = True
    inputs = arr[:, :-1]
    targets = arr[:, 1:]
    return Dataset(
        kind="lm",
        train_inputs=inputs[~is_eval],
        train_targets=targets[~is_eval],
        eval_inputs=inputs[is_eval],
        eval_targets=targets[is_eval],
        seed=seed,
        meta={"task": "jsonl_tokens", "vocab_size": vocab_size, "seq_len": length - 1},
    )


# ---------------------------------------------------------------------------
# CSV classification.
# ---------------------------------------------------------------------------

def load_csv_classification(
    path,
    label_column: str,
    feature_columns: list[str] | None = None,
    n_classes: int | None = None,
    seed: int = 0,
    eval_fraction: float = 0.2,
) -> Dataset:
    """Numeric features plus integer labels from an RFC-4180-style CSV.

    Standardization statistics come from the train split only and are applied
    to both splits.
    """
    try:
        with open(path, newline="", encoding="utf-8") as fh:
            reader = csv.reader(fh)
            rows = list(reader)
    except OSError as exc:
        raise DataError(f"cannot read {path}: {exc}") from exc
    if not rows:
        raise DataError(f"{path}: empty file")
    header = rows[0]
    if label_column not in header:
        raise DataError(f"{path}: label column {label_column!r} not in header {header}")
    if feature_columns is None:
        feature_columns = [c for c in header if c != label_column]
    missing = [c for c in feature_columns if c not in header]
    if missing:
        raise DataError(f"{path}: feature columns not in header: {missing}")
    feat_idx = [header.index(c) for c in feature_columns]
    label_idx = header.index(label_column)

    features = []
    labels = []
    for line_no, row in enumerate(rows[1:], start=2):
        if len(row) != len(header):
            raise DataError(f"{path}:{line_no}: expected {len(header)} fields, got {len(row)}")
        try:
            features.append([float(row[i]) for i in feat_idx])
            label = int(row[label_idx])
        except ValueError as exc:
            raise DataError(f"{path}:{line_no}: malformed value ({exc})") from exc
        labels.append(label)
    if not features:
        raise DataError(f"{path}: no data rows")

    x = np.asarray(features, dtype=np.float64)
    y = np.asarray(labels, dtype=np.int64)
    if n_classes is None:
        n_classes = int(y.max()) + 1
    bad = np.flatnonzero((y < 0) | (y >= n_classes))
    if bad.size:
        raise DataError(f"{path}: label {y[bad[0]]} outside [0, {n_classes}) at data row {bad[0] + 1}")

    is_eval = np.array([_is_eval(seed, i, eval_fraction) for i in range(len(y))])
    if (~is_eval).sum() == 0:
        is_eval[:] = False
    train_x, eval_x = x[~is_eval], x[is_eval]
    mean = train_x.mean(axis=0)
    std = train_x.std(axis=0)
    std[std == 0] = 1.0
    return Dataset(
        kind="classification",
        train_inputs=(train_x - mean) / std,
        train_targets=y[~is_eval],
        eval_inputs=(eval_x - mean) / std if eval_x.size else eval_x.reshape(0, x.shape[1]),
        eval_targets=y[is_eval],
        seed=seed,
        meta={
            "task": "csv_classification",
            "n_features": x.shape[1],
            "n_classes": n_classes,
            "feature_mean": mean.tolist(),
            "feature_std": std.tolist(),
            "source": str(path),
        },
    )


# ---------------------------------------------------------------------------
# Dataset specs (used by the CLI to describe data declaratively).
# ---------------------------------------------------------------------------

def dataset_from_spec(spec: Mapping) -> Dataset:
    kind = spec.get("type")
    if kind == "teacher_student":
        return gen_teacher_student(
            dims=tuple(spec["dims"]),
            teacher_seed=int(spec.get("teacher_seed", 0)),
            noise_sigma=float(spec.get("noise_sigma", 0.0)),
            n_examples=int(spec["n_examples"]),
            seed=spec.get("seed"),
            eval_fraction=float(spec.get("eval_fraction", 0.2)),
            activation=spec.get("activation", "tanh"),
        )
    if kind == "char_lm":
        return gen_char_lm_corpus(
            spec["path"],
            seq_len=int(spec["seq_len"]),
            seed=int(spec.get("seed", 0)),
            eval_fraction=float(spec.get("eval_fraction", 0.1)),
        )
    if kind == "csv_classification":
        return load_csv_classification(
            spec["path"],
            label_column=spec["label_column"],
            feature_columns=spec.get("feature_columns"),
            n_classes=spec.get("n_classes"),
            seed=int(spec.get("seed", 0)),
            eval_fraction=float(spec.get("eval_fraction", 0.2)),
        )
    if kind == "jsonl_tokens":
        return load_jsonl_tokens(
            spec["path"],
            seed=int(spec.get("seed", 0)),
            eval_fraction=float(spec.get("eval_fraction", 0.1)),
            vocab_size=spec.get("vocab_size"),
        )
    raise DataError(f"unknown dataset type {kind!r}")
