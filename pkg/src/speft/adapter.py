"""The trainable sparse delta over frozen base weights.

A SparseDelta stores values only at the coordinates a SparsityMask selected.
Each forward pass scatters the delta into a dense copy of the adapted layer
(the copy is a fresh autodiff leaf, so its dense gradient is the gradient of
the delta), and the optimizer updates only the stored values. Merging folds
the delta into the base in place and zeroes the values; the forward output is
bit-identical across a merge.

In-memory indices narrow to 32-bit when the layer size permits; the on-disk
adapter format always stores 64-bit indices.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Mapping

import numpy as np

from speft import fileio
from speft.autodiff import Tensor
from speft.masking import SparsityMask
from speft.models import Model, ParamSet


class AdapterError(Exception):
    pass


def _index_dtype(layer_size: int):
    return np.int32 if layer_size < 2**31 else np.int64


@dataclass
class SparseDelta:
    base: ParamSet
    mask: SparsityMask
    indices: dict[str, np.ndarray]
    values: dict[str, np.ndarray]

    @property
    def nnz(self) -> int:
        return sum(v.size for v in self.values.values())

    def index_bytes(self) -> int:
        return sum(idx.size * idx.dtype.itemsize for idx in self.indices.values())

    def value_bytes(self) -> int:
        return sum(v.size * v.dtype.itemsize for v in self.values.values())

    def weights_for_forward(self) -> dict[str, Tensor]:
        """Dense effective weights (base + scattered delta) as fresh leaves."""
        out = {}
        for name, idx in self.indices.items():
            dense = self.base[name].tensor.data.copy()
            dense.reshape(-1)[idx] += self.values[name]
            out[name] = Tensor(dense, requires_grad=True)
        return out

    def support_ok(self) -> bool:
        """Every nonzero value lies inside the governing mask (by construction
        the stored coordinates are exactly the mask's)."""
        return all(
            np.array_equal(self.indices[name].astype(np.int64), self.mask.layers[name])
            for name in self.indices
        )


def attach(mask: SparsityMask, base: ParamSet) -> SparseDelta:
    """Zero-initialized delta on the mask's support; forward equals the base."""
    adaptable = {p.name for p in base.adaptable_params()}
    indices = {}
    values = {}
    for name, idx in mask.layers.items():
        if name not in base:
            raise AdapterError(f"mask references unknown layer {name!r}")
        if name not in adaptable:
            raise AdapterError(f"mask references non-adaptable layer {name!r}")
        param = base[name]
        if mask.layer_sizes[name] != param.tensor.size:
            raise AdapterError(
                f"mask size {mask.layer_sizes[name]} != layer size {param.tensor.size} for {name!r}"
            )
        indices[name] = idx.astype(_index_dtype(param.tensor.size))
        values[name] = np.zeros(idx.size, dtype=param.tensor.dtype)
    return SparseDelta(base=base, mask=mask, indices=indices, values=values)


def masked_gradient(dense_grad: np.ndarray, indices: np.ndarray) -> np.ndarray:
    """Gather the dense gradient at the masked coordinates."""
    return dense_grad.reshape(-1)[indices].copy()


def scatter_values(values: np.ndarray, indices: np.ndarray, shape) -> np.ndarray:
    out = np.zeros(int(np.prod(shape)), dtype=values.dtype)
    out[indices] = values
    return out.reshape(shape)


# ---------------------------------------------------------------------------
# Optimizers over the sparse values (and, for baselines, dense arrays).
# ---------------------------------------------------------------------------

@dataclass
class OptimizerState:
    kind: str = "adamw"  # adamw | sgd
    lr: float = 1e-3
    betas: tuple = (0.9, 0.999)
    eps: float = 1e-8
    weight_decay: float = 0.0
    step_count: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)

    def ensure_buffers(self, values: Mapping[str, np.ndarray]) -> None:
        for name, arr in values.items():
            if name not in self.m or self.m[name].shape != arr.shape:
                self.m[name] = np.zeros_like(arr)
                self.v[name] = np.zeros_like(arr)

    def reinitialize(self, values: Mapping[str, np.ndarray]) -> None:
        """Zero all moment buffers and the step counter (fresh optimizer)."""
        self.step_count = 0
        self.m = {name: np.zeros_like(arr) for name, arr in values.items()}
        self.v = {name: np.zeros_like(arr) for name, arr in values.items()}


def _apply_update(param: np.ndarray, grad: np.ndarray, state: OptimizerState, name: str) -> None:
    if state.kind == "sgd":
        param -= state.lr * grad
        return
    t = state.step_count
    m = state.m[name]
    v = state.v[name]
    b1, b2 = state.betas
    m *= b1
    m += (1.0 - b1) * grad
    v *= b2
    v += (1.0 - b2) * grad * grad
    m_hat = m / (1.0 - b1**t)
    v_hat = v / (1.0 - b2**t)
    param -= state.lr * (m_hat / (np.sqrt(v_hat) + state.eps) + state.weight_decay * param)


def step(delta: SparseDelta, grads: Mapping[str, np.ndarray], state: OptimizerState) -> None:
    """One optimizer step on the stored values only.

    AdamW follows the decoupled-weight-decay recurrence with bias correction;
    SGD is v <- v - lr * g. Coordinates outside the mask are never touched.
    """
    if state.kind not in ("adamw", "sgd"):
        raise AdapterError(f"unknown optimizer {state.kind!r}")
    state.ensure_buffers(delta.values)
    state.step_count += 1
    for name, g in grads.items():
        vals = delta.values[name]
        if g.shape != vals.shape:
            raise AdapterError(f"{name}: gradient length {g.shape} != values {vals.shape}")
        if not np.all(np.isfinite(g)):
            bad = int(np.flatnonzero(~np.isfinite(g))[0])
            coord = int(delta.indices[name][bad])
            raise AdapterError(f"non-finite gradient in layer {name!r} at flat coordinate {coord}")
        _apply_update(vals, g, state, name)


class DenseOptimizer:
    """Same recurrences over full parameter tensors (baseline trainers)."""

    def __init__(self, tensors: Mapping[str, Tensor], kind: str = "adamw", lr: float = 1e-3,
                 betas: tuple = (0.9, 0.999), eps: float = 1e-8, weight_decay: float = 0.0):
        self.tensors = dict(tensors)
        self.state = OptimizerState(kind=kind, lr=lr, betas=betas, eps=eps, weight_decay=weight_decay)
        self.state.reinitialize({n: t.data for n, t in self.tensors.items()})

    def step(self, grads: Mapping[str, np.ndarray]) -> None:
        self.state.step_count += 1
        for name, g in grads.items():
            t = self.tensors[name]
            if not np.all(np.isfinite(g)):
                raise AdapterError(f"non-finite gradient in layer {name!r}")
            _apply_update(t.data, g, self.state, name)


# ---------------------------------------------------------------------------
# Merge and export.
# ---------------------------------------------------------------------------

def merge_and_reset(delta: SparseDelta) -> None:
    """Fold the delta into the base in place and zero the values.

    theta + W_sp is unchanged by the merge, so the forward output is
    bit-identical immediately before and after.
    """
    for name, idx in delta.indices.items():
        delta.base[name].tensor.data.reshape(-1)[idx] += delta.values[name]
        delta.values[name][:] = 0.0


def merged_arrays(base: ParamSet, delta: SparseDelta | None) -> dict[str, np.ndarray]:
    """theta + W_sp as copies, leaving the live objects untouched."""
    out = base.copy_arrays()
    if delta is not None:
        for name, idx in delta.indices.items():
            out[name].reshape(-1)[idx] += delta.values[name]
    return out


def export_merged(model: Model, delta: SparseDelta | None, checkpoint_path, adapter_path=None) -> None:
    """Write theta + W_sp as a checkpoint; optionally the delta alone as an
    adapter file carrying the base fingerprint."""
    arrays = merged_arrays(model.params, delta)
    seed = getattr(model, "build_seed", model.config.seed)
    fileio.save_checkpoint(checkpoint_path, arrays, model.config.to_dict(), seed)
    if adapter_path is not None and delta is not None:
        save_adapter_file(adapter_path, delta)


def save_adapter_file(path, delta: SparseDelta) -> None:
    mask = delta.mask
    fileio.save_adapter(
        path,
        indices={n: idx.astype(np.int64) for n, idx in delta.indices.items()},
        values=delta.values,
        layer_sizes=mask.layer_sizes,
        mask_info={"scope": mask.scope, "rho": mask.rho, "metric": mask.metric, "step": mask.step},
        base_fingerprint=fileio.checkpoint_fingerprint(delta.base.arrays()),
    )


def load_adapter_file(path, base: ParamSet) -> SparseDelta:
    """Reattach a saved delta; refuses to load against a different base."""
    indices, values, header = fileio.load_adapter(path)
    actual = fileio.checkpoint_fingerprint(base.arrays())
    if header["base_fingerprint"] != actual:
        raise AdapterError(
            f"{path}: adapter was trained against a different base checkpoint "
            f"(fingerprint {header['base_fingerprint'][:12]}... != {actual[:12]}...)"
        )
    sizes = {spec["name"]: spec["size"] for spec in header["layers"]}
    mask = SparsityMask(
        scope=header["mask"]["scope"],
        rho=header["mask"]["rho"],
        layers={n: idx.astype(np.int64) for n, idx in indices.items()},
        layer_sizes=sizes,
        step=header["mask"]["step"],
        metric=header["mask"].get("metric"),
    )
    delta = attach(mask, base)
    for name in delta.values:
        delta.values[name][:] = values[name].astype(delta.values[name].dtype)
    return delta


def index_overhead_fraction(delta: SparseDelta) -> float:
    """In-memory index bytes as a fraction of the dense model's weight bytes."""
    dense_bytes = sum(p.tensor.data.nbytes for p in delta.base)
    return delta.index_bytes() / dense_bytes if dense_bytes else 0.0
