"""Reverse-mode automatic differentiation over dense numpy arrays.

A ``Tensor`` wraps a contiguous float array and, when ``requires_grad`` is
set, participates in an implicit computation graph built as operations
execute. ``backward`` walks the graph once in reverse topological order and
accumulates gradients into leaf ``.grad`` fields; ``grad_of`` is the
functional variant used for higher-order derivatives.

Every backward rule is itself expressed through the tensor operations below,
so gradients carry their own graph when ``create_graph=True``. That is what
makes the exact (double-backward) Hessian-vector product possible without a
separate higher-order tape.

Default precision is 64-bit; 32-bit tensors are supported for speed but the
numerical contracts in the test suite assume 64-bit.
"""

from __future__ import annotations

import contextlib
import math
from typing import Callable, Mapping, Sequence

import numpy as np

DEFAULT_DTYPE = np.float64

_FLOAT_DTYPES = (np.float32, np.float64)


class AutodiffError(Exception):
    """Base class for graph construction and backward-pass failures."""


class ShapeMismatchError(AutodiffError):
    def __init__(self, op: str, shape_a, shape_b):
        super().__init__(f"{op}: incompatible shapes {tuple(shape_a)} and {tuple(shape_b)}")
        self.op = op
        self.shape_a = tuple(shape_a)
        self.shape_b = tuple(shape_b)


class NonFiniteError(AutodiffError):
    pass


class GraphConsumedError(AutodiffError):
    pass


class StepSizeError(AutodiffError):
    """Finite-difference HVP produced a non-finite result; carries the step used."""

    def __init__(self, eps: float):
        super().__init__(f"hessian_vector_product: non-finite result at step size eps={eps:.3e}")
        self.eps = eps


# Module-level switches. Graph recording is on unless inside no_grad();
# debug checks validate finiteness of every op input and output.
_grad_enabled = True
_debug_checks = False


@contextlib.contextmanager
def no_grad():
    """Disable graph recording inside the context."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


@contextlib.contextmanager
def _grad_forced_on():
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = True
    try:
        yield
    finally:
        _grad_enabled = prev


def set_debug_checks(enabled: bool) -> None:
    """Toggle per-op finiteness validation (off by default; slows everything)."""
    global _debug_checks
    _debug_checks = bool(enabled)


def _as_float_array(data, dtype=None) -> np.ndarray:
    if dtype is not None:
        return np.asarray(data, dtype=dtype)
    arr = np.asarray(data)
    if arr.dtype in _FLOAT_DTYPES:
        return arr
    return arr.astype(DEFAULT_DTYPE)


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "_parents", "_op", "_consumed")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        self.data = _as_float_array(data, dtype)
        self.requires_grad = bool(requires_grad)
        self.grad: Tensor | None = None
        # _parents: tuple of (parent Tensor, vjp) pairs; empty for leaves.
        self._parents: tuple = ()
        self._op: str | None = None
        self._consumed = False

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def dtype(self):
        return self.data.dtype

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else self._non_scalar()

    def _non_scalar(self):
        raise AutodiffError(f"item() on non-scalar tensor of shape {self.shape}")

    def detach(self) -> "Tensor":
        return Tensor(self.data, requires_grad=False)

    def backward(self, retain_graph: bool = False) -> None:
        backward(self, retain_graph=retain_graph)

    def zero_grad(self) -> None:
        self.grad = None

    # Operator sugar; scalars and arrays are lifted to constant tensors.
    def __add__(self, other):
        return add(self, _lift(other, self.dtype))

    def __radd__(self, other):
        return add(_lift(other, self.dtype), self)

    def __sub__(self, other):
        return sub(self, _lift(other, self.dtype))

    def __rsub__(self, other):
        return sub(_lift(other, self.dtype), self)

    def __mul__(self, other):
        return mul(self, _lift(other, self.dtype))

    def __rmul__(self, other):
        return mul(_lift(other, self.dtype), self)

    def __truediv__(self, other):
        return div(self, _lift(other, self.dtype))

    def __rtruediv__(self, other):
        return div(_lift(other, self.dtype), self)

    def __neg__(self):
        return neg(self)

    def __pow__(self, exponent):
        return power(self, exponent)

    def __matmul__(self, other):
        return matmul(self, _lift(other, self.dtype))

    def sum(self, axis=None, keepdims: bool = False):
        return rsum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims: bool = False):
        return rmean(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, axes=None):
        return transpose(self, axes)

    def abs(self):
        return absolute(self)

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"


def _lift(value, dtype) -> Tensor:
    if isinstance(value, Tensor):
        return value
    return Tensor(np.asarray(value, dtype=dtype))


def _check_finite_input(op: str, *tensors: Tensor) -> None:
    if not _debug_checks:
        return
    for t in tensors:
        if not np.all(np.isfinite(t.data)):
            raise NonFiniteError(f"{op}: non-finite input")


def _node(data: np.ndarray, parents, op: str) -> Tensor:
    """Create an op result, recording parent links when gradients are needed."""
    if _debug_checks and not np.all(np.isfinite(data)):
        raise NonFiniteError(f"{op}: non-finite output")
    out = Tensor(data)
    if _grad_enabled:
        linked = tuple((p, vjp) for p, vjp in parents if p.requires_grad)
        if linked:
            out.requires_grad = True
            out._parents = linked
            out._op = op
    return out


def _unbroadcast(g: Tensor, shape: tuple) -> Tensor:
    """Reduce a gradient back to ``shape`` after numpy-style broadcasting."""
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = rsum(g, axis=tuple(range(extra)))
    axes = tuple(i for i, dim in enumerate(shape) if dim == 1 and g.shape[i] != 1)
    if axes:
        g = rsum(g, axis=axes, keepdims=True)
    if g.shape != shape:
        g = reshape(g, shape)
    return g


def _broadcast_result_shape(op: str, a: Tensor, b: Tensor) -> None:
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeMismatchError(op, a.shape, b.shape) from None


# ---------------------------------------------------------------------------
# Primitive operations. Each backward rule is written with tensor ops so that
# second derivatives are available through the same machinery.
# ---------------------------------------------------------------------------

def add(a: Tensor, b: Tensor) -> Tensor:
    _broadcast_result_shape("add", a, b)
    _check_finite_input("add", a, b)
    return _node(
        a.data + b.data,
        [(a, lambda g: _unbroadcast(g, a.shape)), (b, lambda g: _unbroadcast(g, b.shape))],
        "add",
    )


def sub(a: Tensor, b: Tensor) -> Tensor:
    _broadcast_result_shape("sub", a, b)
    _check_finite_input("sub", a, b)
    return _node(
        a.data - b.data,
        [(a, lambda g: _unbroadcast(g, a.shape)), (b, lambda g: _unbroadcast(neg(g), b.shape))],
        "sub",
    )


def mul(a: Tensor, b: Tensor) -> Tensor:
    _broadcast_result_shape("mul", a, b)
    _check_finite_input("mul", a, b)
    return _node(
        a.data * b.data,
        [(a, lambda g: _unbroadcast(mul(g, b), a.shape)), (b, lambda g: _unbroadcast(mul(g, a), b.shape))],
        "mul",
    )


def div(a: Tensor, b: Tensor) -> Tensor:
    _broadcast_result_shape("div", a, b)
    _check_finite_input("div", a, b)
    return _node(
        a.data / b.data,
        [
            (a, lambda g: _unbroadcast(div(g, b), a.shape)),
            (b, lambda g: _unbroadcast(neg(div(mul(g, a), mul(b, b))), b.shape)),
        ],
        "div",
    )


def neg(a: Tensor) -> Tensor:
    return _node(-a.data, [(a, lambda g: neg(g))], "neg")


def power(a: Tensor, exponent: float) -> Tensor:
    """Elementwise power with a constant exponent."""
    e = float(exponent)
    _check_finite_input("pow", a)
    return _node(a.data ** e, [(a, lambda g: mul(g, mul(_lift(e, a.dtype), power(a, e - 1.0))))], "pow")


def exp(a: Tensor) -> Tensor:
    _check_finite_input("exp", a)
    out = _node(np.exp(a.data), [], "exp")
    if _grad_enabled and a.requires_grad:
        out.requires_grad = True
        out._parents = ((a, lambda g: mul(g, out)),)
        out._op = "exp"
    return out


def log(a: Tensor) -> Tensor:
    _check_finite_input("log", a)
    return _node(np.log(a.data), [(a, lambda g: div(g, a))], "log")


def tanh(a: Tensor) -> Tensor:
    _check_finite_input("tanh", a)
    out = _node(np.tanh(a.data), [], "tanh")
    if _grad_enabled and a.requires_grad:
        out.requires_grad = True
        out._parents = ((a, lambda g: mul(g, sub(_lift(1.0, a.dtype), mul(out, out)))),)
        out._op = "tanh"
    return out


def relu(a: Tensor) -> Tensor:
    _check_finite_input("relu", a)
    mask = Tensor((a.data > 0).astype(a.dtype))
    return _node(np.maximum(a.data, 0), [(a, lambda g: mul(g, mask))], "relu")


def absolute(a: Tensor) -> Tensor:
    _check_finite_input("abs", a)
    sign = Tensor(np.sign(a.data))
    return _node(np.abs(a.data), [(a, lambda g: mul(g, sign))], "abs")


def square(a: Tensor) -> Tensor:
    return mul(a, a)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeMismatchError("matmul", a.shape, b.shape)
    try:
        data = np.matmul(a.data, b.data)
    except ValueError:
        raise ShapeMismatchError("matmul", a.shape, b.shape) from None
    _check_finite_input("matmul", a, b)

    def grad_a(g: Tensor) -> Tensor:
        return _unbroadcast(matmul(g, transpose(b)), a.shape)

    def grad_b(g: Tensor) -> Tensor:
        return _unbroadcast(matmul(transpose(a), g), b.shape)

    return _node(data, [(a, grad_a), (b, grad_b)], "matmul")


def transpose(a: Tensor, axes=None) -> Tensor:
    """Permute axes; ``axes=None`` swaps the last two (matrix transpose)."""
    if axes is None:
        if a.ndim < 2:
            raise ShapeMismatchError("transpose", a.shape, a.shape)
        axes = tuple(range(a.ndim - 2)) + (a.ndim - 1, a.ndim - 2)
    axes = tuple(axes)
    inverse = tuple(int(i) for i in np.argsort(axes))
    return _node(np.transpose(a.data, axes), [(a, lambda g: transpose(g, inverse))], "transpose")


def reshape(a: Tensor, shape) -> Tensor:
    shape = tuple(shape)
    try:
        data = a.data.reshape(shape)
    except ValueError:
        raise ShapeMismatchError("reshape", a.shape, shape) from None
    original = a.shape
    return _node(data, [(a, lambda g: reshape(g, original))], "reshape")


def broadcast_to(a: Tensor, shape) -> Tensor:
    shape = tuple(shape)
    try:
        data = np.broadcast_to(a.data, shape)
    except ValueError:
        raise ShapeMismatchError("broadcast_to", a.shape, shape) from None
    return _node(np.ascontiguousarray(data), [(a, lambda g: _unbroadcast(g, a.shape))], "broadcast_to")


def rsum(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    if axis is not None:
        axis = tuple(axis) if isinstance(axis, (tuple, list)) else (axis,)
    data = np.sum(a.data, axis=axis, keepdims=keepdims)

    def grad_a(g: Tensor) -> Tensor:
        if axis is None:
            kept = (1,) * a.ndim
        elif keepdims:
            kept = g.shape
        else:
            kept = list(a.shape)
            for ax in axis:
                kept[ax % a.ndim] = 1
            kept = tuple(kept)
        return broadcast_to(reshape(g, kept), a.shape)

    return _node(data, [(a, grad_a)], "sum")


def rmean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    if axis is None:
        count = a.size
    else:
        axes = tuple(axis) if isinstance(axis, (tuple, list)) else (axis,)
        count = 1
        for ax in axes:
            count *= a.shape[ax % a.ndim]
    return div(rsum(a, axis=axis, keepdims=keepdims), _lift(float(count), a.dtype))


# ---------------------------------------------------------------------------
# Composite neural-network operations.
# ---------------------------------------------------------------------------

def gelu(a: Tensor) -> Tensor:
    """Gaussian error linear unit (tanh approximation)."""
    c = math.sqrt(2.0 / math.pi)
    inner = mul(_lift(c, a.dtype), add(a, mul(_lift(0.044715, a.dtype), mul(a, mul(a, a)))))
    return mul(mul(_lift(0.5, a.dtype), a), add(_lift(1.0, a.dtype), tanh(inner)))


def softmax(a: Tensor, axis: int = -1) -> Tensor:
    # Constant max-shift keeps exp in range without touching gradients.
    shift = Tensor(np.max(a.data, axis=axis, keepdims=True))
    e = exp(sub(a, shift))
    return div(e, rsum(e, axis=axis, keepdims=True))


def log_softmax(a: Tensor, axis: int = -1) -> Tensor:
    shift = Tensor(np.max(a.data, axis=axis, keepdims=True))
    z = sub(a, shift)
    return sub(z, log(rsum(exp(z), axis=axis, keepdims=True)))


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalize over the last axis, then scale and shift."""
    mu = rmean(x, axis=-1, keepdims=True)
    centered = sub(x, mu)
    var = rmean(mul(centered, centered), axis=-1, keepdims=True)
    norm = mul(centered, power(add(var, _lift(eps, x.dtype)), -0.5))
    return add(mul(norm, gain), bias)


def embedding(weight: Tensor, ids: np.ndarray) -> Tensor:
    """Row lookup ``weight[ids]`` as a one-hot matmul so gradients flow to rows.

    ``ids`` is a plain integer array of any shape; the result appends the
    embedding width as a trailing axis.
    """
    ids = np.asarray(ids)
    if weight.ndim != 2:
        raise ShapeMismatchError("embedding", weight.shape, ids.shape)
    vocab = weight.shape[0]
    if ids.size and (ids.min() < 0 or ids.max() >= vocab):
        raise AutodiffError(f"embedding: id out of range [0, {vocab})")
    flat = ids.reshape(-1)
    onehot = np.zeros((flat.size, vocab), dtype=weight.dtype)
    onehot[np.arange(flat.size), flat] = 1.0
    rows = matmul(Tensor(onehot), weight)
    return reshape(rows, tuple(ids.shape) + (weight.shape[1],))


def cross_entropy(logits: Tensor, targets) -> Tensor:
    """Mean softmax cross-entropy; ``targets`` are integer class ids."""
    targets = np.asarray(targets)
    if logits.ndim == 1:
        logits = reshape(logits, (1, logits.shape[0]))
        targets = targets.reshape(1)
    if logits.ndim != 2 or targets.shape != (logits.shape[0],):
        raise ShapeMismatchError("cross_entropy", logits.shape, targets.shape)
    n, c = logits.shape
    if targets.size and (targets.min() < 0 or targets.max() >= c):
        raise AutodiffError(f"cross_entropy: target outside [0, {c})")
    onehot = np.zeros((n, c), dtype=logits.dtype)
    onehot[np.arange(n), targets.astype(np.int64)] = 1.0
    logp = log_softmax(logits, axis=-1)
    picked = rsum(mul(logp, Tensor(onehot)), axis=-1)
    return neg(rmean(picked))


def mse(pred: Tensor, target) -> Tensor:
    """Mean squared error over all elements."""
    target = _lift(target, pred.dtype)
    if pred.shape != target.shape:
        raise ShapeMismatchError("mse", pred.shape, target.shape)
    diff = sub(pred, target)
    return rmean(mul(diff, diff))


# ---------------------------------------------------------------------------
# Backward pass.
# ---------------------------------------------------------------------------

def _topological_order(root: Tensor) -> list:
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for parent, _ in node._parents:
            if id(parent) not in seen:
                stack.append((parent, False))
    return order


def _backprop(root: Tensor, create_graph: bool) -> dict:
    """Return adjoints for every requires_grad tensor reachable from root."""
    order = _topological_order(root)
    adjoint: dict[int, Tensor] = {id(root): Tensor(np.ones_like(root.data))}
    result: dict[int, tuple[Tensor, Tensor]] = {}
    ctx = _grad_forced_on() if create_graph else no_grad()
    with ctx:
        for node in reversed(order):
            g = adjoint.pop(id(node), None)
            if g is None:
                continue
            if node.requires_grad:
                result[id(node)] = (node, g)
            for parent, vjp in node._parents:
                pg = vjp(g)
                prev = adjoint.get(id(parent))
                adjoint[id(parent)] = pg if prev is None else add(prev, pg)
    return result


def backward(loss: Tensor, retain_graph: bool = False) -> None:
    """Populate ``.grad`` on every requires_grad tensor reachable from ``loss``.

    Gradients accumulate additively across calls until cleared by the caller.
    A graph may be walked once; pass ``retain_graph=True`` to allow re-walking.
    """
    if loss.size != 1:
        raise AutodiffError(f"backward requires a scalar loss, got shape {loss.shape}")
    if loss._consumed:
        raise GraphConsumedError("backward on a consumed graph (pass retain_graph=True to retain)")
    if not loss.requires_grad:
        raise AutodiffError("backward on a tensor that does not require grad")
    grads = _backprop(loss, create_graph=False)
    for tensor, g in grads.values():
        if tensor.grad is None:
            tensor.grad = Tensor(g.data.copy())
        else:
            tensor.grad = Tensor(tensor.grad.data + g.data)
    if not retain_graph:
        loss._consumed = True


def grad_of(output: Tensor, inputs: Sequence[Tensor], create_graph: bool = False) -> list[Tensor]:
    """Functional gradients of a scalar output w.r.t. ``inputs``.

    Does not touch ``.grad``. With ``create_graph=True`` the returned tensors
    carry their own graph, enabling higher-order differentiation.
    """
    if output.size != 1:
        raise AutodiffError(f"grad_of requires a scalar output, got shape {output.shape}")
    grads = _backprop(output, create_graph=create_graph)
    out = []
    for t in inputs:
        entry = grads.get(id(t))
        out.append(entry[1] if entry is not None else Tensor(np.zeros_like(t.data)))
    return out


# ---------------------------------------------------------------------------
# Hessian-vector products.
# ---------------------------------------------------------------------------

LossFn = Callable[[Mapping[str, Tensor]], Tensor]


def _gradient_arrays(loss_fn: LossFn, arrays: Mapping[str, np.ndarray]) -> dict[str, np.ndarray]:
    leaves = {name: Tensor(arr, requires_grad=True) for name, arr in arrays.items()}
    loss = loss_fn(leaves)
    grads = grad_of(loss, list(leaves.values()))
    return {name: g.data for name, g in zip(leaves, grads)}


def hessian_vector_product(
    loss_fn: LossFn,
    theta: Mapping[str, np.ndarray],
    v: Mapping[str, np.ndarray],
    method: str = "fd",
    rel_step: float = 1e-4,
) -> dict[str, np.ndarray]:
    """Compute ``H @ v`` for the Hessian of ``loss_fn`` at ``theta``.

    The reference path ("fd") is a central finite difference of gradients,
    ``(grad(theta + eps*v) - grad(theta - eps*v)) / (2*eps)`` with
    ``eps = rel_step * (1 + max|theta|) / max(max|v|, tiny)``. The "exact"
    path differentiates ``grad . v`` a second time through the graph.

    A zero ``v`` returns zeros (by linearity, not an error).
    """
    names = list(theta)
    if set(v) != set(names):
        raise AutodiffError("hessian_vector_product: v does not conform to theta")
    v_inf = max((float(np.max(np.abs(v[n]))) if v[n].size else 0.0) for n in names)
    if v_inf == 0.0:
        return {n: np.zeros_like(theta[n]) for n in names}

    if method == "fd":
        theta_inf = max((float(np.max(np.abs(theta[n]))) if theta[n].size else 0.0) for n in names)
        eps = rel_step * (1.0 + theta_inf) / max(v_inf, np.finfo(np.float64).tiny)
        plus = _gradient_arrays(loss_fn, {n: theta[n] + eps * v[n] for n in names})
        minus = _gradient_arrays(loss_fn, {n: theta[n] - eps * v[n] for n in names})
        hv = {n: (plus[n] - minus[n]) / (2.0 * eps) for n in names}
        for arr in hv.values():
            if not np.all(np.isfinite(arr)):
                raise StepSizeError(eps)
        return hv

    if method == "exact":
        leaves = {n: Tensor(theta[n], requires_grad=True) for n in names}
        loss = loss_fn(leaves)
        grads = grad_of(loss, list(leaves.values()), create_graph=True)
        dot = None
        for n, g in zip(names, grads):
            term = rsum(mul(g, Tensor(np.asarray(v[n], dtype=g.dtype))))
            dot = term if dot is None else add(dot, term)
        hv_tensors = grad_of(dot, list(leaves.values()))
        return {n: hv.data for n, hv in zip(names, hv_tensors)}

    raise ValueError(f"unknown hvp method {method!r} (expected 'fd' or 'exact')")


def finite_difference_gradients(
    loss_fn: LossFn, arrays: Mapping[str, np.ndarray], h: float = 1e-5
) -> dict[str, np.ndarray]:
    """Central-difference gradient oracle, one loss pair per coordinate."""

    def value_at(current: Mapping[str, np.ndarray]) -> float:
        with no_grad():
            leaves = {n: Tensor(a) for n, a in current.items()}
            return loss_fn(leaves).item()

    out = {}
    work = {n: np.array(a, dtype=np.float64, copy=True) for n, a in arrays.items()}
    for name, arr in work.items():
        g = np.zeros_like(arr)
        flat = arr.reshape(-1)
        gflat = g.reshape(-1)
        for i in range(flat.size):
            keep = flat[i]
            flat[i] = keep + h
            up = value_at(work)
            flat[i] = keep - h
            down = value_at(work)
            flat[i] = keep
            gflat[i] = (up - down) / (2.0 * h)
        out[name] = g
    return out
