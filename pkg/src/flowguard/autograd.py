"""Minimal reverse-mode autodiff over numpy arrays.

Only the primitives the flow transformer needs are provided. Every op
records a closure that maps the output gradient to input gradients; calling
``backward()`` on a scalar walks the tape in reverse topological order.
Leading (batch) dimensions broadcast through ``matmul`` and the elementwise
ops, and gradients are summed back to the operand shapes.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence

import numpy as np


class NonFiniteError(FloatingPointError):
    """Raised when a primitive produces NaN or infinity."""


def _check_finite(data: np.ndarray, op: str) -> None:
    if not np.all(np.isfinite(data)):
        raise NonFiniteError(f"{op} produced non-finite values")


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum ``grad`` down to ``shape`` after numpy broadcasting."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad


class Tensor:
    """Dense real array that remembers how it was computed."""

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "name")

    def __init__(
        self,
        data,
        requires_grad: bool = False,
        name: str | None = None,
        dtype=None,
    ) -> None:
        arr = np.asarray(data, dtype=dtype if dtype is not None else None)
        if arr.dtype.kind not in "f":
            arr = arr.astype(np.float64)
        self.data = arr
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[np.ndarray], Sequence[np.ndarray | None]] | None = None
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self) -> int:
        return self.data.size

    def __repr__(self) -> str:
        label = f" {self.name!r}" if self.name else ""
        return f"Tensor{label}(shape={self.shape}, dtype={self.dtype})"

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        if self.data.size != 1:
            raise ValueError(f"item() needs a single-element tensor, got shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def zero_grad(self) -> None:
        self.grad = None

    def backward(self, grad: np.ndarray | None = None) -> None:
        """Accumulate gradients of this tensor into every reachable leaf."""
        if grad is None:
            if self.data.size != 1:
                raise ValueError("backward() without a seed needs a scalar tensor")
            grad = np.ones_like(self.data)
        order: list[Tensor] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(self, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                order.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if id(p) not in seen:
                    stack.append((p, False))

        grads: dict[int, np.ndarray] = {id(self): np.asarray(grad, dtype=self.data.dtype)}
        for node in reversed(order):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node._backward is None:
                if node.requires_grad:
                    node.grad = g.copy() if node.grad is None else node.grad + g
                continue
            for parent, pg in zip(node._parents, node._backward(g)):
                if pg is None or not _tracks(parent):
                    continue
                key = id(parent)
                if key in grads:
                    grads[key] = grads[key] + pg
                else:
                    grads[key] = pg

    # operator sugar
    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return take(self, index)


def _tracks(t: Tensor) -> bool:
    return t.requires_grad or t._backward is not None


def as_tensor(x, dtype=None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    if dtype is None:
        dtype = np.float64
    return Tensor(np.asarray(x, dtype=dtype))


def _result(data: np.ndarray, parents: tuple[Tensor, ...], backward, op: str) -> Tensor:
    _check_finite(data, op)
    out = Tensor(data)
    if any(_tracks(p) for p in parents):
        out._parents = parents
        out._backward = backward
    return out


# elementwise ------------------------------------------------------------


def add(a, b) -> Tensor:
    a = as_tensor(a, getattr(b, "dtype", None))
    b = as_tensor(b, a.dtype)
    data = a.data + b.data

    def backward(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _result(data, (a, b), backward, "add")


def sub(a, b) -> Tensor:
    a = as_tensor(a, getattr(b, "dtype", None))
    b = as_tensor(b, a.dtype)
    data = a.data - b.data

    def backward(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return _result(data, (a, b), backward, "sub")


def mul(a, b) -> Tensor:
    a = as_tensor(a, getattr(b, "dtype", None))
    b = as_tensor(b, a.dtype)
    data = a.data * b.data

    def backward(g):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

    return _result(data, (a, b), backward, "mul")


def relu(x: Tensor) -> Tensor:
    """Elementwise max(0, x); the subgradient at exactly 0 is 0."""
    mask = x.data > 0
    data = np.where(mask, x.data, 0.0).astype(x.dtype, copy=False)
    return _result(data, (x,), lambda g: (g * mask,), "relu")


def sigmoid(x: Tensor) -> Tensor:
    data = np.empty_like(x.data)
    pos = x.data >= 0
    data[pos] = 1.0 / (1.0 + np.exp(-x.data[pos]))
    ex = np.exp(x.data[~pos])
    data[~pos] = ex / (1.0 + ex)
    return _result(data, (x,), lambda g: (g * data * (1.0 - data),), "sigmoid")


def tanh(x: Tensor) -> Tensor:
    data = np.tanh(x.data)
    return _result(data, (x,), lambda g: (g * (1.0 - data * data),), "tanh")


# shape ---------------------------------------------------------------------


def reshape(x: Tensor, shape: Sequence[int]) -> Tensor:
    data = x.data.reshape(shape)
    return _result(data, (x,), lambda g: (g.reshape(x.shape),), "reshape")


def transpose(x: Tensor, axes: Sequence[int]) -> Tensor:
    axes = tuple(axes)
    inverse = tuple(np.argsort(axes))
    data = x.data.transpose(axes)
    return _result(data, (x,), lambda g: (g.transpose(inverse),), "transpose")


def swap_last(x: Tensor) -> Tensor:
    axes = list(range(x.ndim))
    axes[-1], axes[-2] = axes[-2], axes[-1]
    return transpose(x, axes)


def take(x: Tensor, index) -> Tensor:
    """Basic or advanced indexing; the gradient scatters back with ``np.add.at``."""
    data = np.array(x.data[index], copy=True)

    def backward(g):
        full = np.zeros_like(x.data)
        np.add.at(full, index, g)
        return (full,)

    return _result(data, (x,), backward, "take")


def concat(tensors: Sequence[Tensor], axis: int = -1) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    data = np.concatenate([t.data for t in tensors], axis=axis)
    sizes = [t.shape[axis] for t in tensors]
    bounds = np.cumsum(sizes)[:-1]

    def backward(g):
        return tuple(np.split(g, bounds, axis=axis))

    return _result(data, tuple(tensors), backward, "concat")


def pad_last(x: Tensor, width: int) -> Tensor:
    """Zero-pad the last axis out to ``width``."""
    extra = width - x.shape[-1]
    if extra < 0:
        raise ValueError(f"cannot pad width {x.shape[-1]} down to {width}")
    if extra == 0:
        return x
    pad = [(0, 0)] * (x.ndim - 1) + [(0, extra)]
    data = np.pad(x.data, pad)
    n = x.shape[-1]
    return _result(data, (x,), lambda g: (g[..., :n],), "pad_last")


# reductions ----------------------------------------------------------------


def sum_(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    data = np.asarray(x.data.sum(axis=axis, keepdims=keepdims))

    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, x.shape).copy(),)

    return _result(data, (x,), backward, "sum")


def mean(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    if axis is None:
        n = x.size
    else:
        axes = (axis,) if isinstance(axis, int) else tuple(axis)
        n = int(np.prod([x.shape[a] for a in axes]))
    return mul(sum_(x, axis=axis, keepdims=keepdims), 1.0 / n)


# linear algebra ------------------------------------------------------------


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product over the last two axes; leading axes broadcast.

    For 2-D operands the gradients are ``g @ b.T`` and ``a.T @ g``.
    """
    a = as_tensor(a)
    b = as_tensor(b, a.dtype)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ValueError(f"matmul shape mismatch: {a.shape} @ {b.shape}")
    shared = b.ndim == 2 and a.ndim > 2
    if shared:
        # shared weight: fold the batch axes into a single 2-D product
        k, n = b.shape
        data = (a.data.reshape(-1, k) @ b.data).reshape(a.shape[:-1] + (n,))
    else:
        data = np.matmul(a.data, b.data)

    def backward(g):
        if shared:
            g2 = g.reshape(-1, n)
            ga = (g2 @ b.data.T).reshape(a.shape)
            gb = a.data.reshape(-1, k).T @ g2
            return ga, gb
        ga = np.matmul(g, np.swapaxes(b.data, -1, -2))
        gb = np.matmul(np.swapaxes(a.data, -1, -2), g)
        return _unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape)

    return _result(data, (a, b), backward, "matmul")


def softmax_rows(x: Tensor, mask: np.ndarray | None = None) -> Tensor:
    """Softmax over the last axis with max subtraction.

    ``mask`` is a boolean array broadcastable to ``x``; True entries are
    excluded (treated as minus infinity). Each row needs one unmasked entry.
    """
    z = x.data
    if mask is not None:
        z = np.where(mask, -np.inf, z)
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    data = e / e.sum(axis=-1, keepdims=True)

    def backward(g):
        dot = (g * data).sum(axis=-1, keepdims=True)
        return (data * (g - dot),)

    return _result(data, (x,), backward, "softmax_rows")


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalise the last axis with population variance, then scale and shift."""
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    data = xhat * gamma.data + beta.data
    d = x.shape[-1]

    def backward(g):
        gxhat = g * gamma.data
        gx = inv / d * (
            d * gxhat
            - gxhat.sum(axis=-1, keepdims=True)
            - xhat * (gxhat * xhat).sum(axis=-1, keepdims=True)
        )
        ggamma = _unbroadcast(g * xhat, gamma.shape)
        gbeta = _unbroadcast(g, beta.shape)
        return gx, ggamma, gbeta

    return _result(data, (x, gamma, beta), backward, "layer_norm")


def embedding_lookup(table: Tensor, indices) -> Tensor:
    """Gather rows of ``table``; repeated indices accumulate gradient."""
    idx = np.asarray(indices)
    if idx.dtype.kind not in "iu":
        if not np.all(idx == np.round(idx)):
            raise ValueError("embedding indices must be integers")
        idx = idx.astype(np.int64)
    vocab = table.shape[0]
    if idx.size and (idx.min() < 0 or idx.max() >= vocab):
        bad = int(idx.max()) if idx.max() >= vocab else int(idx.min())
        raise IndexError(f"embedding index {bad} out of range for table of {vocab} rows")
    data = table.data[idx]

    def backward(g):
        full = np.zeros_like(table.data)
        np.add.at(full, idx, g)
        return (full,)

    return _result(data, (table,), backward, "embedding_lookup")


# losses --------------------------------------------------------------------

PROB_EPS = 1e-7


def bce_loss(p: Tensor, y) -> Tensor:
    """Mean binary cross-entropy; ``p`` is clamped to [1e-7, 1 - 1e-7].

    The gradient is evaluated at the clamped probability so that saturated
    outputs still push back toward the label.
    """
    y = np.asarray(y, dtype=p.dtype).reshape(p.shape)
    pc = np.clip(p.data, PROB_EPS, 1.0 - PROB_EPS)
    losses = -(y * np.log(pc) + (1.0 - y) * np.log(1.0 - pc))
    data = np.asarray(losses.mean())
    n = p.size

    def backward(g):
        return (g * (pc - y) / (pc * (1.0 - pc)) / n,)

    return _result(data, (p,), backward, "bce_loss")


# optimisation --------------------------------------------------------------

ParameterSet = dict  # name -> Tensor, insertion ordered


@dataclass
class AdamState:
    """Moments and step counter for :func:`adam_step`."""

    learning_rate: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    t: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)


def adam_step(
    params: dict[str, Tensor],
    grads: dict[str, np.ndarray],
    state: AdamState,
) -> None:
    """Apply one bias-corrected Adam update in place."""
    for name, p in params.items():
        g = grads.get(name)
        if g is not None and g.shape != p.shape:
            raise ValueError(f"gradient for {name!r} has shape {g.shape}, expected {p.shape}")
    state.t += 1
    bc1 = 1.0 - state.beta1**state.t
    bc2 = 1.0 - state.beta2**state.t
    for name, p in params.items():
        g = grads.get(name)
        if g is None:
            g = np.zeros_like(p.data)
        if name not in state.m:
            state.m[name] = np.zeros_like(p.data)
            state.v[name] = np.zeros_like(p.data)
        m = state.m[name]
        v = state.v[name]
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * (g * g)
        p.data -= state.learning_rate * (m / bc1) / (np.sqrt(v / bc2) + state.eps)


def collect_grads(params: dict[str, Tensor]) -> dict[str, np.ndarray]:
    return {
        name: (p.grad if p.grad is not None else np.zeros_like(p.data))
        for name, p in params.items()
    }


def zero_grads(params: Iterable[Tensor]) -> None:
    for p in params:
        p.grad = None


# verification --------------------------------------------------------------


@dataclass
class GradCheckReport:
    errors: dict[str, float]
    tolerance: float

    @property
    def max_error(self) -> float:
        return max(self.errors.values(), default=0.0)

    @property
    def passed(self) -> bool:
        return self.max_error <= self.tolerance


def relative_error(analytic: np.ndarray, numeric: np.ndarray, floor: float = 1e-6) -> np.ndarray:
    scale = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), floor)
    return np.abs(analytic - numeric) / scale


def grad_check(
    f: Callable[[], Tensor],
    params: dict[str, Tensor],
    tolerance: float = 1e-4,
    h: float = 1e-5,
    max_entries: int | None = None,
    seed: int = 0,
) -> GradCheckReport:
    """Compare analytic gradients of ``f`` with central differences.

    ``f`` takes no arguments and reads the tensors in ``params``, which are
    perturbed in place. ``max_entries`` subsamples coordinates per tensor.
    Entries whose gradients are both below 1e-6 are compared in absolute
    terms. Failures are reported, never raised.
    """
    zero_grads(params.values())
    for p in params.values():
        p.requires_grad = True
    out = f()
    if out.size != 1:
        raise ValueError("grad_check needs a scalar-valued function")
    out.backward()
    rng = np.random.default_rng(seed)
    errors: dict[str, float] = {}
    for name, p in params.items():
        analytic = p.grad if p.grad is not None else np.zeros_like(p.data)
        flat = p.data.reshape(-1)
        coords = np.arange(flat.size)
        if max_entries is not None and flat.size > max_entries:
            coords = rng.choice(flat.size, size=max_entries, replace=False)
        worst = 0.0
        for i in coords:
            old = flat[i]
            flat[i] = old + h
            up = float(f().data)
            flat[i] = old - h
            down = float(f().data)
            flat[i] = old
            numeric = (up - down) / (2.0 * h)
            err = float(relative_error(np.asarray(analytic.reshape(-1)[i]), np.asarray(numeric)))
            worst = max(worst, err)
        errors[name] = worst
    zero_grads(params.values())
    return GradCheckReport(errors=errors, tolerance=tolerance)


def glorot_uniform(rng: np.random.Generator, shape: tuple[int, ...], fan_in: int, fan_out: int, dtype=np.float64) -> np.ndarray:
    limit = math.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=shape).astype(dtype)
