"""Reverse-mode automatic differentiation over dense float64 arrays.

A computation is recorded as a DAG of `Tensor` nodes. Each non-leaf node
keeps its parents and a closure that maps the node's output gradient to
per-parent gradient contributions. `backward` walks the DAG once in
reverse topological order, accumulating additively at fan-in. Leaves that
the output does not reach read back a zero gradient.

Also hosts the training-side numerics that every module shares: a central
finite-difference gradient checker, Adam with bias correction, cosine
learning-rate annealing, and symmetric uniform parameter initialization.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable, Mapping

import numpy as np

__all__ = [
    "Tensor",
    "backward",
    "finite_diff_check",
    "AdamState",
    "init_adam",
    "adam_step",
    "cosine_lr",
    "glorot_uniform",
    "wrap_params",
    "collect_grads",
    "add", "sub", "mul", "div", "neg", "matmul", "transpose",
    "square", "sqrt_", "exp_", "log_", "power", "shifted_softplus",
    "sigmoid", "log_sigmoid", "sum_", "mean_", "concat", "reshape",
    "gather", "scatter_add", "stop_gradient",
]

LN2 = math.log(2.0)


def _check_finite(a: np.ndarray, where: str) -> None:
    if not np.all(np.isfinite(a)):
        raise FloatingPointError(f"non-finite value encountered in {where}")


class Tensor:
    """One node of the differentiation graph, wrapping a float64 array."""

    __slots__ = ("data", "_grad", "_parents", "_vjp")

    def __init__(self, data, _parents=(), _vjp=None):
        self.data = np.asarray(data, dtype=np.float64)
        _check_finite(self.data, "forward pass")
        self._grad: np.ndarray | None = None
        self._parents: tuple[Tensor, ...] = _parents
        self._vjp = _vjp

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def grad(self) -> np.ndarray:
        """Accumulated gradient; zero for leaves the output never reached."""
        if self._grad is None:
            return np.zeros_like(self.data)
        return self._grad

    def zero_grad(self) -> None:
        self._grad = None

    def item(self) -> float:
        return float(self.data)

    def backward(self) -> None:
        backward(self)

    # operator sugar; non-Tensor operands become constants
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

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, leaf={self._vjp is None})"


def _t(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum a broadcast gradient back down to the operand's shape."""
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g.reshape(shape)


def add(a, b) -> Tensor:
    a, b = _t(a), _t(b)
    out = Tensor(a.data + b.data, (a, b))
    out._vjp = lambda g: (_unbroadcast(g, a.data.shape), _unbroadcast(g, b.data.shape))
    return out


def sub(a, b) -> Tensor:
    a, b = _t(a), _t(b)
    out = Tensor(a.data - b.data, (a, b))
    out._vjp = lambda g: (_unbroadcast(g, a.data.shape), _unbroadcast(-g, b.data.shape))
    return out


def mul(a, b) -> Tensor:
    a, b = _t(a), _t(b)
    out = Tensor(a.data * b.data, (a, b))
    out._vjp = lambda g: (
        _unbroadcast(g * b.data, a.data.shape),
        _unbroadcast(g * a.data, b.data.shape),
    )
    return out


def div(a, b) -> Tensor:
    a, b = _t(a), _t(b)
    out = Tensor(a.data / b.data, (a, b))
    out._vjp = lambda g: (
        _unbroadcast(g / b.data, a.data.shape),
        _unbroadcast(-g * a.data / (b.data * b.data), b.data.shape),
    )
    return out


def neg(a) -> Tensor:
    a = _t(a)
    out = Tensor(-a.data, (a,))
    out._vjp = lambda g: (-g,)
    return out


def matmul(a, b) -> Tensor:
    a, b = _t(a), _t(b)
    if a.data.ndim != 2 or b.data.ndim != 2:
        raise ValueError("matmul expects 2-D operands")
    out = Tensor(np.matmul(a.data, b.data), (a, b))
    out._vjp = lambda g: (np.matmul(g, b.data.T), np.matmul(a.data.T, g))
    return out


def transpose(a) -> Tensor:
    a = _t(a)
    if a.data.ndim != 2:
        raise ValueError("transpose expects a 2-D operand")
    out = Tensor(a.data.T, (a,))
    out._vjp = lambda g: (g.T,)
    return out


def square(a) -> Tensor:
    a = _t(a)
    out = Tensor(a.data * a.data, (a,))
    out._vjp = lambda g: (g * (2.0 * a.data),)
    return out


def sqrt_(a) -> Tensor:
    a = _t(a)
    with np.errstate(invalid="ignore"):
        out = Tensor(np.sqrt(a.data), (a,))  # NaN output raises in Tensor()
    out._vjp = lambda g: (g * (0.5 / out.data),)
    return out


def exp_(a) -> Tensor:
    a = _t(a)
    out = Tensor(np.exp(a.data), (a,))
    out._vjp = lambda g: (g * out.data,)
    return out


def log_(a) -> Tensor:
    a = _t(a)
    with np.errstate(invalid="ignore", divide="ignore"):
        out = Tensor(np.log(a.data), (a,))  # NaN/Inf output raises in Tensor()
    out._vjp = lambda g: (g / a.data,)
    return out


def power(a, p: float) -> Tensor:
    a = _t(a)
    out = Tensor(np.power(a.data, p), (a,))
    out._vjp = lambda g: (g * (p * np.power(a.data, p - 1.0)),)
    return out


def shifted_softplus(a) -> Tensor:
    """ln(0.5 * e^x + 0.5); maps 0 to 0, derivative is the logistic function."""
    a = _t(a)
    out = Tensor(np.logaddexp(0.0, a.data) - LN2, (a,))
    out._vjp = lambda g: (g * _sigmoid_np(a.data),)
    return out


def _sigmoid_np(x: np.ndarray) -> np.ndarray:
    return 0.5 * (1.0 + np.tanh(0.5 * x))


def sigmoid(a) -> Tensor:
    a = _t(a)
    out = Tensor(_sigmoid_np(a.data), (a,))
    out._vjp = lambda g: (g * out.data * (1.0 - out.data),)
    return out


def log_sigmoid(a) -> Tensor:
    """Numerically stable ln(sigmoid(x)) = -ln(1 + e^-x)."""
    a = _t(a)
    out = Tensor(-np.logaddexp(0.0, -a.data), (a,))
    out._vjp = lambda g: (g * _sigmoid_np(-a.data),)
    return out


def sum_(a, axis: int | None = None) -> Tensor:
    a = _t(a)
    out = Tensor(np.sum(a.data, axis=axis), (a,))

    def vjp(g):
        if axis is None:
            return (np.broadcast_to(g, a.data.shape).copy(),)
        return (np.broadcast_to(np.expand_dims(g, axis), a.data.shape).copy(),)

    out._vjp = vjp
    return out


def mean_(a, axis: int | None = None) -> Tensor:
    a = _t(a)
    out = Tensor(np.mean(a.data, axis=axis), (a,))
    count = a.data.size if axis is None else a.data.shape[axis]

    def vjp(g):
        if axis is None:
            return (np.broadcast_to(g / count, a.data.shape).copy(),)
        return (np.broadcast_to(np.expand_dims(g, axis) / count, a.data.shape).copy(),)

    out._vjp = vjp
    return out


def concat(parts, axis: int = 0) -> Tensor:
    parts = tuple(_t(p) for p in parts)
    out = Tensor(np.concatenate([p.data for p in parts], axis=axis), parts)
    sizes = [p.data.shape[axis] for p in parts]
    offsets = np.cumsum(sizes)[:-1]

    def vjp(g):
        return tuple(np.split(g, offsets, axis=axis))

    out._vjp = vjp
    return out


def reshape(a, shape) -> Tensor:
    a = _t(a)
    out = Tensor(a.data.reshape(shape), (a,))
    out._vjp = lambda g: (g.reshape(a.data.shape),)
    return out


def gather(a, index) -> Tensor:
    """Select rows of `a` by an integer index array."""
    a = _t(a)
    idx = np.asarray(index, dtype=np.int64)
    out = Tensor(a.data[idx], (a,))

    def vjp(g):
        acc = np.zeros_like(a.data)
        np.add.at(acc, idx, g)
        return (acc,)

    out._vjp = vjp
    return out


def scatter_add(a, index, size: int) -> Tensor:
    """Sum rows of `a` into `size` output slots selected by `index`."""
    a = _t(a)
    idx = np.asarray(index, dtype=np.int64)
    shape = (size,) + a.data.shape[1:]
    acc = np.zeros(shape, dtype=np.float64)
    np.add.at(acc, idx, a.data)
    out = Tensor(acc, (a,))
    out._vjp = lambda g: (g[idx],)
    return out


def stop_gradient(a) -> Tensor:
    """Forward identity that blocks all gradient flow into its input."""
    a = _t(a)
    return Tensor(a.data.copy())


def backward(output: Tensor) -> None:
    """Populate `.grad` on every node reachable from a scalar output.

    Visits nodes exactly once in reverse topological order; gradients
    accumulate additively where a node fans out into several consumers.
    """
    if output.data.size != 1:
        raise ValueError("backward requires a scalar output")
    topo: list[Tensor] = []
    visited: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(output, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            topo.append(node)
            continue
        if id(node) in visited:
            continue
        visited.add(id(node))
        stack.append((node, True))
        for parent in node._parents:
            if id(parent) not in visited:
                stack.append((parent, False))
    output._grad = np.ones_like(output.data)
    for node in reversed(topo):
        if node._vjp is None or node._grad is None:
            continue
        _check_finite(node._grad, "backward pass")
        for parent, g in zip(node._parents, node._vjp(node._grad)):
            if parent._grad is None:
                parent._grad = np.zeros_like(parent.data)
            parent._grad += g


def finite_diff_check(
    f: Callable[..., Tensor],
    leaves: list[Tensor],
    epsilon: float = 1e-5,
    max_entries_per_leaf: int | None = None,
) -> float:
    """Compare reverse-mode gradients of f(*leaves) with central differences.

    Nudges each checked leaf entry by +-epsilon, re-evaluating f from
    scratch, so f must be deterministic (freeze any sampled noise before
    calling). Returns the max over entries of
    |analytic - numeric| / max(|analytic|, |numeric|, 1e-8).

    For very large leaves an evenly spaced subsample of
    `max_entries_per_leaf` entries can be checked instead of every entry.
    """
    if epsilon <= 0:
        raise ValueError("epsilon must be positive")
    out = f(*leaves)
    if out.data.size != 1:
        raise ValueError("finite_diff_check requires a scalar output")
    for leaf in leaves:
        leaf.zero_grad()
    backward(out)
    analytic = [leaf.grad.copy() for leaf in leaves]
    worst = 0.0
    for k, leaf in enumerate(leaves):
        flat = leaf.data.reshape(-1)
        ana = analytic[k].reshape(-1)
        if max_entries_per_leaf is not None and flat.size > max_entries_per_leaf:
            entries = np.linspace(0, flat.size - 1, max_entries_per_leaf).astype(int)
        else:
            entries = range(flat.size)
        for e in entries:
            original = flat[e]
            flat[e] = original + epsilon
            f_plus = float(f(*leaves).data)
            flat[e] = original - epsilon
            f_minus = float(f(*leaves).data)
            flat[e] = original
            numeric = (f_plus - f_minus) / (2.0 * epsilon)
            rel = abs(ana[e] - numeric) / max(abs(ana[e]), abs(numeric), 1e-8)
            worst = max(worst, rel)
    return worst


@dataclass
class AdamState:
    """First/second moment accumulators plus the shared step counter."""

    m: dict[str, np.ndarray]
    v: dict[str, np.ndarray]
    t: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8


def init_adam(params: Mapping[str, np.ndarray]) -> AdamState:
    return AdamState(
        m={k: np.zeros_like(p) for k, p in params.items()},
        v={k: np.zeros_like(p) for k, p in params.items()},
    )


def adam_step(
    state: AdamState,
    params: dict[str, np.ndarray],
    grads: Mapping[str, np.ndarray],
    lr: float,
) -> None:
    """One bias-corrected Adam update, applied to `params` in place."""
    state.t += 1
    bc1 = 1.0 - state.beta1**state.t
    bc2 = 1.0 - state.beta2**state.t
    for name, p in params.items():
        g = np.asarray(grads[name], dtype=np.float64)
        if g.shape != p.shape:
            raise ValueError(f"gradient shape {g.shape} mismatches {name} {p.shape}")
        state.m[name] = state.beta1 * state.m[name] + (1.0 - state.beta1) * g
        state.v[name] = state.beta2 * state.v[name] + (1.0 - state.beta2) * (g * g)
        m_hat = state.m[name] / bc1
        v_hat = state.v[name] / bc2
        params[name] = p - lr * m_hat / (np.sqrt(v_hat) + state.eps)


def cosine_lr(step: int, total: int, lr_max: float, lr_min: float = 0.0) -> float:
    """Cosine annealing from lr_max at step 0 down to lr_min at step total."""
    if total <= 0:
        raise ValueError("total step count must be positive")
    if not 0 <= step <= total:
        raise ValueError(f"step {step} outside [0, {total}]")
    return lr_min + 0.5 * (lr_max - lr_min) * (1.0 + math.cos(math.pi * step / total))


def glorot_uniform(rng: np.random.Generator, fan_in: int, fan_out: int, shape=None):
    """Uniform init in +-sqrt(6 / (fan_in + fan_out))."""
    limit = math.sqrt(6.0 / (fan_in + fan_out))
    if shape is None:
        shape = (fan_in, fan_out)
    return rng.uniform(-limit, limit, size=shape)


def wrap_params(params: Mapping[str, np.ndarray]) -> dict[str, Tensor]:
    """Wrap master arrays as shared graph leaves for one training step."""
    return {k: Tensor(v) for k, v in params.items()}


def collect_grads(leaves: Mapping[str, Tensor]) -> dict[str, np.ndarray]:
    return {k: t.grad for k, t in leaves.items()}
