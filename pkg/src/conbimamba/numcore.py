"""Dense float64 tensors with tape-based reverse-mode differentiation.

Storage is a C-ordered numpy array; every differentiable op records one node
on the calling thread's tape and ``backward`` replays the tape in reverse.
Broadcasting is deliberately narrow: exact shapes, scalars, and a trailing
suffix (``(..., d) + (d,)``, used for biases and per-channel gains).
"""

from __future__ import annotations

import contextlib
import threading
from dataclasses import dataclass
from typing import Callable, Iterator, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from scipy.special import expit

__all__ = [
    "ShapeError",
    "ConfigError",
    "DegenerateInputError",
    "ContractError",
    "Tensor",
    "Tape",
    "tensor",
    "parameter",
    "no_grad",
    "current_tape",
    "record",
    "backward",
    "matmul",
    "add",
    "sub",
    "mul",
    "div",
    "neg",
    "sigmoid",
    "relu",
    "silu",
    "glu",
    "softplus",
    "exp",
    "log",
    "power",
    "clip",
    "tsum",
    "mean",
    "softmax",
    "layer_norm",
    "depthwise_conv1d",
    "dropout",
    "masked_fill",
    "index",
    "stack",
    "concat",
    "slice_last",
    "flip",
    "reshape",
    "elementwise",
    "numerical_gradient",
]


class ShapeError(ValueError):
    """Operand shapes are incompatible."""


class ConfigError(ValueError):
    """An operation was configured with invalid hyperparameters."""


class DegenerateInputError(ValueError):
    """Input carries no usable information (e.g. softmax over all -inf)."""


class ContractError(ValueError):
    """A documented precondition of an operation was violated."""


class Tensor:
    """A real array with an optional gradient slot.

    ``data`` is owned by the tensor; constructors copy. ``grad`` is filled by
    :func:`backward` for tensors with ``requires_grad``.
    """

    __slots__ = ("data", "grad", "requires_grad", "name")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None, copy: bool = True):
        if copy:
            self.data = np.array(data, dtype=np.float64, order="C")
        else:
            self.data = np.ascontiguousarray(data, dtype=np.float64)
        self.grad: np.ndarray | None = None
        self.requires_grad = bool(requires_grad)
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data.copy()

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"

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

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def sum(self, axis=None):
        return tsum(self, axis)

    def mean(self, axis=None):
        return mean(self, axis)


def tensor(data, requires_grad: bool = False, name: str | None = None) -> Tensor:
    return Tensor(data, requires_grad=requires_grad, name=name)


def parameter(data, name: str | None = None) -> Tensor:
    return Tensor(data, requires_grad=True, name=name)


# --------------------------------------------------------------------------
# tape


@dataclass(eq=False)
class _Node:
    out: Tensor
    parents: tuple[Tensor, ...]
    backward: Callable[[np.ndarray], Sequence[np.ndarray | None]]


class Tape:
    """Ordered record of executed differentiable operations."""

    def __init__(self) -> None:
        self.nodes: list[_Node] = []

    def __len__(self) -> int:
        return len(self.nodes)

    def clear(self) -> None:
        self.nodes.clear()


_local = threading.local()


def current_tape() -> Tape:
    tape = getattr(_local, "tape", None)
    if tape is None:
        tape = _local.tape = Tape()
    return tape


def _grad_enabled() -> bool:
    return getattr(_local, "enabled", True)


@contextlib.contextmanager
def no_grad() -> Iterator[None]:
    """Disable recording on this thread (inference)."""
    prev = _grad_enabled()
    _local.enabled = False
    try:
        yield
    finally:
        _local.enabled = prev


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def record(out_data: np.ndarray, parents: Sequence[Tensor], backward_fn) -> Tensor:
    """Wrap ``out_data`` as a tensor and record its gradient rule.

    ``backward_fn(g)`` receives d(loss)/d(out) and returns one gradient (or
    ``None``) per parent, each shaped like that parent.
    """
    needs = _grad_enabled() and any(p.requires_grad for p in parents)
    out = Tensor(out_data, requires_grad=needs, copy=False)
    if needs:
        current_tape().nodes.append(_Node(out, tuple(parents), backward_fn))
    return out


def backward(loss: Tensor) -> None:
    """Populate ``grad`` of every leaf that ``loss`` depends on; consume the tape."""
    if loss.data.size != 1:
        raise ContractError(f"backward() needs a scalar loss, got shape {loss.shape}")
    tape = current_tape()
    if not loss.requires_grad:
        tape.clear()
        return
    if not tape.nodes:
        raise ContractError("backward() called with an empty tape")
    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    leaves: dict[int, Tensor] = {}
    produced = set()
    for node in reversed(tape.nodes):
        produced.add(id(node.out))
        g = grads.pop(id(node.out), None)
        if g is None:
            continue
        for parent, pg in zip(node.parents, node.backward(g)):
            if pg is None or not parent.requires_grad:
                continue
            key = id(parent)
            if key in grads:
                grads[key] = grads[key] + pg
            else:
                grads[key] = pg
                leaves[key] = parent
    for key, g in grads.items():
        if key in produced or key not in leaves:
            continue
        t = leaves[key]
        g = np.asarray(g, dtype=np.float64).reshape(t.shape)
        t.grad = g.copy() if t.grad is None else t.grad + g
    tape.clear()


# --------------------------------------------------------------------------
# broadcasting helpers


def _check_broadcast(a: np.ndarray, b: np.ndarray, op: str) -> None:
    sa, sb = a.shape, b.shape
    if sa == sb or a.size == 1 and a.ndim <= 1 or b.size == 1 and b.ndim <= 1:
        return
    short, long_ = (sa, sb) if len(sa) < len(sb) else (sb, sa)
    if len(short) and long_[len(long_) - len(short):] == short:
        return
    raise ShapeError(f"{op}: incompatible shapes {sa} and {sb}")


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    if len(shape) == 0 or int(np.prod(shape)) == 1:
        return np.asarray(g.sum()).reshape(shape)
    lead = g.ndim - len(shape)
    return g.sum(axis=tuple(range(lead))).reshape(shape)


# --------------------------------------------------------------------------
# arithmetic


def add(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _check_broadcast(a.data, b.data, "add")

    def bw(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return record(a.data + b.data, (a, b), bw)


def sub(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _check_broadcast(a.data, b.data, "sub")

    def bw(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return record(a.data - b.data, (a, b), bw)


def mul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _check_broadcast(a.data, b.data, "mul")

    def bw(g):
        ga = _unbroadcast(g * b.data, a.shape) if a.requires_grad else None
        gb = _unbroadcast(g * a.data, b.shape) if b.requires_grad else None
        return ga, gb

    return record(a.data * b.data, (a, b), bw)


def div(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _check_broadcast(a.data, b.data, "div")
    out = a.data / b.data

    def bw(g):
        ga = _unbroadcast(g / b.data, a.shape) if a.requires_grad else None
        gb = _unbroadcast(-g * out / b.data, b.shape) if b.requires_grad else None
        return ga, gb

    return record(out, (a, b), bw)


def neg(a) -> Tensor:
    a = _as_tensor(a)
    return record(-a.data, (a,), lambda g: (-g,))


def matmul(a, b) -> Tensor:
    """``(..., k) @ (k, n) -> (..., n)``."""
    a, b = _as_tensor(a), _as_tensor(b)
    if b.ndim != 2 or a.ndim < 1 or a.shape[-1] != b.shape[0]:
        raise ShapeError(f"matmul: cannot multiply {a.shape} by {b.shape}")
    out = a.data @ b.data

    def bw(g):
        ga = g @ b.data.T if a.requires_grad else None
        gb = None
        if b.requires_grad:
            k, n = b.shape
            gb = a.data.reshape(-1, k).T @ g.reshape(-1, n)
        return ga, gb

    return record(out, (a, b), bw)


# --------------------------------------------------------------------------
# pointwise


def _sigmoid(x: np.ndarray) -> np.ndarray:
    return expit(x)


def sigmoid(x) -> Tensor:
    x = _as_tensor(x)
    s = _sigmoid(x.data)
    return record(s, (x,), lambda g: (g * s * (1.0 - s),))


def relu(x) -> Tensor:
    x = _as_tensor(x)
    mask = x.data > 0
    return record(np.where(mask, x.data, 0.0), (x,), lambda g: (g * mask,))


def silu(x) -> Tensor:
    x = _as_tensor(x)
    s = _sigmoid(x.data)
    out = x.data * s
    return record(out, (x,), lambda g: (g * (s + out * (1.0 - s)),))


def glu(x) -> Tensor:
    """Split the last axis in halves ``(a, b)`` and return ``a * sigmoid(b)``."""
    x = _as_tensor(x)
    d = x.shape[-1]
    if d % 2:
        raise ShapeError(f"glu: last axis must be even, got {x.shape}")
    a, b = x.data[..., : d // 2], x.data[..., d // 2 :]
    s = _sigmoid(b)

    def bw(g):
        return (np.concatenate([g * s, g * a * s * (1.0 - s)], axis=-1),)

    return record(a * s, (x,), bw)


def softplus(x) -> Tensor:
    x = _as_tensor(x)
    out = np.logaddexp(0.0, x.data)
    s = _sigmoid(x.data)
    return record(out, (x,), lambda g: (g * s,))


def exp(x) -> Tensor:
    x = _as_tensor(x)
    out = np.exp(x.data)
    return record(out, (x,), lambda g: (g * out,))


def log(x) -> Tensor:
    x = _as_tensor(x)
    return record(np.log(x.data), (x,), lambda g: (g / x.data,))


def power(x, p: float) -> Tensor:
    x = _as_tensor(x)
    out = x.data**p
    if p == 0:
        return record(out, (x,), lambda g: (np.zeros_like(g),))
    return record(out, (x,), lambda g: (g * p * x.data ** (p - 1),))


def clip(x, lo: float, hi: float) -> Tensor:
    """Clamp to ``[lo, hi]``; gradient is zero where clamping is active."""
    x = _as_tensor(x)
    inside = (x.data >= lo) & (x.data <= hi)
    return record(np.clip(x.data, lo, hi), (x,), lambda g: (g * inside,))


_UNARY = {"sigmoid": sigmoid, "relu": relu, "silu": silu, "glu": glu}
_BINARY = {"add": add, "mul": mul}


def elementwise(op: str, *args) -> Tensor:
    """Dispatch by name: ``sigmoid|relu|silu|glu`` (unary), ``add|mul`` (binary)."""
    if op in _UNARY:
        return _UNARY[op](*args)
    if op in _BINARY:
        return _BINARY[op](*args)
    raise ConfigError(f"unknown elementwise op {op!r}")


# --------------------------------------------------------------------------
# reductions and normalisation


def tsum(x, axis=None) -> Tensor:
    x = _as_tensor(x)
    out = x.data.sum(axis=axis)

    def bw(g):
        if axis is None:
            return (np.broadcast_to(g, x.shape).copy(),)
        return (np.broadcast_to(np.expand_dims(g, axis), x.shape).copy(),)

    return record(np.asarray(out), (x,), bw)


def mean(x, axis=None) -> Tensor:
    x = _as_tensor(x)
    n = x.data.size if axis is None else np.prod([x.shape[a] for a in np.atleast_1d(axis)])
    # divide rather than scale by 1/n so values match np.mean bit for bit
    return tsum(x, axis) / float(n)


def softmax(x) -> Tensor:
    """Softmax over the last axis; ``-inf`` entries map to exactly 0."""
    x = _as_tensor(x)
    if x.size == 0 or x.shape[-1] < 1:
        raise ShapeError("softmax: empty input")
    m = np.max(x.data, axis=-1, keepdims=True)
    if not np.all(np.isfinite(m)):
        raise DegenerateInputError("softmax: every entry is -inf (or input is not finite)")
    e = np.exp(x.data - m)
    out = e / e.sum(axis=-1, keepdims=True)

    def bw(g):
        return (out * (g - (g * out).sum(axis=-1, keepdims=True)),)

    return record(out, (x,), bw)


def layer_norm(x, gain, bias, eps: float = 1e-5) -> Tensor:
    """Normalise the last axis to zero mean and unit variance, then ``* gain + bias``."""
    x, gain, bias = _as_tensor(x), _as_tensor(gain), _as_tensor(bias)
    d = x.shape[-1]
    if gain.shape != (d,) or bias.shape != (d,):
        raise ShapeError(f"layer_norm: gain {gain.shape} / bias {bias.shape} do not match width {d}")
    if eps <= 0:
        raise ConfigError("layer_norm: eps must be positive")
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv

    def bw(g):
        gx = None
        if x.requires_grad:
            gh = g * gain.data
            gx = inv * (gh - gh.mean(axis=-1, keepdims=True) - xhat * (gh * xhat).mean(axis=-1, keepdims=True))
        lead = tuple(range(g.ndim - 1))
        return gx, (g * xhat).sum(axis=lead), g.sum(axis=lead)

    return record(xhat * gain.data + bias.data, (x, gain, bias), bw)


# --------------------------------------------------------------------------
# convolution


def depthwise_conv1d(x, kernel, padding: str = "same") -> Tensor:
    """Per-channel 1-D cross-correlation along the time axis.

    ``x`` is ``(..., T, d)`` and ``kernel`` is ``(k, d)``. ``"same"`` pads
    ``(k-1)/2`` zeros each side and needs odd ``k``; ``"causal"`` pads ``k-1``
    zeros on the left so output ``t`` sees inputs ``t-k+1 .. t``.
    """
    x, kernel = _as_tensor(x), _as_tensor(kernel)
    if kernel.ndim != 2 or x.ndim < 2 or kernel.shape[1] != x.shape[-1]:
        raise ShapeError(f"depthwise_conv1d: input {x.shape} and kernel {kernel.shape} disagree")
    k = kernel.shape[0]
    if padding == "same":
        if k % 2 == 0:
            raise ConfigError(f"depthwise_conv1d: 'same' padding needs an odd kernel, got {k}")
        left = right = (k - 1) // 2
    elif padding == "causal":
        left, right = k - 1, 0
    else:
        raise ConfigError(f"depthwise_conv1d: unknown padding {padding!r}")
    T = x.shape[-2]
    pad = [(0, 0)] * (x.ndim - 2) + [(left, right), (0, 0)]
    xp = np.pad(x.data, pad)
    w = kernel.data
    # windows[..., t, c, j] == xp[..., t + j, c]
    windows = sliding_window_view(xp, k, axis=-2)
    out = np.einsum("...tcj,jc->...tc", windows, w, optimize=True)

    def bw(g):
        gx = gk = None
        if x.requires_grad:
            gpad = [(0, 0)] * (g.ndim - 2) + [(right, left), (0, 0)]
            gwin = sliding_window_view(np.pad(g, gpad), k, axis=-2)
            gx = np.einsum("...tcj,jc->...tc", gwin, w[::-1], optimize=True)
        if kernel.requires_grad:
            gk = np.einsum("...tcj,...tc->jc", windows, g, optimize=True)
        return gx, gk

    return record(out, (x, kernel), bw)


# --------------------------------------------------------------------------
# structural ops


def dropout(x, rate: float, rng: np.random.Generator | None, training: bool) -> Tensor:
    """Inverted dropout; identity unless ``training`` and ``rate > 0``."""
    x = _as_tensor(x)
    if not 0.0 <= rate < 1.0:
        raise ConfigError(f"dropout rate must be in [0, 1), got {rate}")
    if not training or rate == 0.0:
        return x
    if rng is None:
        raise ContractError("dropout in training mode needs an explicit random generator")
    keep = (rng.random(x.shape) >= rate) / (1.0 - rate)
    return record(x.data * keep, (x,), lambda g: (g * keep,))


def masked_fill(x, mask: np.ndarray, value: float) -> Tensor:
    """Replace entries where ``mask`` is true by a constant (no gradient there)."""
    x = _as_tensor(x)
    mask = np.asarray(mask, dtype=bool)
    if mask.shape != x.shape:
        raise ShapeError(f"masked_fill: mask {mask.shape} vs input {x.shape}")
    keep = ~mask
    return record(np.where(mask, value, x.data), (x,), lambda g: (g * keep,))


def index(x, idx) -> Tensor:
    x = _as_tensor(x)
    out = np.array(x.data[idx], dtype=np.float64)

    basic = all(isinstance(i, (int, slice)) for i in (idx if isinstance(idx, tuple) else (idx,)))

    def bw(g):
        gx = np.zeros_like(x.data)
        if basic:
            gx[idx] += np.reshape(g, np.shape(gx[idx]))
        else:
            np.add.at(gx, idx, g)
        return (gx,)

    return record(out, (x,), bw)


def stack(xs: Sequence[Tensor], axis: int = 0) -> Tensor:
    xs = [_as_tensor(x) for x in xs]
    shapes = {x.shape for x in xs}
    if len(shapes) != 1:
        raise ShapeError(f"stack: shapes differ {sorted(shapes)}")
    out = np.stack([x.data for x in xs], axis=axis)

    def bw(g):
        return [np.take(g, i, axis=axis) for i in range(len(xs))]

    return record(out, xs, bw)


def concat(xs: Sequence[Tensor], axis: int = -1) -> Tensor:
    xs = [_as_tensor(x) for x in xs]
    out = np.concatenate([x.data for x in xs], axis=axis)
    bounds = np.cumsum([x.shape[axis] for x in xs])[:-1]

    def bw(g):
        return np.split(g, bounds, axis=axis)

    return record(out, xs, bw)


def slice_last(x, start: int, stop: int) -> Tensor:
    x = _as_tensor(x)

    def bw(g):
        gx = np.zeros_like(x.data)
        gx[..., start:stop] = g
        return (gx,)

    return record(x.data[..., start:stop].copy(), (x,), bw)


def flip(x, axis: int) -> Tensor:
    x = _as_tensor(x)
    return record(np.flip(x.data, axis=axis).copy(), (x,), lambda g: (np.flip(g, axis=axis).copy(),))


def reshape(x, shape: tuple[int, ...]) -> Tensor:
    x = _as_tensor(x)
    return record(x.data.reshape(shape).copy(), (x,), lambda g: (g.reshape(x.shape),))


# --------------------------------------------------------------------------
# checking


def numerical_gradient(f: Callable[[], float], t: Tensor, step: float = 1e-5) -> np.ndarray:
    """Central finite differences of scalar ``f()`` with respect to ``t.data``."""
    grad = np.zeros_like(t.data)
    flat = t.data.reshape(-1)
    gflat = grad.reshape(-1)
    with no_grad():
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + step
            fp = f()
            flat[i] = orig - step
            fm = f()
            flat[i] = orig
            gflat[i] = (fp - fm) / (2.0 * step)
    return grad
