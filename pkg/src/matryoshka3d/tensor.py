"""Dense tensors with tape-based reverse-mode differentiation.

Operations are recorded only while a :class:`GradTape` is active and at least
one input requires a gradient, so inference runs without bookkeeping::

    w = Tensor(np.ones(3), requires_grad=True)
    with GradTape() as tape:
        loss = (w * w).sum()
    grads = backward(loss, tape)
    grads[w]  # array([2., 2., 2.])
"""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

from .errors import DimensionError, NumericalError, ParameterError, UsageError

_TAPES: list["GradTape"] = []


class GradTape:
    """Ordered record of primitive operations for one reverse pass."""

    def __init__(self):
        self._nodes: list[tuple[Tensor, tuple[Tensor, ...], Callable]] = []
        self._consumed = False

    def __enter__(self):
        if self._consumed:
            raise UsageError("tape already consumed by backward()")
        _TAPES.append(self)
        return self

    def __exit__(self, *exc):
        _TAPES.remove(self)
        return False

    def __len__(self):
        return len(self._nodes)

    def _record(self, out, parents, vjp):
        out._on_tape = True
        self._nodes.append((out, parents, vjp))


def active_tape() -> GradTape | None:
    return _TAPES[-1] if _TAPES else None


class Tensor:
    """Row-major float array plus a ``requires_grad`` flag.

    Tensors are treated as immutable: every op returns a new one.
    """

    __slots__ = ("data", "requires_grad", "_on_tape")
    __array_priority__ = 100.0

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype.kind != "f":
            arr = arr.astype(np.float64)
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self._on_tape = False

    # array-like surface
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

    @property
    def T(self) -> "Tensor":
        return transpose(self)

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else self.data.item()

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{flag})"

    def __len__(self):
        return len(self.data)

    # operators
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

    def __getitem__(self, key):
        return getitem(self, key)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        return transpose(self, axes or None)


def as_tensor(x, dtype=None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    if dtype is not None:
        return Tensor(np.asarray(x, dtype=dtype))
    return Tensor(x)


def _check_finite(arr: np.ndarray, op: str):
    if not np.isfinite(arr).all():
        raise NumericalError(f"non-finite values produced by {op}")


def _result(data: np.ndarray, parents: Sequence[Tensor], vjp: Callable, op: str) -> Tensor:
    _check_finite(data, op)
    out = Tensor(data)
    tape = active_tape()
    if tape is not None and any(p.requires_grad for p in parents):
        out.requires_grad = True
        tape._record(out, tuple(parents), vjp)
    return out


def _pair(a, b):
    """Coerce operands, matching a constant's dtype to the tensor's."""
    if isinstance(a, Tensor) and not isinstance(b, Tensor):
        b = Tensor(np.asarray(b, dtype=a.dtype))
    elif isinstance(b, Tensor) and not isinstance(a, Tensor):
        a = Tensor(np.asarray(a, dtype=b.dtype))
    return as_tensor(a), as_tensor(b)


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for i, s in enumerate(shape):
        if s == 1 and g.shape[i] != 1:
            g = g.sum(axis=i, keepdims=True)
    return g


# elementwise arithmetic


def add(a, b) -> Tensor:
    a, b = _pair(a, b)
    return _result(
        a.data + b.data,
        (a, b),
        lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)),
        "add",
    )


def sub(a, b) -> Tensor:
    a, b = _pair(a, b)
    return _result(
        a.data - b.data,
        (a, b),
        lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)),
        "sub",
    )


def mul(a, b) -> Tensor:
    a, b = _pair(a, b)
    return _result(
        a.data * b.data,
        (a, b),
        lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)),
        "mul",
    )


def div(a, b) -> Tensor:
    a, b = _pair(a, b)
    out = a.data / b.data

    def vjp(g):
        ga = g / b.data
        return _unbroadcast(ga, a.shape), _unbroadcast(-ga * out, b.shape)

    return _result(out, (a, b), vjp, "div")


def neg(a: Tensor) -> Tensor:
    return _result(-a.data, (a,), lambda g: (-g,), "neg")


def exp(a: Tensor) -> Tensor:
    out = np.exp(a.data)
    return _result(out, (a,), lambda g: (g * out,), "exp")


def log(a: Tensor) -> Tensor:
    if (a.data <= 0).any():
        raise NumericalError("log of non-positive value")
    return _result(np.log(a.data), (a,), lambda g: (g / a.data,), "log")


def sqrt(a: Tensor) -> Tensor:
    out = np.sqrt(a.data)
    return _result(out, (a,), lambda g: (0.5 * g / out,), "sqrt")


def silu(a: Tensor) -> Tensor:
    sig = 0.5 * (1.0 + np.tanh(0.5 * a.data))
    out = a.data * sig
    return _result(out, (a,), lambda g: (g * (sig + out * (1.0 - sig)),), "silu")


# reductions and shape ops


def tsum(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    out = a.data.sum(axis=axis, keepdims=keepdims)

    def vjp(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.shape).copy(),)

    return _result(np.asarray(out), (a,), vjp, "sum")


def mean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    if axis is None:
        n = a.size
    else:
        axes = (axis,) if isinstance(axis, int) else axis
        n = int(np.prod([a.shape[i] for i in axes]))
    return tsum(a, axis, keepdims) * (1.0 / n)


def reshape(a: Tensor, shape) -> Tensor:
    return _result(a.data.reshape(shape), (a,), lambda g: (g.reshape(a.shape),), "reshape")


def transpose(a: Tensor, axes=None) -> Tensor:
    if axes is None:
        axes = tuple(reversed(range(a.ndim)))
    inv = tuple(np.argsort(axes))
    return _result(a.data.transpose(axes), (a,), lambda g: (g.transpose(inv),), "transpose")


def getitem(a: Tensor, key) -> Tensor:
    out = a.data[key]

    def vjp(g):
        full = np.zeros_like(a.data)
        np.add.at(full, key, g)
        return (full,)

    return _result(np.array(out, copy=True), (a,), vjp, "getitem")


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    out = np.concatenate([t.data for t in tensors], axis=axis)
    bounds = np.cumsum([t.shape[axis] for t in tensors])[:-1]
    return _result(out, tensors, lambda g: tuple(np.split(g, bounds, axis=axis)), "concat")


# linear algebra


def matmul(a, b) -> Tensor:
    """Matrix product for 2-D operands, stacks against a 2-D right operand,
    or stacks with identical leading extents."""
    a, b = _pair(a, b)
    if a.ndim < 2 or b.ndim < 2:
        raise DimensionError(f"matmul needs >=2-D operands, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul inner extents differ: {a.shape} @ {b.shape}")
    if b.ndim == 2:

        def vjp(g):
            k, n = b.shape
            gb = a.data.reshape(-1, k).T @ g.reshape(-1, n)
            return g @ b.data.T, gb

    elif a.shape[:-2] == b.shape[:-2]:

        def vjp(g):
            return g @ np.swapaxes(b.data, -1, -2), np.swapaxes(a.data, -1, -2) @ g

    else:
        raise DimensionError(f"unsupported batch shapes for matmul: {a.shape} @ {b.shape}")
    return _result(a.data @ b.data, (a, b), vjp, "matmul")


# fused neural-network primitives


def rms_norm(x: Tensor, gamma: Tensor, eps: float = 1e-6) -> Tensor:
    """Scale each trailing vector to unit root-mean-square, then by ``gamma``."""
    x, gamma = as_tensor(x), as_tensor(gamma)
    if eps <= 0:
        raise ParameterError("eps must be positive")
    if gamma.ndim != 1 or x.shape[-1] != gamma.shape[0]:
        raise DimensionError(f"rms_norm: last extent {x.shape[-1]} vs gamma {gamma.shape}")
    inv = 1.0 / np.sqrt(np.mean(x.data * x.data, axis=-1, keepdims=True) + eps)
    xhat = x.data * inv

    def vjp(g):
        gx_hat = g * gamma.data
        gx = inv * (gx_hat - xhat * np.mean(gx_hat * xhat, axis=-1, keepdims=True))
        ggamma = (g * xhat).reshape(-1, gamma.shape[0]).sum(axis=0)
        return gx, ggamma

    return _result(xhat * gamma.data, (x, gamma), vjp, "rms_norm")


def softmax(x: Tensor, axis: int = -1, mask: np.ndarray | None = None) -> Tensor:
    """Softmax with row-max subtraction; ``mask`` False entries get probability 0."""
    z = x.data
    if mask is not None:
        z = np.where(mask, z, -np.inf)
    z = z - z.max(axis=axis, keepdims=True)
    e = np.exp(z)
    out = e / e.sum(axis=axis, keepdims=True)

    def vjp(g):
        return (out * (g - (g * out).sum(axis=axis, keepdims=True)),)

    return _result(out, (x,), vjp, "softmax")


def logsumexp(x: Tensor, axis: int = -1) -> Tensor:
    m = x.data.max(axis=axis, keepdims=True)
    e = np.exp(x.data - m)
    s = e.sum(axis=axis, keepdims=True)
    out = (np.log(s) + m).squeeze(axis)

    def vjp(g):
        return (np.expand_dims(g, axis) * (e / s),)

    return _result(out, (x,), vjp, "logsumexp")


def l2_normalize(x: Tensor, axis: int = -1) -> Tensor:
    n = np.sqrt((x.data * x.data).sum(axis=axis, keepdims=True))
    if (n == 0).any():
        raise NumericalError("cannot normalize a zero vector")
    y = x.data / n

    def vjp(g):
        return ((g - y * (g * y).sum(axis=axis, keepdims=True)) / n,)

    return _result(y, (x,), vjp, "l2_normalize")


def rope(x: Tensor, cos: np.ndarray, sin: np.ndarray) -> Tensor:
    """Rotary position encoding over the last axis (half-split layout).

    ``cos``/``sin`` broadcast against ``x`` and have the full last extent.
    """
    half = x.shape[-1] // 2

    def rot(a):
        return np.concatenate([-a[..., half:], a[..., :half]], axis=-1)

    def rot_t(a):
        return np.concatenate([a[..., half:], -a[..., :half]], axis=-1)

    out = x.data * cos + rot(x.data) * sin
    return _result(out, (x,), lambda g: (g * cos + rot_t(g * sin),), "rope")


def embedding(weight: Tensor, ids: np.ndarray) -> Tensor:
    """Gather rows of ``weight`` by integer ``ids`` (any shape)."""
    ids = np.asarray(ids)
    if ids.size and (ids.min() < 0 or ids.max() >= weight.shape[0]):
        raise DimensionError(f"token id out of range [0, {weight.shape[0]})")

    def vjp(g):
        full = np.zeros_like(weight.data)
        np.add.at(full, ids.reshape(-1), g.reshape(-1, weight.shape[1]))
        return (full,)

    return _result(weight.data[ids], (weight,), vjp, "embedding")


# reverse pass


def backward(loss: Tensor, tape: GradTape, wrt: Sequence[Tensor] = ()) -> dict:
    """Run the reverse pass and return ``{leaf tensor: gradient array}``.

    Every tensor in ``wrt`` gets an entry, zero if it is disconnected from
    ``loss``. The tape cannot be replayed afterwards.
    """
    if tape._consumed:
        raise UsageError("tape already consumed")
    if loss.size != 1:
        raise UsageError(f"backward needs a scalar loss, got shape {loss.shape}")
    tape._consumed = True
    grads: dict[int, np.ndarray] = {}
    leaves: dict[int, Tensor] = {}
    if loss.requires_grad:
        grads[id(loss)] = np.ones_like(loss.data)
    if loss.requires_grad and not loss._on_tape:
        leaves[id(loss)] = loss
    for out, parents, vjp in reversed(tape._nodes):
        g = grads.pop(id(out), None)
        if g is None:
            continue
        for p, pg in zip(parents, vjp(g)):
            if pg is None or not p.requires_grad:
                continue
            if not p._on_tape:
                leaves[id(p)] = p
            prev = grads.get(id(p))
            grads[id(p)] = pg if prev is None else prev + pg
    result = {t: grads[k] for k, t in leaves.items()}
    for t in wrt:
        if t not in result:
            result[t] = np.zeros_like(t.data)
    tape._nodes = []
    return result


def finite_diff_grad(f: Callable[[Tensor], object], x, h: float = 1e-4) -> np.ndarray:
    """Central-difference gradient of scalar ``f`` at ``x``."""
    if h <= 0:
        raise ParameterError("step h must be positive")
    base = np.array(x.data if isinstance(x, Tensor) else x, dtype=np.float64)
    grad = np.zeros_like(base)
    flat = base.reshape(-1)
    gflat = grad.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        fp = _scalar(f(Tensor(base.copy())))
        flat[i] = orig - h
        fm = _scalar(f(Tensor(base.copy())))
        flat[i] = orig
        gflat[i] = (fp - fm) / (2 * h)
    return grad


def _scalar(v) -> float:
    v = float(v.item() if isinstance(v, Tensor) else np.asarray(v).reshape(-1)[0])
    if not np.isfinite(v):
        raise NumericalError("function value is not finite")
    return v
