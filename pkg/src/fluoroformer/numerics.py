"""Dense tensors with reverse-mode differentiation.

A deliberately small autograd engine on top of numpy.  Every primitive
records its inputs and a backward rule on the output tensor; ``backward``
walks the recorded graph in reverse topological order.  Only the operations
the model needs are provided, and broadcasting is limited to the numpy
rules used for bias and affine terms.
"""

from __future__ import annotations

import contextlib
import math
from dataclasses import dataclass
from typing import Callable, Iterable, Sequence

import numpy as np
from scipy.special import ndtr

__all__ = [
    "Tensor",
    "DimensionError",
    "NumericError",
    "GraphError",
    "precision",
    "no_grad",
    "zero_grad",
    "set_precision",
    "get_dtype",
    "tensor",
    "parameter",
    "matmul",
    "linear",
    "transpose",
    "reshape",
    "concat",
    "softmax",
    "tanh",
    "sigm",
    "gelu",
    "hadamard",
    "add",
    "sub",
    "div",
    "scale",
    "log",
    "cumprod",
    "mean",
    "sum_",
    "norm_stats",
    "elementwise",
    "backward",
    "topological_order",
    "numeric_grad",
    "gradcheck",
    "relative_error",
]


class DimensionError(ValueError):
    """Operand shapes are incompatible."""


class NumericError(ArithmeticError):
    """A forward pass produced NaN or Inf."""


class GraphError(RuntimeError):
    """Misuse of the autograd graph (non-scalar loss, double backward)."""


_grad_enabled = True


@contextlib.contextmanager
def no_grad():
    """Disable graph recording (forward-only evaluation)."""
    global _grad_enabled
    previous = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = previous


_PRECISIONS = {"float64": np.float64, "float32": np.float32, "64": np.float64, "32": np.float32}
_dtype = np.float64


def set_precision(name: str | type) -> None:
    """Set the storage dtype used when tensors are created from raw data."""
    global _dtype
    if isinstance(name, str):
        try:
            _dtype = _PRECISIONS[name]
        except KeyError:
            raise ValueError(f"unknown precision {name!r}") from None
    else:
        _dtype = np.dtype(name).type


def get_dtype():
    return _dtype


@contextlib.contextmanager
def precision(name: str | type):
    """Temporarily switch the default precision."""
    previous = _dtype
    set_precision(name)
    try:
        yield
    finally:
        set_precision(previous)


@dataclass(eq=False)
class Node:
    """One recorded primitive application."""

    op: str
    inputs: tuple["Tensor", ...]
    backward_rule: Callable[[np.ndarray], Sequence[np.ndarray | None]]


class Tensor:
    """An n-d array that optionally records how it was computed.

    Tensors are not mutated by operations.  ``grad`` is filled by
    :func:`backward` for every tensor with ``requires_grad`` set.
    """

    __slots__ = ("data", "requires_grad", "grad", "node", "_consumed", "name")
    __array_priority__ = 100

    def __init__(self, data, requires_grad: bool = False, name: str | None = None, dtype=None):
        arr = np.asarray(data, dtype=dtype or _dtype)
        if not arr.flags.c_contiguous:
            arr = np.ascontiguousarray(arr)
        self.data = arr
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self.node: Node | None = None
        self._consumed = False
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

    @property
    def dtype(self):
        return self.data.dtype

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else _raise_not_scalar(self)

    def detach(self) -> "Tensor":
        return Tensor(self.data, dtype=self.data.dtype)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        label = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{label}, requires_grad={self.requires_grad})"

    def backward(self) -> None:
        backward(self)

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, other)
        return hadamard(self, other)

    def __rmul__(self, other):
        return self.__mul__(other)

    def __truediv__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, 1.0 / other)
        return div(self, other)

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return take(self, index)

    @property
    def T(self) -> "Tensor":
        return transpose(self)


def _raise_not_scalar(t: Tensor):
    raise GraphError(f"tensor of shape {t.shape} is not a scalar")


def tensor(data, requires_grad: bool = False, name: str | None = None) -> Tensor:
    return Tensor(data, requires_grad=requires_grad, name=name)


def parameter(data, name: str | None = None) -> Tensor:
    return Tensor(data, requires_grad=True, name=name)


def _as_tensor(x, like: Tensor | None = None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    dtype = like.dtype if like is not None else None
    return Tensor(x, dtype=dtype)


def _check_finite(arr: np.ndarray, op: str) -> None:
    if not np.isfinite(arr).all():
        raise NumericError(f"{op} produced non-finite values")


def _make(data: np.ndarray, op: str, inputs: tuple[Tensor, ...], rule) -> Tensor:
    _check_finite(data, op)
    out = Tensor(data, dtype=data.dtype)
    if _grad_enabled and any(t.requires_grad for t in inputs):
        out.requires_grad = True
        out.node = Node(op, inputs, rule)
    return out


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
    return grad.reshape(shape)


def _broadcast_shape(a: Tensor, b: Tensor, op: str) -> None:
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise DimensionError(f"{op}: shapes {a.shape} and {b.shape} do not match") from None


# ---------------------------------------------------------------------------
# linear algebra
# ---------------------------------------------------------------------------


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product of 2-d operands, or batched product of 3-d operands."""
    a, b = _as_tensor(a), _as_tensor(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul: cannot multiply {a.shape} by {b.shape}")
    if a.ndim > 2 or b.ndim > 2:
        if a.shape[:-2] != b.shape[:-2] and b.ndim != 2:
            raise DimensionError(f"matmul: batch extents differ, {a.shape} vs {b.shape}")
    out = np.matmul(a.data, b.data)

    def rule(g):
        ga = np.matmul(g, np.swapaxes(b.data, -1, -2))
        if b.ndim == 2 and g.ndim > 2:
            gb = a.data.reshape(-1, a.shape[-1]).T @ g.reshape(-1, g.shape[-1])
        else:
            gb = np.matmul(np.swapaxes(a.data, -1, -2), g)
        return ga, gb

    return _make(out, "matmul", (a, b), rule)


def linear(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    """Affine map over the last axis: ``x @ weight.T + bias``.

    ``weight`` has shape ``(out_features, in_features)``.
    """
    if weight.ndim != 2 or x.shape[-1] != weight.shape[1]:
        raise DimensionError(f"linear: input {x.shape} incompatible with weight {weight.shape}")
    if bias is not None and bias.shape != (weight.shape[0],):
        raise DimensionError(f"linear: bias {bias.shape} does not match weight {weight.shape}")
    out = x.data @ weight.data.T
    if bias is not None:
        out = out + bias.data
    inputs = (x, weight) if bias is None else (x, weight, bias)

    def rule(g):
        gx = g @ weight.data
        g2 = g.reshape(-1, g.shape[-1])
        gw = g2.T @ x.data.reshape(-1, x.shape[-1])
        if bias is None:
            return gx, gw
        return gx, gw, g2.sum(axis=0)

    return _make(out, "linear", inputs, rule)


def transpose(x: Tensor) -> Tensor:
    """Swap the last two axes."""
    if x.ndim < 2:
        raise DimensionError("transpose needs at least 2 axes")
    return _make(np.ascontiguousarray(np.swapaxes(x.data, -1, -2)), "transpose", (x,),
                 lambda g: (np.swapaxes(g, -1, -2),))


def reshape(x: Tensor, shape: tuple[int, ...]) -> Tensor:
    return _make(x.data.reshape(shape), "reshape", (x,), lambda g: (g.reshape(x.shape),))


def take(x: Tensor, index) -> Tensor:
    """Basic/advanced indexing with a scatter-add backward."""
    out = np.array(x.data[index], dtype=x.dtype)

    def rule(g):
        full = np.zeros_like(x.data)
        np.add.at(full, index, g)
        return (full,)

    return _make(out, "take", (x,), rule)


def concat(tensors: Sequence[Tensor], axis: int = -1) -> Tensor:
    tensors = tuple(tensors)
    out = np.concatenate([t.data for t in tensors], axis=axis)
    bounds = np.cumsum([t.shape[axis] for t in tensors])[:-1]

    def rule(g):
        return tuple(np.split(g, bounds, axis=axis))

    return _make(out, "concat", tensors, rule)


# ---------------------------------------------------------------------------
# elementwise
# ---------------------------------------------------------------------------


def add(a, b) -> Tensor:
    a = _as_tensor(a, b if isinstance(b, Tensor) else None)
    b = _as_tensor(b, a)
    _broadcast_shape(a, b, "add")
    return _make(a.data + b.data, "add", (a, b),
                 lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)))


def sub(a, b) -> Tensor:
    a = _as_tensor(a, b if isinstance(b, Tensor) else None)
    b = _as_tensor(b, a)
    _broadcast_shape(a, b, "sub")
    return _make(a.data - b.data, "sub", (a, b),
                 lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)))


def hadamard(a, b) -> Tensor:
    a = _as_tensor(a, b if isinstance(b, Tensor) else None)
    b = _as_tensor(b, a)
    _broadcast_shape(a, b, "hadamard")
    return _make(a.data * b.data, "hadamard", (a, b),
                 lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)))


def div(a, b) -> Tensor:
    a = _as_tensor(a, b if isinstance(b, Tensor) else None)
    b = _as_tensor(b, a)
    _broadcast_shape(a, b, "div")
    out = a.data / b.data

    def rule(g):
        return _unbroadcast(g / b.data, a.shape), _unbroadcast(-g * out / b.data, b.shape)

    return _make(out, "div", (a, b), rule)


def scale(x: Tensor, c: float) -> Tensor:
    c = float(c)
    return _make(x.data * x.dtype.type(c), "scale", (x,), lambda g: (g * c,))


def tanh(x: Tensor) -> Tensor:
    out = np.tanh(x.data)
    return _make(out, "tanh", (x,), lambda g: (g * (1.0 - out * out),))


def _sigmoid(z: np.ndarray) -> np.ndarray:
    # split by sign so exp never overflows; underflow to 0 is exact enough
    out = np.empty_like(z)
    pos = z >= 0
    with np.errstate(under="ignore"):
        out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
        ez = np.exp(z[~pos])
        out[~pos] = ez / (1.0 + ez)
    return out


def sigm(x: Tensor) -> Tensor:
    out = _sigmoid(x.data)
    return _make(out, "sigm", (x,), lambda g: (g * out * (1.0 - out),))


_INV_SQRT_2PI = 1.0 / math.sqrt(2.0 * math.pi)


def gelu(x: Tensor) -> Tensor:
    """Exact GELU, ``x * Phi(x)`` with the standard normal CDF."""
    cdf = ndtr(x.data).astype(x.dtype, copy=False)
    out = x.data * cdf

    def rule(g):
        pdf = _INV_SQRT_2PI * np.exp(-0.5 * x.data * x.data)
        return (g * (cdf + x.data * pdf),)

    return _make(out, "gelu", (x,), rule)


def log(x: Tensor, floor: float = 0.0) -> Tensor:
    """Natural log; with ``floor > 0`` the argument is clamped below first."""
    if floor > 0:
        clamped = np.maximum(x.data, floor)
        active = x.data > floor
    else:
        clamped, active = x.data, None
    with np.errstate(divide="ignore"):
        out = np.log(clamped)

    def rule(g):
        gx = g / clamped
        if active is not None:
            gx = np.where(active, gx, 0.0)
        return (gx,)

    return _make(out, "log", (x,), rule)


def cumprod(x: Tensor) -> Tensor:
    """Cumulative product along the last axis.

    The backward rule uses exclusive products rather than division so that
    zero factors are handled exactly.
    """
    out = np.cumprod(x.data, axis=-1)
    n = x.shape[-1]

    def rule(g):
        gx = np.zeros_like(x.data)
        for i in range(n):
            # d out_j / d x_i = prod_{s<=j, s!=i} x_s for j >= i
            left = out[..., i - 1:i] if i > 0 else np.ones_like(x.data[..., :1])
            right = np.cumprod(x.data[..., i + 1:], axis=-1)
            partial = np.concatenate([left, left * right], axis=-1)
            gx[..., i] = (g[..., i:] * partial).sum(axis=-1)
        return (gx,)

    return _make(out, "cumprod", (x,), rule)


# ---------------------------------------------------------------------------
# reductions
# ---------------------------------------------------------------------------


def sum_(x: Tensor, axis: int | None = None, keepdims: bool = False) -> Tensor:
    out = np.asarray(x.data.sum(axis=axis, keepdims=keepdims), dtype=x.dtype)

    def rule(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, x.shape).copy(),)

    return _make(out, "sum", (x,), rule)


def mean(x: Tensor, axis: int | None = None, keepdims: bool = False) -> Tensor:
    n = x.size if axis is None else x.shape[axis]
    if n == 0:
        raise DimensionError("mean over an empty axis")
    return scale(sum_(x, axis=axis, keepdims=keepdims), 1.0 / n)


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    """Numerically stable softmax (max-subtracted) along ``axis``."""
    if x.ndim == 0 or x.shape[axis] == 0:
        raise DimensionError("softmax over an empty axis")
    z = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    out = e / e.sum(axis=axis, keepdims=True)

    def rule(g):
        return (out * (g - (g * out).sum(axis=axis, keepdims=True)),)

    return _make(out, "softmax", (x,), rule)


def norm_stats(x: Tensor, axis: int = -1, eps: float = 1e-5, keepdims: bool = False):
    """Mean and biased standard deviation of each slice along ``axis``.

    ``eps`` is added after the square root, so a constant slice has
    standard deviation exactly ``eps``.
    """
    d = x.shape[axis]
    if d < 1:
        raise DimensionError("norm_stats over an empty axis")
    mu = x.data.mean(axis=axis, keepdims=True)
    centered = x.data - mu
    root = np.sqrt((centered * centered).mean(axis=axis, keepdims=True))
    sd = root + x.dtype.type(eps)

    def squeeze(a):
        return a if keepdims else np.squeeze(a, axis=axis)

    def mean_rule(g):
        if not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g / d, x.shape).copy(),)

    def std_rule(g):
        if not keepdims:
            g = np.expand_dims(g, axis)
        # d root / dx_i = (x_i - mu) / (d * root); zero at root == 0
        with np.errstate(divide="ignore", invalid="ignore"):
            dr = np.where(root > 0, centered / (d * root), 0.0)
        return (g * dr,)

    mean_t = _make(squeeze(mu), "norm_mean", (x,), mean_rule)
    std_t = _make(squeeze(sd), "norm_std", (x,), std_rule)
    return mean_t, std_t


_ELEMENTWISE = {
    "tanh": tanh,
    "sigm": sigm,
    "gelu": gelu,
    "hadamard": hadamard,
    "add": add,
    "sub": sub,
    "scale": scale,
}


def elementwise(name: str, *args) -> Tensor:
    """Dispatch an elementwise primitive by name."""
    try:
        fn = _ELEMENTWISE[name]
    except KeyError:
        raise ValueError(f"unknown elementwise op {name!r}") from None
    return fn(*args)


# ---------------------------------------------------------------------------
# graph traversal
# ---------------------------------------------------------------------------


def topological_order(root: Tensor) -> list[Tensor]:
    """Tensors reachable from ``root``, inputs before outputs."""
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
    while stack:
        t, expanded = stack.pop()
        if expanded:
            order.append(t)
            continue
        if id(t) in seen:
            continue
        seen.add(id(t))
        stack.append((t, True))
        if t.node is not None:
            for parent in t.node.inputs:
                if parent.requires_grad and id(parent) not in seen:
                    stack.append((parent, False))
    return order


def backward(loss: Tensor) -> None:
    """Accumulate ``d loss / d leaf`` into ``leaf.grad`` for every leaf.

    A graph can be differentiated once; build a new forward pass to
    differentiate again.
    """
    if loss.size != 1:
        raise GraphError(f"backward needs a scalar loss, got shape {loss.shape}")
    if loss._consumed:
        raise GraphError("backward already called on this graph")
    if not loss.requires_grad:
        raise GraphError("loss does not depend on any tensor requiring grad")
    loss._consumed = True
    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for t in reversed(topological_order(loss)):
        g = grads.pop(id(t), None)
        if g is None:
            continue
        if t.node is None:
            t.grad = g.copy() if t.grad is None else t.grad + g
            continue
        for parent, pg in zip(t.node.inputs, t.node.backward_rule(g)):
            if pg is None or not parent.requires_grad:
                continue
            pg = np.asarray(pg, dtype=parent.dtype)
            key = id(parent)
            grads[key] = pg if key not in grads else grads[key] + pg


def zero_grad(tensors: Iterable[Tensor]) -> None:
    for t in tensors:
        t.grad = None


# ---------------------------------------------------------------------------
# finite-difference verification
# ---------------------------------------------------------------------------


def numeric_grad(fn: Callable[[], Tensor], x: Tensor, step: float = 1e-5) -> np.ndarray:
    """Central-difference gradient of the scalar ``fn()`` w.r.t. ``x``.

    ``x.data`` is perturbed in place and restored.
    """
    grad = np.zeros(x.shape, dtype=np.float64)
    flat = x.data.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + step
        fp = float(fn().data.sum())
        flat[i] = orig - step
        fm = float(fn().data.sum())
        flat[i] = orig
        grad.reshape(-1)[i] = (fp - fm) / (2.0 * step)
    return grad


def relative_error(analytic: np.ndarray, numeric: np.ndarray, floor: float = 1e-8) -> float:
    """``||a - n|| / max(||a||, ||n||, floor)``."""
    diff = np.linalg.norm(np.asarray(analytic, dtype=np.float64) - numeric)
    denom = max(np.linalg.norm(analytic), np.linalg.norm(numeric), floor)
    return float(diff / denom)


def gradcheck(fn: Callable[[], Tensor], inputs: Sequence[Tensor], step: float = 1e-5) -> dict[str, float]:
    """Compare analytic and central-difference gradients.

    ``fn`` must rebuild the graph on every call and return a scalar.  Returns
    the relative error per input (keyed by name or position).
    """
    for t in inputs:
        t.grad = None
    backward(fn())
    errors = {}
    for i, t in enumerate(inputs):
        analytic = t.grad if t.grad is not None else np.zeros(t.shape)
        errors[t.name or str(i)] = relative_error(analytic, numeric_grad(fn, t, step))
    return errors
