"""Dense numpy-backed tensors with tape-based reverse-mode differentiation.

Every differentiable operation records its inputs and a backward closure on the
result. ``Tensor.backward`` orders the recorded graph topologically (the tape),
replays it in reverse exactly once, deposits gradients on leaves and then
clears the tape.

Only first derivatives are supported. Broadcasting follows numpy rules
(trailing-dimension alignment, size-1 expansion, scalars).
"""
from __future__ import annotations

import contextlib
from typing import Callable, Iterable, Sequence

import numpy as np

from .errors import ContractError, DimensionError, DomainError

_state = {"dtype": np.dtype(np.float32), "grad": True}


def get_default_dtype() -> np.dtype:
    return _state["dtype"]


def set_default_dtype(dtype) -> None:
    dtype = np.dtype(dtype)
    if dtype not in (np.dtype(np.float32), np.dtype(np.float64)):
        raise ValueError(f"unsupported dtype {dtype}; use float32 or float64")
    _state["dtype"] = dtype


@contextlib.contextmanager
def default_dtype(dtype):
    """Temporarily switch the dtype used when building tensors."""
    previous = _state["dtype"]
    set_default_dtype(dtype)
    try:
        yield
    finally:
        _state["dtype"] = previous


@contextlib.contextmanager
def no_grad():
    """Disable graph recording inside the block."""
    previous = _state["grad"]
    _state["grad"] = False
    try:
        yield
    finally:
        _state["grad"] = previous


def is_grad_enabled() -> bool:
    return _state["grad"]


class Tensor:
    """An n-d float array that can take part in reverse-mode differentiation."""

    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward", "_op", "_retain")
    __array_priority__ = 1000

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        if isinstance(data, Tensor):
            data = data.data
        self.data = np.array(data, dtype=_state["dtype"] if dtype is None else dtype, copy=True)
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self._parents: tuple[Tensor, ...] = ()
        self._backward = None
        self._op = "leaf"
        self._retain = False

    # -- basic properties ---------------------------------------------------
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

    @property
    def is_leaf(self) -> bool:
        return self._backward is None

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        if self.data.size != 1:
            raise ContractError(f"item() needs a single-element tensor, got shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def detach(self) -> "Tensor":
        return stop_gradient(self)

    def retain_grad(self) -> "Tensor":
        """Keep the gradient of this intermediate after ``backward``."""
        self._retain = True
        return self

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor({self.data!r}{flag})"

    def __len__(self) -> int:
        return len(self.data)

    # -- operators ------------------------------------------------------------
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

    def __pow__(self, exponent):
        return power(self, exponent)

    def __matmul__(self, other):
        return matmul(self, other)

    def __rmatmul__(self, other):
        return matmul(other, self)

    def __getitem__(self, index):
        return getitem(self, index)

    # -- method forms -----------------------------------------------------------
    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)

    def max(self, axis=None, keepdims=False):
        return tmax(self, axis, keepdims)

    def min(self, axis=None, keepdims=False):
        return tmin(self, axis, keepdims)

    def argmax(self, axis=None):
        return argmax(self, axis)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes or None)

    @property
    def T(self):
        return transpose(self, None)

    def exp(self):
        return exp(self)

    def log(self):
        return log(self)

    def sqrt(self):
        return sqrt(self)

    def relu(self):
        return relu(self)

    # -- differentiation --------------------------------------------------------
    def backward(self) -> None:
        """Populate ``.grad`` on every reachable leaf with ``requires_grad``."""
        if self.data.size != 1:
            raise ContractError(f"backward() needs a scalar loss, got shape {self.shape}")
        if not self.requires_grad:
            raise ContractError("backward() called on a tensor that is not on any tape")
        tape = _build_tape(self)
        pending: dict[int, np.ndarray] = {id(self): np.ones_like(self.data)}
        for node in reversed(tape):
            g = pending.pop(id(node), None)
            if node._backward is None:
                if g is None:
                    g = np.zeros_like(node.data)
                node.grad = g.copy() if node.grad is None else node.grad + g
                continue
            if g is None:
                continue
            if node._retain:
                node.grad = g.copy() if node.grad is None else node.grad + g
            for parent, pg in zip(node._parents, node._backward(g)):
                if pg is None or not parent.requires_grad:
                    continue
                pg = _unbroadcast(np.asarray(pg, dtype=parent.data.dtype), parent.data.shape)
                key = id(parent)
                if key in pending:
                    pending[key] = pending[key] + pg
                else:
                    pending[key] = pg
        for node in tape:
            if node._backward is not None:
                node._parents = ()
                node._backward = None
                node.requires_grad = False


def _build_tape(root: Tensor) -> list[Tensor]:
    """Topological order of the graph below ``root`` (inputs before outputs)."""
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
        for parent in node._parents:
            if parent.requires_grad and id(parent) not in seen:
                stack.append((parent, False))
    return order


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


def as_tensor(x) -> Tensor:
    if isinstance(x, Tensor):
        return x
    arr = np.asarray(x)
    if arr.dtype.kind != "f":
        arr = arr.astype(_state["dtype"])
    t = Tensor.__new__(Tensor)
    t.data = arr
    t.requires_grad = False
    t.grad = None
    t._parents = ()
    t._backward = None
    t._op = "const"
    t._retain = False
    return t


def _result(data: np.ndarray, parents: Sequence[Tensor], backward: Callable, op: str) -> Tensor:
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out._op = op
    out._retain = False
    if _state["grad"] and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward
    else:
        out.requires_grad = False
        out._parents = ()
        out._backward = None
    return out


def _check_broadcast(a: np.ndarray, b: np.ndarray, op: str) -> None:
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise DimensionError(f"{op}: shapes {a.shape} and {b.shape} do not broadcast") from None


# ---------------------------------------------------------------------------
# elementwise
# ---------------------------------------------------------------------------
def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a.data, b.data, "add")
    return _result(a.data + b.data, (a, b), lambda g: (g, g), "add")


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a.data, b.data, "sub")
    return _result(a.data - b.data, (a, b), lambda g: (g, -g), "sub")


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a.data, b.data, "mul")
    ad, bd = a.data, b.data
    return _result(ad * bd, (a, b), lambda g: (g * bd, g * ad), "mul")


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a.data, b.data, "div")
    if np.any(b.data == 0):
        raise DomainError("div: division by zero")
    ad, bd = a.data, b.data
    out = ad / bd
    return _result(out, (a, b), lambda g: (g / bd, -g * out / bd), "div")


def neg(a) -> Tensor:
    a = as_tensor(a)
    return _result(-a.data, (a,), lambda g: (-g,), "neg")


def reciprocal(a) -> Tensor:
    a = as_tensor(a)
    if np.any(a.data == 0):
        raise DomainError("reciprocal: zero input")
    out = 1.0 / a.data
    return _result(out, (a,), lambda g: (-g * out * out,), "reciprocal")


def power(a, exponent: float) -> Tensor:
    a = as_tensor(a)
    if isinstance(exponent, Tensor):
        raise TypeError("power only supports scalar exponents")
    x = a.data
    if exponent < 1 and np.any(x == 0) and exponent != 0:
        raise DomainError("power: non-positive exponent at zero")
    return _result(x**exponent, (a,), lambda g: (g * exponent * x ** (exponent - 1),), "pow")


def exp(a) -> Tensor:
    a = as_tensor(a)
    out = np.exp(a.data)
    return _result(out, (a,), lambda g: (g * out,), "exp")


def log(a) -> Tensor:
    a = as_tensor(a)
    if np.any(a.data <= 0):
        raise DomainError("log: non-positive input")
    x = a.data
    return _result(np.log(x), (a,), lambda g: (g / x,), "log")


def sqrt(a) -> Tensor:
    a = as_tensor(a)
    if np.any(a.data < 0):
        raise DomainError("sqrt: negative input")
    out = np.sqrt(a.data)

    def backward(g):
        with np.errstate(divide="ignore", invalid="ignore"):
            return (np.where(out > 0, g / (2 * np.where(out > 0, out, 1)), 0.0),)

    return _result(out, (a,), backward, "sqrt")


def relu(a) -> Tensor:
    a = as_tensor(a)
    mask = a.data > 0
    return _result(np.where(mask, a.data, 0).astype(a.data.dtype), (a,), lambda g: (g * mask,), "relu")


def maximum(a, b) -> Tensor:
    """Elementwise max; ties send the gradient to ``a``."""
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a.data, b.data, "maximum")
    pick_a = a.data >= b.data
    out = np.where(pick_a, a.data, b.data)
    return _result(out, (a, b), lambda g: (g * pick_a, g * ~pick_a), "maximum")


_ELEMENTWISE = {
    "add": add,
    "sub": sub,
    "mul": mul,
    "div": div,
    "max": maximum,
    "relu": relu,
    "exp": exp,
    "log": log,
    "reciprocal": reciprocal,
}


def elementwise(kind: str, a, b=None) -> Tensor:
    """Dispatch an elementwise operation by name."""
    try:
        fn = _ELEMENTWISE[kind]
    except KeyError:
        raise ContractError(f"unknown elementwise op {kind!r}") from None
    if kind in ("relu", "exp", "log", "reciprocal"):
        return fn(a)
    return fn(a, b)


# ---------------------------------------------------------------------------
# shape manipulation
# ---------------------------------------------------------------------------
def reshape(a, shape) -> Tensor:
    a = as_tensor(a)
    src = a.data.shape
    try:
        out = a.data.reshape(shape)
    except ValueError:
        raise DimensionError(f"cannot reshape {src} to {shape}") from None
    return _result(out, (a,), lambda g: (g.reshape(src),), "reshape")


def transpose(a, axes=None) -> Tensor:
    a = as_tensor(a)
    if axes is None:
        axes = tuple(reversed(range(a.ndim)))
    inverse = tuple(np.argsort(axes))
    return _result(a.data.transpose(axes), (a,), lambda g: (g.transpose(inverse),), "transpose")


def swapaxes(a, ax1: int, ax2: int) -> Tensor:
    a = as_tensor(a)
    axes = list(range(a.ndim))
    axes[ax1], axes[ax2] = axes[ax2], axes[ax1]
    return transpose(a, tuple(axes))


def _is_basic_index(index) -> bool:
    items = index if isinstance(index, tuple) else (index,)
    return all(isinstance(i, (int, np.integer, slice)) or i is None or i is Ellipsis for i in items)


def getitem(a, index) -> Tensor:
    a = as_tensor(a)
    if isinstance(index, Tensor):
        index = index.data
    out = a.data[index]
    basic = _is_basic_index(index)

    def backward(g):
        full = np.zeros_like(a.data)
        if basic:
            full[index] += g
        else:
            np.add.at(full, index, g)
        return (full,)

    return _result(np.array(out), (a,), backward, "getitem")


def concat(tensors: Iterable, axis: int = 0) -> Tensor:
    ts = [as_tensor(t) for t in tensors]
    try:
        out = np.concatenate([t.data for t in ts], axis=axis)
    except ValueError as exc:
        raise DimensionError(f"concat: {exc}") from None
    bounds = np.cumsum([t.data.shape[axis] for t in ts])[:-1]
    return _result(out, ts, lambda g: tuple(np.split(g, bounds, axis=axis)), "concat")


def stack(tensors: Iterable, axis: int = 0) -> Tensor:
    ts = [as_tensor(t) for t in tensors]
    try:
        out = np.stack([t.data for t in ts], axis=axis)
    except ValueError as exc:
        raise DimensionError(f"stack: {exc}") from None
    n = len(ts)
    return _result(out, ts, lambda g: tuple(np.moveaxis(g, axis, 0)[i] for i in range(n)), "stack")


def pad2d(a, padding: int) -> Tensor:
    """Zero-pad the last two axes."""
    a = as_tensor(a)
    if padding == 0:
        return a
    widths = [(0, 0)] * (a.ndim - 2) + [(padding, padding), (padding, padding)]
    p = padding
    return _result(np.pad(a.data, widths), (a,), lambda g: (g[..., p:-p, p:-p],), "pad2d")


# ---------------------------------------------------------------------------
# reductions
# ---------------------------------------------------------------------------
def _check_axis(a: np.ndarray, axis) -> None:
    if axis is None:
        return
    for ax in axis if isinstance(axis, tuple) else (axis,):
        if not -a.ndim <= ax < a.ndim:
            raise DimensionError(f"axis {ax} out of range for rank {a.ndim}")


def _expand(g: np.ndarray, shape, axis, keepdims: bool) -> np.ndarray:
    if axis is not None and not keepdims:
        axes = axis if isinstance(axis, tuple) else (axis,)
        axes = sorted(ax % len(shape) for ax in axes)
        for ax in axes:
            g = np.expand_dims(g, ax)
    return np.broadcast_to(g, shape)


def tsum(a, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    _check_axis(a.data, axis)
    shape = a.data.shape
    out = np.asarray(a.data.sum(axis=axis, keepdims=keepdims))
    return _result(out, (a,), lambda g: (_expand(g, shape, axis, keepdims).copy(),), "sum")


def mean(a, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    _check_axis(a.data, axis)
    total = tsum(a, axis, keepdims)
    return total * (total.data.size / a.data.size)


def _arg_extreme(a: Tensor, axis, keepdims: bool, pick: Callable) -> Tensor:
    _check_axis(a.data, axis)
    shape = a.data.shape
    if axis is None:
        flat = a.data.reshape(-1)
        idx = int(pick(flat))
        out = np.asarray(flat[idx])
        if keepdims:
            out = out.reshape((1,) * a.ndim)

        def backward(g):
            full = np.zeros(flat.shape, dtype=a.data.dtype)
            full[idx] = np.asarray(g).reshape(-1)[0]
            return (full.reshape(shape),)

        return _result(out, (a,), backward, "extreme")
    idx = np.expand_dims(pick(a.data, axis=axis), axis)
    out = np.take_along_axis(a.data, idx, axis=axis)
    if not keepdims:
        out = np.squeeze(out, axis=axis)

    def backward(g):
        full = np.zeros_like(a.data)
        gk = g if keepdims else np.expand_dims(g, axis)
        np.put_along_axis(full, idx, gk, axis=axis)
        return (full,)

    return _result(out, (a,), backward, "extreme")


def tmax(a, axis=None, keepdims: bool = False) -> Tensor:
    """Max reduction; the subgradient goes to the first maximal entry."""
    return _arg_extreme(as_tensor(a), axis, keepdims, np.argmax)


def tmin(a, axis=None, keepdims: bool = False) -> Tensor:
    """Min reduction; the subgradient goes to the first minimal entry."""
    return _arg_extreme(as_tensor(a), axis, keepdims, np.argmin)


def argmax(a, axis=None) -> np.ndarray:
    """Index of the maximum (first index on ties). Not differentiable."""
    a = as_tensor(a)
    _check_axis(a.data, axis)
    return np.argmax(a.data, axis=axis)


def frobenius_norm(a, axis=None, keepdims: bool = False) -> Tensor:
    """sqrt(sum(a**2)); gradient taken as zero where the norm vanishes."""
    a = as_tensor(a)
    _check_axis(a.data, axis)
    x = a.data
    norm = np.sqrt((x * x).sum(axis=axis, keepdims=True))
    out = norm if keepdims else np.asarray(norm.sum(axis=axis))

    def backward(g):
        safe = np.where(norm > 0, norm, 1)
        return (np.where(norm > 0, np.reshape(g, norm.shape) * x / safe, 0.0),)

    return _result(out, (a,), backward, "frobenius")


_REDUCTIONS = {
    "sum": tsum,
    "mean": mean,
    "min": tmin,
    "max": tmax,
    "frobenius_norm": frobenius_norm,
}


def reduce(kind: str, x, axis=None, keepdims: bool = False):
    """Dispatch a reduction by name (``argmax`` returns an integer array)."""
    if kind == "argmax":
        return argmax(x, axis)
    try:
        fn = _REDUCTIONS[kind]
    except KeyError:
        raise ContractError(f"unknown reduction {kind!r}") from None
    return fn(x, axis, keepdims)


# ---------------------------------------------------------------------------
# linear algebra and neural-network primitives
# ---------------------------------------------------------------------------
def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2:
        raise DimensionError("matmul operands must have rank >= 2")
    if a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul: inner dimensions {a.shape} @ {b.shape} disagree")
    try:
        out = np.matmul(a.data, b.data)
    except ValueError as exc:
        raise DimensionError(f"matmul: {exc}") from None
    ad, bd = a.data, b.data

    def backward(g):
        ga = np.matmul(g, np.swapaxes(bd, -1, -2)) if a.requires_grad else None
        gb = np.matmul(np.swapaxes(ad, -1, -2), g) if b.requires_grad else None
        return ga, gb

    return _result(out, (a, b), backward, "matmul")


def sq_distances(a, b) -> Tensor:
    """Squared Euclidean distances between rows: ``a`` ``[..., N, C]``, ``b`` ``[M, C]`` -> ``[..., N, M]``.

    The forward pass forms explicit differences (no cancellation); the backward
    pass uses ``2 (a * rowsum(g) - g @ b)`` and its transpose counterpart.
    """
    a, b = as_tensor(a), as_tensor(b)
    if b.ndim != 2 or a.shape[-1] != b.shape[-1]:
        raise DimensionError(f"sq_distances: {a.shape} vs {b.shape}")
    ad, bd = a.data, b.data
    diff = ad[..., :, None, :] - bd
    out = np.einsum("...nmc,...nmc->...nm", diff, diff)

    def backward(g):
        ga = 2 * (ad * g.sum(axis=-1, keepdims=True) - np.matmul(g, bd)) if a.requires_grad else None
        gb = None
        if b.requires_grad:
            gs = g.reshape(-1, g.shape[-1])
            af = ad.reshape(-1, ad.shape[-1])
            gb = 2 * (bd * gs.sum(axis=0)[:, None] - gs.T @ af)
        return ga, gb

    return _result(out, (a, b), backward, "sq_distances")


def softmax(a, axis: int = -1) -> Tensor:
    a = as_tensor(a)
    z = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    s = e / e.sum(axis=axis, keepdims=True)
    return _result(s, (a,), lambda g: (s * (g - (g * s).sum(axis=axis, keepdims=True)),), "softmax")


def log_softmax(a, axis: int = -1) -> Tensor:
    a = as_tensor(a)
    z = a.data - a.data.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=axis, keepdims=True))
    out = z - lse
    s = np.exp(out)
    return _result(out, (a,), lambda g: (g - s * g.sum(axis=axis, keepdims=True),), "log_softmax")


def stop_gradient(a) -> Tensor:
    """Constant copy of ``a``; nothing flows back through it."""
    return as_tensor(as_tensor(a).data)


def straight_through(hard, soft) -> Tensor:
    """Forward value ``hard``; backward routes the incoming gradient to ``soft`` unchanged.

    Equivalent to ``hard + soft - stop_gradient(soft)`` without the rounding
    that expression introduces in the forward value.
    """
    soft = as_tensor(soft)
    hard = np.asarray(hard, dtype=soft.data.dtype)
    if hard.shape != soft.shape:
        raise DimensionError(f"straight_through: {hard.shape} vs {soft.shape}")
    return _result(hard.copy(), (soft,), lambda g: (g,), "straight_through")


def conv2d(x, kernels, bias=None, stride: int = 1, padding="same") -> Tensor:
    """2-D cross-correlation.

    ``x`` is ``[C, H, W]`` or ``[N, C, H, W]``; ``kernels`` is ``[C', C, k, k]``.
    ``padding="same"`` means ``k // 2``.
    """
    x, w = as_tensor(x), as_tensor(kernels)
    squeeze = x.ndim == 3
    xd = x.data[None] if squeeze else x.data
    if xd.ndim != 4 or w.ndim != 4:
        raise DimensionError("conv2d expects x [C,H,W] or [N,C,H,W] and kernels [C',C,k,k]")
    n, c, h, wid = xd.shape
    cout, cin, k, k2 = w.shape
    if cin != c:
        raise DimensionError(f"conv2d: input has {c} channels, kernels expect {cin}")
    if k != k2:
        raise DimensionError("conv2d: kernels must be square")
    if padding == "same":
        if k % 2 == 0:
            raise DimensionError("conv2d: 'same' padding needs an odd kernel")
        padding = k // 2
    p = int(padding)
    xp = np.pad(xd, ((0, 0), (0, 0), (p, p), (p, p))) if p else xd
    oh = (h + 2 * p - k) // stride + 1
    ow = (wid + 2 * p - k) // stride + 1
    if oh <= 0 or ow <= 0:
        raise DimensionError("conv2d: kernel larger than padded input")
    cols = np.empty((n, c, k, k, oh, ow), dtype=xd.dtype)
    for i in range(k):
        for j in range(k):
            cols[:, :, i, j] = xp[:, :, i : i + stride * oh : stride, j : j + stride * ow : stride]
    cols = cols.reshape(n, c * k * k, oh * ow)
    wmat = w.data.reshape(cout, c * k * k)
    out = np.matmul(wmat, cols).reshape(n, cout, oh, ow)
    parents = [x, w]
    if bias is not None:
        b = as_tensor(bias)
        if b.shape != (cout,):
            raise DimensionError(f"conv2d: bias shape {b.shape} != ({cout},)")
        out = out + b.data[None, :, None, None]
        parents.append(b)
    if squeeze:
        out = out[0]

    def backward(g):
        g4 = (g[None] if squeeze else g).reshape(n, cout, oh * ow)
        gw = np.einsum("nop,nqp->oq", g4, cols).reshape(w.shape) if w.requires_grad else None
        gx = None
        if x.requires_grad:
            gcols = np.matmul(wmat.T, g4).reshape(n, c, k, k, oh, ow)
            gxp = np.zeros_like(xp)
            for i in range(k):
                for j in range(k):
                    gxp[:, :, i : i + stride * oh : stride, j : j + stride * ow : stride] += gcols[:, :, i, j]
            gx = gxp[:, :, p : p + h, p : p + wid] if p else gxp
            if squeeze:
                gx = gx[0]
        grads = [gx, gw]
        if bias is not None:
            grads.append(g4.sum(axis=(0, 2)))
        return tuple(grads)

    return _result(out, parents, backward, "conv2d")


# ---------------------------------------------------------------------------
# gradient checking
# ---------------------------------------------------------------------------
def finite_diff_check(f: Callable[[Tensor], Tensor], x, eps: float = 1e-6) -> float:
    """Max relative error between the tape gradient of ``f`` at ``x`` and central differences.

    The error per component is ``|analytic - numeric| / (|analytic| + eps)``.
    ``f`` must be deterministic; run this under ``default_dtype(np.float64)``.
    """
    if eps <= 0:
        raise ContractError("eps must be positive")
    base = np.array(as_tensor(x).data)
    probe = Tensor(base, requires_grad=True, dtype=base.dtype)
    loss = f(probe)
    loss.backward()
    analytic = probe.grad if probe.grad is not None else np.zeros_like(base)
    numeric = np.zeros_like(base)
    flat = numeric.reshape(-1)
    with no_grad():
        for i in range(base.size):
            shifted = base.copy()
            shifted.reshape(-1)[i] += eps
            up = f(Tensor(shifted, dtype=base.dtype)).item()
            shifted.reshape(-1)[i] -= 2 * eps
            down = f(Tensor(shifted, dtype=base.dtype)).item()
            flat[i] = (up - down) / (2 * eps)
    err = np.abs(analytic - numeric) / (np.abs(analytic) + eps)
    return float(err.max()) if err.size else 0.0
