"""Minimal define-by-run reverse-mode autodiff over float64 numpy arrays.

Every primitive builds its output eagerly and, when any input requires a
gradient, records a node holding its parents and a vector-Jacobian closure.
``backward`` / ``grad`` walk the recorded graph once in reverse topological
order.
"""
from __future__ import annotations

import contextlib
import itertools
from typing import Callable, Iterable, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

__all__ = [
    "Tensor", "as_tensor", "TapeError", "ShapeError", "NumericalError", "tensor", "no_grad",
    "is_grad_enabled", "backward", "grad", "finite_diff_grad", "record_forward",
    "add", "sub", "mul", "neg", "matmul", "conv2d", "relu", "avg_pool2d",
    "max_pool2d", "global_avg_pool", "softmax", "log_softmax", "log", "exp",
    "sum", "mean", "scale", "concat", "take", "embed", "clamp", "reshape",
]


class TapeError(RuntimeError):
    pass


class ShapeError(ValueError):
    pass


class NumericalError(FloatingPointError):
    pass


_GRAD_ENABLED = True
_ids = itertools.count()


@contextlib.contextmanager
def no_grad():
    global _GRAD_ENABLED
    prev = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = prev


def is_grad_enabled() -> bool:
    return _GRAD_ENABLED


class Tensor:
    """Dense float64 array plus an optional node in the gradient graph."""

    __slots__ = ("data", "requires_grad", "grad", "parents", "vjp", "op", "tape_id")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self.parents: tuple[Tensor, ...] = ()
        self.vjp: Callable | None = None
        self.op = "leaf"
        self.tape_id = next(_ids) if requires_grad else None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else _not_scalar(self)

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, op={self.op}{flag})"

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)


def _not_scalar(t):
    raise ShapeError(f"item(): tensor of shape {t.shape} is not a scalar")


def tensor(data, requires_grad: bool = False) -> Tensor:
    return Tensor(data, requires_grad=requires_grad)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


_lift = as_tensor


def _make(op: str, data: np.ndarray, parents: Sequence[Tensor], vjp: Callable) -> Tensor:
    if not np.all(np.isfinite(data)):
        raise NumericalError(f"{op}: produced non-finite values")
    out = Tensor(data)
    out.op = op
    if _GRAD_ENABLED and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out.parents = tuple(parents)
        out.vjp = vjp
        out.tape_id = next(_ids)
    return out


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


def _broadcast_check(op, a, b):
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"{op}: cannot broadcast shapes {a.shape} and {b.shape}") from None


# ---------------------------------------------------------------- elementwise

def add(a, b) -> Tensor:
    a, b = _lift(a), _lift(b)
    _broadcast_check("add", a, b)

    def vjp(g, needs):
        return (_unbroadcast(g, a.shape) if needs[0] else None,
                _unbroadcast(g, b.shape) if needs[1] else None)

    return _make("add", a.data + b.data, (a, b), vjp)


def sub(a, b) -> Tensor:
    a, b = _lift(a), _lift(b)
    _broadcast_check("sub", a, b)

    def vjp(g, needs):
        return (_unbroadcast(g, a.shape) if needs[0] else None,
                _unbroadcast(-g, b.shape) if needs[1] else None)

    return _make("sub", a.data - b.data, (a, b), vjp)


def mul(a, b) -> Tensor:
    a, b = _lift(a), _lift(b)
    _broadcast_check("mul", a, b)

    def vjp(g, needs):
        return (_unbroadcast(g * b.data, a.shape) if needs[0] else None,
                _unbroadcast(g * a.data, b.shape) if needs[1] else None)

    return _make("mul", a.data * b.data, (a, b), vjp)


def neg(a) -> Tensor:
    a = _lift(a)
    return _make("neg", -a.data, (a,), lambda g, needs: (-g,))


def scale(a, c: float) -> Tensor:
    a = _lift(a)
    c = float(c)
    return _make("scale", a.data * c, (a,), lambda g, needs: (g * c,))


def relu(a) -> Tensor:
    a = _lift(a)
    mask = a.data > 0
    # subgradient at exactly 0 is 0
    return _make("relu", np.where(mask, a.data, 0.0), (a,), lambda g, needs: (g * mask,))


def exp(a) -> Tensor:
    a = _lift(a)
    with np.errstate(over="ignore"):
        out = np.exp(a.data)
    if not np.all(np.isfinite(out)):
        raise NumericalError("exp: overflow")
    return _make("exp", out, (a,), lambda g, needs: (g * out,))


def log(a) -> Tensor:
    a = _lift(a)
    if np.any(a.data <= 0):
        raise NumericalError("log: non-positive input")
    return _make("log", np.log(a.data), (a,), lambda g, needs: (g / a.data,))


def clamp(a, lo: float | None = None, hi: float | None = None) -> Tensor:
    a = _lift(a)
    out = np.clip(a.data, lo, hi)
    inside = np.ones(a.shape, dtype=bool)
    if lo is not None:
        inside &= a.data >= lo
    if hi is not None:
        inside &= a.data <= hi
    return _make("clamp", out, (a,), lambda g, needs: (g * inside,))


# ---------------------------------------------------------------- reductions

def sum(a, axis=None, keepdims: bool = False) -> Tensor:  # noqa: A001
    a = _lift(a)
    out = a.data.sum(axis=axis, keepdims=keepdims)

    def vjp(g, needs):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.shape).copy(),)

    return _make("sum", np.asarray(out), (a,), vjp)


def mean(a, axis=None, keepdims: bool = False) -> Tensor:
    a = _lift(a)
    n = a.data.size if axis is None else np.prod([a.shape[ax] for ax in np.atleast_1d(axis)])
    return scale(sum(a, axis=axis, keepdims=keepdims), 1.0 / n)


def reshape(a, shape) -> Tensor:
    a = _lift(a)
    return _make("reshape", a.data.reshape(shape), (a,), lambda g, needs: (g.reshape(a.shape),))


def softmax(a, axis: int = -1) -> Tensor:
    a = _lift(a)
    z = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    s = e / e.sum(axis=axis, keepdims=True)

    def vjp(g, needs):
        return (s * (g - (g * s).sum(axis=axis, keepdims=True)),)

    return _make("softmax", s, (a,), vjp)


def log_softmax(a, axis: int = -1) -> Tensor:
    a = _lift(a)
    z = a.data - a.data.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=axis, keepdims=True))
    out = z - lse

    def vjp(g, needs):
        return (g - np.exp(out) * g.sum(axis=axis, keepdims=True),)

    return _make("log_softmax", out, (a,), vjp)


# ---------------------------------------------------------------- linear algebra

def matmul(a, b) -> Tensor:
    a, b = _lift(a), _lift(b)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: incompatible shapes {a.shape} @ {b.shape}")

    def vjp(g, needs):
        return (g @ b.data.T if needs[0] else None,
                a.data.T @ g if needs[1] else None)

    return _make("matmul", a.data @ b.data, (a, b), vjp)


def _windows(xp: np.ndarray, k: int, stride: int, dilation: int, out_hw):
    ek = dilation * (k - 1) + 1
    win = sliding_window_view(xp, (ek, ek), axis=(2, 3))
    win = win[:, :, ::stride, ::stride, ::dilation, ::dilation]
    return win[:, :, : out_hw[0], : out_hw[1]]


def _out_size(n, k, stride, padding, dilation):
    return (n + 2 * padding - dilation * (k - 1) - 1) // stride + 1


def conv2d(x, w, stride: int = 1, padding: int = 0, dilation: int = 1,
           groups: int = 1) -> Tensor:
    """2-d cross-correlation. ``groups`` is 1 (dense) or C_in (depthwise).

    Weight layout: (C_out, C_in // groups, k, k).
    """
    x, w = _lift(x), _lift(w)
    if x.ndim != 4 or w.ndim != 4:
        raise ShapeError(f"conv2d: expected 4-d input and weight, got {x.shape} and {w.shape}")
    n, c, h, wd = x.shape
    co, ci, k, k2 = w.shape
    if k != k2:
        raise ShapeError(f"conv2d: non-square kernel {w.shape[2:]}")
    if groups not in (1, c) or ci * groups != c:
        raise ShapeError(f"conv2d: input channels {c} incompatible with weight {w.shape} "
                         f"and groups={groups}")
    if groups != 1 and co != c:
        raise ShapeError(f"conv2d: depthwise conv needs C_out == C_in, got {co} vs {c}")
    ho = _out_size(h, k, stride, padding, dilation)
    wo = _out_size(wd, k, stride, padding, dilation)
    if ho < 1 or wo < 1:
        raise ShapeError(f"conv2d: kernel {k} (dilation {dilation}) larger than padded input {h}x{wd}")
    xp = np.pad(x.data, ((0, 0), (0, 0), (padding, padding), (padding, padding))) if padding else x.data
    depthwise = groups != 1
    hs = stride * (ho - 1) + 1
    ws = stride * (wo - 1) + 1

    def tap(a, i, j):
        return a[:, :, i * dilation: i * dilation + hs: stride, j * dilation: j * dilation + ws: stride]

    if depthwise:
        # k*k shifted multiply-adds beat a strided 6-d einsum by a wide margin
        out = np.zeros((n, c, ho, wo))
        for i in range(k):
            for j in range(k):
                out += tap(xp, i, j) * w.data[:, 0, i, j][None, :, None, None]
    else:
        win = _windows(xp, k, stride, dilation, (ho, wo))  # (N, C, Ho, Wo, k, k)
        cols = win.transpose(0, 1, 4, 5, 2, 3).reshape(n, c * k * k, ho * wo)
        out = (w.data.reshape(co, -1) @ cols).reshape(n, co, ho, wo)

    def vjp(g, needs):
        gx = gw = None
        if needs[1]:
            if depthwise:
                gw = np.empty(w.shape)
                for i in range(k):
                    for j in range(k):
                        gw[:, 0, i, j] = (g * tap(xp, i, j)).sum(axis=(0, 2, 3))
            else:
                gm = g.reshape(n, co, ho * wo)
                gw = np.tensordot(gm, cols, axes=([0, 2], [0, 2])).reshape(w.shape)
        if needs[0]:
            gxp = np.zeros(xp.shape)
            if depthwise:
                for i in range(k):
                    for j in range(k):
                        tap(gxp, i, j)[...] += g * w.data[:, 0, i, j][None, :, None, None]
            else:
                gcols = (w.data.reshape(co, -1).T @ g.reshape(n, co, ho * wo)).reshape(n, c, k, k, ho, wo)
                for i in range(k):
                    for j in range(k):
                        tap(gxp, i, j)[...] += gcols[:, :, i, j]
            gx = gxp[:, :, padding: padding + h, padding: padding + wd] if padding else gxp
        return gx, gw

    return _make("conv2d", out, (x, w), vjp)


def avg_pool2d(x, k: int = 3, stride: int = 1, padding: int = 1) -> Tensor:
    """Average pooling; zero padding counts toward the divisor."""
    x = _lift(x)
    if x.ndim != 4:
        raise ShapeError(f"avg_pool: expected 4-d input, got {x.shape}")
    n, c, h, wd = x.shape
    ho, wo = _out_size(h, k, stride, padding, 1), _out_size(wd, k, stride, padding, 1)
    xp = np.pad(x.data, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    out = _windows(xp, k, stride, 1, (ho, wo)).mean(axis=(4, 5))

    def vjp(g, needs):
        gxp = np.zeros(xp.shape)
        gk = g / (k * k)
        for i in range(k):
            for j in range(k):
                gxp[:, :, i: i + stride * (ho - 1) + 1: stride, j: j + stride * (wo - 1) + 1: stride] += gk
        return (gxp[:, :, padding: padding + h, padding: padding + wd],)

    return _make("avg_pool", out, (x,), vjp)


def max_pool2d(x, k: int = 3, stride: int = 1, padding: int = 1) -> Tensor:
    """Max pooling with -inf padding; ties go to the first row-major index."""
    x = _lift(x)
    if x.ndim != 4:
        raise ShapeError(f"max_pool: expected 4-d input, got {x.shape}")
    n, c, h, wd = x.shape
    ho, wo = _out_size(h, k, stride, padding, 1), _out_size(wd, k, stride, padding, 1)
    xp = np.pad(x.data, ((0, 0), (0, 0), (padding, padding), (padding, padding)),
                constant_values=-np.inf)
    win = _windows(xp, k, stride, 1, (ho, wo)).reshape(n, c, ho, wo, k * k)
    arg = win.argmax(axis=-1)
    out = np.take_along_axis(win, arg[..., None], axis=-1)[..., 0]

    def vjp(g, needs):
        gxp = np.zeros(xp.shape)
        for p in range(k * k):
            i, j = divmod(p, k)
            gxp[:, :, i: i + stride * (ho - 1) + 1: stride, j: j + stride * (wo - 1) + 1: stride] += g * (arg == p)
        return (gxp[:, :, padding: padding + h, padding: padding + wd],)

    return _make("max_pool", out, (x,), vjp)


def global_avg_pool(x) -> Tensor:
    x = _lift(x)
    if x.ndim != 4:
        raise ShapeError(f"global_avg_pool: expected 4-d input, got {x.shape}")
    hw = x.shape[2] * x.shape[3]
    out = x.data.mean(axis=(2, 3))

    def vjp(g, needs):
        return (np.broadcast_to(g[:, :, None, None] / hw, x.shape).copy(),)

    return _make("global_avg_pool", out, (x,), vjp)


# ---------------------------------------------------------------- indexing

def concat(tensors: Sequence, axis: int = 1) -> Tensor:
    ts = [_lift(t) for t in tensors]
    if not ts:
        raise ShapeError("concat: no inputs")
    ref = ts[0].shape
    for t in ts[1:]:
        if len(t.shape) != len(ref) or any(a != b for d, (a, b) in enumerate(zip(t.shape, ref))
                                           if d != axis % len(ref)):
            raise ShapeError(f"concat: shape {t.shape} incompatible with {ref} along axis {axis}")
    sizes = [t.shape[axis] for t in ts]
    bounds = np.cumsum([0] + sizes)

    def vjp(g, needs):
        return tuple(np.take(g, np.arange(bounds[i], bounds[i + 1]), axis=axis) if needs[i] else None
                     for i in range(len(ts)))

    return _make("concat", np.concatenate([t.data for t in ts], axis=axis), ts, vjp)


def take(x, index, axis: int = 0) -> Tensor:
    """Gather ``index`` (int or int array) along ``axis``; adjoint is scatter-add."""
    x = _lift(x)
    index = np.asarray(index)
    n = x.shape[axis]
    if index.size and (index.min() < -n or index.max() >= n):
        raise ShapeError(f"take: index out of range for axis {axis} of extent {n}")
    out = np.take(x.data, index, axis=axis)

    def vjp(g, needs):
        gx = np.zeros(x.shape)
        if index.ndim == 0:
            g = np.expand_dims(g, axis)
            idx = index.reshape(1)
        else:
            idx = index
        gx_view = np.moveaxis(gx, axis, 0)
        np.add.at(gx_view, idx, np.moveaxis(g, axis, 0))
        return (gx,)

    return _make("take", out, (x,), vjp)


def embed(y, index, size: int, axis: int = 1) -> Tensor:
    """Place ``y`` at positions ``index`` of a zero tensor with extent ``size`` on ``axis``."""
    y = _lift(y)
    index = np.asarray(index, dtype=np.int64)
    if y.shape[axis] != index.size:
        raise ShapeError(f"embed: {index.size} positions for axis extent {y.shape[axis]}")
    shape = list(y.shape)
    shape[axis] = size
    out = np.zeros(shape)
    np.moveaxis(out, axis, 0)[index] = np.moveaxis(y.data, axis, 0)
    return _make("embed", out, (y,), lambda g, needs: (np.take(g, index, axis=axis),))


# ---------------------------------------------------------------- dispatcher

_PRIMITIVES = {
    "add": add, "sub": sub, "mul": mul, "neg": neg, "matmul": matmul, "conv2d": conv2d,
    "relu": relu, "avg_pool": avg_pool2d, "max_pool": max_pool2d,
    "global_avg_pool": global_avg_pool, "softmax": softmax, "log_softmax": log_softmax,
    "log": log, "exp": exp, "sum": sum, "mean": mean, "scale": scale,
    "concat": lambda *ts, axis=1: concat(ts, axis=axis), "take": take, "slice": take,
    "embed": embed, "clamp": clamp, "reshape": reshape,
}


def record_forward(op_kind: str, inputs: Sequence, **attrs) -> Tensor:
    """Apply a primitive by name, e.g. ``record_forward("conv2d", [x, w], padding=1)``."""
    try:
        fn = _PRIMITIVES[op_kind]
    except KeyError:
        raise ValueError(f"unknown primitive {op_kind!r}") from None
    return fn(*inputs, **attrs)


# ---------------------------------------------------------------- backward

def _toposort(root: Tensor) -> list[Tensor]:
    order, seen = [], set()
    stack = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node.parents:
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))
    return order


def _run_backward(root: Tensor, wrt: Iterable[Tensor] | None):
    if root.data.size != 1:
        raise TapeError(f"backward: root must be scalar, got shape {root.shape}")
    if not root.requires_grad:
        raise TapeError("backward: root is not connected to any tensor requiring grad")
    order = _toposort(root)
    if wrt is None:
        relevant = {id(t) for t in order}
    else:
        targets = {id(t) for t in wrt}
        relevant = set()
        for t in order:  # parents precede children
            if id(t) in targets or any(id(p) in relevant for p in t.parents):
                relevant.add(id(t))
    grads: dict[int, np.ndarray] = {id(root): np.ones(root.shape)}
    for node in reversed(order):
        g = grads.get(id(node))
        if g is None or node.vjp is None:
            continue
        needs = tuple(p.requires_grad and id(p) in relevant for p in node.parents)
        if not any(needs):
            continue
        pgrads = node.vjp(g, needs)
        for p, pg, need in zip(node.parents, pgrads, needs):
            if not need or pg is None:
                continue
            key = id(p)
            if key in grads:
                grads[key] = grads[key] + pg
            else:
                grads[key] = pg
    return {id(t): grads.get(id(t)) for t in order if id(t) in relevant}, order


def backward(root: Tensor) -> dict[int, np.ndarray]:
    """Accumulate d(root)/d(leaf) into ``.grad`` of every leaf; return {tape_id: grad}."""
    grads, order = _run_backward(root, None)
    out = {}
    for t in order:
        g = grads.get(id(t))
        if g is None:
            continue
        out[t.tape_id] = g
        if t.vjp is None:
            t.grad = g if t.grad is None else t.grad + g
    return out


def grad(root: Tensor, wrt: Sequence[Tensor]) -> list[np.ndarray]:
    """Gradients of ``root`` w.r.t. each tensor in ``wrt`` (zeros if unreachable).

    Only the part of the graph connecting ``wrt`` to ``root`` is traversed;
    ``.grad`` attributes are left untouched.
    """
    grads, _ = _run_backward(root, wrt)
    return [grads.get(id(t)) if grads.get(id(t)) is not None else np.zeros(t.shape) for t in wrt]


def finite_diff_grad(f: Callable[[np.ndarray], float], x, h: float = 1e-5) -> np.ndarray:
    """Central differences ``(f(x + h e_i) - f(x - h e_i)) / 2h`` per coordinate."""
    x = np.array(x.data if isinstance(x, Tensor) else x, dtype=np.float64)
    flat = x.reshape(-1)
    out = np.empty_like(flat)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        fp = float(f(x))
        flat[i] = orig - h
        fm = float(f(x))
        flat[i] = orig
        if not (np.isfinite(fp) and np.isfinite(fm)):
            raise NumericalError(f"finite_diff_grad: non-finite value at coordinate {i}")
        out[i] = (fp - fm) / (2 * h)
    return out.reshape(x.shape)
