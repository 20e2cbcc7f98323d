"""Dense float64 tensors with define-by-run reverse-mode differentiation.

A :class:`Tape` records every primitive applied to tensors that live on it.
Leaves enter a tape through :meth:`Tape.watch`; tensors without a tape are
constants and never receive gradients. :func:`backward` replays the tape in
reverse and returns a map from node id to gradient array.

Every primitive is registered by name in ``PRIMITIVES`` and can be invoked
through :func:`apply_primitive`; the :class:`Tensor` operators and the
functional helpers at the bottom of this module are thin wrappers around it.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

logger = logging.getLogger(__name__)

DTYPE = np.float64


class ShapeError(ValueError):
    """Raised when a primitive receives incompatible input shapes."""


class DomainError(ValueError):
    """Raised when a primitive is evaluated outside its domain."""


class Tensor:
    __slots__ = ("data", "tape", "node")

    def __init__(self, data, tape: "Tape | None" = None, node: int | None = None):
        self.data = np.asarray(data, dtype=DTYPE)
        self.tape = tape
        self.node = node

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"expected a single-element tensor, got shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def __repr__(self):
        tag = f", node={self.node}" if self.node is not None else ""
        return f"Tensor(shape={self.shape}{tag})"

    def __len__(self):
        return self.shape[0]

    def __add__(self, other):
        return apply_primitive("add", [self, other])

    def __radd__(self, other):
        return apply_primitive("add", [other, self])

    def __sub__(self, other):
        return apply_primitive("sub", [self, other])

    def __rsub__(self, other):
        return apply_primitive("sub", [other, self])

    def __mul__(self, other):
        if np.isscalar(other):
            return apply_primitive("scale", [self], factor=float(other))
        return apply_primitive("mul", [self, other])

    def __rmul__(self, other):
        return self.__mul__(other)

    def __truediv__(self, other):
        if np.isscalar(other):
            return apply_primitive("scale", [self], factor=1.0 / float(other))
        return apply_primitive("div", [self, other])

    def __neg__(self):
        return apply_primitive("scale", [self], factor=-1.0)

    def __matmul__(self, other):
        return apply_primitive("matmul", [self, other])

    def sum(self, axis=None, keepdims: bool = False) -> "Tensor":
        return apply_primitive("sum", [self], axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims: bool = False) -> "Tensor":
        n = self.data.size if axis is None else np.prod([self.shape[a] for a in np.atleast_1d(axis)])
        return self.sum(axis=axis, keepdims=keepdims) * (1.0 / float(n))

    def reshape(self, *shape) -> "Tensor":
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return apply_primitive("reshape", [self], shape=tuple(shape))

    def transpose(self, *axes) -> "Tensor":
        return apply_primitive("transpose", [self], axes=tuple(axes) if axes else None)

    @property
    def T(self) -> "Tensor":
        return self.transpose()


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


@dataclass
class Record:
    kind: str
    inputs: tuple[int | None, ...]
    output: int
    ctx: object = None


class Tape:
    """Ordered log of primitive applications for one forward pass.

    Node ids are assigned in creation order, so every input id is smaller
    than the id of its consumer.
    """

    def __init__(self):
        self.records: list[Record] = []
        self._next = 0

    def __len__(self):
        return len(self.records)

    def _new_node(self) -> int:
        node = self._next
        self._next += 1
        return node

    def watch(self, x) -> Tensor:
        """Register ``x`` as a differentiable leaf on this tape."""
        data = x.data if isinstance(x, Tensor) else x
        t = Tensor(data, tape=self, node=self._new_node())
        self.records.append(Record("leaf", (), t.node))
        return t


# ---------------------------------------------------------------- primitives


@dataclass(frozen=True)
class Primitive:
    forward: Callable
    backward: Callable


PRIMITIVES: dict[str, Primitive] = {}


def _primitive(name: str):
    def register(cls):
        PRIMITIVES[name] = Primitive(cls.forward, cls.backward)
        return cls

    return register


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, extent in enumerate(shape):
        if extent == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def _broadcast_shape(a: np.ndarray, b: np.ndarray, kind: str) -> None:
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"{kind}: incompatible shapes {a.shape} and {b.shape}") from None


@_primitive("add")
class _Add:
    @staticmethod
    def forward(a, b):
        _broadcast_shape(a, b, "add")
        return a + b, (a.shape, b.shape)

    @staticmethod
    def backward(g, ctx):
        sa, sb = ctx
        return _unbroadcast(g, sa), _unbroadcast(g, sb)


@_primitive("sub")
class _Sub:
    @staticmethod
    def forward(a, b):
        _broadcast_shape(a, b, "sub")
        return a - b, (a.shape, b.shape)

    @staticmethod
    def backward(g, ctx):
        sa, sb = ctx
        return _unbroadcast(g, sa), _unbroadcast(-g, sb)


@_primitive("mul")
class _Mul:
    @staticmethod
    def forward(a, b):
        _broadcast_shape(a, b, "mul")
        return a * b, (a, b)

    @staticmethod
    def backward(g, ctx):
        a, b = ctx
        return _unbroadcast(g * b, a.shape), _unbroadcast(g * a, b.shape)


@_primitive("div")
class _Div:
    @staticmethod
    def forward(a, b):
        _broadcast_shape(a, b, "div")
        if np.any(b == 0):
            raise DomainError("div: zero in denominator")
        out = a / b
        return out, (a.shape, b, out)

    @staticmethod
    def backward(g, ctx):
        sa, b, out = ctx
        return _unbroadcast(g / b, sa), _unbroadcast(-g * out / b, b.shape)


@_primitive("scale")
class _Scale:
    @staticmethod
    def forward(a, factor):
        return a * factor, factor

    @staticmethod
    def backward(g, factor):
        return (g * factor,)


@_primitive("matmul")
class _Matmul:
    @staticmethod
    def forward(a, b):
        if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
            raise ShapeError(f"matmul: incompatible shapes {a.shape} and {b.shape}")
        return np.matmul(a, b), (a, b)

    @staticmethod
    def backward(g, ctx):
        a, b = ctx
        ga = np.matmul(g, np.swapaxes(b, -1, -2))
        gb = np.matmul(np.swapaxes(a, -1, -2), g)
        return _unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape)


def _conv_out(size: int, k: int, stride: int, pad: int) -> int:
    return (size + 2 * pad - k) // stride + 1


@_primitive("conv2d")
class _Conv2d:
    """Cross-correlation of (N, C, H, W) input with (O, C, k, k) kernels."""

    @staticmethod
    def forward(x, w, stride=1, pad=0):
        if x.ndim != 4 or w.ndim != 4 or x.shape[1] != w.shape[1] or w.shape[2] != w.shape[3]:
            raise ShapeError(f"conv2d: incompatible shapes {x.shape} and {w.shape}")
        n, c, h, wd = x.shape
        o, _, k, _ = w.shape
        ho, wo = _conv_out(h, k, stride, pad), _conv_out(wd, k, stride, pad)
        if ho < 1 or wo < 1:
            raise ShapeError(f"conv2d: kernel {w.shape} too large for input {x.shape}")
        xp = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad))) if pad else x
        win = sliding_window_view(xp, (k, k), axis=(2, 3))[:, :, ::stride, ::stride][:, :, :ho, :wo]
        # (N, Ho, Wo, C*k*k)
        cols = np.ascontiguousarray(win.transpose(0, 2, 3, 1, 4, 5)).reshape(n, ho, wo, c * k * k)
        out = cols @ w.reshape(o, -1).T
        return np.ascontiguousarray(out.transpose(0, 3, 1, 2)), (cols, x.shape, w, stride, pad)

    @staticmethod
    def backward(g, ctx):
        cols, xshape, w, stride, pad = ctx
        n, c, h, wd = xshape
        o, _, k, _ = w.shape
        ho, wo = g.shape[2], g.shape[3]
        gt = g.transpose(0, 2, 3, 1).reshape(-1, o)
        gw = (gt.T @ cols.reshape(-1, c * k * k)).reshape(w.shape)
        gcols = (gt @ w.reshape(o, -1)).reshape(n, ho, wo, c, k, k)
        gxp = np.zeros((n, c, h + 2 * pad, wd + 2 * pad))
        for i in range(k):
            for j in range(k):
                gxp[:, :, i:i + stride * ho:stride, j:j + stride * wo:stride] += gcols[:, :, :, :, i, j].transpose(0, 3, 1, 2)
        gx = gxp[:, :, pad:pad + h, pad:pad + wd] if pad else gxp
        return gx, gw


@_primitive("avgpool")
class _GlobalAvgPool:
    """Mean over the trailing two (spatial) axes."""

    @staticmethod
    def forward(x):
        if x.ndim < 2:
            raise ShapeError(f"avgpool: need at least 2 spatial axes, got shape {x.shape}")
        return x.mean(axis=(-2, -1)), x.shape

    @staticmethod
    def backward(g, shape):
        h, w = shape[-2:]
        return (np.broadcast_to(g[..., None, None] / (h * w), shape).copy(),)


@_primitive("maximum")
class _Maximum:
    """Elementwise max across same-shape tensors.

    The subgradient goes to the lowest-index input attaining the max.
    """

    @staticmethod
    def forward(*xs):
        if not xs:
            raise ShapeError("maximum: empty input list")
        shapes = {x.shape for x in xs}
        if len(shapes) != 1:
            raise ShapeError(f"maximum: shapes differ {sorted(shapes)}")
        stack = np.stack(xs)
        winner = np.argmax(stack, axis=0)
        return np.take_along_axis(stack, winner[None], axis=0)[0], (winner, len(xs))

    @staticmethod
    def backward(g, ctx):
        winner, count = ctx
        return tuple(np.where(winner == i, g, 0.0) for i in range(count))


@_primitive("log")
class _Log:
    @staticmethod
    def forward(x):
        if np.any(x <= 0):
            raise DomainError(f"log: nonpositive input (min {x.min()!r})")
        return np.log(x), x

    @staticmethod
    def backward(g, x):
        return (g / x,)


@_primitive("sqrt")
class _Sqrt:
    @staticmethod
    def forward(x):
        if np.any(x <= 0):
            raise DomainError(f"sqrt: nonpositive input (min {x.min()!r})")
        out = np.sqrt(x)
        return out, out

    @staticmethod
    def backward(g, out):
        return (g * 0.5 / out,)


def _logistic(x: np.ndarray) -> np.ndarray:
    # split by sign so exp never overflows
    e = np.exp(-np.abs(x))
    return np.where(x >= 0, 1.0 / (1.0 + e), e / (1.0 + e))


@_primitive("sigmoid")
class _Sigmoid:
    @staticmethod
    def forward(x):
        out = _logistic(x)
        return out, out

    @staticmethod
    def backward(g, out):
        return (g * out * (1.0 - out),)


@_primitive("logsigmoid")
class _LogSigmoid:
    @staticmethod
    def forward(x):
        return np.minimum(x, 0.0) - np.log1p(np.exp(-np.abs(x))), x

    @staticmethod
    def backward(g, x):
        return (g * _logistic(-x),)


@_primitive("tanh")
class _Tanh:
    @staticmethod
    def forward(x):
        out = np.tanh(x)
        return out, out

    @staticmethod
    def backward(g, out):
        return (g * (1.0 - out * out),)


@_primitive("dot")
class _Dot:
    @staticmethod
    def forward(a, b):
        if a.ndim != 1 or a.shape != b.shape:
            raise ShapeError(f"dot: need equal-length vectors, got {a.shape} and {b.shape}")
        return np.asarray(a @ b), (a, b)

    @staticmethod
    def backward(g, ctx):
        a, b = ctx
        return g * b, g * a


@_primitive("sum")
class _Sum:
    @staticmethod
    def forward(x, axis=None, keepdims=False):
        return np.asarray(x.sum(axis=axis, keepdims=keepdims)), (x.shape, axis, keepdims)

    @staticmethod
    def backward(g, ctx):
        shape, axis, keepdims = ctx
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape).copy(),)


@_primitive("sqnorm")
class _SquaredNorm:
    @staticmethod
    def forward(x):
        return np.asarray(np.sum(x * x)), x

    @staticmethod
    def backward(g, x):
        return (2.0 * g * x,)


@_primitive("concat")
class _Concat:
    @staticmethod
    def forward(*xs, axis=0):
        try:
            out = np.concatenate(xs, axis=axis)
        except ValueError:
            raise ShapeError(f"concat: incompatible shapes {[x.shape for x in xs]} on axis {axis}") from None
        return out, (np.cumsum([x.shape[axis] for x in xs])[:-1], axis)

    @staticmethod
    def backward(g, ctx):
        splits, axis = ctx
        return tuple(np.split(g, splits, axis=axis))


@_primitive("reshape")
class _Reshape:
    @staticmethod
    def forward(x, shape):
        try:
            return x.reshape(shape), x.shape
        except ValueError:
            raise ShapeError(f"reshape: cannot view {x.shape} as {shape}") from None

    @staticmethod
    def backward(g, shape):
        return (g.reshape(shape),)


@_primitive("transpose")
class _Transpose:
    @staticmethod
    def forward(x, axes=None):
        return np.transpose(x, axes), axes

    @staticmethod
    def backward(g, axes):
        return (np.transpose(g, None if axes is None else np.argsort(axes)),)


@_primitive("take")
class _Take:
    """Gather along ``axis`` with an integer index array."""

    @staticmethod
    def forward(x, indices, axis=0):
        indices = np.asarray(indices, dtype=np.intp)
        if axis != 0 and indices.ndim != 1:
            raise ShapeError("take: multi-dimensional indices only supported on axis 0")
        if indices.size and (indices.min() < -x.shape[axis] or indices.max() >= x.shape[axis]):
            raise ShapeError(f"take: index out of range for axis {axis} of shape {x.shape}")
        return np.take(x, indices, axis=axis), (x.shape, indices, axis)

    @staticmethod
    def backward(g, ctx):
        shape, indices, axis = ctx
        out = np.zeros(shape)
        if axis == 0:
            np.add.at(out, indices, g)
        else:
            np.add.at(np.moveaxis(out, axis, 0), indices, np.moveaxis(g, axis, 0))
        return (out,)


def apply_primitive(kind: str, inputs: Sequence, **attrs) -> Tensor:
    """Evaluate primitive ``kind`` on ``inputs``; record it if any input is on a tape."""
    try:
        prim = PRIMITIVES[kind]
    except KeyError:
        raise ValueError(f"unknown primitive {kind!r}") from None
    tensors = [as_tensor(x) for x in inputs]
    out, ctx = prim.forward(*(t.data for t in tensors), **attrs)
    tape = None
    for t in tensors:
        if t.tape is not None:
            if tape is not None and t.tape is not tape:
                raise ValueError(f"{kind}: inputs belong to different tapes")
            tape = t.tape
    if tape is None:
        return Tensor(out)
    result = Tensor(out, tape=tape, node=tape._new_node())
    tape.records.append(Record(kind, tuple(t.node if t.tape is tape else None for t in tensors), result.node, ctx))
    return result


class Gradients(dict):
    """Node id -> gradient array.

    Nodes that do not influence the output are absent; :meth:`of` returns
    zeros for them.
    """

    def of(self, t: Tensor) -> np.ndarray:
        if t.node in self:
            return self[t.node]
        return np.zeros(t.shape)


def backward(output: Tensor) -> Gradients:
    """Reverse-mode sweep from a scalar ``output`` over its tape."""
    if output.data.size != 1:
        raise ShapeError(f"backward needs a scalar output, got shape {output.shape}")
    if output.tape is None or output.node is None:
        raise ValueError("backward: output is not recorded on a tape")
    grads = Gradients()
    grads[output.node] = np.ones(output.shape)
    for rec in reversed(output.tape.records):
        if rec.output > output.node:
            continue
        g = grads.get(rec.output)
        if g is None or rec.kind == "leaf":
            continue
        parts = PRIMITIVES[rec.kind].backward(g, rec.ctx)
        for node, part in zip(rec.inputs, parts):
            if node is None:
                continue
            if node in grads:
                grads[node] = grads[node] + part
            else:
                grads[node] = part
    return grads


# ------------------------------------------------------ functional helpers


def add(a, b):
    return apply_primitive("add", [a, b])


def sub(a, b):
    return apply_primitive("sub", [a, b])


def mul(a, b):
    return apply_primitive("mul", [a, b])


def div(a, b):
    return apply_primitive("div", [a, b])


def scale(a, factor: float):
    return apply_primitive("scale", [a], factor=float(factor))


def matmul(a, b):
    return apply_primitive("matmul", [a, b])


def conv2d(x, w, stride: int = 1, pad: int = 0):
    return apply_primitive("conv2d", [x, w], stride=stride, pad=pad)


def avgpool(x):
    return apply_primitive("avgpool", [x])


def maximum(xs):
    return apply_primitive("maximum", list(xs))


def log(x):
    return apply_primitive("log", [x])


def sqrt(x):
    return apply_primitive("sqrt", [x])


def sigmoid(x):
    return apply_primitive("sigmoid", [x])


def logsigmoid(x):
    return apply_primitive("logsigmoid", [x])


def tanh(x):
    return apply_primitive("tanh", [x])


def dot(a, b):
    return apply_primitive("dot", [a, b])


def tsum(x, axis=None, keepdims: bool = False):
    return apply_primitive("sum", [x], axis=axis, keepdims=keepdims)


def sqnorm(x):
    return apply_primitive("sqnorm", [x])


def concat(xs, axis: int = 0):
    return apply_primitive("concat", list(xs), axis=axis)


def take(x, indices, axis: int = 0):
    return apply_primitive("take", [x], indices=indices, axis=axis)


# ------------------------------------------------------------ verification


class GradCheckError(RuntimeError):
    pass


def finite_difference_check(
    f: Callable[[Tensor], Tensor],
    x,
    eps: float = 1e-5,
    coords: Sequence[int] | None = None,
) -> float:
    """Max relative error between the taped gradient of ``f`` and central differences.

    ``coords`` restricts the comparison to a subset of flat coordinates of
    ``x``; by default every coordinate is checked.
    """
    if eps <= 0:
        raise ValueError("eps must be positive")
    x0 = np.array(as_tensor(x).data, dtype=DTYPE)
    tape = Tape()
    xt = tape.watch(x0)
    out = f(xt)
    analytic = backward(out).of(xt).reshape(-1)
    idx = range(x0.size) if coords is None else coords
    worst = 0.0
    for i in idx:
        xp = x0.copy().reshape(-1)
        xm = x0.copy().reshape(-1)
        xp[i] += eps
        xm[i] -= eps
        try:
            fp = f(Tensor(xp.reshape(x0.shape))).item()
            fm = f(Tensor(xm.reshape(x0.shape))).item()
        except Exception as exc:
            raise GradCheckError(f"f not evaluable at coordinate {i} +/- {eps}: {exc}") from exc
        numeric = (fp - fm) / (2.0 * eps)
        a = analytic[i]
        err = abs(a - numeric) / max(abs(a), abs(numeric), 1e-8)
        worst = max(worst, err)
    return worst
