"""
Dense tensors with tape-based reverse-mode automatic differentiation.

Every differentiable operation appends a :class:`Node` to the active
:class:`Tape` (when at least one input requires a gradient). The backward
pass walks the tape in reverse and dispatches each node to its rule in
``GRAD_RULES``, so rules can be inspected or swapped out (the gradient
check suite relies on this to prove that a broken rule is caught).

Training and attacks run in float32; float64 exists for gradient checking.
"""

from __future__ import annotations

import threading
from contextlib import contextmanager
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

DTYPES = {"f32": np.float32, "f64": np.float64}

_state = threading.local()


class ShapeError(ValueError):
    """Raised when operand shapes do not conform for an operation."""


class NonFiniteError(FloatingPointError):
    """Raised when a forward operation produces NaN or Inf."""


class DetachedError(RuntimeError):
    """Raised when backward is requested for a tensor not recorded on the tape."""


def _default_dtype():
    return getattr(_state, "dtype", np.float32)


@contextmanager
def precision(name: str):
    """Temporarily change the dtype used for tensors built from Python data."""
    old = _default_dtype()
    _state.dtype = DTYPES[name]
    try:
        yield
    finally:
        _state.dtype = old


class Tensor:
    """An n-dimensional float array that may take part in differentiation."""

    __slots__ = ("data", "requires_grad", "name", "_node", "__weakref__")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None, dtype=None):
        if isinstance(data, Tensor):
            data = data.data
        arr = np.asarray(data)
        if dtype is not None:
            arr = arr.astype(dtype, copy=False)
        elif arr.dtype not in (np.float32, np.float64, np.longdouble):
            arr = arr.astype(_default_dtype())
        self.data = arr
        self.requires_grad = requires_grad
        self.name = name
        self._node: Node | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def __repr__(self):
        tag = f", name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{tag})"

    def __len__(self):
        return self.shape[0]

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
        if isinstance(other, Tensor):
            raise TypeError("division by a Tensor is not supported")
        return mul(self, 1.0 / other)

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def sum(self, axis=None):
        return sum_(self, axis)

    def mean(self, axis=None):
        return mean(self, axis)

    def relu(self):
        return relu(self)

    def exp(self):
        return exp(self)


@dataclass(eq=False)
class Node:
    """One recorded forward operation."""

    op: str
    inputs: tuple
    output: Tensor
    ctx: dict
    index: int = -1


@dataclass(eq=False)
class Tape:
    """Ordered record of forward operations; inputs always precede outputs.

    Used as a context manager; operations executed inside the ``with`` block
    on tensors that require gradients are recorded. ``grads`` holds the
    gradient of the most recent backward pass for every visited tensor.
    """

    nodes: list = field(default_factory=list)
    grads: dict = field(default_factory=dict)

    def __enter__(self):
        stack = getattr(_state, "tapes", None)
        if stack is None:
            stack = _state.tapes = []
        stack.append(self)
        return self

    def __exit__(self, *exc):
        _state.tapes.pop()
        return False

    def record(self, op, inputs, output, ctx):
        node = Node(op, tuple(inputs), output, ctx, len(self.nodes))
        self.nodes.append(node)
        output._node = node
        output.requires_grad = True
        return node

    def owns(self, t: Tensor) -> bool:
        n = t._node
        return n is not None and n.index < len(self.nodes) and self.nodes[n.index] is n

    def gradient(self, loss: Tensor, sources: Sequence[Tensor]) -> list[np.ndarray]:
        grads = backward(self, loss)
        return [grads.get(s, np.zeros_like(s.data)) for s in sources]


def _active_tape() -> Tape | None:
    stack = getattr(_state, "tapes", None)
    return stack[-1] if stack else None


@contextmanager
def no_grad():
    """Suspend recording (useful for evaluation inside an open tape)."""
    stack = getattr(_state, "tapes", None)
    saved = list(stack) if stack else []
    _state.tapes = []
    try:
        yield
    finally:
        _state.tapes = saved


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _check_finite(op: str, out: np.ndarray):
    # a reduction is cheaper than isfinite().all() and catches any NaN/Inf
    s = out.sum(dtype=np.float64)
    if not np.isfinite(s):
        raise NonFiniteError(f"{op}: non-finite values in output of shape {out.shape}")


# these map finite inputs to finite outputs, so checking them again is redundant
_FINITE_PRESERVING = {"relu", "reshape", "transpose", "max_pool2d", "minimum"}


def _emit(op: str, inputs: Sequence[Tensor], out: np.ndarray, ctx: dict) -> Tensor:
    if op not in _FINITE_PRESERVING:
        _check_finite(op, out)
    result = Tensor(out)
    tape = _active_tape()
    if tape is not None and any(t.requires_grad for t in inputs):
        tape.record(op, inputs, result, ctx)
    return result


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


def _broadcast_shape(op, a, b):
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"{op}: cannot broadcast shapes {a.shape} and {b.shape}") from None


def _pair(a, b):
    a, b = as_tensor(a), as_tensor(b)
    if a.dtype != b.dtype:
        if a.requires_grad != b.requires_grad:
            # constants adopt the dtype of the differentiable operand
            if a.requires_grad:
                b = Tensor(b.data, dtype=a.dtype)
            else:
                a = Tensor(a.data, dtype=b.dtype)
        elif a.ndim == 0 or b.ndim == 0:
            # scalar constants adopt the dtype of the array operand
            if a.ndim == 0:
                a = Tensor(a.data, dtype=b.dtype)
            else:
                b = Tensor(b.data, dtype=a.dtype)
        else:
            dt = np.promote_types(a.dtype, b.dtype)
            a, b = Tensor(a.data, dtype=dt), Tensor(b.data, dtype=dt)
    return a, b


# ---------------------------------------------------------------------------
# forward operations


def add(a, b) -> Tensor:
    a, b = _pair(a, b)
    _broadcast_shape("add", a, b)
    return _emit("add", (a, b), a.data + b.data, {})


def sub(a, b) -> Tensor:
    a, b = _pair(a, b)
    _broadcast_shape("sub", a, b)
    return _emit("sub", (a, b), a.data - b.data, {})


def mul(a, b) -> Tensor:
    a, b = _pair(a, b)
    _broadcast_shape("mul", a, b)
    return _emit("mul", (a, b), a.data * b.data, {})


def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: incompatible shapes {a.shape} and {b.shape}")
    return _emit("matmul", (a, b), a.data @ b.data, {})


def relu(x) -> Tensor:
    x = as_tensor(x)
    mask = x.data > 0
    return _emit("relu", (x,), x.data * mask, {"mask": mask})


def exp(x) -> Tensor:
    x = as_tensor(x)
    with np.errstate(over="ignore"):
        out = np.exp(x.data)
    t = _emit("exp", (x,), out, {})
    if t._node is not None:
        t._node.ctx["out"] = out
    return t


def minimum(x, cap: float) -> Tensor:
    """Elementwise ``min(x, cap)``; the gradient is passed only where x < cap."""
    x = as_tensor(x)
    mask = x.data < cap
    return _emit("minimum", (x,), np.where(mask, x.data, x.dtype.type(cap)), {"mask": mask})


def reshape(x, shape) -> Tensor:
    x = as_tensor(x)
    shape = tuple(shape)
    try:
        out = x.data.reshape(shape)
    except ValueError:
        raise ShapeError(f"reshape: cannot reshape {x.shape} to {shape}") from None
    return _emit("reshape", (x,), out, {"shape": x.shape})


def flatten(x) -> Tensor:
    """Collapse every axis but the batch axis."""
    x = as_tensor(x)
    if x.ndim < 2:
        raise ShapeError(f"flatten: need a batch axis, got shape {x.shape}")
    return reshape(x, (x.shape[0], -1))


def _norm_axis(axis, ndim):
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(a % ndim for a in axis)


def sum_(x, axis=None) -> Tensor:
    x = as_tensor(x)
    axes = _norm_axis(axis, x.ndim)
    out = np.asarray(x.data.sum(axis=axes), dtype=x.dtype)
    return _emit("sum", (x,), out, {"axes": axes, "shape": x.shape})


def mean(x, axis=None) -> Tensor:
    x = as_tensor(x)
    axes = _norm_axis(axis, x.ndim)
    count = int(np.prod([x.shape[a] for a in axes])) if axes else 1
    out = np.asarray(x.data.mean(axis=axes), dtype=x.dtype)
    return _emit("mean", (x,), out, {"axes": axes, "shape": x.shape, "count": count})


def _conv_out(n, k, stride, pad):
    return (n + 2 * pad - k) // stride + 1


def _im2col(x: np.ndarray, kh: int, kw: int, stride: int, pad: int):
    # x is NHWC; rows ordered (n, ho, wo), columns ordered (kh, kw, c)
    if pad:
        x = np.pad(x, ((0, 0), (pad, pad), (pad, pad), (0, 0)))
    win = sliding_window_view(x, (kh, kw), axis=(1, 2))[:, ::stride, ::stride]
    n, ho, wo, c = win.shape[:4]
    cols = win.transpose(0, 1, 2, 4, 5, 3).reshape(n * ho * wo, kh * kw * c)
    return cols, ho, wo


def conv2d(x, w, b=None, stride: int = 1, padding: int = 0, layout: str = "NCHW") -> Tensor:
    """2-D cross-correlation of ``x`` with ``w`` (F,C,kh,kw).

    ``x`` is (N,C,H,W) by default; ``layout="NHWC"`` takes and returns
    channels-last tensors, which avoids two transposes per call.
    """
    x, w = as_tensor(x), as_tensor(w)
    if layout not in ("NCHW", "NHWC"):
        raise ValueError(f"conv2d: unknown layout {layout!r}")
    nhwc = layout == "NHWC"
    cin = x.shape[3] if nhwc and x.ndim == 4 else (x.shape[1] if x.ndim == 4 else None)
    if x.ndim != 4 or w.ndim != 4 or cin != w.shape[1]:
        raise ShapeError(f"conv2d: input {x.shape} ({layout}) incompatible with kernel {w.shape}")
    f, c, kh, kw = w.shape
    if stride < 1 or padding < 0:
        raise ShapeError(f"conv2d: invalid stride={stride} padding={padding}")
    xs = x.data if nhwc else x.data.transpose(0, 2, 3, 1)
    if xs.shape[1] + 2 * padding < kh or xs.shape[2] + 2 * padding < kw:
        raise ShapeError(f"conv2d: kernel {w.shape} larger than padded input {x.shape}")
    inputs = (x, w)
    if b is not None:
        b = as_tensor(b)
        if b.shape != (f,):
            raise ShapeError(f"conv2d: bias shape {b.shape} does not match {f} filters")
        inputs = (x, w, b)
    n = x.shape[0]
    cols, ho, wo = _im2col(xs, kh, kw, stride, padding)
    wmat = w.data.transpose(0, 2, 3, 1).reshape(f, -1)
    out = cols @ wmat.T
    if b is not None:
        out += b.data
    out = out.reshape(n, ho, wo, f)
    if not nhwc:
        out = np.ascontiguousarray(out.transpose(0, 3, 1, 2))
    ctx = {"cols": cols, "wmat": wmat, "x_shape": xs.shape, "stride": stride, "pad": padding,
           "hw": (ho, wo), "nhwc": nhwc}
    return _emit("conv2d", inputs, out, ctx)


def transpose(x, axes) -> Tensor:
    x = as_tensor(x)
    axes = tuple(axes)
    if sorted(axes) != list(range(x.ndim)):
        raise ShapeError(f"transpose: axes {axes} invalid for shape {x.shape}")
    return _emit("transpose", (x,), np.ascontiguousarray(x.data.transpose(axes)), {"axes": axes})


def _pool_views(a: np.ndarray, size: int, ho: int, wo: int, nhwc: bool):
    for i in range(size):
        for j in range(size):
            if nhwc:
                yield a[:, i : i + size * ho : size, j : j + size * wo : size]
            else:
                yield a[:, :, i : i + size * ho : size, j : j + size * wo : size]


def max_pool2d(x, size: int = 2, layout: str = "NCHW") -> Tensor:
    """Non-overlapping max pooling; trailing rows/columns that do not fill a window are dropped.

    Ties go to the first position of the window in row-major order.
    """
    x = as_tensor(x)
    if x.ndim != 4:
        raise ShapeError(f"max_pool2d: expected a 4-D {layout} tensor, got {x.shape}")
    nhwc = layout == "NHWC"
    h, w = (x.shape[1], x.shape[2]) if nhwc else (x.shape[2], x.shape[3])
    ho, wo = h // size, w // size
    if ho == 0 or wo == 0:
        raise ShapeError(f"max_pool2d: window {size} larger than input {x.shape}")
    views = _pool_views(x.data, size, ho, wo, nhwc)
    out = next(views).copy()
    better = []
    for v in views:
        better.append(v > out)
        np.maximum(out, v, out=out)
    return _emit("max_pool2d", (x,), out, {"better": better, "size": size, "shape": x.shape, "nhwc": nhwc})


def log_softmax(logits) -> Tensor:
    z = as_tensor(logits)
    if z.ndim != 2:
        raise ShapeError(f"log_softmax: expected (batch, classes), got {z.shape}")
    shifted = z.data - z.data.max(axis=1, keepdims=True)
    out = shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    return _emit("log_softmax", (z,), out, {"out": out})


def softmax(logits) -> Tensor:
    return exp(log_softmax(logits))


def softmax_cross_entropy(logits, onehot, reduction: str = "mean") -> Tensor:
    """Cross-entropy of softmax(logits) against one-hot targets.

    ``reduction`` is "mean" (scalar), "sum" (scalar) or "none" (per sample).
    """
    z, y = as_tensor(logits), as_tensor(onehot)
    if z.ndim != 2 or z.shape != y.shape:
        raise ShapeError(f"softmax_cross_entropy: logits {z.shape} vs targets {y.shape}")
    if reduction not in ("mean", "sum", "none"):
        raise ValueError(f"unknown reduction {reduction!r}")
    shifted = z.data - z.data.max(axis=1, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    logp = shifted - lse
    per = -(y.data * logp).sum(axis=1)
    if reduction == "mean":
        out = np.asarray(per.mean(), dtype=z.dtype)
    elif reduction == "sum":
        out = np.asarray(per.sum(), dtype=z.dtype)
    else:
        out = per.astype(z.dtype, copy=False)
    return _emit("softmax_xent", (z, y), out, {"logp": logp, "reduction": reduction})


# ---------------------------------------------------------------------------
# gradient rules: rule(node, upstream, needs) -> tuple of input gradients


def _g_add(node, g, needs):
    a, b = node.inputs
    return (_unbroadcast(g, a.shape) if needs[0] else None,
            _unbroadcast(g, b.shape) if needs[1] else None)


def _g_sub(node, g, needs):
    a, b = node.inputs
    return (_unbroadcast(g, a.shape) if needs[0] else None,
            _unbroadcast(-g, b.shape) if needs[1] else None)


def _g_mul(node, g, needs):
    a, b = node.inputs
    return (_unbroadcast(g * b.data, a.shape) if needs[0] else None,
            _unbroadcast(g * a.data, b.shape) if needs[1] else None)


def _g_matmul(node, g, needs):
    a, b = node.inputs
    return (g @ b.data.T if needs[0] else None, a.data.T @ g if needs[1] else None)


def _g_relu(node, g, needs):
    return (g * node.ctx["mask"],)


def _g_exp(node, g, needs):
    return (g * node.ctx["out"],)


def _g_minimum(node, g, needs):
    return (g * node.ctx["mask"],)


def _g_reshape(node, g, needs):
    return (g.reshape(node.ctx["shape"]),)


def _g_sum(node, g, needs):
    shape, axes = node.ctx["shape"], node.ctx["axes"]
    keep = [1 if i in axes else n for i, n in enumerate(shape)]
    return (np.broadcast_to(np.reshape(g, keep), shape).copy(),)


def _g_mean(node, g, needs):
    shape, axes = node.ctx["shape"], node.ctx["axes"]
    keep = [1 if i in axes else n for i, n in enumerate(shape)]
    return (np.broadcast_to(np.reshape(g, keep) / node.ctx["count"], shape).astype(g.dtype),)


def _col2im(dcols, x_shape, kh, kw, stride, pad, ho, wo):
    n, h, w, c = x_shape
    d = dcols.reshape(n, ho, wo, kh, kw, c)
    dx = np.zeros((n, h + 2 * pad, w + 2 * pad, c), dtype=dcols.dtype)
    for i in range(kh):
        for j in range(kw):
            dx[:, i : i + stride * ho : stride, j : j + stride * wo : stride] += d[:, :, :, i, j]
    if pad:
        dx = dx[:, pad:-pad, pad:-pad]
    return dx


def _g_conv2d(node, g, needs):
    w = node.inputs[1]
    f, c, kh, kw = w.shape
    ctx = node.ctx
    nhwc = ctx["nhwc"]
    g2 = g.reshape(-1, f) if nhwc else g.transpose(0, 2, 3, 1).reshape(-1, f)
    dx = dw = db = None
    if needs[0]:
        dcols = g2 @ ctx["wmat"]
        ho, wo = ctx["hw"]
        dx = _col2im(dcols, ctx["x_shape"], kh, kw, ctx["stride"], ctx["pad"], ho, wo)
        dx = np.ascontiguousarray(dx if nhwc else dx.transpose(0, 3, 1, 2))
    if needs[1]:
        dw = (g2.T @ ctx["cols"]).reshape(f, kh, kw, c).transpose(0, 3, 1, 2).copy()
    if len(needs) > 2 and needs[2]:
        db = g2.sum(axis=0)
    return (dx, dw, db)[: len(needs)]


def _g_transpose(node, g, needs):
    return (np.ascontiguousarray(g.transpose(np.argsort(node.ctx["axes"]))),)


def _g_max_pool2d(node, g, needs):
    # the winner of a window is the last offset that strictly improved the running max
    size, better = node.ctx["size"], node.ctx["better"]
    dx = np.zeros(node.ctx["shape"], dtype=g.dtype)
    ho, wo = g.shape[1:3] if node.ctx["nhwc"] else g.shape[2:4]
    views = list(_pool_views(dx, size, ho, wo, node.ctx["nhwc"]))
    taken = np.zeros(g.shape, dtype=bool)
    for k in range(len(views) - 1, 0, -1):
        win = better[k - 1] & ~taken
        views[k][...] = g * win
        taken |= win
    views[0][...] = g * ~taken
    return (dx,)


def _g_log_softmax(node, g, needs):
    p = np.exp(node.ctx["out"])
    return (g - p * g.sum(axis=1, keepdims=True),)


def _g_softmax_xent(node, g, needs):
    z, y = node.inputs
    logp = node.ctx["logp"]
    red = node.ctx["reduction"]
    n = z.shape[0]
    if red == "mean":
        scale = np.asarray(g) / n
    elif red == "sum":
        scale = np.asarray(g)
    else:
        scale = np.asarray(g)[:, None]
    ysum = y.data.sum(axis=1, keepdims=True)
    dz = (np.exp(logp) * ysum - y.data) * scale if needs[0] else None
    dy = -logp * scale if needs[1] else None
    return (dz, dy)


GRAD_RULES: dict[str, Callable] = {
    "add": _g_add,
    "sub": _g_sub,
    "mul": _g_mul,
    "matmul": _g_matmul,
    "relu": _g_relu,
    "exp": _g_exp,
    "minimum": _g_minimum,
    "reshape": _g_reshape,
    "sum": _g_sum,
    "mean": _g_mean,
    "conv2d": _g_conv2d,
    "max_pool2d": _g_max_pool2d,
    "transpose": _g_transpose,
    "log_softmax": _g_log_softmax,
    "softmax_xent": _g_softmax_xent,
}

FORWARD_OPS: dict[str, Callable] = {
    "add": add,
    "sub": sub,
    "mul": mul,
    "matmul": matmul,
    "relu": relu,
    "exp": exp,
    "minimum": minimum,
    "reshape": reshape,
    "flatten": flatten,
    "sum": sum_,
    "mean": mean,
    "conv2d": conv2d,
    "max_pool2d": max_pool2d,
    "transpose": transpose,
    "log_softmax": log_softmax,
    "softmax_cross_entropy": softmax_cross_entropy,
}


def forward(kind: str, *inputs, **attrs) -> Tensor:
    """Dispatch a forward operation by name (see ``FORWARD_OPS``)."""
    try:
        fn = FORWARD_OPS[kind]
    except KeyError:
        raise ValueError(f"unknown op kind {kind!r}") from None
    return fn(*inputs, **attrs)


def backward(tape: Tape, loss: Tensor, upstream: np.ndarray | None = None) -> dict:
    """Propagate d(loss) back through ``tape``.

    Returns a dict keyed by tensor holding the gradient for every leaf that
    requires one (parameters and watched inputs). ``tape.grads`` additionally
    keeps the gradient of every intermediate visited.
    """
    if not tape.nodes:
        raise DetachedError("backward: tape is empty")
    if not tape.owns(loss):
        raise DetachedError("backward: loss was not produced on this tape (detached tensor)")
    if upstream is None:
        if loss.size != 1:
            raise ShapeError(f"backward: loss must be scalar, got shape {loss.shape}")
        upstream = np.ones_like(loss.data)
    grads: dict = {loss: np.asarray(upstream, dtype=loss.dtype)}
    leaves: dict = {}
    for node in reversed(tape.nodes[: loss._node.index + 1]):
        g = grads.get(node.output)
        if g is None:
            continue
        needs = tuple(t.requires_grad for t in node.inputs)
        parts = GRAD_RULES[node.op](node, g, needs)
        for t, gi in zip(node.inputs, parts):
            if gi is None or not t.requires_grad:
                continue
            prev = grads.get(t)
            grads[t] = gi if prev is None else prev + gi
            if t._node is None:
                leaves[t] = True
    tape.grads = grads
    return {t: grads[t] for t in leaves}


def finite_diff_grad(f: Callable[[np.ndarray], float], x, h: float = 1e-6, dtype=np.float64) -> np.ndarray:
    """Central-difference gradient of scalar ``f`` at ``x``, one coordinate at a time.

    ``x`` is copied to ``dtype`` (float64 by default) before perturbing.
    """
    if h <= 0:
        raise ValueError("finite_diff_grad: step h must be positive")
    base = np.array(x.data if isinstance(x, Tensor) else x, dtype=dtype)
    grad = np.zeros_like(base)
    flat = base.reshape(-1)
    gflat = grad.reshape(-1)
    step = dtype(h) if isinstance(dtype, type) else np.dtype(dtype).type(h)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + step
        fp = f(base)
        flat[i] = orig - step
        fm = f(base)
        flat[i] = orig
        gflat[i] = (fp - fm) / (2 * step)
    return grad


def zeros(shape, requires_grad=False, dtype=None) -> Tensor:
    return Tensor(np.zeros(shape, dtype=dtype or _default_dtype()), requires_grad=requires_grad)
