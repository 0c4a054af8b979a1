"""Dense tensors with reverse-mode automatic differentiation.

Only the operations needed by the detector graph and its loss are provided.
Every op is a plain function that computes its result with numpy and records
a closure mapping the output gradient to gradients of its inputs.  The
closures are replayed in reverse topological order by :func:`backward`.
"""

from __future__ import annotations

import contextlib
import threading
from typing import Callable, Iterable, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

__all__ = [
    "Tensor",
    "Tape",
    "NonFiniteError",
    "tensor",
    "no_grad",
    "is_grad_enabled",
    "default_dtype",
    "get_default_dtype",
    "set_default_dtype",
    "backward",
    "add",
    "sub",
    "mul",
    "div",
    "neg",
    "square",
    "sqrt",
    "abs",
    "exp",
    "log",
    "atan",
    "clamp",
    "minimum",
    "maximum",
    "sigmoid",
    "silu",
    "leaky_relu",
    "bce_with_logits",
    "reduce_sum",
    "reduce_mean",
    "reshape",
    "transpose",
    "take",
    "concat",
    "conv2d",
    "max_pool2d",
    "upsample_nearest2x",
    "space_to_depth",
    "batch_norm",
]


class NonFiniteError(ArithmeticError):
    """Raised when an op produces NaN or infinite values."""


_state = threading.local()


def _st():
    if not hasattr(_state, "grad_enabled"):
        _state.grad_enabled = True
        _state.dtype = np.dtype(np.float32)
    return _state


def get_default_dtype() -> np.dtype:
    return _st().dtype


def set_default_dtype(dtype) -> None:
    dtype = np.dtype(dtype)
    if dtype not in (np.float32, np.float64):
        raise ValueError(f"unsupported dtype {dtype}; use float32 or float64")
    _st().dtype = dtype


@contextlib.contextmanager
def default_dtype(dtype):
    """Temporarily switch the default precision, e.g. to float64 for grad checks."""
    prev = get_default_dtype()
    set_default_dtype(dtype)
    try:
        yield
    finally:
        set_default_dtype(prev)


def is_grad_enabled() -> bool:
    return _st().grad_enabled


@contextlib.contextmanager
def no_grad():
    st = _st()
    prev = st.grad_enabled
    st.grad_enabled = False
    try:
        yield
    finally:
        st.grad_enabled = prev


class Tensor:
    """An n-d array with optional gradient tracking.

    ``grad`` stays ``None`` until a backward pass reaches the tensor.  Only
    leaves (tensors not produced by an op) accumulate ``grad``.
    """

    __slots__ = ("data", "grad", "requires_grad", "parents", "backward_fn", "op")
    __array_priority__ = 100

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        arr = np.asarray(data, dtype=dtype or get_default_dtype())
        if arr.ndim == 0:
            arr = arr.reshape(())
        self.data = arr
        self.grad: np.ndarray | None = None
        self.requires_grad = bool(requires_grad)
        self.parents: tuple[Tensor, ...] = ()
        self.backward_fn: Callable | None = None
        self.op = "leaf"

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
        return self.backward_fn is None

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        if self.data.size != 1:
            raise ValueError(f"item() needs a single-element tensor, got shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def zero_grad(self) -> None:
        self.grad = None

    def detach(self) -> Tensor:
        return Tensor(self.data, dtype=self.data.dtype)

    def backward(self) -> None:
        backward(self)

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, op={self.op}{flag})"

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

    def __getitem__(self, idx):
        return take(self, idx)


def tensor(data, requires_grad: bool = False, dtype=None) -> Tensor:
    return Tensor(data, requires_grad=requires_grad, dtype=dtype)


def _as_tensor(x, like: Tensor | None = None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    dtype = like.dtype if like is not None else None
    return Tensor(x, dtype=dtype)


def _pair(a, b) -> tuple[Tensor, Tensor]:
    """Coerce operands, giving bare scalars the dtype of the tensor operand."""
    if not isinstance(a, Tensor):
        return _as_tensor(a, b), b if isinstance(b, Tensor) else _as_tensor(b)
    return a, _as_tensor(b, a)


def _result(op: str, data: np.ndarray, parents: Sequence[Tensor], backward_fn) -> Tensor:
    if not np.all(np.isfinite(data)):
        raise NonFiniteError(f"{op} produced non-finite values")
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out.op = op
    needs = is_grad_enabled() and any(p.requires_grad for p in parents)
    out.requires_grad = needs
    if needs:
        out.parents = tuple(parents)
        out.backward_fn = backward_fn
    else:
        out.parents = ()
        out.backward_fn = None
    return out


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


# ---------------------------------------------------------------------------
# backward pass


class Tape:
    """Ops reachable from an output, in topological order.

    Built lazily from the graph links each op leaves on its result, so a tape
    never outlives the graph and is never shared between threads.
    """

    def __init__(self, nodes: list[Tensor]):
        self.nodes = nodes

    @classmethod
    def from_output(cls, out: Tensor) -> Tape:
        order: list[Tensor] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(out, False)]
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
                if id(p) not in seen and p.requires_grad:
                    stack.append((p, False))
        return cls([n for n in order if n.backward_fn is not None])

    def __len__(self) -> int:
        return len(self.nodes)

    def replay(self, out: Tensor, seed: np.ndarray, visit: Callable | None = None) -> None:
        grads: dict[int, np.ndarray] = {id(out): seed}
        for node in reversed(self.nodes):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if visit is not None:
                visit(node)
            for parent, pg in zip(node.parents, node.backward_fn(g)):
                if pg is None or not parent.requires_grad:
                    continue
                if parent.backward_fn is None:
                    pg = np.asarray(pg, dtype=parent.data.dtype).reshape(parent.shape)
                    parent.grad = pg.copy() if parent.grad is None else parent.grad + pg
                else:
                    key = id(parent)
                    grads[key] = grads[key] + pg if key in grads else pg


def backward(loss: Tensor, visit: Callable | None = None) -> None:
    """Populate ``grad`` on every leaf that ``loss`` depends on.

    Gradients accumulate across calls; clear them with ``zero_grad``.
    """
    if loss.size != 1:
        raise ValueError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        raise ValueError("loss does not depend on any tensor that requires grad")
    if loss.backward_fn is None:
        loss.grad = np.ones_like(loss.data) if loss.grad is None else loss.grad + 1
        return
    tape = Tape.from_output(loss)
    if not len(tape):
        raise ValueError("empty tape")
    tape.replay(loss, np.ones_like(loss.data), visit)


# ---------------------------------------------------------------------------
# elementwise arithmetic


def add(a, b) -> Tensor:
    a, b = _pair(a, b)

    def bw(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _result("add", a.data + b.data, (a, b), bw)


def sub(a, b) -> Tensor:
    a, b = _pair(a, b)

    def bw(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return _result("sub", a.data - b.data, (a, b), bw)


def mul(a, b) -> Tensor:
    a, b = _pair(a, b)

    def bw(g):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

    return _result("mul", a.data * b.data, (a, b), bw)


def div(a, b) -> Tensor:
    a, b = _pair(a, b)
    if np.any(b.data == 0):
        raise ZeroDivisionError("div by zero")
    out = a.data / b.data

    def bw(g):
        return _unbroadcast(g / b.data, a.shape), _unbroadcast(-g * out / b.data, b.shape)

    return _result("div", out, (a, b), bw)


def neg(a: Tensor) -> Tensor:
    return _result("neg", -a.data, (a,), lambda g: (-g,))


def square(a: Tensor) -> Tensor:
    return _result("square", a.data * a.data, (a,), lambda g: (2 * a.data * g,))


def sqrt(a: Tensor) -> Tensor:
    if np.any(a.data < 0):
        raise ValueError("sqrt of negative value")
    out = np.sqrt(a.data)
    return _result("sqrt", out, (a,), lambda g: (g / (2 * out),))


def abs(a: Tensor) -> Tensor:  # noqa: A001 - mirrors numpy naming
    # subgradient 0 at 0
    return _result("abs", np.abs(a.data), (a,), lambda g: (g * np.sign(a.data),))


def exp(a: Tensor) -> Tensor:
    with np.errstate(over="ignore"):  # overflow is reported as NonFiniteError
        out = np.exp(a.data)
    return _result("exp", out, (a,), lambda g: (g * out,))


def log(a: Tensor) -> Tensor:
    if np.any(a.data <= 0):
        raise ValueError("log of non-positive value")
    return _result("log", np.log(a.data), (a,), lambda g: (g / a.data,))


def atan(a: Tensor) -> Tensor:
    return _result("atan", np.arctan(a.data), (a,), lambda g: (g / (1 + a.data * a.data),))


def clamp(a: Tensor, lo: float | None = None, hi: float | None = None) -> Tensor:
    out = np.clip(a.data, lo, hi)
    mask = np.ones_like(a.data)
    if lo is not None:
        mask = mask * (a.data >= lo)
    if hi is not None:
        mask = mask * (a.data <= hi)
    return _result("clamp", out, (a,), lambda g: (g * mask,))


def minimum(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise min; ties send the gradient to ``a``."""
    a, b = _pair(a, b)
    pick_a = a.data <= b.data

    def bw(g):
        return _unbroadcast(g * pick_a, a.shape), _unbroadcast(g * ~pick_a, b.shape)

    return _result("minimum", np.where(pick_a, a.data, b.data), (a, b), bw)


def maximum(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise max; ties send the gradient to ``a``."""
    a, b = _pair(a, b)
    pick_a = a.data >= b.data

    def bw(g):
        return _unbroadcast(g * pick_a, a.shape), _unbroadcast(g * ~pick_a, b.shape)

    return _result("maximum", np.where(pick_a, a.data, b.data), (a, b), bw)


def sigmoid_np(x: np.ndarray) -> np.ndarray:
    # split by sign so exp never overflows
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    e = np.exp(x[~pos])
    out[~pos] = e / (1.0 + e)
    return out


def sigmoid(a: Tensor) -> Tensor:
    s = sigmoid_np(a.data)
    return _result("sigmoid", s, (a,), lambda g: (g * s * (1 - s),))


def silu(a: Tensor) -> Tensor:
    s = sigmoid_np(a.data)
    out = a.data * s
    return _result("silu", out, (a,), lambda g: (g * (s + out * (1 - s)),))


def leaky_relu(a: Tensor, slope: float = 0.1) -> Tensor:
    scale = np.where(a.data > 0, 1.0, slope).astype(a.dtype)
    return _result("leaky_relu", a.data * scale, (a,), lambda g: (g * scale,))


def bce_with_logits(logits: Tensor, targets) -> Tensor:
    """Elementwise binary cross-entropy of ``sigmoid(logits)`` against ``targets``.

    ``targets`` is treated as a constant.
    """
    t = np.asarray(targets.data if isinstance(targets, Tensor) else targets, dtype=logits.dtype)
    x = logits.data
    out = np.maximum(x, 0) - x * t + np.log1p(np.exp(-np.abs(x)))
    return _result("bce_with_logits", out, (logits,), lambda g: (g * (sigmoid_np(x) - t),))


# ---------------------------------------------------------------------------
# reductions and shape ops


def _axes(axis, ndim):
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(a % ndim for a in axis)


def reduce_sum(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    axes = _axes(axis, a.ndim)
    out = a.data.sum(axis=axes, keepdims=keepdims)

    def bw(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g, a.shape),)

    return _result("reduce_sum", np.asarray(out), (a,), bw)


def reduce_mean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    axes = _axes(axis, a.ndim)
    count = int(np.prod([a.shape[i] for i in axes])) if axes else 1
    if count == 0:
        raise ValueError("mean over an empty axis")
    out = a.data.mean(axis=axes, keepdims=keepdims)

    def bw(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g / count, a.shape),)

    return _result("reduce_mean", np.asarray(out), (a,), bw)


def reshape(a: Tensor, shape: Sequence[int]) -> Tensor:
    return _result("reshape", a.data.reshape(shape), (a,), lambda g: (g.reshape(a.shape),))


def transpose(a: Tensor, axes: Sequence[int]) -> Tensor:
    inv = np.argsort(axes)
    return _result("transpose", a.data.transpose(axes), (a,), lambda g: (g.transpose(inv),))


def take(a: Tensor, index) -> Tensor:
    """Basic or advanced indexing; repeated indices accumulate in backward."""
    out = a.data[index]

    def bw(g):
        full = np.zeros_like(a.data)
        np.add.at(full, index, g)
        return (full,)

    return _result("take", np.array(out, copy=True), (a,), bw)


def concat(tensors: Sequence[Tensor], axis: int = 1) -> Tensor:
    if not tensors:
        raise ValueError("concat of an empty list")
    ref = tensors[0].shape
    axis = axis % len(ref)
    for i, t in enumerate(tensors[1:], start=1):
        if t.ndim != len(ref):
            raise ValueError(f"concat: input {i} has rank {t.ndim}, expected {len(ref)}")
        for d, (m, n) in enumerate(zip(ref, t.shape)):
            if d != axis and m != n:
                raise ValueError(f"concat: input {i} dim {d} is {n}, expected {m}")
    bounds = np.cumsum([t.shape[axis] for t in tensors])[:-1]

    def bw(g):
        return tuple(np.split(g, bounds, axis=axis))

    return _result("concat", np.concatenate([t.data for t in tensors], axis=axis), tuple(tensors), bw)


# ---------------------------------------------------------------------------
# spatial ops, NCHW layout


def conv2d(x: Tensor, weight: Tensor, bias: Tensor | None = None, stride: int = 1, padding: int = 0) -> Tensor:
    """2-d cross-correlation with explicit symmetric zero padding."""
    if x.ndim != 4:
        raise ValueError(f"conv2d input must be NCHW, got rank {x.ndim}")
    if weight.ndim != 4 or weight.shape[2] != weight.shape[3]:
        raise ValueError(f"conv2d weight must be [Cout, Cin, k, k], got {weight.shape}")
    n, c, h, w = x.shape
    cout, cin, k, _ = weight.shape
    if c != cin:
        raise ValueError(f"conv2d channel mismatch: input has {c} channels (dim 1), weight expects Cin={cin}")
    if k < 1 or stride < 1 or padding < 0:
        raise ValueError(f"conv2d needs k>=1, stride>=1, padding>=0 (k={k}, stride={stride}, padding={padding})")
    if bias is not None and bias.shape != (cout,):
        raise ValueError(f"conv2d bias shape {bias.shape} does not match Cout={cout}")
    ho = (h + 2 * padding - k) // stride + 1
    wo = (w + 2 * padding - k) // stride + 1
    if ho < 1 or wo < 1:
        raise ValueError(f"conv2d output would be empty for spatial size {h}x{w}")

    xd = x.data
    if padding:
        xd = np.pad(xd, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    if k == 1:
        cols = xd[:, :, ::stride, ::stride][:, :, :ho, :wo]
        out = np.tensordot(weight.data[:, :, 0, 0], cols, axes=([1], [1])).transpose(1, 0, 2, 3)
    else:
        win = sliding_window_view(xd, (k, k), axis=(2, 3))[:, :, ::stride, ::stride][:, :, :ho, :wo]
        cols = np.ascontiguousarray(win.transpose(0, 2, 3, 1, 4, 5)).reshape(n * ho * wo, c * k * k)
        out = (cols @ weight.data.reshape(cout, -1).T).reshape(n, ho, wo, cout).transpose(0, 3, 1, 2)
    out = np.ascontiguousarray(out)
    if bias is not None:
        out += bias.data.reshape(1, -1, 1, 1)

    def bw(g):
        gw = gx = gb = None
        if bias is not None and bias.requires_grad:
            gb = g.sum(axis=(0, 2, 3))
        if k == 1:
            if weight.requires_grad:
                gw = np.tensordot(g, cols, axes=([0, 2, 3], [0, 2, 3])).reshape(cout, cin, 1, 1)
            if x.requires_grad:
                gxp = np.zeros(xd.shape, dtype=xd.dtype)
                gxp[:, :, : ho * stride : stride, : wo * stride : stride] = np.tensordot(
                    g, weight.data[:, :, 0, 0], axes=([1], [0])
                ).transpose(0, 3, 1, 2)
        else:
            g2 = g.transpose(0, 2, 3, 1).reshape(n * ho * wo, cout)
            if weight.requires_grad:
                gw = (g2.T @ cols).reshape(weight.shape)
            if x.requires_grad:
                gcols = (g2 @ weight.data.reshape(cout, -1)).reshape(n, ho, wo, c, k, k)
                gxp = np.zeros(xd.shape, dtype=xd.dtype)
                for i in range(k):
                    for j in range(k):
                        gxp[:, :, i : i + stride * ho : stride, j : j + stride * wo : stride] += gcols[
                            :, :, :, :, i, j
                        ].transpose(0, 3, 1, 2)
        if x.requires_grad:
            gx = gxp[:, :, padding : padding + h, padding : padding + w] if padding else gxp
        return gx, gw, gb

    parents = (x, weight) if bias is None else (x, weight, bias)
    return _result("conv2d", out, parents, lambda g: bw(g)[: len(parents)])


def max_pool2d(x: Tensor, k: int, stride: int = 1, padding: int | None = None) -> Tensor:
    """Max pooling; the default padding ``k // 2`` keeps the size at stride 1."""
    if padding is None:
        padding = k // 2
    n, c, h, w = x.shape
    xd = x.data
    if padding:
        xd = np.pad(xd, ((0, 0), (0, 0), (padding, padding), (padding, padding)), constant_values=-np.inf)
    ho = (h + 2 * padding - k) // stride + 1
    wo = (w + 2 * padding - k) // stride + 1
    win = sliding_window_view(xd, (k, k), axis=(2, 3))[:, :, ::stride, ::stride][:, :, :ho, :wo]
    flat = win.reshape(n, c, ho, wo, k * k)
    arg = flat.argmax(axis=-1)
    out = np.take_along_axis(flat, arg[..., None], axis=-1)[..., 0]

    def bw(g):
        gxp = np.zeros(xd.shape, dtype=x.dtype)
        for i in range(k):
            for j in range(k):
                hit = arg == i * k + j
                if hit.any():
                    gxp[:, :, i : i + stride * ho : stride, j : j + stride * wo : stride] += g * hit
        return (gxp[:, :, padding : padding + h, padding : padding + w],)

    return _result("max_pool2d", np.ascontiguousarray(out), (x,), bw)


def upsample_nearest2x(x: Tensor) -> Tensor:
    n, c, h, w = x.shape
    out = x.data.repeat(2, axis=2).repeat(2, axis=3)
    return _result("upsample", out, (x,), lambda g: (g.reshape(n, c, h, 2, w, 2).sum(axis=(3, 5)),))


def space_to_depth(x: Tensor) -> Tensor:
    """Fold each 2x2 pixel block into channels (the Focus stem slicing)."""
    n, c, h, w = x.shape
    if h % 2 or w % 2:
        raise ValueError(f"space_to_depth needs even spatial dims, got {h}x{w}")
    d = x.data
    out = np.concatenate([d[..., ::2, ::2], d[..., 1::2, ::2], d[..., ::2, 1::2], d[..., 1::2, 1::2]], axis=1)

    def bw(g):
        gx = np.empty_like(x.data)
        parts = np.split(g, 4, axis=1)
        gx[..., ::2, ::2] = parts[0]
        gx[..., 1::2, ::2] = parts[1]
        gx[..., ::2, 1::2] = parts[2]
        gx[..., 1::2, 1::2] = parts[3]
        return (gx,)

    return _result("space_to_depth", out, (x,), bw)


def batch_norm(
    x: Tensor,
    gamma: Tensor,
    beta: Tensor,
    running_mean: np.ndarray,
    running_var: np.ndarray,
    training: bool,
    momentum: float = 0.03,
    eps: float = 1e-3,
) -> Tensor:
    """Per-channel normalization of an NCHW tensor.

    In training mode batch statistics are used and the running buffers are
    updated in place (``running = (1 - momentum) * running + momentum * batch``,
    unbiased variance).  In inference mode this is a fixed affine map.
    """
    c = x.shape[1]
    if gamma.shape != (c,) or beta.shape != (c,):
        raise ValueError(f"batch_norm affine params must have shape ({c},)")
    shape = (1, c, 1, 1)
    if training:
        m = x.size // c
        if m < 2:
            raise ValueError("batch_norm in training mode needs more than one value per channel")
        mean = x.data.mean(axis=(0, 2, 3))
        var = x.data.var(axis=(0, 2, 3))
        running_mean *= 1 - momentum
        running_mean += momentum * mean
        running_var *= 1 - momentum
        running_var += momentum * var * m / (m - 1)
    else:
        mean, var = running_mean, running_var
    invstd = (1.0 / np.sqrt(var + eps)).astype(x.dtype)
    xhat = (x.data - mean.reshape(shape).astype(x.dtype)) * invstd.reshape(shape)
    out = xhat * gamma.data.reshape(shape) + beta.data.reshape(shape)

    def bw(g):
        gg = (g * xhat).sum(axis=(0, 2, 3))
        gb = g.sum(axis=(0, 2, 3))
        dxhat = g * gamma.data.reshape(shape)
        if training:
            m = x.size // c
            gx = (invstd.reshape(shape) / m) * (
                m * dxhat
                - dxhat.sum(axis=(0, 2, 3), keepdims=True)
                - xhat * (dxhat * xhat).sum(axis=(0, 2, 3), keepdims=True)
            )
        else:
            gx = dxhat * invstd.reshape(shape)
        return gx, gg, gb

    return _result("batch_norm", out, (x, gamma, beta), bw)


def parameters_of(tensors: Iterable[Tensor]) -> list[Tensor]:
    return [t for t in tensors if t.requires_grad]
