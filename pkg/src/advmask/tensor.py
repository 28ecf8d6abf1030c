"""Reverse-mode automatic differentiation over dense numpy arrays.

Every differentiable operation on a :class:`Tensor` that requires grad is
recorded on a :class:`Tape`. ``backward`` walks the tape once, in reverse
record order, and accumulates gradients into leaf tensors. A tape is
consumed by its backward pass; calling backward on it again raises
:class:`TapeError`.

Tensors are float32 by default. Passing ``dtype=np.float64`` runs the same
code path in double precision, which is what the finite-difference checks use.
"""

from __future__ import annotations

import contextlib
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

DTYPE = np.float32


class ShapeError(ValueError):
    """Raised when an operation receives incompatible input shapes."""

    def __init__(self, op: str, *shapes, detail: str = ""):
        self.op = op
        self.shapes = tuple(tuple(s) for s in shapes)
        msg = f"{op}: incompatible shapes " + ", ".join(str(s) for s in self.shapes)
        if detail:
            msg += f" ({detail})"
        super().__init__(msg)


class TapeError(RuntimeError):
    pass


@dataclass
class Node:
    kind: str
    inputs: tuple
    out: "Tensor"
    backward: Callable
    needs_grad: tuple = ()


class Tape:
    """Ordered record of operations for one forward/backward cycle."""

    def __init__(self):
        self.nodes: list[Node] = []
        self.consumed = False

    def record(self, kind, inputs, out, backward):
        if self.consumed:
            raise TapeError("cannot record on a tape that has already run backward")
        out._tape = self
        out.node_id = len(self.nodes)
        # requires_grad is captured now so that freezing applies to the recorded pass
        needs = tuple(t.requires_grad for t in inputs)
        self.nodes.append(Node(kind, tuple(inputs), out, backward, needs))

    def __len__(self):
        return len(self.nodes)

    def __enter__(self):
        _tape_stack.append(self)
        return self

    def __exit__(self, *exc):
        _tape_stack.pop()
        return False

    def backward(self, loss: "Tensor"):
        if self.consumed:
            raise TapeError("backward already ran on this tape; re-record the forward pass")
        if loss.data.size != 1:
            raise ShapeError("backward", loss.shape, detail="loss must be a scalar")
        grads = {loss.node_id: np.ones_like(loss.data)}
        for node in reversed(self.nodes[: loss.node_id + 1]):
            g = grads.pop(node.out.node_id, None)
            if g is None:
                continue
            in_grads = node.backward(g)
            for inp, gi, needed in zip(node.inputs, in_grads, node.needs_grad):
                if gi is None or not needed:
                    continue
                if inp._tape is self:
                    prev = grads.get(inp.node_id)
                    grads[inp.node_id] = gi if prev is None else prev + gi
                elif inp._tape is None:
                    gi = np.asarray(gi, dtype=inp.data.dtype).reshape(inp.shape)
                    if inp.grad is None:
                        inp.grad = gi.copy()
                    else:
                        inp.grad += gi
                else:
                    raise TapeError(f"{node.kind}: input was recorded on a different tape")
        self.consumed = True
        self.nodes.clear()


_tape_stack: list[Tape] = []
_implicit_tape: Tape | None = None
_grad_enabled = True


def active_tape() -> Tape | None:
    global _implicit_tape
    if not _grad_enabled:
        return None
    if _tape_stack:
        return _tape_stack[-1]
    if _implicit_tape is None or _implicit_tape.consumed:
        _implicit_tape = Tape()
    return _implicit_tape


@contextlib.contextmanager
def no_grad():
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


class Tensor:
    __array_priority__ = 100

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        if isinstance(data, Tensor):
            data = data.data
        arr = np.asarray(data)
        self.data = np.ascontiguousarray(arr, dtype=DTYPE if dtype is None else dtype)
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self._tape: Tape | None = None
        self.node_id: int | None = None

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0])

    def detach(self) -> "Tensor":
        return Tensor(self.data, dtype=self.data.dtype)

    def zero_grad(self):
        self.grad = np.zeros_like(self.data) if self.requires_grad else None

    def backward(self):
        if self._tape is None:
            raise TapeError("tensor is not the output of a recorded operation")
        self._tape.backward(self)

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"

    def __len__(self):
        return self.shape[0]

    __add__ = lambda self, o: add(self, o)
    __radd__ = lambda self, o: add(o, self)
    __sub__ = lambda self, o: sub(self, o)
    __rsub__ = lambda self, o: sub(o, self)
    __mul__ = lambda self, o: mul(self, o)
    __rmul__ = lambda self, o: mul(o, self)
    __truediv__ = lambda self, o: div(self, o)
    __rtruediv__ = lambda self, o: div(o, self)
    __matmul__ = lambda self, o: matmul(self, o)
    __neg__ = lambda self: scalar_mul(self, -1.0)
    __getitem__ = lambda self, idx: slice_(self, idx)

    def sum(self, axis=None, keepdims=False):
        return sum_(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)


def as_tensor(x, like: Tensor | None = None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    dtype = like.dtype if like is not None else None
    return Tensor(x, dtype=dtype)


def _emit(kind: str, data: np.ndarray, inputs: Sequence[Tensor], backward: Callable) -> Tensor:
    out = Tensor(data, dtype=data.dtype)
    if any(t.requires_grad for t in inputs):
        tape = active_tape()
        if tape is not None:
            out.requires_grad = True
            tape.record(kind, inputs, out, backward)
    return out


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for i, n in enumerate(shape):
        if n == 1 and g.shape[i] != 1:
            g = g.sum(axis=i, keepdims=True)
    return g


def _broadcast_shape(op, a, b):
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(op, a.shape, b.shape) from None


# ---------------------------------------------------------------- elementwise


def add(a, b) -> Tensor:
    a, b = as_tensor(a, b if isinstance(b, Tensor) else None), as_tensor(b, a if isinstance(a, Tensor) else None)
    _broadcast_shape("add", a, b)
    return _emit("add", a.data + b.data, (a, b),
                 lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)))


def sub(a, b) -> Tensor:
    a, b = as_tensor(a, b if isinstance(b, Tensor) else None), as_tensor(b, a if isinstance(a, Tensor) else None)
    _broadcast_shape("sub", a, b)
    return _emit("sub", a.data - b.data, (a, b),
                 lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)))


def mul(a, b) -> Tensor:
    if not isinstance(b, Tensor) and np.isscalar(b):
        return scalar_mul(a, b)
    if not isinstance(a, Tensor) and np.isscalar(a):
        return scalar_mul(b, a)
    a, b = as_tensor(a, b if isinstance(b, Tensor) else None), as_tensor(b, a if isinstance(a, Tensor) else None)
    _broadcast_shape("mul", a, b)
    return _emit("mul", a.data * b.data, (a, b),
                 lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)))


def scalar_mul(a: Tensor, c: float) -> Tensor:
    c = float(c)
    return _emit("scalar_mul", a.data * a.data.dtype.type(c), (a,), lambda g: (g * c,))


def div(a, b) -> Tensor:
    a, b = as_tensor(a, b if isinstance(b, Tensor) else None), as_tensor(b, a if isinstance(a, Tensor) else None)
    _broadcast_shape("div", a, b)
    out = a.data / b.data
    return _emit("div", out, (a, b),
                 lambda g: (_unbroadcast(g / b.data, a.shape),
                            _unbroadcast(-g * out / b.data, b.shape)))


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    return _emit("relu", np.where(mask, x.data, 0).astype(x.dtype), (x,), lambda g: (g * mask,))


def sigmoid(x: Tensor) -> Tensor:
    # split by sign so exp never overflows
    z = np.exp(-np.abs(x.data))
    out = np.where(x.data >= 0, 1 / (1 + z), z / (1 + z)).astype(x.dtype)
    return _emit("sigmoid", out, (x,), lambda g: (g * out * (1 - out),))


def exp(x: Tensor) -> Tensor:
    out = np.exp(x.data)
    return _emit("exp", out, (x,), lambda g: (g * out,))


def log(x: Tensor) -> Tensor:
    return _emit("log", np.log(x.data), (x,), lambda g: (g / x.data,))


def sin(x: Tensor) -> Tensor:
    return _emit("sin", np.sin(x.data), (x,), lambda g: (g * np.cos(x.data),))


def sqrt(x: Tensor) -> Tensor:
    out = np.sqrt(x.data)
    return _emit("sqrt", out, (x,), lambda g: (g * 0.5 / out,))


def clip(x: Tensor, lo: float | None = None, hi: float | None = None) -> Tensor:
    """Clamp values; the gradient is zero wherever the clamp is active."""
    out = np.clip(x.data, lo, hi)
    inside = out == x.data
    return _emit("clip", out, (x,), lambda g: (g * inside,))


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    e = np.exp(x.data - x.data.max(axis=axis, keepdims=True))
    out = e / e.sum(axis=axis, keepdims=True)

    def backward(g):
        return (out * (g - (g * out).sum(axis=axis, keepdims=True)),)

    return _emit("softmax", out, (x,), backward)


def log_softmax(x: Tensor, axis: int = -1) -> Tensor:
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    out = shifted - np.log(np.exp(shifted).sum(axis=axis, keepdims=True))

    def backward(g):
        return (g - np.exp(out) * g.sum(axis=axis, keepdims=True),)

    return _emit("log_softmax", out, (x,), backward)


# ----------------------------------------------------------------- reductions


def sum_(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    out = np.asarray(x.data.sum(axis=axis, keepdims=keepdims))

    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, x.shape).copy(),)

    return _emit("sum", out, (x,), backward)


def mean(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    out = np.asarray(x.data.mean(axis=axis, keepdims=keepdims))
    count = x.data.size // max(out.size, 1)

    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g / count, x.shape).astype(x.dtype),)

    return _emit("mean", out, (x,), backward)


# ------------------------------------------------------------------ structure


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeError("matmul", a.shape, b.shape)
    out = a.data @ b.data

    def backward(g):
        ga = g @ np.swapaxes(b.data, -1, -2)
        gb = np.swapaxes(a.data, -1, -2) @ g
        return _unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape)

    return _emit("matmul", out, (a, b), backward)


def reshape(x: Tensor, shape) -> Tensor:
    try:
        out = x.data.reshape(shape)
    except ValueError:
        raise ShapeError("reshape", x.shape, detail=f"target {shape}") from None
    return _emit("reshape", out, (x,), lambda g: (g.reshape(x.shape),))


def transpose(x: Tensor, axes=None) -> Tensor:
    out = np.transpose(x.data, axes)
    inv = None if axes is None else np.argsort(axes)
    return _emit("transpose", out, (x,), lambda g: (np.transpose(g, inv),))


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    try:
        out = np.concatenate([t.data for t in tensors], axis=axis)
    except ValueError:
        raise ShapeError("concat", *[t.shape for t in tensors], detail=f"axis={axis}") from None
    bounds = np.cumsum([0] + [t.shape[axis] for t in tensors])

    def backward(g):
        return tuple(np.take(g, np.arange(lo, hi), axis=axis) for lo, hi in zip(bounds[:-1], bounds[1:]))

    return _emit("concat", out, tensors, backward)


def slice_(x: Tensor, index) -> Tensor:
    out = np.array(x.data[index])

    def backward(g):
        full = np.zeros_like(x.data)
        np.add.at(full, index, g)
        return (full,)

    return _emit("slice", out, (x,), backward)


# ------------------------------------------------------------ convolutional


def conv1d(x: Tensor, weight: Tensor, bias: Tensor | None = None, stride: int = 1, padding: int = 0) -> Tensor:
    """Cross-correlation of ``x[B, C_in, L]`` with ``weight[C_out, C_in, k]``."""
    if x.ndim != 3 or weight.ndim != 3:
        raise ShapeError("conv1d", x.shape, weight.shape, detail="expected [B,C,L] and [O,C,k]")
    B, C, L = x.shape
    O, Cw, k = weight.shape
    if C != Cw:
        raise ShapeError("conv1d", x.shape, weight.shape, detail="channel mismatch")
    if k > L + 2 * padding:
        raise ShapeError("conv1d", x.shape, weight.shape, detail="kernel longer than padded input")
    if bias is not None and bias.shape != (O,):
        raise ShapeError("conv1d", weight.shape, bias.shape, detail="bias must be [C_out]")
    L_out = (L + 2 * padding - k) // stride + 1
    xp = np.pad(x.data, ((0, 0), (0, 0), (padding, padding))) if padding else x.data
    span = stride * (L_out - 1) + 1
    # im2col: one GEMM over [B*L_out, C*k] patches
    win = sliding_window_view(xp, k, axis=2)[:, :, ::stride]
    cols = win.transpose(0, 2, 1, 3).reshape(B * L_out, C * k)
    wmat = weight.data.reshape(O, C * k)
    out = (cols @ wmat.T).reshape(B, L_out, O).transpose(0, 2, 1)
    if bias is not None:
        out = out + bias.data[None, :, None]
    out = np.ascontiguousarray(out)

    def backward(g):
        g2 = g.transpose(0, 2, 1).reshape(B * L_out, O)
        gw = (g2.T @ cols).reshape(O, C, k)
        gcols = (g2 @ wmat).reshape(B, L_out, C, k)
        gxp = np.zeros_like(xp)
        for j in range(k):
            gxp[:, :, j : j + span : stride] += gcols[:, :, :, j].transpose(0, 2, 1)
        gx = gxp[:, :, padding : padding + L] if padding else gxp
        gb = g.sum(axis=(0, 2)) if bias is not None else None
        return (gx, gw) + ((gb,) if bias is not None else ())

    inputs = (x, weight) + ((bias,) if bias is not None else ())
    return _emit("conv1d", out, inputs, backward)


def upsample_nearest1d(x: Tensor, scale: int = 2) -> Tensor:
    out = np.repeat(x.data, scale, axis=-1)

    def backward(g):
        return (g.reshape(*x.shape, scale).sum(axis=-1),)

    return _emit("upsample_nearest1d", out, (x,), backward)


def max_pool1d(x: Tensor, kernel: int, stride: int | None = None, padding: int = 0) -> Tensor:
    stride = stride or kernel
    B, C, L = x.shape
    if kernel > L + 2 * padding:
        raise ShapeError("max_pool1d", x.shape, detail=f"kernel {kernel} too long")
    xp = np.pad(x.data, ((0, 0), (0, 0), (padding, padding)), constant_values=-np.inf) if padding else x.data
    win = sliding_window_view(xp, kernel, axis=-1)[:, :, ::stride]
    arg = win.argmax(axis=-1)
    out = np.take_along_axis(win, arg[..., None], axis=-1)[..., 0]
    L_out = out.shape[-1]
    span = stride * (L_out - 1) + 1

    def backward(g):
        gxp = np.zeros(xp.shape, dtype=x.dtype)
        for j in range(kernel):
            gxp[:, :, j : j + span : stride] += np.where(arg == j, g, 0)
        return (gxp[:, :, padding : padding + L] if padding else gxp,)

    return _emit("max_pool1d", out, (x,), backward)


def avg_pool1d(x: Tensor, kernel: int | None = None, stride: int | None = None) -> Tensor:
    """Average pooling; ``kernel=None`` pools globally and drops the length axis."""
    if kernel is None:
        return mean(x, axis=-1)
    stride = stride or kernel
    B, C, L = x.shape
    if kernel > L:
        raise ShapeError("avg_pool1d", x.shape, detail=f"kernel {kernel} too long")
    win = sliding_window_view(x.data, kernel, axis=-1)[:, :, ::stride]
    out = win.mean(axis=-1)
    span = stride * (out.shape[-1] - 1) + 1

    def backward(g):
        gx = np.zeros_like(x.data)
        for j in range(kernel):
            gx[:, :, j : j + span : stride] += g / kernel
        return (gx,)

    return _emit("avg_pool1d", out, (x,), backward)


def batch_norm1d(x: Tensor, gamma: Tensor, beta: Tensor, running_mean: np.ndarray, running_var: np.ndarray,
                 mode: str = "train", momentum: float = 0.1, eps: float = 1e-5) -> Tensor:
    """Batch norm over ``[B, C]`` or ``[B, C, L]`` inputs.

    ``mode`` is ``"train"`` (batch statistics, running buffers updated in place),
    ``"frozen"`` (batch statistics, buffers untouched) or ``"eval"`` (running statistics).
    """
    if x.ndim not in (2, 3) or gamma.shape != (x.shape[1],):
        raise ShapeError("batch_norm1d", x.shape, gamma.shape)
    axes = (0,) if x.ndim == 2 else (0, 2)
    shape = (1, -1) if x.ndim == 2 else (1, -1, 1)
    g_ = gamma.data.reshape(shape)
    if mode == "eval":
        inv = 1.0 / np.sqrt(running_var.reshape(shape) + eps)
        xhat = (x.data - running_mean.reshape(shape)) * inv
        out = (g_ * xhat + beta.data.reshape(shape)).astype(x.dtype)

        def backward(g):
            return g * g_ * inv, (g * xhat).sum(axis=axes), g.sum(axis=axes)

        return _emit("batch_norm1d", out, (x, gamma, beta), backward)
    if mode not in ("train", "frozen"):
        raise ValueError(f"unknown batch norm mode {mode!r}")
    n = x.data.size // x.shape[1]
    mu = x.data.mean(axis=axes, keepdims=True)
    var = x.data.var(axis=axes, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (x.data - mu) * inv
    out = (g_ * xhat + beta.data.reshape(shape)).astype(x.dtype)
    if mode == "train":
        unbiased = var.reshape(-1) * n / max(n - 1, 1)
        running_mean *= 1 - momentum
        running_mean += momentum * mu.reshape(-1)
        running_var *= 1 - momentum
        running_var += momentum * unbiased

    def backward(g):
        gxhat = g * g_
        gx = inv * (gxhat - gxhat.mean(axis=axes, keepdims=True)
                    - xhat * (gxhat * xhat).mean(axis=axes, keepdims=True))
        return gx, (g * xhat).sum(axis=axes), g.sum(axis=axes)

    return _emit("batch_norm1d", out, (x, gamma, beta), backward)


def linear(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    """``x @ weight.T + bias`` with ``weight[out, in]``."""
    if x.shape[-1] != weight.shape[1]:
        raise ShapeError("linear", x.shape, weight.shape)
    out = matmul(x, transpose(weight))
    return out + bias if bias is not None else out


OPS: dict[str, Callable] = {
    "add": add,
    "sub": sub,
    "mul": mul,
    "scalar_mul": scalar_mul,
    "div": div,
    "matmul": matmul,
    "conv1d": conv1d,
    "upsample_nearest1d": upsample_nearest1d,
    "relu": relu,
    "sigmoid": sigmoid,
    "softmax": softmax,
    "log_softmax": log_softmax,
    "mean": mean,
    "sum": sum_,
    "max_pool1d": max_pool1d,
    "avg_pool1d": avg_pool1d,
    "batch_norm1d": batch_norm1d,
    "concat": lambda *ts, axis=0: concat(ts, axis=axis),
    "slice": slice_,
    "reshape": reshape,
    "transpose": transpose,
    "exp": exp,
    "log": log,
    "sin": sin,
    "sqrt": sqrt,
    "clip": clip,
}


def record_op(kind: str, inputs: Sequence, params: dict | None = None) -> Tensor:
    """Apply the operation named ``kind`` and record it on the active tape."""
    try:
        fn = OPS[kind]
    except KeyError:
        raise ValueError(f"unknown op kind {kind!r}; expected one of {sorted(OPS)}") from None
    return fn(*inputs, **(params or {}))


def backward(loss: Tensor):
    loss.backward()
