"""Reverse-mode automatic differentiation over numpy arrays.

Operations are recorded on the active :class:`Tape` whenever at least one
input requires a gradient.  :meth:`Tape.backward` replays the recorded entries
in reverse order; the tape itself is never mutated by a backward pass, so it
can be replayed any number of times.

Everything is float64.
"""

from __future__ import annotations

import itertools
import logging
import math
from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

logger = logging.getLogger(__name__)

_ids = itertools.count()
_tape_stack: list["Tape"] = []


class ShapeError(ValueError):
    """Inputs of a primitive have incompatible shapes."""


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "name", "node_id")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        self.data = np.array(data, dtype=np.float64)
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self.name = name
        self.node_id = next(_ids)

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
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float(self.data)

    def __repr__(self) -> str:
        label = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}{label}, requires_grad={self.requires_grad})"

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
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return getitem(self, index)


@dataclass
class TapeEntry:
    op: str
    inputs: tuple[Tensor, ...]
    output: Tensor
    backward: Callable[[np.ndarray], Sequence[np.ndarray | None]]


@dataclass
class Tape:
    """Ordered record of primitive applications.

    Use as a context manager; operations executed inside the block are
    recorded on this tape.
    """

    entries: list[TapeEntry] = field(default_factory=list)

    def __enter__(self) -> "Tape":
        _tape_stack.append(self)
        return self

    def __exit__(self, *exc) -> None:
        _tape_stack.remove(self)

    def __len__(self) -> int:
        return len(self.entries)

    def backward(self, loss: Tensor, params: Iterable[Tensor] = ()) -> list[np.ndarray]:
        """Accumulate d(loss)/d(param) for each of ``params``.

        Each parameter's ``.grad`` is overwritten; parameters the loss does not
        depend on get zeros.  Returns the gradients in ``params`` order.
        """
        if loss.size != 1:
            raise ShapeError(f"backward: loss must be scalar, got shape {loss.shape}")
        grads: dict[int, np.ndarray] = {loss.node_id: np.ones_like(loss.data)}
        for entry in reversed(self.entries):
            g = grads.get(entry.output.node_id)
            if g is None:
                continue
            input_grads = entry.backward(g)
            for inp, gi in zip(entry.inputs, input_grads):
                if gi is None or not inp.requires_grad:
                    continue
                if gi.shape != inp.shape:
                    raise ShapeError(
                        f"{entry.op}: gradient shape {gi.shape} does not match input {inp.shape}"
                    )
                prev = grads.get(inp.node_id)
                grads[inp.node_id] = gi if prev is None else prev + gi
        out = []
        for p in params:
            g = grads.get(p.node_id)
            p.grad = np.zeros_like(p.data) if g is None else np.array(g)
            out.append(p.grad)
        return out


def active_tape() -> Tape | None:
    return _tape_stack[-1] if _tape_stack else None


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _record(op: str, inputs: tuple[Tensor, ...], out_data: np.ndarray, backward) -> Tensor:
    out = Tensor.__new__(Tensor)
    out.data = out_data if out_data.dtype == np.float64 else out_data.astype(np.float64)
    out.requires_grad = False
    out.grad = None
    out.name = None
    out.node_id = next(_ids)
    tape = active_tape()
    if tape is not None and any(t.requires_grad for t in inputs):
        out.requires_grad = True
        tape.entries.append(TapeEntry(op, inputs, out, backward))
    return out


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


def _broadcast_shape(op: str, a: Tensor, b: Tensor) -> tuple[int, ...]:
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"{op}: cannot broadcast shapes {a.shape} and {b.shape}") from None


# ---------------------------------------------------------------------------
# elementwise
# ---------------------------------------------------------------------------


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape("add", a, b)

    def backward(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _record("add", (a, b), a.data + b.data, backward)


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape("sub", a, b)

    def backward(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return _record("sub", (a, b), a.data - b.data, backward)


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape("mul", a, b)

    def backward(g):
        ga = _unbroadcast(g * b.data, a.shape) if a.requires_grad else None
        gb = _unbroadcast(g * a.data, b.shape) if b.requires_grad else None
        return ga, gb

    return _record("mul", (a, b), a.data * b.data, backward)


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape("div", a, b)
    out = a.data / b.data

    def backward(g):
        ga = _unbroadcast(g / b.data, a.shape) if a.requires_grad else None
        gb = _unbroadcast(-g * out / b.data, b.shape) if b.requires_grad else None
        return ga, gb

    return _record("div", (a, b), out, backward)


def safe_reciprocal(x) -> Tensor:
    """1/x where x > 0, else 0 (with zero gradient)."""
    x = as_tensor(x)
    live = x.data > 0
    out = np.where(live, 1.0 / np.where(live, x.data, 1.0), 0.0)

    def backward(g):
        return (np.where(live, -g * out * out, 0.0),)

    return _record("safe_reciprocal", (x,), out, backward)


def square(x) -> Tensor:
    x = as_tensor(x)

    def backward(g):
        return (2.0 * x.data * g,)

    return _record("square", (x,), x.data * x.data, backward)


def absolute(x) -> Tensor:
    x = as_tensor(x)

    def backward(g):
        # np.sign(0) == 0: subgradient 0 at the kink
        return (np.sign(x.data) * g,)

    return _record("abs", (x,), np.abs(x.data), backward)


def relu(x) -> Tensor:
    x = as_tensor(x)
    mask = x.data > 0

    def backward(g):
        return (g * mask,)

    return _record("relu", (x,), x.data * mask, backward)


def maximum(x, c: float) -> Tensor:
    """Elementwise max(x, c) for a constant c; subgradient 0 where x == c."""
    x = as_tensor(x)
    mask = x.data > c

    def backward(g):
        return (g * mask,)

    return _record("maximum", (x,), np.where(mask, x.data, c), backward)


def clip(x, lo: float, hi: float) -> Tensor:
    x = as_tensor(x)
    mask = (x.data >= lo) & (x.data <= hi)

    def backward(g):
        return (g * mask,)

    return _record("clip", (x,), np.clip(x.data, lo, hi), backward)


def _round_half_away(z: np.ndarray) -> np.ndarray:
    return np.sign(z) * np.floor(np.abs(z) + 0.5)


def round_ste(x) -> Tensor:
    """Round half away from zero; the backward pass is the identity."""
    x = as_tensor(x)

    def backward(g):
        return (g,)

    return _record("round_ste", (x,), _round_half_away(x.data), backward)


def identity(x) -> Tensor:
    x = as_tensor(x)

    def backward(g):
        return (g,)

    return _record("identity", (x,), x.data.copy(), backward)


# ---------------------------------------------------------------------------
# shape
# ---------------------------------------------------------------------------


def reshape(x, shape: Sequence[int]) -> Tensor:
    x = as_tensor(x)
    try:
        out = x.data.reshape(shape)
    except ValueError:
        raise ShapeError(f"reshape: cannot reshape {x.shape} into {tuple(shape)}") from None

    def backward(g):
        return (g.reshape(x.shape),)

    return _record("reshape", (x,), out, backward)


def transpose(x, axes: Sequence[int]) -> Tensor:
    x = as_tensor(x)
    axes = tuple(axes)
    inverse = tuple(np.argsort(axes))

    def backward(g):
        return (np.transpose(g, inverse),)

    return _record("transpose", (x,), np.transpose(x.data, axes), backward)


def concat(tensors: Sequence[Tensor], axis: int = 1) -> Tensor:
    tensors = tuple(as_tensor(t) for t in tensors)
    try:
        out = np.concatenate([t.data for t in tensors], axis=axis)
    except ValueError:
        shapes = [t.shape for t in tensors]
        raise ShapeError(f"concat: incompatible shapes {shapes} along axis {axis}") from None
    bounds = np.cumsum([0] + [t.shape[axis] for t in tensors])

    def backward(g):
        return tuple(
            np.take(g, np.arange(lo, hi), axis=axis) for lo, hi in zip(bounds[:-1], bounds[1:])
        )

    return _record("concat", tensors, out, backward)


def _is_basic_index(index) -> bool:
    items = index if isinstance(index, tuple) else (index,)
    return all(isinstance(i, (slice, int, type(Ellipsis))) or i is None for i in items)


def getitem(x, index) -> Tensor:
    x = as_tensor(x)
    out = x.data[index]
    basic = _is_basic_index(index)

    def backward(g):
        gx = np.zeros_like(x.data)
        if basic:
            gx[index] += g
        else:
            np.add.at(gx, index, g)
        return (gx,)

    return _record("getitem", (x,), np.array(out), backward)


def pad_edge(x, pad_h: int, pad_w: int) -> Tensor:
    """Pad the last two axes at the bottom/right by edge replication."""
    x = as_tensor(x)
    h, w = x.shape[-2:]
    rows = np.minimum(np.arange(h + pad_h), h - 1)
    cols = np.minimum(np.arange(w + pad_w), w - 1)
    out = x.data[..., rows[:, None], cols[None, :]]

    def backward(g):
        g_rows = np.zeros(g.shape[:-2] + (h, w + pad_w))
        np.add.at(g_rows, (..., rows, slice(None)), g)
        gx = np.zeros(x.shape)
        np.add.at(gx, (..., cols), g_rows)
        return (gx,)

    return _record("pad_edge", (x,), out, backward)


# ---------------------------------------------------------------------------
# reductions
# ---------------------------------------------------------------------------


def _norm_axes(axis, ndim: int) -> tuple[int, ...]:
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(a % ndim for a in axis)


def sum(x, axis=None, keepdims: bool = False) -> Tensor:  # noqa: A001
    x = as_tensor(x)
    axes = _norm_axes(axis, x.ndim)
    out = x.data.sum(axis=axes, keepdims=keepdims)

    def backward(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g, x.shape).copy(),)

    return _record("sum", (x,), np.asarray(out), backward)


def mean(x, axis=None, keepdims: bool = False) -> Tensor:
    x = as_tensor(x)
    axes = _norm_axes(axis, x.ndim)
    count = math.prod(x.shape[a] for a in axes)
    out = x.data.sum(axis=axes, keepdims=keepdims) / max(count, 1)

    def backward(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g / max(count, 1), x.shape).copy(),)

    return _record("mean", (x,), np.asarray(out), backward)


# ---------------------------------------------------------------------------
# linear algebra
# ---------------------------------------------------------------------------


def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: incompatible shapes {a.shape} and {b.shape}")
    try:
        np.broadcast_shapes(a.shape[:-2], b.shape[:-2])
    except ValueError:
        raise ShapeError(f"matmul: batch dims {a.shape[:-2]} and {b.shape[:-2]} differ") from None

    def backward(g):
        ga = _unbroadcast(g @ np.swapaxes(b.data, -1, -2), a.shape) if a.requires_grad else None
        gb = _unbroadcast(np.swapaxes(a.data, -1, -2) @ g, b.shape) if b.requires_grad else None
        return ga, gb

    return _record("matmul", (a, b), a.data @ b.data, backward)


def sandwich(x, left: np.ndarray, right: np.ndarray) -> Tensor:
    """``left @ x @ right`` over the last two axes, with constant matrices."""
    x = as_tensor(x)
    if x.ndim < 2 or left.shape[1] != x.shape[-2] or right.shape[0] != x.shape[-1]:
        raise ShapeError(
            f"sandwich: {left.shape} @ {x.shape[-2:]} @ {right.shape} is not defined"
        )

    def backward(g):
        return (left.T @ g @ right.T,)

    return _record("sandwich", (x,), left @ x.data @ right, backward)


def dense(x, weight, bias=None) -> Tensor:
    """Affine map ``x @ weight + bias`` for x of shape (batch, in)."""
    x, weight = as_tensor(x), as_tensor(weight)
    if x.ndim != 2 or weight.ndim != 2 or x.shape[1] != weight.shape[0]:
        raise ShapeError(f"dense: input {x.shape} does not match weight {weight.shape}")
    inputs = (x, weight) if bias is None else (x, weight, as_tensor(bias))
    out = x.data @ weight.data
    if bias is not None:
        out = out + inputs[2].data

    def backward(g):
        gx = g @ weight.data.T if x.requires_grad else None
        gw = x.data.T @ g if weight.requires_grad else None
        if bias is None:
            return gx, gw
        return gx, gw, g.sum(axis=0)

    return _record("dense", inputs, out, backward)


def _bilinear_matrix(n: int) -> np.ndarray:
    # sample-centre alignment: out[2i] = .75 x[i] + .25 x[i-1], out[2i+1] = .75 x[i] + .25 x[i+1]
    m = np.zeros((2 * n, n))
    for i in range(n):
        m[2 * i, i] += 0.75
        m[2 * i, max(i - 1, 0)] += 0.25
        m[2 * i + 1, i] += 0.75
        m[2 * i + 1, min(i + 1, n - 1)] += 0.25
    return m


def upsample2x(x) -> Tensor:
    """Bilinear 2x upsampling of the last two axes, edges replicated."""
    x = as_tensor(x)
    h, w = x.shape[-2:]
    return sandwich(x, _bilinear_matrix(h), _bilinear_matrix(w).T)


# ---------------------------------------------------------------------------
# convolution (NCHW)
# ---------------------------------------------------------------------------


def _out_size(n: int, k: int, stride: int, padding: int) -> int:
    return (n + 2 * padding - k) // stride + 1


def _im2col(x: np.ndarray, k: int, stride: int, padding: int) -> tuple[np.ndarray, int, int]:
    """Rows are output pixels, columns ordered (ki, kj, channel)."""
    n, c, h, w = x.shape
    xh = x.transpose(0, 2, 3, 1)
    xh = np.pad(xh, ((0, 0), (padding, padding), (padding, padding), (0, 0))) if padding else np.ascontiguousarray(xh)
    ho, wo = _out_size(h, k, stride, padding), _out_size(w, k, stride, padding)
    win = sliding_window_view(xh, (k, k), axis=(1, 2))[:, ::stride, ::stride][:, :ho, :wo]
    cols = win.transpose(0, 1, 2, 4, 5, 3).reshape(n * ho * wo, k * k * c)
    return cols, ho, wo


def _flat_kernel(w: np.ndarray) -> np.ndarray:
    return w.transpose(0, 2, 3, 1).reshape(w.shape[0], -1)


def _conv_forward(x: np.ndarray, w: np.ndarray, stride: int, padding: int, keep_cols: bool = False):
    o, c, k, _ = w.shape
    cols, ho, wo = _im2col(x, k, stride, padding)
    out = cols @ _flat_kernel(w).T
    out = np.ascontiguousarray(out.reshape(x.shape[0], ho, wo, o).transpose(0, 3, 1, 2))
    return (out, cols) if keep_cols else out


def _conv_input_grad(
    g: np.ndarray, w: np.ndarray, x_shape: tuple[int, ...], stride: int, padding: int
) -> np.ndarray:
    # full correlation of the stride-dilated gradient with the flipped kernel
    n, c, h, wd = x_shape
    k = w.shape[2]
    ho, wo = g.shape[2:]
    hp, wp = h + 2 * padding, wd + 2 * padding
    if stride > 1:
        return _conv_input_grad_scatter(g, w, x_shape, stride, padding)
    gd = np.pad(g, ((0, 0), (0, 0), (0, hp - k + 1 - ho), (0, wp - k + 1 - wo)))
    w_flip = np.ascontiguousarray(w.transpose(1, 0, 2, 3)[:, :, ::-1, ::-1])
    dxp = _conv_forward(gd, w_flip, 1, k - 1)
    return dxp[:, :, padding : padding + h, padding : padding + wd]


def _conv_input_grad_scatter(
    g: np.ndarray, w: np.ndarray, x_shape: tuple[int, ...], stride: int, padding: int
) -> np.ndarray:
    n, c, h, wd = x_shape
    o, _, k, _ = w.shape
    ho, wo = g.shape[2:]
    dcols = (g.transpose(0, 2, 3, 1).reshape(-1, o) @ _flat_kernel(w)).reshape(n, ho, wo, k, k, c)
    dxp = np.zeros((n, c, h + 2 * padding, wd + 2 * padding))
    for i in range(k):
        for j in range(k):
            dxp[:, :, i : i + stride * ho : stride, j : j + stride * wo : stride] += dcols[
                :, :, :, i, j, :
            ].transpose(0, 3, 1, 2)
    return dxp[:, :, padding : padding + h, padding : padding + wd]


def _conv_weight_grad(cols: np.ndarray, g: np.ndarray, w_shape: tuple[int, ...]) -> np.ndarray:
    o, c, k, _ = w_shape
    g2 = g.transpose(0, 2, 3, 1).reshape(-1, o)
    return (g2.T @ cols).reshape(o, k, k, c).transpose(0, 3, 1, 2)


def _check_conv(op: str, x: Tensor, w: Tensor, channel_axis: int) -> None:
    if x.ndim != 4 or w.ndim != 4 or w.shape[2] != w.shape[3]:
        raise ShapeError(f"{op}: expected NCHW input and square 4-D kernel, got {x.shape}, {w.shape}")
    if x.shape[1] != w.shape[channel_axis]:
        raise ShapeError(
            f"{op}: input has {x.shape[1]} channels but kernel expects {w.shape[channel_axis]}"
        )


def conv2d(x, weight, bias=None, stride: int = 1, padding: int = 0) -> Tensor:
    """Cross-correlation with a (out, in, k, k) kernel and zero padding."""
    x, weight = as_tensor(x), as_tensor(weight)
    _check_conv("conv2d", x, weight, 1)
    k = weight.shape[2]
    if _out_size(x.shape[2], k, stride, padding) < 1 or _out_size(x.shape[3], k, stride, padding) < 1:
        raise ShapeError(f"conv2d: kernel {k} too large for input {x.shape[2:]} with padding {padding}")
    keep = weight.requires_grad and active_tape() is not None
    out = _conv_forward(x.data, weight.data, stride, padding, keep_cols=keep)
    cols = None
    if keep:
        out, cols = out
    inputs = (x, weight)
    if bias is not None:
        bias = as_tensor(bias)
        inputs = (x, weight, bias)
        out += bias.data.reshape(1, -1, 1, 1)

    def backward(g):
        gx = _conv_input_grad(g, weight.data, x.shape, stride, padding) if x.requires_grad else None
        gw = _conv_weight_grad(cols, g, weight.shape) if cols is not None else None
        if bias is None:
            return gx, gw
        return gx, gw, g.sum(axis=(0, 2, 3))

    return _record("conv2d", inputs, out, backward)


def conv_transpose2d(
    x, weight, bias=None, stride: int = 2, padding: int = 1, output_padding: int = 1
) -> Tensor:
    """Adjoint of :func:`conv2d` with respect to its input.

    ``weight`` has shape (in, out, k, k), i.e. the same array that, used in
    ``conv2d``, maps the ``out``-channel result back to ``in`` channels.  With
    the defaults (k=3) the spatial size exactly doubles.
    """
    x, weight = as_tensor(x), as_tensor(weight)
    _check_conv("conv_transpose2d", x, weight, 0)
    n, _, h, w = x.shape
    k = weight.shape[2]
    ho = (h - 1) * stride - 2 * padding + k + output_padding
    wo = (w - 1) * stride - 2 * padding + k + output_padding
    out_shape = (n, weight.shape[1], ho, wo)
    out = _conv_input_grad(x.data, weight.data, out_shape, stride, padding)
    out = np.ascontiguousarray(out)
    inputs = (x, weight)
    if bias is not None:
        bias = as_tensor(bias)
        inputs = (x, weight, bias)
        out += bias.data.reshape(1, -1, 1, 1)

    def backward(g):
        gx = _conv_forward(g, weight.data, stride, padding) if x.requires_grad else None
        gw = None
        if weight.requires_grad:
            gw = _conv_weight_grad(_im2col(g, k, stride, padding)[0], x.data, weight.shape)
        if bias is None:
            return gx, gw
        return gx, gw, g.sum(axis=(0, 2, 3))

    return _record("conv_transpose2d", inputs, out, backward)


def global_avg_pool(x) -> Tensor:
    x = as_tensor(x)
    if x.ndim != 4:
        raise ShapeError(f"global_avg_pool: expected NCHW input, got {x.shape}")
    return mean(x, axis=(2, 3))


# ---------------------------------------------------------------------------
# loss
# ---------------------------------------------------------------------------


def log_softmax(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=1, keepdims=True))


def softmax_cross_entropy(logits, labels) -> Tensor:
    """Mean negative log-likelihood of integer ``labels`` under softmax(logits)."""
    logits = as_tensor(logits)
    labels = np.asarray(labels, dtype=np.int64)
    if logits.ndim != 2 or labels.shape != (logits.shape[0],):
        raise ShapeError(
            f"softmax_cross_entropy: logits {logits.shape} incompatible with labels {labels.shape}"
        )
    n = logits.shape[0]
    logp = log_softmax(logits.data)
    loss = -logp[np.arange(n), labels].mean() if n else 0.0

    def backward(g):
        p = np.exp(logp)
        p[np.arange(n), labels] -= 1.0
        return (g * p / max(n, 1),)

    return _record("softmax_cross_entropy", (logits,), np.asarray(loss), backward)


# ---------------------------------------------------------------------------
# optimizer
# ---------------------------------------------------------------------------


@dataclass
class AdamState:
    m: list[np.ndarray]
    v: list[np.ndarray]
    step: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    warnings: list[str] = field(default_factory=list)

    @classmethod
    def fresh(cls, params: Sequence[Tensor], **kw) -> "AdamState":
        return cls([np.zeros(p.shape) for p in params], [np.zeros(p.shape) for p in params], **kw)


def adam_step(
    params: Sequence[Tensor], grads: Sequence[np.ndarray], state: AdamState, lr: float
) -> AdamState:
    """One bias-corrected Adam update, applied in place to ``params``.

    A parameter whose gradient has a non-finite entry is left untouched (its
    moments too); the step counter still advances.
    """
    if lr <= 0:
        raise ValueError(f"adam_step: learning rate must be positive, got {lr}")
    if not (len(params) == len(grads) == len(state.m)):
        raise ShapeError("adam_step: params, grads and state have different lengths")
    state.step += 1
    t = state.step
    b1, b2 = state.beta1, state.beta2
    for i, (p, g) in enumerate(zip(params, grads)):
        if g.shape != p.shape or state.m[i].shape != p.shape:
            raise ShapeError(f"adam_step: parameter {i} shape {p.shape} vs gradient {g.shape}")
        if not np.all(np.isfinite(g)):
            msg = f"step {t}: non-finite gradient for parameter {p.name or i}; update skipped"
            state.warnings.append(msg)
            logger.warning(msg)
            continue
        state.m[i] = b1 * state.m[i] + (1 - b1) * g
        state.v[i] = b2 * state.v[i] + (1 - b2) * g * g
        m_hat = state.m[i] / (1 - b1**t)
        v_hat = state.v[i] / (1 - b2**t)
        p.data -= lr * m_hat / (np.sqrt(v_hat) + state.eps)
    return state


class Adam:
    """Adam bound to a fixed parameter list."""

    def __init__(self, params: Sequence[Tensor], lr: float = 1e-3, **kw):
        self.params = list(params)
        self.lr = lr
        self.state = AdamState.fresh(self.params, **kw)

    def step(self, lr: float | None = None, grads: Sequence[np.ndarray] | None = None) -> None:
        if grads is None:
            grads = [p.grad if p.grad is not None else np.zeros(p.shape) for p in self.params]
        adam_step(self.params, grads, self.state, self.lr if lr is None else lr)


def clip_grad_norm(grads: Sequence[np.ndarray], max_norm: float) -> tuple[list[np.ndarray], float]:
    """Scale ``grads`` jointly so their global l2 norm is at most ``max_norm``."""
    total = math.sqrt(float(np.sum([np.sum(g * g) for g in grads])))
    if not math.isfinite(total) or total <= max_norm:
        return list(grads), total
    scale = max_norm / total
    return [g * scale for g in grads], total
