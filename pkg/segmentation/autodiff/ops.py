## segmentation/autodiff/ops.py

"""Differentiable operations on :class:`Tensor`.

Every op computes its forward value with numpy and, when a tape is active
and any input requires gradients, records a backward rule returning one
gradient per input (``None`` for inputs that are constants).
"""

from dataclasses import dataclass
from typing import Optional, Sequence, Tuple, Union

import numpy as np
from scipy.special import expit

from segmentation.autodiff.tensor import BackwardFn, Tensor, current_tape
from segmentation.exceptions import PreconditionError, ShapeError

Operand = Union[Tensor, np.ndarray, float, int]


def _as_tensor(value: Operand) -> Tensor:
    if isinstance(value, Tensor):
        return value
    return Tensor(value)


def _result(op: str, data: np.ndarray, inputs: Sequence[Tensor], fn: BackwardFn) -> Tensor:
    requires_grad = any(t.requires_grad for t in inputs)
    out = Tensor._from_op(data, requires_grad)
    tape = current_tape()
    if tape is not None and requires_grad:
        tape.record(op, inputs, out, fn)
    return out


def _unbroadcast(grad: np.ndarray, shape: Tuple[int, ...]) -> np.ndarray:
    """Sum a broadcast gradient back down to ``shape``."""
    if grad.shape == shape:
        return grad
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def _require_rank4(x: Tensor, context: str):
    if x.ndim != 4:
        raise ShapeError("rank", 4, x.ndim, context)


# ------------------ CONVOLUTION ------------------


@dataclass(frozen=True)
class ConvSpec:
    """Kernel plus stride, zero padding and dilation of a 2-D convolution."""

    kernel: Tensor
    stride: int = 1
    padding: int = 0
    dilation: int = 1

    def __post_init__(self):
        if self.kernel.ndim != 4:
            raise ShapeError("kernel rank", 4, self.kernel.ndim, "ConvSpec")
        if self.stride < 1:
            raise PreconditionError(f"stride must be positive, got {self.stride}")
        if self.padding < 0:
            raise PreconditionError(f"padding must be nonnegative, got {self.padding}")
        if self.dilation < 1:
            raise PreconditionError(f"dilation must be positive, got {self.dilation}")

    @property
    def out_channels(self) -> int:
        return self.kernel.shape[0]

    @property
    def in_channels(self) -> int:
        return self.kernel.shape[1]

    def output_size(self, height: int, width: int) -> Tuple[int, int]:
        kh, kw = self.kernel.shape[2:]
        out_h = (height + 2 * self.padding - self.dilation * (kh - 1) - 1) // self.stride + 1
        out_w = (width + 2 * self.padding - self.dilation * (kw - 1) - 1) // self.stride + 1
        return out_h, out_w


def _conv_windows(xp: np.ndarray, spec: ConvSpec, out_h: int, out_w: int) -> np.ndarray:
    """View of shape (N, C, out_h, out_w, kh, kw) over the padded input."""
    kh, kw = spec.kernel.shape[2:]
    d, s = spec.dilation, spec.stride
    span_h, span_w = d * (kh - 1) + 1, d * (kw - 1) + 1
    view = np.lib.stride_tricks.sliding_window_view(xp, (span_h, span_w), axis=(2, 3))
    return view[:, :, ::s, ::s, ::d, ::d][:, :, :out_h, :out_w]


def conv2d(input: Tensor, spec: ConvSpec, bias: Optional[Tensor] = None) -> Tensor:
    """Cross-correlation with zero padding, stride and dilation."""
    _require_rank4(input, "conv2d input")
    n, c, h, w = input.shape
    kernel = spec.kernel
    if c != spec.in_channels:
        raise ShapeError("in_channels", spec.in_channels, c, "conv2d")
    if bias is not None and bias.shape != (spec.out_channels,):
        raise ShapeError("bias length", (spec.out_channels,), bias.shape, "conv2d")

    out_h, out_w = spec.output_size(h, w)
    if out_h < 1:
        raise ShapeError("output height", ">= 1", out_h, "conv2d")
    if out_w < 1:
        raise ShapeError("output width", ">= 1", out_w, "conv2d")

    p, s, d = spec.padding, spec.stride, spec.dilation
    kh, kw = kernel.shape[2:]
    xp = np.pad(input.data, ((0, 0), (0, 0), (p, p), (p, p))) if p else input.data
    windows = _conv_windows(xp, spec, out_h, out_w)
    out = np.tensordot(windows, kernel.data, axes=([1, 4, 5], [1, 2, 3]))
    out = out.transpose(0, 3, 1, 2)
    if bias is not None:
        out = out + bias.data[None, :, None, None]

    def backward(g: np.ndarray):
        grad_kernel = np.tensordot(g, windows, axes=([0, 2, 3], [0, 2, 3]))
        grad_bias = g.sum(axis=(0, 2, 3)) if bias is not None else None
        grad_xp = np.zeros(xp.shape)
        for i in range(kh):
            for j in range(kw):
                contrib = np.tensordot(g, kernel.data[:, :, i, j], axes=([1], [0]))
                grad_xp[
                    :,
                    :,
                    i * d : i * d + s * (out_h - 1) + 1 : s,
                    j * d : j * d + s * (out_w - 1) + 1 : s,
                ] += contrib.transpose(0, 3, 1, 2)
        grad_input = grad_xp[:, :, p : p + h, p : p + w] if p else grad_xp
        return grad_input, grad_kernel, grad_bias

    inputs = (input, kernel, bias) if bias is not None else (input, kernel)
    return _result("conv2d", out, inputs, backward)


# ------------------ POOLING / RESAMPLING ------------------


def max_pool2d(input: Tensor) -> Tensor:
    """2x2 max pooling with stride 2; ties go to the first cell in row-major order."""
    _require_rank4(input, "max_pool2d input")
    n, c, h, w = input.shape
    if h % 2:
        raise ShapeError("height", "even", h, "max_pool2d")
    if w % 2:
        raise ShapeError("width", "even", w, "max_pool2d")

    blocks = (
        input.data.reshape(n, c, h // 2, 2, w // 2, 2)
        .transpose(0, 1, 2, 4, 3, 5)
        .reshape(n, c, h // 2, w // 2, 4)
    )
    winner = blocks.argmax(axis=-1)[..., None]
    out = np.take_along_axis(blocks, winner, axis=-1)[..., 0]

    def backward(g: np.ndarray):
        grad_blocks = np.zeros(blocks.shape)
        np.put_along_axis(grad_blocks, winner, g[..., None], axis=-1)
        grad = (
            grad_blocks.reshape(n, c, h // 2, w // 2, 2, 2)
            .transpose(0, 1, 2, 4, 3, 5)
            .reshape(n, c, h, w)
        )
        return (grad,)

    return _result("max_pool2d", out, (input,), backward)


def bilinear_weights(in_size: int, out_size: int) -> np.ndarray:
    """(out_size, in_size) align-corners interpolation matrix."""
    if out_size < 1:
        raise PreconditionError(f"target size must be positive, got {out_size}")
    if in_size < 1:
        raise PreconditionError(f"source size must be positive, got {in_size}")

    weights = np.zeros((out_size, in_size))
    if in_size == 1 or out_size == 1:
        weights[:, 0] = 1.0
        return weights

    rows = np.arange(out_size)
    src = rows * (in_size - 1) / (out_size - 1)
    lo = np.minimum(np.floor(src).astype(int), in_size - 2)
    frac = src - lo
    np.add.at(weights, (rows, lo), 1.0 - frac)
    np.add.at(weights, (rows, lo + 1), frac)
    return weights


def upsample_bilinear(input: Tensor, out_h: int, out_w: int) -> Tensor:
    """Align-corners bilinear resampling of the two spatial axes."""
    _require_rank4(input, "upsample_bilinear input")
    if out_h < 1 or out_w < 1:
        raise PreconditionError(f"target size must be positive, got {(out_h, out_w)}")

    h, w = input.shape[2:]
    if (h, w) == (out_h, out_w):
        return _result("upsample_bilinear", input.data.copy(), (input,), lambda g: (g,))

    rows = bilinear_weights(h, out_h)
    cols = bilinear_weights(w, out_w)
    out = rows @ input.data @ cols.T

    def backward(g: np.ndarray):
        return (rows.T @ g @ cols,)

    return _result("upsample_bilinear", out, (input,), backward)


# ------------------ CHANNEL PLUMBING ------------------


def concat_channels(a: Tensor, b: Tensor) -> Tensor:
    """Concatenate along channels, ``a`` first."""
    _require_rank4(a, "concat_channels")
    _require_rank4(b, "concat_channels")
    for axis, dimension in ((0, "batch"), (2, "height"), (3, "width")):
        if a.shape[axis] != b.shape[axis]:
            raise ShapeError(dimension, a.shape[axis], b.shape[axis], "concat_channels")

    split = a.shape[1]
    out = np.concatenate([a.data, b.data], axis=1)

    def backward(g: np.ndarray):
        return g[:, :split], g[:, split:]

    return _result("concat_channels", out, (a, b), backward)


def slice_channels(input: Tensor, start: int, stop: int) -> Tensor:
    _require_rank4(input, "slice_channels")
    channels = input.shape[1]
    if not 0 <= start < stop <= channels:
        raise ShapeError("channel range", f"within [0, {channels}]", (start, stop), "slice_channels")

    out = input.data[:, start:stop].copy()

    def backward(g: np.ndarray):
        grad = np.zeros(input.shape)
        grad[:, start:stop] = g
        return (grad,)

    return _result("slice_channels", out, (input,), backward)


# ------------------ ELEMENTWISE ------------------


def relu(input: Tensor) -> Tensor:
    active = input.data > 0
    out = np.where(active, input.data, 0.0)
    return _result("relu", out, (input,), lambda g: (g * active,))


def sigmoid(input: Tensor) -> Tensor:
    out = expit(input.data)
    return _result("sigmoid", out, (input,), lambda g: (g * out * (1.0 - out),))


def log(input: Tensor) -> Tensor:
    out = np.log(input.data)
    return _result("log", out, (input,), lambda g: (g / input.data,))


def clamp(input: Tensor, low: float, high: float) -> Tensor:
    """Clip to [low, high]; gradient passes only where the input is in range."""
    inside = (input.data >= low) & (input.data <= high)
    out = np.clip(input.data, low, high)
    return _result("clamp", out, (input,), lambda g: (g * inside,))


def scale(input: Tensor, factor: float) -> Tensor:
    factor = float(factor)
    return _result("scale", input.data * factor, (input,), lambda g: (g * factor,))


def add(a: Operand, b: Operand) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    out = a.data + b.data

    def backward(g: np.ndarray):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _result("add", out, (a, b), backward)


def sub(a: Operand, b: Operand) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    out = a.data - b.data

    def backward(g: np.ndarray):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return _result("sub", out, (a, b), backward)


def mul(a: Operand, b: Operand) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    out = a.data * b.data

    def backward(g: np.ndarray):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

    return _result("mul", out, (a, b), backward)


def sum_all(input: Tensor) -> Tensor:
    out = np.array(input.data.sum())
    return _result("sum", out, (input,), lambda g: (np.full(input.shape, np.asarray(g).item()),))
