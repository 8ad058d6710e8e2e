"""Rank-4 tensor layers with hand-written reverse-mode gradients.

Tensors are plain ``numpy.ndarray`` objects laid out as
``(batch, channels, rows, cols)``.  Every layer has a forward function and a
matching ``*_backward`` function that maps the gradient of a scalar objective
with respect to the layer output to gradients with respect to its inputs and
parameters.

All arithmetic is carried out in float64, whatever the storage dtype of the
inputs, so that reductions stay stable and finite-difference checks are
meaningful.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Iterable, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from scipy.special import expit

from .exceptions import ConfigError, CorruptionError, ShapeError

SUPPORTED_FACTORS = (1, 2, 4, 8, 16)


@dataclass
class ConvParams:
    """Weights ``(out_c, in_c, kh, kw)`` and a bias of length ``out_c``."""

    weight: np.ndarray
    bias: np.ndarray

    def __post_init__(self):
        if self.weight.ndim != 4:
            raise ShapeError(f"weight must be rank 4, got shape {self.weight.shape}")
        if self.bias.shape != (self.weight.shape[0],):
            raise ShapeError(
                f"bias shape {self.bias.shape} does not match {self.weight.shape[0]} output channels"
            )

    @property
    def out_channels(self) -> int:
        return self.weight.shape[0]

    @property
    def in_channels(self) -> int:
        return self.weight.shape[1]

    @property
    def kernel_size(self) -> tuple[int, int]:
        return self.weight.shape[2], self.weight.shape[3]


def check_tensor4(x: np.ndarray, name: str = "input") -> np.ndarray:
    """Return ``x`` as a float64 rank-4 array or raise :class:`ShapeError`."""
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 4:
        raise ShapeError(f"{name} must be rank 4 (n, c, h, w), got shape {x.shape}")
    if min(x.shape) <= 0:
        raise ShapeError(f"{name} has a non-positive dimension: {x.shape}")
    return x


def _check_conv(x: np.ndarray, params: ConvParams) -> None:
    if x.shape[1] != params.in_channels:
        raise ShapeError(
            f"input has {x.shape[1]} channels but the kernel expects {params.in_channels}"
        )


def _pad(x: np.ndarray, p: int) -> np.ndarray:
    if p == 0:
        return x
    return np.pad(x, ((0, 0), (0, 0), (p, p), (p, p)))


# -- convolution -------------------------------------------------------------


def conv2d(x: np.ndarray, params: ConvParams, padding: int | None = None) -> np.ndarray:
    """Stride-1 cross-correlation with zero padding.

    ``padding`` defaults to ``(k - 1) // 2``, which preserves the spatial size
    for the 1x1 and 3x3 kernels used by the network.
    """
    x = check_tensor4(x)
    _check_conv(x, params)
    kh, kw = params.kernel_size
    if padding is None:
        padding = (kh - 1) // 2
    w = np.asarray(params.weight, dtype=np.float64)
    b = np.asarray(params.bias, dtype=np.float64)
    if kh == kw == 1 and padding == 0:
        out = np.tensordot(x, w[:, :, 0, 0], axes=([1], [1]))
    else:
        win = sliding_window_view(_pad(x, padding), (kh, kw), axis=(2, 3))
        out = np.tensordot(win, w, axes=([1, 4, 5], [1, 2, 3]))
    return np.ascontiguousarray(out.transpose(0, 3, 1, 2)) + b[None, :, None, None]


def conv2d_backward(
    x: np.ndarray, params: ConvParams, grad_out: np.ndarray, padding: int | None = None
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Gradients of ``sum(grad_out * conv2d(x))`` w.r.t. input, weight and bias."""
    x = check_tensor4(x)
    _check_conv(x, params)
    grad_out = check_tensor4(grad_out, "grad_out")
    kh, kw = params.kernel_size
    if padding is None:
        padding = (kh - 1) // 2
    expected = (x.shape[0], params.out_channels,
                x.shape[2] + 2 * padding - kh + 1, x.shape[3] + 2 * padding - kw + 1)
    if grad_out.shape != expected:
        raise ShapeError(f"grad_out shape {grad_out.shape} != forward output shape {expected}")
    w = np.asarray(params.weight, dtype=np.float64)

    grad_b = grad_out.sum(axis=(0, 2, 3))
    if kh == kw == 1 and padding == 0:
        grad_w = np.tensordot(grad_out, x, axes=([0, 2, 3], [0, 2, 3]))[:, :, None, None]
        grad_x = np.tensordot(grad_out, w[:, :, 0, 0], axes=([1], [0])).transpose(0, 3, 1, 2)
        return np.ascontiguousarray(grad_x), grad_w, grad_b

    win = sliding_window_view(_pad(x, padding), (kh, kw), axis=(2, 3))
    grad_w = np.tensordot(grad_out, win, axes=([0, 2, 3], [0, 2, 3]))
    # input gradient is a full correlation with the flipped, transposed kernel
    flipped = w[:, :, ::-1, ::-1].transpose(1, 0, 2, 3)
    gwin = sliding_window_view(_pad(grad_out, kh - 1 - padding), (kh, kw), axis=(2, 3))
    grad_x = np.tensordot(gwin, flipped, axes=([1, 4, 5], [1, 2, 3])).transpose(0, 3, 1, 2)
    return np.ascontiguousarray(grad_x), grad_w, grad_b


# -- pooling -----------------------------------------------------------------


def maxpool2x2(x: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """2x2 stride-2 max pooling.

    Returns the pooled tensor and, per output cell, the flat index into the
    source ``(h, w)`` plane of the selected element.  Ties resolve to the first
    maximum in row-major window order.
    """
    x = check_tensor4(x)
    n, c, h, w = x.shape
    if h % 2 or w % 2:
        raise ShapeError(f"max pooling needs even spatial dims, got {h}x{w}")
    win = x.reshape(n, c, h // 2, 2, w // 2, 2).transpose(0, 1, 2, 4, 3, 5).reshape(n, c, h // 2, w // 2, 4)
    arg = win.argmax(axis=-1)
    out = np.take_along_axis(win, arg[..., None], axis=-1)[..., 0]
    rows = 2 * np.arange(h // 2)[:, None] + arg // 2
    cols = 2 * np.arange(w // 2)[None, :] + arg % 2
    return out, (rows * w + cols).astype(np.int64)


def max_unpool2x2(x: np.ndarray, indices: np.ndarray, out_shape: Sequence[int]) -> np.ndarray:
    """Scatter ``x`` back to the positions recorded by :func:`maxpool2x2`."""
    x = check_tensor4(x)
    indices = np.asarray(indices)
    out_shape = tuple(int(s) for s in out_shape)
    if indices.shape != x.shape:
        raise ShapeError(f"indices shape {indices.shape} != input shape {x.shape}")
    if len(out_shape) != 4 or out_shape[:2] != x.shape[:2] or \
            out_shape[2] != 2 * x.shape[2] or out_shape[3] != 2 * x.shape[3]:
        raise ShapeError(f"out_shape {out_shape} is not the 2x upsampling of {x.shape}")
    n, c, h, w = out_shape
    if indices.size and (indices.min() < 0 or indices.max() >= h * w):
        raise CorruptionError(f"pool index outside the {h}x{w} target plane")
    out = np.zeros((n, c, h * w))
    np.put_along_axis(out, indices.reshape(n, c, -1), x.reshape(n, c, -1), axis=-1)
    return out.reshape(out_shape)


def max_unpool2x2_backward(grad_out: np.ndarray, indices: np.ndarray) -> np.ndarray:
    grad_out = check_tensor4(grad_out, "grad_out")
    n, c = grad_out.shape[:2]
    flat = grad_out.reshape(n, c, -1)
    return np.take_along_axis(flat, indices.reshape(n, c, -1), axis=-1).reshape(indices.shape)


def maxpool2x2_backward(grad_out: np.ndarray, indices: np.ndarray, in_shape: Sequence[int]) -> np.ndarray:
    # routing the gradient to the argmax is exactly an unpool
    return max_unpool2x2(grad_out, indices, in_shape)


# -- transposed convolution --------------------------------------------------


def _check_factor(params: ConvParams, factor: int) -> None:
    if factor not in SUPPORTED_FACTORS:
        raise ConfigError(f"deconvolution factor must be one of {SUPPORTED_FACTORS}, got {factor}")
    if params.kernel_size != (2 * factor, 2 * factor):
        raise ShapeError(
            f"factor {factor} needs a {2 * factor}x{2 * factor} kernel, got {params.kernel_size}"
        )


def _crop(factor: int) -> int:
    return factor // 2


def deconv(x: np.ndarray, params: ConvParams, factor: int) -> np.ndarray:
    """Transposed convolution upsampling by ``factor``.

    Kernel ``2f x 2f``, stride ``f``; the ``(h + 1) f`` full output is cropped
    by ``f // 2`` at the top/left so the result is exactly ``f`` times the
    input size.  Weights are laid out ``(out_c, in_c, 2f, 2f)``.
    """
    x = check_tensor4(x)
    _check_factor(params, factor)
    _check_conv(x, params)
    n, _, h, w = x.shape
    f = factor
    wt = np.asarray(params.weight, dtype=np.float64)
    # (n, h, w, o, 2f, 2f): kernel-shaped contribution of every input cell
    contrib = np.tensordot(x, wt, axes=([1], [1])).reshape(n, h, w, -1, 2, f, 2, f)
    full = np.zeros((n, wt.shape[0], h + 1, f, w + 1, f))
    for qa in (0, 1):
        for qb in (0, 1):
            full[:, :, qa:qa + h, :, qb:qb + w, :] += \
                contrib[:, :, :, :, qa, :, qb, :].transpose(0, 3, 1, 4, 2, 5)
    full = full.reshape(n, -1, (h + 1) * f, (w + 1) * f)
    c0 = _crop(f)
    out = full[:, :, c0:c0 + h * f, c0:c0 + w * f]
    return out + np.asarray(params.bias, dtype=np.float64)[None, :, None, None]


def deconv_backward(
    x: np.ndarray, params: ConvParams, grad_out: np.ndarray, factor: int
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    x = check_tensor4(x)
    _check_factor(params, factor)
    grad_out = check_tensor4(grad_out, "grad_out")
    n, _, h, w = x.shape
    f = factor
    if grad_out.shape != (n, params.out_channels, h * f, w * f):
        raise ShapeError(f"grad_out shape {grad_out.shape} != deconv output shape")
    wt = np.asarray(params.weight, dtype=np.float64)
    o = wt.shape[0]
    c0 = _crop(f)
    full = np.zeros((n, o, (h + 1) * f, (w + 1) * f))
    full[:, :, c0:c0 + h * f, c0:c0 + w * f] = grad_out
    full = full.reshape(n, o, h + 1, f, w + 1, f)
    gcontrib = np.empty((n, h, w, o, 2, f, 2, f))
    for qa in (0, 1):
        for qb in (0, 1):
            gcontrib[:, :, :, :, qa, :, qb, :] = \
                full[:, :, qa:qa + h, :, qb:qb + w, :].transpose(0, 2, 4, 1, 3, 5)
    gcontrib = gcontrib.reshape(n, h, w, o, 2 * f, 2 * f)
    grad_x = np.tensordot(gcontrib, wt, axes=([3, 4, 5], [0, 2, 3])).transpose(0, 3, 1, 2)
    grad_w = np.tensordot(gcontrib, x, axes=([0, 1, 2], [0, 2, 3])).transpose(0, 3, 1, 2)
    grad_b = grad_out.sum(axis=(0, 2, 3))
    return np.ascontiguousarray(grad_x), np.ascontiguousarray(grad_w), grad_b


# -- elementwise and structural ----------------------------------------------


def concat_channels(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    a = check_tensor4(a, "a")
    b = check_tensor4(b, "b")
    if a.shape[0] != b.shape[0] or a.shape[2:] != b.shape[2:]:
        raise ShapeError(f"cannot concatenate {a.shape} and {b.shape} along channels")
    return np.concatenate([a, b], axis=1)


def split_channels(grad: np.ndarray, a_channels: int) -> tuple[np.ndarray, np.ndarray]:
    """Backward of :func:`concat_channels`."""
    return grad[:, :a_channels], grad[:, a_channels:]


def relu(x: np.ndarray) -> np.ndarray:
    return np.maximum(np.asarray(x, dtype=np.float64), 0.0)


def relu_backward(x: np.ndarray, grad_out: np.ndarray) -> np.ndarray:
    # zero gradient at exactly 0
    return np.where(np.asarray(x) > 0, grad_out, 0.0)


def sigmoid_map(x: np.ndarray) -> np.ndarray:
    return expit(np.asarray(x, dtype=np.float64))


def sigmoid_backward(y: np.ndarray, grad_out: np.ndarray) -> np.ndarray:
    """Backward of sigmoid given its *output* ``y``."""
    return grad_out * y * (1.0 - y)


# -- initialisation ----------------------------------------------------------


def he_normal_init(shape: Sequence[int], rng: np.random.Generator | int | None = None,
                   dtype=np.float64) -> np.ndarray:
    """Zero-mean normal weights with variance ``2 / fan_in``."""
    shape = tuple(int(s) for s in shape)
    if len(shape) != 4:
        raise ShapeError(f"weight shape must be rank 4, got {shape}")
    fan_in = shape[1] * shape[2] * shape[3]
    if fan_in <= 0:
        raise ConfigError(f"fan_in must be positive, got {fan_in} for shape {shape}")
    rng = np.random.default_rng(rng)
    return (rng.standard_normal(shape) * np.sqrt(2.0 / fan_in)).astype(dtype)


def bilinear_profile(factor: int) -> np.ndarray:
    """1-D bilinear upsampling weights of length ``2 * factor``."""
    if factor < 1:
        raise ConfigError(f"factor must be >= 1, got {factor}")
    if factor == 1:
        return np.array([1.0, 0.0])
    size = 2 * factor
    center = (size // 2) / factor
    t = np.arange(size)
    return 1.0 - np.abs((t + 0.5) / factor - center)


def bilinear_kernel(factor: int, channels: int = 1, dtype=np.float64) -> ConvParams:
    """Deconvolution weights filled with the bilinear interpolation kernel.

    The 2-D kernel is the outer product of :func:`bilinear_profile`; it is
    placed on the channel diagonal and zero across channel pairs.
    """
    p = bilinear_profile(factor)
    k = np.outer(p, p)
    weight = np.zeros((channels, channels) + k.shape, dtype=dtype)
    for c in range(channels):
        weight[c, c] = k
    return ConvParams(weight, np.zeros(channels, dtype=dtype))


def receptive_field(layers: Iterable[tuple[int, int]]) -> int:
    """Receptive field of a stack of ``(kernel, stride)`` layers."""
    rf, jump = 1, 1
    for kernel, stride in layers:
        rf += (kernel - 1) * jump
        jump *= stride
    return rf
