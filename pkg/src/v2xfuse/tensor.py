"""Dense 4-D (batch, channel, height, width) kernels.

Tensors are plain ``numpy.ndarray`` values.  Every op returns a new array in
float32 unless it was handed float64 input, which is passed through so that
gradient checks can run without single-precision round-off.  Reductions
(convolution, pooling, interpolation) accumulate in float64.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import ConfigError, ShapeError

NORM_EPS = 1e-5


def _out_dtype(*arrays):
    return np.float64 if any(a.dtype == np.float64 for a in arrays) else np.float32


def as_tensor(x, dtype=None) -> np.ndarray:
    """Validate and convert ``x`` into a 4-D float tensor."""
    arr = np.asarray(x)
    if dtype is None:
        dtype = np.float64 if arr.dtype == np.float64 else np.float32
    arr = np.ascontiguousarray(arr, dtype=dtype)
    if arr.ndim != 4:
        raise ShapeError(f"expected a 4-D tensor, got shape {arr.shape}")
    if min(arr.shape) < 1:
        raise ShapeError(f"all dimensions must be >= 1, got {arr.shape}")
    return arr


def zeros(shape, dtype=np.float32) -> np.ndarray:
    return as_tensor(np.zeros(shape, dtype=dtype))


@dataclass(frozen=True)
class ConvParams:
    weight: np.ndarray  # (C_out, C_in, k_h, k_w)
    bias: np.ndarray  # (C_out,)
    stride: int = 1
    padding: int = 0

    def __post_init__(self):
        if self.weight.ndim != 4:
            raise ConfigError(f"kernel must be 4-D, got {self.weight.shape}")
        if self.bias.shape != (self.weight.shape[0],):
            raise ConfigError(
                f"bias shape {self.bias.shape} does not match {self.weight.shape[0]} output channels"
            )
        if self.stride < 1 or self.padding < 0:
            raise ConfigError("stride must be >= 1 and padding >= 0")

    @property
    def out_channels(self) -> int:
        return self.weight.shape[0]

    @property
    def in_channels(self) -> int:
        return self.weight.shape[1]


def conv_output_size(size: int, kernel: int, stride: int, padding: int) -> int:
    return (size + 2 * padding - kernel) // stride + 1


def _windows(x: np.ndarray, p: ConvParams) -> np.ndarray:
    kh, kw = p.weight.shape[2:]
    xp = np.pad(x, ((0, 0), (0, 0), (p.padding, p.padding), (p.padding, p.padding)))
    win = sliding_window_view(xp, (kh, kw), axis=(2, 3))
    return win[:, :, :: p.stride, :: p.stride]  # (B, C, H', W', kh, kw)


def conv2d(x: np.ndarray, p: ConvParams) -> np.ndarray:
    """Cross-correlation of ``x`` with ``p.weight`` plus bias."""
    x = as_tensor(x)
    b, c, h, w = x.shape
    if c != p.in_channels:
        raise ConfigError(f"input has {c} channels, kernel expects {p.in_channels}")
    kh, kw = p.weight.shape[2:]
    oh = conv_output_size(h, kh, p.stride, p.padding)
    ow = conv_output_size(w, kw, p.stride, p.padding)
    if oh < 1 or ow < 1:
        raise ConfigError(f"convolution output would be {oh}x{ow}")
    dtype = _out_dtype(x, p.weight)
    if kh == kw == 1 and p.stride == 1 and p.padding == 0:
        out = np.einsum("oc,bchw->bohw", p.weight[:, :, 0, 0].astype(np.float64),
                        x.astype(np.float64), optimize=True)
    else:
        cols = _windows(x.astype(np.float64), p)
        cols = cols.transpose(0, 2, 3, 1, 4, 5).reshape(b * oh * ow, c * kh * kw)
        out = cols @ p.weight.reshape(p.out_channels, -1).astype(np.float64).T
        out = out.reshape(b, oh, ow, p.out_channels).transpose(0, 3, 1, 2)
    out = out + p.bias.astype(np.float64)[None, :, None, None]
    return np.ascontiguousarray(out, dtype=dtype)


def conv2d_backward(grad_out: np.ndarray, x: np.ndarray, p: ConvParams):
    """Gradients of ``conv2d`` w.r.t. input, kernel and bias."""
    g = np.asarray(grad_out, dtype=np.float64)
    x64 = np.asarray(x, dtype=np.float64)
    w64 = p.weight.astype(np.float64)
    kh, kw = p.weight.shape[2:]
    b, c, h, w = x.shape
    _, _, oh, ow = g.shape
    grad_b = g.sum(axis=(0, 2, 3))
    s, pad = p.stride, p.padding
    if kh == kw == 1 and s == 1 and pad == 0:
        grad_w = np.einsum("bohw,bchw->oc", g, x64, optimize=True)[:, :, None, None]
        grad_x = np.einsum("bohw,oc->bchw", g, w64[:, :, 0, 0], optimize=True)
    else:
        cols = _windows(x64, p)
        grad_w = np.einsum("bohw,bchwij->ocij", g, cols, optimize=True)
        grad_xp = np.zeros((b, c, h + 2 * pad, w + 2 * pad))
        for i in range(kh):
            for j in range(kw):
                grad_xp[:, :, i: i + s * oh: s, j: j + s * ow: s] += np.einsum(
                    "bohw,oc->bchw", g, w64[:, :, i, j], optimize=True
                )
        grad_x = grad_xp[:, :, pad: pad + h, pad: pad + w]
    dtype = _out_dtype(np.asarray(x), p.weight)
    return (
        np.ascontiguousarray(grad_x, dtype=dtype),
        grad_w.astype(dtype),
        grad_b.astype(dtype),
    )


def sigmoid(x: np.ndarray) -> np.ndarray:
    x = np.asarray(x)
    dtype = np.float64 if x.dtype == np.float64 else np.float32
    x64 = x.astype(np.float64)
    e = np.exp(-np.abs(x64))
    out = np.where(x64 >= 0, 1.0 / (1.0 + e), e / (1.0 + e))
    return out.astype(dtype)


def relu(x: np.ndarray) -> np.ndarray:
    return np.maximum(x, 0).astype(x.dtype)


def relu_backward(grad_out: np.ndarray, x: np.ndarray) -> np.ndarray:
    return (grad_out * (x > 0)).astype(grad_out.dtype)


def affine_norm(x, gamma, beta, mean, var, eps=NORM_EPS) -> np.ndarray:
    """Per-channel normalization with stored statistics (inference form)."""
    dtype = _out_dtype(np.asarray(x), np.asarray(gamma))
    scale = gamma.astype(np.float64) / np.sqrt(var.astype(np.float64) + eps)
    out = (x.astype(np.float64) - mean[None, :, None, None]) * scale[None, :, None, None]
    return (out + beta.astype(np.float64)[None, :, None, None]).astype(dtype)


def affine_norm_backward(grad_out, x, gamma, mean, var, eps=NORM_EPS):
    """Returns gradients for (x, gamma, beta)."""
    g = grad_out.astype(np.float64)
    inv_std = 1.0 / np.sqrt(var.astype(np.float64) + eps)
    xhat = (x.astype(np.float64) - mean[None, :, None, None]) * inv_std[None, :, None, None]
    grad_x = g * (gamma.astype(np.float64) * inv_std)[None, :, None, None]
    dtype = grad_out.dtype
    return (
        grad_x.astype(dtype),
        (g * xhat).sum(axis=(0, 2, 3)).astype(dtype),
        g.sum(axis=(0, 2, 3)).astype(dtype),
    )


def pool_matrix(size_in: int, size_out: int) -> np.ndarray:
    """Row i averages input indices [floor(i*n/m), ceil((i+1)*n/m))."""
    m = np.zeros((size_out, size_in))
    for i in range(size_out):
        start = (i * size_in) // size_out
        end = -((-(i + 1) * size_in) // size_out)
        m[i, start:end] = 1.0 / (end - start)
    return m


def upsample_matrix(size_in: int, size_out: int) -> np.ndarray:
    """Linear interpolation weights, align_corners=False convention."""
    m = np.zeros((size_out, size_in))
    ratio = size_in / size_out
    for i in range(size_out):
        src = max((i + 0.5) * ratio - 0.5, 0.0)
        i0 = min(int(np.floor(src)), size_in - 1)
        i1 = min(i0 + 1, size_in - 1)
        lam = src - i0
        m[i, i0] += 1.0 - lam
        m[i, i1] += lam
    return m


def _separable(x, mh, mw):
    dtype = np.float64 if x.dtype == np.float64 else np.float32
    out = np.einsum("ih,bchw,jw->bcij", mh, x.astype(np.float64), mw, optimize=True)
    return np.ascontiguousarray(out, dtype=dtype)


def adaptive_avg_pool(x: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    x = as_tensor(x)
    _, _, h, w = x.shape
    if not (1 <= out_h <= h and 1 <= out_w <= w):
        raise ConfigError(f"cannot pool {h}x{w} to {out_h}x{out_w}")
    if (out_h, out_w) == (h, w):
        return x.copy()
    return _separable(x, pool_matrix(h, out_h), pool_matrix(w, out_w))


def adaptive_avg_pool_backward(grad_out: np.ndarray, in_h: int, in_w: int) -> np.ndarray:
    _, _, oh, ow = grad_out.shape
    if (oh, ow) == (in_h, in_w):
        return grad_out.copy()
    return _separable(grad_out, pool_matrix(in_h, oh).T, pool_matrix(in_w, ow).T)


def bilinear_upsample(x: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    x = as_tensor(x)
    _, _, h, w = x.shape
    if out_h < h or out_w < w:
        raise ConfigError(f"cannot upsample {h}x{w} to smaller {out_h}x{out_w}")
    if (out_h, out_w) == (h, w):
        return x.copy()
    return _separable(x, upsample_matrix(h, out_h), upsample_matrix(w, out_w))


def bilinear_upsample_backward(grad_out: np.ndarray, in_h: int, in_w: int) -> np.ndarray:
    _, _, oh, ow = grad_out.shape
    if (oh, ow) == (in_h, in_w):
        return grad_out.copy()
    return _separable(grad_out, upsample_matrix(in_h, oh).T, upsample_matrix(in_w, ow).T)


def concat_channels(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    a, b = as_tensor(a), as_tensor(b)
    if (a.shape[0], a.shape[2], a.shape[3]) != (b.shape[0], b.shape[2], b.shape[3]):
        raise ShapeError(f"cannot concatenate {a.shape} and {b.shape} along channels")
    return np.concatenate([a, b.astype(a.dtype)], axis=1)


def hadamard(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Elementwise product; ``b`` may broadcast over singleton dims of ``a``."""
    a, b = as_tensor(a), as_tensor(b)
    try:
        shape = np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        shape = None
    if shape != a.shape:
        raise ShapeError(f"{b.shape} does not broadcast onto {a.shape}")
    return (a * b).astype(_out_dtype(a, b))


def finite_diff_grad(f: Callable[[np.ndarray], float], x: np.ndarray, eps: float = 1e-3) -> np.ndarray:
    """Central-difference gradient of a scalar function, one element at a time."""
    if eps <= 0:
        raise ConfigError("eps must be positive")
    x = np.array(x, copy=True)
    grad = np.zeros(x.shape, dtype=np.float64)
    flat = x.reshape(-1)
    gflat = grad.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + eps
        up = float(f(x))
        flat[i] = orig - eps
        down = float(f(x))
        flat[i] = orig
        gflat[i] = (up - down) / (2 * eps)
    return grad.astype(x.dtype if x.dtype == np.float64 else np.float32)
