"""Forward and backward kernels on plain numpy arrays.

Feature maps are rank-4 arrays in N, C, H, W order. Every public op checks
its output for NaN/Inf and raises instead of propagating. Convolutions
gather the shifted input view of every kernel tap and contract them with the
weights in one matmul; the backward pass scatters tap gradients back.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np
from scipy.special import expit

from ..errors import DimensionError, DivisibilityError, GeometryError, NonFiniteError


def _pair(v) -> tuple[int, int]:
    if isinstance(v, (tuple, list)):
        a, b = v
        return int(a), int(b)
    return int(v), int(v)


def check_finite(arr: np.ndarray, where: str) -> np.ndarray:
    if not np.all(np.isfinite(arr)):
        raise NonFiniteError(f"{where}: non-finite values in output")
    return arr


def as_tensor(x, name: str = "x") -> np.ndarray:
    x = np.asarray(x)
    if x.ndim != 4:
        raise DimensionError(f"{name} must be rank-4 (N, C, H, W), got shape {x.shape}")
    if not np.issubdtype(x.dtype, np.floating):
        x = x.astype(np.float64)
    return x


@dataclass(frozen=True)
class ConvSpec:
    in_channels: int
    out_channels: int
    kernel: tuple[int, int] = (3, 3)
    stride: int = 1
    padding: int = 0
    dilation: int = 1
    groups: int = 1
    has_bias: bool = True

    def __post_init__(self):
        object.__setattr__(self, "kernel", _pair(self.kernel))
        for field in ("in_channels", "out_channels", "stride", "dilation", "groups"):
            if int(getattr(self, field)) < 1:
                raise GeometryError(f"ConvSpec.{field} must be positive")
        if self.padding < 0 or min(self.kernel) < 1:
            raise GeometryError("ConvSpec: negative padding or empty kernel")
        if self.in_channels % self.groups or self.out_channels % self.groups:
            raise DivisibilityError(
                f"channels {self.in_channels}->{self.out_channels} not divisible by groups={self.groups}"
            )

    @property
    def weight_shape(self) -> tuple[int, int, int, int]:
        kh, kw = self.kernel
        return (self.out_channels, self.in_channels // self.groups, kh, kw)

    def output_size(self, h: int, w: int) -> tuple[int, int]:
        kh, kw = self.kernel
        out = []
        for size, k in ((h, kh), (w, kw)):
            o = (size + 2 * self.padding - self.dilation * (k - 1) - 1) // self.stride + 1
            if o < 1:
                raise GeometryError(f"conv output size {o} < 1 for input {h}x{w} and {self}")
            out.append(o)
        return out[0], out[1]

    def param_count(self) -> int:
        kh, kw = self.kernel
        n = kh * kw * self.in_channels * self.out_channels // self.groups
        return n + (self.out_channels if self.has_bias else 0)

    def macs(self, h: int, w: int) -> int:
        """Multiply-accumulates for one image of size h x w."""
        ho, wo = self.output_size(h, w)
        kh, kw = self.kernel
        return ho * wo * self.out_channels * kh * kw * self.in_channels // self.groups


def _check_conv_args(x, spec: ConvSpec, weights):
    x = as_tensor(x)
    if x.shape[1] != spec.in_channels:
        raise DimensionError(f"input has {x.shape[1]} channels, spec expects {spec.in_channels}")
    weights = np.asarray(weights)
    if weights.shape != spec.weight_shape:
        raise DimensionError(f"weights shaped {weights.shape}, expected {spec.weight_shape}")
    return x, weights


def _taps(spec: ConvSpec, ho: int, wo: int):
    kh, kw = spec.kernel
    d, s = spec.dilation, spec.stride
    for i in range(kh):
        for j in range(kw):
            rows = slice(i * d, i * d + s * (ho - 1) + 1, s)
            cols = slice(j * d, j * d + s * (wo - 1) + 1, s)
            yield i * kw + j, rows, cols


def _pad(x: np.ndarray, p: int) -> np.ndarray:
    if p == 0:
        return x
    return np.pad(x, ((0, 0), (0, 0), (p, p), (p, p)))


def _gather(x: np.ndarray, spec: ConvSpec, ho: int, wo: int) -> np.ndarray:
    """Stack the shifted input views of every kernel tap: (N, C, taps, Ho*Wo)."""
    n, c = x.shape[:2]
    kh, kw = spec.kernel
    xp = _pad(x, spec.padding)
    cols = np.empty((n, c, kh * kw, ho, wo), dtype=x.dtype)
    for t, rows, cs in _taps(spec, ho, wo):
        cols[:, :, t] = xp[:, :, rows, cs]
    return cols.reshape(n, c, kh * kw, ho * wo)


def conv2d(x, spec: ConvSpec, weights, bias=None) -> np.ndarray:
    x, weights = _check_conv_args(x, spec, weights)
    n, c, h, w = x.shape
    ho, wo = spec.output_size(h, w)
    g = spec.groups
    cg, og = c // g, spec.out_channels // g
    taps = spec.kernel[0] * spec.kernel[1]
    dtype = np.result_type(x, weights)
    cols = _gather(x.astype(dtype, copy=False), spec, ho, wo)
    if cg == 1 and og == 1:
        wd = weights.reshape(1, c, taps, 1).astype(dtype, copy=False)
        out = (cols * wd).sum(axis=2)
    else:
        wmat = weights.reshape(g, og, cg * taps).astype(dtype, copy=False)
        out = wmat @ cols.reshape(n, g, cg * taps, ho * wo)
    out = out.reshape(n, spec.out_channels, ho, wo)
    if bias is not None:
        bias = np.asarray(bias)
        if bias.shape != (spec.out_channels,):
            raise DimensionError(f"bias shaped {bias.shape}, expected ({spec.out_channels},)")
        out = out + bias[None, :, None, None]
    return check_finite(out, "conv2d")


def conv2d_backward(x, spec: ConvSpec, weights, grad_out):
    """Return (grad_x, grad_w, grad_b) for :func:`conv2d`."""
    x, weights = _check_conv_args(x, spec, weights)
    n, c, h, w = x.shape
    ho, wo = spec.output_size(h, w)
    grad_out = np.asarray(grad_out)
    if grad_out.shape != (n, spec.out_channels, ho, wo):
        raise DimensionError(f"grad_out shaped {grad_out.shape}, expected {(n, spec.out_channels, ho, wo)}")
    g = spec.groups
    cg, og = c // g, spec.out_channels // g
    taps = spec.kernel[0] * spec.kernel[1]
    p = ho * wo
    dtype = np.result_type(x, weights, grad_out)
    cols = _gather(x.astype(dtype, copy=False), spec, ho, wo)
    grad_out = grad_out.astype(dtype, copy=False)
    if cg == 1 and og == 1:
        go = grad_out.reshape(n, c, 1, p)
        grad_w = (go * cols).sum(axis=(0, 3)).reshape(weights.shape)
        grad_cols = go * weights.reshape(1, c, taps, 1).astype(dtype, copy=False)
    else:
        go = grad_out.reshape(n, g, og, p)
        cols_g = cols.reshape(n, g, cg * taps, p)
        go_flat = go.transpose(1, 2, 0, 3).reshape(g, og, n * p)
        cols_flat = cols_g.transpose(1, 0, 3, 2).reshape(g, n * p, cg * taps)
        grad_w = (go_flat @ cols_flat).reshape(weights.shape)
        wmat = weights.reshape(g, og, cg * taps).astype(dtype, copy=False)
        grad_cols = np.swapaxes(wmat, 1, 2) @ go
    grad_cols = grad_cols.reshape(n, c, taps, ho, wo)
    pad = spec.padding
    grad_xp = np.zeros((n, c, h + 2 * pad, w + 2 * pad), dtype=dtype)
    for t, rows, cs in _taps(spec, ho, wo):
        grad_xp[:, :, rows, cs] += grad_cols[:, :, t]
    grad_x = grad_xp[:, :, pad : pad + h, pad : pad + w] if pad else grad_xp
    grad_b = grad_out.sum(axis=(0, 2, 3))
    return (
        check_finite(np.ascontiguousarray(grad_x), "conv2d_backward"),
        check_finite(grad_w, "conv2d_backward"),
        grad_b,
    )


def depthwise_spec(channels: int, kernel=3, dilation: int = 1, has_bias: bool = True) -> ConvSpec:
    k = _pair(kernel)[0]
    return ConvSpec(channels, channels, (k, k), 1, dilation * (k - 1) // 2, dilation, channels, has_bias)


def pointwise_spec(in_channels: int, out_channels: int, has_bias: bool = True) -> ConvSpec:
    return ConvSpec(in_channels, out_channels, (1, 1), 1, 0, 1, 1, has_bias)


def depthwise_separable(x, dw_weights, pw_weights, dw_bias=None, pw_bias=None, dilation: int = 1) -> np.ndarray:
    """Depthwise k x k (groups == channels, same padding) then pointwise 1 x 1."""
    x = as_tensor(x)
    c = x.shape[1]
    dw_weights, pw_weights = np.asarray(dw_weights), np.asarray(pw_weights)
    dw = depthwise_spec(c, dw_weights.shape[-1], dilation, dw_bias is not None)
    pw = pointwise_spec(c, pw_weights.shape[0], pw_bias is not None)
    return conv2d(conv2d(x, dw, dw_weights, dw_bias), pw, pw_weights, pw_bias)


def gap(x) -> np.ndarray:
    """Spatial mean per (batch, channel), shape (N, C).

    Computed as ``x[0, 0] + mean(x - x[0, 0])`` so a spatially constant map
    returns its constant exactly.
    """
    x = as_tensor(x)
    if x.shape[2] * x.shape[3] < 1:
        raise GeometryError("gap: empty spatial extent")
    anchor = x[:, :, :1, :1]
    out = anchor[:, :, 0, 0] + (x - anchor).mean(axis=(2, 3))
    return check_finite(out, "gap")


def gap_backward(x_shape, grad) -> np.ndarray:
    n, c, h, w = x_shape
    grad = np.asarray(grad)
    return np.broadcast_to(grad[:, :, None, None] / (h * w), (n, c, h, w)).copy()


def softmax(v, axis: int = -1) -> np.ndarray:
    v = np.asarray(v, dtype=np.result_type(v, np.float32))
    if not np.all(np.isfinite(v)):
        raise NonFiniteError("softmax: non-finite input")
    z = np.exp(v - v.max(axis=axis, keepdims=True))
    return z / z.sum(axis=axis, keepdims=True)


def softmax_backward(y, grad, axis: int = -1) -> np.ndarray:
    return y * (grad - (grad * y).sum(axis=axis, keepdims=True))


def split_channels(x, parts: int) -> list[np.ndarray]:
    x = as_tensor(x)
    c = x.shape[1]
    if parts < 1 or c % parts:
        raise DivisibilityError(f"{c} channels cannot be split into {parts} equal parts")
    step = c // parts
    return [x[:, k * step : (k + 1) * step].copy() for k in range(parts)]


def concat_channels(xs: Sequence) -> np.ndarray:
    xs = [as_tensor(a) for a in xs]
    if not xs:
        raise DimensionError("concat_channels: empty input list")
    ref = xs[0].shape
    for a in xs[1:]:
        if (a.shape[0], a.shape[2], a.shape[3]) != (ref[0], ref[2], ref[3]):
            raise DimensionError(f"concat_channels: {a.shape} incompatible with {ref}")
    return np.concatenate(xs, axis=1)


def upsample_nearest(x, factor: int) -> np.ndarray:
    x = as_tensor(x)
    if factor < 1:
        raise GeometryError("upsample factor must be >= 1")
    return x.repeat(factor, axis=2).repeat(factor, axis=3)


def upsample_nearest_backward(grad, factor: int) -> np.ndarray:
    n, c, h, w = grad.shape
    return grad.reshape(n, c, h // factor, factor, w // factor, factor).sum(axis=(3, 5))


def sigmoid(x) -> np.ndarray:
    return expit(np.asarray(x))


def silu(x) -> np.ndarray:
    x = np.asarray(x)
    return check_finite(x * sigmoid(x), "silu")


def silu_backward(x, grad) -> np.ndarray:
    s = sigmoid(x)
    return grad * (s + x * s * (1 - s))


def add(a, b) -> np.ndarray:
    a, b = np.asarray(a), np.asarray(b)
    if a.shape != b.shape:
        raise DimensionError(f"add: {a.shape} vs {b.shape}")
    return check_finite(a + b, "add")


def finite_diff_grad(f: Callable[[np.ndarray], float], x, eps: float = 1e-5) -> np.ndarray:
    """Central differences of a scalar function, one element at a time."""
    if eps <= 0:
        raise ValueError("eps must be positive")
    x = np.array(x, dtype=np.float64)
    grad = np.zeros_like(x)
    flat, gflat = x.reshape(-1), grad.reshape(-1)
    for k in range(flat.size):
        orig = flat[k]
        flat[k] = orig + eps
        fp = float(f(x))
        flat[k] = orig - eps
        fm = float(f(x))
        flat[k] = orig
        if not (np.isfinite(fp) and np.isfinite(fm)):
            raise NonFiniteError(f"finite_diff_grad: f is non-finite near element {k}")
        gflat[k] = (fp - fm) / (2 * eps)
    return grad


def rel_error(analytic, numeric, floor: float = 1e-8) -> float:
    """Max-abs difference scaled by the larger max-abs of the two gradients."""
    a, b = np.asarray(analytic, dtype=np.float64), np.asarray(numeric, dtype=np.float64)
    scale = max(np.abs(a).max(initial=0.0), np.abs(b).max(initial=0.0), floor)
    return float(np.abs(a - b).max(initial=0.0) / scale)
