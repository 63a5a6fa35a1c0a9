"""Differentiable kernels over :class:`Tensor`.

Every op computes its forward value with numpy and, when a tape is active,
records a closure that maps the upstream gradient to one gradient per input.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .tensor import Tensor, as_tensor, make_result


class DimensionError(ValueError):
    pass


def _triple(v) -> tuple[int, int, int]:
    if isinstance(v, int):
        return (v, v, v)
    t = tuple(int(x) for x in v)
    if len(t) != 3:
        raise DimensionError(f"expected 3 values, got {v!r}")
    return t  # type: ignore[return-value]


def _same_shape(a: Tensor, b: Tensor, op: str) -> None:
    if a.shape != b.shape:
        raise DimensionError(f"{op}: shape mismatch {a.shape} vs {b.shape}")


# --------------------------------------------------------------------------
# Elementwise
# --------------------------------------------------------------------------


def add(a, b) -> Tensor:
    a = as_tensor(a)
    if np.isscalar(b):
        c = b
        return make_result(a.data + a.dtype.type(c), (a,), lambda g: (g,), "add_scalar")
    b = as_tensor(b, dtype=a.dtype)
    _same_shape(a, b, "add")
    return make_result(a.data + b.data, (a, b), lambda g: (g, g), "add")


def sub(a, b) -> Tensor:
    a = as_tensor(a)
    if np.isscalar(b):
        return add(a, -b)
    b = as_tensor(b, dtype=a.dtype)
    _same_shape(a, b, "sub")
    return make_result(a.data - b.data, (a, b), lambda g: (g, -g), "sub")


def neg(a: Tensor) -> Tensor:
    return make_result(-a.data, (a,), lambda g: (-g,), "neg")


def scalar_mul(a: Tensor, s: float) -> Tensor:
    s = a.dtype.type(s)
    return make_result(a.data * s, (a,), lambda g: (g * s,), "scalar_mul")


def mul(a, b) -> Tensor:
    a = as_tensor(a)
    if np.isscalar(b):
        return scalar_mul(a, b)
    b = as_tensor(b, dtype=a.dtype)
    _same_shape(a, b, "mul")
    ad, bd = a.data, b.data
    return make_result(ad * bd, (a, b), lambda g: (g * bd, g * ad), "mul")


def div(a, b) -> Tensor:
    a = as_tensor(a)
    if np.isscalar(b):
        return scalar_mul(a, 1.0 / b)
    b = as_tensor(b, dtype=a.dtype)
    _same_shape(a, b, "div")
    ad, bd = a.data, b.data
    out = ad / bd

    def backward(g):
        ga = g / bd
        return ga, -ga * out

    return make_result(out, (a, b), backward, "div")


def square(a: Tensor) -> Tensor:
    ad = a.data
    return make_result(ad * ad, (a,), lambda g: (2 * g * ad,), "square")


def absolute(a: Tensor) -> Tensor:
    ad = a.data
    return make_result(np.abs(ad), (a,), lambda g: (g * np.sign(ad),), "abs")


def relu(a: Tensor) -> Tensor:
    pos = a.data > 0
    return make_result(np.where(pos, a.data, 0).astype(a.dtype), (a,), lambda g: (g * pos,), "relu")


def clamp(a: Tensor, lo: float, hi: float) -> Tensor:
    inside = (a.data >= lo) & (a.data <= hi)
    out = np.clip(a.data, lo, hi)
    return make_result(out, (a,), lambda g: (g * inside,), "clamp")


# --------------------------------------------------------------------------
# Structural
# --------------------------------------------------------------------------


def concat_channels(tensors: Sequence[Tensor], axis: int = 1) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    if not tensors:
        raise DimensionError("concat of an empty list")
    ref = tensors[0].shape
    for t in tensors[1:]:
        if t.ndim != len(ref) or t.shape[:axis] != ref[:axis] or t.shape[axis + 1 :] != ref[axis + 1 :]:
            raise DimensionError(f"concat: non-channel dims differ {ref} vs {t.shape}")
    sizes = [t.shape[axis] for t in tensors]
    bounds = np.cumsum([0] + sizes)
    out = np.concatenate([t.data for t in tensors], axis=axis)

    def backward(g):
        idx = [slice(None)] * g.ndim
        parts = []
        for lo, hi in zip(bounds[:-1], bounds[1:]):
            idx[axis] = slice(lo, hi)
            parts.append(np.ascontiguousarray(g[tuple(idx)]))
        return parts

    return make_result(out, tensors, backward, "concat")


def slice_channels(a: Tensor, start: int, stop: int, axis: int = 1) -> Tensor:
    if not 0 <= start < stop <= a.shape[axis]:
        raise DimensionError(f"slice [{start}:{stop}] outside axis of size {a.shape[axis]}")
    idx = [slice(None)] * a.ndim
    idx[axis] = slice(start, stop)
    idx = tuple(idx)

    def backward(g):
        full = np.zeros_like(a.data)
        full[idx] = g
        return (full,)

    return make_result(a.data[idx], (a,), backward, "slice")


def reshape(a: Tensor, shape) -> Tensor:
    old = a.shape
    return make_result(a.data.reshape(shape), (a,), lambda g: (g.reshape(old),), "reshape")


# --------------------------------------------------------------------------
# Reductions
# --------------------------------------------------------------------------


def reduce(a: Tensor, kind: str = "mean", axes=None) -> Tensor:
    """``kind`` is one of ``sum``, ``mean``, ``mean_abs``.

    ``axes=None`` reduces everything; an empty tuple reduces nothing.
    """
    if kind not in ("sum", "mean", "mean_abs"):
        raise ValueError(f"unknown reduction {kind!r}")
    if axes is None:
        axes = tuple(range(a.ndim))
    elif isinstance(axes, int):
        axes = (axes,)
    axes = tuple(sorted({ax % a.ndim for ax in axes}))
    if not axes:
        if kind == "mean_abs":
            return absolute(a)
        return make_result(a.data.copy(), (a,), lambda g: (g,), "reduce_identity")
    count = int(np.prod([a.shape[ax] for ax in axes]))
    src = np.abs(a.data) if kind == "mean_abs" else a.data
    out = src.sum(axis=axes, keepdims=True)
    if kind != "sum":
        out = out / a.dtype.type(count)
    keep_shape = out.shape
    out = out.reshape([s for i, s in enumerate(a.shape) if i not in axes])
    ad = a.data

    def backward(g):
        g = np.broadcast_to(g.reshape(keep_shape), ad.shape)
        if kind == "sum":
            return (np.array(g, dtype=ad.dtype),)
        scaled = g / ad.dtype.type(count)
        if kind == "mean_abs":
            return (scaled * np.sign(ad),)
        return (np.array(scaled, dtype=ad.dtype),)

    return make_result(out, (a,), backward, f"reduce_{kind}")


def mean(a: Tensor, axes=None) -> Tensor:
    return reduce(a, "mean", axes)


def sum_(a: Tensor, axes=None) -> Tensor:
    return reduce(a, "sum", axes)


# --------------------------------------------------------------------------
# Convolution
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class ConvSpec:
    in_channels: int
    out_channels: int
    kernel: tuple[int, int, int] = (3, 3, 3)
    stride: tuple[int, int, int] = (1, 1, 1)
    padding: tuple[int, int, int] | str = "same"

    def __post_init__(self):
        object.__setattr__(self, "kernel", _triple(self.kernel))
        object.__setattr__(self, "stride", _triple(self.stride))
        if min(self.stride) < 1:
            raise ValueError(f"stride must be >= 1 on every axis, got {self.stride}")
        if min(self.kernel) < 1:
            raise ValueError(f"kernel must be >= 1 on every axis, got {self.kernel}")
        if self.padding == "same":
            if any(k % 2 == 0 for k in self.kernel):
                raise ValueError("'same' padding needs odd kernel sizes")
            object.__setattr__(self, "padding", tuple(k // 2 for k in self.kernel))
        else:
            object.__setattr__(self, "padding", _triple(self.padding))

    def output_shape(self, spatial: Sequence[int]) -> tuple[int, int, int]:
        out = tuple((n + 2 * p - k) // s + 1 for n, p, k, s in zip(spatial, self.padding, self.kernel, self.stride))
        if any(n + 2 * p < k for n, p, k in zip(spatial, self.padding, self.kernel)) or min(out) < 1:
            raise DimensionError(f"conv3d: input spatial {tuple(spatial)} too small for kernel {self.kernel} "
                                 f"with padding {self.padding}")
        return out  # type: ignore[return-value]


def _im2col(xc: np.ndarray, kernel, stride, out_sp) -> np.ndarray:
    """Gather ``xc[C, B, Dp, Hp, Wp]`` into rows ``(C*kd*kh*kw)`` by columns ``(B*Do*Ho*Wo)``."""
    C, B = xc.shape[:2]
    kd, kh, kw = kernel
    sd, sh, sw = stride
    do, ho, wo = out_sp
    if kernel == (1, 1, 1) and stride == (1, 1, 1):
        return xc.reshape(C, -1)
    cols = np.empty((C, kd, kh, kw, B, do, ho, wo), dtype=xc.dtype)
    for i in range(kd):
        for j in range(kh):
            for k in range(kw):
                cols[:, i, j, k] = xc[:, :, i : i + sd * do : sd, j : j + sh * ho : sh, k : k + sw * wo : sw]
    return cols.reshape(C * kd * kh * kw, -1)


def _col2im(dcols: np.ndarray, padded_shape, kernel, stride, out_sp) -> np.ndarray:
    """Adjoint of :func:`_im2col`; returns the channel-major padded gradient."""
    C = padded_shape[0]
    kd, kh, kw = kernel
    sd, sh, sw = stride
    do, ho, wo = out_sp
    if kernel == (1, 1, 1) and stride == (1, 1, 1):
        return dcols.reshape(padded_shape)
    dcols = dcols.reshape(C, kd, kh, kw, padded_shape[1], do, ho, wo)
    g = np.zeros(padded_shape, dtype=dcols.dtype)
    for i in range(kd):
        for j in range(kh):
            for k in range(kw):
                g[:, :, i : i + sd * do : sd, j : j + sh * ho : sh, k : k + sw * wo : sw] += dcols[:, i, j, k]
    return g


def conv3d(x: Tensor, weight: Tensor, bias: Tensor | None = None, spec: ConvSpec | None = None,
           stride=1, padding="same") -> Tensor:
    """3D cross-correlation of ``x[B, C, D, H, W]`` with ``weight[Cout, C, kd, kh, kw]``.

    Zero padding; output size per axis is ``(n + 2p - k) // s + 1``.
    """
    if x.ndim != 5:
        raise DimensionError(f"conv3d expects a 5-D input (B, C, D, H, W), got shape {x.shape}")
    if weight.ndim != 5:
        raise DimensionError(f"conv3d expects a 5-D weight, got shape {weight.shape}")
    cout, cin = weight.shape[:2]
    if spec is None:
        spec = ConvSpec(cin, cout, weight.shape[2:], stride, padding)
    if (cin, cout) != (spec.in_channels, spec.out_channels) or tuple(weight.shape[2:]) != spec.kernel:
        raise DimensionError(f"conv3d: weight {weight.shape} does not match {spec}")
    if x.shape[1] != cin:
        raise DimensionError(f"conv3d: input has {x.shape[1]} channels, weight expects {cin}")
    if bias is not None and bias.shape != (cout,):
        raise DimensionError(f"conv3d: bias shape {bias.shape} != ({cout},)")

    B, _, D, H, W = x.shape
    out_sp = spec.output_shape((D, H, W))
    pd, ph, pw = spec.padding
    padded_shape = (cin, B, D + 2 * pd, H + 2 * ph, W + 2 * pw)
    if pd or ph or pw:
        xc = np.zeros(padded_shape, dtype=x.dtype)
        xc[:, :, pd : pd + D, ph : ph + H, pw : pw + W] = x.data.transpose(1, 0, 2, 3, 4)
    else:
        xc = np.ascontiguousarray(x.data.transpose(1, 0, 2, 3, 4))
    cols = _im2col(xc, spec.kernel, spec.stride, out_sp)
    w2 = weight.data.reshape(cout, -1)
    out = w2 @ cols
    if bias is not None:
        out += bias.data[:, None]
    out = np.ascontiguousarray(out.reshape(cout, B, *out_sp).transpose(1, 0, 2, 3, 4))

    def backward(g):
        g2 = np.ascontiguousarray(g.transpose(1, 0, 2, 3, 4)).reshape(cout, -1)
        gw = (g2 @ cols.T).reshape(weight.shape) if weight.requires_grad else None
        gb = g2.sum(axis=1) if bias is not None and bias.requires_grad else None
        gx = None
        if x.requires_grad:
            gxc = _col2im(w2.T @ g2, padded_shape, spec.kernel, spec.stride, out_sp)
            gx = np.ascontiguousarray(gxc[:, :, pd : pd + D, ph : ph + H, pw : pw + W].transpose(1, 0, 2, 3, 4))
        return gx, gw, gb

    parents = (x, weight) if bias is None else (x, weight, bias)
    return make_result(out, parents, backward, "conv3d")


# --------------------------------------------------------------------------
# Batch normalization
# --------------------------------------------------------------------------


class BatchNormState:
    """Running statistics for one batch-norm layer.

    ``mean``/``var`` stay ``None`` until a train-mode pass (or :meth:`reset`)
    fills them.
    """

    def __init__(self, channels: int, momentum: float = 0.9, eps: float = 1e-5):
        self.channels = channels
        self.momentum = momentum
        self.eps = eps
        self.mean: np.ndarray | None = None
        self.var: np.ndarray | None = None

    @property
    def initialized(self) -> bool:
        return self.mean is not None

    def reset(self, dtype=np.float32) -> None:
        self.mean = np.zeros(self.channels, dtype=dtype)
        self.var = np.ones(self.channels, dtype=dtype)

    def update(self, mean: np.ndarray, var_unbiased: np.ndarray) -> None:
        if self.mean is None:
            self.mean = mean.copy()
            self.var = var_unbiased.copy()
            return
        m = self.momentum
        self.mean = (m * self.mean + (1 - m) * mean).astype(mean.dtype)
        self.var = (m * self.var + (1 - m) * var_unbiased).astype(mean.dtype)


def batch_norm3d(x: Tensor, gamma: Tensor, beta: Tensor, state: BatchNormState, train: bool = True) -> Tensor:
    """Per-channel normalization over batch and spatial axes of ``x[B, C, ...]``."""
    C = x.shape[1]
    if gamma.shape != (C,) or beta.shape != (C,):
        raise DimensionError(f"batch_norm3d: gamma/beta must have shape ({C},), got {gamma.shape}/{beta.shape}")
    axes = (0,) + tuple(range(2, x.ndim))
    bshape = (1, C) + (1,) * (x.ndim - 2)
    xd = x.data
    dt = xd.dtype
    eps = dt.type(state.eps)
    n = xd.size // C

    if train:
        mu = xd.mean(axis=axes)
        centered = xd - mu.reshape(bshape)
        var = (centered * centered).mean(axis=axes)
        unbiased = var * (n / max(n - 1, 1))
        state.update(mu.astype(dt), unbiased.astype(dt))
    else:
        if not state.initialized:
            raise RuntimeError("batch_norm3d: eval mode before any running statistics exist; "
                               "train first or call BatchNormState.reset()")
        mu = state.mean.astype(dt)
        var = state.var.astype(dt)
        centered = xd - mu.reshape(bshape)
    inv_std = (1.0 / np.sqrt(var + eps)).astype(dt)
    xhat = centered * inv_std.reshape(bshape)
    out = xhat * gamma.data.reshape(bshape) + beta.data.reshape(bshape)

    def backward(g):
        ggamma = (g * xhat).sum(axis=axes)
        gbeta = g.sum(axis=axes)
        gx = None
        if x.requires_grad:
            gxhat = g * gamma.data.reshape(bshape)
            if train:
                s1 = gxhat.sum(axis=axes).reshape(bshape)
                s2 = (gxhat * xhat).sum(axis=axes).reshape(bshape)
                gx = (inv_std.reshape(bshape) / n) * (n * gxhat - s1 - xhat * s2)
            else:
                gx = gxhat * inv_std.reshape(bshape)
            gx = gx.astype(dt, copy=False)
        return gx, ggamma, gbeta

    return make_result(out, (x, gamma, beta), backward, "batch_norm3d")


# --------------------------------------------------------------------------
# Resampling
# --------------------------------------------------------------------------


def interp_matrix(n_in: int, n_out: int, dtype=np.float64) -> np.ndarray:
    """Linear interpolation weights ``(n_out, n_in)`` with half-pixel centers.

    Source coordinate of output ``i`` is ``(i + 0.5) * n_in / n_out - 0.5``,
    clamped to the valid range (edge replicate).
    """
    if n_in < 1 or n_out < 1:
        raise ValueError(f"interpolation sizes must be positive, got {n_in} -> {n_out}")
    A = np.zeros((n_out, n_in), dtype=np.float64)
    src = (np.arange(n_out) + 0.5) * (n_in / n_out) - 0.5
    src = np.clip(src, 0, n_in - 1)
    lo = np.floor(src).astype(int)
    hi = np.minimum(lo + 1, n_in - 1)
    frac = src - lo
    rows = np.arange(n_out)
    np.add.at(A, (rows, lo), 1 - frac)
    np.add.at(A, (rows, hi), frac)
    return A.astype(dtype)


def resample_array(a: np.ndarray, out_spatial: Sequence[int]) -> np.ndarray:
    """Apply separable linear interpolation to the trailing three axes."""
    out = a
    nd = a.ndim
    for k, n_out in enumerate(out_spatial):
        ax = nd - 3 + k
        n_in = out.shape[ax]
        if n_in == n_out:
            continue
        A = interp_matrix(n_in, n_out, a.dtype)
        out = np.moveaxis(np.tensordot(out, A, axes=([ax], [1])), -1, ax)
    return np.ascontiguousarray(out)


def upsample_trilinear(x: Tensor, factor) -> Tensor:
    """Integer-factor trilinear upsampling of the trailing (D, H, W) axes."""
    factor = _triple(factor)
    if min(factor) < 1:
        raise ValueError(f"upsampling factors must be >= 1, got {factor}")
    spatial = x.shape[-3:]
    out_sp = tuple(n * f for n, f in zip(spatial, factor))
    mats = [interp_matrix(n, m, x.dtype) if n != m else None for n, m in zip(spatial, out_sp)]
    nd = x.ndim

    def apply(a, transpose):
        for k, A in enumerate(mats):
            if A is None:
                continue
            ax = nd - 3 + k
            M = A.T if transpose else A
            a = np.moveaxis(np.tensordot(a, M, axes=([ax], [1])), -1, ax)
        return np.ascontiguousarray(a)

    return make_result(apply(x.data, False), (x,), lambda g: (apply(g, True),), "upsample_trilinear")


# --------------------------------------------------------------------------
# Gaussian filtering (used by the SSIM loss)
# --------------------------------------------------------------------------


def gaussian_window(size: int, sigma: float) -> np.ndarray:
    if size < 1 or size % 2 == 0:
        raise ValueError(f"window size must be a positive odd integer, got {size}")
    r = np.arange(size) - size // 2
    g = np.exp(-(r.astype(np.float64) ** 2) / (2 * sigma * sigma))
    return g / g.sum()


def filter2d_valid(a: np.ndarray, g: np.ndarray) -> np.ndarray:
    """Separable 'valid' correlation of the last two axes with 1-D kernel ``g``."""
    g = g.astype(a.dtype)
    out = sliding_window_view(a, g.size, axis=-2) @ g
    out = sliding_window_view(out, g.size, axis=-1) @ g
    return out


def gaussian_filter2d(x: Tensor, size: int = 11, sigma: float = 1.5) -> Tensor:
    """Gaussian-weighted local mean over the last two axes, 'valid' extent."""
    H, W = x.shape[-2:]
    if H < size or W < size:
        raise DimensionError(f"slice {H}x{W} is smaller than the {size}x{size} window")
    g = gaussian_window(size, sigma).astype(x.dtype)
    out = filter2d_valid(x.data, g)

    def backward(grad):
        # Transpose of valid correlation: scatter along each axis.
        t = np.zeros(grad.shape[:-1] + (W,), dtype=grad.dtype)
        wo = grad.shape[-1]
        for k in range(size):
            t[..., k : k + wo] += g[k] * grad
        full = np.zeros(x.shape, dtype=grad.dtype)
        ho = grad.shape[-2]
        for k in range(size):
            full[..., k : k + ho, :] += g[k] * t
        return (full,)

    return make_result(out, (x,), backward, "gaussian_filter2d")
