"""Training objective: global MAE, slice-wise SSIM and mask-weighted local MAE."""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from .volgrid import (
    DimensionError,
    Tensor,
    absolute,
    add,
    div,
    gaussian_filter2d,
    mul,
    reduce,
    scalar_mul,
    square,
    sub,
)
from .volgrid.ops import filter2d_valid, gaussian_window

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class LossWeights:
    lambda1: float = 1.0
    lambda2: float = 1.0
    lambda3: float = 1.0
    delta: float = 0.1

    def __post_init__(self):
        if min(self.lambda1, self.lambda2, self.lambda3) < 0:
            raise ValueError(f"loss weights must be non-negative, got {self}")
        if not 0 <= self.delta <= 1:
            raise ValueError(f"delta must lie in [0, 1], got {self.delta}")

    def scaled(self, c: float) -> "LossWeights":
        return LossWeights(self.lambda1 * c, self.lambda2 * c, self.lambda3 * c, self.delta)


@dataclass(frozen=True)
class SsimParams:
    window: int = 11
    sigma: float = 1.5
    k1: float = 0.01
    k2: float = 0.03
    dynamic_range: float = 1.0

    def __post_init__(self):
        if self.window < 1 or self.window % 2 == 0:
            raise ValueError(f"SSIM window must be odd, got {self.window}")
        if self.k1 <= 0 or self.k2 <= 0 or self.dynamic_range <= 0:
            raise ValueError("SSIM constants must be positive")

    @property
    def c1(self) -> float:
        return (self.k1 * self.dynamic_range) ** 2

    @property
    def c2(self) -> float:
        return (self.k2 * self.dynamic_range) ** 2


DEFAULT_SSIM = SsimParams()


def _data(x) -> np.ndarray:
    return x.data if isinstance(x, Tensor) else np.asarray(x)


def _check_same(a, b, what: str) -> None:
    if np.shape(a) != np.shape(b):
        raise DimensionError(f"{what}: shape mismatch {np.shape(a)} vs {np.shape(b)}")


# --------------------------------------------------------------------------
# Pixel-wise terms
# --------------------------------------------------------------------------


def mae_loss(pred: Tensor, target) -> Tensor:
    _check_same(pred, target, "mae_loss")
    return reduce(sub(pred, Tensor(_data(target), dtype=pred.dtype)), "mean_abs")


def make_mask(ce_t1, t1, delta: float = 0.1):
    """Binary mask of voxels where ``ce_t1 - t1 > delta`` (no morphology).

    Returns a float32 array, or a ``Volume`` when ``ce_t1`` is one.
    """
    a, b = np.asarray(ce_t1, dtype=np.float64), np.asarray(t1, dtype=np.float64)
    _check_same(a, b, "make_mask")
    mask = ((a - b) > delta).astype(np.float32)
    if hasattr(ce_t1, "with_data"):
        return ce_t1.with_data(mask, modality="enhancement_mask")
    return mask


def local_loss(pred: Tensor, target, mask) -> Tensor:
    """Mean absolute error over the voxels where ``mask`` is set.

    An empty mask yields a constant zero (and a warning).
    """
    m = np.asarray(_data(mask), dtype=pred.dtype)
    _check_same(pred, target, "local_loss")
    _check_same(pred, m, "local_loss mask")
    count = float(m.sum())
    if count == 0:
        log.warning("local_loss: empty mask, term set to 0")
        return Tensor(np.zeros((), dtype=pred.dtype))
    err = absolute(sub(pred, Tensor(_data(target), dtype=pred.dtype)))
    return scalar_mul(reduce(mul(err, Tensor(m)), "sum"), 1.0 / count)


# --------------------------------------------------------------------------
# SSIM
# --------------------------------------------------------------------------


def ssim_index_map(a: np.ndarray, b: np.ndarray, params: SsimParams = DEFAULT_SSIM) -> np.ndarray:
    """Local SSIM values over the trailing two axes ('valid' window placement)."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    _check_same(a, b, "ssim")
    H, W = a.shape[-2:]
    if H < params.window or W < params.window:
        raise DimensionError(f"slice {H}x{W} is smaller than the {params.window}x{params.window} window")
    g = gaussian_window(params.window, params.sigma)
    mu_a = filter2d_valid(a, g)
    mu_b = filter2d_valid(b, g)
    var_a = filter2d_valid(a * a, g) - mu_a**2
    var_b = filter2d_valid(b * b, g) - mu_b**2
    cov = filter2d_valid(a * b, g) - mu_a * mu_b
    c1, c2 = params.c1, params.c2
    return ((2 * mu_a * mu_b + c1) * (2 * cov + c2)) / ((mu_a**2 + mu_b**2 + c1) * (var_a + var_b + c2))


def ssim_map(a: np.ndarray, b: np.ndarray, params: SsimParams = DEFAULT_SSIM) -> float:
    """Mean SSIM of two 2-D slices using Gaussian-weighted local statistics."""
    if np.ndim(a) != 2:
        raise DimensionError(f"ssim_map expects 2-D slices, got shape {np.shape(a)}")
    return float(ssim_index_map(a, b, params).mean())


def ssim_loss(pred: Tensor, target, params: SsimParams = DEFAULT_SSIM) -> Tensor:
    """``mean over slices of (1 - SSIM)`` for ``pred[B, 1, D, H, W]``; one slice per (batch, depth)."""
    _check_same(pred, target, "ssim_loss")
    y = Tensor(_data(target), dtype=pred.dtype)
    w, s = params.window, params.sigma
    mu_x = gaussian_filter2d(pred, w, s)
    mu_y = gaussian_filter2d(y, w, s)
    var_x = sub(gaussian_filter2d(square(pred), w, s), square(mu_x))
    var_y = sub(gaussian_filter2d(square(y), w, s), square(mu_y))
    cov = sub(gaussian_filter2d(mul(pred, y), w, s), mul(mu_x, mu_y))
    num = mul(add(scalar_mul(mul(mu_x, mu_y), 2.0), params.c1), add(scalar_mul(cov, 2.0), params.c2))
    den = mul(add(add(square(mu_x), square(mu_y)), params.c1), add(add(var_x, var_y), params.c2))
    # Every slice has the same number of windows, so the global mean is the mean of slice means.
    return sub(Tensor(np.ones((), dtype=pred.dtype)), reduce(div(num, den), "mean"))


# --------------------------------------------------------------------------
# Composite objective
# --------------------------------------------------------------------------


def total_loss(pred: Tensor, target, t1, weights: LossWeights, mask=None,
               ssim_params: SsimParams = DEFAULT_SSIM) -> tuple[Tensor, dict[str, float]]:
    """``lambda1 * MAE + lambda2 * SSIM-loss + lambda3 * local`` plus a per-term breakdown.

    ``mask`` defaults to :func:`make_mask` of ``target`` and ``t1``.
    """
    if mask is None:
        mask = make_mask(_data(target), _data(t1), weights.delta)
    l_mae = mae_loss(pred, target)
    l_ssim = ssim_loss(pred, target, ssim_params)
    l_local = local_loss(pred, target, mask)
    total = add(add(scalar_mul(l_mae, weights.lambda1), scalar_mul(l_ssim, weights.lambda2)),
                scalar_mul(l_local, weights.lambda3))
    parts = {
        "l_mae": float(l_mae.data),
        "l_ssim": float(l_ssim.data),
        "l_local": float(l_local.data),
        "total": float(total.data),
    }
    return total, parts
