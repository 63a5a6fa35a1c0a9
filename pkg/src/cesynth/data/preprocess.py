"""Resampling, histogram equalization and brain-region intensity normalization."""

from __future__ import annotations

import numpy as np

from ..volgrid.ops import resample_array
from .volume import DataError, Study, Volume, MODALITIES


def resize_trilinear(v: Volume, new_shape) -> Volume:
    """Trilinear resampling with half-pixel centers; spacing scales inversely with size."""
    new_shape = tuple(int(n) for n in new_shape)
    if len(new_shape) != 3 or min(new_shape) < 1:
        raise DataError(f"new shape must have three positive entries, got {new_shape}")
    data = resample_array(v.data.astype(np.float64), new_shape).astype(np.float32)
    spacing = tuple(s * o / n for s, o, n in zip(v.spacing, v.shape, new_shape))
    return Volume(data, spacing, v.modality)


def resize_mask(v: Volume, new_shape) -> Volume:
    r = resize_trilinear(v, new_shape)
    return r.with_data((r.data >= 0.5).astype(np.float32))


def _mask(mask, shape) -> np.ndarray:
    m = np.asarray(mask) > 0
    if m.shape != tuple(shape):
        raise DataError(f"mask shape {m.shape} differs from volume {tuple(shape)}")
    if not m.any():
        raise DataError("empty mask")
    return m


def equalize(v: Volume, mask, bins: int = 256) -> Volume:
    """Histogram equalization of the in-mask intensities.

    Values map through the piecewise-linear empirical CDF over ``bins`` equal
    bins, so output lies in [0, 1]; a constant region maps to 1.0.  Voxels
    outside the mask become 0.
    """
    m = _mask(mask, v.shape)
    vals = v.data[m].astype(np.float64)
    lo, hi = vals.min(), vals.max()
    out = np.zeros(v.shape, dtype=np.float64)
    if hi <= lo:
        out[m] = 1.0
    else:
        counts, edges = np.histogram(vals, bins=bins, range=(lo, hi))
        cdf = np.concatenate([[0.0], np.cumsum(counts) / vals.size])
        out[m] = np.interp(vals, edges, cdf)
    return v.with_data(out.astype(np.float32))


def normalize(v: Volume, mask) -> Volume:
    """Linear rescale so in-mask min -> 0 and max -> 1; out-of-mask -> 0."""
    m = _mask(mask, v.shape)
    vals = v.data[m].astype(np.float64)
    lo, hi = vals.min(), vals.max()
    if hi <= lo:
        raise DataError("cannot normalize a constant region")
    out = np.zeros(v.shape, dtype=np.float64)
    out[m] = (vals - lo) / (hi - lo)
    return v.with_data(out.astype(np.float32))


def preprocess_study(study: Study, shape=None, equalization: bool = True) -> Study:
    """resize -> equalize -> normalize for every intensity volume of ``study``."""
    brain = study.brain_mask
    tumor = study.tumor_mask
    if shape is not None:
        brain = resize_mask(brain, shape)
        tumor = resize_mask(tumor, shape) if tumor is not None else None
        if tumor is not None:
            tumor = tumor.with_data(tumor.data * brain.data)
    changes = {"brain_mask": brain, "tumor_mask": tumor}
    for name in MODALITIES + ("ce_t1",):
        v = getattr(study, name)
        if shape is not None:
            v = resize_trilinear(v, shape)
        if equalization:
            v = equalize(v, brain.data)
        changes[name] = normalize(v, brain.data)
    return study.with_volumes(**changes)
