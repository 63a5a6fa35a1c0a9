"""Minimal dense tensors with a reverse-mode tape and the 3D kernels the generator needs."""

from .gradcheck import GradCheckReport, gradient_check, relative_error
from .ops import (
    BatchNormState,
    ConvSpec,
    DimensionError,
    absolute,
    add,
    batch_norm3d,
    clamp,
    concat_channels,
    conv3d,
    div,
    gaussian_filter2d,
    interp_matrix,
    mean,
    mul,
    neg,
    reduce,
    relu,
    reshape,
    resample_array,
    scalar_mul,
    slice_channels,
    square,
    sub,
    sum_,
    upsample_trilinear,
)
from .tensor import Tape, TapeError, Tensor, active_tape, checked, default_dtype, no_tape, precision

__all__ = [name for name in dir() if not name.startswith("_")]
