"""Volume I/O, preprocessing, phantom generation and patch handling."""

from .patches import Patch, PatchSampler, block_offsets, sample_patch, stitch_inference
from .phantom import PhantomSpec, PhantomSpecError, enhancement_contract, generate_phantom, phantom_cohort
from .preprocess import equalize, normalize, preprocess_study, resize_mask, resize_trilinear
from .volume import (
    MODALITIES,
    DataError,
    Study,
    Volume,
    load_dataset,
    load_study,
    parse_manifest,
    save_study,
)

__all__ = [name for name in dir() if not name.startswith("_")]
