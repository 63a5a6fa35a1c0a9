"""Slab sampling for training and block-wise full-volume inference."""

from __future__ import annotations

from typing import NamedTuple, Sequence

import numpy as np

from ..losses import make_mask
from ..volgrid import Tensor
from .volume import MODALITIES, DataError, Study, Volume

SLAB = 3


class Patch(NamedTuple):
    inputs: np.ndarray  # [M, 3, H, W]
    target: np.ndarray  # [1, 3, H, W]
    mask: np.ndarray  # [1, 3, H, W]
    offset: int


def sample_patch(study: Study, rng: np.random.Generator, mask: np.ndarray | None = None,
                 modalities: Sequence[str] = MODALITIES, delta: float = 0.1, depth: int = SLAB) -> Patch:
    """Cut a ``depth``-slice slab at a uniformly random offset in ``[0, D - depth]``."""
    D = study.shape[0]
    if D < depth:
        raise DataError(f"study {study.id} has depth {D} < {depth}")
    if mask is None:
        mask = make_mask(study.ce_t1.data, study.t1.data, delta)
    d = int(rng.integers(0, D - depth + 1))
    sl = slice(d, d + depth)
    x = study.inputs(modalities)[:, sl]
    return Patch(np.ascontiguousarray(x), study.ce_t1.data[None, sl].copy(), np.asarray(mask)[None, sl].copy(), d)


class PatchSampler:
    """Draws batches of slabs from a fixed set of studies.

    Enhancement masks are computed once here, not per step.  The generator is
    owned by the sampler so a checkpoint can capture and restore its state.
    """

    def __init__(self, studies: Sequence[Study], modalities: Sequence[str] = MODALITIES, delta: float = 0.1,
                 seed: int = 0):
        if not studies:
            raise DataError("empty training set")
        self.studies = list(studies)
        self.modalities = tuple(modalities)
        self.masks = [make_mask(s.ce_t1.data, s.t1.data, delta) for s in self.studies]
        self.rng = np.random.default_rng(seed)

    def batch(self, size: int) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        n = len(self.studies)
        picks = self.rng.choice(n, size=size, replace=size > n)
        patches = [sample_patch(self.studies[i], self.rng, self.masks[i], self.modalities) for i in picks]
        return (np.stack([p.inputs for p in patches]), np.stack([p.target for p in patches]),
                np.stack([p.mask for p in patches]))

    def get_state(self) -> dict:
        return self.rng.bit_generator.state

    def set_state(self, state: dict) -> None:
        self.rng.bit_generator.state = state


def block_offsets(depth: int, block: int = SLAB) -> list[int]:
    """Consecutive non-overlapping blocks; a final back-aligned block covers any remainder."""
    if depth < block:
        raise DataError(f"depth {depth} < block size {block}")
    offs = list(range(0, depth - block + 1, block))
    if depth % block:
        offs.append(depth - block)
    return offs


def stitch_inference(model, study: Study, modalities: Sequence[str] = MODALITIES, batch: int = 4) -> Volume:
    """Eval-mode prediction of the whole volume from 3-slice blocks, clamped to [0, 1].

    Blocks are written in order, so the back-aligned last block wins on overlap.
    """
    x = study.inputs(modalities)
    offs = block_offsets(study.shape[0])
    out = np.zeros(study.shape, dtype=np.float32)
    for i in range(0, len(offs), batch):
        chunk = offs[i : i + batch]
        xb = np.stack([x[:, d : d + SLAB] for d in chunk])
        pred = model.forward(Tensor(xb, dtype=np.float32), train=False).data
        for k, d in enumerate(chunk):
            out[d : d + SLAB] = pred[k, 0]
    return Volume(np.clip(out, 0.0, 1.0), study.t1.spacing, "synthetic_ce_t1")
