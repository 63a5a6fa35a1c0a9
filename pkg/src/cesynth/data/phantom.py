"""Synthetic brain studies with known enhancement, used in place of clinical scans.

Every phantom is built from one anatomy:

* an ellipsoidal brain with a smooth tissue field and a central ventricle,
* rim-enhancing spherical tumors (enhancing rim around a weaker core),
* tortuous vessel tubes.

The pre-contrast modalities are distinct functions of that anatomy:

* T1 carries tissue contrast and only faint tumor/vessel darkening,
* T2 marks both tumors and vessels (bright tumors, dark flow voids),
* ADC is a smooth diffusivity field, raised in the ventricle and tumor core
  and lowered in the tumor rim, so it separates rim from core.

CE-T1 equals T1 plus an enhancement field, so ``CE-T1 - T1`` is known
exactly: above ``delta`` on tumor and vessel voxels, at most ``delta / 2``
elsewhere in the brain.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np
from scipy.ndimage import gaussian_filter

from .volume import Study, Volume


class PhantomSpecError(ValueError):
    pass


@dataclass
class PhantomSpec:
    shape: tuple[int, int, int] = (16, 32, 32)
    spacing: tuple[float, float, float] = (1.0, 1.0, 1.0)
    seed: int = 0
    tumor_count: int = 2
    tumor_radius: tuple[float, float] = (2.5, 4.5)
    vessel_count: int = 2
    vessel_radius: float = 1.0
    vessel_length: int = 14
    vessel_tortuosity: float = 0.35
    tumor_rim_amp: float = 0.30
    tumor_core_amp: float = 0.18
    vessel_amp: float = 0.28
    background_amp: float = 0.03
    noise_sigma: float = 0.01
    bias_field: float = 0.05
    delta: float = 0.1

    def __post_init__(self):
        self.shape = tuple(int(s) for s in self.shape)
        self.spacing = tuple(float(s) for s in self.spacing)
        self.tumor_radius = tuple(float(r) for r in self.tumor_radius)
        if len(self.shape) != 3 or min(self.shape) < 3:
            raise PhantomSpecError(f"shape must be three sizes >= 3, got {self.shape}")
        if min(self.tumor_rim_amp, self.tumor_core_amp, self.vessel_amp) <= self.delta:
            raise PhantomSpecError("tumor/vessel enhancement must exceed delta")
        if self.background_amp > self.delta / 2:
            raise PhantomSpecError("background enhancement must stay within delta / 2")
        if not 0 < self.tumor_radius[0] <= self.tumor_radius[1]:
            raise PhantomSpecError(f"bad tumor radius range {self.tumor_radius}")
        if self.tumor_count < 0 or self.vessel_count < 0:
            raise PhantomSpecError("counts must be non-negative")

    def to_dict(self) -> dict:
        d = asdict(self)
        for k in ("shape", "spacing", "tumor_radius"):
            d[k] = list(d[k])
        return d


def _smooth_field(rng, shape, sigma) -> np.ndarray:
    f = gaussian_filter(rng.standard_normal(shape), sigma)
    f -= f.min()
    return f / max(f.max(), 1e-12)


def _place_tumors(rng, spec, coords, brain):
    """Sample sphere centers/radii (voxel units) whose voxels all lie inside ``brain``."""
    z, y, x = coords
    inside = np.argwhere(brain)
    tumors = []
    taken = np.zeros(brain.shape, dtype=bool)
    for _ in range(spec.tumor_count):
        for _attempt in range(200):
            r = rng.uniform(*spec.tumor_radius)
            c = inside[rng.integers(len(inside))] + rng.uniform(-0.5, 0.5, 3)
            # One voxel of clearance around the sphere.
            ball = (z - c[0]) ** 2 + (y - c[1]) ** 2 + (x - c[2]) ** 2 <= (r + 1) ** 2
            if not (ball & ~brain).any() and not (ball & taken).any():
                tumors.append((c, r))
                taken |= ball
                break
        else:
            raise PhantomSpecError(f"could not fit {spec.tumor_count} tumors of radius {spec.tumor_radius} "
                                   f"inside a brain of shape {spec.shape}")
    return tumors


def _vessels(rng, spec, brain, coords):
    z, y, x = coords
    mask = np.zeros(spec.shape, dtype=bool)
    inside = np.argwhere(brain)
    for _ in range(spec.vessel_count):
        p = inside[rng.integers(len(inside))].astype(np.float64)
        d = rng.standard_normal(3)
        d /= np.linalg.norm(d)
        for _step in range(spec.vessel_length):
            near = (z - p[0]) ** 2 + (y - p[1]) ** 2 + (x - p[2]) ** 2 <= spec.vessel_radius**2
            mask |= near
            d = d + spec.vessel_tortuosity * rng.standard_normal(3)
            d /= np.linalg.norm(d)
            p = np.clip(p + d, 0, np.array(spec.shape) - 1)
    return mask & brain


def generate_phantom(spec: PhantomSpec, study_id: str | None = None) -> Study:
    """Deterministic synthetic study for ``spec.seed``."""
    rng = np.random.default_rng(spec.seed)
    D, H, W = spec.shape
    coords = np.meshgrid(np.arange(D, dtype=np.float64), np.arange(H, dtype=np.float64),
                         np.arange(W, dtype=np.float64), indexing="ij")
    z, y, x = coords
    centre = (np.array(spec.shape) - 1) / 2
    semi = np.array([0.46 * D, 0.42 * H, 0.38 * W])
    wobble = 1.0 + 0.04 * (_smooth_field(rng, spec.shape, 4.0) - 0.5)
    ell = ((z - centre[0]) / semi[0]) ** 2 + ((y - centre[1]) / semi[1]) ** 2 + ((x - centre[2]) / semi[2]) ** 2
    brain = ell <= wobble
    vent = (((z - centre[0]) / (0.3 * semi[0])) ** 2 + ((y - centre[1]) / (0.35 * semi[1])) ** 2
            + ((x - centre[2]) / (0.18 * semi[2])) ** 2) <= 1.0

    tissue = _smooth_field(rng, spec.shape, 1.5)
    diffusivity = _smooth_field(rng, spec.shape, 3.0)

    rim = np.zeros(spec.shape, dtype=bool)
    core = np.zeros(spec.shape, dtype=bool)
    for c, r in _place_tumors(rng, spec, coords, brain):
        dist = np.sqrt((z - c[0]) ** 2 + (y - c[1]) ** 2 + (x - c[2]) ** 2)
        core |= dist <= 0.55 * r
        rim |= dist <= r
    rim &= ~core
    tumor = (rim | core) & brain
    vessel = _vessels(rng, spec, brain, coords) & ~tumor & ~vent
    vent &= ~tumor

    bias = 1.0 + spec.bias_field * (y - centre[1]) / max(H / 2, 1)

    def noise():
        return spec.noise_sigma * rng.standard_normal(spec.shape)

    t1 = (0.30 + 0.25 * tissue) * bias - 0.15 * vent - 0.06 * tumor - 0.04 * vessel + noise()
    t2 = 0.25 + 0.35 * (1 - tissue) + 0.35 * tumor + 0.45 * vent - 0.20 * vessel + noise()
    adc = 0.30 + 0.10 * diffusivity + 0.45 * vent + 0.35 * core - 0.10 * rim + noise()
    enh = (spec.background_amp * tissue * ~(tumor | vessel) + spec.tumor_rim_amp * (rim & tumor)
           + spec.tumor_core_amp * (core & tumor) + spec.vessel_amp * vessel)

    t1 = np.clip(t1, 0.0, 1.0) * brain
    t2 = np.clip(t2, 0.0, 1.0) * brain
    adc = np.clip(adc, 0.0, 1.0) * brain
    ce = (t1 + enh) * brain
    if ce.max() > 1.0:
        raise PhantomSpecError("enhancement pushes CE-T1 above 1; lower the amplitudes")

    def vol(a, name):
        return Volume(a.astype(np.float32), spec.spacing, name)

    sid = study_id if study_id is not None else f"{spec.seed:04d}"
    study = Study(
        sid,
        t1=vol(t1, "t1"),
        t2=vol(t2, "t2"),
        adc=vol(adc, "adc"),
        ce_t1=vol(ce, "ce_t1"),
        brain_mask=vol(brain, "brain_mask"),
        tumor_mask=vol(tumor, "tumor_mask"),
        meta={"vessel_mask": vessel.astype(np.float32), "phantom": spec.to_dict()},
    )
    return study


def enhancement_contract(study: Study, delta: float = 0.1) -> dict[str, float]:
    """Extremes of ``CE-T1 - T1`` on tumor, vessel and remaining brain voxels."""
    diff = study.ce_t1.data.astype(np.float64) - study.t1.data.astype(np.float64)
    brain = study.brain_mask.data > 0
    tumor = study.tumor_mask.data > 0 if study.tumor_mask is not None else np.zeros_like(brain)
    vessel = study.meta.get("vessel_mask", np.zeros(brain.shape)) > 0
    rest = brain & ~tumor & ~vessel
    return {
        "tumor_min": float(diff[tumor].min()) if tumor.any() else np.inf,
        "vessel_min": float(diff[vessel].min()) if vessel.any() else np.inf,
        "background_max": float(diff[rest].max()) if rest.any() else -np.inf,
    }


def phantom_cohort(count: int, base: PhantomSpec | None = None, seed: int = 0) -> list[Study]:
    """``count`` phantoms with per-study seeds derived from ``seed``."""
    base = base or PhantomSpec()
    seeds = np.random.SeedSequence(seed).generate_state(count)
    out = []
    for i, s in enumerate(seeds):
        spec = PhantomSpec(**{**asdict(base), "seed": int(s)})
        out.append(generate_phantom(spec, study_id=f"{i:04d}"))
    return out
