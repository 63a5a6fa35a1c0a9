"""Volumes, studies and the on-disk study directory format.

A study lives in ``study_<id>/`` with one raw float32 file per volume and a
line-oriented ``manifest.txt``::

    id=0003
    shape=16,32,32
    spacing=1.0,1.0,1.0
    dtype=float32
    endianness=little
    volumes=t1,t2,adc,ce_t1,brain_mask,tumor_mask

A ``<volume>.shape=`` line may override the shape of a single volume; any
disagreement with ``shape`` is rejected on load.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

MODALITIES = ("t1", "t2", "adc")
REQUIRED = ("t1", "t2", "adc", "ce_t1", "brain_mask")
OPTIONAL = ("tumor_mask",)
REQUIRED_KEYS = ("shape", "spacing", "dtype", "endianness")


class DataError(ValueError):
    pass


@dataclass
class Volume:
    data: np.ndarray
    spacing: tuple[float, float, float] = (1.0, 1.0, 1.0)
    modality: str = ""

    def __post_init__(self):
        self.data = np.asarray(self.data, dtype=np.float32)
        if self.data.ndim != 3:
            raise DataError(f"volume must be 3-D (D, H, W), got shape {self.data.shape}")
        self.spacing = tuple(float(s) for s in self.spacing)

    @property
    def shape(self) -> tuple[int, int, int]:
        return self.data.shape

    def __array__(self, dtype=None, copy=None):
        return self.data if dtype is None else self.data.astype(dtype)

    def with_data(self, data, modality: str | None = None) -> "Volume":
        return Volume(data, self.spacing, self.modality if modality is None else modality)


@dataclass
class Study:
    id: str
    t1: Volume
    t2: Volume
    adc: Volume
    ce_t1: Volume
    brain_mask: Volume
    tumor_mask: Volume | None = None
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.validate()

    def volumes(self) -> dict[str, Volume]:
        out = {name: getattr(self, name) for name in REQUIRED}
        if self.tumor_mask is not None:
            out["tumor_mask"] = self.tumor_mask
        return out

    @property
    def shape(self) -> tuple[int, int, int]:
        return self.t1.shape

    def validate(self) -> None:
        for name, v in self.volumes().items():
            if v.shape != self.t1.shape:
                raise DataError(f"study {self.id}: {name} has shape {v.shape}, t1 has {self.t1.shape}")
            if v.spacing != self.t1.spacing:
                raise DataError(f"study {self.id}: {name} spacing {v.spacing} differs from t1 {self.t1.spacing}")
        if self.tumor_mask is not None and np.any((self.tumor_mask.data > 0) & ~(self.brain_mask.data > 0)):
            raise DataError(f"study {self.id}: tumor mask extends outside the brain mask")

    def inputs(self, modalities=MODALITIES) -> np.ndarray:
        """Stack the requested input modalities into ``[M, D, H, W]``."""
        return np.stack([getattr(self, m).data for m in modalities])

    def with_volumes(self, **changes) -> "Study":
        return replace(self, **changes)


def _fmt(values) -> str:
    return ",".join(str(v) for v in values)


def save_study(study: Study, root) -> Path:
    """Write ``root/study_<id>/``; returns that directory."""
    d = Path(root) / f"study_{study.id}"
    d.mkdir(parents=True, exist_ok=True)
    vols = study.volumes()
    lines = [
        f"id={study.id}",
        f"shape={_fmt(study.shape)}",
        f"spacing={_fmt(study.t1.spacing)}",
        "dtype=float32",
        "endianness=little",
        f"volumes={_fmt(vols)}",
    ]
    for name, v in vols.items():
        v.data.astype("<f4").tofile(d / f"{name}.raw")
    (d / "manifest.txt").write_text("\n".join(lines) + "\n")
    return d


def parse_manifest(text: str) -> dict[str, str]:
    out = {}
    for n, raw in enumerate(text.splitlines(), 1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise DataError(f"manifest line {n}: expected key=value, got {raw!r}")
        k, v = line.split("=", 1)
        out[k.strip()] = v.strip()
    return out


def load_study(path) -> Study:
    d = Path(path)
    mpath = d / "manifest.txt"
    if not mpath.is_file():
        raise DataError(f"{d}: missing manifest.txt")
    m = parse_manifest(mpath.read_text())
    for key in REQUIRED_KEYS:
        if key not in m:
            raise DataError(f"{mpath}: missing required key {key!r}")
    try:
        shape = tuple(int(x) for x in m["shape"].split(","))
        spacing = tuple(float(x) for x in m["spacing"].split(","))
    except ValueError as exc:
        raise DataError(f"{mpath}: corrupt shape/spacing") from exc
    if len(shape) != 3 or min(shape) < 1 or len(spacing) != 3:
        raise DataError(f"{mpath}: shape/spacing must have three positive entries")
    if m["dtype"] != "float32":
        raise DataError(f"{mpath}: unsupported dtype {m['dtype']!r}")
    order = {"little": "<", "big": ">"}.get(m["endianness"])
    if order is None:
        raise DataError(f"{mpath}: endianness must be 'little' or 'big'")
    listed = [v for v in m.get("volumes", _fmt(REQUIRED)).split(",") if v]
    for name in REQUIRED:
        if name not in listed:
            raise DataError(f"{mpath}: required modality {name!r} not listed")

    vols = {}
    for name in listed:
        if name not in REQUIRED + OPTIONAL:
            raise DataError(f"{mpath}: unknown volume {name!r}")
        vshape = shape
        if f"{name}.shape" in m:
            vshape = tuple(int(x) for x in m[f"{name}.shape"].split(","))
            if vshape != shape:
                raise DataError(f"{mpath}: {name} shape {vshape} does not match study shape {shape}")
        f = d / f"{name}.raw"
        if not f.is_file():
            raise DataError(f"{d}: missing volume file {f.name}")
        arr = np.fromfile(f, dtype=order + "f4")
        if arr.size != int(np.prod(vshape)):
            raise DataError(f"{f}: {arr.size} values on disk, shape {vshape} needs {int(np.prod(vshape))}")
        vols[name] = Volume(arr.reshape(vshape).astype(np.float32), spacing, name)
    return Study(m.get("id", d.name.removeprefix("study_")), **vols)


def load_dataset(root) -> list[Study]:
    dirs = sorted(p for p in Path(root).iterdir() if p.is_dir() and p.name.startswith("study_"))
    if not dirs:
        raise DataError(f"{root}: no study_* directories")
    return [load_study(p) for p in dirs]
