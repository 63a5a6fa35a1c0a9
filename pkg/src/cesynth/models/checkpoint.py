"""Model checkpoint files.

Layout::

    8 bytes   magic b"CESYNCKP"
    4 bytes   format version, uint32 little-endian
    8 bytes   header length N, uint64 little-endian
    N bytes   UTF-8 JSON header: model kind + config echo, tensor manifest
              (name, shape, byte offset into payload), free-form ``extra``
    payload   raw little-endian float32 tensors, concatenated

The manifest covers parameters (``param/<name>``), batch-norm running
statistics (``bn/<name>/mean|var``) and any caller arrays (``extra/<name>``,
used for optimizer state).
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .hrnet import HRNet3D, ModelConfig
from .layers import Module
from .unet import UNet3D, UNet3DConfig

MAGIC = b"CESYNCKP"
FORMAT_VERSION = 1
_LE_F32 = np.dtype("<f4")


class CheckpointError(ValueError):
    pass


@dataclass
class Checkpoint:
    model: Module
    extra: dict = field(default_factory=dict)
    arrays: dict[str, np.ndarray] = field(default_factory=dict)


def model_descriptor(model: Module) -> dict:
    if isinstance(model, HRNet3D):
        return {"kind": "hrnet3d", "config": model.config.to_dict()}
    if isinstance(model, UNet3D):
        return {"kind": "unet3d", "config": model.config.to_dict()}
    raise CheckpointError(f"cannot checkpoint {type(model).__name__}")


def build_from_descriptor(desc: dict) -> Module:
    kind = desc.get("kind")
    if kind == "hrnet3d":
        return HRNet3D(ModelConfig(**desc["config"]))
    if kind == "unet3d":
        return UNet3D(UNet3DConfig(**desc["config"]))
    raise CheckpointError(f"unknown model kind {kind!r}")


def _collect(model: Module, arrays: dict[str, np.ndarray] | None):
    items: list[tuple[str, np.ndarray]] = []
    for name, p in model.named_parameters():
        items.append((f"param/{name}", p.data))
    for name, st in model.named_bn_states():
        if st.initialized:
            items.append((f"bn/{name}/mean", st.mean))
            items.append((f"bn/{name}/var", st.var))
    for name, arr in (arrays or {}).items():
        items.append((f"extra/{name}", np.asarray(arr)))
    return items


def save_checkpoint(path, model: Module, extra: dict | None = None,
                    arrays: dict[str, np.ndarray] | None = None) -> Path:
    path = Path(path)
    manifest = []
    chunks = []
    offset = 0
    for name, arr in _collect(model, arrays):
        buf = np.ascontiguousarray(arr, dtype=_LE_F32).tobytes()
        manifest.append({"name": name, "shape": list(np.shape(arr)), "offset": offset, "nbytes": len(buf)})
        chunks.append(buf)
        offset += len(buf)
    header = {
        "format_version": FORMAT_VERSION,
        "dtype": "float32",
        "endianness": "little",
        "model": model_descriptor(model),
        "tensors": manifest,
        "extra": extra or {},
    }
    hbytes = json.dumps(header, sort_keys=True).encode("utf-8")
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as f:
        f.write(MAGIC)
        f.write(struct.pack("<I", FORMAT_VERSION))
        f.write(struct.pack("<Q", len(hbytes)))
        f.write(hbytes)
        for c in chunks:
            f.write(c)
    return path


def read_header(path) -> tuple[dict, bytes]:
    raw = Path(path).read_bytes()
    if raw[:8] != MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint file (bad magic)")
    (version,) = struct.unpack("<I", raw[8:12])
    if version != FORMAT_VERSION:
        raise CheckpointError(f"{path}: unsupported format version {version}")
    (hlen,) = struct.unpack("<Q", raw[12:20])
    try:
        header = json.loads(raw[20 : 20 + hlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"{path}: corrupt header") from exc
    return header, raw[20 + hlen :]


def load_checkpoint(path) -> Checkpoint:
    header, payload = read_header(path)
    model = build_from_descriptor(header["model"])
    params = dict(model.named_parameters())
    bn = dict(model.named_bn_states())
    arrays: dict[str, np.ndarray] = {}
    seen = set()
    for entry in header["tensors"]:
        start, n = entry["offset"], entry["nbytes"]
        if start + n > len(payload):
            raise CheckpointError(f"{path}: payload truncated at {entry['name']}")
        arr = np.frombuffer(payload[start : start + n], dtype=_LE_F32).astype(np.float32).reshape(entry["shape"])
        kind, _, rest = entry["name"].partition("/")
        if kind == "param":
            if rest not in params or params[rest].shape != arr.shape:
                raise CheckpointError(f"{path}: parameter {rest} missing or mis-shaped in model")
            params[rest].data = arr.copy()
            seen.add(rest)
        elif kind == "bn":
            name, _, stat = rest.rpartition("/")
            setattr(bn[name], stat, arr.copy())
        elif kind == "extra":
            arrays[rest] = arr.copy()
    missing = set(params) - seen
    if missing:
        raise CheckpointError(f"{path}: checkpoint lacks parameters {sorted(missing)[:3]}...")
    return Checkpoint(model, header.get("extra", {}), arrays)
