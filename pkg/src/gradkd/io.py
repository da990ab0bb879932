"""Checkpoints, heatmap export and JSON-lines metrics logging.

Checkpoint layout (all integers little-endian)::

    b"GKD1"  u32 version  u32 n  <n bytes UTF-8 JSON config>  u64 step
    u32 n_tensors   then per tensor:
        u16 name_len  name  u8 ndim  u32 dims[ndim]  f64 values[prod(dims)]
    u32 n_optimizer_tensors  (same per-tensor layout)
"""

from __future__ import annotations

import json
import math
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .data import atomic_write, encode_pgm, encode_ppm, quantize
from .detector import DetectorConfig, DetectorModel
from .tensor import Tensor

MAGIC = b"GKD1"
VERSION = 1


class CheckpointError(ValueError):
    pass


@dataclass
class Checkpoint:
    model: DetectorModel
    step: int = 0
    optimizer_state: dict[str, np.ndarray] = field(default_factory=dict)
    meta: dict = field(default_factory=dict)


def _pack_tensors(table: dict[str, np.ndarray]) -> bytes:
    out = [struct.pack("<I", len(table))]
    for name, arr in table.items():
        raw = name.encode("utf-8")
        arr = np.asarray(arr, dtype="<f8")
        out.append(struct.pack("<H", len(raw)) + raw + struct.pack("<B", arr.ndim))
        out.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        out.append(np.ascontiguousarray(arr).tobytes())
    return b"".join(out)


def save_checkpoint(model: DetectorModel, path, step: int = 0, optimizer_state=None, meta=None) -> None:
    blob = json.dumps({"detector": model.config.to_dict(), **(meta or {})}, sort_keys=True).encode("utf-8")
    parts = [MAGIC, struct.pack("<II", VERSION, len(blob)), blob, struct.pack("<Q", int(step)),
             _pack_tensors(model.state_arrays()), _pack_tensors(optimizer_state or {})]
    atomic_write(Path(path), b"".join(parts))


class _Reader:
    def __init__(self, raw: bytes, path):
        self.raw, self.pos, self.path = raw, 0, path

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.raw):
            raise CheckpointError(f"{self.path}: truncated checkpoint (need {n} bytes at offset {self.pos})")
        chunk = self.raw[self.pos:self.pos + n]
        self.pos += n
        return chunk

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))

    def tensors(self) -> dict[str, np.ndarray]:
        (count,) = self.unpack("<I")
        table = {}
        for _ in range(count):
            (nlen,) = self.unpack("<H")
            name = self.take(nlen).decode("utf-8")
            (ndim,) = self.unpack("<B")
            shape = self.unpack(f"<{ndim}I") if ndim else ()
            n = int(np.prod(shape)) if shape else 1
            table[name] = np.frombuffer(self.take(8 * n), dtype="<f8").astype(np.float64).reshape(shape)
        return table


def load_checkpoint(path, config: DetectorConfig | None = None) -> Checkpoint:
    """Load a checkpoint; with ``config`` the stored tensors must match it."""
    raw = Path(path).read_bytes()
    r = _Reader(raw, path)
    magic = r.take(4)
    if magic != MAGIC:
        raise CheckpointError(f"{path}: bad magic {magic!r}, expected {MAGIC!r}")
    version, blob_len = r.unpack("<II")
    if version != VERSION:
        raise CheckpointError(f"{path}: unsupported checkpoint version {version}")
    meta = json.loads(r.take(blob_len).decode("utf-8"))
    (step,) = r.unpack("<Q")
    table = r.tensors()
    opt = r.tensors()
    if r.pos != len(raw):
        raise CheckpointError(f"{path}: {len(raw) - r.pos} trailing bytes")

    stored_cfg = DetectorConfig.from_dict(meta.pop("detector"))
    cfg = config or stored_cfg
    from .detector import build_detector
    template = build_detector(cfg, seed=0)
    for name, p in template.params.items():
        if name not in table:
            raise CheckpointError(f"{path}: tensor {name!r} missing from checkpoint")
        if table[name].shape != p.shape:
            raise CheckpointError(f"{path}: tensor {name!r} has shape {table[name].shape}, "
                                  f"config expects {p.shape}")
    extra = sorted(set(table) - set(template.params))
    if extra:
        raise CheckpointError(f"{path}: unexpected tensor {extra[0]!r} for this config")
    model = DetectorModel(cfg, {k: Tensor(table[k].copy(), requires_grad=True) for k in template.params})
    return Checkpoint(model, step, opt, meta)


# ------------------------------------------------------------------ heatmaps


def _ramp(q: np.ndarray) -> np.ndarray:
    """Blue (0) to red (255) colour ramp."""
    q = q.astype(np.int32)
    return np.stack([q, np.zeros_like(q), 255 - q], axis=-1).astype(np.uint8)


def export_heatmap(values, path, scale: int = 1, color: bool = False) -> list[Path]:
    """Write a [0, 1] map as PGM (and as a blue-to-red PPM when ``color``).

    Gray levels are round-half-up quantised; ``scale`` is a
    nearest-neighbour upscaling factor. Returns the written paths.
    """
    m = np.asarray(getattr(values, "data", values), dtype=float)
    if m.ndim != 2:
        raise ValueError(f"heatmap must be 2-D, got shape {m.shape}")
    if not np.all(np.isfinite(m)) or m.min() < 0.0 or m.max() > 1.0:
        raise ValueError("heatmap values must lie in [0, 1]")
    if scale < 1:
        raise ValueError("scale must be >= 1")
    q = quantize(m)
    if scale > 1:
        q = q.repeat(scale, axis=0).repeat(scale, axis=1)
    path = Path(path)
    pgm = path.with_suffix(".pgm")
    atomic_write(pgm, encode_pgm(q))
    written = [pgm]
    if color:
        ppm = path.with_suffix(".ppm")
        atomic_write(ppm, encode_ppm(_ramp(q)))
        written.append(ppm)
    return written


# ------------------------------------------------------------------- metrics


def _fmt(v) -> str:
    if isinstance(v, bool) or v is None:
        return json.dumps(v)
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    if isinstance(v, (float, np.floating)):
        v = float(v)
        if not math.isfinite(v):
            raise ValueError(f"cannot log non-finite value {v}")
        s = format(v, ".17g")
        return s if any(ch in s for ch in ".en") else s + ".0"
    if isinstance(v, str):
        return json.dumps(v)
    raise TypeError(f"metrics record values must be numbers or strings, got {type(v).__name__}")


def format_record(record: dict) -> str:
    return "{" + ", ".join(f"{json.dumps(str(k))}: {_fmt(v)}" for k, v in record.items()) + "}"


def log_metrics(record: dict, path) -> None:
    """Append one flat record as a JSON line (floats with 17 significant digits)."""
    line = format_record(record) + "\n"
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "a", encoding="utf-8") as fh:
        fh.write(line)


def read_metrics(path) -> list[dict]:
    with open(path, encoding="utf-8") as fh:
        return [json.loads(line) for line in fh if line.strip()]
