"""Deterministic synthetic shapes dataset and its on-disk format.

Layout written by :func:`generate_dataset`::

    <root>/
      dataset.json             generation parameters
      train/annotations.jsonl  one {"file": ..., "boxes": [[x0, y0, x1, y1, cls], ...]} per image
      train/images/000000.pgm  binary PGM (P5, maxval 255)
      val/...

Boxes are in pixel-edge coordinates: a box (x0, y0, x1, y1) covers pixel
columns x0..x1-1 and rows y0..y1-1.
"""

from __future__ import annotations

import json
import logging
import os
import shutil
import tempfile
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .detector import GroundTruth, box_iou

logger = logging.getLogger(__name__)

CLASSES = ("circle", "square", "triangle")
SPLIT_IDS = {"train": 0, "val": 1}
MAX_OVERLAP_IOU = 0.3
MAX_RESAMPLES = 100


@dataclass(frozen=True)
class SceneConfig:
    image_size: tuple[int, int] = (64, 64)
    count_range: tuple[int, int] = (1, 3)
    size_range: tuple[int, int] = (8, 28)
    noise: float = 0.05
    background: float = 0.1
    intensity_range: tuple[float, float] = (0.5, 1.0)

    def __post_init__(self):
        for name in ("image_size", "count_range", "size_range", "intensity_range"):
            object.__setattr__(self, name, tuple(getattr(self, name)))
        h, w = self.image_size
        lo, hi = self.size_range
        if not (0 < lo <= hi <= min(h, w)):
            raise ValueError(f"size_range {self.size_range} must be positive and fit in {self.image_size}")
        if not (1 <= self.count_range[0] <= self.count_range[1]):
            raise ValueError(f"count_range {self.count_range} must satisfy 1 <= lo <= hi")
        if self.noise < 0:
            raise ValueError("noise must be >= 0")

    def to_dict(self) -> dict:
        return {k: list(v) if isinstance(v, tuple) else v for k, v in asdict(self).items()}


@dataclass
class Scene:
    image: np.ndarray  # (1, H, W) in [0, 1], quantised to 1/255 steps
    gts: list[GroundTruth]
    masks: list[np.ndarray] = field(default_factory=list)  # rasterised shape per GT


def _shape_mask(kind: str, cx: float, cy: float, size: int, h: int, w: int) -> np.ndarray:
    ys, xs = np.mgrid[0:h, 0:w]
    px, py = xs + 0.5, ys + 0.5
    r = size / 2.0
    if kind == "circle":
        return (px - cx) ** 2 + (py - cy) ** 2 <= r * r
    if kind == "square":
        return (np.abs(px - cx) <= r) & (np.abs(py - cy) <= r)
    # upright isosceles triangle, apex at top centre
    top, bottom = cy - r, cy + r
    frac = (py - top) / (2 * r)
    return (py >= top) & (py <= bottom) & (np.abs(px - cx) <= frac * r)


def _tight_box(mask: np.ndarray):
    ys, xs = np.nonzero(mask)
    return (float(xs.min()), float(ys.min()), float(xs.max() + 1), float(ys.max() + 1))


def generate_scene(seed, cfg: SceneConfig = SceneConfig()) -> Scene:
    """One scene, fully determined by ``seed`` (int or sequence of ints)."""
    rng = np.random.default_rng(seed)
    h, w = cfg.image_size
    img = cfg.background + cfg.noise * rng.standard_normal((h, w))
    count = int(rng.integers(cfg.count_range[0], cfg.count_range[1] + 1))
    gts: list[GroundTruth] = []
    masks: list[np.ndarray] = []
    for _ in range(count):
        for _attempt in range(MAX_RESAMPLES):
            kind = int(rng.integers(len(CLASSES)))
            size = int(rng.integers(cfg.size_range[0], cfg.size_range[1] + 1))
            cx = rng.uniform(size / 2, w - size / 2)
            cy = rng.uniform(size / 2, h - size / 2)
            mask = _shape_mask(CLASSES[kind], cx, cy, size, h, w)
            if not mask.any():
                continue
            box = _tight_box(mask)
            if all(box_iou(box, g.box) <= MAX_OVERLAP_IOU for g in gts):
                break
        else:
            logger.info("scene %s: could not place object %d after %d resamples",
                        seed, len(gts) + 1, MAX_RESAMPLES)
            break
        intensity = rng.uniform(*cfg.intensity_range)
        img[mask] = intensity + cfg.noise * rng.standard_normal(int(mask.sum()))
        gts.append(GroundTruth(box, kind))
        masks.append(mask)
    img = quantize(img) / 255.0
    return Scene(img[None, :, :], gts, masks)


def quantize(values: np.ndarray) -> np.ndarray:
    """[0, 1] floats to 0..255 integers, round half up."""
    return np.floor(np.clip(values, 0.0, 1.0) * 255.0 + 0.5).astype(np.uint8)


def scene_seed(seed: int, split: str, index: int) -> list[int]:
    return [int(seed), SPLIT_IDS[split], int(index)]


# ---------------------------------------------------------------- PGM / PPM


def encode_pgm(pixels: np.ndarray) -> bytes:
    pixels = np.asarray(pixels, dtype=np.uint8)
    h, w = pixels.shape
    return b"P5\n%d %d\n255\n" % (w, h) + pixels.tobytes()


def encode_ppm(rgb: np.ndarray) -> bytes:
    rgb = np.asarray(rgb, dtype=np.uint8)
    h, w, _ = rgb.shape
    return b"P6\n%d %d\n255\n" % (w, h) + rgb.tobytes()


def decode_pgm(raw: bytes) -> np.ndarray:
    tokens = []
    pos = 0
    while len(tokens) < 4:
        while raw[pos:pos + 1].isspace():
            pos += 1
        if raw[pos:pos + 1] == b"#":
            pos = raw.index(b"\n", pos) + 1
            continue
        start = pos
        while not raw[pos:pos + 1].isspace():
            pos += 1
        tokens.append(raw[start:pos])
    if tokens[0] != b"P5":
        raise ValueError(f"not a binary PGM (magic {tokens[0]!r})")
    w, h, maxval = (int(t) for t in tokens[1:])
    if maxval != 255:
        raise ValueError(f"unsupported PGM maxval {maxval}")
    body = raw[pos + 1:pos + 1 + w * h]
    if len(body) != w * h:
        raise ValueError("truncated PGM")
    return np.frombuffer(body, dtype=np.uint8).reshape(h, w)


def atomic_write(path: Path, data: bytes) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=".tmp-")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


# ------------------------------------------------------------------ dataset


@dataclass
class Split:
    images: np.ndarray  # (N, 1, H, W)
    gts: list[list[GroundTruth]]
    files: list[str]

    def __len__(self) -> int:
        return len(self.files)


@dataclass
class Dataset:
    train: Split
    val: Split
    meta: dict


def _annotation_line(file: str, gts) -> str:
    boxes = [[int(g.box[0]), int(g.box[1]), int(g.box[2]), int(g.box[3]), g.class_id] for g in gts]
    return json.dumps({"file": file, "boxes": boxes}) + "\n"


def write_split(root: Path, split: str, scenes_or_split) -> None:
    """Write images and annotations for one split."""
    d = Path(root) / split
    if isinstance(scenes_or_split, Split):
        items = [(f, img, g) for f, img, g in
                 zip(scenes_or_split.files, scenes_or_split.images, scenes_or_split.gts)]
    else:
        items = [(f"images/{i:06d}.pgm", s.image, s.gts) for i, s in enumerate(scenes_or_split)]
    lines = []
    for file, image, gts in items:
        atomic_write(d / file, encode_pgm(quantize(image[0])))
        lines.append(_annotation_line(file, gts))
    atomic_write(d / "annotations.jsonl", "".join(lines).encode("utf-8"))


def generate_dataset(seed: int, n_train: int, n_val: int, out, cfg: SceneConfig = SceneConfig(),
                     overwrite: bool = False) -> Path:
    """Generate train/val splits under ``out``; splits use disjoint seed streams."""
    if n_train <= 0 or n_val <= 0:
        raise ValueError("n_train and n_val must be positive")
    root = Path(out)
    if root.exists() and any(root.iterdir()):
        if not overwrite:
            raise FileExistsError(f"{root} exists and is not empty (pass overwrite=True)")
        shutil.rmtree(root)
    root.mkdir(parents=True, exist_ok=True)
    for split, n in (("train", n_train), ("val", n_val)):
        scenes = [generate_scene(scene_seed(seed, split, i), cfg) for i in range(n)]
        write_split(root, split, scenes)
    meta = {"seed": seed, "n_train": n_train, "n_val": n_val, "scene": cfg.to_dict(),
            "classes": list(CLASSES)}
    atomic_write(root / "dataset.json", (json.dumps(meta, sort_keys=True) + "\n").encode("utf-8"))
    return root


def load_split(root, split: str) -> Split:
    d = Path(root) / split
    images, gts, files = [], [], []
    with open(d / "annotations.jsonl", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            rec = json.loads(line)
            pix = decode_pgm((d / rec["file"]).read_bytes())
            h, w = pix.shape
            boxes = []
            for x0, y0, x1, y1, c in rec["boxes"]:
                if not (0 <= x0 < x1 <= w and 0 <= y0 < y1 <= h):
                    raise ValueError(f"{d / 'annotations.jsonl'}:{lineno}: box {[x0, y0, x1, y1]} "
                                     f"outside {w}x{h} image")
                boxes.append(GroundTruth((x0, y0, x1, y1), c))
            images.append(pix[None, :, :] / 255.0)
            gts.append(boxes)
            files.append(rec["file"])
    return Split(np.stack(images) if images else np.zeros((0, 1, 0, 0)), gts, files)


def load_dataset(root) -> Dataset:
    root = Path(root)
    meta = json.loads((root / "dataset.json").read_text(encoding="utf-8"))
    return Dataset(load_split(root, "train"), load_split(root, "val"), meta)


def save_dataset(ds: Dataset, out) -> Path:
    root = Path(out)
    for split in ("train", "val"):
        write_split(root, split, getattr(ds, split))
    atomic_write(root / "dataset.json", (json.dumps(ds.meta, sort_keys=True) + "\n").encode("utf-8"))
    return root


def in_memory_dataset(seed: int, n_train: int, n_val: int, cfg: SceneConfig = SceneConfig()) -> Dataset:
    """Same scenes as :func:`generate_dataset` without touching disk."""
    splits = {}
    for split, n in (("train", n_train), ("val", n_val)):
        scenes = [generate_scene(scene_seed(seed, split, i), cfg) for i in range(n)]
        splits[split] = Split(np.stack([s.image for s in scenes]), [s.gts for s in scenes],
                              [f"images/{i:06d}.pgm" for i in range(n)])
    meta = {"seed": seed, "n_train": n_train, "n_val": n_val, "scene": cfg.to_dict(),
            "classes": list(CLASSES)}
    return Dataset(splits["train"], splits["val"], meta)
