"""Toy anchor-free single-stage detector with a top-down feature pyramid.

Architecture (all convs zero-padded, stride 1):

* stem: conv3x3 -> ReLU -> maxpool(stem_pool)
* backbone: one stage per entry of ``widths``: conv3x3 -> ReLU -> maxpool(2)
* lateral adapters: 1x1 conv per used stage to ``neck_channels`` (part of
  the backbone, since their input width is backbone specific)
* neck: top-down nearest upsample-and-add, then a 3x3 output conv per level;
  emits ``num_levels`` feature maps of ``neck_channels`` channels
* head: classification and box branches shared across levels, each
  ``head_convs`` x (conv3x3 -> ReLU) followed by an output conv3x3

With the defaults a 64x64 image yields levels at strides 8/16/32.
Box outputs are distances (left, top, right, bottom) from the cell centre
to the box sides, in units of the level stride.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field
from typing import Sequence

import numpy as np

from . import tensor as T
from .tensor import Tensor

FOCAL_GAMMA = 2.0
FOCAL_ALPHA = 0.25
CLS_BIAS_INIT = -4.0


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class DetectorConfig:
    widths: tuple[int, ...] = (16, 32, 64)
    neck_channels: int = 32
    num_levels: int = 3
    num_classes: int = 3
    input_size: tuple[int, int] = (64, 64)
    in_channels: int = 1
    stem_channels: int = 8
    stem_pool: int = 4
    head_convs: int = 0

    def __post_init__(self):
        object.__setattr__(self, "widths", tuple(int(w) for w in self.widths))
        object.__setattr__(self, "input_size", tuple(int(s) for s in self.input_size))
        self.validate()

    def validate(self) -> None:
        if len(self.widths) == 0:
            raise ConfigError("detector config needs at least one backbone stage")
        if any(w <= 0 for w in self.widths):
            raise ConfigError(f"backbone widths must be positive, got {self.widths}")
        if self.num_levels < 2:
            raise ConfigError(f"num_levels must be >= 2, got {self.num_levels}")
        if self.num_levels > len(self.widths):
            raise ConfigError(
                f"num_levels={self.num_levels} exceeds the {len(self.widths)} backbone stages")
        for name in ("neck_channels", "num_classes", "in_channels", "stem_pool"):
            if getattr(self, name) <= 0:
                raise ConfigError(f"{name} must be positive")
        if self.stem_channels < 0 or self.head_convs < 0:
            raise ConfigError("stem_channels and head_convs must be >= 0")
        total = self.stem_pool * 2 ** len(self.widths)
        h, w = self.input_size
        if h % total or w % total:
            raise ConfigError(f"input size {self.input_size} not divisible by total stride {total}")

    @property
    def strides(self) -> tuple[int, ...]:
        n = len(self.widths)
        return tuple(self.stem_pool * 2 ** (s + 1) for s in range(n - self.num_levels, n))

    @property
    def level_shapes(self) -> tuple[tuple[int, int], ...]:
        h, w = self.input_size
        return tuple((h // s, w // s) for s in self.strides)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["widths"] = list(self.widths)
        d["input_size"] = list(self.input_size)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "DetectorConfig":
        return cls(**{k: (tuple(v) if isinstance(v, list) else v) for k, v in d.items()})


TEACHER_CONFIG = DetectorConfig(widths=(16, 32, 64), stem_channels=8)
STUDENT_CONFIG = DetectorConfig(widths=(8, 16, 32), stem_channels=4)


@dataclass(frozen=True)
class GroundTruth:
    box: tuple[float, float, float, float]
    class_id: int

    def __post_init__(self):
        x0, y0, x1, y1 = (float(v) for v in self.box)
        object.__setattr__(self, "box", (x0, y0, x1, y1))
        object.__setattr__(self, "class_id", int(self.class_id))
        if not (x0 < x1 and y0 < y1):
            raise ValueError(f"degenerate box {self.box}")
        if self.class_id < 0:
            raise ValueError(f"negative class id {self.class_id}")

    @property
    def area(self) -> float:
        x0, y0, x1, y1 = self.box
        return (x1 - x0) * (y1 - y0)


@dataclass(frozen=True)
class Detection:
    box: tuple[float, float, float, float]
    class_id: int
    score: float


@dataclass
class Prediction:
    """Per-level raw head outputs (NCHW): class logits and box distances."""

    cls: list[Tensor]
    box: list[Tensor]
    strides: tuple[int, ...]
    image_size: tuple[int, int]


# ------------------------------------------------------------------ layers


@dataclass(frozen=True)
class Conv:
    """Layer descriptor used for parameter/FLOP accounting."""
    cin: int
    cout: int
    kernel: int
    stride: int = 1
    padding: int = 0
    bias: bool = True

    def out_hw(self, hw):
        h, w = hw
        k, s, p = self.kernel, self.stride, self.padding
        return ((h + 2 * p - k) // s + 1, (w + 2 * p - k) // s + 1)

    @property
    def params(self) -> int:
        return self.cout * self.cin * self.kernel ** 2 + (self.cout if self.bias else 0)

    def macs(self, hw) -> int:
        ho, wo = self.out_hw(hw)
        return self.cout * ho * wo * self.cin * self.kernel ** 2


@dataclass(frozen=True)
class Linear:
    fin: int
    fout: int
    bias: bool = True

    def out_hw(self, hw):
        return hw

    @property
    def params(self) -> int:
        return self.fout * self.fin + (self.fout if self.bias else 0)

    def macs(self, hw) -> int:
        return self.fout * self.fin


@dataclass(frozen=True)
class Pool:
    kernel: int

    def out_hw(self, hw):
        return (hw[0] // self.kernel, hw[1] // self.kernel)

    params = 0

    def macs(self, hw) -> int:
        return 0


# ------------------------------------------------------------------- model


@dataclass
class DetectorModel:
    config: DetectorConfig
    params: dict[str, Tensor] = field(default_factory=dict)

    def parameters(self) -> list[Tensor]:
        return list(self.params.values())

    def named_parameters(self, prefix: str = "") -> list[tuple[str, Tensor]]:
        return [(k, v) for k, v in self.params.items() if k.startswith(prefix)]

    @property
    def num_params(self) -> int:
        return sum(p.size for p in self.params.values())

    def copy(self) -> "DetectorModel":
        return DetectorModel(self.config, {k: Tensor(v.data.copy(), requires_grad=v.requires_grad)
                                           for k, v in self.params.items()})

    def state_arrays(self) -> dict[str, np.ndarray]:
        return {k: v.data for k, v in self.params.items()}

    def layers(self) -> list[tuple[str, Conv, tuple[int, int], int]]:
        """(name, descriptor, input size, level) per conv application.

        Shared head convs appear once per level; only level 0 owns parameters.
        """
        return _layer_inventory(self.config)

    def __call__(self, images):
        return forward(self, images)


def _layer_inventory(cfg: DetectorConfig):
    out = []
    hw = cfg.input_size
    cin = cfg.in_channels
    if cfg.stem_channels:
        out.append(("backbone.stem", Conv(cin, cfg.stem_channels, 3, padding=1), hw, 0))
        cin = cfg.stem_channels
    hw = (hw[0] // cfg.stem_pool, hw[1] // cfg.stem_pool)
    stage_out = []
    for s, w in enumerate(cfg.widths):
        out.append((f"backbone.stage{s}", Conv(cin, w, 3, padding=1), hw, 0))
        hw = (hw[0] // 2, hw[1] // 2)
        stage_out.append((w, hw))
        cin = w
    used = stage_out[-cfg.num_levels:]
    p = cfg.neck_channels
    for l, (w, lhw) in enumerate(used):
        out.append((f"backbone.lateral{l}", Conv(w, p, 1), lhw, 0))
    for l, (_, lhw) in enumerate(used):
        out.append((f"neck.output{l}", Conv(p, p, 3, padding=1), lhw, 0))
    for branch, nout in (("cls", cfg.num_classes), ("box", 4)):
        for l, (_, lhw) in enumerate(used):
            for i in range(cfg.head_convs):
                out.append((f"head.{branch}.conv{i}", Conv(p, p, 3, padding=1), lhw, l))
            out.append((f"head.{branch}.out", Conv(p, nout, 3, padding=1), lhw, l))
    return out


def build_detector(config: DetectorConfig, seed: int = 0) -> DetectorModel:
    """Fan-in scaled normal init, zero biases, classification bias -4."""
    config.validate()
    rng = np.random.default_rng(seed)
    params: dict[str, Tensor] = {}
    for name, layer, _, level in _layer_inventory(config):
        if level > 0:  # shared head weights already created at level 0
            continue
        fan_in = layer.cin * layer.kernel ** 2
        w = rng.normal(0.0, math.sqrt(2.0 / fan_in), size=(layer.cout, layer.cin, layer.kernel, layer.kernel))
        b = np.full(layer.cout, CLS_BIAS_INIT if name == "head.cls.out" else 0.0)
        params[name + ".weight"] = Tensor(w, requires_grad=True)
        params[name + ".bias"] = Tensor(b, requires_grad=True)
    return DetectorModel(config, params)


def _conv(model, name, x, padding):
    return T.conv2d(x, model.params[name + ".weight"], model.params[name + ".bias"], padding=padding)


def forward(model: DetectorModel, images) -> tuple[list[Tensor], Prediction]:
    """Run the detector; returns (neck feature levels, head prediction)."""
    cfg = model.config
    x = images if isinstance(images, Tensor) else Tensor(images)
    if x.ndim == 3:
        x = T.reshape(x, (1,) + x.shape)
    expected = (cfg.in_channels,) + cfg.input_size
    if x.ndim != 4 or x.shape[1:] != expected:
        raise T.ShapeError(f"forward: expected images of shape (N, {expected}), got {x.shape}")

    if cfg.stem_channels:
        x = T.relu(_conv(model, "backbone.stem", x, 1))
    if cfg.stem_pool > 1:
        x = T.max_pool2d(x, cfg.stem_pool)
    stages = []
    for s in range(len(cfg.widths)):
        x = T.max_pool2d(T.relu(_conv(model, f"backbone.stage{s}", x, 1)), 2)
        stages.append(x)
    used = stages[-cfg.num_levels:]
    merged = [_conv(model, f"backbone.lateral{l}", c, 0) for l, c in enumerate(used)]
    for l in range(cfg.num_levels - 2, -1, -1):
        merged[l] = T.add(merged[l], T.upsample_nearest(merged[l + 1], 2))
    feats = [_conv(model, f"neck.output{l}", m, 1) for l, m in enumerate(merged)]
    return feats, heads(model, feats)


def heads(model: DetectorModel, feats: Sequence[Tensor]) -> Prediction:
    """Shared classification and box heads applied to every feature level."""
    cfg = model.config
    cls_out, box_out = [], []
    for f in feats:
        for branch, dest in (("cls", cls_out), ("box", box_out)):
            h = f
            for i in range(cfg.head_convs):
                h = T.relu(_conv(model, f"head.{branch}.conv{i}", h, 1))
            dest.append(_conv(model, f"head.{branch}.out", h, 1))
    return Prediction(cls_out, box_out, cfg.strides, cfg.input_size)


# ---------------------------------------------------------- target assignment


def assign_level(box, num_levels: int) -> int:
    x0, y0, x1, y1 = box
    size = math.sqrt((x1 - x0) * (y1 - y0))
    # round half up, so ties (e.g. sqrt(area) = 8 * sqrt(2)) go to the coarser level
    return int(min(max(math.floor(math.log2(size / 8.0) + 0.5), 0), num_levels - 1))


def build_targets(gts_per_image: Sequence[Sequence[GroundTruth]], strides, level_shapes, num_classes):
    """Dense per-level training targets.

    A cell is positive for a GT on the GT's assigned level when the cell
    centre lies inside the box; if no centre does, the cell containing the
    box centre is used. Cells claimed by several GTs take the smallest box.

    Returns per-level lists of (cls_target N,K,h,w), (box_target N,4,h,w),
    (pos N,h,w), plus the total positive count.
    """
    n = len(gts_per_image)
    L = len(strides)
    cls_t = [np.zeros((n, num_classes, h, w)) for h, w in level_shapes]
    box_t = [np.zeros((n, 4, h, w)) for h, w in level_shapes]
    pos = [np.zeros((n, h, w), dtype=bool) for h, w in level_shapes]
    best_area = [np.full((n, h, w), np.inf) for h, w in level_shapes]
    for b, gts in enumerate(gts_per_image):
        for gt in gts:
            if gt.class_id >= num_classes:
                raise ValueError(f"class id {gt.class_id} >= num_classes {num_classes}")
            l = assign_level(gt.box, L)
            s = strides[l]
            h, w = level_shapes[l]
            x0, y0, x1, y1 = gt.box
            cx = (np.arange(w) + 0.5) * s
            cy = (np.arange(h) + 0.5) * s
            inside = ((cy[:, None] >= y0) & (cy[:, None] <= y1)) & ((cx[None, :] >= x0) & (cx[None, :] <= x1))
            if not inside.any():
                j = min(int(((x0 + x1) / 2) // s), w - 1)
                i = min(int(((y0 + y1) / 2) // s), h - 1)
                inside[i, j] = True
            take = inside & (gt.area < best_area[l][b])
            ii, jj = np.nonzero(take)
            best_area[l][b, ii, jj] = gt.area
            pos[l][b, ii, jj] = True
            cls_t[l][b, :, ii, jj] = 0.0
            cls_t[l][b, gt.class_id, ii, jj] = 1.0
            ccx, ccy = cx[jj], cy[ii]
            box_t[l][b, 0, ii, jj] = (ccx - x0) / s
            box_t[l][b, 1, ii, jj] = (ccy - y0) / s
            box_t[l][b, 2, ii, jj] = (x1 - ccx) / s
            box_t[l][b, 3, ii, jj] = (y1 - ccy) / s
    npos = int(sum(p.sum() for p in pos))
    return cls_t, box_t, pos, npos


def _focal_sum(logits: Tensor, target: np.ndarray) -> Tensor:
    y = target
    log_p = T.log_sigmoid(logits)
    log_not_p = T.log_sigmoid(T.scalar_mul(logits, -1.0))
    ce = T.scalar_mul(T.add(T.mul(log_p, y), T.mul(log_not_p, 1.0 - y)), -1.0)
    # 1 - p_t = p (1 - 2y) + y
    one_minus_pt = T.add(T.mul(T.sigmoid(logits), 1.0 - 2.0 * y), y)
    alpha_t = FOCAL_ALPHA * y + (1.0 - FOCAL_ALPHA) * (1.0 - y)
    modulated = T.mul(T.square(one_minus_pt), alpha_t)  # gamma = 2
    return T.sum_(T.mul(modulated, ce))


def _smooth_l1_sum(pred: Tensor, target: np.ndarray, pos: np.ndarray) -> Tensor:
    m = pos[:, None, :, :].astype(float)
    diff = T.mul(T.subtract(pred, target), m)
    a = np.abs(diff.data)
    quad = (a < 1.0).astype(float)
    loss = T.add(T.mul(T.scalar_mul(T.square(diff), 0.5), quad),
                 T.mul(T.add(T.abs_(diff), -0.5), 1.0 - quad))
    return T.sum_(loss)


def detection_loss(pred: Prediction, gts_per_image: Sequence[Sequence[GroundTruth]],
                   return_parts: bool = False):
    """Sigmoid focal loss over all cells plus smooth-L1 box loss on positives.

    Both terms are normalised by max(1, number of positive cells).
    """
    n = pred.cls[0].shape[0]
    if len(gts_per_image) != n:
        raise ValueError(f"detection_loss: {len(gts_per_image)} GT lists for batch of {n}")
    k = pred.cls[0].shape[1]
    shapes = [c.shape[2:] for c in pred.cls]
    cls_t, box_t, pos, npos = build_targets(gts_per_image, pred.strides, shapes, k)
    norm = 1.0 / max(1, npos)
    cls_terms = [_focal_sum(c, t) for c, t in zip(pred.cls, cls_t)]
    cls_loss = T.scalar_mul(_sum_all(cls_terms), norm)
    if npos:
        box_terms = [_smooth_l1_sum(b, t, p) for b, t, p, in zip(pred.box, box_t, pos) if p.any()]
        box_loss = T.scalar_mul(_sum_all(box_terms), norm)
        total = T.add(cls_loss, box_loss)
    else:
        box_loss = Tensor(0.0)
        total = cls_loss
    if return_parts:
        return total, cls_loss, box_loss
    return total


def _sum_all(terms):
    out = terms[0]
    for t in terms[1:]:
        out = T.add(out, t)
    return out


# ------------------------------------------------------------------- decode


def box_iou(a, b) -> float:
    iw = min(a[2], b[2]) - max(a[0], b[0])
    ih = min(a[3], b[3]) - max(a[1], b[1])
    if iw <= 0 or ih <= 0:
        return 0.0
    inter = iw * ih
    union = (a[2] - a[0]) * (a[3] - a[1]) + (b[2] - b[0]) * (b[3] - b[1]) - inter
    return inter / union


def nms(boxes: np.ndarray, scores: np.ndarray, iou_thresh: float) -> list[int]:
    """Greedy NMS; returns kept indices in descending score order."""
    order = np.argsort(-scores, kind="stable")
    keep: list[int] = []
    for i in order:
        if all(box_iou(boxes[i], boxes[j]) <= iou_thresh for j in keep):
            keep.append(int(i))
    return keep


def decode(pred: Prediction, score_thresh: float = 0.05, nms_iou: float = 0.5,
           max_candidates: int = 200) -> list[list[Detection]]:
    """Turn raw head outputs into per-image detections (per-class greedy NMS)."""
    if not (0.0 <= score_thresh <= 1.0 and 0.0 <= nms_iou <= 1.0):
        raise ValueError("thresholds must lie in [0, 1]")
    n = pred.cls[0].shape[0]
    img_h, img_w = pred.image_size
    results = []
    for b in range(n):
        boxes, scores, classes = [], [], []
        for cls_map, box_map, s in zip(pred.cls, pred.box, pred.strides):
            prob = T._stable_sigmoid(cls_map.data[b])
            kk, ii, jj = np.nonzero(prob >= score_thresh)
            if kk.size == 0:
                continue
            cx = (jj + 0.5) * s
            cy = (ii + 0.5) * s
            d = box_map.data[b][:, ii, jj]
            bx = np.stack([cx - d[0] * s, cy - d[1] * s, cx + d[2] * s, cy + d[3] * s], axis=1)
            boxes.append(bx)
            scores.append(prob[kk, ii, jj])
            classes.append(kk)
        dets: list[Detection] = []
        if boxes:
            boxes_a = np.concatenate(boxes)
            scores_a = np.concatenate(scores)
            classes_a = np.concatenate(classes)
            boxes_a[:, 0::2] = np.clip(boxes_a[:, 0::2], 0, img_w)
            boxes_a[:, 1::2] = np.clip(boxes_a[:, 1::2], 0, img_h)
            valid = (boxes_a[:, 2] > boxes_a[:, 0]) & (boxes_a[:, 3] > boxes_a[:, 1])
            top = np.argsort(-scores_a, kind="stable")
            top = top[valid[top]][:max_candidates]
            for c in np.unique(classes_a[top]):
                idx = top[classes_a[top] == c]
                for i in nms(boxes_a[idx], scores_a[idx], nms_iou):
                    j = idx[i]
                    dets.append(Detection(tuple(float(v) for v in boxes_a[j]), int(c), float(scores_a[j])))
        dets.sort(key=lambda d: -d.score)
        results.append(dets)
    return results


def encode_oracle(gts_per_image, config: DetectorConfig, logit: float = 20.0) -> Prediction:
    """Head outputs that decode exactly to the given ground truths."""
    k = config.num_classes
    cls_t, box_t, pos, _ = build_targets(gts_per_image, config.strides, config.level_shapes, k)
    cls = [Tensor(np.where(c > 0, logit, -logit)) for c in cls_t]
    box = [Tensor(b) for b in box_t]
    return Prediction(cls, box, config.strides, config.input_size)


# --------------------------------------------------------------- complexity


def count_complexity(model, input_size=None) -> tuple[int, int]:
    """(parameter count, FLOPs) with one multiply-add counted as one FLOP.

    ``model`` is a :class:`DetectorModel`, a :class:`DetectorConfig`, or a
    sequence of layer descriptors (:class:`Conv`, :class:`Linear`,
    :class:`Pool`) applied in order. Bias additions, activations, pooling
    and upsample-adds are not counted.
    """
    if isinstance(model, DetectorModel):
        model = model.config
    if isinstance(model, DetectorConfig):
        cfg = model
        if input_size is not None and tuple(input_size) != cfg.input_size:
            from dataclasses import replace
            cfg = replace(cfg, input_size=tuple(input_size))
        params = flops = 0
        for _, layer, hw, level in _layer_inventory(cfg):
            if level == 0:
                params += layer.params
            flops += layer.macs(hw)
        return params, flops
    hw = tuple(input_size) if input_size is not None else (1, 1)
    params = flops = 0
    for layer in model:
        params += layer.params
        flops += layer.macs(hw)
        hw = layer.out_hw(hw)
    return params, flops
