"""Teacher training, distillation objective and the distilled-student loop."""

from __future__ import annotations

import logging
from dataclasses import asdict, dataclass, field
from typing import Callable

import numpy as np

from . import tensor as T
from .bmfi import bmfi_loss, box_mask, channel_attention, spatial_attention
from .detector import DetectorConfig, DetectorModel, build_detector, decode, detection_loss, forward
from .gkd import channel_gradient_weights, gkd_loss, target_map
from .metrics import map50, mask_similarity
from .tensor import Tape, Tensor

logger = logging.getLogger(__name__)

PAPER_LR = 0.2
DESK_LR = 0.02
LR_PRESETS = {"paper": PAPER_LR, "desk": DESK_LR}


class TrainingDiverged(FloatingPointError):
    def __init__(self, step: int, cause: str = "non-finite loss"):
        super().__init__(f"training diverged at step {step}: {cause}")
        self.step = step


@dataclass(frozen=True)
class KdConfig:
    alpha: float = 1.0
    beta: float = 1.0
    temperature: float = 0.5
    enable_gkd: bool = True
    enable_mask: bool = True
    enable_mfi: bool = True
    kd_weight: float = 1.0
    inherit: bool = True

    def __post_init__(self):
        if self.alpha < 0 or self.beta < 0:
            raise ValueError("alpha and beta must be >= 0")
        if not self.temperature > 0:
            raise ValueError("temperature must be > 0")
        if self.kd_weight < 0:
            raise ValueError("kd_weight must be >= 0")

    @property
    def enable_bmfi(self) -> bool:
        return self.enable_mask or self.enable_mfi


@dataclass(frozen=True)
class TrainConfig:
    lr: float = DESK_LR
    momentum: float = 0.9
    weight_decay: float = 1e-4
    epochs: int = 30
    batch_size: int = 8
    seed: int = 0
    warmup_steps: int = 100
    score_thresh: float = 0.05
    nms_iou: float = 0.5
    grad_clip: float | None = None

    def __post_init__(self):
        if self.grad_clip is not None and not self.grad_clip > 0:
            raise ValueError("grad_clip must be positive or None")
        if self.lr <= 0 or self.epochs < 0 or self.batch_size <= 0:
            raise ValueError("lr and batch_size must be positive, epochs >= 0")
        if not 0 <= self.momentum < 1 or self.weight_decay < 0:
            raise ValueError("momentum must lie in [0, 1) and weight_decay >= 0")

    def lr_at(self, step: int) -> float:
        if self.warmup_steps <= 0:
            return self.lr
        return self.lr * min(1.0, (step + 1) / self.warmup_steps)


# ------------------------------------------------------------------ objective


def total_kd_loss(l_gkd, l_bmfi, cfg: KdConfig) -> Tensor:
    """L_KD = L_GKD + beta * L_BMFI, disabled components contribute 0."""
    terms = []
    if cfg.enable_gkd and l_gkd is not None:
        terms.append(l_gkd if isinstance(l_gkd, Tensor) else Tensor(l_gkd))
    if cfg.enable_bmfi and l_bmfi is not None:
        b = l_bmfi if isinstance(l_bmfi, Tensor) else Tensor(l_bmfi)
        terms.append(T.scalar_mul(b, cfg.beta))
    if not terms:
        return Tensor(0.0)
    out = terms[0]
    for t in terms[1:]:
        out = T.add(out, t)
    return out


def inherit_init(student: DetectorModel, teacher: DetectorModel) -> DetectorModel:
    """Copy of ``student`` whose neck and head parameters are copies of the teacher's."""
    out = student.copy()
    for name, p in teacher.params.items():
        if not name.startswith(("neck.", "head.")):
            continue
        if name not in out.params:
            raise ValueError(f"inherit_init: student has no parameter {name!r}")
        if out.params[name].shape != p.shape:
            raise ValueError(f"inherit_init: parameter {name!r} has student shape "
                             f"{out.params[name].shape} but teacher shape {p.shape}")
        out.params[name] = Tensor(p.data.copy(), requires_grad=True)
    for name in out.params:
        if name.startswith(("neck.", "head.")) and name not in teacher.params:
            raise ValueError(f"inherit_init: teacher has no parameter {name!r}")
    return out


def sgd_step(params: dict[str, Tensor], grads: dict[str, np.ndarray], state: dict[str, np.ndarray],
             lr: float, momentum: float = 0.9, weight_decay: float = 1e-4) -> dict[str, np.ndarray]:
    """In-place SGD with momentum: v <- m v + g + wd p ; p <- p - lr v."""
    for name, p in params.items():
        g = grads.get(name)
        if g is None:
            g = np.zeros(p.shape)
        d = g + weight_decay * p.data if weight_decay else g
        v = state.get(name)
        v = d if v is None else momentum * v + d
        state[name] = v
        p.data = p.data - lr * v
    return state


def clip_grad_norm(grads: dict[str, np.ndarray], max_norm: float) -> float:
    """Rescale ``grads`` in place so their global L2 norm is at most ``max_norm``."""
    norm = float(np.sqrt(sum(float(np.sum(g * g)) for g in grads.values())))
    if norm > max_norm:
        scale = max_norm / norm
        for k in grads:
            grads[k] = grads[k] * scale
    return norm


# --------------------------------------------------------------- KD signals


@dataclass
class TeacherSignals:
    """Frozen-teacher quantities for a set of images, indexed by image."""

    features: list[np.ndarray]      # per level (N, C, h, w)
    maps: list[np.ndarray]          # per level (N, h, w)
    box_masks: list[np.ndarray]     # per level (N, h, w)

    def take(self, idx):
        return ([f[idx] for f in self.features], [m[idx] for m in self.maps],
                [b[idx] for b in self.box_masks])


def capture_gradient_maps(model: DetectorModel, images, gts) -> tuple[list[Tensor], list[np.ndarray]]:
    """Forward + task-loss backward; returns (features, detached target maps)."""
    with Tape() as tape:
        feats, pred = forward(model, images)
        loss = detection_loss(pred, gts)
    grads = tape.backward(loss, inputs=feats)
    maps = [target_map(T.detach(f), channel_gradient_weights(grads.array(f))).data for f in feats]
    return feats, maps


def box_masks_for(gts_per_image, config: DetectorConfig) -> list[np.ndarray]:
    return [np.stack([box_mask(g, shape, s) for g in gts_per_image])
            for shape, s in zip(config.level_shapes, config.strides)]


def teacher_signals(teacher: DetectorModel, images: np.ndarray, gts, chunk: int = 16) -> TeacherSignals:
    """Teacher features, gradient target maps and box masks, computed in fixed chunks."""
    feats_acc, maps_acc = [], []
    for start in range(0, len(images), chunk):
        sl = slice(start, start + chunk)
        feats, maps = capture_gradient_maps(teacher, images[sl], gts[sl])
        feats_acc.append([f.data for f in feats])
        maps_acc.append(maps)
    L = teacher.config.num_levels
    features = [np.concatenate([c[l] for c in feats_acc]) for l in range(L)]
    maps = [np.concatenate([c[l] for c in maps_acc]) for l in range(L)]
    return TeacherSignals(features, maps, box_masks_for(gts, teacher.config))


# ------------------------------------------------------------------ training


@dataclass
class TrainResult:
    model: DetectorModel
    history: list[dict] = field(default_factory=list)
    optimizer_state: dict[str, np.ndarray] = field(default_factory=dict)
    steps: int = 0


def evaluate(model: DetectorModel, images: np.ndarray, gts, score_thresh: float = 0.05,
             nms_iou: float = 0.5, chunk: int = 32) -> float:
    """Validation mAP@0.5."""
    dets = []
    for start in range(0, len(images), chunk):
        _, pred = forward(model, images[start:start + chunk])
        dets.extend(decode(pred, score_thresh, nms_iou))
    return map50(dets, gts)[1]


def mean_mask_similarity(student: DetectorModel, teacher_maps: list[np.ndarray], images, gts,
                         chunk: int = 16) -> float:
    """Mean teacher/student target-map similarity over images and levels."""
    sims = []
    for start in range(0, len(images), chunk):
        sl = slice(start, start + chunk)
        _, maps = capture_gradient_maps(student, images[sl], gts[sl])
        for l, m in enumerate(maps):
            tm = teacher_maps[l][sl]
            sims.extend(mask_similarity(tm[i], m[i]) for i in range(len(m)))
    return float(np.mean(sims))


def _batches(rng, n, batch_size):
    order = rng.permutation(n)
    return [order[i:i + batch_size] for i in range(0, n, batch_size)]


def _kd_terms(student_feats, grads_feats, signals, idx, kd: KdConfig):
    t_feats, t_maps, t_masks = signals.take(idx)
    l_gkd = l_bmfi = None
    parts = {}
    if kd.enable_gkd:
        s_maps = [target_map(f, channel_gradient_weights(g)) for f, g in zip(student_feats, grads_feats)]
        l_gkd = gkd_loss(t_maps, s_maps)
    if kd.enable_bmfi:
        masks = t_masks if kd.enable_mask else None
        l_bmfi, term1, term2 = bmfi_loss(t_feats, student_feats, masks, alpha=kd.alpha,
                                         temperature=kd.temperature, use_attention=kd.enable_mfi,
                                         return_parts=True)
        parts["bmfi_imitation"] = term1.item()
        parts["bmfi_attention"] = term2.item()
    return l_gkd, l_bmfi, parts


def _fit(config: DetectorConfig, dataset, train_cfg: TrainConfig, init: DetectorModel | None = None,
         kd: KdConfig | None = None, signals: TeacherSignals | None = None,
         val_signals: TeacherSignals | None = None, on_epoch: Callable | None = None) -> TrainResult:
    train, val = dataset.train, dataset.val
    model = init.copy() if init is not None else build_detector(config, train_cfg.seed)
    order_rng = np.random.default_rng([train_cfg.seed, 1])
    state: dict[str, np.ndarray] = {}
    history = []
    step = 0
    use_kd = kd is not None and signals is not None
    for epoch in range(1, train_cfg.epochs + 1):
        sums = {"l_task": 0.0, "l_gkd": 0.0, "l_bmfi": 0.0, "l_total": 0.0}
        batches = _batches(order_rng, len(train), train_cfg.batch_size)
        for idx in batches:
            images = train.images[idx]
            gts = [train.gts[i] for i in idx]
            try:
                grads_feats = None
                if use_kd and kd.enable_gkd:
                    with Tape() as capture:
                        feats, pred = forward(model, images)
                        l_task = detection_loss(pred, gts)
                    g = capture.backward(l_task, inputs=feats)
                    grads_feats = [g.array(f) for f in feats]
                with Tape() as tape:
                    feats, pred = forward(model, images)
                    l_task = detection_loss(pred, gts)
                    total = l_task
                    if use_kd:
                        l_gkd, l_bmfi, _ = _kd_terms(feats, grads_feats, signals, idx, kd)
                        l_kd = total_kd_loss(l_gkd, l_bmfi, kd)
                        total = T.add(l_task, T.scalar_mul(l_kd, kd.kd_weight))
                        sums["l_gkd"] += l_gkd.item() if l_gkd is not None else 0.0
                        sums["l_bmfi"] += l_bmfi.item() if l_bmfi is not None else 0.0
                grads = tape.backward(total)
            except FloatingPointError as exc:
                raise TrainingDiverged(step, str(exc)) from exc
            if not np.isfinite(total.item()):
                raise TrainingDiverged(step)
            sums["l_task"] += l_task.item()
            sums["l_total"] += total.item()
            param_grads = {k: grads.array(p) for k, p in model.params.items()}
            if train_cfg.grad_clip is not None:
                clip_grad_norm(param_grads, train_cfg.grad_clip)
            sgd_step(model.params, param_grads, state,
                     train_cfg.lr_at(step), train_cfg.momentum, train_cfg.weight_decay)
            step += 1
        record = {"epoch": epoch, "step": step}
        record.update({k: v / len(batches) for k, v in sums.items()})
        if len(val):
            record["val_map50"] = evaluate(model, val.images, val.gts, train_cfg.score_thresh,
                                           train_cfg.nms_iou)
        if val_signals is not None and len(val):
            record["mask_similarity"] = mean_mask_similarity(model, val_signals.maps, val.images, val.gts)
        history.append(record)
        logger.info("epoch %d: %s", epoch, record)
        if on_epoch is not None:
            on_epoch(record)
    return TrainResult(model, history, state, step)


def train_teacher(config: DetectorConfig, train_cfg: TrainConfig, dataset,
                  on_epoch: Callable | None = None) -> TrainResult:
    """Plain task-loss training (also the student baseline)."""
    return _fit(config, dataset, train_cfg, on_epoch=on_epoch)


def distill_train(teacher: DetectorModel, student_config: DetectorConfig, kd: KdConfig,
                  train_cfg: TrainConfig, dataset, signals: TeacherSignals | None = None,
                  val_signals: TeacherSignals | None = None,
                  on_epoch: Callable | None = None) -> TrainResult:
    """Train a student under L_task + kd_weight * L_KD with a frozen teacher.

    The teacher only contributes detached quantities (features, gradient
    target maps); its parameters are never updated. ``signals`` /
    ``val_signals`` may be passed in to reuse teacher computations across
    runs on the same dataset.
    """
    if teacher.config.neck_channels != student_config.neck_channels or \
            teacher.config.num_levels != student_config.num_levels:
        raise ValueError("teacher and student must share neck channels and level count")
    if signals is None:
        signals = teacher_signals(teacher, dataset.train.images, dataset.train.gts)
    if val_signals is None and len(dataset.val):
        val_signals = teacher_signals(teacher, dataset.val.images, dataset.val.gts)
    init = build_detector(student_config, train_cfg.seed)
    if kd.inherit:
        init = inherit_init(init, teacher)
    return _fit(student_config, dataset, train_cfg, init=init, kd=kd, signals=signals,
                val_signals=val_signals, on_epoch=on_epoch)


def config_echo(**sections) -> dict:
    """Flat record describing a run, for the metrics log.

    Dataclasses and dicts are flattened to ``section.key``; other values are
    stored under their own name. Sequences become comma-joined strings.
    """
    def flat(v):
        return ",".join(str(x) for x in v) if isinstance(v, (list, tuple)) else v

    rec = {"event": "config"}
    for prefix, obj in sections.items():
        if hasattr(obj, "to_dict"):
            d = obj.to_dict()
        elif hasattr(obj, "__dataclass_fields__"):
            d = asdict(obj)
        elif isinstance(obj, dict):
            d = obj
        else:
            rec[prefix] = flat(obj)
            continue
        for k, v in d.items():
            rec[f"{prefix}.{k}"] = flat(v)
    return rec
