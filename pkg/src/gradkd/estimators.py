"""scikit-learn style wrappers around detector training and distillation.

``X`` is an image batch shaped (N, H, W) or (N, 1, H, W) with values in
[0, 1]; ``y`` holds one annotation list per image, either
:class:`~gradkd.detector.GroundTruth` objects or rows
``(x_min, y_min, x_max, y_max, class)``. ``predict`` returns one
(k, 6) array per image with rows ``(x_min, y_min, x_max, y_max, class, score)``.
"""

from __future__ import annotations

from dataclasses import replace

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_array, check_is_fitted

from .data import Dataset, Split
from .detector import STUDENT_CONFIG, TEACHER_CONFIG, DetectorConfig, DetectorModel, GroundTruth, decode, forward
from .distill import KdConfig, TrainConfig, distill_train, train_teacher
from .metrics import map50

ARCHS = {"teacher": TEACHER_CONFIG, "student": STUDENT_CONFIG}


def check_images(X, config: DetectorConfig | None = None) -> np.ndarray:
    """Validate an image batch and return it as float64 (N, C, H, W)."""
    X = check_array(X, allow_nd=True, dtype=np.float64, ensure_min_features=1)
    if X.ndim == 3:
        X = X[:, None]
    if X.ndim != 4:
        raise ValueError(f"expected images shaped (N, H, W) or (N, C, H, W), got {X.shape}")
    if X.min() < 0.0 or X.max() > 1.0:
        raise ValueError("image values must lie in [0, 1]")
    if config is not None:
        if X.shape[1] != config.in_channels or X.shape[2:] != config.input_size:
            raise ValueError(f"images {X.shape[1:]} do not match the detector input "
                             f"({config.in_channels}, {config.input_size[0]}, {config.input_size[1]})")
    return X


def check_annotations(y, n_images: int, num_classes: int | None = None) -> list[list[GroundTruth]]:
    """Normalise per-image annotations to lists of :class:`GroundTruth`."""
    if len(y) != n_images:
        raise ValueError(f"{len(y)} annotation lists for {n_images} images")
    out = []
    for i, boxes in enumerate(y):
        gts = []
        for b in boxes:
            g = b if isinstance(b, GroundTruth) else GroundTruth(tuple(b[:4]), int(b[4]))
            if num_classes is not None and g.class_id >= num_classes:
                raise ValueError(f"image {i}: class {g.class_id} outside [0, {num_classes})")
            gts.append(g)
        out.append(gts)
    return out


def _split(X, y) -> Split:
    return Split(X, y, [f"{i:06d}" for i in range(len(X))])


class DetectorEstimator(BaseEstimator):
    """Toy detector trained with the task loss only (teacher or baseline)."""

    def __init__(self, arch="teacher", lr=0.02, momentum=0.9, weight_decay=1e-4, epochs=30,
                 batch_size=8, seed=0, warmup_steps=100, grad_clip=None, score_thresh=0.05,
                 nms_iou=0.5):
        self.arch = arch
        self.lr = lr
        self.momentum = momentum
        self.weight_decay = weight_decay
        self.epochs = epochs
        self.batch_size = batch_size
        self.seed = seed
        self.warmup_steps = warmup_steps
        self.grad_clip = grad_clip
        self.score_thresh = score_thresh
        self.nms_iou = nms_iou

    def _detector_config(self) -> DetectorConfig:
        if isinstance(self.arch, DetectorConfig):
            return self.arch
        if self.arch not in ARCHS:
            raise ValueError(f"arch must be a DetectorConfig or one of {sorted(ARCHS)}, got {self.arch!r}")
        return ARCHS[self.arch]

    def _train_config(self) -> TrainConfig:
        return TrainConfig(lr=self.lr, momentum=self.momentum, weight_decay=self.weight_decay,
                           epochs=self.epochs, batch_size=self.batch_size, seed=self.seed,
                           warmup_steps=self.warmup_steps, score_thresh=self.score_thresh,
                           nms_iou=self.nms_iou, grad_clip=self.grad_clip)

    def _dataset(self, X, y, eval_set):
        cfg = self._detector_config()
        X = check_images(X, cfg)
        y = check_annotations(y, len(X), cfg.num_classes)
        if eval_set is None:
            val = _split(X[:0], [])
        else:
            Xv = check_images(eval_set[0], cfg)
            val = _split(Xv, check_annotations(eval_set[1], len(Xv), cfg.num_classes))
        return Dataset(_split(X, y), val, {})

    def _store(self, result):
        self.model_ = result.model
        self.history_ = result.history
        self.n_steps_ = result.steps
        return self

    def fit(self, X, y, eval_set=None):
        """Train from scratch; ``eval_set=(X_val, y_val)`` logs val mAP per epoch."""
        ds = self._dataset(X, y, eval_set)
        return self._store(train_teacher(self._detector_config(), self._train_config(), ds))

    def predict(self, X) -> list[np.ndarray]:
        check_is_fitted(self, "model_")
        X = check_images(X, self.model_.config)
        out = []
        for start in range(0, len(X), 32):
            _, pred = forward(self.model_, X[start:start + 32])
            for dets in decode(pred, self.score_thresh, self.nms_iou):
                out.append(np.array([[*d.box, d.class_id, d.score] for d in dets], dtype=float).reshape(-1, 6))
        return out

    def score(self, X, y) -> float:
        """mAP@0.5 on (X, y)."""
        check_is_fitted(self, "model_")
        gts = check_annotations(y, len(X))
        return map50(self.predict(X), gts)[1]


class DistilledDetector(DetectorEstimator):
    """Student trained with L_task + kd_weight * L_KD against a frozen teacher.

    ``teacher`` is a :class:`DetectorModel` or a fitted
    :class:`DetectorEstimator`.
    """

    def __init__(self, teacher=None, arch="student", alpha=1.0, beta=1.0, temperature=0.5, gkd=True,
                 mask=True, mfi=True, kd_weight=1.0, inherit=True, lr=0.02, momentum=0.9,
                 weight_decay=1e-4, epochs=30, batch_size=8, seed=0, warmup_steps=100,
                 grad_clip=None, score_thresh=0.05, nms_iou=0.5):
        super().__init__(arch=arch, lr=lr, momentum=momentum, weight_decay=weight_decay, epochs=epochs,
                         batch_size=batch_size, seed=seed, warmup_steps=warmup_steps,
                         grad_clip=grad_clip, score_thresh=score_thresh, nms_iou=nms_iou)
        self.teacher = teacher
        self.alpha = alpha
        self.beta = beta
        self.temperature = temperature
        self.gkd = gkd
        self.mask = mask
        self.mfi = mfi
        self.kd_weight = kd_weight
        self.inherit = inherit

    def _kd_config(self) -> KdConfig:
        return KdConfig(alpha=self.alpha, beta=self.beta, temperature=self.temperature,
                        enable_gkd=self.gkd, enable_mask=self.mask, enable_mfi=self.mfi,
                        kd_weight=self.kd_weight, inherit=self.inherit)

    def _teacher_model(self) -> DetectorModel:
        t = self.teacher
        if isinstance(t, DetectorEstimator):
            check_is_fitted(t, "model_")
            t = t.model_
        if not isinstance(t, DetectorModel):
            raise TypeError("teacher must be a DetectorModel or a fitted DetectorEstimator")
        return t

    def fit(self, X, y, eval_set=None):
        ds = self._dataset(X, y, eval_set)
        res = distill_train(self._teacher_model(), self._detector_config(), self._kd_config(),
                            self._train_config(), ds)
        return self._store(res)
