"""Bounding-box-aware multi-grained feature imitation.

Three weightings of the squared teacher/student feature difference:

* box mask: 1 inside any ground-truth box, exp(-(u + v)^2 / 2) in the
  surrounding region (same centre, twice the width and height), 0 elsewhere;
  u, v are the absolute cell offsets from the box centre divided by the box
  width/height
* spatial attention: H*W * softmax over positions of mean_k |A| / T
* channel attention: C * softmax over channels of mean_{i,j} |A| / T

The loss per level is

    sum_{k,i,j} box * S_teacher * C_teacher * (A_t - A_s)^2
      + alpha * (sum |S_t - S_s| + sum |C_t - C_s|)

summed over levels and averaged over the batch.
"""

from __future__ import annotations

import math
from typing import Sequence

import numpy as np

from . import tensor as T
from .tensor import Tensor, detach


def box_mask(gts, level_shape, stride: float) -> np.ndarray:
    """Top-flattened Gaussian mask on one level; cells are evaluated at their centres."""
    h, w = level_shape
    mask = np.zeros((h, w))
    xs = np.arange(w) + 0.5
    ys = np.arange(h) + 0.5
    for gt in gts:
        x0, y0, x1, y1 = (v / stride for v in gt.box)
        inside = (ys[:, None] >= y0) & (ys[:, None] <= y1) & (xs[None, :] >= x0) & (xs[None, :] <= x1)
        cx, cy = (x0 + x1) / 2, (y0 + y1) / 2
        bw, bh = x1 - x0, y1 - y0
        if not inside.any():
            # box smaller than a cell: the cell holding its centre stands in for it
            inside[min(int(cy), h - 1), min(int(cx), w - 1)] = True
            bw, bh = max(bw, 1.0), max(bh, 1.0)
        u = np.abs(xs - cx) / bw
        v = np.abs(ys - cy) / bh
        region = (v[:, None] <= 1.0) & (u[None, :] <= 1.0)
        vals = np.where(region, np.exp(-0.5 * (u[None, :] + v[:, None]) ** 2), 0.0)
        vals[inside] = 1.0
        np.maximum(mask, vals, out=mask)
    return mask


def surround_weight(u: float, v: float) -> float:
    return math.exp(-0.5 * (u + v) ** 2)


def _check_temperature(t: float) -> None:
    if not t > 0:
        raise ValueError(f"temperature must be > 0, got {t}")


def spatial_attention(features: Tensor, temperature: float) -> Tensor:
    """H*W * softmax_{i,j}(sum_k |A_k| / (C T)); shape (..., H, W)."""
    _check_temperature(temperature)
    c, h, w = features.shape[-3:]
    logits = T.scalar_mul(T.sum_(T.abs_(features), axis=-3), 1.0 / (c * temperature))
    return T.scalar_mul(T.softmax(logits, axis=(-2, -1)), float(h * w))


def channel_attention(features: Tensor, temperature: float) -> Tensor:
    """C * softmax_k(sum_{i,j} |A_k| / (H W T)); shape (..., C)."""
    _check_temperature(temperature)
    c, h, w = features.shape[-3:]
    logits = T.scalar_mul(T.sum_(T.abs_(features), axis=(-2, -1)), 1.0 / (h * w * temperature))
    return T.scalar_mul(T.softmax(logits, axis=-1), float(c))


def _ones_like_spatial(f):
    return np.ones(f.shape[:-3] + f.shape[-2:])


def bmfi_loss(teacher_feats: Sequence, student_feats: Sequence[Tensor], masks: Sequence | None,
              alpha: float = 1.0, temperature: float = 0.5, use_attention: bool = True,
              return_parts: bool = False):
    """Feature imitation loss over all levels.

    ``masks`` holds one box mask per level, shaped like the level's spatial
    extent (optionally with a leading batch axis); ``None`` means all ones.
    With ``use_attention=False`` both attention masks are all ones and the
    alpha term is dropped. ``return_parts`` also returns the imitation and
    attention terms separately.
    """
    if len(teacher_feats) != len(student_feats):
        raise T.ShapeError(f"bmfi_loss: {len(teacher_feats)} teacher levels vs {len(student_feats)} student levels")
    if masks is not None and len(masks) != len(student_feats):
        raise T.ShapeError(f"bmfi_loss: {len(masks)} masks for {len(student_feats)} levels")
    batch = student_feats[0].shape[0] if student_feats[0].ndim == 4 else 1
    imitation, attention = None, None
    for l, (ft, fs) in enumerate(zip(teacher_feats, student_feats)):
        ft = detach(ft) if isinstance(ft, Tensor) else Tensor(ft)
        if ft.shape != fs.shape:
            raise T.ShapeError(f"bmfi_loss: level {l} teacher {ft.shape} vs student {fs.shape}")
        box = _ones_like_spatial(fs) if masks is None else np.asarray(masks[l], dtype=float)
        if box.shape != fs.shape[:-3] + fs.shape[-2:] and box.shape != fs.shape[-2:]:
            raise T.ShapeError(f"bmfi_loss: level {l} mask {box.shape} vs features {fs.shape}")
        if use_attention:
            s_t = spatial_attention(ft, temperature)
            c_t = channel_attention(ft, temperature)
            spatial_w = box * s_t.data
            weight = spatial_w[..., None, :, :] * c_t.data[..., :, None, None]
        else:
            weight = np.broadcast_to(box[..., None, :, :], fs.shape)
        term1 = T.sum_(T.mul(T.square(T.subtract(ft, fs)), weight))
        imitation = term1 if imitation is None else T.add(imitation, term1)
        if use_attention and alpha:
            s_s = spatial_attention(fs, temperature)
            c_s = channel_attention(fs, temperature)
            term2 = T.add(T.sum_(T.abs_(T.subtract(s_t, s_s))), T.sum_(T.abs_(T.subtract(c_t, c_s))))
            term2 = T.scalar_mul(term2, alpha)
            attention = term2 if attention is None else T.add(attention, term2)
    imitation = T.scalar_mul(imitation, 1.0 / batch)
    if attention is None:
        attention = Tensor(0.0)
        total = imitation
    else:
        attention = T.scalar_mul(attention, 1.0 / batch)
        total = T.add(imitation, attention)
    if return_parts:
        return total, imitation, attention
    return total
