"""Gradient-guided target maps and the GKD loss.

For a feature level A (C x H x W) and the task-loss gradient dL/dA:

    w_k = mean_{i,j} dL/dA[k, i, j]               channel weights (detached)
    M   = Norm(ReLU(sum_k w_k * A_k))             target map in [0, 1]
    L   = sum_levels mean_{i,j} |M_teacher - M_student|

Norm is a per-image min-max rescaling; a map whose post-ReLU values are all
equal (including all zero) normalises to all zeros. Every function accepts
either a single image (C x H x W) or a batch (N x C x H x W); batch losses
are averages of per-image losses.
"""

from __future__ import annotations

from typing import Sequence

import numpy as np

from . import tensor as T
from .tensor import Tensor, detach


def channel_gradient_weights(grad) -> Tensor:
    """Spatial mean of the gradient per channel; returns a detached tensor."""
    g = grad.data if isinstance(grad, Tensor) else np.asarray(grad, dtype=float)
    if g.ndim not in (3, 4):
        raise T.ShapeError(f"channel_gradient_weights: expected (N,)C,H,W gradient, got {g.shape}")
    if g.shape[-1] == 0 or g.shape[-2] == 0:
        raise T.ShapeError(f"channel_gradient_weights: empty spatial extent in {g.shape}")
    return Tensor(g.mean(axis=(-2, -1)))


def minmax_normalize(x: Tensor) -> Tensor:
    """Per-map (last two axes) min-max rescaling; constant maps become zeros."""
    lo = T.amin(x, axis=(-2, -1), keepdims=True)
    hi = T.amax(x, axis=(-2, -1), keepdims=True)
    span = hi.data - lo.data
    flat = span <= 0
    denom = T.add(T.subtract(hi, lo), flat.astype(float))
    return T.mul(T.divide(T.subtract(x, lo), denom), (~flat).astype(float))


def target_map(features: Tensor, weights) -> Tensor:
    """Norm(ReLU(sum_k w_k A_k)); differentiable in ``features`` only."""
    w = weights.data if isinstance(weights, Tensor) else np.asarray(weights, dtype=float)
    if features.shape[:-2] != w.shape:
        raise T.ShapeError(
            f"target_map: weights {w.shape} do not match feature channels {features.shape[:-2]}")
    weighted = T.sum_(T.mul(features, w[..., None, None]), axis=-3)
    return minmax_normalize(T.relu(weighted))


def gradient_target_maps(features: Sequence[Tensor], grads: Sequence) -> list[Tensor]:
    """Target map per level from features and their task-loss gradients."""
    return [target_map(f, channel_gradient_weights(g)) for f, g in zip(features, grads)]


def gkd_loss(teacher_maps: Sequence, student_maps: Sequence[Tensor]) -> Tensor:
    """Sum over levels of the mean absolute target-map difference.

    Teacher maps are detached; for batched maps the per-image losses are
    averaged.
    """
    if len(teacher_maps) != len(student_maps):
        raise T.ShapeError(f"gkd_loss: {len(teacher_maps)} teacher levels vs {len(student_maps)} student levels")
    if not student_maps:
        raise T.ShapeError("gkd_loss: no levels")
    total = None
    for l, (mt, ms) in enumerate(zip(teacher_maps, student_maps)):
        mt = detach(mt) if isinstance(mt, Tensor) else Tensor(mt)
        if mt.shape != ms.shape:
            raise T.ShapeError(f"gkd_loss: level {l} teacher map {mt.shape} vs student map {ms.shape}")
        term = T.mean(T.abs_(T.subtract(mt, ms)))
        total = term if total is None else T.add(total, term)
    return total
