"""Finite-difference gradient oracle over every op and the composed losses."""

from __future__ import annotations

from typing import Callable, Iterator

import numpy as np

from . import tensor as T
from .bmfi import bmfi_loss, box_mask
from .detector import DetectorConfig, GroundTruth, build_detector, detection_loss, forward
from .gkd import gkd_loss, target_map
from .tensor import Tape, Tensor

EPS = 1e-5

# smallest legal detector: 32x32 input, levels of 4x4, 2x2 and 1x1
TINY_CONFIG = DetectorConfig(widths=(3, 4, 5), neck_channels=4, stem_channels=2, input_size=(32, 32))


def relative_error(analytic: np.ndarray, numeric: np.ndarray, floor: float = 1e-8) -> float:
    """max over entries of |a - n| / max(|a|, |n|, floor)."""
    a, n = np.asarray(analytic, float), np.asarray(numeric, float)
    if a.size == 0:
        return 0.0
    return float(np.max(np.abs(a - n) / np.maximum(np.maximum(np.abs(a), np.abs(n)), floor)))


def check_gradient(f: Callable[..., Tensor], inputs: list[np.ndarray], eps: float = EPS,
                   max_entries: int | None = None, rng=None) -> float:
    """Largest relative error of the tape gradient of scalar ``f`` over all inputs.

    With ``max_entries`` only that many randomly chosen entries per input
    are perturbed.
    """
    rng = rng if rng is not None else np.random.default_rng(0)
    tensors = [Tensor(x.copy(), requires_grad=True) for x in inputs]
    with Tape() as tape:
        out = f(*tensors)
    grads = tape.backward(out)
    worst = 0.0
    for k, x in enumerate(inputs):
        analytic = grads.array(tensors[k]).reshape(-1)
        flat = x.reshape(-1)
        idx = np.arange(flat.size)
        if max_entries is not None and flat.size > max_entries:
            idx = np.sort(rng.choice(flat.size, max_entries, replace=False))
        numeric = np.empty(idx.size)
        for j, i in enumerate(idx):
            vals = []
            for step in (eps, -eps):
                pert = flat.copy()
                pert[i] += step
                args = [Tensor(a) for a in inputs]
                args[k] = Tensor(pert.reshape(x.shape))
                vals.append(f(*args).item())
            numeric[j] = (vals[0] - vals[1]) / (2 * eps)
        worst = max(worst, relative_error(analytic[idx], numeric))
    return worst


def _away_from_zero(rng, shape, margin=0.1):
    x = rng.uniform(margin, 1.0, size=shape)
    return x * rng.choice([-1.0, 1.0], size=shape)


def _distinct(rng, shape):
    """Values with pairwise gaps of at least 0.01, so max/min and pooling have no ties."""
    n = int(np.prod(shape))
    return (rng.permutation(n) * 0.01 - n * 0.005).reshape(shape) + rng.uniform(0, 0.001)


def _weighted(fn):
    """Reduce an op's output to a scalar through a fixed random projection."""
    def scalar(*xs):
        out = fn(*xs)
        w = np.cos(np.arange(out.size).reshape(out.shape) * 0.7 + 0.3)
        return T.sum_(T.mul(out, w))
    return scalar


def op_cases(rng) -> list[tuple[str, Callable, list[np.ndarray]]]:
    a, b = rng.normal(size=(3, 4)), rng.normal(size=(3, 4))
    cases = [
        ("add", T.add, [a, rng.normal(size=(4,))]),
        ("subtract", T.subtract, [a, rng.normal(size=(3, 1))]),
        ("mul", T.mul, [a, b]),
        ("divide", T.divide, [a, rng.uniform(0.5, 2.0, size=(3, 4))]),
        ("scalar_mul", lambda x: T.scalar_mul(x, -1.7), [a]),
        ("relu", T.relu, [_away_from_zero(rng, (3, 4))]),
        ("sigmoid", T.sigmoid, [a * 3]),
        ("log_sigmoid", T.log_sigmoid, [a * 3]),
        ("exp", T.exp, [a]),
        ("log", T.log, [rng.uniform(0.2, 3.0, size=(3, 4))]),
        ("abs", T.abs_, [_away_from_zero(rng, (3, 4))]),
        ("square", T.square, [a]),
        ("sum", lambda x: T.sum_(x, axis=1), [a]),
        ("mean", lambda x: T.mean(x, axis=0, keepdims=True), [a]),
        ("amax", lambda x: T.amax(x, axis=1), [_distinct(rng, (3, 4))]),
        ("amin", lambda x: T.amin(x, axis=(0, 1)), [_distinct(rng, (3, 4))]),
        ("softmax", lambda x: T.softmax(x, axis=(-2, -1)), [rng.normal(size=(2, 3, 3))]),
        ("reshape", lambda x: T.reshape(x, (4, 3)), [a]),
        ("concat", lambda x, y: T.concat([x, y], axis=1), [a, b]),
        ("upsample_nearest", lambda x: T.upsample_nearest(x, 2), [rng.normal(size=(1, 2, 2, 3))]),
        ("linear", T.linear, [rng.normal(size=(2, 4)), rng.normal(size=(3, 4)), rng.normal(size=(3,))]),
        ("conv2d", lambda x, w, bias: T.conv2d(x, w, bias, padding=1),
         [rng.normal(size=(2, 2, 5, 4)), rng.normal(size=(3, 2, 3, 3)), rng.normal(size=(3,))]),
        ("conv2d_1x1", lambda x, w: T.conv2d(x, w),
         [rng.normal(size=(1, 3, 3, 3)), rng.normal(size=(2, 3, 1, 1))]),
        ("max_pool2d", lambda x: T.max_pool2d(x, 2), [_distinct(rng, (1, 2, 4, 4))]),
    ]
    return [(name, _weighted(fn), xs) for name, fn, xs in cases]


def _tiny_batch(rng):
    images = rng.uniform(0, 1, size=(2, 1, 32, 32))
    gts = [[GroundTruth((3.0, 4.0, 13.0, 12.0), 0), GroundTruth((16.0, 10.0, 30.0, 28.0), 2)],
           [GroundTruth((8.0, 8.0, 20.0, 22.0), 1)]]
    return images, gts


def loss_cases(rng) -> list[tuple[str, Callable, list[np.ndarray]]]:
    """(name, scalar function, inputs) for L_task, L_GKD and L_BMFI."""
    model = build_detector(TINY_CONFIG, seed=int(rng.integers(1 << 31)))
    images, gts = _tiny_batch(rng)
    # give the zero-initialised biases some spread so no ReLU sits exactly at its kink
    for name, p in model.params.items():
        if name.endswith(".bias"):
            p.data = rng.normal(scale=0.1, size=p.shape)
    names = ["head.cls.out.weight", "head.box.out.weight", "neck.output0.weight", "backbone.lateral1.weight",
             "backbone.stage2.weight"]

    def task(*ws):
        m = model.copy()
        for n, w in zip(names, ws):
            m.params[n] = w
        _, pred = forward(m, images)
        return detection_loss(pred, gts)

    shapes = [(2, 4, 4, 4), (2, 4, 2, 2), (2, 4, 1, 1)]
    student = [rng.normal(size=s) for s in shapes]
    teacher = [rng.normal(size=s) for s in shapes]
    weights = [rng.normal(size=s[:2]) for s in shapes]
    teacher_maps = [target_map(Tensor(f), w).data for f, w in zip(teacher, weights)]

    def gkd(*fs):
        return gkd_loss(teacher_maps, [target_map(f, w) for f, w in zip(fs, weights)])

    masks = [np.stack([box_mask(g, s[-2:], 32 // s[-1]) for g in gts]) for s in shapes]

    def bmfi(*fs):
        return bmfi_loss(teacher, list(fs), masks, alpha=0.7, temperature=0.5)

    return [("L_task", task, [model.params[n].data.copy() for n in names]),
            ("L_GKD", gkd, student),
            ("L_BMFI", bmfi, student)]


def run_gradient_suite(seed: int = 0, max_entries: int = 40) -> Iterator[tuple[str, float]]:
    """Yield (name, max relative error) for every op and composed loss."""
    rng = np.random.default_rng(seed)
    for name, fn, inputs in op_cases(rng):
        yield name, check_gradient(fn, inputs, rng=rng)
    for name, fn, inputs in loss_cases(rng):
        yield name, check_gradient(fn, inputs, max_entries=max_entries, rng=rng)
