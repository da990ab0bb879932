"""Acceptance suite: one test per criterion, each reporting a PASS/FAIL line.

The desk-scale experiment (criteria 7 to 9) trains a teacher and 15 students
and takes about 15 minutes on one CPU core; it runs once per session.
"""

import hashlib
import time
from dataclasses import replace
from pathlib import Path

import numpy as np
import pytest

from gradkd.bmfi import box_mask, channel_attention, spatial_attention
from gradkd.data import generate_dataset, in_memory_dataset
from gradkd.detector import (STUDENT_CONFIG, TEACHER_CONFIG, GroundTruth, build_detector, count_complexity,
                             detection_loss, forward)
from gradkd.distill import KdConfig, TrainConfig, _kd_terms, distill_train, teacher_signals, train_teacher
from gradkd.experiment import Protocol, run_experiment
from gradkd.gkd import target_map
from gradkd.gradcheck import run_gradient_suite
from gradkd.io import load_checkpoint, save_checkpoint
from gradkd.metrics import map50
from gradkd.tensor import Tape, Tensor

from conftest import ACCEPTANCE
from oracles import channel_weight_oracle, exhaustive_ap, random_micro_case

ROOT = Path(__file__).resolve().parents[1]


def report(n: int, ok: bool, detail: str) -> None:
    line = f"criterion {n}: {'PASS' if ok else 'FAIL'}  {detail}"
    print(line)
    ACCEPTANCE.append(line)
    assert ok, line


def tree_digest(root: Path) -> dict[str, str]:
    return {str(p.relative_to(root)): hashlib.sha256(p.read_bytes()).hexdigest()
            for p in sorted(root.rglob("*")) if p.is_file()}


@pytest.fixture(scope="module")
def experiment():
    return run_experiment(Protocol())


def test_c01_irreproducibility_stated():
    readme = (ROOT / "README.md").read_text()
    import gradkd.experiment as exp
    ok = "cannot be reproduced at desk scale" in readme and "direction" in (exp.__doc__ or "")
    report(1, ok, "full-scale numbers declared out of reach; desk-scale checks substitute")


def test_c02_gradient_oracle():
    start = time.perf_counter()
    results = dict(run_gradient_suite(seed=0))
    elapsed = time.perf_counter() - start
    worst = max(results, key=results.get)
    ok = all(e < 1e-4 for e in results.values()) and elapsed < 120 and \
        {"L_task", "L_GKD", "L_BMFI"} <= set(results)
    report(2, ok, f"{len(results)} checks, worst {worst} {results[worst]:.2e}, {elapsed:.1f}s")


def test_c03_channel_weight_oracle():
    ds = in_memory_dataset(11, 2, 1)
    model = build_detector(TEACHER_CONFIG, seed=4)
    worst = 0.0
    # a whole-channel shift moves L_task (about 20) by only ~1e-12 for the smallest weights at
    # eps 1e-5, which is roundoff territory; 1e-4 keeps truncation error far below the tolerance
    for analytic, numeric in channel_weight_oracle(model, ds.train.images, ds.train.gts, eps=1e-4):
        err = np.abs(analytic - numeric) / np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), 1e-8)
        worst = max(worst, float(err.max()))
    report(3, worst < 1e-3, f"max relative error {worst:.2e} over every channel of 3 levels")


def test_c04_normalisation_invariants():
    rng = np.random.default_rng(4)
    bad_range = bad_extrema = bad_sums = 0
    worst_sum = 0.0
    for _ in range(1000):
        c, h, w = rng.integers(1, 9), rng.integers(1, 9), rng.integers(1, 9)
        scale = 10.0 ** rng.uniform(-3, 3)
        feats = Tensor(rng.normal(size=(c, h, w)) * scale)
        m = target_map(feats, rng.normal(size=c)).data
        bad_range += not (m.min() >= 0.0 and m.max() <= 1.0)
        if np.ptp(m) > 0:
            bad_extrema += not (m.min() == 0.0 and m.max() == 1.0)
        temp = rng.uniform(0.05, 5.0)
        s = spatial_attention(feats, temp).data.sum()
        ch = channel_attention(feats, temp).data.sum()
        err = max(abs(s - h * w), abs(ch - c))
        worst_sum = max(worst_sum, err)
        bad_sums += err > 1e-9
    ok = bad_range == bad_extrema == bad_sums == 0
    report(4, ok, f"1000 inputs: range violations {bad_range}, extrema {bad_extrema}, "
                  f"attention sums worst {worst_sum:.1e}")


def _mask_violations(g: int, x0, y0, x1, y1):
    m = box_mask([GroundTruth((x0, y0, x1, y1), 0)], (g, g), 1.0)
    cx, cy, bw, bh = (x0 + x1) / 2, (y0 + y1) / 2, x1 - x0, y1 - y0
    centres = np.arange(g) + 0.5
    out = []
    if not np.all(m[y0:y1, x0:x1] == 1.0):
        out.append("in-box")
    region = (np.abs(centres[:, None] - cy) <= bh) & (np.abs(centres[None, :] - cx) <= bw)
    if np.any(m[~region] != 0.0):
        out.append("outside")
    # walking away from the centre along rows and columns never increases the mask
    ix, iy = int(np.floor(cx)), int(np.floor(cy))
    for arr, i in ((m, ix), (m.T, iy)):
        if np.any(np.diff(arr[:, i:], axis=1) > 0) or np.any(np.diff(arr[:, :i + 1], axis=1) < 0):
            out.append("monotone")
    if x0 + x1 == g and not np.array_equal(m, m[:, ::-1]):
        out.append("symmetry-x")
    if y0 + y1 == g and not np.array_equal(m, m[::-1]):
        out.append("symmetry-y")
    return out


def test_c05_box_mask_geometry():
    # every cell-aligned box on square grids of side 1..8, 16 and 32
    checked, failures = 0, []
    for g in (*range(1, 9), 16, 32):
        spans = [(a, b) for a in range(g) for b in range(a + 1, g + 1)]
        for x0, x1 in spans:
            for y0, y1 in spans:
                checked += 1
                bad = _mask_violations(g, x0, y0, x1, y1)
                if bad:
                    failures.append((g, x0, y0, x1, y1, bad))
    report(5, not failures, f"{checked} boxes checked, {len(failures)} violations"
                            + (f", first {failures[0]}" if failures else ""))


def test_c06_identity_laws():
    ds = in_memory_dataset(6, 16, 4)
    teacher = build_detector(TEACHER_CONFIG, seed=2)
    idx = np.arange(8)
    images, gts = ds.train.images[idx], [ds.train.gts[i] for i in idx]
    signals = teacher_signals(teacher, images, gts)
    student = teacher.copy()
    with Tape() as tape:
        feats, pred = forward(student, images)
        loss = detection_loss(pred, gts)
    g = tape.backward(loss, inputs=feats)
    l_gkd, _, parts = _kd_terms(feats, [g.array(f) for f in feats], signals, idx, KdConfig())
    zero_gkd, zero_term1 = abs(l_gkd.item()), abs(parts["bmfi_imitation"])

    tc = TrainConfig(epochs=2, seed=5)
    base = train_teacher(STUDENT_CONFIG, tc, ds)
    kd = distill_train(teacher, STUDENT_CONFIG, KdConfig(kd_weight=0.0, inherit=False), tc, ds)
    same = all(base.model.params[k].data.tobytes() == kd.model.params[k].data.tobytes() for k in base.model.params)
    same &= [h["l_task"] for h in base.history] == [h["l_task"] for h in kd.history]
    ok = zero_gkd <= 1e-12 and zero_term1 <= 1e-12 and same
    report(6, ok, f"L_GKD {zero_gkd:.1e}, term1 {zero_term1:.1e}, kd_weight=0 bit-identical {same}")


def test_c07_desk_distillation(experiment):
    s = experiment.summary()
    minutes = experiment.seconds / 60
    ok = (s["teacher"] > s["baseline"] and s["gkd"] - s["baseline"] >= 0.010
          and s["gkd_bmfi"] >= s["gkd"] - 0.005 and minutes < 30)
    report(7, ok, f"teacher {100 * s['teacher']:.1f}, baseline {100 * s['baseline']:.1f}, "
                  f"GKD {100 * s['gkd']:.1f}, GKD-BMFI {100 * s['gkd_bmfi']:.1f} mAP; {minutes:.1f} min")


def test_c08_ablation(experiment):
    s = experiment.summary()
    singles = {k: s[k] for k in ("gkd", "mask", "mfi")}
    ok = all(s["gkd_bmfi"] >= v for v in singles.values()) and all(v > s["baseline"] for v in singles.values())
    detail = ", ".join(f"{k} {100 * v:.1f}" for k, v in singles.items())
    report(8, ok, f"baseline {100 * s['baseline']:.1f}, {detail}, full {100 * s['gkd_bmfi']:.1f} mAP")


def test_c09_mask_similarity_grows(experiment):
    pairs = [(r.history[0]["mask_similarity"], r.history[-1]["mask_similarity"])
             for name in ("gkd", "gkd_bmfi") for r in experiment.runs[name]]
    ok = all(last > first for first, last in pairs)
    worst = min(last - first for first, last in pairs)
    report(9, ok, f"{len(pairs)} GKD runs, smallest gain {worst:+.4f}")


# Hand counts for 64x64 input, neck width P = 32, K = 3 classes, levels 8x8/4x4/2x2 (84 cells).
# params: stem 9*1*s+s; stage 9*cin*w+w; lateral w*P+P; neck 3*(9*P*P+P); heads 9*P*(K+4)+(K+4)
# FLOPs: stem s*9*64*64; stages at 16x16/8x8/4x4; laterals on 64/16/4 cells; neck and heads on 84 cells
REFERENCE = [
    ("teacher", TEACHER_CONFIG,
     80 + 1168 + 4640 + 18496 + 544 + 1056 + 2080 + 27744 + 867 + 1156,
     294912 + 294912 + 294912 + 294912 + 32768 + 16384 + 8192 + 9216 * 84 + 2016 * 84),
    ("student", STUDENT_CONFIG,
     40 + 296 + 1168 + 4640 + 288 + 544 + 1056 + 27744 + 867 + 1156,
     147456 + 73728 + 73728 + 73728 + 16384 + 8192 + 4096 + 9216 * 84 + 2016 * 84),
    ("teacher+head conv", replace(TEACHER_CONFIG, head_convs=1),
     57831 + 2 * (9 * 32 * 32 + 32),
     2180480 + 2 * 9216 * 84),
]


def test_c10_complexity():
    got = {name: count_complexity(cfg) for name, cfg, _, _ in REFERENCE}
    ok = all(got[name] == (p, f) for name, _, p, f in REFERENCE)
    report(10, ok, "; ".join(f"{name} {p}/{f}" for name, (p, f) in got.items()))


def test_c11_round_trips(tmp_path):
    model = build_detector(TEACHER_CONFIG, seed=8)
    rng = np.random.default_rng(8)
    for p in model.params.values():
        p.data = rng.normal(size=p.shape)
    save_checkpoint(model, tmp_path / "m.ckpt", step=3)
    back = load_checkpoint(tmp_path / "m.ckpt").model
    ckpt_ok = all(back.params[k].data.tobytes() == p.data.tobytes() for k, p in model.params.items())

    a = tree_digest(generate_dataset(21, 40, 10, tmp_path / "a"))
    b = tree_digest(generate_dataset(21, 40, 10, tmp_path / "b"))
    data_ok = a == b

    mismatches = 0
    for _ in range(100):
        dets, gts = random_micro_case(rng)
        aps, _ = map50(dets, gts)
        mismatches += any(abs(ap - exhaustive_ap(dets, gts, c)) > 1e-12 for c, ap in aps.items())
    ok = ckpt_ok and data_ok and mismatches == 0
    report(11, ok, f"checkpoint bit-exact {ckpt_ok}, dataset byte-identical {data_ok}, "
                   f"mAP oracle mismatches {mismatches}/100")
