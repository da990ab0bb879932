from dataclasses import replace

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from gradkd.detector import build_detector, detection_loss, forward
from gradkd.distill import (KdConfig, TrainConfig, TrainingDiverged, _kd_terms, capture_gradient_maps,
                            clip_grad_norm, config_echo, distill_train, inherit_init, sgd_step,
                            teacher_signals, total_kd_loss, train_teacher)
from gradkd.tensor import Tape, Tensor

from conftest import MICRO, MICRO_WIDE

FAST = TrainConfig(epochs=2, batch_size=8, warmup_steps=2, lr=0.01)


def state_bytes(model):
    return {k: p.data.tobytes() for k, p in model.params.items()}


class TestConfigs:
    @pytest.mark.parametrize("kw", [dict(alpha=-1), dict(beta=-0.1), dict(temperature=0), dict(kd_weight=-1)])
    def test_kd_rejects(self, kw):
        with pytest.raises(ValueError):
            KdConfig(**kw)

    @pytest.mark.parametrize("kw", [dict(lr=0), dict(batch_size=0), dict(momentum=1.0), dict(grad_clip=0.0),
                                    dict(weight_decay=-1), dict(epochs=-1)])
    def test_train_rejects(self, kw):
        with pytest.raises(ValueError):
            TrainConfig(**kw)

    def test_warmup(self):
        cfg = TrainConfig(lr=0.1, warmup_steps=4)
        assert [cfg.lr_at(s) for s in range(6)] == pytest.approx([0.025, 0.05, 0.075, 0.1, 0.1, 0.1])
        assert TrainConfig(lr=0.1, warmup_steps=0).lr_at(0) == 0.1

    def test_config_echo_flattens(self):
        rec = config_echo(train=TrainConfig(), kd={"alpha": 2.0}, arch="student", widths=(1, 2))
        assert rec["train.lr"] == 0.02 and rec["kd.alpha"] == 2.0
        assert rec["arch"] == "student" and rec["widths"] == "1,2"


class TestTotalKdLoss:
    def test_weighted_sum(self):
        assert total_kd_loss(2.0, 10.0, KdConfig(beta=0.5)).item() == 7.0

    @pytest.mark.parametrize("toggles,expected", [
        (dict(enable_gkd=False), 5.0),
        (dict(enable_mask=False, enable_mfi=False), 2.0),
        (dict(enable_mask=False), 7.0),
        (dict(enable_gkd=False, enable_mask=False, enable_mfi=False), 0.0),
    ])
    def test_toggles(self, toggles, expected):
        assert total_kd_loss(2.0, 10.0, KdConfig(beta=0.5, **toggles)).item() == expected

    def test_gradient_flows(self):
        a, b = Tensor(1.0, requires_grad=True), Tensor(3.0, requires_grad=True)
        with Tape() as tape:
            out = total_kd_loss(a, b, KdConfig(beta=0.25))
        g = tape.backward(out)
        assert g.array(a) == 1.0 and g.array(b) == 0.25


class TestInherit:
    def test_copies_neck_and_head_only(self):
        teacher, student = build_detector(MICRO_WIDE, 1), build_detector(MICRO, 2)
        out = inherit_init(student, teacher)
        for name, p in out.params.items():
            src = teacher if name.startswith(("neck.", "head.")) else student
            np.testing.assert_array_equal(p.data, src.params[name].data)
        # copies, not aliases
        out.params["head.cls.out.weight"].data[...] = 0.0
        assert np.any(teacher.params["head.cls.out.weight"].data != 0)

    def test_mismatched_neck(self):
        bad = replace(MICRO, neck_channels=6)
        with pytest.raises(ValueError, match="shape"):
            inherit_init(build_detector(bad, 0), build_detector(MICRO_WIDE, 0))


class TestSgd:
    def test_two_steps(self):
        p = {"w": Tensor(np.array([1.0, -2.0]))}
        state = {}
        sgd_step(p, {"w": np.array([0.5, 1.0])}, state, lr=0.1, momentum=0.9, weight_decay=0.0)
        np.testing.assert_allclose(p["w"].data, [0.95, -2.1])
        sgd_step(p, {"w": np.array([0.5, 1.0])}, state, lr=0.1, momentum=0.9, weight_decay=0.0)
        # v = 0.9 * v + g
        np.testing.assert_allclose(state["w"], [0.95, 1.9])
        np.testing.assert_allclose(p["w"].data, [0.855, -2.29])

    def test_weight_decay(self):
        p = {"w": Tensor(np.array([2.0]))}
        sgd_step(p, {}, {}, lr=0.5, momentum=0.0, weight_decay=0.1)
        np.testing.assert_allclose(p["w"].data, [1.9])

    def test_clip(self):
        g = {"a": np.array([3.0]), "b": np.array([4.0])}
        assert clip_grad_norm(g, 1.0) == 5.0
        np.testing.assert_allclose([g["a"][0], g["b"][0]], [0.6, 0.8])
        g = {"a": np.array([0.3])}
        clip_grad_norm(g, 1.0)
        assert g["a"][0] == 0.3


class TestIdentity:
    def test_copied_teacher_zero_losses(self, micro_dataset):
        teacher = build_detector(MICRO, 5)
        student = teacher.copy()
        ds = micro_dataset.train
        idx = np.arange(6)
        signals = teacher_signals(teacher, ds.images[idx], [ds.gts[i] for i in idx])
        with Tape() as tape:
            feats, pred = forward(student, ds.images[idx])
            loss = detection_loss(pred, [ds.gts[i] for i in idx])
        g = tape.backward(loss, inputs=feats)
        kd = KdConfig(enable_mfi=True)
        l_gkd, _, parts = _kd_terms(feats, [g.array(f) for f in feats], signals, idx, kd)
        assert abs(l_gkd.item()) <= 1e-12
        assert abs(parts["bmfi_imitation"]) <= 1e-12

    def test_kd_weight_zero_matches_baseline(self, micro_dataset):
        teacher = build_detector(MICRO_WIDE, 9)
        base = train_teacher(MICRO, FAST, micro_dataset)
        kd = distill_train(teacher, MICRO, KdConfig(kd_weight=0.0, inherit=False), FAST, micro_dataset)
        assert state_bytes(base.model) == state_bytes(kd.model)
        assert [h["l_task"] for h in base.history] == [h["l_task"] for h in kd.history]

    def test_teacher_frozen(self, micro_dataset):
        teacher = build_detector(MICRO_WIDE, 9)
        before = state_bytes(teacher)
        distill_train(teacher, MICRO, KdConfig(beta=0.01), FAST, micro_dataset)
        assert state_bytes(teacher) == before


class TestTraining:
    def test_deterministic(self, micro_dataset):
        teacher = build_detector(MICRO_WIDE, 9)
        kd = KdConfig(beta=0.01, kd_weight=0.5)
        a = distill_train(teacher, MICRO, kd, FAST, micro_dataset)
        b = distill_train(teacher, MICRO, kd, FAST, micro_dataset)
        assert state_bytes(a.model) == state_bytes(b.model)
        assert a.history == b.history

    def test_history_fields(self, micro_dataset):
        teacher = build_detector(MICRO_WIDE, 9)
        seen = []
        res = distill_train(teacher, MICRO, KdConfig(beta=0.01), FAST, micro_dataset, on_epoch=seen.append)
        assert len(res.history) == 2 and seen == res.history
        assert res.steps == 2 * 3
        h = res.history[-1]
        assert {"l_task", "l_gkd", "l_bmfi", "l_total", "val_map50", "mask_similarity"} <= set(h)
        assert 0.0 <= h["mask_similarity"] <= 1.0

    def test_components_add_up(self, micro_dataset):
        teacher = build_detector(MICRO_WIDE, 9)
        kd = KdConfig(beta=0.01, kd_weight=0.5)
        h = distill_train(teacher, MICRO, kd, replace(FAST, epochs=1), micro_dataset).history[0]
        assert h["l_total"] == pytest.approx(h["l_task"] + 0.5 * (h["l_gkd"] + 0.01 * h["l_bmfi"]), rel=1e-12)

    def test_task_loss_decreases(self, micro_dataset):
        res = train_teacher(MICRO, replace(FAST, epochs=6), micro_dataset)
        assert res.history[-1]["l_task"] < res.history[0]["l_task"]

    def test_neck_mismatch_rejected(self, micro_dataset):
        with pytest.raises(ValueError):
            distill_train(build_detector(MICRO_WIDE, 0), replace(MICRO, neck_channels=6), KdConfig(),
                          FAST, micro_dataset)

    @pytest.mark.filterwarnings("ignore::RuntimeWarning")
    def test_divergence_reported(self, micro_dataset):
        with pytest.raises(TrainingDiverged):
            train_teacher(MICRO, replace(FAST, lr=1e6, warmup_steps=0, epochs=3), micro_dataset)

    def test_signals_match_capture(self, micro_dataset):
        teacher = build_detector(MICRO_WIDE, 9)
        ds = micro_dataset.train
        sig = teacher_signals(teacher, ds.images, ds.gts, chunk=5)
        _, maps = capture_gradient_maps(teacher, ds.images[:5], ds.gts[:5])
        for l in range(3):
            np.testing.assert_allclose(sig.maps[l][:5], maps[l], atol=1e-12)


class TestSgdProperties:
    @settings(max_examples=100, deadline=None)
    @given(st.lists(st.floats(-10, 10), min_size=1, max_size=6), st.floats(1e-4, 1.0))
    def test_plain_sgd_reduction(self, values, lr):
        p0 = np.array(values)
        g = np.cos(np.arange(p0.size))
        p = {"w": Tensor(p0.copy())}
        sgd_step(p, {"w": g}, {}, lr=lr, momentum=0.0, weight_decay=0.0)
        np.testing.assert_array_equal(p["w"].data, p0 - lr * g)

    @settings(max_examples=50, deadline=None)
    @given(st.floats(0.0, 0.99), st.integers(1, 6))
    def test_zero_gradient_velocity_decay(self, m, steps):
        state = {"w": np.array([1.0, -2.0])}
        p = {"w": Tensor(np.zeros(2))}
        for _ in range(steps):
            sgd_step(p, {"w": np.zeros(2)}, state, lr=0.1, momentum=m, weight_decay=0.0)
        np.testing.assert_allclose(state["w"], np.array([1.0, -2.0]) * m ** steps)
