import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from hilots import tensor as T
from hilots.geom import PointCloudFrame
from hilots.gradcheck import run_case, tiny_model_config
from hilots.model import forward, init_params, predict, prepare_window
from hilots.tensor import ParameterSet, Tensor
from hilots.trainer import (AdamW, LossWeights, TeacherStudentState, TrainConfig, adamw_step,
                            consistency_loss, ema_update, focal_loss, inverse_frequency_weights,
                            route_and_step, total_loss)


def np_cross_entropy(logits, labels):
    z = logits - logits.max(axis=1, keepdims=True)
    logp = z - np.log(np.exp(z).sum(axis=1, keepdims=True))
    return -logp[np.arange(len(labels)), labels].mean()


class TestFocalLoss:
    def test_gamma_zero_is_cross_entropy(self, rng):
        for _ in range(20):
            logits = rng.normal(0, 3, (50, 5))
            labels = rng.integers(0, 5, 50)
            got = focal_loss(Tensor(logits), labels, gamma=0.0).item()
            assert abs(got - np_cross_entropy(logits, labels)) <= 1e-12

    def test_single_point_half_probability(self):
        got = focal_loss(Tensor([[0.0, 0.0]]), np.array([1]), gamma=2.0).item()
        assert got == pytest.approx(0.25 * math.log(2), abs=1e-15)
        assert got == pytest.approx(0.1733, abs=1e-4)

    def test_confident_points_give_zero(self):
        logits = np.array([[60.0, 0.0, 0.0], [0.0, 0.0, 60.0]])
        assert focal_loss(Tensor(logits), np.array([0, 2])).item() < 1e-30

    def test_empty_set_is_zero(self):
        assert focal_loss(Tensor(np.ones((3, 2))), np.array([-1, -1, -1])).item() == 0.0
        assert focal_loss(Tensor(np.zeros((0, 2))), np.zeros(0, int)).item() == 0.0

    def test_ignored_points_do_not_count(self, rng):
        logits = rng.normal(size=(6, 3))
        labels = np.array([0, 1, -1, 2, -1, 1])
        keep = labels >= 0
        a = focal_loss(Tensor(logits), labels).item()
        b = focal_loss(Tensor(logits[keep]), labels[keep]).item()
        assert a == pytest.approx(b, abs=1e-15)

    def test_out_of_range_labels_rejected(self):
        with pytest.raises(ValueError):
            focal_loss(Tensor(np.zeros((2, 3))), np.array([0, 3]))

    def test_class_weights_scale_terms(self, rng):
        logits = rng.normal(size=(4, 2))
        labels = np.array([0, 0, 0, 0])
        a = focal_loss(Tensor(logits), labels).item()
        b = focal_loss(Tensor(logits), labels, class_weights=np.array([3.0, 1.0])).item()
        assert b == pytest.approx(3 * a, rel=1e-14)

    def test_inverse_frequency_weights(self):
        w = inverse_frequency_weights([np.array([0, 0, 0, 1, -1])], 3)
        # counts 3, 1, 0 -> raw 4/3/2=0.667, 4/1/2=2 -> normalised to mean 1 over seen classes
        np.testing.assert_allclose(w, [0.5, 1.5, 0.0])

    def test_gradient(self):
        assert run_case("focal_loss").max_rel_err < 1e-4


class TestConsistencyLoss:
    def test_identical_inputs(self, rng):
        x = rng.normal(size=(7, 4))
        assert consistency_loss(Tensor(x), Tensor(x.copy())).item() == 0.0

    def test_opposite_one_hots(self):
        got = consistency_loss(Tensor([[80.0, -80.0]]), Tensor([[-80.0, 80.0]])).item()
        assert got == pytest.approx(math.sqrt(2), abs=1e-12)

    def test_shift_invariance(self, rng):
        a, b = rng.normal(size=(5, 3)), rng.normal(size=(5, 3))
        base = consistency_loss(Tensor(a), Tensor(b)).item()
        assert consistency_loss(Tensor(a + 7.5), Tensor(b)).item() == pytest.approx(base, abs=1e-14)

    def test_normalised_by_point_count(self, rng):
        a, b = rng.normal(size=(1, 3)), rng.normal(size=(1, 3))
        one = consistency_loss(Tensor(a), Tensor(b)).item()
        # four copies: the norm doubles and the count quadruples
        four = consistency_loss(Tensor(np.repeat(a, 4, 0)), Tensor(np.repeat(b, 4, 0))).item()
        assert four == pytest.approx(one / 2, rel=1e-13)

    def test_shape_mismatch(self):
        with pytest.raises(ValueError):
            consistency_loss(Tensor(np.zeros((2, 3))), Tensor(np.zeros((3, 3))))

    @settings(max_examples=50, deadline=None)
    @given(st.integers(0, 2**31 - 1))
    def test_non_negative(self, seed):
        r = np.random.default_rng(seed)
        assert consistency_loss(Tensor(r.normal(size=(4, 3))), Tensor(r.normal(size=(4, 3)))).item() >= 0

    def test_gradient(self):
        assert run_case("consistency_loss").max_rel_err < 1e-4


class TestTotalLoss:
    def test_plain_sum(self):
        assert total_loss(Tensor(2.0), Tensor(3.0)).item() == 5.0

    def test_weighted(self):
        assert total_loss(Tensor(1.5), Tensor(0.5), LossWeights(2.0, 4.0)).item() == 5.0

    def test_beta_zero_is_supervised(self):
        assert total_loss(Tensor(1.25), Tensor(99.0), LossWeights(1.0, 0.0)).item() == 1.25

    def test_negative_weights_rejected(self):
        with pytest.raises(ValueError):
            LossWeights(-1.0, 1.0)

    @given(st.floats(0, 10), st.floats(0, 10), st.floats(0, 10), st.floats(0, 5), st.floats(0, 5))
    def test_monotone(self, a, b, extra, wa, wb):
        w = LossWeights(wa, wb)
        base = total_loss(Tensor(a), Tensor(b), w).item()
        assert total_loss(Tensor(a + extra), Tensor(b), w).item() >= base
        assert total_loss(Tensor(a), Tensor(b + extra), w).item() >= base


def _pair(student: dict, teacher: dict, gamma: float) -> TeacherStudentState:
    s, t = ParameterSet(), ParameterSet()
    for k, v in student.items():
        s.add(k, v)
        t.add(k, teacher[k])
    return TeacherStudentState(s, t.copy(requires_grad=False), gamma)


class TestEma:
    def test_gamma_one_keeps_teacher(self, rng):
        t0 = rng.normal(size=(3, 2))
        st_ = _pair({"w": rng.normal(size=(3, 2))}, {"w": t0.copy()}, 1.0)
        ema_update(st_)
        np.testing.assert_array_equal(st_.teacher["w"].data, t0)

    def test_gamma_zero_copies_student(self, rng):
        s0 = rng.normal(size=(3, 2))
        st_ = _pair({"w": s0.copy()}, {"w": rng.normal(size=(3, 2))}, 0.0)
        ema_update(st_)
        np.testing.assert_array_equal(st_.teacher["w"].data, s0)
        np.testing.assert_array_equal(st_.student["w"].data, s0)

    def test_first_step_of_trajectory(self):
        st_ = _pair({"w": np.array(1.0)}, {"w": np.array(0.0)}, 0.99)
        ema_update(st_)
        assert st_.teacher["w"].data == pytest.approx(0.01, abs=1e-15)

    @pytest.mark.parametrize("k", [1, 10, 100])
    def test_trajectory_099(self, k):
        st_ = _pair({"w": np.array(1.0)}, {"w": np.array(0.0)}, 0.99)
        for _ in range(k):
            ema_update(st_)
        assert abs(st_.teacher["w"].data - (1 - 0.99 ** k)) <= 1e-12

    @pytest.mark.parametrize("k", [1, 10, 100])
    def test_closed_form_bitwise_half(self, rng, k):
        # zero student: every product by 0.5 is exact, so the gap halves exactly
        t0 = rng.normal(size=(4, 3))
        st_ = _pair({"w": np.zeros((4, 3))}, {"w": t0.copy()}, 0.5)
        for _ in range(k):
            ema_update(st_)
        np.testing.assert_array_equal(np.abs(st_.teacher["w"].data - 0.0), 0.5 ** k * np.abs(t0))

    @pytest.mark.parametrize("k", [1, 5, 10])
    def test_closed_form_bitwise_half_nonzero_student(self, k):
        st_ = _pair({"w": np.array([3.0, -2.0])}, {"w": np.array([1.0, 6.0])}, 0.5)
        for _ in range(k):
            ema_update(st_)
        np.testing.assert_array_equal(np.abs(st_.teacher["w"].data - [3.0, -2.0]), 0.5 ** k * np.array([2.0, 8.0]))

    def test_copy_initialisation(self, rng):
        s = ParameterSet()
        s.add("a", rng.normal(size=(2, 2)))
        state = TeacherStudentState.from_student(s)
        np.testing.assert_array_equal(state.teacher["a"].data, s["a"].data)
        assert state.teacher["a"].data is not s["a"].data
        assert not state.teacher_has_grads()

    def test_layout_mismatch_rejected(self):
        s, t = ParameterSet(), ParameterSet()
        s.add("a", np.zeros(2))
        t.add("a", np.zeros(3))
        with pytest.raises(ValueError):
            TeacherStudentState(s, t)


class TestAdamW:
    def _p(self, value):
        p = ParameterSet()
        p.add("w", np.array(value, dtype=float))
        return p

    def test_zero_gradient_zero_decay(self):
        p = self._p([1.0, -2.0])
        AdamW(p, lr=0.1).step(p, {"w": np.zeros(2)})
        np.testing.assert_array_equal(p["w"].data, [1.0, -2.0])

    def test_first_step_closed_form(self):
        g = np.array([0.3, -4.0, 1e-3])
        p = self._p([1.0, 1.0, 1.0])
        AdamW(p, lr=0.01, eps=1e-8).step(p, {"w": g})
        np.testing.assert_allclose(p["w"].data, 1.0 - 0.01 * g / (np.abs(g) + 1e-8), rtol=0, atol=1e-15)

    def test_decay_only(self):
        p = self._p([2.0, -0.5])
        AdamW(p, lr=0.1, weight_decay=0.01).step(p, {"w": np.zeros(2)})
        np.testing.assert_allclose(p["w"].data, np.array([2.0, -0.5]) * (1 - 0.1 * 0.01), rtol=1e-15)

    def test_second_step_bias_correction(self):
        g1, g2 = 0.5, -1.5
        p = self._p([0.0])
        opt = AdamW(p, lr=1.0, betas=(0.9, 0.999), eps=0.0)
        opt.step(p, {"w": np.array([g1])})
        opt.step(p, {"w": np.array([g2])})
        m = (0.9 * 0.1 * g1 + 0.1 * g2) / (1 - 0.9 ** 2)
        v = (0.999 * 0.001 * g1 ** 2 + 0.001 * g2 ** 2) / (1 - 0.999 ** 2)
        assert p["w"].data[0] == pytest.approx(-1.0 - m / math.sqrt(v), rel=1e-12)

    def test_functional_wrapper_keeps_state(self):
        p = self._p([1.0])
        cfg = TrainConfig(lr=0.1, weight_decay=0.0)
        st_ = adamw_step(p, {"w": np.array([1.0])}, cfg)
        assert adamw_step(p, {"w": np.array([1.0])}, cfg, st_) is st_ and st_.k == 2


def _frames(rng, n=30, t=2):
    out = []
    for _ in range(t):
        rho = rng.uniform(0.5, 9.5, n)
        th = rng.uniform(-np.pi, np.pi, n)
        out.append(PointCloudFrame(np.c_[rho * np.cos(th), rho * np.sin(th), rng.uniform(-1.9, 1.9, n),
                                         rng.random(n)]))
    return out


class TestRouteAndStep:
    cfg = tiny_model_config()

    def _state(self, seed=0):
        st_ = TeacherStudentState.from_student(init_params(self.cfg, seed), 0.99)
        return st_, AdamW(st_.student, 1e-3)

    def test_consistency_zero_at_step_zero(self, rng):
        st_, opt = self._state()
        pw = prepare_window(_frames(rng), self.cfg, center=0)
        rec = route_and_step([pw], st_, opt, TrainConfig(), self.cfg)
        assert rec.l_con == 0.0 and rec.n_unlabeled == 1

    def test_perfect_logit_labels(self, rng):
        st_, opt = self._state()
        for name in st_.student.with_prefix("refine/mlp/l1/"):
            st_.student[name].data = st_.student[name].data * 1e5
        pw = prepare_window(_frames(rng), self.cfg, center=0)
        labels = predict(st_.student, pw, self.cfg)
        pw = prepare_window(pw.frames, self.cfg, center=0, labels=labels)
        rec = route_and_step([pw], st_, opt, TrainConfig(), self.cfg)
        assert rec.l_sup < 1e-6 and rec.n_labeled == 1

    def test_ten_steps_are_deterministic(self):
        def run():
            r = np.random.default_rng(5)
            st_, opt = self._state(3)
            lines = []
            for k in range(10):
                frames = _frames(r)
                labels = r.integers(0, 3, 30) if k % 2 == 0 else None
                pw = prepare_window(frames, self.cfg, center=0, labels=labels)
                lines.append(route_and_step([pw], st_, opt, TrainConfig(), self.cfg).line())
            return lines
        assert run() == run()

    def test_short_window_rejected(self, rng):
        st_, opt = self._state()
        pw = prepare_window(_frames(rng, t=1), self.cfg.with_heu(t=1), center=0)
        with pytest.raises(ValueError):
            route_and_step([pw], st_, opt, TrainConfig(), self.cfg)

    def test_teacher_never_has_gradients(self, rng):
        st_, opt = self._state()
        for k in range(3):
            labels = rng.integers(0, 3, 30) if k == 1 else None
            pw = prepare_window(_frames(rng), self.cfg, center=0, labels=labels)
            route_and_step([pw], st_, opt, TrainConfig(), self.cfg)
            assert not st_.teacher_has_grads()

    def test_beta_zero_is_supervised(self, rng):
        frames = _frames(rng)
        labels = rng.integers(0, 3, 30)
        lab = prepare_window(frames, self.cfg, center=0, labels=labels)
        unl = prepare_window(_frames(rng), self.cfg, center=0)
        cfg = TrainConfig(loss=LossWeights(1.0, 0.0))
        a_state, a_opt = self._state()
        b_state, b_opt = self._state()
        # a random teacher must not matter when the consistency weight is zero
        for _, t in b_state.teacher.items():
            t.data = t.data + 1.0
        ra = route_and_step([lab, unl], a_state, a_opt, cfg, self.cfg)
        rb = route_and_step([lab], b_state, b_opt, cfg, self.cfg)
        assert ra.total == rb.total == ra.l_sup
        for name, t in a_state.student.items():
            np.testing.assert_array_equal(t.data, b_state.student[name].data)

    def test_student_moves_teacher_follows(self, rng):
        st_, opt = self._state()
        before_s = st_.student.copy()
        before_t = st_.teacher.copy()
        pw = prepare_window(_frames(rng), self.cfg, center=0, labels=rng.integers(0, 3, 30))
        route_and_step([pw], st_, opt, TrainConfig(), self.cfg)
        for name, t in st_.student.items():
            expect = 0.99 * before_t[name].data + 0.01 * t.data
            np.testing.assert_allclose(st_.teacher[name].data, expect, rtol=0, atol=1e-15)
        assert any(not np.array_equal(t.data, before_s[n].data) for n, t in st_.student.items())


class TestTrainConfig:
    def test_validation(self):
        with pytest.raises(ValueError):
            TrainConfig(iterations=0)
        with pytest.raises(ValueError):
            TrainConfig(lr=0.0)
        with pytest.raises(ValueError):
            TrainConfig(ema=1.5)

    def test_warmup(self):
        cfg = TrainConfig(lr=1e-3, warmup=4)
        assert [cfg.lr_at(s) for s in range(5)] == pytest.approx([2.5e-4, 5e-4, 7.5e-4, 1e-3, 1e-3])
