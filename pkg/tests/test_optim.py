"""Optimizer update rule and the warm-restart schedule."""

import numpy as np
import pytest

from glod.nn import Module, Parameter
from glod.optim import AdamW, NonFiniteGradient, cosine_warm_restart_lr


class OneParam(Module):
    def __init__(self, value):
        super().__init__()
        self.w = Parameter(np.asarray(value, dtype=np.float64))


class TestAdamW:
    def test_first_step_unit_gradient_moves_by_lr(self):
        m = OneParam([1.0, 1.0])
        opt = AdamW(m, lr=0.1, weight_decay=0.0)
        opt.step({m.w: np.ones(2)})
        np.testing.assert_allclose(m.w.data, 1.0 - 0.1, atol=1e-8)

    def test_first_step_magnitude_independent_of_betas(self):
        for betas in ((0.9, 0.999), (0.5, 0.9), (0.0, 0.0)):
            m = OneParam([0.0])
            opt = AdamW(m, lr=0.01, betas=betas, weight_decay=0.0)
            opt.step({m.w: np.ones(1)})
            assert m.w.data[0] == pytest.approx(-0.01, rel=1e-6)

    def test_zero_gradient_no_motion(self):
        m = OneParam([2.5])
        opt = AdamW(m, lr=0.1, weight_decay=0.0)
        opt.step({m.w: np.zeros(1)})
        assert m.w.data[0] == 2.5

    def test_pure_decay(self):
        m = OneParam([2.0])
        opt = AdamW(m, lr=0.1, weight_decay=0.5)
        opt.step({m.w: np.zeros(1)})
        assert m.w.data[0] == pytest.approx(2.0 * (1 - 0.1 * 0.5))

    def test_nan_gradient_aborts_with_name(self):
        m = OneParam([1.0])
        opt = AdamW(m, lr=0.1)
        before = m.w.data.copy()
        with pytest.raises(NonFiniteGradient, match="w"):
            opt.step({m.w: np.array([np.nan])})
        np.testing.assert_array_equal(m.w.data, before)

    def test_state_roundtrip(self):
        m = OneParam([1.0, 2.0])
        opt = AdamW(m, lr=0.1)
        opt.step({m.w: np.array([0.3, -0.2])})
        entries = opt.state_entries()
        m2 = OneParam([1.0, 2.0])
        opt2 = AdamW(m2, lr=0.1)
        opt2.load_state_entries(entries)
        assert opt2.step_count == 1
        np.testing.assert_array_equal(opt2.m["w"], opt.m["w"])
        np.testing.assert_array_equal(opt2.v["w"], opt.v["w"])


class TestSchedule:
    def test_cycle_start_is_max(self):
        assert cosine_warm_restart_lr(0, 100, 1e-3) == 1e-3

    def test_midpoint_is_mean(self):
        lr = cosine_warm_restart_lr(50, 100, 1.0, 0.2)
        assert lr == pytest.approx(0.6, abs=1e-12)

    def test_restart_at_cycle_boundary(self):
        assert cosine_warm_restart_lr(100, 100, 1e-3) == 1e-3

    def test_exact_periodicity(self):
        for t in range(0, 200, 7):
            assert cosine_warm_restart_lr(t, 40, 0.5, 0.1) == \
                cosine_warm_restart_lr(t + 40, 40, 0.5, 0.1)

    def test_bounded(self):
        vals = [cosine_warm_restart_lr(t, 33, 1.0, 0.25) for t in range(100)]
        assert min(vals) >= 0.25 and max(vals) <= 1.0

    def test_invalid_cycle(self):
        with pytest.raises(ValueError):
            cosine_warm_restart_lr(1, 0, 1.0)
