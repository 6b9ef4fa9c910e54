import numpy as np
import pytest

from dualpipe import tensor as T
from dualpipe.optim import (AdamState, OptimizerError, TriStageSchedule,
                            adam_step, clip_global_norm, lr_at)


def test_adam_first_step_moves_by_lr():
    p = {"w": T.parameter(np.array([0.0], dtype=np.float32))}
    p["w"].grad = np.array([1.0], dtype=np.float32)
    adam_step(p, AdamState(), lr=0.01)
    # bias correction makes mhat = vhat = 1 on step 1
    np.testing.assert_allclose(p["w"].data, [-0.01], rtol=1e-6)


def test_adam_zero_grad_zero_state_no_move():
    p = {"w": T.parameter(np.array([2.5], dtype=np.float32))}
    p["w"].grad = np.zeros(1, dtype=np.float32)
    adam_step(p, AdamState(), lr=0.1)
    np.testing.assert_allclose(p["w"].data, [2.5])


def test_adam_two_steps_match_textbook_recurrence():
    # hand recurrence on a scalar with g1=0.5, g2=-0.25
    b1, b2, eps, lr = 0.9, 0.999, 1e-8, 0.05
    w = 1.0
    m = v = 0.0
    for t, g in enumerate([0.5, -0.25], start=1):
        m = b1 * m + (1 - b1) * g
        v = b2 * v + (1 - b2) * g * g
        mhat = m / (1 - b1 ** t)
        vhat = v / (1 - b2 ** t)
        w -= lr * mhat / (np.sqrt(vhat) + eps)

    p = {"w": T.parameter(np.array([1.0], dtype=np.float64))}
    st = AdamState(beta1=b1, beta2=b2, eps=eps)
    for g in [0.5, -0.25]:
        p["w"].grad = np.array([g], dtype=np.float64)
        adam_step(p, st, lr=lr)
    np.testing.assert_allclose(p["w"].data, [w], rtol=1e-12)


def test_adam_nonfinite_grad_names_parameter():
    p = {"bad.tensor": T.parameter(np.zeros(2, dtype=np.float32))}
    p["bad.tensor"].grad = np.array([1.0, np.inf], dtype=np.float32)
    with pytest.raises(OptimizerError, match="bad.tensor"):
        adam_step(p, AdamState(), lr=0.1)


def test_clip_global_norm():
    p = {"a": T.parameter(np.zeros(3)), "b": T.parameter(np.zeros(4))}
    p["a"].grad = np.full(3, 3.0, dtype=np.float32)
    p["b"].grad = np.full(4, 4.0, dtype=np.float32)
    pre = clip_global_norm(p, 1.0)
    total = np.sqrt((p["a"].grad ** 2).sum() + (p["b"].grad ** 2).sum())
    assert pre > 1.0
    np.testing.assert_allclose(total, 1.0, rtol=1e-5)


def test_tri_stage_schedule_pins():
    s = TriStageSchedule(peak_lr=1e-3, total_steps=100)
    assert lr_at(s, 10) == pytest.approx(1e-3)
    assert lr_at(s, 30) == pytest.approx(1e-3)
    assert lr_at(s, 75) == pytest.approx(5e-4)
    assert lr_at(s, 100) == 0.0
    assert lr_at(s, 0) == 0.0


def test_tri_stage_continuity_at_boundaries():
    s = TriStageSchedule(peak_lr=7e-4, total_steps=977)
    for frac in (0.10, 0.50):
        b = frac * s.total_steps
        lo, hi = lr_at(s, b - 1e-6), lr_at(s, b + 1e-6)
        assert abs(lo - hi) < 1e-10


def test_tri_stage_out_of_range():
    s = TriStageSchedule(peak_lr=1e-3, total_steps=10)
    with pytest.raises(OptimizerError):
        lr_at(s, -1)
    with pytest.raises(OptimizerError):
        lr_at(s, 11)


def test_tri_stage_bad_fractions():
    with pytest.raises(OptimizerError):
        TriStageSchedule(peak_lr=1e-3, total_steps=10, warmup_frac=0.5,
                         const_frac=0.4, decay_frac=0.5)
