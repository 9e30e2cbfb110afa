import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from s6tal import tensor as T
from s6tal.optim import AdamW, OptimizerState, adamw_step, clip_grad_norm, warmup_cosine


def scalar(v):
    with T.precision(np.float64):
        return T.parameter(np.array([v], dtype=np.float64))


def test_zero_grad_zero_decay_is_noop():
    p = scalar(1.5)
    adamw_step([p], [np.zeros(1)], OptimizerState(lr=0.1, weight_decay=0.0))
    assert p.data[0] == 1.5


def test_first_step_moves_by_lr():
    p = scalar(0.0)
    st_ = adamw_step([p], [np.ones(1)], OptimizerState(lr=0.1, betas=(0.9, 0.999), eps=1e-8))
    assert p.data[0] == pytest.approx(-0.1, rel=1e-6)
    assert st_.step == 1


def test_decoupled_decay():
    p = scalar(1.0)
    adamw_step([p], [np.zeros(1)], OptimizerState(lr=0.1, weight_decay=0.1))
    assert p.data[0] == pytest.approx(0.99, abs=1e-15)


def test_step_counter_and_moment_shapes():
    with T.precision(np.float64):
        ps = [T.parameter(np.zeros((2, 3))), T.parameter(np.zeros(4))]
    opt = AdamW(ps, lr=1e-2)
    for k in range(1, 4):
        for p in ps:
            p.grad = np.ones_like(p.data)
        opt.step()
        assert opt.state.step == k
    assert [m.shape for m in opt.state.m] == [(2, 3), (4,)]
    assert [v.shape for v in opt.state.v] == [(2, 3), (4,)]


def test_decay_mask():
    a, b = scalar(1.0), scalar(1.0)
    opt = AdamW([a, b], lr=0.1, weight_decay=0.5, decay_mask=[True, False])
    opt.step()
    assert a.data[0] == pytest.approx(0.95) and b.data[0] == 1.0


def test_non_finite_gradient():
    p = scalar(1.0)
    p.grad = np.array([np.nan])
    with pytest.raises(FloatingPointError):
        AdamW([p]).step()


def test_invalid_lr():
    with pytest.raises(ValueError):
        AdamW([scalar(0.0)], lr=0.0)


def test_minimizes_quadratic():
    p = scalar(3.0)
    opt = AdamW([p], lr=0.1)
    for _ in range(300):
        p.grad = 2 * (p.data - 1.0)
        opt.step()
    assert p.data[0] == pytest.approx(1.0, abs=1e-2)


def test_clip_grad_norm():
    a, b = scalar(0.0), scalar(0.0)
    a.grad, b.grad = np.array([3.0]), np.array([4.0])
    assert clip_grad_norm([a, b], 1.0) == pytest.approx(5.0)
    assert np.hypot(a.grad[0], b.grad[0]) == pytest.approx(1.0, rel=1e-5)


@settings(max_examples=50, deadline=None)
@given(total=st.integers(2, 500), frac=st.floats(0, 0.5))
def test_schedule_bounds(total, frac):
    warm = int(frac * total)
    lrs = [warmup_cosine(s, total, warm, 1e-3) for s in range(total)]
    assert all(0 <= v <= 1e-3 + 1e-15 for v in lrs)
    assert lrs[warm:] == sorted(lrs[warm:], reverse=True)
    if warm:
        assert lrs[:warm] == sorted(lrs[:warm])
