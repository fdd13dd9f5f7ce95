import numpy as np
import pytest

from crossrf.autograd import Tape, Tensor, backward, mul, sum_all, add_scalar
from crossrf.optim import Adam, MissingGradientError


def test_zero_gradient_leaves_params_unchanged():
    w = Tensor(np.array([1.5, -2.0]), requires_grad=True)
    before = w.data.copy()
    opt = Adam([w], lr=0.1)
    w.grad = np.zeros_like(w.data)
    opt.step()
    np.testing.assert_array_equal(w.data, before)


def test_single_step_descends_quadratic():
    w = Tensor(np.array([1.0]), requires_grad=True)
    opt = Adam([w], lr=0.1)
    with Tape() as tape:
        loss = sum_all(mul(w, w))
    backward(loss, tape)
    opt.step()
    assert abs(w.data[0]) < 1.0


def test_converges_to_quadratic_minimum():
    w = Tensor(np.array([0.0]), requires_grad=True)
    opt = Adam([w], lr=0.05)
    for _ in range(200):
        opt.zero_grad()
        with Tape() as tape:
            shifted = add_scalar(w, -3.0)
            loss = sum_all(mul(shifted, shifted))
        backward(loss, tape)
        opt.step()
    assert abs(w.data[0] - 3.0) < 1e-2


def test_missing_gradient_raises():
    w = Tensor(np.ones(3), requires_grad=True)
    opt = Adam([w], lr=0.1)
    with pytest.raises(MissingGradientError):
        opt.step()


def test_trajectory_is_deterministic():
    def run():
        rng = np.random.default_rng(42)
        w = Tensor(rng.standard_normal(8).astype(np.float32), requires_grad=True)
        opt = Adam([w], lr=0.01)
        for _ in range(50):
            opt.zero_grad()
            with Tape() as tape:
                loss = sum_all(mul(w, w))
            backward(loss, tape)
            opt.step()
        return w.data.copy()

    np.testing.assert_array_equal(run(), run())


def test_nonpositive_lr_rejected():
    with pytest.raises(ValueError):
        Adam([Tensor(np.ones(1), requires_grad=True)], lr=0.0)
