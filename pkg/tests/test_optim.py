import math

import numpy as np
import pytest

from ot_transformer.optim import OptimState, adam_step, clip_grad_norm, global_grad_norm, lr_schedule
from ot_transformer.tensor import Tensor


def test_adam_first_step_moves_by_lr_times_sign():
    p = Tensor(np.array([[1.0, -2.0]]), requires_grad=True)
    p.grad = np.array([[3.0, -0.5]])
    st = OptimState.for_params([p])
    adam_step([p], st, lr=0.1)
    np.testing.assert_allclose(p.data, [[0.9, -1.9]], atol=1e-8)
    assert st.step == 1 and p.grad is None


def test_adam_matches_reference_over_steps():
    rng = np.random.default_rng(0)
    p = Tensor(rng.standard_normal((3, 2)), requires_grad=True)
    ref = p.data.copy()
    m = np.zeros_like(ref)
    v = np.zeros_like(ref)
    st = OptimState.for_params([p])
    for t in range(1, 6):
        g = rng.standard_normal((3, 2))
        p.grad = g.copy()
        adam_step([p], st, lr=0.01)
        m = 0.9 * m + 0.1 * g
        v = 0.999 * v + 0.001 * g * g
        ref -= 0.01 * (m / (1 - 0.9**t)) / (np.sqrt(v / (1 - 0.999**t)) + 1e-8)
    np.testing.assert_allclose(p.data, ref, atol=1e-14)


def test_adam_requires_gradients():
    p = Tensor(np.ones((1, 1)), requires_grad=True)
    with pytest.raises(RuntimeError):
        adam_step([p], OptimState.for_params([p]), 0.1)


def test_clipping():
    a = Tensor(np.zeros((1, 2)), requires_grad=True)
    b = Tensor(np.zeros((1, 1)), requires_grad=True)
    a.grad, b.grad = np.array([[3.0, 0.0]]), np.array([[4.0]])
    assert clip_grad_norm([a, b], 1.0) == pytest.approx(5.0)
    assert global_grad_norm([a, b]) == pytest.approx(1.0)
    np.testing.assert_allclose(a.grad, [[0.6, 0.0]])
    assert clip_grad_norm([a, b], 10.0) == pytest.approx(1.0)
    np.testing.assert_allclose(b.grad, [[0.8]])


def test_cosine_schedule_endpoints():
    assert lr_schedule(0, 100, 1e-3, 1e-4) == 1e-3
    assert lr_schedule(100, 100, 1e-3, 1e-4) == pytest.approx(1e-4)
    assert lr_schedule(50, 100, 1e-3, 1e-4) == pytest.approx(5.5e-4)
    lrs = [lr_schedule(i, 100, 1e-3, 1e-4) for i in range(101)]
    assert all(x >= y for x, y in zip(lrs, lrs[1:]))
    assert lr_schedule(0, 0, 1e-3, 1e-4) == 1e-3
    assert math.isclose(lr_schedule(200, 100, 1e-3, 1e-4), 1e-4)
