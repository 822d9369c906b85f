import numpy as np
import pytest

from icobridge import optim
from icobridge.autodiff import Tensor


def make_params(values):
    return {name: Tensor(np.array(v, dtype=np.float64), requires_grad=True)
            for name, v in values.items()}


def test_zero_grad_zero_decay_leaves_params():
    params = make_params({"w": [1.0, -2.0, 3.0]})
    state = optim.init_adamw(params, lr=0.1, weight_decay=0.0)
    before = params["w"].data.copy()
    optim.adamw_step(params, {"w": np.zeros(3)}, state)
    np.testing.assert_array_equal(params["w"].data, before)
    assert state.step == 1


def test_first_step_unit_gradient():
    params = make_params({"w": [0.0]})
    state = optim.init_adamw(params, lr=0.1, weight_decay=0.0)
    optim.adamw_step(params, {"w": np.array([1.0])}, state)
    # bias-corrected mhat/vhat are both 1 on the first step, so the move is
    # lr/(1+eps) up to eps
    assert params["w"].data[0] == pytest.approx(-0.1, abs=1e-6)


def test_pure_weight_decay_shrinkage():
    params = make_params({"w": [2.0, -4.0]})
    state = optim.init_adamw(params, lr=0.05, weight_decay=0.1)
    optim.adamw_step(params, {"w": np.zeros(2)}, state)
    np.testing.assert_allclose(params["w"].data, np.array([2.0, -4.0]) * (1 - 0.05 * 0.1), rtol=0, atol=1e-15)


def test_adamw_matches_reference_sequence():
    # independent reference implementation of the update recurrence
    rng = np.random.default_rng(5)
    theta = rng.normal(size=4)
    grads = [rng.normal(size=4) for _ in range(5)]
    lr, b1, b2, eps, wd = 0.01, 0.9, 0.999, 1e-8, 0.01

    ref = theta.copy()
    m = np.zeros(4)
    v = np.zeros(4)
    for k, g in enumerate(grads, start=1):
        m = b1 * m + (1 - b1) * g
        v = b2 * v + (1 - b2) * g * g
        mhat = m / (1 - b1 ** k)
        vhat = v / (1 - b2 ** k)
        ref = ref - lr * (mhat / (np.sqrt(vhat) + eps) + wd * ref)

    params = make_params({"w": theta})
    state = optim.init_adamw(params, lr=lr, weight_decay=wd)
    for g in grads:
        optim.adamw_step(params, {"w": g}, state)
    np.testing.assert_allclose(params["w"].data, ref, rtol=0, atol=1e-15)


def test_adamw_deterministic():
    for attempt in range(2):
        params = make_params({"w": [0.3, 0.7]})
        state = optim.init_adamw(params, lr=0.01)
        optim.adamw_step(params, {"w": np.array([0.1, -0.2])}, state)
        if attempt == 0:
            first = params["w"].data.copy()
    np.testing.assert_array_equal(params["w"].data, first)


def test_adamw_shape_mismatch():
    params = make_params({"w": [1.0, 2.0]})
    state = optim.init_adamw(params)
    with pytest.raises(ValueError):
        optim.adamw_step(params, {"w": np.zeros(3)}, state)


def test_ema_decay_zero_copies_params():
    params = make_params({"w": [1.0, 2.0]})
    shadow = {"w": np.zeros(2)}
    optim.ema_update(shadow, params, decay=0.0)
    np.testing.assert_array_equal(shadow["w"], params["w"].data)


def test_ema_rejects_decay_one():
    params = make_params({"w": [1.0]})
    with pytest.raises(ValueError):
        optim.ema_update({"w": np.zeros(1)}, params, decay=1.0)
    with pytest.raises(ValueError):
        optim.ema_update({"w": np.zeros(1)}, params, decay=-0.1)


def test_ema_geometric_convergence():
    params = make_params({"w": [1.0]})
    shadow = {"w": np.array([0.0])}
    decay = 0.9
    k = 25
    for _ in range(k):
        optim.ema_update(shadow, params, decay=decay)
    # closed form: shadow_k = target + (shadow_0 - target) * decay^k
    expect = 1.0 - decay ** k
    np.testing.assert_allclose(shadow["w"][0], expect, rtol=0, atol=1e-12)


def test_collect_grads_filters_missing():
    params = make_params({"a": [1.0], "b": [2.0]})
    params["a"].grad = np.array([0.5])
    grads = optim.collect_grads(params)
    assert set(grads) == {"a"}
    np.testing.assert_array_equal(grads["a"], [0.5])
