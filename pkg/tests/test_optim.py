import math
from collections import OrderedDict

import numpy as np
import pytest

from sumnet.errors import NumericalError, ShapeError
from sumnet.model import LayerParams, ModelParams
from sumnet.optim import AdamState, adam_step, grads_by_name
from sumnet.tensor import Tape, Tensor, backward, mul, tensor_sum


def scalar_params(value=0.5):
    layer = LayerParams(
        kernel=Tensor(np.full((1, 1, 1, 1), value), requires_grad=True),
        bias=Tensor(np.zeros(1), requires_grad=True),
    )
    return ModelParams(None, [("p", layer)])


def reference_adam(theta, grads, lr, b1=0.9, b2=0.999, eps=1e-8):
    m = v = 0.0
    for t, g in enumerate(grads, start=1):
        m = b1 * m + (1 - b1) * g
        v = b2 * v + (1 - b2) * g * g
        m_hat = m / (1 - b1 ** t)
        v_hat = v / (1 - b2 ** t)
        theta = theta - lr * m_hat / (math.sqrt(v_hat) + eps)
    return theta


def test_zero_gradient_leaves_params_unchanged():
    params = scalar_params()
    state = AdamState.zeros_like(params)
    zeros = {name: np.zeros_like(t.data) for name, t in params.tensors()}
    new, state = adam_step(params, zeros, state)
    for (_, a), (_, b) in zip(params.tensors(), new.tensors()):
        assert a.data.tobytes() == b.data.tobytes()
    assert state.t == 1


def test_first_step_moves_by_learning_rate():
    params = scalar_params(0.5)
    state = AdamState.zeros_like(params)
    new, _ = adam_step(params, {"p.weight": np.full((1, 1, 1, 1), 0.3)}, state, lr=1e-3)
    step = new["p"].kernel.data.item() - 0.5
    assert step == pytest.approx(-1e-3 * 0.3 / (0.3 + 1e-8), abs=1e-15)
    assert step == pytest.approx(-1e-3, rel=1e-6)


def test_ten_step_trajectory_matches_scalar_reference():
    grads = [0.3, -0.1, 0.25, 0.7, -0.4, 0.05, 0.0, -0.9, 0.33, 0.12]
    params = scalar_params(0.5)
    state = AdamState.zeros_like(params)
    for g in grads:
        params, state = adam_step(params, {"p.weight": np.full((1, 1, 1, 1), g)}, state, lr=1e-2)
    expected = reference_adam(0.5, grads, lr=1e-2)
    assert abs(params["p"].kernel.data.item() - expected) < 1e-12
    assert state.t == 10


def test_zero_learning_rate_advances_moments_only():
    params = scalar_params(0.5)
    state = AdamState.zeros_like(params)
    new, state = adam_step(params, {"p.weight": np.full((1, 1, 1, 1), 0.3)}, state, lr=0.0)
    assert new["p"].kernel.data.tobytes() == params["p"].kernel.data.tobytes()
    assert state.t == 1
    assert state.m["p.weight"].item() == pytest.approx(0.03)
    assert state.v["p.weight"].item() == pytest.approx(0.001 * 0.09)


def test_non_finite_gradient_names_parameter():
    params = scalar_params()
    state = AdamState.zeros_like(params)
    with pytest.raises(NumericalError, match="p.weight"):
        adam_step(params, {"p.weight": np.full((1, 1, 1, 1), np.nan)}, state)
    assert state.t == 0


def test_gradient_shape_mismatch():
    params = scalar_params()
    with pytest.raises(ShapeError):
        adam_step(params, {"p.bias": np.zeros(2)}, AdamState.zeros_like(params))
    with pytest.raises(ShapeError):
        adam_step(params, {"q.weight": np.zeros(1)}, AdamState.zeros_like(params))


def test_state_must_match_params():
    params = scalar_params()
    with pytest.raises(ShapeError):
        adam_step(params, {}, AdamState(m=OrderedDict(), v=OrderedDict()))


def test_state_entries_round_trip():
    params = scalar_params()
    state = AdamState.zeros_like(params)
    _, state = adam_step(params, {"p.weight": np.full((1, 1, 1, 1), 0.2)}, state)
    restored = AdamState.from_entries(state.to_entries(), params)
    assert restored.t == 1
    for name in state.m:
        np.testing.assert_array_equal(restored.m[name], state.m[name])
        np.testing.assert_array_equal(restored.v[name], state.v[name])


def test_state_absent_from_entries():
    params = scalar_params()
    assert AdamState.from_entries(params.to_entries(), params) is None


def test_grads_by_name_from_tape():
    params = scalar_params(2.0)
    w = params["p"].kernel
    with Tape() as tape:
        loss = tensor_sum(mul(w, w))
    grads = grads_by_name(params, backward(loss, tape))
    assert list(grads) == ["p.weight"]
    assert grads["p.weight"].item() == 4.0
