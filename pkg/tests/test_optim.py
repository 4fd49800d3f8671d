"""Adam update math against an independent recurrence."""

import numpy as np
import pytest

from vgan.engine import ContractViolation, Tensor
from vgan.optim import Adam, AdamState, adam_step, collect_params


def test_first_step_moves_by_lr_times_sign():
    p = Tensor(np.array([1.0, -2.0]))
    state = AdamState(lr=0.01)
    adam_step({"p": p}, {"p": np.array([0.5, -3.0])}, state)
    # bias correction makes the first step lr * g / (|g| + eps)
    assert np.allclose(p.data, [1.0 - 0.01, -2.0 + 0.01], atol=1e-9)
    assert state.t == 1


def test_three_steps_match_hand_recurrence():
    rng = np.random.default_rng(0)
    p0 = rng.standard_normal(4)
    gs = [rng.standard_normal(4) for _ in range(3)]

    p = Tensor(p0.copy())
    state = AdamState(lr=0.05, beta1=0.8, beta2=0.9, eps=1e-8)
    for g in gs:
        adam_step({"p": p}, {"p": g}, state)

    # independent reimplementation of the textbook recurrence
    x = p0.copy()
    m = np.zeros(4)
    v = np.zeros(4)
    for t, g in enumerate(gs, start=1):
        m = 0.8 * m + 0.2 * g
        v = 0.9 * v + 0.1 * g * g
        mh = m / (1 - 0.8**t)
        vh = v / (1 - 0.9**t)
        x -= 0.05 * mh / (np.sqrt(vh) + 1e-8)

    assert np.allclose(p.data, x, atol=1e-12)
    assert state.t == 3


def test_missing_gradient_means_zero():
    p = Tensor(np.array([1.0]))
    q = Tensor(np.array([2.0]))
    state = AdamState(lr=0.1)
    adam_step({"p": p, "q": q}, {"p": np.array([1.0]), "q": None}, state)
    assert q.data[0] == 2.0  # zero grad, zero moments: no movement
    assert p.data[0] != 1.0

    # after momentum builds up, a missing grad still moves the parameter
    adam_step({"p": p, "q": q}, {}, state)
    assert state.t == 2
    assert "q" in state.m


def test_gradient_shape_mismatch_rejected():
    p = Tensor(np.zeros(3))
    with pytest.raises(ContractViolation):
        adam_step({"p": p}, {"p": np.zeros(4)}, AdamState())


def test_momentum_carries_across_steps():
    p = Tensor(np.array([0.0]))
    state = AdamState(lr=0.01)
    g = np.array([1.0])
    adam_step({"p": p}, {"p": g}, state)
    after_one = p.data.copy()
    adam_step({"p": p}, {"p": None}, state)
    # decayed first moment keeps pushing in the same direction
    assert p.data[0] < after_one[0]


def test_adam_wrapper_reads_tensor_grads():
    p = Tensor(np.array([1.0]), requires_grad=True)
    opt = Adam({"p": p}, lr=0.5)
    (p * p).sum().backward()
    opt.step()
    assert p.data[0] < 1.0
    opt.zero_grad()
    assert p.grad is None


def test_collect_params_typechecks():
    with pytest.raises(ContractViolation):
        collect_params({"w": np.zeros(2)})
    params = {"w": Tensor(np.zeros(2))}
    assert collect_params(params) is params
