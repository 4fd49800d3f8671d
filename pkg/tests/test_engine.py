"""Autodiff core: forward values, hand-checked gradients, graph mechanics."""

import numpy as np
import pytest

from vgan.engine import (
    ContractViolation,
    Tensor,
    clip,
    concat,
    exp,
    finite_diff_check,
    is_grad_enabled,
    log,
    narrow,
    no_grad,
    tensor_abs,
    tensor_mean,
    tensor_sum,
    transpose,
)


def test_forward_arithmetic_values():
    a = Tensor([1.0, 2.0, 3.0])
    b = Tensor([4.0, 5.0, 6.0])
    assert np.array_equal((a + b).data, [5.0, 7.0, 9.0])
    assert np.array_equal((a * b).data, [4.0, 10.0, 18.0])
    assert np.array_equal((b - a).data, [3.0, 3.0, 3.0])
    assert np.allclose((b / a).data, [4.0, 2.5, 2.0])
    assert np.array_equal((-a).data, [-1.0, -2.0, -3.0])
    assert np.array_equal((a ** 2).data, [1.0, 4.0, 9.0])


def test_product_rule_gradients():
    a = Tensor([2.0, 3.0], requires_grad=True)
    b = Tensor([5.0, 7.0], requires_grad=True)
    ((a * b + a).sum()).backward()
    assert np.array_equal(a.grad, [6.0, 8.0])  # b + 1
    assert np.array_equal(b.grad, [2.0, 3.0])  # a


def test_grad_accumulates_over_reuse():
    x = Tensor([3.0], requires_grad=True)
    y = x * x + x * x  # diamond: x feeds two paths
    y.sum().backward()
    assert np.array_equal(x.grad, [12.0])  # d(2x^2)/dx = 4x


def test_division_and_pow_gradients():
    x = Tensor([2.0], requires_grad=True)
    (Tensor([1.0]) / x).sum().backward()
    assert np.allclose(x.grad, [-0.25])  # -1/x^2
    x2 = Tensor([3.0], requires_grad=True)
    (x2 ** 3).sum().backward()
    assert np.allclose(x2.grad, [27.0])  # 3x^2


def test_broadcast_gradient_unbroadcasts():
    a = Tensor(np.ones((2, 3)), requires_grad=True)
    b = Tensor(np.ones(3), requires_grad=True)
    (a + b).sum().backward()
    assert a.grad.shape == (2, 3)
    assert b.grad.shape == (3,)
    assert np.array_equal(b.grad, [2.0, 2.0, 2.0])  # summed over the new axis


def test_matmul_gradients():
    a = Tensor(np.arange(6, dtype=np.float64).reshape(2, 3), requires_grad=True)
    b = Tensor(np.arange(12, dtype=np.float64).reshape(3, 4), requires_grad=True)
    (a @ b).sum().backward()
    gy = np.ones((2, 4))
    assert np.array_equal(a.grad, gy @ b.data.T)
    assert np.array_equal(b.grad, a.data.T @ gy)


def test_sum_mean_axis_keepdims():
    x = Tensor(np.arange(6, dtype=np.float64).reshape(2, 3), requires_grad=True)
    s = tensor_sum(x, axis=1, keepdims=True)
    assert s.shape == (2, 1)
    tensor_sum(s).backward()
    assert np.array_equal(x.grad, np.ones((2, 3)))

    x2 = Tensor(np.arange(6, dtype=np.float64).reshape(2, 3), requires_grad=True)
    tensor_mean(x2).backward()
    assert np.allclose(x2.grad, np.full((2, 3), 1.0 / 6.0))


def test_reshape_transpose_roundtrip_gradient():
    x = Tensor(np.arange(24, dtype=np.float64).reshape(2, 3, 4), requires_grad=True)
    y = transpose(x.reshape(6, 4), (1, 0))
    assert y.shape == (4, 6)
    (y * y).sum().backward()
    assert np.array_equal(x.grad, 2 * x.data)


def test_narrow_forward_and_scatter_gradient():
    x = Tensor(np.arange(10, dtype=np.float64), requires_grad=True)
    y = narrow(x, 0, 3, 4)
    assert np.array_equal(y.data, [3.0, 4.0, 5.0, 6.0])
    y.sum().backward()
    expect = np.zeros(10)
    expect[3:7] = 1.0
    assert np.array_equal(x.grad, expect)


def test_narrow_out_of_range_rejected():
    x = Tensor(np.zeros(4))
    with pytest.raises(ContractViolation):
        narrow(x, 0, 2, 5)
    with pytest.raises(ContractViolation):
        narrow(x, 1, 0, 1)


def test_concat_splits_gradient():
    a = Tensor(np.ones(2), requires_grad=True)
    b = Tensor(np.ones(3), requires_grad=True)
    c = concat([a, b], 0)
    assert c.shape == (5,)
    (c * Tensor([1.0, 2.0, 3.0, 4.0, 5.0])).sum().backward()
    assert np.array_equal(a.grad, [1.0, 2.0])
    assert np.array_equal(b.grad, [3.0, 4.0, 5.0])


def test_exp_log_abs_clip_gradients():
    x = Tensor([0.5, 2.0], requires_grad=True)
    exp(x).sum().backward()
    assert np.allclose(x.grad, np.exp([0.5, 2.0]))

    x = Tensor([0.5, 2.0], requires_grad=True)
    log(x).sum().backward()
    assert np.allclose(x.grad, [2.0, 0.5])

    x = Tensor([-3.0, 4.0], requires_grad=True)
    tensor_abs(x).sum().backward()
    assert np.array_equal(x.grad, [-1.0, 1.0])

    # clip passes gradient inside the bounds, blocks it outside
    x = Tensor([-2.0, 0.5, 2.0], requires_grad=True)
    clip(x, 0.0, 1.0).sum().backward()
    assert np.array_equal(x.grad, [0.0, 1.0, 0.0])


def test_backward_requires_scalar():
    x = Tensor(np.ones(3), requires_grad=True)
    with pytest.raises(ContractViolation):
        (x * 2).backward()


def test_no_grad_suppresses_graph():
    x = Tensor([1.0], requires_grad=True)
    assert is_grad_enabled()
    with no_grad():
        assert not is_grad_enabled()
        y = x * 2 + 1
    assert is_grad_enabled()
    assert not y.requires_grad
    assert y._parents == ()


def test_detach_cuts_graph():
    x = Tensor([2.0], requires_grad=True)
    y = (x * 3).detach() * x
    y.sum().backward()
    assert np.array_equal(x.grad, [6.0])  # only the second factor is live


def test_dtype_follows_input():
    x32 = Tensor(np.ones(3, dtype=np.float32), requires_grad=True)
    y = (x32 * x32).sum()
    assert y.dtype == np.float32
    y.backward()
    assert x32.grad.dtype == np.float32
    x64 = Tensor(np.ones(3, dtype=np.float64))
    assert (x64 + 1).dtype == np.float64


def test_finite_diff_check_quadratic_is_tight():
    x = np.linspace(-1.0, 1.0, 7)
    err = finite_diff_check(lambda t: (t * t).sum(), x)
    assert err < 1e-9


def test_finite_diff_check_catches_a_wrong_gradient():
    # forward is x^2 but the reported gradient is deliberately 3x
    def bad(t):
        wrong = Tensor(t.data, requires_grad=False)
        out = (t * t).sum()
        broken = Tensor.__new__(Tensor)
        broken.data = out.data
        broken.grad = None
        broken.requires_grad = False
        broken._parents = (t,)
        broken._backward = lambda g: setattr(
            t, "grad", (t.grad if t.grad is not None else 0) + 3 * t.data * g
        )
        del wrong
        return broken

    err = finite_diff_check(bad, np.array([1.0, -2.0]))
    assert err > 1e-2


def test_finite_diff_check_eps_bounds():
    f = lambda t: (t * t).sum()
    with pytest.raises(ContractViolation):
        finite_diff_check(f, np.ones(2), eps=1e-7)
    with pytest.raises(ContractViolation):
        finite_diff_check(f, np.ones(2), eps=1e-2)


def test_finite_diff_check_rejects_nondeterministic_f():
    state = {"n": 0}

    def flaky(t):
        state["n"] += 1
        return (t * float(state["n"])).sum()

    with pytest.raises(ContractViolation):
        finite_diff_check(flaky, np.ones(2))


def test_finite_diff_check_rejects_nonscalar_f():
    with pytest.raises(ContractViolation):
        finite_diff_check(lambda t: t * 2, np.ones(3))


def test_finite_diff_check_sampled_coordinates():
    x = np.linspace(0.1, 2.0, 50)
    rng = np.random.default_rng(3)
    err = finite_diff_check(lambda t: (t * t * t).sum(), x, sample=5, rng=rng)
    assert err < 1e-7
