"""Finite-difference verification over the registered differentiable ops.

Each entry builds a handful of (scalar function, input tensor) cases at
64-bit and reports the worst relative error against central differences.
Kinked ops are sampled away from their kinks by an explicit margin.
"""

import zlib
from dataclasses import dataclass

import numpy as np

from . import engine
from .discriminator import multiscale_l1
from .engine import Tensor, finite_diff_check
from .layers import (
    AttentionSpec,
    BatchNormState,
    Conv3dSpec,
    batch_norm,
    conv3d,
    conv_transpose3d,
    instance_norm,
    layer_norm,
    leaky_relu,
    linear,
    multi_head_attention,
    sigmoid,
    softmax,
)
from .losses import bce_dice_loss

_REGISTRY = {}


def _op(name):
    def deco(fn):
        _REGISTRY[name] = fn
        return fn
    return deco


def registered_ops():
    return sorted(_REGISTRY)


def _rand(rng, *shape):
    return Tensor(rng.standard_normal(shape), requires_grad=True)


def _away_from_zero(rng, *shape, margin=0.05):
    raw = rng.standard_normal(shape)
    return np.sign(raw) * (np.abs(raw) + margin)


@_op("add")
def _cases_add(rng):
    b = Tensor(rng.standard_normal((3, 5)))
    yield "lhs", lambda x: engine.tensor_sum(engine.mul(engine.add(x, b), b)), _rand(rng, 3, 5)


@_op("mul")
def _cases_mul(rng):
    b = Tensor(rng.standard_normal((4, 4)))
    yield "lhs", lambda x: engine.tensor_sum(engine.mul(x, b)), _rand(rng, 4, 4)
    yield "square", lambda x: engine.tensor_sum(engine.mul(x, x)), _rand(rng, 6)


@_op("div")
def _cases_div(rng):
    b = Tensor(_away_from_zero(rng, 4, 4, margin=0.5))
    yield "num", lambda x: engine.tensor_sum(engine.div(x, b)), _rand(rng, 4, 4)
    yield "den", lambda x: engine.tensor_sum(engine.div(b, x)), Tensor(
        _away_from_zero(rng, 4, 4, margin=0.5), requires_grad=True)


@_op("matmul")
def _cases_matmul(rng):
    b = Tensor(rng.standard_normal((5, 4)))
    a = Tensor(rng.standard_normal((2, 3, 5)))
    yield "lhs", lambda x: engine.tensor_sum(engine.matmul(x, b)), _rand(rng, 3, 5)
    yield "rhs batched", lambda x: engine.tensor_sum(engine.matmul(a, x)), _rand(rng, 5, 4)


@_op("exp")
def _cases_exp(rng):
    yield "exp", lambda x: engine.tensor_sum(engine.exp(x)), _rand(rng, 3, 4)


@_op("log")
def _cases_log(rng):
    x = Tensor(rng.uniform(0.2, 3.0, (3, 4)), requires_grad=True)
    yield "log", lambda x: engine.tensor_sum(engine.log(x)), x


@_op("abs")
def _cases_abs(rng):
    x = Tensor(_away_from_zero(rng, 4, 4), requires_grad=True)
    yield "abs", lambda x: engine.tensor_sum(engine.tensor_abs(x)), x


@_op("reshape_transpose")
def _cases_reshape(rng):
    b = Tensor(rng.standard_normal((4, 6)))
    def f(x):
        y = engine.transpose(engine.reshape(x, (2, 3, 4)), (1, 0, 2))
        return engine.tensor_sum(engine.mul(engine.reshape(y, (6, 4)), engine.transpose(b, (1, 0))))
    yield "composite", f, _rand(rng, 24)


@_op("narrow_concat")
def _cases_narrow(rng):
    b = Tensor(rng.standard_normal((2, 6, 3)))
    def f(x):
        left = engine.narrow(x, 1, 0, 2)
        right = engine.narrow(x, 1, 2, 4)
        y = engine.concat([right, left], 1)
        return engine.tensor_sum(engine.mul(y, b))
    yield "split and rejoin", f, _rand(rng, 2, 6, 3)


@_op("conv3d")
def _cases_conv3d(rng):
    w = Tensor(rng.standard_normal((3, 2, 3, 3, 3)) * 0.3, requires_grad=True)
    bias = Tensor(rng.standard_normal(3), requires_grad=True)
    x0 = _rand(rng, 1, 2, 5, 5, 5)

    def with_x(x):
        spec = Conv3dSpec(2, 3, (3, 3, 3), (2, 2, 2), (1, 1, 1), w, bias)
        return engine.tensor_sum(conv3d(x, spec))

    def with_w(wv):
        spec = Conv3dSpec(2, 3, (3, 3, 3), (1, 1, 1), (1, 1, 1), wv, bias)
        return engine.tensor_sum(engine.mul(conv3d(x0, spec), x_mask))

    x_mask = Tensor(rng.standard_normal((1, 3, 5, 5, 5)))
    yield "wrt input", with_x, _rand(rng, 1, 2, 5, 5, 5)
    yield "wrt weight", with_w, w
    yield "wrt bias", lambda b2: engine.tensor_sum(conv3d(
        x0, Conv3dSpec(2, 3, (3, 3, 3), (1, 1, 1), (1, 1, 1), w, b2))), bias


@_op("conv_transpose3d")
def _cases_convt(rng):
    w = Tensor(rng.standard_normal((3, 2, 2, 2, 2)) * 0.3, requires_grad=True)
    bias = Tensor(rng.standard_normal(2), requires_grad=True)
    x0 = _rand(rng, 1, 3, 4, 4, 4)
    mask = Tensor(rng.standard_normal((1, 2, 8, 8, 8)))

    def with_x(x):
        spec = Conv3dSpec(3, 2, (2, 2, 2), (2, 2, 2), (0, 0, 0), w, bias)
        return engine.tensor_sum(engine.mul(conv_transpose3d(x, spec), mask))

    def with_w(wv):
        spec = Conv3dSpec(3, 2, (2, 2, 2), (2, 2, 2), (0, 0, 0), wv, bias)
        return engine.tensor_sum(engine.mul(conv_transpose3d(x0, spec), mask))

    yield "wrt input", with_x, _rand(rng, 1, 3, 4, 4, 4)
    yield "wrt weight", with_w, w


@_op("instance_norm")
def _cases_instance_norm(rng):
    g = Tensor(rng.uniform(0.5, 1.5, 3), requires_grad=True)
    b = Tensor(rng.standard_normal(3), requires_grad=True)
    x0 = _rand(rng, 2, 3, 3, 3, 3)
    mask = Tensor(rng.standard_normal((2, 3, 3, 3, 3)))

    def with_x(x):
        return engine.tensor_sum(engine.mul(instance_norm(x, g, b), mask))

    yield "wrt input", with_x, _rand(rng, 2, 3, 3, 3, 3)
    yield "wrt scale", lambda gv: engine.tensor_sum(
        engine.mul(instance_norm(x0, gv, b), mask)), g
    yield "wrt shift", lambda bv: engine.tensor_sum(
        engine.mul(instance_norm(x0, g, bv), mask)), b


@_op("batch_norm")
def _cases_batch_norm(rng):
    g = Tensor(rng.uniform(0.5, 1.5, 3), requires_grad=True)
    b = Tensor(rng.standard_normal(3), requires_grad=True)
    x0 = _rand(rng, 2, 3, 4, 4, 4)
    mask = Tensor(rng.standard_normal((2, 3, 4, 4, 4)))

    def with_x(x):
        state = BatchNormState.initial(3, np.float64)
        return engine.tensor_sum(engine.mul(
            batch_norm(x, g, b, state, training=True), mask))

    def with_g(gv):
        state = BatchNormState.initial(3, np.float64)
        return engine.tensor_sum(engine.mul(
            batch_norm(x0, gv, b, state, training=True), mask))

    yield "train wrt input", with_x, _rand(rng, 2, 3, 4, 4, 4)
    yield "train wrt scale", with_g, g


@_op("layer_norm")
def _cases_layer_norm(rng):
    g = Tensor(rng.uniform(0.5, 1.5, 8), requires_grad=True)
    b = Tensor(rng.standard_normal(8), requires_grad=True)
    mask = Tensor(rng.standard_normal((2, 5, 8)))
    yield "wrt input", lambda x: engine.tensor_sum(
        engine.mul(layer_norm(x, g, b), mask)), _rand(rng, 2, 5, 8)


@_op("leaky_relu")
def _cases_leaky_relu(rng):
    # sampled away from the kink at 0 by a 0.05 margin; the 1e-5 probe
    # stays strictly inside one branch
    x = Tensor(_away_from_zero(rng, 6, 6), requires_grad=True)
    mask = Tensor(rng.standard_normal((6, 6)))
    yield "away from kink", lambda xv: engine.tensor_sum(
        engine.mul(leaky_relu(xv, 0.01), mask)), x


@_op("sigmoid")
def _cases_sigmoid(rng):
    mask = Tensor(rng.standard_normal((4, 4)))
    yield "sigmoid", lambda x: engine.tensor_sum(
        engine.mul(sigmoid(x), mask)), _rand(rng, 4, 4)


@_op("softmax")
def _cases_softmax(rng):
    mask = Tensor(rng.standard_normal((3, 7)))
    yield "last axis", lambda x: engine.tensor_sum(
        engine.mul(softmax(x, -1), mask)), _rand(rng, 3, 7)


@_op("linear")
def _cases_linear(rng):
    w = Tensor(rng.standard_normal((6, 4)), requires_grad=True)
    b = Tensor(rng.standard_normal(4), requires_grad=True)
    x0 = _rand(rng, 2, 3, 6)
    yield "wrt input", lambda x: engine.tensor_sum(linear(x, w, b)), x0
    yield "wrt weight", lambda wv: engine.tensor_sum(linear(x0, wv, b)), w


@_op("multi_head_attention")
def _cases_mha(rng):
    d, h = 8, 2
    mats = {k: Tensor(rng.standard_normal((d, d)) * 0.4, requires_grad=True)
            for k in ("wq", "wk", "wv", "wo")}
    biases = {k: Tensor(rng.standard_normal(d) * 0.1, requires_grad=True)
              for k in ("bq", "bk", "bv", "bo")}
    x0 = _rand(rng, 1, 5, d)
    mask = Tensor(rng.standard_normal((1, 5, d)))

    def spec(**over):
        kw = {**mats, **biases, **over}
        return AttentionSpec(d, h, kw["wq"], kw["wk"], kw["wv"], kw["wo"],
                             kw["bq"], kw["bk"], kw["bv"], kw["bo"])

    yield "wrt tokens", lambda x: engine.tensor_sum(
        engine.mul(multi_head_attention(x, spec()), mask)), x0
    yield "wrt query proj", lambda w: engine.tensor_sum(
        engine.mul(multi_head_attention(x0, spec(wq=w)), mask)), mats["wq"]
    yield "wrt out proj", lambda w: engine.tensor_sum(
        engine.mul(multi_head_attention(x0, spec(wo=w)), mask)), mats["wo"]


@_op("bce_dice_loss")
def _cases_bce_dice(rng):
    gt = Tensor((rng.random((1, 3, 4, 4, 4)) > 0.6).astype(np.float64))

    def f(z):
        return bce_dice_loss(sigmoid(z), gt)

    yield "through sigmoid", f, _rand(rng, 1, 3, 4, 4, 4)


@_op("multiscale_l1")
def _cases_msl1(rng):
    # reference stacks offset away from the |.| kink; layers deliberately
    # carry different element counts
    b1 = Tensor(_away_from_zero(rng, 2, 3, 4, 4, margin=0.3))
    b2 = Tensor(_away_from_zero(rng, 2, 6, 4, 4, margin=0.3))

    def f(x):
        f1 = engine.narrow(x, 1, 0, 3)
        f2 = engine.narrow(x, 1, 3, 6)
        return multiscale_l1([f1, f2], [b1, b2])

    yield "two-layer stack", f, Tensor(
        rng.standard_normal((2, 9, 4, 4)) * 0.05, requires_grad=True)


@dataclass
class GradcheckResult:
    op: str
    cases: int
    max_rel_err: float
    tolerance: float

    @property
    def passed(self):
        return self.max_rel_err <= self.tolerance


def run_gradcheck(scope="all", eps=1e-5, seed=0, tolerance=1e-4):
    """Run the oracle over one op or every registered op at 64-bit."""
    if scope == "all":
        names = registered_ops()
    elif scope in _REGISTRY:
        names = [scope]
    else:
        raise KeyError(scope)
    results = []
    for name in names:
        rng = np.random.default_rng([seed, zlib.crc32(name.encode())])
        worst = 0.0
        count = 0
        for _label, f, x in _REGISTRY[name](rng):
            arr = x.data if isinstance(x, Tensor) else np.asarray(x)
            err = finite_diff_check(f, arr, eps=eps)
            worst = max(worst, err)
            count += 1
        results.append(GradcheckResult(name, count, worst, tolerance))
    return results
