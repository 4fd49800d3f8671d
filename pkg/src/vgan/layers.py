"""Layer zoo for the volumetric networks.

Tensor layout is [N, C, D, H, W] for volumes and [B, T, d] for token
sequences; kernel/stride/padding triples are ordered (D, H, W). Convolution is
cross-correlation (no kernel flip), the same convention forward and in the
gradient rules. Normalizations default to eps=1e-5.

conv3d / conv_transpose3d are engine primitives backed by the kernels
subpackage; the normalizations are composed from engine arithmetic so their
gradients follow from the chain rule rather than hand-derived rules.
"""

from dataclasses import dataclass

import numpy as np

from vgan import kernels
from vgan.engine import (
    ConfigError,
    ContractViolation,
    Tensor,
    add_grad,
    concat,
    make_op,
)

_AXES = "DHW"


# --- convolution ----------------------------------------------------------


@dataclass
class Conv3dSpec:
    """Shape contract for one (transposed) convolution.

    Weight layout is [out, in, kD, kH, kW] for conv3d and [in, out, kD, kH, kW]
    for conv_transpose3d, so a transposed convolution sharing a conv's weight
    tensor is its exact adjoint.
    """

    in_channels: int
    out_channels: int
    kernel: tuple
    stride: tuple
    padding: tuple
    weight: Tensor
    bias: Tensor = None


def conv_output_extents(in_extents, kernel, stride, padding):
    out = []
    for ax, (i, k, s, p) in enumerate(zip(in_extents, kernel, stride, padding)):
        e = (i + 2 * p - k) // s + 1
        if e < 1:
            raise ContractViolation(
                f"conv3d output extent {e} < 1 on axis {_AXES[ax]} "
                f"(in={i}, kernel={k}, stride={s}, pad={p})"
            )
        out.append(e)
    return tuple(out)


def conv3d(x, spec):
    if x.ndim != 5 or x.shape[1] != spec.in_channels:
        raise ContractViolation(
            f"conv3d expects [N,{spec.in_channels},D,H,W], got {x.shape}"
        )
    conv_output_extents(x.shape[2:], spec.kernel, spec.stride, spec.padding)
    y = _conv3d_prim(x, spec.weight, spec.stride, spec.padding)
    if spec.bias is not None:
        y = y + spec.bias.reshape(1, spec.out_channels, 1, 1, 1)
    return y


def conv_transpose3d(x, spec):
    if x.ndim != 5 or x.shape[1] != spec.in_channels:
        raise ContractViolation(
            f"conv_transpose3d expects [N,{spec.in_channels},D,H,W], got {x.shape}"
        )
    y = _conv_transpose3d_prim(x, spec.weight, spec.stride)
    if spec.bias is not None:
        y = y + spec.bias.reshape(1, spec.out_channels, 1, 1, 1)
    return y


def _conv3d_prim(x, w, stride, padding):
    y = kernels.conv3d_forward(x.data, w.data, stride, padding)

    def bwd(g):
        add_grad(x, kernels.conv3d_grad_input(w.data, g, x.shape[2:], stride, padding))
        add_grad(w, kernels.conv3d_grad_weight(x.data, g, w.shape[2:], stride, padding))

    return make_op(y, (x, w), bwd)


def _conv_transpose3d_prim(x, w, stride):
    # out extent = (in - 1) * stride + kernel; realized as the conv adjoint
    out_extents = tuple(
        (i - 1) * s + k for i, s, k in zip(x.shape[2:], stride, w.shape[2:])
    )
    zero = (0, 0, 0)
    y = kernels.conv3d_grad_input(w.data, x.data, out_extents, stride, zero)

    def bwd(g):
        add_grad(x, kernels.conv3d_forward(g, w.data, stride, zero))
        add_grad(w, kernels.conv3d_grad_weight(g, x.data, w.shape[2:], stride, zero))

    return make_op(y, (x, w), bwd)


# --- normalization --------------------------------------------------------


@dataclass
class BatchNormState:
    """Running statistics, exclusively owned by one network during a step."""

    mean: np.ndarray
    var: np.ndarray

    @classmethod
    def initial(cls, channels, dtype=np.float32):
        return cls(np.zeros(channels, dtype=dtype), np.ones(channels, dtype=dtype))


def _normalize(x, axes, eps):
    mu = x.mean(axis=axes, keepdims=True)
    xc = x - mu
    var = (xc * xc).mean(axis=axes, keepdims=True)
    return xc * ((var + eps) ** -0.5)


def instance_norm(x, gamma, beta, eps=1e-5):
    if int(np.prod(x.shape[2:])) < 2:
        raise ContractViolation("instance_norm needs spatial size >= 2")
    c = x.shape[1]
    y = _normalize(x, (2, 3, 4), eps)
    return y * gamma.reshape(1, c, 1, 1, 1) + beta.reshape(1, c, 1, 1, 1)


def batch_norm(x, gamma, beta, state, training, eps=1e-5, momentum=0.1):
    """Per-channel normalization over batch+spatial.

    Train mode normalizes with the batch statistics and blends them into the
    running state: running = (1 - momentum) * running + momentum * batch
    (biased variance). Eval mode uses the running statistics; before any
    train update those are the initialized mean 0 / var 1.
    """
    n, c = x.shape[:2]
    gm = gamma.reshape(1, c, 1, 1, 1)
    bt = beta.reshape(1, c, 1, 1, 1)
    if training:
        if n * int(np.prod(x.shape[2:])) < 2:
            raise ContractViolation("batch_norm train mode needs >= 2 values per channel")
        y = _normalize(x, (0, 2, 3, 4), eps)
        batch_mean = x.data.mean(axis=(0, 2, 3, 4))
        batch_var = x.data.var(axis=(0, 2, 3, 4))
        state.mean *= 1.0 - momentum
        state.mean += momentum * batch_mean.astype(state.mean.dtype)
        state.var *= 1.0 - momentum
        state.var += momentum * batch_var.astype(state.var.dtype)
        return y * gm + bt
    rm = Tensor(state.mean.reshape(1, c, 1, 1, 1).astype(x.dtype))
    rv = Tensor(state.var.reshape(1, c, 1, 1, 1).astype(x.dtype))
    return (x - rm) * ((rv + eps) ** -0.5) * gm + bt


def layer_norm(x, gamma, beta, eps=1e-5):
    return _normalize(x, (x.ndim - 1,), eps) * gamma + beta


# --- activations ----------------------------------------------------------


def leaky_relu(x, slope=0.01):
    if not 0.0 < slope < 1.0:
        raise ContractViolation(f"leaky_relu slope {slope} outside (0,1)")
    pos = x.data > 0
    scale = np.where(pos, 1.0, slope).astype(x.dtype.type)

    def bwd(g):
        add_grad(x, g * scale)

    return make_op(x.data * scale, (x,), bwd)


def sigmoid(x):
    # exponentiate -|x| so neither where-branch can overflow
    pos = x.data >= 0
    ez = np.exp(np.where(pos, -x.data, x.data))
    y = np.where(pos, 1.0 / (1.0 + ez), ez / (1.0 + ez)).astype(x.dtype.type)

    def bwd(g):
        add_grad(x, g * y * (1.0 - y))

    return make_op(y, (x,), bwd)


def softmax(x, axis=-1):
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    y = e / e.sum(axis=axis, keepdims=True)

    def bwd(g):
        inner = (g * y).sum(axis=axis, keepdims=True)
        add_grad(x, y * (g - inner))

    return make_op(y, (x,), bwd)


# --- projections and attention --------------------------------------------


def linear(x, w, b=None):
    y = x @ w
    if b is not None:
        y = y + b
    return y


@dataclass
class AttentionSpec:
    embed_dim: int
    num_heads: int
    wq: Tensor
    wk: Tensor
    wv: Tensor
    wo: Tensor
    bq: Tensor = None
    bk: Tensor = None
    bv: Tensor = None
    bo: Tensor = None

    def __post_init__(self):
        if self.embed_dim % self.num_heads != 0:
            raise ConfigError(
                f"embed_dim {self.embed_dim} not divisible by heads {self.num_heads}"
            )

    @property
    def head_dim(self):
        return self.embed_dim // self.num_heads


def multi_head_attention(x, spec):
    """Unmasked bidirectional attention over [B, T, d] token sequences."""
    b, t, d = x.shape
    if d != spec.embed_dim:
        raise ContractViolation(f"token dim {d} != embed_dim {spec.embed_dim}")
    h, dk = spec.num_heads, spec.head_dim

    def split_heads(z):
        return z.reshape(b, t, h, dk).transpose(0, 2, 1, 3)

    q = split_heads(linear(x, spec.wq, spec.bq))
    k = split_heads(linear(x, spec.wk, spec.bk))
    v = split_heads(linear(x, spec.wv, spec.bv))
    scores = (q @ k.transpose(0, 1, 3, 2)) * (1.0 / np.sqrt(dk))
    attn = softmax(scores, axis=-1)
    ctx = (attn @ v).transpose(0, 2, 1, 3).reshape(b, t, d)
    return linear(ctx, spec.wo, spec.bo)


def concat_channels(tensors):
    return concat(tensors, axis=1)
