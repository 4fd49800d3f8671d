"""Feature-extracting critic.

A stack of stride-2 conv blocks (batch norm, leaky ReLU) turns an
(image, region-map) composition into hierarchical features; training
compares prediction and ground truth through the multi-scale L1 distance
over those features. There is no classification head: the objective uses
feature distances only.
"""

import logging
from dataclasses import dataclass

import numpy as np

from . import engine
from .engine import ConfigError, ContractViolation, Tensor
from .layers import BatchNormState, Conv3dSpec, batch_norm, conv3d, leaky_relu

log = logging.getLogger(__name__)


@dataclass
class DiscriminatorConfig:
    in_channels: int = 12  # 4 modalities x 3 region masks
    base_channels: int = 16
    max_channels: int = 256
    num_blocks: int = 6
    leaky_slope: float = 0.01
    masked_input: bool = True  # False feeds raw region maps, ablation mode
    norm_eps: float = 1e-5
    momentum: float = 0.1

    def __post_init__(self):
        if self.num_blocks < 1:
            raise ConfigError("num_blocks must be >= 1")
        if not 0.0 < self.leaky_slope < 1.0:
            raise ConfigError("leaky_slope must lie in (0, 1)")

    def block_channels(self):
        return tuple(
            min(self.base_channels << i, self.max_channels)
            for i in range(self.num_blocks)
        )


def disc_in_channels(modalities, masked=True):
    return 3 * modalities if masked else 3


def effective_blocks(cfg, extents):
    """Blocks actually applied for a given input size.

    Each k3/s2/p1 block halves even extents exactly (odd extents round up),
    so after floor(log2(min extent)) blocks the smallest extent is 1 and
    further blocks would degenerate. Inputs smaller than 2^num_blocks get a
    reduced stack; the reduction is logged.
    """
    cap = min(int(e).bit_length() - 1 for e in extents)
    if cap < 1:
        raise ConfigError(
            f"input extents {tuple(extents)} too small for even one stride-2 block"
        )
    eff = min(cfg.num_blocks, cap)
    if eff < cfg.num_blocks:
        log.info("input extents %s support %d of %d blocks",
                 tuple(extents), eff, cfg.num_blocks)
    return eff


def init_disc_params(cfg, rng, dtype=np.float32):
    params = {}
    prev = cfg.in_channels
    for i, ch in enumerate(cfg.block_channels()):
        fan_in = prev * 27
        std = np.sqrt(2.0 / (fan_in * (1.0 + cfg.leaky_slope ** 2)))
        params[f"blk{i}.conv.w"] = Tensor(
            (rng.standard_normal((ch, prev, 3, 3, 3)) * std).astype(dtype),
            requires_grad=True,
        )
        params[f"blk{i}.conv.b"] = Tensor(np.zeros(ch, dtype=dtype), requires_grad=True)
        params[f"blk{i}.bn.g"] = Tensor(np.ones(ch, dtype=dtype), requires_grad=True)
        params[f"blk{i}.bn.b"] = Tensor(np.zeros(ch, dtype=dtype), requires_grad=True)
        prev = ch
    return params


def init_disc_state(cfg, dtype=np.float32):
    """Fresh running statistics, one per block."""
    return [BatchNormState.initial(ch, dtype) for ch in cfg.block_channels()]


def disc_input(image, maps, masked=True):
    """Compose what the critic sees from an image and its region maps.

    Masked mode multiplies the image by each region channel (broadcast over
    modalities) and concatenates the three masked copies; raw mode passes
    the maps through untouched.
    """
    if tuple(image.shape[2:]) != tuple(maps.shape[2:]):
        raise ContractViolation(
            f"image extents {tuple(image.shape[2:])} do not match map extents "
            f"{tuple(maps.shape[2:])}"
        )
    if not masked:
        return maps
    parts = []
    for r in range(maps.shape[1]):
        region = engine.narrow(maps, 1, r, 1)
        parts.append(engine.mul(image, region))
    return engine.concat(parts, 1)


def extract_features(x, params, cfg, states, training):
    """Per-block activations, shallowest first."""
    eff = effective_blocks(cfg, x.shape[2:])
    channels = cfg.block_channels()
    prev = cfg.in_channels
    feats = []
    h = x
    for i in range(eff):
        spec = Conv3dSpec(
            prev, channels[i], (3, 3, 3), (2, 2, 2), (1, 1, 1),
            params[f"blk{i}.conv.w"], params[f"blk{i}.conv.b"],
        )
        h = conv3d(h, spec)
        h = batch_norm(h, params[f"blk{i}.bn.g"], params[f"blk{i}.bn.b"],
                       states[i], training, cfg.norm_eps, cfg.momentum)
        h = leaky_relu(h, cfg.leaky_slope)
        feats.append(h)
        prev = channels[i]
    return feats


def pair_features(x_pred, x_gt, params, cfg, states, training):
    """Extract feature stacks for prediction and ground truth in one pass.

    The two inputs ride through as a single batch so batch norm draws its
    statistics from both (and a lone desk-scale sample still gives the
    deepest block two values per channel).
    """
    n = x_pred.shape[0]
    joint = engine.concat([x_pred, x_gt], 0)
    feats = extract_features(joint, params, cfg, states, training)
    pred = [engine.narrow(f, 0, 0, n) for f in feats]
    gt = [engine.narrow(f, 0, n, n) for f in feats]
    return pred, gt


def multiscale_l1(a, b):
    """Mean absolute feature distance, averaged over layers.

    Each layer's sum is divided by that layer's own element count before the
    layer average, since strided blocks cannot share one count.
    """
    if len(a) != len(b):
        raise ContractViolation(f"stack lengths differ: {len(a)} vs {len(b)}")
    if not a:
        raise ContractViolation("empty feature stacks")
    total = None
    for fa, fb in zip(a, b):
        if fa.shape != fb.shape:
            raise ContractViolation(
                f"feature shapes differ: {fa.shape} vs {fb.shape}"
            )
        term = engine.tensor_mean(engine.tensor_abs(engine.sub(fa, fb)))
        total = term if total is None else engine.add(total, term)
    return total * (1.0 / len(a))
