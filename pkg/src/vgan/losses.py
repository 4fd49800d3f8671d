"""Segmentation losses and deep-supervision aggregation.

The generator trains on binary cross-entropy plus a soft Dice term per
region channel, summed over three prediction heads against ground truth
pooled to each head's resolution.
"""

from dataclasses import dataclass

import numpy as np

from . import engine
from .engine import ContractViolation, Tensor

_SPATIAL = (0, 2, 3, 4)  # reduce batch and voxels, keep region channels


def _as_tensor(x):
    return x if isinstance(x, Tensor) else Tensor(x)


def _check_pair(pred, gt):
    if tuple(pred.shape) != tuple(gt.shape):
        raise ContractViolation(
            f"prediction shape {tuple(pred.shape)} does not match target "
            f"{tuple(gt.shape)}"
        )


def soft_dice(pred, gt, smooth=1.0):
    """Per-channel soft Dice averaged over region channels; scalar in (0, 1]."""
    pred, gt = _as_tensor(pred), _as_tensor(gt)
    _check_pair(pred, gt)
    inter = engine.tensor_sum(engine.mul(pred, gt), axis=_SPATIAL)
    psum = engine.tensor_sum(pred, axis=_SPATIAL)
    gsum = engine.tensor_sum(gt, axis=_SPATIAL)
    per_channel = (inter * 2.0 + smooth) / (psum + gsum + smooth)
    return engine.tensor_mean(per_channel)


def binary_cross_entropy(pred, gt, clamp=1e-7):
    """Mean BCE over all voxels; probabilities clamped away from {0, 1}."""
    pred, gt = _as_tensor(pred), _as_tensor(gt)
    _check_pair(pred, gt)
    p = engine.clip(pred, clamp, 1.0 - clamp)
    ll = engine.mul(gt, engine.log(p)) + engine.mul(1.0 - gt, engine.log(1.0 - p))
    return -engine.tensor_mean(ll)


def bce_dice_loss(pred, gt, smooth=1.0, clamp=1e-7):
    return binary_cross_entropy(pred, gt, clamp) + (1.0 - soft_dice(pred, gt, smooth))


def downsample_gt(gt, factor):
    """Pool a binary region volume by ``factor``: a parent voxel is labeled
    when any of its children is. Operates on raw arrays (targets carry no
    gradient)."""
    arr = gt.data if isinstance(gt, Tensor) else np.asarray(gt)
    if factor == 1:
        return arr
    n, c, d, h, w = arr.shape
    if d % factor or h % factor or w % factor:
        raise ContractViolation(
            f"extents {(d, h, w)} not divisible by pooling factor {factor}"
        )
    view = arr.reshape(n, c, d // factor, factor, h // factor, factor,
                       w // factor, factor)
    return view.max(axis=(3, 5, 7))


def deep_supervision_loss(heads, gt, weights):
    """Weighted sum of bce_dice_loss over heads at scales 1, 1/2, 1/4."""
    if len(heads) != 3 or len(weights) != 3:
        raise ContractViolation("expected exactly three heads and three weights")
    gt_arr = gt.data if isinstance(gt, Tensor) else np.asarray(gt)
    total = None
    for k, (head, w) in enumerate(zip(heads, weights)):
        if w < 0:
            raise ContractViolation(f"negative supervision weight {w}")
        factor = 1 << k
        expanded = tuple(e * factor for e in head.shape[2:])
        if expanded != tuple(gt_arr.shape[2:]):
            raise ContractViolation(
                f"head {k} extents {tuple(head.shape[2:])} are not 1/{factor} "
                f"of target extents {tuple(gt_arr.shape[2:])}"
            )
        if w == 0:
            continue
        target = Tensor(downsample_gt(gt_arr, factor).astype(head.dtype))
        term = bce_dice_loss(head, target) * float(w)
        total = term if total is None else total + term
    if total is None:
        raise ContractViolation("all supervision weights are zero")
    return total


@dataclass
class LossReport:
    """Per-step scalar summary written to the metric log."""

    step: int
    bce: float
    dice: float
    deep_supervision_total: float
    adversarial: float
    loss_G: float
    loss_D: float

    CSV_HEADER = "step, loss_G, loss_D, bce, dice, msL1"

    def is_finite(self):
        vals = (self.bce, self.dice, self.deep_supervision_total,
                self.adversarial, self.loss_G, self.loss_D)
        return all(np.isfinite(v) for v in vals)

    def csv_row(self):
        return (f"{self.step}, {self.loss_G:.6f}, {self.loss_D:.6f}, "
                f"{self.bce:.6f}, {self.dice:.6f}, {self.adversarial:.6f}")
