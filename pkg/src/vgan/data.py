"""Samples, label remapping, synthetic phantoms, augmentation, and splits.

Label schema: 0 background, 1 necrosis, 2 edema, 3 non-enhancing tumor,
4 enhancing tumor. Region maps stack three nested binaries: whole tumor
WT = {1,2,3,4}, tumor core TC = {1,3,4}, enhancing ET = {4}.
"""

import logging
import math
from dataclasses import dataclass

import numpy as np

from .engine import ContractViolation

log = logging.getLogger(__name__)

REGIONS = ("WT", "TC", "ET")
GRADES = ("HGG", "LGG")

_WT = (1, 2, 3, 4)
_TC = (1, 3, 4)
_ET = (4,)

# per-modality intensity by tissue class (background, necrosis, edema,
# non-enhancing, enhancing); loosely shaped like T1/T1c/T2/FLAIR contrast
_INTENSITY = np.array(
    [
        [0.10, 0.30, 0.35, 0.45, 0.40],  # T1
        [0.10, 0.25, 0.35, 0.50, 0.95],  # T1c: enhancing lights up
        [0.15, 0.80, 0.70, 0.55, 0.50],  # T2
        [0.12, 0.60, 0.90, 0.65, 0.55],  # FLAIR: edema lights up
    ],
    dtype=np.float32,
)


@dataclass
class VolumeSample:
    id: str
    grade: str
    image: np.ndarray  # [4, D, H, W] float32
    labels: np.ndarray  # [D, H, W] uint8

    def __post_init__(self):
        if self.grade not in GRADES:
            raise ContractViolation(f"unknown grade {self.grade!r}")
        if self.image.ndim != 4 or self.image.shape[0] != 4:
            raise ContractViolation(
                f"image must be [4,D,H,W], got {self.image.shape}"
            )
        if self.labels.shape != self.image.shape[1:]:
            raise ContractViolation(
                f"label extents {self.labels.shape} do not match image "
                f"{self.image.shape[1:]}"
            )
        if not np.isfinite(self.image).all():
            raise ContractViolation("image contains non-finite values")

    @property
    def extents(self):
        return self.labels.shape


def remap_labels(labels):
    """Raw labels {0..4} to stacked binary (WT, TC, ET) maps."""
    labels = np.asarray(labels)
    bad = (labels < 0) | (labels > 4)
    if bad.any():
        idx = tuple(int(i) for i in np.argwhere(bad)[0])
        raise ContractViolation(
            f"label {int(labels[idx])} at voxel {idx} outside {{0..4}}"
        )
    wt = np.isin(labels, _WT)
    tc = np.isin(labels, _TC)
    et = labels == 4
    return np.stack([wt, tc, et]).astype(np.uint8)


def inverse_remap(maps):
    """Binary (WT, TC, ET) maps back to a label volume.

    ET voxels become 4, the rest of TC becomes necrosis (1), the rest of WT
    becomes edema (2). Label 3 is never emitted: the region composition
    cannot tell non-enhancing tumor apart from necrosis. Non-nested inputs
    are repaired by intersection first; repairs are counted and logged.
    """
    maps = np.asarray(maps).astype(bool)
    if maps.ndim != 4 or maps.shape[0] != 3:
        raise ContractViolation(f"expected [3,D,H,W] maps, got {maps.shape}")
    wt, tc, et = maps[0], maps[1], maps[2]
    tc_n = tc & wt
    et_n = et & tc_n
    repaired = int((tc != tc_n).sum() + (et != et_n).sum())
    if repaired:
        log.info("nesting repaired at %d voxels", repaired)
    labels = np.zeros(wt.shape, dtype=np.uint8)
    labels[wt] = 2
    labels[tc_n] = 1
    labels[et_n] = 4
    return labels


def _ellipsoid(coords, center, radii):
    d = ((coords[0] - center[0]) / radii[0]) ** 2
    h = ((coords[1] - center[1]) / radii[1]) ** 2
    w = ((coords[2] - center[2]) / radii[2]) ** 2
    return d + h + w <= 1.0


def synth_phantom(seed, extents=(64, 64, 64), grade="HGG", noise=0.05):
    """Deterministic multi-modal phantom with a nested ellipsoidal tumor.

    An edema shell surrounds a core split into an enhancing rim around a
    necrotic center, with a non-enhancing remainder. Modality channels are
    an intensity table lookup over tissue class plus seeded Gaussian noise.
    """
    extents = tuple(int(e) for e in extents)
    if any(e < 16 for e in extents):
        raise ContractViolation(f"extents {extents} below the 16-voxel minimum")
    if grade not in GRADES:
        raise ContractViolation(f"unknown grade {grade!r}")
    rng = np.random.default_rng(seed)

    coords = np.meshgrid(*(np.arange(e, dtype=np.float64) for e in extents),
                         indexing="ij")
    lo, hi = (0.16, 0.30) if grade == "HGG" else (0.11, 0.20)
    center = np.array([
        e * rng.uniform(0.38, 0.62) for e in extents
    ])
    radii = np.array([
        min(extents) * rng.uniform(lo, hi) * rng.uniform(0.85, 1.15)
        for _ in range(3)
    ])
    radii = np.clip(radii, 2.5, np.array(extents) / 2.0 - 1.0)

    labels = np.zeros(extents, dtype=np.uint8)
    labels[_ellipsoid(coords, center, radii)] = 2  # edema
    core_c = center + rng.uniform(-0.08, 0.08, 3) * radii
    labels[_ellipsoid(coords, core_c, radii * 0.62)] = 3  # non-enhancing
    labels[_ellipsoid(coords, core_c, radii * 0.45)] = 4  # enhancing rim
    labels[_ellipsoid(coords, core_c, radii * 0.25)] = 1  # necrotic center

    image = _INTENSITY[:, labels]  # [4, D, H, W] lookup
    image = image + rng.normal(0.0, noise, image.shape)
    sample_id = f"{grade.lower()}-{seed:08d}"
    return VolumeSample(sample_id, grade, image.astype(np.float32), labels)


def pad_volume(sample, target):
    """Zero-pad image and labels to ``target`` extents, centered."""
    target = tuple(int(t) for t in target)
    src = sample.extents
    if any(t < s for t, s in zip(target, src)):
        raise ContractViolation(f"pad target {target} smaller than source {src}")
    if target == tuple(src):
        return sample
    lo = [(t - s) // 2 for t, s in zip(target, src)]
    pads = [(l, t - s - l) for l, t, s in zip(lo, target, src)]
    image = np.pad(sample.image, [(0, 0)] + pads)
    labels = np.pad(sample.labels, pads)
    return VolumeSample(sample.id, sample.grade, image, labels)


def random_crop(sample, extents, rng):
    """Uniformly random congruent crop of image and labels."""
    extents = tuple(int(e) for e in extents)
    src = sample.extents
    if any(e > s for e, s in zip(extents, src)):
        raise ContractViolation(f"crop {extents} exceeds source extents {src}")
    corner = [int(rng.integers(0, s - e + 1)) for s, e in zip(src, extents)]
    sl = tuple(slice(c, c + e) for c, e in zip(corner, extents))
    return VolumeSample(
        sample.id, sample.grade,
        sample.image[(slice(None),) + sl].copy(),
        sample.labels[sl].copy(),
    )


def random_flip(sample, p, rng):
    """Reverse each spatial axis independently with probability ``p``."""
    if not 0.0 <= p <= 1.0:
        raise ContractViolation(f"flip probability {p} outside [0, 1]")
    image, labels = sample.image, sample.labels
    for ax in range(3):
        if rng.random() < p:
            image = np.flip(image, axis=1 + ax)
            labels = np.flip(labels, axis=ax)
    return VolumeSample(sample.id, sample.grade, image.copy(), labels.copy())


def split_dataset(samples, ratio, seed):
    """Stratified train/val split: each grade is split independently.

    Train takes floor(n * ratio) of each grade; a grade with fewer than two
    samples goes wholly to train (warned) since it cannot be split.
    """
    if not 0.0 < ratio < 1.0:
        raise ContractViolation(f"split ratio {ratio} outside (0, 1)")
    rng = np.random.default_rng(seed)
    train, val = [], []
    for grade in GRADES:
        members = [s for s in samples if s.grade == grade]
        if not members:
            continue
        if len(members) < 2:
            log.warning("grade %s has %d sample(s); all assigned to train",
                        grade, len(members))
            train.extend(members)
            continue
        order = rng.permutation(len(members))
        n_train = math.floor(len(members) * ratio + 1e-9)
        train.extend(members[i] for i in order[:n_train])
        val.extend(members[i] for i in order[n_train:])
    return train, val
