"""Evaluation metrics, the enhancing-tumor rescue rule, ensembling, and
slice image export."""

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .data import REGIONS, inverse_remap
from .engine import ContractViolation

# label colors for exported slices: background, necrosis, edema,
# non-enhancing, enhancing
PALETTE = {
    0: (0, 0, 0),
    1: (204, 51, 51),
    2: (77, 175, 74),
    3: (55, 126, 184),
    4: (255, 217, 47),
}


@dataclass
class RegionScore:
    region: str
    dice: float
    ppv: float
    sensitivity: float
    tp: int
    fp: int
    fn: int


def score_region(pred, gt, region=""):
    """Overlap counts and ratios for one binary region.

    Empty-denominator conventions: both maps empty scores 1.0 everywhere;
    an empty prediction against a nonempty target scores ppv 1.0 (no false
    positives were asserted) with dice and sensitivity 0.
    """
    pred = np.asarray(pred).astype(bool)
    gt = np.asarray(gt).astype(bool)
    if pred.shape != gt.shape:
        raise ContractViolation(
            f"prediction extents {pred.shape} do not match target {gt.shape}"
        )
    tp = int((pred & gt).sum())
    fp = int((pred & ~gt).sum())
    fn = int((~pred & gt).sum())
    dice = 1.0 if (2 * tp + fp + fn) == 0 else 2.0 * tp / (2 * tp + fp + fn)
    ppv = 1.0 if (tp + fp) == 0 else tp / (tp + fp)
    sens = 1.0 if (tp + fn) == 0 else tp / (tp + fn)
    return RegionScore(region, dice, ppv, sens, tp, fp, fn)


def score_maps(pred_maps, gt_maps):
    """Score all three regions of stacked binary [3,D,H,W] maps."""
    pred_maps = np.asarray(pred_maps)
    gt_maps = np.asarray(gt_maps)
    if pred_maps.shape != gt_maps.shape or pred_maps.shape[0] != 3:
        raise ContractViolation(
            f"expected matching [3,D,H,W] stacks, got {pred_maps.shape} vs "
            f"{gt_maps.shape}"
        )
    return [
        score_region(pred_maps[i], gt_maps[i], region)
        for i, region in enumerate(REGIONS)
    ]


def threshold_postprocess(maps, threshold=0.5):
    """Probability maps to labels, with the faint-enhancing rescue rule.

    Maps are binarized at 0.5. If the mean enhancing probability over
    predicted-enhancing voxels falls below ``threshold`` (or no voxel is
    predicted enhancing), those voxels are demoted to necrosis, which the
    inverse remap realizes by keeping them in the core without the
    enhancing flag.
    """
    if not 0.0 < threshold < 1.0:
        raise ContractViolation(f"threshold {threshold} outside (0, 1)")
    maps = np.asarray(maps)
    if maps.ndim != 4 or maps.shape[0] != 3:
        raise ContractViolation(f"expected [3,D,H,W] maps, got {maps.shape}")
    binary = maps >= 0.5
    et = binary[2]
    n_et = int(et.sum())
    if n_et == 0 or float(maps[2][et].mean()) < threshold:
        binary = binary.copy()
        binary[0] |= et  # demoted voxels stay inside the tumor
        binary[1] |= et
        binary[2] = False
    return inverse_remap(binary)


def ensemble_average(maps_list):
    """Elementwise mean of probability maps from several models."""
    if not maps_list:
        raise ContractViolation("empty ensemble")
    first = np.asarray(maps_list[0])
    out = first.astype(np.float64).copy()
    for m in maps_list[1:]:
        m = np.asarray(m)
        if m.shape != first.shape:
            raise ContractViolation(
                f"ensemble shape mismatch: {m.shape} vs {first.shape}"
            )
        out += m
    return (out / len(maps_list)).astype(first.dtype)


def scores_to_csv(case_scores):
    """Rows of (case_id, [RegionScore..]) to CSV text with a mean row."""
    lines = ["case_id, region, dice, ppv, sensitivity, tp, fp, fn"]
    sums = {r: np.zeros(3) for r in REGIONS}
    count = 0
    for case_id, scores in case_scores:
        count += 1
        for s in scores:
            sums[s.region] += (s.dice, s.ppv, s.sensitivity)
            lines.append(
                f"{case_id}, {s.region}, {s.dice:.6f}, {s.ppv:.6f}, "
                f"{s.sensitivity:.6f}, {s.tp}, {s.fp}, {s.fn}"
            )
    for region in REGIONS:
        if count:
            d, p, s = sums[region] / count
            lines.append(f"mean, {region}, {d:.6f}, {p:.6f}, {s:.6f}, , , ")
    return "\n".join(lines) + "\n"


def _write_pgm(path, gray):
    with open(path, "wb") as fh:
        fh.write(f"P5\n{gray.shape[1]} {gray.shape[0]}\n255\n".encode())
        fh.write(gray.tobytes())


def _write_ppm(path, rgb):
    with open(path, "wb") as fh:
        fh.write(f"P6\n{rgb.shape[1]} {rgb.shape[0]}\n255\n".encode())
        fh.write(rgb.tobytes())


def export_slices(volume, axis, indices, out_dir, prefix="slice"):
    """Write axis-aligned slices as portable pixmaps.

    Integer volumes are treated as label fields and colored through the
    fixed palette (PPM); float volumes are min-max scaled to 8-bit
    grayscale (PGM). Returns the written paths.
    """
    volume = np.asarray(volume)
    if volume.ndim != 3:
        raise ContractViolation(f"expected a [D,H,W] volume, got {volume.shape}")
    if axis not in (0, 1, 2):
        raise ContractViolation(f"axis {axis} outside 0..2")
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    labeled = np.issubdtype(volume.dtype, np.integer)
    if not labeled:
        lo, hi = float(volume.min()), float(volume.max())
        scale = 255.0 / (hi - lo) if hi > lo else 0.0
    paths = []
    for idx in indices:
        idx = int(idx)
        if not 0 <= idx < volume.shape[axis]:
            raise ContractViolation(
                f"slice index {idx} outside axis {axis} extent {volume.shape[axis]}"
            )
        sl = np.take(volume, idx, axis=axis)
        path = out_dir / f"{prefix}_ax{axis}_{idx:04d}"
        if labeled:
            rgb = np.zeros(sl.shape + (3,), dtype=np.uint8)
            for value, color in PALETTE.items():
                rgb[sl == value] = color
            path = path.with_suffix(".ppm")
            _write_ppm(path, rgb)
        else:
            gray = ((sl - lo) * scale).astype(np.uint8)
            path = path.with_suffix(".pgm")
            _write_pgm(path, gray)
        paths.append(path)
    return paths
