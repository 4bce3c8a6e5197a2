"""Evaluation metrics: Dice, Jaccard, 95th-percentile Hausdorff distance,
and average surface distance.

Surface distances run on an exact squared-Euclidean distance transform over
the voxel grid; an O(n^2) all-pairs oracle (see oracles.py) validates them.
Conventions: both-empty masks count as perfect overlap (100%), one-empty as
0%; surface distances on an empty mask are a sentinel excluded from fold
aggregation.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import ndimage

from .data import Volume
from .trainer import sliding_window_predict


class EmptyMaskError(ValueError):
    """Surface distances need both masks nonempty; record a sentinel instead."""


@dataclass
class CaseMetrics:
    case_id: str
    dice: float  # percent
    jaccard: float  # percent
    hd95: float  # voxel units; NaN when sentinel
    asd: float
    hd95_mm: float  # spacing-scaled companions (equal to voxel units at unit spacing)
    asd_mm: float
    pred_voxels: int
    ref_voxels: int
    surface_sentinel: bool = False


@dataclass
class FoldSummary:
    n_cases: int
    dice_mean: float
    dice_std: float
    jaccard_mean: float
    jaccard_std: float
    hd95_mean: float
    hd95_std: float
    asd_mean: float
    asd_std: float
    hd95_mm_mean: float
    hd95_mm_std: float
    asd_mm_mean: float
    asd_mm_std: float
    surface_excluded: int


def overlap_metrics(pred: np.ndarray, ref: np.ndarray) -> tuple[float, float]:
    """Dice and Jaccard as percentages."""
    pred = np.asarray(pred).astype(bool)
    ref = np.asarray(ref).astype(bool)
    if pred.shape != ref.shape:
        raise ValueError(f"mask extents differ: {pred.shape} vs {ref.shape}")
    p, r = int(pred.sum()), int(ref.sum())
    if p == 0 and r == 0:
        return 100.0, 100.0
    inter = int((pred & ref).sum())
    union = p + r - inter
    dice = 200.0 * inter / (p + r)
    jaccard = 100.0 * inter / union
    return dice, jaccard


def extract_surface(mask: np.ndarray) -> np.ndarray:
    """Coordinates of foreground voxels with a background or out-of-volume
    6-neighbor, as an [n, 3] array in lexicographic order."""
    mask = np.asarray(mask).astype(bool)
    padded = np.pad(mask, 1)
    interior = np.ones_like(mask)
    for axis in range(3):
        for shift in (1, -1):
            interior &= np.roll(padded, shift, axis=axis)[1:-1, 1:-1, 1:-1]
    return np.argwhere(mask & ~interior)


def _directed_distances(src: np.ndarray, dst: np.ndarray, shape: tuple[int, ...],
                        spacing: tuple[float, float, float]) -> np.ndarray:
    """Distance from each src surface voxel to the nearest dst surface voxel."""
    field = np.ones(shape)
    field[tuple(dst.T)] = 0.0
    edt = ndimage.distance_transform_edt(field, sampling=spacing)
    return edt[tuple(src.T)]


def surface_distances(pred: np.ndarray, ref: np.ndarray,
                      spacing: tuple[float, float, float] = (1.0, 1.0, 1.0)) -> tuple[float, float]:
    """HD95 and ASD over the combined two-direction surface distance list."""
    pred = np.asarray(pred).astype(bool)
    ref = np.asarray(ref).astype(bool)
    if pred.shape != ref.shape:
        raise ValueError(f"mask extents differ: {pred.shape} vs {ref.shape}")
    if not pred.any() or not ref.any():
        raise EmptyMaskError("surface distances undefined for an empty mask; record a sentinel")
    sp = extract_surface(pred)
    sr = extract_surface(ref)
    d_pr = _directed_distances(sp, sr, pred.shape, spacing)
    d_rp = _directed_distances(sr, sp, pred.shape, spacing)
    combined = np.concatenate([d_pr, d_rp])
    return float(np.percentile(combined, 95)), float(combined.mean())


def evaluate_case(predict_fn, v: Volume, window: tuple[int, int, int],
                  stride: tuple[int, int, int], threshold: float = 0.5) -> CaseMetrics:
    """Sliding-window prediction of one labeled volume, binarized and scored.

    predict_fn maps a [1, x, y, z] crop to [2, x, y, z] logits. Surface
    distances are reported in both voxel units and spacing-scaled (mm) units;
    voxel units are the headline numbers.
    """
    if v.label is None:
        raise ValueError(f"volume {v.id!r} has no reference label")
    probs = sliding_window_predict(predict_fn, v.image, window, stride)
    pred = probs[1] > threshold
    ref = v.label.astype(bool)
    dice, jaccard = overlap_metrics(pred, ref)
    try:
        hd95, asd = surface_distances(pred, ref)
        hd95_mm, asd_mm = surface_distances(pred, ref, v.spacing)
        sentinel = False
    except EmptyMaskError:
        hd95 = asd = hd95_mm = asd_mm = float("nan")
        sentinel = True
    return CaseMetrics(case_id=v.id, dice=dice, jaccard=jaccard, hd95=hd95, asd=asd,
                       hd95_mm=hd95_mm, asd_mm=asd_mm,
                       pred_voxels=int(pred.sum()), ref_voxels=int(ref.sum()),
                       surface_sentinel=sentinel)


def summarize_fold(cases: list[CaseMetrics]) -> FoldSummary:
    """Per-metric mean and population standard deviation; sentinel cases are
    excluded from surface-distance aggregation."""
    if not cases:
        raise ValueError("cannot summarize an empty case list")

    def stats(values):
        if len(values) == 0:
            return float("nan"), float("nan")
        arr = np.array(values)
        return float(arr.mean()), float(arr.std())

    dice = stats([c.dice for c in cases])
    jac = stats([c.jaccard for c in cases])
    surf = [c for c in cases if not c.surface_sentinel]
    hd = stats([c.hd95 for c in surf])
    asd = stats([c.asd for c in surf])
    hd_mm = stats([c.hd95_mm for c in surf])
    asd_mm = stats([c.asd_mm for c in surf])
    return FoldSummary(
        n_cases=len(cases),
        dice_mean=dice[0], dice_std=dice[1],
        jaccard_mean=jac[0], jaccard_std=jac[1],
        hd95_mean=hd[0], hd95_std=hd[1],
        asd_mean=asd[0], asd_std=asd[1],
        hd95_mm_mean=hd_mm[0], hd95_mm_std=hd_mm[1],
        asd_mm_mean=asd_mm[0], asd_mm_std=asd_mm[1],
        surface_excluded=len(cases) - len(surf),
    )
