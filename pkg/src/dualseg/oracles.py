"""Brute-force reference implementations.

Each function recomputes a production result by the most direct method
available (per-voxel loops, all-pairs distances, exhaustive window
enumeration) and shares no code path with the implementation it checks.
"""

from __future__ import annotations

import math

import numpy as np

IGNORE = -1
ENTROPY_EPS = 1e-12


def linear_quantile(sorted_values: list[float], q: float) -> float:
    """Linear-interpolation sample quantile of an ascending list.

    Interpolates from the nearer endpoint (the numerically stable lerp), so
    results agree bit-for-bit with the production quantile on equal inputs.
    """
    n = len(sorted_values)
    if n == 1:
        return sorted_values[0]
    pos = q * (n - 1)
    lo = int(math.floor(pos))
    hi = min(lo + 1, n - 1)
    frac = pos - lo
    a, b = sorted_values[lo], sorted_values[hi]
    if frac >= 0.5:
        return b - (b - a) * (1 - frac)
    return a + (b - a) * frac


def pseudo_mask_oracle(probs: np.ndarray, keep_quantile: float) -> tuple[np.ndarray, int, float]:
    """Sort-threshold-argmax reimplementation of the entropy filter.

    Returns (labels, valid_count, tau) with IGNORE marking the discarded
    high-entropy voxels.
    """
    c = probs.shape[0]
    spatial = probs.shape[1:]
    flat = probs.reshape(c, -1)
    n = flat.shape[1]
    entropies = []
    argmaxes = []
    for i in range(n):
        ent = 0.0
        best, best_p = 0, flat[0, i]
        for cls in range(c):
            p = flat[cls, i]
            ent -= p * math.log2(p + ENTROPY_EPS)
            if p > best_p:
                best, best_p = cls, p
        entropies.append(ent)
        argmaxes.append(best)
    tau = linear_quantile(sorted(entropies), keep_quantile)
    labels = np.empty(n, dtype=np.int64)
    count = 0
    for i in range(n):
        if entropies[i] <= tau:
            labels[i] = argmaxes[i]
            count += 1
        else:
            labels[i] = IGNORE
    return labels.reshape(spatial), count, tau


def surface_distance_oracle(pred_surface: np.ndarray, ref_surface: np.ndarray,
                            spacing: tuple[float, float, float] = (1.0, 1.0, 1.0)) -> tuple[float, float]:
    """All-pairs O(n^2) HD95/ASD from two [n, 3] surface coordinate arrays."""
    sp = np.asarray(spacing, dtype=np.float64)
    a = pred_surface * sp
    b = ref_surface * sp
    d2 = ((a[:, None, :] - b[None, :, :]) ** 2).sum(axis=2)
    d_ab = np.sqrt(d2.min(axis=1))
    d_ba = np.sqrt(d2.min(axis=0))
    combined = np.concatenate([d_ab, d_ba])
    hd95 = linear_quantile(sorted(combined.tolist()), 0.95)
    # the mean must reduce the same array in the same order as production,
    # otherwise summation order alone breaks exact equality
    asd = float(combined.mean())
    return hd95, asd


def sliding_window_average_oracle(predict_fn, image: np.ndarray,
                                  window: tuple[int, int, int],
                                  stride: tuple[int, int, int]) -> np.ndarray:
    """Per-voxel average of the logits of every window covering that voxel."""
    ext = image.shape
    positions = []
    for e, w, s in zip(ext, window, stride):
        axis = list(range(0, e - w + 1, s))
        if axis[-1] != e - w:
            axis.append(e - w)
        positions.append(axis)

    windows = []
    for ox in positions[0]:
        for oy in positions[1]:
            for oz in positions[2]:
                crop = image[ox:ox + window[0], oy:oy + window[1], oz:oz + window[2]]
                logits = predict_fn(crop[None])
                windows.append(((ox, oy, oz), logits))

    avg = np.zeros((2, *ext))
    for x in range(ext[0]):
        for y in range(ext[1]):
            for z in range(ext[2]):
                acc = np.zeros(2)
                hits = 0
                for (ox, oy, oz), logits in windows:
                    if ox <= x < ox + window[0] and oy <= y < oy + window[1] and oz <= z < oz + window[2]:
                        acc += logits[:, x - ox, y - oy, z - oz]
                        hits += 1
                avg[:, x, y, z] = acc / hits
    return avg
