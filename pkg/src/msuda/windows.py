"""Sliding-window tiling with blending weights for full-volume inference."""

from __future__ import annotations

import numpy as np


def window_starts(dim: int, patch: int, step: int) -> list:
    """Start offsets covering [0, dim) with the final window flush to the end."""
    if patch >= dim:
        return [0]
    starts = list(range(0, dim - patch + 1, max(1, step)))
    if starts[-1] != dim - patch:
        starts.append(dim - patch)
    return starts


def iter_windows(shape, patch):
    """All window origin tuples for half-overlapping tiles."""
    axes = [window_starts(d, p, max(1, p // 2)) for d, p in zip(shape, patch)]
    for x in axes[0]:
        for y in axes[1]:
            for z in axes[2]:
                yield (x, y, z)


def triangular_profile(n: int) -> np.ndarray:
    """Linear ramp up then down; realizes a linear cross-fade at half overlap."""
    ramp = np.minimum(np.arange(1, n + 1), np.arange(n, 0, -1)).astype(np.float64)
    return ramp / ramp.max()


def gaussian_profile(n: int, sigma_fraction: float = 1.0 / 8.0) -> np.ndarray:
    """Gaussian importance weights centered on the window, sigma = n * fraction."""
    center = (n - 1) / 2.0
    sigma = max(n * sigma_fraction, 1e-3)
    x = np.arange(n, dtype=np.float64)
    w = np.exp(-0.5 * ((x - center) / sigma) ** 2)
    return np.maximum(w, 1e-6)


def weight_block(patch, profile) -> np.ndarray:
    wx = profile(patch[0])
    wy = profile(patch[1])
    wz = profile(patch[2])
    return wx[:, None, None] * wy[None, :, None] * wz[None, None, :]
