"""Dice overlap and 95th-percentile Hausdorff distance for binary masks."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import ndimage

from .errors import DimensionError, EmptyPredictionError, EmptyTruthError


@dataclass(frozen=True)
class DiceResult:
    value: float
    degenerate: bool  # both masks empty

    def __float__(self) -> float:
        return self.value


def _pair(x, y) -> tuple[np.ndarray, np.ndarray]:
    x = np.asarray(x, dtype=bool)
    y = np.asarray(y, dtype=bool)
    if x.shape != y.shape:
        raise DimensionError(f"mask shapes differ: {x.shape} vs {y.shape}")
    return x, y


def dsc(x, y) -> DiceResult:
    """``2 |X and Y| / (|X| + |Y|)``; two empty masks score 1.0 and are flagged degenerate."""
    x, y = _pair(x, y)
    nx, ny = int(x.sum()), int(y.sum())
    if nx + ny == 0:
        return DiceResult(1.0, True)
    return DiceResult(2.0 * int(np.logical_and(x, y).sum()) / (nx + ny), False)


def _spacing(spacing, ndim) -> np.ndarray:
    s = np.broadcast_to(np.asarray(spacing, dtype=np.float64), (ndim,))
    if np.any(s <= 0):
        raise ValueError(f"spacing must be positive, got {spacing}")
    return s


def _check_nonempty(x, y) -> None:
    if not x.any():
        raise EmptyPredictionError("prediction mask is empty; HD95 is undefined")
    if not y.any():
        raise EmptyTruthError("ground-truth mask is empty; HD95 is undefined")


def surface(mask: np.ndarray) -> np.ndarray:
    """Mask voxels with at least one face neighbor outside the mask (or on the array border)."""
    padded = np.pad(mask, 1, constant_values=False)
    interior = ndimage.binary_erosion(padded, structure=ndimage.generate_binary_structure(mask.ndim, 1))
    return mask & ~interior[(slice(1, -1),) * mask.ndim]


def directed_distances(x: np.ndarray, y: np.ndarray, spacing=1.0) -> np.ndarray:
    """Euclidean distance from every voxel of ``x`` to the nearest voxel of ``y``."""
    edt = ndimage.distance_transform_edt(~y, sampling=_spacing(spacing, y.ndim))
    return edt[x]


def hd95(x, y, spacing=1.0, surface_only: bool = False) -> float:
    """95th percentile of the pooled directed nearest-neighbor distances.

    Distances from each prediction voxel to the truth and from each truth
    voxel to the prediction are pooled into one multiset and its 95th
    percentile is taken with linear interpolation. By default every mask
    voxel contributes; ``surface_only`` restricts both sides to boundary
    voxels, which is faster on large solid masks but a different quantity.

    Isotropic spacing multiplies the unit-voxel result, so scaling the
    spacing by ``k`` scales the distance by exactly ``k``.
    """
    x, y = _pair(x, y)
    _check_nonempty(x, y)
    if surface_only:
        x, y = surface(x), surface(y)
    s, scale = _split_isotropic(spacing, x.ndim)
    d = np.concatenate([directed_distances(x, y, s), directed_distances(y, x, s)])
    return scale * float(np.percentile(d, 95, method="linear"))


def _split_isotropic(spacing, ndim) -> tuple[np.ndarray, float]:
    s = _spacing(spacing, ndim)
    if np.all(s == s[0]):
        return np.ones(ndim), float(s[0])
    return s, 1.0


# brute-force references ------------------------------------------------------------------

def dsc_bruteforce(x, y) -> float:
    """Set-based Dice over explicit voxel coordinates."""
    x, y = _pair(x, y)
    sx = set(map(tuple, np.argwhere(x)))
    sy = set(map(tuple, np.argwhere(y)))
    if not sx and not sy:
        return 1.0
    return 2.0 * len(sx & sy) / (len(sx) + len(sy))


def hd95_bruteforce(x, y, spacing=1.0) -> float:
    """All-pairs nearest-neighbor search, ``O(|X| |Y|)``."""
    x, y = _pair(x, y)
    _check_nonempty(x, y)
    s, scale = _split_isotropic(spacing, x.ndim)
    px = np.argwhere(x)
    py = np.argwhere(y)
    diff = (px[:, None, :] - py[None, :, :]) * s
    dist = np.sqrt(np.sum(diff * diff, axis=-1))
    pooled = np.concatenate([dist.min(axis=1), dist.min(axis=0)])
    return scale * float(np.percentile(pooled, 95, method="linear"))
