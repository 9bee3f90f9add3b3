"""Model averaging and per-voxel uncertainty maps."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .errors import DimensionError
from .network import RegionProbMaps


@dataclass
class UncertaintyMaps:
    u_whole: np.ndarray
    u_core: np.ndarray
    u_enh: np.ndarray

    def __iter__(self):
        return iter((self.u_whole, self.u_core, self.u_enh))


def _mean_over_models(stack: np.ndarray) -> np.ndarray:
    # sorting along the model axis fixes the summation order, so the mean is
    # bit-identical under any permutation of the models
    ordered = np.sort(stack, axis=0)
    total = np.sum(ordered.astype(np.longdouble), axis=0)
    return (total / stack.shape[0]).astype(stack.dtype)


def ensemble_average(outputs: Sequence[RegionProbMaps]) -> RegionProbMaps:
    """Voxel-wise arithmetic mean of each region map over ``M >= 1`` models."""
    if len(outputs) == 0:
        raise ValueError("ensemble needs at least one model output")
    shape = np.shape(outputs[0].p_whole)
    for i, out in enumerate(outputs):
        for m in out:
            if np.shape(m) != shape:
                raise DimensionError(f"model {i} map shape {np.shape(m)} differs from {shape}")
    regions = []
    for r in range(3):
        stack = np.stack([np.asarray(list(out)[r]) for out in outputs])
        if not np.issubdtype(stack.dtype, np.floating):
            stack = stack.astype(np.float64)
        regions.append(_mean_over_models(stack))
    return RegionProbMaps(*regions)


def uncertainty_from_probability(p: np.ndarray) -> np.ndarray:
    """Piecewise-linear score: ``200 (1 - p)`` for ``p >= 0.5`` and ``200 p`` below.

    Zero means fully certain and 100 maximally uncertain (``p = 0.5``).
    """
    p = np.asarray(p)
    if not np.issubdtype(p.dtype, np.floating):
        p = p.astype(np.float64)
    return np.where(p >= 0.5, 200.0 * (1.0 - p), 200.0 * p).astype(p.dtype)


def uncertainty_map(p: RegionProbMaps) -> UncertaintyMaps:
    return UncertaintyMaps(*(uncertainty_from_probability(m) for m in p))


def quantize_uncertainty(u: np.ndarray) -> np.ndarray:
    """Round to integers in ``[0, 100]``, halves rounding up."""
    return np.clip(np.floor(np.asarray(u, dtype=np.float64) + 0.5), 0, 100).astype(np.uint8)
