"""Sliding-window prediction over volumes larger than the training patch."""

from __future__ import annotations

import itertools

import numpy as np

from .errors import DimensionError
from .network import Cascade, RegionProbMaps
from .tensor import Tensor, no_grad


def window_starts(size: int, patch: int, overlap: float = 0.5) -> list[int]:
    """Window origins along one axis covering ``[0, size)``.

    The stride is ``patch * (1 - overlap)``; a final window flush with the far
    edge is added when the stride does not land there.
    """
    if size <= patch:
        return [0]
    stride = max(1, int(round(patch * (1.0 - overlap))))
    starts = list(range(0, size - patch + 1, stride))
    if starts[-1] != size - patch:
        starts.append(size - patch)
    return starts


def sliding_window_predict(model: Cascade, volume: np.ndarray, patch_shape=None, overlap: float = 0.5,
                           batch_size: int = 1) -> RegionProbMaps:
    """Predict region probabilities for a ``[C, D, H, W]`` volume.

    Overlapping windows are averaged with uniform weight. Axes shorter than
    the patch are edge-padded up to it and cropped back afterwards.

    Returns:
        ``RegionProbMaps`` of float32 ``[D, H, W]`` arrays.
    """
    volume = np.asarray(volume)
    if volume.ndim != 4:
        raise DimensionError(f"expected [C, D, H, W], got {volume.shape}")
    patch = tuple(patch_shape or model.spec.patch_shape)
    spatial = volume.shape[1:]
    pad = [(0, max(0, p - s)) for s, p in zip(spatial, patch)]
    padded = np.pad(volume, [(0, 0)] + pad, mode="edge") if any(b for _, b in pad) else volume
    full = padded.shape[1:]
    starts = [window_starts(s, p, overlap) for s, p in zip(full, patch)]
    sums = np.zeros((3,) + full, dtype=np.float64)
    counts = np.zeros(full, dtype=np.float64)
    corners = list(itertools.product(*starts))
    with no_grad():
        for i in range(0, len(corners), batch_size):
            group = corners[i:i + batch_size]
            sl = [tuple(slice(a, a + p) for a, p in zip(c, patch)) for c in group]
            x = np.stack([padded[(slice(None),) + s] for s in sl])
            maps = model(Tensor(x))
            for j, s in enumerate(sl):
                for r, m in enumerate(maps):
                    sums[(r,) + s] += m.data[j, 0]
                counts[s] += 1.0
    probs = sums / counts
    crop = tuple(slice(0, s) for s in spatial)
    return RegionProbMaps(*(probs[(r,) + crop].astype(np.float32) for r in range(3)))
