"""Hierarchical label algebra and post-processing.

Labels follow the BraTS convention: 0 background, 1 necrotic/non-enhancing
core, 2 edema, 3 enhancing tumor. The nested regions are whole = {1, 2, 3},
core = {1, 3} and enhancing = {3}.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np
from scipy import ndimage

from .errors import LabelError
from .network import RegionProbMaps

BACKGROUND, NECROTIC, EDEMA, ENHANCING = 0, 1, 2, 3
REGIONS = ("whole", "core", "enh")
CORE_THRESHOLD_LADDER = (0.3, 0.1, 0.05, 0.01)


@dataclass
class RegionMasks:
    whole: np.ndarray
    core: np.ndarray
    enh: np.ndarray

    def __iter__(self):
        return iter((self.whole, self.core, self.enh))

    def is_nested(self) -> bool:
        return bool(np.all(self.enh <= self.core) and np.all(self.core <= self.whole))


def validate_labels(labels: np.ndarray) -> np.ndarray:
    labels = np.asarray(labels)
    if labels.dtype.kind == "f":
        if not np.all(np.mod(labels, 1) == 0):
            raise LabelError("label map contains non-integer values")
    if labels.size and (labels.min() < 0 or labels.max() > 3):
        raise LabelError(f"label values must lie in {{0,1,2,3}}, found range [{labels.min()}, {labels.max()}]")
    return labels.astype(np.uint8)


def labels_to_regions(labels: np.ndarray) -> RegionMasks:
    labels = validate_labels(labels)
    return RegionMasks(whole=labels > 0,
                       core=(labels == NECROTIC) | (labels == ENHANCING),
                       enh=labels == ENHANCING)


def regions_to_labels(p: RegionProbMaps, thresholds: Sequence[float] = (0.5, 0.5, 0.5)) -> np.ndarray:
    """Hierarchical decode: a voxel only reaches a region if it passed every enclosing one."""
    t_w, t_c, t_e = thresholds
    whole, core, enh = (np.asarray(m) for m in p)
    if not (whole.shape == core.shape == enh.shape):
        raise ValueError(f"probability maps differ in shape: {whole.shape}, {core.shape}, {enh.shape}")
    out = np.zeros(whole.shape, dtype=np.uint8)
    in_whole = whole >= t_w
    in_core = in_whole & (core >= t_c)
    out[in_whole] = EDEMA
    out[in_core] = NECROTIC
    out[in_core & (enh >= t_e)] = ENHANCING
    return out


def _suppress_small_enhancing(labels: np.ndarray, min_voxels: int, per_component: bool) -> np.ndarray:
    enh = labels == ENHANCING
    if per_component:
        components, n = ndimage.label(enh)
        if n:
            sizes = np.bincount(components.ravel())
            small = sizes < min_voxels
            small[0] = False
            labels = labels.copy()
            labels[small[components]] = NECROTIC
        return labels
    if 0 < enh.sum() < min_voxels:
        labels = labels.copy()
        labels[enh] = NECROTIC
    return labels


def postprocess(p: RegionProbMaps, min_enh_voxels: int = 500,
                ladder: Sequence[float] = CORE_THRESHOLD_LADDER, per_component: bool = False,
                return_core_threshold: bool = False):
    """Decode probability maps and apply the two clean-up rules.

    1. If the decoded core is empty, the core threshold steps down the ladder
       (0.3, 0.1, 0.05, 0.01) until some voxel inside the whole tumor passes.
    2. If fewer than ``min_enh_voxels`` voxels are labelled enhancing, they are
       relabelled necrotic. With ``per_component`` the test applies to each
       face-connected enhancing component separately.

    The ladder runs first so that enhancing voxels it uncovers are still subject
    to the size rule; this makes the function idempotent on its own output.
    """
    labels = regions_to_labels(p)
    t_core = 0.5
    if not np.any((labels == NECROTIC) | (labels == ENHANCING)):
        for t in ladder:
            candidate = regions_to_labels(p, (0.5, t, 0.5))
            if np.any((candidate == NECROTIC) | (candidate == ENHANCING)):
                labels, t_core = candidate, t
                break
    labels = _suppress_small_enhancing(labels, min_enh_voxels, per_component)
    return (labels, t_core) if return_core_threshold else labels


def masks_to_probs(masks: RegionMasks) -> RegionProbMaps:
    """Hard {0, 1} probability maps for already-binary regions."""
    return RegionProbMaps(*(m.astype(np.float64) for m in masks))
