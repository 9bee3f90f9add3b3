"""Cascaded 3D U-Net brain tumor segmentation built on a small numpy autodiff core."""

__version__ = "0.1.0"

from .config import RunConfig
from .ensemble import ensemble_average, uncertainty_map
from .labels import labels_to_regions, postprocess, regions_to_labels
from .metrics import dsc, hd95
from .network import BlockKind, BlockVariant, Cascade, CascadeSpec, RegionProbMaps, SubNetSpec, cascade_forward
from .tensor import Tensor, no_grad, precision

__all__ = [
    "BlockKind", "BlockVariant", "Cascade", "CascadeSpec", "RegionProbMaps", "RunConfig", "SubNetSpec",
    "Tensor", "cascade_forward", "dsc", "ensemble_average", "hd95", "labels_to_regions", "no_grad",
    "postprocess", "precision", "regions_to_labels", "uncertainty_map",
]
