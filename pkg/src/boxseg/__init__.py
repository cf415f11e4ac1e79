"""Weakly supervised segmentation from boxes: pseudo-labels, boundary maps, refinement, scoring."""

from .core import (
    ActivationMap,
    ActivationStack,
    BBox,
    BoundaryMap,
    ClassId,
    CrfParams,
    ImageDims,
    LabelMask,
    PipelineConfig,
    clamp_box,
    pixel_index,
)

__all__ = [
    "ActivationMap",
    "ActivationStack",
    "BBox",
    "BoundaryMap",
    "ClassId",
    "CrfParams",
    "ImageDims",
    "LabelMask",
    "PipelineConfig",
    "clamp_box",
    "pixel_index",
]

__version__ = "0.1.0"
