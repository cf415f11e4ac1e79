"""Per-image compositions used by the command line front end."""

from __future__ import annotations

from typing import Mapping, Optional, Sequence

import numpy as np

from .affinity import fit_boundary_map
from .attention import gaussian_attention, multiscale_cam
from .config import RunConfig
from .core import (
    OBJECT_CLASSES,
    ActivationMap,
    BBox,
    BoundaryMap,
    ClassId,
    ImageDims,
    LabelMask,
    clamp_box,
)
from .fusion import assemble_stack, fuse_box, generate_pseudo_label
from .propagation import segment


def cams_from_tensors(tensors: Sequence[np.ndarray], dims: ImageDims) -> dict[ClassId, ActivationMap]:
    """CAM tensors hold one channel per object class (channel k is class k + 1),
    possibly at several scales. Scales are averaged per class; classes whose
    channel is zero at every scale are treated as not predicted and left out."""
    if not tensors:
        return {}
    out = {}
    for k, cls in enumerate(OBJECT_CLASSES):
        maps = []
        for t in tensors:
            if t.shape[0] != len(OBJECT_CLASSES):
                raise ValueError(f"CAM tensor needs {len(OBJECT_CLASSES)} channels, got {t.shape[0]}")
            maps.append(ActivationMap.from_array(np.maximum(t[k].astype(np.float64), 0.0), cls))
        m = multiscale_cam(maps, dims)
        if m.values.max() > 0:
            out[cls] = m
    return out


def pseudo_label(
    boxes: Sequence[BBox],
    dims: ImageDims,
    cams: Optional[Mapping[ClassId, ActivationMap]],
    cfg: RunConfig,
) -> LabelMask:
    """Box attention (fused with CAMs when available) thresholded into a label mask."""
    predicted = set(cams) if cams else set()
    fused = []
    for b in boxes:
        b = clamp_box(b, dims)
        g = gaussian_attention(b, dims, cfg.gauss)
        cam = cams.get(b.class_id) if cams else None
        fused.append(fuse_box(b, b.class_id, predicted, cam, g, cfg.pipeline.epsilon))
    stack = assemble_stack(fused, dims)
    return generate_pseudo_label(stack, cfg.pipeline.theta_fg, cfg.pipeline.theta_bg)


def has_two_classes(mask: LabelMask) -> bool:
    vals = np.unique(mask.values)
    return int((vals != int(ClassId.IGNORE)).sum()) >= 2


def fit_boundary(mask: LabelMask, cfg: RunConfig) -> BoundaryMap:
    return fit_boundary_map(mask, cfg.fit, cfg.pipeline)


def segment_image(
    boxes: Sequence[BBox],
    boundary: BoundaryMap,
    image: Optional[np.ndarray],
    cfg: RunConfig,
    force_large: bool = False,
) -> LabelMask:
    # CAMs are discarded at test time; boxes drive the attention alone
    return segment(boxes, None, boundary, image, cfg.pipeline, cfg.gauss, force_large=force_large)
