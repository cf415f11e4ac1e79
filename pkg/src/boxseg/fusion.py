"""Fuse CAM and box attention per box, and threshold fused stacks into pseudo-labels."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Collection, Optional, Sequence

import numpy as np

from .core import (
    ActivationMap,
    ActivationStack,
    BBox,
    ClassId,
    ImageDims,
    LabelMask,
    ShapeError,
    clamp_box,
)


@dataclass(frozen=True, eq=False)
class FusedBoxActivation:
    box: BBox
    class_id: ClassId
    values: ActivationMap
    branch: int = 1


def box_has_activation(m: ActivationMap, b: BBox, epsilon: float) -> bool:
    """True if some pixel inside the box reaches ``epsilon``."""
    region = m.values[b.pixel_slices(m.dims)]
    return bool(region.size) and bool((region >= epsilon).any())


def fuse_box(
    b: BBox,
    c_g: ClassId,
    predicted: Collection[ClassId],
    cam: Optional[ActivationMap],
    gauss: ActivationMap,
    epsilon: float,
) -> FusedBoxActivation:
    """Three-way fusion rule.

    1. ground-truth class not predicted (or no CAM): Gaussian only
    2. predicted but no CAM response in the box: Gaussian only
    3. predicted with CAM response: Gaussian times CAM

    The result is zero outside the clamped box.
    """
    c_g = ClassId(c_g)
    if cam is not None:
        if cam.class_id != c_g:
            raise ValueError(f"CAM is for class {cam.class_id.name}, box class is {c_g.name}")
        if cam.dims != gauss.dims:
            raise ShapeError(f"CAM dims {cam.dims} != attention dims {gauss.dims}")
    dims = gauss.dims
    box = clamp_box(b, dims)
    inside = box.region_mask(dims)

    branch = 1
    fused = gauss.values
    if cam is not None and c_g in predicted:
        if box_has_activation(cam, box, epsilon):
            branch = 3
            fused = gauss.values * cam.values
        else:
            branch = 2
    out = np.where(inside, fused, 0.0)
    return FusedBoxActivation(box, c_g, ActivationMap(dims, c_g, out), branch)


def assemble_stack(fused: Sequence[FusedBoxActivation], dims: ImageDims) -> ActivationStack:
    """Pixel-wise max per class over all fused boxes of that class."""
    per_class: dict[ClassId, np.ndarray] = {}
    for f in fused:
        if f.values.dims != dims:
            raise ShapeError(f"fused map dims {f.values.dims} != {dims}")
        acc = per_class.get(f.class_id)
        per_class[f.class_id] = f.values.values.copy() if acc is None else np.maximum(acc, f.values.values)
    maps = {c: ActivationMap(dims, c, v) for c, v in per_class.items() if v.any()}
    return ActivationStack(dims, maps)


def generate_pseudo_label(s: ActivationStack, theta_fg: float, theta_bg: float) -> LabelMask:
    """Foreground where some class exceeds ``theta_fg`` (argmax, lowest id on ties),
    background where every class is below ``theta_bg``, ignore otherwise."""
    if not len(s):
        return LabelMask.filled(s.dims)
    classes = np.array([int(c) for c in s.classes], dtype=np.uint8)
    arr = s.as_array()
    fg = arr > theta_fg
    any_fg = fg.any(axis=0)
    winner = np.argmax(np.where(fg, arr, -np.inf), axis=0)
    out = np.full(s.dims.shape, int(ClassId.IGNORE), dtype=np.uint8)
    out[(arr < theta_bg).all(axis=0)] = int(ClassId.BACKGROUND)
    out[any_fg] = classes[winner[any_fg]]
    return LabelMask(s.dims, out)
