"""Shared domain types, grid geometry and configuration records.

Coordinate conventions used throughout the package:

* grids are indexed ``[row, col]`` and flattened row-major;
* continuous image coordinates put the centre of pixel ``(row, col)`` at
  ``(x, y) = (col + 0.5, row + 0.5)``, so a box ``x=0, w=5`` covers columns
  0..4 and is centred on column 2;
* boxes are stored in COCO form (top-left corner plus width/height).
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass, field, replace
from typing import Iterator, Mapping

import numpy as np


class ClassId(enum.IntEnum):
    BACKGROUND = 0
    HOLOTHURIAN = 1
    ECHINUS = 2
    SCALLOP = 3
    STARFISH = 4
    IGNORE = 255


OBJECT_CLASSES = (ClassId.HOLOTHURIAN, ClassId.ECHINUS, ClassId.SCALLOP, ClassId.STARFISH)
SCORED_CLASSES = (ClassId.BACKGROUND,) + OBJECT_CLASSES
VALID_LABEL_VALUES = np.array([int(c) for c in ClassId], dtype=np.uint8)


class InvalidBoxError(ValueError):
    pass


class ShapeError(ValueError):
    pass


def _frozen(a: np.ndarray) -> np.ndarray:
    # copy so the caller's array keeps its write flag
    a = np.array(a, order="C", copy=True)
    a.setflags(write=False)
    return a


@dataclass(frozen=True)
class ImageDims:
    height: int
    width: int

    def __post_init__(self):
        if int(self.height) < 1 or int(self.width) < 1:
            raise ValueError(f"image dims must be positive, got {self.height}x{self.width}")
        object.__setattr__(self, "height", int(self.height))
        object.__setattr__(self, "width", int(self.width))

    @property
    def shape(self) -> tuple[int, int]:
        return (self.height, self.width)

    @property
    def size(self) -> int:
        return self.height * self.width

    @classmethod
    def of(cls, a: np.ndarray) -> "ImageDims":
        return cls(a.shape[-2], a.shape[-1])


def pixel_index(p: tuple[int, int], dims: ImageDims) -> int:
    row, col = p
    if not (0 <= row < dims.height and 0 <= col < dims.width):
        raise IndexError(f"pixel {p} outside {dims.height}x{dims.width} grid")
    return row * dims.width + col


def pixel_coords(index: int, dims: ImageDims) -> tuple[int, int]:
    """Inverse of :func:`pixel_index`."""
    if not 0 <= index < dims.size:
        raise IndexError(f"flat index {index} outside grid of {dims.size} pixels")
    return divmod(index, dims.width)


@dataclass(frozen=True)
class BBox:
    """Axis-aligned box, top-left corner plus width and height, in pixels."""

    x: float
    y: float
    w: float
    h: float
    class_id: ClassId

    def __post_init__(self):
        if not (self.w > 0 and self.h > 0):
            raise InvalidBoxError(f"box width/height must be positive: {self}")
        cls = ClassId(self.class_id)
        if cls in (ClassId.BACKGROUND, ClassId.IGNORE):
            raise InvalidBoxError(f"box class must be an object class, got {cls.name}")
        object.__setattr__(self, "class_id", cls)

    @property
    def center(self) -> tuple[float, float]:
        return (self.x + self.w / 2.0, self.y + self.h / 2.0)

    @property
    def top_left(self) -> tuple[float, float]:
        return (self.x, self.y)

    @property
    def area(self) -> float:
        return self.w * self.h

    def pixel_slices(self, dims: ImageDims) -> tuple[slice, slice]:
        """Rows and columns whose pixel centres fall inside the box (clipped to the image)."""
        c0 = max(math.ceil(self.x - 0.5), 0)
        c1 = min(math.ceil(self.x + self.w - 0.5), dims.width)
        r0 = max(math.ceil(self.y - 0.5), 0)
        r1 = min(math.ceil(self.y + self.h - 0.5), dims.height)
        return slice(r0, max(r0, r1)), slice(c0, max(c0, c1))

    def region_mask(self, dims: ImageDims) -> np.ndarray:
        m = np.zeros(dims.shape, dtype=bool)
        m[self.pixel_slices(dims)] = True
        return m


def clamp_box(b: BBox, dims: ImageDims) -> BBox:
    x0, y0 = max(b.x, 0.0), max(b.y, 0.0)
    x1, y1 = min(b.x + b.w, dims.width), min(b.y + b.h, dims.height)
    if x1 <= x0 or y1 <= y0:
        raise InvalidBoxError(f"box {b} does not intersect {dims.height}x{dims.width} image")
    out = BBox(x0, y0, x1 - x0, y1 - y0, b.class_id)
    rows, cols = out.pixel_slices(dims)
    if rows.start == rows.stop or cols.start == cols.stop:
        raise InvalidBoxError(f"box {b} covers no pixel centre of the image")
    if out == b:
        return b
    return out


def normalize_activation(values: np.ndarray) -> np.ndarray:
    """Clip negatives to zero and divide by the global maximum (all zeros if max is 0)."""
    v = np.maximum(np.asarray(values, dtype=np.float64), 0.0)
    peak = v.max() if v.size else 0.0
    if peak > 0:
        v = v / peak
    return v


@dataclass(frozen=True)
class ActivationMap:
    dims: ImageDims
    class_id: ClassId
    values: np.ndarray

    def __post_init__(self):
        v = np.asarray(self.values, dtype=np.float64)
        if v.shape != self.dims.shape:
            raise ShapeError(f"values shape {v.shape} does not match dims {self.dims.shape}")
        if not np.all(np.isfinite(v)):
            raise ValueError("activation values must be finite")
        object.__setattr__(self, "class_id", ClassId(self.class_id))
        object.__setattr__(self, "values", _frozen(v))

    @classmethod
    def from_array(cls, values, class_id) -> "ActivationMap":
        values = np.asarray(values, dtype=np.float64)
        return cls(ImageDims.of(values), ClassId(class_id), values)

    def normalized(self) -> "ActivationMap":
        return ActivationMap(self.dims, self.class_id, normalize_activation(self.values))


@dataclass(frozen=True)
class ActivationStack:
    dims: ImageDims
    maps: Mapping[ClassId, ActivationMap] = field(default_factory=dict)

    def __post_init__(self):
        ordered = {}
        for c in sorted(self.maps, key=int):
            m = self.maps[c]
            if m.dims != self.dims:
                raise ShapeError(f"map for class {int(c)} has dims {m.dims}, stack has {self.dims}")
            if m.class_id != c:
                raise ValueError(f"map keyed {int(c)} carries class {int(m.class_id)}")
            ordered[ClassId(c)] = m
        object.__setattr__(self, "maps", ordered)

    @property
    def classes(self) -> tuple[ClassId, ...]:
        return tuple(self.maps)

    def __len__(self) -> int:
        return len(self.maps)

    def __iter__(self) -> Iterator[ActivationMap]:
        return iter(self.maps.values())

    def as_array(self) -> np.ndarray:
        """(C, H, W) array in ascending class order."""
        if not self.maps:
            return np.zeros((0,) + self.dims.shape)
        return np.stack([m.values for m in self.maps.values()])

    @classmethod
    def from_array(cls, classes, values) -> "ActivationStack":
        values = np.asarray(values, dtype=np.float64)
        dims = ImageDims.of(values)
        return cls(dims, {ClassId(c): ActivationMap(dims, ClassId(c), v) for c, v in zip(classes, values)})


@dataclass(frozen=True)
class BoundaryMap:
    dims: ImageDims
    values: np.ndarray

    def __post_init__(self):
        v = np.asarray(self.values, dtype=np.float64)
        if v.shape != self.dims.shape:
            raise ShapeError(f"values shape {v.shape} does not match dims {self.dims.shape}")
        if not (np.all(np.isfinite(v)) and v.min() >= 0.0 and v.max() <= 1.0):
            raise ValueError("boundary probabilities must lie in [0, 1]")
        object.__setattr__(self, "values", _frozen(v))

    @classmethod
    def from_array(cls, values) -> "BoundaryMap":
        values = np.asarray(values, dtype=np.float64)
        return cls(ImageDims.of(values), values)

    @classmethod
    def constant(cls, dims: ImageDims, value: float) -> "BoundaryMap":
        return cls(dims, np.full(dims.shape, float(value)))


@dataclass(frozen=True)
class LabelMask:
    dims: ImageDims
    values: np.ndarray

    def __post_init__(self):
        v = np.asarray(self.values)
        if v.shape != self.dims.shape:
            raise ShapeError(f"values shape {v.shape} does not match dims {self.dims.shape}")
        if v.size and not np.isin(v, VALID_LABEL_VALUES).all():
            bad = np.unique(v[~np.isin(v, VALID_LABEL_VALUES)])
            raise ValueError(f"invalid class ids in mask: {bad.tolist()}")
        object.__setattr__(self, "values", _frozen(v.astype(np.uint8)))

    @classmethod
    def from_array(cls, values) -> "LabelMask":
        values = np.asarray(values)
        return cls(ImageDims.of(values), values)

    @classmethod
    def filled(cls, dims: ImageDims, value: ClassId = ClassId.BACKGROUND) -> "LabelMask":
        return cls(dims, np.full(dims.shape, int(value), dtype=np.uint8))

    def __eq__(self, other):
        if not isinstance(other, LabelMask):
            return NotImplemented
        return self.dims == other.dims and np.array_equal(self.values, other.values)

    __hash__ = None


@dataclass(frozen=True)
class CrfParams:
    n_iters: int = 5
    w_smooth: float = 3.0
    theta_gamma: float = 3.0
    w_appearance: float = 5.0
    theta_alpha: float = 30.0
    theta_beta: float = 13.0

    def __post_init__(self):
        if self.n_iters < 0:
            raise ValueError("n_iters must be >= 0")
        if self.w_smooth < 0 or self.w_appearance < 0:
            raise ValueError("CRF kernel weights must be >= 0")
        if min(self.theta_gamma, self.theta_alpha, self.theta_beta) <= 0:
            raise ValueError("CRF kernel widths must be > 0")


@dataclass(frozen=True)
class PipelineConfig:
    epsilon: float = 0.3
    theta_fg: float = 0.3
    theta_bg: float = 0.05
    gamma: float = 5.0
    rw_beta: float = 4.0
    rw_iters: int = 8
    crf: CrfParams = field(default_factory=CrfParams)
    log_clamp: float = 1e-6

    def __post_init__(self):
        if not 0 < self.theta_bg < self.theta_fg <= 1:
            raise ValueError(
                f"thresholds must satisfy 0 < theta_bg < theta_fg <= 1 "
                f"(got theta_bg={self.theta_bg}, theta_fg={self.theta_fg})"
            )
        if not 0 < self.epsilon < 1:
            raise ValueError("epsilon must lie in (0, 1)")
        if self.gamma <= 0:
            raise ValueError("gamma must be positive")
        if self.rw_beta <= 0:
            raise ValueError("rw_beta must be positive")
        if self.rw_iters < 0:
            raise ValueError("rw_iters must be >= 0")
        if not 0 < self.log_clamp <= 0.01:
            raise ValueError("log_clamp must lie in (0, 0.01]")

    def with_crf(self, **kw) -> "PipelineConfig":
        return replace(self, crf=replace(self.crf, **kw))
