"""Per-class activation evidence: class activation maps and box Gaussian attention."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np

from .core import (
    ActivationMap,
    BBox,
    ClassId,
    ImageDims,
    ShapeError,
    clamp_box,
    normalize_activation,
)


class MissingClassError(KeyError):
    pass


@dataclass(frozen=True, eq=False)
class FeatureStack:
    """K feature channels of shape (H', W') from the last conv layer of a classifier."""

    values: np.ndarray

    def __post_init__(self):
        v = np.asarray(self.values, dtype=np.float64)
        if v.ndim != 3 or v.shape[0] < 1:
            raise ShapeError(f"feature stack must be (K, H, W) with K >= 1, got {v.shape}")
        if not np.all(np.isfinite(v)):
            raise ValueError("feature values must be finite")
        object.__setattr__(self, "values", v)

    @property
    def depth(self) -> int:
        return self.values.shape[0]

    @property
    def dims(self) -> ImageDims:
        return ImageDims.of(self.values)


@dataclass(frozen=True, eq=False)
class ClassifierWeights:
    weights: Mapping[ClassId, Sequence[float]]
    predicted: frozenset = frozenset()
    scores: Mapping[ClassId, float] = field(default_factory=dict)

    def __post_init__(self):
        w = {ClassId(c): np.asarray(v, dtype=np.float64).ravel() for c, v in self.weights.items()}
        lengths = {len(v) for v in w.values()}
        if len(lengths) > 1:
            raise ShapeError(f"weight vectors differ in length: {sorted(lengths)}")
        object.__setattr__(self, "weights", w)
        object.__setattr__(self, "predicted", frozenset(ClassId(c) for c in self.predicted))

    @property
    def classes(self) -> tuple[ClassId, ...]:
        return tuple(self.weights)


@dataclass(frozen=True)
class GaussianParams:
    rho: float = 0.0
    sigma_scale: float = 1.0

    def __post_init__(self):
        if not abs(self.rho) < 1:
            raise ValueError("rho must satisfy |rho| < 1")
        if not self.sigma_scale > 0:
            raise ValueError("sigma_scale must be positive")


def compute_cam(f: FeatureStack, w: ClassifierWeights, c: ClassId) -> ActivationMap:
    """Weighted channel sum of the feature stack for class ``c``, ReLU'd and peak-normalised."""
    c = ClassId(c)
    if c not in w.weights:
        raise MissingClassError(f"class {c.name} not in classifier weights")
    wc = w.weights[c]
    if wc.shape[0] != f.depth:
        raise ShapeError(f"weight length {wc.shape[0]} != feature depth {f.depth}")
    raw = np.tensordot(wc, f.values, axes=(0, 0))
    return ActivationMap(f.dims, c, normalize_activation(raw))


def _interp_axis(n_in: int, n_out: int) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    if n_out == 1 or n_in == 1:
        pos = np.zeros(n_out)
    else:
        pos = np.arange(n_out) * ((n_in - 1) / (n_out - 1))
    lo = np.clip(np.floor(pos).astype(int), 0, n_in - 1)
    hi = np.minimum(lo + 1, n_in - 1)
    return lo, hi, pos - lo


def resize_bilinear(m: ActivationMap, target: ImageDims) -> ActivationMap:
    """Bilinear resampling with corner-aligned sample grids."""
    v = m.values
    if m.dims == target:
        return m
    r0, r1, fr = _interp_axis(m.dims.height, target.height)
    c0, c1, fc = _interp_axis(m.dims.width, target.width)
    top = v[r0][:, c0] * (1 - fc) + v[r0][:, c1] * fc
    bot = v[r1][:, c0] * (1 - fc) + v[r1][:, c1] * fc
    out = top * (1 - fr)[:, None] + bot * fr[:, None]
    # keep results inside the input range despite rounding
    out = np.clip(out, v.min(), v.max())
    return ActivationMap(target, m.class_id, out)


def multiscale_cam(maps: Sequence[ActivationMap], target: ImageDims) -> ActivationMap:
    """Average CAMs computed at several input scales, then renormalise to peak 1."""
    if not maps:
        raise ValueError("multiscale_cam needs at least one map")
    classes = {m.class_id for m in maps}
    if len(classes) != 1:
        raise ValueError(f"maps belong to several classes: {sorted(int(c) for c in classes)}")
    acc = np.zeros(target.shape)
    for m in maps:
        acc += resize_bilinear(m, target).values
    acc /= len(maps)
    return ActivationMap(target, maps[0].class_id, normalize_activation(acc))


def gaussian_attention(b: BBox, dims: ImageDims, p: GaussianParams = GaussianParams()) -> ActivationMap:
    """Bivariate Gaussian centred on the box, evaluated at every pixel centre.

    sigma_x = sigma_scale * w, sigma_y = sigma_scale * h. The density constant is
    dropped so the value at the box centre is exactly 1.
    """
    clamp_box(b, dims)
    mu_x, mu_y = b.center
    sx, sy = p.sigma_scale * b.w, p.sigma_scale * b.h
    dx = (np.arange(dims.width) + 0.5 - mu_x) / sx
    dy = (np.arange(dims.height) + 0.5 - mu_y) / sy
    quad = dx[None, :] ** 2 - 2.0 * p.rho * dy[:, None] * dx[None, :] + dy[:, None] ** 2
    g = np.exp(-quad / (2.0 * (1.0 - p.rho**2)))
    return ActivationMap(dims, b.class_id, g)
