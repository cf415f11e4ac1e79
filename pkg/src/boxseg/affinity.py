"""Pixel-pair relations, line-of-sight affinity and the boundary cross-entropy loss.

Pairs are unordered and always stored as ``(i, j)`` with ``i < j`` in row-major
order. The segment between them is rasterised starting from ``i``, so the
"earliest pixel on the line" used to break argmax ties is well defined.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from functools import lru_cache
from typing import NamedTuple, Optional

import numpy as np
from scipy.special import expit

from .core import BoundaryMap, ClassId, ImageDims, LabelMask, PipelineConfig, pixel_coords


@dataclass(frozen=True)
class PixelPair:
    i: int
    j: int
    same: bool
    line: tuple[int, ...]

    def __post_init__(self):
        if self.i == self.j:
            raise ValueError("a pixel pair needs two distinct pixels")

    @property
    def polarity(self) -> str:
        return "same" if self.same else "different"


@dataclass(frozen=True)
class BoundaryFitConfig:
    steps: int = 300
    learning_rate: float = 50.0
    init_logit: float = -2.0
    seed: int = 0
    max_pairs: Optional[int] = 200_000

    def __post_init__(self):
        if self.steps < 0:
            raise ValueError("steps must be >= 0")
        if not self.learning_rate > 0:
            raise ValueError("learning_rate must be positive")
        if self.max_pairs is not None and self.max_pairs < 1:
            raise ValueError("max_pairs must be positive or None")


def bresenham(r0: int, c0: int, r1: int, c1: int) -> list[tuple[int, int]]:
    """Integer Bresenham segment from (r0, c0) to (r1, c1), both endpoints included."""
    dr, dc = abs(r1 - r0), abs(c1 - c0)
    sr = 1 if r1 >= r0 else -1
    sc = 1 if c1 >= c0 else -1
    out = []
    r, c = r0, c0
    if dc >= dr:
        err = 2 * dr - dc
        for _ in range(dc + 1):
            out.append((r, c))
            if err > 0:
                r += sr
                err -= 2 * dc
            err += 2 * dr
            c += sc
    else:
        err = 2 * dc - dr
        for _ in range(dr + 1):
            out.append((r, c))
            if err > 0:
                c += sc
                err -= 2 * dr
            err += 2 * dc
            r += sr
    return out


def rasterize_line(i: int, j: int, dims: ImageDims) -> list[int]:
    """Flat indices on the segment from pixel ``i`` to pixel ``j``.

    The segment is always drawn from the lower to the higher flat index and
    reversed when needed, so ``rasterize_line(j, i)`` is exactly the reverse of
    ``rasterize_line(i, j)``.
    """
    lo, hi = (i, j) if i <= j else (j, i)
    r0, c0 = pixel_coords(lo, dims)
    r1, c1 = pixel_coords(hi, dims)
    line = [r * dims.width + c for r, c in bresenham(r0, c0, r1, c1)]
    return line if i <= j else line[::-1]


@lru_cache(maxsize=32)
def _half_offsets(gamma: float) -> tuple[tuple[int, int, tuple[tuple[int, int], ...]], ...]:
    """Offsets (dr, dc) pointing forward in row-major order with length < gamma,
    each with its rasterised segment relative to the start pixel."""
    reach = int(math.ceil(gamma))
    out = []
    for dr in range(0, reach + 1):
        for dc in range(-reach, reach + 1):
            if dr == 0 and dc <= 0:
                continue
            if dr * dr + dc * dc < gamma * gamma:
                out.append((dr, dc, tuple(bresenham(0, 0, dr, dc))))
    return tuple(out)


def neighbor_pairs(dims: ImageDims, gamma: float) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """All unordered pixel pairs closer than ``gamma``.

    Returns ``(i, j, lines)`` sorted by ``(i, j)``; ``lines`` is an (n, L) index
    array padded by repeating ``j``.
    """
    if not gamma > 0:
        raise ValueError("gamma must be positive")
    H, W = dims.shape
    offsets = _half_offsets(float(gamma))
    L = max((len(seg) for _, _, seg in offsets), default=1)
    rows = np.arange(H)[:, None]
    cols = np.arange(W)[None, :]
    all_i, all_j, all_lines = [], [], []
    for dr, dc, seg in offsets:
        ok = (rows + dr < H) & (cols + dc >= 0) & (cols + dc < W)
        start = (rows * W + cols)[ok]
        if not start.size:
            continue
        rel = np.array([r * W + c for r, c in seg] + [dr * W + dc] * (L - len(seg)), dtype=np.int64)
        all_i.append(start)
        all_j.append(start + dr * W + dc)
        all_lines.append(start[:, None] + rel[None, :])
    if not all_i:
        empty = np.zeros(0, dtype=np.int64)
        return empty, empty, np.zeros((0, L), dtype=np.int64)
    i = np.concatenate(all_i).astype(np.int64)
    j = np.concatenate(all_j).astype(np.int64)
    lines = np.concatenate(all_lines)
    order = np.lexsort((j, i))
    return i[order], j[order], lines[order]


@dataclass(frozen=True, eq=False)
class PairSet:
    """Same-class and different-class pairs, stored as parallel arrays."""

    dims: ImageDims
    gamma: float
    i: np.ndarray
    j: np.ndarray
    same: np.ndarray
    lines: np.ndarray

    @property
    def n_pos(self) -> int:
        return int(self.same.sum())

    @property
    def n_neg(self) -> int:
        return int(self.same.size - self.same.sum())

    def __len__(self) -> int:
        return int(self.i.size)

    def _pairs(self, want_same: bool) -> list[PixelPair]:
        out = []
        for k in np.flatnonzero(self.same == want_same):
            line = rasterize_line(int(self.i[k]), int(self.j[k]), self.dims)
            out.append(PixelPair(int(self.i[k]), int(self.j[k]), want_same, tuple(line)))
        return out

    @property
    def pos(self) -> list[PixelPair]:
        return self._pairs(True)

    @property
    def neg(self) -> list[PixelPair]:
        return self._pairs(False)

    def index_pairs(self, same: bool) -> set[tuple[int, int]]:
        sel = self.same == same
        return set(zip(self.i[sel].tolist(), self.j[sel].tolist()))

    def subset(self, keep: np.ndarray) -> "PairSet":
        return PairSet(self.dims, self.gamma, self.i[keep], self.j[keep], self.same[keep], self.lines[keep])


def build_pair_sets(
    label: LabelMask,
    gamma: float,
    max_pairs: Optional[int] = None,
    seed: int = 0,
) -> PairSet:
    """Pairs closer than ``gamma`` split by label agreement; ignore pixels excluded.

    When ``max_pairs`` is set and exceeded, a uniform sample of that many pairs
    (drawn with ``seed``) is kept, preserving the sorted order.
    """
    if not gamma > 0:
        raise ValueError("gamma must be positive")
    i, j, lines = neighbor_pairs(label.dims, gamma)
    flat = label.values.ravel()
    ignore = int(ClassId.IGNORE)
    keep = (flat[i] != ignore) & (flat[j] != ignore)
    i, j, lines = i[keep], j[keep], lines[keep]
    if max_pairs is not None and i.size > max_pairs:
        rng = np.random.default_rng(seed)
        sel = np.sort(rng.choice(i.size, size=max_pairs, replace=False))
        i, j, lines = i[sel], j[sel], lines[sel]
    same = flat[i] == flat[j]
    return PairSet(label.dims, float(gamma), i, j, same, lines)


def affinity(b: BoundaryMap, pair: PixelPair) -> float:
    flat = b.values.ravel()
    return float(1.0 - flat[list(pair.line)].max())


class BoundaryLoss(NamedTuple):
    loss: float
    grad: np.ndarray
    dropped: tuple[str, ...] = ()


def _loss_and_grad(flat_b: np.ndarray, pairs: PairSet, log_clamp: float) -> tuple[float, np.ndarray, tuple[str, ...]]:
    n_pos, n_neg = pairs.n_pos, pairs.n_neg
    if n_pos == 0 and n_neg == 0:
        raise ValueError("boundary loss needs at least one pixel pair")
    vals = flat_b[pairs.lines]
    k = np.argmax(vals, axis=1)
    rows = np.arange(vals.shape[0])
    at = pairs.lines[rows, k]
    a = 1.0 - vals[rows, k]
    ac = np.clip(a, log_clamp, 1.0 - log_clamp)
    live = (a > log_clamp) & (a < 1.0 - log_clamp)
    pos = pairs.same

    loss = 0.0
    coef = np.zeros_like(a)
    dropped = []
    if n_pos:
        loss -= np.log(ac[pos]).sum() / n_pos
        coef[pos] = 1.0 / (ac[pos] * n_pos)
    else:
        dropped.append("pos")
    if n_neg:
        neg = ~pos
        loss -= np.log(1.0 - ac[neg]).sum() / n_neg
        coef[neg] = -1.0 / ((1.0 - ac[neg]) * n_neg)
    else:
        dropped.append("neg")
    grad = np.bincount(at, weights=np.where(live, coef, 0.0), minlength=flat_b.size)
    return float(loss), grad, tuple(dropped)


def boundary_loss(b: BoundaryMap, pairs: PairSet, log_clamp: float = 1e-6) -> BoundaryLoss:
    """Binary cross-entropy over pair affinities and its exact subgradient in B.

    Each pair only touches the pixel holding the maximum boundary value on its
    segment. An empty polarity drops its term; the dropped names are reported.
    """
    if b.dims != pairs.dims:
        raise ValueError(f"boundary dims {b.dims} != pair dims {pairs.dims}")
    loss, grad, dropped = _loss_and_grad(b.values.ravel(), pairs, log_clamp)
    return BoundaryLoss(loss, grad.reshape(b.dims.shape), dropped)


def fit_pairs(pairs: PairSet, cfg: BoundaryFitConfig, log_clamp: float = 1e-6, history: Optional[list] = None) -> BoundaryMap:
    """Gradient descent on per-pixel logits, B = sigmoid(z)."""
    z = np.full(pairs.dims.size, float(cfg.init_logit))
    for _ in range(cfg.steps):
        b = expit(z)
        loss, g, _ = _loss_and_grad(b, pairs, log_clamp)
        if history is not None:
            history.append(loss)
        z -= cfg.learning_rate * g * b * (1.0 - b)
    return BoundaryMap(pairs.dims, expit(z).reshape(pairs.dims.shape))


def fit_boundary_map(
    label: LabelMask,
    cfg: BoundaryFitConfig = BoundaryFitConfig(),
    pcfg: PipelineConfig = PipelineConfig(),
    history: Optional[list] = None,
) -> BoundaryMap:
    pairs = build_pair_sets(label, pcfg.gamma, max_pairs=cfg.max_pairs, seed=cfg.seed)
    if pairs.n_pos == 0 or pairs.n_neg == 0:
        raise ValueError(
            f"label mask yields {pairs.n_pos} same-class and {pairs.n_neg} different-class pairs; need both"
        )
    return fit_pairs(pairs, cfg, pcfg.log_clamp, history)




def near_tie_pixels(b: BoundaryMap, pairs: PairSet, h: float) -> np.ndarray:
    """Pixels where a perturbation of size ``h`` could change some segment's argmax.

    The loss is only differentiable away from these points, so finite-difference
    audits skip them.
    """
    flat = b.values.ravel()
    vals = flat[pairs.lines]
    rows = np.arange(vals.shape[0])
    top_at = pairs.lines[rows, np.argmax(vals, axis=1)]
    top = vals[rows, np.argmax(vals, axis=1)]
    others = np.where(pairs.lines == top_at[:, None], -np.inf, vals)
    second = others.max(axis=1)
    close = (top - second) < 2 * h
    risky = close[:, None] & (vals >= top[:, None] - 2 * h)
    mask = np.zeros(flat.size, dtype=bool)
    mask[pairs.lines[risky]] = True
    return mask.reshape(b.dims.shape)


def gradient_check(seed: int = 0, size: int = 16, gamma: float = 5.0, h: float = 1e-4,
                   log_clamp: float = 1e-6, max_pixels: int = 256) -> float:
    """Max relative error between the analytic boundary-loss gradient and central
    differences on a random 3-class mask and random boundary map."""
    if not 1 <= size <= 64:
        raise ValueError(f"size must lie in [1, 64], got {size}")
    rng = np.random.default_rng(seed)
    label = LabelMask.from_array(rng.integers(0, 3, size=(size, size)).astype(np.uint8))
    pairs = build_pair_sets(label, gamma)
    if pairs.n_pos == 0 or pairs.n_neg == 0:
        raise ValueError(f"a {size}x{size} grid yields no mixed pairs at gamma={gamma}")
    b = BoundaryMap.from_array(rng.uniform(0.05, 0.95, size=(size, size)))
    _, grad, _ = boundary_loss(b, pairs, log_clamp)
    candidates = np.flatnonzero(~near_tie_pixels(b, pairs, h).ravel())
    if candidates.size > max_pixels:
        candidates = np.sort(rng.choice(candidates, size=max_pixels, replace=False))
    flat = b.values.ravel().copy()
    worst = 0.0
    for m in candidates:
        orig = flat[m]
        flat[m] = orig + h
        up, _, _ = _loss_and_grad(flat, pairs, log_clamp)
        flat[m] = orig - h
        down, _, _ = _loss_and_grad(flat, pairs, log_clamp)
        flat[m] = orig
        fd = (up - down) / (2 * h)
        an = grad.ravel()[m]
        scale = max(abs(fd), abs(an))
        if scale > 0:
            worst = max(worst, abs(fd - an) / scale)
    return worst
