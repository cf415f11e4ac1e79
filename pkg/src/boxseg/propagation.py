"""Boundary-gated random walk, dense CRF post-processing and the test-time segmenter."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Mapping, Optional, Sequence

import numpy as np
import scipy.sparse as sp

from .attention import GaussianParams, gaussian_attention
from .core import (
    ActivationMap,
    ActivationStack,
    BBox,
    BoundaryMap,
    ClassId,
    CrfParams,
    ImageDims,
    InvalidBoxError,
    LabelMask,
    PipelineConfig,
    ShapeError,
    clamp_box,
)
from .affinity import neighbor_pairs
from .fusion import assemble_stack, fuse_box

# direct O(N^2) message passing beyond this many pixels needs force_large
CRF_MAX_PIXELS = 256 * 256
_CRF_BLOCK = 512


class ImageTooLargeError(ValueError):
    pass


@dataclass(frozen=True, eq=False)
class TransitionMatrix:
    dims: ImageDims
    matrix: sp.csr_matrix

    def row_sums(self) -> np.ndarray:
        return np.asarray(self.matrix.sum(axis=1)).ravel()

    def apply(self, v: np.ndarray) -> np.ndarray:
        return self.matrix @ v


def build_transition(b: BoundaryMap, gamma: float, beta: float) -> TransitionMatrix:
    """Row-stochastic matrix with A_ij = a_ij ** beta for pixels closer than gamma, A_ii = 1."""
    if not gamma > 0:
        raise ValueError("gamma must be positive")
    if beta < 1:
        raise ValueError("beta must be >= 1")
    n = b.dims.size
    i, j, lines = neighbor_pairs(b.dims, gamma)
    flat = b.values.ravel()
    a = 1.0 - flat[lines].max(axis=1) if i.size else np.zeros(0)
    w = a**beta
    diag = np.arange(n)
    rows = np.concatenate([i, j, diag])
    cols = np.concatenate([j, i, diag])
    data = np.concatenate([w, w, np.ones(n)])
    A = sp.csr_matrix((data, (rows, cols)), shape=(n, n))
    A.sort_indices()
    row_sum = np.add.reduceat(A.data, A.indptr[:-1])
    A.data /= np.repeat(row_sum, np.diff(A.indptr))
    return TransitionMatrix(b.dims, A)


def random_walk_refine(s: ActivationStack, t: TransitionMatrix, iters: int) -> ActivationStack:
    if s.dims != t.dims:
        raise ShapeError(f"stack dims {s.dims} != transition dims {t.dims}")
    if iters < 0:
        raise ValueError("iters must be >= 0")
    if iters == 0 or not len(s):
        return s
    v = s.as_array().reshape(len(s), -1).T
    for _ in range(iters):
        v = t.apply(v)
    refined = v.T.reshape((len(s),) + s.dims.shape)
    return ActivationStack.from_array(s.classes, refined)


def _as_features(image: np.ndarray) -> np.ndarray:
    img = np.asarray(image, dtype=np.float64)
    if img.ndim == 2:
        return img.reshape(-1, 1)
    if img.ndim == 3:
        return img.reshape(-1, img.shape[2])
    raise ShapeError(f"image must be (H, W) or (H, W, C), got {img.shape}")


def _crf_messages(q: np.ndarray, pos: np.ndarray, feat: np.ndarray, params: CrfParams) -> np.ndarray:
    """Sum over j != i of k(i, j) * Q(j) for every pixel i."""
    n = q.shape[0]
    out = np.empty_like(q)
    for start in range(0, n, _CRF_BLOCK):
        stop = min(start + _CRF_BLOCK, n)
        d_pos = ((pos[start:stop, None, :] - pos[None, :, :]) ** 2).sum(-1)
        d_feat = ((feat[start:stop, None, :] - feat[None, :, :]) ** 2).sum(-1)
        k = params.w_smooth * np.exp(-d_pos / (2 * params.theta_gamma**2))
        k += params.w_appearance * np.exp(
            -d_pos / (2 * params.theta_alpha**2) - d_feat / (2 * params.theta_beta**2)
        )
        k[np.arange(stop - start), np.arange(start, stop)] = 0.0
        out[start:stop] = np.einsum("ij,jc->ic", k, q)
    return out


def crf_refine(
    probs: np.ndarray,
    image: Optional[np.ndarray],
    params: CrfParams = CrfParams(),
    classes: Optional[Sequence[ClassId]] = None,
    force_large: bool = False,
) -> LabelMask:
    """Mean-field inference for a fully connected CRF with Potts compatibility.

    ``probs`` is (C, H, W) and sums to one over C; ``classes`` names each channel
    (defaults to 0..C-1). Messages are computed exactly, pixel against pixel.
    """
    probs = np.asarray(probs, dtype=np.float64)
    if probs.ndim != 3:
        raise ShapeError(f"probabilities must be (C, H, W), got {probs.shape}")
    C = probs.shape[0]
    dims = ImageDims.of(probs)
    if not np.allclose(probs.sum(axis=0), 1.0, rtol=0, atol=1e-6) or probs.min() < 0:
        raise ValueError("per-pixel class probabilities must be non-negative and sum to 1")
    lut = np.array([int(ClassId(c)) for c in (classes if classes is not None else range(C))], dtype=np.uint8)
    if lut.size != C:
        raise ValueError(f"{lut.size} class ids for {C} probability channels")

    if params.n_iters == 0 or (params.w_smooth == 0 and params.w_appearance == 0):
        return LabelMask(dims, lut[np.argmax(probs, axis=0)])
    if dims.size > CRF_MAX_PIXELS and not force_large:
        raise ImageTooLargeError(
            f"{dims.height}x{dims.width} image exceeds the exact-CRF limit of {CRF_MAX_PIXELS} pixels"
        )
    if image is None:
        raise ValueError("CRF with pairwise terms needs an intensity image")
    feat = _as_features(image)
    if feat.shape[0] != dims.size:
        raise ShapeError(f"image does not match probability grid {dims.shape}")

    rr, cc = np.meshgrid(np.arange(dims.height), np.arange(dims.width), indexing="ij")
    pos = np.stack([rr.ravel(), cc.ravel()], axis=1).astype(np.float64)
    unary = np.log(np.clip(probs.reshape(C, -1).T, 1e-12, None))
    q = probs.reshape(C, -1).T.copy()
    for _ in range(params.n_iters):
        # Potts: exp(-sum_{c' != c} m_c') is proportional to exp(m_c)
        logits = unary + _crf_messages(q, pos, feat, params)
        logits -= logits.max(axis=1, keepdims=True)
        q = np.exp(logits)
        q /= q.sum(axis=1, keepdims=True)
    return LabelMask(dims, lut[np.argmax(q, axis=1).reshape(dims.shape)])


def probabilities_with_background(s: ActivationStack) -> tuple[tuple[ClassId, ...], np.ndarray]:
    """Prepend a background channel 1 - max(fg) and normalise each pixel to sum 1."""
    fg = s.as_array()
    bg = 1.0 - (fg.max(axis=0) if len(s) else np.zeros(s.dims.shape))
    stack = np.concatenate([bg[None], fg], axis=0)
    stack = np.clip(stack, 0.0, None)
    stack /= stack.sum(axis=0, keepdims=True)
    return (ClassId.BACKGROUND,) + s.classes, stack


def segment(
    boxes: Sequence[BBox],
    cams: Optional[Mapping[ClassId, ActivationMap]],
    b: BoundaryMap,
    image: Optional[np.ndarray],
    cfg: PipelineConfig = PipelineConfig(),
    gauss: GaussianParams = GaussianParams(),
    predicted: Optional[set] = None,
    force_large: bool = False,
) -> LabelMask:
    """Boxes (plus optional CAMs) -> fused stack -> random walk -> CRF -> labels.

    Without CAMs every box falls back to its Gaussian attention map. When CAMs
    are given the predicted class set defaults to the classes they cover.
    """
    dims = b.dims
    fused = []
    for box in boxes:
        try:
            box = clamp_box(box, dims)
        except InvalidBoxError:
            continue
        cam = cams.get(box.class_id) if cams else None
        pred = predicted if predicted is not None else (set(cams) if cams else set())
        fused.append(fuse_box(box, box.class_id, pred, cam, gaussian_attention(box, dims, gauss), cfg.epsilon))
    stack = assemble_stack(fused, dims)
    if not len(stack):
        return LabelMask.filled(dims)
    t = build_transition(b, cfg.gamma, cfg.rw_beta)
    refined = random_walk_refine(stack, t, cfg.rw_iters)
    classes, probs = probabilities_with_background(refined)
    return crf_refine(probs, image, cfg.crf, classes=classes, force_large=force_large)
