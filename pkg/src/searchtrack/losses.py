"""Gaussian target rendering and the focal / size losses."""

from __future__ import annotations

import math
from typing import Iterable, Sequence, Tuple

import numpy as np

from . import numkernel as nk
from .numkernel import Tensor

ALPHA = 2
BETA = 4
EPS = 1e-6
SIZE_WEIGHT = 0.1


def gaussian_radius(size: Tuple[float, float], min_overlap: float = 0.7) -> float:
    """CornerNet/CenterNet radius heuristic, floored and clamped to >= 1."""
    h, w = size
    a1 = 1.0
    b1 = h + w
    c1 = w * h * (1 - min_overlap) / (1 + min_overlap)
    r1 = (b1 + math.sqrt(b1 * b1 - 4 * a1 * c1)) / 2

    a2 = 4.0
    b2 = 2 * (h + w)
    c2 = (1 - min_overlap) * w * h
    r2 = (b2 + math.sqrt(b2 * b2 - 4 * a2 * c2)) / 2

    a3 = 4 * min_overlap
    b3 = -2 * min_overlap * (h + w)
    c3 = (min_overlap - 1) * w * h
    r3 = (b3 + math.sqrt(b3 * b3 - 4 * a3 * c3)) / 2

    return float(max(1, math.floor(max(0.0, min(r1, r2, r3)))))


def render_gaussian(target: np.ndarray, center: Tuple[int, int], radius: float) -> None:
    """Max-composite exp(-d^2 / (2 sigma^2)), sigma = radius / 3, into ``target`` (H x W)."""
    h, w = target.shape
    cx, cy = int(center[0]), int(center[1])
    if not (0 <= cx < w and 0 <= cy < h):
        raise IndexError(f"gaussian center ({cx}, {cy}) outside the {w}x{h} grid")
    sigma = radius / 3.0
    dx2 = (np.arange(w, dtype=np.float64) - cx) ** 2
    dy2 = (np.arange(h, dtype=np.float64) - cy) ** 2
    g = np.exp(-(dy2[:, None] + dx2[None, :]) / (2.0 * sigma * sigma))
    g[cy, cx] = 1.0
    np.maximum(target, g, out=target)


def _focal_sum(pred: Tensor, target: np.ndarray) -> Tensor:
    if pred.shape != target.shape:
        raise ValueError(f"focal loss shape mismatch: prediction {pred.shape} vs target {target.shape}")
    p = nk.clamp(pred, EPS, 1.0 - EPS)
    pos = (target == 1.0).astype(np.float64)
    neg_w = (1.0 - target) ** BETA * (1.0 - pos)
    pos_term = nk.tsum(((1.0 - p) ** ALPHA) * nk.log(p) * pos)
    neg_term = nk.tsum((p**ALPHA) * nk.log(1.0 - p) * neg_w)
    return -(pos_term + neg_term)


def heatmap_focal_loss(heatmap: Tensor, target: np.ndarray, num_objects: int) -> Tensor:
    """Penalty-reduced pixelwise focal loss normalized by the object count."""
    return _focal_sum(heatmap, np.asarray(target, dtype=np.float64)) / max(1, int(num_objects))


def search_focal_loss(response: Tensor, target: np.ndarray) -> Tensor:
    """Unnormalized focal loss of one response map against its Gaussian target."""
    return _focal_sum(response, np.asarray(target, dtype=np.float64))


def search_loss(pairs: Sequence[Tuple[Tensor, np.ndarray]]) -> Tensor:
    total = Tensor(0.0)
    for r, t in pairs:
        total = total + search_focal_loss(r, t)
    return total


def size_loss(size_map: Tensor, objects: Sequence[Tuple[Tuple[int, int], Tuple[float, float]]]) -> Tensor:
    """Mean L1 error of the size map at object center cells; ``objects`` is [((x, y), (h, w))]."""
    if not objects:
        return Tensor(0.0)
    xs = np.array([c[0] for c, _ in objects], dtype=np.intp)
    ys = np.array([c[1] for c, _ in objects], dtype=np.intp)
    _, h, w = size_map.shape
    if np.any((xs < 0) | (xs >= w) | (ys < 0) | (ys >= h)):
        raise IndexError("size_loss: object center outside the grid")
    pred = nk.index(size_map, (slice(None), ys, xs))  # 2 x N
    tgt = np.array([s for _, s in objects], dtype=np.float64).T
    return nk.tsum(nk.absolute(pred - tgt)) / len(objects)


def total_loss(
    heatmap: Tensor,
    heatmap_target: np.ndarray,
    num_objects: int,
    search_pairs: Sequence[Tuple[Tensor, np.ndarray]],
    size_map: Tensor,
    size_objects,
    size_weight: float = SIZE_WEIGHT,
) -> Tensor:
    return (
        heatmap_focal_loss(heatmap, heatmap_target, num_objects)
        + search_loss(search_pairs)
        + size_loss(size_map, size_objects) * size_weight
    )
