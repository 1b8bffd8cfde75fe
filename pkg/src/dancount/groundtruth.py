"""Ground-truth density, count and class maps built from head annotations."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Iterable, Optional

import numpy as np
from scipy.spatial import cKDTree

from .errors import ValidationError

DEFAULT_SIGMA = 4.0
ADAPTIVE_K = 3
ADAPTIVE_BETA = 0.3
MIN_SIGMA = 0.5


@dataclass
class HeadAnnotations:
    """Head centres in pixel coordinates of an image of ``size`` = (width, height).

    Pixel column ``c`` covers ``[c, c + 1)``; points must lie in
    ``[0, width) x [0, height)``.
    """

    points: np.ndarray
    size: tuple[int, int]

    def __post_init__(self):
        pts = np.asarray(self.points, dtype=np.float64).reshape(-1, 2)
        w, h = self.size
        if w <= 0 or h <= 0:
            raise ValidationError(f"image size must be positive, got {self.size}")
        bad = ~((pts[:, 0] >= 0) & (pts[:, 0] < w) & (pts[:, 1] >= 0) & (pts[:, 1] < h))
        if bad.any():
            i = int(np.flatnonzero(bad)[0])
            raise ValidationError(f"point {i} {tuple(pts[i])} outside [0,{w})x[0,{h})")
        self.points = pts
        self.size = (int(w), int(h))

    def __len__(self) -> int:
        return len(self.points)

    def flipped(self) -> "HeadAnnotations":
        """Horizontal mirror: x -> width - x (kept inside the half-open range)."""
        w, _ = self.size
        pts = self.points.copy()
        pts[:, 0] = np.minimum(w - pts[:, 0], np.nextafter(w, 0))
        return HeadAnnotations(pts, self.size)


@dataclass(frozen=True)
class SigmaMode:
    """Either a fixed spread or geometry-adaptive (beta * mean kNN distance)."""

    kind: str = "fixed"
    sigma: float = DEFAULT_SIGMA
    k: int = ADAPTIVE_K
    beta: float = ADAPTIVE_BETA

    def __post_init__(self):
        if self.kind not in ("fixed", "adaptive"):
            raise ValidationError(f"sigma mode must be fixed or adaptive, got {self.kind!r}")
        if self.sigma <= 0 or self.beta <= 0 or self.k < 1:
            raise ValidationError(f"invalid sigma parameters {self}")


def adaptive_sigmas(points: np.ndarray, k: int = ADAPTIVE_K, beta: float = ADAPTIVE_BETA) -> np.ndarray:
    """Per-head spread ``beta * mean distance to the k nearest other heads``."""
    pts = np.asarray(points, dtype=np.float64).reshape(-1, 2)
    if len(pts) < 2:
        raise ValidationError("geometry-adaptive spread needs at least two heads")
    kk = min(k, len(pts) - 1)
    dist, _ = cKDTree(pts).query(pts, k=kk + 1)
    return np.maximum(beta * dist[:, 1:].mean(axis=1), MIN_SIGMA)


def _kernel_1d(center: float, sigma: float):
    """Unit-mass Gaussian sampled at pixel centres within 3 sigma; returns (start, weights)."""
    radius = 3.0 * sigma
    lo = int(np.floor(center - radius))
    hi = int(np.ceil(center + radius))
    idx = np.arange(lo, hi + 1)
    offs = idx + 0.5 - center
    keep = np.abs(offs) <= radius
    idx, offs = idx[keep], offs[keep]
    if idx.size == 0:
        idx = np.array([int(np.floor(center))])
        offs = idx + 0.5 - center
    g = np.exp(-0.5 * (offs / sigma) ** 2)
    return idx, g / g.sum()


def _splat(out: np.ndarray, x: float, y: float, sigma: float) -> None:
    h, w = out.shape
    xi, gx = _kernel_1d(x, sigma)
    yi, gy = _kernel_1d(y, sigma)
    mx = (xi >= 0) & (xi < w)
    my = (yi >= 0) & (yi < h)
    if not mx.any() or not my.any():
        return
    out[np.ix_(yi[my], xi[mx])] += np.outer(gy[my], gx[mx])


def density_map(ann: HeadAnnotations, out_size=None, sigma_mode: Optional[SigmaMode] = None) -> np.ndarray:
    """Sum of unit-mass truncated Gaussians, one per head.

    ``out_size`` is (width, height) or a single int for square maps; the
    points are rescaled per axis from ``ann.size`` when it differs. Mass
    falling outside the map is dropped, not renormalised.
    """
    mode = sigma_mode or SigmaMode()
    if out_size is None:
        out_size = ann.size
    if isinstance(out_size, (int, np.integer)):
        out_size = (int(out_size), int(out_size))
    w, h = out_size
    if w <= 0 or h <= 0:
        raise ValidationError(f"output size must be positive, got {out_size}")
    pts = ann.points * np.array([w / ann.size[0], h / ann.size[1]])
    out = np.zeros((h, w), dtype=np.float64)
    if len(pts) == 0:
        return out
    if mode.kind == "adaptive" and len(pts) >= 2:
        sigmas = adaptive_sigmas(pts, mode.k, mode.beta)
    else:
        sigmas = np.full(len(pts), mode.sigma)
    for (x, y), s in zip(pts, sigmas):
        _splat(out, x, y, s)
    return out


def _grid_blocks(shape, grid) -> tuple[int, int]:
    h, w = shape[-2:]
    rows, cols = grid
    if rows < 1 or cols < 1 or h % rows or w % cols:
        raise ValidationError(f"map {h}x{w} is not divisible by grid {rows}x{cols}")
    return h // rows, w // cols


def count_map(density: np.ndarray, grid: tuple[int, int]) -> np.ndarray:
    """Per-cell sums of the density map (works on (..., H, W) stacks)."""
    d = np.asarray(density, dtype=np.float64)
    bh, bw = _grid_blocks(d.shape, grid)
    rows, cols = grid
    return d.reshape(*d.shape[:-2], rows, bh, cols, bw).sum(axis=(-3, -1))


def class_map(counts: np.ndarray, th: float) -> np.ndarray:
    """1 where the cell count exceeds ``th``, else 0."""
    if th < 0:
        raise ValidationError(f"threshold must be non-negative, got {th}")
    return (np.asarray(counts) > th).astype(np.int64)


def calibrate_threshold(count_maps: Iterable[np.ndarray], override: Optional[float] = None) -> float:
    """Median of all strictly positive cell counts pooled over the training maps."""
    if override is not None:
        return float(override)
    cells = [np.asarray(c, dtype=np.float64).ravel() for c in count_maps]
    pooled = np.concatenate(cells) if cells else np.zeros(0)
    positive = pooled[pooled > 0]
    if positive.size == 0:
        raise ValidationError("cannot calibrate a threshold on an all-zero corpus")
    return float(np.median(positive))
