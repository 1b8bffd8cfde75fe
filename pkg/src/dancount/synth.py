"""Procedural crowd images with point annotations.

Each image is either sparse (5-30 heads spread uniformly) or dense
(200-800 heads drawn from a 2-component spatial Gaussian mixture). Heads
are dark Gaussian splats whose radius shrinks with the distance to the
nearest neighbour, over a low-frequency textured background. The
``shifted`` style changes background tone, head size and contrast and is
used as a transfer target.
"""

from __future__ import annotations

import os
from dataclasses import dataclass

import numpy as np
from scipy.spatial import cKDTree

from .annotations import write_annotations
from .errors import ValidationError
from .groundtruth import HeadAnnotations
from .imageio import ensure_dir, write_ppm

LOW_RANGE = (5, 30)
HIGH_RANGE = (200, 800)
HIGH_PROBABILITY = 0.6
TEST_FRACTION = 0.25
MANIFEST = "manifest.txt"


@dataclass(frozen=True)
class Style:
    bg_level: tuple[float, float]
    radius_gain: float
    radius_max: float
    contrast: tuple[float, float]
    tint: tuple[float, float, float]


SOURCE_STYLE = Style((0.55, 0.8), 0.35, 4.5, (0.6, 0.85), (0.25, 0.2, 0.15))
SHIFTED_STYLE = Style((0.35, 0.55), 0.5, 6.5, (0.35, 0.55), (0.1, 0.25, 0.3))


@dataclass
class SynthImage:
    rgb: np.ndarray  # (H, W, 3) uint8
    annotations: HeadAnnotations
    regime: str


def _head_positions(rng, size: int, regime: str) -> np.ndarray:
    margin = 2.0
    if regime == "low":
        n = int(rng.integers(LOW_RANGE[0], LOW_RANGE[1] + 1))
        return rng.uniform(margin, size - margin, size=(n, 2))
    n = int(rng.integers(HIGH_RANGE[0], HIGH_RANGE[1] + 1))
    centers = rng.uniform(0.25 * size, 0.75 * size, size=(2, 2))
    spreads = rng.uniform(0.15 * size, 0.3 * size, size=2)
    w0 = rng.uniform(0.3, 0.7)
    pts = np.empty((0, 2))
    while len(pts) < n:
        m = n - len(pts)
        comp = (rng.random(m) >= w0).astype(int)
        cand = centers[comp] + rng.normal(size=(m, 2)) * spreads[comp, None]
        ok = (cand >= margin).all(axis=1) & (cand < size - margin).all(axis=1)
        pts = np.vstack([pts, cand[ok]])
    return pts[:n]


def _background(rng, size: int, style: Style) -> np.ndarray:
    yy, xx = np.mgrid[0:size, 0:size] / size
    img = np.empty((size, size, 3))
    level = rng.uniform(*style.bg_level)
    for c in range(3):
        tex = np.zeros((size, size))
        for _ in range(3):
            fx, fy = rng.uniform(0.5, 4.0, size=2)
            ph = rng.uniform(0, 2 * np.pi)
            tex += np.sin(2 * np.pi * (fx * xx + fy * yy) + ph)
        img[:, :, c] = level + rng.uniform(-0.05, 0.05) + 0.04 * tex
    img += rng.normal(0.0, 0.03, size=img.shape)
    return img


def _render_heads(rng, img: np.ndarray, pts: np.ndarray, style: Style) -> None:
    size = img.shape[0]
    if len(pts) > 1:
        d, _ = cKDTree(pts).query(pts, k=2)
        nn = d[:, 1]
    else:
        nn = np.full(len(pts), np.inf)
    radii = np.clip(style.radius_gain * nn, 1.0, style.radius_max)
    tint = np.asarray(style.tint)
    for (x, y), r in zip(pts, radii):
        a = rng.uniform(*style.contrast)
        ext = int(np.ceil(3 * r))
        x0, x1 = max(0, int(x) - ext), min(size, int(x) + ext + 1)
        y0, y1 = max(0, int(y) - ext), min(size, int(y) + ext + 1)
        yy, xx = np.mgrid[y0:y1, x0:x1]
        g = np.exp(-((xx + 0.5 - x) ** 2 + (yy + 0.5 - y) ** 2) / (2 * r * r))
        patch = img[y0:y1, x0:x1]
        patch *= 1.0 - a * g[:, :, None]
        patch += (a * 0.3) * g[:, :, None] * tint


def synth_image(seed: int, index: int, size: int = 256, shifted: bool = False) -> SynthImage:
    rng = np.random.default_rng([seed, index, int(shifted)])
    regime = "high" if rng.random() < HIGH_PROBABILITY else "low"
    style = SHIFTED_STYLE if shifted else SOURCE_STYLE
    pts = _head_positions(rng, size, regime)
    img = _background(rng, size, style)
    _render_heads(rng, img, pts, style)
    rgb = np.clip(np.rint(img * 255.0), 0, 255).astype(np.uint8)
    return SynthImage(rgb, HeadAnnotations(pts, (size, size)), regime)


def synth_images(n: int, seed: int, size: int = 256, shifted: bool = False) -> list[SynthImage]:
    if n < 1:
        raise ValidationError(f"need at least one image, got {n}")
    return [synth_image(seed, i, size, shifted) for i in range(n)]


def split_of(index: int, n: int) -> str:
    n_test = int(round(n * TEST_FRACTION))
    return "test" if index >= n - n_test else "train"


def synth_corpus(out_dir, n: int, seed: int, size: int = 256, shifted: bool = False) -> str:
    """Write images, annotations and a manifest; returns the manifest path."""
    ensure_dir(os.path.join(out_dir, "images"))
    ensure_dir(os.path.join(out_dir, "annotations"))
    rows = []
    for i, item in enumerate(synth_images(n, seed, size, shifted)):
        img_rel = f"images/img_{i:04d}.ppm"
        ann_rel = f"annotations/img_{i:04d}.txt"
        write_ppm(os.path.join(out_dir, img_rel), item.rgb)
        write_annotations(item.annotations, os.path.join(out_dir, ann_rel))
        rows.append(f"{img_rel} {ann_rel} {split_of(i, n)} {item.regime}")
    path = os.path.join(out_dir, MANIFEST)
    with open(path, "w", encoding="ascii") as fh:
        fh.write("\n".join(rows) + "\n")
    return path
