"""Aspect-preserving resize to the square network input with zero padding."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np

from .errors import ValidationError
from .groundtruth import HeadAnnotations


@dataclass(frozen=True)
class PreprocessTransform:
    scale: float
    pad_left: int
    pad_top: int
    target_size: int
    content_size: tuple[int, int]  # (width, height) of the resized image

    def map_points(self, points: np.ndarray) -> np.ndarray:
        pts = np.asarray(points, dtype=np.float64).reshape(-1, 2) * self.scale
        pts[:, 0] += self.pad_left
        pts[:, 1] += self.pad_top
        # rounding can push x*scale onto the open upper bound
        limit = np.nextafter(float(self.target_size), 0.0)
        return np.minimum(pts, limit)


def make_transform(width: int, height: int, target: int) -> PreprocessTransform:
    if width <= 0 or height <= 0:
        raise ValidationError(f"cannot preprocess zero-extent image {width}x{height}")
    scale = min(target / width, target / height)
    cw = min(target, max(1, int(round(width * scale))))
    ch = min(target, max(1, int(round(height * scale))))
    return PreprocessTransform(scale, 0, 0, target, (cw, ch))


def resize_bilinear(img: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    """Bilinear resample of (..., H, W) with half-pixel centre alignment."""
    h, w = img.shape[-2:]
    if (h, w) == (out_h, out_w):
        return img.copy()

    def axis(n_in, n_out):
        src = (np.arange(n_out) + 0.5) * (n_in / n_out) - 0.5
        src = np.clip(src, 0, n_in - 1)
        i0 = np.floor(src).astype(np.int64)
        i1 = np.minimum(i0 + 1, n_in - 1)
        return i0, i1, (src - i0)

    y0, y1, fy = axis(h, out_h)
    x0, x1, fx = axis(w, out_w)
    fy = fy[:, None].astype(img.dtype)
    fx = fx[None, :].astype(img.dtype)
    top = img[..., y0, :][..., x0] * (1 - fx) + img[..., y0, :][..., x1] * fx
    bot = img[..., y1, :][..., x0] * (1 - fx) + img[..., y1, :][..., x1] * fx
    return top * (1 - fy) + bot * fy


def preprocess(image: np.ndarray, ann: Optional[HeadAnnotations], target: int):
    """Resize (1, 3, H, W) by min(target/w, target/h), pad bottom/right with zeros.

    Returns (image at target x target, mapped annotations or None, transform).
    """
    if image.ndim != 4 or image.shape[1] != 3:
        raise ValidationError(f"expected image (1, 3, H, W), got {image.shape}")
    h, w = image.shape[2:]
    if ann is not None and (w, h) != tuple(ann.size):
        raise ValidationError(f"annotation size {ann.size} does not match image {w}x{h}")
    tf = make_transform(w, h, target)
    cw, ch = tf.content_size
    out = np.zeros((image.shape[0], 3, target, target), dtype=image.dtype)
    out[:, :, :ch, :cw] = resize_bilinear(image, ch, cw)
    mapped = None if ann is None else HeadAnnotations(tf.map_points(ann.points), (target, target))
    return out, mapped, tf
