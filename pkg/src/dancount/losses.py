"""Density, count and class losses and the per-network composites."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np

from .autodiff import Tensor, clamp, log, square, tabs
from .errors import ValidationError

PROB_CLAMP = 1e-7


@dataclass(frozen=True)
class LossWeights:
    dan: float = 1.0
    lcn: float = 1.0
    hcn: float = 1.0

    def __post_init__(self):
        for v in (self.dan, self.lcn, self.hcn):
            if not (np.isfinite(v) and v >= 0):
                raise ValidationError(f"loss weights must be finite and >= 0, got {self}")

    def for_kind(self, kind: str) -> float:
        return {"dan": self.dan, "lcn": self.lcn, "hcn": self.hcn}[kind]


def _as_target(target, like: Tensor) -> np.ndarray:
    t = np.asarray(target.data if isinstance(target, Tensor) else target, dtype=like.dtype)
    if t.shape != like.shape:
        raise ValidationError(f"prediction {like.shape} and target {t.shape} differ in shape")
    return t


def density_loss(pred: Tensor, target) -> Tensor:
    """(1 / 2N) * sum_i ||pred_i - target_i||^2 over a batch of N maps."""
    t = _as_target(target, pred)
    return square(pred - t).sum() * (0.5 / pred.shape[0])


def count_loss(pred: Tensor, target, mask=None) -> Tensor:
    """(1 / N) * sum of absolute cell errors; cells with mask 0 are ignored."""
    t = _as_target(target, pred)
    err = tabs(pred - t)
    if mask is not None:
        m = np.asarray(mask, dtype=pred.dtype)
        if m.shape != pred.shape:
            raise ValidationError(f"mask {m.shape} does not match prediction {pred.shape}")
        err = err * m
    return err.sum() * (1.0 / pred.shape[0])


def domain_mask(classes, kind: str) -> np.ndarray:
    """Cells a counter is trained on: class 0 for LCN, class 1 for HCN."""
    c = np.asarray(classes)
    if kind == "lcn":
        return (c == 0).astype(np.float64)
    if kind == "hcn":
        return (c == 1).astype(np.float64)
    raise ValidationError(f"no density domain for network kind {kind!r}")


def class_loss(probs: Tensor, target) -> Tensor:
    """Mean binary cross-entropy of the high-density probability over all cells.

    ``probs`` is the (N, 2, H, W) softmax output; ``target`` the (N, H, W)
    or (N, 1, H, W) class map.
    """
    if probs.ndim != 4 or probs.shape[1] != 2:
        raise ValidationError(f"class probabilities must be (N, 2, H, W), got {probs.shape}")
    p = clamp(probs[:, 1:2], PROB_CLAMP, 1.0 - PROB_CLAMP)
    t = np.asarray(target, dtype=probs.dtype).reshape(p.shape)
    return -(log(p) * t + log(1.0 - p) * (1.0 - t)).mean()


def composite_loss(kind: str, density: Optional[Tensor] = None, specific: Optional[Tensor] = None,
                   weights: LossWeights = LossWeights()) -> Tensor:
    """L_density + lambda_kind * L_specific for kind in {dan, lcn, hcn}."""
    if kind not in ("dan", "lcn", "hcn"):
        raise ValidationError(f"unknown network kind {kind!r}")
    if density is None or specific is None:
        need = "density + class" if kind == "dan" else "density + count"
        raise ValidationError(f"{kind} composite needs both parts ({need})")
    return density + specific * weights.for_kind(kind)
