"""Gated inference, metrics, ablations, cross-validation and transfer."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from .autodiff import Tensor, no_grad, softmax_channels
from .config import TrainConfig
from .data import Sample
from .errors import ValidationError
from .network import BasicArchitecture, build_networks, predict_class_map
from .training import (
    Log,
    TrainedModel,
    base_dtype,
    emit,
    finetune_heads,
    resolve_threshold,
    train_staged,
)

MODES = ("gated", "lcn_only", "hcn_only", "ideal_gate")
STRATEGIES = ("wo_finetune", "step_on_target", "finetune_on_target")


def fuse_counts(lcn_counts, hcn_counts, classes) -> float:
    """Total count: LCN where the class is 0, HCN where it is 1, summed."""
    lc = np.asarray(lcn_counts, dtype=np.float64)
    hc = np.asarray(hcn_counts, dtype=np.float64)
    p = np.asarray(classes, dtype=np.float64)
    if not lc.shape == hc.shape == p.shape:
        raise ValidationError(f"count/class shapes differ: {lc.shape}, {hc.shape}, {p.shape}")
    return float((lc * (1.0 - p) + hc * p).sum())


def mae_mse(truths, preds) -> tuple[float, float]:
    """Mean absolute error and root-mean-square error (reported as MSE)."""
    t = np.asarray(truths, dtype=np.float64)
    p = np.asarray(preds, dtype=np.float64)
    if t.size == 0:
        raise ValidationError("cannot compute metrics on an empty set")
    if t.shape != p.shape:
        raise ValidationError(f"truth {t.shape} and prediction {p.shape} differ in shape")
    err = np.abs(t - p)
    # scale by the largest error so squaring neither underflows nor overflows
    peak = err.max()
    if peak == 0:
        return 0.0, 0.0
    scaled = err / peak
    return float(err.mean()), float(peak * np.sqrt((scaled * scaled).mean()))


@dataclass
class EvalReport:
    mae: float
    mse: float
    pairs: list = field(default_factory=list)  # (truth, prediction) per image
    dan_accuracy: float = float("nan")
    mode: str = "gated"

    def record(self, **extra) -> dict:
        return {**extra, "mode": self.mode, "n": len(self.pairs), "mae": self.mae,
                "mse": self.mse, "dan_accuracy": self.dan_accuracy}


@dataclass
class ImagePrediction:
    """Everything needed to score one image under any gating mode."""

    name: str
    truth: float
    lcn_counts: np.ndarray
    hcn_counts: np.ndarray
    dan_classes: np.ndarray
    gt_classes: np.ndarray

    def total(self, mode: str) -> float:
        if mode == "gated":
            return fuse_counts(self.lcn_counts, self.hcn_counts, self.dan_classes)
        if mode == "ideal_gate":
            return fuse_counts(self.lcn_counts, self.hcn_counts, self.gt_classes)
        if mode == "lcn_only":
            return float(self.lcn_counts.sum())
        if mode == "hcn_only":
            return float(self.hcn_counts.sum())
        raise ValidationError(f"unknown evaluation mode {mode!r}")


@dataclass
class InferenceResult:
    total: float
    density: np.ndarray
    classes: np.ndarray
    lcn_counts: np.ndarray
    hcn_counts: np.ndarray


def _same_base(model: TrainedModel) -> bool:
    ref = model.lcn.base_view().state_dict()
    for net in (model.dan, model.hcn):
        other = net.base_view().state_dict()
        if any(not np.array_equal(ref[k], other[k]) for k in ref):
            return False
    return True


def _forward_all(model: TrainedModel, x: np.ndarray):
    """(dan density, class probs, lcn counts, hcn counts) for an image batch."""
    x = Tensor(x.astype(base_dtype(model.lcn)))
    with no_grad():
        if _same_base(model):
            feats, dens = model.lcn.base_features(x)
            probs = softmax_channels(model.dan.logits_head(feats))
            lc = model.lcn.count_head(dens)
            hc = model.hcn.count_head(dens)
            return dens.data, probs.data, lc.data, hc.data, dens.data
        d_dan, probs = model.dan.forward(x)
        d_lcn, lc = model.lcn.forward(x)
        _, hc = model.hcn.forward(x)
        return d_dan.data, probs.data, lc.data, hc.data, d_lcn.data


def infer_count(image: np.ndarray, model: TrainedModel) -> InferenceResult:
    """Gated head count for one preprocessed (3, S, S) or (1, 3, S, S) image."""
    x = np.asarray(image)
    if x.ndim == 3:
        x = x[None]
    if x.shape[0] != 1:
        raise ValidationError(f"infer_count takes a single image, got batch {x.shape[0]}")
    _, probs, lc, hc, dens = _forward_all(model, x)
    classes = predict_class_map(probs)[0]
    total = fuse_counts(lc[0, 0], hc[0, 0], classes)
    return InferenceResult(total, np.maximum(dens[0, 0], 0.0), classes, lc[0, 0], hc[0, 0])


def predict_dataset(samples: Sequence[Sample], model: TrainedModel, batch_size: int = 4) -> list[ImagePrediction]:
    out = []
    for start in range(0, len(samples), batch_size):
        chunk = samples[start : start + batch_size]
        x = np.stack([s.image for s in chunk])
        _, probs, lc, hc, _ = _forward_all(model, x)
        classes = predict_class_map(probs)
        for j, s in enumerate(chunk):
            out.append(ImagePrediction(s.name, s.truth, lc[j, 0].astype(np.float64),
                                       hc[j, 0].astype(np.float64), classes[j],
                                       s.classes(model.th)))
    return out


def report(preds: Sequence[ImagePrediction], mode: str = "gated") -> EvalReport:
    if mode not in MODES:
        raise ValidationError(f"unknown evaluation mode {mode!r}; expected one of {MODES}")
    if not preds:
        raise ValidationError("cannot evaluate an empty set")
    pairs = [(p.truth, p.total(mode)) for p in preds]
    mae, mse = mae_mse(*zip(*pairs))
    correct = sum(int((p.dan_classes == p.gt_classes).sum()) for p in preds)
    cells = sum(p.gt_classes.size for p in preds)
    return EvalReport(mae, mse, pairs, correct / cells, mode)


def evaluate(samples: Sequence[Sample], model: TrainedModel, config: TrainConfig,
             mode: str = "gated") -> EvalReport:
    if not samples:
        raise ValidationError("cannot evaluate an empty set")
    return report(predict_dataset(samples, model, config.batch_size), mode)


def ablate(samples: Sequence[Sample], model: TrainedModel, config: TrainConfig,
           modes: Sequence[str] = MODES) -> dict[str, EvalReport]:
    """Score one set of predictions under several gating modes."""
    preds = predict_dataset(samples, model, config.batch_size)
    return {m: report(preds, m) for m in modes}


# -- cross-validation ----------------------------------------------------------

def fold_indices(n: int, seed: int, k: int = 5) -> list[np.ndarray]:
    """Seeded partition of range(n) into k folds whose sizes differ by at most 1."""
    if n < k:
        raise ValidationError(f"{k}-fold cross-validation needs at least {k} images, got {n}")
    perm = np.random.default_rng(seed).permutation(n)
    return [np.sort(f) for f in np.array_split(perm, k)]


@dataclass
class CrossValidationReport:
    folds: list[EvalReport]
    aggregate: EvalReport


def crossvalidate_5fold(samples: Sequence[Sample], config: TrainConfig, seed: Optional[int] = None,
                        log: Log = None) -> CrossValidationReport:
    folds = fold_indices(len(samples), config.seed if seed is None else seed)
    reports, preds_all = [], []
    for f, test_idx in enumerate(folds):
        held = set(test_idx.tolist())
        train = [s for i, s in enumerate(samples) if i not in held]
        test = [samples[i] for i in test_idx]
        model = train_staged(train, config, log=log)
        preds = predict_dataset(test, model, config.batch_size)
        rep = report(preds)
        emit(log, **rep.record(stage="cv5", fold=f + 1))
        reports.append(rep)
        preds_all.extend(preds)
    agg = report(preds_all)
    emit(log, **agg.record(stage="cv5", fold="all"))
    return CrossValidationReport(reports, agg)


# -- dataset transfer ----------------------------------------------------------

def transfer(source_base: Optional[BasicArchitecture], target_train: Sequence[Sample],
             target_test: Sequence[Sample], strategy: str, config: TrainConfig,
             log: Log = None) -> EvalReport:
    """Evaluate one transfer strategy on the target test split.

    wo_finetune: source base with freshly initialised heads (sum pooling for
    both counters), no training on the target. step_on_target: full staged
    training on the target from scratch. finetune_on_target: the three
    networks start from the source base and are fine-tuned on the target.
    """
    if strategy not in STRATEGIES:
        raise ValidationError(f"unknown transfer strategy {strategy!r}; expected one of {STRATEGIES}")
    if strategy != "step_on_target" and source_base is None:
        raise ValidationError(f"strategy {strategy} needs a source checkpoint")
    th = resolve_threshold(target_train, config)
    if strategy == "wo_finetune":
        dan, lcn, hcn = build_networks(config.input_size, config.grid, config.seed,
                                       base=source_base, dtype=base_dtype(source_base))
        model = TrainedModel(dan, lcn, hcn, th)
    elif strategy == "finetune_on_target":
        model = finetune_heads(source_base, target_train, config, th, log)
    else:
        model = train_staged(target_train, config, log=log)
    rep = evaluate(target_test, model, config)
    emit(log, **rep.record(stage="transfer", strategy=strategy))
    return rep
