"""Staged training: density-only base pretraining, then head fine-tuning.

Fine-tuning has two optional phases. The head phase freezes the base and
trains only the local-sum / classify heads on cached base outputs, which is
cheap. The joint phase trains every parameter of each network on its
composite loss.
"""

from __future__ import annotations

import os
from dataclasses import dataclass
from typing import Callable, Optional, Sequence

import numpy as np

from .autodiff import Tensor, no_grad, softmax_channels
from .checkpoint import Checkpoint, load_checkpoint, save_checkpoint
from .config import TrainConfig, format_grid, parse_grid
from .data import Sample
from .errors import ValidationError
from .groundtruth import calibrate_threshold
from .losses import LossWeights, class_loss, composite_loss, count_loss, density_loss, domain_mask
from .network import (
    ROLE_CLASS,
    ROLE_COUNT,
    BasicArchitecture,
    CounterNetwork,
    DensityAdaptionNetwork,
    build_base,
    build_networks,
)
from .optim import Adam

Log = Optional[Callable[[dict], None]]
KINDS = ("dan", "lcn", "hcn")


def emit(log: Log, **record) -> None:
    if log is not None:
        log(record)


def format_record(record: dict) -> str:
    """One ``key=value`` line; floats use 9 significant digits."""
    parts = []
    for k, v in record.items():
        if isinstance(v, (float, np.floating)):
            v = f"{float(v):.9g}"
        parts.append(f"{k}={v}")
    return " ".join(parts)


@dataclass
class TrainedModel:
    dan: DensityAdaptionNetwork
    lcn: CounterNetwork
    hcn: CounterNetwork
    th: float

    def networks(self):
        return {"dan": self.dan, "lcn": self.lcn, "hcn": self.hcn}


def _batches(n: int, batch_size: int, rng) -> list[np.ndarray]:
    perm = rng.permutation(n)
    return [perm[i : i + batch_size] for i in range(0, n, batch_size)]


def _stack(samples: Sequence[Sample], idx, flips, th=None):
    xs, ds, cs, ks = [], [], [], []
    for i, flip in zip(idx, flips):
        s = samples[i]
        x, d, c = s.image, s.density, s.counts
        k = s.classes(th) if th is not None else None
        if flip:
            x, d, c = x[:, :, ::-1], d[:, ::-1], c[:, ::-1]
            k = None if k is None else k[:, ::-1]
        xs.append(x)
        ds.append(d[None])
        cs.append(c[None])
        if k is not None:
            ks.append(k[None])
    out = [np.ascontiguousarray(np.stack(a)) for a in (xs, ds, cs)]
    out.append(np.stack(ks) if ks else None)
    return out


def _adam(params, lr, config: TrainConfig) -> Adam:
    return Adam(params, lr=lr, beta1=config.beta1, beta2=config.beta2, eps=config.eps)


def pretrain_base(samples: Sequence[Sample], config: TrainConfig,
                  base: Optional[BasicArchitecture] = None, log: Log = None) -> BasicArchitecture:
    """Train conv1_1..conv5 and the density head on the density loss only."""
    if not samples:
        raise ValidationError("cannot pretrain on an empty dataset")
    base = build_base(config.seed) if base is None else base
    base.set_trainable()
    opt = _adam(base.parameters(), config.lr, config)
    rng = np.random.default_rng([config.seed, 1])
    n = len(samples)
    for epoch in range(config.pretrain_epochs):
        total = 0.0
        for idx in _batches(n, config.batch_size, rng):
            flips = rng.random(len(idx)) < config.flip_prob
            x, d, _, _ = _stack(samples, idx, flips)
            x, d = x.astype(base_dtype(base)), d.astype(base_dtype(base))
            _, pred = base.forward(Tensor(x))
            loss = density_loss(pred, d)
            loss.backward()
            opt.step()
            total += loss.item() * len(idx)
        emit(log, stage="pretrain", epoch=epoch + 1, loss=total / n)
    base.set_trainable(roles=())
    return base


def base_dtype(net) -> np.dtype:
    return net.layers["density"].kernel.dtype


def _weights(config: TrainConfig) -> LossWeights:
    return LossWeights(config.lambda_dan, config.lambda_lcn, config.lambda_hcn)


def _count_mask(kind: str, classes, config: TrainConfig):
    if config.count_mask == "none":
        return None
    return domain_mask(classes, kind)


def _losses_from_outputs(kind, density, head_out, d, c, k, config):
    """Composite loss for one network given its (density, head output)."""
    ld = density_loss(density, d)
    if kind == "dan":
        spec = class_loss(softmax_channels(head_out), k)
    else:
        spec = count_loss(head_out, c, _count_mask(kind, k, config))
    return composite_loss(kind, ld, spec, _weights(config)), ld, spec


def network_loss(kind: str, net, x, d, c, k, config: TrainConfig):
    """Full forward + composite loss for one network."""
    if kind == "dan":
        density, head = net.forward_logits(Tensor(x))
    else:
        density, head = net.forward(Tensor(x))
    return _losses_from_outputs(kind, density, head, d, c, k, config)


def _cache_base_outputs(net, samples, config, flips_wanted):
    """Frozen-base features and density for every sample (and its mirror)."""
    feats, dens = {}, {}
    dtype = base_dtype(net)
    with no_grad():
        for flip in flips_wanted:
            for start in range(0, len(samples), config.batch_size):
                idx = np.arange(start, min(start + config.batch_size, len(samples)))
                x, _, _, _ = _stack(samples, idx, [flip] * len(idx))
                f, d = net.base_features(Tensor(x.astype(dtype)))
                for j, i in enumerate(idx):
                    feats[(int(i), flip)] = f.data[j]
                    dens[(int(i), flip)] = d.data[j]
    return feats, dens


def _train_heads(nets: dict, samples, config: TrainConfig, th: float, log: Log) -> None:
    flips_wanted = (False, True) if config.flip_prob > 0 else (False,)
    feats, dens = _cache_base_outputs(nets["dan"], samples, config, flips_wanted)
    roles = {"dan": {ROLE_CLASS}, "lcn": {ROLE_COUNT}, "hcn": {ROLE_COUNT}}
    opts = {}
    for kind, net in nets.items():
        net.set_trainable(roles[kind])
        opts[kind] = _adam(net.parameters(roles[kind]), config.effective_head_lr, config)
    rng = np.random.default_rng([config.seed, 2])
    n = len(samples)
    for epoch in range(config.head_epochs):
        totals = dict.fromkeys(KINDS, 0.0)
        for idx in _batches(n, config.batch_size, rng):
            flips = rng.random(len(idx)) < config.flip_prob
            _, d, c, k = _stack(samples, idx, flips, th)
            f = np.stack([feats[(int(i), bool(fl))] for i, fl in zip(idx, flips)])
            dm = Tensor(np.stack([dens[(int(i), bool(fl))] for i, fl in zip(idx, flips)]))
            for kind, net in nets.items():
                head = net.logits_head(Tensor(f)) if kind == "dan" else net.count_head(dm)
                loss, _, _ = _losses_from_outputs(kind, dm, head, d, c, k, config)
                loss.backward()
                opts[kind].step()
                totals[kind] += loss.item() * len(idx)
        emit(log, stage="heads", epoch=epoch + 1,
             **{f"loss_{kk}": totals[kk] / n for kk in KINDS})
    for net in nets.values():
        net.set_trainable(roles=())


def _train_joint(nets: dict, samples, config: TrainConfig, th: float, log: Log) -> None:
    opts = {}
    for kind, net in nets.items():
        net.set_trainable()
        opts[kind] = _adam(net.parameters(), config.lr, config)
    rng = np.random.default_rng([config.seed, 3])
    n = len(samples)
    for epoch in range(config.finetune_epochs):
        totals = dict.fromkeys(KINDS, 0.0)
        for idx in _batches(n, config.batch_size, rng):
            flips = rng.random(len(idx)) < config.flip_prob
            x, d, c, k = _stack(samples, idx, flips, th)
            for kind, net in nets.items():
                dtype = base_dtype(net)
                loss, _, _ = network_loss(kind, net, x.astype(dtype), d.astype(dtype), c, k, config)
                loss.backward()
                opts[kind].step()
                totals[kind] += loss.item() * len(idx)
        emit(log, stage="finetune", epoch=epoch + 1,
             **{f"loss_{kk}": totals[kk] / n for kk in KINDS})
    for net in nets.values():
        net.set_trainable(roles=())


def finetune_heads(base: BasicArchitecture, samples: Sequence[Sample], config: TrainConfig,
                   th: Optional[float], log: Log = None) -> TrainedModel:
    """Build DAN/LCN/HCN from ``base`` and fine-tune them on their composite losses."""
    if th is None:
        raise ValidationError("fine-tuning needs a density threshold")
    if not samples:
        raise ValidationError("cannot fine-tune on an empty dataset")
    dan, lcn, hcn = build_networks(config.input_size, config.grid, config.seed, base=base,
                                   dtype=base_dtype(base))
    nets = {"dan": dan, "lcn": lcn, "hcn": hcn}
    if config.head_epochs:
        _train_heads(nets, samples, config, th, log)
    if config.finetune_epochs:
        _train_joint(nets, samples, config, th, log)
    return TrainedModel(dan, lcn, hcn, float(th))


def resolve_threshold(samples: Sequence[Sample], config: TrainConfig) -> float:
    return calibrate_threshold([s.counts for s in samples], override=config.th)


def train_staged(samples: Sequence[Sample], config: TrainConfig, log: Log = None,
                 base: Optional[BasicArchitecture] = None) -> TrainedModel:
    """Pretrain the base, calibrate th, fine-tune the three networks."""
    base = pretrain_base(samples, config, base=base, log=log)
    th = resolve_threshold(samples, config)
    emit(log, stage="calibrate", th=th)
    return finetune_heads(base, samples, config, th, log)


# -- persistence -------------------------------------------------------------

def _meta(kind, config: TrainConfig, th=None) -> dict:
    meta = {"kind": kind, "input_size": str(config.input_size), "grid": format_grid(config.grid)}
    if th is not None:
        meta["th"] = repr(float(th))
    return meta


def save_base(path, base: BasicArchitecture, config: TrainConfig) -> None:
    save_checkpoint(path, Checkpoint(base.state_dict(), config.fingerprint(), _meta("base", config)))


def load_base(path) -> BasicArchitecture:
    ckpt = load_checkpoint(path)
    if ckpt.meta.get("kind") not in ("base", None):
        raise ValidationError(f"{path}: expected a base checkpoint, got {ckpt.meta.get('kind')}")
    base = build_base(0)
    base.load_state_dict(ckpt.params)
    return base


def save_model(out_dir, model: TrainedModel, config: TrainConfig) -> None:
    os.makedirs(out_dir, exist_ok=True)
    for kind, net in model.networks().items():
        ckpt = Checkpoint(net.state_dict(), config.fingerprint(), _meta(kind, config, model.th))
        save_checkpoint(os.path.join(out_dir, f"{kind}.ckpt"), ckpt)


def load_model(ckpt_dir, config: TrainConfig) -> TrainedModel:
    ckpts = {k: load_checkpoint(os.path.join(ckpt_dir, f"{k}.ckpt")) for k in KINDS}
    for kind, ck in ckpts.items():
        size = int(ck.meta.get("input_size", config.input_size))
        grid = parse_grid(ck.meta.get("grid", format_grid(config.grid)))
        if size != config.input_size or grid != tuple(config.grid):
            raise ValidationError(
                f"{kind} checkpoint was trained for {size} px / {format_grid(grid)} grid, "
                f"config asks for {config.input_size} px / {format_grid(config.grid)}"
            )
    dan, lcn, hcn = build_networks(config.input_size, config.grid, 0)
    dan.load_state_dict(ckpts["dan"].params)
    lcn.load_state_dict(ckpts["lcn"].params)
    hcn.load_state_dict(ckpts["hcn"].params)
    th = config.th if config.th is not None else float(ckpts["dan"].meta.get("th", "nan"))
    return TrainedModel(dan, lcn, hcn, th)
