"""Seeded end-to-end run on synthetic bimodal crowds.

Source: 60 train / 20 test images of the default style at 256x256 with a
4x4 grid. Target: the same split sizes drawn in the shifted style. The
base is pretrained on the source, the three heads are fitted, every gating
mode is scored, then the two source-based transfer strategies are scored on
the target.
"""

from __future__ import annotations

import copy
from dataclasses import dataclass

from .config import TrainConfig
from .data import samples_from_synth
from .evaluation import EvalReport, ablate, transfer
from .synth import synth_images
from .training import Log, emit, finetune_heads, format_record, pretrain_base, resolve_threshold

N_TRAIN, N_TEST = 60, 20
SOURCE_SEED, TARGET_SEED = 7, 8

BENCHMARK_CONFIG = TrainConfig(
    input_size=256,
    grid=(4, 4),
    lr=1e-3,
    head_lr=1e-3,
    batch_size=4,
    pretrain_epochs=8,
    head_epochs=100,
    finetune_epochs=0,
    seed=0,
)


@dataclass
class BenchmarkResult:
    th: float
    modes: dict[str, EvalReport]
    transfer: dict[str, EvalReport]

    def lines(self) -> list[str]:
        out = [format_record({"stage": "calibrate", "th": self.th})]
        out += [format_record(r.record(stage="ablate")) for r in self.modes.values()]
        out += [format_record(r.record(stage="transfer", strategy=s)) for s, r in self.transfer.items()]
        return out

    def text(self) -> str:
        return "\n".join(self.lines()) + "\n"


def run_benchmark(config: TrainConfig = BENCHMARK_CONFIG, log: Log = None) -> BenchmarkResult:
    source = samples_from_synth(synth_images(N_TRAIN + N_TEST, SOURCE_SEED, config.input_size), config)
    target = samples_from_synth(
        synth_images(N_TRAIN + N_TEST, TARGET_SEED, config.input_size, shifted=True), config)
    train, test = source[:N_TRAIN], source[N_TRAIN:]

    base = pretrain_base(train, config, log=log)
    th = resolve_threshold(train, config)
    emit(log, stage="calibrate", th=th)
    # finetune_heads copies the base, so the pretrained weights stay intact for transfer
    model = finetune_heads(base, train, config, th, log=log)
    modes = ablate(test, model, config)

    results = {}
    for strategy in ("wo_finetune", "finetune_on_target"):
        results[strategy] = transfer(copy.deepcopy(base), target[:N_TRAIN], target[N_TRAIN:],
                                     strategy, config, log=log)
    return BenchmarkResult(th, modes, results)
