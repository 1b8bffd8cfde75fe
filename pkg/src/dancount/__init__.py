"""Density-adaptive crowd counting on a small numpy autodiff core."""

from .config import TrainConfig, load_config, parse_config
from .errors import NumericError, ValidationError
from .evaluation import ablate, crossvalidate_5fold, evaluate, infer_count, transfer
from .network import build_networks
from .training import finetune_heads, pretrain_base, train_staged

__all__ = [
    "TrainConfig", "load_config", "parse_config", "NumericError", "ValidationError",
    "ablate", "crossvalidate_5fold", "evaluate", "infer_count", "transfer",
    "build_networks", "finetune_heads", "pretrain_base", "train_staged",
]
