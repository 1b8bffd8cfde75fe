"""Training configuration and its ``key = value`` file format."""

from __future__ import annotations

import dataclasses
import hashlib
from dataclasses import dataclass
from typing import Optional

from .errors import ValidationError
from .groundtruth import SigmaMode


def parse_grid(text: str) -> tuple[int, int]:
    parts = text.lower().split("x")
    if len(parts) != 2 or not all(p.strip().isdigit() for p in parts):
        raise ValidationError(f"grid must look like HxW, got {text!r}")
    rows, cols = (int(p) for p in parts)
    for v in (rows, cols):
        if v < 1 or v & (v - 1):
            raise ValidationError(f"grid extents must be powers of two, got {text!r}")
    return rows, cols


def format_grid(grid) -> str:
    return f"{grid[0]}x{grid[1]}"


@dataclass
class TrainConfig:
    input_size: int = 512
    grid: tuple[int, int] = (8, 8)
    th: Optional[float] = None  # None -> calibrate on the training set
    sigma_mode: str = "fixed"
    sigma: float = 4.0
    adaptive_k: int = 3
    adaptive_beta: float = 0.3
    lambda_dan: float = 1.0
    lambda_lcn: float = 1.0
    lambda_hcn: float = 1.0
    lr: float = 1e-5
    head_lr: Optional[float] = None  # None -> lr
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    batch_size: int = 4
    pretrain_epochs: int = 50
    head_epochs: int = 0
    finetune_epochs: int = 50
    flip_prob: float = 0.5
    count_mask: str = "domain"
    seed: int = 0

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        rows, cols = self.grid
        if self.input_size < 1 or self.input_size % rows or self.input_size % cols:
            raise ValidationError(
                f"input_size {self.input_size} is not divisible by grid {format_grid(self.grid)}"
            )
        if self.lr <= 0 or (self.head_lr is not None and self.head_lr <= 0):
            raise ValidationError("learning rates must be positive")
        for name in ("lambda_dan", "lambda_lcn", "lambda_hcn"):
            v = getattr(self, name)
            if not v >= 0 or v == float("inf"):
                raise ValidationError(f"{name} must be finite and non-negative, got {v}")
        if self.th is not None and self.th < 0:
            raise ValidationError(f"th must be non-negative, got {self.th}")
        if self.batch_size < 1:
            raise ValidationError("batch_size must be positive")
        for name in ("pretrain_epochs", "head_epochs", "finetune_epochs"):
            if getattr(self, name) < 0:
                raise ValidationError(f"{name} must be non-negative")
        if not 0 <= self.flip_prob <= 1:
            raise ValidationError("flip_prob must be in [0, 1]")
        if self.count_mask not in ("domain", "none"):
            raise ValidationError(f"count_mask must be domain or none, got {self.count_mask!r}")
        self.sigma_spec()

    def sigma_spec(self) -> SigmaMode:
        kind = {"fixed": "fixed", "adaptive": "adaptive"}.get(self.sigma_mode)
        if kind is None:
            raise ValidationError(f"sigma_mode must be fixed or adaptive, got {self.sigma_mode!r}")
        return SigmaMode(kind, self.sigma, self.adaptive_k, self.adaptive_beta)

    def lambda_for(self, kind: str) -> float:
        return {"dan": self.lambda_dan, "lcn": self.lambda_lcn, "hcn": self.lambda_hcn}[kind]

    @property
    def effective_head_lr(self) -> float:
        return self.lr if self.head_lr is None else self.head_lr

    def replace(self, **changes) -> "TrainConfig":
        return dataclasses.replace(self, **changes)

    def to_text(self) -> str:
        lines = []
        for f in dataclasses.fields(self):
            v = getattr(self, f.name)
            if f.name == "grid":
                v = format_grid(v)
            elif v is None:
                v = "auto"
            elif isinstance(v, float):
                v = repr(float(v))
            lines.append(f"{f.name} = {v}")
        return "\n".join(lines) + "\n"

    def fingerprint(self) -> bytes:
        return hashlib.sha256(self.to_text().encode("ascii")).digest()


_OPTIONAL = {"th", "head_lr"}
_INT = {"input_size", "adaptive_k", "batch_size", "pretrain_epochs", "head_epochs",
        "finetune_epochs", "seed"}
_STR = {"sigma_mode", "count_mask"}


def _convert(name: str, raw: str, lineno: int):
    try:
        if name == "grid":
            return parse_grid(raw)
        if name in _OPTIONAL and raw.lower() == "auto":
            return None
        if name in _STR:
            return raw
        if name in _INT:
            return int(raw)
        return float(raw)
    except ValueError:
        raise ValidationError(f"line {lineno}: bad value {raw!r} for {name}") from None


def parse_config(text: str) -> TrainConfig:
    known = {f.name for f in dataclasses.fields(TrainConfig)}
    values = {}
    for lineno, line in enumerate(text.splitlines(), start=1):
        stripped = line.split("#", 1)[0].strip()
        if not stripped:
            continue
        if "=" not in stripped:
            raise ValidationError(f"line {lineno}: expected 'key = value', got {line!r}")
        key, raw = (s.strip() for s in stripped.split("=", 1))
        if key not in known:
            raise ValidationError(f"line {lineno}: unknown config key {key!r}")
        if key in values:
            raise ValidationError(f"line {lineno}: duplicate key {key!r}")
        values[key] = _convert(key, raw, lineno)
    return TrainConfig(**values)


def load_config(path) -> TrainConfig:
    with open(path, encoding="ascii") as fh:
        return parse_config(fh.read())
