"""Run configuration and its ``key=value`` text form."""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass, fields, replace
from pathlib import Path

from .errors import ConfigError
from .losses import LossWeights


@dataclass(frozen=True)
class RunConfig:
    dataset: str = ""
    num_classes: int = 4
    prototypes: int = 8
    grid_h: int = 2
    grid_w: int = 2
    momentum: float = 0.999
    alpha: float = 1.0
    tau: float = 1.0
    gumbel_noise: bool = True
    w_pp: float = 0.01
    w_fp: float = 0.01
    w_dice: float = 1.0
    margin: float = 1.0
    lr: float = 0.01
    weight_decay: float = 1e-4
    epochs: int = 30
    batch_size: int = 4
    seed: int = 0
    baseline: bool = False
    feature_dim: int = 32
    hidden: int = 16
    downsample: int = 4

    def __post_init__(self):
        checks = [
            (self.num_classes >= 2, "num_classes must be >= 2"),
            (self.prototypes >= 1, "prototypes must be >= 1"),
            (self.grid_h >= 1 and self.grid_w >= 1, "patch grid must be >= 1x1"),
            (0.0 <= self.momentum <= 1.0, "momentum must lie in [0, 1]"),
            (self.alpha > 0, "alpha must be positive"),
            (self.tau > 0, "tau must be positive"),
            (self.lr >= 0 and self.weight_decay >= 0, "lr and weight_decay must be >= 0"),
            (self.epochs >= 0, "epochs must be >= 0"),
            (self.batch_size >= 1, "batch_size must be >= 1"),
            (self.feature_dim >= 1 and self.hidden >= 1, "widths must be >= 1"),
            (self.downsample in (1, 2, 4), "downsample must be 1, 2 or 4"),
        ]
        for ok, msg in checks:
            if not ok:
                raise ConfigError(msg)
        for f in fields(self):
            v = getattr(self, f.name)
            if isinstance(v, float) and not math.isfinite(v):
                raise ConfigError(f"{f.name} must be finite")
        self.loss_weights()
        if not self.baseline and self.w_pp > 0 and self.feature_dim < self.prototypes:
            raise ConfigError("feature_dim must be >= prototypes when the pp regularizer is on")

    # Baseline runs use one prototype per class and no prototype regularizers.
    @property
    def effective_prototypes(self) -> int:
        return 1 if self.baseline else self.prototypes

    def loss_weights(self) -> LossWeights:
        if self.baseline:
            return LossWeights(pp=0.0, fp=0.0, dice=self.w_dice, margin=self.margin)
        return LossWeights(pp=self.w_pp, fp=self.w_fp, dice=self.w_dice, margin=self.margin)

    def to_text(self) -> str:
        return "".join(f"{k}={_fmt(v)}\n" for k, v in asdict(self).items())

    @classmethod
    def from_text(cls, text: str, **overrides) -> "RunConfig":
        values = {}
        types = {f.name: f.type for f in fields(cls)}
        for n, line in enumerate(text.splitlines(), 1):
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            key, sep, raw = line.partition("=")
            key = key.strip()
            if not sep or key not in types:
                raise ConfigError(f"line {n}: unknown or malformed entry {line!r}")
            values[key] = parse_value(types[key], raw.strip())
        values.update({k: v for k, v in overrides.items() if v is not None})
        return cls(**values)

    @classmethod
    def load(cls, path, **overrides) -> "RunConfig":
        return cls.from_text(Path(path).read_text(encoding="utf-8"), **overrides)

    def save(self, path) -> None:
        Path(path).write_text(self.to_text(), encoding="utf-8")

    def with_(self, **changes) -> "RunConfig":
        return replace(self, **changes)


def _fmt(v) -> str:
    return repr(v) if isinstance(v, float) else str(v)


def parse_value(kind, raw: str):
    kind = kind if isinstance(kind, str) else kind.__name__
    try:
        if kind == "bool":
            if raw.lower() in ("true", "1", "yes"):
                return True
            if raw.lower() in ("false", "0", "no"):
                return False
            raise ValueError(raw)
        if kind == "int":
            return int(raw)
        if kind == "float":
            return float(raw)
        return raw
    except ValueError:
        raise ConfigError(f"cannot parse {raw!r} as {kind}") from None
