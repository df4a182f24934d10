"""Configuration objects shared across the toolkit."""

from __future__ import annotations

from dataclasses import dataclass, field, asdict
from typing import Optional

# Channel plan of the four residual conv blocks: (in, mid, out) per block.
CHANNEL_PLAN = ((1, 4, 4), (4, 8, 8), (8, 4, 4), (4, 1, 1))

VARIANTS = (
    "CAKT",
    "DKT_BASELINE",
    "LSTM_LC",
    "FC_LC",
    "C2D_LC",
    "SA_LC",
    "NO_EXP_DECAY",
    "FC_POOLING",
    "FC_OUTPUT",
    "MEAN_FUSION",
)


class ConfigError(ValueError):
    """Raised when a configuration violates its invariants."""


@dataclass
class CAKTConfig:
    """Model hyperparameters.

    ``d_e = H * W`` is the interaction embedding size and also the hidden
    size ``d_h`` of both LSTM layers, so the same-concept feature and the
    overall-state feature can be fused elementwise.
    """

    M: int
    k: int = 6
    H: int = 17
    W: int = 17
    variant: str = "CAKT"
    seed: int = 0
    channel_plan: tuple = CHANNEL_PLAN

    def __post_init__(self):
        errors = []
        if self.M < 1:
            errors.append(f"M must be >= 1, got {self.M}")
        if self.k < 1:
            errors.append(f"k must be >= 1, got {self.k}")
        if self.H < 1 or self.W < 1:
            errors.append(f"H and W must be >= 1, got H={self.H}, W={self.W}")
        if self.variant not in VARIANTS:
            errors.append(f"unknown variant {self.variant!r}; choose from {VARIANTS}")
        if errors:
            raise ConfigError("; ".join(errors))

    @property
    def d_e(self) -> int:
        return self.H * self.W

    @property
    def d_h(self) -> int:
        return self.d_e

    def to_dict(self) -> dict:
        d = asdict(self)
        d["channel_plan"] = [list(t) for t in self.channel_plan]
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "CAKTConfig":
        d = dict(d)
        if "channel_plan" in d:
            d["channel_plan"] = tuple(tuple(t) for t in d["channel_plan"])
        return cls(**d)


@dataclass
class TrainConfig:
    """Optimization settings.

    Defaults follow the protocol used for the reference results: Adam,
    initial lr 0.001 decayed by 0.3 every 5 epochs, L2 of 1e-5.  Setting
    ``lr_decay_every=0`` disables the schedule (used by the overfit sanity
    run, which needs a constant lr over hundreds of epochs).
    """

    lr: float = 1e-3
    lr_decay_gamma: float = 0.3
    lr_decay_every: int = 5
    l2: float = 1e-5
    batch_size: int = 32
    epochs: int = 30
    seed: int = 0
    early_stop_patience: Optional[int] = None
    grad_clip: float = 10.0

    def __post_init__(self):
        errors = []
        if self.lr <= 0:
            errors.append(f"lr must be > 0, got {self.lr}")
        if self.batch_size < 1:
            errors.append(f"batch_size must be >= 1, got {self.batch_size}")
        if self.epochs < 1:
            errors.append(f"epochs must be >= 1, got {self.epochs}")
        if errors:
            raise ConfigError("; ".join(errors))

    def lr_at_epoch(self, epoch: int) -> float:
        """Effective learning rate at a 0-indexed epoch."""
        if self.lr_decay_every <= 0:
            return self.lr
        return self.lr * self.lr_decay_gamma ** (epoch // self.lr_decay_every)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        return cls(**d)
