"""Hyperparameters of the factor network and its training loop."""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass

from .._validation import check_choice, check_int, check_positive
from ..factor_model import VARIANCE_MODES

ARCHITECTURES = ("attention", "recurrent")


@dataclass(frozen=True)
class ModelConfig:
    """Network shape, loss and optimizer settings.

    ``polyak_start=None`` means half of ``steps``.  ``val_dates`` caps the
    number of validation dates (evenly spaced) used per evaluation; ``None``
    uses all of them.
    """

    factors: int = 64
    lookback: int = 256
    hidden: int = 256
    dropout: float = 0.25
    arch: str = "attention"
    seq_layers: int = 2
    heads: int = 4
    k_iwae: int = 20
    lr: float = 1e-4
    weight_decay: float = 1e-6
    steps: int = 100_000
    polyak_start: int | None = None
    val_every: int = 1000
    val_k: int = 20
    val_dates: int | None = None
    variance_mode: str = "matched"
    diagonal_only: bool = False
    seed: int = 0

    def __post_init__(self):
        check_int("factors", self.factors, 1)
        check_int("lookback", self.lookback, 0)
        check_int("hidden", self.hidden, 1)
        check_int("seq_layers", self.seq_layers, 1)
        check_int("heads", self.heads, 1)
        check_int("k_iwae", self.k_iwae, 1)
        check_int("steps", self.steps, 0)
        check_int("val_every", self.val_every, 1)
        check_int("val_k", self.val_k, 1)
        check_int("seed", self.seed, 0)
        if self.val_dates is not None:
            check_int("val_dates", self.val_dates, 1)
        if not 0.0 <= self.dropout < 1.0:
            raise ValueError(f"dropout must lie in [0, 1), got {self.dropout}")
        check_positive("lr", self.lr)
        check_positive("weight_decay", self.weight_decay, strict=False)
        check_choice("arch", self.arch, ARCHITECTURES)
        check_choice("variance_mode", self.variance_mode, VARIANCE_MODES)
        if self.arch == "attention" and self.hidden % self.heads:
            raise ValueError(f"hidden ({self.hidden}) must be divisible by heads ({self.heads})")
        if self.polyak_start is not None:
            check_int("polyak_start", self.polyak_start, 0)
            if self.steps and self.polyak_start >= self.steps:
                raise ValueError("polyak_start must be smaller than steps")

    @property
    def polyak_from(self) -> int:
        return self.steps // 2 if self.polyak_start is None else self.polyak_start

    def replace(self, **changes) -> ModelConfig:
        return dataclasses.replace(self, **changes)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> ModelConfig:
        names = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - names
        if unknown:
            raise ValueError(f"unknown model config keys: {sorted(unknown)}")
        return cls(**d)


def desk_config(**changes) -> ModelConfig:
    """Desk-scale settings used for the synthetic experiments."""
    base = ModelConfig(factors=8, lookback=32, hidden=64, dropout=0.1, steps=15_000,
                       val_every=1000, val_dates=128, lr=1e-3)
    return base.replace(**changes)
