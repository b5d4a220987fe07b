"""Estimator outputs."""

from __future__ import annotations

import enum
from dataclasses import dataclass, field
from typing import Any

import numpy as np

from ._numerics import mean_and_se


class Direction(enum.Enum):
    LOWER_MI = "lower_mi"
    UPPER_MI = "upper_mi"
    LOWER_LOGZ = "lower_logz"
    UPPER_LOGZ = "upper_logz"


@dataclass
class BoundEstimate:
    value: float
    std_error: float
    direction: Direction
    stochastic: bool
    n_outer: int
    metadata: dict[str, Any] = field(default_factory=dict)
    draws: np.ndarray | None = field(default=None, repr=False)
    approximate: bool = False
    diagnostics: dict[str, Any] = field(default_factory=dict)

    def __post_init__(self):
        if not self.std_error >= 0:
            raise ValueError("std_error must be non-negative")

    @classmethod
    def from_draws(cls, draws, direction: Direction, metadata=None, stochastic: bool = True,
                   approximate: bool = False, diagnostics=None) -> "BoundEstimate":
        draws = np.asarray(draws, dtype=float).ravel()
        value, se = mean_and_se(draws)
        return cls(value, se, direction, stochastic, draws.size, dict(metadata or {}), draws,
                   approximate, dict(diagnostics or {}))

    @classmethod
    def exact(cls, value: float, direction: Direction, metadata=None) -> "BoundEstimate":
        return cls(float(value), 0.0, direction, False, 0, dict(metadata or {}))

    @property
    def ci95(self) -> tuple[float, float]:
        return self.value - 1.96 * self.std_error, self.value + 1.96 * self.std_error


@dataclass
class DecomposedBound:
    ba_term: float
    contrastive_term: float
    total: float
    K: int
    ba_se: float = 0.0
    contrastive_se: float = 0.0
    total_se: float = 0.0
    ba_draws: np.ndarray | None = field(default=None, repr=False)
    contrastive_draws: np.ndarray | None = field(default=None, repr=False)

    @classmethod
    def from_draws(cls, ba, contrastive, K: int) -> "DecomposedBound":
        ba = np.asarray(ba, dtype=float)
        contrastive = np.asarray(contrastive, dtype=float)
        b, bse = mean_and_se(ba)
        c, cse = mean_and_se(contrastive)
        t, tse = mean_and_se(ba + contrastive)
        return cls(b, c, t, K, bse, cse, tse, ba, contrastive)

    @property
    def log_k(self) -> float:
        return float(np.log(self.K))


@dataclass
class SandwichBounds:
    """Both directions of an extended-state-space estimator.

    Lower bounds on log p(x) become upper bounds on MI and vice versa.
    Entries are None when that direction was not requested.
    """

    lower_logz: BoundEstimate | None
    upper_logz: BoundEstimate | None
    upper_mi: BoundEstimate | None
    lower_mi: BoundEstimate | None
    diagnostics: dict[str, Any] = field(default_factory=dict)

    @property
    def gap(self) -> float:
        return self.upper_mi.value - self.lower_mi.value
