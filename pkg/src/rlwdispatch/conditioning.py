"""Per-grid reward smoothing and EMA standardization of edge components."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np


@dataclass
class RewardSmoother:
    """Per-cell exponential moving average of order prices.

    With ``init_first=True`` (default) the first price seen at a cell is
    adopted as-is; ``init_first=False`` blends from zero on every update.
    """

    n_cells: int
    beta: float = 0.9
    init_first: bool = True
    table: np.ndarray = field(init=False)
    initialized: np.ndarray = field(init=False)

    def __post_init__(self):
        if not 0.0 <= self.beta <= 1.0:
            raise ValueError(f"beta must lie in [0, 1], got {self.beta}")
        self.table = np.zeros(self.n_cells)
        self.initialized = np.zeros(self.n_cells, dtype=bool)

    def __getitem__(self, cell: int) -> float:
        return float(self.table[cell])

    def update(self, cell: int, price: float) -> float:
        if price < 0:
            raise ValueError(f"price must be >= 0, got {price}")
        if self.init_first and not self.initialized[cell]:
            self.table[cell] = price
        else:
            self.table[cell] = self.beta * self.table[cell] + (1.0 - self.beta) * price
        self.initialized[cell] = True
        return float(self.table[cell])

    def copy(self) -> "RewardSmoother":
        other = RewardSmoother(self.n_cells, self.beta, self.init_first)
        other.table = self.table.copy()
        other.initialized = self.initialized.copy()
        return other


def smooth_reward(S: RewardSmoother, grid: int, price: float) -> RewardSmoother:
    S.update(grid, price)
    return S


def sigmoid(z: float) -> float:
    if z >= 0:
        return 1.0 / (1.0 + math.exp(-z))
    e = math.exp(z)
    return e / (1.0 + e)


@dataclass
class Standardizer:
    """Running mean ``m`` and variance proxy ``v`` mapped through a sigmoid.

    ``epsilon`` floors ``sqrt(v)`` rather than being added to it, which keeps
    the output exactly invariant when the whole input stream is rescaled.
    """

    beta1: float = 0.99
    beta2: float = 0.999
    epsilon: float = 1e-9
    m: float = 0.0
    v: float = 0.0
    sample_count: int = 0

    def __post_init__(self):
        if not (0 <= self.beta1 < 1 and 0 <= self.beta2 < 1):
            raise ValueError("standardizer betas must lie in [0, 1)")
        if self.epsilon <= 0:
            raise ValueError("epsilon must be > 0")

    def update(self, x: float) -> None:
        if not math.isfinite(x):
            raise ValueError(f"non-finite input {x!r}")
        self.m = self.beta1 * self.m + (1.0 - self.beta1) * x
        dev = x - self.m
        self.v = self.beta2 * self.v + (1.0 - self.beta2) * dev * dev
        self.sample_count += 1

    @property
    def scale(self) -> float:
        return max(math.sqrt(self.v), self.epsilon)

    def __call__(self, x: float) -> float:
        return sigmoid((x - self.m) / self.scale)

    def transform(self, x: np.ndarray) -> np.ndarray:
        """Vectorized :meth:`__call__` (agrees with the scalar path to rounding)."""
        z = (np.asarray(x, dtype=float) - self.m) / self.scale
        out = np.empty_like(z)
        pos = z >= 0
        out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
        e = np.exp(z[~pos])
        out[~pos] = e / (1.0 + e)
        return out

    def copy(self) -> "Standardizer":
        return Standardizer(self.beta1, self.beta2, self.epsilon, self.m, self.v, self.sample_count)


def stdizer_update(std: Standardizer, x: float) -> Standardizer:
    std.update(x)
    return std


def standardize(std: Standardizer, x: float) -> float:
    return std(x)
