"""Tabular spatial value function with per-cell ADAM state.

Dispatch samples are updated with the completion-weighted (expected) TD target
before the trip outcome is known; idle samples decay the driver's cell toward
zero at rate ``gamma``.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Optional, Sequence

import numpy as np

from .domain import AssignmentKind, GridSpec


@dataclass
class ValueTable:
    values: np.ndarray

    @classmethod
    def zeros(cls, n_cells: int) -> "ValueTable":
        return cls(np.zeros(int(n_cells), dtype=float))

    def __len__(self) -> int:
        return len(self.values)

    def __getitem__(self, cell: int) -> float:
        return float(self.values[cell])

    def copy(self) -> "ValueTable":
        return ValueTable(self.values.copy())

    def save_csv(self, path, grid: GridSpec) -> None:
        """Write ``cell_id,row,col,value`` rows; floats use repr so reloading is exact."""
        if len(self.values) != grid.count:
            raise ValueError(f"table has {len(self.values)} cells, grid has {grid.count}")
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["cell_id", "row", "col", "value"])
            for cid, v in enumerate(self.values.tolist()):
                r, c = grid.coords(cid)
                w.writerow([cid, r, c, repr(v)])

    @classmethod
    def load_csv(cls, path) -> "ValueTable":
        path = Path(path)
        if not path.exists():
            raise FileNotFoundError(f"value table not found: {path}")
        with open(path, newline="") as fh:
            rows = list(csv.DictReader(fh))
        if not rows:
            raise ValueError(f"value table {path} is empty")
        ids = [int(r["cell_id"]) for r in rows]
        if sorted(ids) != list(range(len(ids))):
            raise ValueError(f"value table {path}: cell ids must cover 0..{len(ids) - 1}")
        values = np.zeros(len(ids))
        for cid, r in zip(ids, rows):
            values[cid] = float(r["value"])
        return cls(values)


@dataclass
class AdamState:
    n_cells: int
    base_lr: float = 0.05
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8
    m1: np.ndarray = field(init=False)
    m2: np.ndarray = field(init=False)
    step: np.ndarray = field(init=False)

    def __post_init__(self):
        if self.base_lr <= 0:
            raise ValueError("base_lr must be > 0")
        if not (0 <= self.beta1 < 1 and 0 <= self.beta2 < 1):
            raise ValueError("ADAM betas must lie in [0, 1)")
        if self.epsilon <= 0:
            raise ValueError("epsilon must be > 0")
        self.m1 = np.zeros(self.n_cells)
        self.m2 = np.zeros(self.n_cells)
        self.step = np.zeros(self.n_cells, dtype=np.int64)

    def copy(self) -> "AdamState":
        other = AdamState(self.n_cells, self.base_lr, self.beta1, self.beta2, self.epsilon)
        other.m1 = self.m1.copy()
        other.m2 = self.m2.copy()
        other.step = self.step.copy()
        return other


@dataclass(frozen=True, slots=True)
class DispatchSample:
    s: int
    s_prime: int
    smoothed_reward: float = 0.0
    p_c: float = 1.0
    kind: AssignmentKind = AssignmentKind.DISPATCH

    @classmethod
    def idle(cls, s: int) -> "DispatchSample":
        return cls(s, s, 0.0, 1.0, AssignmentKind.IDLE)


def _check_gamma(gamma: float) -> None:
    if not 0.0 <= gamma < 1.0:
        raise ValueError(f"gamma must lie in [0, 1), got {gamma}")


def expected_td_target(sample: DispatchSample, V: ValueTable, gamma: float) -> float:
    """``p_c*(r + gamma*V[s']) + (1 - p_c)*gamma*V[s]``."""
    _check_gamma(gamma)
    if sample.kind is not AssignmentKind.DISPATCH:
        raise ValueError("expected_td_target needs a dispatch sample")
    vals = V.values
    p = sample.p_c
    return p * (sample.smoothed_reward + gamma * vals[sample.s_prime]) + (1.0 - p) * (gamma * vals[sample.s])


def td_delta(sample: DispatchSample, V: ValueTable, gamma: float) -> float:
    _check_gamma(gamma)
    v_s = V.values[sample.s]
    if sample.kind is AssignmentKind.IDLE:
        return float(gamma * v_s - v_s)
    # written in the same grouping as the dispatch rule so both policies agree bitwise
    p = sample.p_c
    v_o = V.values[sample.s_prime]
    return float(p * (sample.smoothed_reward + gamma * v_o - v_s) + (1.0 - p) * (gamma * v_s - v_s))


def adam_apply(V: ValueTable, adam: AdamState, cell: int, delta: float) -> None:
    """One ADAM ascent step on ``V[cell]`` treating ``delta`` as the gradient (in place)."""
    if not math.isfinite(delta):
        raise ValueError(f"non-finite TD delta {delta!r}")
    adam.step[cell] += 1
    t = int(adam.step[cell])
    m1 = adam.beta1 * adam.m1[cell] + (1.0 - adam.beta1) * delta
    m2 = adam.beta2 * adam.m2[cell] + (1.0 - adam.beta2) * delta * delta
    adam.m1[cell] = m1
    adam.m2[cell] = m2
    m_hat = m1 / (1.0 - adam.beta1**t)
    v_hat = m2 / (1.0 - adam.beta2**t)
    V.values[cell] += adam.base_lr * m_hat / (math.sqrt(v_hat) + adam.epsilon)


def sgd_apply(V: ValueTable, cell: int, delta: float, lr: float) -> None:
    """Plain constant-step update ``V[cell] += lr * delta``."""
    V.values[cell] += lr * delta


def batch_update(
    samples: Sequence[DispatchSample],
    V: ValueTable,
    adam: Optional[AdamState],
    gamma: float,
    sgd_lr: Optional[float] = None,
) -> None:
    """Apply the TD update for each sample in order, mutating ``V`` (and ``adam``).

    Pass ``adam=None`` with ``sgd_lr`` for the constant-step mode.
    """
    _check_gamma(gamma)
    if adam is None and sgd_lr is None:
        raise ValueError("need an AdamState or an sgd_lr")
    for sample in samples:
        delta = td_delta(sample, V, gamma)
        if adam is None:
            sgd_apply(V, sample.s, delta, sgd_lr)
        else:
            adam_apply(V, adam, sample.s, delta)


def idle_update(
    cells: Iterable[int],
    V: ValueTable,
    adam: Optional[AdamState],
    gamma: float,
    sgd_lr: Optional[float] = None,
) -> None:
    """Idle-sample updates for a list of driver cells.

    Equivalent to :func:`batch_update` on ``[DispatchSample.idle(c) for c in cells]``:
    updates on distinct cells commute, so repeated cells are processed in layers
    (k-th occurrence of every cell in layer k) and each layer is vectorized.
    """
    _check_gamma(gamma)
    cells = np.asarray(list(cells), dtype=np.int64)
    if cells.size == 0:
        return
    order = np.argsort(cells, kind="stable")
    sc = cells[order]
    first = np.r_[0, np.nonzero(np.diff(sc))[0] + 1]
    counts = np.diff(np.r_[first, sc.size])
    uniq = sc[first]
    vals = V.values
    for layer in range(int(counts.max())):
        idx = uniq[counts > layer]
        v = vals[idx]
        delta = gamma * v - v
        if adam is None:
            vals[idx] = v + sgd_lr * delta
            continue
        adam.step[idx] += 1
        t = adam.step[idx]
        m1 = adam.beta1 * adam.m1[idx] + (1.0 - adam.beta1) * delta
        m2 = adam.beta2 * adam.m2[idx] + (1.0 - adam.beta2) * delta * delta
        adam.m1[idx] = m1
        adam.m2[idx] = m2
        m_hat = m1 / (1.0 - adam.beta1**t)
        v_hat = m2 / (1.0 - adam.beta2**t)
        vals[idx] = v + adam.base_lr * m_hat / (np.sqrt(v_hat) + adam.epsilon)
