"""Dispatch policies sharing one per-round interface.

Each policy gets a :class:`MarketSnapshot` every 2-second round through
:meth:`DispatchPolicy.step` and the requests settled in that round through
:meth:`DispatchPolicy.observe`. Learning policies only mutate their tables on
``T_up`` ticks; between ticks they score against a fixed state.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from typing import Optional, Sequence

import numpy as np

from .bandit import LmUcbState, MetricsWindow, ucb_feedback
from .conditioning import RewardSmoother, Standardizer, sigmoid
from .domain import MarketSnapshot, Order, OrderDriverPair
from .matching import (
    EdgeWeights,
    MatchRecord,
    MatchResult,
    ScoringState,
    WeightedEdge,
    match_round,
    solve_sparse,
)
from .value_store import AdamState, DispatchSample, ValueTable, batch_update, idle_update, td_delta, adam_apply, sgd_apply

DAY_SECONDS = 86400.0

# Table 3, City I boundary values (start, finish)
CITY_I_W_REW = (0.430, 0.008)
CITY_I_W_P = (0.002, 0.004)


@dataclass(frozen=True)
class CompletionModel:
    """``p_c = sigmoid(a - b * pickup_km)``."""

    a: float = 2.0
    b: float = 0.6

    def __post_init__(self):
        if self.a < 0 or self.b < 0:
            raise ValueError("completion model parameters must be >= 0")

    def __call__(self, pickup_distance: float) -> float:
        return sigmoid(self.a - self.b * pickup_distance / 1000.0)

    def batch(self, pickup_distance: np.ndarray) -> np.ndarray:
        z = self.a - self.b * np.asarray(pickup_distance, dtype=float) / 1000.0
        return 1.0 / (1.0 + np.exp(-z))


@dataclass
class PolicyConfig:
    gamma: float = 0.9
    w_rew: tuple[float, float] = CITY_I_W_REW
    w_p: tuple[float, float] = CITY_I_W_P
    t_up: float = 10.0
    feedback_interval: float = 60.0
    day_start: float = 0.0
    day_end: float = DAY_SECONDS
    round_length: float = 2.0
    # value learning
    use_adam: bool = True
    base_lr: float = 0.05
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_epsilon: float = 1e-8
    sgd_lr: float = 0.05
    reset_values_daily: bool = False
    # reward smoothing
    smoothing: bool = True
    smoothing_beta: float = 0.9
    smoothing_init_first: bool = True
    # edge standardization
    standardize: bool = True
    std_beta1: float = 0.99
    std_beta2: float = 0.999
    std_epsilon: float = 1e-9
    raw_sum: bool = False
    # pruning: a fixed threshold, or None for LM-UCB
    threshold: Optional[float] = None
    ucb_alpha_q: float = 0.8
    ucb_gamma_n: float = 0.99
    ucb_c: float = 0.1
    ucb_arms: Sequence[float] = tuple(np.linspace(0.0, 0.3, 41).tolist())

    def __post_init__(self):
        if not 0.0 <= self.gamma < 1.0:
            raise ValueError(f"gamma must lie in [0, 1), got {self.gamma}")
        for w in self.w_rew:
            if not 0.0 <= w <= 1.0:
                raise ValueError(f"w_rew boundary values must lie in [0, 1], got {self.w_rew}")
        for w in self.w_p:
            if w < 0:
                raise ValueError(f"w_p boundary values must be >= 0, got {self.w_p}")
        if self.round_length <= 0 or self.t_up <= 0 or self.feedback_interval <= 0:
            raise ValueError("round_length, t_up and feedback_interval must be > 0")
        if not math.isclose(self.t_up / self.round_length, round(self.t_up / self.round_length)):
            raise ValueError("t_up must be a multiple of the dispatch round length")
        if not self.day_start < self.day_end:
            raise ValueError("day_start must precede day_end")
        if self.threshold is not None and not 0.0 <= self.threshold <= 1.0:
            raise ValueError("threshold must lie in [0, 1]")


def interpolate_weights(config: PolicyConfig, t: float) -> EdgeWeights:
    """Linear interpolation of ``(w_rew, w_p)`` over the day; ``t`` is clamped to the day window.

    Times past one day wrap, so every simulated day restarts the schedule.
    """
    tod = t % DAY_SECONDS if t >= DAY_SECONDS else t
    tod = min(max(tod, config.day_start), config.day_end)
    frac = (tod - config.day_start) / (config.day_end - config.day_start)
    if frac <= 0.0:
        return EdgeWeights(config.w_rew[0], config.w_p[0])
    if frac >= 1.0:
        return EdgeWeights(config.w_rew[1], config.w_p[1])
    w_rew = config.w_rew[0] + frac * (config.w_rew[1] - config.w_rew[0])
    w_p = config.w_p[0] + frac * (config.w_p[1] - config.w_p[0])
    return EdgeWeights(min(max(w_rew, 0.0), 1.0), max(w_p, 0.0))


def _is_tick(t: float, period: float) -> bool:
    q = t / period
    return abs(q - round(q)) < 1e-9


class DispatchPolicy:
    """Base class: no learning, no state."""

    name = "policy"

    def __init__(self):
        self.last_records: list[MatchRecord] = []
        self.learning = True

    def step(self, snapshot: MarketSnapshot) -> MatchResult:
        raise NotImplementedError

    def observe(self, t: float, settled: Sequence[tuple[bool, bool]]) -> None:
        """Requests settled this round as ``(accepted, completed)`` flags."""

    def activate(self, t: float) -> None:
        """Called when the policy (re)gains control of the market, e.g. in an A/B run."""

    @property
    def values(self) -> Optional[np.ndarray]:
        return None

    @property
    def threshold(self) -> Optional[float]:
        return None


def _result_from(snapshot: MarketSnapshot, pairs: list[OrderDriverPair], w: np.ndarray, chosen: list[int]) -> MatchResult:
    edges = [WeightedEdge(pairs[k], float(w[k])) for k in chosen]
    used_o = {e.pair.order.order_id for e in edges}
    used_d = {e.pair.driver.driver_id for e in edges}
    return MatchResult(
        pairs=edges,
        unmatched_orders=[o for o in snapshot.open_orders if o.order_id not in used_o],
        unmatched_drivers=[d for d in snapshot.idle_drivers if d.driver_id not in used_d],
        total_weight=math.fsum(e.weight for e in edges),
    )


def _coords(pairs: Sequence[OrderDriverPair]) -> tuple[np.ndarray, np.ndarray, int, int]:
    o_idx: dict[int, int] = {}
    d_idx: dict[int, int] = {}
    rows = np.empty(len(pairs), dtype=np.int64)
    cols = np.empty(len(pairs), dtype=np.int64)
    for k, p in enumerate(pairs):
        rows[k] = o_idx.setdefault(p.order.order_id, len(o_idx))
        cols[k] = d_idx.setdefault(p.driver.driver_id, len(d_idx))
    return rows, cols, len(o_idx), len(d_idx)


class MyopicPolicy(DispatchPolicy):
    """Batched matcher minimizing total pickup distance, maximum cardinality first."""

    name = "myopic"

    def step(self, snapshot: MarketSnapshot) -> MatchResult:
        pairs = snapshot.candidate_pairs
        self.last_records = []
        if not pairs:
            return MatchResult([], list(snapshot.open_orders), list(snapshot.idle_drivers), 0.0)
        dist = np.fromiter((p.pickup_distance for p in pairs), dtype=float, count=len(pairs))
        rows, cols, n_o, n_d = _coords(pairs)
        # any larger matching outweighs every smaller one
        big = (min(n_o, n_d) + 1) * (float(dist.max()) + 1.0)
        w = big - dist
        chosen = solve_sparse(rows, cols, w, n_o, n_d)
        t = snapshot.time
        self.last_records = [
            MatchRecord(t, pairs[k].order.order_id, pairs[k].driver.driver_id,
                        pairs[k].completion_prob, None, None, float(dist[k]), float(-dist[k]))
            for k in chosen
        ]
        return _result_from(snapshot, pairs, -dist, chosen)


@dataclass
class _PendingDispatch:
    order: Order
    driver_cell: int
    p_c: float
    penalty: float


class RLWPolicy(DispatchPolicy):
    """Online expected-TD value iteration with standardized edges and LM-UCB pruning."""

    name = "rlw"

    def __init__(self, config: PolicyConfig, n_cells: int, rng: Optional[np.random.Generator] = None):
        super().__init__()
        self.config = config
        self.n_cells = n_cells
        rng = rng if rng is not None else np.random.default_rng(0)
        self.V = ValueTable.zeros(n_cells)
        self.adam = (
            AdamState(n_cells, config.base_lr, config.adam_beta1, config.adam_beta2, config.adam_epsilon)
            if config.use_adam
            else None
        )
        self.smoother = (
            RewardSmoother(n_cells, config.smoothing_beta, config.smoothing_init_first) if config.smoothing else None
        )
        if config.standardize:
            mk = lambda: Standardizer(config.std_beta1, config.std_beta2, config.std_epsilon)  # noqa: E731
            self.r_std, self.dv_std, self.p_std = mk(), mk(), mk()
        else:
            self.r_std = self.dv_std = self.p_std = None
        if config.threshold is None:
            self.ucb: Optional[LmUcbState] = LmUcbState.with_random_start(
                rng,
                arms=np.asarray(config.ucb_arms, dtype=float),
                alpha_q=config.ucb_alpha_q,
                gamma_n=config.ucb_gamma_n,
                c=config.ucb_c,
            )
            self._th = self.ucb.threshold
        else:
            self.ucb = None
            self._th = float(config.threshold)
        self.window = MetricsWindow(config.feedback_interval)
        self.batch: list[_PendingDispatch] = []
        self.threshold_trace: list[dict] = []
        self._day = 0

    @property
    def values(self) -> np.ndarray:
        return self.V.values

    @property
    def threshold(self) -> float:
        return self._th

    def _scoring_state(self) -> ScoringState:
        return ScoringState(self.V.values, self.smoother, self.r_std, self.dv_std, self.p_std, self.config.gamma)

    def activate(self, t: float) -> None:
        self.batch.clear()
        self.window.clear()

    def step(self, snapshot: MarketSnapshot) -> MatchResult:
        cfg = self.config
        t = snapshot.time
        if cfg.reset_values_daily:
            day = int(t // DAY_SECONDS)
            if day != self._day:
                self._day = day
                self.V.values[:] = 0.0
        weights = interpolate_weights(cfg, t)
        outcome = match_round(snapshot, self._scoring_state(), weights, self._th, cfg.raw_sum)
        self.last_records = outcome.records
        result = outcome.result
        if self.learning:
            for e in result.pairs:
                p = e.pair
                self.batch.append(_PendingDispatch(p.order, p.driver.location.id, p.completion_prob, p.penalty_raw))
            if _is_tick(t, cfg.t_up):
                self._update([d.location.id for d in result.unmatched_drivers])
        return result

    def _update(self, idle_cells: list[int]) -> None:
        cfg = self.config
        g = cfg.gamma
        vals = self.V.values
        for item in self.batch:
            o = item.order
            if self.smoother is not None:
                s_o = self.smoother.update(o.origin.id, o.price)
            else:
                s_o = o.price
            sample = DispatchSample(item.driver_cell, o.destination.id, s_o, item.p_c)
            delta = td_delta(sample, self.V, g)
            if self.r_std is not None:
                self.r_std.update(s_o)
                self.dv_std.update(g * vals[o.destination.id] - vals[item.driver_cell])
                self.p_std.update(item.penalty)
            if self.adam is not None:
                adam_apply(self.V, self.adam, item.driver_cell, delta)
            else:
                sgd_apply(self.V, item.driver_cell, delta, cfg.sgd_lr)
        self.batch.clear()
        idle_update(idle_cells, self.V, self.adam, g, None if self.adam is not None else cfg.sgd_lr)

    def observe(self, t: float, settled: Sequence[tuple[bool, bool]]) -> None:
        if not self.learning:
            return
        for accepted, completed in settled:
            self.window.record(t, accepted, completed)
        if self.ucb is None or t <= 0 or not _is_tick(t, self.config.feedback_interval):
            return
        cr, ar = self.window.rates(t)
        arm = self.ucb.current_arm
        self._th = ucb_feedback(self.ucb, cr, ar)
        self.threshold_trace.append(
            {"time": t, "arm_index": arm, "threshold": float(self.ucb.arms[arm]), "q": cr + 0.1 * ar, "cr": cr, "ar": ar}
        )


class V1D3Policy(DispatchPolicy):
    """Online value iteration with completion-weighted raw edges and a fixed learning rate.

    Edges are ``p_c * (price + gamma*V[dest] - V[driver])``; no smoothing,
    standardization, adaptive step sizes or pruning.
    """

    name = "v1d3"

    def __init__(self, n_cells: int, gamma: float = 0.9, lr: float = 0.05, t_up: float = 10.0, values=None):
        super().__init__()
        if not 0.0 <= gamma < 1.0:
            raise ValueError(f"gamma must lie in [0, 1), got {gamma}")
        self.gamma = gamma
        self.lr = lr
        self.t_up = t_up
        self.V = ValueTable.zeros(n_cells) if values is None else ValueTable(np.array(values, dtype=float))
        self.samples: list[DispatchSample] = []

    @property
    def values(self) -> np.ndarray:
        return self.V.values

    def activate(self, t: float) -> None:
        self.samples.clear()

    def _score(self, snapshot: MarketSnapshot):
        pairs = snapshot.candidate_pairs
        n = len(pairs)
        vals = self.V.values
        pc = np.fromiter((p.completion_prob for p in pairs), dtype=float, count=n)
        price = np.fromiter((p.order.price for p in pairs), dtype=float, count=n)
        dest = np.fromiter((p.order.destination.id for p in pairs), dtype=np.int64, count=n)
        here = np.fromiter((p.driver.location.id for p in pairs), dtype=np.int64, count=n)
        dist = np.fromiter((p.pickup_distance for p in pairs), dtype=float, count=n)
        dv = self.gamma * vals[dest] - vals[here]
        return pc, price, dv, dist, pc * (price + dv)

    def step(self, snapshot: MarketSnapshot) -> MatchResult:
        pairs = snapshot.candidate_pairs
        t = snapshot.time
        if pairs:
            pc, price, dv, dist, w = self._score(snapshot)
            rows, cols, n_o, n_d = _coords(pairs)
            chosen = solve_sparse(rows, cols, w, n_o, n_d)
            self.last_records = [
                MatchRecord(t, pairs[k].order.order_id, pairs[k].driver.driver_id, float(pc[k]),
                            float(price[k]), float(dv[k]), float(dist[k]), float(w[k]))
                for k in chosen
            ]
            result = _result_from(snapshot, pairs, w, chosen)
        else:
            self.last_records = []
            result = MatchResult([], list(snapshot.open_orders), list(snapshot.idle_drivers), 0.0)
        if self.learning:
            for e in result.pairs:
                p = e.pair
                self.samples.append(
                    DispatchSample(p.driver.location.id, p.order.destination.id, p.order.price, p.completion_prob)
                )
            if _is_tick(t, self.t_up):
                batch_update(self.samples, self.V, None, self.gamma, sgd_lr=self.lr)
                self.samples.clear()
                idle_update([d.location.id for d in result.unmatched_drivers], self.V, None, self.gamma, self.lr)
        return result


class FrozenTablePolicy(V1D3Policy):
    """V1D3-style edges against a value table loaded from an earlier run; never updates."""

    name = "frozen"

    def __init__(self, values, gamma: float = 0.9):
        super().__init__(len(values), gamma=gamma, values=values)
        self.learning = False

    @classmethod
    def from_csv(cls, path, gamma: float = 0.9) -> "FrozenTablePolicy":
        return cls(ValueTable.load_csv(path).values, gamma=gamma)


def v1d3_equivalent_config(gamma: float = 0.9, lr: float = 0.05, t_up: float = 10.0) -> PolicyConfig:
    """RLW settings under which it makes the same decisions as :class:`V1D3Policy`."""
    return PolicyConfig(
        gamma=gamma,
        w_rew=(1.0, 1.0),
        w_p=(0.0, 0.0),
        t_up=t_up,
        use_adam=False,
        sgd_lr=lr,
        smoothing=False,
        standardize=False,
        raw_sum=True,
        threshold=0.0,
    )
