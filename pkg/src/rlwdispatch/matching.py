"""Edge scoring, completion-probability pruning and maximum-weight assignment."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np
from scipy.optimize import linear_sum_assignment

from .conditioning import RewardSmoother, Standardizer
from .domain import Driver, MarketSnapshot, Order, OrderDriverPair


@dataclass(frozen=True)
class EdgeWeights:
    w_rew: float
    w_p: float = 0.0

    def __post_init__(self):
        if not 0.0 <= self.w_rew <= 1.0:
            raise ValueError(f"w_rew must lie in [0, 1], got {self.w_rew}")
        if self.w_p < 0:
            raise ValueError(f"w_p must be >= 0, got {self.w_p}")

    @property
    def w_res(self) -> float:
        return 1.0 - self.w_rew


@dataclass(frozen=True, slots=True)
class WeightedEdge:
    pair: OrderDriverPair
    weight: float


@dataclass
class MatchResult:
    pairs: list[WeightedEdge] = field(default_factory=list)
    unmatched_orders: list[Order] = field(default_factory=list)
    unmatched_drivers: list[Driver] = field(default_factory=list)
    total_weight: float = 0.0

    @property
    def matched(self) -> list[tuple[Order, Driver]]:
        return [(e.pair.order, e.pair.driver) for e in self.pairs]

    def __len__(self) -> int:
        return len(self.pairs)


@dataclass(frozen=True, slots=True)
class MatchRecord:
    """Per-matched-pair components kept for logging and the batch update."""

    time: float
    order_id: int
    driver_id: int
    p_c: float
    r_star: float
    dv_star: float
    p_star: float
    edge_weight: float

    def as_dict(self) -> dict:
        return {
            "time": self.time,
            "order_id": self.order_id,
            "driver_id": self.driver_id,
            "p_c": self.p_c,
            "r_star": self.r_star,
            "dv_star": self.dv_star,
            "p_star": self.p_star,
            "edge_weight": self.edge_weight,
        }


def edge_weight(pair: OrderDriverPair, r_star: float, dv_star: float, p_star: float, weights: EdgeWeights) -> float:
    """``p_c * (w_rew*r* + w_res*dv* - w_p*p*)``."""
    return pair.completion_prob * (weights.w_rew * r_star + weights.w_res * dv_star - weights.w_p * p_star)


def prune(edges: Sequence[WeightedEdge], th: float) -> list[WeightedEdge]:
    """Keep edges whose completion probability is strictly above ``th``."""
    if not 0.0 <= th <= 1.0:
        raise ValueError(f"threshold must lie in [0, 1], got {th}")
    return [e for e in edges if e.pair.completion_prob > th]


def solve_assignment(edges: Sequence[WeightedEdge]) -> MatchResult:
    """Maximum-total-weight matching over a sparse set of order-driver edges.

    Missing pairs are never matched and non-positive edges are left unmatched
    (they cannot raise the total).
    """
    if not edges:
        return MatchResult()
    orders = sorted({e.pair.order.order_id: e.pair.order for e in edges}.values(), key=lambda o: o.order_id)
    drivers = sorted({e.pair.driver.driver_id: e.pair.driver for e in edges}.values(), key=lambda d: d.driver_id)
    o_idx = {o.order_id: i for i, o in enumerate(orders)}
    d_idx = {d.driver_id: j for j, d in enumerate(drivers)}
    rows = np.fromiter((o_idx[e.pair.order.order_id] for e in edges), dtype=np.int64, count=len(edges))
    cols = np.fromiter((d_idx[e.pair.driver.driver_id] for e in edges), dtype=np.int64, count=len(edges))
    w = np.fromiter((e.weight for e in edges), dtype=float, count=len(edges))
    chosen = solve_sparse(rows, cols, w, len(orders), len(drivers))
    picked = [edges[k] for k in chosen]
    picked.sort(key=lambda e: (e.pair.order.order_id, e.pair.driver.driver_id))
    used_o = {e.pair.order.order_id for e in picked}
    used_d = {e.pair.driver.driver_id for e in picked}
    return MatchResult(
        pairs=picked,
        unmatched_orders=[o for o in orders if o.order_id not in used_o],
        unmatched_drivers=[d for d in drivers if d.driver_id not in used_d],
        total_weight=math.fsum(e.weight for e in picked),
    )


def solve_sparse(rows: np.ndarray, cols: np.ndarray, weights: np.ndarray, n_rows: int, n_cols: int) -> list[int]:
    """Indices of the edges in a maximum-weight matching.

    Edges are given in coordinate form. Non-edges and non-positive edges are
    zero in the dense matrix handed to the Hungarian solver and get stripped
    from its answer, which leaves the optimum unchanged.
    """
    if len(weights) == 0:
        return []
    if not np.all(np.isfinite(weights)):
        raise ValueError("edge weights must be finite")
    edge_at = np.full((n_rows, n_cols), -1, dtype=np.int64)
    if len(set(zip(rows.tolist(), cols.tolist()))) != len(rows):
        raise ValueError("duplicate order-driver edge")
    edge_at[rows, cols] = np.arange(len(weights))
    dense = np.zeros((n_rows, n_cols))
    dense[rows, cols] = np.maximum(weights, 0.0)
    r, c = linear_sum_assignment(dense, maximize=True)
    picked = edge_at[r, c]
    keep = (picked >= 0) & (dense[r, c] > 0)
    return sorted(picked[keep].tolist())


@dataclass
class ScoringState:
    """Read-only view of the learning state used while matching one round."""

    values: np.ndarray
    smoother: Optional[RewardSmoother]
    r_std: Optional[Standardizer]
    dv_std: Optional[Standardizer]
    p_std: Optional[Standardizer]
    gamma: float


@dataclass
class RoundOutcome:
    result: MatchResult
    records: list[MatchRecord]


def match_round(
    snapshot: MarketSnapshot,
    state: ScoringState,
    weights: EdgeWeights,
    th: float = 0.0,
    raw_sum: bool = False,
) -> RoundOutcome:
    """Score, prune and match all candidate pairs of one dispatch round.

    With standardizers present each component goes through its sigmoid
    standardizer; with ``state.r_std`` etc. set to ``None`` the raw component
    is used. ``raw_sum`` replaces ``(w_rew, w_res)`` with ``(1, 1)``.
    """
    pairs = snapshot.candidate_pairs
    nothing = RoundOutcome(
        MatchResult([], list(snapshot.open_orders), list(snapshot.idle_drivers), 0.0), []
    )
    if not pairs:
        return nothing
    n = len(pairs)
    pc = np.fromiter((p.completion_prob for p in pairs), dtype=float, count=n)
    keep = np.nonzero(pc > th)[0]
    if keep.size == 0:
        return nothing
    pairs = [pairs[k] for k in keep.tolist()]
    pc = pc[keep]
    n = len(pairs)
    vals = state.values
    origin = np.fromiter((p.order.origin.id for p in pairs), dtype=np.int64, count=n)
    dest = np.fromiter((p.order.destination.id for p in pairs), dtype=np.int64, count=n)
    dcell = np.fromiter((p.driver.location.id for p in pairs), dtype=np.int64, count=n)
    penalty = np.fromiter((p.penalty_raw for p in pairs), dtype=float, count=n)
    price = np.fromiter((p.order.price for p in pairs), dtype=float, count=n)
    if state.smoother is None:
        r = price
    else:
        sm = state.smoother
        r = sm.table[origin]
        if sm.init_first:
            r = np.where(sm.initialized[origin], r, price)
    dv = state.gamma * vals[dest] - vals[dcell]
    r_s = r if state.r_std is None else state.r_std.transform(r)
    dv_s = dv if state.dv_std is None else state.dv_std.transform(dv)
    p_s = penalty if state.p_std is None else state.p_std.transform(penalty)
    if raw_sum:
        w = pc * (r_s + dv_s - weights.w_p * p_s)
    else:
        w = pc * (weights.w_rew * r_s + weights.w_res * dv_s - weights.w_p * p_s)

    o_idx: dict[int, int] = {}
    d_idx: dict[int, int] = {}
    rows = np.empty(n, dtype=np.int64)
    cols = np.empty(n, dtype=np.int64)
    for k, p in enumerate(pairs):
        rows[k] = o_idx.setdefault(p.order.order_id, len(o_idx))
        cols[k] = d_idx.setdefault(p.driver.driver_id, len(d_idx))
    chosen = solve_sparse(rows, cols, w, len(o_idx), len(d_idx))

    t = snapshot.time
    edges = [WeightedEdge(pairs[k], float(w[k])) for k in chosen]
    records = [
        MatchRecord(t, pairs[k].order.order_id, pairs[k].driver.driver_id, float(pc[k]),
                    float(r_s[k]), float(dv_s[k]), float(p_s[k]), float(w[k]))
        for k in chosen
    ]
    used_o = {e.pair.order.order_id for e in edges}
    used_d = {e.pair.driver.driver_id for e in edges}
    result = MatchResult(
        pairs=edges,
        unmatched_orders=[o for o in snapshot.open_orders if o.order_id not in used_o],
        unmatched_drivers=[d for d in snapshot.idle_drivers if d.driver_id not in used_d],
        total_weight=math.fsum(e.weight for e in edges),
    )
    return RoundOutcome(result, records)
