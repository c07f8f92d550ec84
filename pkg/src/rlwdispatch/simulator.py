"""Discrete-time ridehailing marketplace.

Orders arrive per 2-second dispatch round (Poisson per cell from a preset, or
replayed from a :class:`TripEventLog`); idle drivers are matched by a policy;
each dispatch is settled immediately by a Bernoulli draw against its
completion probability. Drivers never reposition on their own.
"""

from __future__ import annotations

import functools
import hashlib
import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Iterable, Optional, Sequence

import numpy as np
from scipy.optimize import brentq

from .domain import (
    DEFAULT_BROADCAST_RADIUS,
    Assignment,
    Driver,
    GridSpec,
    MarketSnapshot,
    Order,
    OrderDriverPair,
    Outcome,
)
from .policy import CompletionModel, DispatchPolicy

ROUND_LENGTH = 2.0
T_UP = 10.0
REPORT_WINDOW = 300.0


# --------------------------------------------------------------------------- presets


@dataclass
class CityPreset:
    name: str
    rows: int
    cols: int
    cell_size: float
    driver_count: int
    intensity: np.ndarray  # (24, n_cells) requests per hour
    dest_probs: np.ndarray  # (K, n_cells, n_cells) row-stochastic
    dest_regime: np.ndarray  # (24,) hour -> index into dest_probs
    driver_init: np.ndarray  # (n_cells,) probabilities
    price_base: float = 2.5
    price_per_km: float = 1.2
    speed: float = 8.0
    cancel_a: float = 2.0
    cancel_b: float = 0.6
    mean_trip_length: Optional[float] = None

    def __post_init__(self):
        n = self.rows * self.cols
        self.intensity = np.asarray(self.intensity, dtype=float)
        self.dest_probs = np.asarray(self.dest_probs, dtype=float)
        self.dest_regime = np.asarray(self.dest_regime, dtype=np.int64)
        self.driver_init = np.asarray(self.driver_init, dtype=float)
        if self.intensity.shape != (24, n):
            raise ValueError(f"intensity must have shape (24, {n})")
        if np.any(self.intensity < 0):
            raise ValueError("intensities must be >= 0")
        if self.dest_probs.ndim != 3 or self.dest_probs.shape[1:] != (n, n):
            raise ValueError(f"dest_probs must have shape (K, {n}, {n})")
        if np.any(self.dest_probs < 0) or not np.allclose(self.dest_probs.sum(axis=2), 1.0):
            raise ValueError("destination distributions must be non-negative and sum to 1 per origin")
        if self.dest_regime.shape != (24,) or self.dest_regime.min() < 0 or self.dest_regime.max() >= len(self.dest_probs):
            raise ValueError("dest_regime must map 24 hours onto dest_probs")
        if self.driver_init.shape != (n,) or not math.isclose(self.driver_init.sum(), 1.0):
            raise ValueError("driver_init must be a distribution over cells")
        if self.driver_count < 0:
            raise ValueError("driver_count must be >= 0")
        self.grid = GridSpec(self.rows, self.cols, self.cell_size)
        self._dest_cdf = np.cumsum(self.dest_probs, axis=2)
        self._dest_cdf[:, :, -1] = 1.0

    @property
    def n_cells(self) -> int:
        return self.rows * self.cols

    @property
    def completion_model(self) -> CompletionModel:
        return CompletionModel(self.cancel_a, self.cancel_b)

    def trip_metres(self) -> np.ndarray:
        """(n_cells, n_cells) trip lengths; same-cell trips count as half a cell."""
        return np.maximum(self.grid.distance_matrix, 0.5 * self.cell_size)

    def expected_trip_length(self) -> float:
        w = self.intensity.sum(axis=0)
        tl = self.trip_metres()
        total = 0.0
        for h in range(24):
            P = self.dest_probs[self.dest_regime[h]]
            total += float(self.intensity[h] @ (P * tl).sum(axis=1))
        return total / float(w.sum()) if w.sum() > 0 else 0.0


def _distance_decay_probs(grid: GridSpec, lam_per_km: float, attract: Optional[np.ndarray] = None) -> np.ndarray:
    tl = np.maximum(grid.distance_matrix, 0.5 * grid.cell_size) / 1000.0
    logits = lam_per_km * tl
    logits -= logits.max(axis=1, keepdims=True)
    P = np.exp(logits)
    if attract is not None:
        P = P * attract[None, :]
    return P / P.sum(axis=1, keepdims=True)


def _calibrate_decay(grid: GridSpec, origin_weight: np.ndarray, target_m: float, attract=None) -> float:
    """Distance exponent whose mean trip length (weighted by origin volume) hits ``target_m``."""
    tl = np.maximum(grid.distance_matrix, 0.5 * grid.cell_size)
    w = origin_weight / origin_weight.sum()

    def mean_len(lam: float) -> float:
        P = _distance_decay_probs(grid, lam, attract)
        return float(w @ (P * tl).sum(axis=1)) - target_m

    return brentq(mean_len, -20.0, 20.0, xtol=1e-12)


def _daily_profile() -> np.ndarray:
    """Relative demand per hour of day: morning and evening peaks, quiet night."""
    h = np.arange(24) + 0.5
    prof = 0.25 + 1.0 * np.exp(-0.5 * ((h - 8.5) / 1.5) ** 2) + 0.9 * np.exp(-0.5 * ((h - 18.5) / 2.0) ** 2)
    prof += 0.45 * np.exp(-0.5 * ((h - 13.0) / 3.0) ** 2)
    prof[(h < 6)] *= 0.35
    return prof / prof.mean()


# Table 1: normalized answer rate, normalized cancel rate, mean trip length (m), population scale
_CITY_TABLE = {
    "city_i": (0.63, 0.88, 5.54e3, "high"),
    "city_ii": (0.98, 1.00, 6.41e3, "high"),
    "city_iii": (0.00, 0.55, 6.43e3, "medium"),
    "city_iv": (1.00, 0.32, 5.90e3, "medium"),
    "city_v": (0.17, 0.19, 6.31e3, "low"),
    "city_vi": (0.73, 0.00, 4.34e3, "low"),
}
_POP_DEMAND = {"high": 1400.0, "medium": 900.0, "low": 500.0}


def city_preset(name: str) -> CityPreset:
    """Synthetic stand-in for one of the six cities' published statistics.

    Mean trip length is matched exactly by calibrating a distance-decay
    destination model; the normalized cancel rate sets the completion-model
    intercept and the normalized answer rate sets the supply level.
    """
    answer, cancel, trip_m, pop = _CITY_TABLE[name]
    rows = cols = 20
    cell = 500.0
    grid = GridSpec(rows, cols, cell)
    r, c = grid.row_of, grid.col_of
    centre = (rows - 1) / 2.0
    radial = np.hypot(r - centre, c - centre)
    spatial = np.exp(-radial / 6.0)
    spatial /= spatial.sum()
    intensity = _POP_DEMAND[pop] * _daily_profile()[:, None] * spatial[None, :]
    lam = _calibrate_decay(grid, spatial, trip_m)
    P = _distance_decay_probs(grid, lam)[None]
    drivers = int(round(_POP_DEMAND[pop] / 1400.0 * 260 * (0.7 + 0.6 * answer)))
    return CityPreset(
        name=name,
        rows=rows,
        cols=cols,
        cell_size=cell,
        driver_count=drivers,
        intensity=intensity,
        dest_probs=P,
        dest_regime=np.zeros(24, dtype=np.int64),
        driver_init=spatial,
        cancel_a=2.6 - 1.2 * cancel,
        cancel_b=0.6,
        mean_trip_length=trip_m,
    )


def imbalanced_preset(
    driver_count: int = 40,
    requests_per_hour: float = 300.0,
    cancel_a: float = 1.2,
    cancel_b: float = 0.9,
    size: int = 20,
    ring_km: float = 3.5,
) -> CityPreset:
    """Hot-spot mornings, dispersed evenings, on a ``size`` x ``size`` grid of 500 m cells.

    From 06:00 to 15:00 most requests start downtown (the central 4x4 block)
    and half of them end in the outer ring beyond ``ring_km`` from the
    centre. A driver dropped there is out of broadcast range of the hot spot
    and waits for the sparse local demand. Evening demand is spread evenly
    with short trips.
    """
    cell = 500.0
    grid = GridSpec(size, size, cell)
    r, c = grid.row_of, grid.col_of
    lo, hi = size // 2 - 2, size // 2 + 1
    downtown = ((r >= lo) & (r <= hi) & (c >= lo) & (c <= hi)).astype(float)
    suburb = 1.0 - downtown
    centre = (size - 1) / 2
    outer = (np.hypot(r - centre, c - centre) * cell / 1000.0 > ring_km).astype(float)
    hot = 0.85 * downtown / downtown.sum() + 0.15 * suburb / suburb.sum()
    flat = np.full(grid.count, 1.0 / grid.count)
    prof = _daily_profile()
    hours = np.arange(24)
    morning = (hours >= 6) & (hours < 15)
    intensity = np.where(morning[:, None], hot[None, :], flat[None, :]) * (requests_per_hour * prof)[:, None]
    near = _distance_decay_probs(grid, -0.35)
    to_downtown = _distance_decay_probs(grid, -0.2, attract=downtown + 1e-3)
    to_outer = _distance_decay_probs(grid, 0.0, attract=outer + 1e-3)
    am = 0.5 * to_downtown + 0.5 * to_outer
    P = np.stack([am, near])
    regime = np.where(morning, 0, 1)
    return CityPreset(
        name="imbalanced",
        rows=size,
        cols=size,
        cell_size=cell,
        driver_count=driver_count,
        intensity=intensity,
        dest_probs=P,
        dest_regime=regime,
        driver_init=hot,
        price_base=2.5,
        price_per_km=1.2,
        cancel_a=cancel_a,
        cancel_b=cancel_b,
    )


def tiny_preset() -> CityPreset:
    """3x3 grid with light uniform demand; handy for fast checks."""
    grid = GridSpec(3, 3, 500.0)
    n = grid.count
    return CityPreset(
        name="tiny",
        rows=3,
        cols=3,
        cell_size=500.0,
        driver_count=4,
        intensity=np.full((24, n), 30.0),
        dest_probs=np.full((1, n, n), 1.0 / n),
        dest_regime=np.zeros(24, dtype=np.int64),
        driver_init=np.full(n, 1.0 / n),
    )


PRESETS: dict[str, Callable[[], CityPreset]] = {
    **{k: functools.partial(city_preset, k) for k in _CITY_TABLE},
    "imbalanced": imbalanced_preset,
    "tiny": tiny_preset,
}


def get_preset(name: str, **kwargs) -> CityPreset:
    """Build a named preset; keyword arguments go to its factory."""
    try:
        factory = PRESETS[name]
    except KeyError:
        raise KeyError(f"unknown preset {name!r}; choose from {sorted(PRESETS)}") from None
    return factory(**kwargs)


# --------------------------------------------------------------------------- demand


def generate_demand(
    preset: CityPreset,
    t: float,
    rng: np.random.Generator,
    first_id: int = 0,
    round_length: float = ROUND_LENGTH,
    price_scale: float = 1.0,
) -> list[Order]:
    """Orders requested in the round ending at ``t``.

    Per-cell Poisson counts with mean ``intensity[hour, cell] * round_length / 3600``;
    destinations from the origin's distribution for that hour.
    """
    hour = int((t % 86400.0) // 3600.0)
    lam = preset.intensity[hour] * (round_length / 3600.0)
    counts = rng.poisson(lam)
    origins = np.nonzero(counts)[0]
    if origins.size == 0:
        return []
    cdf = preset._dest_cdf[preset.dest_regime[hour]]
    grid = preset.grid
    dist = grid.distance_matrix
    orders = []
    oid = first_id
    for o in origins.tolist():
        u = rng.random(int(counts[o]))
        dests = np.searchsorted(cdf[o], u, side="right")
        for d in np.minimum(dests, grid.count - 1).tolist():
            trip_m = max(float(dist[o, d]), 0.5 * grid.cell_size)
            price = price_scale * (preset.price_base + preset.price_per_km * trip_m / 1000.0)
            duration = max(1, math.ceil(trip_m / preset.speed))
            orders.append(Order(oid, grid.cells[o], grid.cells[d], price, float(t), float(duration)))
            oid += 1
    return orders


# --------------------------------------------------------------------------- event log


@dataclass
class TripEventLog:
    """Order-request and driver online/offline events, in time order."""

    records: list[dict] = field(default_factory=list)

    def __post_init__(self):
        last = -math.inf
        seen_orders: set[int] = set()
        for rec in self.records:
            if rec["t"] < last:
                raise ValueError("event timestamps must be non-decreasing")
            last = rec["t"]
            if rec["type"] == "order":
                if rec["id"] in seen_orders:
                    raise ValueError(f"duplicate order id {rec['id']}")
                seen_orders.add(rec["id"])
            elif rec["type"] != "driver":
                raise ValueError(f"unknown event type {rec['type']!r}")

    def write_jsonl(self, path) -> None:
        with open(path, "w") as fh:
            for rec in self.records:
                fh.write(json.dumps(rec) + "\n")

    @classmethod
    def read_jsonl(cls, path) -> "TripEventLog":
        with open(path) as fh:
            return cls([json.loads(line) for line in fh if line.strip()])

    @classmethod
    def from_preset(cls, preset: CityPreset, seed: int, horizon: float, price_scale: float = 1.0) -> "TripEventLog":
        streams = _Streams(seed)
        recs = []
        for i, cell in enumerate(_initial_driver_cells(preset, streams.drivers)):
            r, c = preset.grid.coords(cell)
            recs.append({"type": "driver", "t": 0, "id": i, "row": r, "col": c, "event": "online"})
        next_id = 0
        for t in _round_times(horizon):
            for o in generate_demand(preset, t, streams.demand, next_id, price_scale=price_scale):
                recs.append(order_record(o))
                next_id = o.order_id + 1
        return cls(recs)


def order_record(o: Order) -> dict:
    return {
        "type": "order",
        "t": int(o.request_time),
        "id": o.order_id,
        "o_row": o.origin.row,
        "o_col": o.origin.col,
        "d_row": o.destination.row,
        "d_col": o.destination.col,
        "price": o.price,
        "dur_s": int(o.trip_duration),
    }


# --------------------------------------------------------------------------- outcomes


@dataclass(frozen=True)
class Resolution:
    outcome: Outcome
    busy_for: float
    end_cell: int
    income: float


def resolve_assignment(
    assignment: Assignment,
    rng: Optional[np.random.Generator] = None,
    *,
    u: Optional[float] = None,
    speed: float = 8.0,
    cancel_fraction: float = 0.5,
) -> Resolution:
    """Settle a pending dispatch by a Bernoulli(p_c) draw.

    Pass either a generator or a pre-drawn uniform ``u``; the trip completes
    when ``u < p_c``.
    """
    if assignment.outcome is not Outcome.PENDING:
        raise RuntimeError("assignment already resolved")
    pair = assignment.pair
    if u is None:
        if rng is None:
            raise ValueError("need rng or u")
        u = float(rng.random())
    pickup_time = pair.pickup_distance / speed
    if u < pair.completion_prob:
        assignment.settle(Outcome.COMPLETED)
        o = pair.order
        return Resolution(Outcome.COMPLETED, pickup_time + o.trip_duration, o.destination.id, o.price)
    assignment.settle(Outcome.CANCELLED)
    return Resolution(Outcome.CANCELLED, pickup_time * cancel_fraction, pair.driver.location.id, 0.0)


# --------------------------------------------------------------------------- metrics


@dataclass(frozen=True)
class Metrics:
    cr: float
    ar: float
    sr: float
    income: float


def compute_metrics(requests: int, accepted: int, completed: int, dispatches: int, income: float = 0.0) -> Metrics:
    return Metrics(
        cr=completed / requests if requests else 0.0,
        ar=accepted / requests if requests else 0.0,
        sr=completed / dispatches if dispatches else 0.0,
        income=income,
    )


# --------------------------------------------------------------------------- run


@dataclass
class SimConfig:
    seed: int = 0
    horizon: float = 3600.0
    round_length: float = ROUND_LENGTH
    broadcast_radius: float = DEFAULT_BROADCAST_RADIUS
    max_wait: float = 300.0
    cancel_fraction: float = 0.5
    speed: float = 8.0
    price_scale: float = 1.0
    snapshot_interval: float = 900.0
    completion_a: Optional[float] = None
    completion_b: Optional[float] = None

    def __post_init__(self):
        self.horizon = float(self.horizon)
        if self.horizon < 0:
            raise ValueError("horizon must be >= 0")
        if self.round_length <= 0:
            raise ValueError("round_length must be > 0")
        if self.broadcast_radius < 0:
            raise ValueError("broadcast_radius must be >= 0")
        if self.max_wait <= 0:
            raise ValueError("max_wait must be > 0")
        if not 0.0 <= self.cancel_fraction <= 1.0:
            raise ValueError("cancel_fraction must lie in [0, 1]")
        if self.price_scale <= 0:
            raise ValueError("price_scale must be > 0")


class _Streams:
    """Independent RNG streams so demand does not depend on the policy being run."""

    def __init__(self, seed: int):
        ss = np.random.SeedSequence(int(seed))
        d, o, p, dr = ss.spawn(4)
        self.demand = np.random.default_rng(d)
        self.outcome = np.random.default_rng(o)
        self.policy = np.random.default_rng(p)
        self.drivers = np.random.default_rng(dr)


def policy_rng(seed: int) -> np.random.Generator:
    return _Streams(seed).policy


def _initial_driver_cells(preset: CityPreset, rng: np.random.Generator) -> list[int]:
    cdf = np.cumsum(preset.driver_init)
    cdf[-1] = 1.0
    cells = np.searchsorted(cdf, rng.random(preset.driver_count), side="right")
    return np.minimum(cells, preset.n_cells - 1).tolist()


def _round_times(horizon: float, round_length: float = ROUND_LENGTH) -> Iterable[float]:
    n = int(math.ceil(horizon / round_length)) if horizon > 0 else 0
    for k in range(n):
        yield k * round_length


class _Source:
    def orders_until(self, t: float) -> list[Order]:
        raise NotImplementedError

    def driver_events_until(self, t: float) -> list[dict]:
        raise NotImplementedError


class _SyntheticSource(_Source):
    def __init__(self, preset: CityPreset, streams: _Streams, cfg: SimConfig):
        self.preset = preset
        self.streams = streams
        self.cfg = cfg
        self.next_id = 0
        self._drivers = [
            {"type": "driver", "t": 0, "id": i, "row": preset.grid.coords(cell)[0],
             "col": preset.grid.coords(cell)[1], "event": "online"}
            for i, cell in enumerate(_initial_driver_cells(preset, streams.drivers))
        ]

    def orders_until(self, t: float) -> list[Order]:
        orders = generate_demand(self.preset, t, self.streams.demand, self.next_id,
                                 self.cfg.round_length, self.cfg.price_scale)
        if orders:
            self.next_id = orders[-1].order_id + 1
        return orders

    def driver_events_until(self, t: float) -> list[dict]:
        out, self._drivers = self._drivers, []
        return out


class _LogSource(_Source):
    def __init__(self, log: TripEventLog, grid: GridSpec, price_scale: float = 1.0):
        self.grid = grid
        self.orders = [r for r in log.records if r["type"] == "order"]
        self.drivers = [r for r in log.records if r["type"] == "driver"]
        self.price_scale = price_scale
        self._oi = 0
        self._di = 0

    def orders_until(self, t: float) -> list[Order]:
        out = []
        g = self.grid
        while self._oi < len(self.orders) and self.orders[self._oi]["t"] <= t:
            r = self.orders[self._oi]
            out.append(Order(r["id"], g.cell(r["o_row"], r["o_col"]), g.cell(r["d_row"], r["d_col"]),
                             self.price_scale * float(r["price"]), float(r["t"]), float(r["dur_s"])))
            self._oi += 1
        return out

    def driver_events_until(self, t: float) -> list[dict]:
        out = []
        while self._di < len(self.drivers) and self.drivers[self._di]["t"] <= t:
            out.append(self.drivers[self._di])
            self._di += 1
        return out


_COLS = ("arrivals", "dispatches", "completed", "cancelled", "unanswered", "open")


@dataclass
class RunReport:
    horizon: float
    round_length: float
    policy: str
    counts: np.ndarray  # (rounds, 6) per-round counts in _COLS order; "open" is end-of-round
    income_rounds: np.ndarray  # (completed trips,) round index of each completion
    income_prices: np.ndarray  # matching prices
    match_log: list[dict]
    value_snapshots: list[tuple[float, np.ndarray]]
    threshold_trace: list[dict]
    demand_hash: str
    grid: Optional[GridSpec] = None
    final_values: Optional[np.ndarray] = None

    # ---- totals
    def total(self, col: str) -> int:
        return int(self.counts[:, _COLS.index(col)].sum()) if col != "open" else self.open_at_end

    @property
    def open_at_end(self) -> int:
        return int(self.counts[-1, _COLS.index("open")]) if len(self.counts) else 0

    @property
    def income(self) -> float:
        return math.fsum(self.income_prices.tolist())

    @property
    def totals(self) -> dict:
        req = self.total("arrivals")
        disp = self.total("dispatches")
        comp = self.total("completed")
        m = compute_metrics(req, disp, comp, disp, self.income)
        return {
            "policy": self.policy,
            "horizon": self.horizon,
            "requests": req,
            "dispatches": disp,
            "completed": comp,
            "cancelled": self.total("cancelled"),
            "unanswered": self.total("unanswered"),
            "open_at_end": self.open_at_end,
            "income": m.income,
            "cr": m.cr,
            "ar": m.ar,
            "sr": m.sr,
            "demand_hash": self.demand_hash,
        }

    # ---- windows
    def window_rows(self, width: float = REPORT_WINDOW, start: float = 0.0) -> list[dict]:
        """Per-window counts and rates; rates use requests settled inside the window."""
        if len(self.counts) == 0:
            return []
        per = max(1, int(round(width / self.round_length)))
        n_rounds = len(self.counts)
        rows = []
        cum = np.zeros(6, dtype=np.int64)
        inc_win = np.floor_divide(self.income_rounds, per) if len(self.income_rounds) else self.income_rounds
        for w0 in range(0, n_rounds, per):
            block = self.counts[w0:w0 + per]
            s = block.sum(axis=0)
            cum += s
            arrivals, disp, comp, canc, unans, _ = (int(x) for x in s)
            settled = comp + canc + unans
            income = math.fsum(self.income_prices[inc_win == w0 // per].tolist())
            m = compute_metrics(settled, disp, comp, disp, income)
            rows.append({
                "t_start": w0 * self.round_length,
                "t_end": min(w0 + per, n_rounds) * self.round_length,
                "arrivals": arrivals,
                "settled": settled,
                "dispatches": disp,
                "completed": comp,
                "cancelled": canc,
                "unanswered": unans,
                "open": int(block[-1, 5]),
                "cum_arrivals": int(cum[0]),
                "cum_completed": int(cum[2]),
                "cum_cancelled": int(cum[3]),
                "cum_unanswered": int(cum[4]),
                "income": income,
                "cr": m.cr,
                "ar": m.ar,
                "sr": m.sr,
            })
        return rows

    def slice_totals(self, t0: float, t1: float) -> dict:
        """Counts and income for rounds with ``t0 <= t < t1``."""
        a = int(round(t0 / self.round_length))
        b = int(round(t1 / self.round_length))
        s = self.counts[a:b].sum(axis=0) if b > a else np.zeros(6)
        mask = (self.income_rounds >= a) & (self.income_rounds < b)
        return {
            "arrivals": int(s[0]),
            "dispatches": int(s[1]),
            "completed": int(s[2]),
            "cancelled": int(s[3]),
            "unanswered": int(s[4]),
            "prices": self.income_prices[mask].tolist(),
        }

    # ---- output
    def write(self, out_dir) -> dict[str, Path]:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        paths = {
            "totals": out / "totals.json",
            "timeseries": out / "timeseries.csv",
            "match_log": out / "match_log.jsonl",
            "values": out / "value_snapshots.csv",
            "thresholds": out / "thresholds.csv",
        }
        paths["totals"].write_text(json.dumps(self.totals, indent=2, sort_keys=True) + "\n")
        _write_csv(paths["timeseries"], TIMESERIES_COLUMNS, self.window_rows())
        with open(paths["match_log"], "w") as fh:
            for rec in self.match_log:
                fh.write(json.dumps(rec, sort_keys=True) + "\n")
        snap_rows = []
        if self.grid is not None:
            for t, vals in self.value_snapshots:
                for cid, v in enumerate(vals.tolist()):
                    r, c = self.grid.coords(cid)
                    snap_rows.append({"time": t, "cell_id": cid, "row": r, "col": c, "value": repr(v)})
        _write_csv(paths["values"], SNAPSHOT_COLUMNS, snap_rows)
        _write_csv(paths["thresholds"], THRESHOLD_COLUMNS, self.threshold_trace)
        if self.final_values is not None and self.grid is not None:
            from .value_store import ValueTable

            paths["final_values"] = out / "values_final.csv"
            ValueTable(self.final_values).save_csv(paths["final_values"], self.grid)
        return paths

    def digest(self) -> str:
        h = hashlib.sha256()
        h.update(json.dumps(self.totals, sort_keys=True).encode())
        h.update(self.counts.tobytes())
        h.update(self.income_prices.tobytes())
        h.update(match_log_hash(self.match_log).encode())
        for t, v in self.value_snapshots:
            h.update(repr(t).encode())
            h.update(v.tobytes())
        return h.hexdigest()


TIMESERIES_COLUMNS = [
    "t_start", "t_end", "arrivals", "settled", "dispatches", "completed", "cancelled", "unanswered",
    "open", "cum_arrivals", "cum_completed", "cum_cancelled", "cum_unanswered", "income", "cr", "ar", "sr",
]
SNAPSHOT_COLUMNS = ["time", "cell_id", "row", "col", "value"]
THRESHOLD_COLUMNS = ["time", "arm_index", "threshold", "q", "cr", "ar"]
MATCH_LOG_FIELDS = ["time", "order_id", "driver_id", "p_c", "r_star", "dv_star", "p_star", "edge_weight"]


def _write_csv(path, columns, rows) -> None:
    import csv

    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=columns, lineterminator="\n")
        w.writeheader()
        for r in rows:
            w.writerow({k: r[k] for k in columns})


def match_log_hash(log: Sequence[dict]) -> str:
    h = hashlib.sha256()
    for rec in log:
        h.update(json.dumps(rec, sort_keys=True).encode())
        h.update(b"\n")
    return h.hexdigest()


class Simulator:
    """One deterministic run of a policy against a preset or an event log.

    ``policy_schedule`` (optional) maps a round time to the policy in control,
    which is how the A/B harness flips strategies inside one continuous run.
    """

    def __init__(
        self,
        preset: CityPreset,
        config: SimConfig,
        log: Optional[TripEventLog] = None,
        completion_model: Optional[CompletionModel] = None,
    ):
        self.preset = preset
        self.cfg = config
        self.grid = preset.grid
        self.log = log
        if completion_model is None:
            a = preset.cancel_a if config.completion_a is None else config.completion_a
            b = preset.cancel_b if config.completion_b is None else config.completion_b
            completion_model = CompletionModel(a, b)
        self.completion = completion_model

    def run(
        self,
        policy: DispatchPolicy,
        policy_schedule: Optional[Callable[[float], DispatchPolicy]] = None,
        on_round: Optional[Callable[[float, "Simulator"], None]] = None,
    ) -> RunReport:
        cfg = self.cfg
        grid = self.grid
        streams = _Streams(cfg.seed)
        if self.log is not None:
            source: _Source = _LogSource(self.log, grid, cfg.price_scale)
        else:
            source = _SyntheticSource(self.preset, streams, cfg)
        dist_m = grid.distance_matrix
        cells = grid.cells

        # driver state, indexed by slot
        slot_of: dict[int, int] = {}
        d_ids: list[int] = []
        d_loc: list[int] = []
        d_busy: list[float] = []
        d_online: list[bool] = []
        d_leave: list[bool] = []
        d_obj: list[Driver] = []

        open_orders: dict[int, Order] = {}
        u_draw: dict[int, float] = {}
        demand_hash = hashlib.sha256()

        times = list(_round_times(cfg.horizon, cfg.round_length))
        counts = np.zeros((len(times), 6), dtype=np.int64)
        inc_rounds: list[int] = []
        inc_prices: list[float] = []
        match_log: list[dict] = []
        snapshots: list[tuple[float, np.ndarray]] = []
        next_snap = 0.0
        active = policy
        seen_policies = [policy]

        for k, t in enumerate(times):
            if policy_schedule is not None:
                nxt = policy_schedule(t)
                if nxt is not active:
                    nxt.activate(t)
                    active = nxt
                if nxt not in seen_policies:
                    seen_policies.append(nxt)
            row = counts[k]
            settled: list[tuple[bool, bool]] = []

            for ev in source.driver_events_until(t):
                did = ev["id"]
                cid = grid.cell_id(ev["row"], ev["col"])
                if ev["event"] == "online":
                    if did in slot_of:
                        s = slot_of[did]
                        d_online[s] = True
                        d_leave[s] = False
                    else:
                        slot_of[did] = len(d_ids)
                        d_ids.append(did)
                        d_loc.append(cid)
                        d_busy.append(float(ev["t"]))
                        d_online.append(True)
                        d_leave.append(False)
                        d_obj.append(Driver(did, cells[cid]))
                elif ev["event"] == "offline":
                    if did in slot_of:
                        s = slot_of[did]
                        if d_busy[s] <= t:
                            d_online[s] = False
                        else:
                            d_leave[s] = True
                else:
                    raise ValueError(f"unknown driver event {ev['event']!r}")
            for s in range(len(d_ids)):
                if d_leave[s] and d_busy[s] <= t:
                    d_online[s] = False
                    d_leave[s] = False

            # expire stale requests
            expired = [oid for oid, o in open_orders.items() if t - o.request_time >= cfg.max_wait]
            for oid in expired:
                del open_orders[oid]
                del u_draw[oid]
                row[4] += 1
                settled.append((False, False))

            for o in source.orders_until(t):
                open_orders[o.order_id] = o
                u_draw[o.order_id] = float(streams.outcome.random())
                demand_hash.update(json.dumps(order_record(o), sort_keys=True).encode())
                row[0] += 1

            if t >= next_snap and cfg.snapshot_interval > 0:
                vals = active.values
                if vals is not None:
                    snapshots.append((t, vals.copy()))
                next_snap += cfg.snapshot_interval

            idle = [s for s in range(len(d_ids)) if d_online[s] and d_busy[s] <= t]
            orders = list(open_orders.values())
            idle_drivers = [d_obj[s] for s in idle]
            pairs: list[OrderDriverPair] = []
            if orders and idle:
                o_cells = np.fromiter((o.origin.id for o in orders), dtype=np.int64, count=len(orders))
                dcells = np.fromiter((d_loc[s] for s in idle), dtype=np.int64, count=len(idle))
                dm = dist_m[o_cells[:, None], dcells[None, :]]
                oi, di = np.nonzero(dm <= cfg.broadcast_radius)
                if oi.size:
                    pd = dm[oi, di]
                    pc = self.completion.batch(pd)
                    pairs = [
                        OrderDriverPair(orders[i], idle_drivers[j], float(x), float(p))
                        for i, j, x, p in zip(oi.tolist(), di.tolist(), pd.tolist(), pc.tolist())
                    ]
            snap = MarketSnapshot(t, orders, idle_drivers, pairs)
            result = active.step(snap)
            for rec in active.last_records:
                match_log.append(rec.as_dict())

            for e in result.pairs:
                pair = e.pair
                o = pair.order
                s = slot_of[pair.driver.driver_id]
                if o.order_id not in open_orders or not (d_online[s] and d_busy[s] <= t):
                    raise RuntimeError(f"policy matched an unavailable order/driver at t={t}")
                del open_orders[o.order_id]
                res = resolve_assignment(Assignment(pair, t), u=u_draw.pop(o.order_id),
                                         speed=cfg.speed, cancel_fraction=cfg.cancel_fraction)
                d_busy[s] = t + res.busy_for
                if res.end_cell != d_loc[s]:
                    d_loc[s] = res.end_cell
                    d_obj[s] = Driver(d_ids[s], cells[res.end_cell])
                row[1] += 1
                if res.outcome is Outcome.COMPLETED:
                    row[2] += 1
                    inc_rounds.append(k)
                    inc_prices.append(res.income)
                    settled.append((True, True))
                else:
                    row[3] += 1
                    settled.append((True, False))
            row[5] = len(open_orders)
            active.observe(t, settled)
            if on_round is not None:
                on_round(t, self)

        trace: list[dict] = []
        for p in seen_policies:
            trace.extend(getattr(p, "threshold_trace", []))
        trace.sort(key=lambda r: r["time"])
        final = policy.values
        return RunReport(
            horizon=cfg.horizon,
            round_length=cfg.round_length,
            policy=getattr(policy, "name", type(policy).__name__),
            counts=counts,
            income_rounds=np.asarray(inc_rounds, dtype=np.int64),
            income_prices=np.asarray(inc_prices, dtype=float),
            match_log=match_log,
            value_snapshots=snapshots,
            threshold_trace=trace,
            demand_hash=demand_hash.hexdigest(),
            grid=grid,
            final_values=None if final is None else final.copy(),
        )


def run(preset: CityPreset, config: SimConfig, policy: DispatchPolicy, log: Optional[TripEventLog] = None) -> RunReport:
    return Simulator(preset, config, log).run(policy)
