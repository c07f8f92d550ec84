"""Core data model: grid cells, orders, drivers, candidate pairs and assignments."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from enum import Enum
from functools import cached_property
from typing import Callable, Optional, Sequence

import numpy as np

DEFAULT_BROADCAST_RADIUS = 3000.0


class DriverStatus(Enum):
    IDLE = "idle"
    EN_ROUTE_PICKUP = "en_route_pickup"
    ON_TRIP = "on_trip"


class Outcome(Enum):
    PENDING = "pending"
    COMPLETED = "completed"
    CANCELLED = "cancelled"


class AssignmentKind(Enum):
    DISPATCH = "dispatch"
    IDLE = "idle"


@dataclass(frozen=True, slots=True)
class GridCell:
    id: int
    row: int
    col: int


class GridSpec:
    """Rectangular lattice of ``rows x cols`` cells, each ``cell_size`` metres wide.

    Cell ids are row-major, so ``id = row * cols + col``.
    """

    def __init__(self, rows: int, cols: int, cell_size: float = 500.0):
        if rows <= 0 or cols <= 0:
            raise ValueError("grid dimensions must be positive")
        if cell_size <= 0:
            raise ValueError("cell_size must be positive")
        self.rows = int(rows)
        self.cols = int(cols)
        self.cell_size = float(cell_size)
        self.cells = [GridCell(r * self.cols + c, r, c) for r in range(self.rows) for c in range(self.cols)]
        self.row_of = np.array([c.row for c in self.cells], dtype=float)
        self.col_of = np.array([c.col for c in self.cells], dtype=float)

    def __repr__(self) -> str:
        return f"GridSpec(rows={self.rows}, cols={self.cols}, cell_size={self.cell_size})"

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, GridSpec):
            return NotImplemented
        return (self.rows, self.cols, self.cell_size) == (other.rows, other.cols, other.cell_size)

    @property
    def count(self) -> int:
        return self.rows * self.cols

    def cell_id(self, row: int, col: int) -> int:
        if not (0 <= row < self.rows and 0 <= col < self.cols):
            raise ValueError(f"cell ({row}, {col}) outside {self.rows}x{self.cols} grid")
        return row * self.cols + col

    def coords(self, cell_id: int) -> tuple[int, int]:
        if not 0 <= cell_id < self.count:
            raise ValueError(f"cell id {cell_id} outside [0, {self.count})")
        return divmod(int(cell_id), self.cols)

    def cell(self, row: int, col: int) -> GridCell:
        return self.cells[self.cell_id(row, col)]

    def distance(self, a: GridCell, b: GridCell) -> float:
        """Straight-line distance in metres between two cell centres."""
        return math.hypot(a.row - b.row, a.col - b.col) * self.cell_size

    @cached_property
    def distance_matrix(self) -> np.ndarray:
        dr = self.row_of[:, None] - self.row_of[None, :]
        dc = self.col_of[:, None] - self.col_of[None, :]
        return np.hypot(dr, dc) * self.cell_size


@dataclass(frozen=True, slots=True)
class Order:
    order_id: int
    origin: GridCell
    destination: GridCell
    price: float
    request_time: float
    trip_duration: float

    def __post_init__(self):
        if not self.price > 0:
            raise ValueError(f"order {self.order_id}: price must be > 0, got {self.price}")
        if not self.trip_duration > 0:
            raise ValueError(f"order {self.order_id}: trip_duration must be > 0, got {self.trip_duration}")


@dataclass(frozen=True, slots=True)
class Driver:
    driver_id: int
    location: GridCell
    status: DriverStatus = DriverStatus.IDLE
    busy_until: Optional[float] = None


@dataclass(frozen=True, slots=True)
class OrderDriverPair:
    order: Order
    driver: Driver
    pickup_distance: float
    completion_prob: float = 1.0
    penalty_raw: Optional[float] = None

    def __post_init__(self):
        if not 0.0 <= self.completion_prob <= 1.0:
            raise ValueError(f"completion_prob must lie in [0, 1], got {self.completion_prob}")
        if self.pickup_distance < 0:
            raise ValueError("pickup_distance must be >= 0")
        if self.penalty_raw is None:
            object.__setattr__(self, "penalty_raw", self.pickup_distance)


@dataclass(slots=True)
class Assignment:
    """A dispatch (or idle) decision; its outcome is settled exactly once."""

    pair: Optional[OrderDriverPair]
    decided_time: float
    kind: AssignmentKind = AssignmentKind.DISPATCH
    outcome: Outcome = Outcome.PENDING
    driver: Optional[Driver] = None

    def __post_init__(self):
        if self.kind is AssignmentKind.IDLE:
            if self.pair is not None:
                raise ValueError("idle assignments carry no order")
        elif self.pair is None:
            raise ValueError("dispatch assignments need an order-driver pair")
        if self.driver is None and self.pair is not None:
            self.driver = self.pair.driver

    def settle(self, outcome: Outcome) -> None:
        if self.outcome is not Outcome.PENDING:
            raise RuntimeError(f"assignment already resolved as {self.outcome.value}")
        if outcome is Outcome.PENDING:
            raise ValueError("cannot settle to PENDING")
        self.outcome = outcome


@dataclass
class MarketSnapshot:
    time: float
    open_orders: list[Order]
    idle_drivers: list[Driver]
    candidate_pairs: list[OrderDriverPair] = field(default_factory=list)


def build_candidate_pairs(
    orders: Sequence[Order],
    drivers: Sequence[Driver],
    broadcast_radius: float = DEFAULT_BROADCAST_RADIUS,
    cell_size: float = 500.0,
    completion_model: Optional[Callable[[float], float]] = None,
) -> list[OrderDriverPair]:
    """Every (order, driver) pair whose pickup distance is within ``broadcast_radius``.

    Pairs come out sorted by (order_id, driver_id). ``completion_model`` maps a
    pickup distance in metres to a completion probability; without one every
    pair gets probability 1.
    """
    if not orders or not drivers:
        return []
    for d in drivers:
        if d.status is not DriverStatus.IDLE:
            raise ValueError(f"driver {d.driver_id} is not idle")
    orders = sorted(orders, key=lambda o: o.order_id)
    drivers = sorted(drivers, key=lambda d: d.driver_id)
    o_rc = np.array([(o.origin.row, o.origin.col) for o in orders], dtype=float)
    d_rc = np.array([(d.location.row, d.location.col) for d in drivers], dtype=float)
    dist = np.hypot(o_rc[:, None, 0] - d_rc[None, :, 0], o_rc[:, None, 1] - d_rc[None, :, 1]) * cell_size
    oi, di = np.nonzero(dist <= broadcast_radius)
    pairs = []
    for i, j in zip(oi.tolist(), di.tolist()):
        pd = float(dist[i, j])
        pc = 1.0 if completion_model is None else float(completion_model(pd))
        pairs.append(OrderDriverPair(orders[i], drivers[j], pd, pc))
    return pairs
