"""Limited-memory UCB over graph-pruning thresholds.

Pull counts and the total count are discounted geometrically every feedback
interval, so arms left alone regain an exploration bonus and the controller
tracks nonstationary marketplace metrics.
"""

from __future__ import annotations

import math
from collections import deque
from dataclasses import dataclass, field
from typing import Optional

import numpy as np


def default_arms() -> np.ndarray:
    return np.linspace(0.0, 0.3, 41)


def objective(cr: float, ar: float) -> float:
    return cr + 0.1 * ar


@dataclass
class LmUcbState:
    arms: np.ndarray = field(default_factory=default_arms)
    alpha_q: float = 0.8
    gamma_n: float = 0.99
    c: float = 0.1
    current_arm: int = 0
    Q: np.ndarray = field(init=False)
    N: np.ndarray = field(init=False)
    n: float = 0.0

    def __post_init__(self):
        self.arms = np.asarray(self.arms, dtype=float)
        if self.arms.ndim != 1 or self.arms.size == 0:
            raise ValueError("arms must be a non-empty 1-D sequence")
        if not 0 <= self.alpha_q < 1:
            raise ValueError("alpha_q must lie in [0, 1)")
        if not 0 <= self.gamma_n < 1:
            raise ValueError("gamma_n must lie in [0, 1)")
        if self.c < 0:
            raise ValueError("c must be >= 0")
        if not 0 <= self.current_arm < self.arms.size:
            raise ValueError("current_arm out of range")
        self.Q = np.zeros(self.arms.size)
        self.N = np.zeros(self.arms.size)

    @classmethod
    def with_random_start(cls, rng: np.random.Generator, **kwargs) -> "LmUcbState":
        state = cls(**kwargs)
        state.current_arm = int(rng.integers(state.arms.size))
        return state

    @property
    def threshold(self) -> float:
        return float(self.arms[self.current_arm])

    def select(self) -> int:
        """Arm maximizing ``Q + c*sqrt(ln n / N)``; unpulled arms win, lowest index on ties."""
        unpulled = np.nonzero(self.N == 0)[0]
        if unpulled.size:
            return int(unpulled[0])
        log_n = math.log(max(self.n, 1.0))
        score = self.Q + self.c * np.sqrt(log_n / self.N)
        return int(np.argmax(score))


def ucb_feedback(state: LmUcbState, cr: float, ar: float) -> float:
    """Credit the current arm with ``cr + 0.1*ar``, discount counts, pick the next arm.

    Mutates ``state`` and returns the newly selected threshold.
    """
    if not (0.0 <= cr <= 1.0 and 0.0 <= ar <= 1.0):
        raise ValueError(f"rates must lie in [0, 1], got cr={cr}, ar={ar}")
    state.n = state.gamma_n * state.n + 1.0
    state.N *= state.gamma_n
    q = objective(cr, ar)
    a = state.current_arm
    state.Q[a] = state.alpha_q * state.Q[a] + (1.0 - state.alpha_q) * q
    state.N[a] += 1.0
    state.current_arm = state.select()
    return state.threshold


@dataclass
class MetricsWindow:
    """Counts of requests settled in the trailing ``window_seconds``.

    A request settles when it is dispatched (then completes or cancels) or
    expires unanswered; counting by settlement keeps
    ``completed <= accepted <= requests`` inside any window.
    """

    window_seconds: float = 60.0
    _events: deque = field(default_factory=deque, repr=False)

    def record(self, t: float, accepted: bool, completed: bool) -> None:
        if completed and not accepted:
            raise ValueError("a completed request must have been accepted")
        self._events.append((t, accepted, completed))

    def _trim(self, t: float) -> None:
        ev = self._events
        while ev and ev[0][0] <= t - self.window_seconds:
            ev.popleft()

    def counts(self, t: float) -> tuple[int, int, int]:
        """(requests, accepted, completed) settled in ``(t - window, t]``."""
        self._trim(t)
        req = acc = comp = 0
        for ts, a, c in self._events:
            if ts > t:
                continue
            req += 1
            acc += a
            comp += c
        return req, acc, comp

    def dispatches(self, t: float) -> int:
        return self.counts(t)[1]

    def rates(self, t: float) -> tuple[float, float]:
        """(CR, AR), both 0 when nothing settled."""
        req, acc, comp = self.counts(t)
        if req == 0:
            return 0.0, 0.0
        return comp / req, acc / req

    def clear(self) -> None:
        self._events.clear()


def run_synthetic(
    means: np.ndarray,
    pulls: int,
    rng: np.random.Generator,
    noise: float = 0.02,
    flip_at: Optional[int] = None,
    flipped_means: Optional[np.ndarray] = None,
    **state_kwargs,
) -> np.ndarray:
    """Drive an :class:`LmUcbState` on Gaussian arms; returns the arm index chosen at each pull.

    Rewards are fed through the ``cr`` channel with ``ar = 0``, so they are
    clipped to [0, 1].
    """
    state = LmUcbState(arms=np.linspace(0.0, 0.3, len(means)), **state_kwargs)
    state.current_arm = state.select()
    chosen = np.empty(pulls, dtype=np.int64)
    for k in range(pulls):
        mu = flipped_means if (flip_at is not None and k >= flip_at) else means
        a = state.current_arm
        chosen[k] = a
        reward = float(np.clip(mu[a] + noise * rng.standard_normal(), 0.0, 1.0))
        ucb_feedback(state, reward, 0.0)
    return chosen
