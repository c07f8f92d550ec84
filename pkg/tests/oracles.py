"""Slow reference implementations used only by the tests."""

import numpy as np


def brute_force_matching(W: np.ndarray, mask: np.ndarray) -> float:
    """Best total weight over all partial matchings using only masked edges.

    Negative edges are allowed in the matrix but a matching never gains from
    them, so leaving a row unmatched is always an option.
    """
    n_rows, n_cols = W.shape
    best = 0.0

    def go(i: int, used: int, total: float) -> None:
        nonlocal best
        if i == n_rows:
            best = max(best, total)
            return
        go(i + 1, used, total)
        for j in range(n_cols):
            if mask[i, j] and not used >> j & 1:
                go(i + 1, used | 1 << j, total + W[i, j])

    go(0, 0, 0.0)
    return best
