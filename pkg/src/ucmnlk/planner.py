"""Discounted extended value iteration (DEVI) over a confidence polytope."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .estimator import ConfidencePolytope


def inner_max_batch(p_hat: np.ndarray, radius: np.ndarray, v: np.ndarray,
                    mask: np.ndarray | None = None):
    """Row-wise ``max p @ v`` over ``{p in simplex, ||p - p_hat||_1 <= radius}``.

    Arrays are ``(n, U)`` (``radius`` is ``(n,)``); ``mask`` marks real
    entries of padded rows.  Greedy solution: move ``radius / 2`` of mass (at
    most ``1 - p_hat[best]``) onto the best entry, taking it from the worst
    entries first.  Ties go to the lower index both ways.
    """
    p_hat = np.atleast_2d(np.asarray(p_hat, dtype=float))
    v = np.atleast_2d(np.asarray(v, dtype=float))
    radius = np.atleast_1d(np.asarray(radius, dtype=float))
    if mask is None:
        mask = np.ones(p_hat.shape, dtype=bool)
    n, U = p_hat.shape
    rows = np.arange(n)
    best = np.argmax(np.where(mask, v, -np.inf), axis=1)
    move = np.minimum(radius / 2.0, 1.0 - p_hat[rows, best])
    move = np.maximum(move, 0.0)

    donors = mask.copy()
    donors[rows, best] = False
    order = np.argsort(np.where(donors, v, np.inf), axis=1, kind="stable")
    avail = np.where(donors, p_hat, 0.0)
    avail_sorted = np.take_along_axis(avail, order, axis=1)
    before = np.cumsum(avail_sorted, axis=1) - avail_sorted
    taken_sorted = np.clip(move[:, None] - before, 0.0, avail_sorted)
    taken = np.empty_like(taken_sorted)
    np.put_along_axis(taken, order, taken_sorted, axis=1)

    p = p_hat - taken
    p[rows, best] += move
    value = np.where(mask, p * v, 0.0).sum(axis=1)
    return p, value


def inner_max(p_hat, radius: float, v):
    """Maximiser of ``p @ v`` over the simplex intersected with an L1 ball; returns ``(p, value)``."""
    p, value = inner_max_batch(np.asarray(p_hat, dtype=float)[None, :], np.array([radius]),
                               np.asarray(v, dtype=float)[None, :])
    return p[0], float(value[0])


@dataclass(frozen=True, eq=False)
class DeviResult:
    """Output of :func:`devi`.

    ``monotone`` records whether every round satisfied
    ``V^(n) <= V^(n-1) + 1e-12``; ``max_v_increase`` is the worst observed
    increase.  ``final_gap`` is ``max |Q^(N) - Q^(N-1)|`` and ``last_drop`` is
    ``max (Q^(N-1) - Q^(N))``.
    """

    q: np.ndarray
    v: np.ndarray
    iterations: int
    final_gap: float
    last_drop: float
    monotone: bool
    max_v_increase: float


def devi(rewards, polytope: ConfidencePolytope, gamma: float, n_rounds: int) -> DeviResult:
    """Run ``n_rounds`` optimistic backups starting from ``Q = 1 / (1 - gamma)``."""
    if n_rounds < 1:
        raise ValueError("n_rounds must be >= 1")
    if not 0.0 <= gamma < 1.0:
        raise ValueError("gamma must lie in [0, 1)")
    r = np.asarray(rewards, dtype=float)
    S, A = r.shape
    q = np.full((S, A), 1.0 / (1.0 - gamma))
    v_prev = q.max(axis=1)
    max_inc = -np.inf
    q_prev = q
    for _ in range(n_rounds):
        v = q.max(axis=1)
        max_inc = max(max_inc, float(np.max(v - v_prev)))
        v_prev = v
        _, best = inner_max_batch(polytope.p_hat, polytope.radius, v[polytope.next_states],
                                  polytope.mask)
        q_prev, q = q, r + gamma * best.reshape(S, A)
    v = q.max(axis=1)
    max_inc = max(max_inc, float(np.max(v - v_prev)))
    diff = q_prev - q
    return DeviResult(q, v, n_rounds, float(np.max(np.abs(diff))), float(np.max(diff)),
                      bool(max_inc <= 1e-12), max_inc)


def greedy_policy(q) -> np.ndarray:
    """Per-state argmax of ``q`` (lowest action index on ties)."""
    return np.argmax(np.asarray(q), axis=1)
