"""Exact solvers on the true model (ground truth for regret)."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Union

import numpy as np

from .errors import OracleError
from .mdp import MnlMdp

APERIODICITY_MIX = 0.01
_PLAIN_RVI_SWEEPS = 20_000


@dataclass(frozen=True, eq=False)
class ValueTable:
    """State values ``v`` and action values ``q``.

    ``gamma`` is the discount, or the string ``"average"`` for the
    average-reward solution, in which case ``gain`` holds J* and ``v`` is the
    bias normalised to ``min(v) == 0``.
    """

    v: np.ndarray
    q: np.ndarray
    gamma: Union[float, str]
    gain: Optional[float] = None
    iterations: int = 0


def _model(mdp, P):
    return (mdp.transition_matrix() if P is None else P), np.asarray(mdp.rewards, dtype=float)


def solve_discounted(mdp: MnlMdp, gamma: float, tol: float = 1e-9, P=None,
                     max_iter: int = 10**7) -> ValueTable:
    """Value iteration with the classic stopping rule guaranteeing sup error <= tol."""
    if not 0.0 <= gamma < 1.0:
        raise ValueError("gamma must lie in [0, 1)")
    if tol <= 0:
        raise ValueError("tol must be positive")
    P, r = _model(mdp, P)
    if gamma == 0.0:
        q = r.copy()
        return ValueTable(q.max(axis=1), q, 0.0, iterations=1)
    threshold = tol * (1.0 - gamma) / (2.0 * gamma)
    v = np.zeros(P.shape[0])
    for n in range(1, max_iter + 1):
        v_new = (r + gamma * (P @ v)).max(axis=1)
        done = np.max(np.abs(v_new - v)) < threshold
        v = v_new
        if done:
            q = r + gamma * (P @ v)
            return ValueTable(q.max(axis=1), q, float(gamma), iterations=n)
    raise OracleError(f"discounted value iteration did not converge in {max_iter} sweeps")


def _relative_vi(P, r, tol, max_iter):
    h = np.zeros(P.shape[0])
    for n in range(1, max_iter + 1):
        w = (r + P @ h).max(axis=1)
        diff = w - h
        if diff.max() - diff.min() < tol:
            return 0.5 * (diff.max() + diff.min()), w - w[0], n
        h = w - w[0]
    return None


def solve_average(mdp: MnlMdp, tol: float = 1e-10, P=None, max_iter: int = 10**6) -> ValueTable:
    """Relative value iteration (reference state 0) for the optimal gain and bias.

    If the plain iteration keeps oscillating (periodic optimal chains) it is
    rerun on the aperiodicity-transformed model ``0.99 P + 0.01 I``, which has
    the same gain and a bias scaled by ``1 / 0.99``.
    """
    P, r = _model(mdp, P)
    out = _relative_vi(P, r, tol, min(max_iter, _PLAIN_RVI_SWEEPS))
    scale = 1.0
    if out is None:
        S = P.shape[0]
        eye = np.broadcast_to(np.eye(S)[:, None, :], P.shape)
        mixed = (1.0 - APERIODICITY_MIX) * P + APERIODICITY_MIX * eye
        out = _relative_vi(mixed, r, tol, max_iter)
        scale = 1.0 - APERIODICITY_MIX
        if out is None:
            raise OracleError(
                "relative value iteration did not converge even after the aperiodicity "
                "transform; the MDP is probably not communicating"
            )
    gain, h, n = out
    h = scale * h
    q = r + P @ h - gain
    v = q.max(axis=1)
    shift = v.min()
    return ValueTable(v - shift, q - shift, "average", float(gain), iterations=n)


def _policy_model(P, r, policy):
    policy = np.asarray(policy)
    S = P.shape[0]
    if policy.ndim == 1:
        idx = np.arange(S)
        return P[idx, policy], r[idx, policy]
    # Stochastic policy given as an (S, A) matrix of action probabilities.
    return np.einsum("sa,sax->sx", policy, P), np.einsum("sa,sa->s", policy, r)


def evaluate_policy_discounted(mdp: MnlMdp, policy, gamma: float, tol: float = 1e-12,
                               P=None, method: str = "auto") -> np.ndarray:
    """V^pi of a stationary policy (int array, or (S, A) action probabilities).

    ``method`` is ``"direct"`` (linear solve), ``"iterative"`` (fixed-point
    iteration to sup error ``tol``) or ``"auto"`` (direct when S <= 200).
    """
    P, r = _model(mdp, P)
    P_pi, r_pi = _policy_model(P, r, policy)
    S = P.shape[0]
    if method == "auto":
        method = "direct" if S <= 200 else "iterative"
    if method == "direct":
        return np.linalg.solve(np.eye(S) - gamma * P_pi, r_pi)
    if gamma == 0.0:
        return r_pi.copy()
    threshold = tol * (1.0 - gamma) / gamma
    v = np.zeros(S)
    while True:
        v_new = r_pi + gamma * (P_pi @ v)
        if np.max(np.abs(v_new - v)) < threshold:
            return v_new
        v = v_new


def stationary_distribution(P_pi: np.ndarray) -> np.ndarray:
    """Stationary distribution of a unichain transition matrix."""
    S = P_pi.shape[0]
    A = np.vstack([P_pi.T - np.eye(S), np.ones((1, S))])
    b = np.zeros(S + 1)
    b[-1] = 1.0
    mu, *_ = np.linalg.lstsq(A, b, rcond=None)
    return mu


def evaluate_policy_average(mdp: MnlMdp, policy, P=None) -> float:
    """Long-run average reward of a stationary policy whose chain is unichain."""
    P, r = _model(mdp, P)
    P_pi, r_pi = _policy_model(P, r, policy)
    return float(stationary_distribution(P_pi) @ r_pi)
