"""Online estimation of the transition core and the confidence sets built on it.

Per observed transition the estimator takes one online-Newton (weighted
mirror-descent) step on the multinomial log-loss, projected back onto the
ball ``||theta|| <= l_theta`` in the local norm, and accumulates loss
Hessians into the Gram-like matrix ``sigma``.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy.linalg import cho_solve, solve_triangular

from .errors import NumericalError
from .mdp import MnlMdp, TransitionSample

_PROJECTION_ITERS = 200


def _probs(phi, theta):
    z = phi @ theta
    e = np.exp(z - z.max())
    return e / e.sum()


def _hessian_from(phi, p):
    mean = p @ phi
    h = (phi.T * p) @ phi
    h -= np.multiply.outer(mean, mean)
    return 0.5 * (h + h.T)


def loss(theta, sample: TransitionSample) -> float:
    """Negative log-likelihood of the observed next state (log-sum-exp form)."""
    z = sample.reachable_features @ np.asarray(theta, dtype=float)
    zmax = z.max()
    lse = zmax + math.log(np.exp(z - zmax).sum())
    return float(lse - sample.response @ z)


def grad(theta, sample: TransitionSample) -> np.ndarray:
    phi = sample.reachable_features
    return phi.T @ (_probs(phi, np.asarray(theta, dtype=float)) - sample.response)


def hessian(theta, sample: TransitionSample) -> np.ndarray:
    """``sum p phi phi^T - (sum p phi)(sum p phi)^T``, symmetrised."""
    phi = sample.reachable_features
    return _hessian_from(phi, _probs(phi, np.asarray(theta, dtype=float)))


def paper_default_eta(u_max: int, l_theta: float, l_phi: float) -> float:
    return 0.5 * math.log(u_max) + (l_theta * l_phi + 1.0)


def paper_default_lambda(dim: int, l_theta: float, l_phi: float, eta: float) -> float:
    # Floored at 1: the concentration argument also assumes lambda >= 1.
    lam = 84.0 * math.sqrt(2.0) * (l_theta * l_phi**3 + dim * l_phi**2) * eta
    return max(lam, 1.0)


def _logdet(m):
    sign, val = np.linalg.slogdet(m)
    if sign <= 0:
        raise NumericalError("sigma lost positive definiteness")
    return float(val)


def _cholesky(m):
    try:
        return np.linalg.cholesky(m)
    except np.linalg.LinAlgError:
        cond = np.linalg.cond(m)
        raise NumericalError(
            f"Cholesky factorisation failed (condition number {cond:.3e}); "
            "the ridge parameter lambda is probably too small"
        ) from None


@dataclass(frozen=True, eq=False)
class EstimatorState:
    theta_hat: np.ndarray
    sigma: np.ndarray
    t: int
    lam: float
    eta: float
    l_theta: float
    logdet_sigma: float

    @classmethod
    def initial(cls, dim: int, lam: float, eta: float, l_theta: float) -> "EstimatorState":
        if lam <= 0 or eta < 0:
            raise ValueError("need lambda > 0 and eta >= 0")
        return cls(np.zeros(dim), lam * np.eye(dim), 1, float(lam), float(eta),
                   float(l_theta), dim * math.log(lam))

    def with_core(self, theta) -> "EstimatorState":
        """Same state with ``theta_hat`` replaced (used to build reference polytopes)."""
        return EstimatorState(np.asarray(theta, dtype=float), self.sigma, self.t, self.lam,
                              self.eta, self.l_theta, self.logdet_sigma)

    def error_norm(self, theta) -> float:
        """``||theta_hat - theta||`` in the ``sigma`` norm."""
        diff = self.theta_hat - theta
        return float(math.sqrt(max(diff @ self.sigma @ diff, 0.0)))


def project_ball_weighted(v, m, l: float) -> np.ndarray:
    """``argmin_{||theta||_2 <= l} ||theta - v||_m`` for symmetric positive definite ``m``.

    Interior points are returned unchanged.  Otherwise the KKT condition
    ``(m + mu I) theta = m v`` is solved by bisection on ``mu > 0`` until the
    norm is within ``1e-10 * l`` of the radius (from the inside).
    """
    v = np.asarray(v, dtype=float)
    nv = math.sqrt(v @ v)
    if nv <= l:
        return v
    if l <= 0:
        return np.zeros_like(v)
    evals, evecs = np.linalg.eigh(m)
    w = evecs.T @ v

    def at(mu):
        return evecs @ (evals / (evals + mu) * w)

    lo = 0.0
    hi = max(evals.max() * (nv / l - 1.0), np.finfo(float).tiny)
    while np.linalg.norm(at(hi)) > l:
        lo, hi = hi, 2.0 * hi
    for _ in range(_PROJECTION_ITERS):
        upper = at(hi)
        mid = 0.5 * (lo + hi)
        # hi is always feasible; accept it once it is tight or the bracket cannot shrink.
        if l - float(np.linalg.norm(upper)) <= 1e-10 * l or not lo < mid < hi:
            return upper
        theta = at(mid)
        n = float(np.linalg.norm(theta))
        if n > l:
            lo = mid
        else:
            hi = mid
    raise NumericalError(f"weighted ball projection did not converge in {_PROJECTION_ITERS} bisections")


def update(state: EstimatorState, sample: TransitionSample) -> EstimatorState:
    """One estimator step on ``sample``; returns the next state."""
    phi, y = sample.reachable_features, sample.response
    theta = state.theta_hat
    p = _probs(phi, theta)
    g = phi.T @ (p - y)
    sigma_hat = state.sigma + state.eta * _hessian_from(phi, p)
    L = _cholesky(sigma_hat)
    v = theta - state.eta * cho_solve((L, True), g, check_finite=False)
    theta_next = project_ball_weighted(v, sigma_hat, state.l_theta)
    sigma_next = state.sigma + _hessian_from(phi, _probs(phi, theta_next))
    return EstimatorState(theta_next, sigma_next, state.t + 1, state.lam, state.eta,
                          state.l_theta, _logdet(sigma_next))


def beta(t: int, d: int, u_max: int, delta: float, c_beta: float) -> float:
    """Confidence radius ``c_beta * sqrt(d) * log(max(U t / delta, e))**2``."""
    if t < 1 or not 0.0 < delta < 1.0:
        raise ValueError("need t >= 1 and delta in (0, 1)")
    return c_beta * math.sqrt(d) * math.log(max(u_max * t / delta, math.e)) ** 2


@dataclass(frozen=True, eq=False)
class ConfidencePolytope:
    """Per-pair L1 balls around plug-in distributions, intersected with the simplex.

    Pairs are indexed ``i = s * num_actions + a``.  ``p_hat`` and
    ``next_states`` are padded to width ``U``; ``mask`` marks real entries.
    """

    num_states: int
    num_actions: int
    next_states: np.ndarray
    mask: np.ndarray
    p_hat: np.ndarray
    radius: np.ndarray

    def pair(self, s: int, a: int):
        i = s * self.num_actions + a
        m = self.mask[i]
        return self.p_hat[i, m], float(self.radius[i])

    def l1_distance(self, P: np.ndarray) -> np.ndarray:
        """Per-pair L1 distance from ``p_hat`` to the rows of a dense ``(S, A, S)`` model."""
        S, A = self.num_states, self.num_actions
        s_idx = np.repeat(np.arange(S), A)
        a_idx = np.tile(np.arange(A), S)
        true = P[s_idx[:, None], a_idx[:, None], self.next_states]
        return np.where(self.mask, np.abs(true - self.p_hat), 0.0).sum(axis=1)

    def contains(self, P: np.ndarray, tol: float = 1e-12) -> bool:
        return bool(np.all(self.l1_distance(P) <= self.radius + tol))


def build_polytope(state: EstimatorState, mdp: MnlMdp, beta_t: float,
                   mode: str = "exact") -> ConfidencePolytope:
    """Confidence polytope at the current estimate.

    ``exact``: radius ``B1 + B2`` with
    ``B1 = beta * sum_s' p(s') ||phi(s') - sum_s'' p(s'') phi(s'')||_{sigma^-1}`` and
    ``B2 = 3 beta^2 max_s' ||phi(s')||^2_{sigma^-1}``.
    ``simplified``: ``2 beta max_s' ||phi(s')||_{sigma^-1}``.
    Radii are clipped to 2, the L1 diameter of the simplex.
    """
    if beta_t < 0:
        raise ValueError("beta_t must be >= 0")
    if mode not in ("exact", "simplified"):
        raise ValueError(f"unknown polytope mode {mode!r}")
    flat = mdp._flat
    pad = flat["padded"]
    mask = pad >= 0
    rows = np.where(mask, pad, 0)
    phi = flat["phi"][rows]                      # (pairs, U, d)
    phi = np.where(mask[..., None], phi, 0.0)
    logits = np.where(mask, phi @ state.theta_hat, -np.inf)
    logits -= logits.max(axis=1, keepdims=True)
    p = np.exp(logits)
    p /= p.sum(axis=1, keepdims=True)

    L = _cholesky(state.sigma)
    d = mdp.dim

    def inv_norms(x):
        z = solve_triangular(L, x.reshape(-1, d).T, lower=True, check_finite=False)
        return np.sqrt((z * z).sum(axis=0)).reshape(x.shape[:-1])

    raw = np.where(mask, inv_norms(phi), 0.0)
    if mode == "simplified":
        radius = 2.0 * beta_t * raw.max(axis=1)
    else:
        mean = np.einsum("iu,iud->id", p, phi)
        centred = np.where(mask, inv_norms(phi - mean[:, None, :]), 0.0)
        b1 = beta_t * (p * centred).sum(axis=1)
        b2 = 3.0 * beta_t**2 * (raw**2).max(axis=1)
        radius = b1 + b2
    next_states = np.where(mask, flat["next"][rows], 0)
    return ConfidencePolytope(mdp.num_states, mdp.num_actions, next_states, mask, p,
                              np.minimum(radius, 2.0))
