"""Hard-to-learn MNL instances: a two-state infinite-horizon family and a layered
finite-horizon family, with validators for their structural properties.

In both families the probability of moving to the rewarding state is
``f(a @ theta)`` with ``f(x) = 1 / (1 + (1/delta - 1) exp(-x))``; the core is
``theta_bar = (theta / alpha, 1 / beta)``.
"""
from __future__ import annotations

import itertools
import math
from dataclasses import dataclass
from typing import Optional

import numpy as np

from .errors import PreconditionError
from .mdp import MnlMdp, transition_probs

MAX_ACTIONS = 2**16
MAX_SAU = 10**7
GRID_POINTS = 2000


def mnl_sigmoid(x, delta: float):
    """``f(x) = 1 / (1 + (1/delta - 1) exp(-x))``; note ``f(0) = delta``."""
    if not 0.0 < delta < 1.0:
        raise ValueError("delta must lie in (0, 1)")
    return 1.0 / (1.0 + (1.0 / delta - 1.0) * np.exp(-np.asarray(x, dtype=float)))


def mnl_sigmoid_prime(x, delta: float):
    f = mnl_sigmoid(x, delta)
    return f - f * f


def sign_actions(d: int) -> np.ndarray:
    """``{-1, +1}^(d-1)`` in lexicographic order with -1 before +1."""
    if 2 ** (d - 1) > MAX_ACTIONS:
        raise PreconditionError(f"2^(d-1) = 2^{d - 1} actions exceeds the cap of {MAX_ACTIONS}")
    return np.array(list(itertools.product((-1.0, 1.0), repeat=d - 1)))


def _signs(signs, d):
    s = np.ones(d - 1) if signs is None else np.asarray(signs, dtype=float)
    if s.shape != (d - 1,) or not np.all(np.abs(s) == 1.0):
        raise ValueError(f"signs must be a vector of +-1 of length d - 1 = {d - 1}")
    return s


@dataclass(frozen=True)
class InfiniteHardParams:
    """Parameters of the two-state instance.

    ``mode`` is ``"average"`` (``delta = 1/D``) or ``"discounted"``
    (``delta = 1 - gamma``).  Build with :meth:`from_average` /
    :meth:`from_discounted`; :meth:`with_gap` re-derives everything for a
    manually chosen ``Delta`` (used to probe the validators).
    """

    d: int
    T: int
    mode: str
    delta: float
    Delta: float
    Delta_bar: float
    alpha: float
    beta: float
    theta: np.ndarray
    D: Optional[float] = None
    gamma: Optional[float] = None

    @staticmethod
    def gap_for(d: int, T: float, delta: float) -> float:
        return (d - 1) / (45.0 * math.sqrt(0.4 * (T / delta) * math.log(2.0)))

    @classmethod
    def _derive(cls, d, T, mode, delta, Delta, signs, D=None, gamma=None):
        if d < 2:
            raise PreconditionError("the construction needs d >= 2")
        if not 0.0 < delta < 1.0:
            raise PreconditionError(f"delta = {delta} must lie in (0, 1)")
        if Delta <= 0 or delta + Delta >= 1.0:
            raise PreconditionError(f"Delta = {Delta} must satisfy 0 < Delta < 1 - delta")
        Db = math.log((1 - delta) * (delta + Delta) / (delta * (1 - delta - Delta)))
        alpha = math.sqrt(Db / ((d - 1) * (1 + Db)))
        beta = math.sqrt(1.0 / (1 + Db))
        theta = _signs(signs, d) * Db / (d - 1)
        return cls(int(d), int(T), mode, float(delta), float(Delta), Db, alpha, beta, theta, D, gamma)

    @classmethod
    def from_average(cls, d: int, D: float, T: int, signs=None) -> "InfiniteHardParams":
        if D <= 1:
            raise PreconditionError("the diameter bound D must exceed 1")
        delta = 1.0 / D
        return cls._derive(d, T, "average", delta, cls.gap_for(d, T, delta), signs, D=float(D))

    @classmethod
    def from_discounted(cls, d: int, gamma: float, T: int, signs=None) -> "InfiniteHardParams":
        if not 0.0 < gamma < 1.0:
            raise PreconditionError("gamma must lie in (0, 1)")
        delta = 1.0 - gamma
        return cls._derive(d, T, "discounted", delta, cls.gap_for(d, T, delta), signs, gamma=float(gamma))

    def with_gap(self, Delta: float) -> "InfiniteHardParams":
        signs = np.sign(self.theta)
        return self._derive(self.d, self.T, self.mode, self.delta, Delta, signs, self.D, self.gamma)

    @property
    def theta_bar(self) -> np.ndarray:
        return np.concatenate([self.theta / self.alpha, [1.0 / self.beta]])

    @property
    def best_action(self) -> np.ndarray:
        return np.sign(self.theta)

    @property
    def optimal_gain(self) -> float:
        return (self.delta + self.Delta) / (2 * self.delta + self.Delta)

    def optimal_discounted_value(self, gamma: float) -> float:
        """Optimal value at ``x0`` (start of the instance) for discount ``gamma``."""
        dl, Dl = self.delta, self.Delta
        return gamma * (Dl + dl) / ((1 - gamma) * (gamma * (2 * dl + Dl - 1) + 1))

    def precondition_failures(self) -> list:
        out = []
        dl, Dl = self.delta, self.Delta
        if not 100 * Dl <= dl:
            hint = ("T >= 45(d-1)^2 D" if self.mode == "average" else "T >= 45(d-1)^2/(1-gamma)")
            out.append(f"100*Delta <= delta fails ({100 * Dl:.6g} > {dl:.6g}); need {hint}")
        if not 2 * dl + Dl <= 1:
            out.append(f"2*delta + Delta <= 1 fails ({2 * dl + Dl:.6g})")
        if not Dl <= dl * (1 - dl):
            out.append(f"Delta <= delta(1 - delta) fails ({Dl:.6g} > {dl * (1 - dl):.6g})")
        return out


@dataclass(frozen=True)
class FiniteHardParams:
    """Parameters of the layered ``H``-step instance with ``K`` episodes."""

    d: int
    H: int
    K: int
    delta: float
    Delta: float
    Delta_bar: float
    alpha: float
    beta: float
    thetas: np.ndarray  # (H, d - 1)

    @classmethod
    def create(cls, d: int, H: int, K: int, signs=None) -> "FiniteHardParams":
        """``signs`` is ``(H, d - 1)`` of +-1 (default all +1)."""
        if d < 2 or H < 3:
            raise PreconditionError(f"the construction needs d >= 2 and H >= 3 (got d={d}, H={H})")
        need = max((d - 1) ** 2 * H / 2.0, H**3 * (d - 1) ** 2 / 32.0)
        if K < need:
            raise PreconditionError(
                f"K = {K} is too small: need K >= max((d-1)^2 H/2, H^3 (d-1)^2/32) = {need:.6g}"
            )
        delta = 1.0 / H
        Delta = 1.0 / (4.0 * math.sqrt(2.0 * H * K))
        m = (d - 1) * Delta
        Db = math.log((1 - delta) * (delta + m) / (delta * (1 - delta - m))) / (d - 1)
        alpha = math.sqrt(Db / (1 + (d - 1) * Db))
        beta = math.sqrt(1.0 / (1 + (d - 1) * Db))
        s = np.ones((H, d - 1)) if signs is None else np.asarray(signs, dtype=float)
        if s.shape != (H, d - 1) or not np.all(np.abs(s) == 1.0):
            raise ValueError(f"signs must be an (H, d - 1) = ({H}, {d - 1}) array of +-1")
        return cls(int(d), int(H), int(K), delta, Delta, Db, alpha, beta, s * Db)

    def block_core(self, h: int) -> np.ndarray:
        """``theta_bar_h`` for step ``h`` (1-based)."""
        return np.concatenate([self.thetas[h - 1] / self.alpha, [1.0 / self.beta]])

    def precondition_failures(self) -> list:
        out = []
        if not (self.d - 1) * self.Delta <= self.delta / self.H:
            out.append(f"(d-1)*Delta <= delta/H fails ({(self.d - 1) * self.Delta:.6g})")
        return out


def build_infinite(params: InfiniteHardParams) -> MnlMdp:
    """Two-state instance: ``x0`` (reward 0) and ``x1`` (reward 1), reachable order ``[x0, x1]``."""
    failures = params.precondition_failures()
    if failures:
        raise PreconditionError("hard-instance preconditions violated: " + "; ".join(failures))
    d = params.d
    acts = sign_actions(d)
    A = len(acts)
    if 2 * A * 2 > MAX_SAU:
        raise PreconditionError("instance too large")
    lg = math.log(1.0 / params.delta - 1.0)
    stay = np.concatenate([np.zeros(d - 1), [params.beta * lg]])
    zero = np.zeros(d)
    f0, f1 = [], []
    for a in acts:
        f0.append([np.concatenate([-params.alpha * a, [params.beta * lg]]), zero])
        f1.append([zero, stay])
    reach = [[[0, 1]] * A, [[0, 1]] * A]
    rewards = np.array([np.zeros(A), np.ones(A)])
    return MnlMdp(2, A, d, reach, [f0, f1], rewards, params.theta_bar,
                  1.0 + lg, float(np.linalg.norm(params.theta_bar)))


def build_finite(params: FiniteHardParams) -> MnlMdp:
    """Stationary encoding of the layered instance with a block core of dimension ``d * H``.

    States ``x_1..x_{H+2}`` have ids ``0..H+1``.  From ``x_h`` the reachable
    list is ``[x_{h+1}, x_{H+2}]``; the feature towards ``x_{h+1}`` sits in
    block ``h``, the one towards ``x_{H+2}`` is zero.  ``x_{H+1}`` and
    ``x_{H+2}`` are absorbing; reward 1 is paid only at ``x_{H+2}``.
    """
    failures = params.precondition_failures()
    if failures:
        raise PreconditionError("hard-instance preconditions violated: " + "; ".join(failures))
    d, H = params.d, params.H
    acts = sign_actions(d)
    A = len(acts)
    S = H + 2
    if S * A * 2 > MAX_SAU:
        raise PreconditionError(f"S*A*U = {S * A * 2} exceeds the cap of {MAX_SAU}")
    dim = d * H
    lg = math.log(H - 1.0)
    zero = np.zeros(dim)
    reach, feats = [], []
    for h in range(1, H + 1):
        rrow, frow = [], []
        for a in acts:
            f = np.zeros(dim)
            f[(h - 1) * d:h * d] = np.concatenate([-params.alpha * a, [params.beta * lg]])
            rrow.append([h, H + 1])
            frow.append([f, zero])
        reach.append(rrow)
        feats.append(frow)
    for sid in (H, H + 1):
        reach.append([[sid]] * A)
        feats.append([[zero]] * A)
    rewards = np.zeros((S, A))
    rewards[H + 1] = 1.0
    core = np.concatenate([params.block_core(h) for h in range(1, H + 1)])
    return MnlMdp(S, A, dim, reach, feats, rewards, core, 1.0 + lg, float(np.linalg.norm(core)))


@dataclass
class Check:
    name: str
    passed: bool
    margin: float
    detail: str = ""

    def to_dict(self):
        return {"name": self.name, "passed": self.passed, "margin": self.margin, "detail": self.detail}


@dataclass
class ValidationReport:
    checks: list

    @property
    def passed(self) -> bool:
        return all(c.passed for c in self.checks)

    def failed(self) -> list:
        return [c.name for c in self.checks if not c.passed]

    def to_dict(self):
        return {"passed": self.passed, "checks": [c.to_dict() for c in self.checks]}


def _check(name, margin, detail="", slack=0.0):
    return Check(name, bool(margin >= -slack), float(margin), detail)


def _sandwich(delta, slope, half_width):
    x = np.linspace(-half_width, half_width, GRID_POINTS)
    f = mnl_sigmoid(x, delta)
    df = f[:, None] - f[None, :]
    dx = x[:, None] - x[None, :]
    upper = x[:, None] >= x[None, :]
    lower_margin = float(np.min(np.where(upper, df, np.inf)))
    upper_margin = float(np.min(np.where(upper, slope * dx - df, np.inf)))
    return lower_margin, upper_margin


def validate_instance(mdp: MnlMdp, params) -> ValidationReport:
    """Check every structural claim about a built instance; failures are reported, not raised."""
    if isinstance(params, InfiniteHardParams):
        return _validate_infinite(mdp, params)
    if isinstance(params, FiniteHardParams):
        return _validate_finite(mdp, params)
    raise TypeError("params must be InfiniteHardParams or FiniteHardParams")


def _validate_infinite(mdp, p: InfiniteHardParams) -> ValidationReport:
    dl, Dl, Db = p.delta, p.Delta, p.Delta_bar
    checks = [
        _check("100*Delta <= delta", dl - 100 * Dl),
        _check("2*delta + Delta <= 1", 1 - (2 * dl + Dl)),
        _check("Delta <= delta(1 - delta)", dl * (1 - dl) - Dl),
    ]
    fb = float(mnl_sigmoid(Db, dl))
    checks.append(_check("f(Delta_bar) == delta + Delta", 1e-12 - abs(fb - (dl + Dl)), f"f = {fb!r}"))
    lo, hi = _sandwich(dl, dl + Dl, Db)
    checks.append(_check("0 <= f(x) - f(y)", lo, slack=1e-12))
    checks.append(_check("f(x) - f(y) <= (delta + Delta)(x - y)", hi, slack=1e-12))
    norm = float(np.linalg.norm(p.theta_bar))
    checks.append(_check("||theta_bar|| == 1 + Delta_bar", 1e-12 - abs(norm - (1 + Db))))
    checks.append(_check("||theta_bar|| <= 100/99", 100 / 99 - norm))
    if dl < 100 / 101:
        general = 1 + 1 / (100 - 101 * dl)
        checks.append(_check("||theta_bar|| <= 1 + 1/(100 - 101 delta)", general - norm))
    phi_max = max(float(np.linalg.norm(f, axis=1).max()) for row in mdp.features for f in row)
    checks.append(_check("||phi|| <= 1 + log(1/delta - 1)", 1 + math.log(1 / dl - 1) - phi_max))
    best = p.best_action
    checks.append(_check("best action achieves a.theta == Delta_bar", 1e-12 - abs(best @ p.theta - Db)))
    if p.d <= 8:
        acts = sign_actions(p.d)
        probs = np.array([transition_probs(mdp, 0, i, mdp.theta_star)[1] for i in range(len(acts))])
        best_idx = int(np.flatnonzero(np.all(acts == best, axis=1))[0])
        checks.append(_check("best action maximises p(x1 | x0, a)", probs[best_idx] - probs.max()))
    stay = np.array([transition_probs(mdp, 1, a, mdp.theta_star) for a in range(mdp.num_actions)])
    checks.append(_check("p(. | x1, a) == (delta, 1 - delta)",
                         1e-12 - float(np.max(np.abs(stay - [dl, 1 - dl])))))
    return ValidationReport(checks)


def _validate_finite(mdp, p: FiniteHardParams) -> ValidationReport:
    d, H, dl, Dl, Db = p.d, p.H, p.delta, p.Delta, p.Delta_bar
    m = (d - 1) * Dl
    checks = [_check("(d-1)*Delta <= delta/H", dl / H - m)]
    fb = float(mnl_sigmoid((d - 1) * Db, dl))
    checks.append(_check("f((d-1) Delta_bar) == delta + (d-1) Delta", 1e-12 - abs(fb - (dl + m))))
    lo, hi = _sandwich(dl, dl + m, (d - 1) * Db)
    checks.append(_check("0 <= f(x) - f(y)", lo, slack=1e-12))
    checks.append(_check("f(x) - f(y) <= (delta + (d-1) Delta)(x - y)", hi, slack=1e-12))
    norms = np.array([np.linalg.norm(p.block_core(h)) for h in range(1, H + 1)])
    checks.append(_check("||theta_bar_h|| <= 3/2", 1.5 - float(norms.max())))
    phi_max = max(float(np.linalg.norm(f, axis=1).max()) for row in mdp.features for f in row)
    checks.append(_check("||phi|| <= 1 + log(H - 1)", 1 + math.log(H - 1) - phi_max))
    acts = sign_actions(d)
    worst = 0.0
    for h in range(1, H + 1):
        for i, a in enumerate(acts):
            q = transition_probs(mdp, h - 1, i, mdp.theta_star)
            target = float(mnl_sigmoid(a @ p.thetas[h - 1], dl))
            worst = max(worst, abs(q[1] - target), abs(q[0] - (1 - target)))
    checks.append(_check("p(x_{H+2} | x_h, a) == f(a.theta_h)", 1e-12 - worst))
    absorbing = all(
        len(mdp.reachable[s][a]) == 1 and mdp.reachable[s][a][0] == s
        for s in (H, H + 1) for a in range(mdp.num_actions)
    )
    checks.append(Check("x_{H+1}, x_{H+2} absorbing", absorbing, 0.0))
    return ValidationReport(checks)
