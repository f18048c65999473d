"""MDPs whose transitions follow a multinomial logistic (softmax) model.

For every state-action pair ``(s, a)`` the model stores the ordered list of
reachable next states and one feature vector per reachable state.  The
next-state distribution is the softmax of ``phi(s, a, s') @ theta`` over that
list.  The true core ``theta_star`` is held by the environment and the exact
oracles; learners get a copy with the core stripped (:meth:`MnlMdp.public`).
"""
from __future__ import annotations

import itertools
import math
from dataclasses import dataclass, field, replace
from typing import Optional

import numpy as np

from .errors import DiameterInfiniteError, DomainError, InstanceError

Path = tuple


def _frozen(arr, dtype=float):
    out = np.array(arr, dtype=dtype)
    out.setflags(write=False)
    return out


def softmax(logits):
    """Numerically safe softmax (max logit subtracted before exponentiating)."""
    z = logits - np.max(logits)
    e = np.exp(z)
    return e / e.sum()


@dataclass(frozen=True, eq=False)
class MnlMdp:
    """Finite MDP with MNL transitions.

    ``reachable[s][a]`` is an int array of next-state ids and
    ``features[s][a]`` the matching ``(len(reachable[s][a]), dim)`` array.
    Construction validates shapes, reward range and the declared norm bounds;
    the zero-feature convention is checked separately by
    :meth:`satisfies_recentering` because :func:`recenter` must accept models
    that do not have it yet.
    """

    num_states: int
    num_actions: int
    dim: int
    reachable: tuple
    features: tuple
    rewards: np.ndarray
    theta_star: Optional[np.ndarray]
    l_phi: float
    l_theta: float
    initial_state: int = 0
    _flat: dict = field(default=None, repr=False, compare=False)

    def __post_init__(self):
        problems = _structural_problems(self)
        if problems:
            raise InstanceError(
                "invalid MNL MDP", [f"{_fmt_path(p)}: {m}" for p, m in problems]
            )
        S, A = self.num_states, self.num_actions
        reach = tuple(
            tuple(_frozen(self.reachable[s][a], dtype=np.int64) for a in range(A))
            for s in range(S)
        )
        feats = tuple(
            tuple(_frozen(self.features[s][a]).reshape(len(reach[s][a]), self.dim) for a in range(A))
            for s in range(S)
        )
        object.__setattr__(self, "reachable", reach)
        object.__setattr__(self, "features", feats)
        object.__setattr__(self, "rewards", _frozen(self.rewards))
        if self.theta_star is not None:
            object.__setattr__(self, "theta_star", _frozen(self.theta_star))
        object.__setattr__(self, "l_phi", float(self.l_phi))
        object.__setattr__(self, "l_theta", float(self.l_theta))
        problems = _bound_problems(self)
        if problems:
            raise InstanceError(
                "MNL MDP violates its declared bounds", [f"{_fmt_path(p)}: {m}" for p, m in problems]
            )
        object.__setattr__(self, "_flat", _flatten(self))

    @property
    def u_max(self) -> int:
        return max(len(r) for row in self.reachable for r in row)

    @property
    def num_pairs(self) -> int:
        return self.num_states * self.num_actions

    def public(self) -> "MnlMdp":
        """Copy without the true core: everything a learner may see."""
        return replace(self, theta_star=None, _flat=None)

    def satisfies_recentering(self) -> bool:
        return all(
            np.any(np.all(f == 0.0, axis=1)) for row in self.features for f in row
        )

    def transition_matrix(self, theta=None) -> np.ndarray:
        """Dense ``(S, A, S)`` transition tensor at ``theta`` (default: true core)."""
        theta = self._core(theta)
        P = np.zeros((self.num_states, self.num_actions, self.num_states))
        for s in range(self.num_states):
            for a in range(self.num_actions):
                P[s, a, self.reachable[s][a]] = softmax(self.features[s][a] @ theta)
        return P

    def _core(self, theta):
        if theta is None:
            if self.theta_star is None:
                raise ValueError("this model carries no true core; pass theta explicitly")
            return self.theta_star
        theta = np.asarray(theta, dtype=float)
        if theta.shape != (self.dim,):
            raise ValueError(f"theta must have shape ({self.dim},), got {theta.shape}")
        if not np.all(np.isfinite(theta)):
            raise ValueError("theta must be finite")
        return theta


def _fmt_path(path) -> str:
    out = str(path[0]) if path else "<root>"
    for p in path[1:]:
        out += f"[{p}]"
    return out


def _structural_problems(m) -> list:
    probs = []
    for name in ("num_states", "num_actions", "dim"):
        v = getattr(m, name)
        if not isinstance(v, (int, np.integer)) or isinstance(v, bool) or v < 1:
            probs.append(((name,), f"must be a positive integer, got {v!r}"))
    if probs:
        return probs
    S, A, d = int(m.num_states), int(m.num_actions), int(m.dim)
    rewards = np.asarray(m.rewards, dtype=float)
    if rewards.shape != (S, A):
        probs.append((("rewards",), f"expected shape ({S}, {A}), got {rewards.shape}"))
    else:
        for s, a in zip(*np.nonzero(~((rewards >= 0.0) & (rewards <= 1.0)))):
            probs.append((("rewards", int(s), int(a)), f"reward {rewards[s, a]!r} outside [0, 1]"))
    if len(m.reachable) != S or any(len(row) != A for row in m.reachable):
        probs.append((("reachable",), f"expected {S} x {A} nested lists"))
        return probs
    if len(m.features) != S or any(len(row) != A for row in m.features):
        probs.append((("features",), f"expected {S} x {A} nested lists"))
        return probs
    for s in range(S):
        for a in range(A):
            r = np.asarray(m.reachable[s][a])
            if r.ndim != 1 or r.size == 0:
                probs.append((("reachable", s, a), "reachable set must be a nonempty list"))
                continue
            if not np.issubdtype(r.dtype, np.integer) or np.any(r < 0) or np.any(r >= S):
                probs.append((("reachable", s, a), f"state ids must be integers in [0, {S})"))
            elif len(set(r.tolist())) != r.size:
                probs.append((("reachable", s, a), "duplicate next-state ids"))
            f = np.asarray(m.features[s][a], dtype=float)
            if f.shape != (r.size, d):
                probs.append((("features", s, a), f"expected shape ({r.size}, {d}), got {f.shape}"))
            elif not np.all(np.isfinite(f)):
                probs.append((("features", s, a), "non-finite feature entries"))
    if m.theta_star is not None:
        th = np.asarray(m.theta_star, dtype=float)
        if th.shape != (d,) or not np.all(np.isfinite(th)):
            probs.append((("theta_star",), f"must be a finite vector of length {d}"))
    for name in ("l_phi", "l_theta"):
        v = getattr(m, name)
        if not (isinstance(v, (int, float, np.floating)) and math.isfinite(v) and v >= 0):
            probs.append(((name,), f"must be a finite real >= 0, got {v!r}"))
    if not (0 <= m.initial_state < S):
        probs.append((("initial_state",), f"must lie in [0, {S})"))
    return probs


def _bound_problems(m) -> list:
    probs = []
    slack = 1e-12 * max(1.0, m.l_phi)
    for s in range(m.num_states):
        for a in range(m.num_actions):
            norms = np.linalg.norm(m.features[s][a], axis=1)
            for k in np.nonzero(norms > m.l_phi + slack)[0]:
                probs.append(
                    (("features", s, a, int(k)), f"norm {norms[k]:.17g} exceeds l_phi={m.l_phi:.17g}")
                )
    if m.theta_star is not None:
        n = float(np.linalg.norm(m.theta_star))
        if n > m.l_theta + 1e-12 * max(1.0, m.l_theta):
            probs.append((("theta_star",), f"norm {n:.17g} exceeds l_theta={m.l_theta:.17g}"))
        for s in range(m.num_states):
            for a in range(m.num_actions):
                p = softmax(m.features[s][a] @ m.theta_star)
                if not np.all(p > 0.0):
                    probs.append((("features", s, a), "a reachable state has probability 0 at theta_star"))
    return probs


def _flatten(m) -> dict:
    # Pair index i = s * A + a; rows of `phi` for pair i are phi[offsets[i]:offsets[i + 1]].
    sizes = np.array([len(m.reachable[s][a]) for s in range(m.num_states) for a in range(m.num_actions)])
    offsets = np.concatenate([[0], np.cumsum(sizes)])
    phi = np.concatenate([m.features[s][a] for s in range(m.num_states) for a in range(m.num_actions)])
    nxt = np.concatenate([m.reachable[s][a] for s in range(m.num_states) for a in range(m.num_actions)])
    U = int(sizes.max())
    # Padded (num_pairs, U) index table into the flat rows, -1 marking padding.
    pad = -np.ones((len(sizes), U), dtype=np.int64)
    for i, (lo, n) in enumerate(zip(offsets[:-1], sizes)):
        pad[i, :n] = np.arange(lo, lo + n)
    return {"sizes": sizes, "offsets": offsets, "phi": phi, "next": nxt, "padded": pad}


def _pair(mdp: MnlMdp, s, a):
    if not (0 <= s < mdp.num_states and 0 <= a < mdp.num_actions):
        raise DomainError(f"(s, a) = ({s}, {a}) is outside {mdp.num_states} states x {mdp.num_actions} actions")
    return int(s), int(a)


def transition_probs(mdp: MnlMdp, s: int, a: int, theta) -> np.ndarray:
    """Next-state distribution over ``mdp.reachable[s][a]`` at core ``theta``."""
    s, a = _pair(mdp, s, a)
    theta = np.asarray(theta, dtype=float)
    if theta.shape != (mdp.dim,):
        raise ValueError(f"theta must have shape ({mdp.dim},), got {theta.shape}")
    if not np.all(np.isfinite(theta)):
        raise ValueError("theta must be finite")
    return softmax(mdp.features[s][a] @ theta)


@dataclass(frozen=True, eq=False)
class TransitionSample:
    """One observed transition with everything the estimator needs."""

    state: int
    action: int
    next_state: int
    reachable_features: np.ndarray
    response: np.ndarray

    @property
    def observed_index(self) -> int:
        return int(np.argmax(self.response))


def inverse_cdf(p, u):
    """Index selected by uniform draw(s) ``u`` walking ``p`` in stored order."""
    cdf = np.cumsum(p)
    idx = np.searchsorted(cdf, u, side="right")
    return np.minimum(idx, len(p) - 1)


def sample_transition(mdp: MnlMdp, s: int, a: int, rng: np.random.Generator) -> TransitionSample:
    """Draw ``s'`` from the true model by inverse CDF over the reachable list."""
    if mdp.theta_star is None:
        raise ValueError("cannot sample from a model without its true core")
    p = transition_probs(mdp, s, a, mdp.theta_star)
    k = int(inverse_cdf(p, rng.random()))
    y = np.zeros(len(p))
    y[k] = 1.0
    return TransitionSample(
        state=int(s),
        action=int(a),
        next_state=int(mdp.reachable[s][a][k]),
        reachable_features=mdp.features[s][a],
        response=y,
    )


class Environment:
    """Stateful simulator around a model with a known core.

    Learners interact only through :attr:`model` (core stripped), :attr:`state`
    and :meth:`step`.
    """

    def __init__(self, mdp: MnlMdp, rng: np.random.Generator, initial_state: Optional[int] = None):
        if mdp.theta_star is None:
            raise ValueError("an environment needs the true core")
        self._mdp = mdp
        self._rng = rng
        self.model = mdp.public()
        self.state = mdp.initial_state if initial_state is None else int(initial_state)
        S, A = mdp.num_states, mdp.num_actions
        self._probs = [[softmax(mdp.features[s][a] @ mdp.theta_star) for a in range(A)] for s in range(S)]
        self._cdfs = [[np.cumsum(p) for p in row] for row in self._probs]

    def step(self, action: int) -> TransitionSample:
        s, a = _pair(self._mdp, self.state, action)
        cdf = self._cdfs[s][a]
        k = min(int(np.searchsorted(cdf, self._rng.random(), side="right")), len(cdf) - 1)
        y = np.zeros(len(cdf))
        y[k] = 1.0
        nxt = int(self._mdp.reachable[s][a][k])
        self.state = nxt
        return TransitionSample(s, a, nxt, self._mdp.features[s][a], y)


def recenter(mdp: MnlMdp) -> MnlMdp:
    """Shift features so the first reachable state of every pair has feature 0.

    Probabilities are unchanged at every core (softmax is shift invariant).
    ``l_phi`` doubles if any shift was nonzero.
    """
    changed = False
    new = []
    for row in mdp.features:
        new_row = []
        for f in row:
            ref = f[0]
            if np.any(ref != 0.0):
                changed = True
                new_row.append(f - ref)
            else:
                new_row.append(f)
        new.append(new_row)
    if not changed:
        return mdp
    return replace(mdp, features=new, l_phi=2.0 * mdp.l_phi, _flat=None)


def _communicating_check(P: np.ndarray):
    S = P.shape[0]
    adj = (P > 0).any(axis=1)
    for src in range(S):
        seen = {src}
        frontier = [src]
        while frontier:
            nxt = []
            for u in frontier:
                for v in np.nonzero(adj[u])[0]:
                    if int(v) not in seen:
                        seen.add(int(v))
                        nxt.append(int(v))
            frontier = nxt
        if len(seen) < S:
            missing = sorted(set(range(S)) - seen)
            raise DiameterInfiniteError(
                f"states {missing} are unreachable from state {src}; the MDP is not communicating"
            )


def hitting_times(P: np.ndarray, target: int, tol: float = 1e-10, max_sweeps: int = 10**6) -> np.ndarray:
    """Minimal expected first-hitting times of ``target`` via value iteration.

    Iterates ``h(s) = 1 + min_a sum_x P[s, a, x] h(x)`` with ``h(target) = 0``.
    """
    S = P.shape[0]
    h = np.zeros(S)
    for _ in range(max_sweeps):
        h_new = 1.0 + (P @ h).min(axis=1)
        h_new[target] = 0.0
        change = np.max(np.abs(h_new - h))
        h = h_new
        if change < tol:
            return h
    raise DiameterInfiniteError(
        f"hitting times of state {target} did not converge in {max_sweeps} sweeps"
    )


def compute_diameter(mdp: MnlMdp, tol: float = 1e-10, max_sweeps: int = 10**6) -> float:
    """Max over ordered pairs of the minimal expected travel time (true model)."""
    P = mdp.transition_matrix()
    if mdp.num_states == 1:
        return 0.0
    _communicating_check(P)
    return float(max(hitting_times(P, t, tol, max_sweeps).max() for t in range(mdp.num_states)))


def _sample_ball(rng, n, d, radius):
    x = rng.standard_normal((n, d))
    norms = np.linalg.norm(x, axis=1, keepdims=True)
    norms[norms == 0.0] = 1.0
    r = radius * rng.random((n, 1)) ** (1.0 / d)
    return x / norms * r


def estimate_kappa(mdp: MnlMdp, n_samples: int, rng: np.random.Generator) -> float:
    """Sampled estimate of the pairwise-probability floor over the parameter ball.

    Minimum over ``n_samples`` cores drawn uniformly from ``||theta|| <= l_theta``
    and over all pairs and distinct reachable pairs ``(s', s'')`` of
    ``p(s') p(s'')`` (``p(s')**2`` for single-successor pairs).  Sampling can
    only miss the infimum, so the result is an upper estimate of kappa.
    """
    if n_samples < 1:
        raise ValueError("n_samples must be >= 1")
    thetas = _sample_ball(rng, n_samples, mdp.dim, mdp.l_theta)
    flat = mdp._flat
    best = np.inf
    for i, (lo, n) in enumerate(zip(flat["offsets"][:-1], flat["sizes"])):
        logits = thetas @ flat["phi"][lo:lo + n].T
        logits -= logits.max(axis=1, keepdims=True)
        p = np.exp(logits)
        p /= p.sum(axis=1, keepdims=True)
        if n == 1:
            cand = p[:, 0] ** 2
        else:
            two = np.sort(p, axis=1)[:, :2]
            cand = two[:, 0] * two[:, 1]
        best = min(best, float(cand.min()))
    return best


def random_mnl_mdp(
    num_states: int,
    num_actions: int,
    dim: int,
    u_max: int,
    rng: np.random.Generator,
    l_phi: float = 1.0,
    l_theta: float = 1.0,
    theta_norm: Optional[float] = None,
) -> MnlMdp:
    """Random communicating MNL MDP satisfying the zero-feature convention.

    Every pair reaches between ``min(2, u_max)`` and ``u_max`` states; action 0
    always includes ``s + 1 (mod S)`` so the chain is communicating.  The first
    reachable state carries the zero feature; the others get features drawn
    uniformly from the ``l_phi`` ball.
    """
    u_max = min(u_max, num_states)
    reach, feats = [], []
    for s in range(num_states):
        rrow, frow = [], []
        for a in range(num_actions):
            k = int(rng.integers(min(2, u_max), u_max + 1))
            pool = [x for x in range(num_states)]
            if a == 0 and num_states > 1:
                succ = (s + 1) % num_states
                pool.remove(succ)
                chosen = [succ] + list(rng.choice(pool, size=k - 1, replace=False))
                rng.shuffle(chosen)
            else:
                chosen = list(rng.choice(pool, size=k, replace=False))
            f = _sample_ball(rng, k, dim, l_phi)
            f[0] = 0.0
            rrow.append([int(c) for c in chosen])
            frow.append(f)
        reach.append(rrow)
        feats.append(frow)
    theta = _sample_ball(rng, 1, dim, l_theta)[0]
    if theta_norm is not None:
        theta = theta / max(np.linalg.norm(theta), 1e-300) * theta_norm
    rewards = rng.random((num_states, num_actions))
    return MnlMdp(num_states, num_actions, dim, reach, feats, rewards, theta, l_phi, l_theta)


def enumerate_policies(num_states: int, num_actions: int):
    """All deterministic stationary policies, as int arrays."""
    for combo in itertools.product(range(num_actions), repeat=num_states):
        yield np.array(combo, dtype=np.int64)
