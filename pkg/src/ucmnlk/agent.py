"""The UCMNLK learner: optimistic planning with DEVI on confidence polytopes,
replanning whenever ``det(sigma)`` has doubled since the episode started."""
from __future__ import annotations

import math
import time
from dataclasses import asdict, dataclass, field, replace
from typing import Callable, Optional, Union

import numpy as np

from . import estimator as est
from .errors import ConfigError
from .mdp import Environment, MnlMdp
from .planner import devi, greedy_policy

LOG2 = math.log(2.0)


@dataclass(frozen=True)
class AgentConfig:
    """Settings of one UCMNLK run.

    ``gamma`` is a discount in ``[0, 1)`` or ``"auto-average"``; ``n_devi`` an
    int or ``"auto"``; ``lam`` and ``eta`` floats or ``"paper-default"``.
    ``diameter`` is the bound D, required by ``"auto-average"``.
    """

    horizon: int
    gamma: Union[float, str] = "auto-average"
    n_devi: Union[int, str] = "auto"
    delta: float = 0.1
    c_beta: float = 1.0
    lam: Union[float, str] = "paper-default"
    eta: Union[float, str] = "paper-default"
    polytope_mode: str = "exact"
    seed: int = 0
    diameter: Optional[float] = None

    def validate(self) -> None:
        if not 0.0 < self.delta < 1.0:
            raise ConfigError(f"delta = {self.delta} must lie in (0, 1)")
        if int(self.horizon) != self.horizon or self.horizon < 1:
            raise ConfigError(f"horizon T = {self.horizon} must be a positive integer")
        if self.polytope_mode not in ("exact", "simplified"):
            raise ConfigError(f"polytope_mode must be 'exact' or 'simplified', got {self.polytope_mode!r}")
        if self.c_beta < 0:
            raise ConfigError("c_beta must be >= 0")
        if isinstance(self.gamma, str):
            if self.gamma != "auto-average":
                raise ConfigError(f"gamma must be a number or 'auto-average', got {self.gamma!r}")
        elif not 0.0 <= self.gamma < 1.0:
            raise ConfigError(f"gamma = {self.gamma} must lie in [0, 1)")
        if isinstance(self.n_devi, str):
            if self.n_devi != "auto":
                raise ConfigError(f"n_devi must be an integer or 'auto', got {self.n_devi!r}")
        elif self.n_devi < 1:
            raise ConfigError("n_devi must be >= 1")
        for name in ("lam", "eta"):
            val = getattr(self, name)
            if isinstance(val, str):
                if val != "paper-default":
                    raise ConfigError(f"{name} must be a number or 'paper-default', got {val!r}")
        if not isinstance(self.lam, str) and self.lam <= 0:
            raise ConfigError("lambda must be > 0")
        if not isinstance(self.eta, str) and self.eta < 0:
            raise ConfigError("eta must be >= 0")

    @property
    def resolved(self) -> bool:
        return not any(isinstance(getattr(self, k), str) for k in ("gamma", "n_devi", "lam", "eta"))


def resolve_auto(config: AgentConfig, dim: int, u_max: int = 2, l_theta: float = 1.0,
                 l_phi: float = 1.0) -> AgentConfig:
    """Replace every ``auto``/``paper-default`` setting by its numeric value."""
    config.validate()
    T, d = config.horizon, dim
    gamma, n = config.gamma, config.n_devi
    if gamma == "auto-average":
        D = config.diameter
        if D is None:
            raise ConfigError("average-reward mode needs a diameter bound D (set 'diameter')")
        if D <= 0:
            raise ConfigError("diameter bound D must be positive")
        gamma = 1.0 - math.sqrt(d / (D * T))
        if not 0.0 <= gamma < 1.0:
            raise ConfigError(f"auto gamma = {gamma} is outside [0, 1): T is too small for d = {d}, D = {D}")
        if n == "auto":
            n = math.ceil(math.sqrt(D * T / d) * math.log(math.sqrt(T) / (d * D)))
    elif n == "auto":
        n = math.ceil(math.log(math.sqrt(T) / d) / (1.0 - gamma)) if gamma > 0 else 1
    n = max(int(n), 1)
    eta = est.paper_default_eta(u_max, l_theta, l_phi) if config.eta == "paper-default" else float(config.eta)
    lam = (est.paper_default_lambda(d, l_theta, l_phi, eta) if config.lam == "paper-default"
           else float(config.lam))
    return replace(config, gamma=float(gamma), n_devi=n, lam=float(lam), eta=float(eta))


def episode_bound(T: int, d: int, l_phi: float, lam: float) -> float:
    """Upper bound on the number of episodes: ``1 + d log2(1 + 2 T L_phi^2 / lambda)``."""
    return 1.0 + d * math.log2(1.0 + 2.0 * T * l_phi**2 / lam)


@dataclass
class EpisodeRecord:
    t_start: int
    logdet: float
    beta: float
    devi_gap: float
    devi_last_drop: float
    devi_monotone: bool
    planning_time: float
    policy: np.ndarray
    v: np.ndarray


@dataclass
class RunLog:
    """Trajectory of one run.  Arrays are indexed by step ``t - 1``."""

    header: dict
    states: np.ndarray
    actions: np.ndarray
    rewards: np.ndarray
    next_states: np.ndarray
    episodes: np.ndarray
    episode_records: list = field(default_factory=list)
    steps_done: int = 0

    @property
    def num_episodes(self) -> int:
        return len(self.episode_records)

    @property
    def cum_reward(self) -> float:
        return float(self.rewards[:self.steps_done].sum())

    def truncated(self) -> "RunLog":
        n = self.steps_done
        return replace(self, states=self.states[:n], actions=self.actions[:n], rewards=self.rewards[:n],
                       next_states=self.next_states[:n], episodes=self.episodes[:n])

    def check_episode_bound(self) -> bool:
        h = self.header
        return self.num_episodes <= episode_bound(self.steps_done, h["dim"], h["l_phi"], h["lam"])

    def same_trajectory(self, other: "RunLog") -> bool:
        """Equality of everything except wall-clock planning times."""
        keys = ("states", "actions", "rewards", "next_states", "episodes")
        if self.steps_done != other.steps_done or self.header != other.header:
            return False
        if not all(np.array_equal(getattr(self, k), getattr(other, k)) for k in keys):
            return False
        if self.num_episodes != other.num_episodes:
            return False
        for a, b in zip(self.episode_records, other.episode_records):
            da, db = asdict(a), asdict(b)
            da.pop("planning_time"), db.pop("planning_time")
            for k in da:
                if not np.array_equal(da[k], db[k]):
                    return False
        return True


def _empty_log(header, T):
    return RunLog(header, np.zeros(T, dtype=np.int64), np.zeros(T, dtype=np.int64), np.zeros(T),
                  np.zeros(T, dtype=np.int64), np.zeros(T, dtype=np.int64))


def seed_streams(seed: int):
    """Independent ``(environment, agent)`` generators derived from one seed."""
    env_ss, agent_ss = np.random.SeedSequence(seed).spawn(2)
    return np.random.default_rng(env_ss), np.random.default_rng(agent_ss)


def _header(model: MnlMdp, cfg: AgentConfig, agent: str) -> dict:
    return {
        "agent": agent,
        "config": asdict(cfg),
        "dim": model.dim,
        "num_states": model.num_states,
        "num_actions": model.num_actions,
        "u_max": model.u_max,
        "l_phi": model.l_phi,
        "l_theta": model.l_theta,
        "lam": cfg.lam if not isinstance(cfg.lam, str) else None,
    }


def plan(state: est.EstimatorState, model: MnlMdp, cfg: AgentConfig) -> EpisodeRecord:
    """Episode-start planning: polytope at ``beta_{t_k}``, DEVI, greedy policy."""
    t0 = time.perf_counter()
    b = est.beta(state.t, model.dim, model.u_max, cfg.delta, cfg.c_beta)
    poly = est.build_polytope(state, model, b, cfg.polytope_mode)
    res = devi(model.rewards, poly, cfg.gamma, cfg.n_devi)
    return EpisodeRecord(state.t, state.logdet_sigma, b, res.final_gap, res.last_drop, res.monotone,
                         time.perf_counter() - t0, greedy_policy(res.q), res.v)


StepCallback = Callable[[int, est.EstimatorState, object], None]


def run(mdp: MnlMdp, config: AgentConfig, on_step: Optional[StepCallback] = None,
        env_rng: Optional[np.random.Generator] = None) -> RunLog:
    """Run UCMNLK for ``config.horizon`` steps on the environment defined by ``mdp``.

    The learner only touches ``mdp.public()``.  ``on_step(t, state, sample)``
    is called after the estimator has absorbed step ``t`` (``state.t == t + 1``).
    On failure the exception carries the partial log as ``partial_log``.
    """
    env_rng = seed_streams(config.seed)[0] if env_rng is None else env_rng
    env = Environment(mdp, env_rng)
    model = env.model
    cfg = resolve_auto(config, model.dim, model.u_max, model.l_theta, model.l_phi)
    T = cfg.horizon
    log = _empty_log(_header(model, cfg, "ucmnlk"), T)
    state = est.EstimatorState.initial(model.dim, cfg.lam, cfg.eta, model.l_theta)
    rewards = model.rewards
    try:
        switch = True
        for t in range(1, T + 1):
            if switch:
                rec = plan(state, model, cfg)
                log.episode_records.append(rec)
                policy, start = rec.policy, rec.logdet
                k = len(log.episode_records) - 1
            s = env.state
            a = int(policy[s])
            sample = env.step(a)
            state = est.update(state, sample)
            i = t - 1
            log.states[i], log.actions[i], log.rewards[i] = s, a, rewards[s, a]
            log.next_states[i], log.episodes[i] = sample.next_state, k
            log.steps_done = t
            if on_step is not None:
                on_step(t, state, sample)
            switch = state.logdet_sigma > start + LOG2
    except Exception as exc:
        exc.partial_log = log
        raise
    log.header["final_theta_hat"] = state.theta_hat.tolist()
    return log


def run_policy(mdp: MnlMdp, policy, horizon: int, seed: int, agent: str = "fixed") -> RunLog:
    """Roll out a stationary policy: int array, or ``(S, A)`` action probabilities."""
    env_rng, agent_rng = seed_streams(seed)
    env = Environment(mdp, env_rng)
    policy = np.asarray(policy)
    stochastic = policy.ndim == 2
    if stochastic:
        cdfs = np.cumsum(policy, axis=1)
    log = _empty_log({"agent": agent, "seed": seed, "dim": mdp.dim, "num_states": mdp.num_states,
                      "num_actions": mdp.num_actions}, horizon)
    for t in range(1, horizon + 1):
        s = env.state
        if stochastic:
            a = min(int(np.searchsorted(cdfs[s], agent_rng.random(), side="right")), mdp.num_actions - 1)
        else:
            a = int(policy[s])
        sample = env.step(a)
        i = t - 1
        log.states[i], log.actions[i], log.rewards[i] = s, a, mdp.rewards[s, a]
        log.next_states[i] = sample.next_state
        log.steps_done = t
    return log


def update_batch(theta, sigma, phi, y, mask, eta: float, l_theta: float):
    """Estimator step for ``n`` independent learners at once.

    ``phi`` is ``(n, U, d)`` zero-padded, ``y`` one-hot ``(n, U)``, ``mask``
    the real entries.  Same arithmetic as :func:`ucmnlk.estimator.update`;
    results agree with it up to floating-point reassociation.
    """
    def probs(th):
        z = np.where(mask, np.einsum("nud,nd->nu", phi, th), -np.inf)
        e = np.exp(z - z.max(axis=1, keepdims=True))
        return e / e.sum(axis=1, keepdims=True)

    def hess(p):
        mean = np.einsum("nu,nud->nd", p, phi)
        h = np.einsum("nu,nud,nue->nde", p, phi, phi) - mean[:, :, None] * mean[:, None, :]
        return 0.5 * (h + np.swapaxes(h, 1, 2))

    p = probs(theta)
    g = np.einsum("nu,nud->nd", p - y, phi)
    sigma_hat = sigma + eta * hess(p)
    try:
        L = np.linalg.cholesky(sigma_hat)
    except np.linalg.LinAlgError:
        raise est.NumericalError("Cholesky factorisation failed in a batched update") from None
    z = np.linalg.solve(L, g[:, :, None])
    step = np.linalg.solve(np.swapaxes(L, 1, 2), z)[:, :, 0]
    v = theta - eta * step
    out = v.copy()
    for i in np.flatnonzero(np.einsum("nd,nd->n", v, v) > l_theta**2):
        out[i] = est.project_ball_weighted(v[i], sigma_hat[i], l_theta)
    sigma_next = sigma + hess(probs(out))
    sign, logdet = np.linalg.slogdet(sigma_next)
    if np.any(sign <= 0):
        raise est.NumericalError("sigma lost positive definiteness in a batched update")
    return out, sigma_next, logdet


BatchCallback = Callable[[int, np.ndarray, np.ndarray], None]


def run_batch(mdp: MnlMdp, config: AgentConfig, seeds, on_step: Optional[BatchCallback] = None):
    """UCMNLK for several seeds in lockstep (vectorised estimator and environment).

    Each seed sees exactly the environment stream :func:`run` would give it;
    episode logic and planning are per seed.  ``on_step(t, theta_hat, sigma)``
    receives the stacked estimator state after step ``t`` (index ``t + 1``).
    """
    seeds = list(seeds)
    n = len(seeds)
    model = mdp.public()
    cfg = resolve_auto(config, model.dim, model.u_max, model.l_theta, model.l_phi)
    T, d = cfg.horizon, model.dim
    flat = model._flat
    pad = flat["padded"]
    mask_pairs = pad >= 0
    rows = np.where(mask_pairs, pad, 0)
    phi_pairs = np.where(mask_pairs[..., None], flat["phi"][rows], 0.0)
    next_pairs = np.where(mask_pairs, flat["next"][rows], 0)
    P = mdp.transition_matrix()
    A = model.num_actions
    cdf_pairs = np.full(pad.shape, np.inf)
    for i, size in enumerate(flat["sizes"]):
        s, a = divmod(i, A)
        cdf_pairs[i, :size] = np.cumsum(P[s, a, model.reachable[s][a]])
    rngs = [seed_streams(sd)[0] for sd in seeds]

    logs = [RunLog(_header(model, replace(cfg, seed=sd), "ucmnlk"), *(np.zeros(0),) * 5) for sd in seeds]
    theta = np.zeros((n, d))
    sigma = np.broadcast_to(cfg.lam * np.eye(d), (n, d, d)).copy()
    logdet = np.full(n, d * math.log(cfg.lam))
    states = np.full(n, mdp.initial_state, dtype=np.int64)
    policies = np.zeros((n, model.num_states), dtype=np.int64)
    start = np.zeros(n)
    replan = np.ones(n, dtype=bool)
    idx = np.arange(n)
    episode = np.zeros(n, dtype=np.int64)
    hist_s, hist_a, hist_n, hist_e = (np.zeros((n, T), dtype=np.int64) for _ in range(4))
    for t in range(1, T + 1):
        for i in np.flatnonzero(replan):
            st = est.EstimatorState(theta[i].copy(), sigma[i].copy(), t, cfg.lam, cfg.eta,
                                    model.l_theta, float(logdet[i]))
            rec = plan(st, model, cfg)
            logs[i].episode_records.append(rec)
            policies[i], start[i] = rec.policy, rec.logdet
            episode[i] = len(logs[i].episode_records) - 1
        actions = policies[idx, states]
        pairs = states * A + actions
        u = np.array([r.random() for r in rngs])
        k = (cdf_pairs[pairs] <= u[:, None]).sum(axis=1)
        k = np.minimum(k, flat["sizes"][pairs] - 1)
        nxt = next_pairs[pairs, k]
        y = np.zeros((n, pad.shape[1]))
        y[idx, k] = 1.0
        theta, sigma, logdet = update_batch(theta, sigma, phi_pairs[pairs], y, mask_pairs[pairs],
                                            cfg.eta, model.l_theta)
        j = t - 1
        hist_s[:, j], hist_a[:, j], hist_n[:, j], hist_e[:, j] = states, actions, nxt, episode
        states = nxt
        if on_step is not None:
            on_step(t, theta, sigma)
        replan = logdet > start + LOG2
    for i, log in enumerate(logs):
        log.states, log.actions, log.next_states, log.episodes = hist_s[i], hist_a[i], hist_n[i], hist_e[i]
        log.rewards = np.asarray(model.rewards)[hist_s[i], hist_a[i]]
        log.steps_done = T
    return logs
