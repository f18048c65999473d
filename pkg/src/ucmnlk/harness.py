"""Seeded experiments: run agents, measure regret against the exact oracles,
write per-seed CSVs, an aggregate CSV and a metadata file."""
from __future__ import annotations

import csv
import json
import os
import traceback
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Optional

import numpy as np

from . import __version__
from . import estimator as est
from .agent import AgentConfig, resolve_auto, run, run_policy
from .errors import AggregationError, ConfigError, UcmnlkError
from .hard_instances import FiniteHardParams, InfiniteHardParams, build_finite, build_infinite
from .instance_io import load_instance
from .mdp import MnlMdp, compute_diameter
from .oracle import evaluate_policy_discounted, solve_average, solve_discounted

AGENTS = ("ucmnlk", "random", "oracle-optimal")
STEP_COLUMNS = ("t", "state", "action", "reward", "episode", "cum_reward", "regret")
AGGREGATE_COLUMNS = ("t", "mean_regret", "median", "q25", "q75", "n_seeds")
SURROGATE = "per-episode-stationary-surrogate"
_AGENT_KEYS = {f.name for f in fields(AgentConfig)} - {"horizon", "seed"}


def fmt(x) -> str:
    """17 significant digits: exact round trip for doubles."""
    if isinstance(x, (int, np.integer)):
        return str(int(x))
    return format(float(x), ".17g")


@dataclass
class ExperimentConfig:
    """One experiment.  ``environment`` is either ``{"instance": path}`` or a
    builtin hard instance ``{"builtin": "infinite", "d", "D" | "gamma", "T"[, "signs"]}``
    / ``{"builtin": "finite", "d", "H", "K"[, "signs"]}``.
    """

    environment: dict
    horizon: int
    seeds: list
    out: str
    agent: str = "ucmnlk"
    agent_config: dict = field(default_factory=dict)
    objective: str = "average"
    gamma: Optional[float] = None
    diameter: Optional[float] = None
    stride: int = 100
    full_log: bool = False
    trace: bool = False
    workers: Optional[int] = None

    def validate(self) -> None:
        if not self.seeds:
            raise ConfigError("the seed list is empty")
        if len(set(self.seeds)) != len(self.seeds):
            raise ConfigError(f"seeds must be distinct: {self.seeds}")
        if any(int(s) != s or s < 0 for s in self.seeds):
            raise ConfigError("seeds must be non-negative integers")
        if self.stride < 1:
            raise ConfigError("stride must be >= 1")
        if self.horizon < 1:
            raise ConfigError("horizon must be >= 1")
        if self.agent not in AGENTS:
            raise ConfigError(f"agent must be one of {AGENTS}, got {self.agent!r}")
        if self.objective not in ("average", "discounted"):
            raise ConfigError(f"objective must be 'average' or 'discounted', got {self.objective!r}")
        if self.objective == "discounted" and (self.gamma is None or not 0.0 <= self.gamma < 1.0):
            raise ConfigError("the discounted objective needs gamma in [0, 1)")
        unknown = set(self.agent_config) - _AGENT_KEYS
        if unknown:
            raise ConfigError(f"unknown agent_config keys: {sorted(unknown)}")
        if self.workers is not None and self.workers < 1:
            raise ConfigError("workers must be >= 1")
        env = self.environment
        if not isinstance(env, dict) or not (("instance" in env) ^ ("builtin" in env)):
            raise ConfigError("environment needs exactly one of 'instance' or 'builtin'")

    @classmethod
    def from_dict(cls, doc: dict, base_dir=None) -> "ExperimentConfig":
        names = {f.name for f in fields(cls)}
        unknown = set(doc) - names
        if unknown:
            raise ConfigError(f"unknown experiment keys: {sorted(unknown)}")
        missing = [k for k in ("environment", "horizon", "seeds", "out") if k not in doc]
        if missing:
            raise ConfigError(f"experiment config is missing {missing}")
        cfg = cls(**doc)
        if base_dir is not None and "instance" in cfg.environment:
            path = Path(cfg.environment["instance"])
            if not path.is_absolute():
                cfg.environment = {**cfg.environment, "instance": str(Path(base_dir) / path)}
        return cfg

    @classmethod
    def load(cls, path) -> "ExperimentConfig":
        try:
            doc = json.loads(Path(path).read_text())
        except FileNotFoundError:
            raise ConfigError(f"config file {path} does not exist") from None
        except json.JSONDecodeError as exc:
            raise ConfigError(f"config file {path} line {exc.lineno}: {exc.msg}") from None
        if not isinstance(doc, dict):
            raise ConfigError("config file must hold a JSON object")
        return cls.from_dict(doc, Path(path).parent)


def build_environment(env: dict):
    """``(mdp, params or None)`` for an environment spec."""
    if "instance" in env:
        return load_instance(env["instance"]), None
    kind = env["builtin"]
    try:
        if kind == "infinite":
            if "D" in env:
                p = InfiniteHardParams.from_average(env["d"], env["D"], env["T"], env.get("signs"))
            else:
                p = InfiniteHardParams.from_discounted(env["d"], env["gamma"], env["T"], env.get("signs"))
            return build_infinite(p), p
        if kind == "finite":
            p = FiniteHardParams.create(env["d"], env["H"], env["K"], env.get("signs"))
            return build_finite(p), p
    except KeyError as exc:
        raise ConfigError(f"builtin environment is missing {exc}") from None
    raise ConfigError(f"unknown builtin environment {kind!r}")


@dataclass
class Ground:
    """Oracle quantities shared by every seed."""

    objective: str
    gain: Optional[float] = None
    v_star: Optional[np.ndarray] = None
    gamma: Optional[float] = None
    diameter: Optional[float] = None
    optimal_policy: Optional[np.ndarray] = None


def ground_truth(mdp: MnlMdp, cfg: ExperimentConfig) -> Ground:
    if cfg.objective == "average":
        sol = solve_average(mdp)
        D = cfg.diameter
        if D is None and cfg.agent == "ucmnlk" and cfg.agent_config.get("gamma", "auto-average") == "auto-average":
            D = compute_diameter(mdp)
        return Ground("average", gain=sol.gain, diameter=D, optimal_policy=np.argmax(sol.q, axis=1))
    sol = solve_discounted(mdp, cfg.gamma, tol=1e-12)
    return Ground("discounted", v_star=sol.v, gamma=cfg.gamma, diameter=cfg.diameter,
                  optimal_policy=np.argmax(sol.q, axis=1))


def agent_config(cfg: ExperimentConfig, ground: Ground, seed: int) -> AgentConfig:
    kw = dict(cfg.agent_config)
    if cfg.objective == "discounted":
        kw["gamma"] = cfg.gamma
    if ground.diameter is not None:
        kw.setdefault("diameter", ground.diameter)
    return AgentConfig(horizon=cfg.horizon, seed=seed, **kw)


def _policy_values(mdp, ground, policies):
    P = mdp.transition_matrix()
    return [evaluate_policy_discounted(mdp, pi, ground.gamma, P=P) for pi in policies]


def regret_curve(mdp, ground: Ground, log, uniform=False) -> np.ndarray:
    """Cumulative regret after each step.

    Average: running sum of ``J* - r_t``.  Discounted: running sum of
    ``V*(s_t) - V^pi(s_t)`` with ``pi`` the stationary policy of the episode
    active at ``t`` (the uniform policy for the random agent).
    """
    if ground.objective == "average":
        return np.cumsum(ground.gain - log.rewards)
    if uniform:
        pol = np.full((mdp.num_states, mdp.num_actions), 1.0 / mdp.num_actions)
        vals = _policy_values(mdp, ground, [pol])
        gap = ground.v_star[log.states] - vals[0][log.states]
    elif log.episode_records:
        vals = np.array(_policy_values(mdp, ground, [r.policy for r in log.episode_records]))
        gap = ground.v_star[log.states] - vals[log.episodes, log.states]
    else:
        vals = _policy_values(mdp, ground, [ground.optimal_policy])
        gap = ground.v_star[log.states] - vals[0][log.states]
    return np.cumsum(gap)


def snapshot_grid(T: int, stride: int, full: bool = False) -> np.ndarray:
    if full:
        return np.arange(1, T + 1)
    grid = np.arange(stride, T + 1, stride)
    if len(grid) == 0 or grid[-1] != T:
        grid = np.append(grid, T)
    return grid


def write_step_csv(path, log, regret, grid) -> None:
    cum = np.cumsum(log.rewards)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(STEP_COLUMNS)
        for t in grid:
            i = t - 1
            w.writerow([fmt(t), fmt(log.states[i]), fmt(log.actions[i]), fmt(log.rewards[i]),
                        fmt(log.episodes[i]), fmt(cum[i]), fmt(regret[i])])


def run_seed(mdp: MnlMdp, cfg: ExperimentConfig, ground: Ground, seed: int) -> dict:
    """Run one seed and write its CSV(s); returns a summary for the metadata."""
    out = Path(cfg.out)
    trace_rows = []
    if cfg.agent == "ucmnlk":
        acfg = agent_config(cfg, ground, seed)
        on_step = None
        if cfg.trace:
            theta_star = mdp.theta_star

            def on_step(t, state, sample):
                diff = state.theta_hat - theta_star
                b = est.beta(state.t, mdp.dim, mdp.u_max, acfg.delta, acfg.c_beta)
                trace_rows.append((t + 1, float(np.linalg.norm(diff)), state.error_norm(theta_star),
                                   b, state.logdet_sigma))
        log = run(mdp, acfg, on_step=on_step)
    elif cfg.agent == "random":
        pol = np.full((mdp.num_states, mdp.num_actions), 1.0 / mdp.num_actions)
        log = run_policy(mdp, pol, cfg.horizon, seed, agent="random")
    else:
        log = run_policy(mdp, ground.optimal_policy, cfg.horizon, seed, agent="oracle-optimal")
    regret = regret_curve(mdp, ground, log, uniform=cfg.agent == "random")
    grid = snapshot_grid(cfg.horizon, cfg.stride, cfg.full_log)
    write_step_csv(out / f"seed_{seed}.csv", log, regret, grid)
    if trace_rows:
        with open(out / f"trace_seed_{seed}.csv", "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(("t", "err_l2", "err_sigma", "beta", "logdet_sigma"))
            for row in trace_rows:
                w.writerow([fmt(x) for x in row])
    return {
        "seed": seed,
        "final_regret": float(regret[-1]),
        "cum_reward": log.cum_reward,
        "num_episodes": log.num_episodes,
        "episode_bound_ok": log.check_episode_bound() if cfg.agent == "ucmnlk" else None,
    }


def _seed_task(args):
    mdp, cfg, ground, seed = args
    try:
        return run_seed(mdp, cfg, ground, seed), None
    except Exception as exc:  # reported through the error manifest
        code = exc.exit_code if isinstance(exc, UcmnlkError) else 1
        return None, {"seed": seed, "type": type(exc).__name__, "message": str(exc),
                      "exit_code": code, "traceback": traceback.format_exc()}


def _write_manifest(out: Path, errors: list) -> None:
    (out / "error_manifest.json").write_text(json.dumps({"errors": errors}, indent=1) + "\n")


class ExperimentFailed(UcmnlkError):
    def __init__(self, errors):
        self.errors = errors
        self.exit_code = max(e["exit_code"] for e in errors)
        super().__init__("; ".join(f"seed {e['seed']}: {e['type']}: {e['message']}" for e in errors))


def instance_summary(mdp: MnlMdp, ground: Ground) -> dict:
    out = {"d": mdp.dim, "S": mdp.num_states, "A": mdp.num_actions, "U": mdp.u_max,
           "D": ground.diameter, "objective": ground.objective}
    if ground.objective == "average":
        out["J_star"] = ground.gain
    else:
        out["V_star"] = {"min": float(ground.v_star.min()), "max": float(ground.v_star.max()),
                         "initial_state": float(ground.v_star[mdp.initial_state])}
    return out


def run_experiment(cfg: ExperimentConfig) -> dict:
    """Run every seed, then aggregate.  Returns the metadata dict (also written to disk)."""
    cfg.validate()
    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    try:
        mdp, params = build_environment(cfg.environment)
        ground = ground_truth(mdp, cfg)
        resolved = None
        if cfg.agent == "ucmnlk":
            resolved = asdict(resolve_auto(agent_config(cfg, ground, cfg.seeds[0]), mdp.dim, mdp.u_max,
                                           mdp.l_theta, mdp.l_phi))
            resolved.pop("seed")
    except UcmnlkError as exc:
        _write_manifest(out, [{"seed": None, "type": type(exc).__name__, "message": str(exc),
                               "exit_code": exc.exit_code}])
        raise
    workers = cfg.workers or os.cpu_count() or 1
    tasks = [(mdp, cfg, ground, s) for s in cfg.seeds]
    if workers == 1 or len(tasks) == 1:
        results = [_seed_task(t) for t in tasks]
    else:
        with ProcessPoolExecutor(max_workers=min(workers, len(tasks))) as pool:
            results = list(pool.map(_seed_task, tasks))
    errors = [e for _, e in results if e is not None]
    if errors:
        _write_manifest(out, errors)
        raise ExperimentFailed(errors)
    summaries = [s for s, _ in results]
    aggregate([out / f"seed_{s}.csv" for s in cfg.seeds], out / "aggregate.csv")
    meta = {
        "library_version": __version__,
        "config": asdict(cfg),
        "resolved_agent_config": resolved,
        "instance": instance_summary(mdp, ground),
        "hard_params": _params_dict(params),
        "regret_definition": "average: t*J_star - cumulative reward" if cfg.objective == "average"
        else SURROGATE,
        "seeds": summaries,
    }
    (out / "metadata.json").write_text(json.dumps(meta, indent=1, default=_json_default) + "\n")
    return meta


def _params_dict(params):
    if params is None:
        return None
    return {k: (v.tolist() if isinstance(v, np.ndarray) else v) for k, v in asdict(params).items()}


def _json_default(x):
    if isinstance(x, np.ndarray):
        return x.tolist()
    if isinstance(x, np.generic):
        return x.item()
    raise TypeError(f"not JSON serialisable: {type(x).__name__}")


def _read_curve(path):
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    if not rows or "regret" not in rows[0] or "t" not in rows[0]:
        raise AggregationError(f"{path} has no t/regret columns")
    return np.array([int(r["t"]) for r in rows]), np.array([float(r["regret"]) for r in rows])


def aggregate(paths, out_path=None) -> list:
    """Per-snapshot mean, median and quartiles of regret across per-seed CSVs."""
    paths = [Path(p) for p in paths]
    if not paths:
        raise AggregationError("nothing to aggregate")
    curves = [_read_curve(p) for p in paths]
    grid = curves[0][0]
    bad = [str(p) for p, (t, _) in zip(paths, curves) if not np.array_equal(t, grid)]
    if bad:
        raise AggregationError(f"snapshot grids differ from {paths[0]}: {', '.join(bad)}")
    R = np.stack([r for _, r in curves])
    q25, med, q75 = np.percentile(R, [25, 50, 75], axis=0)
    rows = [(int(t), float(m), float(a), float(b), float(c), len(paths))
            for t, m, a, b, c in zip(grid, R.mean(axis=0), med, q25, q75)]
    if out_path is not None:
        with open(out_path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(AGGREGATE_COLUMNS)
            for row in rows:
                w.writerow([fmt(x) for x in row])
    return rows
