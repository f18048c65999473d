"""Shared fixtures, independent reference oracles and suite-wide run checks."""
from __future__ import annotations

import itertools
import json
from pathlib import Path

import mpmath
import numpy as np
import pytest

import ucmnlk.agent as agent_mod
import ucmnlk.harness as harness_mod
from ucmnlk.mdp import MnlMdp, TransitionSample

TUNED = json.loads((Path(__file__).resolve().parents[1] / "configs" / "tuned.json").read_text())

# Every UCMNLK run made anywhere in the suite is checked against the episode bound.
RUN_STATS = {"runs": 0, "violations": []}


def _checked(fn):
    def wrapper(*args, **kwargs):
        out = fn(*args, **kwargs)
        for log in (out if isinstance(out, list) else [out]):
            RUN_STATS["runs"] += 1
            if not log.check_episode_bound():
                RUN_STATS["violations"].append((log.num_episodes, log.steps_done, log.header["lam"]))
        return out
    wrapper.__wrapped__ = fn
    return wrapper


@pytest.fixture(autouse=True, scope="session")
def _episode_bound_watch():
    orig_run, orig_batch, orig_h = agent_mod.run, agent_mod.run_batch, harness_mod.run
    agent_mod.run = _checked(orig_run)
    agent_mod.run_batch = _checked(orig_batch)
    harness_mod.run = _checked(orig_h)
    yield RUN_STATS
    agent_mod.run, agent_mod.run_batch, harness_mod.run = orig_run, orig_batch, orig_h


ACCEPTANCE = {}


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for key in sorted(ACCEPTANCE, key=lambda k: int(k.split()[0])):
        ok, detail = ACCEPTANCE[key]
        terminalreporter.write_line(f"[{'PASS' if ok else 'FAIL'}] criterion {key}: {detail}")


# ---------------------------------------------------------------------------
# reference oracles


def softmax_mp(logits, dps=50):
    with mpmath.workdps(dps):
        e = [mpmath.exp(mpmath.mpf(float(z))) for z in logits]
        tot = mpmath.fsum(e)
        return np.array([float(x / tot) for x in e])


def lp_vertex_max(p_hat, radius, v, tol=1e-12):
    """max p @ v over {p >= 0, sum p = 1, ||p - p_hat||_1 <= radius} by enumerating vertices.

    At a vertex at least U - 2 coordinates sit on a breakpoint (0 or p_hat_i);
    the remaining one or two are fixed by ``sum p = 1`` and, for two, a tight
    L1 budget with a chosen sign pattern.
    """
    p_hat, v = np.asarray(p_hat, float), np.asarray(v, float)
    U = len(p_hat)
    best = -np.inf
    idx = range(U)

    def feasible(p):
        return (p.min() >= -tol and abs(p.sum() - 1) <= 1e-10
                and np.abs(p - p_hat).sum() <= radius + 1e-10)

    for k in (0, 1, 2):
        for free in itertools.combinations(idx, k):
            fixed = [i for i in idx if i not in free]
            for choice in itertools.product((0, 1), repeat=len(fixed)):
                p = np.zeros(U)
                for i, c in zip(fixed, choice):
                    p[i] = p_hat[i] if c else 0.0
                rest = 1.0 - p[fixed].sum()
                if k == 0:
                    cands = [p]
                elif k == 1:
                    q = p.copy()
                    q[free[0]] = rest
                    cands = [q]
                else:
                    i, j = free
                    used = np.abs(p[fixed] - p_hat[fixed]).sum()
                    cands = []
                    for si, sj in ((1, -1), (-1, 1)):
                        # p_i + p_j = rest ; si (p_i - ph_i) + sj (p_j - ph_j) = radius - used
                        M = np.array([[1.0, 1.0], [si, sj]])
                        rhs = np.array([rest, radius - used + si * p_hat[i] + sj * p_hat[j]])
                        x = np.linalg.solve(M, rhs)
                        if si * (x[0] - p_hat[i]) < -tol or sj * (x[1] - p_hat[j]) < -tol:
                            continue
                        q = p.copy()
                        q[i], q[j] = x
                        cands.append(q)
                for q in cands:
                    if feasible(q):
                        best = max(best, float(q @ v))
    return best


def random_sample(rng, d=None, U=None, scale=1.0):
    d = d or int(rng.integers(1, 9))
    U = U or int(rng.integers(1, 7))
    phi = rng.normal(size=(U, d)) * scale
    y = np.zeros(U)
    y[rng.integers(U)] = 1.0
    theta = rng.normal(size=d)
    return theta, TransitionSample(0, 0, int(np.argmax(y)), phi, y)


def deterministic_cycle(n=3):
    """n-state cycle with a single action, reward 1 in the last state."""
    reach = [[[(s + 1) % n]] for s in range(n)]
    feats = [[np.zeros((1, 1))] for _ in range(n)]
    rewards = np.zeros((n, 1))
    rewards[-1] = 1.0
    return MnlMdp(n, 1, 1, reach, feats, rewards, np.zeros(1), 0.0, 0.0)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def pytest_collection_modifyitems(items):
    # Acceptance last, and the episode-bound criterion after everything else.
    def order(item):
        if "test_acceptance" not in item.nodeid:
            return 0
        return 2 if "criterion_6" in item.name else 1
    items.sort(key=order)


def pytest_configure(config):
    config.addinivalue_line("markers", "acceptance: one test per acceptance criterion")
