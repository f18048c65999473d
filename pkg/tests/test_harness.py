import csv
import json

import numpy as np
import pytest

import ucmnlk.harness as harness_mod
from ucmnlk.cli import main
from ucmnlk.errors import AggregationError, ConfigError, NumericalError
from ucmnlk.hard_instances import InfiniteHardParams, build_infinite
from ucmnlk.harness import (SURROGATE, ExperimentConfig, ExperimentFailed, aggregate, run_experiment,
                            snapshot_grid)
from ucmnlk.instance_io import save_instance
from ucmnlk.mdp import MnlMdp
from ucmnlk.oracle import evaluate_policy_average, solve_average, stationary_distribution


def read_csv(path):
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


def write_curve(path, t, regret):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["t", "state", "action", "reward", "episode", "cum_reward", "regret"])
        for a, b in zip(t, regret):
            w.writerow([a, 0, 0, 0, 0, 0, repr(float(b))])


def ladder():
    # Action 1 climbs 0 -> 1 -> 2 -> 3 -> 0, action 0 stays; reward only at state 3.
    S = 4
    reach = [[[s], [(s + 1) % S]] for s in range(S)]
    feats = [[np.zeros((1, 1)), np.zeros((1, 1))] for _ in range(S)]
    rewards = np.zeros((S, 2))
    rewards[3] = 1.0
    return MnlMdp(S, 2, 1, reach, feats, rewards, [0.0], 0.0, 0.0)


def experiment(tmp_path, name="out", **kw):
    base = dict(environment={"builtin": "infinite", "d": 2, "D": 5, "T": 20000}, horizon=300,
                seeds=[0, 1], out=str(tmp_path / name), workers=1, stride=50,
                agent_config={"lam": 1.0, "eta": 1.0})
    base.update(kw)
    return ExperimentConfig(**base)


class TestConfig:
    def test_empty_seeds(self, tmp_path):
        cfg = experiment(tmp_path, seeds=[])
        with pytest.raises(ConfigError, match="empty"):
            run_experiment(cfg)
        assert not (tmp_path / "out").exists()

    @pytest.mark.parametrize("kw", [dict(seeds=[1, 1]), dict(stride=0), dict(agent="greedy"),
                                    dict(objective="discounted"), dict(agent_config={"beta": 1}),
                                    dict(environment={})])
    def test_invalid(self, tmp_path, kw):
        with pytest.raises(ConfigError):
            experiment(tmp_path, **kw).validate()

    def test_load(self, tmp_path):
        (tmp_path / "c.json").write_text(json.dumps({"environment": {"instance": "m.json"}, "horizon": 5,
                                                     "seeds": [0], "out": "o"}))
        cfg = ExperimentConfig.load(tmp_path / "c.json")
        assert cfg.environment["instance"] == str(tmp_path / "m.json")
        (tmp_path / "bad.json").write_text('{"horizon": 5,\n "seeds": [0],,}')
        with pytest.raises(ConfigError, match="line 2"):
            ExperimentConfig.load(tmp_path / "bad.json")
        with pytest.raises(ConfigError, match="unknown"):
            ExperimentConfig.from_dict({"environment": {}, "horizon": 1, "seeds": [0], "out": "o", "x": 1})


class TestAggregate:
    def test_one_seed(self, tmp_path):
        write_curve(tmp_path / "a.csv", [1, 2, 3], [0.5, 1.5, -2.0])
        rows = aggregate([tmp_path / "a.csv"])
        for row, r in zip(rows, [0.5, 1.5, -2.0]):
            assert row[1:5] == (r, r, r, r) and row[5] == 1

    def test_two_constant(self, tmp_path):
        write_curve(tmp_path / "a.csv", [10, 20], [0, 0])
        write_curve(tmp_path / "b.csv", [10, 20], [2, 2])
        rows = aggregate([tmp_path / "a.csv", tmp_path / "b.csv"], tmp_path / "agg.csv")
        assert [r[1] for r in rows] == [1.0, 1.0] and [r[2] for r in rows] == [1.0, 1.0]
        assert read_csv(tmp_path / "agg.csv")[0] == {"t": "10", "mean_regret": "1", "median": "1",
                                                    "q25": "0.5", "q75": "1.5", "n_seeds": "2"}

    def test_random_curves(self, tmp_path, rng):
        t = np.arange(100, 1100, 100)
        R = rng.normal(size=(20, len(t))).cumsum(axis=1)
        for i, r in enumerate(R):
            write_curve(tmp_path / f"s{i}.csv", t, r)
        rows = aggregate([tmp_path / f"s{i}.csv" for i in range(20)])
        for j, row in enumerate(rows):
            col = sorted(R[:, j])
            # Linear-interpolation quartiles by hand: positions 19 * q.
            def q(p):
                pos = 19 * p
                lo = int(pos)
                return col[lo] + (pos - lo) * (col[min(lo + 1, 19)] - col[lo])
            assert row[0] == t[j]
            assert row[1] == pytest.approx(sum(col) / 20, abs=1e-12)
            assert row[2] == pytest.approx((col[9] + col[10]) / 2, abs=1e-12)
            assert row[3] == pytest.approx(q(0.25), abs=1e-12)
            assert row[4] == pytest.approx(q(0.75), abs=1e-12)

    def test_mismatched_grids(self, tmp_path):
        write_curve(tmp_path / "a.csv", [1, 2], [0, 0])
        write_curve(tmp_path / "b.csv", [1, 3], [0, 0])
        write_curve(tmp_path / "c.csv", [1, 2], [0, 0])
        with pytest.raises(AggregationError, match="b.csv") as exc:
            aggregate([tmp_path / n for n in ("a.csv", "b.csv", "c.csv")])
        assert "c.csv" not in str(exc.value).split(":", 1)[1]

    def test_grid(self):
        np.testing.assert_array_equal(snapshot_grid(250, 100), [100, 200, 250])
        np.testing.assert_array_equal(snapshot_grid(200, 100), [100, 200])
        np.testing.assert_array_equal(snapshot_grid(3, 100, full=True), [1, 2, 3])


class TestRegret:
    def test_oracle_optimal_bounded(self, tmp_path):
        save_instance(ladder(), tmp_path / "ladder.json")
        cfg = experiment(tmp_path, environment={"instance": str(tmp_path / "ladder.json")},
                         agent="oracle-optimal", horizon=2000, full_log=True, diameter=3)
        run_experiment(cfg)
        r = np.array([float(x["regret"]) for x in read_csv(tmp_path / "out" / "seed_0.csv")])
        assert r.max() <= 3 + 1e-12
        assert (r[-1] - r[999]) / 1000 <= 1e-3

    def test_oracle_optimal_expected_regret_on_hard_instance(self):
        # Exact expected regret of the optimal policy, by propagating the state distribution.
        p = InfiniteHardParams.from_average(2, 20, 40000)
        m = build_infinite(p)
        sol = solve_average(m)
        pi = np.argmax(sol.q, axis=1)
        P = m.transition_matrix()[np.arange(2), pi]
        r = m.rewards[np.arange(2), pi]
        dist, reg, worst = np.array([1.0, 0.0]), 0.0, 0.0
        for _ in range(4000):
            reg += sol.gain - dist @ r
            worst = max(worst, reg)
            dist = dist @ P
        assert worst <= 20 + 1e-9 and abs(sol.gain - dist @ r) <= 1e-3

    def test_random_gap_and_harness_slope(self, tmp_path):
        p = InfiniteHardParams.from_average(2, 5, 20000)
        m = build_infinite(p)
        J = solve_average(m).gain
        uniform = np.full((2, m.num_actions), 0.5)
        gap = J - evaluate_policy_average(m, uniform)
        P_u = m.transition_matrix().mean(axis=1)
        assert gap == pytest.approx(J - stationary_distribution(P_u)[1], abs=1e-12)
        assert gap >= p.Delta / 4
        cfg = experiment(tmp_path, agent="random", horizon=20000, seeds=list(range(12)), stride=10000)
        run_experiment(cfg)
        slopes = []
        for s in cfg.seeds:
            r = [float(x["regret"]) for x in read_csv(tmp_path / "out" / f"seed_{s}.csv")]
            slopes.append((r[1] - r[0]) / 10000)
        se = np.std(slopes, ddof=1) / np.sqrt(len(slopes))
        assert abs(np.mean(slopes) - gap) <= 4 * se

    def test_bookkeeping_identity(self, tmp_path):
        meta = run_experiment(experiment(tmp_path, full_log=True))
        J = meta["instance"]["J_star"]
        for s in (0, 1):
            rows = read_csv(tmp_path / "out" / f"seed_{s}.csv")
            reg = np.array([float(x["regret"]) for x in rows])
            rew = np.array([float(x["reward"]) for x in rows])
            steps = np.diff(np.concatenate([[0.0], reg]))
            assert np.max(np.abs(steps - (J - rew))) <= 1e-12
            cum = np.array([float(x["cum_reward"]) for x in rows])
            np.testing.assert_array_equal(cum, np.cumsum(rew))

    def test_discounted_surrogate_flagged(self, tmp_path):
        meta = run_experiment(experiment(tmp_path, objective="discounted", gamma=0.9, trace=True, full_log=True))
        assert meta["regret_definition"] == SURROGATE
        assert "V_star" in meta["instance"]
        rows = read_csv(tmp_path / "out" / "trace_seed_0.csv")
        assert len(rows) == 300 and all(float(x["err_sigma"]) >= 0 for x in rows)
        reg = [float(x["regret"]) for x in read_csv(tmp_path / "out" / "seed_0.csv")]
        assert all(b >= a - 1e-12 for a, b in zip(reg, reg[1:]))


class TestOutputs:
    def test_byte_identical(self, tmp_path):
        run_experiment(experiment(tmp_path, name="a"))
        run_experiment(experiment(tmp_path, name="b"))
        for f in ("seed_0.csv", "seed_1.csv", "aggregate.csv"):
            assert (tmp_path / "a" / f).read_bytes() == (tmp_path / "b" / f).read_bytes()

    def test_workers_do_not_change_results(self, tmp_path):
        run_experiment(experiment(tmp_path, name="a", horizon=100))
        run_experiment(experiment(tmp_path, name="b", horizon=100, workers=2))
        for f in ("seed_0.csv", "seed_1.csv"):
            assert (tmp_path / "a" / f).read_bytes() == (tmp_path / "b" / f).read_bytes()

    def test_metadata(self, tmp_path):
        meta = run_experiment(experiment(tmp_path))
        disk = json.loads((tmp_path / "out" / "metadata.json").read_text())
        assert disk["instance"] == meta["instance"]
        assert disk["resolved_agent_config"]["gamma"] < 1 and disk["resolved_agent_config"]["diameter"] > 0
        assert disk["library_version"] and disk["hard_params"]["D"] == 5

    def test_error_manifest(self, tmp_path, monkeypatch):
        def boom(*a, **k):
            raise NumericalError("forced failure")

        monkeypatch.setattr(harness_mod, "run", boom)
        with pytest.raises(ExperimentFailed) as exc:
            run_experiment(experiment(tmp_path))
        assert exc.value.exit_code == 3
        man = json.loads((tmp_path / "out" / "error_manifest.json").read_text())
        assert [e["seed"] for e in man["errors"]] == [0, 1]
        assert man["errors"][0]["type"] == "NumericalError"


class TestCli:
    def test_build_validate_oracle(self, tmp_path, capsys):
        path = str(tmp_path / "h.json")
        assert main(["build-hard", "--family", "infinite", "--d", "3", "--D", "20", "--T", "100000",
                     "--out", path]) == 0
        assert main(["validate-instance", "--instance", path]) == 0
        capsys.readouterr()
        assert main(["oracle", "--instance", path, "--objective", "avg"]) == 0
        out = json.loads(capsys.readouterr().out)
        p = InfiniteHardParams.from_average(3, 20, 100000)
        assert out["gain"] == pytest.approx(p.optimal_gain, abs=1e-6)
        assert out["diameter"] == pytest.approx(20, abs=1e-6)
        assert main(["oracle", "--instance", path, "--objective", "disc", "--gamma", "0.9"]) == 0

    def test_build_finite(self, tmp_path):
        path = str(tmp_path / "f.json")
        assert main(["build-hard", "--family", "finite", "--d", "2", "--H", "4", "--K", "100",
                     "--out", path]) == 0
        assert main(["validate-instance", "--instance", path]) == 0

    def test_run(self, tmp_path):
        cfg = tmp_path / "c.json"
        cfg.write_text(json.dumps({"environment": {"builtin": "infinite", "d": 2, "D": 5, "T": 20000},
                                   "horizon": 50, "seeds": [3], "out": str(tmp_path / "o"),
                                   "agent_config": {"lam": 1.0}}))
        assert main(["run", "--config", str(cfg), "--seed-list", "4,5", "--workers", "1"]) == 0
        assert sorted(p.name for p in (tmp_path / "o").iterdir()) == ["aggregate.csv", "metadata.json",
                                                                       "seed_4.csv", "seed_5.csv"]

    def test_exit_codes(self, tmp_path, rng):
        assert main(["run", "--config", str(tmp_path / "missing.json")]) == 2
        with pytest.raises(SystemExit) as exc:
            main(["build-hard", "--family", "infinite"])
        assert exc.value.code == 2
        assert main(["build-hard", "--family", "infinite", "--d", "3", "--D", "20", "--T", "10",
                     "--out", str(tmp_path / "x.json")]) == 2
        (tmp_path / "bad.json").write_text("{}")
        assert main(["validate-instance", "--instance", str(tmp_path / "bad.json")]) == 2
        split = MnlMdp(2, 1, 1, [[[0]], [[1]]], [[np.zeros((1, 1))], [np.zeros((1, 1))]], [[0.0], [1.0]],
                       [0.0], 0.0, 0.0)
        save_instance(split, tmp_path / "split.json")
        assert main(["oracle", "--instance", str(tmp_path / "split.json"), "--objective", "avg"]) == 4
