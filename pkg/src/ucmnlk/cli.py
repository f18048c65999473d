"""Command-line entry point: ``ucmnlk {run,validate-instance,build-hard,oracle}``.

Exit codes: 0 success, 2 configuration error, 3 numerical error,
4 oracle failure.
"""
from __future__ import annotations

import argparse
import json
import sys

import numpy as np

from .errors import ConfigError, UcmnlkError
from .harness import ExperimentConfig, _params_dict, run_experiment
from .hard_instances import (FiniteHardParams, InfiniteHardParams, build_finite, build_infinite,
                             validate_instance)
from .instance_io import load_instance, load_instance_doc, save_instance
from .mdp import compute_diameter
from .oracle import solve_average, solve_discounted


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(ConfigError.exit_code, f"{self.prog}: error: {message}\n")


def _seed_list(text):
    try:
        return [int(x) for x in text.split(",") if x.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"bad seed list {text!r}") from None


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="ucmnlk", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    r = sub.add_parser("run", help="run an experiment from a JSON config")
    r.add_argument("--config", required=True)
    r.add_argument("--out", help="output directory (overrides the config)")
    g = r.add_mutually_exclusive_group()
    g.add_argument("--seeds", type=int, help="use seeds 0..N-1")
    g.add_argument("--seed-list", type=_seed_list, help="comma-separated seeds")
    r.add_argument("--workers", type=int)
    r.add_argument("--full-log", action="store_true", help="write every step, not just snapshots")

    v = sub.add_parser("validate-instance", help="check an instance file")
    v.add_argument("--instance", required=True)

    b = sub.add_parser("build-hard", help="write a hard instance to a file")
    b.add_argument("--family", choices=("infinite", "finite"), required=True)
    b.add_argument("--d", type=int, required=True)
    b.add_argument("--D", type=float)
    b.add_argument("--gamma", type=float)
    b.add_argument("--H", type=int)
    b.add_argument("--T", type=int)
    b.add_argument("--K", type=int)
    b.add_argument("--out", required=True)

    o = sub.add_parser("oracle", help="exact optimal values of an instance")
    o.add_argument("--instance", required=True)
    o.add_argument("--objective", choices=("avg", "disc"), required=True)
    o.add_argument("--gamma", type=float)
    return p


def _hard_from_doc(doc):
    hp = doc.get("hard_params")
    if not hp:
        return None
    if hp.get("family") == "finite":
        return FiniteHardParams.create(hp["d"], hp["H"], hp["K"], hp.get("signs"))
    if hp.get("mode") == "average":
        return InfiniteHardParams.from_average(hp["d"], hp["D"], hp["T"], hp.get("signs"))
    return InfiniteHardParams.from_discounted(hp["d"], hp["gamma"], hp["T"], hp.get("signs"))


def cmd_run(args) -> int:
    cfg = ExperimentConfig.load(args.config)
    if args.out:
        cfg.out = args.out
    if args.seeds is not None:
        cfg.seeds = list(range(args.seeds))
    if args.seed_list is not None:
        cfg.seeds = args.seed_list
    if args.workers is not None:
        cfg.workers = args.workers
    if args.full_log:
        cfg.full_log = True
    meta = run_experiment(cfg)
    for s in meta["seeds"]:
        print(f"seed {s['seed']}: final regret {s['final_regret']:.6g}, episodes {s['num_episodes']}")
    print(f"results written to {cfg.out}")
    return 0


def cmd_validate(args) -> int:
    mdp = load_instance(args.instance)
    print(f"ok: S={mdp.num_states} A={mdp.num_actions} d={mdp.dim} U={mdp.u_max}")
    params = _hard_from_doc(load_instance_doc(args.instance))
    if params is not None:
        report = validate_instance(mdp, params)
        for c in report.checks:
            print(f"{'PASS' if c.passed else 'FAIL'} {c.name} (margin {c.margin:.3e})")
        if not report.passed:
            raise ConfigError("hard-instance checks failed: " + ", ".join(report.failed()))
    return 0


def cmd_build_hard(args) -> int:
    if args.family == "infinite":
        if args.T is None or (args.D is None) == (args.gamma is None):
            raise ConfigError("the infinite family needs --T and exactly one of --D / --gamma")
        if args.D is not None:
            params = InfiniteHardParams.from_average(args.d, args.D, args.T)
            extra = {"family": "infinite", "mode": "average", "d": args.d, "D": args.D, "T": args.T}
        else:
            params = InfiniteHardParams.from_discounted(args.d, args.gamma, args.T)
            extra = {"family": "infinite", "mode": "discounted", "d": args.d, "gamma": args.gamma,
                     "T": args.T}
        extra["signs"] = np.sign(params.theta).tolist()
        mdp = build_infinite(params)
    else:
        if args.H is None or args.K is None:
            raise ConfigError("the finite family needs --H and --K")
        params = FiniteHardParams.create(args.d, args.H, args.K)
        extra = {"family": "finite", "d": args.d, "H": args.H, "K": args.K,
                 "signs": np.sign(params.thetas).tolist()}
        mdp = build_finite(params)
    report = validate_instance(mdp, params)
    save_instance(mdp, args.out, {"hard_params": extra, "derived": _params_dict(params)})
    for c in report.checks:
        print(f"{'PASS' if c.passed else 'FAIL'} {c.name} (margin {c.margin:.3e})")
    print(f"wrote {args.out}")
    return 0 if report.passed else ConfigError.exit_code


def cmd_oracle(args) -> int:
    mdp = load_instance(args.instance)
    if args.objective == "avg":
        sol = solve_average(mdp)
        out = {"objective": "average", "gain": sol.gain, "bias": sol.v.tolist(),
               "policy": np.argmax(sol.q, axis=1).tolist(), "diameter": compute_diameter(mdp)}
    else:
        if args.gamma is None or not 0.0 <= args.gamma < 1.0:
            raise ConfigError("--objective disc needs --gamma in [0, 1)")
        sol = solve_discounted(mdp, args.gamma)
        out = {"objective": "discounted", "gamma": args.gamma, "v": sol.v.tolist(),
               "policy": np.argmax(sol.q, axis=1).tolist()}
    print(json.dumps(out, indent=1))
    return 0


COMMANDS = {"run": cmd_run, "validate-instance": cmd_validate, "build-hard": cmd_build_hard,
            "oracle": cmd_oracle}


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return COMMANDS[args.command](args)
    except UcmnlkError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.exit_code


if __name__ == "__main__":
    sys.exit(main())
