"""JSON instance files for :class:`~ucmnlk.mdp.MnlMdp`.

Loading validates every model invariant; failures carry one diagnostic per
problem, each prefixed with the line of the offending value in the file.
"""
from __future__ import annotations

import json
from pathlib import Path

import numpy as np

from .errors import InstanceError
from .mdp import MnlMdp, _bound_problems, _structural_problems

REQUIRED = ("num_states", "num_actions", "dim", "rewards", "reachable", "features",
            "theta_star", "l_phi", "l_theta")


def mdp_to_dict(mdp: MnlMdp, extra: dict | None = None) -> dict:
    out = {
        "num_states": mdp.num_states,
        "num_actions": mdp.num_actions,
        "dim": mdp.dim,
        "rewards": mdp.rewards.tolist(),
        "reachable": [[r.tolist() for r in row] for row in mdp.reachable],
        "features": [[f.tolist() for f in row] for row in mdp.features],
        "theta_star": None if mdp.theta_star is None else mdp.theta_star.tolist(),
        "l_phi": mdp.l_phi,
        "l_theta": mdp.l_theta,
        "initial_state": mdp.initial_state,
    }
    if extra:
        out.update(extra)
    return out


def save_instance(mdp: MnlMdp, path, extra: dict | None = None) -> None:
    Path(path).write_text(json.dumps(mdp_to_dict(mdp, extra), indent=1) + "\n")


def _value_positions(text: str) -> dict:
    """Map every JSON path (tuple of keys/indices) to the offset where its value starts."""
    positions = {}
    decoder = json.JSONDecoder()
    n = len(text)

    def ws(i):
        while i < n and text[i] in " \t\r\n":
            i += 1
        return i

    def parse(i, path):
        i = ws(i)
        positions[path] = i
        c = text[i]
        if c == "{":
            i = ws(i + 1)
            if text[i] == "}":
                return i + 1
            while True:
                key, i = json.decoder.scanstring(text, ws(i) + 1)
                i = ws(i) + 1  # ':'
                i = ws(parse(i, path + (key,)))
                if text[i] == ",":
                    i += 1
                    continue
                return i + 1
        if c == "[":
            i = ws(i + 1)
            if text[i] == "]":
                return i + 1
            k = 0
            while True:
                i = ws(parse(i, path + (k,)))
                k += 1
                if text[i] == ",":
                    i += 1
                    continue
                return i + 1
        _, end = decoder.raw_decode(text, i)
        return end

    parse(0, ())
    return positions


def _line_of(text, positions, path) -> int:
    path = tuple(path)
    while path not in positions and path:
        path = path[:-1]
    return text.count("\n", 0, positions.get(path, 0)) + 1


def _diag(text, positions, path, msg) -> str:
    label = str(path[0]) + "".join(f"[{p}]" for p in path[1:]) if path else "<root>"
    return f"line {_line_of(text, positions, path)}: {label}: {msg}"


def loads_instance(text: str, require_recentered: bool = True) -> MnlMdp:
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as exc:
        raise InstanceError("instance file is not valid JSON", [f"line {exc.lineno}: {exc.msg}"]) from None
    positions = _value_positions(text)
    if not isinstance(doc, dict):
        raise InstanceError("instance file must hold a JSON object", ["line 1: <root>: not an object"])
    missing = [k for k in REQUIRED if k not in doc]
    if missing:
        raise InstanceError("instance file is missing fields",
                            [_diag(text, positions, (), f"missing field {k!r}") for k in missing])
    if doc["theta_star"] is None:
        raise InstanceError("instance file has no true core",
                            [_diag(text, positions, ("theta_star",), "theta_star must be a vector")])
    # Validate with the same checks the constructor runs, keeping paths for line lookup.
    probe = _Probe(doc)
    problems = _structural_problems(probe)
    if not problems:
        try:
            probe.normalise()
        except (TypeError, ValueError) as exc:
            problems = [((), f"malformed arrays: {exc}")]
        else:
            problems = _bound_problems(probe)
    if problems:
        raise InstanceError("instance file violates model invariants",
                            [_diag(text, positions, p, m) for p, m in problems])
    mdp = MnlMdp(
        int(doc["num_states"]), int(doc["num_actions"]), int(doc["dim"]),
        doc["reachable"], doc["features"], doc["rewards"], doc["theta_star"],
        doc["l_phi"], doc["l_theta"], int(doc.get("initial_state", 0)),
    )
    if require_recentered:
        bad = [
            _diag(text, positions, ("features", s, a),
                  "no reachable state has the zero feature (run recenter)")
            for s in range(mdp.num_states) for a in range(mdp.num_actions)
            if not np.any(np.all(mdp.features[s][a] == 0.0, axis=1))
        ]
        if bad:
            raise InstanceError("instance file violates the zero-feature convention", bad)
    return mdp


def load_instance(path, require_recentered: bool = True) -> MnlMdp:
    return loads_instance(Path(path).read_text(), require_recentered)


def load_instance_doc(path) -> dict:
    """Raw JSON document (for optional metadata such as ``hard_params``)."""
    return json.loads(Path(path).read_text())


class _Probe:
    """Duck-typed stand-in so file contents go through the model's own checks."""

    def __init__(self, doc):
        self.num_states = doc["num_states"]
        self.num_actions = doc["num_actions"]
        self.dim = doc["dim"]
        self.rewards = _as_array(doc["rewards"])
        self.reachable = doc["reachable"]
        self.features = doc["features"]
        self.theta_star = _as_array(doc["theta_star"])
        self.l_phi = doc["l_phi"]
        self.l_theta = doc["l_theta"]
        self.initial_state = doc.get("initial_state", 0)
        self.reachable = [[_as_array(r, None) for r in row] if isinstance(row, list) else row
                          for row in self.reachable] if isinstance(self.reachable, list) else []
        self.features = [[_as_array(f) for f in row] if isinstance(row, list) else row
                         for row in self.features] if isinstance(self.features, list) else []

    def normalise(self):
        self.features = [[np.asarray(f, dtype=float).reshape(len(r), self.dim)
                          for f, r in zip(frow, rrow)]
                         for frow, rrow in zip(self.features, self.reachable)]
        self.l_phi = float(self.l_phi)
        self.l_theta = float(self.l_theta)


def _as_array(x, dtype=float):
    try:
        return np.array(x, dtype=dtype)
    except (TypeError, ValueError):
        return np.array([np.nan]) if dtype is float else np.array([-1])
