"""Experiment configuration: YAML files and bundled presets.

A config has five top-level sections (all optional except ``problem``)::

    seed: 0
    problem:
      L: 20
      allow_stable: false
      max_states: 2000000
      battery: {b_max: 3, p_max: 1}
      channel: {values: [0.02, 0.09], rows: [[0.8, 0.2], [0.2, 0.8]]}
      energy:  {values: [0, 1, 2], rows: [[...], [...], [...]]}
      sensors:
        - A: [[1.2, 0.2], [0.3, 1.0]]
          C: [[1.0, 0.0]]
          W: [[2.0, 0.0], [0.0, 1.0]]
          V: [[1.0]]
          sigma2: 0.04
          jam_gain: 5.0
          modulation: {kind: qam, b: 0.5}
          channel: {...}          # optional per-sensor chain
    solver: {span_tol: 1.0e-9, max_sweeps: 100000, pruned: false, phi_f: null}
    learn:  {mode: standard, steps: 1000000, epsilon: 0.1, ...}
    eval:   {T: 2000000, seeds: [0, 1, 2, 3, 4], policies: [rvi, greedy, random], workers: 4}
    output: {dir: out}

Unknown keys anywhere are rejected with their dotted path. A ``table``
modulation may read its points from a CSV file (``file:``, header
``sinr,rate``), resolved relative to the config file.
"""

from __future__ import annotations

import copy
import csv
import hashlib
import json
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path
from typing import List, Optional

import numpy as np
import yaml

from .channels import BatteryModel, LinkModel, MarkovChain, parse_modulation
from .errors import ConfigError, ModelValidationError
from .kalman import LtiSystem
from .mdp import DEFAULT_MAX_STATES, MdpState, ProblemConfig
from .qlearning import LearnConfig

PRESETS = ("paper_sec6", "paper_sec6_small", "toy_n1", "degenerate")
POLICIES = ("rvi", "greedy", "random")

# allowed keys per section; None marks a free-form leaf
_SCHEMA = {
    "seed": None,
    "problem": {
        "L": None,
        "allow_stable": None,
        "max_states": None,
        "battery": {"b_max": None, "p_max": None},
        "channel": {"values": None, "rows": None},
        "energy": {"values": None, "rows": None},
        "sensors": [{
            "A": None, "C": None, "W": None, "V": None,
            "sigma2": None, "jam_gain": None,
            "modulation": {"kind": None, "b": None, "sinr": None, "rate": None, "file": None},
            "channel": {"values": None, "rows": None},
        }],
    },
    "solver": {"span_tol": None, "max_sweeps": None, "pruned": None, "phi_f": None},
    "learn": {
        "mode": None, "steps": None, "epsilon": None, "c": None, "k0": None, "B": None,
        "clock": None, "ref_state": None, "ref_action": None, "eval_every": None,
        "dual": None, "full_dual": None, "projection": None, "batch": None, "q_init": None,
        "dual_scale": None, "dual_clock": None, "snapshot_every": None,
    },
    "eval": {"T": None, "seeds": None, "policies": None, "workers": None},
    "output": {"dir": None},
}


def _check_keys(node, schema, path):
    if schema is None:
        return
    if isinstance(schema, list):
        if not isinstance(node, list):
            raise ConfigError(f"{path} must be a list")
        for i, item in enumerate(node):
            _check_keys(item, schema[0], f"{path}[{i}]")
        return
    if not isinstance(node, dict):
        raise ConfigError(f"{path or 'config'} must be a mapping")
    for key, value in node.items():
        sub = f"{path}.{key}" if path else str(key)
        if key not in schema:
            raise ConfigError(f"unknown config key '{sub}'")
        _check_keys(value, schema[key], sub)


@dataclass
class SolverSettings:
    span_tol: float = 1e-9
    max_sweeps: int = 100_000
    pruned: bool = False
    phi_f: Optional[MdpState] = None


@dataclass
class EvalSettings:
    T: int = 2_000_000
    seeds: List[int] = field(default_factory=lambda: [0, 1, 2, 3, 4])
    policies: List[str] = field(default_factory=lambda: list(POLICIES))
    workers: int = 4


@dataclass
class ExperimentConfig:
    problem: ProblemConfig
    solver: SolverSettings
    learn: LearnConfig
    mode: str
    eval: EvalSettings
    out_dir: Path
    seed: int
    raw: dict
    source: str
    max_states: int = DEFAULT_MAX_STATES

    @property
    def config_hash(self):
        blob = json.dumps(self.raw, sort_keys=True, default=str).encode()
        return hashlib.sha256(blob).hexdigest()

    def with_overrides(self, **kw):
        """Copy with some top-level fields replaced (the raw dict is kept in sync)."""
        new = copy.copy(self)
        new.raw = copy.deepcopy(self.raw)
        for k, v in kw.items():
            setattr(new, k, v)
        return new


def _matrix(x, path):
    try:
        m = np.atleast_2d(np.asarray(x, dtype=float))
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{path} must be a numeric matrix") from exc
    return m


def _chain(d, path):
    if not isinstance(d, dict) or "values" not in d or "rows" not in d:
        raise ConfigError(f"{path} needs 'values' and 'rows'")
    try:
        return MarkovChain.from_dict(d)
    except (ModelValidationError, ValueError, TypeError) as exc:
        raise ConfigError(f"{path}: {exc}") from exc


def _modulation(d, path, base_dir):
    d = dict(d)
    if d.get("kind", "qam") == "table" and "file" in d:
        f = Path(d.pop("file"))
        if not f.is_absolute() and base_dir is not None:
            f = base_dir / f
        if not f.exists():
            raise ConfigError(f"{path}.file: {f} does not exist")
        with open(f, newline="") as fh:
            rows = list(csv.DictReader(fh))
        try:
            d["sinr"] = [float(r["sinr"]) for r in rows]
            d["rate"] = [float(r["rate"]) for r in rows]
        except (KeyError, ValueError) as exc:
            raise ConfigError(f"{path}.file: expected numeric columns sinr,rate") from exc
    try:
        return parse_modulation(d)
    except (ModelValidationError, KeyError, TypeError, ValueError) as exc:
        raise ConfigError(f"{path}: {exc}") from exc


def _require(d, key, path):
    if key not in d:
        raise ConfigError(f"missing required key '{path}.{key}'")
    return d[key]


def build_problem(p, base_dir=None, allow_stable=None) -> ProblemConfig:
    allow = bool(p.get("allow_stable", False)) if allow_stable is None else allow_stable
    sensors = _require(p, "sensors", "problem")
    if not sensors:
        raise ConfigError("problem.sensors must list at least one sensor")
    systems, links, chains = [], [], []
    for i, s in enumerate(sensors):
        path = f"problem.sensors[{i}]"
        try:
            systems.append(LtiSystem(_matrix(_require(s, "A", path), path + ".A"),
                                     _matrix(_require(s, "C", path), path + ".C"),
                                     _matrix(_require(s, "W", path), path + ".W"),
                                     _matrix(_require(s, "V", path), path + ".V"),
                                     allow_stable=allow))
            links.append(LinkModel(float(_require(s, "sigma2", path)),
                                   _modulation(_require(s, "modulation", path), path + ".modulation",
                                               base_dir),
                                   float(s.get("jam_gain", 1.0))))
        except ModelValidationError as exc:
            raise ConfigError(f"{path}: {exc}") from exc
        chains.append(_chain(s["channel"], path + ".channel") if "channel" in s else None)
    shared = _chain(p["channel"], "problem.channel") if "channel" in p else None
    if shared is None and any(c is None for c in chains):
        raise ConfigError("problem.channel is required unless every sensor has its own channel")
    per_sensor = None
    if any(c is not None for c in chains):
        per_sensor = [c if c is not None else shared for c in chains]
    bat = _require(p, "battery", "problem")
    try:
        battery = BatteryModel(int(_require(bat, "b_max", "problem.battery")),
                               float(_require(bat, "p_max", "problem.battery")))
        return ProblemConfig(systems, shared if shared is not None else per_sensor[0],
                             _chain(_require(p, "energy", "problem"), "problem.energy"),
                             links, battery, _require(p, "L", "problem"), per_sensor)
    except ModelValidationError as exc:
        raise ConfigError(f"problem: {exc}") from exc


def _learn(d, seed, N):
    d = dict(d)
    mode = d.pop("mode", "standard")
    if mode not in ("standard", "structural"):
        raise ConfigError(f"learn.mode must be 'standard' or 'structural', got {mode!r}")
    if "ref_state" in d and d["ref_state"] is not None:
        d["ref_state"] = MdpState.from_tuple(d["ref_state"])
    if "ref_action" in d and d["ref_action"] is not None:
        d["ref_action"] = tuple(int(x) for x in d["ref_action"])
    d.setdefault("seed", seed)
    for key in ("steps", "B", "eval_every", "batch", "snapshot_every"):
        if key in d:
            d[key] = int(d[key])
    return LearnConfig(**d), mode


def from_dict(raw: dict, source="<dict>", base_dir=None, allow_stable=None) -> ExperimentConfig:
    _check_keys(raw, _SCHEMA, "")
    if "problem" not in raw:
        raise ConfigError("missing required section 'problem'")
    seed = int(raw.get("seed", 0))
    problem = build_problem(raw["problem"], base_dir, allow_stable)
    s = raw.get("solver", {}) or {}
    phi = s.get("phi_f")
    solver = SolverSettings(float(s.get("span_tol", 1e-9)), int(s.get("max_sweeps", 100_000)),
                            bool(s.get("pruned", False)),
                            MdpState.from_tuple(phi) if phi is not None else None)
    if not solver.span_tol > 0 or solver.max_sweeps < 1:
        raise ConfigError("solver.span_tol must be positive and solver.max_sweeps >= 1")
    learn, mode = _learn(raw.get("learn", {}) or {}, seed, problem.N)
    e = raw.get("eval", {}) or {}
    ev = EvalSettings(int(e.get("T", 2_000_000)), [int(x) for x in e.get("seeds", [0, 1, 2, 3, 4])],
                      list(e.get("policies", list(POLICIES))), int(e.get("workers", 4)))
    bad = [p for p in ev.policies if p not in POLICIES]
    if bad:
        raise ConfigError(f"eval.policies: unknown policy {bad[0]!r}")
    if ev.T < 1 or not ev.seeds or ev.workers < 1:
        raise ConfigError("eval needs T >= 1, at least one seed and workers >= 1")
    out = Path((raw.get("output", {}) or {}).get("dir", "out"))
    max_states = int(raw["problem"].get("max_states", DEFAULT_MAX_STATES))
    return ExperimentConfig(problem, solver, learn, mode, ev, out, seed, raw, source, max_states)


def load(path) -> ExperimentConfig:
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"config file {path} does not exist")
    return from_dict(_read_yaml(path.read_text(), str(path)), str(path), path.parent)


def _read_yaml(text, source):
    try:
        raw = yaml.safe_load(text)
    except yaml.YAMLError as exc:
        raise ConfigError(f"{source}: invalid YAML: {exc}") from exc
    if not isinstance(raw, dict):
        raise ConfigError(f"{source}: top level must be a mapping")
    return raw


def preset_text(name) -> str:
    if name not in PRESETS:
        raise ConfigError(f"unknown preset {name!r}; available: {', '.join(PRESETS)}")
    return resources.files("harvestjam.presets").joinpath(f"{name}.yaml").read_text()


def preset(name) -> ExperimentConfig:
    return from_dict(_read_yaml(preset_text(name), name), f"preset:{name}")
