"""CSV and manifest writers shared by the command-line driver."""

from __future__ import annotations

import csv
import json
import platform
import sys
from pathlib import Path

import numpy as np

from . import __version__


def state_header(N):
    cols = ["b", "e"]
    for i in range(1, N + 1):
        cols += [f"h{i}", f"g{i}", f"tau{i}"]
    return cols


def action_header(N):
    return [f"p{i}" for i in range(1, N + 1)]


def write_csv(path, header, rows):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(header)
        for r in rows:
            w.writerow(r)
    return path


def state_rows(model):
    """All state tuples in index order, as an ``(S, 3N + 2)`` integer array."""
    return np.stack(np.unravel_index(np.arange(model.state_count), model.shape), axis=1)


def write_values(path, model, v):
    tuples = state_rows(model)
    return write_csv(path, state_header(model.N) + ["value"],
                     ([*t.tolist(), repr(float(x))] for t, x in zip(tuples, v)))


def write_policy(path, model, policy):
    tuples = state_rows(model)
    acts = policy.powers()
    return write_csv(path, state_header(model.N) + action_header(model.N) + ["action_id"],
                     ([*t.tolist(), *a.tolist(), int(k)]
                      for t, a, k in zip(tuples, acts, policy.action_ids)))


def write_q(path, model, Q, visits=None):
    tuples = state_rows(model)
    header = state_header(model.N) + action_header(model.N) + ["q"]
    if visits is not None:
        header.append("visits")

    def rows():
        for s, t in enumerate(tuples):
            for k in model.feasible_action_ids(int(t[0])):
                row = [*t.tolist(), *model.actions[k].tolist(), repr(float(Q[s, k]))]
                if visits is not None:
                    row.append(int(visits[s, k]))
                yield row

    return write_csv(path, header, rows())


def write_manifest(out_dir, command, cfg, extra=None):
    import numba
    import scipy
    import yaml

    man = {
        "command": command,
        "config_source": cfg.source,
        "config_hash": cfg.config_hash,
        "seed": cfg.seed,
        "versions": {
            "harvestjam": __version__,
            "python": sys.version.split()[0],
            "numpy": np.__version__,
            "scipy": scipy.__version__,
            "numba": numba.__version__,
            "pyyaml": yaml.__version__,
        },
        "platform": platform.platform(),
        "config": cfg.raw,
    }
    if extra:
        man.update(extra)
    path = Path(out_dir) / "manifest.json"
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(man, indent=2, sort_keys=True, default=str))
    return path


def write_json(path, obj):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(obj, indent=2, sort_keys=True, default=_jsonable))
    return path


def _jsonable(x):
    if isinstance(x, (np.integer,)):
        return int(x)
    if isinstance(x, (np.floating,)):
        return float(x)
    if isinstance(x, np.ndarray):
        return x.tolist()
    return str(x)
