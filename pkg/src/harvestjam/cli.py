"""Command-line experiment driver.

Subcommands write into ``<out>/<command>/`` (``learn_<mode>`` for learning
runs), always alongside a ``manifest.json`` with the config hash, seed and
library versions.

Exit codes: 0 success, 1 unexpected error, 2 configuration or model
validation error, 3 solver non-convergence, 4 learner divergence,
5 structure verification failed.
"""

from __future__ import annotations

import argparse
import logging
import sys
from concurrent.futures import ThreadPoolExecutor
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import config as config_mod
from . import outputs, qlearning, simulator
from .errors import ConfigError, ConvergenceError, DivergenceError, ModelValidationError
from .mdp import MdpModel, check_assumption1
from .rvi import policy_slice, q_from_v, rvi_solve, verify_structure

log = logging.getLogger("harvestjam")

EXIT_OK = 0
EXIT_ERROR = 1
EXIT_CONFIG = 2
EXIT_CONVERGENCE = 3
EXIT_DIVERGENCE = 4
EXIT_VERIFY = 5


# ------------------------------------------------------------------- plumbing
def load_config(args) -> config_mod.ExperimentConfig:
    allow = True if getattr(args, "allow_stable", False) else None
    if args.config and args.preset:
        raise ConfigError("give either --config or --preset, not both")
    if args.config:
        path = Path(args.config)
        if not path.exists():
            raise ConfigError(f"config file {path} does not exist")
        raw = config_mod._read_yaml(path.read_text(), str(path))
        cfg = config_mod.from_dict(raw, str(path), path.parent, allow_stable=allow)
    else:
        name = args.preset or "paper_sec6"
        raw = config_mod._read_yaml(config_mod.preset_text(name), name)
        cfg = config_mod.from_dict(raw, f"preset:{name}", allow_stable=allow)
    return apply_overrides(cfg, args)


def apply_overrides(cfg, args):
    learn = cfg.learn
    solver = cfg.solver
    seed = cfg.seed
    if getattr(args, "seed", None) is not None:
        seed = args.seed
        learn = replace(learn, seed=args.seed)
        cfg.raw["seed"] = args.seed
    if getattr(args, "pruned", None) is not None:
        solver = replace(solver, pruned=args.pruned)
        cfg.raw.setdefault("solver", {})["pruned"] = args.pruned
    if getattr(args, "no_dual_projection", False):
        learn = replace(learn, projection=False)
        cfg.raw.setdefault("learn", {})["projection"] = False
    if getattr(args, "full_dual", False):
        learn = replace(learn, full_dual=True)
        cfg.raw.setdefault("learn", {})["full_dual"] = True
    mode = cfg.mode
    if getattr(args, "mode", None):
        mode = args.mode
        cfg.raw.setdefault("learn", {})["mode"] = mode
    out = Path(args.out) if getattr(args, "out", None) else cfg.out_dir
    return cfg.with_overrides(learn=learn, solver=solver, seed=seed, mode=mode, out_dir=out)


def build_model(cfg):
    return MdpModel(cfg.problem, max_states=cfg.max_states)


def solve_model(model, cfg):
    s = cfg.solver
    return rvi_solve(model, phi_f=s.phi_f, span_tol=s.span_tol, max_sweeps=s.max_sweeps,
                     pruned=s.pruned)


def slice_is_monotone(grid):
    """True if, on a ``(tau1, tau2)`` action grid, sensor 1's power never drops as
    tau1 grows and sensor 2's never drops as tau2 grows."""
    p = np.array([[list(a) for a in row] for row in grid])
    return bool(np.all(np.diff(p[:, :, 0], axis=0) >= 0) and np.all(np.diff(p[:, :, 1], axis=1) >= 0))


def slice_has_single_boundary(grid, high=(0, 1)):
    """Per row of the grid, the columns choosing ``high`` form an up-set."""
    for row in grid:
        hits = [tuple(a) == high for a in row]
        if any(hits) and not all(hits[hits.index(True):]):
            return False
    return True


def _assumption_rows(model, literal=False):
    return [dict(sensor=r.sensor, kappa=r.kappa, holds=r.holds, min_expected_rate=r.min_expected_rate,
                 a_norm=r.a_norm, p_worst=r.p_worst) for r in check_assumption1(model, literal)]


# ------------------------------------------------------------------ commands
def cmd_solve(cfg) -> int:
    out = cfg.out_dir / "solve"
    model = build_model(cfg)
    res = solve_model(model, cfg)
    Q = q_from_v(model, res.values)
    rep = verify_structure(model, res.values.v, res.policy, Q)
    outputs.write_values(out / "values.csv", model, res.values.v)
    outputs.write_policy(out / "policy.csv", model, res.policy)
    outputs.write_csv(out / "sweeps.csv", ["sweep", "span", "j_star"],
                      ([r.sweep, repr(r.span), repr(r.j_star)] for r in res.sweeps))
    summary = dict(j_star=res.j_star, sweeps=len(res.sweeps), final_span=res.converged_span,
                   state_count=model.state_count, n_actions=model.n_actions,
                   pruned=cfg.solver.pruned, pruned_fraction=res.pruned_fraction,
                   monotone_V=rep.monotone_V, monotone_Q=rep.monotone_Q,
                   superadditive_Q=rep.superadditive_Q, monotone_policy=rep.monotone_policy,
                   counterexamples=len(rep.counterexamples),
                   assumption=_assumption_rows(model))
    outputs.write_json(out / "summary.json", summary)
    outputs.write_manifest(out, "solve", cfg)
    print(f"j_star = {res.j_star:.6f} after {len(res.sweeps)} sweeps; "
          f"structure ok = {rep.all_ok}")
    return EXIT_OK


def cmd_learn(cfg) -> int:
    out = cfg.out_dir / f"learn_{cfg.mode}"
    model = build_model(cfg)
    res = qlearning.train(model, cfg.mode, cfg.learn)
    outputs.write_csv(out / "curve.csv",
                      ["step", "running_avg_reward", "bellman_residual", "residual_mean",
                       "residual_max", "violation_count"],
                      ([c.step, repr(c.running_avg_reward), repr(c.bellman_residual),
                        repr(c.residual_mean), repr(c.residual_max), c.violation_count]
                       for c in res.curve))
    outputs.write_q(out / "q_final.csv", model, res.q.q, res.q.visits)
    outputs.write_policy(out / "policy.csv", model, res.policy)
    for step, Q in res.snapshots:
        outputs.write_q(out / f"q_step_{step}.csv", model, Q)
    last = res.curve[-1] if res.curve else None
    outputs.write_json(out / "summary.json", dict(
        mode=cfg.mode, steps=cfg.learn.steps, nu_writes=res.nu_writes,
        final=None if last is None else last.__dict__))
    outputs.write_manifest(out, "learn", cfg)
    if last is None:
        print(f"{cfg.mode}: no steps run")
    else:
        print(f"{cfg.mode}: step {last.step} running average {last.running_avg_reward:.4f} "
              f"residual {last.bellman_residual:.4g} violations {last.violation_count}")
    return EXIT_OK


def _policies(model, cfg, names):
    pols = {}
    if "rvi" in names:
        pols["rvi"] = solve_model(model, cfg).policy
    if "greedy" in names:
        pols["greedy"] = simulator.greedy_table(model)
    if "random" in names:
        pols["random"] = simulator.RandomPolicy()
    return pols


def _rollout_rows(model, pols, names, seeds, T, workers):
    jobs = [(name, seed) for name in names for seed in seeds]
    # warm the compiled kernels and the shared arrays before fanning out
    simulator.kernel_data(model)
    with ThreadPoolExecutor(max_workers=workers) as ex:
        reports = list(ex.map(lambda j: simulator.rollout(model, pols[j[0]], T, seed=j[1]), jobs))
    return [(name, seed, rep) for (name, seed), rep in zip(jobs, reports)]


def _rollout_csv(path, rows):
    outputs.write_csv(path, ["policy", "seed", "T", "avg_reward", "avg_expected", "stderr",
                             "initial_state"],
                      ([n, s, r.T, repr(r.avg_reward), repr(r.avg_expected), repr(r.stderr),
                        " ".join(map(str, r.initial_state))] for n, s, r in rows))


def cmd_simulate(cfg, policy=None, trace=False) -> int:
    out = cfg.out_dir / "simulate"
    model = build_model(cfg)
    names = [policy] if policy else cfg.eval.policies
    pols = _policies(model, cfg, names)
    seeds = [cfg.seed]
    if trace:
        log.warning("per-step trace dump requested; files grow by ~100 bytes per step")
        rows = []
        for name in names:
            rep = simulator.rollout(model, pols[name], cfg.eval.T, seed=cfg.seed, keep_trace=True)
            rows.append((name, cfg.seed, rep))
            N = model.N
            header = (["k", "b", "E"] + [f"H{i}" for i in range(1, N + 1)]
                      + [f"G{i}" for i in range(1, N + 1)] + [f"tau{i}" for i in range(1, N + 1)]
                      + [f"p{i}" for i in range(1, N + 1)] + [f"gamma{i}" for i in range(1, N + 1)]
                      + ["realized_trace"])
            outputs.write_csv(out / f"trace_{name}.csv", header,
                              ([t["k"], t["b"], t["E"], *t["H"], *t["G"], *t["tau"], *t["action"],
                                *t["gamma"], repr(t["realized_trace"])] for t in rep.trace))
    else:
        rows = _rollout_rows(model, pols, names, seeds, cfg.eval.T, cfg.eval.workers)
    _rollout_csv(out / "rollouts.csv", rows)
    outputs.write_manifest(out, "simulate", cfg)
    for n, s, r in rows:
        print(f"{n}: average trace {r.avg_reward:.4f} (expected-reward average {r.avg_expected:.4f})")
    return EXIT_OK


def cmd_compare(cfg) -> int:
    out = cfg.out_dir / "compare"
    model = build_model(cfg)
    names = cfg.eval.policies
    pols = _policies(model, cfg, names)
    seeds = [cfg.seed + s for s in cfg.eval.seeds]
    rows = _rollout_rows(model, pols, names, seeds, cfg.eval.T, cfg.eval.workers)
    _rollout_csv(out / "rollouts.csv", rows)
    table = []
    for name in names:
        vals = np.array([r.avg_reward for n, _, r in rows if n == name])
        exp = np.array([r.avg_expected for n, _, r in rows if n == name])
        se = float(vals.std(ddof=1) / np.sqrt(vals.size)) if vals.size > 1 else float("nan")
        table.append([name, repr(float(vals.mean())), repr(se), repr(float(exp.mean())),
                      cfg.eval.T, vals.size])
    outputs.write_csv(out / "table1.csv",
                      ["policy", "avg_reward", "stderr", "avg_expected", "T", "seeds"], table)
    outputs.write_manifest(out, "compare", cfg)
    for row in table:
        print(f"{row[0]:8s} {float(row[1]):.4f}")
    return EXIT_OK


def cmd_verify(cfg, literal_bmax=False) -> int:
    out = cfg.out_dir / "verify"
    model = build_model(cfg)
    assumption = _assumption_rows(model, literal_bmax)
    res = solve_model(model, cfg)
    Q = q_from_v(model, res.values)
    rep = verify_structure(model, res.values.v, res.policy, Q)
    report = dict(assumption=assumption, monotone_V=rep.monotone_V, monotone_Q=rep.monotone_Q,
                  superadditive_Q=rep.superadditive_Q, monotone_policy=rep.monotone_policy,
                  counterexamples=rep.counterexamples[:50], j_star=res.j_star)
    if model.N == 2 and model.b_max >= 1 and model.n_energy >= 2:
        # battery 1, energy index 1, both links in their first channel state
        grid = policy_slice(model, res.policy, 1, 1, (0, 0), (0, 0))
        report["slice_b1_e1"] = [[list(a) for a in row] for row in grid]
        report["slice_monotone"] = slice_is_monotone(grid)
        report["slice_single_boundary"] = slice_has_single_boundary(grid)
    outputs.write_json(out / "verify.json", report)
    outputs.write_manifest(out, "verify", cfg)
    for a in assumption:
        print(f"sensor {a['sensor'] + 1}: kappa = {a['kappa']:.4f} holds = {a['holds']}")
    print(f"monotone V {rep.monotone_V}, monotone Q {rep.monotone_Q}, "
          f"superadditive Q {rep.superadditive_Q}, monotone policy {rep.monotone_policy}")
    return EXIT_OK if rep.all_ok else EXIT_VERIFY


# -------------------------------------------------------------------- parser
def build_parser():
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="YAML experiment file")
    common.add_argument("--preset", help="bundled preset: " + ", ".join(config_mod.PRESETS))
    common.add_argument("--seed", type=int, help="override the config seed")
    common.add_argument("--out", help="output directory (default from config)")
    common.add_argument("--pruned", dest="pruned", action="store_true", default=None,
                        help="restrict the argmax by the monotone policy structure")
    common.add_argument("--no-pruned", dest="pruned", action="store_false")
    common.add_argument("--allow-stable", action="store_true",
                        help="accept processes with spectral norm below one")
    common.add_argument("-v", "--verbose", action="count", default=0)

    p = argparse.ArgumentParser(prog="harvestjam", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True)
    sub.add_parser("solve", parents=[common], help="relative value iteration")
    lp = sub.add_parser("learn", parents=[common], help="Q-learning against the simulator")
    lp.add_argument("--mode", choices=["standard", "structural"])
    lp.add_argument("--no-dual-projection", action="store_true",
                    help="do not clip the multipliers at zero")
    lp.add_argument("--full-dual", action="store_true", help="update every multiplier each step")
    sp = sub.add_parser("simulate", parents=[common], help="Monte Carlo rollouts")
    sp.add_argument("--policy", choices=list(config_mod.POLICIES))
    sp.add_argument("--trace", action="store_true", help="dump a per-step CSV (large)")
    sub.add_parser("compare", parents=[common], help="average trace of rvi/greedy/random policies")
    vp = sub.add_parser("verify", parents=[common], help="assumption and structure checks")
    vp.add_argument("--literal-bmax", action="store_true",
                    help="use b_max as the worst-case jamming power in the assumption check")
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    level = logging.WARNING - 10 * min(args.verbose, 2)
    logging.basicConfig(level=level, format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = load_config(args)
        if args.command == "solve":
            return cmd_solve(cfg)
        if args.command == "learn":
            return cmd_learn(cfg)
        if args.command == "simulate":
            return cmd_simulate(cfg, args.policy, args.trace)
        if args.command == "compare":
            return cmd_compare(cfg)
        return cmd_verify(cfg, args.literal_bmax)
    except (ConfigError, ModelValidationError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except ConvergenceError as exc:
        print(f"solver did not converge: {exc}", file=sys.stderr)
        return EXIT_CONVERGENCE
    except DivergenceError as exc:
        print(f"learning diverged: {exc}", file=sys.stderr)
        return EXIT_DIVERGENCE


if __name__ == "__main__":
    sys.exit(main())
