"""Relative value iteration for the average-reward attacker MDP.

Each sweep applies the Bellman operator to the previous iterate and
subtracts the value found at a fixed reference state. The sweep is
synchronous (double-buffered), so results do not depend on state order.
"""

from __future__ import annotations

import itertools
import logging
from dataclasses import dataclass, field
from typing import List, Optional

import numpy as np

from .errors import ConvergenceError, ModelValidationError
from .mdp import MdpModel, MdpState, tau_axis

log = logging.getLogger(__name__)

SPAN_TOL = 1e-9
MAX_SWEEPS = 100_000
TOL_STRUCT = 1e-6


@dataclass
class ValueTable:
    v: np.ndarray
    j_star: float
    ref_index: int


@dataclass
class PolicyTable:
    """Greedy action id per state; ``actions`` maps ids to power vectors."""

    action_ids: np.ndarray
    actions: np.ndarray

    def action(self, s_idx):
        return tuple(int(x) for x in self.actions[self.action_ids[s_idx]])

    def powers(self):
        """``(S, N)`` array of chosen power levels."""
        return self.actions[self.action_ids]


@dataclass
class SweepRecord:
    sweep: int
    span: float
    j_star: float


@dataclass
class RviResult:
    values: ValueTable
    policy: PolicyTable
    sweeps: List[SweepRecord] = field(default_factory=list)
    pruned_fraction: float = 0.0

    @property
    def j_star(self):
        return self.values.j_star

    @property
    def converged_span(self):
        return self.sweeps[-1].span if self.sweeps else float("nan")


def span(x):
    return float(np.max(x) - np.min(x))


def _argmax_first(Q):
    # np.argmax returns the first maximum, i.e. the lexicographically
    # smallest action among ties.
    return np.argmax(Q, axis=1)


def _pruned_argmax(model: MdpModel, Q):
    """Argmax restricted by the monotone-in-tau policy structure.

    States are visited in increasing tau order; for every sensor ``i`` with
    ``tau_i > 0`` the candidate actions at a state are those whose power for
    sensor ``i`` is at least the optimizer's power at the state with
    ``tau_i - 1`` (all other coordinates equal).

    Returns the action ids and the fraction of feasible pairs skipped.
    """
    N, L = model.N, model.L
    shape = model.shape
    A = model.n_actions
    Qt = Q.reshape(shape + (A,))
    best = np.empty(shape, dtype=np.int64)
    powers = model.actions  # (A, N)
    skipped = 0
    feasible_total = int(model.feasible.sum())
    for taus in itertools.product(range(L + 1), repeat=N):
        sl = [slice(None)] * len(shape)
        for i, t in enumerate(taus):
            sl[tau_axis(i)] = t
        q = Qt[tuple(sl)]  # (..., A) over the non-tau coordinates
        allowed = np.ones(q.shape, dtype=bool)
        for i, t in enumerate(taus):
            if t == 0:
                continue
            prev = list(sl)
            prev[tau_axis(i)] = t - 1
            lo = powers[best[tuple(prev)], i]  # (...,)
            allowed &= powers[:, i] >= lo[..., None]
        feasible = np.isfinite(q)
        # never leave a state without a feasible candidate
        allowed |= ~np.any(allowed & feasible, axis=-1, keepdims=True)
        skipped += int(np.count_nonzero(feasible & ~allowed))
        q = np.where(allowed, q, -np.inf)
        best[tuple(sl)] = np.argmax(q, axis=-1)
    frac = skipped / feasible_total if feasible_total else 0.0
    return best.reshape(-1), frac


def greedy_ids(model: MdpModel, Q, pruned=False):
    if pruned:
        return _pruned_argmax(model, Q)
    return _argmax_first(Q), 0.0


def rvi_solve(
    model: MdpModel,
    phi_f: Optional[MdpState] = None,
    span_tol: float = SPAN_TOL,
    max_sweeps: int = MAX_SWEEPS,
    pruned: bool = False,
    v0=None,
) -> RviResult:
    """Solve the average-reward Bellman equation by relative value iteration.

    Stops when the span of the change between successive iterates falls
    below ``span_tol``. ``j_star`` is the reference-state term subtracted in
    the final sweep.

    Raises:
        ConvergenceError: if ``max_sweeps`` is exhausted.
    """
    if span_tol <= 0:
        raise ValueError("span_tol must be positive")
    phi_f = model.reference_state() if phi_f is None else phi_f
    try:
        ref = model.index(phi_f)
    except ValueError as exc:
        raise ModelValidationError(f"reference state {phi_f} is outside the state space") from exc
    D = np.zeros(model.state_count) if v0 is None else np.asarray(v0, dtype=float).copy()
    records = []
    for t in range(1, max_sweeps + 1):
        Q = model.q_values(D)
        ids, _ = greedy_ids(model, Q, pruned)
        TD = Q[np.arange(model.state_count), ids]
        j = float(TD[ref])
        D_new = TD - j
        sp = span(D_new - D)
        records.append(SweepRecord(t, sp, j))
        D = D_new
        if sp < span_tol:
            break
    else:
        raise ConvergenceError(
            f"relative value iteration did not converge in {max_sweeps} sweeps "
            f"(final span {records[-1].span:.3e})",
            iterations=max_sweeps,
            residual=records[-1].span,
        )
    log.info("RVI converged after %d sweeps, J* = %.6f", t, j)
    vt = ValueTable(D, j, ref)
    pt, frac = extract_policy(model, vt, pruned=pruned, return_fraction=True)
    return RviResult(vt, pt, records, frac)


def extract_policy(model: MdpModel, vt: ValueTable, pruned=False, return_fraction=False):
    """Greedy policy for ``vt`` with lexicographic tie-breaking."""
    Q = model.q_values(vt.v)
    ids, frac = greedy_ids(model, Q, pruned)
    pt = PolicyTable(ids, model.actions)
    return (pt, frac) if return_fraction else pt


def q_from_v(model: MdpModel, vt: ValueTable) -> np.ndarray:
    """Q-factors ``r + E[V(s')] - J*``; ``-inf`` at infeasible pairs."""
    return model.q_values(vt.v) - vt.j_star


def bellman_residual(model: MdpModel, vt: ValueTable) -> float:
    """``max_s |J* + V(s) - max_a [r + E V]|``."""
    Q = model.q_values(vt.v)
    return float(np.max(np.abs(vt.j_star + vt.v - Q.max(axis=1))))


def q_residual(model: MdpModel, Q, j_star) -> np.ndarray:
    """Per-pair residual of ``J* + Q = r + E[max Q(s', .)]``; ``nan`` where infeasible."""
    V = np.max(np.where(model.feasible, Q, -np.inf), axis=1)
    res = j_star + Q - model.reward_table - model.expected_next(V)
    res[~model.feasible] = np.nan
    return res


@dataclass
class StructureReport:
    monotone_V: bool
    monotone_Q: bool
    superadditive_Q: bool
    monotone_policy: bool
    counterexamples: list

    @property
    def all_ok(self):
        return self.monotone_V and self.monotone_Q and self.superadditive_Q and self.monotone_policy


def verify_structure(model: MdpModel, v, policy: PolicyTable, Q, tol=TOL_STRUCT, max_examples=50):
    """Exhaustively check monotonicity and superadditivity at a solution.

    Checks, for every sensor and every pair of states one tau step apart:
    V nondecreasing, Q nondecreasing for each shared action, Q superadditive
    in (tau_i, power_i) over adjacent power levels, and the policy's power
    for that sensor nondecreasing. Violations are collected as dicts.
    """
    examples = []
    ok_v = ok_q = ok_s = ok_p = True
    # infeasible pairs hold -inf; their differences are masked out below
    Q = np.where(model.feasible, Q, 0.0)
    v = np.asarray(v)
    powers = policy.powers()
    feas = model.feasible
    for i in range(model.N):
        lo, hi = model.tau_pairs(i)
        bad = np.flatnonzero(v[lo] > v[hi] + tol)
        if bad.size:
            ok_v = False
            for j in bad[:max_examples]:
                examples.append(dict(kind="monotone_V", sensor=i, minus=int(lo[j]), plus=int(hi[j]),
                                     gap=float(v[lo[j]] - v[hi[j]])))
        both = feas[lo] & feas[hi]
        diff = Q[lo] - Q[hi]
        bad_q = np.argwhere(both & (diff > tol))
        if bad_q.size:
            ok_q = False
            for j, k in bad_q[:max_examples]:
                examples.append(dict(kind="monotone_Q", sensor=i, minus=int(lo[j]), plus=int(hi[j]),
                                     action=int(k), gap=float(diff[j, k])))
        for km, kp in model.power_pairs(i):
            ok = feas[lo, km] & feas[lo, kp] & feas[hi, km] & feas[hi, kp]
            d = (Q[hi, kp] - Q[hi, km]) - (Q[lo, kp] - Q[lo, km])
            bad_s = np.flatnonzero(ok & (d < -tol))
            if bad_s.size:
                ok_s = False
                for j in bad_s[:max_examples]:
                    examples.append(dict(kind="superadditive_Q", sensor=i, minus=int(lo[j]),
                                         plus=int(hi[j]), a_minus=int(km), a_plus=int(kp),
                                         gap=float(d[j])))
        bad_p = np.flatnonzero(powers[lo, i] > powers[hi, i])
        if bad_p.size:
            ok_p = False
            for j in bad_p[:max_examples]:
                examples.append(dict(kind="monotone_policy", sensor=i, minus=int(lo[j]),
                                     plus=int(hi[j])))
    return StructureReport(ok_v, ok_q, ok_s, ok_p, examples)


def policy_slice(model: MdpModel, policy: PolicyTable, b, e, h, g):
    """Action grid over ``(tau_1, tau_2)`` with all other coordinates fixed.

    Only meaningful for two sensors; ``h``/``g`` are per-sensor channel indices.
    """
    if model.N != 2:
        raise ValueError("policy_slice needs exactly two sensors")
    grid = np.empty((model.L + 1, model.L + 1), dtype=object)
    for t1 in range(model.L + 1):
        for t2 in range(model.L + 1):
            s = MdpState(b, e, tuple(h), tuple(g), (t1, t2))
            grid[t1, t2] = policy.action(model.index(s))
    return grid
