"""Model-free RVI Q-learning, plain and with structural primal-dual corrections.

The learner interacts with the simulator and observes the one-stage reward
``r(s, a)``, which the attacker can evaluate from the system matrices and
holding times alone. Channel and energy statistics are never read.

The structural variant keeps one Lagrange multiplier per inequality
``row . Q >= 0`` expressing that Q is nondecreasing in each holding time
and superadditive in (holding time, power). The inequalities depend only on
the shape of the state and action spaces.

Q-tables are dense ``(state_count, n_actions)`` arrays; a pair
``(s, k)`` is addressed by the flat index ``s * n_actions + k``.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import List, Optional

import numpy as np

from . import _kernels as K
from .errors import ConfigError, DivergenceError
from .mdp import MdpModel, MdpState
from .rvi import PolicyTable, q_residual
from .simulator import Environment, draws_per_step, drive, kernel_data

log = logging.getLogger(__name__)

MONOTONE = 0
SUPERADDITIVE = 1
DEFAULT_BATCH = 256
TOL_VIOLATION = 1e-6


# ------------------------------------------------------------------ constraints
@dataclass
class ConstraintSet:
    """Sparse difference constraints ``sum_p coef_p * Q[pair_p] >= 0``.

    Rows are stored in CSR form (``row_ptr``, ``row_pair``, ``row_coef``);
    ``inc_*`` is the transposed (pair -> rows) incidence in the same form.
    """

    row_ptr: np.ndarray
    row_pair: np.ndarray
    row_coef: np.ndarray
    kind: np.ndarray
    inc_ptr: np.ndarray
    inc_row: np.ndarray
    inc_coef: np.ndarray
    nu: np.ndarray
    n_pairs: int

    @property
    def n_rows(self):
        return self.row_ptr.shape[0] - 1

    def count(self, kind):
        return int(np.count_nonzero(self.kind == kind))

    def row(self, j):
        a, b = self.row_ptr[j], self.row_ptr[j + 1]
        return list(zip(self.row_pair[a:b].tolist(), self.row_coef[a:b].tolist()))

    def evaluate(self, Q) -> np.ndarray:
        """``T Q`` for a flat or ``(S, A)`` Q array."""
        q = np.asarray(Q, dtype=float).reshape(-1)
        prod = self.row_coef * q[self.row_pair]
        return np.add.reduceat(prod, self.row_ptr[:-1]) if self.n_rows else np.zeros(0)

    def violations(self, Q, tol=TOL_VIOLATION) -> int:
        return int(np.count_nonzero(self.evaluate(Q) < -tol))

    def transpose_times(self, nu=None) -> np.ndarray:
        """``T^T nu`` as a flat per-pair vector."""
        nu = self.nu if nu is None else nu
        out = np.zeros(self.n_pairs)
        np.add.at(out, self.row_pair, self.row_coef * np.repeat(nu, np.diff(self.row_ptr)))
        return out

    @classmethod
    def empty(cls, n_pairs):
        z = np.zeros(0, dtype=np.int64)
        return cls(np.zeros(1, dtype=np.int64), z, np.zeros(0), z.copy(),
                   np.zeros(n_pairs + 1, dtype=np.int64), z.copy(), np.zeros(0), np.zeros(0), n_pairs)

    @classmethod
    def from_rows(cls, rows, kinds, n_pairs):
        """Build from a list of ``[(pair, coef), ...]`` rows, dropping duplicates."""
        seen = set()
        ptr, pairs, coefs, kk = [0], [], [], []
        for row, kind in zip(rows, kinds):
            key = tuple(sorted(row))
            if key in seen:
                continue
            seen.add(key)
            for p, c in row:
                pairs.append(p)
                coefs.append(c)
            ptr.append(len(pairs))
            kk.append(kind)
        return _assemble(np.array(ptr, dtype=np.int64), np.array(pairs, dtype=np.int64),
                         np.array(coefs, dtype=float), np.array(kk, dtype=np.int64), n_pairs)


def _assemble(row_ptr, row_pair, row_coef, kind, n_pairs):
    n_rows = row_ptr.shape[0] - 1
    row_of = np.repeat(np.arange(n_rows, dtype=np.int64), np.diff(row_ptr))
    order = np.argsort(row_pair, kind="stable")
    inc_ptr = np.zeros(n_pairs + 1, dtype=np.int64)
    np.cumsum(np.bincount(row_pair, minlength=n_pairs), out=inc_ptr[1:])
    return ConstraintSet(row_ptr, row_pair, row_coef, kind, inc_ptr, row_of[order],
                         row_coef[order], np.zeros(n_rows), n_pairs)


def build_constraints(model: MdpModel) -> ConstraintSet:
    """Monotonicity and superadditivity rows for every sensor.

    Monotone rows: ``Q(s+, a) - Q(s-, a) >= 0`` for states one holding-time
    step apart in sensor ``i`` and every action feasible in both.
    Superadditive rows: ``[Q(s+, a+) - Q(s+, a-)] - [Q(s-, a+) - Q(s-, a-)] >= 0``
    for actions differing by one power level in coordinate ``i``, all four
    pairs feasible. Only the state-action shape is used.
    """
    A = model.n_actions
    feas_b = model.feasible_by_b
    blocks = []  # (pairs (n, w), coefs (w,), kind)
    for i in range(model.N):
        lo, hi = model.tau_pairs(i)
        b = model.state_b[lo]
        for k in range(A):
            m = feas_b[b, k]
            if not m.any():
                continue
            pairs = np.stack([hi[m] * A + k, lo[m] * A + k], axis=1)
            blocks.append((pairs, np.array([1.0, -1.0]), MONOTONE))
        for km, kp in model.power_pairs(i):
            m = feas_b[b, km] & feas_b[b, kp]
            if not m.any():
                continue
            pairs = np.stack([hi[m] * A + kp, hi[m] * A + km, lo[m] * A + kp, lo[m] * A + km], axis=1)
            blocks.append((pairs, np.array([1.0, -1.0, -1.0, 1.0]), SUPERADDITIVE))
    n_pairs = model.state_count * A
    if not blocks:
        return ConstraintSet.empty(n_pairs)
    ptr_parts, pair_parts, coef_parts, kind_parts = [], [], [], []
    keys = []
    for pairs, coefs, kind in blocks:
        n, w = pairs.shape
        pair_parts.append(pairs.reshape(-1))
        coef_parts.append(np.tile(coefs, n))
        ptr_parts.append(np.full(n, w, dtype=np.int64))
        kind_parts.append(np.full(n, kind, dtype=np.int64))
        # canonical key for duplicate removal: signed pair ids, sorted, padded to 4
        signed = np.where(coefs > 0, pairs + 1, -(pairs + 1))
        key = np.zeros((n, 4), dtype=np.int64)
        key[:, :w] = np.sort(signed, axis=1)
        keys.append(key)
    widths = np.concatenate(ptr_parts)
    keys = np.concatenate(keys)
    _, first = np.unique(keys, axis=0, return_index=True)
    keep = np.zeros(widths.shape[0], dtype=bool)
    keep[first] = True
    entry_keep = np.repeat(keep, widths)
    widths = widths[keep]
    row_ptr = np.zeros(widths.shape[0] + 1, dtype=np.int64)
    np.cumsum(widths, out=row_ptr[1:])
    row_pair = np.concatenate(pair_parts)[entry_keep]
    row_coef = np.concatenate(coef_parts)[entry_keep]
    kind = np.concatenate(kind_parts)[keep]
    return _assemble(row_ptr, row_pair, row_coef, kind, n_pairs)


# ---------------------------------------------------------------- configuration
@dataclass
class LearnConfig:
    """Learning schedules and run control.

    Step sizes follow ``xi_k = c / (ceil(k / B) + k0)`` for both the primal
    and the dual recursion, where ``k`` is the visit count of the updated
    pair (``clock="visits"``) or the global step (``clock="global"``).
    """

    steps: int = 1_000_000
    epsilon: float = 0.1
    c: float = 1.0
    k0: float = 100.0
    B: int = 1
    clock: str = "visits"
    ref_state: Optional[MdpState] = None
    ref_action: Optional[tuple] = None
    eval_every: int = 10_000
    seed: Optional[int] = 0
    dual: bool = True
    full_dual: bool = False
    projection: bool = True
    batch: int = DEFAULT_BATCH
    q_init: object = 0.0
    dual_scale: float = 1.0
    dual_clock: str = "step"
    snapshot_every: int = 0
    chunk: int = 100_000

    def __post_init__(self):
        if self.steps < 0:
            raise ConfigError("steps must be nonnegative")
        if not 0.0 <= self.epsilon <= 1.0:
            raise ConfigError("epsilon must lie in [0, 1]")
        if not self.c > 0 or not self.k0 >= 0 or self.B < 1:
            raise ConfigError("step schedule needs c > 0, k0 >= 0, B >= 1")
        if self.clock not in ("visits", "global"):
            raise ConfigError("clock must be 'visits' or 'global'")
        if self.eval_every < 1:
            raise ConfigError("eval_every must be positive")
        if not (self.q_init == "reward" or isinstance(self.q_init, (int, float))):
            raise ConfigError("q_init must be a number or 'reward'")
        if not self.dual_scale >= 0:
            raise ConfigError("dual_scale must be nonnegative")
        if self.dual_clock not in ("step", "row"):
            raise ConfigError("dual_clock must be 'step' or 'row'")
        if self.batch < 0:
            raise ConfigError("batch must be nonnegative")

    def step_size(self, k):
        """Step size for clock value ``k >= 1``."""
        return self.c / (math.ceil(k / self.B) + self.k0)


def reference_pair(model: MdpModel, cfg: LearnConfig) -> int:
    s = model.reference_state() if cfg.ref_state is None else cfg.ref_state
    a = (0,) * model.N if cfg.ref_action is None else tuple(cfg.ref_action)
    k = model.action_id(a)
    if not model.feasible_by_b[s.b, k]:
        raise ConfigError(f"reference action {a} infeasible at reference state")
    return model.index(s) * model.n_actions + k


# ------------------------------------------------------------ single-step rules
@dataclass
class QTable:
    q: np.ndarray
    visits: np.ndarray

    @classmethod
    def zeros(cls, model: MdpModel, value=0.0):
        shape = (model.state_count, model.n_actions)
        return cls(np.full(shape, float(value)), np.zeros(shape, dtype=np.int64))

    @classmethod
    def initial(cls, model: MdpModel, spec=0.0):
        """Constant table, or the one-stage reward when ``spec == "reward"``.

        The reward is known to the learner and is itself nondecreasing in
        each holding time and superadditive, so it satisfies every
        structural row from the start.
        """
        if isinstance(spec, str):
            q = cls.zeros(model)
            q.q[:] = np.where(model.feasible, model.reward_table, 0.0)
            return q
        return cls.zeros(model, spec)


def epsilon_greedy(model: MdpModel, q: QTable, s: MdpState, eps, u, u2):
    """Feasible argmax (first among ties) with probability ``1 - eps``, else uniform via ``u2``."""
    b = s.b
    ids = model.feasible_action_ids(b)
    if u < eps:
        return int(ids[min(int(u2 * ids.size), ids.size - 1)])
    row = q.q[model.index(s)]
    return int(ids[np.argmax(row[ids])])


def greedy_value(model: MdpModel, q: QTable, s_idx, b):
    ids = model.feasible_action_ids(b)
    return float(np.max(q.q[s_idx, ids]))


def standard_update(model: MdpModel, q: QTable, obs, cfg: LearnConfig, k, ref_pair):
    """One RVI Q-learning step on observation ``(s, a, r, s')`` at global step ``k``.

    ``s``/``s'`` are state indices and ``a`` an action id. Returns the step size.
    """
    s, a, r, s2 = obs
    xi = _advance_clock(q, s, a, cfg, k)
    flat = q.q.reshape(-1)
    pair = s * model.n_actions + a
    delta = r + greedy_value(model, q, s2, model.state_b[s2]) - flat[pair] - flat[ref_pair]
    flat[pair] += xi * delta
    _check_finite(flat[pair], k)
    return xi


def _advance_clock(q, s, a, cfg, k):
    q.visits[s, a] += 1
    clock = q.visits[s, a] if cfg.clock == "visits" else k
    return cfg.step_size(clock)


def _check_finite(x, k):
    if not np.isfinite(x):
        raise DivergenceError(f"non-finite value at step {k}", step=k)


@dataclass
class DualState:
    """Round-robin cursor and per-row clocks of the dual recursion."""

    cursor: int = 0
    writes: int = 0
    row_visits: dict = field(default_factory=dict)

    def zeta(self, j, xi, cfg):
        if cfg.dual_clock == "row":
            n = self.row_visits.get(j, 0) + 1
            self.row_visits[j] = n
            return cfg.dual_scale * cfg.step_size(n)
        return cfg.dual_scale * xi


def structural_update(model: MdpModel, q: QTable, cs: ConstraintSet, obs, cfg: LearnConfig, k,
                      ref_pair, ds: DualState):
    """One primal-dual step; mirrors the compiled loop exactly.

    The dual step is evaluated at the current Q before the primal write.
    """
    s, a, r, s2 = obs
    xi = _advance_clock(q, s, a, cfg, k)
    flat = q.q.reshape(-1)
    pair = s * model.n_actions + a
    delta = r + greedy_value(model, q, s2, model.state_b[s2]) - flat[pair] - flat[ref_pair]
    lo, hi = cs.inc_ptr[pair], cs.inc_ptr[pair + 1]
    corr = 0.0
    for p in range(lo, hi):  # same summation order as the compiled loop
        corr += cs.inc_coef[p] * cs.nu[cs.inc_row[p]]
    if cfg.dual and cs.n_rows:
        if cfg.full_dual:
            tq = [_row_value(cs, j, flat) for j in range(cs.n_rows)]
            for j in range(cs.n_rows):
                cs.nu[j] = _dual(cs.nu[j], ds.zeta(j, xi, cfg), tq[j], cfg.projection, k)
            ds.writes += cs.n_rows
        else:
            touched = set()
            rows = [int(cs.inc_row[p]) for p in range(lo, hi)]
            m = min(cfg.batch, cs.n_rows)
            for _ in range(m):
                rows.append(ds.cursor)
                ds.cursor = (ds.cursor + 1) % cs.n_rows
            for j in rows:
                if j in touched:
                    continue
                touched.add(j)
                cs.nu[j] = _dual(cs.nu[j], ds.zeta(j, xi, cfg), _row_value(cs, j, flat), cfg.projection, k)
                ds.writes += 1
    flat[pair] += xi * (delta + corr)
    _check_finite(flat[pair], k)
    return xi


def _row_value(cs, j, flat):
    v = 0.0
    for p in range(cs.row_ptr[j], cs.row_ptr[j + 1]):
        v += cs.row_coef[p] * flat[cs.row_pair[p]]
    return v


def _dual(nu, zeta, tq, projection, k):
    v = nu - zeta * tq
    if projection and v < 0.0:
        v = 0.0
    _check_finite(v, k)
    return v


# --------------------------------------------------------------------- training
@dataclass
class Checkpoint:
    """Learning-curve record.

    ``bellman_residual`` is the mean absolute residual of the averaged
    Q-equation over feasible pairs, weighted by how often the learner has
    visited each pair so far; ``residual_mean`` and ``residual_max`` are the
    unweighted mean and the maximum over all feasible pairs.
    """

    step: int
    running_avg_reward: float
    bellman_residual: float
    residual_mean: float
    residual_max: float
    violation_count: int


@dataclass
class TrainResult:
    q: QTable
    policy: PolicyTable
    curve: List[Checkpoint]
    mode: str
    constraints: Optional[ConstraintSet] = None
    nu_writes: int = 0
    snapshots: list = field(default_factory=list)


def greedy_policy_from_q(model: MdpModel, Q) -> PolicyTable:
    ids = np.argmax(np.where(model.feasible, Q, -np.inf), axis=1)
    return PolicyTable(ids, model.actions)


def residual_stats(model: MdpModel, Q, ref_pair, visits=None):
    """``(weighted, mean, max)`` absolute residual over feasible pairs, exact kernel.

    ``weighted`` uses ``visits`` as weights (uniform when omitted).
    """
    j = float(Q.reshape(-1)[ref_pair])
    feas = model.feasible
    res = np.abs(q_residual(model, Q, j)[feas])
    if visits is None or not np.any(visits[feas]):
        w_res = float(res.mean())
    else:
        w = visits[feas].astype(float)
        w_res = float(np.dot(w, res) / w.sum())
    return w_res, float(res.mean()), float(res.max())


def _validate_mode(mode):
    if mode not in ("standard", "structural"):
        raise ConfigError(f"unknown learning mode {mode!r}")


def train(model: MdpModel, mode: str, cfg: LearnConfig, constraints: Optional[ConstraintSet] = None,
          monitor: Optional[ConstraintSet] = None) -> TrainResult:
    """Run ``cfg.steps`` steps of epsilon-greedy learning against the simulator.

    ``constraints`` is the structural constraint set (built when omitted in
    structural mode). ``monitor`` is the set used for the violation count
    in the learning curve (defaults to the structural set). The exact model
    is read only for the diagnostic residuals.
    """
    _validate_mode(mode)
    structural = mode == "structural"
    if structural and constraints is None:
        constraints = build_constraints(model)
    cs = constraints if structural else ConstraintSet.empty(model.state_count * model.n_actions)
    if monitor is None:
        monitor = constraints if constraints is not None else build_constraints(model)
    kd = kernel_data(model)
    ref = reference_pair(model, cfg)
    qt = QTable.initial(model, cfg.q_init)
    R = np.where(model.feasible, model.reward_table, 0.0)
    rng = np.random.default_rng(cfg.seed)
    st = Environment(model).reset(rng=rng).as_array()
    width = draws_per_step(model.N)
    acc = np.zeros(2)
    rr = np.zeros(1, dtype=np.int64)
    stamp = np.zeros(max(cs.n_rows, 1), dtype=np.int64)
    row_visits = np.zeros(max(cs.n_rows, 1), dtype=np.int64)
    curve, snapshots = [], []
    done = 0
    marks = sorted(set(list(range(cfg.eval_every, cfg.steps + 1, cfg.eval_every)) + [cfg.steps]) - {0})
    if cfg.snapshot_every:
        marks = sorted(set(marks) | set(range(cfg.snapshot_every, cfg.steps + 1, cfg.snapshot_every)))
    for mark in marks:
        while done < mark:
            n = min(cfg.chunk, mark - done)
            U = rng.random((n, width))

            def call(t0, U=U, base=done):
                return K.train_chunk(
                    st, U[t0:], qt.q, R, qt.visits, kd.feas_ids, kd.n_feas, kd.strides,
                    *kd.env_args(), ref, cfg.epsilon, cfg.c, cfg.k0, cfg.B,
                    cfg.clock == "visits", base + t0, structural, cfg.dual,
                    cs.row_ptr, cs.row_pair, cs.row_coef, cs.inc_ptr, cs.inc_row, cs.inc_coef,
                    cs.nu, rr, cfg.batch, cfg.full_dual, cfg.projection, stamp, acc,
                    cfg.dual_scale, cfg.dual_clock == "row", row_visits)

            drive(kd, call, done)
            done += n
        if mark % cfg.eval_every == 0 or mark == cfg.steps:
            w_res, mean_res, max_res = residual_stats(model, qt.q, ref, qt.visits)
            curve.append(Checkpoint(mark, float(acc[0] / mark), w_res, mean_res, max_res,
                                    monitor.violations(qt.q)))
            log.debug("step %d avg %.4f residual %.4g", mark, acc[0] / mark, w_res)
        if cfg.snapshot_every and mark % cfg.snapshot_every == 0:
            snapshots.append((mark, qt.q.copy()))
    return TrainResult(qt, greedy_policy_from_q(model, qt.q), curve, mode,
                       constraints if structural else None, int(acc[1]), snapshots)


def train_python(model: MdpModel, mode: str, cfg: LearnConfig, constraints=None):
    """Pure-Python reference learner; consumes the same draws as :func:`train`.

    Returns ``(QTable, ConstraintSet or None, reward_sum)``. Slow; meant for
    cross-checking the compiled loop on small models.
    """
    _validate_mode(mode)
    structural = mode == "structural"
    if structural and constraints is None:
        constraints = build_constraints(model)
    ref = reference_pair(model, cfg)
    qt = QTable.initial(model, cfg.q_init)
    R = model.reward_table
    rng = np.random.default_rng(cfg.seed)
    sim = Environment(model)
    env = sim.reset(rng=rng)
    ds = DualState()
    total = 0.0
    width = draws_per_step(model.N)
    for k in range(1, cfg.steps + 1):
        u = rng.random(width)
        s_state = env.view(model.L)
        s = model.index(s_state)
        a = epsilon_greedy(model, qt, s_state, cfg.epsilon, u[0], u[1])
        r = float(R[s, a])
        sim.step(env, model.actions[a], u=u[2:])
        s2 = model.index(env.view(model.L))
        if structural:
            structural_update(model, qt, constraints, (s, a, r, s2), cfg, k, ref, ds)
        else:
            standard_update(model, qt, (s, a, r, s2), cfg, k, ref)
        total += r
    return qt, constraints, total
