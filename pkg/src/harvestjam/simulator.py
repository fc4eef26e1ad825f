"""Ground-truth environment, Monte Carlo policy evaluation and baseline policies.

The environment tracks the true (untruncated) holding time of every sensor;
policies and learners see the truncated state ``min(tau, L)``. All
randomness comes from a ``numpy.random.Generator`` in a fixed per-step
layout (see ``_kernels``), so a Python rollout and a compiled rollout from
the same seed are identical.
"""

from __future__ import annotations

import logging
import math
import threading
from dataclasses import dataclass, field
from typing import Callable, Optional, Union

import numpy as np

from . import _kernels as K
from .errors import DivergenceError, HarvestJamError
from .mdp import MdpModel, MdpState
from .rvi import PolicyTable

log = logging.getLogger(__name__)

TRACE_CAP = 600
CHUNK = 100_000


def draws_per_step(N):
    return 3 + 3 * N


@dataclass
class EnvState:
    """Battery, chain indices and untruncated holding times.

    ``rng`` is the generator the environment draws from; its position is
    part of the state.
    """

    b: int
    e: int
    h: list
    g: list
    true_tau: list
    rng: np.random.Generator = field(repr=False, compare=False)

    def view(self, L) -> MdpState:
        return MdpState(self.b, self.e, tuple(self.h), tuple(self.g),
                        tuple(min(t, L) for t in self.true_tau))

    def as_array(self):
        out = [self.b, self.e]
        for hi, gi, ti in zip(self.h, self.g, self.true_tau):
            out.extend((hi, gi, ti))
        return np.array(out, dtype=np.int64)


class KernelData:
    """Flat arrays describing a model, as consumed by the compiled loops."""

    def __init__(self, model: MdpModel, trace_cap: int = TRACE_CAP):
        N = model.N
        self.N = N
        self._lock = threading.Lock()
        self.L = model.L
        self.b_max = model.b_max
        self.strides = np.array([math.prod(model.shape[j + 1:]) for j in range(len(model.shape))],
                                dtype=np.int64)
        self.actions = model.actions.astype(np.int64)
        self.action_sum = model.action_sum.astype(np.int64)
        lmax = max(c.size for c in model.chains)
        n_p = len(model.power_levels)
        self.lam = np.zeros((N, lmax, lmax, n_p))
        self.chan_cdf = np.ones((N, lmax, lmax))
        self.chan_size = np.zeros(N, dtype=np.int64)
        for i, c in enumerate(model.chains):
            self.lam[i, : c.size, : c.size] = model.lam[i]
            self.chan_cdf[i, : c.size, : c.size] = c.cdf
            self.chan_size[i] = c.size
        self._steady = model.steady
        self.traces = self._trace_block(max(trace_cap, model.L + 2))
        en = model.config.energy_chain
        self.energy_cdf = en.cdf.copy()
        self.energy_floor = np.floor(en.values).astype(np.int64)
        feas = model.feasible_by_b
        self.n_feas = feas.sum(axis=1).astype(np.int64)
        self.feas_ids = np.zeros((model.b_max + 1, model.n_actions), dtype=np.int64)
        for b in range(model.b_max + 1):
            ids = np.flatnonzero(feas[b])
            self.feas_ids[b, : ids.size] = ids

    def _trace_block(self, n):
        return np.array([st.traces(n - 1) for st in self._steady])

    def extend_traces(self, seen=None):
        # rollouts may share this object across threads; only grow once per overflow
        with self._lock:
            if seen is not None and self.traces.shape[1] > seen:
                return
            n = 2 * self.traces.shape[1]
            log.debug("extending trace table to %d entries", n)
            self.traces = self._trace_block(n)

    def env_args(self):
        return (self.N, self.L, self.b_max, self.actions, self.action_sum, self.lam, self.traces,
                self.energy_cdf, self.energy_floor, self.chan_cdf, self.chan_size)


def kernel_data(model: MdpModel) -> KernelData:
    kd = getattr(model, "_kernel_data", None)
    if kd is None:
        kd = KernelData(model)
        model._kernel_data = kd
    return kd


class Environment:
    """Step-by-step simulator of the attacker's world."""

    def __init__(self, model: MdpModel):
        self.model = model

    def reset(self, seed=None, rng: Optional[np.random.Generator] = None) -> EnvState:
        """Start with full battery, all holding times zero, uniform chain states."""
        rng = np.random.default_rng(seed) if rng is None else rng
        m = self.model
        u = rng.random(1 + 2 * m.N)
        e = min(int(u[0] * m.n_energy), m.n_energy - 1)
        h, g = [], []
        for i, c in enumerate(m.chains):
            h.append(min(int(u[1 + 2 * i] * c.size), c.size - 1))
            g.append(min(int(u[2 + 2 * i] * c.size), c.size - 1))
        return EnvState(m.b_max, e, h, g, [0] * m.N, rng)

    def step(self, env: EnvState, a, u=None):
        """Apply power vector ``a``; returns ``(expected_reward, realized_trace)``.

        ``env`` is updated in place. ``u`` overrides the environment draws
        (length ``1 + 3N``); otherwise they are taken from ``env.rng``.
        """
        m = self.model
        a = tuple(int(x) for x in a)
        if len(a) != m.N or sum(a) > env.b or any(p not in m.power_levels for p in a):
            raise ValueError(f"action {a} infeasible at battery level {env.b}")
        if u is None:
            u = env.rng.random(1 + 3 * m.N)
        expected = 0.0
        realized = 0.0
        for i in range(m.N):
            st = m.steady[i]
            lam = m.arrival(i, env.h[i], env.g[i], a[i])
            tau = env.true_tau[i]
            expected += lam * st.trace(0) + (1.0 - lam) * st.trace(tau + 1)
            new_tau = 0 if u[1 + 3 * i] < lam else tau + 1
            env.h[i] = m.chains[i].step(env.h[i], u[2 + 3 * i])
            env.g[i] = m.chains[i].step(env.g[i], u[3 + 3 * i])
            env.true_tau[i] = new_tau
            realized += st.trace(new_tau)
        E = m.config.energy_chain.values[env.e]
        env.e = m.config.energy_chain.step(env.e, u[0])
        env.b = min(env.b - sum(a) + int(math.floor(E)), m.b_max)
        return expected, realized


def env_reset(model: MdpModel, seed=None) -> EnvState:
    return Environment(model).reset(seed)


def env_step(model: MdpModel, env: EnvState, a):
    return Environment(model).step(env, a)


def greedy_policy(model: MdpModel, s: MdpState):
    """Full power to the sensor with the largest holding time first, then the next."""
    cap = model.config.battery.max_power
    remaining = s.b
    a = [0] * model.N
    for i in sorted(range(model.N), key=lambda i: (-s.tau[i], i)):
        p = min(cap, remaining)
        a[i] = p
        remaining -= p
    return tuple(a)


def random_policy(model: MdpModel, s: MdpState, u):
    """Uniform draw from the feasible actions of ``s`` using ``u`` in [0, 1)."""
    acts = model.feasible_actions(s)
    return acts[min(int(u * len(acts)), len(acts) - 1)]


def greedy_table(model: MdpModel) -> PolicyTable:
    ids = np.empty(model.state_count, dtype=np.int64)
    for idx in range(model.state_count):
        ids[idx] = model.action_id(greedy_policy(model, model.state(idx)))
    return PolicyTable(ids, model.actions)


class RandomPolicy:
    """Marker for the uniform-over-feasible-actions policy."""

    def __call__(self, model, s, u):
        return random_policy(model, s, u)


@dataclass
class RolloutReport:
    avg_reward: float
    avg_expected: float
    T: int
    seed: Optional[int]
    stderr: float
    stderr_expected: float
    initial_state: tuple
    trace: Optional[list] = None


def _batch_stderr(batch_means):
    x = np.asarray(batch_means)
    if x.size < 2:
        return float("nan")
    return float(np.std(x, ddof=1) / math.sqrt(x.size))


def rollout(model: MdpModel, policy: Union[PolicyTable, RandomPolicy, Callable, str], T: int,
            seed=None, keep_trace=False, chunk=CHUNK) -> RolloutReport:
    """Monte Carlo estimate of the long-run average trace under ``policy``.

    ``policy`` may be a :class:`PolicyTable`, ``"random"``/``"greedy"``, a
    :class:`RandomPolicy`, or a callable ``policy(state, u) -> action`` (the
    slow pure-Python path, also used when ``keep_trace`` is set).
    Standard errors use batch means over chunks of ``chunk`` steps.
    """
    if isinstance(policy, str):
        if policy == "random":
            policy = RandomPolicy()
        elif policy == "greedy":
            policy = greedy_table(model)
        else:
            raise ValueError(f"unknown policy name {policy!r}")
    if keep_trace or not isinstance(policy, (PolicyTable, RandomPolicy)):
        return _rollout_python(model, policy, T, seed, keep_trace, chunk)
    return _rollout_compiled(model, policy, T, seed, chunk)


def _policy_mode(policy):
    if policy is None or isinstance(policy, RandomPolicy):
        return K.POLICY_RANDOM, np.zeros(1, dtype=np.int64)
    return K.POLICY_TABLE, np.asarray(policy.action_ids, dtype=np.int64)


def _rollout_compiled(model, policy, T, seed, chunk):
    kd = kernel_data(model)
    rng = np.random.default_rng(seed)
    env = Environment(model).reset(rng=rng)
    init = tuple(int(x) for x in env.as_array())
    st = env.as_array()
    mode, ids = _policy_mode(policy)
    width = draws_per_step(model.N)
    empty_i = np.zeros(0, dtype=np.int64)
    empty_f = np.zeros(0)
    real_means, exp_means = [], []
    total_real = total_exp = 0.0
    done = 0
    while done < T:
        n = min(chunk, T - done)
        U = rng.random((n, width))
        out = np.zeros(3)

        def call(t0):
            return K.rollout_chunk(st, U[t0:], mode, ids, kd.feas_ids, kd.n_feas, kd.strides,
                                   *kd.env_args(), empty_i, empty_i, empty_f, out)

        drive(kd, call, done)
        if out[2]:
            raise HarvestJamError("battery left its range during rollout")
        total_real += out[0]
        total_exp += out[1]
        real_means.append(out[0] / n)
        exp_means.append(out[1] / n)
        done += n
    return RolloutReport(float(total_real / T) if T else float("nan"),
                         float(total_exp / T) if T else float("nan"),
                         T, seed, _batch_stderr(real_means), _batch_stderr(exp_means), init)


def drive(kd: KernelData, call, offset=0):
    """Run ``call(t0)`` until the chunk is done, growing the trace table on overflow.

    ``call`` must resume at row ``t0`` of its draw block and return
    ``(steps_done_from_t0, status)``.
    """
    t0 = 0
    while True:
        width = kd.traces.shape[1]
        steps, status = call(t0)
        t0 += steps
        if status == K.TRACE_OVERFLOW:
            kd.extend_traces(seen=width)
            continue
        _check_status(status, offset + t0)
        return t0


def _check_status(status, step):
    if status == K.OK:
        return
    if status == K.INFEASIBLE:
        raise HarvestJamError(f"policy chose an infeasible action at step {step}")
    if status == K.NON_FINITE:
        raise DivergenceError(f"non-finite value at step {step}", step=step)
    raise HarvestJamError(f"simulation failed with status {status} at step {step}")


def _rollout_python(model, policy, T, seed, keep_trace, chunk):
    rng = np.random.default_rng(seed)
    sim = Environment(model)
    env = sim.reset(rng=rng)
    init = tuple(int(x) for x in env.as_array())
    trace = [] if keep_trace else None
    real_sum = exp_sum = 0.0
    batch_r = batch_e = 0.0
    real_means, exp_means = [], []
    for k in range(T):
        u_pol = rng.random(2)
        s = env.view(model.L)
        if isinstance(policy, PolicyTable):
            a = policy.action(model.index(s))
        elif isinstance(policy, RandomPolicy):
            a = random_policy(model, s, u_pol[1])
        else:
            a = policy(s, u_pol[1])
        before = (env.b, env.e, tuple(env.h), tuple(env.g), tuple(env.true_tau))
        exp_r, real_r = sim.step(env, a)
        if not 0 <= env.b <= model.b_max:
            raise HarvestJamError("battery left its range during rollout")
        real_sum += real_r
        exp_sum += exp_r
        batch_r += real_r
        batch_e += exp_r
        if (k + 1) % chunk == 0 or k + 1 == T:
            n = (k % chunk) + 1
            real_means.append(batch_r / n)
            exp_means.append(batch_e / n)
            batch_r = batch_e = 0.0
        if keep_trace:
            gamma = tuple(int(t == 0) for t in env.true_tau)
            trace.append(dict(k=k, b=before[0], E=before[1], H=before[2], G=before[3],
                              tau=before[4], action=tuple(a), gamma=gamma, realized_trace=real_r))
    return RolloutReport(real_sum / T if T else float("nan"), exp_sum / T if T else float("nan"),
                         T, seed, _batch_stderr(real_means), _batch_stderr(exp_means), init, trace)


def record_transitions(model: MdpModel, T: int, seed=None, policy=None, chunk=CHUNK,
                       with_traces=False):
    """Run ``T`` steps and return visited ``(state, action, next_state)`` index arrays.

    ``policy`` defaults to uniform random actions. With ``with_traces`` the
    per-step realized traces are returned as a fourth array.
    """
    kd = kernel_data(model)
    rng = np.random.default_rng(seed)
    env = Environment(model).reset(rng=rng)
    st = env.as_array()
    mode, ids = _policy_mode(policy)
    width = draws_per_step(model.N)
    states = np.empty(T + 1, dtype=np.int64)
    actions = np.empty(T, dtype=np.int64)
    reals = np.empty(T)
    done = 0
    while done < T:
        n = min(chunk, T - done)
        U = rng.random((n, width))
        out = np.zeros(3)

        def call(t0):
            a, b = done + t0, done + n
            return K.rollout_chunk(st, U[t0:], mode, ids, kd.feas_ids, kd.n_feas, kd.strides,
                                   *kd.env_args(), states[a:b], actions[a:b], reals[a:b], out)

        drive(kd, call, done)
        done += n
    states[T] = K.state_index(st, kd.strides, kd.N, kd.L)
    if with_traces:
        return states[:-1], actions, states[1:], reals
    return states[:-1], actions, states[1:]
