"""The truncated average-reward MDP of the harvest-and-jam attacker.

States are tuples ``(b, e, h_1, g_1, tau_1, ..., h_N, g_N, tau_N)``:

* ``b``     battery level in ``0..b_max``
* ``e``     index of the harvested-energy chain state
* ``h_i``   index of the sensor-to-estimator channel state of sensor ``i``
* ``g_i``   index of the attacker-to-estimator channel state of sensor ``i``
* ``tau_i`` holding time of sensor ``i`` observed before acting, ``0..L``

and are numbered in row-major (mixed-radix) order, so a value vector of
length ``state_count`` reshapes directly into a tensor with one axis per
coordinate. Actions are power vectors numbered in lexicographic order.
"""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass, field
from typing import List, Optional, Sequence, Tuple

import numpy as np

from .channels import BatteryModel, LinkModel, MarkovChain, link_arrival_table
from .errors import ModelValidationError
from .kalman import LtiSystem, SteadyState, steady_state

DEFAULT_MAX_STATES = 2_000_000


@dataclass
class ProblemConfig:
    """Everything needed to build the MDP.

    ``channel_chains`` optionally gives one chain per sensor (used for both
    its H and G links); otherwise ``channel_chain`` is shared by all links.
    """

    systems: List[LtiSystem]
    channel_chain: MarkovChain
    energy_chain: MarkovChain
    links: List[LinkModel]
    battery: BatteryModel
    L: int
    channel_chains: Optional[List[MarkovChain]] = None

    def __post_init__(self):
        if len(self.systems) < 1:
            raise ModelValidationError("need at least one sensor")
        if len(self.links) != len(self.systems):
            raise ModelValidationError("need one link model per sensor")
        if int(self.L) != self.L or self.L < 1:
            raise ModelValidationError("L must be an integer >= 1")
        self.L = int(self.L)
        if self.channel_chains is not None and len(self.channel_chains) != len(self.systems):
            raise ModelValidationError("need one channel chain per sensor")

    @property
    def N(self):
        return len(self.systems)

    def chain_for(self, i) -> MarkovChain:
        if self.channel_chains is not None:
            return self.channel_chains[i]
        return self.channel_chain


@dataclass(frozen=True)
class MdpState:
    b: int
    e: int
    h: Tuple[int, ...]
    g: Tuple[int, ...]
    tau: Tuple[int, ...]

    def to_tuple(self):
        out = [self.b, self.e]
        for hi, gi, ti in zip(self.h, self.g, self.tau):
            out.extend((hi, gi, ti))
        return tuple(out)

    @classmethod
    def from_tuple(cls, t):
        t = tuple(int(x) for x in t)
        rest = t[2:]
        return cls(t[0], t[1], rest[0::3], rest[1::3], rest[2::3])

    def replace(self, **kw):
        d = dict(b=self.b, e=self.e, h=self.h, g=self.g, tau=self.tau)
        d.update(kw)
        return MdpState(**d)


def tau_axis(i):
    return 4 + 3 * i


class MdpModel:
    """Enumerated truncated MDP with reward table and factorized kernel.

    Args:
        config: problem description.
        max_states: refuse to build beyond this many states.
    """

    def __init__(self, config: ProblemConfig, max_states: int = DEFAULT_MAX_STATES):
        self.config = config
        cfg = config
        self.N = cfg.N
        self.L = cfg.L
        self.b_max = cfg.battery.b_max
        self.power_levels = cfg.battery.power_levels
        self.n_energy = cfg.energy_chain.size
        self.chains = [cfg.chain_for(i) for i in range(self.N)]
        shape = [self.b_max + 1, self.n_energy]
        for c in self.chains:
            shape.extend((c.size, c.size, self.L + 1))
        self.shape = tuple(shape)
        count = math.prod(self.shape)
        if count > max_states:
            raise ModelValidationError(
                f"state space has {count} states, above the budget of {max_states}; "
                "reduce L or the number of sensors"
            )
        self.state_count = count

        acts = [a for a in itertools.product(self.power_levels, repeat=self.N) if sum(a) <= self.b_max]
        self.actions = np.array(acts, dtype=np.int64).reshape(len(acts), self.N)
        self.action_index = {a: k for k, a in enumerate(acts)}
        self.action_sum = self.actions.sum(axis=1)
        self.n_actions = len(acts)
        # feasible_by_b[b, k] <=> action k allowed at battery level b
        self.feasible_by_b = self.action_sum[None, :] <= np.arange(self.b_max + 1)[:, None]

        self.steady: List[SteadyState] = [steady_state(s, L=self.L) for s in cfg.systems]
        self.traces = np.array([st.trace_table for st in self.steady])  # (N, L+2)
        self.lam = [
            link_arrival_table(cfg.links[i], self.chains[i].values, self.power_levels)
            for i in range(self.N)
        ]
        e_floor = np.floor(cfg.energy_chain.values).astype(np.int64)
        # next battery level indexed [b, e, k] (clipped at 0 for infeasible pairs)
        b = np.arange(self.b_max + 1)[:, None, None]
        nb = b - self.action_sum[None, None, :] + e_floor[None, :, None]
        self.next_battery = np.clip(np.minimum(nb, self.b_max), 0, self.b_max)

        self._state_b = None
        self._feasible = None
        self._reward = None

    # ----------------------------------------------------------------- indexing
    def index(self, s) -> int:
        t = s.to_tuple() if isinstance(s, MdpState) else tuple(s)
        return int(np.ravel_multi_index(t, self.shape))

    def state(self, idx) -> MdpState:
        return MdpState.from_tuple(np.unravel_index(int(idx), self.shape))

    def index_grid(self):
        """Tensor of state indices, shaped like the state space."""
        return np.arange(self.state_count).reshape(self.shape)

    def reference_state(self) -> MdpState:
        n = self.N
        return MdpState(self.b_max, 0, (0,) * n, (0,) * n, (0,) * n)

    @property
    def state_b(self):
        if self._state_b is None:
            self._state_b = np.broadcast_to(
                np.arange(self.b_max + 1).reshape((-1,) + (1,) * (len(self.shape) - 1)), self.shape
            ).reshape(-1).copy()
        return self._state_b

    @property
    def feasible(self):
        """Boolean ``(state_count, n_actions)`` feasibility mask."""
        if self._feasible is None:
            self._feasible = self.feasible_by_b[self.state_b]
        return self._feasible

    # ------------------------------------------------------------------ actions
    def feasible_actions(self, s) -> List[Tuple[int, ...]]:
        b = s.b if isinstance(s, MdpState) else int(s)
        return [tuple(int(x) for x in self.actions[k]) for k in np.flatnonzero(self.feasible_by_b[b])]

    def feasible_action_ids(self, b) -> np.ndarray:
        return np.flatnonzero(self.feasible_by_b[b])

    def action_id(self, a) -> int:
        return self.action_index[tuple(int(x) for x in a)]

    # ------------------------------------------------------------------- reward
    def arrival(self, i, h, g, p) -> float:
        return float(self.lam[i][h, g, self.power_levels.index(p)])

    def reward(self, s: MdpState, a: Sequence[int]) -> float:
        """Expected one-stage reward, evaluated directly from the definition."""
        if sum(a) > s.b:
            raise ValueError(f"action {tuple(a)} infeasible at battery level {s.b}")
        r = 0.0
        for i in range(self.N):
            lam = self.arrival(i, s.h[i], s.g[i], a[i])
            tr = self.traces[i]
            r += lam * tr[0] + (1.0 - lam) * tr[min(s.tau[i] + 1, self.L + 1)]
        return r

    @property
    def reward_table(self):
        """``(state_count, n_actions)`` rewards; ``nan`` at infeasible pairs."""
        if self._reward is None:
            self._reward = self._build_reward_table()
        return self._reward

    def _build_reward_table(self):
        nd = len(self.shape)
        R = np.zeros(self.shape + (self.n_actions,))
        for i in range(self.N):
            ax_h, ax_g, ax_t = 2 + 3 * i, 3 + 3 * i, 4 + 3 * i
            lam = self.lam[i][:, :, self.actions[:, i]]  # (l, l, A)
            lam_shape = [1] * nd + [self.n_actions]
            lam_shape[ax_h] = lam.shape[0]
            lam_shape[ax_g] = lam.shape[1]
            lam = lam.reshape(lam_shape)
            tr = self.traces[i]
            tr_shape = [1] * (nd + 1)
            tr_shape[ax_t] = self.L + 1
            tr_next = tr[1 : self.L + 2].reshape(tr_shape)
            R += lam * tr[0] + (1.0 - lam) * tr_next
        R = R.reshape(self.state_count, self.n_actions)
        R[~self.feasible] = np.nan
        return R

    # --------------------------------------------------------------- transitions
    def transition_successors(self, s: MdpState, a: Sequence[int]) -> List[Tuple[MdpState, float]]:
        """Enumerate next states with their probabilities.

        Battery is deterministic given the current energy value; the energy
        and channel chains and the packet outcome of each sensor are
        independent. Zero-probability outcomes are omitted.
        """
        a = tuple(int(x) for x in a)
        if sum(a) > s.b:
            raise ValueError(f"action {a} infeasible at battery level {s.b}")
        cfg = self.config
        E = cfg.energy_chain.values[s.e]
        b_next = min(s.b - sum(a) + int(math.floor(E)), self.b_max)
        per_sensor = []
        for i in range(self.N):
            chain = self.chains[i]
            lam = self.arrival(i, s.h[i], s.g[i], a[i])
            outcomes = []
            for h2 in range(chain.size):
                ph = chain.P[s.h[i], h2]
                if ph == 0.0:
                    continue
                for g2 in range(chain.size):
                    pg = chain.P[s.g[i], g2]
                    if pg == 0.0:
                        continue
                    if lam > 0.0:
                        outcomes.append((h2, g2, 0, ph * pg * lam))
                    if lam < 1.0:
                        outcomes.append((h2, g2, min(s.tau[i] + 1, self.L), ph * pg * (1.0 - lam)))
            per_sensor.append(outcomes)
        out = []
        for e2 in range(self.n_energy):
            pe = cfg.energy_chain.P[s.e, e2]
            if pe == 0.0:
                continue
            for combo in itertools.product(*per_sensor):
                p = pe
                for o in combo:
                    p *= o[3]
                if p == 0.0:
                    continue
                nxt = MdpState(
                    b_next,
                    e2,
                    tuple(o[0] for o in combo),
                    tuple(o[1] for o in combo),
                    tuple(o[2] for o in combo),
                )
                out.append((nxt, p))
        return out

    def expected_next(self, V) -> np.ndarray:
        """``E[V(s') | s, a]`` for every state and action, shape ``(S, A)``.

        Entries at infeasible pairs are meaningless (computed with a clipped
        battery index) and must be masked by the caller.
        """
        nd = len(self.shape)
        T = np.asarray(V, dtype=float).reshape(self.shape)
        # Average over next energy state: U[b', e, ...] = sum_e' P[e, e'] V[b', e', ...]
        U = np.moveaxis(np.tensordot(self.config.energy_chain.P, T, axes=([1], [1])), 0, 1)
        for i in range(self.N):
            P = self.chains[i].P
            for ax in (2 + 3 * i, 3 + 3 * i):
                U = np.moveaxis(np.tensordot(P, U, axes=([1], [ax])), 0, ax)
        shift = np.minimum(np.arange(self.L + 1) + 1, self.L)
        out = np.empty(self.shape + (self.n_actions,))
        e_idx = np.arange(self.n_energy)[None, :]
        for k in range(self.n_actions):
            Y = U
            for i in range(self.N):
                ax_h, ax_g, ax_t = 2 + 3 * i, 3 + 3 * i, 4 + 3 * i
                lam = self.lam[i][:, :, self.actions[k, i]]
                lam_shape = [1] * nd
                lam_shape[ax_h], lam_shape[ax_g] = lam.shape
                lam = lam.reshape(lam_shape)
                Y0 = np.take(Y, [0], axis=ax_t)
                Y1 = np.take(Y, shift, axis=ax_t)
                Y = lam * Y0 + (1.0 - lam) * Y1
            nb = self.next_battery[:, :, k]  # (B, E)
            out[..., k] = Y[nb, e_idx]
        return out.reshape(self.state_count, self.n_actions)

    def q_values(self, V) -> np.ndarray:
        """``r + E[V(s')]`` with ``-inf`` at infeasible pairs."""
        Q = self.reward_table + self.expected_next(V)
        Q[~self.feasible] = -np.inf
        return Q

    def dense_kernel(self) -> np.ndarray:
        """Dense ``(S, A, S)`` kernel from explicit enumeration; small models only."""
        if self.state_count * self.n_actions * self.state_count > 50_000_000:
            raise ModelValidationError("model too large for a dense kernel")
        K = np.zeros((self.state_count, self.n_actions, self.state_count))
        for sidx in range(self.state_count):
            s = self.state(sidx)
            for k in self.feasible_action_ids(s.b):
                for nxt, p in self.transition_successors(s, self.actions[k]):
                    K[sidx, k, self.index(nxt)] += p
        return K

    # ---------------------------------------------------------------- structure
    def tau_pairs(self, i):
        """Index arrays ``(minus, plus)`` of states differing only by ``tau_i -> tau_i + 1``."""
        grid = self.index_grid()
        ax = tau_axis(i)
        minus = np.take(grid, np.arange(self.L), axis=ax).reshape(-1)
        plus = np.take(grid, np.arange(1, self.L + 1), axis=ax).reshape(-1)
        return minus, plus

    def power_pairs(self, i):
        """Action-id pairs ``(k_minus, k_plus)`` differing by one power level in coordinate ``i``."""
        pairs = []
        for k, a in enumerate(self.actions):
            up = a.copy()
            up[i] += 1
            kp = self.action_index.get(tuple(int(x) for x in up))
            if kp is not None:
                pairs.append((k, kp))
        return pairs


@dataclass
class AssumptionResult:
    sensor: int
    kappa: float
    holds: bool
    min_expected_rate: float
    a_norm: float
    p_worst: float


def check_assumption1(model: MdpModel, literal_bmax: bool = False) -> List[AssumptionResult]:
    """Check the worst-case arrival-rate condition for every sensor.

    For each sensor, the infimum over previous channel pairs of the expected
    arrival rate under maximal jamming must be at least ``1 - kappa/||A||^2``
    for some ``kappa`` in ``[0, 1)``. The worst-case power is
    ``min(floor(p_max), b_max)``, or ``b_max`` when ``literal_bmax`` is set.
    """
    cfg = model.config
    bat = cfg.battery
    p_worst = float(bat.b_max) if literal_bmax else float(min(bat.max_power, bat.b_max))
    results = []
    for i, sys in enumerate(cfg.systems):
        chain = model.chains[i]
        link = cfg.links[i]
        vals = chain.values
        H = vals[:, None]
        G = vals[None, :]
        s_min = H / (link.jam_gain * p_worst * G + link.sigma2)
        f = np.asarray(link.modulation(s_min), dtype=float)  # f[H_k, G_k]
        # expected[h0, g0] = sum_{h, g} P[h0, h] P[g0, g] f[h, g]
        expected = chain.P @ f @ chain.P.T
        m = float(expected.min())
        a2 = sys.a_norm ** 2
        kappa = max(0.0, (1.0 - m) * a2)
        results.append(AssumptionResult(i, kappa, kappa < 1.0, m, math.sqrt(a2), p_worst))
    return results
