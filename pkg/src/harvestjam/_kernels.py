"""Compiled inner loops for rollouts and Q-learning.

These mirror the pure-Python environment and learner step for step and
consume uniform draws in the same fixed layout, one row per step::

    [u_policy_0, u_policy_1, u_energy, (u_gamma, u_H, u_G) per sensor]

so that a Python run and a compiled run from the same generator agree
exactly.
"""

import numpy as np
from numba import njit

POLICY_TABLE = 0
POLICY_RANDOM = 1

# status codes
OK = 0
TRACE_OVERFLOW = 1
NON_FINITE = 2
INFEASIBLE = 3


@njit(cache=True)
def state_index(st, strides, N, L):
    idx = st[0] * strides[0] + st[1] * strides[1]
    for i in range(N):
        tau = st[4 + 3 * i]
        if tau > L:
            tau = L
        idx += st[2 + 3 * i] * strides[2 + 3 * i] + st[3 + 3 * i] * strides[3 + 3 * i] + tau * strides[4 + 3 * i]
    return idx


@njit(cache=True)
def _cdf_draw(cdf_row, n, u):
    for j in range(n):
        if u < cdf_row[j]:
            return j
    return n - 1


@njit(cache=True)
def env_step(st, k, u, off, N, b_max, actions, action_sum, lam, traces,
             energy_cdf, energy_floor, chan_cdf, chan_size):
    """Advance ``st`` in place under action id ``k``.

    Returns ``(expected_reward, realized_trace, status)``.
    """
    n_tr = traces.shape[1]
    b = st[0]
    e = st[1]
    expected = 0.0
    realized = 0.0
    status = OK
    # check before mutating anything so the caller can extend and resume
    for i in range(N):
        if st[4 + 3 * i] + 1 >= n_tr:
            return 0.0, 0.0, TRACE_OVERFLOW
    for i in range(N):
        h = st[2 + 3 * i]
        g = st[3 + 3 * i]
        tau = st[4 + 3 * i]
        la = lam[i, h, g, actions[k, i]]
        expected += la * traces[i, 0] + (1.0 - la) * traces[i, tau + 1]
        if u[off + 1 + 3 * i] < la:
            new_tau = 0
        else:
            new_tau = tau + 1
        ns = chan_size[i]
        st[2 + 3 * i] = _cdf_draw(chan_cdf[i, h], ns, u[off + 2 + 3 * i])
        st[3 + 3 * i] = _cdf_draw(chan_cdf[i, g], ns, u[off + 3 + 3 * i])
        st[4 + 3 * i] = new_tau
        realized += traces[i, new_tau]
    st[1] = _cdf_draw(energy_cdf[e], energy_cdf.shape[0], u[off])
    nb = b - action_sum[k] + energy_floor[e]
    if nb > b_max:
        nb = b_max
    st[0] = nb
    return expected, realized, status


@njit(cache=True, nogil=True)
def rollout_chunk(st, U, mode, policy_ids, feas_ids, n_feas, strides, N, L, b_max,
                  actions, action_sum, lam, traces, energy_cdf, energy_floor,
                  chan_cdf, chan_size, rec_state, rec_action, rec_real, out):
    """Run ``U.shape[0]`` steps; ``out`` receives [sum_realized, sum_expected, bad_battery].

    When ``rec_state`` has length > 0 the visited state index, action id and
    realized trace of every step are recorded.
    """
    record = rec_state.shape[0] > 0
    for t in range(U.shape[0]):
        s = state_index(st, strides, N, L)
        b = st[0]
        if mode == POLICY_RANDOM:
            n = n_feas[b]
            j = int(U[t, 1] * n)
            if j >= n:
                j = n - 1
            k = feas_ids[b, j]
        else:
            k = policy_ids[s]
        if action_sum[k] > b:
            return t, INFEASIBLE
        exp_r, real_r, status = env_step(st, k, U[t], 2, N, b_max, actions, action_sum, lam,
                                         traces, energy_cdf, energy_floor, chan_cdf, chan_size)
        if status != OK:
            return t, status
        if st[0] < 0 or st[0] > b_max:
            out[2] += 1.0
        out[0] += real_r
        out[1] += exp_r
        if record:
            rec_state[t] = s
            rec_action[t] = k
            rec_real[t] = real_r
    return U.shape[0], OK


@njit(cache=True)
def _greedy_row(Q, s, b, feas_ids, n_feas):
    best_k = feas_ids[b, 0]
    best = Q[s, best_k]
    for j in range(1, n_feas[b]):
        k = feas_ids[b, j]
        if Q[s, k] > best:
            best = Q[s, k]
            best_k = k
    return best_k, best


@njit(cache=True)
def _row_value(j, row_ptr, row_pair, row_coef, Qflat):
    v = 0.0
    for p in range(row_ptr[j], row_ptr[j + 1]):
        v += row_coef[p] * Qflat[row_pair[p]]
    return v


@njit(cache=True)
def _dual_write(j, xi, tq, nu, row_clock, row_visits, dual_scale, step_c, step_k0, step_B,
                projection):
    """``nu_j <- max(0, nu_j - zeta * (T Q)_j)``; returns False if the result is not finite."""
    if row_clock:
        row_visits[j] += 1
        zeta = dual_scale * (step_c / (np.ceil(row_visits[j] / step_B) + step_k0))
    else:
        zeta = dual_scale * xi
    v = nu[j] - zeta * tq
    if projection and v < 0.0:
        v = 0.0
    nu[j] = v
    return np.isfinite(v)


@njit(cache=True, nogil=True)
def train_chunk(st, U, Q, R, visits, feas_ids, n_feas, strides, N, L, b_max,
                actions, action_sum, lam, traces, energy_cdf, energy_floor, chan_cdf, chan_size,
                ref_pair, eps, step_c, step_k0, step_B, visit_clock, step0,
                structural, dual_enabled, row_ptr, row_pair, row_coef,
                inc_ptr, inc_row, inc_coef, nu, rr, batch, full_dual, projection, stamp, acc,
                dual_scale, row_clock, row_visits):
    """Run ``U.shape[0]`` learning steps in place.

    ``acc`` holds [reward_sum, nu_writes]; ``rr`` holds the round-robin
    cursor. The dual step size is ``dual_scale`` times the primal one, or,
    with ``row_clock``, ``dual_scale`` times the schedule evaluated at the
    row's own update count. Returns ``(steps_done, status)``.
    """
    A = Q.shape[1]
    Qflat = Q.reshape(-1)
    n_rows = row_ptr.shape[0] - 1
    for t in range(U.shape[0]):
        s = state_index(st, strides, N, L)
        b = st[0]
        if U[t, 0] < eps:
            n = n_feas[b]
            j = int(U[t, 1] * n)
            if j >= n:
                j = n - 1
            k = feas_ids[b, j]
        else:
            k, _ = _greedy_row(Q, s, b, feas_ids, n_feas)
        r = R[s, k]
        _, _, status = env_step(st, k, U[t], 2, N, b_max, actions, action_sum, lam, traces,
                                energy_cdf, energy_floor, chan_cdf, chan_size)
        if status != OK:
            return t, status
        s2 = state_index(st, strides, N, L)
        _, vmax = _greedy_row(Q, s2, st[0], feas_ids, n_feas)
        visits[s, k] += 1
        if visit_clock:
            clock = visits[s, k]
        else:
            clock = step0 + t + 1
        xi = step_c / (np.ceil(clock / step_B) + step_k0)
        pair = s * A + k
        delta = r + vmax - Qflat[pair] - Qflat[ref_pair]
        if structural:
            corr = 0.0
            for p in range(inc_ptr[pair], inc_ptr[pair + 1]):
                corr += inc_coef[p] * nu[inc_row[p]]
            if dual_enabled:
                if full_dual:
                    # evaluate every row at Q_k before touching nu
                    tq = np.empty(n_rows)
                    for j in range(n_rows):
                        tq[j] = _row_value(j, row_ptr, row_pair, row_coef, Qflat)
                    for j in range(n_rows):
                        if not _dual_write(j, xi, tq[j], nu, row_clock, row_visits, dual_scale,
                                           step_c, step_k0, step_B, projection):
                            return t, NON_FINITE
                    acc[1] += n_rows
                else:
                    tag = step0 + t + 1
                    for p in range(inc_ptr[pair], inc_ptr[pair + 1]):
                        j = inc_row[p]
                        if stamp[j] == tag:
                            continue
                        stamp[j] = tag
                        acc[1] += 1
                        if not _dual_write(j, xi, _row_value(j, row_ptr, row_pair, row_coef, Qflat),
                                           nu, row_clock, row_visits, dual_scale,
                                           step_c, step_k0, step_B, projection):
                            return t, NON_FINITE
                    m = batch if batch < n_rows else n_rows
                    for _ in range(m):
                        j = rr[0]
                        rr[0] = (rr[0] + 1) % n_rows
                        if stamp[j] == tag:
                            continue
                        stamp[j] = tag
                        acc[1] += 1
                        if not _dual_write(j, xi, _row_value(j, row_ptr, row_pair, row_coef, Qflat),
                                           nu, row_clock, row_visits, dual_scale,
                                           step_c, step_k0, step_B, projection):
                            return t, NON_FINITE
            Qflat[pair] += xi * (delta + corr)
        else:
            Qflat[pair] += xi * delta
        if not np.isfinite(Qflat[pair]):
            return t, NON_FINITE
        acc[0] += r
    return U.shape[0], OK
