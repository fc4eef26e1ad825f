import itertools
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from harvestjam.channels import BatteryModel, LinkModel, MarkovChain, QamModulation
from harvestjam.errors import ModelValidationError
from harvestjam.mdp import MdpModel, MdpState, ProblemConfig, check_assumption1

from _oracles import (SEC6_A1, SEC6_A2, SEC6_CHANNEL_P, SEC6_GAINS, TOY_SUITE, constant_rate,
                      kappa_bruteforce, scalar_system, toy_model, toy_problem)

GOLDEN = (math.sqrt(5.0) - 1.0) / 2.0


def test_sec6_state_count(sec6_model):
    assert sec6_model.state_count == 4 * 3 * (4 * 21) ** 2 == 84_672
    assert sec6_model.n_actions == 4


def test_state_count_matches_enumeration():
    m = toy_model(**TOY_SUITE["n1_fading"])
    ranges = [range(n) for n in m.shape]
    assert sum(1 for _ in itertools.product(*ranges)) == m.state_count


def test_minimal_state_space():
    m = toy_model(N=1, L=1, b_max=0, energy=(0,))
    assert m.state_count == 2


def test_index_round_trip():
    m = toy_model(**TOY_SUITE["n2_basic"])
    for i in range(m.state_count):
        assert m.index(m.state(i)) == i
        assert m.index(m.state(i).to_tuple()) == i


def test_index_outside_space():
    m = toy_model()
    with pytest.raises(ValueError):
        m.index(MdpState(5, 0, (0,), (0,), (0,)))


def test_feasible_action_sets():
    m = toy_model(N=2, L=1, b_max=2)
    assert m.feasible_actions(0) == [(0, 0)]
    assert set(m.feasible_actions(1)) == {(0, 0), (0, 1), (1, 0)}
    assert set(m.feasible_actions(2)) == {(0, 0), (0, 1), (1, 0), (1, 1)}
    # lexicographic action order
    assert [tuple(a) for a in m.actions] == [(0, 0), (0, 1), (1, 0), (1, 1)]


def test_reward_with_certain_delivery():
    m = toy_model(N=2, L=2, b_max=1, modulation=constant_rate(1.0))
    expected = sum(st_.trace(0) for st_ in m.steady)
    for idx in range(m.state_count):
        s = m.state(idx)
        for a in m.feasible_actions(s):
            assert m.reward(s, a) == pytest.approx(expected, rel=1e-14)


def test_reward_with_certain_loss_scalar():
    cfg = ProblemConfig([scalar_system(1.0)], MarkovChain.constant(1.0), MarkovChain.constant(0.0),
                        [LinkModel(1.0, constant_rate(0.0))], BatteryModel(0, 0), 3)
    m = MdpModel(cfg)
    s = MdpState(0, 0, (0,), (0,), (0,))
    assert m.reward(s, (0,)) == pytest.approx(GOLDEN + 1.0, abs=1e-10)
    s3 = s.replace(tau=(3,))
    assert m.reward(s3, (0,)) == pytest.approx(GOLDEN + 4.0, abs=1e-10)


def test_sec6_reward_oracle(sec6_model):
    # lambda = 1 - Q(sqrt(0.5 * 0.5)) at SINR 0.02/0.04 with no jamming;
    # traces of P_bar and h(P_bar) from scipy's DARE solution
    s = MdpState(3, 0, (0, 0), (0, 0), (0, 0))
    assert sec6_model.reward(s, (0, 0)) == pytest.approx(24.99250623369529, abs=1e-8)


def test_reward_table_matches_definition(sec6_model):
    rng = np.random.default_rng(3)
    R = sec6_model.reward_table
    for idx in rng.integers(0, sec6_model.state_count, 300):
        s = sec6_model.state(idx)
        for k in sec6_model.feasible_action_ids(s.b):
            assert R[idx, k] == pytest.approx(sec6_model.reward(s, sec6_model.actions[k]), rel=1e-13)
    assert np.all(np.isnan(R[~sec6_model.feasible]))


def test_reward_rejects_infeasible_action():
    m = toy_model()
    with pytest.raises(ValueError):
        m.reward(MdpState(0, 0, (0,), (0,), (0,)), (1,))


@pytest.mark.parametrize("name", sorted(TOY_SUITE))
def test_kernel_rows_sum_to_one(name):
    m = toy_model(**TOY_SUITE[name])
    K = m.dense_kernel()
    sums = K.sum(axis=2)
    np.testing.assert_allclose(sums[m.feasible], 1.0, atol=1e-10)
    assert np.all(sums[~m.feasible] == 0)


def test_sec6_kernel_rows_sum_to_one(sec6_model):
    # expected_next of the all-ones vector is the row sum of every feasible pair
    ones = sec6_model.expected_next(np.ones(sec6_model.state_count))
    assert np.max(np.abs(ones[sec6_model.feasible] - 1.0)) < 1e-10


def test_sec6_kernel_rows_enumerated_on_sample(sec6_model):
    rng = np.random.default_rng(11)
    for idx in rng.integers(0, sec6_model.state_count, 200):
        s = sec6_model.state(idx)
        for a in sec6_model.feasible_actions(s):
            total = sum(p for _, p in sec6_model.transition_successors(s, a))
            assert abs(total - 1.0) < 1e-10


@pytest.mark.parametrize("name", sorted(TOY_SUITE))
def test_tensor_operator_matches_dense_kernel(name):
    m = toy_model(**TOY_SUITE[name])
    K = m.dense_kernel()
    v = np.random.default_rng(0).normal(size=m.state_count)
    np.testing.assert_allclose(m.expected_next(v)[m.feasible], (K @ v)[m.feasible], atol=1e-12)


def test_certain_delivery_resets_holding_times():
    m = toy_model(N=2, L=2, b_max=1, modulation=constant_rate(1.0))
    for idx in range(m.state_count):
        s = m.state(idx)
        for a in m.feasible_actions(s):
            assert all(nxt.tau == (0, 0) for nxt, _ in m.transition_successors(s, a))


def _hand_kernel(lam_by_p, E, b_max, L):
    """Single sensor, single channel and energy state: states (b, tau)."""
    states = [(b, t) for b in range(b_max + 1) for t in range(L + 1)]
    pos = {s: i for i, s in enumerate(states)}
    n_p = len(lam_by_p)
    K = np.zeros((len(states), n_p, len(states)))
    for (b, t), i in pos.items():
        for p in range(min(b, n_p - 1) + 1):
            nb = min(b - p + E, b_max)
            lam = lam_by_p[p]
            K[i, p, pos[(nb, 0)]] += lam
            K[i, p, pos[(nb, min(t + 1, L))]] += 1 - lam
    return K


def test_kernel_matches_hand_enumeration():
    m = toy_model(N=1, L=2, b_max=1)
    link = m.config.links[0]
    lam = [float(link.modulation(0.5 / (p * 0.5 + 0.1))) for p in (0, 1)]
    np.testing.assert_allclose(m.dense_kernel(), _hand_kernel(lam, 1, 1, 2), atol=1e-15)


def test_assumption_always_delivered():
    m = toy_model(modulation=constant_rate(1.0))
    (res,) = check_assumption1(m)
    assert res.kappa == 0.0 and res.holds


def test_assumption_boundary_fails():
    # ||A|| = 2 and f = 1 - 1/4 everywhere puts kappa exactly at 1
    m = toy_model(a=2.0, modulation=constant_rate(0.75))
    (res,) = check_assumption1(m)
    assert res.kappa == pytest.approx(1.0, abs=1e-12)
    assert not res.holds


def test_sec6_assumption_oracle(sec6_model):
    res = check_assumption1(sec6_model)
    for r, A, frozen in zip(res, (SEC6_A1, SEC6_A2), (0.787162374479729, 0.6471775189365017)):
        kappa, _ = kappa_bruteforce(A, SEC6_GAINS, SEC6_CHANNEL_P, 0.04, 5.0, 0.5)
        assert r.kappa == pytest.approx(kappa, abs=1e-10)
        assert r.kappa == pytest.approx(frozen, abs=1e-10)
        assert r.holds and r.p_worst == 1.0
    literal = check_assumption1(sec6_model, literal_bmax=True)
    assert all(r.p_worst == 3.0 and r.kappa >= s.kappa for r, s in zip(literal, res))


def test_state_budget():
    with pytest.raises(ModelValidationError):
        MdpModel(toy_problem(N=2, L=20, b_max=3), max_states=100)


@st.composite
def small_problems(draw):
    N = draw(st.integers(1, 2))
    n_ch = draw(st.integers(1, 2))
    gains = draw(st.lists(st.floats(0.05, 2.0), min_size=n_ch, max_size=n_ch))
    row = lambda n: (lambda w: list(np.array(w) / np.sum(w)))(
        draw(st.lists(st.floats(0.05, 1.0), min_size=n, max_size=n)))
    chP = [row(n_ch) for _ in range(n_ch)]
    n_e = draw(st.integers(1, 2))
    energy = draw(st.lists(st.integers(0, 2), min_size=n_e, max_size=n_e))
    eP = [row(n_e) for _ in range(n_e)]
    return dict(N=N, L=draw(st.integers(1, 2)), b_max=draw(st.integers(0, 2)), gains=gains,
                channel_P=chP, energy=energy, energy_P=eP, sigma2=draw(st.floats(0.02, 1.0)),
                jam_gain=draw(st.floats(0.0, 5.0)))


@settings(max_examples=25, deadline=None)
@given(kw=small_problems())
def test_random_kernels_are_stochastic_and_consistent(kw):
    m = toy_model(**kw)
    K = m.dense_kernel()
    np.testing.assert_allclose(K.sum(axis=2)[m.feasible], 1.0, atol=1e-10)
    v = np.linspace(-1, 1, m.state_count)
    np.testing.assert_allclose(m.expected_next(v)[m.feasible], (K @ v)[m.feasible], atol=1e-12)
    idx = np.arange(m.state_count)
    assert all(m.index(m.state(i)) == i for i in idx)
