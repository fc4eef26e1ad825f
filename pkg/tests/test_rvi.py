import numpy as np
import pytest

from harvestjam import config
from harvestjam.errors import ConvergenceError, ModelValidationError
from harvestjam.mdp import MdpModel, MdpState
from harvestjam.rvi import (ValueTable, bellman_residual, extract_policy, q_from_v, rvi_solve,
                            verify_structure)

from _oracles import TOY_SUITE, bias_of_policy, enumerate_best_gain, toy_model


def test_degenerate_single_state():
    m = MdpModel(config.preset("degenerate").problem)
    res = rvi_solve(m)
    r = m.reward(m.reference_state(), (0,))
    assert res.j_star == r
    assert np.all(res.values.v == 0.0)
    Q = q_from_v(m, res.values)
    assert np.all(Q[:, 0] == 0.0)
    rep = verify_structure(m, res.values.v, res.policy, Q)
    assert rep.all_ok and not rep.counterexamples


@pytest.mark.parametrize("name", sorted(TOY_SUITE))
def test_gain_matches_policy_enumeration(name):
    m = toy_model(**TOY_SUITE[name])
    assert m.state_count <= 200
    res = rvi_solve(m)
    best, best_ids, K, R = enumerate_best_gain(m)
    assert res.j_star == pytest.approx(best, abs=1e-8)
    # the solver's own policy is optimal too
    S = m.state_count
    from _oracles import policy_gain
    assert policy_gain(m, K, R, res.policy.action_ids) == pytest.approx(best, abs=1e-8)
    assert np.all(m.feasible[np.arange(S), res.policy.action_ids])


def test_relative_values_match_oracle():
    m = toy_model(**TOY_SUITE["n1_basic"])
    res = rvi_solve(m)
    _, ids, K, R = enumerate_best_gain(m)
    v, g = bias_of_policy(K, R, ids, res.values.ref_index)
    np.testing.assert_allclose(res.values.v, v, atol=1e-7)
    Q = q_from_v(m, res.values)
    np.testing.assert_allclose(Q.max(axis=1), res.values.v, atol=1e-9)


def test_bellman_residual_small():
    m = toy_model(**TOY_SUITE["n2_basic"])
    res = rvi_solve(m)
    assert bellman_residual(m, res.values) < 1e-8


def test_zero_values_give_myopic_policy():
    m = toy_model(**TOY_SUITE["n2_jammed"])
    vt = ValueTable(np.zeros(m.state_count), 0.0, 0)
    pol = extract_policy(m, vt)
    R = np.where(m.feasible, m.reward_table, -np.inf)
    np.testing.assert_array_equal(pol.action_ids, np.argmax(R, axis=1))


def test_empty_battery_means_no_jamming(sec6_model, sec6_solution):
    b0 = sec6_model.state_b == 0
    assert np.all(sec6_solution.policy.action_ids[b0] == 0)


def test_sec6_structure(sec6_model, sec6_solution):
    Q = q_from_v(sec6_model, sec6_solution.values)
    rep = verify_structure(sec6_model, sec6_solution.values.v, sec6_solution.policy, Q)
    assert rep.monotone_V and rep.monotone_Q and rep.superadditive_Q and rep.monotone_policy
    assert rep.counterexamples == []


def test_corrupted_values_are_caught():
    m = toy_model(**TOY_SUITE["n1_long"])
    res = rvi_solve(m)
    v = res.values.v.copy()
    lo = m.index(MdpState(1, 0, (0,), (0,), (1,)))
    hi = m.index(MdpState(1, 0, (0,), (0,), (2,)))
    v[lo], v[hi] = v[hi], v[lo]
    rep = verify_structure(m, v, res.policy, q_from_v(m, res.values))
    assert not rep.monotone_V
    assert any(c["kind"] == "monotone_V" and c["minus"] == lo and c["plus"] == hi
               for c in rep.counterexamples)


@pytest.mark.parametrize("name", sorted(TOY_SUITE))
def test_pruning_changes_nothing_on_toys(name):
    m = toy_model(**TOY_SUITE[name])
    a = rvi_solve(m)
    b = rvi_solve(m, pruned=True)
    assert a.j_star == b.j_star
    np.testing.assert_array_equal(a.policy.action_ids, b.policy.action_ids)


def test_pruning_skips_work(sec6_model):
    res = rvi_solve(sec6_model, pruned=True, span_tol=1e-3)
    assert 0.0 < res.pruned_fraction < 1.0


def test_sweep_budget():
    m = toy_model(**TOY_SUITE["n1_long"])
    with pytest.raises(ConvergenceError) as info:
        rvi_solve(m, max_sweeps=2)
    assert info.value.iterations == 2


def test_reference_state_outside_space():
    m = toy_model()
    with pytest.raises(ModelValidationError):
        rvi_solve(m, phi_f=MdpState(9, 0, (0,), (0,), (0,)))


def test_reference_state_choice_does_not_change_gain():
    m = toy_model(**TOY_SUITE["n1_fading"])
    a = rvi_solve(m)
    b = rvi_solve(m, phi_f=m.state(m.state_count - 1))
    assert a.j_star == pytest.approx(b.j_star, abs=1e-9)
    np.testing.assert_array_equal(a.policy.action_ids, b.policy.action_ids)


def test_span_sequence_decreases_eventually():
    m = toy_model(**TOY_SUITE["n2_basic"])
    res = rvi_solve(m)
    spans = [r.span for r in res.sweeps]
    assert spans[-1] < 1e-9
    assert spans[-1] < spans[len(spans) // 2]
