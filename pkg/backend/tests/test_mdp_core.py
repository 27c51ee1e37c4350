# backend/tests/test_mdp_core.py
import itertools

import numpy as np
import pytest
from numpy.testing import assert_allclose

from ope_pipeline.errors import AssumptionViolationError, InputError
from ope_pipeline.mdp_model.environments import MORTALITY
from ope_pipeline.mdp_model.mdp_core import (
    FiniteMdp,
    Policy,
    argmax_lowest,
    exact_average_visitation,
    exact_policy_value,
    exact_value_function,
    importance_ratios,
    marginal_ratio,
    optimal_policy,
    policy_transition,
    q_iteration_policy,
    reward_under_policy,
    stationarity_residual,
)


def _one_state(reward: float = 1.0, gamma: float = 0.7) -> FiniteMdp:
    return FiniteMdp(np.ones((1, 1, 1)), [[reward]], gamma, [1.0])


def _two_cycle(gamma: float = 0.5) -> FiniteMdp:
    P = np.zeros((2, 1, 2))
    P[0, 0, 1] = 1.0
    P[1, 0, 0] = 1.0
    return FiniteMdp(P, [[1.0], [0.0]], gamma, [1.0, 0.0])


# -------------------------------------------------------------------
# Validation
# -------------------------------------------------------------------
def test_mdp_rejects_bad_rows_rewards_and_discount():
    P = np.full((2, 1, 2), 0.5)
    with pytest.raises(InputError):
        FiniteMdp(P * 1.1, [[0.0], [0.0]], 0.9, [0.5, 0.5])
    with pytest.raises(InputError):
        FiniteMdp(P, [[-1.0], [0.0]], 0.9, [0.5, 0.5])
    with pytest.raises(InputError):
        FiniteMdp(P, [[0.0], [0.0]], 1.0, [0.5, 0.5])
    with pytest.raises(InputError):
        FiniteMdp(P, [[0.0], [0.0]], 0.9, [0.6, 0.6])


def test_policy_validation_and_deterministic_flag():
    with pytest.raises(InputError):
        Policy(np.array([[0.5, 0.6]]))
    with pytest.raises(InputError):
        Policy(np.array([[0.5, 0.5]]), deterministic=True)
    assert Policy(np.array([[0.0, 1.0]])).deterministic
    assert not Policy.uniform(3, 2).deterministic


def test_arrays_are_read_only(mrp):
    with pytest.raises(ValueError):
        mrp.transitions[0, 0, 0] = 1.0


def test_argmax_lowest_breaks_ties_low():
    q = np.array([[1.0, 1.0, 0.0], [0.0, 2.0, 2.0 + 1e-14]])
    assert argmax_lowest(q).tolist() == [0, 1]


# -------------------------------------------------------------------
# Visitation and value
# -------------------------------------------------------------------
def test_single_state_visitation_and_value():
    mdp = _one_state()
    pi = Policy.uniform(1, 1)
    assert_allclose(exact_average_visitation(mdp, pi), [1.0])
    assert exact_policy_value(mdp, pi) == pytest.approx(1.0, abs=1e-12)


def test_tiny_discount_concentrates_on_initial_state(make_random_mdp):
    rng = np.random.default_rng(3)
    base = make_random_mdp(rng, 4, 2)
    d0 = np.zeros(4)
    d0[2] = 1.0
    mdp = FiniteMdp(base.transitions, base.rewards, 1e-9, d0)
    assert_allclose(exact_average_visitation(mdp, Policy.uniform(4, 2)), d0, atol=1e-8)


def test_two_cycle_matches_truncated_sum():
    mdp = _two_cycle(0.5)
    pi = Policy.uniform(2, 1)
    P_pi = policy_transition(mdp, pi)
    d_t = mdp.initial_dist.copy()
    oracle = np.zeros(2)
    for t in range(61):
        oracle += (1 - mdp.discount) * mdp.discount ** t * d_t
        d_t = P_pi.T @ d_t
    assert_allclose(exact_average_visitation(mdp, pi), oracle, atol=1e-9)
    assert_allclose(exact_average_visitation(mdp, pi), [2 / 3, 1 / 3], atol=1e-12)


def test_zero_rewards_give_zero_value(mrp):
    mdp = FiniteMdp(mrp.transitions, np.zeros_like(mrp.rewards), mrp.discount, mrp.initial_dist)
    assert exact_policy_value(mdp, Policy.uniform(10, 2)) == 0.0


def test_value_matches_resolvent_form(make_random_mdp):
    rng = np.random.default_rng(11)
    for _ in range(20):
        mdp = make_random_mdp(rng, 5, 3, gamma=float(rng.uniform(0.5, 0.99)))
        probs = rng.random((5, 3))
        pi = Policy(probs / probs.sum(axis=1, keepdims=True))
        gamma = mdp.discount
        resolvent = np.linalg.solve(np.eye(5) - gamma * policy_transition(mdp, pi), reward_under_policy(mdp.rewards, pi))
        assert exact_policy_value(mdp, pi) == pytest.approx((1 - gamma) * mdp.initial_dist @ resolvent, abs=1e-10)
        assert_allclose(exact_value_function(mdp, pi), resolvent, atol=1e-10)
        d = exact_average_visitation(mdp, pi)
        assert d.sum() == pytest.approx(1.0, abs=1e-10)
        assert np.all(d >= -1e-15)


def test_policy_dimension_mismatch_is_input_error(mrp):
    with pytest.raises(InputError):
        exact_average_visitation(mrp, Policy.uniform(3, 2))


# -------------------------------------------------------------------
# Reference policies
# -------------------------------------------------------------------
def test_dominant_action_is_chosen(make_random_mdp):
    rng = np.random.default_rng(5)
    base = make_random_mdp(rng, 4, 2)
    P = base.transitions.copy()
    P[:, 1] = P[:, 0]
    R = np.zeros((4, 2))
    R[:, 1] = 1.0
    policy, j_star = optimal_policy(FiniteMdp(P, R, 0.9, base.initial_dist))
    assert policy.greedy_actions().tolist() == [1, 1, 1, 1]
    assert j_star == pytest.approx(1.0, abs=1e-10)


def test_identical_actions_tie_to_lowest_index(make_random_mdp):
    rng = np.random.default_rng(6)
    base = make_random_mdp(rng, 3, 3)
    P = np.repeat(base.transitions[:, :1], 3, axis=1)
    R = np.repeat(base.rewards[:, :1], 3, axis=1)
    policy, _ = optimal_policy(FiniteMdp(P, R, 0.9, base.initial_dist))
    assert policy.greedy_actions().tolist() == [0, 0, 0]
    assert policy.deterministic


def test_hmp_optimal_policy_beats_exhaustive_enumeration(hmp):
    policy, j_star = optimal_policy(hmp)
    best = max(
        exact_policy_value(hmp, Policy.from_actions(actions, hmp.n_actions))
        for actions in itertools.product(range(hmp.n_actions), repeat=hmp.n_states)
    )
    assert j_star == pytest.approx(best, abs=1e-9)
    assert policy.greedy_actions()[MORTALITY] == 0


def test_optimal_policy_dominates_random_policies(make_random_mdp):
    rng = np.random.default_rng(8)
    mdp = make_random_mdp(rng, 4, 3)
    _, j_star = optimal_policy(mdp)
    for _ in range(100):
        probs = rng.random((4, 3))
        pi = Policy(probs / probs.sum(axis=1, keepdims=True))
        assert exact_policy_value(mdp, pi) <= j_star + 1e-10


def test_q_iteration_policy_limits(mrp):
    assert_allclose(q_iteration_policy(mrp, 0, 1.0).probs, Policy.uniform(10, 2).probs)
    greedy = q_iteration_policy(mrp, 0, 0.0)
    assert greedy.deterministic
    assert greedy.greedy_actions().tolist() == [0] * 10
    with pytest.raises(InputError):
        q_iteration_policy(mrp, -1)
    with pytest.raises(InputError):
        q_iteration_policy(mrp, 1, 1.5)


def test_q_iteration_policy_matches_hand_sweeps(hmp):
    S, A = hmp.n_states, hmp.n_actions
    q = [[0.0] * A for _ in range(S)]
    for _ in range(5):
        v = [max(row) for row in q]
        q = [
            [hmp.rewards[s, a] + hmp.discount * sum(hmp.transitions[s, a, t] * v[t] for t in range(S)) for a in range(A)]
            for s in range(S)
        ]
    expected_greedy = []
    for row in q:
        best = max(row)
        expected_greedy.append(next(a for a in range(A) if row[a] >= best - 1e-12 * (1 + abs(best))))
    pi_b = q_iteration_policy(hmp, 5, 0.3)
    for s, a_star in enumerate(expected_greedy):
        assert pi_b.probs[s, a_star] == pytest.approx(1 - 0.3 + 0.3 / A)
        assert pi_b.probs[s].sum() == pytest.approx(1.0)


# -------------------------------------------------------------------
# Ratios and stationarity
# -------------------------------------------------------------------
def test_on_policy_ratios_are_one(hmp):
    pi = q_iteration_policy(hmp, 5, 0.3)
    ratio = importance_ratios(pi, pi)
    assert_allclose(ratio.beta, 1.0)
    assert_allclose(ratio.span, 0.0)


def test_deterministic_target_against_uniform(mrp):
    target, _ = optimal_policy(mrp)
    ratio = importance_ratios(target, Policy.uniform(10, 2))
    chosen = target.greedy_actions()
    assert_allclose(ratio.beta[np.arange(10), chosen], 2.0)
    assert_allclose(ratio.beta[np.arange(10), 1 - chosen], 0.0)
    assert_allclose(ratio.span, 2.0)
    assert_allclose(ratio.beta, target.probs / Policy.uniform(10, 2).probs)


def test_assumption_violation_lists_pairs():
    target = Policy(np.array([[0.5, 0.5], [1.0, 0.0]]))
    behavior = Policy(np.array([[1.0, 0.0], [1.0, 0.0]]))
    with pytest.raises(AssumptionViolationError) as info:
        importance_ratios(target, behavior)
    assert info.value.pairs == [(0, 1)]


def test_stationarity_residual_vanishes(mrp, hmp):
    for mdp in (mrp, hmp):
        target, _ = optimal_policy(mdp)
        behavior = q_iteration_policy(mdp, 5, 0.3)
        assert stationarity_residual(mdp, target, behavior) < 1e-10
        w = marginal_ratio(mdp, target, behavior)
        d_b = exact_average_visitation(mdp, behavior)
        assert float(w @ d_b) == pytest.approx(1.0, abs=1e-10)
