# backend/tests/test_batch_rl.py
import numpy as np
import pytest

from ope_pipeline.data_module.empirical import EmpiricalConditional, build_empirical
from ope_pipeline.data_module.trajectory import simulate
from ope_pipeline.errors import InputError, NonConvergenceError
from ope_pipeline.estimation.batch_rl import (
    BatchBellmanOperator,
    batch_contraction_diagnostics,
    batch_radius,
    relative_gap,
    robust_policy_optimization,
    saa_policy_optimization,
    worst_case_for_policy,
)
from ope_pipeline.estimation.robust_eval import RadiusSchedule, default_value_bound
from ope_pipeline.mdp_model.mdp_core import FiniteMdp, Policy, optimal_policy, q_iteration_policy
from ope_pipeline.wdro_module.cost_metric import CostMetric


def _fixed(rho, mdp):
    return RadiusSchedule.fixed(np.full(mdp.n_states, rho), CostMetric.normalized(mdp.n_states, mdp.n_actions).diam)


@pytest.mark.parametrize("env", ["mrp", "hmp"])
def test_saa_on_population_recovers_optimum(env, mrp, hmp):
    mdp = mrp if env == "mrp" else hmp
    behavior = Policy.uniform(mdp.n_states, mdp.n_actions) if env == "mrp" else q_iteration_policy(mdp, 5, 0.3)
    pop = EmpiricalConditional.from_population(mdp, behavior)
    target, j_star = optimal_policy(mdp)
    result = saa_policy_optimization(behavior, mdp.rewards, pop, mdp.discount, mdp.initial_dist)
    assert result.policy.greedy_actions().tolist() == target.greedy_actions().tolist()
    assert result.L_star == pytest.approx(j_star, abs=1e-7)
    assert relative_gap(mdp, result.policy, j_star) == pytest.approx(0.0, abs=1e-9)
    assert result.diagnostics["max_row_sum"] == pytest.approx(1.0)


def test_zero_radius_robust_matches_saa(hmp):
    behavior = q_iteration_policy(hmp, 5, 0.3)
    emp = EmpiricalConditional.from_population(hmp, behavior)
    saa = saa_policy_optimization(behavior, hmp.rewards, emp, hmp.discount, hmp.initial_dist)
    robust = robust_policy_optimization(behavior, hmp.rewards, emp, _fixed(0.0, hmp), hmp.discount, hmp.initial_dist)
    assert robust.L_star == pytest.approx(saa.L_star, abs=1e-8)
    assert robust.policy.greedy_actions().tolist() == saa.policy.greedy_actions().tolist()
    assert robust.diagnostics["contraction"]["all_passed"]
    assert robust.diagnostics["schedule"]["mode"] == "fixed"


def test_robust_value_shrinks_with_radius(hmp):
    behavior = q_iteration_policy(hmp, 5, 0.3)
    pop = EmpiricalConditional.from_population(hmp, behavior)
    values = [
        robust_policy_optimization(behavior, hmp.rewards, pop, _fixed(r, hmp), hmp.discount, hmp.initial_dist).L_star
        for r in (0.0, 0.005, 0.02)
    ]
    assert values[0] >= values[1] - 1e-9 >= values[2] - 2e-9


def test_disallowed_actions_are_never_chosen(hmp):
    probs = np.tile([0.5, 0.5, 0.0], (6, 1))
    behavior = Policy(probs)
    pop = EmpiricalConditional.from_population(hmp, behavior)
    for result in (
        saa_policy_optimization(behavior, hmp.rewards, pop, hmp.discount, hmp.initial_dist),
        robust_policy_optimization(behavior, hmp.rewards, pop, _fixed(0.01, hmp), hmp.discount, hmp.initial_dist),
    ):
        assert 2 not in result.policy.greedy_actions().tolist()
        assert np.all(np.isneginf(result.q[:, 2]))


def test_saa_diverges_on_expansive_plug_in():
    W = np.zeros((3, 2, 3))
    for s in range(3):
        W[s, 0, s] = 1.0
    emp = EmpiricalConditional(W, np.full(3, 10.0), np.full(3, 1 / 3))
    with pytest.raises(NonConvergenceError) as info:
        saa_policy_optimization(Policy.uniform(3, 2), np.ones((3, 2)), emp, 0.95, np.full(3, 1 / 3))
    assert info.value.diagnostics["max_row_sum"] == pytest.approx(2.0)
    assert (info.value.diagnostics["state"], info.value.diagnostics["action"]) == (0, 0)
    assert info.value.diagnostics["max_abs_v"] > info.value.diagnostics["limit"]


def test_saa_accepts_absorbing_state_above_the_row_sum_bound():
    # state 1 is absorbing with zero reward and only action 0 logged there
    W = np.zeros((2, 2, 2))
    W[0, 0, 1] = W[0, 1, 0] = 0.5
    W[1, 0, 1] = 1.0
    rewards = np.array([[1.0, 1.0], [0.0, 0.0]])
    emp = EmpiricalConditional(W, np.full(2, 20.0), np.array([1.0, 0.0]))
    result = saa_policy_optimization(Policy.uniform(2, 2), rewards, emp, 0.95, np.array([1.0, 0.0]))
    assert 0.95 * result.diagnostics["max_row_sum"] > 1.0
    np.testing.assert_allclose(result.v_star, [20.0, 0.0], atol=1e-7)
    assert result.L_star == pytest.approx(1.0, abs=1e-8)
    assert result.policy.greedy_actions().tolist() == [1, 0]
    assert result.diagnostics["greedy_spectral_radius"] == pytest.approx(1.9)


def test_saa_succeeds_on_off_policy_samples(hmp):
    behavior = q_iteration_policy(hmp, 5, 0.3)
    converged = 0
    for seed in range(10):
        emp = build_empirical(simulate(hmp, behavior, 50, 50, seed=seed), 6, 3, missing_state="bound")
        try:
            result = saa_policy_optimization(behavior, hmp.rewards, emp, hmp.discount, hmp.initial_dist)
        except NonConvergenceError:
            continue
        converged += 1
        assert np.isfinite(result.L_star)
        assert "greedy_spectral_radius" in result.diagnostics
    assert converged >= 5


def test_batch_radius_formula(hmp):
    behavior = q_iteration_policy(hmp, 5, 0.3)
    emp = build_empirical(simulate(hmp, behavior, 40, 50, seed=9), 6, 3)
    M = default_value_bound(hmp.rewards, hmp.discount)
    schedule = batch_radius(emp, 0.05, M, 1.0, 3)
    tau_s = np.log(6 / 0.05) + np.log(2 * 3 * emp.n * M)
    np.testing.assert_allclose(schedule.rho, np.sqrt(2 * tau_s / emp.n))
    assert schedule.mode == "nonasymptotic"
    with pytest.raises(InputError):
        batch_radius(emp, 1.5, M, 1.0, 3)


def test_batch_contraction_report(hmp):
    behavior = q_iteration_policy(hmp, 5, 0.3)
    pop = EmpiricalConditional.from_population(hmp, behavior)
    none = batch_contraction_diagnostics(behavior, pop, _fixed(0.0, hmp), hmp.discount)
    np.testing.assert_allclose(none.worst_product, 0.0)
    assert none.all_passed
    big = batch_contraction_diagnostics(behavior, pop, _fixed(1.0, hmp), hmp.discount)
    assert np.all(big.worst_product > 0)
    assert not big.all_passed


def test_relative_gap_needs_nonzero_optimum(hmp):
    zero = FiniteMdp(hmp.transitions, np.zeros_like(hmp.rewards), hmp.discount, hmp.initial_dist)
    with pytest.raises(InputError):
        relative_gap(zero, Policy.from_actions([0] * 6, 3))
    target, _ = optimal_policy(hmp)
    worse = Policy.from_actions((target.greedy_actions() + 1) % 3, 3)
    assert relative_gap(hmp, target) == pytest.approx(0.0, abs=1e-9)
    assert relative_gap(hmp, worse) > 0.0


def test_worst_case_for_policy(hmp):
    behavior = q_iteration_policy(hmp, 5, 0.3)
    pop = EmpiricalConditional.from_population(hmp, behavior)
    result = robust_policy_optimization(behavior, hmp.rewards, pop, _fixed(0.01, hmp), hmp.discount,
                                        hmp.initial_dist)
    worst = worst_case_for_policy(result, behavior, pop)
    assert len(worst) == 6
    actions = result.policy.greedy_actions()
    for s, mu in enumerate(worst):
        assert mu.weights.sum() == pytest.approx(1.0)
        f = np.zeros((3, 6))
        f[actions[s]] = result.v_star / behavior.probs[s, actions[s]]
        expected = result.q[s, actions[s]]
        assert hmp.rewards[s, actions[s]] + hmp.discount * mu.mean(f.ravel()) == pytest.approx(expected, abs=1e-8)


@pytest.mark.slow
def test_batch_operator_contracts_and_the_policy_is_greedy(hmp):
    behavior = q_iteration_policy(hmp, 5, 0.3)
    pop = EmpiricalConditional.from_population(hmp, behavior)
    cost = CostMetric.normalized(6, 3)
    schedule = _fixed(1e-4, hmp)
    assert batch_contraction_diagnostics(behavior, pop, schedule, hmp.discount, cost=cost).all_passed
    op = BatchBellmanOperator(behavior, hmp.rewards, pop, schedule.rho, hmp.discount, cost)
    M = default_value_bound(hmp.rewards, hmp.discount)
    rng = np.random.default_rng(4)
    for _ in range(1000):
        v1, v2 = rng.uniform(-M, M, size=(2, 6))
        assert np.max(np.abs(op(v1) - op(v2))) <= (1 + hmp.discount) / 2 * np.max(np.abs(v1 - v2)) + 1e-9

    result = robust_policy_optimization(behavior, hmp.rewards, pop, schedule, hmp.discount, hmp.initial_dist,
                                        cost=cost)
    np.testing.assert_allclose(op(result.v_star), result.v_star, atol=1e-6)
    q = op.q_values(result.v_star)
    chosen = q[np.arange(6), result.policy.greedy_actions()]
    np.testing.assert_allclose(chosen, q.max(axis=1), atol=1e-9)
