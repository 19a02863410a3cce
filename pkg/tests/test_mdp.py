from functools import lru_cache

import numpy as np
import pytest
from hypothesis import given, strategies as st

from das_index.core import Action, ClientModel, client_mdp, step_cost, transition_distribution
from das_index.dual import evaluate_policy
from das_index.instances import random_model, random_tiny_model
from das_index.mdp import (
    DFunction, PolicyTable, average_cost_solve, backward_induction, discounted_value_iteration,
    enumerate_policies_oracle, product_mdp_solve, solve_average_pi, verify_D_monotone,
    verify_threshold,
)


def single_action(success: float, disutility: float = 0.0, energy: float = 0.0, B: int = 6, T: int = 2,
                  outage_weight: float = 0.0) -> ClientModel:
    return ClientModel(B, T, [disutility], [energy], [[success]], outage_weight, strict=False)


def memoised_stage_values(model, price, beta, horizon):
    """Plain recursion over (stage, state) using the pointwise dynamics."""
    actions = [model.action_at(a) for a in range(model.n_actions)]

    @lru_cache(maxsize=None)
    def V(t, l):
        if t == 0:
            return 0.0
        return min(step_cost(l, u, price, model)
                   + beta * sum(p * V(t - 1, s) for s, p in transition_distribution(l, u, model))
                   for u in actions)

    return np.array([[V(t, l) for l in range(model.n_states)] for t in range(horizon + 1)])


def test_backward_induction_matches_memoised_recursion(rng):
    model = random_model(rng, buffer_range=(6, 6), qualities=(2, 2), powers=(2, 2), playtime=2)
    values, ds = backward_induction(model, 0.4, 0.9, 25)
    expected = memoised_stage_values(model, 0.4, 0.9, 25)
    assert np.allclose(np.array([v[:, 0] for v in values]), expected, atol=1e-12)
    assert len(ds) == 25


def test_first_stage_D_is_outage_weight_indicator(model_b10):
    _, ds = backward_induction(model_b10, 0.5, 0.9, 3)
    top = model_b10.last_refill_state
    expected = np.where(np.arange(1, top + 1) == 1, model_b10.outage_period_weight, 0.0)
    assert np.array_equal(ds[0].values[:, 0], expected)
    assert verify_D_monotone(ds[0]).passed


def test_discounted_sure_delivery():
    beta, c = 0.9, 0.3
    model = single_action(1.0, c, B=6, T=2)
    res = discounted_value_iteration(model, 0.0, beta, tol=1e-10)
    # from l >= 1 the buffer cycles inside {1..B} and never empties
    assert np.allclose(res.value[1:], c / (1 - beta), atol=1e-9)


def test_discounted_deterministic_drain():
    beta, lam_o = 0.95, 2.0
    model = single_action(0.0, B=6, T=2, outage_weight=lam_o)
    res = discounted_value_iteration(model, 0.0, beta, tol=1e-10)
    l = np.arange(1, 7)
    assert np.allclose(res.value[1:], beta**l / (1 - beta) + lam_o * beta ** (l - 1), atol=1e-9)


def test_average_sure_delivery_gain():
    c, e, price = 0.3, 1.5, 0.7
    res = average_cost_solve(single_action(1.0, c, e), price)
    assert res.gain == pytest.approx(c + price * e, abs=1e-9)


def test_average_never_deliver_gain():
    assert average_cost_solve(single_action(0.0, outage_weight=1.0)).gain == pytest.approx(1.0, abs=1e-9)


def test_bias_is_referenced_at_zero(model_b10):
    assert average_cost_solve(model_b10, 0.2).value[0] == 0.0


def test_discounted_matches_oracle(rng):
    model = random_model(rng, buffer_range=(4, 4), qualities=(2, 2), powers=(2, 2), playtime=2)
    res = discounted_value_iteration(model, 0.3, 0.9)
    value, _ = enumerate_policies_oracle(model, 0.3, beta=0.9)
    assert np.max(np.abs(res.value - value)) <= 1e-6


def test_average_matches_oracle(rng):
    model = random_model(rng, buffer_range=(4, 4), qualities=(2, 2), powers=(2, 2), playtime=2)
    gain, _ = enumerate_policies_oracle(model, 0.3)
    assert average_cost_solve(model, 0.3).gain == pytest.approx(gain, abs=1e-6)


def test_oracle_single_action_is_policy_evaluation():
    model = single_action(0.6, 0.2, 0.0, B=4, T=2)
    beta = 0.8
    value, policy = enumerate_policies_oracle(model, 0.0, beta=beta)
    P, c = client_mdp(model).policy_matrix(np.zeros(model.n_states, dtype=int))
    assert np.array_equal(policy, np.zeros(model.n_states))
    assert np.allclose(value, np.linalg.solve(np.eye(model.n_states) - beta * P, c))


def test_oracle_b3_equals_value_iteration(rng):
    model = random_model(rng, buffer_range=(3, 3), qualities=(2, 2), powers=(2, 2), playtime=2)
    value, _ = enumerate_policies_oracle(model, 0.5, beta=0.95)
    assert np.allclose(discounted_value_iteration(model, 0.5, 0.95).value, value, atol=1e-6)


def test_verify_threshold_constant_policy(model_b10):
    policy = PolicyTable.constant(model_b10, Action(1, 2))
    assert verify_threshold(policy, model_b10).passed


def test_verify_threshold_probability_clause_passes_for_increasing_P(model_b10):
    # success probability grows as the buffer shrinks
    top = model_b10.last_refill_state
    acts = [Action(1, 2)] * 3 + [Action(0, 2)] * 2 + [Action(0, 1)] * (top - 4) + [Action(0, 0)] * (10 - top)
    report = verify_threshold(PolicyTable.from_actions(model_b10, acts), model_b10)
    assert not any(v[0] == "probability" for v in report.violations)


def test_verify_threshold_reports_power_violation(model_b10):
    acts = [Action(0, 1)] * 11
    acts[5] = Action(0, 2)
    report = verify_threshold(PolicyTable.from_actions(model_b10, acts), model_b10)
    assert not report.passed
    assert ("power", 5, 2, 0) in report.violations


def test_verify_D_monotone_cases():
    assert verify_D_monotone(DFunction(1, 0.9, np.full((5, 1), 0.7))).passed
    d = DFunction(4, 0.9, np.array([[3.0], [2.0], [1.0], [1.5], [0.5]]))
    report = verify_D_monotone(d)
    assert not report.passed and report.violations[0] == (3, 0)


def test_product_of_one_is_single_solve(model_b10):
    joint = product_mdp_solve([model_b10], 0.4)
    assert joint.gain == pytest.approx(average_cost_solve(model_b10, 0.4).gain, abs=1e-8)


def test_product_identical_clients_doubles_gain(rng):
    m = random_tiny_model(rng)
    assert product_mdp_solve([m, m], 0.4).gain == pytest.approx(2 * average_cost_solve(m, 0.4).gain, abs=1e-6)


def test_product_heterogeneous_is_sum(rng):
    a, b = random_tiny_model(rng), random_tiny_model(rng)
    expected = average_cost_solve(a, 0.8).gain + average_cost_solve(b, 0.8).gain
    assert product_mdp_solve([a, b], 0.8).gain == pytest.approx(expected, abs=1e-6)


def test_policy_iteration_agrees_with_rvi(model_b10):
    mdp = client_mdp(model_b10, 0.6)
    assert solve_average_pi(mdp).gain == pytest.approx(average_cost_solve(model_b10, 0.6).gain, abs=1e-8)


@given(seed=st.integers(0, 2**32 - 1), beta=st.sampled_from([0.9, 0.99]), price=st.sampled_from([0.0, 0.5, 2.0]))
def test_threshold_structure_property(seed, beta, price):
    model = random_model(np.random.default_rng(seed))
    res = discounted_value_iteration(model, price, beta)
    assert verify_threshold(res.policy, model).passed


@given(seed=st.integers(0, 2**32 - 1))
def test_value_iteration_contracts(seed):
    model = random_model(np.random.default_rng(seed), buffer_range=(4, 10))
    beta = 0.9
    r = discounted_value_iteration(model, 0.5, beta).residuals
    assert all(b <= beta * a + 1e-12 for a, b in zip(r, r[1:]))


@given(seed=st.integers(0, 2**32 - 1), price=st.floats(0.0, 3.0))
def test_average_gain_self_consistent(seed, price):
    model = random_model(np.random.default_rng(seed), buffer_range=(4, 12))
    res = average_cost_solve(model, price)
    stats = evaluate_policy(model, res.policy)
    assert stats.priced_cost(price) == pytest.approx(res.gain, abs=1e-8)


@given(seed=st.integers(0, 2**32 - 1), price=st.floats(0.01, 3.0))
def test_overflow_states_idle_when_power_costs(seed, price):
    model = random_model(np.random.default_rng(seed), buffer_range=(4, 12))
    res = discounted_value_iteration(model, price, 0.99)
    for l in range(model.last_refill_state + 1, model.n_states):
        assert res.policy.action(l).power == 0
