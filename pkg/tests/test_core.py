import numpy as np
import pytest
from hypothesis import given, strategies as st

from das_index.core import (
    Action, ChannelModel, ClientModel, ModelError, client_mdp, gilbert_elliott, model_issues,
    restrict_peak_power, step_cost, successor_failure, successor_success, transition_distribution,
)
from das_index.instances import random_model


def test_successor_success(model_b10):
    assert successor_success(5, model_b10) == 8
    assert successor_success(0, model_b10) == 4
    assert successor_success(8, model_b10) == 7


def test_successor_failure(model_b10):
    assert [successor_failure(l, model_b10) for l in (0, 1, 5)] == [0, 0, 4]


def test_successor_rejects_out_of_range(model_b10):
    with pytest.raises(ModelError):
        successor_success(11, model_b10)
    with pytest.raises(ModelError):
        successor_failure(-1)


def test_transition_distribution_examples():
    m = ClientModel(10, 4, [0.1], [0.0, 1.0], [[0.0, 0.7]])
    assert dict(transition_distribution(5, Action(0, 1), m)) == pytest.approx({8: 0.7, 4: 0.3})
    assert transition_distribution(8, Action(0, 1), m) == [(7, 1.0)]
    assert transition_distribution(3, Action(0, 0), m) == [(2, 1.0)]


def test_step_cost_examples():
    m = ClientModel(10, 4, [0.5], [0.0, 2.0], [[0.0, 0.6]], outage_period_weight=3.0)
    assert step_cost(0, Action(0, 0), 1.0, m) == 1.0
    assert step_cost(1, Action(0, 1), 1.0, m) == pytest.approx(3.5)
    assert step_cost(5, Action(0, 0), 1.0, m) == 0.0


def test_model_validation_rejects_bad_inputs():
    with pytest.raises(ModelError):
        ClientModel(3, 4, [0.1], [0.0, 1.0], [[0.0, 0.5]])  # T > B
    with pytest.raises(ModelError):
        ClientModel(5, 2, [0.3, 0.1], [0.0, 1.0], [[0.0, 0.5], [0.0, 0.6]])  # disutility order
    with pytest.raises(ModelError):
        ClientModel(5, 2, [0.1], [0.0, 1.0], [[0.2, 0.5]])  # P(q, E_1) > 0
    with pytest.raises(ModelError):
        ClientModel(5, 2, [0.1], [0.0, 1.0, 2.0], [[0.0, 0.6, 0.5]])  # decreasing in power
    with pytest.raises(ModelError):
        ClientModel(5, 2, [0.1], [0.0, 1.0], [[0.0, 1.5]])


def test_model_issues_lists_every_problem():
    m = ClientModel(5, 2, [0.3, 0.1], [0.0, 1.0], [[0.0, 0.6], [0.0, 0.5]], strict=False)
    issues = model_issues(m)
    assert any("disutilities" in s for s in issues)
    assert any("quality" in s for s in issues)


def test_model_round_trip(model_b10):
    again = ClientModel.from_dict(model_b10.to_dict())
    assert again.to_dict() == model_b10.to_dict()


def test_channel_rows_must_be_stochastic(model_b10):
    with pytest.raises(ModelError):
        ChannelModel([[0.5, 0.4], [0.0, 1.0]], np.stack([model_b10.success_prob] * 2))


def test_single_state_channel_reproduces_iid(model_b10):
    iid = client_mdp(model_b10, 0.7)
    fading = client_mdp(model_b10, 0.7, ChannelModel.iid(model_b10))
    assert np.array_equal(iid.transition_matrices(), fading.transition_matrices())
    assert np.array_equal(iid.cost, fading.cost)


def test_gilbert_elliott_scales_bad_state(model_b10):
    ch = gilbert_elliott(model_b10, 0.1, 0.3, 0.4)
    assert np.allclose(ch.per_state_success[0], model_b10.success_prob)
    assert np.allclose(ch.per_state_success[1], 0.4 * model_b10.success_prob)
    assert np.allclose(ch.transition_matrix.sum(axis=1), 1.0)


def test_restrict_peak_power_drops_levels(model_b10):
    r = restrict_peak_power(model_b10, 1.5)
    assert list(r.power_levels) == [0.0, 1.0]
    assert r.success_prob.shape == (2, 2)
    with pytest.raises(ModelError):
        restrict_peak_power(model_b10, -1.0)


@given(seed=st.integers(0, 2**32 - 1))
def test_transitions_are_distributions(seed):
    rng = np.random.default_rng(seed)
    m = random_model(rng, buffer_range=(2, 12))
    for l in range(m.n_states):
        for a in range(m.n_actions):
            dist = transition_distribution(l, m.action_at(a), m)
            assert all(0 <= s <= m.buffer_capacity and p >= 0 for s, p in dist)
            assert sum(p for _, p in dist) == 1.0


@given(seed=st.integers(0, 2**32 - 1), price=st.floats(0, 10), bump=st.floats(0.01, 5))
def test_step_cost_affine_in_price(seed, price, bump):
    rng = np.random.default_rng(seed)
    m = random_model(rng, buffer_range=(2, 8))
    for l in range(m.n_states):
        for a in range(m.n_actions):
            u = m.action_at(a)
            slope = (step_cost(l, u, price + bump, m) - step_cost(l, u, price, m)) / bump
            assert slope == pytest.approx(m.power_levels[u.power], abs=1e-8)


def test_mdp_tables_match_pointwise_functions(model_b10):
    mdp = client_mdp(model_b10, 0.3)
    P = mdp.transition_matrices()
    for l in range(model_b10.n_states):
        for a in range(model_b10.n_actions):
            u = model_b10.action_at(a)
            assert mdp.cost[l, a] == pytest.approx(step_cost(l, u, 0.3, model_b10))
            row = np.zeros(model_b10.n_states)
            for s, p in transition_distribution(l, u, model_b10):
                row[s] += p
            assert np.allclose(P[a, l], row)
