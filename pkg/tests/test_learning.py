import numpy as np
import pytest
from hypothesis import given, strategies as st

from das_index.core import ClientModel
from das_index.instances import small_learning_model
from das_index.learning import (
    DISCOUNTED, RELATIVE, QIndexPolicy, QTable, Schedules, ScheduleError, q_index_learning, q_index_schedule,
    q_learning, q_learning_reference, q_update, softmax_action, softmax_probs, two_timescale_run,
)
from das_index.mdp import average_cost_solve, product_mdp_solve
from das_index.simulator import Scenario, metrics_report, run


@pytest.fixture
def model():
    return small_learning_model()


def test_q_update_full_overwrite(model):
    table = QTable.zeros(model)
    q_update(table, 2, 3, 2.0, 1, rate=1.0)
    assert table.q[2, 3] == 2.0


def test_q_update_zero_rate_keeps_table(model):
    table = QTable.zeros(model, initial=0.5)
    before = table.q.copy()
    q_update(table, 2, 3, 7.0, 1, rate=0.0)
    assert np.array_equal(table.q, before)


@given(l=st.integers(0, 4), u=st.integers(0, 3), nxt=st.integers(0, 4), cost=st.floats(0, 5),
       rate=st.floats(0.01, 1.0))
def test_q_update_touches_one_entry(l, u, nxt, cost, rate):
    table = QTable.zeros(small_learning_model(), initial=0.3)
    before = table.q.copy()
    q_update(table, l, u, cost, nxt, rate=rate)
    changed = np.argwhere(table.q != before)
    assert all(tuple(ix) == (l, u) for ix in changed)
    assert table.counts.sum() == 1


def test_softmax_zero_temperature_uniform():
    assert np.allclose(softmax_probs(np.array([0.1, 5.0, 2.0]), 0.0), 1 / 3)


def test_softmax_large_temperature_picks_minimiser():
    p = softmax_probs(np.array([0.4, 0.1, 0.9]), 1e4)
    assert p[1] == pytest.approx(1.0)


def test_softmax_literal_sign_prefers_high_cost():
    assert np.argmax(softmax_probs(np.array([0.4, 0.1, 0.9]), 50.0, literal_sign=True)) == 2


@given(tau=st.floats(0, 1e3))
def test_softmax_equal_values_split_evenly(tau):
    assert np.allclose(softmax_probs(np.array([1.7, 1.7]), tau), 0.5)


@given(q=st.lists(st.floats(-1e3, 1e3), min_size=1, max_size=6), tau=st.floats(0, 50), shift=st.floats(-1e3, 1e3))
def test_softmax_normalised_and_shift_invariant(q, tau, shift):
    q = np.array(q)
    p = softmax_probs(q, tau)
    assert abs(p.sum() - 1.0) <= 1e-12
    assert np.allclose(p, softmax_probs(q + shift, tau), atol=1e-9)


def test_softmax_action_rejects_infinite_temperature(model):
    with pytest.raises(ValueError):
        softmax_action(QTable.zeros(model), 0, np.inf, np.random.default_rng(0))


def test_index_schedule_single_client_reduces_to_softmax(model):
    table = QTable(np.random.default_rng(3).normal(size=(5, 4)), np.zeros((5, 4), dtype=np.int64))
    for seed in range(50):
        a = q_index_schedule([table], [2], 1, 1.3, np.random.default_rng(seed))[0]
        b = softmax_action(table, 2, 1.3, np.random.default_rng(seed))
        assert a == b


def test_index_schedule_zero_temperature_uniform(model):
    rng = np.random.default_rng(0)
    tables = [QTable(rng.normal(size=(5, 4)), np.zeros((5, 4), dtype=np.int64)) for _ in range(2)]
    counts = np.zeros((2, 4))
    n = 40_000
    for _ in range(n):
        ((client, action),) = q_index_schedule(tables, [1, 3], 1, 0.0, rng).items()
        counts[client, action] += 1
    assert np.allclose(counts / n, 1 / 8, atol=0.01)


def test_index_schedule_serves_at_most_m(model):
    rng = np.random.default_rng(1)
    tables = [QTable.zeros(model) for _ in range(4)]
    for _ in range(100):
        assert len(q_index_schedule(tables, [0, 1, 2, 3], 2, 0.5, rng)) == 2


def test_learned_index_policy_near_joint_optimum():
    models = [small_learning_model(), ClientModel(3, 1, [0.2], [0.0, 1.0], [[0.0, 0.7]], outage_period_weight=1.0)]
    optimum = product_mdp_solve(models, 0.0, max_active=1).gain
    learned = q_index_learning(models, 1, 10**6, seed=0)
    trace = run(Scenario(models, 200_000, seed=1, mode="channels", n_channels=1),
                QIndexPolicy(learned.tables, models, 1))
    assert metrics_report(trace)["totals"]["objective"] <= 1.10 * optimum


@pytest.mark.parametrize("sched", [Schedules(), Schedules(exploration="epsilon", epsilon=0.3),
                                   Schedules(literal_sign=True), Schedules(rate_kind="rescaled_linear")])
@pytest.mark.parametrize("variant", [RELATIVE, DISCOUNTED])
def test_fast_path_equals_reference(model, sched, variant):
    fast = q_learning(model, 3000, seed=9, schedules=sched, variant=variant, price=0.5)
    slow = q_learning_reference(model, 3000, seed=9, schedules=sched, variant=variant, price=0.5)
    assert np.array_equal(fast.table.q, slow.q)
    assert np.array_equal(fast.table.counts, slow.counts)


def test_same_seed_same_run(model):
    a = q_learning(model, 5000, seed=4, price=0.5)
    b = q_learning(model, 5000, seed=4, price=0.5)
    assert np.array_equal(a.table.q, b.table.q) and a.mean_cost == b.mean_cost


def test_every_pair_visited(model):
    res = q_learning(model, 100_000, seed=1, price=0.5)
    assert res.table.counts.min() > 0


def test_relative_learning_tracks_gain(model):
    exact = average_cost_solve(model, 0.5).gain
    res = q_learning(model, 300_000, seed=2, price=0.5)
    assert res.gain_estimate == pytest.approx(exact, rel=0.1)


def test_no_exploration_from_bad_start_gets_stuck(model):
    # transmitting looks hopeless and greedy play never tests it
    bad = QTable.zeros(model)
    bad.q[:, 2:] = 1e3
    greedy = Schedules(exploration="epsilon", epsilon=0.0)
    stuck = q_learning(model, 50_000, seed=0, schedules=greedy, price=0.5, table=bad)
    optimal = average_cost_solve(model, 0.5).gain
    assert stuck.mean_cost > 0.9
    assert stuck.mean_cost > 2 * optimal
    explored = q_learning(model, 50_000, seed=0, schedules=Schedules(exploration="epsilon", epsilon=0.2),
                          price=0.5, table=QTable(np.where(bad.q > 0, 1e3, 0.0), np.zeros_like(bad.counts)))
    assert explored.gain_estimate == pytest.approx(optimal, rel=0.1)


def test_checkpoint_round_trip(model):
    sched = Schedules(temperature_scale=0.2)
    res = q_learning(model, 2000, seed=0, schedules=sched)
    table, loaded = QTable.from_json(res.table.to_json(sched))
    assert np.array_equal(table.q, res.table.q) and np.array_equal(table.counts, res.table.counts)
    assert loaded == sched
    resumed = q_learning(model, 1000, seed=1, schedules=loaded, table=table)
    assert resumed.table.counts.sum() == 3000


def test_schedule_validation():
    with pytest.raises(ScheduleError):
        Schedules(lr_exponent=0.5)
    with pytest.raises(ScheduleError):
        Schedules(lr_exponent=0.9, price_exponent=0.85).check_two_timescale()
    with pytest.raises(ScheduleError):
        two_timescale_run([small_learning_model()], 1.0, 10, schedules=Schedules(lr_exponent=0.9))


def test_unbounded_budget_keeps_price_at_zero(model):
    res = two_timescale_run([model], 1e9, 20_000, seed=0, trace_every=1000)
    assert all(p == 0.0 for _, p in res.price_trace)
    assert res.price == 0.0


@given(n=st.integers(0, 10**6))
def test_learning_rate_in_unit_interval(n):
    for sched in (Schedules(), Schedules(rate_kind="rescaled_linear")):
        assert 0 < sched.learning_rate(n) <= 1
    assert Schedules().price_step(n) < Schedules().learning_rate(n) or n == 0
