import numpy as np
import pytest
from hypothesis import given, strategies as st

from das_index.core import Action, ChannelModel, ClientModel, gilbert_elliott
from das_index.dual import evaluate_policy
from das_index.instances import random_model, random_refilling_policy
from das_index.mdp import PolicyTable, average_cost_solve
from das_index.simulator import (
    ConstraintViolation, Scenario, SimTrace, TablePolicy, _channel_tables, _run_general, batch_means_se,
    metrics_report, run, run_fading, transition_chi2, write_summary,
)


def always(model, action):
    return TablePolicy([PolicyTable.constant(model, action)])


def refilling(rng, model):
    return PolicyTable.from_flat(random_refilling_policy(rng, model), model.n_qualities)


def test_sure_delivery_never_stalls():
    model = ClientModel(6, 2, [0.1], [0.0, 1.0], [[0.0, 1.0]])
    trace = run(Scenario([model], 5000, seed=1), always(model, Action(0, 1)))
    assert metrics_report(trace)["clients"][0]["outage_fraction"] == 0.0


def test_idle_policy_single_outage_period(model_b10):
    trace = run(Scenario([model_b10], 10_000, seed=2), always(model_b10, Action(0, 0)))
    c = metrics_report(trace)["clients"][0]
    assert c["outage_periods"] == 1
    assert c["outage_fraction"] == pytest.approx((10_000 - 10) / 10_000)


def test_initial_state_is_full_buffer(model_b10):
    trace = run(Scenario([model_b10], 3, seed=0), always(model_b10, Action(0, 0)))
    assert trace.state[:, 0].tolist() == [10, 9, 8]


def test_zero_delivery_trace_has_no_quality_or_power(model_b10):
    trace = run(Scenario([model_b10], 500, seed=0), always(model_b10, Action(1, 0)))
    c = metrics_report(trace)["clients"][0]
    assert c["mean_quality_cost"] == 0.0 and c["mean_power"] == 0.0 and c["deliveries"] == 0


def test_hand_built_outage_count():
    model = ClientModel(4, 2, [0.1], [0.0, 1.0], [[0.0, 0.5]], outage_period_weight=2.0)
    z = np.zeros((5, 1), dtype=np.int64)
    trace = SimTrace(np.array([[2], [1], [0], [0], [1]]), z, z, np.zeros((5, 1), dtype=bool), [model])
    c = metrics_report(trace)["clients"][0]
    assert c["outage_fraction"] == pytest.approx(0.4)
    assert c["outage_periods"] == 1
    assert c["objective"] == pytest.approx(0.4 + 2.0 / 5)


def test_aggregates_recompute_from_records(rng):
    model = random_model(rng, powers=(2, 3))
    trace = run(Scenario([model], 20_000, seed=3), TablePolicy([refilling(rng, model)]))
    rec = np.array(list(trace.records()))
    p_, energy, disutility, _ = model.action_arrays()
    H = trace.horizon
    c = metrics_report(trace)["clients"][0]
    assert c["outage_fraction"] == rec[:, 6].sum() / H
    assert c["outage_periods"] == rec[:, 7].sum()
    assert c["mean_power"] == pytest.approx(energy[rec[:, 4]].sum() / H, abs=1e-15)
    assert c["mean_quality_cost"] == pytest.approx((disutility[rec[:, 4]] * rec[:, 5]).sum() / H, abs=1e-12)


def test_period_count_identity(rng):
    model = random_model(rng, powers=(2, 3))
    trace = run(Scenario([model], 50_000, seed=4), TablePolicy([refilling(rng, model)]))
    o = trace.outage[:, 0].astype(int)
    prev = np.concatenate([[0], o[:-1]])
    assert trace.new_period[:, 0].sum() == np.abs(o * (prev - 1)).sum()


def test_simulation_matches_exact_evaluation(rng):
    model = random_model(rng, powers=(2, 3))
    policy = refilling(rng, model)
    exact = evaluate_policy(model, policy)
    trace = run(Scenario([model], 400_000, seed=5), TablePolicy([policy]))
    for series, target in ((trace.cost_series(), exact.qoe_cost), (trace.power_series(), exact.power)):
        assert abs(series.mean() - target) <= 3 * batch_means_se(series) + 1e-9


def test_z_scores_calibrated_across_seeds():
    # the batch-means standard error matches the spread of independent replications
    model = ClientModel(8, 3, [0.1, 0.3], [0.0, 1.0], [[0.0, 0.5], [0.0, 0.7]], 1.0)
    policy = PolicyTable.from_actions(model, [Action(1, 1)] * 4 + [Action(0, 1)] * 2 + [Action(0, 0)] * 3)
    exact = evaluate_policy(model, policy).qoe_cost
    z = []
    for s in range(20):
        series = run(Scenario([model], 100_000, seed=100 + s), TablePolicy([policy])).cost_series()
        z.append((series.mean() - exact) / batch_means_se(series))
    assert 0.5 < np.std(z, ddof=1) < 1.6
    assert abs(np.mean(z)) < 1.0


def test_transitions_pass_chi_square(rng):
    model = random_model(rng, powers=(2, 3))
    trace = run(Scenario([model], 500_000, seed=6), TablePolicy([refilling(rng, model)]))
    result = transition_chi2(trace)
    assert result.visits >= 100_000
    assert result.passed(0.999)


def test_chi_square_flags_wrong_model(rng):
    model = ClientModel(8, 3, [0.1], [0.0, 1.0], [[0.0, 0.5]])
    wrong = ClientModel(8, 3, [0.1], [0.0, 1.0], [[0.0, 0.6]])
    trace = run(Scenario([model], 100_000, seed=0), always(model, Action(0, 1)))
    trace.models = [wrong]
    assert not transition_chi2(trace).passed(0.999)


def test_seed_determinism(rng):
    model = random_model(rng, powers=(2, 3))
    policy = TablePolicy([refilling(rng, model)])
    a, b = (run(Scenario([model], 10_000, seed=42), policy) for _ in range(2))
    assert a.to_csv() == b.to_csv()


def test_adding_a_client_keeps_other_streams(rng):
    m1, m2 = random_model(rng, powers=(2, 3)), random_model(rng, powers=(2, 3))
    p1, p2 = refilling(rng, m1), refilling(rng, m2)
    alone = run(Scenario([m1], 5000, seed=8), TablePolicy([p1]))
    pair = run(Scenario([m1, m2], 5000, seed=8), TablePolicy([p1, p2]))
    assert np.array_equal(alone.state[:, 0], pair.state[:, 0])


def test_fast_and_general_paths_agree(rng):
    models = [random_model(rng, powers=(2, 3)) for _ in range(2)]
    channels = [gilbert_elliott(models[0], 0.1, 0.3, 0.5), None]
    policies = TablePolicy([
        PolicyTable.from_flat(random_refilling_policy(rng, models[0], 2), models[0].n_qualities, 2),
        refilling(rng, models[1]),
    ])
    scenario = Scenario(models, 70_000, seed=3, channels=channels)
    fast = run(scenario, policies)
    general = _run_general(scenario, policies, _channel_tables(scenario))
    assert fast.to_csv() == general.to_csv()


@given(seed=st.integers(0, 2**32 - 1))
def test_states_stay_in_range_and_idle_never_delivers(seed):
    rng = np.random.default_rng(seed)
    model = random_model(rng, buffer_range=(2, 10))
    flat = rng.integers(model.n_actions, size=model.n_states)
    trace = run(Scenario([model], 2000, seed=seed), TablePolicy([PolicyTable.from_flat(flat, model.n_qualities)]))
    assert trace.state.min() >= 0 and trace.state.max() <= model.buffer_capacity
    idle = trace.action < model.n_qualities
    assert not np.any(trace.delivered & idle)


class Greedy:
    """Every client always transmits with flat action ``a``."""

    def __init__(self, n, a):
        self.n, self.a = n, a

    def decide(self, states, channel_states, rng):
        return [self.a] * self.n


class Rotate:
    def __init__(self, n, a):
        self.n, self.a, self.t = n, a, 0

    def decide(self, states, channel_states, rng):
        self.t += 1
        return [self.a if i == self.t % self.n else 0 for i in range(self.n)]


def test_channel_limit_is_enforced(model_b10):
    with pytest.raises(ConstraintViolation):
        run(Scenario([model_b10] * 3, 100, mode="channels", n_channels=2), Greedy(3, model_b10.n_qualities))


def test_channel_limit_respected(model_b10):
    trace = run(Scenario([model_b10] * 3, 3000, mode="channels", n_channels=1), Rotate(3, model_b10.n_qualities))
    assert (trace.action >= model_b10.n_qualities).sum(axis=1).max() == 1


def test_peak_mode_filters_actions(model_b10):
    scenario = Scenario([model_b10], 100, mode="peak", peak_power=1.0)
    assert list(scenario.models[0].power_levels) == [0.0, 1.0]


def test_budget_mode_reports_excess(model_b10):
    policy = average_cost_solve(model_b10, 0.5).policy
    trace = run(Scenario([model_b10], 20_000, seed=1, mode="budget", power_budget=0.2), TablePolicy([policy]))
    report = metrics_report(trace)
    assert report["budget_excess"] == pytest.approx(report["totals"]["mean_power"] - 0.2)


def test_single_state_channel_byte_identical(rng):
    model = random_model(rng, powers=(2, 3))
    policy = TablePolicy([refilling(rng, model)])
    plain = run(Scenario([model], 20_000, seed=9), policy)
    faded = run_fading(Scenario([model], 20_000, seed=9, channels=[ChannelModel.iid(model)]), policy)
    assert plain.to_csv().encode() == faded.to_csv().encode()


def test_frozen_channel_equals_iid_with_that_table():
    base = ClientModel(8, 3, [0.1, 0.3], [0.0, 1.0], [[0.0, 0.5], [0.0, 0.8]])
    bad = ClientModel(8, 3, [0.1, 0.3], [0.0, 1.0], [[0.0, 0.2], [0.0, 0.32]])
    frozen = ChannelModel(np.eye(2), np.stack([base.success_prob, bad.success_prob]), initial_state=1)
    policy = PolicyTable.from_actions(base, [Action(1, 1)] * 6 + [Action(0, 0)] * 3)
    faded = run(Scenario([base], 20_000, seed=2, channels=[frozen]),
                TablePolicy([PolicyTable(np.repeat(policy.actions, 2, axis=1), base.n_qualities)]))
    iid = run(Scenario([bad], 20_000, seed=2), TablePolicy([policy]))
    assert np.array_equal(faded.state, iid.state) and np.array_equal(faded.delivered, iid.delivered)
    assert np.all(faded.channel == 1)


def test_fading_run_matches_augmented_gain():
    model = ClientModel(8, 3, [0.1, 0.3], [0.0, 1.0, 2.0], [[0.0, 0.5, 0.8], [0.0, 0.6, 0.9]], 1.0)
    channel = gilbert_elliott(model, 0.1, 0.3, 0.4)
    res = average_cost_solve(model, 0.5, channel=channel)
    trace = run(Scenario([model], 400_000, seed=12, channels=[channel]), TablePolicy([res.policy]))
    series = trace.cost_series() + 0.5 * trace.power_series()
    assert abs(series.mean() - res.gain) <= 3 * batch_means_se(series)
    assert transition_chi2(trace, channel=channel).passed(0.999)


def test_trace_csv_and_summary(model_b10, tmp_path):
    trace = run(Scenario([model_b10], 200, seed=5), always(model_b10, Action(0, 1)))
    lines = trace.to_csv("run=1").splitlines()
    assert lines[0] == "# trace_schema=1 seed=5 initial=l(0)=B, O(-1)=0 run=1"
    assert lines[1] == "slot,client,state,channel,action,delivered,outage,new_period"
    assert len(lines) == 202
    write_summary(tmp_path / "s.json", trace, {"note": "x"})
    assert '"note": "x"' in (tmp_path / "s.json").read_text()


def test_scenario_validation(model_b10):
    with pytest.raises(ValueError):
        Scenario([model_b10], 0)
    with pytest.raises(ValueError):
        Scenario([model_b10], 10, mode="channels")
    with pytest.raises(ValueError):
        Scenario([model_b10], 10, mode="budget")
    with pytest.raises(ValueError):
        run_fading(Scenario([model_b10], 10), always(model_b10, Action(0, 0)))
