"""Acceptance criteria as library functions, shared by ``das-index verify`` and the test suite.

Each ``criterion_N`` returns a :class:`CriterionResult`.  Sample sizes and
tolerances default to the acceptance targets; ``scale`` shrinks sample
counts and horizons for smoke runs (a scaled run is not an acceptance run).
Seeds are fixed per criterion so every run is reproducible.
"""

from __future__ import annotations

import functools
import itertools
import time
from dataclasses import dataclass, field

import numpy as np
from scipy.optimize import linprog

from .core import ChannelModel, client_mdp, gilbert_elliott
from .dual import dual_value, evaluate_policy, price_iteration
from .instances import random_binary_model, random_model, random_refilling_policy, random_tiny_model, \
    small_learning_model
from .learning import Schedules, q_learning, two_timescale_run
from .mdp import PolicyTable, _long_run_start_distribution, average_cost_solve, backward_induction, \
    d_from_values, discounted_value_iteration, enumerate_policies_oracle, product_mdp_solve, verify_D_monotone, \
    verify_threshold
from .simulator import Scenario, TablePolicy, batch_means_se, run, transition_chi2
from .whittle import BinaryClientModel, SingularSystemError, check_indexability, index_table, \
    whittle_linear_solve

SE_FLOOR = 1e-9  # absolute round-off allowance when a simulated series is constant


@dataclass
class CriterionResult:
    number: int
    title: str
    passed: bool
    summary: str
    seconds: float = 0.0
    details: dict = field(default_factory=dict)

    def line(self) -> str:
        verdict = "PASS" if self.passed else "FAIL"
        return f"[{verdict}] criterion {self.number}: {self.title} -- {self.summary} ({self.seconds:.1f}s)"


def _rng(number: int, seed: int = 0) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence(seed, spawn_key=(number,)))


def _timed(fn):
    @functools.wraps(fn)
    def wrapper(*args, **kwargs):
        t0 = time.perf_counter()
        result = fn(*args, **kwargs)
        result.seconds = time.perf_counter() - t0
        return result
    return wrapper


def within_se(estimate: float, exact: float, se: float, k: float = 3.0) -> bool:
    return abs(estimate - exact) <= k * se + SE_FLOOR


@functools.lru_cache(maxsize=4)
def _structure_sample(n_models: int, stages: int, seed: int):
    """Threshold and D-monotonicity verdicts on the shared sample (criteria 1 and 2)."""
    rng = _rng(1, seed)
    rows = []
    for _ in range(n_models):
        model = random_model(rng)
        for beta in (0.9, 0.99):
            for price in (0.0, 0.5, 2.0):
                solve = discounted_value_iteration(model, price, beta=beta)
                threshold = verify_threshold(solve.policy, model)
                _, ds = backward_induction(model, price, beta, stages)
                bad_stage = next((d.stage for d in ds if not verify_D_monotone(d)), None)
                stationary = verify_D_monotone(d_from_values(model, solve.value.reshape(-1, 1), beta))
                rows.append({"threshold": threshold.passed, "d_stage_fail": bad_stage,
                             "stationary_d": stationary.passed, "period_weight": model.outage_period_weight})
    return rows


@_timed
def criterion_1(n_models: int = 200, stages: int = 300, seed: int = 0) -> CriterionResult:
    rows = _structure_sample(n_models, stages, seed)
    ok = sum(r["threshold"] for r in rows)
    return CriterionResult(1, "threshold structure of discounted optimal policies", ok == len(rows),
                           f"{ok}/{len(rows)} greedy policies pass verify_threshold", details={"solves": len(rows)})


@_timed
def criterion_2(n_models: int = 200, stages: int = 300, seed: int = 0) -> CriterionResult:
    rows = _structure_sample(n_models, stages, seed)
    ok = sum(r["d_stage_fail"] is None for r in rows)
    no_period = [r for r in rows if r["period_weight"] == 0.0]
    stationary = sum(r["stationary_d"] for r in rows)
    first_fail = sorted({r["d_stage_fail"] for r in rows if r["d_stage_fail"] is not None})[:5]
    summary = (f"{ok}/{len(rows)} solves monotone at every stage 1..{stages}; "
               f"stationary D monotone {stationary}/{len(rows)}")
    return CriterionResult(2, "D decreasing in x at every stage", ok == len(rows), summary,
                           details={"stationary_monotone": stationary, "first_failing_stages": first_fail,
                                    "zero_period_weight_solves": len(no_period)})


@_timed
def criterion_3(n_instances: int = 50, tol: float = 1e-6, seed: int = 0) -> CriterionResult:
    rng = _rng(3, seed)
    worst_disc = worst_avg = 0.0
    for _ in range(n_instances):
        model = random_tiny_model(rng)
        price = float(rng.uniform(0.0, 2.0))
        beta = float(rng.choice([0.9, 0.99]))
        v_oracle, _ = enumerate_policies_oracle(model, price, beta=beta)
        v_solver = discounted_value_iteration(model, price, beta=beta).value.reshape(-1)
        worst_disc = max(worst_disc, float(np.abs(v_oracle - v_solver).max()))
        g_oracle, _ = enumerate_policies_oracle(model, price)
        g_solver = average_cost_solve(model, price).gain
        worst_avg = max(worst_avg, abs(g_oracle - g_solver))
    ok = worst_disc <= tol and worst_avg <= tol
    return CriterionResult(3, "solvers match exhaustive policy enumeration", ok,
                           f"max error discounted {worst_disc:.2e}, average {worst_avg:.2e} (tol {tol:g})")


@_timed
def criterion_4(n_instances: int = 20, n_prices: int = 5, tol: float = 1e-6, seed: int = 0) -> CriterionResult:
    rng = _rng(4, seed)
    worst = 0.0
    for _ in range(n_instances):
        models = [random_tiny_model(rng) for _ in range(2)]
        for price in rng.uniform(0.0, 3.0, n_prices):
            separate = dual_value(models, float(price), 0.0).value
            joint = product_mdp_solve(models, float(price)).gain
            worst = max(worst, abs(separate - joint))
    return CriterionResult(4, "Lagrangian decomposes across clients", worst <= tol,
                           f"max |sum of client optima - joint optimum| {worst:.2e} (tol {tol:g})")


def _policy_points(model):
    """Long-run (cost, power) from the start state of every deterministic policy."""
    mdp = client_mdp(model, 0.0)
    S, A = mdp.n_states, mdp.n_actions
    rows = np.arange(S)
    policies = np.array(list(itertools.product(range(A), repeat=S)))
    P = mdp.transition_matrices()[policies, rows[None, :], :]
    mu = _long_run_start_distribution(P, mdp.start)
    cost = np.einsum("ns,ns->n", mu, mdp.qoe_cost[rows[None, :], policies])
    power = np.einsum("ns,ns->n", mu, mdp.power[rows[None, :], policies])
    return cost, power


def constrained_bruteforce(models, budget: float) -> float:
    """Constrained optimum over time-sharings of deterministic policy pairs.

    Enumerates every joint deterministic policy, then solves the linear
    program over mixing weights (optimal constrained policies may need
    randomisation).
    """
    points = [_policy_points(m) for m in models]
    cost, power = points[0]
    for c2, p2 in points[1:]:
        cost = (cost[:, None] + c2[None, :]).ravel()
        power = (power[:, None] + p2[None, :]).ravel()
    res = linprog(cost, A_ub=power[None, :], b_ub=[budget], A_eq=np.ones((1, len(cost))), b_eq=[1.0],
                  bounds=(0, None), method="highs")
    if res.status != 0:
        raise RuntimeError(f"brute-force program failed: {res.message}")
    return float(res.fun)


@_timed
def criterion_5(n_instances: int = 10, seed: int = 0) -> CriterionResult:
    rng = _rng(5, seed)
    worst_gap, worst_cs, ok = -np.inf, 0.0, 0
    det_cs = 0.0
    for _ in range(n_instances):
        while True:
            models = [random_tiny_model(rng, max_buffer=3) for _ in range(2)]
            free_power = dual_value(models, 0.0, 1.0).total_power
            if free_power > 0:
                break
        budget = float(rng.uniform(0.2, 0.8)) * free_power
        result = price_iteration(models, budget)
        primal = constrained_bruteforce(models, budget)
        gap = primal - result.dual  # >= 0 by weak duality
        worst_gap = max(worst_gap, gap)
        worst_cs = max(worst_cs, abs(result.slackness_residual))
        det_cs = max(det_cs, abs(result.price * result.deterministic_violation))
        ok += result.dual >= primal - 1e-3 and abs(result.slackness_residual) <= 1e-2
    return CriterionResult(5, "strong duality and complementary slackness", ok == n_instances,
                           f"{ok}/{n_instances} pass; max (primal - dual) {worst_gap:.2e}, "
                           f"max |slackness| {worst_cs:.2e}",
                           details={"deterministic_bundle_slackness": det_cs})


@_timed
def criterion_6(n_models: int = 100, grid_points: int = 50, tol: float = 1e-6, seed: int = 0) -> CriterionResult:
    rng = _rng(6, seed)
    nested = computable = agree = 0
    worst = 0.0
    for _ in range(n_models):
        binary = BinaryClientModel(random_binary_model(rng))
        cap = binary.default_price_cap()
        nested += check_indexability(binary, np.linspace(0.0, cap, grid_points)).passed
        table = index_table(binary, cap, tol)
        for k in range(1, binary.base.last_refill_state + 1):
            try:
                sol = whittle_linear_solve(binary, k)
            except SingularSystemError:
                continue
            if sol.computable:
                computable += 1
                err = abs(sol.price - table[k])
                worst = max(worst, err)
                agree += err <= 10 * tol
    ok = nested == n_models and agree == computable
    return CriterionResult(6, "indexability and bisection/linear-solve agreement", ok,
                           f"nested {nested}/{n_models}; {agree}/{computable} computable thresholds agree "
                           f"(max diff {worst:.1e}, tol {10 * tol:g})")


@_timed
def criterion_7(n_pairs: int = 20, horizon: int = 10**6, seed: int = 0) -> CriterionResult:
    rng = _rng(7, seed)
    ok, worst_z, worst_p = 0, 0.0, 1.0
    for i in range(n_pairs):
        model = random_model(rng, powers=(2, 3))
        policy = PolicyTable.from_flat(random_refilling_policy(rng, model), model.n_qualities)
        exact = evaluate_policy(model, policy)
        trace = run(Scenario([model], horizon, seed=int(rng.integers(2**31))), TablePolicy([policy]))
        cost, power = trace.cost_series(), trace.power_series()
        se_c, se_p = batch_means_se(cost), batch_means_se(power)
        chi = transition_chi2(trace)
        good = within_se(cost.mean(), exact.qoe_cost, se_c) and within_se(power.mean(), exact.power, se_p)
        ok += good and chi.passed(0.999)
        for est, ex, se in ((cost.mean(), exact.qoe_cost, se_c), (power.mean(), exact.power, se_p)):
            if se > SE_FLOOR:
                worst_z = max(worst_z, abs(est - ex) / se)
        worst_p = min(worst_p, chi.p_value)
    return CriterionResult(7, "simulation matches exact policy evaluation", ok == n_pairs,
                           f"{ok}/{n_pairs} pairs pass; max |z| {worst_z:.2f}, min chi-square p {worst_p:.3g}")


LEARNING_PRICE = 0.5


@_timed
def criterion_8(n_seeds: int = 10, steps: int = 10**6, seed: int = 0) -> CriterionResult:
    model = small_learning_model()
    exact = average_cost_solve(model, LEARNING_PRICE).gain
    rel_errors = [abs(q_learning(model, steps, seed=1000 * seed + s, price=LEARNING_PRICE).gain_estimate - exact)
                  / abs(exact) for s in range(n_seeds)]
    q_star = discounted_value_iteration(model, LEARNING_PRICE, beta=0.99).q_values
    span = float(q_star.max() - q_star.min())
    sched = Schedules(rate_kind="rescaled_linear", exploration="epsilon", epsilon=0.5)
    disc_errors = []
    for s in range(n_seeds):
        res = q_learning(model, steps, seed=1000 * seed + s, price=LEARNING_PRICE, variant="discounted",
                         schedules=sched, average_from=0.5)
        disc_errors.append(float(np.abs(res.averaged_q - q_star).max()) / span)
    rel_ok = sum(e <= 0.05 for e in rel_errors)
    disc_ok = sum(e <= 0.05 for e in disc_errors)
    need = int(np.ceil(0.9 * n_seeds))
    return CriterionResult(8, "Q-learning convergence", rel_ok >= need and disc_ok >= need,
                           f"relative gain within 5% in {rel_ok}/{n_seeds} seeds (max {max(rel_errors):.3f}); "
                           f"discounted Q error <= 5% span in {disc_ok}/{n_seeds} (max {max(disc_errors):.3f})")


@_timed
def criterion_9(n_seeds: int = 10, horizon: int = 10**6, seed: int = 0) -> CriterionResult:
    model = small_learning_model()
    budget = 0.5 * dual_value([model], 0.0, 1.0).total_power
    target = price_iteration([model], budget).price
    ok, worst_price, worst_power = 0, 0.0, 0.0
    for s in range(n_seeds):
        res = two_timescale_run([model], budget, horizon, seed=1000 * seed + s)
        e_price = abs(res.price - target) / target
        e_power = abs(res.realized_power - budget) / budget
        worst_price, worst_power = max(worst_price, e_price), max(worst_power, e_power)
        ok += e_price <= 0.2 and e_power <= 0.1
    need = int(np.ceil(0.8 * n_seeds))
    return CriterionResult(9, "two-timescale price learning", ok >= need,
                           f"{ok}/{n_seeds} seeds pass; max price error {worst_price:.3f}, "
                           f"max power error {worst_power:.3f} (lambda* {target:.4f})")


@_timed
def criterion_10(n_seeds: int = 5, identity_horizon: int = 10**5, horizon: int = 10**6,
                 seed: int = 0) -> CriterionResult:
    rng = _rng(10, seed)
    identical = 0
    for s in range(n_seeds):
        model = random_model(rng, powers=(2, 3))
        policy = PolicyTable.from_flat(random_refilling_policy(rng, model), model.n_qualities)
        plain = run(Scenario([model], identity_horizon, seed=s), TablePolicy([policy]))
        faded = run(Scenario([model], identity_horizon, seed=s, channels=[ChannelModel.iid(model)]),
                    TablePolicy([policy]))
        identical += plain.to_csv().encode() == faded.to_csv().encode()
    model = random_model(rng, buffer_range=(6, 10), powers=(2, 3))
    channel = gilbert_elliott(model, 0.1, 0.3, 0.4)
    price = 0.5
    solve = average_cost_solve(model, price, channel=channel)
    trace = run(Scenario([model], horizon, seed=seed, channels=[channel]), TablePolicy([solve.policy]))
    series = trace.cost_series() + price * trace.power_series()
    se = batch_means_se(series)
    z = abs(series.mean() - solve.gain) / se if se > 0 else 0.0
    ok = identical == n_seeds and within_se(series.mean(), solve.gain, se)
    return CriterionResult(10, "fading reduction", ok,
                           f"C=1 byte-identical {identical}/{n_seeds}; 2-state channel |z| {z:.2f}")


CRITERIA = {1: criterion_1, 2: criterion_2, 3: criterion_3, 4: criterion_4, 5: criterion_5,
            6: criterion_6, 7: criterion_7, 8: criterion_8, 9: criterion_9, 10: criterion_10}

SCALED = {  # smoke-run sizes: (kwarg, full value)
    1: ("n_models", 200), 2: ("n_models", 200), 3: ("n_instances", 50), 4: ("n_instances", 20),
    5: ("n_instances", 10), 6: ("n_models", 100), 7: ("horizon", 10**6), 8: ("steps", 10**6),
    9: ("horizon", 10**6), 10: ("horizon", 10**6),
}


def run_criteria(numbers=None, scale: float = 1.0, seed: int = 0, report=None) -> list[CriterionResult]:
    results = []
    for k in numbers or sorted(CRITERIA):
        kwargs = {"seed": seed}
        if scale != 1.0:
            name, full = SCALED[k]
            kwargs[name] = max(1 if full < 1000 else 1000, int(round(full * scale)))
        result = CRITERIA[k](**kwargs)
        if report is not None:
            report(result.line())
        results.append(result)
    return results
