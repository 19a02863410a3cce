"""Exact policy evaluation, the dual function and subgradient price ascent.

The AP posts a power price; every client solves its own priced average-cost
problem and reports its average power; the AP moves the price toward the
budget.  Iterations run on the concave, piecewise-linear dual function.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np
from scipy.sparse import csr_matrix
from scipy.sparse.csgraph import breadth_first_order, connected_components

from .core import ChannelModel, ClientModel, TabularMDP, as_models, client_mdp
from .mdp import DEFAULT_TOL, PolicyTable, SolveResult, average_cost_solve


class DegenerateChainError(RuntimeError):
    pass


@dataclass(frozen=True, eq=False)
class PolicyStats:
    """Long-run averages of one client's policy, started from a full buffer."""

    distribution: np.ndarray
    qoe_cost: float
    power: float
    outage_fraction: float
    outage_period_rate: float
    quality_cost: float

    def priced_cost(self, price: float) -> float:
        return self.qoe_cost + price * self.power


def long_run_distribution(P: np.ndarray, start: int) -> np.ndarray:
    """Cesaro-limit distribution of a finite chain started in ``start``.

    Restricts to states reachable from ``start``; if several closed classes
    are reachable the class distributions are weighted by absorption
    probabilities.
    """
    S = P.shape[0]
    graph = csr_matrix(P > 0)
    reach = np.sort(breadth_first_order(graph, start, directed=True, return_predecessors=False))
    sub = P[np.ix_(reach, reach)]
    n_comp, labels = connected_components(csr_matrix(sub > 0), directed=True, connection="strong")
    mu = np.zeros(S)
    closed = []
    for k in range(n_comp):
        members = np.flatnonzero(labels == k)
        outside = np.flatnonzero(labels != k)
        if not np.any(sub[np.ix_(members, outside)] > 0):
            closed.append(members)
    closed_set = np.concatenate(closed)
    transient = np.setdiff1d(np.arange(len(reach)), closed_set)
    start_local = int(np.searchsorted(reach, start))
    for members in closed:
        block = sub[np.ix_(members, members)]
        n = len(members)
        A = np.vstack([block.T - np.eye(n), np.ones((1, n))])
        rhs = np.zeros(n + 1)
        rhs[-1] = 1.0
        pi, *_ = np.linalg.lstsq(A, rhs, rcond=None)
        if not np.allclose(A @ pi, rhs, atol=1e-10):
            raise DegenerateChainError(f"stationary solve failed on class {reach[members].tolist()}")
        if start_local in members:
            weight = 1.0
        elif start_local in transient:
            Ptt = sub[np.ix_(transient, transient)]
            to_class = sub[np.ix_(transient, members)].sum(axis=1)
            try:
                absorb = np.linalg.solve(np.eye(len(transient)) - Ptt, to_class)
            except np.linalg.LinAlgError as exc:
                raise DegenerateChainError("transient block is singular") from exc
            weight = float(absorb[np.searchsorted(transient, start_local)])
        else:
            weight = 0.0
        mu[reach[members]] += weight * pi
    mu = np.clip(mu, 0.0, None)
    return mu / mu.sum()


def evaluate_mdp_policy(mdp: TabularMDP, flat: np.ndarray) -> PolicyStats:
    P, _ = mdp.policy_matrix(flat)
    mu = long_run_distribution(P, mdp.start)
    rows = np.arange(mdp.n_states)

    def avg(table):
        return float(mu @ table[rows, flat])

    if mdp.parts is None:
        nan = float("nan")
        return PolicyStats(mu, avg(mdp.qoe_cost), avg(mdp.power), nan, nan, nan)
    return PolicyStats(mu, avg(mdp.qoe_cost), avg(mdp.power), avg(mdp.parts["outage"]),
                       avg(mdp.parts["new_period"]), avg(mdp.parts["quality"]))


def evaluate_policy(model: ClientModel, policy: PolicyTable, channel: ChannelModel | None = None) -> PolicyStats:
    mdp = client_mdp(model, 0.0, channel)
    return evaluate_mdp_policy(mdp, policy.flat)


@dataclass(eq=False)
class DualValue:
    value: float
    client_values: list[float]
    client_power: list[float]
    client_cost: list[float]
    policies: list[PolicyTable]
    solves: list[SolveResult] = field(repr=False, default_factory=list)

    @property
    def total_power(self) -> float:
        return float(sum(self.client_power))

    @property
    def total_cost(self) -> float:
        return float(sum(self.client_cost))


def dual_value(models: Sequence[ClientModel] | ClientModel, price: float, power_budget: float,
               channels: Sequence[ChannelModel | None] | None = None, tol: float = DEFAULT_TOL,
               warm: Sequence[np.ndarray] | None = None) -> DualValue:
    """``D(price) = sum_n V_n(price) - price * budget`` with each client solved on its own."""
    if price < 0:
        raise ValueError("price must be >= 0")
    if power_budget < 0:
        raise ValueError("power budget must be >= 0")
    models = as_models(models)
    channels = list(channels) if channels is not None else [None] * len(models)
    values, power, cost, policies, solves = [], [], [], [], []
    for n, (model, channel) in enumerate(zip(models, channels)):
        result = average_cost_solve(model, price, tol, channel, h0=None if warm is None else warm[n])
        stats = evaluate_policy(model, result.policy, channel)
        values.append(float(result.gain))
        power.append(stats.power)
        cost.append(stats.qoe_cost)
        policies.append(result.policy)
        solves.append(result)
    return DualValue(float(sum(values) - price * power_budget), values, power, cost, policies, solves)


def subgradient(models: Sequence[ClientModel] | ClientModel, price: float, power_budget: float,
                channels: Sequence[ChannelModel | None] | None = None, tol: float = DEFAULT_TOL) -> float:
    """Budget minus total optimal power at ``price``.

    This is the negated slope of the dual function; the price update
    ``price - step * subgradient`` therefore ascends the dual.
    """
    return float(power_budget - dual_value(models, price, power_budget, channels, tol).total_power)


@dataclass
class StepSchedule:
    """Diminishing step sizes ``a / (k + b)``."""

    a: float = 1.0
    b: float = 10.0

    def __call__(self, k: int) -> float:
        return self.a / (k + self.b)


@dataclass
class PriceState:
    price: float = 0.0
    k: int = 0
    schedule: StepSchedule = field(default_factory=StepSchedule)
    history: list[tuple] = field(default_factory=list)

    def record(self, dual: float, grad: float, total_power: float, feasible: bool) -> None:
        self.history.append((self.k, self.price, dual, grad, total_power, feasible))

    def step(self, grad: float) -> float:
        self.price = max(0.0, self.price - self.schedule(self.k) * grad)
        self.k += 1
        return self.price


@dataclass(eq=False)
class PriceResult:
    price: float
    dual: float
    policies: list[PolicyTable]
    converged: bool
    constraint_violation: float
    slackness_residual: float
    mixed_policies: tuple | None
    mixed_power: float
    mixed_cost: float
    history: list[tuple]
    deterministic_violation: float
    duality_gap: float = float("nan")

    def as_report(self) -> dict:
        return {
            "price": self.price,
            "dual_value": self.dual,
            "converged": self.converged,
            "constraint_violation": self.constraint_violation,
            "complementary_slackness_residual": self.slackness_residual,
            "deterministic_constraint_violation": self.deterministic_violation,
            "mixed_power": self.mixed_power,
            "mixed_cost": self.mixed_cost,
            "duality_gap": self.duality_gap,
            "iterations": len(self.history),
        }


HISTORY_COLUMNS = ("k", "price", "dual_value", "subgradient", "total_power", "feasible")


def write_history(path, history, header_comment: str | None = None) -> None:
    with open(path, "w", newline="") as fh:
        if header_comment:
            fh.write(f"# {header_comment}\n")
        writer = csv.writer(fh)
        writer.writerow(HISTORY_COLUMNS)
        for row in history:
            writer.writerow([row[0], repr(row[1]), repr(row[2]), repr(row[3]), repr(row[4]), int(row[5])])


def price_iteration(models: Sequence[ClientModel] | ClientModel, power_budget: float,
                    schedule: StepSchedule | None = None, max_iters: int = 500, tol: float = 1e-9,
                    tol_feas: float | None = None, initial_price: float = 0.0, patience: int = 50,
                    refine: bool = True, channels: Sequence[ChannelModel | None] | None = None,
                    solver_tol: float = DEFAULT_TOL,
                    callback: Callable[[tuple], None] | None = None) -> PriceResult:
    """Projected subgradient ascent on the dual, followed by primal recovery.

    The subgradient phase stops when the best dual value has improved by
    less than ``tol`` over ``patience`` iterations.  With ``refine`` the two
    bracketing price lines seen so far are intersected repeatedly, which
    lands exactly on the dual maximiser of the piecewise-linear dual; the
    two optimal bundles on either side are then time-shared so the budget
    is met with equality (a deterministic bundle generally cannot).
    """
    if power_budget <= 0:
        raise ValueError("power budget must be > 0 (Slater point)")
    models = as_models(models)
    channels = list(channels) if channels is not None else [None] * len(models)
    tol_feas = 1e-3 * power_budget if tol_feas is None else tol_feas
    state = PriceState(initial_price, 0, schedule or StepSchedule())
    seen: dict[float, DualValue] = {}

    def evaluate(price: float) -> DualValue:
        if price not in seen:
            seen[price] = dual_value(models, price, power_budget, channels, solver_tol)
        return seen[price]

    best_price, best = None, -np.inf
    last_improvement = 0
    for it in range(max_iters):
        dv = evaluate(state.price)
        grad = power_budget - dv.total_power
        feasible = dv.total_power <= power_budget + tol_feas
        state.record(dv.value, grad, dv.total_power, feasible)
        if callback is not None:
            callback(state.history[-1])
        if dv.value > best + tol:
            last_improvement = it
        if dv.value > best:
            best, best_price = dv.value, state.price
        if it - last_improvement >= patience:
            break
        state.step(grad)

    if refine:
        best_price = _refine_kink(evaluate, power_budget, best_price)
    dv = evaluate(best_price)
    left, right = _bracket(seen, power_budget, best_price)
    if best_price == 0.0 and dv.total_power <= power_budget:
        mixed, theta = None, None
        mixed_power, mixed_cost = dv.total_power, dv.total_cost
    elif left is not None and right is not None:
        theta = (power_budget - right.total_power) / (left.total_power - right.total_power)
        mixed = (left.policies, right.policies, theta)
        mixed_power = theta * left.total_power + (1 - theta) * right.total_power
        mixed_cost = theta * left.total_cost + (1 - theta) * right.total_cost
    else:
        mixed = None
        mixed_power, mixed_cost = dv.total_power, dv.total_cost
    violation = mixed_power - power_budget
    # a feasible primal whose cost equals the dual value certifies optimality
    gap = mixed_cost - dv.value
    certified = violation <= tol_feas and gap <= 1e-6 * max(1.0, abs(dv.value))
    stagnated = len(state.history) < max_iters
    return PriceResult(
        price=best_price, dual=dv.value, policies=dv.policies,
        converged=bool(certified or (stagnated and violation <= tol_feas)),
        duality_gap=float(gap),
        constraint_violation=float(violation), slackness_residual=float(best_price * violation),
        mixed_policies=mixed, mixed_power=float(mixed_power), mixed_cost=float(mixed_cost),
        history=state.history, deterministic_violation=float(dv.total_power - power_budget),
    )


def _bracket(seen: dict, budget: float, center: float):
    """Optimal bundles at ``center`` using more / no more power than the budget."""
    here = seen[center]
    left = right = None
    for price, dv in seen.items():
        if abs(price - center) > 0:
            # a bundle from another price counts only if it is also optimal at center
            line = dv.total_cost + center * (dv.total_power - budget)
            if line > here.value + 1e-9 * max(1.0, abs(here.value)):
                continue
        if dv.total_power > budget and (left is None or dv.total_power < left.total_power):
            left = dv
        if dv.total_power <= budget and (right is None or dv.total_power > right.total_power):
            right = dv
    return left, right


def _refine_kink(evaluate, budget: float, start: float, max_rounds: int = 200) -> float:
    """Exact maximiser of the piecewise-linear dual near ``start``.

    Each evaluated bundle gives a line ``cost + price * (power - budget)``
    that upper-bounds the dual and touches it at the evaluated price.
    """
    dv = evaluate(start)
    if start == 0.0 and dv.total_power <= budget:
        return 0.0
    points = {start: dv}
    if dv.total_power <= budget and start > 0.0:
        lo = start
        while True:
            lo = lo / 2 if lo > 1e-12 else 0.0
            points[lo] = evaluate(lo)
            if points[lo].total_power > budget or lo == 0.0:
                break
        if lo == 0.0 and points[lo].total_power <= budget:
            return 0.0
    else:
        hi = max(start, 1e-3)
        while evaluate(hi).total_power > budget:
            hi *= 2
            if hi > 1e12:
                raise RuntimeError("no finite price meets the power budget")
        points[hi] = evaluate(hi)
    for _ in range(max_rounds):
        above = [(p, d) for p, d in points.items() if d.total_power > budget]
        below = [(p, d) for p, d in points.items() if d.total_power <= budget]
        pl, dl = max(above, key=lambda t: t[0])
        pr, dr = min(below, key=lambda t: t[0])
        slope_l, slope_r = dl.total_power - budget, dr.total_power - budget
        cross = (dr.total_cost - dl.total_cost) / (slope_l - slope_r)
        cross = min(max(cross, pl), pr)
        dx = evaluate(cross)
        points[cross] = dx
        line = dl.total_cost + cross * slope_l
        if dx.value >= line - 1e-10 * max(1.0, abs(line)) or cross in (pl, pr):
            return cross
    return max(points, key=lambda p: points[p].value)
