"""Tabular Q-learning for one client, the Boltzmann index policy and two-timescale price learning.

Q-values track costs, so exploration samples from a softmin
``exp(-tau * Q)``; the literal ``exp(+tau * Q)`` form is kept behind
``literal_sign`` for comparison only.  Two targets are supported:

* ``"relative"``: ``Q(l,u) += b * (c + min Q(l',.) - f(Q) - Q(l,u))`` with
  ``f(Q) = min_u Q(l_ref, u)``; ``f(Q)`` estimates the average cost.
* ``"discounted"``: ``Q(l,u) += b * (c + gamma * min Q(l',.) - Q(l,u))``.

Costs fed to the learner are the realised ones: the outage indicator, the
quality disutility of a delivered packet, the price times the energy spent
and the outage-period weight when the buffer runs dry.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from typing import Sequence

import numpy as np

from .core import ClientModel, as_models, successor_tables

RELATIVE, DISCOUNTED = "relative", "discounted"
DEFAULT_DISCOUNT = 0.99
CHECKPOINT_VERSION = 1


class ScheduleError(ValueError):
    """Step-size schedules violate the stochastic-approximation conditions."""


@dataclass(frozen=True)
class Schedules:
    """Step sizes and exploration.

    ``learning_rate(n) = 1/(1+n)**lr_exponent`` per state-action visit count,
    ``price_step(t) = 1/(1+t)**price_exponent`` per slot and
    ``temperature(t) = temperature_scale * log(1+t)``.
    """

    lr_exponent: float = 0.7
    price_exponent: float = 0.85
    temperature_scale: float = 0.1
    exploration: str = "boltzmann"  # or "epsilon"
    epsilon: float = 0.1
    literal_sign: bool = False
    rate_kind: str = "polynomial"  # or "rescaled_linear": 1/(1 + (1-gamma) n) for discounted targets
    rate_discount: float = DEFAULT_DISCOUNT

    def __post_init__(self):
        if not 0.5 < self.lr_exponent <= 1.0:
            raise ScheduleError("lr_exponent must lie in (0.5, 1] so that sum b = inf and sum b^2 < inf")
        if not 0.5 < self.price_exponent <= 1.0:
            raise ScheduleError("price_exponent must lie in (0.5, 1]")
        if self.exploration not in ("boltzmann", "epsilon"):
            raise ScheduleError(f"unknown exploration {self.exploration!r}")
        if not 0.0 <= self.epsilon <= 1.0:
            raise ScheduleError("epsilon must lie in [0, 1]")
        if self.temperature_scale < 0:
            raise ScheduleError("temperature_scale must be >= 0")
        if self.rate_kind not in ("polynomial", "rescaled_linear"):
            raise ScheduleError(f"unknown rate_kind {self.rate_kind!r}")
        if not 0.0 <= self.rate_discount < 1.0:
            raise ScheduleError("rate_discount must lie in [0, 1)")

    def learning_rate(self, n: int) -> float:
        if self.rate_kind == "rescaled_linear":
            return 1.0 / (1.0 + (1.0 - self.rate_discount) * n)
        return 1.0 / (1.0 + n) ** self.lr_exponent

    def price_step(self, t: int) -> float:
        return 1.0 / (1.0 + t) ** self.price_exponent

    def temperature(self, t: int) -> float:
        return self.temperature_scale * math.log1p(t)

    def check_two_timescale(self) -> None:
        """Price steps must vanish faster than learning rates (alpha_t = o(beta_t))."""
        if self.price_exponent <= self.lr_exponent:
            raise ScheduleError("price_exponent must exceed lr_exponent for a slower price time-scale")


@dataclass(eq=False)
class QTable:
    """Q-values and visit counts of one client, shape (B+1, A)."""

    q: np.ndarray
    counts: np.ndarray
    steps: int = 0

    @classmethod
    def zeros(cls, model: ClientModel, initial: float = 0.0) -> "QTable":
        shape = (model.n_states, model.n_actions)
        return cls(np.full(shape, float(initial)), np.zeros(shape, dtype=np.int64))

    def greedy(self) -> np.ndarray:
        return np.argmin(self.q, axis=1)

    def to_json(self, schedules: Schedules | None = None, extra: dict | None = None) -> str:
        doc = {"version": CHECKPOINT_VERSION, "q": self.q.tolist(), "counts": self.counts.tolist(),
               "steps": self.steps}
        if schedules is not None:
            doc["schedules"] = asdict(schedules)
        if extra:
            doc.update(extra)
        return json.dumps(doc)

    @classmethod
    def from_json(cls, text: str) -> tuple["QTable", Schedules | None]:
        doc = json.loads(text)
        if doc.get("version") != CHECKPOINT_VERSION:
            raise ValueError(f"unsupported checkpoint version {doc.get('version')}")
        table = cls(np.array(doc["q"], dtype=float), np.array(doc["counts"], dtype=np.int64), int(doc["steps"]))
        sched = Schedules(**doc["schedules"]) if "schedules" in doc else None
        return table, sched


def q_update(table: QTable, l: int, u: int, cost: float, l_next: int, rate: float | None = None,
             discount: float = 1.0, offset: float = 0.0, schedules: Schedules | None = None) -> QTable:
    """One stochastic-approximation step on entry ``(l, u)``.

    ``Q(l,u) <- (1-b) Q(l,u) + b (cost + discount * min Q(l_next,.) - offset)``
    with ``b = rate`` or the schedule's rate at the entry's visit count.
    """
    if rate is None:
        rate = (schedules or Schedules()).learning_rate(int(table.counts[l, u]))
    target = cost + discount * float(table.q[l_next].min()) - offset
    table.q[l, u] = (1.0 - rate) * table.q[l, u] + rate * target
    table.counts[l, u] += 1
    table.steps += 1
    return table


def relative_offset(table: QTable, reference_state: int = 0) -> float:
    return float(table.q[reference_state].min())


def softmax_probs(q_row: np.ndarray, tau: float, literal_sign: bool = False) -> np.ndarray:
    """Boltzmann weights over negated costs, stabilised by max-subtraction."""
    if not math.isfinite(tau):
        raise ValueError("temperature must be finite")
    z = (tau if literal_sign else -tau) * np.asarray(q_row, dtype=float)
    z = np.exp(z - z.max())
    return z / z.sum()


def softmax_action(table: QTable | np.ndarray, l: int, tau: float, rng: np.random.Generator | None = None,
                   uniform: float | None = None, literal_sign: bool = False) -> int:
    """Sample an action index by inverse CDF; ``uniform`` overrides the draw."""
    q = table.q if isinstance(table, QTable) else np.asarray(table)
    p = softmax_probs(q[l], tau, literal_sign)
    x = rng.random() if uniform is None else uniform
    return min(int(np.searchsorted(np.cumsum(p), x, side="right")), len(p) - 1)


@dataclass(frozen=True, eq=False)
class _Dynamics:
    """Per-(state, action) tables for sampling realised transitions and costs."""

    up: list
    down: list
    p: list  # p[a]
    energy: list
    disutility: list
    period_weight: float

    @classmethod
    def of(cls, model: ClientModel) -> "_Dynamics":
        up, down = successor_tables(model)
        p, energy, disutility, _ = model.action_arrays()
        return cls(up.tolist(), down.tolist(), p.tolist(), energy.tolist(), disutility.tolist(),
                   model.outage_period_weight)

    def step(self, l: int, a: int, u_delivery: float, price: float):
        """Realised (cost, energy, next state) of action ``a`` in state ``l``."""
        delivered = u_delivery < self.p[a]
        nxt = self.up[l] if delivered else self.down[l]
        cost = (l == 0) + price * self.energy[a]
        if delivered:
            cost += self.disutility[a]
        if l == 1 and nxt == 0:
            cost += self.period_weight
        return cost, self.energy[a], nxt


def _choose(q_row: list, tau: float, u: float, sched: Schedules, greedy_u: float) -> int:
    """Exploration draw shared by the fast loop and the reference path."""
    if sched.exploration == "epsilon":
        if greedy_u < sched.epsilon:
            return min(int(u * len(q_row)), len(q_row) - 1)
        best = min(q_row)
        return q_row.index(best)
    sign = tau if sched.literal_sign else -tau
    zs = [sign * v for v in q_row]
    top = max(zs)
    w = [math.exp(z - top) for z in zs]
    x = u * sum(w)
    acc = 0.0
    for a, wa in enumerate(w):
        acc += wa
        if x < acc:
            return a
    return len(w) - 1


@dataclass(eq=False)
class LearningResult:
    table: QTable
    variant: str
    gain_estimate: float | None
    curve: list = field(default_factory=list)  # (step, gain_estimate or nan, running mean cost)
    mean_cost: float = float("nan")
    mean_power: float = float("nan")
    averaged_q: np.ndarray | None = None  # tail (Polyak-Ruppert) average of the iterates


def _draws(rng: np.random.Generator, n: int):
    return rng.random((n, 3)).tolist()


def q_learning(model: ClientModel, steps: int, seed: int = 0, schedules: Schedules | None = None,
               variant: str = RELATIVE, discount: float = DEFAULT_DISCOUNT, price: float = 0.0,
               reference_state: int = 0, table: QTable | None = None, initial_state: int | None = None,
               curve_every: int = 0, average_from: float | None = None,
               average_every: int = 100) -> LearningResult:
    """Learn Q for one client from a single simulated trajectory.

    Three uniforms per slot drive action choice, the epsilon coin and
    delivery, so runs are reproducible from ``seed``.  With
    ``average_from`` in ``[0, 1)`` the table is also averaged over snapshots
    taken every ``average_every`` steps after that fraction of the run.
    """
    if variant not in (RELATIVE, DISCOUNTED):
        raise ValueError(f"unknown variant {variant!r}")
    sched = schedules or Schedules()
    dyn = _Dynamics.of(model)
    table = table if table is not None else QTable.zeros(model)
    q = table.q.tolist()
    counts = table.counts.tolist()
    gamma = discount if variant == DISCOUNTED else 1.0
    relative = variant == RELATIVE
    ref = q[reference_state]
    lr_exp = sched.lr_exponent
    rescale = 1.0 - sched.rate_discount if sched.rate_kind == "rescaled_linear" else 0.0
    l = model.buffer_capacity if initial_state is None else initial_state
    rng = np.random.default_rng(seed)
    t0 = table.steps
    total_cost = total_power = 0.0
    curve = []
    block = 65536
    draws, k = [], 0
    avg_start = steps if average_from is None else int(average_from * steps)
    acc = [[0.0] * len(row) for row in q]
    n_snap = 0
    for i in range(steps):
        if i >= avg_start and (i - avg_start) % average_every == 0:
            for acc_row, row in zip(acc, q):
                for j, v in enumerate(row):
                    acc_row[j] += v
            n_snap += 1
        if k == len(draws):
            draws, k = _draws(rng, min(block, steps - i)), 0
        u_act, u_eps, u_del = draws[k]
        k += 1
        t = t0 + i
        row = q[l]
        a = _choose(row, sched.temperature_scale * math.log1p(t), u_act, sched, u_eps)
        cost, energy, nxt = dyn.step(l, a, u_del, price)
        total_cost += cost
        total_power += energy
        n = counts[l][a]
        b = 1.0 / (1.0 + rescale * n) if rescale else 1.0 / (1.0 + n) ** lr_exp
        target = cost + gamma * min(q[nxt])
        if relative:
            target -= min(ref)
        row[a] = (1.0 - b) * row[a] + b * target
        counts[l][a] = n + 1
        l = nxt
        if curve_every and (i + 1) % curve_every == 0:
            curve.append((t + 1, min(ref) if relative else float("nan"), total_cost / (i + 1)))
    table.q = np.array(q)
    table.counts = np.array(counts, dtype=np.int64)
    table.steps = t0 + steps
    gain = relative_offset(table, reference_state) if relative else None
    averaged = np.array(acc) / n_snap if n_snap else None
    return LearningResult(table, variant, gain, curve, total_cost / max(steps, 1), total_power / max(steps, 1),
                          averaged)


def q_learning_reference(model: ClientModel, steps: int, seed: int = 0, schedules: Schedules | None = None,
                         variant: str = RELATIVE, discount: float = DEFAULT_DISCOUNT, price: float = 0.0,
                         reference_state: int = 0) -> QTable:
    """Slow path of :func:`q_learning` built from :func:`q_update`; same draws, same result."""
    sched = schedules or Schedules()
    dyn = _Dynamics.of(model)
    table = QTable.zeros(model)
    rng = np.random.default_rng(seed)
    draws = _draws(rng, steps)
    l = model.buffer_capacity
    gamma = discount if variant == DISCOUNTED else 1.0
    for t, (u_act, u_eps, u_del) in enumerate(draws):
        tau = sched.temperature(t)
        if sched.exploration == "boltzmann":
            a = softmax_action(table, l, tau, uniform=u_act, literal_sign=sched.literal_sign)
        else:
            a = _choose(table.q[l].tolist(), tau, u_act, sched, u_eps)
        cost, _, nxt = dyn.step(l, a, u_del, price)
        offset = relative_offset(table, reference_state) if variant == RELATIVE else 0.0
        q_update(table, l, a, cost, nxt, discount=gamma, offset=offset, schedules=sched)
        l = nxt
    return table


@dataclass(eq=False)
class IndexLearningResult:
    tables: list
    mean_cost: float
    curve: list


def q_index_schedule(tables: Sequence[QTable], states: Sequence[int], n_channels: int, tau: float,
                     rng: np.random.Generator, active: Sequence[np.ndarray] | None = None,
                     literal_sign: bool = False) -> dict[int, int]:
    """Sample client-action pairs from the joint Boltzmann law, without replacement.

    Each draw picks a pair ``(n, u)`` with weight ``exp(-tau * Q_n(l_n, u))``
    over transmit actions of clients not yet served; the client is then
    removed.  Returns served client -> action.
    """
    if n_channels < 1:
        raise ValueError("need at least one channel")
    pairs, weights = [], []
    for n, (table, l) in enumerate(zip(tables, states)):
        acts = np.arange(table.q.shape[1]) if active is None else np.flatnonzero(active[n])
        for a in acts:
            pairs.append((n, int(a)))
            weights.append(table.q[l, a])
    if not pairs:
        return {}
    z = (tau if literal_sign else -tau) * np.array(weights)
    w = np.exp(z - z.max())
    chosen: dict[int, int] = {}
    alive = np.ones(len(pairs), dtype=bool)
    while len(chosen) < n_channels and alive.any():
        p = np.where(alive, w, 0.0)
        idx = min(int(np.searchsorted(np.cumsum(p) / p.sum(), rng.random(), side="right")), len(p) - 1)
        while not alive[idx]:  # float edge at the top of the CDF
            idx -= 1
        n, a = pairs[idx]
        chosen[n] = a
        alive &= np.array([m != n for m, _ in pairs])
    return chosen


def q_index_learning(models: Sequence[ClientModel], n_channels: int, steps: int, seed: int = 0,
                     schedules: Schedules | None = None, reference_state: int = 0,
                     curve_every: int = 0) -> IndexLearningResult:
    """Learning index policy: Boltzmann channel allocation plus relative Q-updates.

    Clients left unserved idle; every client updates the entry of the action
    it actually took (idle included), so idle values stay calibrated.
    """
    sched = schedules or Schedules()
    models = as_models(models)
    dyns = [_Dynamics.of(m) for m in models]
    tables = [QTable.zeros(m) for m in models]
    active = [np.repeat(np.arange(m.n_powers), m.n_qualities) > 0 for m in models]
    for table, act in zip(tables, active):
        # idle at another quality is never taken; keep it out of every min
        unused = ~act
        unused[0] = False
        table.q[:, unused] = np.inf
    states = [m.buffer_capacity for m in models]
    rng = np.random.default_rng(seed)
    total, curve = 0.0, []
    for t in range(steps):
        tau = sched.temperature(t)
        served = q_index_schedule(tables, states, n_channels, tau, rng, active, sched.literal_sign)
        for n, (table, dyn) in enumerate(zip(tables, dyns)):
            a = served.get(n, 0)
            cost, _, nxt = dyn.step(states[n], a, rng.random(), 0.0)
            total += cost
            q_update(table, states[n], a, cost, nxt, offset=relative_offset(table, reference_state), schedules=sched)
            states[n] = nxt
        if curve_every and (t + 1) % curve_every == 0:
            curve.append((t + 1, total / (t + 1)))
    return IndexLearningResult(tables, total / max(steps, 1), curve)


class QIndexPolicy:
    """Greedy limit of the Boltzmann allocation: serve the lowest-Q transmit pairs, one per client."""

    def __init__(self, tables: Sequence[QTable], models: Sequence[ClientModel], n_channels: int):
        if n_channels < 1:
            raise ValueError("need at least one channel")
        self.q = [np.asarray(t.q if isinstance(t, QTable) else t, dtype=float) for t in tables]
        self.active = [np.flatnonzero(np.repeat(np.arange(m.n_powers), m.n_qualities) > 0) for m in models]
        self.n_channels = int(n_channels)

    def decide(self, states, channel_states=None, rng=None) -> list[int]:
        pairs = sorted((self.q[n][l, a], n, int(a)) for n, l in enumerate(states) for a in self.active[n])
        actions = [0] * len(self.q)
        served = 0
        for _, n, a in pairs:
            if served == self.n_channels:
                break
            if actions[n] == 0:
                actions[n] = a
                served += 1
        return actions


@dataclass(eq=False)
class TwoTimescaleResult:
    price: float
    price_trace: list  # (slot, price) every ``trace_every`` slots
    tables: list
    realized_power: float  # mean total power over the second half of the horizon
    mean_cost: float
    mean_power: float


def two_timescale_run(models: Sequence[ClientModel] | ClientModel, power_budget: float, horizon: int,
                      seed: int = 0, schedules: Schedules | None = None, initial_price: float = 0.0,
                      reference_state: int = 0, trace_every: int = 1000) -> TwoTimescaleResult:
    """Relative Q-learning per client with a slow projected price update.

    Each slot ``lam <- max(0, lam + alpha_t * (sum_n E_n(t) - budget))`` with
    the energy actually spent; clients see ``lam`` in their realised cost.
    """
    sched = schedules or Schedules()
    sched.check_two_timescale()
    if power_budget < 0:
        raise ValueError("power budget must be >= 0")
    models = as_models(models)
    dyns = [_Dynamics.of(m) for m in models]
    tables = [QTable.zeros(m) for m in models]
    qs = [tb.q.tolist() for tb in tables]
    counts = [tb.counts.tolist() for tb in tables]
    refs = [q[reference_state] for q in qs]
    states = [m.buffer_capacity for m in models]
    rng = np.random.default_rng(seed)
    price = float(initial_price)
    lr_exp, pr_exp, scale = sched.lr_exponent, sched.price_exponent, sched.temperature_scale
    N = len(models)
    trace = [(0, price)]
    half = horizon // 2
    late_power = total_cost = total_power = 0.0
    block = max(1, 65536 // N)
    draws, k = [], 0
    for t in range(horizon):
        if k == len(draws):
            draws, k = rng.random((min(block, horizon - t), N, 3)).tolist(), 0
        slot = draws[k]
        k += 1
        tau = scale * math.log1p(t)
        spent = 0.0
        for n in range(N):
            u_act, u_eps, u_del = slot[n]
            l = states[n]
            row = qs[n][l]
            a = _choose(row, tau, u_act, sched, u_eps)
            cost, energy, nxt = dyns[n].step(l, a, u_del, price)
            c = counts[n][l][a]
            b = 1.0 / (1.0 + c) ** lr_exp
            row[a] = (1.0 - b) * row[a] + b * (cost + min(qs[n][nxt]) - min(refs[n]))
            counts[n][l][a] = c + 1
            states[n] = nxt
            spent += energy
            total_cost += cost - price * energy
        total_power += spent
        if t >= half:
            late_power += spent
        price = max(0.0, price + (spent - power_budget) / (1.0 + t) ** pr_exp)
        if trace_every and (t + 1) % trace_every == 0:
            trace.append((t + 1, price))
    for tb, q, c in zip(tables, qs, counts):
        tb.q, tb.counts, tb.steps = np.array(q), np.array(c, dtype=np.int64), horizon
    return TwoTimescaleResult(price, trace, tables, late_power / max(horizon - half, 1),
                              total_cost / max(horizon, 1), total_power / max(horizon, 1))
