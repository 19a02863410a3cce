"""Indexability checks, Whittle indices and index schedulers.

The prioritisation problem gives each client two options per slot: idle, or
transmit one fixed (quality, power) pair on one of ``M`` channels.  The
relaxed single-client problem charges a price ``lam`` per transmission
instead of per unit energy.  A binary client is therefore tabulated as a
:class:`ClientModel` with one quality and power levels ``(0, 1)`` so that the
generic solvers charge exactly ``lam`` on the transmit action.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .core import Action, ClientModel, ModelError, client_mdp
from .mdp import average_cost_solve, evaluate_average, solve_average_pi

IDLE, TRANSMIT = 0, 1
BISECTION_TOL = 1e-6
BELLMAN_TOL = 1e-8


class SingularSystemError(np.linalg.LinAlgError):
    """The threshold indifference system has no unique solution."""


@dataclass(frozen=True, eq=False)
class BinaryClientModel:
    """A client restricted to idling or one transmit action ``(quality, power)`` of ``base``."""

    base: ClientModel
    quality: int = 0
    power: int = 1

    def __post_init__(self):
        if not (0 <= self.quality < self.base.n_qualities and 1 <= self.power < self.base.n_powers):
            raise ModelError("transmit action must use a valid quality and a nonzero power level")
        if self.success <= 0:
            raise ModelError("transmit action must have positive success probability")
        m = self.base
        priced = ClientModel(m.buffer_capacity, m.playtime_per_packet, [m.quality_disutilities[self.quality]],
                             [0.0, 1.0], [[0.0, self.success]], m.outage_period_weight, strict=False)
        object.__setattr__(self, "_model", priced)

    @classmethod
    def coerce(cls, model: "BinaryClientModel | ClientModel") -> "BinaryClientModel":
        if isinstance(model, BinaryClientModel):
            return model
        if model.n_qualities != 1 or model.n_powers != 2:
            raise ModelError("a plain ClientModel needs exactly one quality and two power levels to be binary")
        return cls(model)

    @property
    def success(self) -> float:
        return float(self.base.success_prob[self.quality, self.power])

    @property
    def model(self) -> ClientModel:
        """Two-action model whose unit 'energy' on transmit is one channel use."""
        return self._model

    @property
    def transmit_action(self) -> Action:
        return Action(self.quality, self.power)

    @property
    def n_states(self) -> int:
        return self.base.n_states

    def default_price_cap(self) -> float:
        m = self.base
        return m.buffer_capacity * (1.0 + m.outage_period_weight + max(m.quality_disutilities))


@dataclass(frozen=True)
class PassiveSet:
    price: float
    states: frozenset


@dataclass
class IndexabilityReport:
    passed: bool
    violation: tuple | None  # (lam1, lam2, states passive at lam1 but not lam2)
    passive_sets: list

    def __bool__(self):
        return self.passed


@dataclass(eq=False)
class IndexTable:
    """Whittle indices ``W(l)`` for ``l = 0..B`` of one client (units: price)."""

    indices: np.ndarray
    price_cap: float
    tol: float

    def __getitem__(self, l: int) -> float:
        return float(self.indices[l])

    def __len__(self) -> int:
        return len(self.indices)


@dataclass(eq=False)
class ThresholdSolution:
    """Solution of the indifference system for threshold ``k``."""

    threshold: int
    price: float
    gain: float
    bias: np.ndarray
    optimal: bool  # the threshold policy satisfies the Bellman equation at ``price``
    bellman_gap: float
    zero_action: int = TRANSMIT
    degenerate: bool = False  # refilling from outage ties with permanent outage: bias not unique

    @property
    def computable(self) -> bool:
        return self.optimal and not self.degenerate and self.price >= 0


def _solve(binary: BinaryClientModel, price: float, warm=None):
    """Passive states and the optimal policy at ``price``.

    Policy iteration gives exact ties near an index; relative value
    iteration is the fallback for the multichain case (delivery certain).
    """
    if price < 0:
        raise ValueError("price must be >= 0")
    try:
        result = solve_average_pi(client_mdp(binary.model, price), warm)
    except np.linalg.LinAlgError:
        result = average_cost_solve(binary.model, price)
    return frozenset(np.flatnonzero(result.flat_policy == IDLE).tolist()), result.flat_policy


def passive_set(model: BinaryClientModel | ClientModel, price: float) -> PassiveSet:
    """States where idling is optimal at transmission price ``price`` (idle wins ties)."""
    states, _ = _solve(BinaryClientModel.coerce(model), price)
    return PassiveSet(float(price), states)


def check_nested(passive_sets: Sequence[PassiveSet]) -> IndexabilityReport:
    """Check ``S(lam1) <= S(lam2)`` for consecutive prices, which must be ascending."""
    sets = list(passive_sets)
    for a, b in zip(sets, sets[1:]):
        if b.price < a.price:
            raise ValueError("passive sets must be sorted by price")
        missing = a.states - b.states
        if missing:
            return IndexabilityReport(False, (a.price, b.price, sorted(missing)), sets)
    return IndexabilityReport(True, None, sets)


def check_indexability(model: BinaryClientModel | ClientModel, price_grid: Sequence[float]) -> IndexabilityReport:
    binary = BinaryClientModel.coerce(model)
    grid = [float(p) for p in price_grid]
    if any(b < a for a, b in zip(grid, grid[1:])):
        raise ValueError("price grid must be ascending")
    sets, warm = [], None
    for price in grid:
        states, warm = _solve(binary, price, warm)
        sets.append(PassiveSet(price, states))
    return check_nested(sets)


def whittle_index(model: BinaryClientModel | ClientModel, l: int, price_cap: float | None = None,
                  tol: float = BISECTION_TOL) -> float:
    """Smallest price at which idling is optimal in state ``l``, by bisection.

    Returns the midpoint of the final bracket, or ``0`` when ``l`` is already
    passive at price zero.
    """
    if tol <= 0:
        raise ValueError("tol must be > 0")
    binary = BinaryClientModel.coerce(model)
    if not 0 <= l < binary.n_states:
        raise ValueError(f"state {l} outside 0..{binary.n_states - 1}")
    hi = binary.default_price_cap() if price_cap is None else float(price_cap)
    states, warm = _solve(binary, 0.0)
    if l in states:
        return 0.0
    states, _ = _solve(binary, hi)
    if l not in states:
        raise ValueError(f"state {l} is still active at price cap {hi}")
    lo = 0.0
    while hi - lo > tol:
        mid = 0.5 * (lo + hi)
        states, policy = _solve(binary, mid, warm)
        if l in states:
            hi = mid
        else:
            lo, warm = mid, policy
    return 0.5 * (lo + hi)


def index_table(model: BinaryClientModel | ClientModel, price_cap: float | None = None,
                tol: float = BISECTION_TOL) -> IndexTable:
    binary = BinaryClientModel.coerce(model)
    cap = binary.default_price_cap() if price_cap is None else float(price_cap)
    values = np.array([whittle_index(binary, l, cap, tol) for l in range(binary.n_states)])
    return IndexTable(values, cap, tol)


def whittle_linear_solve(model: BinaryClientModel | ClientModel, threshold: int,
                         zero_action: int | None = None) -> ThresholdSolution:
    """Indifference price of the threshold policy 'transmit below ``threshold``'.

    Unknowns are the gain ``A``, the bias ``V(0..B)`` and the price ``lam``.
    Each state contributes ``V(x) + A = c(x,u) + lam*u + sum_y P_u(x,y) V(y)``
    for its policy action, the threshold state contributes both actions, and
    ``V(0) = 0`` pins the bias.

    The outage state 0 is refilled at a discount (a failed slot there opens
    no new outage period), so its index can sit below ``W(1)``.  With
    ``zero_action=None`` state 0 is tried active first and then passive, and
    the first solution satisfying the Bellman equation is returned (else the
    active one).
    """
    if zero_action is None:
        first = whittle_linear_solve(model, threshold, TRANSMIT)
        if first.computable:
            return first
        try:
            second = whittle_linear_solve(model, threshold, IDLE)
        except SingularSystemError:
            return first
        return second if second.computable else first
    binary = BinaryClientModel.coerce(model)
    n = binary.n_states
    top = binary.base.last_refill_state
    if not 1 <= threshold <= top:
        raise ValueError(f"threshold must lie in 1..{top}")
    mdp = client_mdp(binary.model, 0.0)
    P = mdp.transition_matrices()
    cost = mdp.qoe_cost
    chosen = np.where(np.arange(n) < threshold, TRANSMIT, IDLE)
    chosen[0] = zero_action
    rows, rhs = [], []

    def balance(x, u):
        row = np.zeros(n + 2)
        row[0] = 1.0
        row[1:n + 1] = -P[u, x]
        row[1 + x] += 1.0
        row[n + 1] = -float(u)
        rows.append(row)
        rhs.append(cost[x, u])

    for x in range(n):
        balance(x, chosen[x])
        if x == threshold:
            balance(x, TRANSMIT)
    pin = np.zeros(n + 2)
    pin[1] = 1.0
    rows.append(pin)
    rhs.append(0.0)
    M = np.array(rows)
    if np.linalg.cond(M) > 1e12:
        raise SingularSystemError(f"indifference system for threshold {threshold} is singular")
    z = np.linalg.solve(M, np.array(rhs))
    gain, bias, price = float(z[0]), z[1:n + 1], float(z[n + 1])
    q = cost + price * np.array([0.0, 1.0])[None, :] + np.einsum("ust,t->su", P, bias)
    gap = float(np.max(q[np.arange(n), chosen] - q.min(axis=1)))
    degenerate = False
    if zero_action == IDLE:
        # permanent outage must beat refilling from 0, else two optimal gains coexist
        refill = chosen.copy()
        refill[0] = TRANSMIT
        try:
            refill_gain, _ = evaluate_average(client_mdp(binary.model, max(price, 0.0)), refill)
            degenerate = refill_gain <= gain + BELLMAN_TOL
        except np.linalg.LinAlgError:
            degenerate = True
    return ThresholdSolution(threshold, price, gain, bias, gap <= BELLMAN_TOL, gap, int(zero_action), degenerate)


def top_m_scheduler(index_tables: Sequence[IndexTable | Sequence[float]], states: Sequence[int],
                    n_channels: int) -> tuple[int, ...]:
    """Clients to activate: the ``n_channels`` largest positive indices, lowest id on ties."""
    if n_channels < 1:
        raise ValueError("need at least one channel")
    values = [float(table[l]) for table, l in zip(index_tables, states)]
    order = sorted(range(len(values)), key=lambda n: (-values[n], n))
    return tuple(n for n in order[:n_channels] if values[n] > 0)


class WhittlePolicy:
    """Top-M index scheduler bound to each client's transmit action."""

    def __init__(self, index_tables: Sequence[IndexTable], transmit_actions: Sequence[int], n_channels: int):
        self.tables = [np.asarray(t.indices if isinstance(t, IndexTable) else t, dtype=float) for t in index_tables]
        self.transmit_actions = [int(a) for a in transmit_actions]
        self.n_channels = int(n_channels)

    def decide(self, states, channel_states=None, rng=None) -> list[int]:
        actions = [0] * len(self.tables)
        for n in top_m_scheduler(self.tables, states, self.n_channels):
            actions[n] = self.transmit_actions[n]
        return actions


class SeparableIndexPolicy:
    """One-step lookahead index for clients with several (quality, power) options.

    A client's index in state ``l`` is the advantage of its best transmit
    action over idling, ``Q(l, idle) - min_u Q(l, u)``, with
    ``Q(l, u) = C(l, u) + P(u) V(S(l)) + (1 - P(u)) V(F(l))`` and ``V`` the
    average-cost bias supplied per client.  Up to ``n_channels`` clients with
    positive advantage transmit with their minimising action.
    """

    def __init__(self, models: Sequence[ClientModel], values: Sequence[np.ndarray], n_channels: int,
                 price: float = 0.0):
        if n_channels < 1:
            raise ValueError("need at least one channel")
        self.n_channels = int(n_channels)
        self.advantage, self.best = [], []
        for model, v in zip(models, values):
            mdp = client_mdp(model, price)
            v = np.asarray(v, dtype=float).reshape(-1)
            q = mdp.cost + np.einsum("sak,sak->sa", mdp.prob, v[mdp.next_state])
            active = np.repeat(np.arange(model.n_powers), model.n_qualities) > 0
            idle = q[:, ~active].min(axis=1)
            q_active = np.where(active[None, :], q, np.inf)
            best = np.argmin(q_active, axis=1)
            self.advantage.append(idle - q_active[np.arange(len(best)), best])
            self.best.append(best)

    def choose(self, states) -> dict[int, int]:
        """Selected client -> flat action."""
        chosen = top_m_scheduler(self.advantage, states, self.n_channels)
        return {n: int(self.best[n][states[n]]) for n in chosen}

    def decide(self, states, channel_states=None, rng=None) -> list[int]:
        actions = [0] * len(self.best)
        for n, a in self.choose(states).items():
            actions[n] = a
        return actions


def separable_value_index(models: Sequence[ClientModel], values: Sequence[np.ndarray], states: Sequence[int],
                          n_channels: int, price: float = 0.0) -> dict[int, Action]:
    """Selected clients with their actions under the separable-value index."""
    policy = SeparableIndexPolicy(models, values, n_channels, price)
    return {n: models[n].action_at(a) for n, a in policy.choose(states).items()}


INDEX_COLUMNS = ("client", "state", "index")


def write_index_tables(path, tables: Sequence[IndexTable], header_comment: str | None = None) -> None:
    with open(path, "w", newline="") as fh:
        if header_comment:
            fh.write(f"# {header_comment}\n")
        writer = csv.writer(fh)
        writer.writerow(INDEX_COLUMNS)
        for n, table in enumerate(tables):
            for l, w in enumerate(table.indices):
                writer.writerow([n, l, repr(float(w))])
