"""Exact single-client solvers, structural checks and brute-force oracles."""

from __future__ import annotations

import itertools
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .core import Action, ChannelModel, ClientModel, TabularMDP, client_mdp, successor_tables

DEFAULT_TOL = 1e-9
MAX_SWEEPS = 1_000_000
TIE_TOL = 1e-9
APERIODICITY = 0.5
ORACLE_CAP = 10**7
PRODUCT_STATE_CAP = 10**6


class ConvergenceError(RuntimeError):
    """An iterative solver hit its sweep cap before meeting its tolerance."""


class InstanceTooLarge(ValueError):
    pass


@dataclass(frozen=True, eq=False)
class PolicyTable:
    """Deterministic stationary policy as flat action indices, shape (B+1, C)."""

    actions: np.ndarray
    n_qualities: int

    def __post_init__(self):
        arr = np.array(self.actions, dtype=np.int64)
        if arr.ndim == 1:
            arr = arr[:, None]
        arr.setflags(write=False)
        object.__setattr__(self, "actions", arr)

    @classmethod
    def from_flat(cls, flat: np.ndarray, n_qualities: int, n_channel_states: int = 1) -> "PolicyTable":
        return cls(np.asarray(flat).reshape(-1, n_channel_states), n_qualities)

    @classmethod
    def constant(cls, model: ClientModel, action: Action, n_channel_states: int = 1) -> "PolicyTable":
        a = model.action_index(action)
        return cls(np.full((model.n_states, n_channel_states), a), model.n_qualities)

    @classmethod
    def from_actions(cls, model: ClientModel, actions: Sequence[Action]) -> "PolicyTable":
        return cls(np.array([model.action_index(u) for u in actions]), model.n_qualities)

    @property
    def flat(self) -> np.ndarray:
        return self.actions.reshape(-1)

    def action(self, l: int, c: int = 0) -> Action:
        power, quality = divmod(int(self.actions[l, c]), self.n_qualities)
        return Action(quality, power)

    def to_rows(self) -> list[tuple[int, int, int, int]]:
        """(buffer, channel, quality, power) rows."""
        rows = []
        for l in range(self.actions.shape[0]):
            for c in range(self.actions.shape[1]):
                u = self.action(l, c)
                rows.append((l, c, u.quality, u.power))
        return rows


@dataclass(eq=False)
class SolveResult:
    """Outcome of an exact solve.

    ``value`` holds the discounted value function, or the bias ``h`` with
    ``h(reference) = 0`` in the average-cost case (``gain`` is then set).
    """

    value: np.ndarray
    policy: PolicyTable | None
    iterations: int
    residual: float
    gain: float | None = None
    q_values: np.ndarray | None = None
    residuals: list[float] = field(default_factory=list, repr=False)
    flat_policy: np.ndarray | None = None
    joint_actions: np.ndarray | None = None


@dataclass(frozen=True)
class DFunction:
    """Refill advantage ``D(x)`` for ``x = 1..B-T+1`` at one stage (per channel state)."""

    stage: int
    beta: float
    values: np.ndarray  # shape (B-T+1, C)

    def __call__(self, x: int, c: int = 0) -> float:
        return float(self.values[x - 1, c])


@dataclass
class CheckReport:
    passed: bool
    violations: list = field(default_factory=list)

    def __bool__(self):
        return self.passed


def bellman_q(mdp: TabularMDP, v: np.ndarray, beta: float = 1.0) -> np.ndarray:
    return mdp.cost + beta * np.einsum("sak,sak->sa", mdp.prob, v[mdp.next_state])


def greedy(q: np.ndarray, tie_tol: float = TIE_TOL) -> np.ndarray:
    """Row-wise argmin; among actions within ``tie_tol`` of the minimum the lowest index wins."""
    best = q.min(axis=-1, keepdims=True)
    return np.argmax(q <= best + tie_tol, axis=-1)


def _as_mdp(model, price: float, channel: ChannelModel | None) -> TabularMDP:
    if isinstance(model, TabularMDP):
        return model
    return client_mdp(model, price, channel)


def _policy_from(model, flat: np.ndarray, mdp: TabularMDP) -> PolicyTable | None:
    if isinstance(model, ClientModel):
        return PolicyTable.from_flat(flat, model.n_qualities, mdp.n_channel_states)
    return None


def _check_beta(beta: float) -> None:
    if not 0 < beta < 1:
        raise ValueError(f"discount factor must lie in (0, 1), got {beta}")


def backward_induction(model: ClientModel, price: float, beta: float, horizon: int,
                       channel: ChannelModel | None = None) -> tuple[list[np.ndarray], list[DFunction]]:
    """Finite-horizon discounted recursion from ``V^0 = 0``.

    Returns ``[V^0, ..., V^horizon]`` (each of shape (B+1, C)) and
    ``[D_1, ..., D_horizon]`` where ``D_s`` is built from ``V^{s-1}``.
    """
    _check_beta(beta)
    if horizon < 1:
        raise ValueError("horizon must be >= 1")
    mdp = client_mdp(model, price, channel)
    C = mdp.n_channel_states
    values = [np.zeros(mdp.n_states)]
    d_functions = []
    for s in range(1, horizon + 1):
        d_functions.append(d_from_values(model, values[-1].reshape(-1, C), beta, s, channel))
        values.append(bellman_q(mdp, values[-1], beta).min(axis=1))
    return [v.reshape(-1, C) for v in values], d_functions


def d_from_values(model: ClientModel, values: np.ndarray, beta: float, stage: int = 0,
                  channel: ChannelModel | None = None) -> DFunction:
    """``D(x) = 1{x=1} lam_O + beta * E_c'[V(F(x), c') - V(S(x), c')]`` for ``x = 1..B-T+1``.

    ``values`` has shape (B+1, C); ``stage = 0`` marks a stationary value function.
    """
    up, down = successor_tables(model)
    xs = np.arange(1, model.last_refill_state + 1)
    pi = np.eye(1) if channel is None else channel.transition_matrix
    period = np.where(xs == 1, model.outage_period_weight, 0.0)[:, None]
    gap = (values[down[xs]] - values[up[xs]]) @ pi.T
    return DFunction(stage, beta, period + beta * gap)


def solve_discounted(mdp: TabularMDP, beta: float, tol: float = DEFAULT_TOL, max_iter: int = MAX_SWEEPS,
                     v0: np.ndarray | None = None, tie_tol: float = TIE_TOL) -> SolveResult:
    _check_beta(beta)
    if tol <= 0:
        raise ValueError("tol must be > 0")
    stop = tol * (1 - beta) / (2 * beta)
    v = np.zeros(mdp.n_states) if v0 is None else np.array(v0, dtype=float)
    residuals = []
    for it in range(1, max_iter + 1):
        new = bellman_q(mdp, v, beta).min(axis=1)
        res = float(np.max(np.abs(new - v)))
        residuals.append(res)
        v = new
        if res <= stop:
            q = bellman_q(mdp, v, beta)
            flat = greedy(q, tie_tol)
            return SolveResult(v, None, it, res, q_values=q, residuals=residuals, flat_policy=flat)
    raise ConvergenceError(f"value iteration did not reach {stop:.3g} in {max_iter} sweeps (last {res:.3g})")


def discounted_value_iteration(model: ClientModel | TabularMDP, price: float = 0.0, beta: float = 0.99,
                               tol: float = DEFAULT_TOL, channel: ChannelModel | None = None,
                               max_iter: int = MAX_SWEEPS) -> SolveResult:
    mdp = _as_mdp(model, price, channel)
    result = solve_discounted(mdp, beta, tol, max_iter)
    result.policy = _policy_from(model, result.flat_policy, mdp)
    return result


def solve_average(mdp: TabularMDP, tol: float = DEFAULT_TOL, max_iter: int = MAX_SWEEPS,
                  h0: np.ndarray | None = None, reference: int = 0, tie_tol: float = TIE_TOL) -> SolveResult:
    """Relative value iteration on the aperiodicity-transformed chain.

    The transform ``tau*I + (1-tau)*P`` keeps gains and greedy policies and
    removes the periodic cycles that the buffer dynamics can produce.
    """
    if tol <= 0:
        raise ValueError("tol must be > 0")
    tau = APERIODICITY
    w = np.zeros(mdp.n_states) if h0 is None else np.asarray(h0, dtype=float) / (1 - tau)
    for it in range(1, max_iter + 1):
        th = tau * w + bellman_q(mdp, (1 - tau) * w).min(axis=1)
        diff = th - w
        lo, hi = float(diff.min()), float(diff.max())
        w = th - th[reference]
        if hi - lo <= tol:
            h = (1 - tau) * w
            q = bellman_q(mdp, h)
            flat = greedy(q, tie_tol)
            return SolveResult(h, None, it, hi - lo, gain=0.5 * (hi + lo), q_values=q, flat_policy=flat)
    raise ConvergenceError(f"relative value iteration span {hi - lo:.3g} > {tol} after {max_iter} sweeps")


def evaluate_average(mdp: TabularMDP, flat: np.ndarray, reference: int = 0) -> tuple[float, np.ndarray]:
    """Gain and bias of a unichain policy from ``h + g = c + P h`` with ``h[reference] = 0``."""
    P, c = mdp.policy_matrix(np.asarray(flat))
    S = mdp.n_states
    M = np.eye(S) - P
    M[:, reference] = 1.0  # column of h[reference] now carries g
    z = np.linalg.solve(M, c)
    if not np.all(np.isfinite(z)) or np.linalg.cond(M) > 1e12:
        raise np.linalg.LinAlgError("policy is not unichain")
    g = float(z[reference])
    h = z.copy()
    h[reference] = 0.0
    return g, h


def solve_average_pi(mdp: TabularMDP, flat0: np.ndarray | None = None, tie_tol: float = TIE_TOL,
                     max_iter: int = 10_000) -> SolveResult:
    """Howard policy iteration for unichain models.

    The improvement step keeps the current action unless another one is
    better by more than ``tie_tol``; the returned policy is the greedy one
    with lowest-index tie breaking.  Raises ``LinAlgError`` when some visited
    policy is multichain.
    """
    flat = np.zeros(mdp.n_states, dtype=np.int64) if flat0 is None else np.array(flat0, dtype=np.int64)
    rows = np.arange(mdp.n_states)
    for it in range(1, max_iter + 1):
        g, h = evaluate_average(mdp, flat)
        q = bellman_q(mdp, h)
        best = q.min(axis=1)
        keep = q[rows, flat] <= best + tie_tol
        if keep.all():
            return SolveResult(h, None, it, float(np.max(q[rows, flat] - best)), gain=g, q_values=q,
                               flat_policy=greedy(q, tie_tol))
        flat = np.where(keep, flat, np.argmin(q, axis=1))
    raise ConvergenceError(f"policy iteration did not stabilise in {max_iter} rounds")


def average_cost_solve(model: ClientModel | TabularMDP, price: float = 0.0, tol: float = DEFAULT_TOL,
                       channel: ChannelModel | None = None, max_iter: int = MAX_SWEEPS,
                       h0: np.ndarray | None = None) -> SolveResult:
    mdp = _as_mdp(model, price, channel)
    result = solve_average(mdp, tol, max_iter, h0)
    result.policy = _policy_from(model, result.flat_policy, mdp)
    return result


def verify_threshold(policy: PolicyTable, model: ClientModel, channel: ChannelModel | None = None,
                     slack: float = 1e-9) -> CheckReport:
    """Check the two threshold clauses and the success-probability ordering.

    Violations are ``(clause, x, y, c)`` with ``x > y`` buffer levels in
    ``1..B-T+1`` and ``c`` the channel state.
    """
    top = model.last_refill_state
    n_channel = policy.actions.shape[1]
    violations = []
    for c in range(n_channel):
        table = model.success_prob if channel is None else channel.per_state_success[c]
        acts = [policy.action(x, c) for x in range(top + 1)]
        for x in range(2, top + 1):
            ux = acts[x]
            for y in range(1, x):
                uy = acts[y]
                if uy.power == ux.power and uy.quality < ux.quality:
                    violations.append(("quality", x, y, c))
                if uy.quality == ux.quality and uy.power < ux.power:
                    violations.append(("power", x, y, c))
                if table[ux.quality, ux.power] > table[uy.quality, uy.power] + slack:
                    violations.append(("probability", x, y, c))
    return CheckReport(not violations, violations)


def verify_D_monotone(d: DFunction, slack: float = 1e-9) -> CheckReport:
    """Weakly decreasing in ``x`` for every channel state; reports the first violation."""
    vals = d.values
    for c in range(vals.shape[1]):
        for i in range(vals.shape[0] - 1):
            if vals[i, c] < vals[i + 1, c] - slack:
                return CheckReport(False, [(i + 1, c)])
    return CheckReport(True)


def _long_run_start_distribution(P: np.ndarray, start: int, squarings: int = 50) -> np.ndarray:
    """Cesaro-limit row of ``start`` via repeated squaring of the lazy chain (batched)."""
    S = P.shape[-1]
    M = 0.5 * (np.eye(S) + P)
    for _ in range(squarings):
        M = M @ M
        M /= M.sum(axis=-1, keepdims=True)
    return M[..., start, :]


def enumerate_policies_oracle(model: ClientModel | TabularMDP, price: float = 0.0, beta: float | None = None,
                              channel: ChannelModel | None = None, chunk: int = 1 << 14):
    """Exhaustive optimum over deterministic stationary policies.

    With ``beta`` the discounted value vectors are compared (an optimal
    policy minimises every component, hence the sum); without it the
    long-run average cost from the start state is minimised.  Returns
    ``(optimum, flat_policy)`` where ``optimum`` is the value vector or
    the gain.
    """
    mdp = _as_mdp(model, price, channel)
    S, A = mdp.n_states, mdp.n_actions
    if A**S > ORACLE_CAP:
        raise InstanceTooLarge(f"{A}^{S} policies exceed the cap of {ORACLE_CAP}")
    if beta is not None:
        _check_beta(beta)
    P_all = mdp.transition_matrices()  # (A, S, S)
    rows = np.arange(S)
    best_score, best_value, best_policy = np.inf, None, None
    product = itertools.product(range(A), repeat=S)
    while True:
        batch = np.array(list(itertools.islice(product, chunk)), dtype=np.int64)
        if batch.size == 0:
            break
        P = P_all[batch, rows[None, :], :]  # (n, S, S)
        c = mdp.cost[rows[None, :], batch]  # (n, S)
        if beta is not None:
            V = np.linalg.solve(np.eye(S)[None] - beta * P, c[..., None])[..., 0]
            score = V.sum(axis=1)
        else:
            mu = _long_run_start_distribution(P, mdp.start)
            V = np.einsum("ns,ns->n", mu, c)
            score = V
        i = int(np.argmin(score))
        if score[i] < best_score - 1e-12:
            best_score, best_value, best_policy = float(score[i]), V[i], batch[i]
    if beta is None:
        return float(best_value), best_policy
    return best_value, best_policy


def _active_mask(model: ClientModel) -> np.ndarray:
    return np.repeat(np.arange(model.n_powers), model.n_qualities) > 0


def product_mdp(models: Sequence[ClientModel], price: float = 0.0, max_active: int | None = None,
                channels: Sequence[ChannelModel | None] | None = None) -> tuple[TabularMDP, np.ndarray]:
    """Joint MDP of independent clients; returns it with the per-client joint-action decoding.

    Joint state ``s = ravel(l_1, ..., l_N)`` (C order); joint actions are
    the product of client actions, optionally filtered to at most
    ``max_active`` transmitting clients.
    """
    channels = list(channels) if channels is not None else [None] * len(models)
    parts = [client_mdp(m, price, ch) for m, ch in zip(models, channels)]
    n_states = int(np.prod([p.n_states for p in parts]))
    if n_states > PRODUCT_STATE_CAP:
        raise InstanceTooLarge(f"joint state space {n_states} exceeds {PRODUCT_STATE_CAP}")
    joint = parts[0]
    active = _active_mask(models[0]).astype(int)
    decode = np.arange(parts[0].n_actions)[:, None]
    for part, model in zip(parts[1:], models[1:]):
        S1, A1, K1 = joint.next_state.shape
        S2, A2, K2 = part.next_state.shape
        nxt = joint.next_state[:, None, :, None, :, None] * S2 + part.next_state[None, :, None, :, None, :]
        prob = joint.prob[:, None, :, None, :, None] * part.prob[None, :, None, :, None, :]

        def pair(x, y):
            return (x[:, None, :, None] + y[None, :, None, :]).reshape(S1 * S2, A1 * A2)

        joint = TabularMDP(
            nxt.reshape(S1 * S2, A1 * A2, K1 * K2), prob.reshape(S1 * S2, A1 * A2, K1 * K2),
            pair(joint.cost, part.cost), pair(joint.power, part.power), pair(joint.qoe_cost, part.qoe_cost),
            joint.start * S2 + part.start,
        )
        active = (active[:, None] + _active_mask(model).astype(int)[None, :]).reshape(-1)
        decode = np.concatenate([np.repeat(decode, A2, axis=0), np.tile(np.arange(A2), A1)[:, None]], axis=1)
    if max_active is not None:
        keep = np.flatnonzero(active <= max_active)
        joint = TabularMDP(joint.next_state[:, keep], joint.prob[:, keep], joint.cost[:, keep],
                           joint.power[:, keep], joint.qoe_cost[:, keep], joint.start)
        decode = decode[keep]
    return joint, decode


def product_mdp_solve(models: Sequence[ClientModel], price: float = 0.0, beta: float | None = None,
                      tol: float = DEFAULT_TOL, max_active: int | None = None,
                      channels: Sequence[ChannelModel | None] | None = None) -> SolveResult:
    """Solve the joint priced problem; average cost unless ``beta`` is given."""
    mdp, decode = product_mdp(models, price, max_active, channels)
    if beta is None:
        result = solve_average(mdp, tol)
    else:
        result = solve_discounted(mdp, beta, tol)
    result.q_values = None
    result.joint_actions = decode
    return result
