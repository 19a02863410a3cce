"""Client, action and channel types plus the single-client buffer dynamics.

Buffer states are integers ``0..B`` (playtime in slots); ``0`` is outage.
Qualities and power levels are 0-based indices.  Power index 0 is the
"no transmission" level and always has zero success probability.

Actions are flattened power-major, ``a = m * Q + q``, so that the lowest
flat index among tied actions is the one with the lowest power and then
the lowest quality index.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np


class ModelError(ValueError):
    """Raised when a client or channel description violates its invariants."""


def _frozen_array(values, dtype=float) -> np.ndarray:
    arr = np.array(values, dtype=dtype)
    arr.setflags(write=False)
    return arr


@dataclass(frozen=True)
class Action:
    quality: int
    power: int


@dataclass(frozen=True, eq=False)
class ClientModel:
    """Static parameters of one streaming client.

    Parameters
    ----------
    buffer_capacity : int
        Buffer size ``B`` in slots of playtime.
    playtime_per_packet : int
        Slots of playtime ``T`` added by one delivered packet.
    quality_disutilities : sequence of float
        Cost charged per delivered packet of each quality class, strictly
        increasing in the class index.
    power_levels : sequence of float
        Transmission energies per slot, starting with ``0``.
    success_prob : array_like, shape (Q, M)
        Delivery probability for each (quality, power) pair.
    outage_period_weight : float
        Cost charged at the start of every outage period.
    strict : bool
        When False only the structural checks are enforced (shapes, ranges,
        ``T <= B``); the monotonicity and zero-power assumptions are skipped.
        Used for degenerate hand-built fixtures.
    """

    buffer_capacity: int
    playtime_per_packet: int
    quality_disutilities: tuple[float, ...]
    power_levels: tuple[float, ...]
    success_prob: np.ndarray
    outage_period_weight: float = 0.0
    strict: bool = field(default=True, repr=False)

    def __post_init__(self):
        object.__setattr__(self, "quality_disutilities", tuple(float(v) for v in self.quality_disutilities))
        object.__setattr__(self, "power_levels", tuple(float(v) for v in self.power_levels))
        object.__setattr__(self, "success_prob", _frozen_array(self.success_prob))
        object.__setattr__(self, "outage_period_weight", float(self.outage_period_weight))
        problems = model_issues(self, structural_only=not self.strict)
        if problems:
            raise ModelError("; ".join(problems))

    @property
    def n_qualities(self) -> int:
        return len(self.quality_disutilities)

    @property
    def n_powers(self) -> int:
        return len(self.power_levels)

    @property
    def n_actions(self) -> int:
        return self.n_qualities * self.n_powers

    @property
    def n_states(self) -> int:
        return self.buffer_capacity + 1

    @property
    def last_refill_state(self) -> int:
        """Largest buffer level at which a delivered packet still fits (B - T + 1)."""
        return self.buffer_capacity - self.playtime_per_packet + 1

    def action_index(self, action: Action) -> int:
        check_action(action, self)
        return action.power * self.n_qualities + action.quality

    def action_at(self, index: int) -> Action:
        if not 0 <= index < self.n_actions:
            raise ModelError(f"action index {index} out of range")
        power, quality = divmod(int(index), self.n_qualities)
        return Action(quality, power)

    def action_arrays(self) -> tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray]:
        """Per flat action: success probability, energy, quality disutility, quality index."""
        q = np.tile(np.arange(self.n_qualities), self.n_powers)
        m = np.repeat(np.arange(self.n_powers), self.n_qualities)
        p = self.success_prob[q, m]
        energy = np.asarray(self.power_levels)[m]
        disutility = np.asarray(self.quality_disutilities)[q]
        return p, energy, disutility, q

    def to_dict(self) -> dict:
        return {
            "buffer_capacity": self.buffer_capacity,
            "playtime_per_packet": self.playtime_per_packet,
            "quality_disutilities": list(self.quality_disutilities),
            "power_levels": list(self.power_levels),
            "success_prob": self.success_prob.tolist(),
            "outage_period_weight": self.outage_period_weight,
        }

    @classmethod
    def from_dict(cls, data: dict, strict: bool = True) -> "ClientModel":
        return cls(
            buffer_capacity=int(data["buffer_capacity"]),
            playtime_per_packet=int(data["playtime_per_packet"]),
            quality_disutilities=data["quality_disutilities"],
            power_levels=data["power_levels"],
            success_prob=data["success_prob"],
            outage_period_weight=data.get("outage_period_weight", 0.0),
            strict=strict,
        )


def _success_issues(p: np.ndarray, label: str, structural_only: bool) -> list[str]:
    problems = []
    if not np.all(np.isfinite(p)) or np.any(p < 0) or np.any(p > 1):
        problems.append(f"{label}: probabilities must lie in [0, 1]")
    if structural_only or p.size == 0:
        return problems
    if np.any(p[:, 0] != 0):
        problems.append(f"{label}: P(q, E_1) must be 0 for every quality")
    if np.any(np.diff(p, axis=0) < 0):
        problems.append(f"{label}: success probability must be nondecreasing in quality index")
    if np.any(np.diff(p, axis=1) < 0):
        problems.append(f"{label}: success probability must be nondecreasing in power")
    return problems


def model_issues(model: ClientModel, structural_only: bool = False) -> list[str]:
    """List every invariant the model violates (empty when valid)."""
    problems = []
    B, T = model.buffer_capacity, model.playtime_per_packet
    if B < 1:
        problems.append("buffer_capacity must be >= 1")
    if T < 1:
        problems.append("playtime_per_packet must be >= 1")
    if T > B:
        problems.append("playtime_per_packet must not exceed buffer_capacity")
    Q, M = model.n_qualities, model.n_powers
    if Q < 1 or M < 1:
        problems.append("need at least one quality and one power level")
    if model.success_prob.shape != (Q, M):
        problems.append(f"success_prob must have shape ({Q}, {M}), got {model.success_prob.shape}")
        return problems
    if model.outage_period_weight < 0:
        problems.append("outage_period_weight must be >= 0")
    lam = np.asarray(model.quality_disutilities)
    energy = np.asarray(model.power_levels)
    if not (np.all(np.isfinite(lam)) and np.all(np.isfinite(energy))):
        problems.append("disutilities and power levels must be finite")
    if np.any(energy < 0):
        problems.append("power levels must be >= 0")
    problems += _success_issues(model.success_prob, "success_prob", structural_only)
    if not structural_only:
        if np.any(np.diff(lam) <= 0):
            problems.append("quality_disutilities must be strictly increasing")
        if energy.size and energy[0] != 0:
            problems.append("first power level must be 0 (no transmission)")
        if np.any(np.diff(energy) <= 0):
            problems.append("power levels must be strictly increasing")
    return problems


@dataclass(frozen=True, eq=False)
class ChannelModel:
    """Finite-state Markov channel with per-state success tables.

    ``per_state_success[c]`` has the same (Q, M) shape as the client table
    and replaces it while the channel is in state ``c``.
    """

    transition_matrix: np.ndarray
    per_state_success: np.ndarray
    initial_state: int = 0

    def __post_init__(self):
        object.__setattr__(self, "transition_matrix", _frozen_array(self.transition_matrix))
        object.__setattr__(self, "per_state_success", _frozen_array(self.per_state_success))
        pi = self.transition_matrix
        if pi.ndim != 2 or pi.shape[0] != pi.shape[1] or pi.shape[0] < 1:
            raise ModelError("transition_matrix must be square and nonempty")
        if np.any(pi < 0) or np.any(np.abs(pi.sum(axis=1) - 1.0) > 1e-12):
            raise ModelError("transition_matrix rows must be probability vectors")
        if self.per_state_success.ndim != 3 or self.per_state_success.shape[0] != pi.shape[0]:
            raise ModelError("per_state_success must have shape (C, Q, M)")
        if not 0 <= self.initial_state < pi.shape[0]:
            raise ModelError("initial_state out of range")

    @property
    def n_states(self) -> int:
        return self.transition_matrix.shape[0]

    def issues(self, model: ClientModel) -> list[str]:
        problems = []
        if self.per_state_success.shape[1:] != model.success_prob.shape:
            return [f"channel success tables must have shape {model.success_prob.shape}"]
        for c, table in enumerate(self.per_state_success):
            problems += _success_issues(table, f"channel state {c}", structural_only=not model.strict)
        return problems

    @classmethod
    def iid(cls, model: ClientModel) -> "ChannelModel":
        """The one-state channel that reproduces ``model.success_prob``."""
        return cls([[1.0]], model.success_prob[None, :, :])

    def to_dict(self) -> dict:
        return {
            "transition_matrix": self.transition_matrix.tolist(),
            "per_state_success": self.per_state_success.tolist(),
            "initial_state": self.initial_state,
        }

    @classmethod
    def from_dict(cls, data: dict) -> "ChannelModel":
        return cls(data["transition_matrix"], data["per_state_success"], int(data.get("initial_state", 0)))


def check_channel(channel: ChannelModel, model: ClientModel) -> None:
    problems = channel.issues(model)
    if problems:
        raise ModelError("; ".join(problems))


def gilbert_elliott(model: ClientModel, p_good_to_bad: float, p_bad_to_good: float, bad_scale: float) -> ChannelModel:
    """Two-state channel: state 0 uses the model's table, state 1 scales it by ``bad_scale``."""
    pi = [[1 - p_good_to_bad, p_good_to_bad], [p_bad_to_good, 1 - p_bad_to_good]]
    good = model.success_prob
    return ChannelModel(pi, np.stack([good, good * bad_scale]))


def check_action(action: Action, model: ClientModel) -> None:
    if not (0 <= action.quality < model.n_qualities and 0 <= action.power < model.n_powers):
        raise ModelError(f"{action} outside model bounds (Q={model.n_qualities}, M={model.n_powers})")


def _check_state(l: int, model: ClientModel) -> None:
    if not 0 <= l <= model.buffer_capacity:
        raise ModelError(f"buffer state {l} outside 0..{model.buffer_capacity}")


def successor_success(l: int, model: ClientModel) -> int:
    _check_state(l, model)
    if l <= model.last_refill_state:
        return max(l - 1, 0) + model.playtime_per_packet
    return l - 1


def successor_failure(l: int, model: ClientModel | None = None) -> int:
    if l < 0 or (model is not None and l > model.buffer_capacity):
        raise ModelError(f"buffer state {l} out of range")
    return max(l - 1, 0)


def success_probability(model: ClientModel, action: Action, channel: ChannelModel | None = None,
                        channel_state: int | None = None) -> float:
    check_action(action, model)
    if channel is not None and channel_state is not None:
        return float(channel.per_state_success[channel_state, action.quality, action.power])
    return float(model.success_prob[action.quality, action.power])


def transition_distribution(l: int, action: Action, model: ClientModel, channel: ChannelModel | None = None,
                            channel_state: int | None = None) -> list[tuple[int, float]]:
    """Next-buffer distribution as ``[(state, prob), ...]``; coincident outcomes are merged."""
    p = success_probability(model, action, channel, channel_state)
    up, down = successor_success(l, model), successor_failure(l)
    if up == down or p == 0.0:
        return [(down, 1.0)]
    if p == 1.0:
        return [(up, 1.0)]
    return [(up, p), (down, 1.0 - p)]


def step_cost(l: int, action: Action, price: float, model: ClientModel, channel: ChannelModel | None = None,
              channel_state: int | None = None) -> float:
    """Expected one-slot cost of ``action`` in buffer state ``l`` at power price ``price``."""
    if price < 0:
        raise ModelError("power price must be >= 0")
    _check_state(l, model)
    p = success_probability(model, action, channel, channel_state)
    cost = float(l == 0) + price * model.power_levels[action.power] + p * model.quality_disutilities[action.quality]
    if l == 1:
        cost += (1.0 - p) * model.outage_period_weight
    return cost


def successor_tables(model: ClientModel) -> tuple[np.ndarray, np.ndarray]:
    """Vectorised successor maps over all buffer states."""
    states = np.arange(model.n_states)
    down = np.maximum(states - 1, 0)
    up = np.where(states <= model.last_refill_state, down + model.playtime_per_packet, states - 1)
    return up, down


def restrict_peak_power(model: ClientModel, peak_power: float, channel: ChannelModel | None = None):
    """Drop every power level above ``peak_power`` (peak-power constraint as an action filter)."""
    keep = [m for m, e in enumerate(model.power_levels) if e <= peak_power]
    if not keep:
        raise ModelError("peak power excludes every power level")
    restricted = ClientModel(
        model.buffer_capacity, model.playtime_per_packet, model.quality_disutilities,
        [model.power_levels[m] for m in keep], model.success_prob[:, keep],
        model.outage_period_weight, strict=model.strict,
    )
    if channel is None:
        return restricted
    return restricted, ChannelModel(channel.transition_matrix, channel.per_state_success[:, :, keep],
                                    channel.initial_state)


def as_models(models: Sequence[ClientModel] | ClientModel) -> list[ClientModel]:
    return [models] if isinstance(models, ClientModel) else list(models)


@dataclass(frozen=True, eq=False)
class TabularMDP:
    """Dense successor-list form of a finite MDP.

    ``next_state[s, a, k]`` with probability ``prob[s, a, k]``; ``cost[s, a]``
    is the expected one-slot cost including any price term.  ``power[s, a]``
    is the energy spent and ``qoe_cost[s, a]`` the cost without the price
    term.  ``start`` is the state sessions begin in.
    """

    next_state: np.ndarray
    prob: np.ndarray
    cost: np.ndarray
    power: np.ndarray
    qoe_cost: np.ndarray
    start: int
    n_channel_states: int = 1
    parts: dict | None = None  # per-term expectations, each (S, A): outage, quality, period, new_period

    @property
    def n_states(self) -> int:
        return self.cost.shape[0]

    @property
    def n_actions(self) -> int:
        return self.cost.shape[1]

    def transition_matrices(self) -> np.ndarray:
        """Dense array of shape (A, S, S)."""
        S, A, K = self.next_state.shape
        out = np.zeros((A, S, S))
        s_idx = np.broadcast_to(np.arange(S)[:, None, None], (S, A, K))
        a_idx = np.broadcast_to(np.arange(A)[None, :, None], (S, A, K))
        np.add.at(out, (a_idx, s_idx, self.next_state), self.prob)
        return out

    def policy_matrix(self, actions: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """Transition matrix and cost vector induced by a deterministic policy."""
        S = self.n_states
        rows = np.arange(S)
        P = np.zeros((S, S))
        np.add.at(P, (np.repeat(rows, self.next_state.shape[2]), self.next_state[rows, actions].ravel()),
                  self.prob[rows, actions].ravel())
        return P, self.cost[rows, actions]


def client_mdp(model: ClientModel, price: float = 0.0, channel: ChannelModel | None = None) -> TabularMDP:
    """Tabulate the single-client MDP on buffer states (times channel states).

    With a channel the flat state index is ``l * C + c``.
    """
    if price < 0:
        raise ModelError("power price must be >= 0")
    up, down = successor_tables(model)
    p_act, energy, disutility, _ = model.action_arrays()
    B1, A = model.n_states, model.n_actions
    if channel is None:
        p = np.broadcast_to(p_act, (B1, A))
        next_state = np.stack([np.broadcast_to(up[:, None], (B1, A)), np.broadcast_to(down[:, None], (B1, A))], axis=-1)
        prob = np.stack([p, 1.0 - p], axis=-1)
        C = 1
        state_l = np.arange(B1)
        p_state = p
    else:
        check_channel(channel, model)
        C = channel.n_states
        q = np.tile(np.arange(model.n_qualities), model.n_powers)
        m = np.repeat(np.arange(model.n_powers), model.n_qualities)
        pc = channel.per_state_success[:, q, m]  # (C, A)
        pi = channel.transition_matrix
        S = B1 * C
        state_l = np.repeat(np.arange(B1), C)
        state_c = np.tile(np.arange(C), B1)
        p_state = pc[state_c]  # (S, A)
        nxt_up = up[state_l][:, None] * C + np.arange(C)[None, :]  # (S, C)
        nxt_dn = down[state_l][:, None] * C + np.arange(C)[None, :]
        next_state = np.concatenate([np.broadcast_to(nxt_up[:, None, :], (S, A, C)),
                                     np.broadcast_to(nxt_dn[:, None, :], (S, A, C))], axis=-1)
        row = pi[state_c]  # (S, C)
        prob = np.concatenate([p_state[:, :, None] * row[:, None, :],
                               (1.0 - p_state)[:, :, None] * row[:, None, :]], axis=-1)
    outage = (state_l == 0).astype(float)[:, None]
    fail_at_one = (state_l == 1).astype(float)[:, None] * (1.0 - p_state)
    period = fail_at_one * model.outage_period_weight
    qoe = outage + p_state * disutility[None, :] + period
    power = np.broadcast_to(energy[None, :], qoe.shape)
    start = model.buffer_capacity * C + (channel.initial_state if channel is not None else 0)
    parts = {"outage": np.broadcast_to(outage, qoe.shape), "quality": p_state * disutility[None, :],
             "period": period, "new_period": fail_at_one}
    return TabularMDP(np.ascontiguousarray(next_state), np.ascontiguousarray(prob), qoe + price * power,
                      np.ascontiguousarray(power), qoe, start, C, parts)
