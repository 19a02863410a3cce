"""Random valid instances for property checks and the verification suite."""

from __future__ import annotations

import numpy as np

from .core import ClientModel


def monotone_success_table(rng: np.random.Generator, n_qualities: int, n_powers: int,
                           floor: float = 0.0) -> np.ndarray:
    """Random table nondecreasing in both indices with a zero no-power column."""
    table = np.zeros((n_qualities, n_powers))
    if n_powers > 1:
        raw = floor + (1 - floor) * rng.random((n_qualities, n_powers - 1))
        raw = np.maximum.accumulate(np.maximum.accumulate(raw, axis=0), axis=1)
        table[:, 1:] = raw
    return table


def random_model(rng: np.random.Generator, buffer_range=(4, 20), qualities=(1, 3), powers=(1, 3),
                 playtime: int | None = None, buffer_capacity: int | None = None, floor: float = 0.05,
                 max_outage_weight: float = 3.0) -> ClientModel:
    B = buffer_capacity if buffer_capacity is not None else int(rng.integers(buffer_range[0], buffer_range[1] + 1))
    T = playtime if playtime is not None else int(rng.integers(1, B + 1))
    Q = int(rng.integers(qualities[0], qualities[1] + 1))
    M = int(rng.integers(powers[0], powers[1] + 1))
    disutility = np.sort(rng.uniform(0.0, 1.0, Q))
    disutility += np.arange(Q) * 1e-3  # keeps the sequence strictly increasing
    energy = np.concatenate([[0.0], np.sort(rng.uniform(0.1, 2.0, M - 1)) + np.arange(M - 1) * 1e-3])
    return ClientModel(B, T, disutility, energy, monotone_success_table(rng, Q, M, floor),
                       float(rng.uniform(0.0, max_outage_weight)))


def random_tiny_model(rng: np.random.Generator, max_buffer: int = 4, max_actions: int = 4) -> ClientModel:
    """B <= max_buffer and at most ``max_actions`` flat actions, with at least one transmit level."""
    while True:
        Q = int(rng.integers(1, 3))
        M = int(rng.integers(2, 4))
        if Q * M <= max_actions:
            break
    B = int(rng.integers(2, max_buffer + 1))
    return random_model(rng, buffer_range=(B, B), qualities=(Q, Q), powers=(M, M))


def random_binary_model(rng: np.random.Generator, buffer_range=(4, 12)) -> ClientModel:
    """One quality and one transmit level: the prioritisation setting."""
    return random_model(rng, buffer_range=buffer_range, qualities=(1, 1), powers=(2, 2), floor=0.2)


def random_policy(rng: np.random.Generator, model: ClientModel, n_channel_states: int = 1) -> np.ndarray:
    return rng.integers(0, model.n_actions, size=model.n_states * n_channel_states)


def small_learning_model() -> ClientModel:
    """B=4, T=2 with two qualities and one transmit level (four flat actions)."""
    return ClientModel(4, 2, [0.1, 0.3], [0.0, 1.0], [[0.0, 0.6], [0.0, 0.9]], outage_period_weight=1.0)


def random_refilling_policy(rng: np.random.Generator, model: ClientModel, n_channel_states: int = 1) -> np.ndarray:
    """Random flat policy that transmits in outage, so the chain keeps cycling."""
    if model.n_powers < 2:
        raise ValueError("model has no transmit action")
    flat = random_policy(rng, model, n_channel_states)
    first_active = model.n_qualities  # power index 1, quality 0
    flat[:n_channel_states] = rng.integers(first_active, model.n_actions, size=n_channel_states)
    return flat
