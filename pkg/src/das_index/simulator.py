"""Discrete-time simulation of an access point serving streaming clients.

Every client starts with a full buffer ``l(0) = B`` and ``O(-1) = 0``.
Randomness is split into independent streams derived from the scenario
seed: per client one stream for deliveries and one for channel moves, plus
one for the scheduler.  Both per-client uniforms are drawn every slot even
when unused, so a single-state channel reproduces the i.i.d. run exactly and
adding a client leaves the others' draws untouched.
"""

from __future__ import annotations

import csv
import io
import json
from dataclasses import dataclass, field
from typing import Protocol, Sequence

import numpy as np
from scipy import stats

from .core import ChannelModel, ClientModel, check_channel, restrict_peak_power, successor_tables, \
    transition_distribution
from .mdp import PolicyTable

TRACE_SCHEMA_VERSION = 1
INITIAL_STATE_NOTE = "l(0)=B, O(-1)=0"
MODES = ("none", "budget", "channels", "peak")
TRACE_COLUMNS = ("slot", "client", "state", "channel", "action", "delivered", "outage", "new_period")
CHUNK = 1 << 16


class ConstraintViolation(RuntimeError):
    """A scheduler activated more clients than there are channels."""


class Scheduler(Protocol):
    def decide(self, states: list, channel_states: list, rng: np.random.Generator) -> list: ...


@dataclass(eq=False)
class Scenario:
    """Clients, optional fading channels, a constraint mode and the run length.

    ``mode`` is one of ``"none"``, ``"budget"`` (average power ``power_budget``
    reported, not enforced), ``"channels"`` (at most ``n_channels``
    transmissions per slot, enforced) or ``"peak"`` (power levels above
    ``peak_power`` removed from every client up front).
    """

    models: list
    horizon: int
    seed: int = 0
    channels: list | None = None
    mode: str = "none"
    power_budget: float | None = None
    n_channels: int | None = None
    peak_power: float | None = None

    def __post_init__(self):
        self.models = list(self.models)
        self.channels = list(self.channels) if self.channels is not None else [None] * len(self.models)
        if len(self.channels) != len(self.models):
            raise ValueError("one channel entry per client")
        if self.horizon < 1:
            raise ValueError("horizon must be >= 1")
        if self.mode not in MODES:
            raise ValueError(f"unknown constraint mode {self.mode!r}")
        if self.mode == "budget" and (self.power_budget is None or self.power_budget < 0):
            raise ValueError("budget mode needs a nonnegative power_budget")
        if self.mode == "channels" and (self.n_channels is None or self.n_channels < 1):
            raise ValueError("channels mode needs n_channels >= 1")
        if self.mode == "peak":
            if self.peak_power is None:
                raise ValueError("peak mode needs peak_power")
            restricted = [restrict_peak_power(m, self.peak_power, ch) for m, ch in zip(self.models, self.channels)]
            self.models = [r if ch is None else r[0] for r, ch in zip(restricted, self.channels)]
            self.channels = [None if ch is None else r[1] for r, ch in zip(restricted, self.channels)]
        for m, ch in zip(self.models, self.channels):
            if ch is not None:
                check_channel(ch, m)

    @property
    def n_clients(self) -> int:
        return len(self.models)

    def streams(self, client: int) -> tuple[np.random.Generator, np.random.Generator]:
        """(delivery, channel) generators of one client."""
        return (np.random.default_rng(np.random.SeedSequence(self.seed, spawn_key=(1, client, 0))),
                np.random.default_rng(np.random.SeedSequence(self.seed, spawn_key=(1, client, 1))))

    def scheduler_stream(self) -> np.random.Generator:
        return np.random.default_rng(np.random.SeedSequence(self.seed, spawn_key=(0,)))


class TablePolicy:
    """Independent stationary policies, one :class:`PolicyTable` per client."""

    def __init__(self, tables: Sequence[PolicyTable]):
        self.tables = list(tables)
        self._rows = [t.actions.tolist() for t in self.tables]

    def decide(self, states, channel_states, rng=None) -> list:
        return [rows[l][c] for rows, l, c in zip(self._rows, states, channel_states)]


@dataclass(eq=False)
class SimTrace:
    """Per-slot records, arrays of shape (horizon, N)."""

    state: np.ndarray
    channel: np.ndarray
    action: np.ndarray
    delivered: np.ndarray
    models: list = field(repr=False)
    seed: int = 0
    scenario_mode: str = "none"
    power_budget: float | None = None

    @property
    def horizon(self) -> int:
        return self.state.shape[0]

    @property
    def outage(self) -> np.ndarray:
        return self.state == 0

    @property
    def new_period(self) -> np.ndarray:
        o = self.outage
        prev = np.vstack([np.zeros((1, o.shape[1]), dtype=bool), o[:-1]])
        return o & ~prev

    def per_slot(self, client: int) -> dict[str, np.ndarray]:
        """Realised per-slot cost terms of one client."""
        m = self.models[client]
        p_, energy, disutility, _ = m.action_arrays()
        a = self.action[:, client]
        return {
            "outage": self.outage[:, client].astype(float),
            "quality": np.where(self.delivered[:, client], disutility[a], 0.0),
            "period": self.new_period[:, client] * m.outage_period_weight,
            "power": energy[a],
        }

    def cost_series(self, client: int | None = None) -> np.ndarray:
        """Per-slot QoE cost, summed over clients when ``client`` is None."""
        clients = range(len(self.models)) if client is None else [client]
        total = np.zeros(self.horizon)
        for n in clients:
            s = self.per_slot(n)
            total += s["outage"] + s["quality"] + s["period"]
        return total

    def power_series(self, client: int | None = None) -> np.ndarray:
        clients = range(len(self.models)) if client is None else [client]
        return np.sum([self.per_slot(n)["power"] for n in clients], axis=0)

    def records(self):
        """Rows of ``TRACE_COLUMNS`` in slot-major order."""
        outage, period = self.outage, self.new_period
        H, N = self.state.shape
        for t in range(H):
            for n in range(N):
                yield (t, n, int(self.state[t, n]), int(self.channel[t, n]), int(self.action[t, n]),
                       int(self.delivered[t, n]), int(outage[t, n]), int(period[t, n]))

    def to_csv(self, header_comment: str | None = None) -> str:
        buf = io.StringIO()
        buf.write(f"# trace_schema={TRACE_SCHEMA_VERSION} seed={self.seed} initial={INITIAL_STATE_NOTE}")
        buf.write(f" {header_comment}\n" if header_comment else "\n")
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(TRACE_COLUMNS)
        writer.writerows(self.records())
        return buf.getvalue()


def _draw(rng: np.random.Generator, n: int):
    return rng.random(n).tolist()


def _channel_tables(scenario: Scenario):
    """Per client: success table indexed [c][a], cumulative channel rows, initial channel."""
    out = []
    for m, ch in zip(scenario.models, scenario.channels):
        q = np.tile(np.arange(m.n_qualities), m.n_powers)
        pw = np.repeat(np.arange(m.n_powers), m.n_qualities)
        if ch is None:
            out.append(([m.success_prob[q, pw].tolist()], [[1.0]], 0))
        else:
            cum = np.cumsum(ch.transition_matrix, axis=1)
            cum[:, -1] = 1.0
            out.append((ch.per_state_success[:, q, pw].tolist(), cum.tolist(), ch.initial_state))
    return out


def _next_channel(cum_row: list, u: float) -> int:
    for j, edge in enumerate(cum_row):
        if u < edge:
            return j
    return len(cum_row) - 1


def _run_client(model: ClientModel, table, horizon: int, rows: list, streams) -> tuple[list, list, list, list]:
    """Independent stationary client: one sequential loop, no scheduler."""
    succ, cum, c = table
    up, down = (x.tolist() for x in successor_tables(model))
    g_del, g_ch = streams
    l = model.buffer_capacity
    states, chans, acts, dels = [], [], [], []
    single = len(cum) == 1
    for start in range(0, horizon, CHUNK):
        n = min(CHUNK, horizon - start)
        ud, uc = _draw(g_del, n), _draw(g_ch, n)
        for i in range(n):
            a = rows[l][c]
            ok = ud[i] < succ[c][a]
            states.append(l)
            chans.append(c)
            acts.append(a)
            dels.append(ok)
            l = up[l] if ok else down[l]
            if not single:
                c = _next_channel(cum[c], uc[i])
    return states, chans, acts, dels


def run(scenario: Scenario, policy) -> SimTrace:
    """Simulate ``scenario.horizon`` slots under ``policy``.

    ``policy`` is a :class:`TablePolicy` (independent clients, fast path) or
    any object with ``decide(states, channel_states, rng) -> actions``.
    """
    H, N = scenario.horizon, scenario.n_clients
    tables = _channel_tables(scenario)
    if isinstance(policy, TablePolicy) and scenario.mode != "channels":
        if len(policy.tables) != N:
            raise ValueError("one policy table per client")
        cols = [_run_client(m, tb, H, rows, scenario.streams(n))
                for n, (m, tb, rows) in enumerate(zip(scenario.models, tables, policy._rows))]
        state, chan, act, dlv = (np.array([c[k] for c in cols]).T for k in range(4))
        return _trace(scenario, state, chan, act, dlv)
    return _run_general(scenario, policy, tables)


def _run_general(scenario: Scenario, policy, tables) -> SimTrace:
    H, N = scenario.horizon, scenario.n_clients
    succ = [t[0] for t in tables]
    cums = [t[1] for t in tables]
    chans = [t[2] for t in tables]
    maps = [[x.tolist() for x in successor_tables(m)] for m in scenario.models]
    active = [(np.repeat(np.arange(m.n_powers), m.n_qualities) > 0).tolist() for m in scenario.models]
    streams = [scenario.streams(n) for n in range(N)]
    sched_rng = scenario.scheduler_stream()
    states = [m.buffer_capacity for m in scenario.models]
    limit = scenario.n_channels if scenario.mode == "channels" else None
    out_s = np.empty((H, N), dtype=np.int64)
    out_c = np.empty((H, N), dtype=np.int64)
    out_a = np.empty((H, N), dtype=np.int64)
    out_d = np.empty((H, N), dtype=bool)
    for start in range(0, H, CHUNK):
        n_slots = min(CHUNK, H - start)
        ud = [_draw(g, n_slots) for g, _ in streams]
        uc = [_draw(g, n_slots) for _, g in streams]
        for i in range(n_slots):
            t = start + i
            acts = [int(a) for a in policy.decide(list(states), list(chans), sched_rng)]
            if limit is not None and sum(active[n][a] for n, a in enumerate(acts)) > limit:
                raise ConstraintViolation(f"slot {t}: more than {limit} clients transmit")
            for n in range(N):
                l, c, a = states[n], chans[n], acts[n]
                ok = ud[n][i] < succ[n][c][a]
                out_s[t, n], out_c[t, n], out_a[t, n], out_d[t, n] = l, c, a, ok
                states[n] = maps[n][0][l] if ok else maps[n][1][l]
                if len(cums[n]) > 1:
                    chans[n] = _next_channel(cums[n][c], uc[n][i])
    return _trace(scenario, out_s, out_c, out_a, out_d)


def _trace(scenario: Scenario, state, chan, act, dlv) -> SimTrace:
    return SimTrace(np.asarray(state, dtype=np.int64), np.asarray(chan, dtype=np.int64),
                    np.asarray(act, dtype=np.int64), np.asarray(dlv, dtype=bool), scenario.models,
                    scenario.seed, scenario.mode, scenario.power_budget)


def run_fading(scenario: Scenario, policy) -> SimTrace:
    """Same as :func:`run`; clients without a channel model see i.i.d. conditions."""
    if all(ch is None for ch in scenario.channels):
        raise ValueError("run_fading needs at least one channel model")
    return run(scenario, policy)


def batch_means_se(series: np.ndarray, n_batches: int = 100) -> float:
    """Standard error of the series mean from non-overlapping batch means."""
    series = np.asarray(series, dtype=float)
    size = len(series) // n_batches
    if size < 1:
        raise ValueError("series shorter than the number of batches")
    means = series[:size * n_batches].reshape(n_batches, size).mean(axis=1)
    return float(means.std(ddof=1) / np.sqrt(n_batches))


def client_metrics(trace: SimTrace, client: int) -> dict:
    m = trace.models[client]
    s = trace.per_slot(client)
    H = trace.horizon
    outage = float(s["outage"].sum() / H)
    periods = int(trace.new_period[:, client].sum())
    quality = float(s["quality"].sum() / H)
    return {
        "client": client,
        "outage_fraction": outage,
        "outage_periods": periods,
        "outage_period_rate": periods / H,
        "mean_quality_cost": quality,
        "mean_power": float(s["power"].sum() / H),
        "deliveries": int(trace.delivered[:, client].sum()),
        "objective": outage + quality + m.outage_period_weight * periods / H,
    }


def metrics_report(trace: SimTrace, n_batches: int = 100) -> dict:
    """Per-client and total QoE metrics; deterministic in the trace."""
    if trace.horizon < 1:
        raise ValueError("empty trace")
    per_client = [client_metrics(trace, n) for n in range(len(trace.models))]
    totals = {k: float(sum(c[k] for c in per_client))
              for k in ("outage_fraction", "outage_period_rate", "mean_quality_cost", "mean_power", "objective")}
    report = {
        "trace_schema": TRACE_SCHEMA_VERSION,
        "initial_state": INITIAL_STATE_NOTE,
        "seed": trace.seed,
        "horizon": trace.horizon,
        "clients": per_client,
        "totals": totals,
    }
    if trace.horizon >= n_batches:
        report["standard_errors"] = {"objective": batch_means_se(trace.cost_series(), n_batches),
                                     "mean_power": batch_means_se(trace.power_series(), n_batches)}
    if trace.scenario_mode == "budget":
        report["power_budget"] = trace.power_budget
        report["budget_excess"] = totals["mean_power"] - trace.power_budget
    return report


def write_summary(path, trace: SimTrace, extra: dict | None = None) -> None:
    doc = metrics_report(trace)
    if extra:
        doc.update(extra)
    with open(path, "w") as fh:
        json.dump(doc, fh, indent=2)


@dataclass
class Chi2Result:
    statistic: float
    dof: int
    p_value: float
    visits: int

    def passed(self, level: float = 0.999) -> bool:
        return self.p_value >= 1.0 - level


def transition_chi2(trace: SimTrace, client: int = 0, channel: ChannelModel | None = None,
                    min_expected: float = 5.0) -> Chi2Result:
    """Pooled chi-square test of observed successor frequencies per (state, channel, action).

    Expected frequencies come from :func:`transition_distribution` (times the
    channel kernel when fading).  Rows whose expected cell counts fall below
    ``min_expected`` are skipped.
    """
    m = trace.models[client]
    s, c, a = trace.state[:-1, client], trace.channel[:-1, client], trace.action[:-1, client]
    s2, c2 = trace.state[1:, client], trace.channel[1:, client]
    C = 1 if channel is None else channel.n_states
    row_key = (s * C + c) * m.n_actions + a
    next_key = s2 * C + c2
    stat, dof, visits = 0.0, 0, 0
    for key in np.unique(row_key):
        mask = row_key == key
        l, rest = divmod(int(key), C * m.n_actions)
        ch, act = divmod(rest, m.n_actions)
        expected = {}
        for nxt, p in transition_distribution(l, m.action_at(act), m, channel, ch if channel else None):
            for c_next in range(C):
                q = p * (1.0 if channel is None else channel.transition_matrix[ch, c_next])
                if q > 0:
                    expected[nxt * C + c_next] = expected.get(nxt * C + c_next, 0.0) + q
        n = int(mask.sum())
        obs = next_key[mask]
        if any(k not in expected for k in np.unique(obs)):
            return Chi2Result(float("inf"), max(dof, 1), 0.0, visits + n)  # impossible successor observed
        if len(expected) < 2 or n * min(expected.values()) < min_expected:
            continue
        keys = sorted(expected)
        counts = np.array([np.sum(obs == k) for k in keys], dtype=float)
        exp = n * np.array([expected[k] for k in keys])
        stat += float(((counts - exp) ** 2 / exp).sum())
        dof += len(keys) - 1
        visits += n
    p = float(stats.chi2.sf(stat, dof)) if dof else 1.0
    return Chi2Result(stat, dof, p, visits)
