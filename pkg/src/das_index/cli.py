"""Command-line entry point: ``das-index <command> --config FILE``.

Exit codes: 0 success, 1 numerical or convergence failure, 2 configuration
error, 3 verification failure.
"""

from __future__ import annotations

import argparse
import csv
import json
import os
import sys
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path

import numpy as np

from . import acceptance
from .config import Config, ConfigError, build_clients, client_issues, load_config
from .core import ModelError
from .dual import StepSchedule, evaluate_policy, price_iteration, write_history
from .learning import QTable, Schedules, ScheduleError, q_learning, two_timescale_run
from .mdp import ConvergenceError, InstanceTooLarge, average_cost_solve, backward_induction, d_from_values, \
    discounted_value_iteration, verify_D_monotone, verify_threshold
from .simulator import ConstraintViolation, Scenario, TablePolicy, metrics_report, run
from .whittle import BinaryClientModel, SeparableIndexPolicy, WhittlePolicy, check_indexability, index_table, \
    write_index_tables

EXIT_OK, EXIT_NUMERICAL, EXIT_CONFIG, EXIT_VERIFY = 0, 1, 2, 3
THREADS_ENV = "DAS_INDEX_THREADS"


class VerificationFailed(RuntimeError):
    pass


def _threads(args) -> int:
    if args.threads is not None:
        return max(1, args.threads)
    env = os.environ.get(THREADS_ENV)
    if env:
        try:
            return max(1, int(env))
        except ValueError as exc:
            raise ConfigError(f"{THREADS_ENV} must be an integer, got {env!r}") from exc
    return 1


def _map(fn, items, threads: int) -> list:
    if threads <= 1:
        return [fn(x) for x in items]
    with ThreadPoolExecutor(max_workers=threads) as pool:
        return list(pool.map(fn, items))


def _open_csv(path: Path, header: str):
    fh = open(path, "w", newline="")
    fh.write(f"# {header}\n")
    return fh, csv.writer(fh)


def _write_json(path: Path, doc: dict) -> None:
    path.write_text(json.dumps(doc, indent=2, default=float) + "\n")


def _binary(model, spec) -> BinaryClientModel:
    ta = spec.get("transmit_action", {})
    return BinaryClientModel(model, ta.get("quality", 0), ta.get("power", 1))


def cmd_solve(cfg: Config, out: Path, strict: bool, threads: int, log) -> int:
    models, channels = build_clients(cfg)
    s = cfg.section("solver")

    def one(n):
        model, channel = models[n], channels[n]
        disc = discounted_value_iteration(model, s["price"], s["beta"], s["tol"], channel, s["max_iter"])
        avg = average_cost_solve(model, s["price"], s["tol"], channel, s["max_iter"])
        _, ds = backward_induction(model, s["price"], s["beta"], s["horizon_stages"], channel)
        C = 1 if channel is None else channel.n_states
        stationary = d_from_values(model, disc.value.reshape(-1, C), s["beta"], 0, channel)
        bad = next((d.stage for d in ds if not verify_D_monotone(d)), None)
        return disc, avg, {
            "threshold_discounted": verify_threshold(disc.policy, model, channel).passed,
            "threshold_average": verify_threshold(avg.policy, model, channel).passed,
            "d_monotone_all_stages": bad is None,
            "d_first_failing_stage": bad,
            "d_monotone_stationary": verify_D_monotone(stationary).passed,
        }

    results = _map(one, range(len(models)), threads)
    fh, w = _open_csv(out / "policies.csv", cfg.header("solve"))
    w.writerow(["client", "criterion", "state", "channel", "quality", "power"])
    for n, (disc, avg, _) in enumerate(results):
        for label, res in (("discounted", disc), ("average", avg)):
            for l, c, q, m in res.policy.to_rows():
                w.writerow([n, label, l, c, q, m])
    fh.close()
    fh, w = _open_csv(out / "values.csv", cfg.header("solve"))
    w.writerow(["client", "state", "channel", "discounted_value", "average_bias"])
    for n, (disc, avg, _) in enumerate(results):
        dv, hv = disc.value.reshape(models[n].n_states, -1), avg.value.reshape(models[n].n_states, -1)
        for l in range(dv.shape[0]):
            for c in range(dv.shape[1]):
                w.writerow([n, l, c, repr(float(dv[l, c])), repr(float(hv[l, c]))])
    fh.close()
    summary = {"header": cfg.header("solve"), "clients": [
        {"client": n, "gain": avg.gain, "discounted_iterations": disc.iterations,
         "average_iterations": avg.iterations, "verification": checks}
        for n, (disc, avg, checks) in enumerate(results)]}
    _write_json(out / "solve_summary.json", summary)
    failed = [(n, k) for n, (_, _, checks) in enumerate(results)
              for k in ("threshold_discounted", "threshold_average", "d_monotone_all_stages") if not checks[k]]
    for n, r in enumerate(results):
        log(f"client {n}: gain {r[1].gain:.6f}; checks {r[2]}")
    if failed and strict:
        raise VerificationFailed(f"verification failed: {failed}")
    return EXIT_OK


def cmd_price(cfg: Config, out: Path, strict: bool, threads: int, log) -> int:
    models, channels = build_clients(cfg)
    p = cfg.section("pricing")
    result = price_iteration(models, p["power_budget"], StepSchedule(p["step_a"], p["step_b"]), p["max_iters"],
                             p["tol"], initial_price=p["initial_price"], patience=p["patience"], channels=channels,
                             solver_tol=cfg.section("solver")["tol"])
    write_history(out / "price_iterations.csv", result.history, cfg.header("price"))
    bundle = {"header": cfg.header("price"), "report": result.as_report(),
              "policies": [[list(r) for r in pol.to_rows()] for pol in result.policies]}
    if result.mixed_policies is not None:
        left, right, theta = result.mixed_policies
        bundle["time_sharing"] = {"theta": theta,
                                  "left": [[list(r) for r in pol.to_rows()] for pol in left],
                                  "right": [[list(r) for r in pol.to_rows()] for pol in right]}
    _write_json(out / "price_bundle.json", bundle)
    log(f"price {result.price:.6f}, dual {result.dual:.6f}, converged {result.converged}")
    if not result.converged:
        raise ConvergenceError("price iteration did not converge")
    return EXIT_OK


def cmd_whittle(cfg: Config, out: Path, strict: bool, threads: int, log) -> int:
    models, _ = build_clients(cfg)
    wcfg = cfg.section("whittle")
    binaries = [_binary(m, spec) for m, spec in zip(models, cfg.data["clients"])]

    def one(b):
        cap = b.default_price_cap() if wcfg["price_cap"] is None else wcfg["price_cap"]
        report = check_indexability(b, np.linspace(0.0, cap, wcfg["grid_points"]))
        return index_table(b, cap, wcfg["tol"]), report

    results = _map(one, binaries, threads)
    write_index_tables(out / "whittle_indices.csv", [r[0] for r in results], cfg.header("whittle"))
    doc = {"header": cfg.header("whittle"), "clients": [
        {"client": n, "indexable_on_grid": rep.passed, "violation": rep.violation, "price_cap": tab.price_cap}
        for n, (tab, rep) in enumerate(results)]}
    _write_json(out / "indexability.json", doc)
    log(f"indexable on grid: {[r[1].passed for r in results]}")
    if strict and not all(r[1].passed for r in results):
        raise VerificationFailed("indexability check failed")
    return EXIT_OK


def _schedules(lcfg: dict) -> Schedules:
    return Schedules(lcfg["lr_exponent"], lcfg["price_exponent"], lcfg["temperature_scale"], lcfg["exploration"],
                     lcfg["epsilon"], lcfg["literal_sign"], lcfg["rate_kind"], lcfg["discount"])


def cmd_learn(cfg: Config, out: Path, strict: bool, threads: int, log) -> int:
    models, channels = build_clients(cfg)
    if any(ch is not None for ch in channels):
        raise ConfigError("learning supports i.i.d. channels only")
    lcfg = cfg.section("learning")
    sched = _schedules(lcfg)
    header = cfg.header("learn")
    if lcfg["power_budget"] is not None:
        res = two_timescale_run(models, lcfg["power_budget"], lcfg["horizon"], cfg.seed, sched,
                                trace_every=lcfg["curve_every"])
        fh, w = _open_csv(out / "price_trace.csv", header)
        w.writerow(["slot", "price"])
        w.writerows((t, repr(p)) for t, p in res.price_trace)
        fh.close()
        for n, table in enumerate(res.tables):
            (out / f"qtable_client{n}.json").write_text(table.to_json(sched, {"header": header}))
        _write_json(out / "learn_summary.json", {"header": header, "price": res.price,
                                                  "realized_power": res.realized_power, "mean_cost": res.mean_cost})
        log(f"learned price {res.price:.6f}, realised power {res.realized_power:.6f}")
        return EXIT_OK
    fh, w = _open_csv(out / "learning_curve.csv", header)
    w.writerow(["client", "step", "gain_estimate", "running_mean_cost"])
    summary = []
    for n, model in enumerate(models):
        res = q_learning(model, lcfg["horizon"], cfg.seed + n, sched, lcfg["variant"], lcfg["discount"],
                         lcfg["price"], curve_every=lcfg["curve_every"])
        w.writerows((n, t, repr(g), repr(c)) for t, g, c in res.curve)
        (out / f"qtable_client{n}.json").write_text(res.table.to_json(sched, {"header": header}))
        summary.append({"client": n, "gain_estimate": res.gain_estimate, "mean_cost": res.mean_cost,
                        "greedy_policy": res.table.greedy().tolist()})
    fh.close()
    _write_json(out / "learn_summary.json", {"header": header, "clients": summary})
    log(f"learned {len(models)} table(s)")
    return EXIT_OK


def cmd_simulate(cfg: Config, out: Path, strict: bool, threads: int, log) -> int:
    models, channels = build_clients(cfg)
    sim = cfg.section("simulation")
    scenario = Scenario(models, sim["horizon"], cfg.seed, channels, sim["mode"], sim["power_budget"],
                        sim["n_channels"], sim["peak_power"])
    models, channels = scenario.models, scenario.channels
    if sim["policy"] == "optimal":
        tol = cfg.section("solver")["tol"]
        solves = [average_cost_solve(m, sim["price"], tol, ch) for m, ch in zip(models, channels)]
        policy = TablePolicy([r.policy for r in solves])
    elif sim["policy"] == "whittle":
        if any(ch is not None for ch in channels):
            raise ConfigError("the Whittle policy supports i.i.d. channels only")
        wcfg = cfg.section("whittle")
        binaries = [_binary(m, spec) for m, spec in zip(models, cfg.data["clients"])]
        tables = _map(lambda b: index_table(b, wcfg["price_cap"], wcfg["tol"]), binaries, threads)
        policy = WhittlePolicy(tables, [m.action_index(b.transmit_action) for m, b in zip(models, binaries)],
                               scenario.n_channels or len(models))
    else:
        if any(ch is not None for ch in channels):
            raise ConfigError("the separable index policy supports i.i.d. channels only")
        values = [average_cost_solve(m, sim["price"]).value for m in models]
        policy = SeparableIndexPolicy(models, values, scenario.n_channels or len(models), sim["price"])
    trace = run(scenario, policy)
    header = cfg.header("simulate")
    report = metrics_report(trace)
    report["header"] = header
    if sim["policy"] == "optimal":
        report["price"] = sim["price"]
        report["exact_priced_gain"] = [r.gain for r in solves]
        report["exact"] = [None if ch is not None else
                           {"qoe_cost": (st := evaluate_policy(m, tab)).qoe_cost, "power": st.power}
                           for m, ch, tab in zip(models, channels, policy.tables)]
    _write_json(out / "simulation_summary.json", report)
    if sim["write_trace"]:
        (out / "trace.csv").write_text(trace.to_csv(header))
    log(f"objective {report['totals']['objective']:.6f}, mean power {report['totals']['mean_power']:.6f}")
    return EXIT_OK


def cmd_verify(cfg: Config, out: Path, strict: bool, threads: int, log) -> int:
    problems = client_issues(cfg)
    for line in problems:
        log(f"[FAIL] config: {line}")
    vcfg = cfg.section("verify")
    results = acceptance.run_criteria(vcfg["criteria"], vcfg["scale"], cfg.seed, report=log)
    doc = {"header": cfg.header("verify"), "scale": vcfg["scale"], "model_issues": problems,
           "criteria": [{"number": r.number, "title": r.title, "passed": r.passed, "summary": r.summary,
                         "seconds": r.seconds, "details": r.details} for r in results]}
    _write_json(out / "verify_report.json", doc)
    failed = [r.number for r in results if not r.passed]
    log(f"{len(results) - len(failed)}/{len(results)} criteria pass" + (f"; failing {failed}" if failed else ""))
    if problems or failed:
        raise VerificationFailed(f"failing criteria {failed}, model issues {len(problems)}")
    return EXIT_OK


COMMANDS = {"solve": cmd_solve, "price": cmd_price, "whittle": cmd_whittle, "learn": cmd_learn,
            "simulate": cmd_simulate, "verify": cmd_verify}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="das-index", description=__doc__.splitlines()[0])
    parser.add_argument("command", choices=sorted(COMMANDS))
    parser.add_argument("--config", required=True, help="JSON configuration file")
    parser.add_argument("--seed", type=int, default=None, help="override the configured seed")
    parser.add_argument("--strict", action="store_true", help="exit 3 when a structural verification fails")
    parser.add_argument("--out", default=None, help="output directory (default: output.dir of the config)")
    parser.add_argument("--threads", type=int, default=None, help=f"worker threads (fallback ${THREADS_ENV})")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)

    def log(msg):
        print(msg, flush=True)

    try:
        cfg = load_config(args.config, args.seed)
        threads = _threads(args)
        out = Path(args.out or cfg.section("output")["dir"])
        out.mkdir(parents=True, exist_ok=True)
        return COMMANDS[args.command](cfg, out, args.strict, threads, log)
    except (ConfigError, ModelError, ScheduleError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except VerificationFailed as exc:
        print(f"verification failure: {exc}", file=sys.stderr)
        return EXIT_VERIFY
    except (ConvergenceError, InstanceTooLarge, ConstraintViolation, np.linalg.LinAlgError,
            FloatingPointError, RuntimeError) as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL


if __name__ == "__main__":
    sys.exit(main())
