"""Command-line entry point.

Subcommands
-----------
run             closed-loop episodes; per-episode CSV/JSON logs and plot data
verify          invariant suites on the scenario; JSON report, exit 0 iff all pass
bench           per-phase timing table (CSV columns Dynamics, N, Jac, Ricc, QP)
compare         robust controller against the slack-penalised baseline
synth-terminal  compute (or refresh) the cached terminal ingredients

Exit codes: 0 success, 1 a run or check failed, 2 invalid usage or config.
The worker count of episode runs is capped by ``RNMPC_MAX_WORKERS``.
"""

from __future__ import annotations

import argparse
import csv
import json
import sys
import time
from pathlib import Path

import numpy as np

from . import __version__
from .config import (ConfigError, ControllerFactory, Problem, StaleCacheError, build_problem,
                     load_scenario, terminal_path)
from .feasibility_oracle import (DegenerateBoundError, TubeEscapeError, build_candidate,
                                 check_candidate)
from .polytope import TerminalSynthesisError, synth_terminal, verify_rpi
from .scp import MODES
from .sim import bench, bench_csv, compare, run_episodes, scaling_exponent
from .tube import check_plan, reachable_input, reachable_state

SUMMARY_SCHEMA = "rnmpc.summary/1"
PLOT_SCHEMA = "rnmpc.plot/1"
VERIFY_SCHEMA = "rnmpc.verify/1"

EXIT_OK, EXIT_FAIL, EXIT_USAGE = 0, 1, 2


class UsageError(Exception):
    pass


def _write_json(path: Path, doc: dict):
    path.write_text(json.dumps(doc, indent=1, default=_default))


def _default(o):
    if isinstance(o, np.ndarray):
        return o.tolist()
    if isinstance(o, np.generic):
        return o.item()
    raise TypeError(type(o).__name__)


def _load(args):
    path = args.config or args.config_pos
    if path is None:
        raise UsageError("a scenario file is required (--config PATH)")
    cfg = load_scenario(path)
    return cfg.with_overrides(seed=args.seed, episodes=args.episodes, mode=args.mode,
                              output=str(Path(args.out).resolve()) if args.out else None)


def _out(cfg) -> Path:
    out = cfg.output_dir
    out.mkdir(parents=True, exist_ok=True)
    return out


# ---------------------------------------------------------------------------
# plot data


def _plot_rows(log, model, C):
    """Interval hulls of the state and input tubes of every logged plan."""
    rows = []
    for t, plan in sorted(log.plans.items()):
        for k in range(plan.T + 1):
            lo, hi = reachable_state(plan, k).interval_hull()
            c = plan.z[k] + plan.psi_x[k]
            for i in range(model.n_x):
                rows.append([t, k, log.t[t] + k * (model.dt or 1.0), f"x{i}", c[i], lo[i], hi[i]])
            if k < plan.T:
                lo, hi = reachable_input(plan, k).interval_hull()
                c = plan.v[k] + plan.psi_u[k]
                for i in range(model.n_u):
                    rows.append([t, k, log.t[t] + k * (model.dt or 1.0), f"u{i}", c[i], lo[i], hi[i]])
    return rows


def _constraint_lines(C):
    """Box bounds per variable; rows that are not axis-aligned are listed raw."""
    lines = []
    n_x = C.n_x
    for h, b in zip(C.H, C.b):
        nz = np.flatnonzero(h)
        if nz.size == 1:
            i = int(nz[0])
            name = f"x{i}" if i < n_x else f"u{i - n_x}"
            bound = -b / h[i]
            lines.append([name, "upper" if h[i] > 0 else "lower", bound])
        else:
            lines.append(["row", " ".join(repr(float(a)) for a in h), -b])
    return lines


def _write_plot_data(out: Path, log, model, C, tag: str):
    with open(out / f"plot_tubes_{tag}.csv", "w", newline="") as fh:
        wr = csv.writer(fh)
        wr.writerow([f"# schema={PLOT_SCHEMA}"])
        wr.writerow(["t_plan", "k", "time", "variable", "center", "lower", "upper"])
        wr.writerows(_plot_rows(log, model, C))
    with open(out / "plot_constraints.csv", "w", newline="") as fh:
        wr = csv.writer(fh)
        wr.writerow([f"# schema={PLOT_SCHEMA}"])
        wr.writerow(["variable", "side", "bound"])
        wr.writerows(_constraint_lines(C))


# ---------------------------------------------------------------------------
# run


def _episodes(prob: Problem, soft: bool = False):
    cfg = prob.cfg
    x0s = cfg.initial_states(prob.model.n_x)
    return run_episodes(ControllerFactory(cfg, soft=soft), cfg.disturbance_policy(), x0s, cfg.steps,
                        workers=cfg.workers, thin=cfg.thin,
                        scenario={"model": cfg.model, "horizon": cfg.horizon})


def _summary(cfg, logs, seconds):
    ms = np.concatenate([lg.solve_ms for lg in logs]) if logs else np.zeros(0)
    return {
        "schema": SUMMARY_SCHEMA, "version": __version__, "config": cfg.to_dict(),
        "episodes": [dict(lg.aggregates(), episode=i, failure=lg.failure) for i, lg in enumerate(logs)],
        "totals": {"violations": int(sum(lg.violation_count for lg in logs)),
                   "max_violation": float(max((lg.max_violation for lg in logs), default=0.0)),
                   "tube_failures": int(sum(lg.tube_failures for lg in logs)),
                   "failed_episodes": int(sum(lg.failure is not None for lg in logs)),
                   "mean_solve_ms": float(np.nanmean(ms)) if ms.size else None,
                   "max_solve_ms": float(np.nanmax(ms)) if ms.size else None},
        "wall_seconds": seconds,
    }


def cmd_run(args) -> int:
    cfg = _load(args)
    prob = build_problem(cfg)
    out = _out(cfg)
    t0 = time.perf_counter()
    logs = _episodes(prob)
    for i, lg in enumerate(logs):
        lg.to_csv(out / f"episode_{i:03d}.csv")
        lg.to_json(out / f"episode_{i:03d}.json")
    _write_plot_data(out, logs[0], prob.model, prob.C, "episode_000")
    summary = _summary(cfg, logs, time.perf_counter() - t0)
    _write_json(out / "summary.json", summary)
    tot = summary["totals"]
    print(f"{len(logs)} episode(s) x {cfg.steps} steps: {tot['violations']} violation(s), "
          f"{tot['tube_failures']} tube failure(s), mean solve {tot['mean_solve_ms'] or 0:.1f} ms; "
          f"outputs in {out}")
    first = logs[0].failure
    if first is not None and first["t"] == 0 and first["kind"] == "infeasible":
        print("error: initial state not robustly feasible", file=sys.stderr)
        return EXIT_FAIL
    if tot["failed_episodes"]:
        for i, lg in enumerate(logs):
            if lg.failure:
                print(f"episode {i}: {lg.failure['message']} at step {lg.failure['t']}", file=sys.stderr)
        return EXIT_FAIL
    return EXIT_OK


# ---------------------------------------------------------------------------
# verify


def _verify(prob: Problem, logs) -> dict:
    cfg = prob.cfg
    m, C = prob.model, prob.C
    err_true = cfg.validated_error_bound(m)
    checks = {}

    def record(name, ok, **info):
        info.pop("passed", None)
        checks[name] = dict(passed=bool(ok), **info)

    if prob.ti is not None:
        rep = verify_rpi(prob.ti, err_true, C=C, cost=prob.cost, model=m)
        record("terminal_ingredients", rep.passed, **rep.to_dict())
    failed_eps = [(i, lg.failure) for i, lg in enumerate(logs) if lg.failure]
    record("episodes_complete", not failed_eps, failures=failed_eps)
    record("constraints", all(lg.violation_count == 0 for lg in logs),
           violations=int(sum(lg.violation_count for lg in logs)),
           max_violation=float(max(lg.max_violation for lg in logs)))
    certified = not cfg.controller.simplified
    if certified:
        record("tube_containment", all(lg.tube_failures == 0 for lg in logs),
               failures=int(sum(lg.tube_failures for lg in logs)),
               max_wbar=float(np.nanmax(np.concatenate([lg.wbar_norm for lg in logs]))))
        worst = {}
        n_plans = 0
        plan_fail = []
        for i, lg in enumerate(logs):
            for t, plan in lg.plans.items():
                n_plans += 1
                rep = check_plan(plan, m, err_true, C, prob.ti, x=lg.x[t], terminal=prob.ti is not None,
                                 exact_sigma=True)
                for k, v in rep.margins.items():
                    worst[k] = min(worst.get(k, np.inf), v)
                if not rep.passed:
                    plan_fail.append({"episode": i, "t": t, "failures": rep.failures})
        record("plan_invariants", not plan_fail, plans=n_plans, worst_margins=worst,
               failures=plan_fail[:20])
        if prob.ti is not None:
            wmax, cmin, bad = 0.0, np.inf, []
            n = 0
            for i, lg in enumerate(logs):
                for t in range(lg.steps):
                    plan = lg.plans.get(t)
                    if plan is None:
                        continue
                    n += 1
                    try:
                        cand = build_candidate(plan, lg.x[t + 1], prob.ti)
                    except (TubeEscapeError, DegenerateBoundError) as exc:
                        bad.append({"episode": i, "t": t, "error": str(exc)})
                        continue
                    wmax = max(wmax, float(np.abs(cand.w_bar).max(initial=0.0)))
                    rep = check_candidate(cand, C, prob.ti, err_true, m)
                    cmin = min(cmin, min(rep.margins.values()))
                    if not rep.passed:
                        bad.append({"episode": i, "t": t, "failures": rep.failures})
            record("recursive_feasibility", not bad and wmax <= 1 + 1e-9, candidates=n,
                   max_wbar=wmax, min_margin=cmin, failures=bad[:20])
    else:
        record("plan_invariants", True, skipped="simplified mode carries no certificate")
    return checks


def cmd_verify(args) -> int:
    cfg = _load(args)
    prob = build_problem(cfg)
    out = _out(cfg)
    logs = _episodes(prob)
    checks = _verify(prob, logs)
    ok = all(c["passed"] for c in checks.values())
    _write_json(out / "verify_report.json", {"schema": VERIFY_SCHEMA, "version": __version__,
                                              "config": cfg.to_dict(), "passed": ok, "checks": checks})
    for name, c in checks.items():
        print(f"{'PASS' if c['passed'] else 'FAIL'}  {name}")
    print(f"report: {out / 'verify_report.json'}")
    return EXIT_OK if ok else EXIT_FAIL


# ---------------------------------------------------------------------------
# bench, compare, synth-terminal


def cmd_bench(args) -> int:
    cfg = _load(args)
    out = _out(cfg)
    b = cfg.bench
    scales = [(name, T) for name in b.models for T in b.horizons]
    rows = bench(scales, reps=b.reps)
    bench_csv(rows, out / "bench.csv")
    exps = {}
    for name in b.models:
        sel = [r for r in rows if r.dynamics == name]
        if len(sel) >= 2:
            exps[name] = scaling_exponent([r.N for r in sel], [r.ricc for r in sel])
    _write_json(out / "bench.json", {"schema": "rnmpc.bench/1", "reps": b.reps,
                                     "rows": [r.__dict__ for r in rows], "ricc_exponent": exps})
    print(bench_csv(rows), end="")
    for name, e in exps.items():
        print(f"Riccati-phase exponent ({name}): {e:.2f}")
    return EXIT_OK


def cmd_compare(args) -> int:
    cfg = _load(args)
    prob = build_problem(cfg)
    out = _out(cfg)
    robust = _episodes(prob)
    soft = _episodes(prob, soft=True)
    rep = compare(robust, soft, prob.model.velocity_idx)
    (out / "compare.md").write_text(rep.to_markdown())
    rep.to_csv(out / "compare.csv")
    for i, (r, s) in enumerate(zip(robust, soft)):
        r.to_csv(out / f"robust_{i:03d}.csv")
        s.to_csv(out / f"soft_{i:03d}.csv")
    _write_plot_data(out, robust[0], prob.model, prob.C, "robust_000")
    print(rep.to_markdown(), end="")
    failed = [lg for lg in robust + soft if lg.failure]
    for lg in failed:
        print(f"episode {lg.scenario['episode']}: {lg.failure['message']}", file=sys.stderr)
    return EXIT_FAIL if failed else EXIT_OK


def cmd_synth_terminal(args) -> int:
    cfg = _load(args)
    m = cfg.build_model()
    C = cfg.build_constraints()
    cost = cfg.build_cost(m)
    err = cfg.controller_error_bound(m)
    path = terminal_path(cfg, m, err, C, cost)
    t0 = time.perf_counter()
    ti = synth_terminal(m, cost, err, C, method=cfg.controller.terminal_method)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(ti.to_json())
    print(f"terminal set with {ti.n_f} rows, tau_f = {ti.tau_f:.6g}, "
          f"{time.perf_counter() - t0:.2f} s; written to {path}")
    return EXIT_OK


COMMANDS = {"run": cmd_run, "verify": cmd_verify, "bench": cmd_bench, "compare": cmd_compare,
            "synth-terminal": cmd_synth_terminal}


def make_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="rnmpc", description=__doc__.split("\n")[0])
    p.add_argument("--version", action="version", version=f"rnmpc {__version__}")
    sub = p.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        s = sub.add_parser(name)
        s.add_argument("config_pos", nargs="?", metavar="CONFIG", help="scenario TOML file")
        s.add_argument("--config", help="scenario TOML file")
        s.add_argument("--out", help="output directory (overrides the scenario)")
        s.add_argument("--seed", type=int, help="random seed (overrides the scenario)")
        s.add_argument("--episodes", type=int, help="number of episodes (overrides the scenario)")
        s.add_argument("--mode", choices=MODES, help="controller mode (overrides the scenario)")
    return p


def main(argv=None) -> int:
    args = make_parser().parse_args(argv)
    try:
        return COMMANDS[args.command](args)
    except (ConfigError, UsageError, StaleCacheError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except TerminalSynthesisError as exc:
        print(f"error: terminal synthesis failed: {exc}", file=sys.stderr)
        return EXIT_FAIL


if __name__ == "__main__":
    sys.exit(main())
