"""Command-line entry point: gen, plan, simulate, bench and export.

Run directory layout written by ``plan`` and ``simulate``::

    scenario.json    the scenario that was run (re-readable by ``plan``)
    trajectory.csv   one row per knot: t, state components, applied control
    cycles.log       one JSON object per planning cycle
    metrics.json     run outcome and metrics

Exit codes: 0 success, 1 run failure (a failure_reason is reported),
2 usage error or invalid input.
"""

from __future__ import annotations

import argparse
import csv
import json
import math
import os
import sys
from pathlib import Path

import numpy as np

from . import __version__
from .dynamics import Trajectory
from .planner import PlannerConfig, RunResult, run
from .scenario import (
    GenerationFailed,
    GenerationParams,
    generate_scenario,
    load_scenario,
    save_scenario,
    scenario_to_dict,
    validate_scenario,
)
from .sim import FORMAT_VERSION, BatchTable, FailureCriteria, batch, clearance_trace, simulate

TRAJECTORY_HEADER = f"# cycleplan trajectory v{FORMAT_VERSION}"
CLEARANCE_HEADER = f"# cycleplan clearance v{FORMAT_VERSION}"
AGGREGATE_PREFIX = "# aggregate "


class UsageError(Exception):
    """Bad input detected after parsing (unreadable or invalid files)."""


# --------------------------------------------------------------------------
# parser

def _positive_int(text):
    v = int(text)
    if v < 1:
        raise argparse.ArgumentTypeError(f"expected a positive integer, got {text}")
    return v


def _nonneg_float(text):
    v = float(text)
    if not v >= 0:
        raise argparse.ArgumentTypeError(f"expected a number >= 0, got {text}")
    return v


def _add_generation_flags(p):
    p.add_argument("--obstacles", type=int, default=20, metavar="N", help="number of obstacle balls (default 20)")
    p.add_argument("--model", choices=("double_integrator", "unicycle"), default="double_integrator",
                   help="vehicle model")
    p.add_argument("--obstacle-speed", type=_nonneg_float, default=0.0, metavar="V",
                   help="obstacle speed cap in m/s; 0 gives a static map")
    p.add_argument("--motion-seed", type=int, default=0, metavar="S", help="seed of the obstacle random walks")
    p.add_argument("--v-max", type=float, default=12.0, metavar="V", help="vehicle speed limit (default 12)")
    p.add_argument("--a-max", type=float, default=20.0, metavar="A", help="vehicle control limit (default 20)")
    p.add_argument("--step", type=float, default=0.25, metavar="H", help="discretization step in s (default 0.25)")


def _add_planner_flags(p):
    p.add_argument("--search", choices=("cvapf", "cdwa"), default="cvapf", help="search backend (default cvapf)")
    p.add_argument("--cycle-limit", type=_positive_int, default=300, metavar="K",
                   help="maximum planning cycles (default 300)")
    p.add_argument("--time-mode", choices=("indexed", "frozen"), default="indexed",
                   help="obstacle positions per knot time or frozen at the cycle start")
    p.add_argument("--pipelined", action="store_true", help="plan the next cycle while the current one executes")


def _add_criteria_flags(p):
    p.add_argument("--deadline", action="store_true",
                   help="treat a cycle slower than its applied horizon as late")
    p.add_argument("--ignore-infeasibility", action="store_true", help="do not count infeasibility as a failure")
    p.add_argument("--ignore-violation", action="store_true",
                   help="skip the constraint-violation audit of every cycle")
    p.add_argument("--ignore-late", action="store_true", help="do not end a run on a late cycle")


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="cycleplan", description="Cycle-based trajectory planning around ball obstacles.")
    ap.add_argument("--version", action="version", version=f"cycleplan {__version__}")
    sub = ap.add_subparsers(dest="command", metavar="COMMAND")
    sub.required = True

    g = sub.add_parser("gen", help="generate a seeded scenario file")
    g.add_argument("--seed", type=int, required=True, metavar="S", help="map seed")
    g.add_argument("--out", metavar="FILE", help="output path (default: stdout)")
    _add_generation_flags(g)

    p = sub.add_parser("plan", help="run the planner on a scenario file")
    p.add_argument("--scenario", required=True, metavar="FILE", help="scenario JSON")
    p.add_argument("--out", required=True, metavar="DIR", help="run output directory")
    _add_planner_flags(p)

    s = sub.add_parser("simulate", help="closed-loop run with obstacle motion and metrics")
    s.add_argument("--scenario", required=True, metavar="FILE", help="scenario JSON")
    s.add_argument("--out", required=True, metavar="DIR", help="run output directory")
    _add_planner_flags(s)
    _add_criteria_flags(s)

    b = sub.add_parser("bench", help="batch of seeded runs written as CSV")
    src = b.add_mutually_exclusive_group(required=True)
    src.add_argument("--seeds", metavar="FILE", help="file of map seeds, one per line")
    src.add_argument("--count", type=_positive_int, metavar="K", help="run K consecutive seeds")
    b.add_argument("--first-seed", type=int, default=20250712, metavar="S",
                   help="first seed used with --count (default 20250712)")
    b.add_argument("--out", metavar="FILE", help="CSV path (default: stdout)")
    b.add_argument("--workers", type=_positive_int, default=os.cpu_count() or 1, metavar="W",
                   help="parallel processes (default: CPU count)")
    _add_generation_flags(b)
    _add_planner_flags(b)
    _add_criteria_flags(b)

    e = sub.add_parser("export", help="plot-ready CSV from a run directory or bench file")
    where = e.add_mutually_exclusive_group(required=True)
    where.add_argument("--run", metavar="DIR", help="run directory written by plan or simulate")
    where.add_argument("--bench", metavar="FILE", help="CSV written by bench")
    e.add_argument("--what", choices=("clearance", "trajectory", "aggregate"), required=True,
                   help="clearance or trajectory (with --run), aggregate (with --bench)")
    e.add_argument("--out", metavar="FILE", help="output path (default: stdout)")
    return ap


# --------------------------------------------------------------------------
# run directory I/O

def write_trajectory_csv(traj, path) -> None:
    ns = traj.states.shape[1]
    nu = traj.controls.shape[1] if traj.controls.ndim == 2 else 0
    with open(path, "w", newline="") as f:
        f.write(TRAJECTORY_HEADER + "\n")
        w = csv.writer(f, lineterminator="\n")
        w.writerow(["t"] + [f"z{i}" for i in range(ns)] + [f"u{i}" for i in range(nu)])
        for k, (t, z) in enumerate(zip(traj.times, traj.states)):
            u = traj.controls[k].tolist() if k < traj.N else [""] * nu
            w.writerow([repr(float(t))] + [repr(float(v)) for v in z] + [v if v == "" else repr(v) for v in u])


def read_trajectory_csv(path):
    """(times, states, controls) from a trajectory.csv."""
    with open(path, newline="") as f:
        head = f.readline().rstrip("\n")
        if head != TRAJECTORY_HEADER:
            raise UsageError(f"{path}: not a trajectory file (header {head!r})")
        rows = list(csv.reader(f))
    cols = rows[0]
    ns = sum(c.startswith("z") for c in cols)
    data = rows[1:]
    times = np.array([float(r[0]) for r in data])
    states = np.array([[float(v) for v in r[1:1 + ns]] for r in data])
    controls = np.array([[float(v) for v in r[1 + ns:]] for r in data[:-1]])
    return times, states, controls


def write_run_dir(out: Path, scenario, result, metrics: dict) -> None:
    out.mkdir(parents=True, exist_ok=True)
    save_scenario(scenario, out / "scenario.json")
    write_trajectory_csv(result.full_trajectory, out / "trajectory.csv")
    (out / "cycles.log").write_text("".join(line + "\n" for line in result.log_lines()))
    (out / "metrics.json").write_text(json.dumps(metrics, indent=2) + "\n")


def _read_scenario(path):
    try:
        s = load_scenario(path)
    except KeyError as exc:
        raise UsageError(f"cannot read scenario {path}: missing field {exc}") from exc
    except (OSError, ValueError, TypeError) as exc:
        raise UsageError(f"cannot read scenario {path}: {exc}") from exc
    rep = validate_scenario(s)
    if not rep.ok:
        raise UsageError(f"invalid scenario {path}:\n{rep}")
    return s


def _config(args) -> PlannerConfig:
    return PlannerConfig(search_backend=args.search, cycle_limit=args.cycle_limit,
                         time_mode=args.time_mode, pipelined=args.pipelined)


def _criteria(args) -> FailureCriteria:
    return FailureCriteria(count_infeasibility=not args.ignore_infeasibility,
                           count_constraint_violation=not args.ignore_violation,
                           count_excessive_time=not args.ignore_late)


def _generation(args, seed) -> GenerationParams:
    return GenerationParams(n_obs=args.obstacles, seed=seed, model=args.model, obstacle_speed=args.obstacle_speed,
                            motion_seed=args.motion_seed, v_max=args.v_max, a_max=args.a_max, h=args.step)


def _emit(text: str, out) -> None:
    if out:
        Path(out).write_text(text)
    else:
        sys.stdout.write(text)


# --------------------------------------------------------------------------
# commands

def cmd_gen(args) -> int:
    try:
        s = generate_scenario(_generation(args, args.seed))
    except (GenerationFailed, ValueError) as exc:
        raise UsageError(f"generation failed: {exc}") from exc
    if args.out:
        save_scenario(s, args.out)
    else:
        sys.stdout.write(json.dumps(scenario_to_dict(s), indent=2) + "\n")
    return 0


def _report(success, reason, detail) -> int:
    if success:
        return 0
    print(f"run failed: {reason} ({detail})" if detail else f"run failed: {reason}", file=sys.stderr)
    return 1


def cmd_plan(args) -> int:
    s = _read_scenario(args.scenario)
    cfg = _config(args)
    try:
        cfg.check(s)
    except ValueError as exc:
        raise UsageError(str(exc)) from exc
    result = run(s, cfg)
    metrics = {"format": FORMAT_VERSION, "success": result.success, "failure_reason": result.failure_reason,
               "detail": result.detail, "t_f": result.t_f, "cycles": result.n_cycles}
    write_run_dir(Path(args.out), s, result, metrics)
    return _report(result.success, result.failure_reason, result.detail)


def cmd_simulate(args) -> int:
    s = _read_scenario(args.scenario)
    cfg = _config(args)
    try:
        cfg.check(s)
    except ValueError as exc:
        raise UsageError(str(exc)) from exc
    m, result = simulate(s, cfg, deadline=args.deadline, criteria=_criteria(args))
    d = m.as_dict()
    d["detail"] = result.detail
    write_run_dir(Path(args.out), s, result, d)
    return _report(m.success, m.failure_reason, result.detail)


def read_seeds(path) -> list[int]:
    seeds = []
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise UsageError(f"cannot read seeds file {path}: {exc}") from exc
    for n, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        for tok in line.replace(",", " ").split():
            try:
                seeds.append(int(tok))
            except ValueError:
                raise UsageError(f"{path}:{n}: not an integer seed: {tok!r}") from None
    if not seeds:
        raise UsageError(f"{path}: no seeds")
    if len(set(seeds)) != len(seeds):
        raise UsageError(f"{path}: seeds must be distinct")
    return seeds


def bench_csv(table: BatchTable) -> str:
    """Rows of the batch plus a trailing aggregate comment line."""
    agg = table.aggregate()
    return table.to_csv() + AGGREGATE_PREFIX + json.dumps(agg, sort_keys=True) + "\n"


def read_bench_csv(path):
    """(rows as dicts, aggregate dict) from a bench CSV."""
    try:
        lines = Path(path).read_text().splitlines()
    except OSError as exc:
        raise UsageError(f"cannot read {path}: {exc}") from exc
    if not lines or not lines[0].startswith("# cycleplan batch"):
        raise UsageError(f"{path}: not a bench file")
    agg = None
    body = []
    for line in lines[1:]:
        if line.startswith(AGGREGATE_PREFIX):
            agg = json.loads(line[len(AGGREGATE_PREFIX):])
        elif line:
            body.append(line)
    rows = [{k: _parse_cell(v) for k, v in r.items()} for r in csv.DictReader(body)]
    return rows, agg


def _parse_cell(v: str):
    if v == "null":
        return None
    if v in ("True", "False"):
        return v == "True"
    for kind in (int, float):
        try:
            return kind(v)
        except ValueError:
            pass
    return v


def cmd_bench(args) -> int:
    seeds = read_seeds(args.seeds) if args.seeds else list(range(args.first_seed, args.first_seed + args.count))
    try:
        table = batch(seeds, _generation(args, seeds[0]), _config(args), deadline=args.deadline,
                      criteria=_criteria(args), workers=args.workers)
    except (GenerationFailed, ValueError) as exc:
        raise UsageError(str(exc)) from exc
    _emit(bench_csv(table), args.out)
    return 0


def cmd_export(args) -> int:
    if args.bench:
        if args.what != "aggregate":
            raise UsageError("--bench only supports --what aggregate")
        _, agg = read_bench_csv(args.bench)
        if agg is None:
            raise UsageError(f"{args.bench}: no aggregate line")
        _emit(json.dumps(agg, indent=2, sort_keys=True) + "\n", args.out)
        return 0
    if args.what == "aggregate":
        raise UsageError("--what aggregate needs --bench")
    rd = Path(args.run)
    if not (rd / "trajectory.csv").is_file():
        raise UsageError(f"{rd}: no trajectory.csv (not a run directory)")
    times, states, controls = read_trajectory_csv(rd / "trajectory.csv")
    if args.what == "trajectory":
        buf = [TRAJECTORY_HEADER, "t,x,y"]
        buf += [f"{t!r},{z[0]!r},{z[1]!r}" for t, z in zip(times.tolist(), states.tolist())]
        _emit("\n".join(buf) + "\n", args.out)
        return 0
    s = _read_scenario(rd / "scenario.json")
    traj = Trajectory(states, controls.reshape(len(states) - 1, -1), s.h, float(times[0]))
    t, vals = clearance_trace(RunResult(traj, [], traj.N * s.h, True), s)
    buf = [CLEARANCE_HEADER, "t,clearance"]
    buf += [f"{a!r},{'null' if not math.isfinite(v) else repr(v)}" for a, v in zip(t.tolist(), vals.tolist())]
    _emit("\n".join(buf) + "\n", args.out)
    return 0


COMMANDS = {"gen": cmd_gen, "plan": cmd_plan, "simulate": cmd_simulate, "bench": cmd_bench, "export": cmd_export}


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:  # argparse already printed usage and the error line
        return int(exc.code or 0)
    try:
        return COMMANDS[args.command](args)
    except UsageError as exc:
        print(f"cycleplan {args.command}: error: {exc}", file=sys.stderr)
        sub = parser._subparsers._group_actions[0].choices[args.command]  # synopsis of this command
        print(sub.format_usage().rstrip(), file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
