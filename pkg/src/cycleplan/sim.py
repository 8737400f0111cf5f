"""Closed-loop runs with run metrics, a compute-time deadline mode and
multi-seed batches."""

from __future__ import annotations

import csv
import dataclasses
import io
import math
import statistics
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .dynamics import discretize_exact, get_model
from .geometry import clearances
from .planner import PlannerConfig, RunResult, run
from .scenario import GenerationParams, Scenario, generate_scenario

FORMAT_VERSION = 1
EXCESSIVE_TIME = "ExcessiveComputeTime"

BATCH_COLUMNS = (
    "seed", "success", "failure_reason", "t_f", "cycles", "compute_time_total",
    "compute_time_avg", "compute_time_median", "compute_time_worst", "min_clearance",
    "midpoint_min_clearance", "local_opt_rate", "late_cycles", "non_contracting_steps",
)


@dataclass(frozen=True)
class FailureCriteria:
    """Which conditions end a run as a failure.

    Infeasibility always ends the run (there is no trajectory to apply), so
    the flag only decides whether it is counted as such in the metrics.
    """

    count_infeasibility: bool = True
    count_constraint_violation: bool = True
    count_excessive_time: bool = True


@dataclass
class RunMetrics:
    success: bool
    t_f: float
    cycles: int
    compute_time_total: float
    compute_time_avg: float
    compute_time_median: float
    compute_time_worst: float
    min_clearance: float
    midpoint_min_clearance: float
    local_opt_rate: float
    failure_reason: str | None = None
    late_cycles: int = 0
    non_contracting_steps: int = 0
    seed: int | None = None
    compute_times: list = field(default_factory=list, repr=False)
    local_opt_flags: list = field(default_factory=list, repr=False)

    def as_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d.pop("compute_times")
        d.pop("local_opt_flags")
        d["format"] = FORMAT_VERSION
        return {k: _finite_or_none(v) for k, v in d.items()}


def _finite_or_none(v):
    if isinstance(v, (float, np.floating)):
        v = float(v)
        return v if math.isfinite(v) else None
    return v


# --------------------------------------------------------------------------
# clearance

def clearance_trace(run_result: RunResult, scenario: Scenario) -> tuple[np.ndarray, np.ndarray]:
    """(knot times, min clearance per knot); +inf when the map has no obstacles."""
    traj = run_result.full_trajectory
    times = traj.times
    if not scenario.obstacles:
        return times, np.full(len(times), math.inf)
    vals = np.array([np.min(clearances(z[:2], scenario.centers_at(t), scenario.radii))
                     for z, t in zip(traj.states, times)])
    return times, vals


def midpoint_clearance(run_result: RunResult, scenario: Scenario) -> float:
    """Smallest clearance at the half-step points of the applied controls,
    integrated through the continuous model (reported, never a failure)."""
    traj = run_result.full_trajectory
    if not scenario.obstacles or traj.N == 0:
        return math.inf
    model = get_model(scenario.model)
    h = scenario.h
    best = math.inf
    for z, u, t in zip(traj.states[:-1], traj.controls, traj.times[:-1]):
        mid = discretize_exact(model, z, u, h / 2)
        best = min(best, float(np.min(clearances(mid[:2], scenario.centers_at(t + h / 2), scenario.radii))))
    return best


# --------------------------------------------------------------------------
# single run

def simulate(scenario: Scenario, config: PlannerConfig | None = None, *, deadline: bool = False,
             criteria: FailureCriteria = FailureCriteria()) -> tuple[RunMetrics, RunResult]:
    """Run the planner with the obstacles moving on their own clock.

    With ``deadline`` on, a cycle whose compute time exceeds the duration of
    the controls it hands over (N_hat * h) is late; late cycles end the run
    when ``criteria.count_excessive_time`` is set.
    """
    cfg = config or PlannerConfig()
    if not criteria.count_constraint_violation:
        cfg = dataclasses.replace(cfg, audit=False)
    late = [0]

    def on_cycle(rec):
        if rec.result.trajectory is None:
            return None
        if rec.compute_time > rec.N_hat * scenario.h:
            late[0] += 1
            if deadline and criteria.count_excessive_time:
                return EXCESSIVE_TIME
        return None

    result = run(scenario, cfg, on_cycle=on_cycle)
    metrics = compute_metrics(result, scenario)
    metrics.late_cycles = late[0]
    metrics.seed = scenario.seed
    if result.failure_reason == "Infeasible" and not criteria.count_infeasibility:
        metrics.failure_reason = None
    return metrics, result


def compute_metrics(result: RunResult, scenario: Scenario) -> RunMetrics:
    times = [c.compute_time for c in result.cycles]
    _, trace = clearance_trace(result, scenario)
    t4 = [c.result.local_opt_ok for c in result.cycles if c.result.trajectory is not None]
    return RunMetrics(
        success=result.success,
        t_f=result.t_f,
        cycles=result.n_cycles,
        compute_time_total=float(sum(times)),
        compute_time_avg=float(np.mean(times)) if times else 0.0,
        compute_time_median=float(statistics.median(times)) if times else 0.0,
        compute_time_worst=float(max(times)) if times else 0.0,
        min_clearance=float(trace.min()) if len(trace) else math.inf,
        midpoint_min_clearance=midpoint_clearance(result, scenario),
        local_opt_rate=float(np.mean(t4)) if t4 else 0.0,
        failure_reason=result.failure_reason,
        non_contracting_steps=result.non_contracting_steps,
        compute_times=times,
        local_opt_flags=t4,
    )


# --------------------------------------------------------------------------
# batches

@dataclass
class BatchTable:
    rows: list[RunMetrics]

    def aggregate(self) -> dict:
        """Success rate plus compute-time statistics over every cycle of every run."""
        times = [t for r in self.rows for t in r.compute_times]
        flags = [b for r in self.rows for b in r.local_opt_flags]
        n = len(self.rows)
        return {
            "runs": n,
            "success_rate": sum(r.success for r in self.rows) / n if n else 0.0,
            "compute_time_avg": float(np.mean(times)) if times else 0.0,
            "compute_time_median": float(statistics.median(times)) if times else 0.0,
            "compute_time_worst": float(max(times)) if times else 0.0,
            "local_opt_rate": float(np.mean(flags)) if flags else 0.0,
        }

    def to_csv(self) -> str:
        buf = io.StringIO()
        buf.write(f"# cycleplan batch v{FORMAT_VERSION}\n")
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(BATCH_COLUMNS)
        for r in self.rows:
            d = r.as_dict()
            w.writerow(["null" if d[c] is None else d[c] for c in BATCH_COLUMNS])
        return buf.getvalue()


def _one(args):
    seed, params, config, deadline, criteria = args
    s = generate_scenario(dataclasses.replace(params, seed=seed))
    return simulate(s, config, deadline=deadline, criteria=criteria)[0]


def batch(seeds, params: GenerationParams | None = None, config: PlannerConfig | None = None, *,
          deadline: bool = False, criteria: FailureCriteria = FailureCriteria(),
          workers: int = 1) -> BatchTable:
    seeds = list(seeds)
    if len(set(seeds)) != len(seeds):
        raise ValueError("seeds must be distinct")
    params = params or GenerationParams()
    jobs = [(s, params, config, deadline, criteria) for s in seeds]
    if workers > 1 and len(jobs) > 1:
        with ProcessPoolExecutor(max_workers=workers) as ex:
            rows = list(ex.map(_one, jobs))
    else:
        rows = [_one(j) for j in jobs]
    return BatchTable(rows)
