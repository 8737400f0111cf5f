"""Receding-horizon loop: search, relaxed and strict solves, horizon trimming,
safety-weight scheduling and concatenation of the applied controls."""

from __future__ import annotations

import json
import math
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field, replace

import numpy as np

from .cycle import CycleResult, dynamics_residual, solve_cycle
from .dynamics import DiscreteDynamics, Trajectory, get_model, linearize
from .geometry import clearances
from .scenario import ObstacleView, Scenario
from .search_cdwa import DwaParams, run_cdwa
from .search_cvapf import FieldParams, SearchResult, run_cvapf

FAILURE_REASONS = ("Infeasible", "ConstraintViolation", "CycleLimit", "SearchFailed")


@dataclass(frozen=True)
class PlannerConfig:
    search_backend: str = "cvapf"
    rho_max: float | None = None  # None -> the largest allowed, 1e-3 * min eig(Q0)
    nhat_eps: float = 1e-3
    cycle_limit: int = 300
    tol: float = 1e-8
    # planning-only growth of every obstacle radius; audits use the true radii
    safety_margin: float = 0.1
    time_mode: str = "indexed"  # or "frozen" at the cycle start
    anchor_mode: str = "previous"  # or "first"
    field_params: FieldParams = field(default_factory=FieldParams)
    dwa: DwaParams = field(default_factory=DwaParams)
    pipelined: bool = False
    audit: bool = True  # post-hoc check of every cycle against the true radii
    audit_tol: float = 1e-6

    def check(self, scenario: Scenario) -> None:
        if self.search_backend not in ("cvapf", "cdwa"):
            raise ValueError(f"unknown search backend {self.search_backend!r}")
        if self.time_mode not in ("indexed", "frozen"):
            raise ValueError(f"unknown time mode {self.time_mode!r}")
        if self.anchor_mode not in ("previous", "first"):
            raise ValueError(f"unknown anchor mode {self.anchor_mode!r}")
        lam = float(np.linalg.eigvalsh(scenario.Q0).min())
        if self.rho_max is not None and not 0 <= self.rho_max <= 1e-3 * lam * (1 + 1e-12):
            raise ValueError(f"rho_max must lie in [0, 1e-3 * min eig(Q0)] = [0, {1e-3 * lam:.3g}]")
        if self.cycle_limit < 1:
            raise ValueError("cycle_limit must be >= 1")

    def resolved(self, scenario: Scenario) -> "PlannerConfig":
        """Checked copy with rho_max filled in for this scenario."""
        self.check(scenario)
        if self.rho_max is not None:
            return self
        lam = float(np.linalg.eigvalsh(scenario.Q0).min())
        return replace(self, rho_max=1e-3 * lam)


@dataclass(eq=False)
class CycleRecord:
    index: int
    t0: float
    z0: np.ndarray
    N: int
    N_hat: int
    rho: float
    search_min_Ts: float
    dyn: DiscreteDynamics
    result: CycleResult
    terminal_norm: float
    search_time: float
    compute_time: float

    def log_entry(self) -> dict:
        r = self.result
        d = {k: v for k, v in r.diagnostics.items() if k != "programs"}
        return {
            "cycle": self.index,
            "t0": self.t0,
            "N": self.N,
            "N_hat": self.N_hat,
            "rho": r.rho_used,
            "min_Ts": None if math.isinf(self.search_min_Ts) else self.search_min_Ts,
            "relaxed_objective": r.relaxed_objective,
            "strict_objective": r.strict_objective,
            "terminal_norm": self.terminal_norm,
            "local_opt_ok": r.local_opt_ok,
            "status": r.status,
            "search_time": self.search_time,
            "compute_time": self.compute_time,
            **d,
        }


@dataclass(eq=False)
class RunResult:
    full_trajectory: Trajectory
    cycles: list[CycleRecord]
    t_f: float
    success: bool
    failure_reason: str | None = None
    detail: str = ""

    @property
    def n_cycles(self) -> int:
        return len(self.cycles)

    @property
    def strict_objectives(self) -> list[float]:
        return [c.result.strict_objective for c in self.cycles if c.result.trajectory is not None]

    @property
    def non_contracting_steps(self) -> int:
        """Cycles whose strict objective did not drop below the previous one's."""
        J = self.strict_objectives
        return sum(b >= a for a, b in zip(J, J[1:]))

    def log_lines(self) -> list[str]:
        return [json.dumps(_jsonable(c.log_entry())) for c in self.cycles]


def _jsonable(d):
    if isinstance(d, dict):
        return {k: _jsonable(v) for k, v in d.items()}
    if isinstance(d, (list, tuple)):
        return [_jsonable(v) for v in d]
    if isinstance(d, (np.floating, float)):
        v = float(d)
        return v if math.isfinite(v) else None
    if isinstance(d, (np.integer,)):
        return int(d)
    if isinstance(d, np.bool_):
        return bool(d)
    return d


# --------------------------------------------------------------------------
# small rules

def adjust_horizon(N: int, trajectory: Trajectory, Q2, N_max: int, eps: float = 1e-3) -> int:
    """Largest junction m <= min(N_max, N-2) with u_m and u_{m+1} strictly
    inside the control bound; falls back to max(1, N // 2)."""
    if N < 3:
        return 1
    U = trajectory.controls
    load = np.einsum("ij,jk,ik->i", U, Q2, U)
    inner = load <= 1 - eps
    for m in range(min(N_max, N - 2), 0, -1):
        if inner[m - 1] and inner[m]:
            return m
    return max(1, N // 2)


def update_rho(min_Ts: float, t_w: float, rho_max: float) -> float:
    if t_w <= 0:
        raise ValueError("t_w must be positive")
    if math.isinf(min_Ts):
        return 0.0
    return rho_max * (1.0 - min(1.0, max(0.0, min_Ts / t_w)))


def retry_rho(rho: float, rho_max: float) -> float:
    return rho_max if rho == 0 else min(rho_max, 2 * rho)


def terminal_norm(z, scenario: Scenario) -> float:
    e = np.asarray(z, float) - scenario.zf
    return float(math.sqrt(max(0.0, e @ scenario.Q0 @ e)))


# --------------------------------------------------------------------------
# one cycle

@dataclass(eq=False)
class _CycleOutcome:
    record: CycleRecord | None
    failure: str | None = None
    detail: str = ""
    search: SearchResult | None = None


def _plan_cycle(K: int, z0, t0: float, scenario: Scenario, cfg: PlannerConfig, model) -> _CycleOutcome:
    t_start = time.perf_counter()
    dyn = linearize(model, z0, scenario.h)
    view = ObstacleView(scenario, cfg.safety_margin, frozen_at=t0 if cfg.time_mode == "frozen" else None)
    if cfg.search_backend == "cvapf":
        sr = run_cvapf(z0, scenario, cfg.field_params, t0=t0, view=view, dyn=dyn)
        t_w = cfg.field_params.t_w
    else:
        sr = run_cdwa(z0, scenario, cfg.dwa, t0=t0, view=view, dyn=dyn)
        t_w = cfg.dwa.t_w
    search_time = time.perf_counter() - t_start
    if sr.failed:
        return _CycleOutcome(None, "SearchFailed", f"cycle {K}: {sr.reason}", sr)
    rho = update_rho(sr.min_Ts, t_w, cfg.rho_max)
    times = t0 + scenario.h * np.arange(sr.N + 1)
    centers = view.centers_at_times(times)
    cr = solve_cycle(z0, sr.trajectory, dyn, scenario, centers, view.radii, rho,
                     rho_retry=retry_rho(rho, cfg.rho_max), tol=cfg.tol, anchor_mode=cfg.anchor_mode, t0=t0)
    cr.diagnostics["search_time"] = search_time
    compute_time = time.perf_counter() - t_start
    if cr.trajectory is None:
        rec = CycleRecord(K, t0, np.asarray(z0, float), sr.N, 0, rho, sr.min_Ts, dyn, cr, math.nan,
                          search_time, compute_time)
        return _CycleOutcome(rec, "Infeasible", f"cycle {K}: {cr.status}", sr)
    traj = cr.trajectory
    tn = terminal_norm(traj.states[-1], scenario)
    if tn <= scenario.gamma:
        n_hat = sr.N
    else:
        n_hat = adjust_horizon(sr.N, traj, scenario.Q2, scenario.N_max, cfg.nhat_eps)
    rec = CycleRecord(K, t0, np.asarray(z0, float), sr.N, n_hat, cr.rho_used, sr.min_Ts, dyn, cr, tn,
                      search_time, compute_time)
    problem = _audit_cycle(traj, scenario, cfg) if cfg.audit else ""
    if problem:
        return _CycleOutcome(rec, "ConstraintViolation", f"cycle {K}: {problem}", sr)
    return _CycleOutcome(rec, None, "", sr)


def _audit_cycle(traj: Trajectory, scenario: Scenario, cfg: PlannerConfig) -> str:
    tol = cfg.audit_tol
    Q1, Q2 = scenario.Q1, scenario.Q2
    if np.any(np.einsum("ij,jk,ik->i", traj.states[1:], Q1, traj.states[1:]) > 1 + tol):
        return "state norm bound violated"
    if np.any(np.einsum("ij,jk,ik->i", traj.controls, Q2, traj.controls) > 1 + tol):
        return "control norm bound violated"
    if scenario.obstacles:
        for z, t in zip(traj.states, traj.times):
            if np.min(clearances(z[:2], scenario.centers_at(t), scenario.radii)) < -tol:
                return f"knot at t={t:.3f} collides"
    return ""


# --------------------------------------------------------------------------
# run loop

def run(scenario: Scenario, config: PlannerConfig | None = None, on_cycle=None) -> RunResult:
    """Iterate planning cycles from scenario.z0 until the terminal ball is reached.

    ``on_cycle(record)`` is called after every completed cycle (used by the
    simulator for deadline checks and logging).
    """
    cfg = (config or PlannerConfig()).resolved(scenario)
    model = get_model(scenario.model)
    h = scenario.h
    z = np.asarray(scenario.z0, float).copy()
    t = 0.0
    states = [z.copy()]
    controls: list[np.ndarray] = []
    records: list[CycleRecord] = []

    def finish(success, reason=None, detail=""):
        U = np.array(controls) if controls else np.zeros((0, model.control_dim))
        traj = Trajectory(np.array(states), U, h, 0.0)
        return RunResult(traj, records, h * len(controls), success, reason, detail)

    executor = ThreadPoolExecutor(max_workers=1) if cfg.pipelined else None
    try:
        pending = None
        for K in range(cfg.cycle_limit):
            if pending is not None:
                out = pending.result()
                pending = None
            else:
                out = _plan_cycle(K, z, t, scenario, cfg, model)
            if out.record is not None:
                records.append(out.record)
                if on_cycle is not None:
                    stop = on_cycle(out.record)
                    if stop:
                        return finish(False, stop, f"cycle {K}: stopped by caller")
            if out.failure:
                return finish(False, out.failure, out.detail)
            rec = out.record
            traj = rec.result.trajectory
            n_hat = rec.N_hat
            done = rec.terminal_norm <= scenario.gamma
            z_next = traj.states[n_hat].copy()
            t_next = t + n_hat * h
            if executor is not None and not done and K + 1 < cfg.cycle_limit:
                # the next cycle starts from the predicted trim state; plan it while
                # this cycle's controls are recorded as executed
                pending = executor.submit(_plan_cycle, K + 1, z_next, t_next, scenario, cfg, model)
            for i in range(n_hat):
                controls.append(traj.controls[i].copy())
                states.append(traj.states[i + 1].copy())
            z, t = z_next, t_next
            if done:
                return finish(True)
        return finish(False, "CycleLimit", f"no terminal arrival within {cfg.cycle_limit} cycles")
    finally:
        if executor is not None:
            executor.shutdown(wait=True)


# --------------------------------------------------------------------------
# audits on a finished run

def replay_error(run_result: RunResult) -> float:
    """Largest deviation between stored knots and an open-loop replay of the
    applied controls through each cycle's own discrete model."""
    traj = run_result.full_trajectory
    if traj.N == 0:
        return 0.0
    err = 0.0
    z = traj.states[0].copy()
    k = 0
    for rec in run_result.cycles:
        if rec.result.trajectory is None:
            break
        for _ in range(rec.N_hat):
            if k >= traj.N:
                break
            z = rec.dyn.step(z, traj.controls[k])
            k += 1
            err = max(err, float(np.abs(z - traj.states[k]).max()))
    return err


def min_knot_clearance(run_result: RunResult, scenario: Scenario) -> float:
    traj = run_result.full_trajectory
    if not scenario.obstacles:
        return math.inf
    return float(min(np.min(clearances(z[:2], scenario.centers_at(t), scenario.radii))
                     for z, t in zip(traj.states, traj.times)))


def config_to_dict(cfg: PlannerConfig) -> dict:
    return _jsonable(asdict(cfg))


def cycle_dynamics_residual(rec: CycleRecord) -> float:
    return dynamics_residual(rec.result.trajectory, rec.dyn)
