"""Dynamic-window search over a gridded control set, for any control-affine model."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .dynamics import DiscreteDynamics, Trajectory, discretize_exact, get_model
from .geometry import clearances
from .scenario import ObstacleView, Scenario
from .search_cvapf import START_TOL, SearchResult, _violations, compute_safety


class AllCandidatesColliding(RuntimeError):
    pass


@dataclass(frozen=True)
class DwaParams:
    accel_grid: int = 7
    w_heading: float = 1.0
    w_clearance: float = 0.4
    w_speed: float = 0.3
    t_w: float = 1.0
    activation_dist: float = 8.0

    def __post_init__(self):
        if self.accel_grid < 3:
            raise ValueError("accel_grid must be >= 3")
        w = (self.w_heading, self.w_clearance, self.w_speed)
        if min(w) < 0 or max(w) == 0:
            raise ValueError("weights must be >= 0 and not all zero")


def _stepper(scenario: Scenario, dyn: DiscreteDynamics | None):
    if dyn is not None:
        return dyn.step
    model = get_model(scenario.model)
    return lambda z, u: discretize_exact(model, z, u, scenario.h)


def dynamic_window(state, scenario: Scenario, grid: int = 7, dyn: DiscreteDynamics | None = None) -> np.ndarray:
    """Grid over the bounding box of the control ellipsoid, keeping controls
    inside it whose next state respects the state bound."""
    Q1 = np.asarray(scenario.Q1, float)
    Q2 = np.asarray(scenario.Q2, float)
    step = _stepper(scenario, dyn)
    half = np.sqrt(np.diag(np.linalg.inv(Q2)))
    axes = [np.linspace(-w, w, grid) for w in half]
    U = np.array(np.meshgrid(*axes, indexing="ij")).reshape(len(half), -1).T
    U = U[np.einsum("ij,jk,ik->i", U, Q2, U) <= 1.0 + 1e-12]
    nxt = np.array([step(state, u) for u in U])
    load = np.einsum("ij,jk,ik->i", nxt, Q1, nxt)
    keep = load <= 1.0
    if keep.any():
        return U[keep]
    return U[[int(np.argmin(load))]]


def _planar_step(step, z, u, h):
    """(p_{k+1}, p_{k+2}, coasting velocity at k+1) for control u at state z."""
    z1 = step(z, u)
    z2 = step(z1, np.zeros_like(u))
    return z1, z2[:2], (z2[:2] - z1[:2]) / h


def evaluate_candidates(candidates, state, scenario: Scenario, target, t_now: float,
                        params: DwaParams, view: ObstacleView | None = None,
                        dyn: DiscreteDynamics | None = None) -> np.ndarray:
    """Highest-scoring control; ties go to the lowest candidate index.

    Candidates whose induced position two steps ahead collides are dropped.
    Among the rest, those whose coasting look-ahead is clear are preferred.
    """
    view = view or ObstacleView(scenario)
    step = _stepper(scenario, dyn)
    h = scenario.h
    target = np.asarray(target, float)[:2]
    c1 = view.centers(t_now + h)
    c2 = view.centers(t_now + 2 * h)
    scores = np.full(len(candidates), -np.inf)
    clear_ray = np.zeros(len(candidates), bool)
    for j, u in enumerate(candidates):
        z1, p2, vel = _planar_step(step, state, np.asarray(u, float), h)
        d2 = float(np.min(clearances(p2, c2, view.radii))) if len(view) else math.inf
        if d2 < 0:
            continue
        disp = p2 - z1[:2]
        to_t = target - z1[:2]
        nd, nt = math.hypot(*disp), math.hypot(*to_t)
        heading = float(disp @ to_t) / (nd * nt) if nd > 0 and nt > 0 else 0.0
        clear = min(1.0, d2 / params.activation_dist)
        speed = math.hypot(*vel) / scenario.v_max
        scores[j] = params.w_heading * heading + params.w_clearance * clear + params.w_speed * speed
        clear_ray[j] = not compute_safety(z1[:2], vel, c1, view.radii, params.t_w)[0]
    if not np.isfinite(scores).any():
        raise AllCandidatesColliding("every candidate leads into an obstacle")
    if clear_ray.any():
        scores = np.where(clear_ray, scores, -np.inf)
    return np.asarray(candidates[int(np.argmax(scores))], float)


def run_cdwa(z0, scenario: Scenario, params: DwaParams | None = None, t0: float = 0.0,
             view: ObstacleView | None = None, dyn: DiscreteDynamics | None = None) -> SearchResult:
    params = params or DwaParams()
    view = view or ObstacleView(scenario)
    step = _stepper(scenario, dyn)
    h = scenario.h
    target = np.asarray(scenario.zf, float)[:2]
    z = np.asarray(z0, float).copy()
    if len(view) and np.min(clearances(z[:2], view.centers(t0), view.radii)) < -START_TOL:
        return SearchResult(None, 0, True, 0.0, True, "start inside an obstacle")
    states = [z.copy()]
    controls = []
    not_safe = False
    min_Ts = math.inf
    N = 0
    while (N < scenario.N_min or not_safe) and N < scenario.N_max:
        t_now = t0 + N * h
        cands = dynamic_window(z, scenario, params.accel_grid, dyn)
        try:
            u = evaluate_candidates(cands, z, scenario, target, t_now, params, view, dyn)
        except AllCandidatesColliding:
            return SearchResult(None, N, True, 0.0, True, f"step {N}: all candidates collide")
        z = step(z, u)
        t1 = t_now + h
        c1 = view.centers(t1)
        if len(view) and np.min(clearances(z[:2], c1, view.radii)) < 0:
            return SearchResult(None, N, True, 0.0, True, f"knot {N + 1} collides")
        states.append(z.copy())
        controls.append(u)
        vel = (step(z, np.zeros_like(u))[:2] - z[:2]) / h
        not_safe, ts = compute_safety(z[:2], vel, c1, view.radii, params.t_w)
        min_Ts = min(min_Ts, ts)
        N += 1
    if not_safe:
        return SearchResult(None, N, True, min_Ts, True, "look-ahead still unsafe at N_max")
    traj = Trajectory(np.array(states), np.array(controls), h, t0)
    bad = _violations(traj, scenario, view, np.asarray(scenario.Q1, float))
    if bad:
        return SearchResult(traj, N, False, min_Ts, True, bad)
    return SearchResult(traj, N, False, min_Ts, False)
