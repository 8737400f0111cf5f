"""Vortex potential-field search for a collision-free, dynamically feasible
nominal trajectory (double-integrator style: planar position and velocity).
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .dynamics import DiscreteDynamics, Trajectory
from .geometry import clearances, ray_entry_time
from .rng import Xoshiro256
from .scenario import ObstacleView, Scenario


# a cycle's start may sit on a planning-inflated ball surface up to roundoff
START_TOL = 1e-7


class DegenerateField(ArithmeticError):
    pass


@dataclass(frozen=True)
class FieldParams:
    # defaults tuned on seeded 20-ball maps (seeds 1000-1099)
    zeta: float = 1e4
    beta: float = 3.0
    zeta_v0: float = 500.0
    activation_dist: float = 8.0
    a0: float | None = None  # braking share of a_max, default 0.6 a_max
    a1: float | None = None  # steering share, default 0.4 a_max
    t_w: float = 3.0
    speed_steps: int = 20

    def accel_split(self, a_max: float) -> tuple[float, float]:
        a0 = 0.6 * a_max if self.a0 is None else self.a0
        a1 = 0.4 * a_max if self.a1 is None else self.a1
        if a0 < 0 or a1 < 0 or a0 + a1 > a_max * (1 + 1e-12):
            raise ValueError(f"need a0, a1 >= 0 and a0 + a1 <= a_max (got {a0}, {a1}, {a_max})")
        return a0, a1


@dataclass(eq=False)
class SearchResult:
    trajectory: Trajectory | None
    N: int
    not_safe: bool
    min_Ts: float
    failed: bool
    reason: str = ""


# --------------------------------------------------------------------------
# field

def attractive_gradient(pos, zf_pos) -> np.ndarray:
    return 2.0 * (np.asarray(pos, float)[:2] - np.asarray(zf_pos, float)[:2])


def repulsive_potential(pos, centers, radii, zeta: float, beta: float) -> float:
    if len(radii) == 0:
        return 0.0
    d = np.hypot(*(np.asarray(pos, float)[:2] - centers).T)
    return float(zeta * np.exp(-beta * (d - radii) / radii).sum())


def repulsive_gradient(pos, centers, radii, zeta: float, beta: float) -> np.ndarray:
    if len(radii) == 0:
        return np.zeros(2)
    diff = np.asarray(pos, float)[:2] - np.asarray(centers, float)
    d = np.hypot(diff[:, 0], diff[:, 1])
    safe = d > 0
    unit = np.zeros_like(diff)
    unit[safe] = diff[safe] / d[safe, None]  # normalize first: diff/d stays finite for tiny d
    coef = -zeta * beta / radii * np.exp(-beta * (d - radii) / radii)
    return (coef[:, None] * unit).sum(axis=0)


def _toward(pos, target) -> np.ndarray:
    e = np.asarray(target, float)[:2] - np.asarray(pos, float)[:2]
    n = math.hypot(*e)
    return e / n if n > 0 else np.array([1.0, 0.0])


def vortex_direction(pos, centers, radii, target_pos, zeta: float = 1.0, beta: float = 1.0,
                     grad=None) -> np.ndarray:
    """Unit vector orthogonal to the repulsive gradient, turned toward the target."""
    g = repulsive_gradient(pos, centers, radii, zeta, beta) if grad is None else np.asarray(grad, float)
    ng = math.hypot(*g)
    if ng == 0.0:
        return _toward(pos, target_pos)
    d = np.array([-g[1], g[0]]) / ng
    to_target = np.asarray(target_pos, float)[:2] - np.asarray(pos, float)[:2]
    if d @ to_target < 0:
        d = -d
    return d


def field_vector(pos, centers, radii, target_pos, zeta_v: float, params: FieldParams) -> np.ndarray:
    g = repulsive_gradient(pos, centers, radii, params.zeta, params.beta)
    E = -(attractive_gradient(pos, target_pos) + g)
    if zeta_v:
        E = E + zeta_v * vortex_direction(pos, centers, radii, target_pos, grad=g)
    return E


def total_field_direction(pos, centers, radii, target_pos, zeta_v: float, params: FieldParams) -> np.ndarray:
    E = field_vector(pos, centers, radii, target_pos, zeta_v, params)
    n = math.hypot(*E)
    if n < 1e-12:
        raise DegenerateField("field vanishes")
    return E / n


# --------------------------------------------------------------------------
# speed and safety

def speed_grid(v_max: float, steps: int) -> np.ndarray:
    return v_max * (1.0 - np.arange(steps + 1) / steps)


def speed_search(direction, current_velocity, v_max: float, a_max: float, h: float,
                 check=None, steps: int = 20) -> float | None:
    """First speed on the grid v_max -> 0 reachable in one step that passes ``check``."""
    direction = np.asarray(direction, float)
    v = np.asarray(current_velocity, float)
    reach = a_max * h * (1 + 1e-12)
    for s in speed_grid(v_max, steps):
        if math.hypot(*(s * direction - v)) > reach:
            continue
        if check is None or check(float(s)):
            return float(s)
    return None


def safe_acceleration(E_dir, current_velocity, a0: float, a1: float) -> np.ndarray:
    v = np.asarray(current_velocity, float)
    nv = math.hypot(*v)
    brake = v / nv if nv > 0 else np.zeros(2)
    return a1 * np.asarray(E_dir, float) - a0 * brake


def compute_safety(pos, vel, centers, radii, t_w: float) -> tuple[bool, float]:
    """Coast along ``vel`` for ``t_w``; return (hits a ball, first hit time or inf)."""
    t = ray_entry_time(pos, vel, centers, radii, t_w)
    return math.isfinite(t), t


# --------------------------------------------------------------------------
# search loop

def _q1_norm(state, Q1) -> float:
    return float(np.sqrt(max(0.0, state @ Q1 @ state)))


def reconstruct_controls(states: np.ndarray, h: float, model: str, dyn: DiscreteDynamics | None,
                         tol: float = 1e-6):
    """Controls that reproduce consecutive states; None if no control does."""
    if model == "double_integrator" and dyn is None:
        return np.diff(states[:, 2:4], axis=0) / h
    if dyn is None:
        return None
    rhs = states[1:] - states[:-1] @ dyn.A.T - dyn.w
    u, *_ = np.linalg.lstsq(dyn.B, rhs.T, rcond=None)
    u = u.T
    if np.abs(u @ dyn.B.T - rhs).max() > tol:
        return None
    return u


def run_cvapf(z0, scenario: Scenario, params: FieldParams | None = None, t0: float = 0.0,
              view: ObstacleView | None = None, dyn: DiscreteDynamics | None = None,
              perturb_seed: int = 0) -> SearchResult:
    """Roll the field forward from ``z0`` until at least N_min steps were taken
    and the coasting look-ahead of the last knot is clear, or N_max is hit.

    Knot i is placed at time t0 + i h and checked against the obstacles at
    that time.
    """
    params = params or FieldParams()
    view = view or ObstacleView(scenario)
    if scenario.model != "double_integrator" and dyn is None:
        raise ValueError("the field search needs the cycle dynamics for non double-integrator models")
    h = scenario.h
    v_max, a_max = scenario.v_max, scenario.a_max
    a0, a1 = params.accel_split(a_max)
    target = np.asarray(scenario.zf, float)[:2]
    radii = view.radii
    Q1 = np.asarray(scenario.Q1, float)
    Q1_pv = Q1 if Q1.shape == (4, 4) else np.diag([0, 0, 1 / v_max**2, 1 / v_max**2])
    rng = Xoshiro256(perturb_seed)

    z0 = np.asarray(z0, float)
    pos = z0[:2].copy()
    vel = _planar_velocity(z0, scenario.model)
    if len(radii) and np.min(clearances(pos, view.centers(t0), radii)) < -START_TOL:
        return SearchResult(None, 0, True, 0.0, True, "start inside an obstacle")

    def zeta_v_at(p, c):
        if len(radii) == 0:
            return 0.0
        return params.zeta_v0 if np.min(clearances(p, c, radii)) < params.activation_dist else 0.0

    zeta_v = zeta_v_at(pos, view.centers(t0))
    P = [pos.copy()]
    V = [vel.copy()]
    not_safe = False
    min_Ts = math.inf
    N = 0
    while (N < scenario.N_min or not_safe) and N < scenario.N_max:
        t_next = t0 + (N + 1) * h
        c_next = view.centers(t_next)
        p_next = pos + h * vel
        # knot 1 is fixed by the start state, so it gets the same roundoff allowance
        slack = START_TOL if N == 0 else 0.0
        if len(radii) and np.min(clearances(p_next, c_next, radii)) < -slack:
            return SearchResult(None, N, True, 0.0, True, f"knot {N + 1} collides")
        try:
            E = total_field_direction(p_next, c_next, radii, target, zeta_v, params)
        except DegenerateField:
            ang = rng.uniform(0.0, 2 * math.pi)
            E = total_field_direction(p_next + 1e-6 * np.array([math.cos(ang), math.sin(ang)]),
                                      c_next, radii, target, zeta_v, params)
        c_after = view.centers(t_next + h)

        def ok(s, p_next=p_next, E=E, c_next=c_next, c_after=c_after):
            vv = s * E
            if _q1_norm(np.concatenate([p_next, vv]), Q1_pv) > 1.0:
                return False
            if compute_safety(p_next, vv, c_next, radii, params.t_w)[0]:
                return False
            return not (len(radii) and np.min(clearances(p_next + h * vv, c_after, radii)) < 0)

        s = speed_search(E, vel, v_max, a_max, h, ok, params.speed_steps)
        if s is not None:
            new_vel = s * E
        else:
            new_vel = vel + h * safe_acceleration(E, vel, a0, a1)
        pos, vel = p_next, new_vel
        P.append(pos.copy())
        V.append(vel.copy())
        zeta_v = zeta_v_at(pos, c_next)
        not_safe, ts = compute_safety(pos, vel, c_next, radii, params.t_w)
        min_Ts = min(min_Ts, ts)
        N += 1

    if not_safe:
        return SearchResult(None, N, True, min_Ts, True, "look-ahead still unsafe at N_max")
    planar = np.hstack([np.array(P), np.array(V)])
    states = _states_from_planar(planar, z0, scenario.model)
    if dyn is not None and scenario.model == "double_integrator":
        controls = np.diff(states[:, 2:4], axis=0) / h
    else:
        controls = reconstruct_controls(states, h, scenario.model, dyn)
    if controls is None:
        return SearchResult(None, N, False, min_Ts, True, "no control reproduces the searched states")
    traj = Trajectory(states, controls, h, t0)
    # the last knot's successor must also be free so the next cycle starts safely
    bad = _violations(traj, scenario, view, Q1)
    if bad:
        return SearchResult(traj, N, False, min_Ts, True, bad)
    return SearchResult(traj, N, False, min_Ts, False)


def _planar_velocity(z, model: str) -> np.ndarray:
    if model == "unicycle":
        return np.array([z[3] * math.cos(z[2]), z[3] * math.sin(z[2])])
    return np.asarray(z[2:4], float).copy()


def _states_from_planar(planar: np.ndarray, z0, model: str) -> np.ndarray:
    if model == "unicycle":
        th = np.arctan2(planar[:, 3], planar[:, 2])
        sp = np.hypot(planar[:, 2], planar[:, 3])
        out = np.column_stack([planar[:, 0], planar[:, 1], th, sp])
        out[0] = z0
        return out
    out = planar.copy()
    out[0] = z0
    return out


def _violations(traj: Trajectory, scenario: Scenario, view: ObstacleView, Q1) -> str:
    Q2 = np.asarray(scenario.Q2, float)
    for i, u in enumerate(traj.controls):
        if u @ Q2 @ u > 1.0 + 1e-9:
            return f"control {i} exceeds its norm bound"
    for i, z in enumerate(traj.states[1:], start=1):
        if z @ Q1 @ z > 1.0 + 1e-9:
            return f"state {i} exceeds its norm bound"
    if len(view):
        # knot 0 is the given start, checked on entry; knot 1 follows from it
        for i, t in enumerate(traj.times[1:], start=1):
            if np.min(clearances(traj.states[i, :2], view.centers(t), view.radii)) < (-START_TOL if i == 1 else 0):
                return f"knot {i} collides"
    if not (scenario.N_min <= traj.N <= scenario.N_max):
        return f"horizon {traj.N} outside [N_min, N_max]"
    return ""
