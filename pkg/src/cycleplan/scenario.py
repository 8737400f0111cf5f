"""Maps of ball-shaped obstacles, seeded generation and validation.

Obstacle radii are already inflated by the vehicle radius, so the vehicle is a
point and a position ``x`` is collision-free iff ``||x - p_j(t)|| >= r_j``.
"""

from __future__ import annotations

import json
import math
import threading
from dataclasses import dataclass, field
from pathlib import Path
from typing import Union

import numpy as np
from scipy import ndimage

from .geometry import clearances
from .rng import Xoshiro256

FORMAT_VERSION = 1

# tiny weight on non-velocity components keeps Q1 positive definite; at 300 m
# it shaves less than 1e-5 off the effective speed limit
POSITION_WEIGHT = 1e-10


class GenerationFailed(RuntimeError):
    pass


@dataclass(frozen=True)
class Static:
    pass


@dataclass(frozen=True)
class SeededRandomWalk:
    """Double integrator with randomly drawn, speed-saturated accelerations.

    ``dt`` is the integration step; positions between steps are linear.
    """

    max_speed: float
    accel_cap: float
    seed: int
    dt: float


Motion = Union[Static, SeededRandomWalk]


@dataclass(frozen=True)
class Obstacle:
    id: int
    center0: tuple[float, float]
    radius: float
    motion: Motion = field(default_factory=Static)

    @property
    def moving(self) -> bool:
        return isinstance(self.motion, SeededRandomWalk)


@dataclass(frozen=True, eq=False)
class Scenario:
    obstacles: tuple[Obstacle, ...]
    z0: np.ndarray
    zf: np.ndarray
    gamma: float
    Q0: np.ndarray
    Q1: np.ndarray
    Q2: np.ndarray
    v_max: float
    a_max: float
    clearance_ell: float
    h: float = 0.25
    N_min: int = 8
    N_max: int = 20
    model: str = "double_integrator"
    omega_max: float = 1.0
    bounds: tuple[tuple[float, float], tuple[float, float]] = ((0.0, 160.0), (0.0, 160.0))
    seed: int | None = None

    @property
    def is_static(self) -> bool:
        return not any(o.moving for o in self.obstacles)

    @property
    def radii(self) -> np.ndarray:
        return np.array([o.radius for o in self.obstacles], float)

    def centers_at(self, t: float) -> np.ndarray:
        if not self.obstacles:
            return np.empty((0, 2))
        return np.array([obstacle_center_at(o, t) for o in self.obstacles])

    def replace(self, **kw) -> "Scenario":
        d = {f: getattr(self, f) for f in self.__dataclass_fields__}
        d.update(kw)
        return Scenario(**d)


# --------------------------------------------------------------------------
# weights

def double_integrator_weights(v_max: float, a_max: float):
    Q0 = np.eye(4)
    Q1 = np.diag([POSITION_WEIGHT, POSITION_WEIGHT, 1 / v_max**2, 1 / v_max**2])
    Q2 = np.eye(2) / a_max**2
    return Q0, Q1, Q2


def unicycle_weights(v_max: float, a_max: float, omega_max: float):
    # heading is free at the target; weight only keeps Q0 definite
    Q0 = np.diag([1.0, 1.0, 1e-6, 1.0])
    Q1 = np.diag([POSITION_WEIGHT, POSITION_WEIGHT, POSITION_WEIGHT, 1 / v_max**2])
    Q2 = np.diag([1 / a_max**2, 1 / omega_max**2])
    return Q0, Q1, Q2


# --------------------------------------------------------------------------
# obstacle motion

_walk_cache: dict[tuple, tuple[np.ndarray, np.ndarray]] = {}
_walk_lock = threading.Lock()


def _walk_path(o: Obstacle, steps: int) -> tuple[np.ndarray, np.ndarray]:
    """Positions p_0..p_steps and velocities v_1..v_steps of a random walk.

    Each step draws an acceleration uniformly from the disk of radius
    ``accel_cap``, rejecting draws whose next speed would exceed ``max_speed``;
    then v <- v + a dt and p <- p + v dt.
    """
    m = o.motion
    key = (o.center0, m.max_speed, m.accel_cap, m.seed, m.dt)
    with _walk_lock:
        cached = _walk_cache.get(key)
        if cached is not None and len(cached[0]) > steps:
            return cached
        # the stream is regenerated from scratch so the cache never affects values
        n = max(steps + 1, 2 * (len(cached[0]) if cached else 64))
        rng = Xoshiro256(m.seed)
        pos = np.empty((n + 1, 2))
        vel = np.zeros((n + 1, 2))
        p = np.array(o.center0, float)
        v = np.zeros(2)
        pos[0] = p
        vmax2 = m.max_speed**2
        for k in range(1, n + 1):
            while True:
                ax, ay = rng.uniform_disk(m.accel_cap)
                nv = v + m.dt * np.array([ax, ay])
                if nv @ nv <= vmax2:
                    break
            v = nv
            p = p + m.dt * v
            pos[k] = p
            vel[k] = v
        _walk_cache[key] = (pos, vel)
        return pos, vel


def obstacle_center_at(o: Obstacle, t: float) -> np.ndarray:
    if not o.moving or t <= 0.0:
        return np.array(o.center0, float)
    dt = o.motion.dt
    k = int(math.floor(t / dt + 1e-9))
    frac = t - k * dt
    pos, vel = _walk_path(o, k + 1)
    if abs(frac) < 1e-12:
        return pos[k].copy()
    return pos[k] + frac * vel[k + 1]


# --------------------------------------------------------------------------
# validation

@dataclass
class ValidationReport:
    violations: list[str] = field(default_factory=list)

    @property
    def ok(self) -> bool:
        return not self.violations

    def __str__(self) -> str:
        if self.ok:
            return "scenario valid"
        return "scenario invalid:\n" + "\n".join(f"  - {v}" for v in self.violations)


def _is_pd(Q, tol=1e-14) -> bool:
    Q = np.asarray(Q, float)
    if Q.ndim != 2 or Q.shape[0] != Q.shape[1] or not np.allclose(Q, Q.T, atol=1e-12):
        return False
    return bool(np.linalg.eigvalsh(Q).min() > tol)


def reachable(s: Scenario, cell: float = 2.0) -> bool:
    """Coarse check that start and target share a free component of a grid."""
    if not s.obstacles:
        return True
    c0 = s.centers_at(0.0)
    r = s.radii
    pts = np.vstack([c0 - r[:, None], c0 + r[:, None], s.z0[None, :2], s.zf[None, :2]])
    lo = pts.min(axis=0) - 2 * cell - s.clearance_ell
    hi = pts.max(axis=0) + 2 * cell + s.clearance_ell
    nx = int(math.ceil((hi[0] - lo[0]) / cell)) + 1
    ny = int(math.ceil((hi[1] - lo[1]) / cell)) + 1
    xs = lo[0] + cell * np.arange(nx)
    ys = lo[1] + cell * np.arange(ny)
    X, Y = np.meshgrid(xs, ys, indexing="ij")
    free = np.ones(X.shape, bool)
    for (px, py), rj in zip(c0, r):
        free &= np.hypot(X - px, Y - py) > rj
    labels, _ = ndimage.label(free, structure=np.ones((3, 3)))

    def lab(p):
        i = int(round((p[0] - lo[0]) / cell))
        j = int(round((p[1] - lo[1]) / cell))
        if free[i, j]:
            return labels[i, j]
        # nearest free cell in the 3x3 neighbourhood
        for di in (-1, 0, 1):
            for dj in (-1, 0, 1):
                if free[i + di, j + dj]:
                    return labels[i + di, j + dj]
        return 0

    a, b = lab(s.z0), lab(s.zf)
    return a != 0 and a == b


def validate_scenario(s: Scenario) -> ValidationReport:
    rep = ValidationReport()
    v = rep.violations
    for name in ("Q0", "Q1", "Q2"):
        if not _is_pd(getattr(s, name)):
            v.append(f"{name} is not symmetric positive definite")
    if not (0 < s.N_min <= s.N_max):
        v.append(f"need 0 < N_min <= N_max (got {s.N_min}, {s.N_max})")
    if not s.h > 0:
        v.append(f"h must be positive (got {s.h})")
    if not s.gamma > 0:
        v.append(f"gamma must be positive (got {s.gamma})")
    if s.model not in ("double_integrator", "unicycle"):
        v.append(f"unknown model {s.model!r}")
    for o in s.obstacles:
        if not o.radius > 0:
            v.append(f"obstacle {o.id}: radius must be positive")
    if not s.obstacles:
        return rep
    c0 = s.centers_at(0.0)
    r = s.radii
    for label, z in (("initial", s.z0), ("target", s.zf)):
        inside = np.nonzero(clearances(z[:2], c0, r) <= 0)[0]
        for j in inside:
            v.append(f"{label} position inside obstacle {s.obstacles[j].id}")
    n = len(r)
    for i in range(n):
        for j in range(i + 1, n):
            gap = float(np.hypot(*(c0[i] - c0[j])))
            if not gap > r[i] + r[j] + s.clearance_ell:
                v.append(
                    f"obstacles {s.obstacles[i].id} and {s.obstacles[j].id} "
                    f"closer than r_i + r_j + ell ({gap:.4g} <= {r[i] + r[j] + s.clearance_ell:.4g})"
                )
    if not v and not reachable(s):
        v.append("target not reachable on the coarse visibility grid")
    return rep


# --------------------------------------------------------------------------
# generation

@dataclass(frozen=True)
class GenerationParams:
    n_obs: int = 20
    radius_range: tuple[float, float] = (3.0, 11.0)
    bounds: tuple[tuple[float, float], tuple[float, float]] = ((0.0, 160.0), (0.0, 160.0))
    seed: int = 20250712
    ell: float = 7.0
    z0: tuple[float, ...] = (0.0, 0.0, 0.0, 0.0)
    zf: tuple[float, ...] = (160.0, 160.0, 0.0, 0.0)
    gamma: float = 3.0
    v_max: float = 12.0
    a_max: float = 20.0
    h: float = 0.25
    N_min: int = 8
    N_max: int = 20
    model: str = "double_integrator"
    omega_max: float = 1.0
    obstacle_speed: float = 0.0  # 0 -> static map
    obstacle_accel: float | None = None  # defaults to obstacle_speed (per second)
    motion_seed: int = 0
    # extra clearance kept between obstacles and the start/target positions
    endpoint_margin: float | None = None  # defaults to ell
    max_attempts: int = 2000


def static_map_params(seed: int = 20250712, **kw) -> GenerationParams:
    """20 static balls of radius 3..11 on a 160 m square, corner to corner."""
    return GenerationParams(seed=seed, **kw)


def moving_map_params(seed: int = 0, n_obs: int = 3, **kw) -> GenerationParams:
    """Few random-walk obstacles moving at 0.3 v_max; slower vehicle (6 m/s, 6 m/s^2)."""
    v_max = kw.pop("v_max", 6.0)
    base = dict(n_obs=n_obs, seed=seed, v_max=v_max, a_max=6.0, obstacle_speed=0.3 * v_max)
    base.update(kw)
    return GenerationParams(**base)


def generate_scenario(params: GenerationParams) -> Scenario:
    """Rejection-sample obstacles in a fixed draw order: x, y, r per attempt."""
    p = params
    rng = Xoshiro256(p.seed)
    (x0, x1), (y0, y1) = p.bounds
    r_lo, r_hi = p.radius_range
    if not (0 < r_lo <= r_hi):
        raise ValueError("radius range must satisfy 0 < lo <= hi")
    z0 = np.array(p.z0, float)
    zf = np.array(p.zf, float)
    margin = p.ell if p.endpoint_margin is None else p.endpoint_margin
    centers: list[tuple[float, float]] = []
    radii: list[float] = []
    for _ in range(p.n_obs):
        for _attempt in range(p.max_attempts):
            cx = rng.uniform(x0, x1)
            cy = rng.uniform(y0, y1)
            r = rng.uniform(r_lo, r_hi)
            if math.hypot(cx - z0[0], cy - z0[1]) <= r + margin:
                continue
            if math.hypot(cx - zf[0], cy - zf[1]) <= r + margin:
                continue
            if any(math.hypot(cx - a, cy - b) <= r + rb + p.ell for (a, b), rb in zip(centers, radii)):
                continue
            centers.append((cx, cy))
            radii.append(r)
            break
        else:
            raise GenerationFailed(
                f"could not place obstacle {len(centers)} after {p.max_attempts} attempts"
            )

    obstacles = []
    for j, (c, r) in enumerate(zip(centers, radii)):
        if p.obstacle_speed > 0:
            accel = p.obstacle_speed if p.obstacle_accel is None else p.obstacle_accel
            motion: Motion = SeededRandomWalk(p.obstacle_speed, accel, p.motion_seed * 1000 + j, p.h)
        else:
            motion = Static()
        obstacles.append(Obstacle(j, c, r, motion))

    if p.model == "unicycle":
        Q0, Q1, Q2 = unicycle_weights(p.v_max, p.a_max, p.omega_max)
    else:
        Q0, Q1, Q2 = double_integrator_weights(p.v_max, p.a_max)
    s = Scenario(
        obstacles=tuple(obstacles), z0=z0, zf=zf, gamma=p.gamma, Q0=Q0, Q1=Q1, Q2=Q2,
        v_max=p.v_max, a_max=p.a_max, clearance_ell=p.ell, h=p.h, N_min=p.N_min,
        N_max=p.N_max, model=p.model, omega_max=p.omega_max, bounds=p.bounds, seed=p.seed,
    )
    rep = validate_scenario(s)
    if not rep.ok:
        raise GenerationFailed(str(rep))
    return s


# --------------------------------------------------------------------------
# JSON

def _motion_to_dict(m: Motion) -> dict:
    if isinstance(m, SeededRandomWalk):
        return {"kind": "random_walk", "max_speed": m.max_speed, "accel_cap": m.accel_cap,
                "seed": m.seed, "dt": m.dt}
    return {"kind": "static"}


def _motion_from_dict(d: dict) -> Motion:
    kind = d.get("kind", "static")
    if kind == "static":
        return Static()
    if kind == "random_walk":
        return SeededRandomWalk(float(d["max_speed"]), float(d["accel_cap"]), int(d["seed"]), float(d["dt"]))
    raise ValueError(f"unknown motion kind {kind!r}")


def scenario_to_dict(s: Scenario) -> dict:
    return {
        "format": FORMAT_VERSION,
        "model": s.model,
        "obstacles": [
            {"id": o.id, "center0": list(o.center0), "radius": o.radius, "motion": _motion_to_dict(o.motion)}
            for o in s.obstacles
        ],
        "z0": s.z0.tolist(),
        "zf": s.zf.tolist(),
        "gamma": s.gamma,
        "Q0": np.asarray(s.Q0).tolist(),
        "Q1": np.asarray(s.Q1).tolist(),
        "Q2": np.asarray(s.Q2).tolist(),
        "v_max": s.v_max,
        "a_max": s.a_max,
        "omega_max": s.omega_max,
        "clearance_ell": s.clearance_ell,
        "h": s.h,
        "N_min": s.N_min,
        "N_max": s.N_max,
        "bounds": [list(b) for b in s.bounds],
        "seed": s.seed,
    }


def scenario_from_dict(d: dict) -> Scenario:
    fmt = d.get("format")
    if fmt != FORMAT_VERSION:
        raise ValueError(f"unsupported scenario format {fmt!r} (expected {FORMAT_VERSION})")
    obstacles = tuple(
        Obstacle(int(o["id"]), (float(o["center0"][0]), float(o["center0"][1])), float(o["radius"]),
                 _motion_from_dict(o.get("motion", {})))
        for o in d["obstacles"]
    )
    b = d.get("bounds", [[0.0, 160.0], [0.0, 160.0]])
    return Scenario(
        obstacles=obstacles,
        z0=np.array(d["z0"], float),
        zf=np.array(d["zf"], float),
        gamma=float(d["gamma"]),
        Q0=np.array(d["Q0"], float),
        Q1=np.array(d["Q1"], float),
        Q2=np.array(d["Q2"], float),
        v_max=float(d["v_max"]),
        a_max=float(d["a_max"]),
        clearance_ell=float(d["clearance_ell"]),
        h=float(d["h"]),
        N_min=int(d["N_min"]),
        N_max=int(d["N_max"]),
        model=d.get("model", "double_integrator"),
        omega_max=float(d.get("omega_max", 1.0)),
        bounds=((float(b[0][0]), float(b[0][1])), (float(b[1][0]), float(b[1][1]))),
        seed=d.get("seed"),
    )


def save_scenario(s: Scenario, path) -> None:
    Path(path).write_text(json.dumps(scenario_to_dict(s), indent=2))


def load_scenario(path) -> Scenario:
    return scenario_from_dict(json.loads(Path(path).read_text()))


class ObstacleView:
    """Obstacle balls as seen by the planner: radii grown by ``margin`` and
    centres looked up at a time (or frozen at ``frozen_at`` when given)."""

    def __init__(self, s: Scenario, margin: float = 0.0, frozen_at: float | None = None):
        self.scenario = s
        self.margin = float(margin)
        self.radii = s.radii + self.margin
        self.frozen_at = frozen_at
        self._static = s.centers_at(0.0) if s.is_static else None

    def __len__(self) -> int:
        return len(self.radii)

    def centers(self, t: float) -> np.ndarray:
        if self._static is not None:
            return self._static
        return self.scenario.centers_at(self.frozen_at if self.frozen_at is not None else t)

    def centers_at_times(self, times) -> np.ndarray:
        return np.stack([self.centers(t) for t in times]) if len(times) else np.empty((0, len(self), 2))
