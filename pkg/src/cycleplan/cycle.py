"""One planning cycle: relaxed program, convex region extraction, strict
program over interpolation weights, and trajectory recovery.

Knots are indexed 0..N here (knot 0 is the cycle's start state). Obstacle
balls are passed per knot as ``centers`` with shape (N+1, n_obs, 2), so frozen
and time-indexed maps share one code path.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np

from .convex_core import ConvexProgram, Solution, Status, dump_program, solve
from .dynamics import DiscreteDynamics, Trajectory
from .geometry import points_triangle_distance, segment_ball_roots

K_GRID = np.round(np.linspace(1.0, 0.0, 11), 10)


class DegenerateSegment(ValueError):
    pass


class ResidualTooLarge(RuntimeError):
    pass


def _pos(z):
    return np.asarray(z)[..., 0:2]


# --------------------------------------------------------------------------
# relaxed program

def _stack_state_rows(N, ns, nu):
    """Index helpers for the (z_1..z_N, u_0..u_{N-1}) layout."""
    zi = lambda i: slice((i - 1) * ns, i * ns)  # noqa: E731  knots 1..N
    ui = lambda i: slice(N * ns + i * nu, N * ns + (i + 1) * nu)  # noqa: E731  controls 0..N-1
    return zi, ui


def build_relaxed(z0, N: int, dyn: DiscreteDynamics, scenario) -> ConvexProgram:
    """Terminal-cost program with dynamics and norm limits only.

    Variables are the free knot states z_1..z_N followed by the controls
    u_0..u_{N-1}; the start state is substituted.
    """
    if N < 1:
        raise ValueError("N must be >= 1")
    z0 = np.asarray(z0, float)
    ns, nu = dyn.B.shape
    n = N * (ns + nu)
    zi, ui = _stack_state_rows(N, ns, nu)
    Q0, Q1, Q2 = scenario.Q0, scenario.Q1, scenario.Q2
    zf = np.asarray(scenario.zf, float)

    P = np.zeros((n, n))
    q = np.zeros(n)
    P[zi(N), zi(N)] = 2 * Q0
    q[zi(N)] = -2 * Q0 @ zf
    c = float(zf @ Q0 @ zf)

    A = np.zeros((N * ns, n))
    b = np.zeros(N * ns)
    for i in range(N):
        rows = slice(i * ns, (i + 1) * ns)
        A[rows, zi(i + 1)] = np.eye(ns)
        A[rows, ui(i)] = -dyn.B
        if i == 0:
            b[rows] = dyn.A @ z0 + dyn.w
        else:
            A[rows, zi(i)] = -dyn.A
            b[rows] = dyn.w

    p = ConvexProgram(n, P, q, c, A, b)
    for i in range(1, N + 1):
        p.add_quad(Q1, np.zeros(n), 1.0, np.arange(n)[zi(i)])
    for i in range(N):
        p.add_quad(Q2, np.zeros(n), 1.0, np.arange(n)[ui(i)])
    return p


def relaxed_trajectory(x, z0, N: int, dyn: DiscreteDynamics, t0: float = 0.0) -> Trajectory:
    ns, nu = dyn.B.shape
    states = np.vstack([np.asarray(z0, float)[None, :], x[: N * ns].reshape(N, ns)])
    controls = x[N * ns:].reshape(N, nu)
    return Trajectory(states, controls, dyn.h, t0)


# --------------------------------------------------------------------------
# convex region

@dataclass(eq=False)
class ConvexRegion:
    """Per-knot interpolation data.

    Knot i's position is

        base_i + lf_i * (1 - lmin_i) * (tilde_i - bar_i) + ld_i * (anchor_i - tilde_i)

    with base_i = (1 - lmin_i) bar_i + lmin_i tilde_i and anchor_i the searched
    position of the previous knot (or of knot 0, see ``anchor_mode``).
    """

    bar: np.ndarray  # (N+1, ns)
    tilde: np.ndarray  # (N+1, ns)
    lambda_min: np.ndarray
    k: np.ndarray
    anchor_mode: str = "previous"

    @property
    def N(self) -> int:
        return len(self.bar) - 1

    @property
    def anchor_index(self) -> np.ndarray:
        idx = np.arange(self.N + 1)
        if self.anchor_mode == "first":
            return np.zeros_like(idx)
        return np.maximum(idx - 1, 0)

    def base(self) -> np.ndarray:
        lm = self.lambda_min[:, None]
        return (1 - lm) * _pos(self.bar) + lm * _pos(self.tilde)

    def directions(self):
        """(d_f, d_d): position change per unit lambda_f and lambda_d."""
        lm = self.lambda_min[:, None]
        tb = _pos(self.tilde) - _pos(self.bar)
        d_f = (1 - lm) * tb
        d_d = _pos(self.tilde)[self.anchor_index] - _pos(self.tilde)
        return d_f, d_d

    def positions(self, lf, ld) -> np.ndarray:
        d_f, d_d = self.directions()
        return self.base() + np.asarray(lf)[:, None] * d_f + np.asarray(ld)[:, None] * d_d

    def triangle(self, i: int, k: float | None = None):
        kk = self.k[i] if k is None else k
        base = self.base()[i]
        t = _pos(self.tilde)[i]
        a = _pos(self.tilde)[self.anchor_index[i]]
        return base, t, (1 - kk) * t + kk * a


def compute_lambda_min(bar, tilde, centers, radii, inside_tol: float = 1e-7) -> np.ndarray:
    """Largest boundary-crossing parameter on each bar->tilde segment (0 if none).

    Coincident anchors are accepted up to ``inside_tol`` inside a ball, which
    covers a cycle start left on an inflated surface by the previous cycle.
    """
    bar = _pos(np.asarray(bar, float))
    tilde = _pos(np.asarray(tilde, float))
    out = np.zeros(len(bar))
    for i in range(len(bar)):
        ci = np.asarray(centers[i])
        if np.array_equal(bar[i], tilde[i]):
            if len(radii) and np.any(np.hypot(*(ci - tilde[i]).T) < np.asarray(radii) - inside_tol):
                raise DegenerateSegment(f"knot {i}: coincident anchors inside an obstacle")
            continue
        best = 0.0
        for c, r in zip(ci, radii):
            roots = segment_ball_roots(bar[i], tilde[i], c, r)
            if roots:
                best = max(best, max(roots))
        out[i] = min(best, np.nextafter(1.0, 0.0))
    return out


def select_k(region: ConvexRegion, centers, radii, grid=K_GRID) -> np.ndarray:
    """Largest k on the grid whose triangle stays outside every ball; k_0 = 0."""
    radii = np.asarray(radii, float)
    k = np.zeros(region.N + 1)
    for i in range(1, region.N + 1):
        ci = np.asarray(centers[i])
        for kk in grid:
            if kk == 0.0:
                break
            a, b, c = region.triangle(i, kk)
            if len(radii) == 0:
                k[i] = kk
                break
            # only balls near the triangle can touch it
            span = max(np.hypot(*(a - b)), np.hypot(*(b - c)), np.hypot(*(a - c)))
            near = np.hypot(*(ci - b).T) <= radii + span
            if not near.any() or np.all(points_triangle_distance(ci[near], a, b, c) >= radii[near]):
                k[i] = kk
                break
    return k


def build_region(bar, tilde, centers, radii, anchor_mode: str = "previous") -> ConvexRegion:
    lm = compute_lambda_min(bar, tilde, centers, radii)
    region = ConvexRegion(np.asarray(bar, float), np.asarray(tilde, float), lm, np.zeros(len(lm)), anchor_mode)
    region.k = select_k(region, centers, radii)
    return region


# --------------------------------------------------------------------------
# strict program

@dataclass(frozen=True)
class StrictLayout:
    N: int
    ns: int
    nu: int

    @property
    def n_rest(self):
        return self.ns - 2

    @property
    def n(self):
        return 2 * (self.N + 1) + self.N * self.n_rest + self.N * self.nu

    def lf(self, i):
        return i

    def ld(self, i):
        return self.N + 1 + i

    def rest(self, i):  # knots 1..N
        s = 2 * (self.N + 1) + (i - 1) * self.n_rest
        return slice(s, s + self.n_rest)

    def u(self, i):  # controls 0..N-1
        s = 2 * (self.N + 1) + self.N * self.n_rest + i * self.nu
        return slice(s, s + self.nu)


def _state_maps(region: ConvexRegion, lay: StrictLayout, z0):
    """Affine maps z_i = M_i x + m_i for every knot i (knot 0 is constant)."""
    base = region.base()
    d_f, d_d = region.directions()
    Ms, ms = [], []
    for i in range(lay.N + 1):
        M = np.zeros((lay.ns, lay.n))
        m = np.zeros(lay.ns)
        if i == 0:
            m[:] = z0
        else:
            m[0:2] = base[i]
            M[0:2, lay.lf(i)] = d_f[i]
            M[0:2, lay.ld(i)] = d_d[i]
            M[2:, lay.rest(i)] = np.eye(lay.n_rest)
        Ms.append(M)
        ms.append(m)
    return Ms, ms


def build_strict(region: ConvexRegion, dyn: DiscreteDynamics, scenario, rho: float, z0=None) -> ConvexProgram:
    """Program over (lambda_f, lambda_d, non-position states, controls)."""
    if rho < 0:
        raise ValueError("rho must be >= 0")
    z0 = np.asarray(region.bar[0] if z0 is None else z0, float)
    ns, nu = dyn.B.shape
    lay = StrictLayout(region.N, ns, nu)
    n = lay.n
    Ms, ms = _state_maps(region, lay, z0)
    Q0, Q1, Q2 = scenario.Q0, scenario.Q1, scenario.Q2
    zf = np.asarray(scenario.zf, float)

    # terminal cost + rho * ||z0 - zf|| * ||lf - 1||^2
    MN, mN = Ms[-1], ms[-1] - zf
    P = 2 * MN.T @ Q0 @ MN
    q = 2 * MN.T @ Q0 @ mN
    c = float(mN @ Q0 @ mN)
    wgt = rho * float(np.linalg.norm(z0 - zf))
    idx = np.arange(lay.N + 1)
    P[idx, idx] += 2 * wgt
    q[idx] -= 2 * wgt
    c += wgt * (lay.N + 1)

    # dynamics z_{i+1} = A z_i + B u_i + w
    A = np.zeros((lay.N * ns, n))
    b = np.zeros(lay.N * ns)
    for i in range(lay.N):
        rows = slice(i * ns, (i + 1) * ns)
        Bu = np.zeros((ns, n))
        Bu[:, lay.u(i)] = dyn.B
        A[rows] = Ms[i + 1] - dyn.A @ Ms[i] - Bu
        b[rows] = dyn.A @ ms[i] + dyn.w - ms[i + 1]

    p = ConvexProgram(n, P, q, c, A, b)
    for i in range(1, lay.N + 1):
        M, m = Ms[i], ms[i]
        p.add_quad(M.T @ Q1 @ M, 2 * M.T @ Q1 @ m, 1.0 - float(m @ Q1 @ m))
    for i in range(lay.N):
        p.add_quad(Q2, np.zeros(n), 1.0, np.arange(n)[lay.u(i)])

    G, h = [], []
    for i in range(lay.N + 1):
        e_f = np.zeros(n)
        e_f[lay.lf(i)] = 1
        e_d = np.zeros(n)
        e_d[lay.ld(i)] = 1
        G += [-e_f, e_f, -e_d, e_d - region.k[i] * e_f]
        h += [0.0, 1.0, 0.0, 0.0]
    p.G = np.array(G)
    p.h = np.array(h)
    return p


def search_point(region: ConvexRegion, search: Trajectory, scenario) -> np.ndarray:
    """Strict-program vector at (lambda_f, lambda_d) = (1, 0) with the search's
    non-position states and controls."""
    ns = search.states.shape[1]
    nu = search.controls.shape[1]
    lay = StrictLayout(region.N, ns, nu)
    x = np.zeros(lay.n)
    x[: lay.N + 1] = 1.0
    for i in range(1, lay.N + 1):
        x[lay.rest(i)] = search.states[i, 2:]
    for i in range(lay.N):
        x[lay.u(i)] = search.controls[i]
    return x


def search_point_violation(program: ConvexProgram, x) -> float:
    """Largest constraint violation of ``program`` at ``x`` (0 when feasible)."""
    return max(program.eq_residual(x), program.max_violation(x))


def recover(region: ConvexRegion, sol: Solution, dyn: DiscreteDynamics, z0=None, t0: float = 0.0,
            tol: float = 1e-6) -> Trajectory:
    z0 = np.asarray(region.bar[0] if z0 is None else z0, float)
    ns, nu = dyn.B.shape
    lay = StrictLayout(region.N, ns, nu)
    x = sol.x
    lf = x[: lay.N + 1]
    ld = x[lay.N + 1: 2 * (lay.N + 1)]
    pos = region.positions(lf, ld)
    states = np.zeros((lay.N + 1, ns))
    states[0] = z0
    states[1:, 0:2] = pos[1:]
    for i in range(1, lay.N + 1):
        states[i, 2:] = x[lay.rest(i)]
    controls = np.array([x[lay.u(i)] for i in range(lay.N)])
    traj = Trajectory(states, controls, dyn.h, t0)
    res = dynamics_residual(traj, dyn)
    if res > tol:
        raise ResidualTooLarge(f"dynamics residual {res:.3g} exceeds {tol:.1g}")
    return traj


def dynamics_residual(traj: Trajectory, dyn: DiscreteDynamics) -> float:
    z = traj.states
    pred = z[:-1] @ dyn.A.T + traj.controls @ dyn.B.T + dyn.w
    return float(np.abs(z[1:] - pred).max()) if len(pred) else 0.0


def check_local_optimality(region: ConvexRegion, lf, ld, margin: float = 1e-6, coincide_tol: float = 1e-9) -> bool:
    """Local-optimality precondition of a strict solution.

    Either every knot has lambda_min = 0 or coincident anchors, or every knot's
    weights sit in the relative interior of its own feasible set. The feasible
    set of a knot is a point (knot 0 or a zero-size region), a segment (k = 0
    or collinear vertices) or a triangle.
    """
    close = np.linalg.norm(region.tilde - region.bar, axis=1) <= coincide_tol
    if np.all((region.lambda_min == 0) | close):
        return True
    d_f, d_d = region.directions()
    for i in range(1, region.N + 1):
        nf = np.linalg.norm(d_f[i])
        nd = np.linalg.norm(d_d[i]) * region.k[i]
        if nf <= coincide_tol and nd <= coincide_tol:
            continue  # point
        cross = abs(d_f[i][0] * d_d[i][1] - d_f[i][1] * d_d[i][0]) * region.k[i]
        segment = region.k[i] == 0 or nd <= coincide_tol or cross <= coincide_tol * max(nf, nd) ** 2
        if segment:
            if not (margin < lf[i] < 1 - margin):
                return False
            continue
        if not (lf[i] < 1 - margin and ld[i] > margin and ld[i] < region.k[i] * lf[i] - margin):
            return False
    return True


# --------------------------------------------------------------------------
# full cycle

@dataclass(eq=False)
class CycleResult:
    trajectory: Trajectory | None
    lambda_f: np.ndarray
    lambda_d: np.ndarray
    rho_used: float
    N: int
    relaxed_objective: float
    strict_objective: float
    local_opt_ok: bool
    diagnostics: dict = field(default_factory=dict)
    region: ConvexRegion | None = None
    relaxed: Trajectory | None = None
    status: str = "Optimal"


def solve_cycle(z0, search: Trajectory, dyn: DiscreteDynamics, scenario, centers, radii, rho: float,
                rho_retry: float | None = None, tol: float = 1e-8, anchor_mode: str = "previous",
                t0: float = 0.0, keep_programs: bool = False) -> CycleResult:
    """Relaxed solve, region extraction, strict solve (one retry at ``rho_retry``
    if infeasible) and recovery."""
    N = search.N
    diag: dict = {}
    t_start = time.perf_counter()
    pr = build_relaxed(z0, N, dyn, scenario)
    sr = solve(pr, tol=tol, validate=False)
    diag["relaxed_status"] = sr.status.value
    diag["relaxed_time"] = time.perf_counter() - t_start
    nan = np.full(N + 1, np.nan)
    if not sr.optimal:
        return CycleResult(None, nan, nan, rho, N, sr.objective_value, np.nan, False, diag,
                           status=f"Relaxed{sr.status.value}")
    bar = relaxed_trajectory(sr.x, z0, N, dyn, t0)

    t1 = time.perf_counter()
    region = build_region(bar.states, search.states, centers, radii, anchor_mode)
    diag["region_time"] = time.perf_counter() - t1

    t2 = time.perf_counter()
    ps = build_strict(region, dyn, scenario, rho, z0)
    x_s = search_point(region, search, scenario)
    diag["search_point_violation"] = search_point_violation(ps, x_s)
    ss = solve(ps, tol=tol, validate=False)
    rho_used = rho
    if ss.status is Status.INFEASIBLE and rho_retry is not None and rho_retry != rho:
        ps = build_strict(region, dyn, scenario, rho_retry, z0)
        ss = solve(ps, tol=tol, validate=False)
        rho_used = rho_retry
        diag["rho_retry"] = True
    diag["strict_status"] = ss.status.value
    diag["strict_time"] = time.perf_counter() - t2
    diag["strict_iterations"] = ss.iterations
    diag["relaxed_iterations"] = sr.iterations
    if keep_programs:
        diag["programs"] = (pr, ps)
    if not ss.optimal:
        return CycleResult(None, nan, nan, rho_used, N, sr.objective_value, np.nan, False, diag,
                           region=region, relaxed=bar, status=f"Strict{ss.status.value}")
    lf = ss.x[: N + 1].copy()
    ld = ss.x[N + 1: 2 * (N + 1)].copy()
    traj = recover(region, ss, dyn, z0, t0)
    # report the pure terminal cost next to J_s
    zf = np.asarray(scenario.zf, float)
    e = traj.states[-1] - zf
    diag["terminal_cost"] = float(e @ scenario.Q0 @ e)
    diag["total_time"] = time.perf_counter() - t_start
    return CycleResult(traj, lf, ld, rho_used, N, sr.objective_value, ss.objective_value,
                       check_local_optimality(region, lf, ld), diag, region=region, relaxed=bar)


def dump_region(region: ConvexRegion) -> str:
    """Text dump: one line per knot with bar/tilde positions, lambda_min and k."""
    lines = ["# knot bar_x bar_y tilde_x tilde_y lambda_min k"]
    for i in range(region.N + 1):
        bx, by = region.bar[i, :2]
        tx, ty = region.tilde[i, :2]
        lines.append(f"{i} {bx!r} {by!r} {tx!r} {ty!r} {region.lambda_min[i]!r} {region.k[i]!r}")
    return "\n".join(lines) + "\n"


def dump_cycle(region: ConvexRegion, relaxed: ConvexProgram, strict: ConvexProgram) -> str:
    return ("## region\n" + dump_region(region) + "## relaxed\n" + dump_program(relaxed)
            + "## strict\n" + dump_program(strict))
