import numpy as np
import pytest
from hypothesis import given, strategies as st

from cycleplan.convex_core import Solution, Status, solve
from cycleplan.cycle import (ConvexRegion, DegenerateSegment, ResidualTooLarge, build_region, build_relaxed,
                             build_strict, check_local_optimality, compute_lambda_min, dump_cycle, dynamics_residual,
                             recover, relaxed_trajectory, search_point, search_point_violation, select_k,
                             solve_cycle)
from cycleplan.dynamics import double_integrator, linearize
from cycleplan.scenario import ObstacleView
from cycleplan.search_cvapf import run_cvapf
from conftest import make_scenario
from oracles import lambda_scan


def cycle_inputs(s, t0=0.0):
    dyn = linearize(double_integrator(), s.z0, s.h)
    sr = run_cvapf(s.z0, s, dyn=dyn, t0=t0)
    assert not sr.failed
    view = ObstacleView(s)
    centers = view.centers_at_times(t0 + s.h * np.arange(sr.N + 1))
    return sr.trajectory, dyn, centers, view.radii


def solved_region(s):
    search, dyn, centers, radii = cycle_inputs(s)
    pr = build_relaxed(s.z0, search.N, dyn, s)
    bar = relaxed_trajectory(solve(pr).x, s.z0, search.N, dyn)
    return build_region(bar.states, search.states, centers, radii), search, dyn, pr


# -- relaxed program ---------------------------------------------------------

def test_relaxed_variable_count():
    s = make_scenario()
    dyn = linearize(double_integrator(), s.z0, s.h)
    p = build_relaxed(s.z0, 1, dyn, s)
    assert p.n == 4 + 2
    assert build_relaxed(s.z0, 7, dyn, s).n == 7 * 6
    with pytest.raises(ValueError):
        build_relaxed(s.z0, 0, dyn, s)


def test_relaxed_at_the_target_costs_nothing():
    s = make_scenario(z0=(50, 0, 0, 0))
    dyn = linearize(double_integrator(), s.z0, s.h)
    sol = solve(build_relaxed(s.z0, 6, dyn, s))
    assert sol.optimal and sol.objective_value == pytest.approx(0, abs=1e-8)
    tr = relaxed_trajectory(sol.x, s.z0, 6, dyn)
    np.testing.assert_allclose(tr.controls, 0, atol=1e-5)


def test_relaxed_solution_obeys_dynamics_and_bounds():
    s = make_scenario()
    dyn = linearize(double_integrator(), s.z0, s.h)
    sol = solve(build_relaxed(s.z0, 12, dyn, s))
    tr = relaxed_trajectory(sol.x, s.z0, 12, dyn)
    assert dynamics_residual(tr, dyn) <= 1e-8
    assert np.all(np.einsum("ij,jk,ik->i", tr.states[1:], s.Q1, tr.states[1:]) <= 1 + 1e-7)
    assert np.all(np.einsum("ij,jk,ik->i", tr.controls, s.Q2, tr.controls) <= 1 + 1e-7)


# -- lambda_min --------------------------------------------------------------

def test_lambda_min_examples():
    c = np.array([[[0.0, 0.0]]])
    assert compute_lambda_min([[0, 0.5]], [[0, 2]], c, [1.0])[0] == pytest.approx(1 / 3)
    assert compute_lambda_min([[5, 5]], [[6, 5]], c, [1.0])[0] == 0.0
    # two balls crossed by one segment: the later exit wins
    c2 = np.array([[[1.0, 0.0], [4.0, 0.0]]])
    lm = compute_lambda_min([[0.0, 0.0]], [[10.0, 0.0]], c2, [0.5, 1.0])[0]
    assert lm == pytest.approx(0.5)
    assert lm == pytest.approx(lambda_scan([0, 0], [10, 0], c2[0], [0.5, 1.0]), abs=1e-4)


def test_coincident_anchors_inside_a_ball():
    c = np.array([[[0.0, 0.0]]])
    with pytest.raises(DegenerateSegment):
        compute_lambda_min([[0.2, 0]], [[0.2, 0]], c, [1.0])
    assert compute_lambda_min([[2.0, 0]], [[2.0, 0]], c, [1.0])[0] == 0.0


def test_lambda_min_matches_scan():
    rng = np.random.default_rng(8)
    for _ in range(300):
        c = rng.uniform(-5, 5, size=(2, 2))
        r = rng.uniform(0.5, 2.5, size=2)
        tilde = rng.uniform(-8, 8, size=2)
        if np.any(np.hypot(*(c - tilde).T) <= r):
            continue
        bar = rng.uniform(-8, 8, size=2)
        lm = compute_lambda_min(bar[None], tilde[None], c[None], r)[0]
        assert 0 <= lm < 1
        assert abs(lm - lambda_scan(bar, tilde, c, r)) <= 1e-4


@given(st.floats(0, 1), st.floats(-3, 3), st.floats(-3, 3))
def test_segment_beyond_lambda_min_is_free(_, bx, by):
    c = np.array([[0.0, 0.0]])
    bar, tilde = np.array([bx, by]), np.array([2.5, 1.0])
    lm = compute_lambda_min(bar[None], tilde[None], c[None], [1.5])[0]
    for lam in np.linspace(lm, 1, 100)[1:]:
        p = (1 - lam) * bar + lam * tilde
        assert np.hypot(*p) >= 1.5 - 1e-9


# -- k selection -------------------------------------------------------------

def test_k_in_free_space():
    bar = np.zeros((4, 4))
    tilde = np.column_stack([np.arange(4.0), np.ones(4), np.zeros((4, 2))])
    centers = np.zeros((4, 0, 2))
    reg = build_region(bar, tilde, centers, np.empty(0))
    np.testing.assert_array_equal(reg.k, [0, 1, 1, 1])


def test_k_triangles_are_free_by_dense_sampling(corridor):
    s = corridor
    reg, search, dyn, _ = solved_region(s)
    assert reg.lambda_min.max() > 0.5 and reg.k[1:].min() == 0 < reg.k.max()
    centers = s.centers_at(0.0)
    g = np.linspace(0, 1, 100)
    for i in range(1, reg.N + 1):
        LF, LD = np.meshgrid(g, g)
        LD = LD * reg.k[i] * LF
        d_f, d_d = reg.directions()
        P = reg.base()[i] + LF.reshape(-1, 1) * d_f[i] + LD.reshape(-1, 1) * d_d[i]
        dist = np.min(np.hypot(*(P[:, None, :] - centers[None]).transpose(2, 0, 1)) - s.radii, axis=1)
        assert dist.min() >= -1e-9
    assert reg.k[0] == 0


# -- strict program ----------------------------------------------------------

def test_search_point_is_feasible_and_reproduces_the_search(corridor):
    reg, search, dyn, _ = solved_region(corridor)
    assert reg.lambda_min.max() > 0
    ps = build_strict(reg, dyn, corridor, 1e-3)
    x = search_point(reg, search, corridor)
    assert search_point_violation(ps, x) <= 1e-9
    sol = Solution(Status.OPTIMAL, x, ps.objective(x), {})
    tr = recover(reg, sol, dyn)
    np.testing.assert_allclose(tr.positions, search.positions, atol=1e-12)


def test_zero_weights_land_on_the_lambda_min_point(corridor):
    reg, search, dyn, _ = solved_region(corridor)
    x = search_point(reg, search, corridor)
    x[: 2 * (reg.N + 1)] = 0.0
    tr = recover(reg, Solution(Status.OPTIMAL, x, 0.0, {}), dyn, tol=np.inf)
    lm = reg.lambda_min[1:, None]
    np.testing.assert_allclose(tr.positions[1:], (1 - lm) * reg.bar[1:, :2] + lm * reg.tilde[1:, :2])
    with pytest.raises(ResidualTooLarge):
        recover(reg, Solution(Status.OPTIMAL, x, 0.0, {}), dyn)


def test_strict_equals_relaxed_in_free_space():
    s = make_scenario(zf=(60, 10, 0, 0))
    reg, search, dyn, pr = solved_region(s)
    assert np.all(reg.lambda_min == 0) and np.all(reg.k[1:] == 1)
    a = solve(pr).objective_value
    b = solve(build_strict(reg, dyn, s, 0.0)).objective_value
    assert b == pytest.approx(a, rel=1e-6, abs=1e-6)


def test_strict_never_beats_relaxed(corridor):
    reg, search, dyn, pr = solved_region(corridor)
    b = solve(build_strict(reg, dyn, corridor, 0.0))
    assert b.optimal
    assert b.objective_value >= solve(pr).objective_value - 1e-8


def test_heavy_safety_weight_pins_lambda_f_to_one(corridor):
    reg, search, dyn, _ = solved_region(corridor)
    prev = None
    for rho in (0.0, 1.0, 1e6):
        sol = solve(build_strict(reg, dyn, corridor, rho))
        lf = sol.x[: reg.N + 1]
        if prev is not None:
            assert np.abs(1 - lf).sum() <= np.abs(1 - prev).sum() + 1e-6
        prev = lf
    np.testing.assert_allclose(prev, 1.0, atol=1e-3)
    with pytest.raises(ValueError):
        build_strict(reg, dyn, corridor, -1.0)


# -- local optimality check----------------------------------------------------

def test_local_optimality_in_free_space_holds_by_coincidence():
    s = make_scenario()
    reg, search, dyn, _ = solved_region(s)
    n = reg.N + 1
    assert check_local_optimality(reg, np.ones(n), np.zeros(n))


def test_local_optimality_fails_on_a_boundary_weight():
    bar = np.array([[0, 0, 0, 0], [0, 0.5, 0, 0], [0, 0.6, 0, 0]], float)
    tilde = np.array([[0, 0, 0, 0], [0, 2, 0, 0], [0.5, 2.2, 0, 0]], float)
    reg = ConvexRegion(bar, tilde, np.array([0, 1 / 3, 0.2]), np.array([0, 0.5, 0.5]))
    inner_f, inner_d = np.array([0.5, 0.5, 0.5]), np.array([0.0, 0.1, 0.1])
    assert check_local_optimality(reg, inner_f, inner_d)
    inner_f[1] = 1.0
    assert not check_local_optimality(reg, inner_f, inner_d)


# -- full cycle --------------------------------------------------------------

def test_cycle_result_invariants(corridor):
    search, dyn, centers, radii = cycle_inputs(corridor)
    cr = solve_cycle(corridor.z0, search, dyn, corridor, centers, radii, rho=1e-4, keep_programs=True)
    assert cr.status == "Optimal" and cr.trajectory is not None
    tr = cr.trajectory
    assert dynamics_residual(tr, dyn) <= 1e-6
    assert np.all(np.einsum("ij,jk,ik->i", tr.states[1:], corridor.Q1, tr.states[1:]) <= 1 + 1e-6)
    assert np.all(np.einsum("ij,jk,ik->i", tr.controls, corridor.Q2, tr.controls) <= 1 + 1e-6)
    assert np.all(cr.lambda_f >= -1e-7) and np.all(cr.lambda_f <= 1 + 1e-7)
    assert np.all(cr.lambda_d >= -1e-7) and np.all(cr.lambda_d <= cr.region.k * cr.lambda_f + 1e-7)
    for z, c in zip(tr.states, centers):
        assert np.min(np.hypot(*(c - z[:2]).T) - radii) >= -1e-6
    assert cr.diagnostics["search_point_violation"] <= 1e-9
    assert cr.strict_objective >= cr.relaxed_objective - 1e-8
    text = dump_cycle(cr.region, *cr.diagnostics["programs"])
    assert text.count("## ") == 3


def test_moving_obstacles_are_checked_at_knot_times():
    s = make_scenario(balls=[(25.0, 2.0, 3.0)], speed=2.0)
    search, dyn, centers, radii = cycle_inputs(s, t0=1.0)
    assert not np.array_equal(centers[0], centers[-1])
    cr = solve_cycle(s.z0, search, dyn, s, centers, radii, rho=0.0, t0=1.0)
    assert cr.trajectory is not None
    for z, t in zip(cr.trajectory.states, cr.trajectory.times):
        assert np.min(np.hypot(*(s.centers_at(t) - z[:2]).T) - s.radii) >= -1e-6
