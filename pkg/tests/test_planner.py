import json
import math

import numpy as np
import pytest
from hypothesis import given, strategies as st

from cycleplan.dynamics import Trajectory
from cycleplan.planner import (FAILURE_REASONS, PlannerConfig, adjust_horizon, config_to_dict,
                               cycle_dynamics_residual, min_knot_clearance, replay_error, retry_rho, run,
                               terminal_norm, update_rho)
from cycleplan.scenario import generate_scenario, static_map_params, moving_map_params, unicycle_weights
from conftest import make_scenario


def controls_traj(loads):
    U = np.column_stack([np.sqrt(loads) * 10.0, np.zeros(len(loads))])
    return Trajectory(np.zeros((len(U) + 1, 4)), U, 0.25)


Q2 = np.eye(2) / 100.0


def check_run_invariants(res, s):
    assert res.success
    assert terminal_norm(res.full_trajectory.states[-1], s) <= s.gamma + 1e-9
    assert min_knot_clearance(res, s) >= -1e-6
    assert res.t_f == pytest.approx(s.h * sum(c.N_hat for c in res.cycles), abs=1e-12)
    assert res.cycles[-1].N_hat == res.cycles[-1].N
    assert replay_error(res) <= 1e-9
    for rec in res.cycles:
        assert cycle_dynamics_residual(rec) <= 1e-6


# -- rules ---------------------------------------------------------------

def test_adjust_horizon_examples():
    assert adjust_horizon(10, controls_traj(np.full(10, 0.5)), Q2, 20) == 8
    assert adjust_horizon(10, controls_traj(np.ones(10)), Q2, 20) == 5
    assert adjust_horizon(2, controls_traj(np.full(2, 0.5)), Q2, 20) == 1
    assert adjust_horizon(10, controls_traj(np.full(10, 0.5)), Q2, 4) == 4
    # junction must have both neighbours strictly inside
    loads = np.full(10, 0.5)
    loads[[7, 5]] = 1.0
    assert adjust_horizon(10, controls_traj(loads), Q2, 20) == 4
    loads = np.full(10, 0.5)
    loads[7] = 1 - 5e-4  # inside the bound but not by eps
    assert adjust_horizon(10, controls_traj(loads), Q2, 20) == 6


def test_update_rho_examples():
    assert update_rho(math.inf, 3.0, 1e-3) == 0.0
    assert update_rho(0.0, 3.0, 1e-3) == 1e-3
    assert update_rho(1.5, 3.0, 1e-3) == pytest.approx(5e-4)
    assert update_rho(9.0, 3.0, 1e-3) == 0.0
    with pytest.raises(ValueError):
        update_rho(1.0, 0.0, 1e-3)


@given(st.floats(0, 10), st.floats(0, 10))
def test_update_rho_is_monotone(a, b):
    lo, hi = sorted((a, b))
    assert update_rho(hi, 3.0, 1e-3) <= update_rho(lo, 3.0, 1e-3)


def test_retry_rho():
    assert retry_rho(0.0, 1e-3) == 1e-3
    assert retry_rho(2e-4, 1e-3) == 4e-4
    assert retry_rho(8e-4, 1e-3) == 1e-3


def test_config_checks():
    s = make_scenario()
    with pytest.raises(ValueError):
        PlannerConfig(rho_max=1.0).check(s)
    with pytest.raises(ValueError):
        PlannerConfig(search_backend="rrt").check(s)
    with pytest.raises(ValueError):
        PlannerConfig(cycle_limit=0).check(s)
    assert PlannerConfig().resolved(s).rho_max == pytest.approx(1e-3)
    # the unicycle's tiny heading weight shrinks the allowed safety weight
    Q0 = unicycle_weights(6, 6, 1)[0]
    assert PlannerConfig().resolved(s.replace(Q0=Q0)).rho_max == pytest.approx(1e-9)
    json.dumps(config_to_dict(PlannerConfig().resolved(s)))


# -- runs ----------------------------------------------------------------

def test_start_inside_the_terminal_ball_takes_one_cycle():
    s = make_scenario(z0=(49.5, 0, 0, 0))
    res = run(s)
    assert res.success and res.n_cycles == 1
    assert res.t_f == s.h * res.cycles[0].N


def test_free_space_run():
    s = make_scenario(zf=(40, 30, 0, 0))
    res = run(s)
    check_run_invariants(res, s)
    assert min_knot_clearance(res, s) == math.inf


def test_seeded_map_run():
    s = generate_scenario(static_map_params())
    res = run(s)
    check_run_invariants(res, s)
    assert res.n_cycles == 13 and res.t_f == 20.0
    assert all(c.N_hat < c.N - 1 for c in res.cycles[:-1])
    lines = res.log_lines()
    assert len(lines) == res.n_cycles
    entry = json.loads(lines[0])
    assert {"N", "N_hat", "rho", "strict_objective", "relaxed_objective", "compute_time"} <= set(entry)
    assert 0 <= res.non_contracting_steps < res.n_cycles


def test_unstoppable_start_is_a_search_failure():
    s = make_scenario(balls=[(25.0, 0.0, 20.0)], z0=(0, 0, 10, 0), zf=(60, 0, 0, 0), v_max=10.0, a_max=10.0)
    res = run(s)
    assert not res.success and res.failure_reason == "SearchFailed"
    assert res.failure_reason in FAILURE_REASONS


def test_cycle_limit():
    s = make_scenario(zf=(150, 0, 0, 0))
    res = run(s, PlannerConfig(cycle_limit=2))
    assert res.failure_reason == "CycleLimit" and res.n_cycles == 2


def test_pipelined_matches_sequential_on_a_moving_map():
    s = generate_scenario(moving_map_params(seed=1, motion_seed=1))
    a = run(s)
    b = run(s, PlannerConfig(pipelined=True))
    assert a.success == b.success and a.n_cycles == b.n_cycles
    np.testing.assert_array_equal(a.full_trajectory.states, b.full_trajectory.states)
    np.testing.assert_array_equal(a.full_trajectory.controls, b.full_trajectory.controls)
    if a.success:
        check_run_invariants(a, s)


def test_unicycle_with_window_search():
    s = make_scenario(zf=(30, 10, 0, 0), v_max=6.0, a_max=6.0)
    Q0, Q1, Q2 = unicycle_weights(6.0, 6.0, 1.0)
    s = s.replace(model="unicycle", Q0=Q0, Q1=Q1, Q2=Q2)
    res = run(s, PlannerConfig(search_backend="cdwa"))
    check_run_invariants(res, s)


def test_frozen_time_mode_and_first_anchor_also_plan():
    s = generate_scenario(static_map_params(seed=20250713))
    for cfg in (PlannerConfig(time_mode="frozen"), PlannerConfig(anchor_mode="first")):
        res = run(s, cfg)
        assert res.failure_reason in (None,) + FAILURE_REASONS
        if res.success:
            check_run_invariants(res, s)
