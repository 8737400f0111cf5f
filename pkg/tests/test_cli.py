import json

import numpy as np
import pytest

from cycleplan.cli import build_parser, main, read_bench_csv, read_trajectory_csv
from cycleplan.planner import run
from cycleplan.scenario import (generate_scenario, load_scenario, save_scenario, scenario_to_dict,
                                static_map_params, validate_scenario)
from cycleplan.sim import batch
from conftest import make_scenario

FLAGS = {
    "gen": ["--seed", "--out", "--obstacles", "--model", "--obstacle-speed", "--motion-seed", "--v-max",
            "--a-max", "--step"],
    "plan": ["--scenario", "--out", "--search", "--cycle-limit", "--time-mode", "--pipelined"],
    "simulate": ["--scenario", "--out", "--search", "--deadline", "--ignore-infeasibility",
                 "--ignore-violation", "--ignore-late"],
    "bench": ["--seeds", "--count", "--first-seed", "--out", "--workers", "--search", "--obstacles", "--deadline"],
    "export": ["--run", "--bench", "--what", "--out"],
}


@pytest.fixture
def scen_file(tmp_path):
    path = tmp_path / "s.json"
    assert main(["gen", "--seed", "20250712", "--obstacles", "20", "--out", str(path)]) == 0
    return path


@pytest.mark.parametrize("cmd", sorted(FLAGS))
def test_help_lists_every_flag(cmd, capsys):
    assert main([cmd, "--help"]) == 0
    out = capsys.readouterr().out
    for flag in FLAGS[cmd]:
        assert flag in out


def test_no_command_and_unknown_flag_are_usage_errors(capsys):
    assert main([]) == 2
    assert main(["plan", "--scenario", "x.json", "--out", "d", "--bogus"]) == 2
    assert "unrecognized" in capsys.readouterr().err
    assert main(["bench", "--count", "0"]) == 2
    assert main(["bench", "--count", "2", "--seeds", "f"]) == 2


def test_gen_writes_the_seeded_map(scen_file, capsys):
    s = load_scenario(scen_file)
    assert validate_scenario(s).ok and len(s.obstacles) == 20
    assert scenario_to_dict(s) == scenario_to_dict(generate_scenario(static_map_params()))
    assert main(["gen", "--seed", "20250712"]) == 0
    assert json.loads(capsys.readouterr().out) == json.loads(scen_file.read_text())


def test_gen_on_a_crowded_map_is_a_usage_error(capsys):
    assert main(["gen", "--seed", "1", "--obstacles", "500"]) == 2
    assert "generation failed" in capsys.readouterr().err


def test_plan_round_trip(scen_file, tmp_path):
    out = tmp_path / "run"
    assert main(["plan", "--scenario", str(scen_file), "--out", str(out)]) == 0
    ref = run(load_scenario(scen_file))
    times, states, controls = read_trajectory_csv(out / "trajectory.csv")
    np.testing.assert_array_equal(states, ref.full_trajectory.states)
    np.testing.assert_array_equal(controls, ref.full_trajectory.controls)
    np.testing.assert_array_equal(times, ref.full_trajectory.times)
    log = [json.loads(line) for line in (out / "cycles.log").read_text().splitlines()]
    assert len(log) == ref.n_cycles
    metrics = json.loads((out / "metrics.json").read_text())
    assert metrics["success"] and metrics["cycles"] == ref.n_cycles
    # the run's own scenario copy is a valid input again
    assert main(["plan", "--scenario", str(out / "scenario.json"), "--out", str(tmp_path / "again")]) == 0
    assert (tmp_path / "again" / "trajectory.csv").read_text() == (out / "trajectory.csv").read_text()


def test_simulate_writes_metrics(scen_file, tmp_path):
    out = tmp_path / "sim"
    assert main(["simulate", "--scenario", str(scen_file), "--out", str(out)]) == 0
    m = json.loads((out / "metrics.json").read_text())
    assert m["success"] and m["min_clearance"] >= 0 and m["format"] == 1


def test_invalid_scenario_exits_2_with_the_report(tmp_path, capsys):
    bad = tmp_path / "bad.json"
    save_scenario(make_scenario(balls=[(0.5, 0.0, 2.0)]), bad)
    assert main(["plan", "--scenario", str(bad), "--out", str(tmp_path / "r")]) == 2
    err = capsys.readouterr().err
    assert "initial position inside" in err and "usage: cycleplan plan" in err
    missing = tmp_path / "missing.json"
    assert main(["plan", "--scenario", str(missing), "--out", str(tmp_path / "r")]) == 2
    broken = tmp_path / "broken.json"
    broken.write_text(json.dumps({"format": 1}))
    assert main(["plan", "--scenario", str(broken), "--out", str(tmp_path / "r")]) == 2
    assert "missing field" in capsys.readouterr().err


def test_run_failure_exits_1(tmp_path, capsys):
    path = tmp_path / "wall.json"
    save_scenario(make_scenario(balls=[(25.0, 0.0, 20.0)], z0=(0, 0, 10, 0), zf=(60, 0, 0, 0),
                                v_max=10.0, a_max=10.0), path)
    assert main(["plan", "--scenario", str(path), "--out", str(tmp_path / "r")]) == 1
    assert "run failed: SearchFailed" in capsys.readouterr().err
    assert json.loads((tmp_path / "r" / "metrics.json").read_text())["failure_reason"] == "SearchFailed"


def test_bench_matches_batch(tmp_path):
    out = tmp_path / "b.csv"
    assert main(["bench", "--count", "3", "--workers", "1", "--out", str(out)]) == 0
    rows, agg = read_bench_csv(out)
    ref = batch([20250712, 20250713, 20250714])
    ref_agg = ref.aggregate()
    assert agg["runs"] == ref_agg["runs"] == 3
    assert agg["success_rate"] == ref_agg["success_rate"]
    assert agg["local_opt_rate"] == ref_agg["local_opt_rate"]
    for row, m in zip(rows, ref.rows):
        d = m.as_dict()
        for key in ("seed", "success", "failure_reason", "t_f", "cycles", "min_clearance", "local_opt_rate"):
            assert row[key] == d[key]

    seeds = tmp_path / "seeds.txt"
    seeds.write_text("# two maps\n20250713\n20250714\n")
    out2 = tmp_path / "b2.csv"
    assert main(["bench", "--seeds", str(seeds), "--workers", "1", "--out", str(out2)]) == 0
    rows2, _ = read_bench_csv(out2)
    assert [r["seed"] for r in rows2] == [20250713, 20250714]
    assert rows2[0]["t_f"] == rows[1]["t_f"]

    seeds.write_text("1\n1\n")
    assert main(["bench", "--seeds", str(seeds)]) == 2


def test_export(scen_file, tmp_path, capsys):
    run_dir = tmp_path / "run"
    main(["plan", "--scenario", str(scen_file), "--out", str(run_dir)])
    capsys.readouterr()
    assert main(["export", "--run", str(run_dir), "--what", "clearance"]) == 0
    lines = capsys.readouterr().out.splitlines()
    assert lines[0] == "# cycleplan clearance v1" and lines[1] == "t,clearance"
    vals = [float(line.split(",")[1]) for line in lines[2:]]
    assert min(vals) >= 0
    assert main(["export", "--run", str(run_dir), "--what", "trajectory", "--out", str(tmp_path / "t.csv")]) == 0
    assert (tmp_path / "t.csv").read_text().splitlines()[1] == "t,x,y"

    bench = tmp_path / "b.csv"
    main(["bench", "--count", "1", "--workers", "1", "--out", str(bench)])
    assert main(["export", "--bench", str(bench), "--what", "aggregate"]) == 0
    assert json.loads(capsys.readouterr().out) == read_bench_csv(bench)[1]
    assert main(["export", "--bench", str(bench), "--what", "clearance"]) == 2
    assert main(["export", "--run", str(tmp_path), "--what", "clearance"]) == 2


def test_parser_builds_all_commands():
    sub = build_parser()._subparsers._group_actions[0].choices
    assert set(sub) == set(FLAGS)
