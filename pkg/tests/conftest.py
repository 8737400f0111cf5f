import sys
from pathlib import Path

import numpy as np
import pytest
from hypothesis import settings

from cycleplan.scenario import Obstacle, Scenario, SeededRandomWalk, Static, double_integrator_weights

sys.path.insert(0, str(Path(__file__).parent))

settings.register_profile("default", max_examples=60, deadline=None)
settings.load_profile("default")


def make_scenario(balls=(), z0=(0, 0, 0, 0), zf=(50, 0, 0, 0), v_max=10.0, a_max=10.0, h=0.25,
                  gamma=1.0, N_min=8, N_max=20, ell=1.0, speed=0.0, **kw):
    """Hand-built double-integrator scenario; ``balls`` holds (x, y, r)."""
    obs = []
    for j, (x, y, r) in enumerate(balls):
        motion = SeededRandomWalk(speed, speed, j, h) if speed > 0 else Static()
        obs.append(Obstacle(j, (float(x), float(y)), float(r), motion))
    Q0, Q1, Q2 = double_integrator_weights(v_max, a_max)
    return Scenario(obstacles=tuple(obs), z0=np.array(z0, float), zf=np.array(zf, float), gamma=gamma,
                    Q0=Q0, Q1=Q1, Q2=Q2, v_max=v_max, a_max=a_max, clearance_ell=ell, h=h,
                    N_min=N_min, N_max=N_max, **kw)


@pytest.fixture
def corridor():
    """A ball just off the straight line, close enough that the first cycle
    has to bend around it (several knots get lambda_min > 0)."""
    return make_scenario(balls=[(12.0, 0.5, 3.0)], z0=(0, 0, 8, 0))


# -- acceptance report -------------------------------------------------------

def pytest_configure(config):
    config.acceptance_lines = []


@pytest.fixture
def report(request):
    """Record one pass/fail line, shown in the terminal summary and on stdout."""
    def add(number, ok, text):
        line = f"criterion {number}: {'PASS' if ok else 'FAIL'}  {text}"
        request.config.acceptance_lines.append(line)
        print(line)
    return add


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    lines = getattr(config, "acceptance_lines", [])
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in sorted(lines, key=lambda s: int(s.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)
