"""Control-affine vehicle models, Euler discretisation and per-cycle linearisation."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np


class SingularModel(ValueError):
    """Input matrix B is rank deficient at the linearisation point."""


@dataclass(frozen=True)
class ControlAffineModel:
    """z' = f_a(z) + f_b(z) u, with an analytic Jacobian of f_a.

    ``velocity`` maps a state to its planar velocity vector; the searches and
    the safety look-ahead only need positions (z[0:2]) and this vector.
    """

    name: str
    state_dim: int
    control_dim: int
    f_a: Callable[[np.ndarray], np.ndarray]
    f_b: Callable[[np.ndarray], np.ndarray]
    jac_a: Callable[[np.ndarray], np.ndarray]
    velocity: Callable[[np.ndarray], np.ndarray]
    position_slice: slice = slice(0, 2)

    def f_c(self, z, u) -> np.ndarray:
        z = np.asarray(z, float)
        return self.f_a(z) + self.f_b(z) @ np.asarray(u, float)


def double_integrator() -> ControlAffineModel:
    Ac = np.zeros((4, 4))
    Ac[0:2, 2:4] = np.eye(2)
    Bc = np.zeros((4, 2))
    Bc[2:4, :] = np.eye(2)
    return ControlAffineModel(
        name="double_integrator",
        state_dim=4,
        control_dim=2,
        f_a=lambda z: Ac @ z,
        f_b=lambda z: Bc,
        jac_a=lambda z: Ac,
        velocity=lambda z: np.asarray(z[2:4], float),
    )


def unicycle() -> ControlAffineModel:
    """State (x, y, theta, v), control (a, omega)."""
    Bc = np.array([[0.0, 0.0], [0.0, 0.0], [0.0, 1.0], [1.0, 0.0]])

    def f_a(z):
        return np.array([z[3] * np.cos(z[2]), z[3] * np.sin(z[2]), 0.0, 0.0])

    def jac_a(z):
        c, s = np.cos(z[2]), np.sin(z[2])
        J = np.zeros((4, 4))
        J[0, 2] = -z[3] * s
        J[0, 3] = c
        J[1, 2] = z[3] * c
        J[1, 3] = s
        return J

    return ControlAffineModel(
        name="unicycle",
        state_dim=4,
        control_dim=2,
        f_a=f_a,
        f_b=lambda z: Bc,
        jac_a=jac_a,
        velocity=lambda z: np.array([z[3] * np.cos(z[2]), z[3] * np.sin(z[2])]),
    )


MODELS = {"double_integrator": double_integrator, "unicycle": unicycle}


def get_model(name: str) -> ControlAffineModel:
    try:
        return MODELS[name]()
    except KeyError:
        raise ValueError(f"unknown model {name!r}; choose from {sorted(MODELS)}") from None


@dataclass(frozen=True, eq=False)
class DiscreteDynamics:
    A: np.ndarray
    B: np.ndarray
    w: np.ndarray
    h: float

    def step(self, z, u) -> np.ndarray:
        return self.A @ z + self.B @ u + self.w

    def same_as(self, other: "DiscreteDynamics") -> bool:
        return (
            np.array_equal(self.A, other.A)
            and np.array_equal(self.B, other.B)
            and np.array_equal(self.w, other.w)
            and self.h == other.h
        )


@dataclass(eq=False)
class Trajectory:
    """Knot states z_1..z_{N+1} (rows) and controls u_1..u_N, starting at time t0."""

    states: np.ndarray
    controls: np.ndarray
    h: float
    t0: float = 0.0

    @property
    def N(self) -> int:
        return len(self.controls)

    @property
    def positions(self) -> np.ndarray:
        return self.states[:, 0:2]

    @property
    def times(self) -> np.ndarray:
        return self.t0 + self.h * np.arange(len(self.states))


def discretize_exact(model: ControlAffineModel, z, u, h: float) -> np.ndarray:
    """Forward Euler step z + h f_c(z, u)."""
    if not h > 0:
        raise ValueError("h must be positive")
    z = np.asarray(z, float)
    return z + h * model.f_c(z, u)


def linearize(model: ControlAffineModel, z0, h: float) -> DiscreteDynamics:
    """First-order model about (z0, u = 0), exact at that point."""
    z0 = np.asarray(z0, float)
    J = np.asarray(model.jac_a(z0), float)
    if not np.all(np.isfinite(J)):
        raise SingularModel("non-finite Jacobian")
    n = model.state_dim
    A = np.eye(n) + h * J
    B = h * np.asarray(model.f_b(z0), float)
    w = h * (model.f_a(z0) - J @ z0)
    sv = np.linalg.svd(B, compute_uv=False)
    if sv.size < model.control_dim or sv.min() <= 1e-12 * max(1.0, sv.max()):
        raise SingularModel("B does not have full column rank")
    return DiscreteDynamics(A, B, w, h)


def rollout(dyn: DiscreteDynamics, z1, controls, t0: float = 0.0) -> Trajectory:
    controls = np.atleast_2d(np.asarray(controls, float))
    if controls.shape[0] == 0:
        raise ValueError("controls must be non-empty")
    states = np.empty((len(controls) + 1, len(z1)))
    states[0] = z1
    for i, u in enumerate(controls):
        states[i + 1] = dyn.step(states[i], u)
    return Trajectory(states, controls, dyn.h, t0)
