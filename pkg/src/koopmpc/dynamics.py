"""Control-affine plants and their zero-order-hold sampled dynamics.

A plant is the continuous-time system xdot = g0(x) + G(x) u with drift g0
vanishing at the origin. The sampled map advances the state over one period
with the input held constant, realized by fixed-step classical Runge-Kutta.
"""

from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .errors import IntegrationDiverged, InvalidParameter


@dataclass(frozen=True)
class ControlAffinePlant:
    """Continuous-time control-affine system.

    Attributes
    ----------
    n, m : int
        State and input dimensions.
    g0 : callable
        Drift, maps state (n,) to (n,). Must vanish at the origin.
    G : callable
        Input matrix, maps state (n,) to (n, m).
    name : str
        Registry label, informational.
    """

    n: int
    m: int
    g0: Callable[[np.ndarray], np.ndarray]
    G: Callable[[np.ndarray], np.ndarray]
    name: str = "plant"

    def __post_init__(self):
        if self.n < 1 or self.m < 1:
            raise InvalidParameter("state and input dimensions must be positive")
        origin = np.zeros(self.n)
        if np.max(np.abs(np.asarray(self.g0(origin), dtype=float))) > 1e-12:
            raise InvalidParameter("drift must vanish at the origin")
        G0 = np.asarray(self.G(origin), dtype=float)
        if G0.shape != (self.n, self.m):
            raise InvalidParameter(f"G(x) must have shape ({self.n}, {self.m})")

    def rhs(self, x, u):
        """Right-hand side g0(x) + G(x) u."""
        x = np.asarray(x, dtype=float)
        u = np.atleast_1d(np.asarray(u, dtype=float))
        return np.asarray(self.g0(x), dtype=float) + np.asarray(self.G(x), dtype=float) @ u


@dataclass(frozen=True)
class SampledDynamics:
    """Zero-order-hold discretization of a plant at a fixed sampling period.

    `substeps` integrator steps of length dt/substeps realize each sample.
    """

    plant: ControlAffinePlant
    dt: float
    substeps: int = 10

    def __post_init__(self):
        if self.dt <= 0:
            raise InvalidParameter("sampling period must be positive")
        if self.substeps < 1:
            raise InvalidParameter("substeps must be at least 1")


def rk4_step(plant, x, u, h):
    """One classical 4th-order Runge-Kutta step with the input held constant.

    Parameters
    ----------
    plant : ControlAffinePlant
    x : array-like, shape (n,)
    u : array-like, shape (m,) or scalar
    h : float
        Step length, must be positive.

    Returns
    -------
    np.ndarray
        State after the step.

    Raises
    ------
    IntegrationDiverged
        If the update is non-finite.
    """
    if h <= 0:
        raise InvalidParameter("step length must be positive")
    x = np.asarray(x, dtype=float)
    k1 = plant.rhs(x, u)
    k2 = plant.rhs(x + 0.5 * h * k1, u)
    k3 = plant.rhs(x + 0.5 * h * k2, u)
    k4 = plant.rhs(x + h * k3, u)
    x_next = x + (h / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)
    if not np.all(np.isfinite(x_next)):
        raise IntegrationDiverged(f"non-finite state after RK4 step from {x}")
    return x_next


def flow(sd, x, u):
    """Advance the state one sampling period under a constant input.

    Composes `sd.substeps` RK4 steps of length dt/substeps; this is the
    discrete-time map the whole pipeline treats as the true plant step.
    """
    h = sd.dt / sd.substeps
    for _ in range(sd.substeps):
        x = rk4_step(sd.plant, x, u, h)
    return x


def pendulum_plant(b=0.5, l=1.0, m=1.0, g=9.81):
    """Inverted pendulum: x1dot = x2, x2dot = (g/l) sin x1 - b/(m l^2) x2 + u/(m l^2).

    Defaults are the benchmark values b=0.5, l=1, m=1, g=9.81.
    """
    if l <= 0 or m <= 0:
        raise InvalidParameter("pendulum length and mass must be positive")
    ml2 = m * l * l

    def g0(x):
        return np.array([x[1], (g / l) * np.sin(x[0]) - (b / ml2) * x[1]])

    def G(x):
        return np.array([[0.0], [1.0 / ml2]])

    return ControlAffinePlant(n=2, m=1, g0=g0, G=G, name="pendulum")


def linear_plant(A, B):
    """Plant xdot = A x + B u, mainly for oracle tests against exact discretization."""
    A = np.asarray(A, dtype=float)
    B = np.asarray(B, dtype=float)
    if A.ndim != 2 or A.shape[0] != A.shape[1]:
        raise InvalidParameter("A must be square")
    if B.ndim != 2 or B.shape[0] != A.shape[0]:
        raise InvalidParameter("B row count must match A")
    return ControlAffinePlant(
        n=A.shape[0], m=B.shape[1], g0=lambda x: A @ x, G=lambda x: B, name="linear"
    )


_PLANT_FACTORIES = {
    "pendulum": pendulum_plant,
    "linear": lambda A, B: linear_plant(np.asarray(A), np.asarray(B)),
}


def register_plant(name, factory):
    """Register a plant factory under a string name for config-driven runs."""
    _PLANT_FACTORIES[name] = factory


def make_plant(name, params=None):
    """Instantiate a registered plant from its name and keyword parameters."""
    if name not in _PLANT_FACTORIES:
        raise InvalidParameter(f"unknown plant '{name}'; known: {sorted(_PLANT_FACTORIES)}")
    return _PLANT_FACTORIES[name](**(params or {}))
