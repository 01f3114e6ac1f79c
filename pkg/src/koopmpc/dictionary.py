"""Observable dictionaries: lifting, projection, and the lift Lipschitz constant.

A dictionary holds M+1 observables (psi_0, ..., psi_M) with psi_0 constant one,
psi_k the k-th coordinate for k in 1..n, and every non-constant observable
vanishing at the origin. Observables are vectorized: they accept arrays of
shape (..., n) and return shape (...). Optional gradient callables (same
convention, returning (..., n)) enable analytic derivatives of the lift;
a central-difference fallback covers observables without one.
"""

from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np

from .boxes import Box
from .errors import DictionaryNotNormBounding, DimensionError, InvalidParameter, LiftFailed


@dataclass(frozen=True)
class Dictionary:
    """Ordered observable list defining the lift Phi.

    Attributes
    ----------
    n : int
        State dimension.
    observables : sequence of callables
        psi_0 .. psi_M, vectorized over leading axes.
    names : sequence of str
        One label per observable.
    gradients : sequence of callables or None
        Optional per-observable gradient maps; entries may be None.
    name : str
        Registry label.
    """

    n: int
    observables: Sequence[Callable]
    names: Sequence[str]
    gradients: Optional[Sequence[Optional[Callable]]] = None
    name: str = "custom"

    def __post_init__(self):
        if len(self.observables) != len(self.names):
            raise InvalidParameter("one name per observable required")
        if len(self.observables) < self.n + 1:
            raise InvalidParameter("dictionary must contain the constant and all coordinates")
        origin = np.zeros(self.n)
        if abs(float(self.observables[0](origin)) - 1.0) > 1e-12:
            raise InvalidParameter("psi_0 must be identically one")
        for k in range(1, self.n + 1):
            probe = np.arange(1.0, self.n + 1.0)
            if abs(float(self.observables[k](probe)) - probe[k - 1]) > 1e-12:
                raise InvalidParameter(f"psi_{k} must be the coordinate x_{k}")
        for k in range(1, self.M + 1):
            if abs(float(self.observables[k](origin))) > 1e-12:
                raise InvalidParameter(f"psi_{k} must vanish at the origin")

    @property
    def M(self):
        """Index of the last observable; the lifted dimension is M + 1."""
        return len(self.observables) - 1


@dataclass(frozen=True)
class LiftedVec:
    """Full lift z = Phi(x) plus the reduced lift with the constant entry dropped."""

    z: np.ndarray

    @property
    def hat(self):
        return self.z[1:]


def lift(dictionary, x):
    """Evaluate the full lift at one state.

    Raises
    ------
    LiftFailed
        If any observable returns a non-finite value.
    """
    x = np.asarray(x, dtype=float)
    if x.shape != (dictionary.n,):
        raise DimensionError(f"state must have shape ({dictionary.n},), got {x.shape}")
    z = np.array([float(psi(x)) for psi in dictionary.observables])
    if not np.all(np.isfinite(z)):
        bad = dictionary.names[int(np.argmax(~np.isfinite(z)))]
        raise LiftFailed(f"observable '{bad}' returned a non-finite value at x={x}")
    return LiftedVec(z=z)


def lift_many(dictionary, X):
    """Lift a batch of states, shape (d, n) -> (d, M+1)."""
    X = np.asarray(X, dtype=float)
    if X.ndim != 2 or X.shape[1] != dictionary.n:
        raise DimensionError(f"expected shape (d, {dictionary.n}), got {X.shape}")
    cols = [np.broadcast_to(np.asarray(psi(X), dtype=float), (X.shape[0],)) for psi in dictionary.observables]
    Z = np.stack(cols, axis=1)
    if not np.all(np.isfinite(Z)):
        raise LiftFailed("non-finite observable value in batch lift")
    return Z


def project(dictionary, z):
    """Recover the state from a lifted vector: the coordinate block z[1 : n+1]."""
    if isinstance(z, LiftedVec):
        z = z.z
    z = np.asarray(z, dtype=float)
    if z.shape != (dictionary.M + 1,):
        raise DimensionError(f"lifted vector must have shape ({dictionary.M + 1},), got {z.shape}")
    return z[1 : dictionary.n + 1].copy()


def jacobian_hat(dictionary, x, fd_step=1e-6):
    """Jacobian of the reduced lift, shape (M, n).

    Uses per-observable gradients when available, otherwise central differences.
    """
    x = np.asarray(x, dtype=float)
    n, M = dictionary.n, dictionary.M
    J = np.zeros((M, n))
    grads = dictionary.gradients
    for k in range(1, M + 1):
        g = grads[k] if grads is not None else None
        if g is not None:
            J[k - 1] = np.asarray(g(x), dtype=float)
        else:
            psi = dictionary.observables[k]
            for j in range(n):
                e = np.zeros(n)
                e[j] = fd_step
                J[k - 1, j] = (float(psi(x + e)) - float(psi(x - e))) / (2 * fd_step)
    return J


def estimate_L_Phi(dictionary, X, grid_density=201, inflation=1.05, exclusion_radius=1e-8):
    """Estimate the lift Lipschitz-type constant on a box by grid maximization.

    Scans a regular grid over `X`, takes the largest ratio
    ||Phi(x) - Phi(0)|| / ||x||, and inflates it by `inflation`. States inside
    `exclusion_radius` of the origin are skipped. Also checks the lower
    inequality ||x|| <= ||Phi(x) - Phi(0)|| at every grid point.

    Raises
    ------
    DictionaryNotNormBounding
        If the lower inequality fails anywhere on the grid.
    """
    if not isinstance(X, Box):
        raise InvalidParameter("X must be a Box")
    if not X.contains(np.zeros(dictionary.n)):
        raise InvalidParameter("box must contain the origin")
    pts = X.grid(grid_density)
    radii = np.linalg.norm(pts, axis=1)
    keep = radii > exclusion_radius
    pts, radii = pts[keep], radii[keep]
    Z = lift_many(dictionary, pts)
    z0 = lift(dictionary, np.zeros(dictionary.n)).z
    diff = np.linalg.norm(Z - z0, axis=1)
    low_slack = diff - radii
    if np.min(low_slack) < -1e-9 * np.max(radii):
        i = int(np.argmin(low_slack))
        raise DictionaryNotNormBounding(
            f"||x|| > ||Phi(x) - Phi(0)|| at x={pts[i]} "
            f"({radii[i]:.6g} > {diff[i]:.6g})"
        )
    return float(np.max(diff / radii)) * inflation


def _sin_dictionary(n=2):
    obs = [
        lambda x: np.ones(np.asarray(x).shape[:-1]) if np.asarray(x).ndim > 1 else 1.0,
        lambda x: np.asarray(x)[..., 0],
        lambda x: np.asarray(x)[..., 1],
        lambda x: np.sin(np.asarray(x)[..., 0]),
    ]
    grads = [
        None,
        lambda x: np.array([1.0, 0.0]),
        lambda x: np.array([0.0, 1.0]),
        lambda x: np.array([np.cos(x[0]), 0.0]),
    ]
    return Dictionary(
        n=2,
        observables=obs,
        names=["1", "x1", "x2", "sin(x1)"],
        gradients=grads,
        name="pendulum-sin",
    )


def _sin_x2cos_dictionary(n=2):
    base = _sin_dictionary()
    obs = list(base.observables) + [lambda x: np.asarray(x)[..., 1] * np.cos(np.asarray(x)[..., 0])]
    grads = list(base.gradients) + [lambda x: np.array([-x[1] * np.sin(x[0]), np.cos(x[0])])]
    return Dictionary(
        n=2,
        observables=obs,
        names=base.names + ["x2*cos(x1)"],
        gradients=grads,
        name="pendulum-sin-x2cos",
    )


def identity_dictionary(n):
    """The exact lift (1, x_1, ..., x_n); turns any linear plant into an invariant case."""
    obs = [lambda x: np.ones(np.asarray(x).shape[:-1]) if np.asarray(x).ndim > 1 else 1.0]
    grads = [None]
    for k in range(n):
        obs.append(lambda x, k=k: np.asarray(x)[..., k])
        grads.append(lambda x, k=k: np.eye(n)[k])
    return Dictionary(
        n=n,
        observables=obs,
        names=["1"] + [f"x{k + 1}" for k in range(n)],
        gradients=grads,
        name=f"identity-{n}",
    )


_DICTIONARY_FACTORIES = {
    "pendulum-sin": _sin_dictionary,
    "pendulum-sin-x2cos": _sin_x2cos_dictionary,
    "identity-2": lambda: identity_dictionary(2),
}


def register_dictionary(name, factory):
    """Register a dictionary factory under a string name for config-driven runs."""
    _DICTIONARY_FACTORIES[name] = factory


def make_dictionary(name, **kwargs):
    """Instantiate a registered dictionary by name."""
    if name not in _DICTIONARY_FACTORIES:
        raise InvalidParameter(
            f"unknown dictionary '{name}'; known: {sorted(_DICTIONARY_FACTORIES)}"
        )
    return _DICTIONARY_FACTORIES[name](**kwargs)
