"""Linear Koopman surrogate (EDMDc) and the linear MPC comparison baseline.

The baseline lifts states with the same dictionary but fits a single linear
model z+ = A_L z + B_L u from jointly sampled state/input pairs, then runs
receding-horizon control with linear predictions and box input constraints
only. It carries no tightening and no terminal region; it exists as the foil
the bilinear pipeline is compared against.
"""

import json
import warnings
from dataclasses import replace

import numpy as np

from .boxes import Box
from .dictionary import lift_many
from .dynamics import flow
from .errors import (
    FitFailed,
    InsufficientDataWarning,
    InvalidParameter,
    SamplingFailed,
)
from .mpc import _LinearRollout, _solve_generic


class LinearSurrogate:
    """Fitted lifted linear model z+ = A_L z + B_L u on the full lift."""

    def __init__(self, A_L, B_L, dt, dict_name="custom", meta=None):
        self.A_L = np.asarray(A_L, dtype=float)
        self.B_L = np.asarray(B_L, dtype=float)
        self.dt = float(dt)
        self.dict_name = dict_name
        self.meta = dict(meta or {})
        if self.A_L.ndim != 2 or self.A_L.shape[0] != self.A_L.shape[1]:
            raise InvalidParameter("A_L must be square")
        if self.B_L.shape[0] != self.A_L.shape[0]:
            raise InvalidParameter("B_L row count must match A_L")
        if not (np.all(np.isfinite(self.A_L)) and np.all(np.isfinite(self.B_L))):
            raise FitFailed("linear surrogate has non-finite entries")

    def to_json_dict(self):
        return {
            "A_L": self.A_L.tolist(),
            "B_L": self.B_L.tolist(),
            "dt": self.dt,
            "dict_name": self.dict_name,
            "meta": self.meta,
        }

    @classmethod
    def from_json_dict(cls, d):
        return cls(np.asarray(d["A_L"]), np.asarray(d["B_L"]), d["dt"],
                   d.get("dict_name", "custom"), d.get("meta"))

    def save(self, path):
        with open(path, "w") as f:
            json.dump(self.to_json_dict(), f, indent=2, sort_keys=True)

    @classmethod
    def load(cls, path):
        with open(path) as f:
            return cls.from_json_dict(json.load(f))


def fit_edmdc(sd, dictionary, X, U, d, seed):
    """Fit the lifted linear model from d uniform (state, input) pairs.

    Returns
    -------
    LinearSurrogate
    """
    if d < 1:
        raise InvalidParameter("sample count must be at least 1")
    if not isinstance(X, Box) or not isinstance(U, Box):
        raise InvalidParameter("X and U must be boxes")
    rng = np.random.default_rng(seed)

    states, inputs, successors = [], [], []
    discarded = 0
    drawn = 0
    while len(states) < d:
        xs = X.sample(rng, size=d - len(states))
        us = U.sample(rng, size=d - len(states))
        drawn += xs.shape[0]
        for x, u in zip(xs, us):
            try:
                x_next = flow(sd, x, u)
            except Exception:
                discarded += 1
                continue
            states.append(x)
            inputs.append(u)
            successors.append(x_next)
        if discarded > 0.1 * drawn and drawn >= d:
            raise SamplingFailed(f"{discarded}/{drawn} joint samples diverged")

    Z = lift_many(dictionary, np.asarray(states))
    Zp = lift_many(dictionary, np.asarray(successors))
    Us = np.asarray(inputs)
    W = np.hstack([Z, Us])
    if d < W.shape[1]:
        warnings.warn(
            f"{d} samples for {W.shape[1]} unknown columns", InsufficientDataWarning
        )
    T, *_ = np.linalg.lstsq(W, Zp, rcond=None)
    T = T.T
    if not np.all(np.isfinite(T)):
        raise FitFailed("EDMDc least squares produced a non-finite operator")
    A_L = T[:, : Z.shape[1]]
    B_L = T[:, Z.shape[1]:]
    res = float(np.linalg.norm(Zp.T - T @ W.T, "fro") / np.sqrt(d))
    return LinearSurrogate(
        A_L, B_L, sd.dt, dictionary.name,
        meta={"d": d, "residual_per_sample": res, "seed": int(seed)},
    )


def _lmpc_spec(spec):
    """The baseline solves the same objective with constraints off by default."""
    return replace(
        spec,
        tightening_enabled=False,
        state_constraints_enabled=False,
        terminal_constraint_enabled=False,
    )


def lmpc_solve(spec, lin, dictionary, state, warm_start=None):
    """Full solve of the linear-prediction problem (for warm-start chaining)."""
    state = np.asarray(state, dtype=float)
    if not spec.X.contains(state, tol=1e-9):
        raise InvalidParameter(f"state {state} outside the state box")
    rollout = _LinearRollout(lin)
    return _solve_generic(_lmpc_spec(spec), rollout, dictionary, state, warm_start)


def lmpc_step(spec, lin, dictionary, state, warm_start=None):
    """One baseline step: solve with linear lifted predictions, return the
    first input value."""
    return lmpc_solve(spec, lin, dictionary, state, warm_start).u_star[0].copy()
