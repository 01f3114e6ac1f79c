"""Bilinear Koopman surrogate learning from sampled trajectory data.

Data is collected under the constant inputs 0 and e_i, one set per input
channel. The surrogate advances the lifted state through
K_u = K_0 + sum_i u_i (K_{e_i} - K_0), where the blocks of K_0 and K_{e_i}
come from two structured least-squares problems. The structure pins the
constant observable (first row (1, 0, ..., 0)) so the lifted origin is a
fixed point of the zero-input model.
"""

import json
import warnings
from dataclasses import dataclass, field

import numpy as np
from scipy.optimize import nnls

from .boxes import Box
from .dictionary import lift, lift_many, project
from .dynamics import flow
from .errors import (
    FitFailed,
    InsufficientDataWarning,
    InvalidParameter,
    PredictionDiverged,
    SamplingFailed,
    ValidationFailed,
)


@dataclass
class DataSet:
    """Lifted sample matrices for one constant training input.

    `X` holds lifted initial states column-wise: the reduced lift (M rows)
    for the zero input, the full lift (M+1 rows) for a unit input. `Y` holds
    the reduced lift of the successors (M rows).
    """

    input_tag: str
    X: np.ndarray
    Y: np.ndarray
    d: int
    dt: float
    dict_name: str = "custom"

    def __post_init__(self):
        if self.X.shape[1] != self.d or self.Y.shape[1] != self.d:
            raise InvalidParameter("sample count does not match matrix columns")
        if self.input_tag != "zero" and not self.input_tag.startswith("unit("):
            raise InvalidParameter(f"unknown input tag '{self.input_tag}'")


class SurrogateModel:
    """Fitted bilinear surrogate K_u = K_0 + sum_i u_i (K_{e_i} - K_0).

    Parameters
    ----------
    A : np.ndarray, shape (M, M)
        Zero-input block.
    b : list of np.ndarray, shape (M,)
        Constant-column vectors of the unit-input operators.
    B : list of np.ndarray, shape (M, M)
        State blocks of the unit-input operators.
    dt : float
        Sampling period the data was generated with.
    dict_name : str
        Name of the dictionary used for lifting.
    meta : dict
        Fit metadata (sample counts, residuals, seed).
    """

    def __init__(self, A, b, B, dt, dict_name="custom", meta=None):
        self.A = np.asarray(A, dtype=float)
        self.b = [np.asarray(v, dtype=float) for v in b]
        self.B = [np.asarray(Bi, dtype=float) for Bi in B]
        self.dt = float(dt)
        self.dict_name = dict_name
        self.meta = dict(meta or {})
        self.M = self.A.shape[0]
        self.m = len(self.b)
        if self.A.shape != (self.M, self.M):
            raise InvalidParameter("A must be square")
        if len(self.B) != self.m:
            raise InvalidParameter("one B block per input channel required")
        for v, Bi in zip(self.b, self.B):
            if v.shape != (self.M,) or Bi.shape != (self.M, self.M):
                raise InvalidParameter("inconsistent surrogate block shapes")
        # Cached block-assembled operators for fast rollouts.
        self._K0 = _embed_blocks(np.zeros(self.M), self.A)
        self._K_diff = [
            _embed_blocks(self.b[i], self.B[i]) - self._K0 for i in range(self.m)
        ]

    @property
    def K0(self):
        return self._K0

    @property
    def K_diff(self):
        """K_{e_i} - K_0, one (M+1, M+1) matrix per channel."""
        return self._K_diff

    def to_json_dict(self):
        return {
            "dt": self.dt,
            "M": self.M,
            "m": self.m,
            "dict_name": self.dict_name,
            "A": self.A.tolist(),
            "b": [v.tolist() for v in self.b],
            "B": [Bi.tolist() for Bi in self.B],
            "meta": self.meta,
        }

    @classmethod
    def from_json_dict(cls, d):
        return cls(
            A=np.asarray(d["A"]),
            b=[np.asarray(v) for v in d["b"]],
            B=[np.asarray(Bi) for Bi in d["B"]],
            dt=d["dt"],
            dict_name=d.get("dict_name", "custom"),
            meta=d.get("meta"),
        )

    def save(self, path):
        with open(path, "w") as f:
            json.dump(self.to_json_dict(), f, indent=2, sort_keys=True)

    @classmethod
    def load(cls, path):
        with open(path) as f:
            return cls.from_json_dict(json.load(f))


@dataclass
class ErrorBounds:
    """Empirical one-step error constants of the fitted surrogate.

    c_x, c_u parametrize the proportional residual bound
    r(x, u) <= c_x ||Phi(x) - Phi(0)|| + c_u ||u||, eps is a uniform residual
    bound, and L_K the operator-norm proxy driving the multi-step
    accumulation factor.
    """

    c_x: float
    c_u: float
    eps: float
    L_K: float
    confidence_note: str = ""

    def __post_init__(self):
        for name in ("c_x", "c_u", "eps", "L_K"):
            v = getattr(self, name)
            if not np.isfinite(v) or v < 0:
                raise InvalidParameter(f"{name} must be finite and nonnegative")

    def to_json_dict(self):
        return {
            "c_x": self.c_x,
            "c_u": self.c_u,
            "eps": self.eps,
            "L_K": self.L_K,
            "confidence_note": self.confidence_note,
        }

    @classmethod
    def from_json_dict(cls, d):
        return cls(**d)

    def save(self, path):
        with open(path, "w") as f:
            json.dump(self.to_json_dict(), f, indent=2, sort_keys=True)

    @classmethod
    def load(cls, path):
        with open(path) as f:
            return cls.from_json_dict(json.load(f))


def _embed_blocks(b, B):
    """Assemble [[1, 0], [b, B]] from the constant column and state block."""
    M = B.shape[0]
    K = np.zeros((M + 1, M + 1))
    K[0, 0] = 1.0
    K[1:, 0] = b
    K[1:, 1:] = B
    return K


def _input_tag(u):
    u = np.atleast_1d(np.asarray(u, dtype=float))
    if np.all(u == 0.0):
        return "zero"
    nz = np.nonzero(u)[0]
    if nz.size == 1 and u[nz[0]] == 1.0:
        return f"unit({nz[0] + 1})"
    raise InvalidParameter("training input must be 0 or a unit vector e_i")


def sample_data(sd, dictionary, X, u_const, d, seed):
    """Generate one lifted data set under a constant training input.

    Draws `d` initial states uniformly from the box `X`, advances each by one
    sampling period under `u_const`, and lifts both endpoints. Diverging
    samples are discarded and redrawn; more than 10% discards aborts.

    Returns
    -------
    DataSet
    """
    if d < 1:
        raise InvalidParameter("sample count must be at least 1")
    if not isinstance(X, Box):
        raise InvalidParameter("X must be a Box")
    tag = _input_tag(u_const)
    u = np.atleast_1d(np.asarray(u_const, dtype=float))
    rng = np.random.default_rng(seed)

    states, successors = [], []
    discarded = 0
    drawn = 0
    while len(states) < d:
        batch = X.sample(rng, size=d - len(states))
        drawn += batch.shape[0]
        for x in batch:
            try:
                x_next = flow(sd, x, u)
            except Exception:
                discarded += 1
                continue
            states.append(x)
            successors.append(x_next)
        if discarded > 0.1 * drawn and drawn >= d:
            raise SamplingFailed(
                f"{discarded}/{drawn} samples diverged under input tag '{tag}'"
            )

    Z = lift_many(dictionary, np.asarray(states))
    Zp = lift_many(dictionary, np.asarray(successors))
    X_mat = Z.T if tag != "zero" else Z.T[1:, :]
    Y_mat = Zp.T[1:, :]
    return DataSet(
        input_tag=tag, X=X_mat, Y=Y_mat, d=d, dt=sd.dt, dict_name=dictionary.name
    )


def fit(data_zero, data_units):
    """Fit the structured surrogate from one zero-input and m unit-input sets.

    Solves min ||Y_0 - A X_0||_F and min ||Y_{e_i} - [b_i B_i] X_{e_i}||_F by
    orthogonal factorization (minimum-norm solution when rank-deficient).

    Returns
    -------
    SurrogateModel
    """
    if data_zero.input_tag != "zero":
        raise InvalidParameter("first argument must be the zero-input data set")
    dt = data_zero.dt
    dict_name = data_zero.dict_name
    for ds in data_units:
        if ds.dt != dt or ds.dict_name != dict_name:
            raise InvalidParameter("all data sets must share dt and dictionary")

    M = data_zero.X.shape[0]
    if data_zero.d < M:
        warnings.warn(
            f"zero-input set has {data_zero.d} samples for {M} unknown rows",
            InsufficientDataWarning,
        )
    A, res_zero = _lstsq_operator(data_zero.X, data_zero.Y)

    b, B, res_units = [], [], []
    for i, ds in enumerate(data_units):
        expected = f"unit({i + 1})"
        if ds.input_tag != expected:
            raise InvalidParameter(
                f"unit data sets must be ordered by channel; got '{ds.input_tag}', "
                f"expected '{expected}'"
            )
        if ds.X.shape[0] != M + 1:
            raise InvalidParameter("unit-input set must store the full lift")
        if ds.d < M + 1:
            warnings.warn(
                f"unit-input set {i + 1} has {ds.d} samples for {M + 1} unknown rows",
                InsufficientDataWarning,
            )
        bB, res = _lstsq_operator(ds.X, ds.Y)
        b.append(bB[:, 0])
        B.append(bB[:, 1:])
        res_units.append(res)

    model = SurrogateModel(
        A=A,
        b=b,
        B=B,
        dt=dt,
        dict_name=dict_name,
        meta={
            "d_zero": data_zero.d,
            "d_units": [ds.d for ds in data_units],
            "residual_per_sample_zero": res_zero,
            "residual_per_sample_units": res_units,
        },
    )
    return model


def _lstsq_operator(X, Y):
    """Minimum-norm solution of min_T ||Y - T X||_F plus the per-sample residual."""
    T, *_ = np.linalg.lstsq(X.T, Y.T, rcond=None)
    T = T.T
    if not np.all(np.isfinite(T)):
        raise FitFailed("least squares produced a non-finite operator")
    res = float(np.linalg.norm(Y - T @ X, "fro") / np.sqrt(X.shape[1]))
    return T, res


def K_of_u(model, u):
    """Assemble the lifted transition matrix for one input value."""
    u = np.atleast_1d(np.asarray(u, dtype=float))
    if u.shape != (model.m,):
        raise InvalidParameter(f"input must have length {model.m}")
    K = model.K0.copy()
    for i in range(model.m):
        K += u[i] * model.K_diff[i]
    return K


def predict_k(model, dictionary, x0, u_seq):
    """Multi-step prediction through the surrogate.

    Parameters
    ----------
    u_seq : array-like, shape (N, m) or (N,) for single-input models.

    Returns
    -------
    states : np.ndarray, shape (N+1, n)
        Projected predictions, index 0 being `x0` itself.
    lifted : np.ndarray, shape (N+1, M+1)
        The propagated lifted trajectory.
    """
    u_seq = np.atleast_1d(np.asarray(u_seq, dtype=float))
    if u_seq.ndim == 1:
        u_seq = u_seq[:, None]
    if u_seq.shape[0] < 1:
        raise InvalidParameter("input sequence must have at least one element")
    z = lift(dictionary, x0).z
    lifted = [z]
    for k, u in enumerate(u_seq):
        z = K_of_u(model, u) @ z
        if not np.all(np.isfinite(z)):
            raise PredictionDiverged(k + 1)
        lifted.append(z)
    lifted = np.asarray(lifted)
    states = lifted[:, 1 : dictionary.n + 1]
    return states, lifted


def cbar(bounds, kappa):
    """Accumulation factor sum_{i=0}^{kappa-1} L_K^i of the multi-step error bound."""
    if kappa < 1:
        raise InvalidParameter("kappa must be at least 1")
    L = bounds.L_K if hasattr(bounds, "L_K") else float(bounds)
    if L == 1.0:
        return float(kappa)
    return float((L**kappa - 1.0) / (L - 1.0))


def estimate_error_constants(model, sd, dictionary, X, U, n_val=10000, seed=0):
    """Estimate (c_x, c_u), the uniform bound eps, and the norm proxy L_K.

    Draws validation pairs uniformly from X x U, augmented with box corners
    and the constant training inputs (residuals typically peak at the
    boundary). The proportional pair is a nonnegative least-squares fit over
    the residuals, inflated so every validation residual is dominated; eps is
    the largest residual inflated by 5%; L_K the largest spectral norm of the
    surrogate over a grid of inputs, inflated by 10%.

    Returns
    -------
    ErrorBounds
    """
    if n_val < 1000:
        raise InvalidParameter("validation requires at least 1000 samples")
    rng = np.random.default_rng(seed)
    xs = X.sample(rng, size=n_val)
    us = U.sample(rng, size=n_val)

    extra_x = np.vstack([X.corners(), np.zeros((1, X.dim))])
    extra_u = np.vstack(
        [np.zeros((1, U.dim)), np.eye(U.dim), U.corners()]
    )
    n_keep = min(64, n_val)
    pad_x = np.vstack([extra_x, xs[:n_keep]])
    for u_row in extra_u:
        xs = np.vstack([xs, pad_x])
        us = np.vstack([us, np.tile(u_row, (pad_x.shape[0], 1))])

    z0 = lift(dictionary, np.zeros(dictionary.n)).z
    residuals = np.empty(xs.shape[0])
    lifted_norm = np.empty(xs.shape[0])
    input_norm = np.linalg.norm(us, axis=1)
    for j, (x, u) in enumerate(zip(xs, us)):
        z = lift(dictionary, x).z
        z_true = lift(dictionary, flow(sd, x, u)).z
        r = float(np.linalg.norm(z_true - K_of_u(model, u) @ z))
        if not np.isfinite(r):
            raise ValidationFailed(f"non-finite residual at x={x}, u={u}")
        residuals[j] = r
        lifted_norm[j] = np.linalg.norm(z - z0)

    c_x, c_u = _fit_proportional_pair(residuals, lifted_norm, input_norm)
    eps = float(np.max(residuals)) * 1.05
    L_K = _max_operator_norm(model, U) * 1.1
    note = (
        f"n_val={n_val} seed={seed} corners_included=yes "
        f"max_residual={np.max(residuals):.3e}"
    )
    return ErrorBounds(c_x=c_x, c_u=c_u, eps=max(eps, 1e-16), L_K=L_K, confidence_note=note)


def _fit_proportional_pair(r, a, b):
    """Smallest nonnegative (c_x, c_u) with r <= c_x a + c_u b on all samples.

    Least-squares fit first, then a scalar inflation so the bound dominates
    every sample. Samples at (a, b) ~ 0 must have vanishing residuals.
    """
    tiny = 1e-12
    trivial = (a < tiny) & (b < tiny)
    if np.any(r[trivial] > 1e-9):
        raise ValidationFailed("non-proportional residual at the origin")
    a, b, r = a[~trivial], b[~trivial], r[~trivial]
    design = np.stack([a, b], axis=1)
    coeff, _ = nnls(design, r)
    c_x = max(float(coeff[0]), 1e-16)
    c_u = max(float(coeff[1]), 1e-16)
    factor = np.max(r / (c_x * a + c_u * b))
    factor = max(1.0, float(factor))
    return c_x * factor, c_u * factor


def _max_operator_norm(model, U, grid_points=101):
    """Largest spectral norm of K_u over the input box (convex in u).

    Evaluates all box vertices plus, for single-input models, a regular grid.
    """
    candidates = [U.corners()]
    if U.dim == 1:
        candidates.append(np.linspace(U.lo, U.hi, grid_points).reshape(-1, 1))
    best = 0.0
    for block in candidates:
        for u in block:
            best = max(best, float(np.linalg.norm(K_of_u(model, u), 2)))
    return best


def dataset_to_csv(ds, path):
    """Persist a data set: metadata comment, observable-named header, one row per sample."""
    x_rows, d = ds.X.shape[0], ds.d
    y_rows = ds.Y.shape[0]
    x_names = [f"x:psi{k}" for k in (range(x_rows) if ds.input_tag != "zero" else range(1, x_rows + 1))]
    y_names = [f"y:psi{k}" for k in range(1, y_rows + 1)]
    with open(path, "w") as f:
        f.write(
            f"# input_tag={ds.input_tag} d={d} dt={ds.dt!r} dict={ds.dict_name}\n"
        )
        f.write(",".join(x_names + y_names) + "\n")
        for j in range(d):
            row = np.concatenate([ds.X[:, j], ds.Y[:, j]])
            f.write(",".join(f"{v:.17g}" for v in row) + "\n")


def dataset_from_csv(path):
    """Load a data set written by :func:`dataset_to_csv`."""
    with open(path) as f:
        header = f.readline().strip()
        if not header.startswith("#"):
            raise InvalidParameter("missing data-set metadata line")
        meta = dict(item.split("=", 1) for item in header[1:].split())
        names = f.readline().strip().split(",")
        data = np.loadtxt(f, delimiter=",", ndmin=2)
    n_x = sum(1 for s in names if s.startswith("x:"))
    X = data[:, :n_x].T
    Y = data[:, n_x:].T
    return DataSet(
        input_tag=meta["input_tag"],
        X=X,
        Y=Y,
        d=int(meta["d"]),
        dt=float(meta["dt"]),
        dict_name=meta["dict"],
    )
