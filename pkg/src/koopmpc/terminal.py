"""Terminal cost, terminal region, and the locally stabilizing sampled-data controller.

The terminal cost is the quadratic form V_f(x) = Phihat(x)^T P^{-1} Phihat(x)
in the reduced lift, the region is its sub-level set {V_f <= c}, and the
controller is the rational lifted feedback

    mu(x) = (I - L_w (Lambda^{-1} kron Phihat(x)))^{-1} L P_mu^{-1} Phihat(x).

Synthesis linearizes the fitted bilinear surrogate at the origin, solves a
discrete-time Riccati equation for a lifted gain and cost matrix, and then
scales the candidate region down geometrically until a sampled verification
of invariance, Lyapunov decrease against the true plant, and input-constraint
satisfaction passes. The region scale, decrease margins, and level are tied
together exactly: P = eps_scale * P_mu and c = 1 / eps_scale.
"""

import json
import warnings
from dataclasses import dataclass

import numpy as np
import scipy.linalg

from .boxes import Box
from .dictionary import lift, lift_many
from .dynamics import flow
from .errors import (
    ControllerSingular,
    InvalidParameter,
    OutsideTerminalRegion,
    RegionTooThinWarning,
    SynthesisFailed,
    SynthesisInvalid,
    TerminalRegionEmpty,
)


def _check_spd(name, A):
    A = np.asarray(A, dtype=float)
    if A.ndim != 2 or A.shape[0] != A.shape[1]:
        raise SynthesisInvalid(f"{name} must be square")
    if np.max(np.abs(A - A.T)) > 1e-10 * (1 + np.max(np.abs(A))):
        raise SynthesisInvalid(f"{name} must be symmetric")
    if np.min(np.linalg.eigvalsh(A)) <= 0:
        raise SynthesisInvalid(f"{name} must be positive definite")
    return 0.5 * (A + A.T)


class TerminalIngredients:
    """Verified terminal cost V_f, region level c, and controller parameters.

    The constructor enforces the exact couplings P = eps_scale * P_mu and
    c = 1 / eps_scale and caches the factorizations used by the cost and the
    controller.
    """

    def __init__(self, P_mu, L, L_w, Lambda, eps_scale, eps_x, eps_u,
                 dict_name="custom", report=None):
        self.P_mu = _check_spd("P_mu", P_mu)
        self.eps_scale = float(eps_scale)
        if self.eps_scale <= 0:
            raise SynthesisInvalid("eps_scale must be positive")
        self.P = self.eps_scale * self.P_mu
        self.c = 1.0 / self.eps_scale
        self.L = np.atleast_2d(np.asarray(L, dtype=float))
        self.L_w = np.atleast_2d(np.asarray(L_w, dtype=float))
        self.Lambda = _check_spd("Lambda", Lambda)
        self.eps_x = float(eps_x)
        self.eps_u = float(eps_u)
        self.dict_name = dict_name
        self.report = report

        self.M = self.P_mu.shape[0]
        self.m = self.L.shape[0]
        if self.L.shape != (self.m, self.M):
            raise SynthesisInvalid(f"L must be ({self.m}, {self.M})")
        if self.L_w.shape != (self.m, self.M * self.m):
            raise SynthesisInvalid(f"L_w must be ({self.m}, {self.M * self.m})")
        if self.Lambda.shape != (self.m, self.m):
            raise SynthesisInvalid(f"Lambda must be ({self.m}, {self.m})")

        self._P_inv = np.linalg.inv(self.P)
        self._P_inv = 0.5 * (self._P_inv + self._P_inv.T)
        self._L_Pmu_inv = np.linalg.solve(self.P_mu, self.L.T).T
        self._Lambda_inv = np.linalg.inv(self.Lambda)

    @property
    def P_inv(self):
        return self._P_inv

    @property
    def linear_gain(self):
        """The L P_mu^{-1} factor of the controller."""
        return self._L_Pmu_inv

    def cost_hat(self, zhat):
        """V_f evaluated on a reduced lifted vector."""
        zhat = np.asarray(zhat, dtype=float)
        return float(zhat @ self._P_inv @ zhat)

    def cost_hat_many(self, Zhat):
        """V_f for a batch of reduced lifted vectors, shape (d, M) -> (d,)."""
        Zhat = np.asarray(Zhat, dtype=float)
        return np.einsum("ij,jk,ik->i", Zhat, self._P_inv, Zhat)

    def feedback_hat(self, zhat):
        """Controller value from a reduced lifted vector (no region check)."""
        zhat = np.asarray(zhat, dtype=float)
        v = self._L_Pmu_inv @ zhat
        if np.any(self.L_w):
            inner = np.eye(self.m) - self.L_w @ np.kron(self._Lambda_inv, zhat[:, None])
            try:
                v = np.linalg.solve(inner, v)
            except np.linalg.LinAlgError as exc:
                raise ControllerSingular(
                    f"rational controller singular at zhat={zhat}"
                ) from exc
        return v

    def feedback_hat_many(self, Zhat):
        """Controller values for a batch, shape (d, M) -> (d, m)."""
        Zhat = np.asarray(Zhat, dtype=float)
        if np.any(self.L_w):
            return np.stack([self.feedback_hat(z) for z in Zhat])
        return Zhat @ self._L_Pmu_inv.T

    def to_json_dict(self):
        d = {
            "P": self.P.tolist(),
            "c": self.c,
            "P_mu": self.P_mu.tolist(),
            "L": self.L.tolist(),
            "L_w": self.L_w.tolist(),
            "Lambda": self.Lambda.tolist(),
            "eps_scale": self.eps_scale,
            "eps_x": self.eps_x,
            "eps_u": self.eps_u,
            "dict_name": self.dict_name,
        }
        if self.report is not None:
            d["verification"] = self.report.to_json_dict()
        return d

    @classmethod
    def from_json_dict(cls, d):
        report = None
        if "verification" in d:
            report = VerificationReport(**d["verification"])
        return cls(
            P_mu=np.asarray(d["P_mu"]),
            L=np.asarray(d["L"]),
            L_w=np.asarray(d["L_w"]),
            Lambda=np.asarray(d["Lambda"]),
            eps_scale=d["eps_scale"],
            eps_x=d["eps_x"],
            eps_u=d["eps_u"],
            dict_name=d.get("dict_name", "custom"),
            report=report,
        )

    def save(self, path):
        with open(path, "w") as f:
            json.dump(self.to_json_dict(), f, indent=2, sort_keys=True)

    @classmethod
    def load(cls, path):
        with open(path) as f:
            return cls.from_json_dict(json.load(f))


@dataclass
class VerificationReport:
    """Outcome of the sampled check of invariance, decrease, and input bounds."""

    n_samples: int
    n_decrease_violations: int
    n_invariance_violations: int
    n_control_violations: int
    worst_margin: float
    verified: bool

    def to_json_dict(self):
        return {
            "n_samples": self.n_samples,
            "n_decrease_violations": self.n_decrease_violations,
            "n_invariance_violations": self.n_invariance_violations,
            "n_control_violations": self.n_control_violations,
            "worst_margin": self.worst_margin,
            "verified": self.verified,
        }


def terminal_cost(ing, dictionary, x):
    """Terminal cost V_f(x) = Phihat(x)^T P^{-1} Phihat(x)."""
    return ing.cost_hat(lift(dictionary, x).hat)


def in_terminal_region(ing, dictionary, x):
    """Membership in the closed sub-level set {V_f <= c}."""
    return terminal_cost(ing, dictionary, x) <= ing.c


def terminal_controller(ing, dictionary, x, check_region=True):
    """Evaluate the sampled-data terminal controller at a state.

    Raises
    ------
    OutsideTerminalRegion
        If `check_region` and V_f(x) > c (with a 1e-9 relative slack).
    ControllerSingular
        If the rational part is singular at this state.
    """
    zhat = lift(dictionary, x).hat
    if check_region and ing.cost_hat(zhat) > ing.c * (1 + 1e-9):
        raise OutsideTerminalRegion(
            f"V_f(x)={ing.cost_hat(zhat):.6g} exceeds level c={ing.c:.6g}"
        )
    return ing.feedback_hat(zhat)


def _enclosing_state_radius(ing):
    """Radius of a ball certainly containing {V_f <= c} (uses ||x|| <= ||Phihat||)."""
    return float(np.sqrt(ing.c * np.max(np.linalg.eigvalsh(ing.P)))) * (1 + 1e-9)


def _ray_level_crossings(ing, dictionary, dirs, r_cap, iters=50):
    """Per-direction radius where V_f first reaches c, vectorized bisection.

    Directions whose cost stays below the level within `r_cap` report `r_cap`.
    """
    dirs = np.asarray(dirs, dtype=float)
    k = dirs.shape[0]

    def vals(t):
        return ing.cost_hat_many(lift_many(dictionary, t[:, None] * dirs)[:, 1:])

    t_hi = np.full(k, r_cap)
    below_cap = vals(t_hi) < ing.c
    t_lo = np.zeros(k)
    for _ in range(iters):
        t_mid = 0.5 * (t_lo + t_hi)
        under = vals(t_mid) < ing.c
        t_lo = np.where(under, t_mid, t_lo)
        t_hi = np.where(under, t_hi, t_mid)
    out = t_hi.copy()
    out[below_cap] = r_cap
    return out


def _region_samples(ing, dictionary, n_samples, rng, boundary_fraction=0.5):
    """States with V_f <= c: rejection sampling plus boundary-biased shell points."""
    n = dictionary.n
    r_cap = _enclosing_state_radius(ing)
    box = Box.symmetric(r_cap, dim=n)

    n_boundary = int(boundary_fraction * n_samples)
    n_interior = n_samples - n_boundary

    interior = np.zeros((0, n))
    attempts = 0
    while interior.shape[0] < n_interior and attempts < 1000 * n_interior + 1000:
        batch = box.sample(rng, size=max(256, n_interior))
        attempts += batch.shape[0]
        vf = ing.cost_hat_many(lift_many(dictionary, batch)[:, 1:])
        interior = np.vstack([interior, batch[vf <= ing.c]])
    if interior.shape[0] < n_interior:
        warnings.warn(
            f"terminal-region acceptance below 0.1% "
            f"({interior.shape[0]}/{attempts}); continuing with boundary-biased "
            "sampling",
            RegionTooThinWarning,
        )
        n_boundary = n_samples - interior.shape[0]
    interior = interior[:n_interior]

    dirs = rng.normal(size=(n_boundary, n))
    norms = np.linalg.norm(dirs, axis=1)
    dirs = dirs[norms > 1e-12] / norms[norms > 1e-12, None]
    radii = _ray_level_crossings(ing, dictionary, dirs, 2 * r_cap)
    shell = radii[:, None] * rng.uniform(0.985, 1.0, size=(dirs.shape[0], 1)) * dirs

    samples = np.vstack([interior, shell])
    return samples[:n_samples]


def verify(ing, sd, dictionary, Q, R, U, n_samples=10000, seed=0):
    """Sampled verification of the terminal conditions against the true plant.

    For each sample x with V_f(x) <= c, computes u = mu(x) and the true
    successor x+ = flow(sd, x, u), then checks invariance V_f(x+) <= c,
    the Lyapunov decrease V_f(x+) <= V_f(x) - l(x, u), and u in U.

    Returns
    -------
    VerificationReport
    """
    if n_samples < 1:
        raise InvalidParameter("n_samples must be at least 1")
    rng = np.random.default_rng(seed)
    Q = np.asarray(Q, dtype=float)
    R = np.asarray(R, dtype=float)
    xs = _region_samples(ing, dictionary, n_samples, rng)

    Zhat = lift_many(dictionary, xs)[:, 1:]
    vf = ing.cost_hat_many(Zhat)
    us = ing.feedback_hat_many(Zhat)
    x_next = np.stack([flow(sd, x, u) for x, u in zip(xs, us)])
    vf_next = ing.cost_hat_many(lift_many(dictionary, x_next)[:, 1:])
    stage = np.einsum("ij,jk,ik->i", xs, Q, xs) + np.einsum("ij,jk,ik->i", us, R, us)

    inv_margin = ing.c - vf_next
    dec_margin = vf - stage - vf_next
    in_U = (us >= U.lo).all(axis=1) & (us <= U.hi).all(axis=1)

    n_inv = int(np.sum(inv_margin < 0))
    n_dec = int(np.sum(dec_margin < 0))
    n_ctl = int(np.sum(~in_U))
    worst = float(min(np.min(inv_margin), np.min(dec_margin)))
    return VerificationReport(
        n_samples=xs.shape[0],
        n_decrease_violations=n_dec,
        n_invariance_violations=n_inv,
        n_control_violations=n_ctl,
        worst_margin=worst,
        verified=(n_dec == 0 and n_inv == 0 and n_ctl == 0 and xs.shape[0] > 0),
    )


def synthesize(model, bounds, dictionary, sd, Q, R, X, U,
               n_margin_samples=2000, n_verify=10000, seed=0,
               inflation=1.2, shrink_factor=0.8, min_region_scale=1e-8):
    """Construct verified terminal ingredients from the fitted surrogate.

    Pipeline: linearize the lifted bilinear surrogate at the origin, solve the
    discrete-time Riccati equation for a lifted gain and cost matrix, then
    scale the candidate ellipsoid down geometrically (factor `shrink_factor`,
    which shrinks the recorded level c through the margin coupling) until the
    sampled verification against the true plant passes. Decrease margins
    eps_x, eps_u are estimated on each candidate region and tie the level to
    the scaling exactly: eps_scale = min(eps_x/||Q||, eps_u/||R||),
    P = eps_scale * P_mu, c = 1/eps_scale.

    Raises
    ------
    SynthesisFailed
        If the Riccati equation for the lifted pair cannot be solved.
    TerminalRegionEmpty
        If the region scale shrinks below `min_region_scale` unverified.
    """
    Q = _check_spd("Q", Q)
    R = _check_spd("R", R)
    M, m, n = model.M, model.m, dictionary.n

    B_lin = np.stack(model.b, axis=1)
    Q_lift = np.zeros((M, M))
    Q_lift[:n, :n] = Q
    try:
        P_ric = scipy.linalg.solve_discrete_are(
            model.A, B_lin, Q_lift + 1e-9 * np.eye(M), R
        )
    except Exception as exc:
        raise SynthesisFailed(f"lifted Riccati solve failed: {exc}") from exc
    K_lin = np.linalg.solve(R + B_lin.T @ P_ric @ B_lin, B_lin.T @ P_ric @ model.A)

    P_mu_base = inflation * 0.5 * (P_ric + P_ric.T)
    norm_Q = np.linalg.norm(Q, 2)
    norm_R = np.linalg.norm(R, 2)
    lam = norm_R / norm_Q

    rng = np.random.default_rng(seed)
    rho = 1.0
    last_failure = "no candidate attempted"
    while rho >= min_region_scale:
        P_mu = rho * P_mu_base
        # Unit-level candidate in the P_mu metric; the gain is scale-invariant.
        candidate = TerminalIngredients(
            P_mu=P_mu,
            L=-K_lin @ P_mu,
            L_w=np.zeros((m, M * m)),
            Lambda=np.eye(m),
            eps_scale=1.0,
            eps_x=1.0,
            eps_u=1.0,
            dict_name=dictionary.name,
        )
        xs = _region_samples(candidate, dictionary, n_margin_samples, rng)
        margins_ok, eps_x, eps_u = _estimate_margins(
            candidate, dictionary, sd, xs, lam, U, X
        )
        if margins_ok:
            eps_scale = min(eps_x / norm_Q, eps_u / norm_R)
            ing = TerminalIngredients(
                P_mu=P_mu,
                L=-K_lin @ P_mu,
                L_w=np.zeros((m, M * m)),
                Lambda=np.eye(m),
                eps_scale=eps_scale,
                eps_x=eps_x,
                eps_u=eps_u,
                dict_name=dictionary.name,
            )
            report = verify(
                ing, sd, dictionary, Q, R, U,
                n_samples=n_verify, seed=int(rng.integers(2**31)),
            )
            if report.verified:
                ing.report = report
                return ing
            last_failure = (
                f"verification failed at region scale {rho:.3e}: "
                f"{report.n_decrease_violations} decrease, "
                f"{report.n_invariance_violations} invariance, "
                f"{report.n_control_violations} input violations"
            )
        else:
            last_failure = f"no positive decrease margin at region scale {rho:.3e}"
        rho *= shrink_factor
    raise TerminalRegionEmpty(last_failure)


def _estimate_margins(candidate, dictionary, sd, xs, lam, U, X):
    """Largest (eps_x, eps_u = lam * eps_x) dominated by the sampled decrease.

    The split along the fixed ratio lam = ||R||/||Q|| balances the two scaled
    margins, maximizing the resulting eps_scale. Returns (ok, eps_x, eps_u);
    ok is False when a sample leaves the constraints or shows no decrease.
    """
    floor = 1e-10
    Zhat = lift_many(dictionary, xs)[:, 1:]
    us = candidate.feedback_hat_many(Zhat)
    in_U = (us >= U.lo).all(axis=1) & (us <= U.hi).all(axis=1)
    in_X = (xs >= X.lo).all(axis=1) & (xs <= X.hi).all(axis=1)
    if not np.all(in_U & in_X):
        return False, floor, floor
    x_next = np.stack([flow(sd, x, u) for x, u in zip(xs, us)])
    slack = candidate.cost_hat_many(Zhat) - candidate.cost_hat_many(
        lift_many(dictionary, x_next)[:, 1:]
    )
    denom = np.einsum("ij,ij->i", xs, xs) + lam * np.einsum("ij,ij->i", us, us)
    keep = denom > 1e-16
    if np.any(slack[keep] <= 0) or not np.any(keep):
        return False, floor, floor
    eps_x = max(float(np.min(slack[keep] / denom[keep])), floor)
    return True, eps_x, lam * eps_x


def enclosing_radius(ing, dictionary, n_dirs=256, seed=0):
    """Largest Euclidean state norm on the terminal region, by ray search."""
    rng = np.random.default_rng(seed)
    n = dictionary.n
    r_cap = _enclosing_state_radius(ing)
    axes = np.vstack([np.eye(n), -np.eye(n)])
    raw = rng.normal(size=(n_dirs, n))
    norms = np.linalg.norm(raw, axis=1)
    raw = raw[norms > 1e-12] / norms[norms > 1e-12, None]
    dirs = np.vstack([axes, raw])
    radii = _ray_level_crossings(ing, dictionary, dirs, 2 * r_cap)
    return float(np.max(radii))
