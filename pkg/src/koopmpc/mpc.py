"""Receding-horizon optimal control over the bilinear surrogate.

The finite-horizon problem minimizes the quadratic stage cost plus the
terminal cost over input sequences in the input box, subject to (optionally
tightened) state-box constraints along the prediction and a terminal-region
constraint. Predictions run through the lifted surrogate chain; the terminal
cost and constraint re-lift the projected terminal state, matching the
membership test used everywhere else.

The solver is a projected-gradient method with quasi-Newton polish (L-BFGS-B
on the input box) wrapped in an augmented-Lagrangian loop for the state and
terminal constraints, with analytic gradients through the bilinear rollout.
A shifted-candidate guard ensures a returned solution is never worse than
its warm start.
"""

from dataclasses import dataclass, field
from typing import Optional

import numpy as np
from scipy.optimize import minimize

from .boxes import Box
from .dictionary import jacobian_hat, lift
from .errors import (
    FeasibilityLost,
    InfeasibleTightening,
    InvalidParameter,
    SolverDiverged,
)
from .safedmd import K_of_u, cbar
from .terminal import in_terminal_region, terminal_controller


@dataclass
class OCPSpec:
    """Problem data for the finite-horizon optimal control problem.

    Attributes
    ----------
    N : int
        Horizon length in steps.
    Q, R : np.ndarray
        SPD stage-cost weights on state and input.
    X, U : Box
        State and input constraint boxes; X must contain 0 in its interior.
    bounds : ErrorBounds or None
        Fitted error constants; required when tightening is enabled.
    ingredients : TerminalIngredients or None
        Terminal cost/region; required unless the terminal constraint and
        cost are disabled.
    L_Phi : float or None
        Lift Lipschitz constant, used by the terminal-level tightening.
    tightening_enabled : bool
        Shrink constraint sets by the accumulated error margin. Off by
        default: with an operator-norm proxy above one the margin grows
        geometrically in the step index and long paper-scale horizons become
        infeasible by construction.
    """

    N: int
    Q: np.ndarray
    R: np.ndarray
    X: Box
    U: Box
    bounds: Optional[object] = None
    ingredients: Optional[object] = None
    L_Phi: Optional[float] = None
    tightening_enabled: bool = False
    state_constraints_enabled: bool = True
    terminal_constraint_enabled: bool = True
    terminal_cost_enabled: bool = True
    max_iters: int = 200
    pg_tol: float = 1e-8
    al_outer_iters: int = 8
    feas_tol: float = 1e-6
    multistart_seed: int = 0

    def __post_init__(self):
        if self.N < 1:
            raise InvalidParameter("horizon must be at least 1")
        self.Q = np.asarray(self.Q, dtype=float)
        self.R = np.asarray(self.R, dtype=float)
        for name, W in (("Q", self.Q), ("R", self.R)):
            if np.min(np.linalg.eigvalsh(0.5 * (W + W.T))) <= 0:
                raise InvalidParameter(f"{name} must be SPD")
        if not (np.all(self.X.lo < 0) and np.all(self.X.hi > 0)):
            raise InvalidParameter("state box must contain 0 in its interior")
        if self.tightening_enabled and self.bounds is None:
            raise InvalidParameter("tightening requires fitted error bounds")
        if (self.terminal_constraint_enabled or self.terminal_cost_enabled) \
                and self.ingredients is None:
            raise InvalidParameter("terminal cost/constraint require ingredients")


@dataclass
class OCPSolution:
    """Result of one finite-horizon solve."""

    u_star: np.ndarray
    cost: float
    predicted_states: np.ndarray
    feasible: bool
    tightening_margins: np.ndarray
    terminal_margin: float
    solver_iters: int
    n_evals: int


@dataclass
class ControllerMode:
    """Dual-mode state: receding-horizon until the terminal region is reached."""

    mode: str = "mpc"
    switch_time: Optional[int] = None


def stage_cost(Q, R, x, u):
    """Quadratic stage cost x^T Q x + u^T R u."""
    x = np.atleast_1d(np.asarray(x, dtype=float))
    u = np.atleast_1d(np.asarray(u, dtype=float))
    return float(x @ np.asarray(Q, dtype=float) @ x + u @ np.asarray(R, dtype=float) @ u)


def tightened_state_box(spec, kappa):
    """State box at prediction step kappa, shrunk by the accumulated error margin.

    Raises
    ------
    InfeasibleTightening
        If the margin exceeds a box half-width.
    """
    if not 1 <= kappa <= spec.N:
        raise InvalidParameter("kappa must lie in [1, N]")
    if not spec.tightening_enabled or spec.bounds is None or spec.bounds.eps == 0:
        return spec.X
    margin = cbar(spec.bounds, kappa) * spec.bounds.eps
    if np.any(margin > spec.X.half_width):
        raise InfeasibleTightening(
            f"margin {margin:.3e} at step {kappa} exceeds the state box half-width; "
            "horizon too long for the achieved accuracy"
        )
    return spec.X.shrink(margin)


def tightened_terminal_level(spec):
    """Terminal level after tightening: the ellipsoid plus the accumulated
    error ball must stay inside the terminal region; clipped at zero."""
    c = spec.ingredients.c
    if not spec.tightening_enabled or spec.bounds is None or spec.bounds.eps == 0:
        return c
    if spec.L_Phi is None:
        raise InvalidParameter("terminal tightening requires L_Phi")
    lam_max = float(np.max(np.linalg.eigvalsh(spec.ingredients.P_inv)))
    margin = cbar(spec.bounds, spec.N) * spec.bounds.eps * np.sqrt(lam_max) * spec.L_Phi
    return float(max(np.sqrt(c) - margin, 0.0)) ** 2


class _BilinearRollout:
    """Lifted rollout and adjoint products for the bilinear surrogate."""

    def __init__(self, model):
        self.K0 = model.K0
        self.Kd = model.K_diff
        self.m = model.m

    def K(self, u):
        K = self.K0.copy()
        for i in range(self.m):
            K += u[i] * self.Kd[i]
        return K

    def step(self, z, u):
        return self.K(u) @ z

    def adjoint_state(self, z, u, lam_next):
        return self.K(u).T @ lam_next

    def adjoint_input(self, z, u, lam_next):
        return np.array([lam_next @ (Kd_i @ z) for Kd_i in self.Kd])


class _LinearRollout:
    """Lifted rollout and adjoint products for a linear surrogate."""

    def __init__(self, lin):
        self.A = lin.A_L
        self.B = lin.B_L
        self.m = self.B.shape[1]

    def step(self, z, u):
        return self.A @ z + self.B @ u

    def adjoint_state(self, z, u, lam_next):
        return self.A.T @ lam_next

    def adjoint_input(self, z, u, lam_next):
        return self.B.T @ lam_next


class _OCP:
    """Assembled objective/gradient with augmented-Lagrangian constraint terms."""

    def __init__(self, spec, rollout, dictionary, x_hat):
        self.spec = spec
        self.rollout = rollout
        self.dictionary = dictionary
        self.n = dictionary.n
        self.Mp1 = dictionary.M + 1
        self.z0 = lift(dictionary, x_hat).z
        self.n_evals = 0

        N = spec.N
        self.boxes = None
        if spec.state_constraints_enabled:
            self.boxes = [tightened_state_box(spec, k) for k in range(1, N + 1)]
        self.c_tight = (
            tightened_terminal_level(spec) if spec.terminal_constraint_enabled else None
        )
        # Multipliers: per step, per coordinate, upper/lower; one terminal.
        self.mu_hi = np.zeros((N, self.n))
        self.mu_lo = np.zeros((N, self.n))
        self.mu_term = 0.0
        self.rho = 10.0

    # -- forward rollout -----------------------------------------------------

    def propagate(self, u):
        zs = np.empty((self.spec.N + 1, self.Mp1))
        zs[0] = self.z0
        for k in range(self.spec.N):
            zs[k + 1] = self.rollout.step(zs[k], u[k])
        return zs

    def states(self, zs):
        return zs[:, 1 : self.n + 1]

    def terminal_value(self, x_N):
        """Terminal cost with its state gradient, through the re-lift."""
        ing = self.spec.ingredients
        zhat = lift(self.dictionary, x_N).hat
        Pinv_z = ing.P_inv @ zhat
        V = float(zhat @ Pinv_z)
        grad_x = 2.0 * jacobian_hat(self.dictionary, x_N).T @ Pinv_z
        return V, grad_x

    # -- objective -----------------------------------------------------------

    def objective(self, u_flat, with_penalty=True):
        spec = self.spec
        N, n, m = spec.N, self.n, self.rollout.m
        u = u_flat.reshape(N, m)
        self.n_evals += 1

        zs = self.propagate(u)
        xs = self.states(zs)
        J = 0.0
        grad_z = np.zeros((N + 1, self.Mp1))
        grad_u = np.zeros((N, m))

        for k in range(N):
            Qx = spec.Q @ xs[k]
            Ru = spec.R @ u[k]
            J += float(xs[k] @ Qx + u[k] @ Ru)
            if k > 0:
                grad_z[k, 1 : n + 1] += 2.0 * Qx
            grad_u[k] += 2.0 * Ru

        if spec.terminal_cost_enabled or self.c_tight is not None:
            V_T, gx = self.terminal_value(xs[N])
        if spec.terminal_cost_enabled:
            J += V_T
            grad_z[N, 1 : n + 1] += gx

        if with_penalty:
            if self.boxes is not None:
                for k in range(1, N + 1):
                    box = self.boxes[k - 1]
                    g_hi = xs[k] - box.hi
                    g_lo = box.lo - xs[k]
                    t_hi = np.maximum(0.0, self.mu_hi[k - 1] + self.rho * g_hi)
                    t_lo = np.maximum(0.0, self.mu_lo[k - 1] + self.rho * g_lo)
                    J += float(
                        np.sum(t_hi**2 - self.mu_hi[k - 1] ** 2)
                        + np.sum(t_lo**2 - self.mu_lo[k - 1] ** 2)
                    ) / (2.0 * self.rho)
                    grad_z[k, 1 : n + 1] += t_hi - t_lo
            if self.c_tight is not None:
                g_T = V_T - self.c_tight
                t_T = max(0.0, self.mu_term + self.rho * g_T)
                J += (t_T**2 - self.mu_term**2) / (2.0 * self.rho)
                grad_z[N, 1 : n + 1] += t_T * gx

        if not np.isfinite(J):
            raise SolverDiverged("non-finite objective in trajectory optimization")

        lam = grad_z[N]
        for k in range(N - 1, -1, -1):
            grad_u[k] += self.rollout.adjoint_input(zs[k], u[k], lam)
            lam = self.rollout.adjoint_state(zs[k], u[k], lam) + grad_z[k]
        return J, grad_u.ravel()

    # -- feasibility ---------------------------------------------------------

    def violations(self, u_flat):
        """Largest scaled constraint violation of the tightened sets."""
        u = u_flat.reshape(self.spec.N, self.rollout.m)
        zs = self.propagate(u)
        xs = self.states(zs)
        worst = 0.0
        if self.boxes is not None:
            for k in range(1, self.spec.N + 1):
                box = self.boxes[k - 1]
                scale = 1.0 + np.max(box.half_width)
                v = max(np.max(xs[k] - box.hi), np.max(box.lo - xs[k]), 0.0)
                worst = max(worst, v / scale)
        if self.c_tight is not None:
            V_T, _ = self.terminal_value(xs[self.spec.N])
            worst = max(worst, max(V_T - self.c_tight, 0.0) / (1.0 + self.c_tight))
        return worst

    def update_multipliers(self, u_flat):
        u = u_flat.reshape(self.spec.N, self.rollout.m)
        zs = self.propagate(u)
        xs = self.states(zs)
        if self.boxes is not None:
            for k in range(1, self.spec.N + 1):
                box = self.boxes[k - 1]
                self.mu_hi[k - 1] = np.maximum(
                    0.0, self.mu_hi[k - 1] + self.rho * (xs[k] - box.hi)
                )
                self.mu_lo[k - 1] = np.maximum(
                    0.0, self.mu_lo[k - 1] + self.rho * (box.lo - xs[k])
                )
        if self.c_tight is not None:
            V_T, _ = self.terminal_value(xs[self.spec.N])
            self.mu_term = max(0.0, self.mu_term + self.rho * (V_T - self.c_tight))

    def margins(self, u_flat):
        """Per-step slack to the tightened state boxes and the terminal level."""
        u = u_flat.reshape(self.spec.N, self.rollout.m)
        zs = self.propagate(u)
        xs = self.states(zs)
        slacks = np.full(self.spec.N, np.inf)
        if self.boxes is not None:
            for k in range(1, self.spec.N + 1):
                box = self.boxes[k - 1]
                slacks[k - 1] = float(
                    min(np.min(box.hi - xs[k]), np.min(xs[k] - box.lo))
                )
        term = np.inf
        if self.c_tight is not None:
            V_T, _ = self.terminal_value(xs[self.spec.N])
            term = float(self.c_tight - V_T)
        return slacks, term


def _box_bounds(U, N):
    return [(lo, hi) for _ in range(N) for lo, hi in zip(U.lo, U.hi)]


def _solve_single(ocp, u0, spec):
    """One augmented-Lagrangian pass from a given initialization."""
    constrained = ocp.boxes is not None or ocp.c_tight is not None
    bounds = _box_bounds(spec.U, spec.N)
    options = {
        "maxiter": spec.max_iters,
        "maxfun": 4 * spec.max_iters,
        "gtol": spec.pg_tol,
        "ftol": 1e-14,
    }
    ocp.mu_hi[:] = 0.0
    ocp.mu_lo[:] = 0.0
    ocp.mu_term = 0.0
    ocp.rho = 10.0

    u = u0.ravel().copy()
    iters = 0
    best = None
    outers = spec.al_outer_iters if constrained else 1
    prev_violation = np.inf
    for _ in range(outers):
        res = minimize(
            ocp.objective, u, jac=True, method="L-BFGS-B", bounds=bounds,
            options=options,
        )
        u = res.x
        iters += int(res.nit)
        violation = ocp.violations(u)
        cost, _ = ocp.objective(u, with_penalty=False)
        if violation <= spec.feas_tol and (best is None or cost < best[1]):
            best = (u.copy(), cost)
        if not constrained or violation <= spec.feas_tol:
            break
        ocp.update_multipliers(u)
        if violation > 0.5 * prev_violation:
            ocp.rho = min(ocp.rho * 10.0, 1e10)
        prev_violation = violation

    if best is None:
        cost, _ = ocp.objective(u, with_penalty=False)
        return u, cost, False, iters
    return best[0], best[1], True, iters


def _terminal_rollout_warmstart(spec, rollout, dictionary, x_hat):
    """Initialization that plays the terminal controller along the surrogate."""
    ing = spec.ingredients
    N, m = spec.N, rollout.m
    u = np.zeros((N, m))
    if ing is None:
        return u
    z = lift(dictionary, x_hat).z
    for k in range(N):
        zhat_pred = lift(dictionary, z[1 : dictionary.n + 1]).hat
        u[k] = spec.U.clip(ing.feedback_hat(zhat_pred))
        z = rollout.step(z, u[k])
        if not np.all(np.isfinite(z)):
            u[k:] = 0.0
            break
    return u


def solve_ocp(spec, model, dictionary, x_hat, warm_start=None):
    """Solve the finite-horizon problem from one state.

    With a warm start, a single augmented-Lagrangian pass runs from it and a
    candidate guard returns the warm start itself if the solver failed to
    improve on it. Without one, a deterministic multi-start (zeros, a
    terminal-controller rollout, and three seeded random sequences) is tried
    and the best feasible result returned.

    Returns
    -------
    OCPSolution
        `feasible` is False when no iterate satisfied the tightened
        constraints within the iteration budget.
    """
    x_hat = np.asarray(x_hat, dtype=float)
    if not spec.X.contains(x_hat, tol=1e-12):
        raise InvalidParameter(f"state {x_hat} outside the state box")
    rollout = _BilinearRollout(model)
    return _solve_generic(spec, rollout, dictionary, x_hat, warm_start)


def _solve_generic(spec, rollout, dictionary, x_hat, warm_start):
    ocp = _OCP(spec, rollout, dictionary, x_hat)
    N, m = spec.N, rollout.m

    if warm_start is not None:
        starts = [np.asarray(warm_start, dtype=float).reshape(N, m)]
    else:
        rng = np.random.default_rng(spec.multistart_seed)
        starts = [np.zeros((N, m)),
                  _terminal_rollout_warmstart(spec, rollout, dictionary, x_hat)]
        for _ in range(3):
            starts.append(spec.U.sample(rng, size=N))

    best = None
    total_iters = 0
    for u0 in starts:
        u0 = np.clip(u0, spec.U.lo, spec.U.hi)
        u, cost, feasible, iters = _solve_single(ocp, u0, spec)
        total_iters += iters
        key = (not feasible, cost)
        if best is None or key < best[0]:
            best = (key, u, cost, feasible)
        if feasible and warm_start is not None:
            break

    _, u, cost, feasible = best

    # Candidate guard: never return worse than a feasible initialization.
    u_init = np.clip(starts[0], spec.U.lo, spec.U.hi).ravel()
    init_violation = ocp.violations(u_init)
    init_cost, _ = ocp.objective(u_init, with_penalty=False)
    if init_violation <= spec.feas_tol and (not feasible or init_cost < cost):
        u, cost, feasible = u_init.copy(), init_cost, True

    u = u.reshape(N, m)
    zs = ocp.propagate(u)
    slacks, term_margin = ocp.margins(u.ravel())
    return OCPSolution(
        u_star=u,
        cost=float(cost),
        predicted_states=ocp.states(zs).copy(),
        feasible=bool(feasible),
        tightening_margins=slacks,
        terminal_margin=float(term_margin),
        solver_iters=total_iters,
        n_evals=ocp.n_evals,
    )


def shift_and_prolong(spec, dictionary, prev_solution):
    """Warm start for the next step: drop the first input, append the terminal
    controller evaluated at the previous terminal prediction (clipped to U)."""
    ing = spec.ingredients
    u_prev = prev_solution.u_star
    x_N = prev_solution.predicted_states[-1]
    if ing is not None:
        try:
            u_tail = spec.U.clip(terminal_controller(ing, dictionary, x_N,
                                                     check_region=False))
        except Exception:
            u_tail = np.zeros(u_prev.shape[1])
    else:
        u_tail = np.zeros(u_prev.shape[1])
    return np.vstack([u_prev[1:], u_tail[None, :]])


def mpc_step(spec, model, dictionary, state, prev_solution=None):
    """One receding-horizon step: warm-started solve, first input applied.

    Raises
    ------
    FeasibilityLost
        If no feasible sequence was found at this state.
    """
    warm = None
    if prev_solution is not None:
        warm = shift_and_prolong(spec, dictionary, prev_solution)
    sol = solve_ocp(spec, model, dictionary, state, warm_start=warm)
    if not sol.feasible:
        raise FeasibilityLost(
            f"no feasible input sequence at state {np.asarray(state)}"
        )
    return sol.u_star[0].copy(), sol


def dual_mode_feedback(spec, model, dictionary, mode, state, prev_solution=None,
                       k=None):
    """Dual-mode feedback: receding horizon until the terminal region is
    reached, then the terminal controller (the switch is one-way).

    Returns
    -------
    (u, mode, solution)
        `solution` is None on terminal-controller steps; `mode.switch_time`
        records the step index `k` at which the switch happened.
    """
    ing = spec.ingredients
    if mode.mode == "terminal":
        return terminal_controller(ing, dictionary, state), mode, None
    if ing is not None and in_terminal_region(ing, dictionary, state):
        new_mode = ControllerMode(mode="terminal", switch_time=k)
        return terminal_controller(ing, dictionary, state), new_mode, None
    u, sol = mpc_step(spec, model, dictionary, state, prev_solution)
    return u, mode, sol
