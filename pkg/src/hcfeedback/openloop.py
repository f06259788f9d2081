"""Open-loop optimal control by the reduced-gradient Barzilai-Borwein method.

For a control u the reduced gradient is

    G(u)(t) = g(y(t))^T p(t) + 2 beta u(t),

with y the forward state and p the backward adjoint. The iteration starts
from u_{-1} = 0, u_0 = -G(0), alternates the two Barzilai-Borwein curvature
estimates and globalizes with a nonmonotone (max over a window) Armijo
backtracking search. At the optimum, V(x) = J(u*) and grad V(x) = p*(0).
"""

from collections import namedtuple
from dataclasses import asdict, dataclass

import numpy as np

from .errors import ConfigError, ContractError, DivergenceError
from .integrate import (
    ControlSignal,
    TimeGrid,
    Trajectory,
    adjoint_batch,
    cost_batch,
    forward_batch,
)


@dataclass(frozen=True)
class SolverConfig:
    tol: float = 1e-5
    max_iters: int = 2000
    memory: int = 10
    armijo_c: float = 1e-4
    eta_shrink: float = 0.5
    eta_min: float = 1e-12
    alpha_min: float = 1e-8
    alpha_max: float = 1e8

    def __post_init__(self):
        if not self.tol > 0:
            raise ConfigError("tol must be positive")
        if self.max_iters < 0 or self.memory < 1:
            raise ConfigError("max_iters >= 0 and memory >= 1 required")
        if not 0 < self.armijo_c < 1:
            raise ConfigError("armijo_c must lie in (0, 1)")
        if not 0 < self.eta_shrink < 1:
            raise ConfigError("eta_shrink must lie in (0, 1)")
        if not 0 < self.eta_min <= 1:
            raise ConfigError("eta_min must lie in (0, 1]")
        if not 0 < self.alpha_min < self.alpha_max:
            raise ConfigError("need 0 < alpha_min < alpha_max")

    def as_dict(self):
        return asdict(self)


@dataclass(frozen=True)
class OpenLoopSolution:
    u_star: ControlSignal
    y_star: Trajectory
    p_star: Trajectory
    cost: float
    iterations: int
    final_grad_norm: float
    converged: bool

    @property
    def value(self):
        return self.cost

    @property
    def value_gradient(self):
        return self.p_star.values[0].copy()


GradientResult = namedtuple("GradientResult", "grad cost y p")


def _gradient(problem, Y, P, U):
    return problem.control_transpose(Y, P) + 2.0 * problem.beta * U


def reduced_gradient(problem, x0, u, scheme="rk4"):
    """Gradient of the reduced cost J(u) at ``u``.

    Returns
    -------
    GradientResult
        ``grad`` as an array of shape (K+1, m) at the grid nodes, the
        trapezoidal cost, and the state and adjoint trajectories.
    """
    x0 = np.asarray(x0, dtype=float)
    if x0.shape != (problem.n,):
        raise ContractError(f"x0 must have shape ({problem.n},)")
    grid = u.grid
    Y, fail = forward_batch(problem, x0[None], u.values[None], grid, scheme)
    if fail[0] >= 0:
        raise DivergenceError(f"forward solve failed at step {fail[0]}", step=int(fail[0]))
    P = adjoint_batch(problem, Y, u.values[None], grid, scheme)
    G = _gradient(problem, Y, P, u.values[None])
    J = cost_batch(problem, Y, u.values[None], grid)
    return GradientResult(G[0], float(J[0]), Trajectory(grid, Y[0]), Trajectory(grid, P[0]))


def bb_stepsize(S, Y, odd, grid, alpha_min=1e-8, alpha_max=1e8):
    """Barzilai-Borwein curvature estimate.

    ``(S, Y)/(S, S)`` on odd iterations, ``(Y, Y)/(S, Y)`` on even ones, in
    the trapezoidal L2 product. A non-positive or non-finite curvature
    ``(S, Y)`` restarts with 1. Works row-wise for stacked inputs.
    """
    sy = grid.inner(S, Y)
    if odd:
        num, den = sy, grid.inner(S, S)
    else:
        num, den = grid.inner(Y, Y), sy
    with np.errstate(all="ignore"):
        alpha = num / den
    bad = ~(np.isfinite(alpha) & (den > 0) & (sy > 0))
    alpha = np.where(bad, 1.0, np.clip(alpha, alpha_min, alpha_max))
    return float(alpha) if np.ndim(alpha) == 0 else alpha


BatchSolution = namedtuple(
    "BatchSolution", "U Y P cost grad_norm iterations converged failed"
)


def solve_open_loop_batch(problem, X0, grid, config=None, scheme="rk4"):
    """Run the Barzilai-Borwein iteration for B initial states in lockstep.

    Each row follows exactly the iteration it would follow alone; rows that
    converge, stall or fail are frozen and no longer evaluated.

    Returns
    -------
    BatchSolution
        Arrays with leading axis B. ``failed`` marks rows whose dynamics
        could not be integrated at all.
    """
    config = config or SolverConfig()
    X0 = np.atleast_2d(np.asarray(X0, dtype=float))
    B = X0.shape[0]
    if X0.shape[1] != problem.n:
        raise ContractError(f"initial states must have {problem.n} columns")
    m, K = problem.m, grid.K
    tol = config.tol

    def evaluate(rows, U):
        Y, fail = forward_batch(problem, X0[rows], U, grid, scheme)
        J = cost_batch(problem, Y, U, grid)
        J[fail >= 0] = np.inf
        return Y, J

    def gradient(rows, U, Y):
        P = adjoint_batch(problem, Y, U, grid, scheme)
        return P, _gradient(problem, Y, P, U)

    rows = np.arange(B)
    U_prev = np.zeros((B, K + 1, m))
    Y, J = evaluate(rows, U_prev)
    failed = ~np.isfinite(J)
    P, G_prev = gradient(rows, U_prev, Y)
    gnorm = grid.norm(G_prev)

    # outputs; rows finishing at u = 0 are filled now
    U_out = U_prev.copy()
    Y_out, P_out = Y.copy(), P.copy()
    J_out, gn_out = J.copy(), gnorm.copy()
    iters = np.zeros(B, dtype=int)
    converged = np.zeros(B, dtype=bool)
    done = failed | (gnorm < tol)
    converged[~failed & (gnorm < tol)] = True

    act = np.flatnonzero(~done)
    if act.size == 0:
        return BatchSolution(U_out, Y_out, P_out, J_out, gn_out, iters, converged, failed)

    U_prev, G_prev = U_prev[act], G_prev[act]
    U = -G_prev
    Y, J = evaluate(act, U)
    P, G = gradient(act, U, Y)
    history = np.full((act.size, config.memory), -np.inf)
    history[:, 0] = J
    k = 0
    while act.size:
        gn = grid.norm(G)
        finite = np.isfinite(J) & np.isfinite(gn)
        stop = (gn < tol) | ~finite | (k >= config.max_iters)
        if stop.any():
            s = act[stop]
            U_out[s], Y_out[s], P_out[s] = U[stop], Y[stop], P[stop]
            J_out[s], gn_out[s], iters[s] = J[stop], gn[stop], k
            converged[s] = (gn[stop] < tol) & finite[stop]
            failed[s] = ~finite[stop]
            keep = ~stop
            act, U, U_prev, G, G_prev, Y, P, J, history, gn = (
                a[keep] for a in (act, U, U_prev, G, G_prev, Y, P, J, history, gn)
            )
            if not act.size:
                break

        alpha = bb_stepsize(
            U - U_prev, G - G_prev, k % 2 == 1, grid, config.alpha_min, config.alpha_max
        )
        alpha = np.atleast_1d(alpha)
        D = G / alpha[:, None, None]
        gd = grid.inner(G, D)
        ref = history.max(axis=1)

        # nonmonotone backtracking, each row with its own step
        eta = np.ones(act.size)
        U_new = np.empty_like(U)
        Y_new = np.empty_like(Y)
        J_new = np.full(act.size, np.inf)
        pending = np.arange(act.size)
        stalled = np.zeros(act.size, dtype=bool)
        while pending.size:
            trial = U[pending] - eta[pending, None, None] * D[pending]
            Yt, Jt = evaluate(act[pending], trial)
            ok = Jt <= ref[pending] - config.armijo_c * eta[pending] * gd[pending]
            acc = pending[ok]
            U_new[acc], Y_new[acc], J_new[acc] = trial[ok], Yt[ok], Jt[ok]
            pending = pending[~ok]
            eta[pending] *= config.eta_shrink
            give_up = eta[pending] < config.eta_min
            stalled[pending[give_up]] = True
            pending = pending[~give_up]

        if stalled.any():
            s = act[stalled]
            U_out[s], Y_out[s], P_out[s] = U[stalled], Y[stalled], P[stalled]
            J_out[s], gn_out[s], iters[s] = J[stalled], gn[stalled], k
            converged[s] = False
            keep = ~stalled
            act, U, G, Y, P, J, history, U_new, Y_new, J_new = (
                a[keep] for a in (act, U, G, Y, P, J, history, U_new, Y_new, J_new)
            )
            if not act.size:
                break

        P_new, G_new = gradient(act, U_new, Y_new)
        U_prev, G_prev = U, G
        U, G, Y, P, J = U_new, G_new, Y_new, P_new, J_new
        history = np.roll(history, 1, axis=1)
        history[:, 0] = J
        k += 1

    return BatchSolution(U_out, Y_out, P_out, J_out, gn_out, iters, converged, failed)


def solve_open_loop(problem, x0, grid=None, config=None, scheme=None):
    """Solve one open-loop problem from the initial state ``x0``.

    ``grid`` and ``scheme`` default to the problem's own settings. A run
    that hits ``max_iters`` or stalls in the line search is returned with
    ``converged=False``; integration blow-up raises.
    """
    grid = grid or TimeGrid(problem.T, problem.default_dt)
    scheme = scheme or problem.default_scheme
    x0 = np.asarray(x0, dtype=float)
    if x0.shape != (problem.n,) or not np.all(np.isfinite(x0)):
        raise ContractError(f"x0 must be a finite vector of length {problem.n}")
    sol = solve_open_loop_batch(problem, x0[None], grid, config, scheme)
    if sol.failed[0]:
        raise DivergenceError("open-loop iteration produced a non-finite state")
    return OpenLoopSolution(
        u_star=ControlSignal(grid, sol.U[0]),
        y_star=Trajectory(grid, sol.Y[0]),
        p_star=Trajectory(grid, sol.P[0]),
        cost=float(sol.cost[0]),
        iterations=int(sol.iterations[0]),
        final_grad_norm=float(sol.grad_norm[0]),
        converged=bool(sol.converged[0]),
    )
