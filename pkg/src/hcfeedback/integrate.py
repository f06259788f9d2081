"""Forward state, backward adjoint and cost quadrature on a uniform grid.

The ``*_batch`` functions integrate a stack of B independent problems at
once (arrays with a leading batch axis). Rows never interact, so a row's
result does not depend on what else is in the batch. Failed rows are filled
with NaN and reported through a boolean mask instead of raising.
"""

from dataclasses import dataclass

import numpy as np

from .errors import ContractError, DivergenceError, IntegrationError

SCHEMES = ("rk4", "cn")
NEWTON_TOL = 1e-10
NEWTON_MAXITER = 50


@dataclass(frozen=True)
class TimeGrid:
    """Uniform grid 0 = t_0 < ... < t_K = T with step dt."""

    T: float
    dt: float

    def __post_init__(self):
        if not (self.T > 0 and self.dt > 0):
            raise ContractError("T and dt must be positive")
        K = int(round(self.T / self.dt))
        if K < 1 or abs(K * self.dt - self.T) > 1e-12 * max(1.0, self.T):
            raise ContractError(f"T={self.T} is not an integer multiple of dt={self.dt}")

    @property
    def K(self):
        return int(round(self.T / self.dt))

    @property
    def times(self):
        return np.linspace(0.0, self.T, self.K + 1)

    @property
    def weights(self):
        """Trapezoidal weights (dt inside, dt/2 at both ends)."""
        w = np.full(self.K + 1, self.dt)
        w[0] = w[-1] = 0.5 * self.dt
        return w

    def inner(self, a, b):
        """Discrete L2(0,T) inner product over the time axis (-2)."""
        return np.einsum("k,...ki,...ki->...", self.weights, a, b)

    def norm(self, a):
        return np.sqrt(self.inner(a, a))


@dataclass(frozen=True)
class Trajectory:
    grid: TimeGrid
    values: np.ndarray  # (K+1, n)

    def __post_init__(self):
        if self.values.ndim != 2 or self.values.shape[0] != self.grid.K + 1:
            raise ContractError("trajectory needs K+1 rows")

    @property
    def initial(self):
        return self.values[0]

    @property
    def final(self):
        return self.values[-1]


@dataclass(frozen=True)
class ControlSignal:
    """Control values at grid nodes, piecewise linear in between."""

    grid: TimeGrid
    values: np.ndarray  # (K+1, m)

    def __post_init__(self):
        if self.values.ndim != 2 or self.values.shape[0] != self.grid.K + 1:
            raise ContractError("control signal needs K+1 rows")

    @classmethod
    def zeros(cls, grid, m):
        return cls(grid, np.zeros((grid.K + 1, m)))

    def __call__(self, t):
        return np.stack(
            [np.interp(t, self.grid.times, self.values[:, j]) for j in range(self.values.shape[1])],
            axis=-1,
        )


def _check_scheme(scheme):
    if scheme not in SCHEMES:
        raise ContractError(f"scheme must be one of {SCHEMES}, got {scheme!r}")


def newton_cn_step(residual_rhs, jacobian, y, Fy, dt, guess=None):
    """Solve z = y + dt/2 (Fy + F(z)) for a batch of rows by Newton's method.

    Parameters
    ----------
    residual_rhs : callable
        ``F(z, rows)`` evaluating the right-hand side on the given row subset.
    jacobian : callable
        ``J(z, rows)`` returning dF/dz with shape ``(len(rows), n, n)``.
    y, Fy : ndarray, shape (B, n)

    Returns
    -------
    z : ndarray, shape (B, n)
    ok : ndarray of bool, shape (B,)
    """
    B, n = y.shape
    z = y + dt * Fy if guess is None else guess.copy()
    active = np.arange(B)
    ok = np.zeros(B, dtype=bool)
    eye = np.eye(n)
    for _ in range(NEWTON_MAXITER):
        zr = z[active]
        R = zr - y[active] - 0.5 * dt * (Fy[active] + residual_rhs(zr, active))
        M = eye - 0.5 * dt * jacobian(zr, active)
        finite = np.isfinite(R).all(axis=1) & np.isfinite(M).all(axis=(1, 2))
        delta = np.full_like(R, np.nan)
        if finite.any():
            try:
                delta[finite] = np.linalg.solve(M[finite], R[finite][..., None])[..., 0]
            except np.linalg.LinAlgError:
                for i in np.flatnonzero(finite):
                    try:
                        delta[i] = np.linalg.solve(M[i], R[i])
                    except np.linalg.LinAlgError:
                        pass
        zr = zr - delta
        z[active] = zr
        step = np.max(np.abs(delta), axis=1)
        scale = np.maximum(1.0, np.max(np.abs(zr), axis=1))
        done = step <= NEWTON_TOL * scale
        ok[active[done]] = True
        bad = ~np.isfinite(step)
        active = active[~done & ~bad]
        if active.size == 0:
            break
    return z, ok


def forward_batch(problem, X0, U, grid, scheme="rk4"):
    """Integrate y' = f(y) + g(y)u for B initial states.

    Parameters
    ----------
    X0 : ndarray, shape (B, n)
    U : ndarray, shape (B, K+1, m)

    Returns
    -------
    Y : ndarray, shape (B, K+1, n)
        NaN rows for failed samples.
    fail_step : ndarray of int, shape (B,)
        First step index at which the sample failed, -1 if it did not.
    """
    _check_scheme(scheme)
    X0 = np.asarray(X0, dtype=float)
    B = X0.shape[0]
    K, dt = grid.K, grid.dt
    Y = np.empty((B, K + 1, problem.n))
    Y[:, 0] = X0
    fail_step = np.full(B, -1)
    rhs = problem.rhs
    with np.errstate(all="ignore"):
        if scheme == "rk4":
            for k in range(K):
                y = Y[:, k]
                uk, uk1 = U[:, k], U[:, k + 1]
                um = 0.5 * (uk + uk1)
                k1 = rhs(y, uk)
                k2 = rhs(y + 0.5 * dt * k1, um)
                k3 = rhs(y + 0.5 * dt * k2, um)
                k4 = rhs(y + dt * k3, uk1)
                Y[:, k + 1] = y + dt / 6.0 * (k1 + 2.0 * k2 + 2.0 * k3 + k4)
        else:
            Fy = rhs(Y[:, 0], U[:, 0])
            for k in range(K):
                uk1 = U[:, k + 1]
                alive = fail_step < 0
                z, ok = newton_cn_step(
                    lambda zr, rows: rhs(zr, uk1[alive][rows]),
                    lambda zr, rows: problem.state_jacobian(zr, uk1[alive][rows]),
                    Y[alive, k],
                    Fy[alive],
                    dt,
                )
                Y[alive, k + 1] = z
                idx = np.flatnonzero(alive)
                newly = idx[~ok]
                fail_step[newly] = k
                Y[newly, k + 1 :] = np.nan
                Fy = np.full_like(Fy, np.nan)
                Fy[alive] = rhs(Y[alive, k + 1], uk1[alive])
    bad = ~np.isfinite(Y).all(axis=2)
    for b in np.flatnonzero(bad.any(axis=1) & (fail_step < 0)):
        fail_step[b] = max(int(np.argmax(bad[b])) - 1, 0)
    Y[fail_step >= 0] = np.nan
    return Y, fail_step


def _hermite_midpoints(problem, Y, U, dt):
    F = problem.rhs(Y, U)
    return 0.5 * (Y[:, :-1] + Y[:, 1:]) + dt / 8.0 * (F[:, :-1] - F[:, 1:])


def adjoint_batch(problem, Y, U, grid, scheme="rk4"):
    """Integrate -p' = (d_y(f + g u))^T p + grad l(y), p(T) = 0, backwards.

    RK4 evaluates the state between nodes by cubic Hermite interpolation so
    the backward sweep keeps fourth order; CN is the trapezoidal rule in
    reverse time and is linear in p, so each step is a single solve.
    """
    _check_scheme(scheme)
    B = Y.shape[0]
    K, dt = grid.K, grid.dt
    n = problem.n
    P = np.empty_like(Y)
    P[:, K] = 0.0
    with np.errstate(all="ignore"):
        if scheme == "rk4":
            Ym = _hermite_midpoints(problem, Y, U, dt)
            Um = 0.5 * (U[:, :-1] + U[:, 1:])
            H = problem.adjoint_rhs
            for k in range(K - 1, -1, -1):
                p = P[:, k + 1]
                a1 = H(Y[:, k + 1], U[:, k + 1], p)
                a2 = H(Ym[:, k], Um[:, k], p + 0.5 * dt * a1)
                a3 = H(Ym[:, k], Um[:, k], p + 0.5 * dt * a2)
                a4 = H(Y[:, k], U[:, k], p + dt * a3)
                P[:, k] = p + dt / 6.0 * (a1 + 2.0 * a2 + 2.0 * a3 + a4)
        else:
            grad_l = problem.running_cost_grad(Y)
            eye = np.eye(n)
            for k in range(K - 1, -1, -1):
                p = P[:, k + 1]
                rhs = p + 0.5 * dt * (
                    problem.jac_transpose_apply(Y[:, k + 1], U[:, k + 1], p)
                    + grad_l[:, k + 1]
                    + grad_l[:, k]
                )
                Jk = problem.state_jacobian(Y[:, k], U[:, k])
                M = eye - 0.5 * dt * np.swapaxes(Jk, -1, -2)
                P[:, k] = np.linalg.solve(M, rhs[..., None])[..., 0]
    return P


def cost_batch(problem, Y, U, grid):
    """Trapezoidal approximation of int_0^T l(y) + beta |u|^2 dt per row."""
    with np.errstate(all="ignore"):
        integrand = problem.running_cost(Y) + problem.beta * np.sum(U * U, axis=-1)
        J = integrand @ grid.weights
    return np.where(np.isfinite(J), J, np.inf)


def _check_grid(grid, *signals):
    for s in signals:
        if s.grid != grid:
            raise ContractError("trajectory and control live on different grids")


def integrate_forward(problem, x0, u, scheme="rk4"):
    """Solve y' = f(y) + g(y)u(t), y(0) = x0 on ``u.grid``.

    Raises
    ------
    IntegrationError
        Newton failed in a Crank-Nicolson step (``.step`` carries the index).
    DivergenceError
        The state became non-finite.
    """
    x0 = np.asarray(x0, dtype=float)
    if x0.shape != (problem.n,) or not np.all(np.isfinite(x0)):
        raise ContractError(f"x0 must be a finite vector of length {problem.n}")
    if u.values.shape[1] != problem.m:
        raise ContractError("control dimension does not match the problem")
    Y, fail = forward_batch(problem, x0[None], u.values[None], u.grid, scheme)
    if fail[0] >= 0:
        _raise_failure(problem, x0, u, scheme, int(fail[0]))
    return Trajectory(u.grid, Y[0])


def _raise_failure(problem, x0, u, scheme, step):
    if scheme == "cn":
        # distinguish Newton failure from blow-up by redoing the step explicitly
        Y, _ = forward_batch(problem, x0[None], u.values[None], u.grid, "rk4")
        if np.isfinite(Y[0, : step + 2]).all():
            raise IntegrationError(f"Newton did not converge at step {step}", step=step)
    raise DivergenceError(f"state became non-finite at step {step}", step=step)


def integrate_adjoint(problem, y, u, scheme="rk4"):
    """Backward adjoint solve with terminal condition p(T) = 0."""
    _check_grid(y.grid, u)
    P = adjoint_batch(problem, y.values[None], u.values[None], y.grid, scheme)
    if not np.isfinite(P).all():
        bad = np.flatnonzero(~np.isfinite(P[0]).all(axis=1))
        raise DivergenceError(f"adjoint became non-finite at step {bad.max()}", step=int(bad.max()))
    return Trajectory(y.grid, P[0])


def quadrature_cost(problem, y, u):
    """Trapezoidal rule for the cost of a trajectory/control pair."""
    _check_grid(y.grid, u)
    return float(cost_batch(problem, y.values[None], u.values[None], y.grid)[0])
