"""Control-affine optimal control problems.

Every problem describes

    minimize   int_0^T l(y) + beta |u|^2 dt
    subject to y' = f(y) + g(y) u,  y(0) = x

and exposes the drift, the control map, the adjoint right-hand side and the
running cost, all vectorized over leading batch axes: a state array has shape
``(..., n)``, a control array ``(..., m)``.
"""

import math

import numpy as np

from .errors import ConfigError, ContractError


def _frozen(a):
    a = np.array(a, dtype=float)
    a.setflags(write=False)
    return a


class ControlAffineProblem:
    """Base class for y' = f(y) + g(y) u with cost l(y) + beta |u|^2.

    Subclasses implement :meth:`drift`, :meth:`control_matrix`,
    :meth:`jac_transpose_apply`, :meth:`running_cost` and
    :meth:`running_cost_grad`. Instances are treated as immutable.

    Parameters
    ----------
    n, m : int
        State and control dimensions.
    beta : float
        Control penalty, > 0.
    T : float
        Horizon, > 0.
    lower, upper : array_like
        Sampling hyperrectangle, ``lower < upper`` componentwise.
    """

    name = "problem"
    default_scheme = "rk4"
    default_dt = 1e-2

    def __init__(self, n, m, beta, T, lower, upper):
        if n < 1 or m < 1:
            raise ContractError(f"need n >= 1 and m >= 1, got n={n}, m={m}")
        if not beta > 0:
            raise ContractError(f"beta must be positive, got {beta}")
        if not T > 0:
            raise ContractError(f"T must be positive, got {T}")
        lower = np.broadcast_to(np.asarray(lower, dtype=float), (n,))
        upper = np.broadcast_to(np.asarray(upper, dtype=float), (n,))
        if not np.all(lower < upper):
            raise ContractError("sampling domain needs lower < upper componentwise")
        self.n = int(n)
        self.m = int(m)
        self.beta = float(beta)
        self.T = float(T)
        self.lower = _frozen(lower)
        self.upper = _frozen(upper)

    def __repr__(self):
        return f"<{type(self).__name__} n={self.n} m={self.m} beta={self.beta} T={self.T}>"

    @property
    def sampling_domain(self):
        return self.lower, self.upper

    def params(self):
        """Parameters identifying this instance (written to file headers)."""
        return {"beta": self.beta, "T": self.T}

    # -- dynamics ---------------------------------------------------------
    def drift(self, y):
        raise NotImplementedError

    def control_matrix(self, y):
        """g(y) with shape ``(..., n, m)``."""
        raise NotImplementedError

    def control_apply(self, y, u):
        return np.einsum("...ij,...j->...i", self.control_matrix(y), u)

    def control_transpose(self, y, p):
        """g(y)^T p with shape ``(..., m)``."""
        return np.einsum("...ij,...i->...j", self.control_matrix(y), p)

    def rhs(self, y, u):
        return self.drift(y) + self.control_apply(y, u)

    def jac_transpose_apply(self, y, u, p):
        """(d/dy [f(y) + g(y) u])^T p."""
        raise NotImplementedError

    def state_jacobian(self, y, u, h=1e-7):
        """d/dy [f(y) + g(y) u] with shape ``(..., n, n)``.

        Central finite differences of :meth:`rhs`; subclasses with a cheap
        closed form override this.
        """
        y = np.asarray(y, dtype=float)
        jac = np.empty(y.shape + (self.n,))
        for j in range(self.n):
            step = h * max(1.0, float(np.max(np.abs(y[..., j]), initial=0.0)))
            e = np.zeros(self.n)
            e[j] = step
            jac[..., :, j] = (self.rhs(y + e, u) - self.rhs(y - e, u)) / (2 * step)
        return jac

    # -- cost -------------------------------------------------------------
    def running_cost(self, y):
        raise NotImplementedError

    def running_cost_grad(self, y):
        raise NotImplementedError

    def adjoint_rhs(self, y, u, p):
        """Right-hand side of -p' = (d_y(f + g u))^T p + grad l(y)."""
        return self.jac_transpose_apply(y, u, p) + self.running_cost_grad(y)

    def diagnostics(self, y):
        """Extra per-node series for closed-loop reports."""
        return {}


def _check_vector(name, a, size):
    a = np.asarray(a, dtype=float)
    if a.ndim != 1 or a.shape[0] != size:
        raise ContractError(f"{name} must have shape ({size},), got {a.shape}")
    return a


def eval_rhs(problem, y, u):
    """Evaluate f(y) + g(y) u for a single state and control."""
    y = _check_vector("y", y, problem.n)
    u = _check_vector("u", u, problem.m)
    return problem.rhs(y, u)


def eval_adjoint_rhs(problem, y, u, p):
    """Evaluate (d_y(f + g u))^T p + grad l(y) for a single triple."""
    y = _check_vector("y", y, problem.n)
    u = _check_vector("u", u, problem.m)
    p = _check_vector("p", p, problem.n)
    return problem.adjoint_rhs(y, u, p)


class LinearQuadraticProblem(ControlAffineProblem):
    """y' = A y + B u, l(y) = y^T Q y.

    Used for closed-form oracles (exponential decay, Riccati).
    """

    name = "linear"
    # coarser steps leave the adjoint gradient too inconsistent with the
    # discrete cost for the 1e-5 stopping test near the optimum
    default_dt = 1e-3

    def __init__(self, A, B, Q, beta=0.1, T=1.0, lower=-1.0, upper=1.0, name=None):
        A = np.atleast_2d(np.asarray(A, dtype=float))
        B = np.atleast_2d(np.asarray(B, dtype=float))
        Q = np.atleast_2d(np.asarray(Q, dtype=float))
        n, m = B.shape
        if A.shape != (n, n) or Q.shape != (n, n):
            raise ContractError("A and Q must be n x n with n = B.shape[0]")
        super().__init__(n, m, beta, T, lower, upper)
        self.A = _frozen(A)
        self.B = _frozen(B)
        self.Q = _frozen(Q)
        if name is not None:
            self.name = name

    def params(self):
        return {
            "beta": self.beta,
            "T": self.T,
            "A": self.A.tolist(),
            "B": self.B.tolist(),
            "Q": self.Q.tolist(),
        }

    def drift(self, y):
        return y @ self.A.T

    def control_matrix(self, y):
        y = np.asarray(y)
        return np.broadcast_to(self.B, y.shape[:-1] + self.B.shape)

    def control_apply(self, y, u):
        return u @ self.B.T

    def control_transpose(self, y, p):
        return p @ self.B

    def jac_transpose_apply(self, y, u, p):
        return p @ self.A

    def state_jacobian(self, y, u, h=None):
        y = np.asarray(y)
        return np.broadcast_to(self.A, y.shape[:-1] + self.A.shape).copy()

    def running_cost(self, y):
        return np.einsum("...i,ij,...j->...", y, self.Q, y)

    def running_cost_grad(self, y):
        return y @ (self.Q + self.Q.T)


def lqr2d(beta=0.1, T=2.0):
    """Two-dimensional LQ oracle with decoupled coordinates.

    A, B and Q are diagonal so the Riccati value x^T P(0) x has no x1*x2
    term and lies in the span of the order-2 hyperbolic cross.
    """
    return LinearQuadraticProblem(
        A=np.diag([0.5, -1.0]),
        B=np.eye(2),
        Q=np.diag([1.0, 2.0]),
        beta=beta,
        T=T,
        lower=-1.0,
        upper=1.0,
        name="lqr2d",
    )


class VanDerPolProblem(ControlAffineProblem):
    """Controlled Van der Pol oscillator.

    y1' = y2,  y2' = -y1 + y2 (1 - y1^2) + u,  l(y) = y1^2 + y2^2.
    """

    name = "vanderpol"
    default_scheme = "cn"
    default_dt = 1e-3

    _g = np.array([[0.0], [1.0]])

    def __init__(self, beta=0.1, T=3.0):
        super().__init__(2, 1, beta, T, -3.0, 3.0)

    def drift(self, y):
        y1, y2 = y[..., 0], y[..., 1]
        return np.stack([y2, -y1 + y2 * (1.0 - y1 * y1)], axis=-1)

    def control_matrix(self, y):
        y = np.asarray(y)
        return np.broadcast_to(self._g, y.shape[:-1] + (2, 1))

    def control_apply(self, y, u):
        out = np.zeros(np.broadcast_shapes(np.shape(y), np.shape(u)[:-1] + (2,)))
        out[..., 1] = u[..., 0]
        return out

    def control_transpose(self, y, p):
        return p[..., 1:2]

    def rhs(self, y, u):
        y1, y2 = y[..., 0], y[..., 1]
        return np.stack([y2, -y1 + y2 * (1.0 - y1 * y1) + u[..., 0]], axis=-1)

    def jac_transpose_apply(self, y, u, p):
        y1, y2 = y[..., 0], y[..., 1]
        p1, p2 = p[..., 0], p[..., 1]
        return np.stack([-(1.0 + 2.0 * y1 * y2) * p2, p1 + (1.0 - y1 * y1) * p2], axis=-1)

    def state_jacobian(self, y, u, h=None):
        y1, y2 = y[..., 0], y[..., 1]
        jac = np.zeros(np.shape(y) + (2,))
        jac[..., 0, 1] = 1.0
        jac[..., 1, 0] = -1.0 - 2.0 * y1 * y2
        jac[..., 1, 1] = 1.0 - y1 * y1
        return jac

    def running_cost(self, y):
        return np.sum(y * y, axis=-1)

    def running_cost_grad(self, y):
        return 2.0 * y


def chebyshev_differentiation(N):
    """Chebyshev-Gauss-Lobatto nodes x_j = cos(j pi / N) and first-derivative matrix."""
    j = np.arange(N + 1)
    x = np.cos(np.pi * j / N)
    c = np.where((j == 0) | (j == N), 2.0, 1.0) * (-1.0) ** j
    dx = x[:, None] - x[None, :]
    D = np.outer(c, 1.0 / c) / (dx + np.eye(N + 1))
    D -= np.diag(D.sum(axis=1))
    return x, D


def clenshaw_curtis_weights(N):
    """Quadrature weights on the N+1 Chebyshev-Gauss-Lobatto nodes of [-1, 1]."""
    theta = np.pi * np.arange(N + 1) / N
    w = np.zeros(N + 1)
    interior = np.arange(1, N)
    v = np.ones(N - 1)
    if N % 2 == 0:
        w[0] = w[N] = 1.0 / (N * N - 1)
        for k in range(1, N // 2):
            v -= 2.0 * np.cos(2 * k * theta[interior]) / (4 * k * k - 1)
        v -= np.cos(N * theta[interior]) / (N * N - 1)
    else:
        w[0] = w[N] = 1.0 / (N * N)
        for k in range(1, (N - 1) // 2 + 1):
            v -= 2.0 * np.cos(2 * k * theta[interior]) / (4 * k * k - 1)
    w[interior] = 2.0 * v / N
    return w


def build_cheb_collocation(n_colloc):
    """Neumann-condensed Chebyshev second-derivative operator.

    Builds the differentiation matrix on ``n_colloc + 2`` Gauss-Lobatto
    nodes, eliminates the two boundary values through ``y'(-1) = y'(1) = 0``
    and returns the operator acting on the interior unknowns.

    Returns
    -------
    nodes : ndarray, shape (n_colloc,)
        Interior nodes, strictly decreasing.
    D2 : ndarray, shape (n_colloc, n_colloc)
    """
    nodes, D2, _ = _neumann_collocation(n_colloc)
    return nodes, D2


def _neumann_collocation(n_colloc):
    if n_colloc < 4:
        raise ContractError(f"n_colloc must be >= 4, got {n_colloc}")
    N = n_colloc + 1
    x, D = chebyshev_differentiation(N)
    inner = np.arange(1, N)
    edge = np.array([0, N])
    # boundary values as a linear function of interior values
    M = -np.linalg.solve(D[np.ix_(edge, edge)], D[np.ix_(edge, inner)])
    E = np.zeros((N + 1, n_colloc))
    E[inner, np.arange(n_colloc)] = 1.0
    E[edge] = M
    D2 = (D @ D)[inner] @ E
    return x[inner], D2, E


class AllenCahnProblem(ControlAffineProblem):
    """Chebyshev collocation of the controlled Allen-Cahn equation on (-1, 1).

    y_t = nu y_xx + y (1 - y^2) + sum_i u_i 1_{omega_i},  Neumann boundary,
    with l(y) the Clenshaw-Curtis approximation of ||y||^2_{L^2(-1,1)}.
    """

    name = "allencahn"
    default_scheme = "cn"
    default_dt = 5e-3

    intervals = ((-0.7, -0.4), (-0.2, 0.2), (0.4, 0.7))

    def __init__(self, n_colloc=18, nu=0.1, beta=0.01, T=4.0):
        super().__init__(n_colloc, len(self.intervals), beta, T, -10.0, 10.0)
        nodes, D2, E = _neumann_collocation(n_colloc)
        self.n_colloc = int(n_colloc)
        self.nu = float(nu)
        self.nodes = _frozen(nodes)
        self.D2 = _frozen(D2)
        self.extension = _frozen(E)
        w = clenshaw_curtis_weights(n_colloc + 1)
        self.mass = _frozen(E.T @ (w[:, None] * E))
        masks = [(nodes >= a) & (nodes <= b) for a, b in self.intervals]
        self.masks = _frozen(np.stack(masks, axis=1).astype(float))

    def params(self):
        return {"beta": self.beta, "T": self.T, "n_colloc": self.n_colloc, "nu": self.nu}

    def drift(self, y):
        return self.nu * (y @ self.D2.T) + y * (1.0 - y * y)

    def control_matrix(self, y):
        y = np.asarray(y)
        return np.broadcast_to(self.masks, y.shape[:-1] + self.masks.shape)

    def control_apply(self, y, u):
        return u @ self.masks.T

    def control_transpose(self, y, p):
        return p @ self.masks

    def jac_transpose_apply(self, y, u, p):
        return self.nu * (p @ self.D2) + (1.0 - 3.0 * y * y) * p

    def state_jacobian(self, y, u, h=None):
        y = np.asarray(y)
        jac = np.broadcast_to(self.nu * self.D2, y.shape[:-1] + self.D2.shape).copy()
        idx = np.arange(self.n)
        jac[..., idx, idx] += 1.0 - 3.0 * y * y
        return jac

    def running_cost(self, y):
        return np.einsum("...i,ij,...j->...", y, self.mass, y)

    def running_cost_grad(self, y):
        return 2.0 * (y @ self.mass)


class CuckerSmaleProblem(ControlAffineProblem):
    """Cucker-Smale flocking with velocity controls.

    State layout is ``(y_1, ..., y_Na, v_1, ..., v_Na)`` with each block in
    R^d; controls act on velocities. The running cost is the consensus
    variance (1/Na) sum_i |v_i - vbar|^2.
    """

    name = "cuckersmale"
    default_scheme = "rk4"
    default_dt = 1e-2

    def __init__(self, N_a=20, d=2, beta=0.01, T=10.0):
        if N_a < 1 or d < 1:
            raise ContractError("need N_a >= 1 and d >= 1")
        super().__init__(2 * d * N_a, d * N_a, beta, T, -3.0, 3.0)
        self.N_a = int(N_a)
        self.d = int(d)

    def params(self):
        return {"beta": self.beta, "T": self.T, "N_a": self.N_a, "d": self.d}

    def _split(self, y):
        y = np.asarray(y, dtype=float)
        half = self.N_a * self.d
        pos = y[..., :half].reshape(y.shape[:-1] + (self.N_a, self.d))
        vel = y[..., half:].reshape(y.shape[:-1] + (self.N_a, self.d))
        return pos, vel

    def _kernel(self, pos):
        diff = pos[..., :, None, :] - pos[..., None, :, :]
        return diff, 1.0 / (1.0 + np.sum(diff * diff, axis=-1))

    def drift(self, y):
        pos, vel = self._split(y)
        _, K = self._kernel(pos)
        acc = (K @ vel - K.sum(axis=-1)[..., None] * vel) / self.N_a
        lead = np.shape(y)[:-1]
        return np.concatenate(
            [vel.reshape(lead + (self.m,)), acc.reshape(lead + (self.m,))], axis=-1
        )

    def control_matrix(self, y):
        y = np.asarray(y)
        g = np.zeros((self.n, self.m))
        g[self.m :, :] = np.eye(self.m)
        return np.broadcast_to(g, y.shape[:-1] + g.shape)

    def control_apply(self, y, u):
        u = np.asarray(u, dtype=float)
        out = np.zeros(np.broadcast_shapes(np.shape(y), u.shape[:-1] + (self.n,)))
        out[..., self.m :] = u
        return out

    def control_transpose(self, y, p):
        return np.asarray(p)[..., self.m :]

    def jac_transpose_apply(self, y, u, p):
        pos, vel = self._split(y)
        p_pos, p_vel = self._split(p)
        diff, K = self._kernel(pos)
        dvel = vel[..., None, :, :] - vel[..., :, None, :]  # v_j - v_i at [i, j]
        dp = p_vel[..., None, :, :] - p_vel[..., :, None, :]  # p_j - p_i at [i, j]
        coupling = np.sum(dp * dvel, axis=-1)
        q_pos = 2.0 * np.sum((K * K * coupling)[..., None] * diff, axis=-2) / self.N_a
        # K is symmetric, so sum_j K_ji (p_j - p_i) = K p - rowsum(K) p_i
        q_vel = p_pos + (K @ p_vel - K.sum(axis=-1)[..., None] * p_vel) / self.N_a
        shape = np.shape(p)
        return np.concatenate(
            [q_pos.reshape(shape[:-1] + (self.m,)), q_vel.reshape(shape[:-1] + (self.m,))],
            axis=-1,
        )

    def running_cost(self, y):
        _, vel = self._split(y)
        dev = vel - vel.mean(axis=-2, keepdims=True)
        return np.sum(dev * dev, axis=(-2, -1)) / self.N_a

    def running_cost_grad(self, y):
        _, vel = self._split(y)
        dev = vel - vel.mean(axis=-2, keepdims=True)
        grad = np.zeros(np.shape(y))
        grad[..., self.m :] = 2.0 * dev.reshape(np.shape(y)[:-1] + (self.m,)) / self.N_a
        return grad

    def mean_velocity(self, y):
        _, vel = self._split(y)
        return vel.mean(axis=-2)

    def diagnostics(self, y):
        return {"consensus_variance": self.running_cost(y)}


_REGISTRY = {
    "vanderpol": (VanDerPolProblem, ("beta", "T")),
    "allencahn": (AllenCahnProblem, ("beta", "T", "n_colloc", "nu")),
    "cuckersmale": (CuckerSmaleProblem, ("beta", "T", "N_a", "d")),
    "lqr2d": (lqr2d, ("beta", "T")),
}

_INT_KEYS = {"n_colloc", "N_a", "d"}


def problem_ids():
    return sorted(_REGISTRY)


def make_problem(problem_id, **overrides):
    """Build a registered problem by string id with parameter overrides."""
    try:
        factory, allowed = _REGISTRY[problem_id]
    except KeyError:
        raise ConfigError(
            f"unknown problem id {problem_id!r}; choose from {', '.join(problem_ids())}"
        ) from None
    kwargs = {}
    for key, value in overrides.items():
        if value is None:
            continue
        if key not in allowed:
            raise ConfigError(f"problem {problem_id!r} has no parameter {key!r}")
        if key in _INT_KEYS:
            if float(value) != math.floor(float(value)):
                raise ConfigError(f"{key} must be an integer, got {value!r}")
            value = int(value)
        else:
            value = float(value)
        kwargs[key] = value
    return factory(**kwargs)
