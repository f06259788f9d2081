"""Value-function models, the feedback law and closed-loop simulation."""

import csv
import logging
from dataclasses import dataclass, field, replace

import numpy as np

from .basis import CLAMP_TOL, DomainMap, eval_basis_rows
from .errors import ContractError, MetricError
from .integrate import ControlSignal, TimeGrid, Trajectory, cost_batch, newton_cn_step

log = logging.getLogger(__name__)

DIVERGENCE_NORM = 1e6


@dataclass
class ValueModel:
    """V(x) = sum_i theta_i Phi_i(z(x)) on the box ``domain``.

    Only the nonzero coefficients are kept for evaluation.
    """

    index_set: object
    family: str
    theta: np.ndarray
    domain: DomainMap
    beta: float = None
    excursions: int = field(default=0, compare=False)

    def __post_init__(self):
        self.theta = np.asarray(self.theta, dtype=float)
        if self.theta.shape != (self.index_set.q,):
            raise ContractError("theta length must equal the index-set cardinality")
        if self.domain.n != self.index_set.n:
            raise ContractError("domain and basis dimensions differ")
        nz = np.flatnonzero(self.theta)
        if nz.size == 0:
            nz = np.array([0])
        I = self.index_set
        self._active = replace(
            I, indices=I.indices[nz], support_dims=I.support_dims[nz], support_degs=I.support_degs[nz]
        )
        self._coef = self.theta[nz]

    @classmethod
    def from_fit(cls, fit, beta=None):
        return cls(fit.index_set, fit.family, fit.theta.copy(), fit.domain, beta)

    @property
    def n(self):
        return self.index_set.n

    def _unit(self, X):
        Z = self.domain.to_unit(X)
        out = np.abs(Z) > 1.0 + CLAMP_TOL
        if out.any():
            if self.excursions == 0:
                log.warning("evaluating the value model outside its training box (extrapolation)")
            self.excursions += int(out.any(axis=-1).sum())
        return Z

    def _check(self, x):
        x = np.asarray(x, dtype=float)
        if x.shape[-1] != self.n:
            raise ContractError(f"state must have {self.n} components")
        return x

    def value(self, x):
        x = self._check(x)
        Z = self._unit(x.reshape(-1, self.n))
        Phi, _ = eval_basis_rows(self._active, self.family, Z, gradient=False)
        return (Phi @ self._coef).reshape(x.shape[:-1])

    def gradient(self, x):
        """Gradient in original coordinates (chain rule through the box map)."""
        x = self._check(x)
        Z = self._unit(x.reshape(-1, self.n))
        _, dPhi = eval_basis_rows(self._active, self.family, Z)
        g = (dPhi @ self._coef) * self.domain.jacobian_diag
        return g.reshape(x.shape)


def eval_value(model, x):
    return model.value(x)


def eval_value_gradient(model, x):
    return model.gradient(x)


def eval_feedback(model, problem, x):
    """u(x) = -1/(2 beta) g(x)^T grad V(x)."""
    x = np.asarray(x, dtype=float)
    return -problem.control_transpose(x, model.gradient(x)) / (2.0 * problem.beta)


def zero_controller(problem):
    def control(y):
        return np.zeros(np.shape(y)[:-1] + (problem.m,))

    return control


def model_controller(model, problem):
    def control(y):
        return eval_feedback(model, problem, y)

    return control


@dataclass
class ClosedLoopResult:
    """Closed-loop trajectory with per-node diagnostics.

    After divergence the remaining nodes hold NaN, ``diverged`` is set and
    ``truncation_time`` is the last finite time.
    """

    grid: TimeGrid
    states: np.ndarray  # (K+1, n)
    controls: np.ndarray  # (K+1, m)
    cost: float
    diverged: bool = False
    truncation_time: float = None
    diagnostics: dict = field(default_factory=dict)

    @property
    def times(self):
        return self.grid.times

    @property
    def trajectory(self):
        return Trajectory(self.grid, self.states)

    @property
    def control(self):
        return ControlSignal(self.grid, self.controls)

    @property
    def final_state(self):
        return self.states[-1]

    def series(self):
        out = {
            "state_norm": np.linalg.norm(self.states, axis=1),
            "control_norm": np.linalg.norm(self.controls, axis=1),
        }
        out.update(self.diagnostics)
        return out

    def to_csv(self, path):
        write_series_csv(path, {"": self})

    @classmethod
    def from_open_loop(cls, problem, solution):
        """Wrap an open-loop optimal solution in the same reporting format."""
        grid = solution.y_star.grid
        Y, U = solution.y_star.values, solution.u_star.values
        return cls(grid, Y, U, float(solution.cost), diagnostics=problem.diagnostics(Y))


def write_series_csv(path, results):
    """CSV with ``t`` and the diagnostic series of each labelled result.

    All results must share one time grid. Column names are
    ``<label>_<series>`` (plain ``<series>`` for an empty label).
    """
    labels = list(results)
    grids = {results[k].grid for k in labels}
    if len(grids) != 1:
        raise ContractError("all series must share one time grid")
    t = results[labels[0]].times
    cols, data = ["t"], [t]
    for k in labels:
        for name, values in results[k].series().items():
            cols.append(f"{k}_{name}" if k else name)
            data.append(values)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(cols)
        for row in np.column_stack(data):
            w.writerow([f"{v:.17g}" for v in row])


def _fd_jacobian(F, z, h=1e-7):
    B, n = z.shape
    J = np.empty((B, n, n))
    for i in range(n):
        e = np.zeros(n)
        e[i] = h * np.maximum(1.0, np.abs(z[:, i])).mean()
        J[:, :, i] = (F(z + e) - F(z - e)) / (2.0 * e[i])
    return J


def simulate_closed_loop(problem, model=None, x0=None, grid=None, scheme="rk4", controller=None):
    """Integrate y' = f(y) + g(y) u(y) from ``x0``.

    The control is re-evaluated at every RK4 stage, or at every Newton
    iterate for ``scheme="cn"``. ``model=None`` and no ``controller`` gives
    the uncontrolled system. A state that turns non-finite or exceeds
    norm 1e6 stops the run and is reported, not raised.
    """
    x0 = np.asarray(x0, dtype=float)
    if x0.shape != (problem.n,) or not np.all(np.isfinite(x0)):
        raise ContractError(f"x0 must be a finite vector of length {problem.n}")
    if controller is None:
        controller = zero_controller(problem) if model is None else model_controller(model, problem)
    grid = grid or TimeGrid(problem.T, problem.default_dt)
    K, dt = grid.K, grid.dt
    Y = np.full((K + 1, problem.n), np.nan)
    U = np.full((K + 1, problem.m), np.nan)
    Y[0] = x0

    def F(y):
        return problem.rhs(y, controller(y))

    diverged = False
    last = K
    with np.errstate(all="ignore"):
        for k in range(K):
            y = Y[k][None]
            U[k] = controller(y)[0]
            if scheme == "rk4":
                k1 = problem.rhs(y, U[k][None])
                k2 = F(y + 0.5 * dt * k1)
                k3 = F(y + 0.5 * dt * k2)
                k4 = F(y + dt * k3)
                y1 = y + dt / 6.0 * (k1 + 2.0 * k2 + 2.0 * k3 + k4)
            elif scheme == "cn":
                y1, ok = newton_cn_step(
                    lambda z, rows: F(z), lambda z, rows: _fd_jacobian(F, z), y, F(y), dt
                )
                if not ok[0]:
                    y1 = np.full_like(y, np.nan)
            else:
                raise ContractError(f"unknown scheme {scheme!r}")
            if not np.all(np.isfinite(y1)) or np.linalg.norm(y1) > DIVERGENCE_NORM:
                diverged, last = True, k
                break
            Y[k + 1] = y1[0]
        if not diverged:
            U[K] = controller(Y[K][None])[0]
    if diverged:
        log.warning("closed loop diverged after t=%g", grid.times[last])
        cost = np.inf
    else:
        cost = float(cost_batch(problem, Y[None], U[None], grid)[0])
    return ClosedLoopResult(
        grid,
        Y,
        U,
        cost,
        diverged=diverged,
        truncation_time=float(grid.times[last]) if diverged else None,
        diagnostics=problem.diagnostics(Y),
    )


def validation_errors(model, dataset, indices):
    """Relative errors (Err_L2, Err_H1) over the given dataset rows.

    Err_L2 = sqrt(sum |Vm - V|^2 / sum |V|^2)
    Err_H1 = sqrt(sum (|Vm - V|^2 + |grad Vm - grad V|^2)
                  / sum (|V|^2 + |grad V|^2))

    with gradients in the original coordinates.
    """
    indices = np.asarray(indices, dtype=int)
    if indices.size == 0:
        raise MetricError("empty validation set")
    X, V, G = dataset.X[indices], dataset.V[indices], dataset.grad[indices]
    Vm = model.value(X)
    Gm = model.gradient(X)
    dv = np.sum((Vm - V) ** 2)
    dg = np.sum((Gm - G) ** 2)
    nv = np.sum(V**2)
    ng = np.sum(G**2)
    if nv == 0 or nv + ng == 0:
        raise MetricError("validation values are all zero; relative error undefined")
    return float(np.sqrt(dv / nv)), float(np.sqrt((dv + dg) / (nv + ng)))
