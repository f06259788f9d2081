"""Design systems and the four regression problems.

    P_l2   min |A th - V|^2                 plain values, CG
    AP_l2  min |Ab th - Vb|^2               values + gradients, CG
    P_l1   min |A th - V|^2 + lam |th|_1,w  plain values, ADMM
    AP_l1  min |Ab th - Vb|^2 + lam |th|_1,w

All rows are scaled by 1/sqrt(N_d). Gradient rows live in the scaled
coordinates z in [-1, 1]^n, so dataset gradients dV/dx are multiplied by
(b - a)/2 before they enter the right-hand side.
"""

import json
import logging
from dataclasses import dataclass, field

import numpy as np
from scipy.linalg import cho_factor, cho_solve
from scipy.sparse.linalg import LinearOperator, cg

from .basis import DomainMap, build_index_set, eval_basis_rows, weights
from .errors import ContractError, DataError, ResourceError

log = logging.getLogger(__name__)

VARIANTS = ("pl2", "apl2", "pl1", "apl1")
NONZERO_THRESHOLD = 1e-20
DENSE_CAP = 20_000


@dataclass
class DesignSystem:
    A: np.ndarray
    b: np.ndarray
    augmented: bool
    index_set: object
    family: str
    domain: DomainMap
    train: np.ndarray  # 0-based dataset rows

    @property
    def N_d(self):
        return self.train.size

    @property
    def row_scale(self):
        return 1.0 / np.sqrt(self.N_d)

    @property
    def shape(self):
        return self.A.shape


def assemble(dataset, train, index_set, family, augmented, chunk_size=512):
    """Build the plain (N_d x q) or augmented ((n+1) N_d x q) system.

    Rows are in sample order; the augmented system stacks the value block
    and then one derivative block per coordinate.
    """
    train = np.asarray(train, dtype=int)
    if train.size == 0:
        raise ContractError("empty training set")
    if index_set.n != dataset.n:
        raise ContractError(f"basis dimension {index_set.n} does not match dataset n={dataset.n}")
    if not np.all(dataset.converged[train]):
        bad = train[~dataset.converged[train]]
        raise DataError(f"training samples {(bad + 1).tolist()} did not converge")
    X, V, G = dataset.X[train], dataset.V[train], dataset.grad[train]
    cols = [V[:, None], X] + ([G] if augmented else [])
    finite = np.isfinite(np.hstack(cols)).all(axis=1)
    if not finite.all():
        raise DataError(f"non-finite data at sample {int(train[~finite][0]) + 1}")

    lower, upper = dataset.domain
    dm = DomainMap(lower, upper)
    Z = dm.to_unit(X)
    N_d, n, q = train.size, dataset.n, index_set.q
    blocks = n + 1 if augmented else 1
    A = np.empty((blocks * N_d, q))
    scale = 1.0 / np.sqrt(N_d)
    for s in range(0, N_d, chunk_size):
        sl = slice(s, min(s + chunk_size, N_d))
        Phi, dPhi = eval_basis_rows(index_set, family, Z[sl], gradient=augmented)
        A[sl] = Phi * scale
        if augmented:
            for m in range(n):
                A[(m + 1) * N_d + sl.start : (m + 1) * N_d + sl.stop] = dPhi[:, m, :] * scale
    b = [V]
    if augmented:
        Gz = G / dm.jacobian_diag  # dV/dz = dV/dx * (b - a)/2
        b += [Gz[:, m] for m in range(n)]
    b = np.concatenate(b) * scale
    return DesignSystem(A, b, augmented, index_set, family, dm, train)


@dataclass
class FitResult:
    """Fitted coefficients over the index-set ordering plus solver report."""

    theta: np.ndarray
    variant: str
    lam: float
    alpha: float
    index_set: object
    family: str
    domain: DomainMap
    iterations: int
    converged: bool
    residuals: dict = field(default_factory=dict)
    meta: dict = field(default_factory=dict)

    @property
    def nonzero_count(self):
        return int(np.count_nonzero(np.abs(self.theta) > NONZERO_THRESHOLD))

    @property
    def q(self):
        return self.theta.size

    def header(self):
        h = {
            "variant": self.variant,
            "lambda": self.lam,
            "alpha": "-inf" if self.alpha == -np.inf else self.alpha,
            "basis": {"family": self.family, **self.index_set.descriptor()},
            "lower": self.domain.lower.tolist(),
            "upper": self.domain.upper.tolist(),
            "iterations": self.iterations,
            "converged": self.converged,
            "nonzero_count": self.nonzero_count,
            "residuals": self.residuals,
        }
        h.update(self.meta)
        return h

    def save(self, path):
        with open(path, "w") as fh:
            fh.write(json.dumps(self.header(), sort_keys=True) + "\n")
            for k, (idx, c) in enumerate(zip(self.index_set.indices, self.theta)):
                fh.write(f"{k},{' '.join(str(int(v)) for v in idx)},{c:.17g}\n")

    @classmethod
    def load(cls, path):
        with open(path) as fh:
            header = json.loads(fh.readline())
            lines = [ln for ln in fh.read().splitlines() if ln]
        basis = header["basis"]
        index_set = build_index_set(basis["n"], basis["s"], basis["index"])
        if len(lines) != index_set.q:
            raise DataError(f"{path}: expected {index_set.q} coefficient rows, got {len(lines)}")
        theta = np.empty(index_set.q)
        for line in lines:
            k, idx, c = line.split(",")
            k = int(k)
            if tuple(int(v) for v in idx.split()) != tuple(index_set.indices[k]):
                raise DataError(f"{path}: multi-index at row {k} does not match the basis ordering")
            theta[k] = float(c)
        alpha = header["alpha"]
        alpha = -np.inf if alpha == "-inf" else float(alpha)
        keys = {"variant", "lambda", "alpha", "basis", "lower", "upper", "iterations",
                "converged", "nonzero_count", "residuals"}
        return cls(
            theta=theta,
            variant=header["variant"],
            lam=float(header["lambda"]),
            alpha=alpha,
            index_set=index_set,
            family=basis["family"],
            domain=DomainMap(header["lower"], header["upper"]),
            iterations=int(header["iterations"]),
            converged=bool(header["converged"]),
            residuals=header.get("residuals", {}),
            meta={k: v for k, v in header.items() if k not in keys},
        )


def _result(system, theta, variant, lam, alpha, iterations, converged, residuals):
    return FitResult(
        theta=theta,
        variant=variant,
        lam=float(lam),
        alpha=float(alpha),
        index_set=system.index_set,
        family=system.family,
        domain=system.domain,
        iterations=int(iterations),
        converged=bool(converged),
        residuals=residuals,
    )


def solve_ls_cg(system, tol=1e-8, max_iter=None):
    """Least squares by Jacobi-preconditioned CG on the normal equations.

    Starts from zero and stops once |A^T b - A^T A th| < tol, so for
    underdetermined systems the result is the CG iterate at that point
    (no explicit regularization).
    """
    A, b = system.A, system.b
    q = A.shape[1]
    max_iter = max_iter or max(1000, 10 * q)
    d = np.einsum("ij,ij->j", A, A)
    d = np.where(d > 0, d, 1.0)
    normal = LinearOperator((q, q), matvec=lambda x: A.T @ (A @ x), dtype=float)
    precond = LinearOperator((q, q), matvec=lambda x: x / d, dtype=float)
    rhs = A.T @ b
    count = [0]

    def tick(_):
        count[0] += 1

    theta, info = cg(normal, rhs, x0=np.zeros(q), rtol=0.0, atol=tol, maxiter=max_iter,
                     M=precond, callback=tick)
    if info != 0:
        log.warning("CG stopped after %d iterations without reaching tol=%g", count[0], tol)
    res = float(np.linalg.norm(rhs - A.T @ (A @ theta)))
    variant = "apl2" if system.augmented else "pl2"
    return _result(system, theta, variant, 0.0, -np.inf, count[0], info == 0,
                   {"normal_residual": res, "residual": float(np.linalg.norm(A @ theta - b))})


def prox_weighted_l1(v, threshold_scale, w):
    """Soft thresholding at level ``threshold_scale * w`` componentwise."""
    w = getattr(w, "values", w)
    level = threshold_scale * np.asarray(w, dtype=float)
    return np.sign(v) * np.maximum(np.abs(v) - level, 0.0)


def lasso_objective(A, b, theta, lam, w):
    w = getattr(w, "values", w)
    r = A @ theta - b
    return float(r @ r + lam * np.sum(np.asarray(w) * np.abs(theta)))


def solve_lasso_admm(system, lam, w, rho=1.0, tol=1e-5, max_iter=100_000):
    """Weighted LASSO min |A th - b|^2 + lam sum_k w_k |th_k| by ADMM.

    The matrix 2 A^T A + rho I is Cholesky-factored once. Iterates

        th <- (2 A^T A + rho I)^{-1} (2 A^T b + rho (z - h))
        z  <- soft_threshold(th + h, lam w / rho)
        h  <- h + th - z

    from th = z = h = 0, until the primal gap |th - z| and the dual
    residual |rho (z - z_prev)| are both below ``tol``. Returns z, which is
    exactly sparse.
    """
    if lam < 0 or rho <= 0:
        raise ContractError("need lam >= 0 and rho > 0")
    A, b = system.A, system.b
    q = A.shape[1]
    if q > DENSE_CAP:
        raise ResourceError(f"q={q} exceeds the dense factorization cap {DENSE_CAP}")
    wv = np.asarray(getattr(w, "values", w), dtype=float)
    if wv.shape != (q,):
        raise ContractError("weight vector length must equal q")
    factor = cho_factor(2.0 * (A.T @ A) + rho * np.eye(q))
    Atb2 = 2.0 * (A.T @ b)
    level = lam / rho
    z = np.zeros(q)
    h = np.zeros(q)
    converged = False
    primal = dual = np.inf
    k = 0
    while k < max_iter:
        theta = cho_solve(factor, Atb2 + rho * (z - h))
        z_new = prox_weighted_l1(theta + h, level, wv)
        h = h + theta - z_new
        primal = np.linalg.norm(theta - z_new)
        # h - h_prev equals th - z, so the dual test uses the z increment
        dual = np.linalg.norm(rho * (z_new - z))
        z = z_new
        k += 1
        if primal < tol and dual < tol:
            converged = True
            break
    if not converged:
        log.warning("ADMM hit max_iter=%d (primal %.3g, dual %.3g)", max_iter, primal, dual)
    variant = "apl1" if system.augmented else "pl1"
    alpha = getattr(w, "alpha", np.nan)
    return _result(system, z, variant, lam, alpha, k, converged,
                   {"primal": float(primal), "dual": float(dual),
                    "objective": lasso_objective(A, b, z, lam, wv)})


def fit(dataset, train, index_set, family, variant, lam=0.01, alpha=1.0, rho=1.0,
        tol=None, max_iter=None):
    """Assemble the system for ``variant`` and solve it.

    For the l1 variants ``alpha = -inf`` or ``lam = 0`` switches the penalty
    off and the least-squares solver is used instead.
    """
    if variant not in VARIANTS:
        raise ContractError(f"variant must be one of {VARIANTS}")
    augmented = variant.startswith("a")
    system = assemble(dataset, train, index_set, family, augmented)
    if variant.endswith("l2"):
        res = solve_ls_cg(system, tol=tol or 1e-8, max_iter=max_iter)
    else:
        w = weights(index_set, alpha)
        if w.bypass or lam == 0:
            res = solve_ls_cg(system, tol=1e-8, max_iter=max_iter)
            res.variant, res.lam = variant, 0.0
        else:
            res = solve_lasso_admm(system, lam, w, rho=rho, tol=tol or 1e-5,
                                   max_iter=max_iter or 100_000)
        res.alpha = w.alpha
    return res
