"""Multi-index sets, orthonormal polynomial bases and l1 weights.

Multivariate basis functions are tensor products

    Phi_i(z) = prod_j phi_{i_j}(z_j),   z in [-1, 1]^n,

of univariate orthonormal polynomials. Index sets are stored both densely,
as a (q, n) integer array, and as padded supports (the coordinates with
nonzero degree), which is what evaluation uses: a hyperbolic-cross index
has at most log2(s + 1) nonzero entries no matter how large n is.
"""

import math
from dataclasses import dataclass, field
from functools import lru_cache

import numpy as np

from .errors import ConfigError, ContractError, ResourceError

INDEX_KINDS = ("hc", "td", "tp")
FAMILIES = ("legendre", "chebyshev")
DEFAULT_CAP = 10**7
CLAMP_TOL = 1e-12

_KIND_ALIASES = {
    "hc": "hc",
    "hyperboliccross": "hc",
    "hyperbolic_cross": "hc",
    "td": "td",
    "totaldegree": "td",
    "total_degree": "td",
    "tp": "tp",
    "tensorproduct": "tp",
    "tensor_product": "tp",
}


def _canonical_kind(kind):
    try:
        return _KIND_ALIASES[str(kind).lower()]
    except KeyError:
        raise ConfigError(f"unknown index set kind {kind!r}; expected one of {INDEX_KINDS}") from None


def _check_family(family):
    if family not in FAMILIES:
        raise ConfigError(f"unknown basis family {family!r}; expected one of {FAMILIES}")


# ---------------------------------------------------------------- index sets


@lru_cache(maxsize=None)
def _hc_count(n, budget):
    # multi-indices in n coordinates with prod(i_j + 1) <= budget
    if n == 0:
        return 1
    return sum(_hc_count(n - 1, budget // (d + 1)) for d in range(budget))


def index_set_cardinality(n, s, kind="hc"):
    """Cardinality of an index set without building it."""
    kind = _canonical_kind(kind)
    if n < 1 or s < 0:
        raise ContractError("need n >= 1 and s >= 0")
    if kind == "tp":
        return (s + 1) ** n
    if kind == "td":
        return math.comb(n + s, s)
    return _hc_count(n, s + 1)


def hc_cardinality_bound(n, s):
    """Upper bound min{2 s^3 4^n, e^2 s^(2 + log2 n)} on the hyperbolic-cross size."""
    if n < 1 or s < 1:
        raise ContractError("need n >= 1 and s >= 1")
    a = 2.0 * s**3 * 4.0**n if n < 500 else math.inf
    b = math.e**2 * s ** (2.0 + math.log2(n))
    return min(a, b)


def _enumerate_supports(n, s, kind):
    """Depth-first enumeration of sparse multi-indices.

    Yields tuples of (coordinate, degree) pairs with increasing coordinate.
    Branches are pruned by the product (hc) or sum (td) budget, so the
    tensor grid is never visited.
    """
    if kind == "hc":
        admissible = lambda acc, d: acc * (d + 1) <= s + 1  # noqa: E731
        update = lambda acc, d: acc * (d + 1)  # noqa: E731
        start = 1
    else:
        admissible = lambda acc, d: acc + d <= s  # noqa: E731
        update = lambda acc, d: acc + d  # noqa: E731
        start = 0
    out = [()]
    stack = [((), -1, start)]
    while stack:
        support, last, acc = stack.pop()
        for j in range(last + 1, n):
            d = 1
            while d <= s and admissible(acc, d):
                child = support + ((j, d),)
                out.append(child)
                stack.append((child, j, update(acc, d)))
                d += 1
    return out


@dataclass(frozen=True)
class MultiIndexSet:
    """Ordered set of multi-indices.

    Ordering is by prod(i_j + 1), ties broken lexicographically, so the zero
    multi-index comes first.
    """

    n: int
    s: int
    kind: str
    indices: np.ndarray  # (q, n) int
    support_dims: np.ndarray = field(repr=False)  # (q, L) padded with 0
    support_degs: np.ndarray = field(repr=False)  # (q, L) padded with 0

    @property
    def q(self):
        return self.indices.shape[0]

    def __len__(self):
        return self.q

    @property
    def max_degree(self):
        return int(self.indices.max()) if self.q else 0

    def position(self, index):
        """Position of a multi-index in the ordering."""
        index = np.asarray(index)
        hit = np.flatnonzero((self.indices == index).all(axis=1))
        if hit.size == 0:
            raise KeyError(tuple(index.tolist()))
        return int(hit[0])

    def as_tuples(self):
        return [tuple(int(v) for v in row) for row in self.indices]

    def descriptor(self):
        return {"n": self.n, "s": self.s, "index": self.kind, "q": self.q}


def _from_supports(n, s, kind, supports):
    q = len(supports)
    L = max(1, max(len(sup) for sup in supports))
    dims = np.zeros((q, L), dtype=np.int64)
    degs = np.zeros((q, L), dtype=np.int64)
    dense = np.zeros((q, n), dtype=np.int64)
    for k, sup in enumerate(supports):
        for l, (j, d) in enumerate(sup):
            dims[k, l], degs[k, l] = j, d
            dense[k, j] = d
    prod = np.prod(dense + 1, axis=1)
    order = np.lexsort([dense[:, j] for j in range(n - 1, -1, -1)] + [prod])
    return MultiIndexSet(n, s, kind, dense[order], dims[order], degs[order])


def build_index_set(n, s, kind="hc", cap=DEFAULT_CAP):
    """Build the tensor-product, total-degree or hyperbolic-cross set.

    Parameters
    ----------
    n : int
        Dimension.
    s : int
        Order parameter: max degree (tp), total degree (td) or product
        budget prod(i_j + 1) <= s + 1 (hc).
    kind : {"hc", "td", "tp"}
    cap : int
        Largest admissible cardinality.

    Raises
    ------
    ResourceError
        If the set would have more than ``cap`` elements.
    """
    kind = _canonical_kind(kind)
    if n < 1 or s < 0:
        raise ContractError("need n >= 1 and s >= 0")
    q = index_set_cardinality(n, s, kind)
    if q > cap:
        raise ResourceError(f"{kind} index set with n={n}, s={s} has {q} elements (cap {cap})")
    if kind == "tp":
        import itertools

        supports = [
            tuple((j, d) for j, d in enumerate(t) if d)
            for t in itertools.product(range(s + 1), repeat=n)
        ]
    else:
        supports = _enumerate_supports(n, s, kind)
    return _from_supports(n, s, kind, supports)


# ---------------------------------------------------------------- univariate


def _clamp(z):
    z = np.asarray(z, dtype=float)
    over = (np.abs(z) > 1.0) & (np.abs(z) <= 1.0 + CLAMP_TOL)
    return np.where(over, np.sign(z), z)


def univariate_table(family, kmax, z):
    """Values and derivatives of phi_0..phi_kmax.

    Returns
    -------
    val, der : ndarray, shape z.shape + (kmax + 1,)

    Notes
    -----
    Legendre is orthonormal on (-1, 1) with respect to dx,
    phi_k = sqrt(k + 1/2) P_k. Chebyshev is orthonormal for the probability
    measure dx / (pi sqrt(1 - x^2)): phi_0 = 1, phi_k = sqrt(2) T_k.
    Both use three-term recurrences, also for the derivatives, so the
    endpoints need no special treatment. Arguments slightly outside
    [-1, 1] (1e-12) are clamped; larger ones are extrapolated.
    """
    _check_family(family)
    z = _clamp(z)
    P = np.empty(z.shape + (kmax + 1,))
    D = np.empty_like(P)
    P[..., 0], D[..., 0] = 1.0, 0.0
    if kmax >= 1:
        P[..., 1], D[..., 1] = z, 1.0
    if family == "legendre":
        for k in range(1, kmax):
            P[..., k + 1] = ((2 * k + 1) * z * P[..., k] - k * P[..., k - 1]) / (k + 1)
            D[..., k + 1] = D[..., k - 1] + (2 * k + 1) * P[..., k]
        c = np.sqrt(np.arange(kmax + 1) + 0.5)
    else:
        for k in range(1, kmax):
            P[..., k + 1] = 2.0 * z * P[..., k] - P[..., k - 1]
            D[..., k + 1] = 2.0 * P[..., k] + 2.0 * z * D[..., k] - D[..., k - 1]
        c = np.full(kmax + 1, math.sqrt(2.0))
        c[0] = 1.0
    return P * c, D * c


def eval_univariate(family, k, z):
    """Return ``(phi_k(z), phi_k'(z))``."""
    val, der = univariate_table(family, k, z)
    return val[..., k], der[..., k]


def phi0(family):
    return 1.0 / math.sqrt(2.0) if family == "legendre" else 1.0


# ---------------------------------------------------------------- tensor basis


def eval_basis_rows(index_set, family, Z, gradient=True):
    """Evaluate all basis functions (and their z-gradients) at many points.

    Parameters
    ----------
    Z : ndarray, shape (N, n)
        Points in scaled coordinates.

    Returns
    -------
    Phi : ndarray, shape (N, q)
    dPhi : ndarray, shape (N, n, q) or None
        ``dPhi[j, m, k]`` is dPhi_k / dz_m at ``Z[j]``.
    """
    _check_family(family)
    Z = np.atleast_2d(np.asarray(Z, dtype=float))
    N, n = Z.shape
    if n != index_set.n:
        raise ContractError(f"points have {n} coordinates, index set has n={index_set.n}")
    val, der = univariate_table(family, index_set.max_degree, Z)  # (N, n, K)
    c0 = phi0(family)
    # ratios psi_k = phi_k / phi_0, so inactive coordinates contribute 1
    val, der = val / c0, der / c0
    dims, degs = index_set.support_dims, index_set.support_degs
    V = val[:, dims, degs]  # (N, q, L)
    scale = c0**n
    Phi = scale * np.prod(V, axis=2)
    if not gradient:
        return Phi, None
    Dv = der[:, dims, degs]
    L = dims.shape[1]
    q = index_set.q
    dPhi = np.zeros((N, n, q))
    rows = np.arange(N)[:, None]
    cols = np.arange(q)[None, :]
    for l in range(L):
        others = np.prod(np.delete(V, l, axis=2), axis=2) if L > 1 else 1.0
        # padding slots have degree 0 and derivative 0, so they add nothing
        dPhi[rows, dims[None, :, l], cols] += scale * Dv[:, :, l] * others
    return Phi, dPhi


def eval_basis_row(index_set, family, z):
    """Single-point version of :func:`eval_basis_rows`; returns (q,), (n, q)."""
    Phi, dPhi = eval_basis_rows(index_set, family, np.asarray(z, dtype=float)[None])
    return Phi[0], dPhi[0]


# ---------------------------------------------------------------- domain map


@dataclass(frozen=True)
class DomainMap:
    """Affine map from the box [a, b] onto [-1, 1]^n."""

    lower: np.ndarray
    upper: np.ndarray

    def __post_init__(self):
        a = np.asarray(self.lower, dtype=float).reshape(-1)
        b = np.asarray(self.upper, dtype=float).reshape(-1)
        if a.shape != b.shape or not np.all(a < b):
            raise ContractError("domain needs lower < upper componentwise")
        object.__setattr__(self, "lower", a)
        object.__setattr__(self, "upper", b)

    @property
    def n(self):
        return self.lower.size

    @property
    def jacobian_diag(self):
        """dz/dx."""
        return 2.0 / (self.upper - self.lower)

    def to_unit(self, x):
        return (2.0 * np.asarray(x, dtype=float) - self.lower - self.upper) / (self.upper - self.lower)

    def from_unit(self, z):
        return 0.5 * ((self.upper - self.lower) * np.asarray(z, dtype=float) + self.lower + self.upper)

    def inside(self, x, tol=CLAMP_TOL):
        z = self.to_unit(x)
        return np.all(np.abs(z) <= 1.0 + tol, axis=-1)


def domain_map(lower, upper, x):
    """Return ``(z, jacobian_diag)`` for x in the box [lower, upper]."""
    dm = DomainMap(lower, upper)
    return dm.to_unit(x), dm.jacobian_diag


# ---------------------------------------------------------------- weights


@dataclass(frozen=True)
class WeightVector:
    """l1 weights w_i = prod_j (1 + i_j)^(alpha / 2).

    ``alpha = -inf`` means no l1 regularization at all; ``bypass`` is then
    true and solvers drop the penalty.
    """

    alpha: float
    values: np.ndarray

    @property
    def bypass(self):
        return self.alpha == -math.inf


def parse_alpha(alpha):
    if isinstance(alpha, str):
        a = alpha.strip().lower()
        if a in ("-inf", "-infinity", "none"):
            return -math.inf
        try:
            alpha = float(a)
        except ValueError:
            raise ConfigError(f"weights.alpha must be a number or -inf, got {alpha!r}") from None
    alpha = float(alpha)
    if math.isnan(alpha) or alpha == math.inf:
        raise ConfigError("weights.alpha must be finite or -inf")
    return alpha


def weights(index_set, alpha):
    alpha = parse_alpha(alpha)
    v = np.sqrt(np.prod(index_set.indices + 1.0, axis=1))
    with np.errstate(divide="ignore"):
        w = np.power(v, alpha) if math.isfinite(alpha) else np.where(v == 1.0, 1.0, 0.0)
    return WeightVector(alpha, w)
