"""Halton sampling of initial states, dataset generation and persistence."""

import json
import logging
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from . import __version__
from .errors import ConfigError, ContractError, DataError, HCFeedbackError
from .integrate import TimeGrid
from .openloop import SolverConfig, solve_open_loop_batch

log = logging.getLogger(__name__)


def _first_primes(count):
    # upper bound for the count-th prime (Rosser), valid for count >= 6
    limit = max(15, int(count * (math.log(count) + math.log(math.log(count)))) + 1)
    sieve = np.ones(limit + 1, dtype=bool)
    sieve[:2] = False
    for p in range(2, int(limit**0.5) + 1):
        if sieve[p]:
            sieve[p * p :: p] = False
    return np.flatnonzero(sieve)[:count]


PRIMES = _first_primes(1000)


def radical_inverse(index, base):
    """Van der Corput radical inverse of nonnegative integers in ``base``."""
    i = np.array(index, dtype=np.int64, copy=True)
    out = np.zeros(i.shape)
    f = 1.0 / base
    while np.any(i > 0):
        out += f * (i % base)
        i //= base
        f /= base
    return out


def halton_points(start, count, dim):
    """Halton points with 1-based indices ``start, ..., start + count - 1``.

    Coordinate j uses the j-th prime as base. No scrambling.
    """
    if dim < 1 or dim > len(PRIMES):
        raise ConfigError(f"Halton dimension must lie in [1, {len(PRIMES)}], got {dim}")
    if start < 1:
        raise ContractError("Halton indices are 1-based")
    idx = np.arange(start, start + count)
    return np.stack([radical_inverse(idx, int(p)) for p in PRIMES[:dim]], axis=-1)


def halton_point(index, dim):
    return halton_points(index, 1, dim)[0]


@dataclass(frozen=True)
class Sample:
    x: np.ndarray
    V: float
    gradV: np.ndarray
    converged: bool
    solver_iterations: int


@dataclass
class Dataset:
    """Samples {x^j, V^j, grad V^j} in Halton order plus provenance.

    Gradients are stored in the original problem coordinates.
    """

    X: np.ndarray
    V: np.ndarray
    grad: np.ndarray
    converged: np.ndarray
    iterations: np.ndarray
    header: dict = field(default_factory=dict)

    def __post_init__(self):
        N = self.X.shape[0]
        if self.X.ndim != 2 or self.grad.shape != self.X.shape:
            raise DataError("X and grad must share shape (N, n)")
        if self.V.shape != (N,) or self.converged.shape != (N,) or self.iterations.shape != (N,):
            raise DataError("per-sample arrays must have length N")

    def __len__(self):
        return self.X.shape[0]

    @property
    def n(self):
        return self.X.shape[1]

    @property
    def problem_id(self):
        return self.header.get("problem_id")

    @property
    def domain(self):
        return np.asarray(self.header["lower"]), np.asarray(self.header["upper"])

    @property
    def samples(self):
        return [
            Sample(self.X[j], float(self.V[j]), self.grad[j], bool(self.converged[j]), int(self.iterations[j]))
            for j in range(len(self))
        ]

    def columns(self):
        n = self.n
        return (
            ["index"]
            + [f"x_{i + 1}" for i in range(n)]
            + ["V"]
            + [f"g_{i + 1}" for i in range(n)]
            + ["converged", "iterations"]
        )

    def save(self, path):
        header = dict(self.header)
        header["n"] = self.n
        header["N"] = len(self)
        header["columns"] = self.columns()
        with open(path, "w") as fh:
            fh.write(json.dumps(header, sort_keys=True) + "\n")
            for j in range(len(self)):
                fields = [str(j + 1)]
                fields += [f"{v:.17g}" for v in self.X[j]]
                fields.append(f"{self.V[j]:.17g}")
                fields += [f"{v:.17g}" for v in self.grad[j]]
                fields += [str(int(self.converged[j])), str(int(self.iterations[j]))]
                fh.write(",".join(fields) + "\n")

    @classmethod
    def load(cls, path):
        with open(path) as fh:
            first = fh.readline()
            try:
                header = json.loads(first)
            except json.JSONDecodeError as exc:
                raise DataError(f"{path}: first line is not a JSON header") from exc
            n = int(header["n"])
            rows = np.loadtxt(fh, delimiter=",", ndmin=2)
        if rows.shape[1] != 2 * n + 4:
            raise DataError(f"{path}: expected {2 * n + 4} columns, got {rows.shape[1]}")
        for key in ("n", "N", "columns"):
            header.pop(key, None)
        return cls(
            X=rows[:, 1 : n + 1].copy(),
            V=rows[:, n + 1].copy(),
            grad=rows[:, n + 2 : 2 * n + 2].copy(),
            converged=rows[:, 2 * n + 2].astype(bool),
            iterations=rows[:, 2 * n + 3].astype(int),
            header=header,
        )


class GenerationError(HCFeedbackError):
    """More than half of the open-loop solves failed."""

    def __init__(self, message, dataset):
        super().__init__(message)
        self.dataset = dataset


def _solve_chunk(args):
    problem, X, grid, config, scheme = args
    sol = solve_open_loop_batch(problem, X, grid, config, scheme)
    return sol.cost, sol.P[:, 0], sol.converged, sol.iterations, sol.grad_norm, sol.failed


def generate_dataset(
    problem,
    N,
    config=None,
    skip=0,
    grid=None,
    scheme=None,
    workers=1,
    chunk_size=256,
    log_path=None,
    header=None,
):
    """Solve open-loop problems from N Halton initial states.

    Halton points with indices ``skip + 1, ..., skip + N`` are mapped
    affinely onto the problem's sampling box. The points are cut into fixed
    chunks of ``chunk_size`` and solved chunk-wise (optionally in parallel
    processes); the chunking and not the worker count determines the
    arithmetic, so results are reproducible for any ``workers``.

    Non-converged samples stay in the dataset with ``converged=False``.

    Raises
    ------
    GenerationError
        If more than half of the samples did not converge.
    """
    if N < 1:
        raise ContractError("N must be at least 1")
    if chunk_size < 1 or workers < 1:
        raise ConfigError("chunk_size and workers must be positive")
    config = config or SolverConfig()
    grid = grid or TimeGrid(problem.T, problem.default_dt)
    scheme = scheme or problem.default_scheme
    lower, upper = problem.sampling_domain
    H = halton_points(skip + 1, N, problem.n)
    X = lower + H * (upper - lower)

    tasks = [
        (problem, X[s : s + chunk_size], grid, config, scheme) for s in range(0, N, chunk_size)
    ]
    if workers == 1 or len(tasks) == 1:
        results = [_solve_chunk(t) for t in tasks]
    else:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(_solve_chunk, tasks))

    V = np.concatenate([r[0] for r in results])
    grad = np.concatenate([r[1] for r in results])
    converged = np.concatenate([r[2] for r in results])
    iterations = np.concatenate([r[3] for r in results])
    grad_norm = np.concatenate([r[4] for r in results])
    failed = np.concatenate([r[5] for r in results])
    V = np.where(failed, np.nan, V)
    grad = np.where(failed[:, None], np.nan, grad)

    meta = {
        "problem_id": problem.name,
        "problem_params": problem.params(),
        "lower": problem.lower.tolist(),
        "upper": problem.upper.tolist(),
        "dt": grid.dt,
        "T": grid.T,
        "beta": problem.beta,
        "scheme": scheme,
        "solver": config.as_dict(),
        "skip": int(skip),
        "chunk_size": int(chunk_size),
        "version": __version__,
    }
    meta.update(header or {})
    dataset = Dataset(X, V, grad, converged, iterations, meta)

    if log_path is not None:
        with open(log_path, "w") as fh:
            for j in range(N):
                rec = {
                    "index": j + 1,
                    "iterations": int(iterations[j]),
                    "final_grad_norm": float(grad_norm[j]),
                    "converged": bool(converged[j]),
                    "failed": bool(failed[j]),
                }
                fh.write(json.dumps(rec) + "\n")
    bad = np.flatnonzero(~converged)
    if bad.size:
        log.warning("%d of %d samples did not converge: indices %s", bad.size, N, (bad + 1).tolist())
    if bad.size > N / 2:
        raise GenerationError(f"{bad.size} of {N} open-loop solves failed", dataset)
    return dataset


def split(dataset, N_d):
    """Prefix split into training {1..N_d} and validation {N_d+1..N}.

    Returns 0-based index arrays; non-converged samples are dropped from
    both parts.
    """
    N = len(dataset)
    if not 1 <= N_d < N:
        raise ConfigError(f"N_d must satisfy 1 <= N_d < N={N}, got {N_d}")
    ok = np.asarray(dataset.converged, dtype=bool)
    idx = np.arange(N)
    train = idx[:N_d][ok[:N_d]]
    val = idx[N_d:][ok[N_d:]]
    dropped = N - train.size - val.size
    if dropped:
        log.info("split drops %d non-converged samples", dropped)
    return train, val
