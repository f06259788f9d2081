"""Command-line front end.

Exit codes: 0 success, 1 numerical failure, 2 usage or configuration error.
"""

import argparse
import json
import logging
import os
import sys
import time
from datetime import datetime, timezone

import numpy as np

from . import __version__
from .basis import (
    build_index_set,
    eval_basis_rows,
    hc_cardinality_bound,
    index_set_cardinality,
)
from .config import config_hash, load_config, problem_from, solver_from
from .errors import ConfigError, ContractError, DataError, HCFeedbackError, ResourceError
from .feedback import (
    ClosedLoopResult,
    ValueModel,
    simulate_closed_loop,
    validation_errors,
    write_series_csv,
)
from .integrate import ControlSignal, TimeGrid
from .openloop import reduced_gradient, solve_open_loop
from .regression import FitResult, fit
from .sampling import Dataset, GenerationError, generate_dataset, split

log = logging.getLogger("hcfeedback")

EXIT_OK, EXIT_NUMERICAL, EXIT_USAGE = 0, 1, 2


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(message)


def _add_config_args(p):
    p.add_argument("--config", help="key = value config file")
    p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                   help="override a config key (repeatable)")
    p.add_argument("--force", action="store_true", help="overwrite existing outputs")


def build_parser():
    parser = _Parser(prog="hcfeedback", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=__version__)
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("datagen", help="solve open-loop problems at Halton points")
    _add_config_args(p)

    p = sub.add_parser("fit", help="fit a value model on a dataset")
    _add_config_args(p)
    p.add_argument("--dataset", help="dataset file (default: <output>/dataset.csv)")

    p = sub.add_parser("validate", help="metrics of a coefficient file on a dataset")
    _add_config_args(p)
    p.add_argument("--dataset", required=True)
    p.add_argument("--coefficients", required=True)

    p = sub.add_parser("simulate", help="closed-loop simulation with a fitted model")
    _add_config_args(p)
    p.add_argument("--coefficients", required=True)
    p.add_argument("--x0", help="initial state, comma separated")
    p.add_argument("--baselines", action="store_true",
                   help="also run the uncontrolled system and the open-loop optimum")

    p = sub.add_parser("indexset", help="index-set cardinality and listing")
    p.add_argument("--n", type=int, required=True)
    p.add_argument("--s", type=int, required=True)
    p.add_argument("--kind", default="hc", choices=("hc", "td", "tp"))
    p.add_argument("--list", action="store_true", help="print the ordered multi-indices")
    p.add_argument("--cap", type=int, default=10**7)

    p = sub.add_parser("gradcheck", help="adjoint and basis derivative oracles")
    _add_config_args(p)
    p.add_argument("--controls", type=int, default=5, help="number of test controls")
    return parser


# ------------------------------------------------------------------ helpers


def _output_path(cfg, name, force):
    out = cfg["output"]
    os.makedirs(out, exist_ok=True)
    path = os.path.join(out, name)
    if os.path.exists(path) and not force:
        raise UsageError(f"{path} exists; use --force to overwrite")
    return path


def _grid_and_scheme(cfg, problem):
    dt = cfg["dt"] or problem.default_dt
    scheme = cfg["integrator"] or problem.default_scheme
    return TimeGrid(problem.T, dt), scheme


def _metrics_line(record):
    return "METRICS " + json.dumps(record, sort_keys=True)


def _check_dataset(cfg, dataset, problem):
    if dataset.problem_id != problem.name or dataset.n != problem.n:
        raise ContractError(
            f"dataset is for {dataset.problem_id} (n={dataset.n}), config is {problem.name} (n={problem.n})"
        )


# ------------------------------------------------------------------ commands


def cmd_datagen(cfg, args):
    problem = problem_from(cfg)
    grid, scheme = _grid_and_scheme(cfg, problem)
    h = config_hash(cfg)
    path = _output_path(cfg, "dataset.csv", args.force)
    report_path = _output_path(cfg, "datagen_report.json", args.force)
    log_path = _output_path(cfg, "samples.jsonl", args.force)
    start = time.time()
    status = EXIT_OK
    try:
        ds = generate_dataset(
            problem,
            cfg["sampling.N"],
            config=solver_from(cfg),
            skip=cfg["sampling.skip"],
            grid=grid,
            scheme=scheme,
            workers=cfg["sampling.workers"],
            chunk_size=cfg["sampling.chunk"],
            log_path=log_path,
            header={"config": cfg, "config_hash": h},
        )
    except GenerationError as exc:
        ds = exc.dataset
        status = EXIT_NUMERICAL
        print(f"error: {exc}", file=sys.stderr)
    wall = time.time() - start
    ds.save(path)
    it = ds.iterations
    report = {
        "config_hash": h,
        "config": cfg,
        "N": len(ds),
        "converged": int(ds.converged.sum()),
        "success_rate": float(ds.converged.mean()),
        "iterations": {"min": int(it.min()), "mean": float(it.mean()), "max": int(it.max())},
        "wall_time_s": wall,
        "finished": datetime.now(timezone.utc).isoformat(),
    }
    with open(report_path, "w") as fh:
        json.dump(report, fh, indent=2, sort_keys=True)
    print(f"wrote {path}: {report['converged']}/{len(ds)} converged in {wall:.1f} s")
    return status


def _fit_one(cfg, dataset, N_d, index_set):
    train, val = split(dataset, N_d)
    res = fit(
        dataset,
        train,
        index_set,
        cfg["basis.kind"],
        cfg["fit.variant"],
        lam=cfg["fit.lambda"],
        alpha=cfg["weights.alpha"],
        rho=cfg["fit.rho"],
        tol=cfg["fit.tol"],
        max_iter=cfg["fit.max_iter"],
    )
    model = ValueModel.from_fit(res, dataset.header.get("beta"))
    tr = validation_errors(model, dataset, train)
    va = validation_errors(model, dataset, val) if val.size else (float("nan"),) * 2
    record = {
        "variant": res.variant,
        "N_d": int(N_d),
        "q": index_set.q,
        "nonzero": res.nonzero_count,
        "lambda": res.lam,
        "alpha": "-inf" if res.alpha == -np.inf else res.alpha,
        "train_L2": tr[0],
        "train_H1": tr[1],
        "val_L2": va[0],
        "val_H1": va[1],
        "converged": res.converged,
        "iterations": res.iterations,
    }
    return res, record


def cmd_fit(cfg, args):
    path = args.dataset or os.path.join(cfg["output"], "dataset.csv")
    dataset = Dataset.load(path)
    problem = problem_from(cfg)
    _check_dataset(cfg, dataset, problem)
    index_set = build_index_set(dataset.n, cfg["basis.s"], cfg["basis.index"])
    h = config_hash(cfg)
    sweep = cfg["sweep.N_d"] or [cfg["split.N_d"]]
    targets = []
    for N_d in sweep:
        name = f"fit_{cfg['fit.variant']}_Nd{N_d}.csv"
        targets.append((N_d, _output_path(cfg, name, args.force)))
    metrics_path = _output_path(cfg, f"metrics_{cfg['fit.variant']}.jsonl", args.force)
    print(f"{'variant':>7} {'N_d':>5} {'q':>6} {'nnz':>6} {'train L2':>10} {'val L2':>10} {'val H1':>10}")
    records = []
    for N_d, out in targets:
        res, rec = _fit_one(cfg, dataset, N_d, index_set)
        rec["config_hash"] = h
        res.meta = {"config": cfg, "config_hash": h, "problem_id": dataset.problem_id,
                    "beta": dataset.header.get("beta"), "metrics": rec}
        res.save(out)
        records.append(rec)
        print(f"{rec['variant']:>7} {N_d:>5} {rec['q']:>6} {rec['nonzero']:>6} "
              f"{rec['train_L2']:>10.3e} {rec['val_L2']:>10.3e} {rec['val_H1']:>10.3e}")
        print(_metrics_line(rec))
    with open(metrics_path, "w") as fh:
        for rec in records:
            fh.write(json.dumps(rec, sort_keys=True) + "\n")
    return EXIT_OK if all(r["converged"] for r in records) else EXIT_NUMERICAL


def cmd_validate(cfg, args):
    dataset = Dataset.load(args.dataset)
    res = FitResult.load(args.coefficients)
    if res.index_set.n != dataset.n:
        raise ContractError("coefficient file and dataset dimensions differ")
    _, val = split(dataset, cfg["split.N_d"])
    model = ValueModel.from_fit(res)
    l2, h1 = validation_errors(model, dataset, val)
    rec = {"variant": res.variant, "N_d": cfg["split.N_d"], "q": res.q,
           "nonzero": res.nonzero_count, "val_L2": l2, "val_H1": h1}
    print(_metrics_line(rec))
    return EXIT_OK


def cmd_simulate(cfg, args):
    problem = problem_from(cfg)
    res = FitResult.load(args.coefficients)
    if res.index_set.n != problem.n:
        raise ContractError("coefficient file does not match the problem dimension")
    x0 = cfg["simulate.x0"]
    if args.x0:
        x0 = [float(v) for v in args.x0.replace(",", " ").split()]
    if x0 is None:
        raise ConfigError("no initial state: pass --x0 or set simulate.x0")
    x0 = np.asarray(x0, dtype=float)
    if x0.shape != (problem.n,):
        raise ConfigError(f"x0 needs {problem.n} components")
    model = ValueModel.from_fit(res, problem.beta)
    dt = cfg["simulate.dt"] or cfg["dt"] or problem.default_dt
    grid = TimeGrid(problem.T, dt)
    results = {"fitted": simulate_closed_loop(problem, model, x0, grid, cfg["simulate.scheme"])}
    if args.baselines:
        results["uncontrolled"] = simulate_closed_loop(problem, None, x0, grid, cfg["simulate.scheme"])
        scheme = cfg["integrator"] or problem.default_scheme
        sol = solve_open_loop(problem, x0, grid, solver_from(cfg), scheme)
        results["optimal"] = ClosedLoopResult.from_open_loop(problem, sol)
    h = config_hash(cfg)
    path = _output_path(cfg, "closed_loop.csv", args.force)
    write_series_csv(path, results)
    report = {
        "config_hash": h,
        "config": cfg,
        "x0": x0.tolist(),
        "runs": {
            k: {"cost": r.cost, "diverged": r.diverged, "truncation_time": r.truncation_time}
            for k, r in results.items()
        },
    }
    with open(_output_path(cfg, "simulate_report.json", args.force), "w") as fh:
        json.dump(report, fh, indent=2, sort_keys=True)
    for k, r in results.items():
        flag = f" diverged at t={r.truncation_time:g}" if r.diverged else ""
        print(f"{k}: cost {r.cost:.6g}{flag}")
    return EXIT_OK


def cmd_indexset(args):
    if args.n < 1 or args.s < 0:
        raise ConfigError("need n >= 1 and s >= 0")
    q = index_set_cardinality(args.n, args.s, args.kind)
    bound = hc_cardinality_bound(args.n, args.s) if args.s >= 1 else 1.0
    print(f"q = {q}")
    print(f"hc bound = {bound:.6g}")
    if args.list:
        try:
            I = build_index_set(args.n, args.s, args.kind, cap=args.cap)
        except ResourceError as exc:
            print(f"warning: {exc}; listing skipped", file=sys.stderr)
            return EXIT_OK
        for row in I.indices:
            print(" ".join(str(int(v)) for v in row))
    return EXIT_OK


def _smooth_controls(grid, m, count):
    # deterministic sums of sinusoids, no RNG involved
    t = grid.times[:, None] / grid.T
    out = []
    for c in range(count):
        j = np.arange(1, m + 1)[None, :]
        out.append(
            0.5 * np.sin(np.pi * (c + 1) * t + j) + 0.3 * np.cos(2 * np.pi * (c + 2) * t * j)
        )
    return out


def cmd_gradcheck(cfg, args):
    problem = problem_from(cfg)
    grid, scheme = _grid_and_scheme(cfg, problem)
    lower, upper = problem.sampling_domain
    x0 = 0.5 * (lower + upper) + 0.3 * (upper - lower) * np.sin(np.arange(1, problem.n + 1))
    worst = 0.0
    eps = 1e-5
    ctrls = _smooth_controls(grid, problem.m, args.controls + 1)
    direction = ctrls[-1]
    for U in ctrls[:-1]:
        u = ControlSignal(grid, U)
        g = reduced_gradient(problem, x0, u, scheme)
        dJ = grid.inner(g.grad, direction)
        jp = reduced_gradient(problem, x0, ControlSignal(grid, U + eps * direction), scheme).cost
        jm = reduced_gradient(problem, x0, ControlSignal(grid, U - eps * direction), scheme).cost
        fd = (jp - jm) / (2 * eps)
        err = abs(fd - dJ) / max(abs(fd), 1e-14)
        worst = max(worst, err)
        print(f"adjoint: <G, du> = {dJ:.10e}  fd = {fd:.10e}  rel err = {err:.2e}")
    I = build_index_set(min(problem.n, 3), 6, "hc")
    Z = np.linspace(-0.9, 0.9, 7)[:, None] * np.ones(I.n) * np.linspace(1, 0.5, I.n)
    _, dPhi = eval_basis_rows(I, cfg["basis.kind"], Z)
    h = 1e-6
    fd = np.stack(
        [(eval_basis_rows(I, cfg["basis.kind"], Z + h * e)[0]
          - eval_basis_rows(I, cfg["basis.kind"], Z - h * e)[0]) / (2 * h) for e in np.eye(I.n)],
        axis=1,
    )
    berr = np.max(np.abs(fd - dPhi)) / max(np.max(np.abs(dPhi)), 1e-14)
    print(f"basis derivatives: max rel err = {berr:.2e}")
    ok = worst < 1e-4 and berr < 1e-6
    print("gradcheck " + ("passed" if ok else "FAILED"))
    return EXIT_OK if ok else EXIT_NUMERICAL


COMMANDS = {
    "datagen": cmd_datagen,
    "fit": cmd_fit,
    "validate": cmd_validate,
    "simulate": cmd_simulate,
    "gradcheck": cmd_gradcheck,
}


def main(argv=None):
    try:
        args = build_parser().parse_args(argv)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        if args.command == "indexset":
            return cmd_indexset(args)
        cfg = load_config(args.config, args.set)
        return COMMANDS[args.command](cfg, args)
    except (UsageError, ConfigError, ContractError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (OSError, DataError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except HCFeedbackError as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL


if __name__ == "__main__":
    sys.exit(main())
