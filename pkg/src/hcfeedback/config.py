"""Run configuration: plain ``key = value`` files plus command-line overrides."""

import hashlib
import json
import math

from .basis import parse_alpha
from .errors import ConfigError
from .openloop import SolverConfig
from .problems import make_problem


def _int_list(text):
    return [int(v) for v in str(text).replace(",", " ").split()]


def _float_list(text):
    return [float(v) for v in str(text).replace(",", " ").split()]


def _bool(text):
    t = str(text).strip().lower()
    if t in ("1", "true", "yes", "on"):
        return True
    if t in ("0", "false", "no", "off"):
        return False
    raise ValueError(text)


def _alpha(text):
    a = parse_alpha(text)
    return "-inf" if a == -math.inf else a


# key -> (parser, default); None means "use the problem's own value"
SCHEMA = {
    "problem": (str, "vanderpol"),
    "problem.beta": (float, None),
    "problem.T": (float, None),
    "problem.N_a": (int, None),
    "problem.d": (int, None),
    "problem.n_colloc": (int, None),
    "problem.nu": (float, None),
    "integrator": (str, None),
    "dt": (float, None),
    "sampling.N": (int, 100),
    "sampling.skip": (int, 0),
    "sampling.chunk": (int, 256),
    "sampling.workers": (int, 1),
    "ol.tol": (float, 1e-5),
    "ol.max_iters": (int, 2000),
    "ol.memory": (int, 10),
    "ol.armijo_c": (float, 1e-4),
    "basis.kind": (str, "legendre"),
    "basis.index": (str, "hc"),
    "basis.s": (int, 16),
    "weights.alpha": (_alpha, 1.0),
    "fit.variant": (str, "apl1"),
    "fit.lambda": (float, 0.01),
    "fit.rho": (float, 1.0),
    "fit.tol": (float, None),
    "fit.max_iter": (int, None),
    "split.N_d": (int, 40),
    "sweep.N_d": (_int_list, None),
    "simulate.x0": (_float_list, None),
    "simulate.dt": (float, None),
    "simulate.scheme": (str, "rk4"),
    "output": (str, "run"),
}


def defaults():
    return {k: v for k, (_, v) in SCHEMA.items()}


def parse_value(key, text):
    if key not in SCHEMA:
        raise ConfigError(f"unknown config key {key!r}")
    parser, _ = SCHEMA[key]
    if isinstance(text, str) and text.strip().lower() in ("none", "null", "default", ""):
        return None
    try:
        return parser(text.strip() if isinstance(text, str) else text)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"bad value for {key}: {text!r}") from exc


def parse_lines(lines, source="<config>"):
    out = {}
    for no, raw in enumerate(lines, 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{source}:{no}: expected 'key = value'")
        key, value = (s.strip() for s in line.split("=", 1))
        out[key] = parse_value(key, value)
    return out


def load_config(path=None, overrides=()):
    """Defaults, then the file at ``path``, then ``key=value`` overrides."""
    cfg = defaults()
    if path is not None:
        try:
            with open(path) as fh:
                cfg.update(parse_lines(fh.readlines(), str(path)))
        except OSError as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from exc
    cfg.update(parse_lines(overrides, "--set"))
    validate(cfg)
    return cfg


def validate(cfg):
    if cfg["integrator"] not in (None, "rk4", "cn"):
        raise ConfigError("integrator must be rk4 or cn")
    if cfg["simulate.scheme"] not in ("rk4", "cn"):
        raise ConfigError("simulate.scheme must be rk4 or cn")
    if cfg["fit.variant"] not in ("pl2", "apl2", "pl1", "apl1"):
        raise ConfigError("fit.variant must be one of pl2, apl2, pl1, apl1")
    if cfg["basis.kind"] not in ("legendre", "chebyshev"):
        raise ConfigError("basis.kind must be legendre or chebyshev")
    if cfg["basis.index"] not in ("hc", "td", "tp"):
        raise ConfigError("basis.index must be hc, td or tp")
    for key in ("sampling.N", "sampling.chunk", "sampling.workers", "split.N_d"):
        if cfg[key] < 1:
            raise ConfigError(f"{key} must be positive")
    if cfg["fit.lambda"] < 0 or cfg["fit.rho"] <= 0:
        raise ConfigError("need fit.lambda >= 0 and fit.rho > 0")


def config_hash(cfg):
    blob = json.dumps(cfg, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(blob.encode()).hexdigest()[:16]


def problem_from(cfg):
    prefix = "problem."
    overrides = {k[len(prefix):]: v for k, v in cfg.items() if k.startswith(prefix) and v is not None}
    return make_problem(cfg["problem"], **overrides)


def solver_from(cfg):
    return SolverConfig(
        tol=cfg["ol.tol"],
        max_iters=cfg["ol.max_iters"],
        memory=cfg["ol.memory"],
        armijo_c=cfg["ol.armijo_c"],
    )
