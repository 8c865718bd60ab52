"""Command-line front end.

    l1mpc solve|mpc|bench|tank [--config PATH] [--out DIR]
          [--lambda V] [--horizon H] [--max-iter K]

Exit codes: 0 success, 1 solver failure, 2 configuration error.
"""

from __future__ import annotations

import argparse
import csv
import json
import os
import sys
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import riccati
from .admm import AdmmSolver
from .errors import L1MpcError
from .model import ProblemInstance, StageSystem, augment_delta_u
from .mpc import (
    EXAMPLE_LAMBDAS,
    LinearPlant,
    MpcConfig,
    run_mpc,
    run_tank,
    tank_first_problem,
)

MODES = ("solve", "mpc", "bench", "tank")
PLANTS = ("linear", "nonlinear")
TANK = "quadruple_tank"
BENCH_HORIZONS = tuple(range(5, 105, 5))

KNOWN_KEYS = {
    "mode", "model", "horizon", "lambda", "rho", "alpha", "eps_abs", "eps_rel",
    "max_iter", "plant", "steps", "sample_time", "seed", "output", "warm_start",
    "iterations", "repeats", "strict", "process_cov", "meas_cov",
}  # fmt: skip
REQUIRED = {"solve": ("model", "lambda"), "mpc": ("model", "lambda"), "bench": (), "tank": ()}


class ConfigError(Exception):
    pass


class ParseError(ConfigError):
    def __init__(self, message, line=None, column=None):
        self.line, self.column = line, column
        where = f" (line {line}, column {column})" if line is not None else ""
        super().__init__(f"{message}{where}")


class ValidationError(ConfigError):
    def __init__(self, field_name, message=None):
        self.field = field_name
        super().__init__(f"{field_name}: {message}" if message else field_name)


@dataclass
class ScenarioConfig:
    mode: str
    model: object = TANK
    horizons: list = field(default_factory=lambda: [5])
    lambdas: list = field(default_factory=lambda: [0.1])
    sweep: bool = False
    rho: float = 1.0
    alpha: float = 1.8
    eps_abs: float = 1e-5
    eps_rel: float = 1e-4
    max_iter: int = 1000
    plant: str = "nonlinear"
    steps: int = 10
    sample_time: float = 1.0
    seed: int = 0
    output: str | None = None
    warm_start: bool = True
    iterations: int = 1000
    repeats: int = 5
    strict: bool = False
    process_cov: float = 1e-4
    meas_cov: float = 1e-4

    @property
    def horizon(self):
        return self.horizons[0]


def _number(data, key, kind=float, positive=False, nonneg=False):
    v = data[key]
    if isinstance(v, bool) or not isinstance(v, (int, float)):
        raise ValidationError(key, "must be a number")
    if kind is int and int(v) != v:
        raise ValidationError(key, "must be an integer")
    v = kind(v)
    if positive and not v > 0:
        raise ValidationError(key, "must be positive")
    if nonneg and not v >= 0:
        raise ValidationError(key, "must be nonnegative")
    return v


def parse_config(text: str, default_mode: str | None = None) -> ScenarioConfig:
    """Parse and validate a JSON scenario description."""
    try:
        data = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ParseError(exc.msg, exc.lineno, exc.colno) from exc
    if not isinstance(data, dict):
        raise ParseError("top-level JSON value must be an object")
    unknown = sorted(set(data) - KNOWN_KEYS)
    if unknown:
        raise ValidationError(unknown[0], "unknown key")
    if "mode" not in data:
        if default_mode is None:
            raise ValidationError("mode", "missing")
        data["mode"] = default_mode
    mode = data["mode"]
    if mode not in MODES:
        raise ValidationError("mode", f"must be one of {MODES}")
    for key in REQUIRED[mode]:
        if key not in data:
            raise ValidationError(key, "missing")

    cfg = ScenarioConfig(mode=mode)
    if mode == "tank":
        cfg.lambdas, cfg.sweep = list(EXAMPLE_LAMBDAS), True
    if mode == "bench":
        cfg.horizons = list(BENCH_HORIZONS)
    if "model" in data:
        model = data["model"]
        if model != TANK and not isinstance(model, dict):
            raise ValidationError("model", f'must be "{TANK}" or an object of matrices')
        if mode == "tank" and model != TANK:
            raise ValidationError("model", "tank mode uses the built-in model")
        cfg.model = model
    if "lambda" in data:
        lam = data["lambda"]
        values = lam if isinstance(lam, list) else [lam]
        if not values:
            raise ValidationError("lambda", "empty list")
        cfg.lambdas = [_number({"lambda": v}, "lambda", nonneg=True) for v in values]
        cfg.sweep = isinstance(lam, list)
    if "horizon" in data:
        h = data["horizon"]
        values = h if isinstance(h, list) else [h]
        if not values:
            raise ValidationError("horizon", "empty list")
        cfg.horizons = [_number({"horizon": v}, "horizon", int, positive=True) for v in values]
        if len(cfg.horizons) > 1 and mode != "bench":
            raise ValidationError("horizon", "a list is only allowed in bench mode")
    for key in ("rho", "eps_abs", "eps_rel", "sample_time", "process_cov", "meas_cov"):
        if key in data:
            setattr(cfg, key, _number(data, key, positive=True))
    if "alpha" in data:
        cfg.alpha = _number(data, "alpha")
        if not 1.0 <= cfg.alpha < 2.0:
            raise ValidationError("alpha", "must lie in [1, 2)")
    for key in ("max_iter", "steps", "seed"):
        if key in data:
            setattr(cfg, key, _number(data, key, int, nonneg=True))
    for key in ("iterations", "repeats"):
        if key in data:
            setattr(cfg, key, _number(data, key, int, positive=True))
    for key in ("warm_start", "strict"):
        if key in data:
            if not isinstance(data[key], bool):
                raise ValidationError(key, "must be true or false")
            setattr(cfg, key, data[key])
    if "plant" in data:
        if data["plant"] not in PLANTS:
            raise ValidationError("plant", f"must be one of {PLANTS}")
        cfg.plant = data["plant"]
    if "output" in data:
        if not isinstance(data["output"], str):
            raise ValidationError("output", "must be a path string")
        cfg.output = data["output"]
    if isinstance(cfg.model, dict):
        if cfg.mode == "bench":
            raise ValidationError("model", "bench mode uses the built-in model")
        if cfg.mode == "mpc" and "plant" in data and cfg.plant != "linear":
            raise ValidationError("plant", "inline models only support the linear plant")
        if cfg.mode == "mpc":
            cfg.plant = "linear"
        _check_inline_model(cfg.model, cfg.mode)
    return cfg


INLINE_KEYS = {
    "solve": ({"A", "B", "x0"}, {"C", "D", "E", "F", "Qterm"}),
    "mpc": ({"A", "B", "x0"}, {"C", "Q", "Qbar", "u0"}),
}


def _check_inline_model(model, mode):
    required, optional = INLINE_KEYS[mode]
    for key in sorted(required - set(model)):
        raise ValidationError(f"model.{key}", "missing")
    for key in sorted(set(model) - required - optional):
        raise ValidationError(f"model.{key}", "unknown key")
    for key, value in model.items():
        try:
            arr = np.array(value, dtype=float)
        except (TypeError, ValueError) as exc:
            raise ValidationError(f"model.{key}", "must be numeric") from exc
        if not np.all(np.isfinite(arr)):
            raise ValidationError(f"model.{key}", "must be finite")


def _mat(model, key, default=None):
    if key not in model:
        return default
    return np.array(model[key], dtype=float)


def _as_2d(M, cols):
    if M is None:
        return None
    return M.reshape(-1, cols) if M.size else np.zeros((0, cols))


def build_instance(cfg: ScenarioConfig, lam: float, H: int | None = None) -> ProblemInstance:
    H = cfg.horizon if H is None else H
    admm = dict(rho=cfg.rho, alpha=cfg.alpha, eps_abs=cfg.eps_abs, eps_rel=cfg.eps_rel, max_iter=cfg.max_iter)
    if cfg.model == TANK:
        return tank_first_problem(lam, H, sample_time=cfg.sample_time, **admm)
    m = cfg.model
    A = np.atleast_2d(_mat(m, "A"))
    n = A.shape[0]
    B = _mat(m, "B").reshape(n, -1)
    l = B.shape[1]
    try:
        sys_ = StageSystem(
            A,
            B,
            _as_2d(_mat(m, "C"), n),
            _as_2d(_mat(m, "D"), l),
            _as_2d(_mat(m, "E"), n),
            _as_2d(_mat(m, "F"), l),
        )
        Qterm = _mat(m, "Qterm", np.zeros((n, n))).reshape(n, n)
        return ProblemInstance(sys_, H, Qterm, lam, _mat(m, "x0"), **admm)
    except (ValueError, L1MpcError) as exc:
        raise ValidationError("model", str(exc)) from exc


def build_inline_mpc(cfg: ScenarioConfig, lam: float):
    m = cfg.model
    A = np.atleast_2d(_mat(m, "A"))
    n = A.shape[0]
    B = _mat(m, "B").reshape(n, -1)
    l = B.shape[1]
    C = _mat(m, "C", np.eye(n)).reshape(-1, n)
    Q = _mat(m, "Q", np.eye(C.shape[0])).reshape(C.shape[0], C.shape[0])
    Qbar = _mat(m, "Qbar", np.zeros((n, n))).reshape(n, n)
    try:
        aug = augment_delta_u(A, B, Q, Qbar, C=C)
        mcfg = MpcConfig(
            aug, cfg.horizon, lam, rho=cfg.rho, alpha=cfg.alpha, eps_abs=cfg.eps_abs,
            eps_rel=cfg.eps_rel, max_iter=cfg.max_iter, sample_time=cfg.sample_time,
            steps=cfg.steps, warm_start=cfg.warm_start, strict=cfg.strict,
            process_cov=cfg.process_cov * np.eye(n), meas_cov=cfg.meas_cov * np.eye(C.shape[0]),
        )  # fmt: skip
    except (ValueError, L1MpcError) as exc:
        raise ValidationError("model", str(exc)) from exc
    x0 = _mat(m, "x0").reshape(n)
    u0 = _mat(m, "u0", np.zeros(l)).reshape(l)
    return mcfg, LinearPlant(aug.base.A[:n, :n], aug.base.B[:n], C), x0, u0


def fmt(v) -> str:
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    return format(float(v), ".17g")


def _write_csv(path: Path, header, rows):
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for row in rows:
            w.writerow([fmt(v) for v in row])


def _suffix(cfg, lam):
    return f"_lambda_{float(lam)!r}" if cfg.sweep else ""


def _workers(count):
    try:
        cap = int(os.environ.get("L1MPC_THREADS", "1"))
    except ValueError:
        cap = 1
    return max(1, min(cap, count))


def _map(fn, items):
    items = list(items)
    n = _workers(len(items))
    if n == 1:
        return [fn(x) for x in items]
    with ThreadPoolExecutor(max_workers=n) as pool:
        return list(pool.map(fn, items))


def cmd_solve(cfg: ScenarioConfig, out: Path, stream=sys.stdout) -> int:
    def one(lam):
        rep = AdmmSolver(build_instance(cfg, lam)).solve()
        rows = zip(
            range(1, rep.iterations + 1),
            rep.primal_residual_history,
            rep.dual_residual_history,
            rep.cost_history,
        )
        _write_csv(out / f"iterations{_suffix(cfg, lam)}.csv", ["iter", "e_p", "e_d", "cost"], rows)
        return lam, rep

    results = _map(one, cfg.lambdas)
    summary = [(rep.status.value, rep.iterations, rep.final_cost) for _, rep in results]
    header = ["status", "iters", "final_cost"]
    if cfg.sweep:
        header = ["lambda"] + header
        summary = [(lam, *row) for (lam, _), row in zip(results, summary)]
    path = out / "summary.csv"
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        fh.write(",".join(header) + "\n")
        for row in summary:
            fh.write(",".join(v if isinstance(v, str) else fmt(v) for v in row) + "\n")
    stream.write(path.read_text())
    return 0


def trajectory_rows(traj):
    for r in traj.records:
        yield [r.time, *r.state, *r.input, *r.output, *r.du, r.iterations, r.solve_ms]


def trajectory_header(n, l, m):
    return (
        ["t"]
        + [f"x{i + 1}" for i in range(n)]
        + [f"u{i + 1}" for i in range(l)]
        + [f"y{i + 1}" for i in range(m)]
        + [f"du{i + 1}" for i in range(l)]
        + ["admm_iters", "solve_ms"]
    )


def cmd_mpc(cfg: ScenarioConfig, out: Path, stream=sys.stdout) -> int:
    def one(lam):
        if cfg.model == TANK:
            traj = run_tank(
                lam, cfg.horizon, cfg.steps, cfg.plant, rho=cfg.rho, alpha=cfg.alpha,
                eps_abs=cfg.eps_abs, eps_rel=cfg.eps_rel, max_iter=cfg.max_iter,
                sample_time=cfg.sample_time, warm_start=cfg.warm_start, strict=cfg.strict,
                process_cov=cfg.process_cov * np.eye(4), meas_cov=cfg.meas_cov * np.eye(2),
            )  # fmt: skip
            dims = (4, 2, 2)
        else:
            mcfg, plant, x0, u0 = build_inline_mpc(cfg, lam)
            traj = run_mpc(mcfg, plant, x0, u0)
            dims = (mcfg.aug.n_plant, mcfg.aug.base.l, mcfg.C.shape[0])
        path = out / f"trajectory{_suffix(cfg, lam)}.csv"
        _write_csv(path, trajectory_header(*dims), trajectory_rows(traj))
        return lam, traj, path

    for lam, traj, path in _map(one, cfg.lambdas):
        iters = int(traj.iterations.sum()) if len(traj) else 0
        stream.write(f"lambda={float(lam)!r} steps={len(traj)} admm_iters={iters} -> {path}\n")
    return 0


def bench_horizons(instances, iterations: int, repeats: int = 5):
    """Factorization time and mean per-iteration time for each instance, in microseconds.

    Repeats run round-robin over the instances and the best run is kept, so
    slow drift of the machine load hits every horizon alike.
    """
    solvers, fact_us = [], []
    for inst in instances:
        sys_ = inst.system
        t0 = time.perf_counter()
        cache = riccati.factorize(riccati.build_projection_cost(sys_).scaled(2.0), sys_.A, sys_.B, inst.H)
        fact_us.append(1e6 * (time.perf_counter() - t0))
        solvers.append(AdmmSolver(inst, cache))
    best = np.full(len(solvers), np.inf)
    for _ in range(repeats):
        for k, solver in enumerate(solvers):
            t0 = time.perf_counter()
            solver.solve(max_iter=iterations, stop=False)
            best[k] = min(best[k], (time.perf_counter() - t0) / iterations)
    return 1e6 * best, np.array(fact_us)


def cmd_bench(cfg: ScenarioConfig, out: Path, stream=sys.stdout) -> int:
    lam = cfg.lambdas[0]
    # sequential on purpose: parallel workers would distort the timings
    instances = [build_instance(cfg, lam, H) for H in cfg.horizons]
    mean_us, fact_us = bench_horizons(instances, cfg.iterations, cfg.repeats)
    rows = list(zip(cfg.horizons, mean_us, fact_us))
    for H, m, f in rows:
        stream.write(f"H={H} mean_iter_us={m:.2f} factorize_us={f:.2f}\n")
    _write_csv(out / "bench.csv", ["H", "mean_iter_us", "factorize_us"], rows)
    return 0


COMMANDS = {"solve": cmd_solve, "mpc": cmd_mpc, "bench": cmd_bench, "tank": cmd_mpc}


def build_parser():
    parser = argparse.ArgumentParser(prog="l1mpc", description=__doc__.splitlines()[0])
    parser.add_argument("command", choices=MODES)
    parser.add_argument("--config", type=Path, help="JSON scenario file")
    parser.add_argument("--out", type=Path, help="output directory")
    parser.add_argument("--lambda", dest="lam", type=float, help="override the 1-norm weight")
    parser.add_argument("--horizon", type=int, help="override the horizon")
    parser.add_argument("--max-iter", type=int, help="override the ADMM iteration cap")
    return parser


def main(argv=None, stream=None) -> int:
    stream = sys.stdout if stream is None else stream
    args = build_parser().parse_args(argv)
    try:
        text = args.config.read_text(encoding="utf-8") if args.config else "{}"
    except OSError as exc:
        print(f"error: cannot read config: {exc}", file=sys.stderr)
        return 2
    try:
        cfg = parse_config(text, default_mode=args.command)
        if cfg.mode != args.command:
            raise ValidationError("mode", f"config says {cfg.mode!r} but command is {args.command!r}")
        if args.lam is not None:
            if args.lam < 0:
                raise ValidationError("lambda", "must be nonnegative")
            cfg.lambdas, cfg.sweep = [args.lam], False
        if args.horizon is not None:
            if args.horizon < 1:
                raise ValidationError("horizon", "must be positive")
            cfg.horizons = [args.horizon]
        if args.max_iter is not None:
            if args.max_iter < 0:
                raise ValidationError("max_iter", "must be nonnegative")
            cfg.max_iter = args.max_iter
        out = args.out or Path(cfg.output or ".")
        return COMMANDS[cfg.mode](cfg, out, stream)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except (L1MpcError, np.linalg.LinAlgError, FloatingPointError) as exc:
        print(f"solver error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
