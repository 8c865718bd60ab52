"""Receding-horizon control with input-increment sparsity, plus plant models.

The controller works in deviation coordinates around ``(x_eq, u_eq)``.
Each sample it estimates the state with a steady-state Kalman filter,
solves the input-increment problem from ``(x_hat, u_prev - u_eq)`` with
ADMM (warm started from the previous sample), applies the first increment
and advances the plant.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np

from . import riccati
from .admm import AdmmSolver, SolveReport
from .errors import MaxIterReached, NotDetectable
from .model import (
    AugmentedSystem,
    ProblemInstance,
    TankParams,
    augment_delta_u,
    discretize_zoh,
    quadruple_tank_continuous,
)

TANK_X_INIT = (16.0, 16.0, 4.0, 13.0)
EXAMPLE_LAMBDAS = (0.05, 0.1, 2.0, 5.0)


@dataclass(eq=False)
class MpcConfig:
    aug: AugmentedSystem
    H: int
    lam: float
    rho: float = 1.0
    alpha: float = 1.8
    eps_abs: float = 1e-5
    eps_rel: float = 1e-4
    max_iter: int = 1000
    sample_time: float = 1.0
    steps: int = 10
    warm_start: bool = True
    strict: bool = False
    x_eq: np.ndarray | None = None
    u_eq: np.ndarray | None = None
    process_cov: np.ndarray | None = None
    meas_cov: np.ndarray | None = None

    def __post_init__(self):
        n, l = self.aug.n_plant, self.aug.base.l
        self.x_eq = np.zeros(n) if self.x_eq is None else np.asarray(self.x_eq, float)
        self.u_eq = np.zeros(l) if self.u_eq is None else np.asarray(self.u_eq, float)
        m = self.C.shape[0]
        if self.process_cov is None:
            self.process_cov = 1e-4 * np.eye(n)
        if self.meas_cov is None:
            self.meas_cov = 1e-4 * np.eye(m)
        if self.steps < 0:
            raise ValueError("steps must be nonnegative")

    @property
    def Ad(self):
        n = self.aug.n_plant
        return self.aug.base.A[:n, :n]

    @property
    def Bd(self):
        n = self.aug.n_plant
        return self.aug.base.B[:n]

    @property
    def C(self):
        return self.aug.C_out

    def instance(self, x0=None) -> ProblemInstance:
        base = self.aug.base
        return ProblemInstance(
            base,
            self.H,
            self.aug.Qterm_aug,
            self.lam,
            np.zeros(base.n) if x0 is None else x0,
            rho=self.rho,
            alpha=self.alpha,
            eps_abs=self.eps_abs,
            eps_rel=self.eps_rel,
            max_iter=self.max_iter,
        )


@dataclass(frozen=True, eq=False)
class StepRecord:
    time: float
    state: np.ndarray
    input: np.ndarray
    output: np.ndarray
    estimate: np.ndarray
    du: np.ndarray
    iterations: int
    solve_ms: float


@dataclass(eq=False)
class Trajectory:
    records: list = field(default_factory=list)
    reports: list = field(default_factory=list)

    def __len__(self):
        return len(self.records)

    def _stack(self, name, width):
        if not self.records:
            return np.zeros((0, width))
        return np.array([getattr(r, name) for r in self.records])

    @property
    def times(self):
        return np.array([r.time for r in self.records])

    @property
    def states(self):
        return self._stack("state", 0)

    @property
    def inputs(self):
        return self._stack("input", 0)

    @property
    def outputs(self):
        return self._stack("output", 0)

    @property
    def du(self):
        return self._stack("du", 0)

    @property
    def iterations(self):
        return np.array([r.iterations for r in self.records], dtype=int)


@dataclass(eq=False)
class ObserverState:
    estimate: np.ndarray
    gain: np.ndarray
    process_cov: np.ndarray
    meas_cov: np.ndarray


def kalman_gain(Ad, C, Qw, Rv, tol=1e-10, max_iter=10_000):
    """Steady-state filter gain from the prediction Riccati iteration."""
    Ad = np.atleast_2d(np.asarray(Ad, float))
    C = np.atleast_2d(np.asarray(C, float))
    Qw = np.atleast_2d(np.asarray(Qw, float))
    Rv = np.atleast_2d(np.asarray(Rv, float))
    P = Qw.copy()
    for _ in range(max_iter):
        with np.errstate(over="ignore", invalid="ignore"):
            CPC = C @ P @ C.T + Rv
            APC = Ad @ P @ C.T
            P_new = Ad @ P @ Ad.T + Qw - APC @ np.linalg.solve(CPC, APC.T)
            P_new = 0.5 * (P_new + P_new.T)
        if not np.all(np.isfinite(P_new)):
            raise NotDetectable("filter Riccati iteration diverged")
        done = np.max(np.abs(P_new - P)) <= tol
        P = P_new
        if done:
            break
    else:
        raise NotDetectable("filter Riccati iteration did not converge")
    return np.linalg.solve(C @ P @ C.T + Rv, C @ P).T


def observer_update(obs: ObserverState, Ad, Bd, C, u, y) -> ObserverState:
    """Predict with the model, then correct with the new measurement."""
    x = Ad @ obs.estimate + Bd @ np.asarray(u, float)
    x = x + obs.gain @ (np.asarray(y, float) - C @ x)
    return ObserverState(x, obs.gain, obs.process_cov, obs.meas_cov)


def tank_vector_field(params: TankParams, x, u):
    """Time derivative of the four tank levels (Torricelli outflows)."""
    a1, a2, a3, a4 = params.a
    At, g = params.At, params.g
    x = np.maximum(np.asarray(x, float), 0.0)
    q = np.sqrt(2.0 * g * x)
    u1, u2 = u
    return np.array(
        [
            (-a1 * q[0] + a3 * q[2] + params.gamma1 * params.k1 * u1) / At,
            (-a2 * q[1] + a4 * q[3] + params.gamma2 * params.k2 * u2) / At,
            (-a3 * q[2] + (1.0 - params.gamma2) * params.k2 * u2) / At,
            (-a4 * q[3] + (1.0 - params.gamma1) * params.k1 * u1) / At,
        ]
    )


def plant_step_nonlinear(params: TankParams, x, u, dt, substeps=10):
    """Advance the nonlinear tank by ``dt`` with classical RK4."""
    h = dt / substeps
    x = np.asarray(x, float).copy()
    for _ in range(substeps):
        k1 = tank_vector_field(params, x, u)
        k2 = tank_vector_field(params, x + 0.5 * h * k1, u)
        k3 = tank_vector_field(params, x + 0.5 * h * k2, u)
        k4 = tank_vector_field(params, x + h * k3, u)
        x = np.maximum(x + (h / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4), 0.0)
    return x


class LinearPlant:
    """Discrete linear model acting on physical coordinates around an equilibrium."""

    def __init__(self, Ad, Bd, C, x_eq=None, u_eq=None):
        self.Ad, self.Bd, self.C = Ad, Bd, C
        self.x_eq = np.zeros(Ad.shape[0]) if x_eq is None else np.asarray(x_eq, float)
        self.u_eq = np.zeros(Bd.shape[1]) if u_eq is None else np.asarray(u_eq, float)

    def step(self, x, u):
        return self.x_eq + self.Ad @ (x - self.x_eq) + self.Bd @ (u - self.u_eq)

    def output(self, x):
        return self.C @ x


class TankPlant:
    def __init__(self, params: TankParams, dt=1.0, substeps=10):
        self.params, self.dt, self.substeps = params, dt, substeps

    def step(self, x, u):
        return plant_step_nonlinear(self.params, x, u, self.dt, self.substeps)

    def output(self, x):
        return np.asarray(x, float)[:2].copy()


def run_mpc(cfg: MpcConfig, plant, x_init, u_init, estimate0=None, solver=None) -> Trajectory:
    """Closed-loop receding-horizon simulation.

    ``x_init``/``u_init`` are physical; ``estimate0`` is the initial state
    estimate in deviation coordinates (defaults to the exact deviation).
    The applied increment is the sparse (soft-thresholded) copy of du[0].
    """
    traj = Trajectory()
    if cfg.steps == 0:
        return traj
    if solver is None:
        solver = AdmmSolver(cfg.instance(), _factorize(cfg))
    Ad, Bd, C = cfg.Ad, cfg.Bd, cfg.C
    y_eq = C @ cfg.x_eq
    gain = kalman_gain(Ad, C, cfg.process_cov, cfg.meas_cov)
    x = np.asarray(x_init, float).copy()
    u_prev = np.asarray(u_init, float).copy()
    est0 = x - cfg.x_eq if estimate0 is None else np.asarray(estimate0, float)
    obs = ObserverState(est0, gain, cfg.process_cov, cfg.meas_cov)
    warm = None
    for t in range(cfg.steps):
        y = plant.output(x)
        if t > 0:
            obs = observer_update(obs, Ad, Bd, C, u_prev - cfg.u_eq, y - y_eq)
        x_aug = np.concatenate([obs.estimate, u_prev - cfg.u_eq])
        t0 = time.perf_counter()
        rep: SolveReport = solver.solve(x0=x_aug, warm=warm if cfg.warm_start else None)
        solve_ms = 1e3 * (time.perf_counter() - t0)
        if cfg.strict and not rep.converged:
            raise MaxIterReached(f"ADMM hit max_iter={cfg.max_iter} at step {t}")
        du0 = rep.state.local.z[0].copy()
        u = u_prev + du0
        traj.records.append(
            StepRecord(t * cfg.sample_time, x.copy(), u.copy(), y.copy(), obs.estimate.copy(), du0, rep.iterations, solve_ms)
        )
        traj.reports.append(rep)
        x = plant.step(x, u)
        u_prev = u
        warm = rep.state
    return traj


def _factorize(cfg: MpcConfig):
    base = cfg.aug.base
    cost = riccati.build_projection_cost(base).scaled(2.0)
    return riccati.factorize(cost, base.A, base.B, cfg.H)


def tank_model(params: TankParams = TankParams(), sample_time=1.0, Q=None, Qbar=None) -> AugmentedSystem:
    """Input-increment tank model with output weight ``Q`` (default identity)."""
    Ac, Bc, C = quadruple_tank_continuous(params)
    Ad, Bd = discretize_zoh(Ac, Bc, sample_time)
    Q = np.eye(2) if Q is None else Q
    Qbar = np.zeros((4, 4)) if Qbar is None else Qbar
    return augment_delta_u(Ad, Bd, Q, Qbar, C=C)


def tank_config(lam, H=5, params: TankParams = TankParams(), **kwargs) -> MpcConfig:
    sample_time = kwargs.pop("sample_time", 1.0)
    return MpcConfig(
        tank_model(params, sample_time),
        H,
        lam,
        sample_time=sample_time,
        x_eq=np.array(params.x_eq),
        u_eq=np.array(params.u_eq),
        **kwargs,
    )


def tank_plant(kind: str, cfg: MpcConfig, params: TankParams = TankParams()):
    if kind == "nonlinear":
        return TankPlant(params, cfg.sample_time)
    if kind == "linear":
        return LinearPlant(cfg.Ad, cfg.Bd, cfg.C, cfg.x_eq, cfg.u_eq)
    raise ValueError(f"unknown plant {kind!r}")


def tank_first_problem(lam=0.1, H=5, params: TankParams = TankParams(), **kwargs) -> ProblemInstance:
    """The first optimization problem of the tank closed loop."""
    cfg = tank_config(lam, H, params, **kwargs)
    x0 = np.concatenate([np.array(TANK_X_INIT) - cfg.x_eq, np.zeros(2)])
    return cfg.instance(x0)


def run_tank(lam, H=5, steps=10, plant="nonlinear", params: TankParams = TankParams(), **kwargs) -> Trajectory:
    cfg = tank_config(lam, H, params, steps=steps, **kwargs)
    return run_mpc(cfg, tank_plant(plant, cfg, params), np.array(TANK_X_INIT), np.array(params.u_eq))
