"""ADMM for 1-norm regularized least squares under recursive equality constraints.

Each iteration

1. minimizes the separable objective plus the augmented-Lagrangian penalty
   (closed form for x, y, u; soft thresholding for z),
2. over-relaxes the result and projects it onto the affine constraint set
   with the cached Riccati recursion,
3. accumulates the scaled dual variables.
"""

from __future__ import annotations

import enum
import time
from dataclasses import dataclass, field

import numpy as np
from scipy.linalg import cho_factor, cho_solve

from .model import ProblemInstance, StageSystem
from .riccati import KktRhs, RiccatiCache, build_projection_cost, factorize, kkt_solve

PHASES = ("step1", "relax", "step2", "step3", "residuals")


@dataclass(eq=False)
class Block:
    """One copy of the four variable groups: x (H+1), y, u, z (H each)."""

    x: np.ndarray
    y: np.ndarray
    u: np.ndarray
    z: np.ndarray

    @classmethod
    def zeros(cls, sys: StageSystem, H: int) -> "Block":
        return cls(
            np.zeros((H + 1, sys.n)),
            np.zeros((H, sys.m)),
            np.zeros((H, sys.l)),
            np.zeros((H, sys.p)),
        )

    def arrays(self):
        return (self.x, self.y, self.u, self.z)

    def copy(self) -> "Block":
        return Block(*(a.copy() for a in self.arrays()))

    def __add__(self, other):
        return Block(*(a + b for a, b in zip(self.arrays(), other.arrays())))

    def __sub__(self, other):
        return Block(*(a - b for a, b in zip(self.arrays(), other.arrays())))

    def __rmul__(self, s):
        return Block(*(s * a for a in self.arrays()))

    def flat(self) -> np.ndarray:
        return np.concatenate([a.reshape(-1) for a in self.arrays()])

    def norm(self) -> float:
        return float(np.sqrt(sum(np.vdot(a, a) for a in self.arrays())))


@dataclass(eq=False)
class SplitState:
    local: Block
    consensus: Block
    dual: Block

    @classmethod
    def cold(cls, inst: ProblemInstance) -> "SplitState":
        sys, H = inst.system, inst.H
        consensus = Block.zeros(sys, H)
        consensus.x[0] = inst.x0
        return cls(Block.zeros(sys, H), consensus, Block.zeros(sys, H))

    def copy(self) -> "SplitState":
        return SplitState(self.local.copy(), self.consensus.copy(), self.dual.copy())


class Status(enum.Enum):
    CONVERGED = "Converged"
    MAX_ITER = "MaxIter"


@dataclass(eq=False)
class SolveReport:
    status: Status
    iterations: int
    primal_residual_history: np.ndarray
    dual_residual_history: np.ndarray
    cost_history: np.ndarray
    solution: Block
    state: SplitState
    final_cost: float
    wall_time: dict = field(default_factory=dict)

    @property
    def converged(self) -> bool:
        return self.status is Status.CONVERGED


def soft_threshold(a, kappa):
    """Proximal map of ``kappa * |.|``, applied element-wise."""
    if np.any(np.asarray(kappa) < 0):
        raise ValueError("threshold must be nonnegative")
    a = np.asarray(a, dtype=float)
    return np.where(a > kappa, a - kappa, np.where(a < -kappa, a + kappa, 0.0))


def terminal_factor(inst: ProblemInstance):
    n = inst.system.n
    return cho_factor(2.0 * inst.Qterm + inst.rho * np.eye(n))


def step1_tasks(H: int):
    """Labels of the 4H+1 independent sub-problems of step 1."""
    return (
        [("x", i) for i in range(H + 1)]
        + [("y", i) for i in range(H)]
        + [("u", i) for i in range(H)]
        + [("z", i) for i in range(H)]
    )


def step1(consensus: Block, dual: Block, inst: ProblemInstance, term, order=None) -> Block:
    """Minimize the objective plus penalty for fixed consensus and dual.

    ``term`` is the Cholesky factor of ``2 Qterm + rho I``. With ``order``
    (a permutation of :func:`step1_tasks`) the sub-problems are evaluated
    one at a time in that order; the result does not depend on it.
    """
    rho = inst.rho
    y_scale = rho / (2.0 + rho)
    kappa = inst.lam / rho
    H = inst.H
    if order is None:
        x = consensus.x - dual.x
        x[H] = cho_solve(term, rho * (consensus.x[H] - dual.x[H]))
        return Block(
            x,
            y_scale * (consensus.y - dual.y),
            consensus.u - dual.u,
            soft_threshold(consensus.z - dual.z, kappa),
        )
    out = Block(*(np.empty_like(a) for a in consensus.arrays()))
    for kind, i in order:
        c = getattr(consensus, kind)[i]
        d = getattr(dual, kind)[i]
        if kind == "x":
            out.x[i] = cho_solve(term, rho * (c - d)) if i == H else c - d
        elif kind == "y":
            out.y[i] = y_scale * (c - d)
        elif kind == "u":
            out.u[i] = c - d
        else:
            out.z[i] = soft_threshold(c - d, kappa)
    return out


def over_relax(local: Block, consensus: Block, alpha: float) -> Block:
    if alpha == 1.0:
        return local
    beta = 1.0 - alpha
    return Block(*(alpha * a + beta * b for a, b in zip(local.arrays(), consensus.arrays())))


def project(point: Block, cache: RiccatiCache, sys: StageSystem, x0) -> Block:
    """Euclidean projection of ``point`` onto the constraint set.

    ``cache`` must be built from twice the projection cost.
    """
    C, D, E, F = sys.C, sys.D, sys.E, sys.F
    H = cache.H
    r_x = np.empty((H + 1, sys.n))
    r_x[:H] = 2.0 * (point.x[:H] + point.y @ C + point.z @ E)
    r_x[H] = 2.0 * point.x[H]
    r_u = 2.0 * (point.u + point.y @ D + point.z @ F)
    r_lam = np.zeros((H + 1, sys.n))
    r_lam[0] = x0
    x, u, _ = kkt_solve(cache, KktRhs(r_x, r_u, r_lam))
    return Block(x, x[:-1] @ C.T + u @ D.T, u, x[:-1] @ E.T + u @ F.T)


def step2_project(relaxed: Block, dual: Block, cache, sys, x0) -> Block:
    return project(relaxed + dual, cache, sys, x0)


def step3_duals(dual: Block, relaxed: Block, consensus: Block) -> Block:
    return Block(*(d + (a - c) for d, a, c in zip(dual.arrays(), relaxed.arrays(), consensus.arrays())))


def residuals(local: Block, consensus: Block, prev_consensus: Block, rho: float):
    """Norms of the primal residual and of the dual residual."""
    ep = (local - consensus).norm()
    ed = rho * (consensus - prev_consensus).norm()
    return ep, ed


def stop_thresholds(state: SplitState, inst: ProblemInstance):
    root_n = np.sqrt(inst.primal_dim)
    eps_pri = root_n * inst.eps_abs + inst.eps_rel * max(state.local.norm(), state.consensus.norm())
    eps_dual = root_n * inst.eps_abs + inst.eps_rel * inst.rho * state.dual.norm()
    return eps_pri, eps_dual


def check_stop(ep: float, ed: float, state: SplitState, inst: ProblemInstance) -> bool:
    eps_pri, eps_dual = stop_thresholds(state, inst)
    return ep <= eps_pri and ed <= eps_dual


def objective(inst: ProblemInstance, block: Block) -> float:
    """Cost of a (possibly infeasible) iterate, read from its own y and z."""
    xH = block.x[-1]
    return float(xH @ inst.Qterm @ xH + np.vdot(block.y, block.y) + inst.lam * np.abs(block.z).sum())


class AdmmSolver:
    """ADMM with a Riccati cache built once and reused for every solve.

    The cache depends on the system and horizon only, so one solver serves
    any number of initial states (receding-horizon use).
    """

    def __init__(self, inst: ProblemInstance, cache: RiccatiCache | None = None):
        self.inst = inst
        sys = inst.system
        if cache is None:
            cache = factorize(build_projection_cost(sys).scaled(2.0), sys.A, sys.B, inst.H)
        elif cache.H != inst.H or cache.n != sys.n or cache.l != sys.l:
            raise ValueError("Riccati cache does not match the instance")
        self.cache = cache
        self.term = terminal_factor(inst)

    def solve(self, x0=None, warm: SplitState | None = None, max_iter=None, stop=True) -> SolveReport:
        inst = self.inst
        sys, H = inst.system, inst.H
        x0 = inst.x0 if x0 is None else np.asarray(x0, float).reshape(sys.n)
        max_iter = inst.max_iter if max_iter is None else int(max_iter)
        if warm is None:
            state = SplitState.cold(inst)
            state.consensus.x[0] = x0
        else:
            state = warm.copy()
        cache, term, rho, alpha = self.cache, self.term, inst.rho, inst.alpha

        ep_hist = np.empty(max_iter)
        ed_hist = np.empty(max_iter)
        cost_hist = np.empty(max_iter)
        timing = dict.fromkeys(PHASES, 0.0)
        clock = time.perf_counter
        status = Status.MAX_ITER
        k = 0
        while k < max_iter:
            t0 = clock()
            local = step1(state.consensus, state.dual, inst, term)
            t1 = clock()
            relaxed = over_relax(local, state.consensus, alpha)
            t2 = clock()
            consensus = step2_project(relaxed, state.dual, cache, sys, x0)
            t3 = clock()
            dual = step3_duals(state.dual, relaxed, consensus)
            t4 = clock()
            prev = state.consensus
            state = SplitState(local, consensus, dual)
            ep, ed = residuals(local, consensus, prev, rho)
            ep_hist[k], ed_hist[k] = ep, ed
            cost_hist[k] = objective(inst, local)
            k += 1
            done = stop and check_stop(ep, ed, state, inst)
            t5 = clock()
            timing["step1"] += t1 - t0
            timing["relax"] += t2 - t1
            timing["step2"] += t3 - t2
            timing["step3"] += t4 - t3
            timing["residuals"] += t5 - t4
            if done:
                status = Status.CONVERGED
                break
        solution = state.consensus
        return SolveReport(
            status=status,
            iterations=k,
            primal_residual_history=ep_hist[:k],
            dual_residual_history=ed_hist[:k],
            cost_history=cost_hist[:k],
            solution=solution,
            state=state,
            final_cost=objective(inst, solution),
            wall_time=timing,
        )


def solve(inst: ProblemInstance, warm: SplitState | None = None, cache: RiccatiCache | None = None) -> SolveReport:
    return AdmmSolver(inst, cache).solve(warm=warm)
