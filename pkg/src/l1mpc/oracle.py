"""Brute-force reference solvers used to validate the production path.

Nothing here is fast, and nothing here shares code with the Riccati or ADMM
modules beyond the data containers: the KKT systems are assembled densely
and solved by LU, and the full 1-norm problem is solved by proximal gradient
on the condensed (state-eliminated) formulation.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np
from scipy.linalg import LinAlgWarning, lu_factor, lu_solve

from .admm import Block
from .errors import MaxIterReached, Singular
from .model import ProblemInstance, StageSystem

DENSE_LIMIT = 5000


@dataclass(frozen=True, eq=False)
class DenseKkt:
    M: np.ndarray
    rhs: np.ndarray


def _lu_solve(M, rhs):
    with warnings.catch_warnings():
        warnings.simplefilter("error", LinAlgWarning)
        try:
            lu, piv = lu_factor(M)
        except (LinAlgWarning, ValueError) as exc:
            raise Singular(str(exc)) from exc
    if np.min(np.abs(np.diag(lu)), initial=np.inf) == 0.0:
        raise Singular("zero pivot in dense KKT factorization")
    return lu_solve((lu, piv), rhs)


def _constraint_matrix(A, B, H):
    """Rows for x0 = g0 and x[i+1] - A x[i] - B u[i] = g[i+1] on v = (x0,u0,...,xH)."""
    n, l = B.shape
    nv = H * (n + l) + n
    Aeq = np.zeros(((H + 1) * n, nv))
    Aeq[:n, :n] = np.eye(n)
    for i in range(H):
        r = (i + 1) * n
        c = i * (n + l)
        Aeq[r : r + n, c : c + n] = -A
        Aeq[r : r + n, c + n : c + n + l] = -B
        Aeq[r : r + n, c + n + l : c + 2 * n + l] = np.eye(n)
    return Aeq


def _unstack(v, n, l, H):
    x = np.empty((H + 1, n))
    u = np.empty((H, l))
    for i in range(H):
        c = i * (n + l)
        x[i] = v[c : c + n]
        u[i] = v[c + n : c + n + l]
    x[H] = v[H * (n + l) :]
    return x, u


def dense_kkt_system(cost, A, B, H, rhs):
    """Solve the stage-weighted KKT system with a dense LU factorization.

    ``cost`` carries ``P``, ``S``, ``R``, ``Pterm``; ``rhs`` carries ``r_x``,
    ``r_u`` and ``r_lam``. Returns ``(x, u, lam)``.
    """
    A = np.asarray(A, float)
    B = np.asarray(B, float)
    n, l = B.shape
    nv = H * (n + l) + n
    if H * (n + l) > DENSE_LIMIT:
        raise ValueError("instance too large for a dense solve")
    Qs = np.zeros((nv, nv))
    stage = np.block([[cost.P, cost.S], [cost.S.T, cost.R]])
    r_xi = np.zeros(nv)
    for i in range(H):
        c = i * (n + l)
        Qs[c : c + n + l, c : c + n + l] = stage
        r_xi[c : c + n] = rhs.r_x[i]
        r_xi[c + n : c + n + l] = rhs.r_u[i]
    Qs[H * (n + l) :, H * (n + l) :] = cost.Pterm
    r_xi[H * (n + l) :] = rhs.r_x[H]
    Aeq = _constraint_matrix(A, B, H)
    nc = Aeq.shape[0]
    M = np.block([[Qs, Aeq.T], [Aeq, np.zeros((nc, nc))]])
    sol = _lu_solve(M, np.concatenate([r_xi, np.asarray(rhs.r_lam).reshape(-1)]))
    x, u = _unstack(sol[:nv], n, l, H)
    return x, u, sol[nv:].reshape(H + 1, n)


def assemble_projection_kkt(sys: StageSystem, H, point: Block, x0) -> DenseKkt:
    """Dense KKT matrix and right-hand side of the Euclidean projection of ``point``."""
    n, l = sys.n, sys.l
    C, D, E, F = sys.C, sys.D, sys.E, sys.F
    nv = H * (n + l) + n
    Qcal = np.zeros((nv, nv))
    q = np.zeros(nv)
    T = np.block(
        [
            [np.eye(n) + C.T @ C + E.T @ E, C.T @ D + E.T @ F],
            [(C.T @ D + E.T @ F).T, np.eye(l) + D.T @ D + F.T @ F],
        ]
    )
    for i in range(H):
        c = i * (n + l)
        Qcal[c : c + n + l, c : c + n + l] = T
        q[c : c + n] = -2.0 * (point.x[i] + C.T @ point.y[i] + E.T @ point.z[i])
        q[c + n : c + n + l] = -2.0 * (point.u[i] + D.T @ point.y[i] + F.T @ point.z[i])
    # terminal block follows from the x[H] term of the squared distance
    Qcal[H * (n + l) :, H * (n + l) :] = np.eye(n)
    q[H * (n + l) :] = -2.0 * point.x[H]
    Aeq = _constraint_matrix(sys.A, sys.B, H)
    nc = Aeq.shape[0]
    g = np.zeros(nc)
    g[:n] = x0
    M = np.block([[2.0 * Qcal, Aeq.T], [Aeq, np.zeros((nc, nc))]])
    return DenseKkt(M, np.concatenate([-q, g]))


def dense_kkt_solve(sys: StageSystem, H, point: Block, x0) -> Block:
    """Project ``point`` onto the constraint set by a dense KKT solve."""
    if H * (sys.n + sys.l) > DENSE_LIMIT:
        raise ValueError("instance too large for a dense solve")
    kkt = assemble_projection_kkt(sys, H, point, np.asarray(x0, float))
    sol = _lu_solve(kkt.M, kkt.rhs)
    x, u = _unstack(sol[: H * (sys.n + sys.l) + sys.n], sys.n, sys.l, H)
    return Block(x, x[:-1] @ sys.C.T + u @ sys.D.T, u, x[:-1] @ sys.E.T + u @ sys.F.T)


def simulate(sys: StageSystem, x0, u):
    """Roll the dynamics forward; returns ``(x, y, z)``."""
    u = np.asarray(u, float).reshape(-1, sys.l)
    H = u.shape[0]
    x = np.empty((H + 1, sys.n))
    x[0] = x0
    for i in range(H):
        x[i + 1] = sys.A @ x[i] + sys.B @ u[i]
    y = x[:-1] @ sys.C.T + u @ sys.D.T
    z = x[:-1] @ sys.E.T + u @ sys.F.T
    return x, y, z


def cost_eval(inst: ProblemInstance, x, u, y=None, z=None) -> float:
    """Objective value; missing ``y``/``z`` are rebuilt from the constraints."""
    sys = inst.system
    x = np.asarray(x, float).reshape(inst.H + 1, sys.n)
    u = np.asarray(u, float).reshape(inst.H, sys.l)
    if y is None:
        y = x[:-1] @ sys.C.T + u @ sys.D.T
    if z is None:
        z = x[:-1] @ sys.E.T + u @ sys.F.T
    xH = x[-1]
    return float(xH @ inst.Qterm @ xH + np.sum(np.square(y)) + inst.lam * np.sum(np.abs(z)))


@dataclass(frozen=True, eq=False)
class CondensedProblem:
    """``0.5 u^T Hess u + lin^T u + const + lam ||u||_1`` over stacked inputs."""

    Phi: np.ndarray  # stacked states from stacked inputs, ((H+1)n, Hl)
    Hess: np.ndarray
    lin: np.ndarray
    const: float
    lam: float
    lipschitz: float
    H: int
    l: int  # noqa: E741

    def smooth(self, u):
        return 0.5 * u @ self.Hess @ u + self.lin @ u + self.const

    def objective(self, u):
        return self.smooth(u) + self.lam * np.sum(np.abs(u))


def power_iteration(M, tol=1e-12, max_iter=10_000, seed=0):
    v = np.random.default_rng(seed).standard_normal(M.shape[0])
    nv = np.linalg.norm(v)
    if nv == 0.0:
        return 0.0
    v /= nv
    est = 0.0
    for _ in range(max_iter):
        w = M @ v
        new = float(v @ w)
        nw = np.linalg.norm(w)
        if nw == 0.0:
            return 0.0
        v = w / nw
        if abs(new - est) <= tol * max(abs(new), 1e-300):
            return new
        est = new
    return est


def condense(inst: ProblemInstance) -> CondensedProblem:
    """Eliminate the states; requires the 1-norm to act on the inputs (E=0, F=I)."""
    sys = inst.system
    n, l, H = sys.n, sys.l, inst.H
    if sys.p != l or np.any(sys.E != 0) or np.any(sys.F != np.eye(l)):
        raise ValueError("condensing oracle needs E = 0 and F = I")
    # x = Phi u + Psi x0
    Phi = np.zeros(((H + 1) * n, H * l))
    Psi = np.zeros(((H + 1) * n, n))
    Psi[:n] = np.eye(n)
    for i in range(H):
        r, rn = i * n, (i + 1) * n
        Psi[rn : rn + n] = sys.A @ Psi[r : r + n]
        Phi[rn : rn + n] = sys.A @ Phi[r : r + n]
        Phi[rn : rn + n, i * l : (i + 1) * l] += sys.B
    x0 = inst.x0
    hx = Psi @ x0
    Gy = np.zeros((H * sys.m, H * l))
    hy = np.zeros(H * sys.m)
    for i in range(H):
        rows = slice(i * sys.m, (i + 1) * sys.m)
        Gy[rows] = sys.C @ Phi[i * n : (i + 1) * n]
        Gy[rows, i * l : (i + 1) * l] += sys.D
        hy[rows] = sys.C @ hx[i * n : (i + 1) * n]
    GH = Phi[H * n :]
    hH = hx[H * n :]
    Qt = inst.Qterm
    Hess = 2.0 * (Gy.T @ Gy + GH.T @ Qt @ GH)
    Hess = 0.5 * (Hess + Hess.T)
    lin = 2.0 * (Gy.T @ hy + GH.T @ Qt @ hH)
    const = float(hy @ hy + hH @ Qt @ hH)
    lip = power_iteration(Hess) * 1.001
    return CondensedProblem(Phi, Hess, lin, const, float(inst.lam), lip, H, l)


def soft(a, kappa):
    return np.sign(a) * np.maximum(np.abs(a) - kappa, 0.0)


def ista_solve(cp: CondensedProblem, tol=1e-9, max_iter=2_000_000, u0=None, history=None):
    """Proximal gradient with fixed step ``1/lipschitz``.

    Stops when the objective decrease of one step falls below ``tol``.
    The objective is checked to be non-increasing at every step.
    """
    if not cp.lipschitz > 0:
        raise ValueError("lipschitz constant must be positive")
    t = 1.0 / cp.lipschitz
    u = np.zeros(cp.H * cp.l) if u0 is None else np.asarray(u0, float).reshape(-1).copy()
    f = cp.objective(u)
    if history is not None:
        history.append(f)
    for _ in range(max_iter):
        u_new = soft(u - t * (cp.Hess @ u + cp.lin), t * cp.lam)
        f_new = cp.objective(u_new)
        assert f_new <= f + 1e-12 * max(1.0, abs(f)), "ISTA objective increased"
        if history is not None:
            history.append(f_new)
        done = f - f_new < tol
        u, f = u_new, f_new
        if done:
            return u.reshape(cp.H, cp.l)
    raise MaxIterReached(f"ISTA did not reach tolerance {tol} in {max_iter} iterations")


def lq_solve(inst: ProblemInstance):
    """Direct solution of the problem without the 1-norm term.

    Returns ``(x, u)``; requires ``D^T D + B^T V B`` to stay invertible.
    """
    sys = inst.system
    A, B, C, D = sys.A, sys.B, sys.C, sys.D
    H = inst.H
    V = inst.Qterm.copy()
    gains = [None] * H
    for i in range(H - 1, -1, -1):
        Quu = D.T @ D + B.T @ V @ B
        Qux = D.T @ C + B.T @ V @ A
        Qxx = C.T @ C + A.T @ V @ A
        K = np.linalg.solve(Quu, Qux)
        V = Qxx - Qux.T @ K
        V = 0.5 * (V + V.T)
        gains[i] = K
    x = np.empty((H + 1, sys.n))
    u = np.empty((H, sys.l))
    x[0] = inst.x0
    for i in range(H):
        u[i] = -gains[i] @ x[i]
        x[i + 1] = A @ x[i] + B @ u[i]
    return x, u
