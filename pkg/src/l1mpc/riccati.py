"""Riccati recursion for the block-banded KKT system of the projection step.

The linear system solved here is

    [ Qs   Aeq^T ] [xi ]   [r_xi ]
    [ Aeq  0     ] [lam] = [r_lam]

with ``xi = (x0, u0, ..., u[H-1], x[H])``, block-diagonal stage weights
``[[P, S], [S^T, R]]``, terminal weight ``Pterm`` and ``Aeq`` encoding
``x[0] = r_lam[0]`` and ``x[i+1] - A x[i] - B u[i] = r_lam[i+1]``.

The matrix part of the recursion depends only on the system and horizon, so
it is computed once by :func:`factorize` and reused by every
:func:`kkt_solve` call.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.linalg import LinAlgError, cholesky, solve_triangular

from .errors import DimensionMismatch, NotStabilizable, NumericalFailure
from .model import StageSystem

STABLE_MARGIN = 1e-9


@dataclass(frozen=True, eq=False)
class ProjectionCost:
    P: np.ndarray
    S: np.ndarray
    R: np.ndarray
    Pterm: np.ndarray

    def scaled(self, factor):
        return ProjectionCost(factor * self.P, factor * self.S, factor * self.R, factor * self.Pterm)

    @property
    def stage_block(self):
        return np.block([[self.P, self.S], [self.S.T, self.R]])


def build_projection_cost(sys: StageSystem) -> ProjectionCost:
    """Quadratic weights of ``||(x, y, u, z) - point||^2`` after eliminating y, z."""
    C, D, E, F = sys.C, sys.D, sys.E, sys.F
    P = np.eye(sys.n) + C.T @ C + E.T @ E
    R = np.eye(sys.l) + D.T @ D + F.T @ F
    S = C.T @ D + E.T @ F
    return ProjectionCost(0.5 * (P + P.T), S, 0.5 * (R + R.T), np.eye(sys.n))


@dataclass(frozen=True, eq=False)
class KktRhs:
    r_x: np.ndarray  # (H+1, n)
    r_u: np.ndarray  # (H, l)
    r_lam: np.ndarray  # (H+1, n)

    @property
    def H(self):
        return self.r_u.shape[0]


@dataclass(frozen=True, eq=False)
class RiccatiCache:
    """Backward-pass quantities for one (cost, A, B, H) combination.

    When ``L`` is set the recursion was run on the pre-stabilized system
    ``A - B L`` with the congruence-transformed cost; ``A`` and ``B`` keep
    the original matrices, ``Acl`` the closed-loop one.
    """

    S_seq: np.ndarray  # (H+1, n, n)
    G_chol: np.ndarray  # (H, l, l), upper Cholesky factors of Gbar
    G_inv: np.ndarray  # (H, l, l)
    Hbar_seq: np.ndarray  # (H, n, l)
    K_seq: np.ndarray  # (H, l, n), Gbar^{-1} Hbar^T
    A: np.ndarray
    B: np.ndarray
    Acl: np.ndarray
    H: int
    L: np.ndarray | None = None

    @property
    def n(self):
        return self.A.shape[0]

    @property
    def l(self):  # noqa: E743
        return self.B.shape[1]


def spectral_radius(A):
    return float(np.max(np.abs(np.linalg.eigvals(A)))) if A.size else 0.0


def prestabilize(A, B, tol=1e-10, max_iter=10_000):
    """Feedback gain ``L`` making ``A - B L`` Schur stable.

    Iterates the Riccati difference equation with identity weights to a
    fixed point. Returns a zero gain when ``A`` is already stable.
    """
    A = np.atleast_2d(np.asarray(A, dtype=float))
    B = np.asarray(B, dtype=float).reshape(A.shape[0], -1)
    n, l = B.shape
    if spectral_radius(A) < 1.0 - STABLE_MARGIN:
        return np.zeros((l, n))
    P = np.eye(n)
    for _ in range(max_iter):
        G = np.eye(l) + B.T @ P @ B
        BtPA = B.T @ P @ A
        try:
            with np.errstate(over="ignore", invalid="ignore"):
                P_new = np.eye(n) + A.T @ P @ A - BtPA.T @ np.linalg.solve(G, BtPA)
                P_new = 0.5 * (P_new + P_new.T)
        except np.linalg.LinAlgError as exc:
            raise NotStabilizable("Riccati iteration broke down") from exc
        if not np.all(np.isfinite(P_new)):
            raise NotStabilizable("Riccati iteration diverged")
        done = np.max(np.abs(P_new - P)) <= tol * max(1.0, np.max(np.abs(P_new)))
        P = P_new
        if done:
            break
    else:
        raise NotStabilizable("Riccati iteration did not converge")
    L = np.linalg.solve(np.eye(l) + B.T @ P @ B, B.T @ P @ A)
    if spectral_radius(A - B @ L) >= 1.0:
        raise NotStabilizable("closed loop is not strictly stable")
    return L


def transform_under_feedback(cost: ProjectionCost, rhs: KktRhs | None, L):
    """Rewrite cost and right-hand side for the input ``v = u + L x``.

    The stage variables transform by ``[x; u] = [[I, 0], [-L, I]] [x; v]``.
    Pass ``rhs=None`` to transform the cost only.
    """
    P, S, R = cost.P, cost.S, cost.R
    P2 = P - S @ L - L.T @ S.T + L.T @ R @ L
    cost2 = ProjectionCost(0.5 * (P2 + P2.T), S - L.T @ R, R, cost.Pterm)
    if rhs is None:
        return cost2, None
    r_x = rhs.r_x.copy()
    r_x[:-1] -= rhs.r_u @ L
    return cost2, KktRhs(r_x, rhs.r_u, rhs.r_lam)


def factorize(cost: ProjectionCost, A, B, H, prestab="auto") -> RiccatiCache:
    """Run the matrix backward recursion once.

    ``prestab`` is ``"auto"`` (pre-stabilize when A is not strictly stable),
    ``True``/``False``, or an explicit gain matrix.
    """
    A = np.atleast_2d(np.asarray(A, dtype=float))
    B = np.asarray(B, dtype=float).reshape(A.shape[0], -1)
    n, l = B.shape
    H = int(H)
    if H < 1:
        raise ValueError("horizon must be positive")
    if cost.P.shape != (n, n) or cost.R.shape != (l, l) or cost.S.shape != (n, l):
        raise DimensionMismatch("cost", "projection cost does not match (A, B)")

    if isinstance(prestab, np.ndarray):
        L = prestab
    elif prestab == "auto":
        L = prestabilize(A, B) if spectral_radius(A) >= 1.0 - STABLE_MARGIN else None
    elif prestab:
        L = prestabilize(A, B)
    else:
        L = None
    if L is not None:
        cost, _ = transform_under_feedback(cost, None, L)
        Acl = A - B @ L
    else:
        Acl = A

    P, S, R = cost.P, cost.S, cost.R
    S_seq = np.empty((H + 1, n, n))
    G_chol = np.empty((H, l, l))
    G_inv = np.empty((H, l, l))
    Hbar_seq = np.empty((H, n, l))
    K_seq = np.empty((H, l, n))
    S_seq[H] = cost.Pterm
    eye_l = np.eye(l)
    for i in range(H - 1, -1, -1):
        Sn = S_seq[i + 1]
        SA = Sn @ Acl
        Fbar = P + Acl.T @ SA
        Hbar = S + SA.T @ B
        Gbar = R + B.T @ Sn @ B
        Gbar = 0.5 * (Gbar + Gbar.T)
        try:
            U = cholesky(Gbar, lower=False)
        except LinAlgError as exc:
            raise NumericalFailure(f"Gbar at stage {i} is not positive definite") from exc
        Ginv = solve_triangular(U, solve_triangular(U, eye_l, trans="T"))
        K = Ginv @ Hbar.T
        Si = Fbar - Hbar @ K
        S_seq[i] = 0.5 * (Si + Si.T)
        G_chol[i] = U
        G_inv[i] = Ginv
        Hbar_seq[i] = Hbar
        K_seq[i] = K
    return RiccatiCache(S_seq, G_chol, G_inv, Hbar_seq, K_seq, A, B, Acl, H, L)


def kkt_solve(cache: RiccatiCache, rhs: KktRhs):
    """Solve the KKT system for ``(x, u, lam)`` with the cached recursion.

    Returns arrays of shape ``(H+1, n)``, ``(H, l)`` and ``(H+1, n)``.
    """
    H, n, l = cache.H, cache.n, cache.l
    if rhs.r_x.shape != (H + 1, n) or rhs.r_u.shape != (H, l) or rhs.r_lam.shape != (H + 1, n):
        raise DimensionMismatch("rhs", "right-hand side does not match the cache horizon")
    L = cache.L
    r_x = rhs.r_x
    if L is not None:
        r_x = r_x.copy()
        r_x[:-1] -= rhs.r_u @ L
    r_u, r_lam = rhs.r_u, rhs.r_lam
    Acl, B = cache.Acl, cache.B
    AclT, BT = Acl.T, B.T
    S_seq, G_inv, Hbar_seq, K_seq = cache.S_seq, cache.G_inv, cache.Hbar_seq, cache.K_seq

    Psi = np.empty((H + 1, n))
    kff = np.empty((H, l))
    Psi[H] = r_x[H]
    for i in range(H - 1, -1, -1):
        psi = Psi[i + 1] - S_seq[i + 1] @ r_lam[i + 1]
        k = G_inv[i] @ (r_u[i] + BT @ psi)
        kff[i] = k
        Psi[i] = r_x[i] + AclT @ psi - Hbar_seq[i] @ k

    x = np.empty((H + 1, n))
    u = np.empty((H, l))
    x[0] = r_lam[0]
    for i in range(H):
        u[i] = kff[i] - K_seq[i] @ x[i]
        x[i + 1] = Acl @ x[i] + B @ u[i] + r_lam[i + 1]
    lam = Psi - np.einsum("hij,hj->hi", S_seq, x)
    if L is not None:
        u = u - x[:-1] @ L.T
    return x, u, lam


def lq_cache_for(sys: StageSystem, H: int, scale: float = 2.0, prestab="auto") -> RiccatiCache:
    """Cache for the projection onto the constraint set of ``sys``."""
    return factorize(build_projection_cost(sys).scaled(scale), sys.A, sys.B, H, prestab=prestab)


__all__ = [
    "ProjectionCost",
    "KktRhs",
    "RiccatiCache",
    "build_projection_cost",
    "factorize",
    "kkt_solve",
    "prestabilize",
    "transform_under_feedback",
    "spectral_radius",
    "lq_cache_for",
]
