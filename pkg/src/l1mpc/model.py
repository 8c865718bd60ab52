"""Problem data, zero-order-hold discretization and the quadruple-tank model.

The stage system describes the recursive equality constraints

    x[i+1] = A x[i] + B u[i]
    y[i]   = C x[i] + D u[i]     (squared 2-norm penalty)
    z[i]   = E x[i] + F u[i]     (1-norm penalty)

for i = 0..H-1, with a terminal quadratic weight on x[H].
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.linalg import expm

from .errors import DimensionMismatch, NonFinite, NotPSD

PSD_TOL = 1e-10
SYM_TOL = 1e-12


def _as_matrix(M, rows, cols, name):
    if M is None:
        return np.zeros((rows, cols))
    M = np.array(M, dtype=float)
    if M.ndim == 1 and M.size == 0:
        M = M.reshape(0, cols)
    if M.ndim != 2:
        raise DimensionMismatch(name, f"{name} must be 2-D, got shape {M.shape}")
    return M


@dataclass(frozen=True, eq=False)
class StageSystem:
    """Matrices of the stage dynamics and of both penalized outputs.

    ``C``/``D`` and ``E``/``F`` may be omitted (or given with zero rows),
    in which case the corresponding output is empty.
    """

    A: np.ndarray
    B: np.ndarray
    C: np.ndarray | None = None
    D: np.ndarray | None = None
    E: np.ndarray | None = None
    F: np.ndarray | None = None

    def __post_init__(self):
        A = np.array(self.A, dtype=float)
        B = np.array(self.B, dtype=float)
        if A.ndim != 2:
            raise DimensionMismatch("A", f"A must be 2-D, got shape {A.shape}")
        if B.ndim != 2:
            raise DimensionMismatch("B", f"B must be 2-D, got shape {B.shape}")
        n, l = A.shape[0], B.shape[1]
        m = _row_count(self.C, self.D)
        p = _row_count(self.E, self.F)
        mats = {
            "A": A,
            "B": B,
            "C": _as_matrix(self.C, m, n, "C"),
            "D": _as_matrix(self.D, m, l, "D"),
            "E": _as_matrix(self.E, p, n, "E"),
            "F": _as_matrix(self.F, p, l, "F"),
        }
        for name, M in mats.items():
            M.setflags(write=False)
            object.__setattr__(self, name, M)
        validate_system(self)

    @property
    def n(self) -> int:
        return self.A.shape[0]

    @property
    def l(self) -> int:  # noqa: E743
        return self.B.shape[1]

    @property
    def m(self) -> int:
        return self.C.shape[0]

    @property
    def p(self) -> int:
        return self.E.shape[0]


def _row_count(M1, M2):
    for M in (M1, M2):
        if M is not None:
            M = np.asarray(M)
            return M.shape[0] if M.ndim >= 1 else 0
    return 0


def validate_system(sys: StageSystem) -> None:
    """Raise :class:`DimensionMismatch` naming the first inconsistent matrix."""
    n = sys.A.shape[0]
    if n < 1 or sys.A.shape != (n, n):
        raise DimensionMismatch("A", f"A must be square with n >= 1, got {sys.A.shape}")
    l = sys.B.shape[1]
    if l < 1 or sys.B.shape != (n, l):
        raise DimensionMismatch("B", f"B must be {n}x(l>=1), got {sys.B.shape}")
    m = sys.C.shape[0]
    p = sys.E.shape[0]
    expected = {"C": (m, n), "D": (m, l), "E": (p, n), "F": (p, l)}
    for name, shape in expected.items():
        M = getattr(sys, name)
        if M.shape != shape:
            raise DimensionMismatch(name, f"{name} must be {shape}, got {M.shape}")
    for name in "ABCDEF":
        if not np.all(np.isfinite(getattr(sys, name))):
            raise DimensionMismatch(name, f"{name} has non-finite entries")


def check_psd(M, name, tol=PSD_TOL):
    M = np.asarray(M, dtype=float)
    if M.ndim != 2 or M.shape[0] != M.shape[1]:
        raise DimensionMismatch(name, f"{name} must be square, got {M.shape}")
    if np.max(np.abs(M - M.T), initial=0.0) > SYM_TOL * max(1.0, np.max(np.abs(M), initial=0.0)):
        raise NotPSD(f"{name} is not symmetric")
    if M.size and np.linalg.eigvalsh(M)[0] < -tol:
        raise NotPSD(f"{name} has a negative eigenvalue")
    return M


@dataclass(frozen=True, eq=False)
class ProblemInstance:
    """A stage system with horizon, weights, initial state and ADMM settings.

    ``lam`` is the 1-norm weight (``lambda`` is reserved in Python).
    """

    system: StageSystem
    H: int
    Qterm: np.ndarray
    lam: float
    x0: np.ndarray
    rho: float = 1.0
    alpha: float = 1.8
    eps_abs: float = 1e-5
    eps_rel: float = 1e-4
    max_iter: int = 1000

    def __post_init__(self):
        n = self.system.n
        if int(self.H) != self.H or self.H < 1:
            raise ValueError(f"H must be a positive integer, got {self.H}")
        Qterm = check_psd(self.Qterm, "Qterm")
        if Qterm.shape != (n, n):
            raise DimensionMismatch("Qterm", f"Qterm must be {n}x{n}, got {Qterm.shape}")
        x0 = np.asarray(self.x0, dtype=float).reshape(-1)
        if x0.shape != (n,):
            raise DimensionMismatch("x0", f"x0 must have length {n}, got {x0.shape}")
        if not self.lam >= 0:
            raise ValueError("lam must be nonnegative")
        if not self.rho > 0:
            raise ValueError("rho must be positive")
        if not 1.0 <= self.alpha < 2.0:
            raise ValueError("alpha must lie in [1, 2)")
        if not (self.eps_abs > 0 and self.eps_rel > 0):
            raise ValueError("eps_abs and eps_rel must be positive")
        if int(self.max_iter) != self.max_iter or self.max_iter < 0:
            raise ValueError("max_iter must be a nonnegative integer")
        object.__setattr__(self, "H", int(self.H))
        object.__setattr__(self, "max_iter", int(self.max_iter))
        object.__setattr__(self, "Qterm", Qterm)
        object.__setattr__(self, "x0", x0)

    @property
    def primal_dim(self) -> int:
        s = self.system
        return (self.H + 1) * s.n + self.H * (s.m + s.l + s.p)


@dataclass(frozen=True, eq=False)
class AugmentedSystem:
    """Input-increment formulation: state (x, u_prev), input du, z = du."""

    base: StageSystem
    Qterm_aug: np.ndarray
    u_prev_slot: slice
    n_plant: int
    C_out: np.ndarray = field(repr=False, default=None)

    def initial_state(self, x, u_prev):
        return np.concatenate([np.asarray(x, float), np.asarray(u_prev, float)])


def discretize_zoh(Ac, Bc, T):
    """Zero-order-hold discretization via the augmented matrix exponential.

    Returns ``(Ad, Bd)`` with ``Ad = exp(Ac T)`` and
    ``Bd = int_0^T exp(Ac s) ds Bc``.
    """
    if not T > 0:
        raise ValueError("sample time must be positive")
    Ac = np.atleast_2d(np.asarray(Ac, dtype=float))
    Bc = np.asarray(Bc, dtype=float)
    if Bc.ndim == 1:
        Bc = Bc.reshape(-1, 1)
    n, l = Ac.shape[0], Bc.shape[1]
    M = np.zeros((n + l, n + l))
    M[:n, :n] = Ac
    M[:n, n:] = Bc
    with np.errstate(over="raise", invalid="raise"):
        try:
            E = expm(M * T)
        except FloatingPointError as exc:
            raise NonFinite("matrix exponential overflowed") from exc
    if not np.all(np.isfinite(E)):
        raise NonFinite("matrix exponential overflowed")
    return E[:n, :n], E[:n, n:]


def psd_factor(Q):
    """Return ``c`` with ``c.T @ c == Q`` (negative eigenvalues clamped)."""
    Q = check_psd(Q, "Q")
    w, V = np.linalg.eigh(0.5 * (Q + Q.T))
    w = np.clip(w, 0.0, None)
    return np.sqrt(w)[:, None] * V.T


def augment_delta_u(A, B, Q, Qbar, C=None) -> AugmentedSystem:
    """Build the input-increment system penalizing ``||C x||_Q^2`` and ``|du|_1``.

    ``Q`` weighs the outputs ``C x``; with ``C`` omitted the outputs are the
    states themselves. ``Qbar`` is the terminal weight on the plant state.
    """
    A = np.atleast_2d(np.asarray(A, dtype=float))
    B = np.asarray(B, dtype=float)
    if B.ndim == 1:
        B = B.reshape(-1, 1)
    n, l = A.shape[0], B.shape[1]
    if B.shape[0] != n:
        raise DimensionMismatch("B", f"B must have {n} rows, got {B.shape}")
    C = np.eye(n) if C is None else np.atleast_2d(np.asarray(C, dtype=float))
    if C.shape[1] != n:
        raise DimensionMismatch("C", f"C must have {n} columns, got {C.shape}")
    Q = np.atleast_2d(np.asarray(Q, dtype=float))
    if Q.shape != (C.shape[0], C.shape[0]):
        raise DimensionMismatch("Q", f"Q must be {C.shape[0]}x{C.shape[0]}, got {Q.shape}")
    Qbar = check_psd(np.atleast_2d(np.asarray(Qbar, dtype=float)), "Qbar")
    if Qbar.shape != (n, n):
        raise DimensionMismatch("Qbar", f"Qbar must be {n}x{n}, got {Qbar.shape}")
    c = psd_factor(Q) @ C

    At = np.block([[A, B], [np.zeros((l, n)), np.eye(l)]])
    Bt = np.vstack([B, np.eye(l)])
    Ct = np.hstack([c, np.zeros((c.shape[0], l))])
    base = StageSystem(
        At,
        Bt,
        Ct,
        np.zeros((Ct.shape[0], l)),
        np.zeros((l, n + l)),
        np.eye(l),
    )
    Qt = np.zeros((n + l, n + l))
    Qt[:n, :n] = Qbar
    return AugmentedSystem(base, Qt, slice(n, n + l), n, C)


@dataclass(frozen=True)
class TankParams:
    """Physical parameters of the quadruple-tank process (cm, s, V)."""

    a: tuple = (0.17, 0.15, 0.11, 0.08)
    At: float = 15.5
    gamma1: float = 0.625
    gamma2: float = 0.625
    k1: float = 4.14
    k2: float = 4.14
    g: float = 981.0
    x_eq: tuple = (15.0, 15.0, 3.0, 12.0)
    u_eq: tuple = (7.8, 5.25)

    def __post_init__(self):
        vals = [*self.a, self.At, self.k1, self.k2, self.g, *self.x_eq, *self.u_eq]
        if len(self.a) != 4 or len(self.x_eq) != 4 or len(self.u_eq) != 2:
            raise ValueError("tank parameters need 4 outlets, 4 levels and 2 voltages")
        if not all(v > 0 for v in vals):
            raise ValueError("tank parameters must be strictly positive")
        if not (0 < self.gamma1 < 1 and 0 < self.gamma2 < 1):
            raise ValueError("valve parameters must lie in (0, 1)")

    @property
    def tau(self) -> np.ndarray:
        a = np.asarray(self.a)
        return self.At / a * np.sqrt(2.0 * np.asarray(self.x_eq) / self.g)


def quadruple_tank_continuous(params: TankParams = TankParams()):
    """Linearized continuous-time tank model around ``params.x_eq``.

    Returns ``(Ac, Bc, C)``; the output is levels 1 and 2.
    """
    tau = params.tau
    Ac = np.diag(-1.0 / tau)
    Ac[0, 2] = 1.0 / tau[2]
    Ac[1, 3] = 1.0 / tau[3]
    At = params.At
    Bc = np.array(
        [
            [params.gamma1 * params.k1 / At, 0.0],
            [0.0, params.gamma2 * params.k2 / At],
            [0.0, (1.0 - params.gamma2) * params.k2 / At],
            [(1.0 - params.gamma1) * params.k1 / At, 0.0],
        ]
    )
    C = np.array([[1.0, 0.0, 0.0, 0.0], [0.0, 1.0, 0.0, 0.0]])
    return Ac, Bc, C


def tank_equilibrium_levels(params: TankParams, u) -> np.ndarray:
    """Levels at which the nonlinear tank is stationary for constant ``u``."""
    a1, a2, a3, a4 = params.a
    u1, u2 = u
    q3 = (1.0 - params.gamma2) * params.k2 * u2
    q4 = (1.0 - params.gamma1) * params.k1 * u1
    q1 = q3 + params.gamma1 * params.k1 * u1
    q2 = q4 + params.gamma2 * params.k2 * u2
    out = np.array([q1 / a1, q2 / a2, q3 / a3, q4 / a4])
    return out**2 / (2.0 * params.g)
