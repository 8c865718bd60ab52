import numpy as np
import pytest

from l1mpc.model import ProblemInstance, StageSystem
from l1mpc.riccati import KktRhs


def random_dynamics(rng, n, l, stable=True, radius=None):
    """Random (A, B); A is scaled to a target spectral radius."""
    A = rng.standard_normal((n, n))
    rad = np.max(np.abs(np.linalg.eigvals(A)))
    if radius is None:
        radius = rng.uniform(0.3, 0.95) if stable else rng.uniform(1.05, 1.4)
    A *= radius / rad
    B = rng.standard_normal((n, l))
    return A, B


def random_system(rng, n, l, m, p, stable=True, radius=None):
    A, B = random_dynamics(rng, n, l, stable, radius)
    return StageSystem(
        A,
        B,
        rng.standard_normal((m, n)),
        rng.standard_normal((m, l)),
        rng.standard_normal((p, n)),
        rng.standard_normal((p, l)),
    )


def random_dims(rng):
    return int(rng.integers(1, 7)), int(rng.integers(1, 4)), int(rng.integers(0, 5)), int(rng.integers(0, 5))


def random_instance(rng, H=None, lam=None, stable=True, **kwargs):
    n, l, m, p = random_dims(rng)
    sys = random_system(rng, n, l, m, p, stable)
    H = int(rng.integers(1, 26)) if H is None else H
    G = rng.standard_normal((n, n))
    Qterm = 0.5 * G @ G.T
    lam = float(rng.uniform(0.0, 1.0)) if lam is None else lam
    return ProblemInstance(sys, H, Qterm, lam, rng.standard_normal(n), **kwargs)


def random_rhs(rng, n, l, H):
    return KktRhs(
        rng.standard_normal((H + 1, n)),
        rng.standard_normal((H, l)),
        rng.standard_normal((H + 1, n)),
    )


def rel_err(a, b):
    a = np.concatenate([np.ravel(v) for v in a])
    b = np.concatenate([np.ravel(v) for v in b])
    return np.linalg.norm(a - b) / max(np.linalg.norm(b), 1e-300)


@pytest.fixture
def rng():
    return np.random.default_rng(20240611)


# one pass/fail line per acceptance criterion, printed at the end of the run
_CRITERIA = {}


@pytest.fixture
def criterion():
    def record(key, passed, detail=""):
        _CRITERIA[key] = (passed, detail)
        return passed

    return record


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for key in sorted(_CRITERIA, key=lambda k: (int(k.split(".")[0].rstrip("abcdefg")), k)):
        passed, detail = _CRITERIA[key]
        terminalreporter.write_line(f"criterion {key}: {'PASS' if passed else 'FAIL'}  {detail}")
