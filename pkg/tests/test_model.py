import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from l1mpc.errors import DimensionMismatch, NotPSD
from l1mpc.model import (
    ProblemInstance,
    StageSystem,
    TankParams,
    augment_delta_u,
    discretize_zoh,
    psd_factor,
    quadruple_tank_continuous,
    tank_equilibrium_levels,
)

from conftest import random_dynamics


def test_consistent_system_validates():
    sys = StageSystem(np.eye(2), np.ones((2, 1)), np.ones((1, 2)), np.ones((1, 1)), np.ones((3, 2)), np.ones((3, 1)))
    assert (sys.n, sys.l, sys.m, sys.p) == (2, 1, 1, 3)


def test_b_with_wrong_rows_is_rejected():
    with pytest.raises(DimensionMismatch) as exc:
        StageSystem(np.eye(2), np.ones((3, 1)))
    assert exc.value.name == "B"


@pytest.mark.parametrize("name", ["C", "D", "E", "F"])
def test_output_matrix_mismatch_names_matrix(name):
    mats = dict(C=np.ones((1, 2)), D=np.ones((1, 1)), E=np.ones((1, 2)), F=np.ones((1, 1)))
    mats[name] = np.ones((1, 5))
    with pytest.raises(DimensionMismatch) as exc:
        StageSystem(np.eye(2), np.ones((2, 1)), **mats)
    assert exc.value.name == name


def test_empty_outputs_allowed():
    sys = StageSystem(np.eye(2), np.ones((2, 1)))
    assert sys.m == 0 and sys.p == 0
    assert sys.C.shape == (0, 2) and sys.F.shape == (0, 1)


def test_problem_instance_rejects_bad_settings():
    sys = StageSystem(np.eye(2), np.ones((2, 1)))
    ok = dict(system=sys, H=3, Qterm=np.eye(2), lam=0.1, x0=np.zeros(2))
    ProblemInstance(**ok)
    with pytest.raises(NotPSD):
        ProblemInstance(**{**ok, "Qterm": -np.eye(2)})
    with pytest.raises(NotPSD):
        ProblemInstance(**{**ok, "Qterm": np.array([[1.0, 0.5], [0.0, 1.0]])})
    for key, val in [("lam", -1.0), ("rho", 0.0), ("alpha", 2.0), ("alpha", 0.9), ("H", 0)]:
        with pytest.raises(ValueError):
            ProblemInstance(**{**ok, key: val})
    with pytest.raises(DimensionMismatch):
        ProblemInstance(**{**ok, "x0": np.zeros(3)})


def test_zoh_zero_dynamics():
    Bc = np.array([[1.0, 2.0], [3.0, -1.0]])
    Ad, Bd = discretize_zoh(np.zeros((2, 2)), Bc, 2.0)
    np.testing.assert_allclose(Ad, np.eye(2), atol=1e-15)
    np.testing.assert_allclose(Bd, 2.0 * Bc, rtol=1e-14)


def test_zoh_scalar_closed_form():
    Ad, Bd = discretize_zoh([[-1.0]], [[1.0]], 1.0)
    assert Ad[0, 0] == pytest.approx(np.exp(-1.0), rel=1e-13)
    assert Bd[0, 0] == pytest.approx(1.0 - np.exp(-1.0), rel=1e-13)
    assert Ad[0, 0] == pytest.approx(0.3678794, abs=1e-7)
    assert Bd[0, 0] == pytest.approx(0.6321206, abs=1e-7)


def test_zoh_rejects_nonpositive_time():
    with pytest.raises(ValueError):
        discretize_zoh(np.eye(1), np.eye(1), 0.0)


def test_zoh_tank_diagonal():
    params = TankParams()
    Ac, Bc, _ = quadruple_tank_continuous(params)
    Ad, _ = discretize_zoh(Ac, Bc, 1.0)
    # triangular Ac: diagonal of exp(Ac) is exp of the diagonal
    np.testing.assert_allclose(np.diag(Ad), np.exp(-1.0 / params.tau), rtol=1e-12)


def test_zoh_matches_quadrature(rng):
    Ac, Bc = random_dynamics(rng, 3, 2, stable=True)
    T = 0.7
    Ad, Bd = discretize_zoh(Ac, Bc, T)
    # Simpson quadrature of exp(Ac s) Bc on a fine grid
    from scipy.integrate import simpson
    from scipy.linalg import expm

    s = np.linspace(0.0, T, 401)
    vals = np.array([expm(Ac * si) @ Bc for si in s])
    np.testing.assert_allclose(Bd, simpson(vals, x=s, axis=0), rtol=1e-9, atol=1e-12)


@settings(max_examples=30, deadline=None)
@given(st.floats(0.01, 3.0), st.floats(0.01, 3.0), st.integers(0, 10_000))
def test_zoh_semigroup(T1, T2, seed):
    Ac, Bc = random_dynamics(np.random.default_rng(seed), 4, 2, stable=True)
    A1, _ = discretize_zoh(Ac, Bc, T1)
    A2, _ = discretize_zoh(Ac, Bc, T2)
    A12, _ = discretize_zoh(Ac, Bc, T1 + T2)
    np.testing.assert_allclose(A1 @ A2, A12, atol=1e-10)


def test_tank_time_constant_and_gains():
    params = TankParams()
    Ac, Bc, C = quadruple_tank_continuous(params)
    tau1 = (15.5 / 0.17) * np.sqrt(2 * 15 / 981)
    assert params.tau[0] == pytest.approx(tau1, rel=1e-14)
    assert tau1 == pytest.approx(15.95, abs=0.01)
    assert Bc[0, 0] == pytest.approx(0.625 * 4.14 / 15.5, rel=1e-14)
    assert Bc[0, 0] == pytest.approx(0.16694, abs=1e-5)
    assert Bc[0, 1] == 0.0 and Bc[2, 0] == 0.0
    np.testing.assert_array_equal(C, [[1, 0, 0, 0], [0, 1, 0, 0]])


def test_tank_matrices_entrywise():
    p = TankParams(a=(0.2, 0.1, 0.3, 0.05), At=12.0, gamma1=0.4, gamma2=0.7, k1=3.0, k2=5.0, x_eq=(10, 11, 4, 6))
    Ac, Bc, _ = quadruple_tank_continuous(p)
    tau = [p.At / p.a[i] * np.sqrt(2 * p.x_eq[i] / p.g) for i in range(4)]
    expected_A = np.zeros((4, 4))
    for i in range(4):
        expected_A[i, i] = -1 / tau[i]
    expected_A[0, 2] = 1 / tau[2]
    expected_A[1, 3] = 1 / tau[3]
    expected_B = np.array(
        [[0.4 * 3.0 / 12, 0], [0, 0.7 * 5.0 / 12], [0, 0.3 * 5.0 / 12], [0.6 * 3.0 / 12, 0]]
    )
    np.testing.assert_allclose(Ac, expected_A, rtol=1e-14)
    np.testing.assert_allclose(Bc, expected_B, rtol=1e-14)


def test_tank_params_validation():
    with pytest.raises(ValueError):
        TankParams(gamma1=1.0)
    with pytest.raises(ValueError):
        TankParams(At=-1.0)


def test_equilibrium_levels_balance_flows():
    p = TankParams()
    x = tank_equilibrium_levels(p, p.u_eq)
    q = np.array(p.a) * np.sqrt(2 * p.g * x)
    assert q[2] == pytest.approx((1 - p.gamma2) * p.k2 * p.u_eq[1])
    assert q[0] == pytest.approx(q[2] + p.gamma1 * p.k1 * p.u_eq[0])


def test_augment_identity_weight():
    A, B = np.eye(4) * 0.9, np.ones((4, 2))
    aug = augment_delta_u(A, B, np.eye(4), np.zeros((4, 4)))
    base = aug.base
    assert base.A.shape == (6, 6) and base.B.shape == (6, 2)
    np.testing.assert_allclose(base.C[:, :4], np.eye(4), atol=1e-15)
    np.testing.assert_array_equal(base.F, np.eye(2))
    np.testing.assert_array_equal(base.D, 0.0)
    np.testing.assert_array_equal(base.E, np.zeros((2, 6)))
    np.testing.assert_array_equal(aug.Qterm_aug, np.zeros((6, 6)))


def test_augment_structure(rng):
    A, B = random_dynamics(rng, 4, 2)
    Qbar = np.diag([1.0, 2.0, 3.0, 4.0])
    aug = augment_delta_u(A, B, np.eye(4), Qbar)
    np.testing.assert_array_equal(aug.base.A[:4, :4], A)
    np.testing.assert_array_equal(aug.base.A[:4, 4:], B)
    np.testing.assert_array_equal(aug.base.A[4:, :4], 0.0)
    np.testing.assert_array_equal(aug.base.A[4:, 4:], np.eye(2))
    np.testing.assert_array_equal(aug.base.B, np.vstack([B, np.eye(2)]))
    np.testing.assert_array_equal(aug.Qterm_aug[:4, :4], Qbar)
    np.testing.assert_array_equal(aug.Qterm_aug[4:], 0.0)
    assert aug.u_prev_slot == slice(4, 6)


def test_augment_rejects_indefinite_weight():
    with pytest.raises(NotPSD):
        augment_delta_u(np.eye(2), np.ones((2, 1)), np.diag([1.0, -1.0]), np.zeros((2, 2)))
    with pytest.raises(NotPSD):
        augment_delta_u(np.eye(2), np.ones((2, 1)), np.eye(2), -np.eye(2))


@settings(max_examples=50, deadline=None)
@given(st.integers(1, 6), st.integers(0, 6), st.integers(0, 10_000))
def test_psd_factor_reconstructs(m, rank, seed):
    rng = np.random.default_rng(seed)
    G = rng.standard_normal((min(rank, m), m))
    Q = G.T @ G
    c = psd_factor(Q)
    assert np.max(np.abs(c.T @ c - Q)) <= 1e-10 * max(1.0, np.max(np.abs(Q)))


@settings(max_examples=30, deadline=None)
@given(st.integers(1, 5), st.integers(1, 3), st.integers(1, 12), st.integers(0, 10_000))
def test_augmented_simulation_matches_increments(n, l, H, seed):
    rng = np.random.default_rng(seed)
    A, B = random_dynamics(rng, n, l)
    aug = augment_delta_u(A, B, np.eye(n), np.eye(n))
    x = rng.standard_normal(n)
    u_prev = rng.standard_normal(l)
    du = rng.standard_normal((H, l))
    xt = aug.initial_state(x, u_prev)
    for i in range(H):
        xt = aug.base.A @ xt + aug.base.B @ du[i]
        u_prev = u_prev + du[i]
        x = A @ x + B @ u_prev
        np.testing.assert_allclose(xt[:n], x, atol=1e-12 * max(1.0, np.abs(x).max()))
        np.testing.assert_allclose(xt[n:], u_prev, atol=1e-12 * max(1.0, np.abs(u_prev).max()))


def test_augment_output_weight_with_output_map():
    C = np.array([[1.0, 0, 0, 0], [0, 1.0, 0, 0]])
    Q = np.array([[2.0, 0.5], [0.5, 1.0]])
    aug = augment_delta_u(0.5 * np.eye(4), np.ones((4, 2)), Q, np.zeros((4, 4)), C=C)
    Ct = aug.base.C[:, :4]
    np.testing.assert_allclose(Ct.T @ Ct, C.T @ Q @ C, atol=1e-12)
