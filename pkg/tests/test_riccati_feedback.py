import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from mfstackelberg.errors import ModelValidationError, NotSolvableError, SingularityError
from mfstackelberg.io import read_grid_csv
from mfstackelberg.model import table1_model
from mfstackelberg.riccati_feedback import (
    leader_parts, rhs_feedback, rhs_finite, solve_feedback_joint, solve_finite_N,
)

from modelgen import random_model, zero_weight_model

SYMMETRIC = ("M", "Mbar", "Lam0", "Th1", "Th2")


@pytest.fixture(scope="module")
def table1():
    p = table1_model()
    return p, solve_feedback_joint(p)


def _sym_err(f):
    v = f.values
    return np.abs(v - np.swapaxes(v, 1, 2)).max()


def test_terminal_conditions_exact(table1):
    p, fb = table1
    m = p.mats()
    I = np.eye(p.dims.n)
    assert np.array_equal(fb.M.values[-1], m.H)
    assert np.array_equal(fb.Mbar.values[-1], -m.HG)
    np.testing.assert_array_equal(fb.M0.values[-1], -m.HG1)
    np.testing.assert_allclose(fb.M0.values[-1], (m.Gamh - I).T @ m.H @ m.Gamh1, atol=1e-15)
    assert np.array_equal(fb.Lam0.values[-1], m.Gamh1.T @ m.H @ m.Gamh1)
    assert np.array_equal(fb.Lambar.values[-1], -m.HG1.T)
    assert np.array_equal(fb.Th1.values[-1], m.H0)
    assert np.array_equal(fb.Th2.values[-1], m.Gamh0.T @ m.H0 @ m.Gamh0)
    assert np.array_equal(fb.Th3.values[-1], -m.Gamh0.T @ m.H0)


def test_table1_symmetry_and_transpose_identity(table1):
    _, fb = table1
    for name in SYMMETRIC:
        assert _sym_err(getattr(fb, name)) <= 1e-8, name
    assert np.abs(fb.M0.values - np.swapaxes(fb.Lambar.values, 1, 2)).max() <= 1e-8


def test_table1_sign_conditions(table1):
    p, fb = table1
    R = p.follower_cost.R
    assert min(np.linalg.eigvalsh(U - R)[0] for U in fb.Ups.values) >= -1e-8
    assert min(np.linalg.eigvalsh(M)[0] for M in fb.M.values) >= -1e-8
    assert min(np.linalg.eigvalsh(T)[0] for T in fb.Th1.values) >= -1e-8


def test_table1_residuals(table1):
    _, fb = table1
    assert max(fb.residuals.values()) <= 1e-5


def test_table1_matches_fine_reference(table1):
    p, fb = table1
    ref = solve_feedback_joint(p.replace(grid_steps=32000), residuals=False)
    rel = lambda a, b: np.abs(a - b).max() / np.abs(b).max()
    assert rel(fb.M.values[0], ref.M.values[0]) <= 1e-6
    assert rel(fb.Th1.values[0], ref.Th1.values[0]) <= 1e-6


def test_gains_recompute_from_weights(table1):
    _, fb = table1
    rng = np.random.default_rng(0)
    for k in rng.integers(0, fb.grid_steps + 1, size=20):
        U, U0 = fb.Ups.values[k], fb.Ups0.values[k]
        assert np.abs(fb.Kx.values[k] + np.linalg.solve(U, fb.Psi.values[k])).max() <= 1e-10
        assert np.abs(fb.K0.values[k] + np.linalg.solve(U, fb.Psi0.values[k])).max() <= 1e-10
        assert np.abs(fb.P0.values[k] + np.linalg.solve(U0, fb.Psi4.values[k])).max() <= 1e-10


def test_zero_weights_give_zero_solution():
    rng = np.random.default_rng(1)
    p = zero_weight_model(random_model(rng))
    z = lambda X: np.zeros_like(X)
    p = p.replace(Gamma=z(p.follower_cost.Gamma), Gamma1=z(p.follower_cost.Gamma1),
                  Gamma0=z(p.leader_cost.Gamma0), Gammahat0=z(p.leader_cost.Gammahat0))
    fb = solve_feedback_joint(p, residuals=False)
    for name in ("M", "Mbar", "M0", "Lam0", "Lambar", "Th1", "Th2", "Th3", "P0", "Pbar", "Kx",
                 "Kxb", "K0"):
        assert np.abs(getattr(fb, name).values).max() == 0.0, name


@settings(max_examples=10, deadline=None)
@given(seed=st.integers(0, 2**32 - 1))
def test_random_models_keep_symmetry_and_psd(seed):
    p = random_model(np.random.default_rng(seed))
    fb = solve_feedback_joint(p, residuals=False)
    for name in SYMMETRIC:
        f = getattr(fb, name)
        assert _sym_err(f) <= 1e-8 * max(1.0, f.max_abs()), name
    assert np.abs(fb.M0.values - np.swapaxes(fb.Lambar.values, 1, 2)).max() <= 1e-8
    assert min(np.linalg.eigvalsh(M)[0] for M in fb.M.values) >= -1e-8


def test_rejects_indefinite_weights():
    with pytest.raises(ModelValidationError) as err:
        solve_feedback_joint(table1_model().replace(R0=[[0.0]]))
    assert "R0" in str(err.value)
    with pytest.raises(ModelValidationError):
        solve_feedback_joint(table1_model().replace(Q=[[-1.0]]))


def test_singular_leader_weight_reports_time():
    p = table1_model().replace(F=[[20.0]], Gammahat0=[[10.0]], Q0=[[0.0]], R0=[[0.01]],
                               D0=[[1.0]], grid_steps=400)
    with pytest.raises(SingularityError) as err:
        solve_feedback_joint(p, residuals=False)
    assert 0.0 < err.value.t < 1.0


def test_blowup_reports_time():
    p = table1_model().replace(A0=[[15.0]], B0=[[0.0]], D0=[[0.0]], grid_steps=400)
    with pytest.raises(NotSolvableError) as err:
        solve_feedback_joint(p, residuals=False)
    assert not isinstance(err.value, SingularityError)
    assert 0.0 < err.value.t < 0.2


def test_limit_with_frozen_gains_matches_joint(table1):
    p, fb = table1
    fN = solve_finite_N(p, np.inf, (fb.P0, fb.Pbar))
    for name in ("M", "Mbar", "M0", "Lam0", "Lambar"):
        assert np.abs(getattr(fN, name).values - getattr(fb, name).values).max() <= 1e-10


def test_finite_N_converges_at_rate_one_over_N(table1):
    p, fb = table1
    Ns = np.array([10, 20, 40, 80, 160])
    gaps = [np.abs(solve_finite_N(p, N, (fb.P0, fb.Pbar)).M.values - fb.M.values).max()
            for N in Ns]
    assert all(a > b for a, b in zip(gaps, gaps[1:]))
    slope = np.polyfit(np.log(Ns), np.log(gaps), 1)[0]
    assert -1.3 <= slope <= -0.7


def test_finite_N_terminal_and_check_definitions(table1):
    p, fb = table1
    m = p.mats()
    f1 = solve_finite_N(p, 1, (fb.P0, fb.Pbar), residuals=True)
    assert np.array_equal(f1.M.values[-1], m.H)
    assert np.array_equal(f1.Mbar.values[-1], -m.HG)
    np.testing.assert_array_equal(f1.Mcheck.values, f1.M.values + f1.Mbar.values)
    U = m.R + m.D.T @ (f1.M.values[7] + f1.Mbar.values[7]) @ m.D
    np.testing.assert_allclose(f1.Ups.values[7], U, rtol=1e-14)
    assert max(f1.residuals.values()) <= 1e-5


def test_finite_N_rejects_bad_inputs(table1):
    p, fb = table1
    with pytest.raises(ValueError):
        solve_finite_N(p, 0, (fb.P0, fb.Pbar))
    with pytest.raises(ValueError):
        solve_finite_N(p.replace(grid_steps=100), 10, (fb.P0, fb.Pbar))


@settings(max_examples=25, deadline=None)
@given(seed=st.integers(0, 2**32 - 1))
def test_finite_rhs_with_infinite_N_equals_limit_rhs(seed):
    rng = np.random.default_rng(seed)
    p = random_model(rng, grid_steps=4)
    m = p.mats()
    d = p.dims
    nf = 2 * d.n * d.n + 2 * d.n * d.n0 + d.n0 * d.n0
    y = rng.normal(size=nf + d.n0 * d.n0 + d.n * d.n + d.n * d.n0)
    # symmetric follower blocks keep the state on the solution manifold
    M = rng.normal(size=(d.n, d.n))
    y[:d.n * d.n] = (M @ M.T + np.eye(d.n)).ravel()
    T1 = rng.normal(size=(d.n0, d.n0))
    y[nf:nf + d.n0 * d.n0] = (T1 @ T1.T + np.eye(d.n0)).ravel()
    full = rhs_feedback(0, y, (m, np.full(1, -1, dtype=np.int64)))
    T1m = y[nf:nf + d.n0 * d.n0].reshape(d.n0, d.n0)
    T3 = y[nf + d.n0 * d.n0 + d.n * d.n:].reshape(d.n, d.n0)
    U0, Psi4, Psi5 = leader_parts(m, T1m, T3)
    P0L = np.broadcast_to(-np.linalg.solve(U0, Psi4), (9, d.m0, d.n0)).copy()
    PbL = np.broadcast_to(-np.linalg.solve(U0, Psi5), (9, d.m0, d.n)).copy()
    part = rhs_finite(0, np.ascontiguousarray(y[:nf]),
                      (m, np.full(1, -1, dtype=np.int64), 0.0, P0L, PbL))
    assert np.abs(part - full[:nf]).max() <= 1e-12 * max(1.0, np.abs(full).max())


def test_csv_export_contract(table1, tmp_path):
    p, fb = table1
    f = tmp_path / "fb.csv"
    f.write_text(fb.to_csv())
    header, data = read_grid_csv(f)
    for name in ("M", "Mbar", "M0", "Lam0", "Lambar", "Th1", "Th2", "Th3"):
        assert f"{name}[0][0]" in header
    assert data[0, 0] == 0.0 and data[-1, 0] == p.T
