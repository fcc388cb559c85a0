import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from mfstackelberg.errors import ModelValidationError
from mfstackelberg.io import read_grid_csv
from mfstackelberg.model import table1_model, weight_aggregates
from mfstackelberg.numerics import midpoint_table
from mfstackelberg.riccati_openloop import (
    assemble_stacked, solve_follower_response, solve_follower_system, solve_leader_stacked,
    solve_openloop,
)

from modelgen import random_model, zero_weight_model


@pytest.fixture(scope="module")
def table1():
    p = table1_model()
    fol, stk = solve_openloop(p)
    return p, fol, stk


def _sym_err(f):
    v = f.values
    return np.abs(v - np.swapaxes(v, 1, 2)).max()


def test_terminal_conditions_exact(table1):
    p, fol, stk = table1
    m = p.mats()
    assert np.array_equal(fol.P.values[-1], m.H)
    assert np.array_equal(fol.Pbar.values[-1], -m.HG)
    assert np.array_equal(fol.K.values[-1], m.Gamh1.T @ m.H @ m.Gamh1)
    assert np.array_equal(fol.P0.values[-1], -m.HG1)
    assert np.array_equal(fol.Kbar.values[-1], -m.HG1.T)
    assert np.array_equal(stk.Pst.values[-1], stk.H0)


def test_table1_symmetry_and_transpose_identity(table1):
    _, fol, _ = table1
    for f in (fol.P, fol.Pbar, fol.K):
        assert _sym_err(f) <= 1e-8
    assert np.abs(np.swapaxes(fol.Kbar.values, 1, 2) - fol.P0.values).max() <= 1e-8


def test_table1_residuals(table1):
    _, fol, stk = table1
    assert max(fol.residuals.values()) <= 1e-5
    assert stk.residuals["Pst"] <= 1e-6


def test_table1_matches_fine_reference(table1):
    p, fol, stk = table1
    ref_fol, ref_stk = solve_openloop(p.replace(grid_steps=32000), residuals=False)
    rel = lambda a, b: np.abs(a - b).max() / np.abs(b).max()
    assert rel(fol.P.values[0], ref_fol.P.values[0]) <= 1e-6
    assert rel(stk.Pst.values[0], ref_stk.Pst.values[0]) <= 1e-6


def test_follower_only_solve_matches_joint(table1):
    p, fol, _ = table1
    alone = solve_follower_system(p)
    assert np.abs(alone.P.values - fol.P.values).max() == 0.0
    assert alone.a3_ok


def test_leader_gain_at_terminal_time_by_hand(table1):
    p, fol, stk = table1
    m = p.mats()
    K, P0 = fol.K.values[-1], fol.P0.values[-1]
    b3 = m.C0.T @ K @ m.D0 + K @ m.B0
    b4 = P0 @ m.B0 + m.Gb0.T @ K @ m.D0
    Ups0 = m.R0 + m.D0.T @ m.H0 @ m.D0
    H0st = stk.H0
    S = stk.B0_drift.values[-1].T @ H0st + stk.D0.T @ H0st @ stk.C0
    S[:, 2:3] -= b3.T
    S[:, 3:4] -= b4.T
    np.testing.assert_allclose(stk.L0.values[-1], -np.linalg.solve(Ups0, S), atol=1e-12)


def test_stacked_block_examples(table1):
    p, fol, stk = table1
    m = p.mats()
    n0 = p.dims.n0
    np.testing.assert_array_equal(stk.Q[:n0, :n0], -m.Q0)
    np.testing.assert_array_equal(stk.H0[:n0, :n0], m.H0)
    third = stk.B0.values[:, 2:3, :]
    expect = np.array([m.C0 @ K @ m.D0 + K @ m.B0 for K in fol.K.values])
    np.testing.assert_allclose(third, expect, rtol=1e-14, atol=1e-14)


def test_stacked_structural_zeros():
    rng = np.random.default_rng(3)
    p = random_model(rng, 2, 2, 1, 1)
    fol = solve_follower_system(p, residuals=False)
    stk = assemble_stacked(p, fol)
    r = 4
    assert np.all(stk.A.values[:, :r, r:] == 0) and np.all(stk.A.values[:, r:, :r] == 0)
    assert np.all(stk.B.values[:, :, :2] == 0) and np.all(stk.B.values[:, :2, :] == 0)
    assert np.all(stk.C0[2:4, :] == 0) and np.all(stk.C0[6:, :] == 0)
    assert np.all(stk.Q[r:, :] == 0) and np.all(stk.H0[:, r:] == 0)
    assert np.all(stk.D0[2:, :] == 0)


def test_uncoupled_model_gives_block_diagonal_A():
    rng = np.random.default_rng(4)
    p = random_model(rng, 1, 2, 1, 1)
    p = p.replace(G0=np.zeros((1, 2)), Gbar0=np.zeros((1, 2)), F=np.zeros((2, 1)),
                  Fbar=np.zeros((2, 1)), Gamma1=np.zeros((2, 1)), Gammahat1=np.zeros((2, 1)))
    fol = solve_follower_system(p, residuals=False)
    assert np.abs(fol.Psi1.values).max() == 0.0
    A = assemble_stacked(p, fol).A.values
    assert np.all(A[:, 0:1, 1:3] == 0) and np.all(A[:, 1:3, 0:1] == 0)


def test_zero_follower_weights_give_zero_P():
    rng = np.random.default_rng(5)
    p = zero_weight_model(random_model(rng), leader=False)
    p = p.replace(Gamma1=np.zeros_like(p.follower_cost.Gamma1))
    fol = solve_follower_system(p, residuals=False)
    assert np.abs(fol.P.values).max() == 0.0
    assert np.abs(fol.Psi2.values).max() == 0.0


@pytest.mark.parametrize("formulation", ["derived", "printed"])
def test_zero_weights_give_zero_stacked_solution(formulation):
    rng = np.random.default_rng(6)
    p = zero_weight_model(random_model(rng))
    p = p.replace(B=np.zeros_like(p.follower_dyn.B))
    fol, stk = solve_openloop(p, formulation=formulation, residuals=False)
    assert np.abs(stk.Pst.values).max() == 0.0
    assert np.abs(stk.L0.values).max() == 0.0


@settings(max_examples=12, deadline=None)
@given(seed=st.integers(0, 2**32 - 1))
def test_random_models_keep_symmetry_and_transpose_identity(seed):
    p = random_model(np.random.default_rng(seed))
    fol, stk = solve_openloop(p, residuals=False)
    for f in (fol.P, fol.Pbar, fol.K):
        assert _sym_err(f) <= 1e-8 * max(1.0, f.max_abs())
    assert np.abs(np.swapaxes(fol.Kbar.values, 1, 2) - fol.P0.values).max() <= 1e-8
    assert np.array_equal(stk.Pst.values[-1], stk.H0)


@settings(max_examples=8, deadline=None)
@given(seed=st.integers(0, 2**32 - 1))
def test_random_model_residuals_shrink_with_refinement(seed):
    p = random_model(np.random.default_rng(seed), grid_steps=100)
    _, coarse = solve_openloop(p)
    _, fine = solve_openloop(p.replace(grid_steps=200))
    assert fine.residuals["Pst"] <= max(coarse.residuals["Pst"] / 4, 1e-12)


def test_response_map_reproduces_costate_rows(table1):
    p, _, stk = table1
    K = 400
    q = p.replace(grid_steps=K)
    _, s2 = solve_openloop(q, residuals=False)
    dL = np.zeros((2 * K + 1, p.dims.m0, p.dims.s))
    Pi = solve_follower_response(q, dL)
    r = p.dims.n0 + p.dims.n
    assert np.abs(Pi.values - s2.Pst.values[:, r:, :]).max() <= 1e-10


def test_response_map_rejects_wrong_offset_shape():
    with pytest.raises(ValueError):
        solve_follower_response(table1_model().replace(grid_steps=10), np.zeros((10, 1, 4)))


def test_grid_mismatch_rejected(table1):
    p, fol, _ = table1
    with pytest.raises(ValueError):
        assemble_stacked(p.replace(grid_steps=1000), fol)


def test_invalid_model_rejected():
    p = table1_model().replace(B=np.zeros((1, 2)))
    with pytest.raises(ModelValidationError):
        solve_follower_system(p)


def test_indefinite_follower_weight_warns():
    p = table1_model().replace(R=[[-1.0]], D=[[0.0]], grid_steps=50)
    with pytest.warns(RuntimeWarning):
        fol = solve_follower_system(p, residuals=False)
    assert not fol.a3_ok


def test_csv_export_shape(table1, tmp_path):
    p, fol, stk = table1
    f = tmp_path / "stk.csv"
    f.write_text(stk.to_csv())
    header, data = read_grid_csv(f)
    s = p.dims.s
    assert sum(h.startswith("Pst[") for h in header) == s * s
    assert data.shape[0] == p.grid_steps + 1
    assert data[0, 0] == 0.0 and data[-1, 0] == p.T
