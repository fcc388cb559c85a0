import numpy as np
import pytest

from mfstackelberg import simulator
from mfstackelberg.errors import ConfigError, SimulationDivergedError
from mfstackelberg.model import table1_model
from mfstackelberg.numerics import TimeGridFn
from mfstackelberg.riccati_feedback import solve_feedback_joint
from mfstackelberg.riccati_openloop import solve_openloop
from mfstackelberg.simulator import (
    Perturbation, SimConfig, draw_noise, simulate_feedback, simulate_many, simulate_openloop,
    simulate_perturbed,
)
from mfstackelberg.strategy import FeedbackPolicy, build_feedback_policy, build_openloop_policy

NOISE_FREE = dict(C0=[[0.0]], D0=[[0.0]], Gbar0=[[0.0]], C=[[0.0]], D=[[0.0]], Gbar=[[0.0]],
                  Fbar=[[0.0]], leader_cov=[[0.0]], follower_cov=[[0.0]])


def _solve(p):
    fol, stk = solve_openloop(p, residuals=False)
    fb = solve_feedback_joint(p, residuals=False)
    return fol, stk, build_openloop_policy(fol, stk), fb, build_feedback_policy(fb)


@pytest.fixture(scope="module")
def table1():
    p = table1_model()
    return (p,) + _solve(p)


def zero_policy(fb):
    z = lambda f: TimeGridFn(f.T, np.zeros_like(f.values))
    return FeedbackPolicy(T=fb.T, P0=z(fb.P0), Pbar=z(fb.Pbar), Kx=z(fb.Kx), Kxb=z(fb.Kxb), K0=z(fb.K0))


def _same(a, b, names=("Z", "xN", "u0", "J0", "Ji", "x", "u")):
    return all(np.array_equal(getattr(a, k), getattr(b, k)) for k in names)


def test_zero_noise_zero_gain_zero_means_stay_zero(table1):
    p, *_, fb, _ = table1
    q = p.replace(leader_mean=[0.0], follower_mean=[0.0], **NOISE_FREE)
    ens = simulate_feedback(q, fb, zero_policy(fb), SimConfig(N=3, paths=2, seed=4))
    for name, arr in ens.blocks().items():
        assert np.abs(arr).max() == 0.0, name
    assert np.abs(ens.J0).max() == 0.0 and np.abs(ens.Ji).max() == 0.0


def test_uncontrolled_plant_ignores_policy(table1):
    p = table1[0].replace(B=[[0.0]], D=[[0.0]], B0=[[0.0]], D0=[[0.0]])
    fol, stk, olp, fb, fbp = _solve(p)
    cfg = SimConfig(N=4, paths=3, seed=9, sim_steps=400)
    a = simulate_feedback(p, fb, fbp, cfg)
    b = simulate_feedback(p, fb, zero_policy(fb), cfg)
    c = simulate_openloop(p, fol, stk, olp, cfg)
    for e in (b, c):
        assert np.array_equal(a.x0, e.x0) and np.array_equal(a.x, e.x) and np.array_equal(a.xN, e.xN)


def test_average_identity_and_determinism(table1):
    p, fol, stk, olp, fb, fbp = table1
    cfg = SimConfig(N=7, paths=3, seed=123, sim_steps=500)
    for run in (lambda: simulate_openloop(p, fol, stk, olp, cfg),
                lambda: simulate_feedback(p, fb, fbp, cfg)):
        a, b = run(), run()
        assert np.abs(a.xN - a.x.mean(axis=2)).max() <= 1e-12
        assert a.to_npz() == b.to_npz()
        assert _same(a, b)


def test_follower_limit_states_share_noise_with_realized(table1):
    p, fol, stk, olp, *_ = table1
    ens = simulate_openloop(p, fol, stk, olp, SimConfig(N=5, paths=2, seed=3, sim_steps=400))
    assert np.array_equal(ens.x[:, 0], ens.xbar_i[:, 0])
    assert np.array_equal(ens.x0[:, 0], ens.x0_limit[:, 0])
    Ym = olp.Ymap.sample(ens.t)
    np.testing.assert_allclose(ens.Y, np.einsum("kab,pkb->pka", Ym, ens.X), rtol=1e-14)
    # gap between realized and limit states is small but nonzero
    assert 0.0 < ens.follower_gap.max() < 1.0


def test_realized_leader_toggle_only_moves_followers(table1):
    # with G0 = Gbar0 = 0 the realized leader equals the limit one, so couple it
    p = table1[0].replace(G0=[[0.5]])
    fol, stk, olp, _, _ = _solve(p)
    cfg = SimConfig(N=5, paths=2, seed=3, sim_steps=400)
    a = simulate_openloop(p, fol, stk, olp, cfg)
    b = simulate_openloop(p, fol, stk, olp,
                          SimConfig(N=5, paths=2, seed=3, sim_steps=400,
                                    realized_leader_in_follower_control=False))
    assert np.array_equal(a.X, b.X)
    assert np.array_equal(a.xbar_i, b.xbar_i)
    assert not np.array_equal(a.x, b.x)


def test_zero_perturbation_is_bit_identical(table1):
    p, fol, stk, olp, fb, fbp = table1
    cfg = SimConfig(N=6, paths=2, seed=5, sim_steps=300)
    base = simulate_feedback(p, fb, fbp, cfg)
    zeros = TimeGridFn(p.T, np.zeros((p.grid_steps + 1, 1, 1)))
    for pert in (Perturbation("leader", gain=TimeGridFn(p.T, np.zeros((p.grid_steps + 1, 1, 2)))),
                 Perturbation([0, 2], gain=zeros, offset=zeros)):
        assert _same(base, simulate_perturbed(p, fbp, pert, cfg))
    base = simulate_openloop(p, fol, stk, olp, cfg)
    pert = Perturbation("leader", gain=TimeGridFn(p.T, np.zeros((p.grid_steps + 1, 1, 4))))
    assert _same(base, simulate_perturbed(p, olp, pert, cfg, stk=stk))


def test_single_follower_perturbation_acts_through_coupling_only(table1):
    p = table1[0].replace(G=[[0.0]], Gbar=[[0.0]])
    fol, stk, olp, fb, fbp = _solve(p)
    cfg = SimConfig(N=5, paths=2, seed=8, sim_steps=300)
    off = TimeGridFn(p.T, np.full((p.grid_steps + 1, 1, 1), 0.7))
    base = simulate_feedback(p, fb, fbp, cfg)
    pert = simulate_perturbed(p, fbp, Perturbation([0], offset=off), cfg)
    assert not np.array_equal(base.x[:, :, 0], pert.x[:, :, 0])
    # the other followers feel follower 0 only through the leader and xbar, which
    # see x^(N) through G0 = Gbar0 = 0 here
    assert np.array_equal(base.x[:, :, 1:], pert.x[:, :, 1:])
    assert np.array_equal(base.u[:, :, 1:], pert.u[:, :, 1:])
    # with coupling restored, the others move
    p2 = table1[0]
    _, _, _, fb2, fbp2 = table1[1:]
    b2 = simulate_feedback(p2, fb2, fbp2, cfg)
    q2 = simulate_perturbed(p2, fbp2, Perturbation([0], offset=off), cfg)
    assert not np.array_equal(b2.x[:, :, 1:], q2.x[:, :, 1:])


def test_leader_perturbation_without_leader_control(table1):
    p = table1[0].replace(B0=[[0.0]], D0=[[0.0]])
    fol, stk, olp, fb, fbp = _solve(p)
    cfg = SimConfig(N=4, paths=2, seed=2, sim_steps=300)
    g = TimeGridFn(p.T, np.full((p.grid_steps + 1, 1, 2), 0.5))
    base = simulate_feedback(p, fb, fbp, cfg)
    pert = simulate_perturbed(p, fbp, Perturbation("leader", gain=g), cfg)
    assert np.array_equal(base.x0, pert.x0)
    assert not np.array_equal(base.u0, pert.u0)


def test_backends_agree(table1, monkeypatch):
    p, fol, stk, olp, fb, fbp = table1
    cfg = SimConfig(N=6, paths=3, seed=77, sim_steps=400, store_every=7)
    g = TimeGridFn(p.T, np.full((p.grid_steps + 1, 1, 1), -0.3))
    runs = [(olp, None, stk), (fbp, Perturbation([1, 3], gain=g, offset=g), None),
            (fbp, Perturbation("leader", offset=g), None)]
    monkeypatch.setattr(simulator, "_backend", lambda: simulator.sim_kernel)
    a = simulate_many(p, runs, cfg)
    monkeypatch.setattr(simulator, "_backend", lambda: simulator.sim_numpy)
    b = simulate_many(p, runs, cfg)
    for x, y in zip(a, b):
        for k in ("Z", "xN", "u0", "x", "u", "J0", "Ji"):
            np.testing.assert_allclose(getattr(x, k), getattr(y, k), rtol=1e-11, atol=1e-11)
    np.testing.assert_allclose(a[0].follower_gap, b[0].follower_gap, rtol=1e-11, atol=1e-14)


def test_gap_shrinks_like_one_over_N(table1):
    p, fol, stk, olp, fb, fbp = table1
    sup = {}
    for N in (25, 100):
        runs = simulate_many(p, [(olp, None, stk), (fbp, None, None)],
                             SimConfig(N=N, paths=200, seed=20240601))
        sup[N] = [np.sum((e.xN - e.xbar) ** 2, axis=2).mean(axis=0).max() for e in runs]
    for mode in range(2):
        assert 2.4 <= sup[25][mode] / sup[100][mode] <= 6.7


def test_openloop_state_average_exceeds_feedback(table1):
    p, fol, stk, olp, fb, fbp = table1
    cfg = SimConfig(N=100, paths=20, seed=20240601)
    ol, fbk = simulate_many(p, [(olp, None, stk), (fbp, None, None)], cfg)
    assert ol.xbar.mean() > fbk.xbar.mean()
    assert ol.xN.mean() > fbk.xN.mean()


def test_euler_self_convergence():
    p = table1_model().replace(**NOISE_FREE)
    fol, stk, olp, fb, fbp = _solve(p)
    term = {}
    for steps in (250, 500, 1000, 2000):
        e = simulate_feedback(p, fb, fbp, SimConfig(N=2, paths=1, sim_steps=steps, seed=1))
        term[steps] = np.concatenate([e.x0[0, -1], e.xN[0, -1]])
    d1 = np.abs(term[500] - term[250]).max()
    d2 = np.abs(term[1000] - term[500]).max()
    d3 = np.abs(term[2000] - term[1000]).max()
    assert 1.4 <= d1 / d2 <= 2.9 and 1.4 <= d2 / d3 <= 2.9


def test_streams_are_independent_and_stable(table1):
    p = table1[0]
    _, _, _, dW = draw_noise(p, SimConfig(N=5, paths=1, seed=11), [0], 20000)
    c = np.corrcoef(dW[0].T)
    assert np.abs(c - np.eye(5)).max() <= 0.05
    xi0a, xia, dW0a, dWa = draw_noise(p, SimConfig(N=3, paths=2, seed=11), [0, 1], 100)
    xi0b, xib, dW0b, dWb = draw_noise(p, SimConfig(N=6, paths=2, seed=11), [0, 1], 100)
    assert np.array_equal(dW0a, dW0b) and np.array_equal(xi0a, xi0b)
    assert np.array_equal(dWa, dWb[:, :, :3]) and np.array_equal(xia, xib[:, :3])
    _, _, dW0c, _ = draw_noise(p, SimConfig(N=3, paths=2, seed=12), [0, 1], 100)
    assert not np.array_equal(dW0a, dW0c)


def test_antithetic_pairs_mirror(table1):
    p = table1[0]
    xi0, xi, dW0, dW = draw_noise(p, SimConfig(N=3, paths=4, seed=1, antithetic=True), range(4), 50)
    m0, m = p.init.leader_mean, p.init.follower_mean
    assert np.array_equal(dW0[0], -dW0[1]) and np.array_equal(dW[2], -dW[3])
    np.testing.assert_allclose(xi0[0] - m0, -(xi0[1] - m0), rtol=1e-14)
    np.testing.assert_allclose(xi[2] - m, -(xi[3] - m), rtol=1e-14)


def test_config_rejections(table1):
    p, *_, fb, fbp = table1
    for cfg in (SimConfig(N=0), SimConfig(N=2, paths=0), SimConfig(N=2, sim_steps=1),
                SimConfig(N=2, paths=3, antithetic=True), SimConfig(N=2, seed=-1)):
        with pytest.raises(ConfigError):
            simulate_feedback(p, fb, fbp, cfg)
    with pytest.raises(ConfigError):
        simulate_perturbed(p, fbp, Perturbation([5]), SimConfig(N=2))
    with pytest.raises(ConfigError):
        simulate_perturbed(p, fbp, Perturbation("leader", gain=TimeGridFn(p.T, np.zeros((3, 1, 5)))),
                           SimConfig(N=2))


def test_divergence_reports_path_and_time(table1):
    p, *_, fb, _ = table1
    q = p.replace(A=[[60.0]])
    with pytest.raises(SimulationDivergedError) as err:
        simulate_feedback(q, fb, zero_policy(fb), SimConfig(N=2, paths=2, seed=1))
    assert err.value.path == 0 and 0.3 < err.value.t < 1.0


def test_exports(table1, tmp_path):
    p, *_, fb, fbp = table1
    e = simulate_feedback(p, fb, fbp, SimConfig(N=2, paths=2, seed=1, sim_steps=20, store_every=5))
    lines = e.to_csv().splitlines()
    assert lines[0] == "path,t,block,index,value"
    per_time = 1 + 1 + 1 + 1 + 2 + 2  # x0, xbar, xN, u0, x (2 followers), u
    assert len(lines) - 1 == 2 * len(e.t) * per_time
    f = tmp_path / "e.npz"
    f.write_bytes(e.to_npz())
    z = np.load(f)
    assert np.array_equal(z["x"], e.x) and np.array_equal(z["t"], e.t)
    assert list(e.t) == [0.0, 0.25, 0.5, 0.75, 1.0]


def test_store_every_keeps_final_time(table1):
    p, *_, fb, fbp = table1
    e = simulate_feedback(p, fb, fbp, SimConfig(N=2, paths=1, sim_steps=23, store_every=10))
    assert list(e.step_index) == [0, 10, 20, 23]
    assert e.t[-1] == p.T
