"""Empirical and closed-form costs, mean-field gaps and epsilon-probes."""
from dataclasses import dataclass, field, replace

import numpy as np
from scipy import stats

from .errors import ConfigError
from .io import csv_text
from .numerics import TimeGridFn, midpoint_table, time_grid
from .riccati_feedback import solve_feedback_joint, solve_finite_N
from .riccati_openloop import solve_follower_response, solve_openloop
from .simulator import Perturbation, simulate_many, trapezoid_weights
from .strategy import build_feedback_policy, build_openloop_policy, feedback_policy_from_blocks


@dataclass
class CostReport:
    mode: str
    N: int
    paths: int
    leader_cost: float
    leader_se: float
    social_cost: float
    social_se: float
    closed_form_leader: float = None
    closed_form_social: float = None
    s_T: float = None
    s_T_se: float = None
    meanfield_gap: float = None
    epsilon_hat: dict = field(default_factory=dict)

    @property
    def per_capita_social(self):
        return self.social_cost

    def rows(self):
        out = [("leader_cost", self.leader_cost, self.leader_se),
               ("social_cost", self.social_cost, self.social_se)]
        for name in ("closed_form_leader", "closed_form_social", "meanfield_gap"):
            v = getattr(self, name)
            if v is not None:
                out.append((name, v, 0.0))
        if self.s_T is not None:
            out.append(("s_T", self.s_T, self.s_T_se or 0.0))
        for k, (v, se) in sorted(self.epsilon_hat.items()):
            out.append((k, v, se))
        return out

    def to_csv(self):
        rows = [(self.mode, self.N, self.paths, k, v, se) for k, v, se in self.rows()]
        return csv_text(["mode", "N", "paths", "quantity", "value", "std_error"], rows)


# ---------------------------------------------------------------- Monte-Carlo statistics


def path_samples(ens, values):
    """Per-path samples, with antithetic pairs averaged into one sample."""
    v = np.asarray(values, dtype=float)
    if np.any(ens.stream_signs < 0):
        v = 0.5 * (v[0::2] + v[1::2])
    return v


def mean_se(samples):
    s = np.asarray(samples, dtype=float)
    if s.size < 2:
        return float(s.mean()), 0.0
    return float(s.mean()), float(s.std(ddof=1) / np.sqrt(s.size))


def empirical_costs(params, ens):
    """Leader cost and per-capita social cost, mean and standard error across paths.

    Running costs use trapezoidal quadrature on the stored grid; terminal terms
    are exact (both accumulated during simulation).
    """
    J0 = mean_se(path_samples(ens, ens.J0))
    Js = mean_se(path_samples(ens, ens.Ji.mean(axis=1)))
    return CostReport(mode=ens.mode, N=ens.N, paths=ens.paths, leader_cost=J0[0], leader_se=J0[1],
                      social_cost=Js[0], social_se=Js[1], meanfield_gap=meanfield_gap(ens)["sup"])


def recompute_costs(params, ens):
    """Per-path (J0, Ji) from stored states; needs follower states in the ensemble."""
    if ens.x is None:
        raise ValueError("ensemble does not carry follower states")
    m = params.mats()
    w = trapezoid_weights(ens.t)
    x0, xN, u0, x, u = ens.x0, ens.xN, ens.u0, ens.x, ens.u
    e0 = x0 - xN @ m.Gam0.T
    run0 = np.einsum("pka,ab,pkb->pk", e0, m.Q0, e0) + np.einsum("pka,ab,pkb->pk", u0, m.R0, u0)
    eT = x0[:, -1] - xN[:, -1] @ m.Gamh0.T
    J0 = run0 @ w + np.einsum("pa,ab,pb->p", eT, m.H0, eT)
    e = x - (xN @ m.Gam.T)[:, :, None] - (x0 @ m.Gam1.T)[:, :, None]
    run = np.einsum("pkia,ab,pkib->pki", e, m.Q, e) + np.einsum("pkia,ab,pkib->pki", u, m.R, u)
    eT = x[:, -1] - (xN[:, -1] @ m.Gamh.T)[:, None] - (x0[:, -1] @ m.Gamh1.T)[:, None]
    Ji = np.einsum("pki,k->pi", run, w) + np.einsum("pia,ab,pib->pi", eT, m.H, eT)
    return J0, Ji


# ---------------------------------------------------------------- closed forms


def _second_moment(mean, cov):
    return cov + np.outer(mean, mean)


def closed_form_feedback_costs(params, fb):
    """Limit per-capita social cost and leader cost of the feedback solution at t=0."""
    ini = params.init
    S0, S = ini.leader_second_moment(), ini.follower_second_moment()
    xb0, xb = ini.leader_mean, ini.follower_mean
    k = 0
    social = (np.trace(fb.M.at(k) @ S) + xb @ fb.Mbar.at(k) @ xb + 2 * xb0 @ fb.Lambar.at(k) @ xb
              + np.trace(fb.Lam0.at(k) @ S0))
    leader = np.trace(fb.Th1.at(k) @ S0) + xb @ fb.Th2.at(k) @ xb + 2 * xb @ fb.Th3.at(k) @ xb0
    return float(social), float(leader)


def _stacked_initial(params):
    d = params.dims
    ini = params.init
    mean = np.zeros(d.s)
    mean[:d.n0] = ini.leader_mean
    mean[d.n0:d.n0 + d.n] = ini.follower_mean
    cov = np.zeros((d.s, d.s))
    cov[:d.n0, :d.n0] = ini.leader_cov
    return mean, cov


def s_T_integrand(params, fol, ens, form="derived"):
    """Remainder integrand of the open-loop social cost per path and stored time.

    ``derived``: 2 (zeta0' D0 + phi0' B0) u0 + u0' D0' K D0 u0 - phi' B Ups^+ B' phi,
    which closes the completion of squares exactly.
    ``printed``: (xbar' Gbar0' K D0 + zeta0' D0 + phi0' B0) u0 + u0' D0' K D0 u0,
    kept for comparison.
    """
    m = params.mats()
    n0, n = params.dims.n0, params.dims.n
    if ens.X is None or ens.zeta0 is None or ens.Y is None:
        raise ValueError("ensemble does not carry the stacked limit state")
    KD0 = fol.K.sample(ens.t) @ m.D0
    phi0 = ens.Y[:, :, n0 + n:2 * n0 + n]
    u0 = ens.u0
    quad = np.einsum("pka,kab,pkb->pk", u0, m.D0.T[None] @ KD0, u0)
    if form == "printed":
        xbar = ens.X[:, :, n0:n0 + n]
        lin = np.einsum("pka,ba,kbc->pkc", xbar, m.Gb0, KD0) + ens.zeta0 @ m.D0 + phi0 @ m.B0
        return np.einsum("pkc,pkc->pk", lin, u0) + quad
    if form != "derived":
        raise ValueError(f"unknown s_T form {form!r}")
    phi = ens.Y[:, :, 2 * n0 + n:]
    BUB = m.B[None] @ fol.Ups_pinv.sample(ens.t) @ m.B.T[None]
    lin = ens.zeta0 @ m.D0 + phi0 @ m.B0
    return (2 * np.einsum("pkc,pkc->pk", lin, u0) + quad
            - np.einsum("pka,kab,pkb->pk", phi, BUB, phi))


def s_T_structurally_zero(params):
    m = params.mats()
    return not (np.any(m.D0) or np.any(m.B0))


def openloop_value_at_zero(params, fol, stk):
    """(social without s_T, leader) from the Riccati solutions at t = 0."""
    d = params.dims
    ini = params.init
    S = ini.follower_second_moment()
    S0 = ini.leader_second_moment()
    xb0, xb = ini.leader_mean, ini.follower_mean
    mean, cov = _stacked_initial(params)
    SX = _second_moment(mean, cov)
    Pst = stk.Pst.at(0)
    n0, n = d.n0, d.n
    phi0 = slice(n0 + n, 2 * n0 + n)
    phi = slice(2 * n0 + n, d.s)
    Sx0 = np.zeros((n0, d.s))
    Sx0[:, :n0] = np.eye(n0)
    social = (np.trace(fol.P.at(0) @ S) + xb @ fol.Pbar.at(0) @ xb + np.trace(fol.K.at(0) @ S0)
              + 2 * xb @ fol.P0.at(0) @ xb0 + 2 * (Pst[phi] @ mean) @ xb
              + 2 * np.trace(Sx0 @ SX @ Pst[phi0].T))
    top = slice(0, n0 + n)
    leader = np.trace(Pst[top, top] @ SX[top, top])
    return float(social), float(leader)


def closed_form_openloop_costs(params, fol, stk, ens=None, form="derived"):
    """(social, leader, s_T, s_T standard error) of the open-loop solution.

    s_T is a Monte-Carlo quadrature over the stacked limit state in ``ens``.
    """
    if ens is None and not s_T_structurally_zero(params):
        raise ValueError("an ensemble of the stacked limit system is needed for s_T")
    social, leader = openloop_value_at_zero(params, fol, stk)
    if ens is None:
        sT, se = 0.0, 0.0
    else:
        w = trapezoid_weights(ens.t)
        sT, se = mean_se(path_samples(ens, s_T_integrand(params, fol, ens, form) @ w))
    return social + sT, leader, sT, se


# ---------------------------------------------------------------- exact limit costs


@dataclass
class LimitCosts:
    social: float
    leader: float
    s_T: float = None


def _moment_costs(T, drift, diffs, W0, Wi, S0, H0, Hi, extras=()):
    """Integrate E[z z'] forward with RK4 and accumulate running costs.

    ``drift``, each of ``diffs`` and the weights are tables at half steps,
    shape (2K+1, d, d). Returns the leader, follower and each extra integral.
    """
    K = (drift.shape[0] - 1) // 2
    dt = T / K
    ws = [W0, Wi] + list(extras)

    def f(h, S):
        A = drift[h]
        dS = A @ S + S @ A.T
        for G in diffs:
            dS = dS + G[h] @ S @ G[h].T
        return dS, np.array([np.sum(W[h] * S) for W in ws])

    S = S0.copy()
    acc = np.zeros(len(ws))
    for k in range(K):
        h = 2 * k
        k1, c1 = f(h, S)
        k2, c2 = f(h + 1, S + 0.5 * dt * k1)
        k3, c3 = f(h + 1, S + 0.5 * dt * k2)
        k4, c4 = f(h + 2, S + dt * k3)
        S = S + dt / 6 * (k1 + 2 * k2 + 2 * k3 + k4)
        acc += dt / 6 * (c1 + 2 * c2 + 2 * c3 + c4)
    acc[0] += np.sum(H0 * S)
    acc[1] += np.sum(Hi * S)
    return acc


def _form(L, M):
    """Weight of the quadratic form |L z|^2_M, broadcast over time."""
    return np.swapaxes(L, -1, -2) @ M @ L


def limit_costs_feedback(params, policy):
    """Exact N = inf leader and per-capita social costs of a feedback policy.

    State z = (x0, xbar, x_i) with xbar driven by the leader state only.
    """
    m = params.mats()
    d = params.dims
    n0, n = d.n0, d.n
    z = n0 + 2 * n
    K1 = policy.P0.K + 1
    P0, Pb, Kx, Kxb, K0 = (policy.P0.values, policy.Pbar.values, policy.Kx.values,
                           policy.Kxb.values, policy.K0.values)
    U0 = np.zeros((K1, d.m0, z)); U0[:, :, :n0] = P0; U0[:, :, n0:n0 + n] = Pb
    U = np.zeros((K1, d.m, z)); U[:, :, :n0] = K0; U[:, :, n0:n0 + n] = Kxb; U[:, :, n0 + n:] = Kx
    A = np.zeros((K1, z, z))
    A[:, :n0, :n0] = m.A0; A[:, :n0, n0:n0 + n] = m.G0
    A[:, :n0] += m.B0 @ U0
    A[:, n0:n0 + n, :n0] = m.F + m.B @ K0
    A[:, n0:n0 + n, n0:n0 + n] = m.A + m.G + m.B @ (Kx + Kxb)
    A[:, n0 + n:, :n0] = m.F; A[:, n0 + n:, n0:n0 + n] = m.G; A[:, n0 + n:, n0 + n:] = m.A
    A[:, n0 + n:] += m.B @ U
    G0 = np.zeros((K1, z, z))
    G0[:, :n0, :n0] = m.C0; G0[:, :n0, n0:n0 + n] = m.Gb0
    G0[:, :n0] += m.D0 @ U0
    G1 = np.zeros((K1, z, z))
    G1[:, n0 + n:, :n0] = m.Fb; G1[:, n0 + n:, n0:n0 + n] = m.Gb; G1[:, n0 + n:, n0 + n:] = m.C
    G1[:, n0 + n:] += m.D @ U
    E0 = np.zeros((n0, z)); E0[:, :n0] = np.eye(n0)
    E = np.zeros((n, z)); E[:, n0 + n:] = np.eye(n)
    e0 = lambda Gam: E0 - Gam @ _sel(n0, n, z, n0)[1]
    ei = lambda Gam, Gam1: E - Gam @ _sel(n0, n, z, n0)[1] - Gam1 @ _sel(n0, n, z, n0)[0]
    W0 = _form(e0(m.Gam0), m.Q0)[None] + _form(U0, m.R0)
    Wi = _form(ei(m.Gam, m.Gam1), m.Q)[None] + _form(U, m.R)
    mean = np.concatenate([params.init.leader_mean, params.init.follower_mean, params.init.follower_mean])
    cov = np.zeros((z, z))
    cov[:n0, :n0] = params.init.leader_cov
    cov[n0 + n:, n0 + n:] = params.init.follower_cov
    mt = midpoint_table
    lead, fol = _moment_costs(params.T, mt(A), [mt(G0), mt(G1)], mt(W0), mt(Wi),
                              _second_moment(mean, cov), _form(e0(m.Gamh0), m.H0),
                              _form(ei(m.Gamh, m.Gamh1), m.H))
    return LimitCosts(social=float(fol), leader=float(lead))


def _sel(n0, n, z, off):
    """Selectors for x0 (columns 0..n0) and xbar (columns off..off+n) in a z-vector."""
    S0 = np.zeros((n0, z)); S0[:, :n0] = np.eye(n0)
    Sb = np.zeros((n, z)); Sb[:, off:off + n] = np.eye(n)
    return S0, Sb


def limit_costs_openloop(params, fol, stk, policy):
    """Exact N = inf costs of the open-loop policy, plus the exact s_T integral.

    State z = (X, xbar_i): the stacked limit state and one auxiliary follower.
    """
    m = params.mats()
    d = params.dims
    n0, n, s = d.n0, d.n, d.s
    z = s + n
    K1 = policy.L0.K + 1
    lay = policy.layout
    L0, Ym = policy.L0.values, policy.Ymap.values
    U0 = np.zeros((K1, d.m0, z)); U0[:, :, :s] = L0
    U = np.zeros((K1, d.m, z))
    U[:, :, s:] = policy.Ki.values
    U[:, :, lay.xbar] += policy.Kb.values
    U[:, :, :s] += policy.Kphi.values @ Ym[:, lay.phi, :]
    U[:, :, lay.x0] += policy.K0.values
    A = np.zeros((K1, z, z))
    A[:, :s, :s] = stk.A.values - stk.B.values @ Ym
    A[:, :s] += stk.B0_drift.values @ U0
    A[:, s:, lay.x0] = m.F; A[:, s:, lay.xbar] = m.G; A[:, s:, s:] = m.A
    A[:, s:] += m.B @ U
    G0 = np.zeros((K1, z, z))
    G0[:, :s, :s] = stk.C0
    G0[:, :s] += stk.D0 @ U0
    G1 = np.zeros((K1, z, z))
    G1[:, s:, lay.x0] = m.Fb; G1[:, s:, lay.xbar] = m.Gb; G1[:, s:, s:] = m.C
    G1[:, s:] += m.D @ U
    S0sel, Sb = _sel(n0, n, z, n0)
    Ei = np.zeros((n, z)); Ei[:, s:] = np.eye(n)
    W0 = _form(S0sel - m.Gam0 @ Sb, m.Q0)[None] + _form(U0, m.R0)
    Wi = _form(Ei - m.Gam @ Sb - m.Gam1 @ S0sel, m.Q)[None] + _form(U, m.R)
    # s_T weight, derived form (see s_T_integrand)
    T_ = lambda M: np.swapaxes(M, 1, 2)
    Zmap = _pad(Ym[:, lay.phi0, :] @ (stk.C0[None] + stk.D0 @ L0), z)
    phi0, phi = _pad(Ym[:, lay.phi0, :], z), _pad(Ym[:, lay.phi, :], z)
    lin = T_(Zmap) @ m.D0 + T_(phi0) @ m.B0
    Ws = (2 * lin @ U0 + T_(U0) @ (m.D0.T @ fol.K.values @ m.D0) @ U0
          - T_(phi) @ m.B @ fol.Ups_pinv.values @ m.B.T @ phi)
    Ws = 0.5 * (Ws + T_(Ws))
    mean, cov = _stacked_initial(params)
    zm = np.concatenate([mean, params.init.follower_mean])
    zc = np.zeros((z, z)); zc[:s, :s] = cov; zc[s:, s:] = params.init.follower_cov
    mt = midpoint_table
    lead, foll, sT = _moment_costs(params.T, mt(A), [mt(G0), mt(G1)], mt(W0), mt(Wi),
                                   _second_moment(zm, zc), _form(S0sel - m.Gamh0 @ Sb, m.H0),
                                   _form(Ei - m.Gamh @ Sb - m.Gamh1 @ S0sel, m.H), [mt(Ws)])
    return LimitCosts(social=float(foll), leader=float(lead), s_T=float(sT))


def _pad(M, z):
    out = np.zeros(M.shape[:-1] + (z,))
    out[..., :M.shape[-1]] = M
    return out


# ---------------------------------------------------------------- mean-field gaps


def _sq(a):
    return np.sum(a * a, axis=-1)


def meanfield_gap(ens):
    """Sample second moments of the gaps to the limit system, per stored time and sup.

    Always: E|x^(N) - xbar|^2. Open-loop also: E|x0 - x0_limit|^2 and the
    follower average of E|x_i - xbar_i|^2.
    """
    if ens.xN is None or ens.xbar is None:
        raise ValueError("ensemble lacks the follower average or the limit average")
    out = {"t": ens.t, "xbar": _sq(ens.xN - ens.xbar).mean(axis=0)}
    if ens.mode == "openloop":
        if ens.x0_limit is None or ens.follower_gap is None:
            raise ValueError("open-loop ensemble lacks the limit leader or the follower gaps")
        out["x0"] = _sq(ens.x0 - ens.x0_limit).mean(axis=0)
        out["follower"] = ens.follower_gap.mean(axis=0)
    for k in [k for k in out if k != "t"]:
        out[k + "_sup"] = float(out[k].max())
    out["sup"] = out["xbar_sup"]
    return out


# ---------------------------------------------------------------- solutions bundle


@dataclass
class Solved:
    """Solutions and the equilibrium policy of one mode."""

    mode: str
    policy: object
    fol: object = None
    stk: object = None
    fb: object = None


def solve_mode(params, mode, formulation="derived"):
    if mode == "openloop":
        fol, stk = solve_openloop(params, formulation=formulation, residuals=False)
        return Solved(mode, build_openloop_policy(fol, stk), fol=fol, stk=stk)
    if mode == "feedback":
        fb = solve_feedback_joint(params, residuals=False)
        return Solved(mode, build_feedback_policy(fb), fb=fb)
    raise ConfigError(f"unknown mode {mode!r}; expected 'openloop' or 'feedback'")


def closed_forms(params, sol, ens=None):
    """(closed-form social, leader, s_T, s_T standard error) for either mode."""
    if sol.mode == "feedback":
        social, leader = closed_form_feedback_costs(params, sol.fb)
        return social, leader, None, None
    return closed_form_openloop_costs(params, sol.fol, sol.stk, ens)


def cost_report(params, sol, ens):
    rep = empirical_costs(params, ens)
    social, leader, sT, se = closed_forms(params, sol, ens)
    return replace(rep, closed_form_social=social, closed_form_leader=leader, s_T=sT, s_T_se=se)


# ---------------------------------------------------------------- epsilon probes


@dataclass(frozen=True)
class ProbeSpec:
    """Random smooth deviations: ``directions`` shapes times each magnitude.

    A direction is a sum of cosines cos(j pi t / T), j < ``harmonics``, with
    Gaussian coefficients, scaled to unit sup-norm over the grid.
    """

    directions: int = 12
    magnitudes: tuple = (0.05, 0.2, 0.5)
    harmonics: int = 3
    seed: int = 0
    followers: object = "all"

    def label(self, d, mag):
        return f"dir{d}@{mag:g}"


def smooth_direction(rng, T, K, shape, harmonics):
    t = time_grid(T, K)
    coef = rng.normal(size=(harmonics,) + tuple(shape)) / (1.0 + np.arange(harmonics))[
        (slice(None),) + (None,) * len(shape)]
    basis = np.cos(np.pi * np.outer(t, np.arange(harmonics)) / T)
    vals = np.tensordot(basis, coef, axes=1)
    top = np.abs(vals).max()
    return vals / top if top > 0 else vals


def _improvement(ens_base, ens_probe, values):
    d = path_samples(ens_base, values(ens_base) - values(ens_probe))
    return mean_se(d)


def _social(ens):
    return ens.Ji.mean(axis=1)


def _leader(ens):
    return ens.J0


def _epsilon(ens_base, probes, values):
    """max(0, best improvement) with the standard error of that probe's CRN difference."""
    table = {}
    for label, e in probes:
        table[label] = _improvement(ens_base, e, values)
    if not table:
        return {"eps": 0.0, "se": 0.0, "best": None, "improvements": table}
    best = max(table, key=lambda k: table[k][0])
    v, se = table[best]
    return {"eps": max(0.0, v), "se": se, "best": best, "improvements": table}


def follower_probes(params, policy, spec, N):
    """(label, Perturbation) pairs: own-state gain plus open-loop offset per direction."""
    d = params.dims
    K = policy.P0.K if policy.kind == "feedback" else policy.L0.K
    who = list(range(N)) if spec.followers == "all" else list(spec.followers)
    if not who or max(who) >= N or min(who) < 0:
        raise ConfigError("probe followers must be valid 0-based indices")
    rng = np.random.default_rng(spec.seed)
    out = []
    for j in range(spec.directions):
        g = smooth_direction(rng, params.T, K, (d.m, d.n), spec.harmonics)
        o = smooth_direction(rng, params.T, K, (d.m, 1), spec.harmonics)
        for mag in spec.magnitudes:
            out.append((spec.label(j, mag), Perturbation(
                who=who, gain=TimeGridFn(params.T, mag * g), offset=TimeGridFn(params.T, mag * o))))
    return out


def epsilon_probe_follower(params, sol, cfg, spec=ProbeSpec()):
    """Best per-capita social improvement of the followers' deviations over equilibrium."""
    probes = follower_probes(params, sol.policy, spec, cfg.N) if spec.directions else []
    runs = [(sol.policy, None, sol.stk)] + [(sol.policy, p, sol.stk) for _, p in probes]
    ens = simulate_many(params, runs, cfg)
    return _epsilon(ens[0], [(lab, e) for (lab, _), e in zip(probes, ens[1:])], _social)


def _feedback_leader_policy(params, P0, Pbar):
    g = lambda a: TimeGridFn(params.T, a)
    resp = solve_finite_N(params, np.inf, (g(P0), g(Pbar)))
    return feedback_policy_from_blocks(params, g(P0), g(Pbar), resp)


def leader_probes(params, sol, spec, response="resolve"):
    """(label, policy) pairs for perturbed leader gains.

    ``response="resolve"`` re-synthesizes the followers' response to each probed
    leader strategy; ``"frozen"`` keeps the equilibrium follower gains (feedback
    mode only), which is the class the feedback leader gains are optimal in.
    """
    if response not in ("resolve", "frozen"):
        raise ConfigError(f"unknown follower response {response!r}")
    d = params.dims
    rng = np.random.default_rng(spec.seed + 1)
    pol = sol.policy
    out = []
    if sol.mode == "feedback":
        K = pol.P0.K

        def probe(P0, Pbar):
            if response == "frozen":
                return replace(pol, P0=TimeGridFn(params.T, P0), Pbar=TimeGridFn(params.T, Pbar))
            return _feedback_leader_policy(params, P0, Pbar)

        if spec.directions:
            out.append(("P0x0.5", probe(0.5 * pol.P0.values, pol.Pbar.values)))
        for j in range(spec.directions):
            a = smooth_direction(rng, params.T, K, (d.m0, d.n0), spec.harmonics)
            b = smooth_direction(rng, params.T, K, (d.m0, d.n), spec.harmonics)
            for mag in spec.magnitudes:
                out.append((spec.label(j, mag), probe(pol.P0.values + mag * a,
                                                      pol.Pbar.values + mag * b)))
        return out
    if response == "frozen":
        raise ConfigError("frozen follower response applies to feedback mode only")
    K = pol.L0.K
    lay = pol.layout
    for j in range(spec.directions):
        # deviations act on the leader's physical inputs x0 and xbar
        dL = np.zeros((K + 1, d.m0, d.s))
        dL[:, :, :lay.n0 + lay.n] = smooth_direction(rng, params.T, K, (d.m0, lay.n0 + lay.n),
                                                     spec.harmonics)
        for mag in spec.magnitudes:
            gain = TimeGridFn(params.T, mag * dL)
            resp = solve_follower_response(params, midpoint_table(gain.values))
            out.append((spec.label(j, mag), pol.with_leader_offset(gain, resp)))
    return out


def epsilon_probe_leader(params, sol, cfg, spec=ProbeSpec(), probes=None, response="resolve"):
    """Best leader-cost improvement over equilibrium under perturbed leader gains.

    ``probes`` may hold precomputed ``leader_probes`` output (it does not depend on N).
    """
    if probes is None:
        probes = leader_probes(params, sol, spec, response)
    runs = [(sol.policy, None, sol.stk)] + [(p, None, sol.stk) for _, p in probes]
    ens = simulate_many(params, runs, cfg)
    return _epsilon(ens[0], [(lab, e) for (lab, _), e in zip(probes, ens[1:])], _leader)


# ---------------------------------------------------------------- convergence


@dataclass
class SlopeFit:
    slope: float
    stderr: float
    ci_low: float
    ci_high: float
    applicable: bool = True


def loglog_slope(Ns, values, level=0.95, floor=1e-20):
    """Least-squares slope of log(value) on log(N) with a t-based confidence interval.

    Not applicable when any value is at or below ``floor`` (e.g. noise-free models).
    """
    Ns = np.asarray(Ns, dtype=float)
    v = np.asarray(values, dtype=float)
    if len(Ns) < 3:
        raise ConfigError("need at least 3 follower counts for a slope")
    if np.any(~np.isfinite(v)) or np.any(v <= floor):
        return SlopeFit(np.nan, np.nan, np.nan, np.nan, applicable=False)
    r = stats.linregress(np.log(Ns), np.log(v))
    q = stats.t.ppf(0.5 + level / 2, len(Ns) - 2) * r.stderr
    return SlopeFit(float(r.slope), float(r.stderr), float(r.slope - q), float(r.slope + q))


@dataclass
class ConvergenceTable:
    mode: str
    Ns: list
    rows: list
    gap_slope: SlopeFit
    cost_gap_slope: SlopeFit = None
    eps_slopes: dict = field(default_factory=dict)

    def to_csv(self):
        keys = list(self.rows[0].keys())
        body = [tuple(r[k] for k in keys) for r in self.rows]
        return csv_text(keys, body)

    def slopes_csv(self):
        rows = [("meanfield_gap", *_fit_row(self.gap_slope))]
        if self.cost_gap_slope is not None:
            rows.append(("social_cost_gap", *_fit_row(self.cost_gap_slope)))
        for k, f in sorted(self.eps_slopes.items()):
            rows.append((k, *_fit_row(f)))
        return csv_text(["quantity", "slope", "stderr", "ci_low", "ci_high", "applicable"], rows)


def _fit_row(f):
    return f.slope, f.stderr, f.ci_low, f.ci_high, int(f.applicable)


def convergence_row(params, sol, cfg, N, probe_spec=None, lead=None):
    """One row of the convergence table: simulate N followers and collect the diagnostics."""
    c = replace(cfg, N=N, store_followers=False)
    ens = simulate_many(params, [(sol.policy, None, sol.stk)], c)[0]
    rep = cost_report(params, sol, ens)
    row = {"N": N, "paths": rep.paths, "meanfield_gap": rep.meanfield_gap,
           "social_cost": rep.social_cost, "social_se": rep.social_se,
           "leader_cost": rep.leader_cost, "leader_se": rep.leader_se,
           "closed_form_social": rep.closed_form_social,
           "closed_form_leader": rep.closed_form_leader,
           "social_cost_gap": abs(rep.social_cost - rep.closed_form_social),
           "leader_cost_gap": abs(rep.leader_cost - rep.closed_form_leader)}
    if probe_spec is not None:
        ef = epsilon_probe_follower(params, sol, c, probe_spec)
        el = epsilon_probe_leader(params, sol, c, probe_spec, probes=lead)
        row.update(eps_follower=ef["eps"], eps_follower_se=ef["se"],
                   eps_leader=el["eps"], eps_leader_se=el["se"])
    return row


def convergence_study(params, Ns, cfg, mode, probe_spec=None, sol=None, map_fn=map):
    """Solve once, then simulate each N on shared seeds; fit log-log slopes over N.

    With a ``probe_spec``, also estimates eps_follower and eps_leader per N.
    ``map_fn`` may be a process pool's map: every N uses its own noise streams,
    so the table does not depend on how entries are scheduled.
    """
    Ns = [int(N) for N in Ns]
    if len(Ns) < 3:
        raise ConfigError("convergence study needs at least 3 follower counts")
    if len(set(Ns)) != len(Ns):
        raise ConfigError("follower counts must be distinct")
    for N in Ns:
        replace(cfg, N=N).check()
    sol = sol or solve_mode(params, mode)
    lead = leader_probes(params, sol, probe_spec) if probe_spec is not None else None
    k = len(Ns)
    rows = list(map_fn(convergence_row, [params] * k, [sol] * k, [cfg] * k, Ns,
                       [probe_spec] * k, [lead] * k))
    col = lambda key: [r[key] for r in rows]
    table = ConvergenceTable(mode=mode, Ns=Ns, rows=rows,
                             gap_slope=loglog_slope(Ns, col("meanfield_gap")),
                             cost_gap_slope=loglog_slope(Ns, col("social_cost_gap")))
    if probe_spec is not None:
        table.eps_slopes = {key: loglog_slope(Ns, col(key)) for key in ("eps_follower", "eps_leader")}
    return table
