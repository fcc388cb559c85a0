"""Feedback pipeline: the coupled limit system (M-blocks with the leader's Theta
system) and the finite-N follower system with frozen leader gains.

Follower blocks M, Mbar (n x n), M0 (n x n0), Lam0 (n0 x n0), Lambar (n0 x n);
leader blocks Th1 (n0 x n0), Th2 (n x n), Th3 (n x n0). The leader's value is
x0'Th1 x0 + xbar'Th2 xbar + 2 xbar'Th3 x0 and its gains are
P0 = -Ups0^-1 Psi4, Pbar = -Ups0^-1 Psi5 with

    Ups0 = R0 + D0'Th1 D0,  Psi4 = B0'Th1 + D0'Th1 C0,  Psi5 = B0'Th3' + D0'Th1 Gbar0.

For N followers the weights use Mc = M + Mbar/N (Mc = M in the limit).
"""
from dataclasses import dataclass, field

import numpy as np

from ._jit import njit
from .errors import ModelValidationError, SingularityError
from .io import grid_block_csv
from .model import validate
from .numerics import TimeGridFn, escaped, midpoint_table, run_backward, staggered_residual

SINGULAR_TOL = 1e-10


@njit
def fb_sizes(m):
    return m.A0.shape[0], m.A.shape[0]


@njit
def unpack_m(y, n0, n):
    o = 0
    M = y[o:o + n * n].reshape((n, n)); o += n * n
    Mb = y[o:o + n * n].reshape((n, n)); o += n * n
    M0 = y[o:o + n * n0].reshape((n, n0)); o += n * n0
    L0 = y[o:o + n0 * n0].reshape((n0, n0)); o += n0 * n0
    Lb = y[o:o + n0 * n].reshape((n0, n)); o += n0 * n
    return M, Mb, M0, L0, Lb, o


@njit
def unpack_theta(y, o, n0, n):
    T1 = y[o:o + n0 * n0].reshape((n0, n0)); o += n0 * n0
    T2 = y[o:o + n * n].reshape((n, n)); o += n * n
    T3 = y[o:o + n * n0].reshape((n, n0)); o += n * n0
    return T1, T2, T3, o


@njit
def pack(out, o, X):
    sz = X.size
    out[o:o + sz] = np.ascontiguousarray(X).ravel()
    return o + sz


@njit
def min_eig(S):
    return np.linalg.eigvalsh(0.5 * (S + S.T))[0]


@njit
def follower_parts(m, M, Mb, M0, ninv):
    Mc = M + ninv * Mb
    Ups = m.R + m.D.T @ Mc @ m.D
    Psi = m.B.T @ M + m.D.T @ Mc @ m.C
    Psib = m.B.T @ Mb + m.D.T @ Mc @ m.Gb
    Psi0 = m.B.T @ M0 + m.D.T @ Mc @ m.Fb
    return Mc, Ups, Psi, Psib, Psi0


@njit
def leader_parts(m, T1, T3):
    Ups0 = m.R0 + m.D0.T @ T1 @ m.D0
    Psi4 = m.B0.T @ T1 + m.D0.T @ T1 @ m.C0
    Psi5 = m.B0.T @ T3.T + m.D0.T @ T1 @ m.Gb0
    return Ups0, Psi4, Psi5


@njit
def m_rhs(m, M, Mb, M0, L0, Lb, P0L, PbL, Mc, Ui, Psi, Psib, Psi0):
    """Right-hand sides of the five follower blocks for given leader gains."""
    AG = m.A + m.G
    CG = m.C + m.Gb
    Lx0 = m.A0 + m.B0 @ P0L
    Lxb = m.G0 + m.B0 @ PbL
    Cx0 = m.C0 + m.D0 @ P0L
    Cxb = m.Gb0 + m.D0 @ PbL
    Psis = Psi + Psib
    dM = -(M @ m.A + m.A.T @ M + m.C.T @ Mc @ m.C + m.Q - Psi.T @ Ui @ Psi)
    dMb = -(Mb @ AG + AG.T @ Mb + M @ m.G + m.G.T @ M + M0 @ Lxb + Lxb.T @ Lb
            + m.C.T @ Mc @ m.Gb + m.Gb.T @ Mc @ CG + Cxb.T @ L0 @ Cxb - m.QG
            - Psi.T @ Ui @ Psib - Psib.T @ Ui @ Psi - Psib.T @ Ui @ Psib)
    dM0 = -(AG.T @ M0 + M0 @ Lx0 + (M + Mb) @ m.F + Lxb.T @ L0 + Cxb.T @ L0 @ Cx0
            + CG.T @ Mc @ m.Fb - m.QG1 - Psis.T @ Ui @ Psi0)
    dL0 = -(L0 @ Lx0 + Lx0.T @ L0 + Cx0.T @ L0 @ Cx0 + Lb @ m.F + m.F.T @ M0
            + m.Fb.T @ Mc @ m.Fb + m.Gam1.T @ m.Q @ m.Gam1 - Psi0.T @ Ui @ Psi0)
    dLb = -(Lb @ AG + Lx0.T @ Lb + m.F.T @ (M + Mb) + L0 @ Lxb + Cx0.T @ L0 @ Cxb
            + m.Fb.T @ Mc @ CG - m.QG1.T - Psi0.T @ Ui @ Psis)
    return dM, dMb, dM0, dL0, dLb


@njit
def theta_rhs(m, T1, T2, T3, Ah, Fh, U0i, Psi4, Psi5):
    dT1 = -(m.A0.T @ T1 + T1 @ m.A0 + m.C0.T @ T1 @ m.C0 + Fh.T @ T3 + T3.T @ Fh + m.Q0
            - Psi4.T @ U0i @ Psi4)
    dT2 = -(Ah.T @ T2 + T2 @ Ah + T3 @ m.G0 + m.G0.T @ T3.T + m.Gb0.T @ T1 @ m.Gb0
            + m.Gam0.T @ m.Q0 @ m.Gam0 - Psi5.T @ U0i @ Psi5)
    dT3 = -(Ah.T @ T3 + T3 @ m.A0 + T2 @ Fh + m.G0.T @ T1 + m.Gb0.T @ T1 @ m.C0
            - m.Gam0.T @ m.Q0 - Psi5.T @ U0i @ Psi4)
    return dT1, dT2, dT3


@njit
def flag_singular(status, h, size):
    if status[0] < 0:
        status[0] = h
    return np.full(size, np.nan)


@njit
def rhs_feedback(h, y, p):
    m, status = p[0], p[1]
    n0, n = fb_sizes(m)
    M, Mb, M0, L0, Lb, o = unpack_m(y, n0, n)
    T1, T2, T3, size = unpack_theta(y, o, n0, n)
    Mc, Ups, Psi, Psib, Psi0 = follower_parts(m, M, Mb, M0, 0.0)
    Ups0, Psi4, Psi5 = leader_parts(m, T1, T3)
    if min_eig(Ups) < SINGULAR_TOL or min_eig(Ups0) < SINGULAR_TOL:
        return flag_singular(status, h, size)
    Ui = np.linalg.inv(Ups)
    U0i = np.linalg.inv(Ups0)
    P0L = -U0i @ Psi4
    PbL = -U0i @ Psi5
    Ah = m.A + m.G - m.B @ Ui @ (Psi + Psib)
    Fh = m.F - m.B @ Ui @ Psi0
    dM, dMb, dM0, dL0, dLb = m_rhs(m, M, Mb, M0, L0, Lb, P0L, PbL, Mc, Ui, Psi, Psib, Psi0)
    dT1, dT2, dT3 = theta_rhs(m, T1, T2, T3, Ah, Fh, U0i, Psi4, Psi5)
    out = np.empty(size)
    o = 0
    for X in (dM, dMb, dM0, dL0, dLb, dT1, dT2, dT3):
        o = pack(out, o, X)
    return out


@njit
def loop_feedback(y_T, T, K, p):
    out = np.empty((K + 1, y_T.size))
    out[K] = y_T
    y = y_T.copy()
    dt = T / K
    for k in range(K - 1, -1, -1):
        k1 = rhs_feedback(2 * k + 2, y, p)
        k2 = rhs_feedback(2 * k + 1, y - 0.5 * dt * k1, p)
        k3 = rhs_feedback(2 * k + 1, y - 0.5 * dt * k2, p)
        k4 = rhs_feedback(2 * k, y - dt * k3, p)
        y = y - (dt / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)
        out[k] = y
        if escaped(y):
            return out, k
    return out, -1


@njit
def rhs_finite(h, y, p):
    m, status, ninv, P0h, Pbh = p[0], p[1], p[2], p[3], p[4]
    n0, n = fb_sizes(m)
    M, Mb, M0, L0, Lb, size = unpack_m(y, n0, n)
    Mc, Ups, Psi, Psib, Psi0 = follower_parts(m, M, Mb, M0, ninv)
    if min_eig(Ups) < SINGULAR_TOL:
        return flag_singular(status, h, size)
    Ui = np.linalg.inv(Ups)
    dM, dMb, dM0, dL0, dLb = m_rhs(m, M, Mb, M0, L0, Lb, P0h[h], Pbh[h], Mc, Ui, Psi, Psib, Psi0)
    out = np.empty(size)
    o = 0
    for X in (dM, dMb, dM0, dL0, dLb):
        o = pack(out, o, X)
    return out


@njit
def loop_finite(y_T, T, K, p):
    out = np.empty((K + 1, y_T.size))
    out[K] = y_T
    y = y_T.copy()
    dt = T / K
    for k in range(K - 1, -1, -1):
        k1 = rhs_finite(2 * k + 2, y, p)
        k2 = rhs_finite(2 * k + 1, y - 0.5 * dt * k1, p)
        k3 = rhs_finite(2 * k + 1, y - 0.5 * dt * k2, p)
        k4 = rhs_finite(2 * k, y - dt * k3, p)
        y = y - (dt / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)
        out[k] = y
        if escaped(y):
            return out, k
    return out, -1


@njit
def feedback_tables(path, m):
    """Derived weights and gains at every row of a stored limit path."""
    n0, n = fb_sizes(m)
    mm = m.B.shape[1]
    m0 = m.B0.shape[1]
    K1 = path.shape[0]
    ups = np.empty((K1, mm, mm))
    psi = np.empty((K1, mm, n))
    psib = np.empty((K1, mm, n))
    psi0 = np.empty((K1, mm, n0))
    ups0 = np.empty((K1, m0, m0))
    psi4 = np.empty((K1, m0, n0))
    psi5 = np.empty((K1, m0, n))
    p0l = np.empty((K1, m0, n0))
    pbl = np.empty((K1, m0, n))
    kx = np.empty((K1, mm, n))
    kxb = np.empty((K1, mm, n))
    k0 = np.empty((K1, mm, n0))
    for k in range(K1):
        M, Mb, M0, L0, Lb, o = unpack_m(path[k], n0, n)
        T1, T2, T3, _ = unpack_theta(path[k], o, n0, n)
        Mc, U, a, b, c = follower_parts(m, M, Mb, M0, 0.0)
        U0, d, e = leader_parts(m, T1, T3)
        ups[k], psi[k], psib[k], psi0[k] = U, a, b, c
        ups0[k], psi4[k], psi5[k] = U0, d, e
        p0l[k] = -np.linalg.solve(U0, d)
        pbl[k] = -np.linalg.solve(U0, e)
        kx[k] = -np.linalg.solve(U, a)
        kxb[k] = -np.linalg.solve(U, b)
        k0[k] = -np.linalg.solve(U, c)
    return ups, psi, psib, psi0, ups0, psi4, psi5, p0l, pbl, kx, kxb, k0


def _block_sizes(n0, n, theta=True):
    out = [("M", (n, n)), ("Mbar", (n, n)), ("M0", (n, n0)), ("Lam0", (n0, n0)),
           ("Lambar", (n0, n))]
    if theta:
        out += [("Th1", (n0, n0)), ("Th2", (n, n)), ("Th3", (n, n0))]
    return out


def _split(path, sizes):
    out = {}
    o = 0
    for name, (r, c) in sizes:
        out[name] = path[:, o:o + r * c].reshape(path.shape[0], r, c)
        o += r * c
    return out


def _residuals(rhs, path, T, p, sizes):
    res = staggered_residual(rhs, path, T, p)
    out = {}
    o = 0
    for name, (r, c) in sizes:
        out[name] = float(np.abs(res[:, o:o + r * c]).max(initial=0.0))
        o += r * c
    return out


@dataclass(frozen=True)
class FeedbackSolution:
    """Limit feedback system on the grid with derived weights and gains.

    ``P0``/``Pbar`` are the leader gains (u0 = P0 x0 + Pbar xbar); ``Kx``,
    ``Kxb``, ``K0`` the follower gains (u_i = Kx x_i + Kxb xbar + K0 x0).
    """

    T: float
    M: TimeGridFn
    Mbar: TimeGridFn
    M0: TimeGridFn
    Lam0: TimeGridFn
    Lambar: TimeGridFn
    Th1: TimeGridFn
    Th2: TimeGridFn
    Th3: TimeGridFn
    Ups: TimeGridFn
    Psi: TimeGridFn
    Psibar: TimeGridFn
    Psi0: TimeGridFn
    Ups0: TimeGridFn
    Psi4: TimeGridFn
    Psi5: TimeGridFn
    P0: TimeGridFn
    Pbar: TimeGridFn
    Kx: TimeGridFn
    Kxb: TimeGridFn
    K0: TimeGridFn
    residuals: dict = field(default_factory=dict)
    path: np.ndarray = None

    @property
    def grid_steps(self):
        return self.M.K

    def blocks(self):
        names = ("M", "Mbar", "M0", "Lam0", "Lambar", "Th1", "Th2", "Th3", "Ups", "Ups0",
                 "P0", "Pbar", "Kx", "Kxb", "K0")
        return {k: getattr(self, k) for k in names}

    def to_csv(self):
        return grid_block_csv(self.M.grid, {k: v.values for k, v in self.blocks().items()})


@dataclass(frozen=True)
class FiniteNFeedbackSolution:
    """Follower blocks for N followers under frozen leader gains.

    ``N`` may be ``inf`` for the limit system with the same frozen gains.
    """

    N: float
    T: float
    M: TimeGridFn
    Mbar: TimeGridFn
    M0: TimeGridFn
    Lam0: TimeGridFn
    Lambar: TimeGridFn
    Mcheck: TimeGridFn
    Ups: TimeGridFn
    Lam0check: TimeGridFn
    residuals: dict = field(default_factory=dict)

    def blocks(self):
        names = ("M", "Mbar", "M0", "Lam0", "Lambar", "Mcheck", "Ups", "Lam0check")
        return {k: getattr(self, k) for k in names}

    def to_csv(self):
        return grid_block_csv(self.M.grid, {k: v.values for k, v in self.blocks().items()})


def _sign_violations(params):
    out = []
    lc, fc = params.leader_cost, params.follower_cost
    for label, M, strict in (("follower_cost.Q", fc.Q, False), ("follower_cost.H", fc.H, False),
                             ("follower_cost.R", fc.R, True), ("leader_cost.Q0", lc.Q0, False),
                             ("leader_cost.H0", lc.H0, False), ("leader_cost.R0", lc.R0, True)):
        ev = np.linalg.eigvalsh(0.5 * (M + M.T))[0]
        if strict and not ev > 0:
            out.append(f"{label}: must be positive definite for the feedback solution")
        elif not strict and ev < -1e-10:
            out.append(f"{label}: must be positive semidefinite for the feedback solution")
    return out


def _check(params):
    v = validate(params)
    if not v:
        v = _sign_violations(params)
    if v:
        raise ModelValidationError(v)


def _terminal(m, theta=True):
    parts = [m.H, -m.HG, -m.HG1, m.Gamh1.T @ m.H @ m.Gamh1, -m.HG1.T]
    if theta:
        parts += [m.H0, m.Gamh0.T @ m.H0 @ m.Gamh0, -m.Gamh0.T @ m.H0]
    return np.concatenate([np.ascontiguousarray(X).ravel() for X in parts])


def _run(loop, yT, params, p, what):
    status = p[1]
    try:
        return run_backward(loop, yT, params.T, params.grid_steps, p, what)
    except Exception:
        if status[0] >= 0:
            t = status[0] * params.T / (2 * params.grid_steps)
            raise SingularityError(f"{what}: control weight became singular", t=t) from None
        raise


def solve_feedback_joint(params, residuals=True):
    """Integrate the follower M-blocks and the leader Theta-blocks jointly backward."""
    _check(params)
    m = params.mats()
    n0, n = params.dims.n0, params.dims.n
    status = np.full(1, -1, dtype=np.int64)
    p = (m, status)
    path = _run(loop_feedback, _terminal(m), params, p, "feedback Riccati system")
    sizes = _block_sizes(n0, n)
    res = _residuals(rhs_feedback, path, params.T, p, sizes) if residuals else {}
    b = _split(path, sizes)
    (ups, psi, psib, psi0, ups0, psi4, psi5, p0l, pbl, kx, kxb,
     k0) = feedback_tables(np.ascontiguousarray(path), m)
    g = lambda a: TimeGridFn(params.T, a)
    return FeedbackSolution(
        T=params.T, M=g(b["M"]), Mbar=g(b["Mbar"]), M0=g(b["M0"]), Lam0=g(b["Lam0"]),
        Lambar=g(b["Lambar"]), Th1=g(b["Th1"]), Th2=g(b["Th2"]), Th3=g(b["Th3"]),
        Ups=g(ups), Psi=g(psi), Psibar=g(psib), Psi0=g(psi0), Ups0=g(ups0), Psi4=g(psi4),
        Psi5=g(psi5), P0=g(p0l), Pbar=g(pbl), Kx=g(kx), Kxb=g(kxb), K0=g(k0),
        residuals=res, path=path,
    )


def solve_finite_N(params, N, leader_gains, residuals=False):
    """Follower blocks for N followers (``N=inf`` for the limit) with frozen leader gains.

    ``leader_gains`` is a pair (P0, Pbar) of TimeGridFns on the model grid.
    """
    if not (N == np.inf or (float(N).is_integer() and N >= 1)):
        raise ValueError("N must be a positive integer or inf")
    _check(params)
    P0f, Pbf = leader_gains
    K, d = params.grid_steps, params.dims
    if P0f.K != K or Pbf.K != K or P0f.T != params.T or Pbf.T != params.T:
        raise ValueError("leader gains are not on the model grid")
    if P0f.shape != (d.m0, d.n0) or Pbf.shape != (d.m0, d.n):
        raise ValueError("leader gain shapes do not match the model")
    m = params.mats()
    ninv = 0.0 if N == np.inf else 1.0 / N
    status = np.full(1, -1, dtype=np.int64)
    p = (m, status, ninv, midpoint_table(P0f.values), midpoint_table(Pbf.values))
    path = _run(loop_finite, _terminal(m, theta=False), params, p,
                f"finite-N Riccati system (N={N})")
    sizes = _block_sizes(d.n0, d.n, theta=False)
    res = _residuals(rhs_finite, path, params.T, p, sizes) if residuals else {}
    b = _split(path, sizes)
    Mc = b["M"] + ninv * b["Mbar"]
    Ups = m.R + np.swapaxes(m.D, 0, 1)[None] @ Mc @ m.D
    g = lambda a: TimeGridFn(params.T, a)
    return FiniteNFeedbackSolution(
        N=N, T=params.T, M=g(b["M"]), Mbar=g(b["Mbar"]), M0=g(b["M0"]), Lam0=g(b["Lam0"]),
        Lambar=g(b["Lambar"]), Mcheck=g(Mc), Ups=g(Ups), Lam0check=g(b["Lam0"] + ninv * b["Lambar"]),
        residuals=res,
    )
