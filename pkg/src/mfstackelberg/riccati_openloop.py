"""Open-loop pipeline: follower Riccati system and the stacked leader system.

Stacked state X = [x0; xbar; psi0; psi] and costate Y = [y0; ybar; phi0; phi].
The leader control enters the forward X-drift through B0_drift = [B0; 0; 0; 0]
and the backward phi-equations through E = [0; 0; b3; b4], with
b3 = C0' K D0 + K B0 and b4 = P0 B0 + Gbar0' K D0. Decoupling Y = Pst X gives

    dPst/dt = -(Pst A + A' Pst + C0' Pst C0 - Q - Pst B Pst - St Ups0^+ S),
    S  = B0_drift' Pst + D0' Pst C0 - E',
    St = Pst B0_drift + C0' Pst D0 + E,
    L0 = -Ups0^+ S,  Ups0 = R0 + D0' Pst D0.

``formulation="printed"`` instead uses the single matrix [B0; 0; b3; b4] in
both places (S = B0st' Pst + D0' Pst C0, St = S'); it is kept for comparison.
"""
from dataclasses import dataclass, field

import numpy as np

from ._jit import njit
from .errors import ModelValidationError
from .io import grid_block_csv
from .model import validate
from .numerics import (
    TimeGridFn, escaped, pinv_core, run_backward, staggered_residual,
)

RANK_TOL = 1e-10
FORMULATIONS = ("derived", "printed")


@njit
def fol_sizes(m):
    n0 = m.A0.shape[0]
    n = m.A.shape[0]
    return n0, n


@njit
def unpack_fol(y, n0, n):
    o = 0
    K = y[o:o + n0 * n0].reshape((n0, n0)); o += n0 * n0
    Kb = y[o:o + n0 * n].reshape((n0, n)); o += n0 * n
    P = y[o:o + n * n].reshape((n, n)); o += n * n
    Pb = y[o:o + n * n].reshape((n, n)); o += n * n
    P0 = y[o:o + n * n0].reshape((n, n0)); o += n * n0
    return K, Kb, P, Pb, P0, o


@njit
def fol_parts(m, Kb, P, Pb, rtol):
    Ups = m.R + m.D.T @ P @ m.D
    Ui = pinv_core(Ups, rtol)
    Psi1 = m.B.T @ Kb.T + m.D.T @ P @ m.Fb
    Psi2 = m.B.T @ P + m.D.T @ P @ m.C
    Psi3 = m.B.T @ Pb + m.D.T @ P @ m.Gb
    return Ups, Ui, Psi1, Psi2, Psi3


@njit
def fol_rhs_parts(m, K, Kb, P, Pb, P0, rtol):
    Ups, Ui, Psi1, Psi2, Psi3 = fol_parts(m, Kb, P, Pb, rtol)
    AG = m.A + m.G
    Psi23 = Psi2 + Psi3
    dK = -(K @ m.A0 + m.A0.T @ K + m.C0.T @ K @ m.C0 + m.Fb.T @ P @ m.Fb
           - Psi1.T @ Ui @ Psi1 + Kb @ m.F + m.F.T @ P0 + m.Gam1.T @ m.Q @ m.Gam1)
    dKb = -(Kb @ AG + m.A0.T @ Kb - Psi1.T @ Ui @ Psi23 + m.F.T @ (P + Pb)
            + m.C0.T @ K @ m.Gb0 + m.Fb.T @ P @ (m.C + m.Gb) + K @ m.G0 - m.QG1.T)
    dP = -(m.A.T @ P + P @ m.A + m.C.T @ P @ m.C + m.Q - Psi2.T @ Ui @ Psi2)
    dPb = -(AG.T @ Pb + Pb @ AG + m.G.T @ P + P @ m.G + P0 @ m.G0 + m.G0.T @ Kb
            + m.C.T @ P @ m.Gb + m.Gb.T @ P @ (m.C + m.Gb) + m.Gb0.T @ K @ m.Gb0
            - Psi2.T @ Ui @ Psi3 - Psi3.T @ Ui @ Psi2 - Psi3.T @ Ui @ Psi3 - m.QG)
    dP0 = -(P0 @ m.A0 + AG.T @ P0 + (m.C + m.Gb).T @ P @ m.Fb - Psi23.T @ Ui @ Psi1
            + (P + Pb) @ m.F + m.Gb0.T @ K @ m.C0 + m.G0.T @ K - m.QG1)
    return dK, dKb, dP, dPb, dP0, Ui, Psi1, Psi2, Psi3


@njit
def pack_fol(out, dK, dKb, dP, dPb, dP0):
    o = 0
    for X in (dK, dKb, dP, dPb, dP0):
        sz = X.size
        out[o:o + sz] = X.ravel()
        o += sz
    return o


@njit
def rhs_follower(h, y, p):
    m, rtol = p[0], p[1]
    n0, n = fol_sizes(m)
    K, Kb, P, Pb, P0, o = unpack_fol(y, n0, n)
    dK, dKb, dP, dPb, dP0, Ui, Psi1, Psi2, Psi3 = fol_rhs_parts(m, K, Kb, P, Pb, P0, rtol)
    out = np.empty(o)
    pack_fol(out, np.ascontiguousarray(dK), np.ascontiguousarray(dKb), np.ascontiguousarray(dP),
             np.ascontiguousarray(dPb), np.ascontiguousarray(dP0))
    return out


@njit
def loop_follower(y_T, T, K, p):
    out = np.empty((K + 1, y_T.size))
    out[K] = y_T
    y = y_T.copy()
    dt = T / K
    for k in range(K - 1, -1, -1):
        k1 = rhs_follower(2 * k + 2, y, p)
        k2 = rhs_follower(2 * k + 1, y - 0.5 * dt * k1, p)
        k3 = rhs_follower(2 * k + 1, y - 0.5 * dt * k2, p)
        k4 = rhs_follower(2 * k, y - dt * k3, p)
        y = y - (dt / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)
        out[k] = y
        if escaped(y):
            return out, k
    return out, -1


@njit
def stacked_parts(m, K, Kb, P, Pb, P0, rtol):
    """Stacked matrices at one instant from the follower blocks."""
    n0, n = fol_sizes(m)
    m0 = m.B0.shape[1]
    s = 2 * (n0 + n)
    Ups, Ui, Psi1, Psi2, Psi3 = fol_parts(m, Kb, P, Pb, rtol)
    Ft = m.F - m.B @ Ui @ Psi1
    Ah = m.A + m.G - m.B @ Ui @ (Psi2 + Psi3)
    BUB = m.B @ Ui @ m.B.T
    a, b, c = n0, n0 + n, 2 * n0 + n
    Ast = np.zeros((s, s))
    for off in (0, b):
        Ast[off:off + n0, off:off + n0] = m.A0
        Ast[off:off + n0, off + n0:off + n0 + n] = m.G0
        Ast[off + n0:off + n0 + n, off:off + n0] = Ft
        Ast[off + n0:off + n0 + n, off + n0:off + n0 + n] = Ah
    Bst = np.zeros((s, s))
    Bst[a:b, c:s] = BUB
    Bst[c:s, a:b] = -BUB
    b3 = m.C0.T @ K @ m.D0 + K @ m.B0
    b4 = P0 @ m.B0 + m.Gb0.T @ K @ m.D0
    B0p = np.zeros((s, m0))
    B0p[0:a, :] = m.B0
    B0p[b:c, :] = b3
    B0p[c:s, :] = b4
    Est = np.zeros((s, m0))
    Est[b:c, :] = b3
    Est[c:s, :] = b4
    return Ast, Bst, B0p, Est


@njit
def stacked_constants(m):
    n0, n = fol_sizes(m)
    m0 = m.B0.shape[1]
    s = 2 * (n0 + n)
    a, b, c = n0, n0 + n, 2 * n0 + n
    C0st = np.zeros((s, s))
    C0st[0:a, 0:a] = m.C0
    C0st[0:a, a:b] = m.Gb0
    C0st[b:c, b:c] = m.C0
    C0st[b:c, c:s] = m.Gb0
    D0st = np.zeros((s, m0))
    D0st[0:a, :] = m.D0
    B0f = np.zeros((s, m0))
    B0f[0:a, :] = m.B0
    Qst = np.zeros((s, s))
    Qst[0:a, 0:a] = -m.Q0
    Qst[0:a, a:b] = m.Q0 @ m.Gam0
    Qst[a:b, 0:a] = m.Gam0.T @ m.Q0
    Qst[a:b, a:b] = -m.Gam0.T @ m.Q0 @ m.Gam0
    H0st = np.zeros((s, s))
    H0st[0:a, 0:a] = m.H0
    H0st[0:a, a:b] = -m.H0 @ m.Gamh0
    H0st[a:b, 0:a] = -m.Gamh0.T @ m.H0
    H0st[a:b, a:b] = m.Gamh0.T @ m.H0 @ m.Gamh0
    return C0st, D0st, B0f, Qst, H0st


@njit
def leader_gain_parts(m, Pst, Ast, Bst, B0p, Est, C0st, D0st, B0f, form, rtol):
    Ups0 = m.R0 + D0st.T @ Pst @ D0st
    U0i = pinv_core(Ups0, rtol)
    if form == 0:
        S = B0f.T @ Pst + D0st.T @ Pst @ C0st - Est.T
        St = Pst @ B0f + C0st.T @ Pst @ D0st + Est
    else:
        S = B0p.T @ Pst + D0st.T @ Pst @ C0st
        St = S.T.copy()
    L0 = -U0i @ S
    return Ups0, U0i, S, St, L0


@njit
def rhs_joint(h, y, p):
    m, rtol, form = p[0], p[1], p[2]
    n0, n = fol_sizes(m)
    s = 2 * (n0 + n)
    K, Kb, P, Pb, P0, o = unpack_fol(y, n0, n)
    Pst = y[o:o + s * s].reshape((s, s))
    dK, dKb, dP, dPb, dP0, Ui, Psi1, Psi2, Psi3 = fol_rhs_parts(m, K, Kb, P, Pb, P0, rtol)
    Ast, Bst, B0p, Est = stacked_parts(m, K, Kb, P, Pb, P0, rtol)
    C0st, D0st, B0f, Qst, H0st = stacked_constants(m)
    Ups0, U0i, S, St, L0 = leader_gain_parts(m, Pst, Ast, Bst, B0p, Est, C0st, D0st, B0f, form, rtol)
    dPst = -(Pst @ Ast + Ast.T @ Pst + C0st.T @ Pst @ C0st - Qst - Pst @ Bst @ Pst - St @ U0i @ S)
    out = np.empty(o + s * s)
    pack_fol(out, np.ascontiguousarray(dK), np.ascontiguousarray(dKb), np.ascontiguousarray(dP),
             np.ascontiguousarray(dPb), np.ascontiguousarray(dP0))
    out[o:] = np.ascontiguousarray(dPst).ravel()
    return out


@njit
def loop_joint(y_T, T, K, p):
    out = np.empty((K + 1, y_T.size))
    out[K] = y_T
    y = y_T.copy()
    dt = T / K
    for k in range(K - 1, -1, -1):
        k1 = rhs_joint(2 * k + 2, y, p)
        k2 = rhs_joint(2 * k + 1, y - 0.5 * dt * k1, p)
        k3 = rhs_joint(2 * k + 1, y - 0.5 * dt * k2, p)
        k4 = rhs_joint(2 * k, y - dt * k3, p)
        y = y - (dt / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)
        out[k] = y
        if escaped(y):
            return out, k
    return out, -1


@njit
def rhs_response(h, y, p):
    """Joint system plus the followers' response map Pi: (phi0, phi) = Pi X.

    The leader uses L0(Pst) + dL(t); followers solve their offset equations
    for that control while the leader keeps ybar = (Pst X)_ybar internally.
    """
    m, rtol, form, dL = p[0], p[1], p[2], p[3]
    n0, n = fol_sizes(m)
    s = 2 * (n0 + n)
    r = n0 + n
    K, Kb, P, Pb, P0, o = unpack_fol(y, n0, n)
    Pst = y[o:o + s * s].reshape((s, s))
    Pi = y[o + s * s:o + s * s + r * s].reshape((r, s))
    dK, dKb, dP, dPb, dP0, Ui, Psi1, Psi2, Psi3 = fol_rhs_parts(m, K, Kb, P, Pb, P0, rtol)
    Ast, Bst, B0p, Est = stacked_parts(m, K, Kb, P, Pb, P0, rtol)
    C0st, D0st, B0f, Qst, H0st = stacked_constants(m)
    Ups0, U0i, S, St, L0 = leader_gain_parts(m, Pst, Ast, Bst, B0p, Est, C0st, D0st, B0f, form, rtol)
    dPst = -(Pst @ Ast + Ast.T @ Pst + C0st.T @ Pst @ C0st - Qst - Pst @ Bst @ Pst - St @ U0i @ S)
    Lp = L0 + dL[h]
    Bybar = np.zeros((s, s))
    Bybar[:, n0:r] = Bst[:, n0:r]
    Bphi = np.ascontiguousarray(Bst[:, r:s])
    Aeta = np.ascontiguousarray(Ast[0:r, 0:r].T)
    Ceta = np.ascontiguousarray(C0st[0:r, 0:r].T)
    Eeta = np.ascontiguousarray(Est[r:s, :]) @ Lp
    drift = Ast + B0f @ Lp - Bybar @ Pst
    diff = C0st + D0st @ Lp
    dPi = -(Pi @ drift - Pi @ Bphi @ Pi + Aeta @ Pi + Ceta @ Pi @ diff + Eeta)
    out = np.empty(o + s * s + r * s)
    pack_fol(out, np.ascontiguousarray(dK), np.ascontiguousarray(dKb), np.ascontiguousarray(dP),
             np.ascontiguousarray(dPb), np.ascontiguousarray(dP0))
    out[o:o + s * s] = np.ascontiguousarray(dPst).ravel()
    out[o + s * s:] = np.ascontiguousarray(dPi).ravel()
    return out


@njit
def loop_response(y_T, T, K, p):
    out = np.empty((K + 1, y_T.size))
    out[K] = y_T
    y = y_T.copy()
    dt = T / K
    for k in range(K - 1, -1, -1):
        k1 = rhs_response(2 * k + 2, y, p)
        k2 = rhs_response(2 * k + 1, y - 0.5 * dt * k1, p)
        k3 = rhs_response(2 * k + 1, y - 0.5 * dt * k2, p)
        k4 = rhs_response(2 * k, y - dt * k3, p)
        y = y - (dt / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)
        out[k] = y
        if escaped(y):
            return out, k
    return out, -1


def _fol_terminal(m):
    K = m.Gamh1.T @ m.H @ m.Gamh1
    Kb = -m.HG1.T
    P = m.H.copy()
    Pb = -m.HG
    P0 = -m.HG1
    return np.concatenate([K.ravel(), Kb.ravel(), P.ravel(), Pb.ravel(), P0.ravel()])


def _split_fol(path, n0, n):
    K1 = path.shape[0]
    o = 0
    out = {}
    for name, (r, c) in (("K", (n0, n0)), ("Kbar", (n0, n)), ("P", (n, n)), ("Pbar", (n, n)),
                         ("P0", (n, n0))):
        out[name] = path[:, o:o + r * c].reshape(K1, r, c)
        o += r * c
    return out, o


@dataclass(frozen=True)
class OpenLoopFollowerSolution:
    """Follower blocks K, Kbar, P, Pbar, P0 and derived Ups, Psi1..Psi3 on the grid.

    ``B`` is the follower control matrix, kept for assembling the follower gains.
    """

    T: float
    K: TimeGridFn
    Kbar: TimeGridFn
    P: TimeGridFn
    Pbar: TimeGridFn
    P0: TimeGridFn
    Ups: TimeGridFn
    Ups_pinv: TimeGridFn
    Psi1: TimeGridFn
    Psi2: TimeGridFn
    Psi3: TimeGridFn
    a3_psd: np.ndarray
    a3_range: np.ndarray
    B: np.ndarray = None
    residuals: dict = field(default_factory=dict)
    path: np.ndarray = None

    @property
    def grid_steps(self):
        return self.K.K

    @property
    def a3_ok(self):
        return bool(np.all(self.a3_psd) and np.all(self.a3_range))

    def blocks(self):
        return {"K": self.K, "Kbar": self.Kbar, "P": self.P, "Pbar": self.Pbar, "P0": self.P0,
                "Ups": self.Ups, "Psi1": self.Psi1, "Psi2": self.Psi2, "Psi3": self.Psi3}

    def to_csv(self):
        f = self.K
        return grid_block_csv(f.grid, {k: v.values for k, v in self.blocks().items()})


@dataclass(frozen=True)
class StackedLeaderSolution:
    """Stacked leader system on the grid; Pst is None before solving."""

    T: float
    s: int
    formulation: str
    A: TimeGridFn
    B: TimeGridFn
    C0: np.ndarray
    B0: TimeGridFn
    B0_drift: TimeGridFn
    E: TimeGridFn
    D0: np.ndarray
    Q: np.ndarray
    H0: np.ndarray
    Pst: TimeGridFn = None
    Ups0: TimeGridFn = None
    L0: TimeGridFn = None
    residuals: dict = field(default_factory=dict)
    path: np.ndarray = None

    def blocks(self):
        out = {"A": self.A, "B": self.B, "B0": self.B0}
        if self.Pst is not None:
            out.update({"Pst": self.Pst, "Ups0": self.Ups0, "L0": self.L0})
        return out

    def to_csv(self):
        f = self.A
        return grid_block_csv(f.grid, {k: v.values for k, v in self.blocks().items()})


def _check(params):
    v = validate(params)
    if v:
        raise ModelValidationError(v)


def _params_tuple(params, extra=()):
    return (params.mats(), RANK_TOL) + tuple(extra)


@njit
def fol_tables(path, m, rtol):
    """Ups, its pseudoinverse and Psi1..Psi3 at every row of a stored path."""
    n0, n = fol_sizes(m)
    mm = m.B.shape[1]
    K1 = path.shape[0]
    ups = np.empty((K1, mm, mm))
    upi = np.empty((K1, mm, mm))
    p1 = np.empty((K1, mm, n0))
    p2 = np.empty((K1, mm, n))
    p3 = np.empty((K1, mm, n))
    for k in range(K1):
        K, Kb, P, Pb, P0, o = unpack_fol(path[k], n0, n)
        ups[k], upi[k], p1[k], p2[k], p3[k] = fol_parts(m, Kb, P, Pb, rtol)
    return ups, upi, p1, p2, p3


@njit
def stacked_tables(path, m, rtol):
    n0, n = fol_sizes(m)
    s = 2 * (n0 + n)
    m0 = m.B0.shape[1]
    K1 = path.shape[0]
    A_ = np.empty((K1, s, s))
    B_ = np.empty((K1, s, s))
    B0_ = np.empty((K1, s, m0))
    E_ = np.empty((K1, s, m0))
    for k in range(K1):
        K, Kb, P, Pb, P0, o = unpack_fol(path[k], n0, n)
        A_[k], B_[k], B0_[k], E_[k] = stacked_parts(m, K, Kb, P, Pb, P0, rtol)
    return A_, B_, B0_, E_


@njit
def leader_tables(path, m, form, rtol):
    n0, n = fol_sizes(m)
    s = 2 * (n0 + n)
    m0 = m.B0.shape[1]
    K1 = path.shape[0]
    C0st, D0st, B0f, Qst, H0st = stacked_constants(m)
    ups0 = np.empty((K1, m0, m0))
    L0 = np.empty((K1, m0, s))
    for k in range(K1):
        K, Kb, P, Pb, P0, o = unpack_fol(path[k], n0, n)
        Pst = path[k, o:o + s * s].reshape((s, s))
        Ast, Bst, B0p, Est = stacked_parts(m, K, Kb, P, Pb, P0, rtol)
        U0, U0i, S, St, L = leader_gain_parts(m, Pst, Ast, Bst, B0p, Est, C0st, D0st, B0f,
                                              form, rtol)
        ups0[k] = U0
        L0[k] = L
    return ups0, L0


def _a3_checks(Ups, Ups_pinv, B, D, P):
    """Per-grid-point PSD test of Ups and range inclusion of B' and D'P in Ups."""
    Us = 0.5 * (Ups + np.swapaxes(Ups, 1, 2))
    scale = np.maximum(1.0, np.abs(Us).max(axis=(1, 2)))
    tol = 1e-9 * scale
    psd = np.linalg.eigvalsh(Us)[:, 0] >= -tol
    proj = Us @ Ups_pinv
    targets = np.concatenate([np.broadcast_to(B.T, (Us.shape[0],) + B.T.shape),
                              np.swapaxes(D, 0, 1)[None] @ P], axis=2)
    resid = targets - proj @ targets
    rng = np.abs(resid).max(axis=(1, 2)) <= tol
    return psd, rng


def _follower_from_path(params, path, residuals=None):
    m = params.mats()
    n0, n = params.dims.n0, params.dims.n
    T = params.T
    blocks, _ = _split_fol(path, n0, n)
    ups, upi, p1, p2, p3 = fol_tables(np.ascontiguousarray(path), m, RANK_TOL)
    psd, rng = _a3_checks(ups, upi, m.B, m.D, blocks["P"])
    g = lambda a: TimeGridFn(T, a)
    return OpenLoopFollowerSolution(
        T=T, K=g(blocks["K"]), Kbar=g(blocks["Kbar"]), P=g(blocks["P"]), Pbar=g(blocks["Pbar"]),
        P0=g(blocks["P0"]), Ups=g(ups), Ups_pinv=g(upi), Psi1=g(p1), Psi2=g(p2), Psi3=g(p3),
        a3_psd=psd, a3_range=rng, B=m.B, residuals=residuals or {}, path=path,
    )


def _block_residuals(res, names_sizes):
    out = {}
    o = 0
    for name, sz in names_sizes:
        out[name] = float(np.abs(res[:, o:o + sz]).max(initial=0.0))
        o += sz
    return out


def _fol_names(n0, n):
    return [("K", n0 * n0), ("Kbar", n0 * n), ("P", n * n), ("Pbar", n * n), ("P0", n * n0)]


def _warn_a3(sol):
    if not sol.a3_ok:
        import warnings
        warnings.warn("follower weight Ups fails the PSD/range conditions on part of the grid; "
                      "gains use the pseudoinverse", RuntimeWarning, stacklevel=3)


def solve_follower_system(params, residuals=True):
    """Integrate K, Kbar, P, Pbar, P0 jointly backward on the model grid."""
    _check(params)
    p = _params_tuple(params)
    yT = _fol_terminal(params.mats())
    path = run_backward(loop_follower, yT, params.T, params.grid_steps, p,
                        "open-loop follower Riccati system")
    res = {}
    if residuals:
        r = staggered_residual(rhs_follower, path, params.T, p)
        res = _block_residuals(r, _fol_names(params.dims.n0, params.dims.n))
    sol = _follower_from_path(params, path, res)
    _warn_a3(sol)
    return sol


def assemble_stacked(params, fol, formulation="derived"):
    """Stacked matrices on the follower grid (Pst left unset)."""
    if formulation not in FORMULATIONS:
        raise ValueError(f"formulation must be one of {FORMULATIONS}")
    if fol.grid_steps != params.grid_steps or fol.T != params.T:
        raise ValueError("follower solution grid does not match the model grid")
    m = params.mats()
    C0st, D0st, B0f, Qst, H0st = stacked_constants(m)
    n0, n = params.dims.n0, params.dims.n
    fpath = fol.path[:, :n0 * n0 + n0 * n + 2 * n * n + n * n0]
    A_, B_, B0_, E_ = stacked_tables(np.ascontiguousarray(fpath), m, RANK_TOL)
    T = params.T
    K1 = fol.grid_steps + 1
    B0p = TimeGridFn(T, B0_)
    drift = TimeGridFn(T, np.broadcast_to(B0f, (K1,) + B0f.shape).copy()) if formulation == "derived" else B0p
    return StackedLeaderSolution(
        T=T, s=params.dims.s, formulation=formulation, A=TimeGridFn(T, A_), B=TimeGridFn(T, B_),
        C0=C0st, B0=B0p, B0_drift=drift, E=TimeGridFn(T, E_), D0=D0st, Q=Qst, H0=H0st,
    )


def _joint(params, formulation, residuals):
    form = FORMULATIONS.index(formulation)
    p = _params_tuple(params, (form,))
    m = params.mats()
    C0st, D0st, B0f, Qst, H0st = stacked_constants(m)
    yT = np.concatenate([_fol_terminal(m), H0st.ravel()])
    path = run_backward(loop_joint, yT, params.T, params.grid_steps, p,
                        "stacked leader Riccati system")
    res = {}
    if residuals:
        n0, n, s = params.dims.n0, params.dims.n, params.dims.s
        r = staggered_residual(rhs_joint, path, params.T, p)
        res = _block_residuals(r, _fol_names(n0, n) + [("Pst", s * s)])
    return path, res


def _leader_from_path(params, fol, path, formulation, res):
    stk = assemble_stacked(params, fol, formulation)
    m = params.mats()
    s = params.dims.s
    nf = fol.path.shape[1]
    Pst = path[:, nf:nf + s * s].reshape(-1, s, s)
    ups0, L0 = leader_tables(np.ascontiguousarray(path), m, FORMULATIONS.index(formulation),
                             RANK_TOL)
    T = params.T
    return StackedLeaderSolution(
        T=T, s=s, formulation=formulation, A=stk.A, B=stk.B, C0=stk.C0, B0=stk.B0,
        B0_drift=stk.B0_drift, E=stk.E, D0=stk.D0, Q=stk.Q, H0=stk.H0,
        Pst=TimeGridFn(T, Pst), Ups0=TimeGridFn(T, ups0), L0=TimeGridFn(T, L0),
        residuals={"Pst": res["Pst"]} if "Pst" in res else {}, path=path,
    )


def solve_leader_stacked(params, fol, formulation="derived", residuals=True):
    """Integrate Pst backward from H0st jointly with the follower blocks.

    The follower blocks are recomputed alongside Pst so the leader sees them at
    the RK4 stages; they agree with ``fol`` to integration accuracy.
    """
    _check(params)
    if formulation not in FORMULATIONS:
        raise ValueError(f"formulation must be one of {FORMULATIONS}")
    path, res = _joint(params, formulation, residuals)
    return _leader_from_path(params, fol, path, formulation, res)


def solve_openloop(params, formulation="derived", residuals=True):
    """Follower and leader solutions from one joint integration."""
    _check(params)
    if formulation not in FORMULATIONS:
        raise ValueError(f"formulation must be one of {FORMULATIONS}")
    path, res = _joint(params, formulation, residuals)
    n0, n = params.dims.n0, params.dims.n
    nf = n0 * n0 + n0 * n + 2 * n * n + n * n0
    fres = {k: v for k, v in res.items() if k != "Pst"}
    fol = _follower_from_path(params, np.ascontiguousarray(path[:, :nf]), fres)
    _warn_a3(fol)
    return fol, _leader_from_path(params, fol, path, formulation, res)


def solve_follower_response(params, dL_half):
    """Followers' offset map Pi(t) for the leader control (L0 + dL) X.

    ``dL_half`` holds the leader-gain offset at grid points and midpoints,
    shape (2K+1, m0, s). Returns Pi as a TimeGridFn of shape (n0+n, s); with
    dL = 0 it reproduces the (phi0, phi) rows of Pst.
    """
    _check(params)
    m = params.mats()
    s = params.dims.s
    r = params.dims.n0 + params.dims.n
    dL_half = np.ascontiguousarray(dL_half, dtype=float)
    if dL_half.shape != (2 * params.grid_steps + 1, params.dims.m0, s):
        raise ValueError("dL_half has the wrong shape")
    C0st, D0st, B0f, Qst, H0st = stacked_constants(m)
    yT = np.concatenate([_fol_terminal(m), H0st.ravel(), np.zeros(r * s)])
    p = _params_tuple(params, (0, dL_half))
    path = run_backward(loop_response, yT, params.T, params.grid_steps, p,
                        "follower response system")
    return TimeGridFn(params.T, path[:, -r * s:].reshape(-1, r, s))
