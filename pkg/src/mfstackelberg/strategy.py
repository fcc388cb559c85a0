"""Executable policies built from Riccati solutions.

Open-loop: the leader plays u0 = L0 X on the stacked state X = [x0; xbar; psi0; psi]
and reads Y = Ymap X = [y0; ybar; phi0; phi]. Follower i plays

    u_i = Ki xbar_i + Kb xbar + Kphi phi + K0 x0,

i.e. -Ups^+ (Psi2 xbar_i + Psi3 xbar + B'phi + Psi1 x0), where xbar_i is its
limit state. Feedback: u0 = P0 x0 + Pbar xbar and u_i = Kx x_i + Kxb xbar + K0 x0.

Gains live on the solver grid and are interpolated linearly in time.
"""
from dataclasses import dataclass, replace

import numpy as np

from .io import grid_block_csv
from .numerics import TimeGridFn


@dataclass(frozen=True)
class StackLayout:
    n0: int
    n: int

    @property
    def s(self):
        return 2 * (self.n0 + self.n)

    @property
    def x0(self):
        return slice(0, self.n0)

    @property
    def xbar(self):
        return slice(self.n0, self.n0 + self.n)

    @property
    def psi0(self):
        return slice(self.n0 + self.n, 2 * self.n0 + self.n)

    @property
    def psi(self):
        return slice(2 * self.n0 + self.n, self.s)

    # Y = [y0; ybar; phi0; phi] shares the X layout
    y0, ybar, phi0, phi = x0, xbar, psi0, psi


@dataclass(frozen=True)
class OpenLoopPolicy:
    T: float
    layout: StackLayout
    L0: TimeGridFn
    Ymap: TimeGridFn
    Ki: TimeGridFn
    Kb: TimeGridFn
    Kphi: TimeGridFn
    K0: TimeGridFn
    kind: str = "openloop"

    def gains(self):
        return {"L0": self.L0, "Ymap": self.Ymap, "Ki": self.Ki, "Kb": self.Kb,
                "Kphi": self.Kphi, "K0": self.K0}

    def with_leader_offset(self, dL, response):
        """Leader plays (L0 + dL) X; followers read phi0, phi from ``response`` X.

        ``response`` is the (n0+n) x s map of the followers' offsets under the
        perturbed leader; the leader keeps its own ybar from the original Ymap.
        """
        r = self.layout.n0 + self.layout.n
        Y = self.Ymap.values.copy()
        Y[:, r:, :] = response.values
        return replace(self, L0=TimeGridFn(self.T, self.L0.values + dL.values),
                       Ymap=TimeGridFn(self.T, Y))

    def to_csv(self):
        return grid_block_csv(self.L0.grid, {k: v.values for k, v in self.gains().items()})


@dataclass(frozen=True)
class FeedbackPolicy:
    T: float
    P0: TimeGridFn
    Pbar: TimeGridFn
    Kx: TimeGridFn
    Kxb: TimeGridFn
    K0: TimeGridFn
    kind: str = "feedback"

    def gains(self):
        return {"P0": self.P0, "Pbar": self.Pbar, "Kx": self.Kx, "Kxb": self.Kxb, "K0": self.K0}

    def to_csv(self):
        return grid_block_csv(self.P0.grid, {k: v.values for k, v in self.gains().items()})


def build_openloop_policy(fol, stk):
    if stk.Pst is None:
        raise ValueError("stacked leader system has not been solved")
    if fol.grid_steps != stk.Pst.K or fol.T != stk.T:
        raise ValueError("follower and leader solutions are on different grids")
    n0 = fol.K.shape[0]
    n = fol.P.shape[0]
    Ui = fol.Ups_pinv.values
    B = fol.B
    T = fol.T
    g = lambda a: TimeGridFn(T, a)
    return OpenLoopPolicy(
        T=T, layout=StackLayout(n0, n), L0=stk.L0, Ymap=stk.Pst,
        Ki=g(-Ui @ fol.Psi2.values), Kb=g(-Ui @ fol.Psi3.values),
        Kphi=g(-Ui @ np.swapaxes(B, 0, 1)[None]), K0=g(-Ui @ fol.Psi1.values),
    )


def build_feedback_policy(fb):
    return FeedbackPolicy(T=fb.T, P0=fb.P0, Pbar=fb.Pbar, Kx=fb.Kx, Kxb=fb.Kxb, K0=fb.K0)


def feedback_policy_from_blocks(params, P0, Pbar, sol):
    """Follower gains recomputed from M-blocks (e.g. a re-solve under probed leader gains)."""
    m = params.mats()
    N = getattr(sol, "N", np.inf)
    ninv = 0.0 if N == np.inf else 1.0 / N
    M, Mb, M0 = sol.M.values, sol.Mbar.values, sol.M0.values
    Mc = M + ninv * Mb
    Dt, Bt = m.D.T[None], m.B.T[None]
    Ups = m.R + Dt @ Mc @ m.D
    solve = lambda X: -np.linalg.solve(Ups, X)
    g = lambda a: TimeGridFn(params.T, a)
    return FeedbackPolicy(
        T=params.T, P0=P0, Pbar=Pbar, Kx=g(solve(Bt @ M + Dt @ Mc @ m.C)),
        Kxb=g(solve(Bt @ Mb + Dt @ Mc @ m.Gb)), K0=g(solve(Bt @ M0 + Dt @ Mc @ m.Fb)),
    )


def _rows(x, size, name):
    x = np.asarray(x, dtype=float)
    if x.shape[-1] != size or x.ndim > 2:
        raise ValueError(f"state {name!r} must have trailing dimension {size}")
    return x


def eval_policy(policy, t, states):
    """Controls at time t.

    Open-loop ``states``: ``X`` (s,), ``x0`` (n0,) and ``xbar_i`` (n,) or (N, n).
    Feedback ``states``: ``x0`` (n0,), ``xbar`` (n,) and ``x`` (n,) or (N, n).
    Returns ``{"u0": ..., "u": ...}``; ``u`` has one row per follower state given.
    """
    if policy.kind == "openloop":
        lay = policy.layout
        X = _rows(states["X"], lay.s, "X")
        Y = policy.Ymap(t) @ X
        u0 = policy.L0(t) @ X
        x0 = _rows(states.get("x0", X[lay.x0]), lay.n0, "x0")
        xi = _rows(states["xbar_i"], lay.n, "xbar_i")
        common = policy.Kb(t) @ X[lay.xbar] + policy.Kphi(t) @ Y[lay.phi] + policy.K0(t) @ x0
        u = xi @ policy.Ki(t).T + common
        return {"u0": u0, "u": u}
    n0 = policy.P0.shape[1]
    n = policy.Pbar.shape[1]
    x0 = _rows(states["x0"], n0, "x0")
    xbar = _rows(states["xbar"], n, "xbar")
    x = _rows(states["x"], n, "x")
    u0 = policy.P0(t) @ x0 + policy.Pbar(t) @ xbar
    u = x @ policy.Kx(t).T + policy.Kxb(t) @ xbar + policy.K0(t) @ x0
    return {"u0": u0, "u": u}


def stationarity_residual(params, fol, policy, k, xbar_i, X):
    """R u + B'p + D'q for follower i at grid index k.

    p = P xbar_i + Pbar xbar + P0 x0 + phi and q = P(C xbar_i + D u + Gbar xbar + Fbar x0),
    with x0, xbar and phi taken from the stacked state X.
    """
    m = params.mats()
    lay = policy.layout
    t = k * fol.T / fol.grid_steps
    u = eval_policy(policy, t, {"X": X, "x0": X[lay.x0], "xbar_i": xbar_i})["u"]
    x0, xbar = X[lay.x0], X[lay.xbar]
    phi = (policy.Ymap.at(k) @ X)[lay.phi]
    P, Pb, P0 = fol.P.at(k), fol.Pbar.at(k), fol.P0.at(k)
    p = P @ xbar_i + Pb @ xbar + P0 @ x0 + phi
    q = P @ (m.C @ xbar_i + m.D @ u + m.Gb @ xbar + m.Fb @ x0)
    return m.R @ u + m.B.T @ p + m.D.T @ q
