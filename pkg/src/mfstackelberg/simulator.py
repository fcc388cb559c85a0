"""Seeded Euler-Maruyama simulation of the finite-N system.

Both information structures reduce to one linear system per path:

    dZ   = (Az Z + Azn xN + Bz u0) dt + (Cz Z + Czn xN + Dz u0) dW0,   u0 = U0 Z
    dy_i = (Ay y_i + Ayz Z + Ayn xN + By c_i) dt
         + (Cy y_i + Cyz Z + Cyn xN + Dy c_i) dW_i,                   c_i = Kown y_i + Kz Z

with xN the average of the realized follower states. Open-loop: Z = [X; x0]
(stacked limit state, realized leader) and y_i = [x_i; xbar_i] (realized and
auxiliary limit follower), c_i = [u_i; auxiliary control]. Feedback:
Z = [x0; xbar] and y_i = x_i. The first n entries of y_i and the first m of c_i
are always the realized follower state and control.

Noise: one counter-based Philox stream per (path, source); source 0 is the
leader, sources 1..N the followers. Each stream first draws the initial state
and then the Brownian increments, so adding followers never changes existing
streams.
"""
import hashlib
import io
import struct
from dataclasses import dataclass, field, replace

import numpy as np

from . import _jit
from ._jit import njit
from .errors import ConfigError, SimulationDivergedError
from .io import csv_text, fmt, npz_bytes
from .numerics import BLOWUP, TimeGridFn, time_grid

FOLLOWER_STORE_LIMIT = 4_000_000
CHUNK_DOUBLES = 4_000_000


@dataclass(frozen=True)
class SimConfig:
    N: int
    paths: int = 1
    sim_steps: int = None
    seed: int = 0
    antithetic: bool = False
    realized_leader_in_follower_control: bool = True
    store_every: int = 10
    store_followers: bool = None

    def check(self, params=None):
        bad = []
        if isinstance(self.N, bool) or int(self.N) != self.N or self.N < 1:
            bad.append(f"N must be a positive integer, got {self.N!r}")
        if isinstance(self.paths, bool) or int(self.paths) != self.paths or self.paths < 1:
            bad.append(f"paths must be a positive integer, got {self.paths!r}")
        if self.sim_steps is not None and (int(self.sim_steps) != self.sim_steps or self.sim_steps < 2):
            bad.append(f"sim_steps must be an integer >= 2, got {self.sim_steps!r}")
        if int(self.store_every) != self.store_every or self.store_every < 1:
            bad.append(f"store_every must be a positive integer, got {self.store_every!r}")
        if not 0 <= int(self.seed) < 2**64:
            bad.append("seed must fit in 64 unsigned bits")
        if self.antithetic and self.paths % 2:
            bad.append("antithetic sampling needs an even number of paths")
        if bad:
            raise ConfigError("invalid simulation config: " + "; ".join(bad))

    def steps_for(self, params):
        return int(self.sim_steps) if self.sim_steps is not None else params.grid_steps

    def to_dict(self):
        return {"N": int(self.N), "paths": int(self.paths), "sim_steps": self.sim_steps,
                "seed": int(self.seed), "antithetic": bool(self.antithetic),
                "realized_leader_in_follower_control": bool(self.realized_leader_in_follower_control),
                "store_every": int(self.store_every), "store_followers": self.store_followers}


@dataclass(frozen=True)
class Perturbation:
    """Offset to some agents' controls.

    ``who="leader"``: u0 += gain Z_in + offset, where Z_in is the leader's policy
    input (X for open-loop, [x0; xbar] for feedback). Otherwise ``who`` is a
    sequence of 0-based follower indices and u_i += gain x_i + offset on the
    realized follower state. ``gain`` and ``offset`` are TimeGridFn or None.
    """

    who: object
    gain: TimeGridFn = None
    offset: TimeGridFn = None

    @property
    def is_leader(self):
        return isinstance(self.who, str)


@dataclass
class Ensemble:
    """Stored trajectories (paths, stored times, ...) plus per-path costs.

    ``Z`` is the leader-side state: [X; x0] for open-loop, [x0; xbar] for
    feedback. ``x``, ``u`` and ``xbar_i`` are per-follower blocks of shape
    (paths, times, N, .) and are None unless followers were stored.
    """

    mode: str
    T: float
    N: int
    sim_steps: int
    t: np.ndarray
    step_index: np.ndarray
    Z: np.ndarray
    x0: np.ndarray
    xbar: np.ndarray
    xN: np.ndarray
    u0: np.ndarray
    J0: np.ndarray
    Ji: np.ndarray
    seed: int
    stream_pairs: np.ndarray
    stream_signs: np.ndarray
    backend: str
    x: np.ndarray = None
    u: np.ndarray = None
    xbar_i: np.ndarray = None
    X: np.ndarray = None
    Y: np.ndarray = None
    zeta0: np.ndarray = None
    x0_limit: np.ndarray = None
    follower_gap: np.ndarray = None
    extra: dict = field(default_factory=dict)

    @property
    def paths(self):
        return self.Z.shape[0]

    def blocks(self):
        names = ["x0", "xbar", "xN", "u0", "X", "Y", "zeta0", "x0_limit", "x", "u", "xbar_i"]
        return {k: getattr(self, k) for k in names if getattr(self, k) is not None}

    def to_csv(self):
        """Long format: path, t, block, index, value (index is i or i:j for followers)."""
        out = io.StringIO()
        out.write("path,t,block,index,value\n")
        for name, arr in self.blocks().items():
            per_follower = arr.ndim == 4
            for p in range(arr.shape[0]):
                for k, t in enumerate(self.t):
                    tt = fmt(t)
                    vals = arr[p, k]
                    if per_follower:
                        for i in range(vals.shape[0]):
                            for j in range(vals.shape[1]):
                                out.write(f"{p},{tt},{name},{i}:{j},{fmt(vals[i, j])}\n")
                    else:
                        for j in range(vals.shape[0]):
                            out.write(f"{p},{tt},{name},{j},{fmt(vals[j])}\n")
        return out.getvalue()

    def to_npz(self):
        """Binary dump: every block under its name plus t, step_index, J0, Ji and lineage."""
        arrays = {"t": self.t, "step_index": self.step_index, "J0": self.J0, "Ji": self.Ji,
                  "stream_pairs": self.stream_pairs, "stream_signs": self.stream_signs,
                  "seed": np.array([self.seed], dtype=np.uint64)}
        arrays.update(self.blocks())
        if self.follower_gap is not None:
            arrays["follower_gap"] = self.follower_gap
        return npz_bytes(arrays)

    def costs_csv(self):
        rows = [[p, self.J0[p], float(np.mean(self.Ji[p]))] for p in range(self.paths)]
        return csv_text(["path", "J0", "Jsoc"], rows)


# ---------------------------------------------------------------- noise


def stream_key(seed, pair, source):
    """128-bit Philox key for one (path pair, noise source) stream."""
    h = hashlib.blake2b(struct.pack("<QQQ", int(seed), int(pair), int(source)), digest_size=16)
    return np.frombuffer(h.digest(), dtype=np.uint64).copy()


def _sqrt_psd(S):
    w, V = np.linalg.eigh(0.5 * (S + S.T))
    return V * np.sqrt(np.clip(w, 0.0, None))


def _lineage(cfg):
    p = np.arange(cfg.paths)
    if cfg.antithetic:
        return p // 2, np.where(p % 2 == 0, 1.0, -1.0)
    return p, np.ones(cfg.paths)


def draw_noise(params, cfg, paths, steps):
    """Initial states and increments for the given path indices.

    Returns (xi0 (P, n0), xi (P, N, n), dW0 (P, steps), dW (P, steps, N)).
    """
    d = params.dims
    N = int(cfg.N)
    sq = np.sqrt(params.T / steps)
    L0, L = _sqrt_psd(params.init.leader_cov), _sqrt_psd(params.init.follower_cov)
    pairs, signs = _lineage(cfg)
    P = len(paths)
    z0 = np.empty((P, d.n0))
    z = np.empty((P, N, d.n))
    dW0 = np.empty((P, steps))
    dW = np.empty((P, steps, N))
    for a, p in enumerate(paths):
        g = np.random.Generator(np.random.Philox(key=stream_key(cfg.seed, pairs[p], 0)))
        z0[a] = g.standard_normal(d.n0)
        dW0[a] = g.standard_normal(steps)
        for i in range(N):
            g = np.random.Generator(np.random.Philox(key=stream_key(cfg.seed, pairs[p], i + 1)))
            z[a, i] = g.standard_normal(d.n)
            dW[a, :, i] = g.standard_normal(steps)
        sgn = signs[p]
        z0[a] *= sgn
        z[a] *= sgn
        dW0[a] *= sgn * sq
        dW[a] *= sgn * sq
    xi0 = params.init.leader_mean + z0 @ L0.T
    xi = params.init.follower_mean + z @ L.T
    return xi0, xi, dW0, dW


# ---------------------------------------------------------------- plant tables

TABLES = ("U0", "Az", "Azn", "Bz", "Cz", "Czn", "Dz", "Kown", "Kz",
          "Ay", "Ayz", "Ayn", "By", "Cy", "Cyz", "Cyn", "Dy")


@dataclass(frozen=True)
class Plant:
    """Per-step tables of the linear system above, sampled at the sim steps."""

    mode: str
    tabs: tuple
    ox0: int
    oxb: int
    ox0lim: int
    lead_in: int
    aux: bool

    def tab(self, name):
        return self.tabs[TABLES.index(name)]


def _const(M, steps):
    return np.ascontiguousarray(np.broadcast_to(M, (steps + 1,) + M.shape))


def _sample(f, times):
    if f.K == len(times) - 1:
        return np.ascontiguousarray(f.values)
    return np.ascontiguousarray(f.sample(times))


def openloop_plant(params, stk, policy, steps, realized_leader=True):
    m = params.mats()
    d = params.dims
    n0, n, m0, mm, s = d.n0, d.n, d.m0, d.m, d.s
    lay = policy.layout
    times = time_grid(params.T, steps)
    L0 = _sample(policy.L0, times)
    Ym = _sample(policy.Ymap, times)
    Ast = _sample(stk.A, times)
    Bst = _sample(stk.B, times)
    B0d = _sample(stk.B0_drift, times)
    Ki, Kb, Kphi, K0 = (_sample(getattr(policy, k), times) for k in ("Ki", "Kb", "Kphi", "K0"))
    zd = s + n0
    K1 = steps + 1
    Z = lambda r, c: np.zeros((K1, r, c))
    U0 = Z(m0, zd); U0[:, :, :s] = L0
    Az = Z(zd, zd); Az[:, :s, :s] = Ast - Bst @ Ym; Az[:, s:, s:] = m.A0
    Azn = Z(zd, n); Azn[:, s:, :] = m.G0
    Bz = Z(zd, m0); Bz[:, :s, :] = B0d; Bz[:, s:, :] = m.B0
    Cz = Z(zd, zd); Cz[:, :s, :s] = stk.C0; Cz[:, s:, s:] = m.C0
    Czn = Z(zd, n); Czn[:, s:, :] = m.Gb0
    Dz = Z(zd, m0); Dz[:, :s, :] = stk.D0; Dz[:, s:, :] = m.D0
    # c = [u_i; u_aux], both read the auxiliary state xbar_i
    Kown = Z(2 * mm, 2 * n); Kown[:, :mm, n:] = Ki; Kown[:, mm:, n:] = Ki
    Kz = Z(2 * mm, zd)
    for r, real in ((slice(0, mm), realized_leader), (slice(mm, 2 * mm), False)):
        Kz[:, r, lay.xbar] += Kb
        Kz[:, r, :s] += Kphi @ Ym[:, lay.phi, :]
        if real:
            Kz[:, r, s:] += K0
        else:
            Kz[:, r, lay.x0] += K0
    blk = lambda M: np.block([[M, np.zeros_like(M)], [np.zeros_like(M), M]])
    Ay = _const(blk(m.A), steps)
    By = _const(blk(m.B), steps)
    Cy = _const(blk(m.C), steps)
    Dy = _const(blk(m.D), steps)
    Ayz = Z(2 * n, zd); Ayz[:, :n, s:] = m.F; Ayz[:, n:, lay.xbar] = m.G; Ayz[:, n:, lay.x0] = m.F
    Ayn = Z(2 * n, n); Ayn[:, :n, :] = m.G
    Cyz = Z(2 * n, zd); Cyz[:, :n, s:] = m.Fb; Cyz[:, n:, lay.xbar] = m.Gb; Cyz[:, n:, lay.x0] = m.Fb
    Cyn = Z(2 * n, n); Cyn[:, :n, :] = m.Gb
    tabs = (U0, Az, Azn, Bz, Cz, Czn, Dz, Kown, Kz, Ay, Ayz, Ayn, By, Cy, Cyz, Cyn, Dy)
    return Plant("openloop", tuple(np.ascontiguousarray(a) for a in tabs), ox0=s, oxb=n0,
                 ox0lim=0, lead_in=s, aux=True)


def feedback_plant(params, policy, steps):
    m = params.mats()
    d = params.dims
    n0, n, m0, mm = d.n0, d.n, d.m0, d.m
    times = time_grid(params.T, steps)
    P0, Pb, Kx, Kxb, K0 = (_sample(getattr(policy, k), times) for k in ("P0", "Pbar", "Kx", "Kxb", "K0"))
    zd = n0 + n
    K1 = steps + 1
    Z = lambda r, c: np.zeros((K1, r, c))
    U0 = np.concatenate([P0, Pb], axis=2)
    Az = Z(zd, zd); Az[:, :n0, :n0] = m.A0
    Az[:, n0:, :n0] = m.F + m.B @ K0
    Az[:, n0:, n0:] = m.A + m.G + m.B @ (Kx + Kxb)
    Azn = Z(zd, n); Azn[:, :n0, :] = m.G0
    Bz = Z(zd, m0); Bz[:, :n0, :] = m.B0
    Cz = Z(zd, zd); Cz[:, :n0, :n0] = m.C0
    Czn = Z(zd, n); Czn[:, :n0, :] = m.Gb0
    Dz = Z(zd, m0); Dz[:, :n0, :] = m.D0
    Kz = np.concatenate([K0, Kxb], axis=2)
    Ayz = Z(n, zd); Ayz[:, :, :n0] = m.F
    Cyz = Z(n, zd); Cyz[:, :, :n0] = m.Fb
    tabs = (U0, Az, Azn, Bz, Cz, Czn, Dz, Kx, Kz, _const(m.A, steps), Ayz, _const(m.G, steps),
            _const(m.B, steps), _const(m.C, steps), Cyz, _const(m.Gb, steps), _const(m.D, steps))
    return Plant("feedback", tuple(np.ascontiguousarray(a) for a in tabs), ox0=0, oxb=n0,
                 ox0lim=-1, lead_in=zd, aux=False)


def _pert_tables(params, plant, pert, N, steps):
    d = params.dims
    times = time_grid(params.T, steps)
    zd = plant.tab("Az").shape[1]
    lg = np.zeros((steps + 1, d.m0, zd))
    lo = np.zeros((steps + 1, d.m0))
    fg = np.zeros((steps + 1, d.m, d.n))
    fo = np.zeros((steps + 1, d.m))
    mask = np.zeros(N)
    has_lead = False
    if pert is not None:
        if pert.is_leader:
            if pert.who != "leader":
                raise ConfigError(f"perturbation target {pert.who!r} is not 'leader' or follower indices")
            has_lead = True
            if pert.gain is not None:
                if pert.gain.shape != (d.m0, plant.lead_in):
                    raise ConfigError(f"leader gain offset must be {(d.m0, plant.lead_in)}")
                lg[:, :, :plant.lead_in] = _sample(pert.gain, times)
            if pert.offset is not None:
                if pert.offset.shape != (d.m0, 1):
                    raise ConfigError(f"leader control offset must be ({d.m0}, 1)")
                lo[:] = _sample(pert.offset, times)[:, :, 0]
        else:
            idx = np.asarray(list(pert.who), dtype=np.int64)
            if idx.size and (idx.min() < 0 or idx.max() >= N):
                raise ConfigError("perturbed follower index out of range")
            mask[idx] = 1.0
            if pert.gain is not None:
                if pert.gain.shape != (d.m, d.n):
                    raise ConfigError(f"follower gain offset must be {(d.m, d.n)}")
                fg[:] = _sample(pert.gain, times)
            if pert.offset is not None:
                if pert.offset.shape != (d.m, 1):
                    raise ConfigError(f"follower control offset must be ({d.m}, 1)")
                fo[:] = _sample(pert.offset, times)[:, :, 0]
    return lg, lo, has_lead, mask, fg, fo


# ---------------------------------------------------------------- kernels


@njit
def _mv(out, A, x):
    for i in range(A.shape[0]):
        s = 0.0
        for j in range(A.shape[1]):
            s += A[i, j] * x[j]
        out[i] += s


@njit
def _quad(M, e):
    s = 0.0
    for i in range(e.size):
        for j in range(e.size):
            s += e[i] * M[i, j] * e[j]
    return s


@njit
def sim_kernel(Z0, Y0, dW0, dW, dt, tabs, lg, lo, has_lead, mask, fg, fo, m, ox0, oxb, ox0lim,
               wq, sidx, store_f, oZ, oxN, ou0, oY, oC, J0, Ji, gapF, status):
    """Per-path Euler loop; see the module docstring for the system."""
    U0, Az, Azn, Bz, Cz, Czn, Dz, Kown, Kz = tabs[0], tabs[1], tabs[2], tabs[3], tabs[4], tabs[5], tabs[6], tabs[7], tabs[8]
    Ay, Ayz, Ayn, By, Cy, Cyz, Cyn, Dy = tabs[9], tabs[10], tabs[11], tabs[12], tabs[13], tabs[14], tabs[15], tabs[16]
    P, N, ny = Y0.shape
    zd = Z0.shape[1]
    n0 = m.A0.shape[0]
    n = m.A.shape[0]
    mm = m.B.shape[1]
    m0 = m.B0.shape[1]
    mc = Kown.shape[1]
    steps = dW0.shape[1]
    xN = np.empty(n)
    u0 = np.empty(m0)
    C = np.empty((N, mc))
    kz = np.empty(mc)
    fd = np.empty(ny)
    fs = np.empty(ny)
    dr = np.empty(ny)
    df = np.empty(ny)
    zdr = np.empty(zd)
    zdf = np.empty(zd)
    e0 = np.empty(n0)
    e = np.empty(n)
    ec = np.empty(n)
    for p in range(P):
        Zs = Z0[p].copy()
        Y = Y0[p].copy()
        for k in range(steps + 1):
            xN[:] = 0.0
            for i in range(N):
                for a in range(n):
                    xN[a] += Y[i, a]
            for a in range(n):
                xN[a] /= N
            u0[:] = 0.0
            _mv(u0, U0[k], Zs)
            if has_lead:
                _mv(u0, lg[k], Zs)
                for a in range(m0):
                    u0[a] += lo[k, a]
            kz[:] = 0.0
            _mv(kz, Kz[k], Zs)
            Kk = Kown[k]
            for i in range(N):
                for a in range(mc):
                    s = kz[a]
                    for b in range(ny):
                        s += Kk[a, b] * Y[i, b]
                    C[i, a] = s
                if mask[i] != 0.0:
                    for a in range(mm):
                        s = fo[k, a]
                        for b in range(n):
                            s += fg[k, a, b] * Y[i, b]
                        C[i, a] += s
            j = sidx[k]
            if j >= 0:
                for a in range(zd):
                    oZ[p, j, a] = Zs[a]
                for a in range(n):
                    oxN[p, j, a] = xN[a]
                for a in range(m0):
                    ou0[p, j, a] = u0[a]
                if store_f:
                    for i in range(N):
                        for a in range(ny):
                            oY[p, j, i, a] = Y[i, a]
                        for a in range(mc):
                            oC[p, j, i, a] = C[i, a]
                last = k == steps
                w = wq[k]
                G0m = m.Gamh0 if last else m.Gam0
                Gm = m.Gamh if last else m.Gam
                G1m = m.Gamh1 if last else m.Gam1
                for a in range(n0):
                    s = Zs[ox0 + a]
                    for b in range(n):
                        s -= G0m[a, b] * xN[b]
                    e0[a] = s
                J0[p] += w * (_quad(m.Q0, e0) + _quad(m.R0, u0))
                if last:
                    J0[p] += _quad(m.H0, e0)
                # common part of the follower tracking error
                for a in range(n):
                    s = 0.0
                    for b in range(n):
                        s += Gm[a, b] * xN[b]
                    for b in range(n0):
                        s += G1m[a, b] * Zs[ox0 + b]
                    ec[a] = s
                g = 0.0
                for i in range(N):
                    for a in range(n):
                        e[a] = Y[i, a] - ec[a]
                    ru = 0.0
                    for a in range(mm):
                        for b in range(mm):
                            ru += C[i, a] * m.R[a, b] * C[i, b]
                    Ji[p, i] += w * (_quad(m.Q, e) + ru)
                    if last:
                        Ji[p, i] += _quad(m.H, e)
                    if ny > n:
                        for a in range(n):
                            g += (Y[i, a] - Y[i, n + a]) ** 2
                gapF[p, j] = g / N
            if k == steps:
                break
            # leader side
            zdr[:] = 0.0
            zdf[:] = 0.0
            _mv(zdr, Az[k], Zs)
            _mv(zdr, Azn[k], xN)
            _mv(zdr, Bz[k], u0)
            _mv(zdf, Cz[k], Zs)
            _mv(zdf, Czn[k], xN)
            _mv(zdf, Dz[k], u0)
            fd[:] = 0.0
            fs[:] = 0.0
            _mv(fd, Ayz[k], Zs)
            _mv(fd, Ayn[k], xN)
            _mv(fs, Cyz[k], Zs)
            _mv(fs, Cyn[k], xN)
            bad = False
            Ak, Bk, Ck, Dk = Ay[k], By[k], Cy[k], Dy[k]
            for i in range(N):
                for a in range(ny):
                    sd = fd[a]
                    sf = fs[a]
                    for b in range(ny):
                        sd += Ak[a, b] * Y[i, b]
                        sf += Ck[a, b] * Y[i, b]
                    for b in range(mc):
                        sd += Bk[a, b] * C[i, b]
                        sf += Dk[a, b] * C[i, b]
                    dr[a] = sd
                    df[a] = sf
                w = dW[p, k, i]
                for a in range(ny):
                    v = Y[i, a] + dt * dr[a] + w * df[a]
                    Y[i, a] = v
                    if not (abs(v) <= BLOWUP):
                        bad = True
            w = dW0[p, k]
            for a in range(zd):
                v = Zs[a] + dt * zdr[a] + w * zdf[a]
                Zs[a] = v
                if not (abs(v) <= BLOWUP):
                    bad = True
            if bad:
                status[p] = k + 1
                break


def sim_numpy(Z0, Y0, dW0, dW, dt, tabs, lg, lo, has_lead, mask, fg, fo, m, ox0, oxb, ox0lim,
              wq, sidx, store_f, oZ, oxN, ou0, oY, oC, J0, Ji, gapF, status):
    """Same loop as ``sim_kernel``, vectorized over paths and followers."""
    U0, Az, Azn, Bz, Cz, Czn, Dz, Kown, Kz, Ay, Ayz, Ayn, By, Cy, Cyz, Cyn, Dy = tabs
    P, N, ny = Y0.shape
    n0, n, mm = m.A0.shape[0], m.A.shape[0], m.B.shape[1]
    steps = dW0.shape[1]
    Zs = Z0.copy()
    Y = Y0.copy()
    alive = np.ones(P, dtype=bool)
    fmask = mask[None, :, None]
    tr = lambda M: np.swapaxes(M, -1, -2)
    for k in range(steps + 1):
        xN = Y[:, :, :n].mean(axis=1)
        u0 = Zs @ U0[k].T
        if has_lead:
            u0 = u0 + Zs @ lg[k].T + lo[k]
        C = Y @ Kown[k].T + (Zs @ Kz[k].T)[:, None, :]
        if mask.any():
            C[:, :, :mm] += fmask * (Y[:, :, :n] @ fg[k].T + fo[k])
        j = sidx[k]
        if j >= 0:
            last = k == steps
            oZ[:, j] = Zs
            oxN[:, j] = xN
            ou0[:, j] = u0
            if store_f:
                oY[:, j] = Y
                oC[:, j] = C
            x0 = Zs[:, ox0:ox0 + n0]
            e0 = x0 - xN @ (m.Gamh0 if last else m.Gam0).T
            q0 = lambda M, v: np.einsum("pa,ab,pb->p", v, M, v)
            run0 = q0(m.Q0, e0) + q0(m.R0, u0)
            e = (Y[:, :, :n] - (xN @ (m.Gamh if last else m.Gam).T)[:, None, :]
                 - (x0 @ (m.Gamh1 if last else m.Gam1).T)[:, None, :])
            q = lambda M, v: np.einsum("pia,ab,pib->pi", v, M, v)
            run = q(m.Q, e) + q(m.R, C[:, :, :mm])
            upd = alive
            J0[upd] += wq[k] * run0[upd] + (q0(m.H0, e0)[upd] if last else 0.0)
            Ji[upd] += wq[k] * run[upd] + (q(m.H, e)[upd] if last else 0.0)
            if ny > n:
                gapF[upd, j] = np.mean(np.sum((Y[:, :, :n] - Y[:, :, n:]) ** 2, axis=2), axis=1)[upd]
        if k == steps:
            break
        zdr = Zs @ Az[k].T + xN @ Azn[k].T + u0 @ Bz[k].T
        zdf = Zs @ Cz[k].T + xN @ Czn[k].T + u0 @ Dz[k].T
        fd = (Zs @ Ayz[k].T + xN @ Ayn[k].T)[:, None, :]
        fs = (Zs @ Cyz[k].T + xN @ Cyn[k].T)[:, None, :]
        dr = Y @ Ay[k].T + C @ By[k].T + fd
        df = Y @ Cy[k].T + C @ Dy[k].T + fs
        Ynew = Y + dt * dr + dW[:, k, :, None] * df
        Znew = Zs + dt * zdr + dW0[:, k, None] * zdf
        ok = np.all(np.abs(Znew) <= BLOWUP, axis=1) & np.all(np.abs(Ynew) <= BLOWUP, axis=(1, 2))
        newly = alive & ~ok
        status[newly] = k + 1
        alive &= ok
        Y = np.where(alive[:, None, None], Ynew, Y)
        Zs = np.where(alive[:, None], Znew, Zs)
        if not alive.any():
            break


def _backend():
    return sim_kernel if _jit.USE_NUMBA else sim_numpy


# ---------------------------------------------------------------- driver


def stored_steps(steps, every):
    idx = list(range(0, steps + 1, every))
    if idx[-1] != steps:
        idx.append(steps)
    return np.array(idx, dtype=np.int64)


def trapezoid_weights(t):
    w = np.zeros_like(t)
    h = np.diff(t)
    w[:-1] += 0.5 * h
    w[1:] += 0.5 * h
    return w


def _initial(params, plant, xi0, xi):
    d = params.dims
    P, N = xi.shape[:2]
    zd = plant.tab("Az").shape[1]
    Z0 = np.zeros((P, zd))
    Z0[:, plant.ox0:plant.ox0 + d.n0] = xi0
    Z0[:, plant.oxb:plant.oxb + d.n] = params.init.follower_mean
    if plant.ox0lim >= 0:
        Z0[:, plant.ox0lim:plant.ox0lim + d.n0] = xi0
    Y0 = np.concatenate([xi, xi], axis=2) if plant.aux else xi.copy()
    return Z0, np.ascontiguousarray(Y0)


def _finish(params, cfg, plant, steps, out, extra_fn):
    d = params.dims
    n0, n, mm = d.n0, d.n, d.m
    Zs = out["Z"]
    ens = Ensemble(
        mode=plant.mode, T=params.T, N=int(cfg.N), sim_steps=steps, t=out["t"],
        step_index=out["sidx_list"], Z=Zs, x0=Zs[:, :, plant.ox0:plant.ox0 + n0],
        xbar=Zs[:, :, plant.oxb:plant.oxb + n], xN=out["xN"], u0=out["u0"], J0=out["J0"],
        Ji=out["Ji"], seed=int(cfg.seed), stream_pairs=out["pairs"], stream_signs=out["signs"],
        backend=_jit.BACKEND,
    )
    if out["Y"] is not None:
        ens.x = out["Y"][..., :n]
        ens.u = out["C"][..., :mm]
        if plant.aux:
            ens.xbar_i = out["Y"][..., n:]
    if plant.aux:
        ens.follower_gap = out["gapF"]
        ens.x0_limit = Zs[:, :, plant.ox0lim:plant.ox0lim + n0]
    if extra_fn is not None:
        extra_fn(ens)
    return ens


def run_plants(params, cfg, plants, perts=None):
    """Simulate several plants on identical noise; returns one Ensemble each."""
    cfg.check()
    steps = cfg.steps_for(params)
    N = int(cfg.N)
    d = params.dims
    m = params.mats()
    perts = perts or [None] * len(plants)
    sidx_list = stored_steps(steps, int(cfg.store_every))
    ns = sidx_list.size
    sidx = np.full(steps + 1, -1, dtype=np.int64)
    sidx[sidx_list] = np.arange(ns)
    t = sidx_list * (params.T / steps)
    wq = np.zeros(steps + 1)
    wq[sidx_list] = trapezoid_weights(t)
    store_f = cfg.store_followers
    if store_f is None:
        store_f = cfg.paths * ns * N * 2 * max(d.n, d.m) <= FOLLOWER_STORE_LIMIT
    store_f = bool(store_f)
    P = int(cfg.paths)
    chunk = max(1, min(P, CHUNK_DOUBLES // max(1, steps * (N + 1))))
    kern = _backend()
    dt = params.T / steps
    outs = []
    for plant, pert in zip(plants, perts):
        zd = plant.tab("Az").shape[1]
        ny = plant.tab("Ay").shape[1]
        mc = plant.tab("Kown").shape[1]
        fshape = (P, ns, N) if store_f else (1, 1, 1)
        outs.append({
            "Z": np.zeros((P, ns, zd)), "xN": np.zeros((P, ns, d.n)), "u0": np.zeros((P, ns, d.m0)),
            "Y": np.zeros(fshape + (ny,)), "C": np.zeros(fshape + (mc,)), "J0": np.zeros(P),
            "Ji": np.zeros((P, N)), "gapF": np.zeros((P, ns)), "status": np.full(P, -1, np.int64),
            "pt": _pert_tables(params, plant, pert, N, steps),
        })
    for start in range(0, P, chunk):
        sl = slice(start, min(P, start + chunk))
        xi0, xi, dW0, dW = draw_noise(params, cfg, range(sl.start, sl.stop), steps)
        for plant, o in zip(plants, outs):
            Z0, Y0 = _initial(params, plant, xi0, xi)
            lg, lo, has_lead, mask, fg, fo = o["pt"]
            Pc = sl.stop - sl.start
            bufs = {k: np.zeros((Pc,) + o[k].shape[1:]) for k in ("Z", "xN", "u0", "Y", "C", "J0", "Ji", "gapF")}
            status = np.full(Pc, -1, dtype=np.int64)
            kern(Z0, Y0, dW0, dW, dt, plant.tabs, lg, lo, has_lead, mask, fg, fo, m, plant.ox0,
                 plant.oxb, plant.ox0lim, wq, sidx, store_f, bufs["Z"], bufs["xN"], bufs["u0"],
                 bufs["Y"], bufs["C"], bufs["J0"], bufs["Ji"], bufs["gapF"], status)
            for k, v in bufs.items():
                if store_f or k not in ("Y", "C"):
                    o[k][sl] = v
            bad = np.flatnonzero(status >= 0)
            if bad.size:
                b = bad[0]
                raise SimulationDivergedError(sl.start + int(b), float(status[b]) * dt)
    pairs, signs = _lineage(cfg)
    res = []
    for plant, o in zip(plants, outs):
        o.update(t=t, sidx_list=sidx_list, pairs=pairs, signs=signs)
        if not store_f:
            o["Y"] = o["C"] = None
        res.append(_finish(params, cfg, plant, steps, o, None))
    return res


def _openloop_extras(params, stk, policy, ens):
    """Y = Ymap X and the zeta0 block of Ymap (C0 X + D0 u0) at the stored times."""
    s = params.dims.s
    lay = policy.layout
    X = ens.Z[:, :, :s]
    Ym = policy.Ymap.sample(ens.t)
    ens.X = X
    ens.Y = np.einsum("kab,pkb->pka", Ym, X)
    diff = X @ stk.C0.T + ens.u0 @ stk.D0.T
    ens.zeta0 = np.einsum("kab,pkb->pka", Ym[:, lay.phi0, :], diff)


def _check_grid(params, T, K):
    if T != params.T or K != params.grid_steps:
        raise ConfigError("solution grid does not match the model grid")


def simulate_openloop(params, fol, stk, policy, cfg, perturbation=None):
    _check_grid(params, fol.T, fol.grid_steps)
    steps = cfg.steps_for(params)
    plant = openloop_plant(params, stk, policy, steps, cfg.realized_leader_in_follower_control)
    ens = run_plants(params, cfg, [plant], [perturbation])[0]
    _openloop_extras(params, stk, policy, ens)
    return ens


def simulate_feedback(params, fb, policy, cfg, perturbation=None):
    _check_grid(params, fb.T, fb.grid_steps)
    plant = feedback_plant(params, policy, cfg.steps_for(params))
    return run_plants(params, cfg, [plant], [perturbation])[0]


def make_plant(params, policy, cfg, stk=None):
    steps = cfg.steps_for(params)
    if policy.kind == "openloop":
        if stk is None:
            raise ConfigError("open-loop simulation needs the stacked leader solution")
        return openloop_plant(params, stk, policy, steps, cfg.realized_leader_in_follower_control)
    return feedback_plant(params, policy, steps)


def simulate_perturbed(params, policy, perturbation, cfg, stk=None):
    """Same noise as the unperturbed run under ``cfg.seed``, with the given control offset."""
    ens = run_plants(params, cfg, [make_plant(params, policy, cfg, stk)], [perturbation])[0]
    if policy.kind == "openloop":
        _openloop_extras(params, stk, policy, ens)
    return ens


def simulate_many(params, runs, cfg):
    """Runs ``[(policy, perturbation, stk), ...]`` on common random numbers."""
    plants = [make_plant(params, pol, cfg, stk) for pol, _, stk in runs]
    ens = run_plants(params, cfg, plants, [p for _, p, _ in runs])
    for e, (pol, _, stk) in zip(ens, runs):
        if pol.kind == "openloop":
            _openloop_extras(params, stk, pol, e)
    return ens
