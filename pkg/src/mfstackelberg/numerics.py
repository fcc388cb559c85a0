"""Pseudoinverse, range/PSD tests, backward RK4 and time-grid functions."""
from dataclasses import dataclass

import numpy as np

from ._jit import njit
from .errors import NotSolvableError

BLOWUP = 1e12


def _pinv_core(a, rtol):
    u, s, vt = np.linalg.svd(a, full_matrices=False)
    out = np.zeros((a.shape[1], a.shape[0]))
    if s.size == 0:
        return out
    cut = rtol * s[0]
    for k in range(s.size):
        if s[k] > cut:
            out += np.outer(vt[k], u[:, k]) / s[k]
    return out


pinv_core = njit(_pinv_core)


def pinv(M, rank_tol=1e-10):
    """Moore-Penrose pseudoinverse via SVD.

    Singular values below ``rank_tol`` times the largest one are dropped.
    """
    if rank_tol <= 0:
        raise ValueError("rank_tol must be positive")
    M = np.atleast_2d(np.asarray(M, dtype=float))
    if not np.all(np.isfinite(M)):
        raise ValueError("pinv: non-finite entries")
    return _pinv_core(np.ascontiguousarray(M), rank_tol)


def range_subset(A, B, tol=1e-9):
    """True iff the columns of A lie in the range of B."""
    A = np.atleast_2d(np.asarray(A, dtype=float))
    B = np.atleast_2d(np.asarray(B, dtype=float))
    if A.shape[0] != B.shape[0]:
        raise ValueError("range_subset: row counts differ")
    proj = B @ pinv(B)
    resid = A - proj @ A
    return bool(np.max(np.abs(resid), initial=0.0) <= tol)


def is_psd(M, tol=1e-10):
    """True iff the symmetric matrix M has smallest eigenvalue >= -tol."""
    M = np.atleast_2d(np.asarray(M, dtype=float))
    if M.shape[0] != M.shape[1]:
        raise ValueError("is_psd: matrix not square")
    if np.max(np.abs(M - M.T), initial=0.0) > tol:
        raise ValueError("is_psd: matrix not symmetric")
    return bool(np.linalg.eigvalsh(0.5 * (M + M.T))[0] >= -tol)


def time_grid(T, K):
    """Times k T / K, k = 0..K, each correctly rounded for exactly representable T."""
    return np.arange(K + 1) * float(T) / K


@dataclass(frozen=True)
class TimeGridFn:
    """Matrix-valued function sampled on the uniform grid t_k = k T / K.

    ``values`` has shape (K+1, rows, cols). Evaluation between grid points is
    piecewise linear.
    """

    T: float
    values: np.ndarray

    def __post_init__(self):
        v = np.asarray(self.values, dtype=float)
        if v.ndim == 1:
            v = v[:, None, None]
        elif v.ndim == 2:
            v = v[:, :, None]
        if v.shape[0] < 2:
            raise ValueError("TimeGridFn needs at least two grid points")
        if not self.T > 0:
            raise ValueError("TimeGridFn horizon must be positive")
        v.setflags(write=False)
        object.__setattr__(self, "values", v)

    @property
    def K(self):
        return self.values.shape[0] - 1

    @property
    def dt(self):
        return self.T / self.K

    @property
    def grid(self):
        return time_grid(self.T, self.K)

    @property
    def shape(self):
        return self.values.shape[1:]

    def at(self, k):
        return self.values[k]

    def eval(self, t):
        t = float(t)
        if t < -1e-12 * self.T or t > self.T * (1 + 1e-12):
            raise ValueError(f"t={t} outside [0, {self.T}]")
        x = min(max(t / self.dt, 0.0), float(self.K))
        k = min(int(np.floor(x)), self.K - 1)
        w = x - k
        if w == 0.0:
            return self.values[k].copy()
        if w == 1.0:
            return self.values[k + 1].copy()
        return (1.0 - w) * self.values[k] + w * self.values[k + 1]

    __call__ = eval

    def sample(self, times):
        """Values at an array of times, shape (len(times), rows, cols)."""
        times = np.asarray(times, dtype=float)
        if times.size and (times.min() < -1e-12 * self.T or times.max() > self.T * (1 + 1e-12)):
            raise ValueError("sample times outside [0, T]")
        x = np.clip(times / self.dt, 0.0, float(self.K))
        k = np.minimum(np.floor(x).astype(np.int64), self.K - 1)
        w = (x - k)[:, None, None]
        out = (1.0 - w) * self.values[k] + w * self.values[k + 1]
        exact = np.isclose(x, np.round(x), rtol=0, atol=1e-9)
        idx = np.round(x[exact]).astype(np.int64)
        out[exact] = self.values[idx]
        return out

    def transpose(self):
        return TimeGridFn(self.T, np.swapaxes(self.values, 1, 2))

    def max_abs(self):
        return float(np.max(np.abs(self.values)))


def _rk4_loop(rhs, y_T, T, K, p):
    """Classical RK4 run backward from t=T to t=0.

    ``rhs(h, y, p)`` returns dy/dt at time h*T/(2K), so tabulated inputs can be
    indexed at grid points (even h) and midpoints (odd h). Returns the path and
    the grid index where the state left the finite region (-1 if none).
    The solver modules carry jitted copies of this loop with their right-hand
    side bound by name, since numba cannot cache a loop taking a function.
    """
    n = y_T.size
    out = np.empty((K + 1, n))
    out[K] = y_T
    y = y_T.copy()
    h = T / K
    for k in range(K - 1, -1, -1):
        k1 = rhs(2 * k + 2, y, p)
        k2 = rhs(2 * k + 1, y - 0.5 * h * k1, p)
        k3 = rhs(2 * k + 1, y - 0.5 * h * k2, p)
        k4 = rhs(2 * k, y - h * k3, p)
        y = y - (h / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)
        out[k] = y
        if _escaped(y):
            return out, k
    return out, -1


def _escaped(y):
    for j in range(y.size):
        if not np.isfinite(y[j]) or abs(y[j]) > BLOWUP:
            return True
    return False


escaped = njit(_escaped)


def run_backward(loop, y_T, T, K, p, what="Riccati system"):
    """Run a jitted backward RK4 loop and turn blow-up into NotSolvableError."""
    y_T = np.ascontiguousarray(y_T, dtype=float)
    out, bad = loop(y_T, float(T), int(K), p)
    if bad >= 0:
        raise NotSolvableError(f"{what} left the finite region", t=bad * T / K)
    return out


def integrate_backward(rhs, terminal, T, K):
    """Integrate dY/dt = rhs(t, Y) backward from Y(T) = terminal.

    Returns a TimeGridFn on K uniform steps; the value at T is ``terminal``.
    """
    if K < 2:
        raise ValueError("K must be >= 2")
    terminal = np.asarray(terminal, dtype=float)
    shape = terminal.shape
    half = T / (2.0 * K)

    def flat(hidx, y, p):
        return np.asarray(rhs(hidx * half, y.reshape(shape)), dtype=float).ravel()

    out, bad = _rk4_loop(flat, terminal.ravel().copy(), float(T), int(K), None)
    if bad >= 0:
        raise NotSolvableError("backward integration left the finite region", t=bad * T / K)
    return TimeGridFn(T, out.reshape((K + 1,) + shape))


def _lagrange_weights(nodes, x):
    """Value and first-derivative weights of the interpolant through ``nodes`` at x."""
    nodes = np.asarray(nodes, dtype=float)
    m = nodes.size
    w0 = np.ones(m)
    w1 = np.zeros(m)
    for j in range(m):
        others = np.delete(nodes, j)
        den = np.prod(nodes[j] - others)
        w0[j] = np.prod(x - others) / den
        s = 0.0
        for i in range(m - 1):
            s += np.prod(np.delete(x - others, i))
        w1[j] = s / den
    return w0, w1


def midpoint_table(values):
    """Interleave grid values with 4-point Lagrange midpoints.

    ``values`` has shape (K+1, ...); the result has shape (2K+1, ...) with even
    rows equal to ``values`` and odd rows the O(dt^4) midpoint estimates.
    """
    values = np.asarray(values, dtype=float)
    K = values.shape[0] - 1
    out = np.empty((2 * K + 1,) + values.shape[1:])
    out[0::2] = values
    if K < 3:
        out[1::2] = 0.5 * (values[:-1] + values[1:])
        return out
    for k in range(K):
        j0 = min(max(k - 1, 0), K - 3)
        w0, _ = _lagrange_weights(np.arange(4), k + 0.5 - j0)
        out[2 * k + 1] = np.tensordot(w0, values[j0:j0 + 4], axes=1)
    return out


def staggered_residual(rhs, path, T, p):
    """ODE residual of a stored solution at the grid midpoints.

    Value and derivative at t_{k+1/2} come from 6-point stencils of the stored
    path (no RK stages involved); the residual is derivative minus rhs.
    Returns an array of shape (K, state size).
    """
    path = np.asarray(path, dtype=float)
    K = path.shape[0] - 1
    m = min(6, K + 1)
    dt = T / K
    res = np.empty((K, path.shape[1]))
    cache = {}
    for k in range(K):
        j0 = min(max(k - m // 2 + 1, 0), K + 1 - m)
        x = k + 0.5 - j0
        if x not in cache:
            cache[x] = _lagrange_weights(np.arange(m), x)
        w0, w1 = cache[x]
        seg = path[j0:j0 + m]
        val = w0 @ seg
        der = (w1 @ seg) / dt
        res[k] = der - rhs(2 * k + 1, np.ascontiguousarray(val), p)
    return res
