"""Game data model: dynamics, costs, initial laws, horizon."""
import hashlib
import json
from collections import namedtuple
from dataclasses import dataclass, fields
from importlib import resources
from pathlib import Path

import numpy as np
import yaml

from .errors import ModelParseError

SYM_TOL = 1e-12


def _mat(x):
    a = np.array(x, dtype=float)
    if a.ndim == 0:
        a = a.reshape(1, 1)
    elif a.ndim == 1:
        a = a.reshape(-1, 1)
    a.setflags(write=False)
    return a


def _vec(x):
    a = np.array(x, dtype=float).reshape(-1)
    a.setflags(write=False)
    return a


class _Block:
    """Frozen dataclass whose fields are coerced to float matrices."""

    def __post_init__(self):
        for f in fields(self):
            object.__setattr__(self, f.name, _mat(getattr(self, f.name)))

    def to_dict(self):
        return {f.name: getattr(self, f.name).tolist() for f in fields(self)}


@dataclass(frozen=True)
class Dimensions:
    n0: int
    n: int
    m0: int
    m: int

    def __post_init__(self):
        for f in fields(self):
            v = getattr(self, f.name)
            if isinstance(v, bool) or int(v) != v:
                raise ModelParseError(f"dims.{f.name} must be an integer, got {v!r}")
            object.__setattr__(self, f.name, int(v))

    @property
    def s(self):
        """Stacked open-loop dimension 2(n0+n)."""
        return 2 * (self.n0 + self.n)

    def to_dict(self):
        return {"n0": self.n0, "n": self.n, "m0": self.m0, "m": self.m}


@dataclass(frozen=True)
class LeaderDynamics(_Block):
    A0: np.ndarray
    B0: np.ndarray
    C0: np.ndarray
    D0: np.ndarray
    G0: np.ndarray
    Gbar0: np.ndarray


@dataclass(frozen=True)
class FollowerDynamics(_Block):
    A: np.ndarray
    B: np.ndarray
    C: np.ndarray
    D: np.ndarray
    G: np.ndarray
    Gbar: np.ndarray
    F: np.ndarray
    Fbar: np.ndarray


@dataclass(frozen=True)
class LeaderCost(_Block):
    Q0: np.ndarray
    R0: np.ndarray
    H0: np.ndarray
    Gamma0: np.ndarray
    Gammahat0: np.ndarray


@dataclass(frozen=True)
class FollowerCost(_Block):
    Q: np.ndarray
    R: np.ndarray
    H: np.ndarray
    Gamma: np.ndarray
    Gammahat: np.ndarray
    Gamma1: np.ndarray
    Gammahat1: np.ndarray


@dataclass(frozen=True)
class WeightAggregates:
    QG: np.ndarray
    HG: np.ndarray
    QG1: np.ndarray
    HG1: np.ndarray


@dataclass(frozen=True)
class InitialLaw:
    """Gaussian initial laws; every follower shares (mean, cov)."""

    leader_mean: np.ndarray
    leader_cov: np.ndarray
    follower_mean: np.ndarray
    follower_cov: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "leader_mean", _vec(self.leader_mean))
        object.__setattr__(self, "follower_mean", _vec(self.follower_mean))
        object.__setattr__(self, "leader_cov", _mat(self.leader_cov))
        object.__setattr__(self, "follower_cov", _mat(self.follower_cov))

    def leader_second_moment(self):
        return self.leader_cov + np.outer(self.leader_mean, self.leader_mean)

    def follower_second_moment(self):
        return self.follower_cov + np.outer(self.follower_mean, self.follower_mean)

    def to_dict(self):
        return {
            "leader_mean": self.leader_mean.tolist(),
            "leader_cov": self.leader_cov.tolist(),
            "follower_mean": self.follower_mean.tolist(),
            "follower_cov": self.follower_cov.tolist(),
        }


Mats = namedtuple(
    "Mats",
    "A0 B0 C0 D0 G0 Gb0 A B C D G Gb F Fb Q0 R0 H0 Gam0 Gamh0 "
    "Q R H Gam Gamh Gam1 Gamh1 QG HG QG1 HG1",
)


@dataclass(frozen=True)
class ModelParams:
    dims: Dimensions
    leader_dyn: LeaderDynamics
    follower_dyn: FollowerDynamics
    leader_cost: LeaderCost
    follower_cost: FollowerCost
    init: InitialLaw
    T: float = 1.0
    grid_steps: int = 2000

    def __post_init__(self):
        object.__setattr__(self, "T", float(self.T))
        object.__setattr__(self, "grid_steps", int(self.grid_steps))

    def replace(self, **changes):
        """Copy with whole sections or individual matrices replaced.

        Keyword names may be section names (``leader_dyn=...``), ``T``,
        ``grid_steps``, or any matrix field name (``A0=...``, ``Q=...``).
        """
        sections = {f.name: getattr(self, f.name) for f in fields(self)}
        for key, val in changes.items():
            if key in sections:
                sections[key] = val
                continue
            for sec in ("leader_dyn", "follower_dyn", "leader_cost", "follower_cost", "init"):
                block = sections[sec]
                if key in {f.name for f in fields(block)}:
                    d = {f.name: getattr(block, f.name) for f in fields(block)}
                    d[key] = val
                    sections[sec] = type(block)(**d)
                    break
            else:
                raise KeyError(f"unknown model field {key!r}")
        return ModelParams(**sections)

    def mats(self):
        """All matrices as contiguous float arrays, in kernel-friendly order."""
        ld, fd, lc, fc = self.leader_dyn, self.follower_dyn, self.leader_cost, self.follower_cost
        w = weight_aggregates(fc)
        c = np.ascontiguousarray
        return Mats(
            c(ld.A0), c(ld.B0), c(ld.C0), c(ld.D0), c(ld.G0), c(ld.Gbar0),
            c(fd.A), c(fd.B), c(fd.C), c(fd.D), c(fd.G), c(fd.Gbar), c(fd.F), c(fd.Fbar),
            c(lc.Q0), c(lc.R0), c(lc.H0), c(lc.Gamma0), c(lc.Gammahat0),
            c(fc.Q), c(fc.R), c(fc.H), c(fc.Gamma), c(fc.Gammahat), c(fc.Gamma1), c(fc.Gammahat1),
            c(w.QG), c(w.HG), c(w.QG1), c(w.HG1),
        )

    def to_dict(self):
        return {
            "dims": self.dims.to_dict(),
            "leader_dyn": self.leader_dyn.to_dict(),
            "follower_dyn": self.follower_dyn.to_dict(),
            "leader_cost": self.leader_cost.to_dict(),
            "follower_cost": self.follower_cost.to_dict(),
            "init": self.init.to_dict(),
            "horizon": {"T": self.T, "grid_steps": self.grid_steps},
        }

    def hash(self):
        """SHA-256 of the canonical JSON form."""
        blob = json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(blob.encode()).hexdigest()


def weight_aggregates(cost):
    """Aggregated weights Q_Gamma, H_Gammahat, Q_Gamma1, H_Gammahat1."""
    Q, H = cost.Q, cost.H
    G, Gh = cost.Gamma, cost.Gammahat
    I = np.eye(Q.shape[0])
    QG = Q @ G + G.T @ Q - G.T @ Q @ G
    HG = H @ Gh + Gh.T @ H - Gh.T @ H @ Gh
    QG1 = (I - G).T @ Q @ cost.Gamma1
    HG1 = (I - Gh).T @ H @ cost.Gammahat1
    return WeightAggregates(QG, HG, QG1, HG1)


def _shape_checks(params):
    d = params.dims
    n0, n, m0, m = d.n0, d.n, d.m0, d.m
    return {
        "leader_dyn": {"A0": (n0, n0), "B0": (n0, m0), "C0": (n0, n0), "D0": (n0, m0),
                       "G0": (n0, n), "Gbar0": (n0, n)},
        "follower_dyn": {"A": (n, n), "B": (n, m), "C": (n, n), "D": (n, m), "G": (n, n),
                         "Gbar": (n, n), "F": (n, n0), "Fbar": (n, n0)},
        "leader_cost": {"Q0": (n0, n0), "R0": (m0, m0), "H0": (n0, n0), "Gamma0": (n0, n),
                        "Gammahat0": (n0, n)},
        "follower_cost": {"Q": (n, n), "R": (m, m), "H": (n, n), "Gamma": (n, n),
                          "Gammahat": (n, n), "Gamma1": (n, n0), "Gammahat1": (n, n0)},
    }


def _psd_ok(S):
    if S.shape[0] != S.shape[1] or np.max(np.abs(S - S.T), initial=0.0) > SYM_TOL * max(1.0, np.abs(S).max(initial=0.0)):
        return False
    return np.linalg.eigvalsh(0.5 * (S + S.T))[0] >= -1e-12 * max(1.0, np.abs(S).max(initial=0.0))


def validate(params):
    """List every dimension mismatch, asymmetric weight or bad covariance."""
    out = []
    d = params.dims
    for f in fields(d):
        if getattr(d, f.name) < 1:
            out.append(f"dims.{f.name}: must be a positive integer")
    if out:
        return out
    for sec, spec in _shape_checks(params).items():
        block = getattr(params, sec)
        for name, shape in spec.items():
            M = getattr(block, name)
            if M.shape != shape:
                out.append(f"{sec}.{name}: shape {M.shape} != expected {shape}")
            elif not np.all(np.isfinite(M)):
                out.append(f"{sec}.{name}: non-finite entries")
    for sec, names in (("leader_cost", ("Q0", "R0", "H0")), ("follower_cost", ("Q", "R", "H"))):
        block = getattr(params, sec)
        for name in names:
            M = getattr(block, name)
            if M.ndim == 2 and M.shape[0] == M.shape[1] and np.all(np.isfinite(M)):
                if np.max(np.abs(M - M.T), initial=0.0) > SYM_TOL:
                    out.append(f"{sec}.{name}: not symmetric")
    ini = params.init
    for name, size in (("leader_mean", d.n0), ("follower_mean", d.n)):
        v = getattr(ini, name)
        if v.shape != (size,):
            out.append(f"init.{name}: length {v.shape[0]} != expected {size}")
    for name, size in (("leader_cov", d.n0), ("follower_cov", d.n)):
        S = getattr(ini, name)
        if S.shape != (size, size):
            out.append(f"init.{name}: shape {S.shape} != expected {(size, size)}")
        elif not np.all(np.isfinite(S)) or not _psd_ok(S):
            out.append(f"init.{name}: not symmetric positive semidefinite")
    if not (np.isfinite(params.T) and params.T > 0):
        out.append("horizon.T: must be positive")
    if params.grid_steps < 2:
        out.append("horizon.grid_steps: must be >= 2")
    return out


_SECTIONS = {
    "leader_dyn": LeaderDynamics,
    "follower_dyn": FollowerDynamics,
    "leader_cost": LeaderCost,
    "follower_cost": FollowerCost,
}


def _node_lines(node, prefix=(), out=None):
    """Map key paths of a composed YAML tree to 1-based line numbers."""
    if out is None:
        out = {}
    if isinstance(node, yaml.MappingNode):
        for k, v in node.value:
            path = prefix + (str(k.value),)
            out[path] = k.start_mark.line + 1
            _node_lines(v, path, out)
    return out


def from_dict(doc, lines=None, source="<model>"):
    """Build ModelParams from a parsed document tree."""
    lines = lines or {}

    def where(*path):
        ln = lines.get(tuple(path))
        return f"{source}:{ln}" if ln else source

    def need(mapping, key, *path):
        if not isinstance(mapping, dict) or key not in mapping:
            raise ModelParseError(f"{where(*path)}: missing key '{'.'.join(path + (key,))}'")
        return mapping[key]

    if not isinstance(doc, dict):
        raise ModelParseError(f"{source}: top level must be a mapping")
    try:
        dd = need(doc, "dims")
        dims = Dimensions(*(need(dd, k, "dims") for k in ("n0", "n", "m0", "m")))
        blocks = {}
        for sec, cls in _SECTIONS.items():
            raw = need(doc, sec)
            kw = {}
            for f in fields(cls):
                val = need(raw, f.name, sec)
                try:
                    kw[f.name] = _mat(val)
                except (TypeError, ValueError) as exc:
                    raise ModelParseError(f"{where(sec, f.name)}: {sec}.{f.name} is not a numeric matrix ({exc})")
            blocks[sec] = cls(**kw)
        ini = need(doc, "init")
        init = InitialLaw(*(np.array(need(ini, k, "init"), dtype=float)
                            for k in ("leader_mean", "leader_cov", "follower_mean", "follower_cov")))
        hz = need(doc, "horizon")
        T = float(need(hz, "T", "horizon"))
        K = hz.get("grid_steps", 2000) if isinstance(hz, dict) else 2000
        if isinstance(K, bool) or int(K) != K:
            raise ModelParseError(f"{where('horizon', 'grid_steps')}: grid_steps must be an integer")
    except ModelParseError:
        raise
    except (TypeError, ValueError) as exc:
        raise ModelParseError(f"{source}: {exc}")
    return ModelParams(dims, blocks["leader_dyn"], blocks["follower_dyn"], blocks["leader_cost"],
                       blocks["follower_cost"], init, T, int(K))


def loads_model(text, source="<string>"):
    try:
        node = yaml.compose(text)
        doc = yaml.safe_load(text)
    except yaml.YAMLError as exc:
        mark = getattr(exc, "problem_mark", None)
        loc = f"{source}:{mark.line + 1}" if mark is not None else source
        raise ModelParseError(f"{loc}: {getattr(exc, 'problem', None) or exc}")
    lines = _node_lines(node) if node is not None else {}
    return from_dict(doc, lines, source)


def load_model(path):
    """Read a model file (YAML; JSON is a subset and also accepted)."""
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as exc:
        raise ModelParseError(f"{path}: cannot read ({exc.strerror})")
    return loads_model(text, str(path))


def dumps_model(params):
    return yaml.safe_dump(params.to_dict(), sort_keys=False, default_flow_style=None)


def table1_model():
    """Scalar reference model (horizon T=1, 2000 grid steps)."""
    text = resources.files("mfstackelberg").joinpath("data/table1.yaml").read_text(encoding="utf-8")
    return loads_model(text, "table1.yaml")


def table1_path():
    return Path(str(resources.files("mfstackelberg").joinpath("data/table1.yaml")))
