"""Random and degenerate models shared by the test modules."""
import numpy as np

from mfstackelberg.model import (
    Dimensions, FollowerCost, FollowerDynamics, InitialLaw, LeaderCost, LeaderDynamics,
    ModelParams,
)


def _psd(rng, n, scale=1.0, shift=0.0):
    X = rng.normal(size=(n, n)) * scale
    return X @ X.T + shift * np.eye(n)


def random_model(rng, n0=None, n=None, m0=None, m=None, T=0.5, grid_steps=200, scale=0.4):
    """Well-posed model with PSD state weights and positive definite control weights."""
    n0 = n0 or int(rng.integers(1, 3))
    n = n or int(rng.integers(1, 3))
    m0 = m0 or int(rng.integers(1, 3))
    m = m or int(rng.integers(1, 3))
    g = lambda *shape: rng.normal(size=shape) * scale
    return ModelParams(
        dims=Dimensions(n0, n, m0, m),
        leader_dyn=LeaderDynamics(A0=g(n0, n0) - np.eye(n0), B0=g(n0, m0), C0=g(n0, n0),
                                  D0=g(n0, m0), G0=g(n0, n), Gbar0=g(n0, n)),
        follower_dyn=FollowerDynamics(A=g(n, n) - np.eye(n), B=g(n, m), C=g(n, n), D=g(n, m),
                                      G=g(n, n), Gbar=g(n, n), F=g(n, n0), Fbar=g(n, n0)),
        leader_cost=LeaderCost(Q0=_psd(rng, n0, 0.7), R0=_psd(rng, m0, 0.5, 1.0),
                               H0=_psd(rng, n0, 0.7), Gamma0=g(n0, n), Gammahat0=g(n0, n)),
        follower_cost=FollowerCost(Q=_psd(rng, n, 0.7), R=_psd(rng, m, 0.5, 1.0),
                                   H=_psd(rng, n, 0.7), Gamma=g(n, n), Gammahat=g(n, n),
                                   Gamma1=g(n, n0), Gammahat1=g(n, n0)),
        init=InitialLaw(leader_mean=rng.normal(size=n0), leader_cov=_psd(rng, n0, 0.5),
                        follower_mean=rng.normal(size=n), follower_cov=_psd(rng, n, 0.5)),
        T=T, grid_steps=grid_steps,
    )


def zero_weight_model(base, follower=True, leader=True):
    """Copy of ``base`` with the chosen agents' state weights set to zero and R = I."""
    d = base.dims
    out = base
    if follower:
        out = out.replace(Q=np.zeros((d.n, d.n)), H=np.zeros((d.n, d.n)), R=np.eye(d.m))
    if leader:
        out = out.replace(Q0=np.zeros((d.n0, d.n0)), H0=np.zeros((d.n0, d.n0)), R0=np.eye(d.m0))
    return out
