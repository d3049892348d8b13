"""Independent reference computations used by the tests."""
from __future__ import annotations

import numpy as np
from scipy.optimize import linprog

from mfgminimax.measures import ParticleMeasure
from mfgminimax.model import Model


def lp_w1(a: ParticleMeasure, b: ParticleMeasure) -> float:
    """W1 as a dense transportation LP solved by HiGHS."""
    cost = np.linalg.norm(a.points[:, None, :] - b.points[None, :, :], axis=2)
    k, m = cost.shape
    rows = []
    for i in range(k):
        r = np.zeros((k, m))
        r[i, :] = 1
        rows.append(r.ravel())
    for j in range(m):
        r = np.zeros((k, m))
        r[:, j] = 1
        rows.append(r.ravel())
    res = linprog(cost.ravel(), A_eq=np.array(rows), b_eq=np.concatenate([a.weights, b.weights]),
                  bounds=(0, None), method="highs")
    assert res.status == 0
    return float(res.fun)


def cdf_w1(a: ParticleMeasure, b: ParticleMeasure) -> float:
    """1D W1 as the L1 distance between CDFs."""
    xs = np.union1d(a.points[:, 0], b.points[:, 0])
    Fa = np.array([a.weights[a.points[:, 0] <= x].sum() for x in xs])
    Fb = np.array([b.weights[b.points[:, 0] <= x].sum() for x in xs])
    return float(np.sum(np.abs(Fa - Fb)[:-1] * np.diff(xs)))


def random_measure(rng, k: int, dim: int = 1, scale: float = 1.0) -> ParticleMeasure:
    return ParticleMeasure(rng.normal(size=(k, dim)) * scale, rng.random(k) + 0.05, normalize=True)


def const_f(t, x, m, u):
    return np.broadcast_to(u, x.shape)


def zero_g(t, x, m, u):
    return np.zeros(x.shape[0])


def simple_model(controls, sigma, *, f=const_f, g=zero_g, m0=None, T=1.0, dim=1) -> Model:
    m0 = m0 if m0 is not None else ParticleMeasure.dirac(np.zeros(dim))
    return Model(dim, T, controls, f, g, sigma, m0)


def sigma_x(x, m):
    return x[:, 0]


def sigma_negabs(x, m):
    return -np.abs(x[:, 0])


def v_affine(X, t, T=1.0):
    return X + (T - t)


def v_negabs(X, t, T=1.0):
    return -np.maximum(0.0, np.abs(X) - (T - t))
