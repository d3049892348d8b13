"""Randomized invariants driven by hypothesis."""
from __future__ import annotations

import numpy as np
from hypothesis import given
from hypothesis import strategies as st

from mfgminimax.dynamics import RelaxedControl, control_distance
from mfgminimax.measures import (MeasureFlow, ParticleMeasure, TimeGrid, consolidate, decompose_to_empirical,
                                 empirical, mix, push_forward, w1_distance)
from mfgminimax.model import build_model, conjugate, hamiltonian
from mfgminimax.value import StateGrid, solve_value
from mfgminimax.model import Box
from oracles import cdf_w1, lp_w1, simple_model

coord = st.floats(-3, 3, allow_nan=False, allow_infinity=False)
weight = st.floats(0.05, 1.0)


@st.composite
def measures(draw, dim=1, max_atoms=8):
    k = draw(st.integers(1, max_atoms))
    pts = draw(st.lists(st.lists(coord, min_size=dim, max_size=dim), min_size=k, max_size=k))
    w = draw(st.lists(weight, min_size=k, max_size=k))
    return ParticleMeasure(np.array(pts), np.array(w), normalize=True)


@given(measures(), measures())
def test_w1_symmetric(a, b):
    assert w1_distance(a, b) == w1_distance(b, a)


@given(measures(), measures(), measures())
def test_w1_triangle(a, b, c):
    assert w1_distance(a, c) <= w1_distance(a, b) + w1_distance(b, c) + 1e-9


@given(measures(), measures())
def test_w1_1d_matches_lp(a, b):
    d = w1_distance(a, b)
    assert abs(d - lp_w1(a, b)) <= 1e-9 and abs(d - cdf_w1(a, b)) <= 1e-9


@given(measures(dim=2, max_atoms=6), measures(dim=2, max_atoms=6))
def test_w1_2d_matches_lp(a, b):
    assert abs(w1_distance(a, b) - lp_w1(a, b)) <= 1e-9


@given(measures(), measures(), st.lists(st.floats(-1, 1), min_size=4, max_size=4), st.floats(-2, 2))
def test_w1_duality_lower_bound(a, b, slopes, shift):
    knots = np.array([-2.0, -0.5, 0.5, 2.0]) + shift

    def phi(x):
        x = x[:, 0]
        out = slopes[0] * (x - knots[0])
        for s0, s1, k in zip(slopes, slopes[1:], knots[1:]):
            out = out + (s1 - s0) * np.maximum(x - k, 0.0)
        return out

    assert abs(a.integrate(phi) - b.integrate(phi)) <= w1_distance(a, b) + 1e-9


@given(measures(dim=2), st.floats(-2, 2), st.floats(0.0, 0.5))
def test_push_forward_mass(m, a, r):
    img = push_forward(m, lambda x: np.sin(a * x), merge_radius=r)
    assert abs(img.weights.sum() - 1.0) <= 1e-15


@given(measures(max_atoms=10), st.integers(1, 6), st.integers(0, 2**31 - 1))
def test_decomposition_bullets(m0, N, seed):
    rng = np.random.default_rng(seed)
    sites = rng.uniform(-3, 3, size=(N, 1))
    parts, w = decompose_to_empirical(m0, sites)
    recon = ParticleMeasure(np.vstack([p.points for p in parts]),
                            np.concatenate([p.weights / N for p in parts]), normalize=True)
    assert w1_distance(recon, m0) < 1e-9
    assert all(abs(p.weights.sum() - 1.0) <= 1e-12 for p in parts)
    cost = sum(p.integrate(lambda x, s=s: np.abs(x[:, 0] - s[0])) / N for p, s in zip(parts, sites))
    assert abs(cost - w) <= 1e-9
    assert abs(w - w1_distance(m0, empirical(sites))) <= 1e-9


@given(measures(), measures(), st.floats(0, 1))
def test_mix_between(a, b, beta):
    m = mix(a, b, beta)
    assert abs(m.weights.sum() - 1.0) <= 1e-12
    assert w1_distance(m, a) <= beta * w1_distance(a, b) + 1e-9


@given(measures(max_atoms=30), st.integers(1, 10))
def test_consolidate_bound(m, cap):
    out, moved = consolidate(m, cap)
    assert len(out) <= cap
    assert w1_distance(out, m) <= moved + 1e-9


_LQ = build_model("lq1d", {}, m0={"type": "uniform", "atoms": 5})


@given(st.floats(0, 1), st.floats(-1.5, 1.5), st.floats(-5, 5), st.floats(-3, 3))
def test_hamiltonian_dominates_and_fenchel(t, x, p, xi):
    h = hamiltonian(_LQ, t, [x], _LQ.m0, [p])
    vals = [p * _LQ.velocity(t, np.array([[x]]), _LQ.m0, j)[0, 0]
            - _LQ.running_cost(t, np.array([[x]]), _LQ.m0, j)[0] for j in range(_LQ.n_controls)]
    assert all(h.value >= v for v in vals)
    assert all(h.value == vals[j] for j in h.argmax_controls)
    hs = conjugate(_LQ, t, [x], _LQ.m0, [xi])
    assert h.value + hs >= p * xi - 1e-9


@given(st.integers(1, 6), st.integers(2, 4), st.integers(0, 2**31 - 1))
def test_relaxed_control_rows_and_distance(steps, n, seed):
    rng = np.random.default_rng(seed)
    g = TimeGrid(1.0, steps)
    P = rng.normal(size=(n, 1))
    a = RelaxedControl(g, rng.dirichlet(np.ones(n), size=steps))
    b = RelaxedControl(g, rng.dirichlet(np.ones(n), size=steps))
    c = RelaxedControl(g, rng.dirichlet(np.ones(n), size=steps))
    assert np.allclose(a.cells.sum(axis=1), 1.0, atol=1e-12)
    assert control_distance(a, a, P) == 0.0
    assert abs(control_distance(a, b, P) - control_distance(b, a, P)) <= 1e-12
    assert control_distance(a, c, P) <= control_distance(a, b, P) + control_distance(b, c, P) + 1e-12


@given(st.lists(st.floats(-2, 2), min_size=4, max_size=4), st.lists(st.floats(0, 1), min_size=4, max_size=4))
def test_dp_monotone_in_terminal(coef, bump):
    def s1(x, m):
        return np.polyval(coef, x[:, 0])

    def s2(x, m):
        return s1(x, m) + np.polyval(bump, x[:, 0] ** 2)

    grid = TimeGrid(1.0, 8)
    mu = MeasureFlow.constant(grid, ParticleMeasure.dirac([0.0]))
    sg = StateGrid(Box([-2.0], [2.0]), (41,), Box([-1.0], [1.0]))
    v1 = solve_value(simple_model([-1.0, 0.0, 1.0], s1), mu, sg).values
    v2 = solve_value(simple_model([-1.0, 0.0, 1.0], s2), mu, sg).values
    assert np.all(v1 <= v2 + 1e-12)
