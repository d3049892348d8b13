from __future__ import annotations

import numpy as np
import pytest

from mfgminimax.equilibrium import TrajectoryBundle, fixed_point_solve
from mfgminimax.measures import MeasureFlow, ParticleMeasure, TimeGrid, flow_distance, uniform_quantiles
from mfgminimax.model import build_model
from mfgminimax.nplayer import (GAP_HEADER, RandomProfile, build_profile, deviation_gain, nash_gap_curve,
                                probe_players, setup_players, simulate_profile, gap_bound, write_gap_csv)
from oracles import sigma_x, simple_model

FOUR = ParticleMeasure([[0.0], [1 / 3], [2 / 3], [1.0]])


def model_with(m0, **kw):
    return simple_model([-1.0, 1.0], sigma_x, m0=m0, **kw)


def fake_bundle(m0, steps=4, controls=None):
    grid = TimeGrid(1.0, steps)
    k = len(m0)
    ctrl = np.asarray(controls if controls is not None else [[a % 2] * steps for a in range(k)])
    states = np.repeat(m0.points[:, None, :], steps + 1, axis=1)
    return TrajectoryBundle(grid, 2, m0.weights.copy(), np.arange(k), ctrl, states, np.zeros((k, steps + 1)))


class TestSetup:
    def test_sites_on_atoms(self):
        m0 = ParticleMeasure([[0.1], [0.4], [0.9]])
        s = setup_players(model_with(m0), 3, "user-list", sites=[[0.1], [0.4], [0.9]])
        assert s.w_emp == 0.0 and s.d_max == 0.0

    def test_four_atom_quantiles(self):
        s = setup_players(model_with(FOUR), 2)
        assert s.sites[:, 0] == pytest.approx([1 / 6, 5 / 6], abs=1e-15)
        assert s.w_emp == pytest.approx(1 / 6, abs=1e-12)
        assert s.d_max == pytest.approx(1 / 6, abs=1e-12)
        assert len(s.parts) == 2 and s.parts[0].points[:, 0].tolist() == [0.0, 1 / 3]

    def test_single_player_barycenter(self, rng):
        m0 = ParticleMeasure(rng.normal(size=(7, 1)), rng.random(7) + 0.1, normalize=True)
        s = setup_players(model_with(m0), 1)
        bar = float(m0.weights @ m0.points[:, 0])
        assert s.sites[0, 0] == pytest.approx(bar, abs=1e-12)
        assert s.d_max == pytest.approx(float(m0.weights @ np.abs(m0.points[:, 0] - bar)), abs=1e-12)

    def test_iid_seeded(self):
        m = model_with(uniform_quantiles(-1, 1, 50))
        a, b = setup_players(m, 5, "iid-sample", seed=3), setup_players(m, 5, "iid-sample", seed=3)
        assert np.array_equal(a.sites, b.sites) and a.seed == 3

    def test_quantile_needs_1d(self):
        m = simple_model([np.zeros(2)], lambda x, m: x[:, 0], dim=2)
        with pytest.raises(ValueError, match="one dimension"):
            setup_players(m, 2)

    def test_bad_inputs(self):
        with pytest.raises(ValueError):
            setup_players(model_with(FOUR), 0)
        with pytest.raises(ValueError, match="site rule"):
            setup_players(model_with(FOUR), 2, "grid")


class TestProfile:
    def test_identity_routing(self):
        m0 = ParticleMeasure([[0.1], [0.4], [0.9]])
        s = setup_players(model_with(m0), 3, "user-list", sites=m0.points)
        b = fake_bundle(m0)
        p = build_profile(b, m0, s)
        for i in range(3):
            assert p.probs[i].tolist() == [1.0] and np.array_equal(p.controls[i][0], b.controls[i])

    def test_single_atom(self):
        m0 = ParticleMeasure.dirac([0.2])
        p = build_profile(fake_bundle(m0), m0, setup_players(model_with(m0), 5))
        assert all(pr.tolist() == [1.0] for pr in p.probs)
        assert all(np.array_equal(c, p.controls[0]) for c in p.controls)

    def test_four_atom_conditioning(self):
        p = build_profile(fake_bundle(FOUR), FOUR, setup_players(model_with(FOUR), 2))
        assert p.provenance[0] == [[0], [1]]
        assert p.probs[0] == pytest.approx([0.5, 0.5], abs=1e-12)

    def test_mixture_must_sum(self):
        with pytest.raises(ValueError):
            RandomProfile([np.zeros((2, 3), int)], [np.array([0.5, 0.4])])

    def test_missing_atom(self):
        b = fake_bundle(ParticleMeasure([[0.0], [1 / 3]]))
        with pytest.raises(ValueError):
            build_profile(b, FOUR, setup_players(model_with(FOUR), 2))


class TestSimulate:
    def test_uncoupled_one_iteration(self):
        model = build_model("uncoupled", {}, m0={"type": "uniform", "atoms": 12})
        eq = fixed_point_solve(model, steps=16, state_nodes=41)
        s = setup_players(model, 4)
        out = simulate_profile(model, s, build_profile(eq.bundle, model.m0, s), eq.flow.grid, tol=1e-10)
        assert out.converged and out.iterations == 1

    def test_single_player_dirac_self_consistent(self):
        model = build_model("lq1d", {}, m0={"type": "dirac", "at": 0.2})
        eq = fixed_point_solve(model, steps=16, state_nodes=41, schedule="picard", tol_W=1e-6)
        s = setup_players(model, 1)
        out = simulate_profile(model, s, build_profile(eq.bundle, model.m0, s), eq.flow.grid, tol=1e-10)
        assert flow_distance(out.flow, eq.flow) <= eq.diagnostics["scheme_tol"] + 1e-9

    def test_symmetric_two_players(self):
        m0 = ParticleMeasure([[-0.5], [0.5]])
        model = build_model("congestion1d", {}, m0={"type": "atoms", "points": [[-0.5], [0.5]]})
        grid = model.time_grid(16)
        s = setup_players(model, 2, "user-list", sites=m0.points)
        rng = np.random.default_rng(0)
        c = rng.integers(model.n_controls, size=16)
        prof = RandomProfile([c[None, :], (model.n_controls - 1 - c)[None, :]], [np.ones(1), np.ones(1)])
        out = simulate_profile(model, s, prof, grid, tol=1e-12)
        assert out.payoffs[0] == pytest.approx(out.payoffs[1], abs=1e-9)

    def test_frozen_linearity(self, rng):
        model = build_model("congestion1d", {}, m0={"type": "uniform", "atoms": 6})
        grid = model.time_grid(16)
        s = setup_players(model, 3)
        frozen = MeasureFlow.constant(grid, model.m0)
        ctrl = [rng.integers(model.n_controls, size=(1, 16)) for _ in range(3)]
        base = RandomProfile(ctrl, [np.ones(1)] * 3)
        a, b = rng.integers(model.n_controls, size=(2, 16))
        mixed = simulate_profile(model, s, base, grid, deviation=(0, np.stack([a, b]), [0.3, 0.7]), frozen=frozen)
        pa = simulate_profile(model, s, base, grid, deviation=(0, a[None], [1.0]), frozen=frozen)
        pb = simulate_profile(model, s, base, grid, deviation=(0, b[None], [1.0]), frozen=frozen)
        assert mixed.payoffs[0] == pytest.approx(0.3 * pa.payoffs[0] + 0.7 * pb.payoffs[0], abs=1e-12)


class TestGain:
    def test_uncoupled_gain_small(self):
        model = build_model("uncoupled", {}, m0={"type": "uniform", "atoms": 12})
        eq = fixed_point_solve(model, steps=16, state_nodes=41)
        # quantile sites coincide with the atoms when N is a multiple of the atom count
        rows, manifest = nash_gap_curve(model, eq, [12, 24], [0])
        tol = eq.diagnostics["scheme_tol"]
        assert all(r["d_max"] <= 1e-12 and r["gain"] <= tol + 1e-12 for r in rows)
        assert manifest["N_list"] == [12, 24]

    def test_uncoupled_site_mismatch_within_bound(self):
        model = build_model("uncoupled", {}, m0={"type": "uniform", "atoms": 12})
        eq = fixed_point_solve(model, steps=16, state_nodes=41)
        rows, _ = nash_gap_curve(model, eq, [2, 4], [0])
        tol = eq.diagnostics["scheme_tol"]
        assert all(0 < r["gain"] <= r["bound"] + tol for r in rows)

    def test_single_player_gain(self):
        model = build_model("lq1d", {}, m0={"type": "dirac", "at": 0.2})
        eq = fixed_point_solve(model, steps=16, state_nodes=41, schedule="picard", tol_W=1e-6)
        s = setup_players(model, 1)
        prof = build_profile(eq.bundle, model.m0, s)
        cands = np.repeat(np.arange(model.n_controls)[:, None], 16, axis=1)
        g, info = deviation_gain(model, s, prof, 0, cands, eq.flow.grid, tol=1e-10)
        assert g <= eq.diagnostics["scheme_tol"] + 1e-9 and info["all_converged"]

    def test_bound_arithmetic(self):
        c = {"Chat1": 2.0, "Chat2": 3.0, "Chat3": 5.0}
        assert gap_bound(c, 0.1, 0.2, 10) == pytest.approx(0.2 + 0.6 + 0.5)

    def test_probe_players(self):
        assert probe_players(5).tolist() == list(range(5))
        p = probe_players(128)
        assert len(p) == 8 and p[0] == 0 and p[-1] == 127

    def test_csv_header(self, tmp_path):
        rows = [{"N": 2, "seed": 0, "w_emp": 0.1, "d_max": 0.2, "gain": 0.0, "bound": 1.0, "converged": True}]
        write_gap_csv(rows, tmp_path / "g.csv")
        lines = (tmp_path / "g.csv").read_text().splitlines()
        assert lines[0].split(",") == GAP_HEADER and lines[1].endswith(",1")

    def test_ascending_N(self):
        model = build_model("uncoupled", {}, m0={"type": "uniform", "atoms": 4})
        eq = fixed_point_solve(model, steps=4, state_nodes=21)
        with pytest.raises(ValueError):
            nash_gap_curve(model, eq, [4, 2], [0])
