"""Finite-N game built from a mean-field equilibrium and its epsilon-Nash check.

Players start at sites ``x_i``; the initial measure is split into ``N``
equal-mass pieces by an optimal plan, and every bundle trajectory is routed
to the players through that plan.  Each player then holds a finite mixture
of open-loop controls.  Mixtures are expanded into weighted trajectory
copies, so expectations are exact.
"""
from __future__ import annotations

import csv
import logging
from dataclasses import dataclass, field

import numpy as np

from .dynamics import integrate_indices, payoff_many
from .equilibrium import EquilibriumResult, TrajectoryBundle
from .measures import (MeasureFlow, ParticleMeasure, TimeGrid, _dump_json, _fmt, empirical,
                       empirical_plan, flow_distance, quantile_plan_1d)
from .model import Model
from .value import StateGrid, best_response_many, solve_value

log = logging.getLogger(__name__)

SITE_RULES = ("quantile", "iid-sample", "user-list")
GAP_HEADER = ["N", "seed", "w_emp", "d_max", "gain", "bound", "converged"]


@dataclass(frozen=True)
class PlayerSetup:
    sites: np.ndarray
    plan: np.ndarray
    parts: list
    w_emp: float
    d_max: float
    site_rule: str = "user-list"
    seed: int | None = None

    @property
    def N(self) -> int:
        return self.sites.shape[0]


def quantile_sites(m0: ParticleMeasure, N: int) -> np.ndarray:
    """Barycenters of the ``N`` consecutive equal-mass slices of a 1D measure."""
    if m0.dim != 1:
        raise ValueError("quantile sites are only defined in one dimension")
    x = m0.points[:, 0]
    i, j, mass = quantile_plan_1d(x, m0.weights, np.arange(N, dtype=float), np.full(N, 1.0 / N))
    sums = np.bincount(j, weights=mass * x[i], minlength=N)
    return (sums * N)[:, None]


def setup_players(model: Model, N: int, site_rule: str = "quantile", *, seed: int = 0,
                  sites=None) -> PlayerSetup:
    if N < 1:
        raise ValueError("N must be at least 1")
    m0 = model.m0
    if site_rule == "quantile":
        pts = quantile_sites(m0, N)
    elif site_rule == "iid-sample":
        rng = np.random.default_rng(seed)
        pts = m0.points[rng.choice(len(m0), size=N, p=m0.weights)]
    elif site_rule == "user-list":
        if sites is None:
            raise ValueError("user-list site rule needs explicit sites")
        pts = np.asarray(sites, dtype=float).reshape(N, model.dim)
    else:
        raise ValueError(f"unknown site rule {site_rule!r}; choose from {SITE_RULES}")
    plan, w = empirical_plan(m0, pts)
    dist = np.linalg.norm(m0.points[:, None, :] - pts[None, :, :], axis=2)
    d_max = float(N * np.max(np.sum(plan * dist, axis=0)))
    parts = []
    for i in range(N):
        nz = plan[:, i] > 0
        parts.append(ParticleMeasure(m0.points[nz], plan[nz, i], normalize=True))
    return PlayerSetup(pts, plan, parts, w, d_max, site_rule, seed if site_rule == "iid-sample" else None)


@dataclass(frozen=True)
class RandomProfile:
    """Per player: control index sequences ``(k_i, steps)``, probabilities, and source bundle entries."""

    controls: list
    probs: list
    provenance: list = field(default_factory=list)

    def __post_init__(self):
        for p in self.probs:
            if np.any(np.asarray(p) <= 0) or abs(float(np.sum(p)) - 1.0) > 1e-12:
                raise ValueError("mixture probabilities must be positive and sum to 1")

    @property
    def N(self) -> int:
        return len(self.controls)

    def replaced(self, j: int, controls, probs) -> RandomProfile:
        c = list(self.controls)
        p = list(self.probs)
        c[j] = np.atleast_2d(np.asarray(controls, dtype=int))
        p[j] = np.atleast_1d(np.asarray(probs, dtype=float))
        return RandomProfile(c, p, list(self.provenance))


def build_profile(bundle: TrajectoryBundle, m0: ParticleMeasure, setup: PlayerSetup) -> RandomProfile:
    """Route bundle entries to players: ``P_i(entry) = N * plan[atom, i] * weight / m0(atom)``."""
    N = setup.N
    if setup.plan.shape[0] != len(m0):
        raise ValueError("player setup was built for a different initial measure")
    if not np.allclose(bundle.x0, m0.points[bundle.atom_index], atol=1e-12):
        raise ValueError("bundle starting points do not match the initial measure atoms")
    covered = np.zeros(len(m0), dtype=bool)
    covered[bundle.atom_index] = True
    if np.any(~covered & (setup.plan.sum(axis=1) > 0)):
        raise ValueError("an initial atom carried by the plan has no bundle entry")
    share = bundle.weights / m0.weights[bundle.atom_index]
    controls, probs, prov = [], [], []
    for i in range(N):
        p = N * setup.plan[bundle.atom_index, i] * share
        keep = np.flatnonzero(p > 0)
        merged: dict[bytes, list] = {}
        for e in keep:
            key = bundle.controls[e].tobytes()
            slot = merged.setdefault(key, [bundle.controls[e], 0.0, []])
            slot[1] += p[e]
            slot[2].append(int(e))
        items = list(merged.values())
        pr = np.array([it[1] for it in items])
        controls.append(np.array([it[0] for it in items]))
        probs.append(pr / pr.sum())
        prov.append([it[2] for it in items])
    return RandomProfile(controls, probs, prov)


@dataclass
class NPlayerOutcome:
    flow: MeasureFlow
    payoffs: np.ndarray
    iterations: int
    converged: bool
    change: float
    gaps: dict = field(default_factory=dict)
    bound: float | None = None


def _expand(setup: PlayerSetup, profile: RandomProfile):
    owner, x0, idx, w, p = [], [], [], [], []
    N = setup.N
    for i in range(N):
        for c, q in zip(profile.controls[i], profile.probs[i]):
            owner.append(i)
            x0.append(setup.sites[i])
            idx.append(c)
            w.append(q / N)
            p.append(q)
    return np.array(owner), np.array(x0), np.array(idx), np.array(w), np.array(p)


def _snapshot_flow(grid: TimeGrid, states: np.ndarray, w: np.ndarray, first: ParticleMeasure) -> MeasureFlow:
    snaps = [first] + [ParticleMeasure(states[:, k], w, normalize=True).merged() for k in range(1, grid.n_nodes)]
    return MeasureFlow(grid, tuple(snaps))


def simulate_profile(model: Model, setup: PlayerSetup, profile: RandomProfile, grid: TimeGrid, *,
                     deviation: tuple | None = None, tol: float = 1e-4, max_iter: int = 200,
                     init: MeasureFlow | None = None, frozen: MeasureFlow | None = None) -> NPlayerOutcome:
    """Solve the coupled N-player system by Picard iteration on the empirical flow.

    ``deviation = (j, controls, probs)`` replaces player ``j``'s mixture.
    ``init`` seeds the iteration (the pass from ``init`` is a warm start and
    is not counted).  With ``frozen`` the copies are integrated once against
    that flow and no iteration takes place.
    """
    if deviation is not None:
        profile = profile.replaced(*deviation)
    owner, X0, idx, w, p = _expand(setup, profile)
    start = empirical(setup.sites)
    if frozen is not None:
        states, cost = integrate_indices(model, frozen, X0, idx)
        nu, its, conv, change = frozen, 0, True, 0.0
    else:
        nu = init if init is not None else MeasureFlow.constant(grid, start)
        states, cost = integrate_indices(model, nu, X0, idx)
        nu = _snapshot_flow(grid, states, w, start)
        its, conv, change = 0, False, np.inf
        while its < max_iter:
            states, cost = integrate_indices(model, nu, X0, idx)
            new = _snapshot_flow(grid, states, w, start)
            change = flow_distance(new, nu)
            nu = new
            its += 1
            if change <= tol:
                conv = True
                break
        if not conv:
            log.warning("N-player iteration stopped at change %.3e after %d passes", change, its)
    J = payoff_many(model, nu, states, cost)
    payoffs = np.bincount(owner, weights=p * J, minlength=setup.N)
    return NPlayerOutcome(nu, payoffs, its, conv, float(change))


def probe_players(N: int, count: int = 8) -> np.ndarray:
    if N <= count:
        return np.arange(N)
    return np.unique(np.round(np.linspace(0, N - 1, count)).astype(int))


def default_candidates(model: Model, baseline: MeasureFlow, sgrid: StateGrid, site) -> np.ndarray:
    """Best response from ``site`` against ``baseline`` followed by every constant control."""
    vf = solve_value(model, baseline, sgrid)
    br, _, _ = best_response_many(model, baseline, vf, np.reshape(site, (1, -1)))
    const = np.repeat(np.arange(model.n_controls)[:, None], baseline.grid.steps, axis=1)
    return np.vstack([br, const])


def deviation_gain(model: Model, setup: PlayerSetup, profile: RandomProfile, j: int, candidates, grid: TimeGrid,
                   *, baseline: NPlayerOutcome | None = None, tol: float = 1e-4, max_iter: int = 200,
                   init: MeasureFlow | None = None) -> tuple[float, dict]:
    """Largest payoff improvement of player ``j`` over pure candidate controls."""
    cands = np.atleast_2d(np.asarray(candidates, dtype=int))
    if cands.shape[0] == 0:
        raise ValueError("candidate set is empty")
    if baseline is None:
        baseline = simulate_profile(model, setup, profile, grid, tol=tol, max_iter=max_iter, init=init)
    best, info = -np.inf, {}
    for c in cands:
        out = simulate_profile(model, setup, profile, grid, deviation=(j, c[None, :], [1.0]),
                               tol=tol, max_iter=max_iter, init=baseline.flow)
        g = float(out.payoffs[j] - baseline.payoffs[j])
        if g > best:
            best = g
            info = {"flow": out.flow, "converged": out.converged, "control": c}
        info["all_converged"] = info.get("all_converged", True) and out.converged
    return best, info


def gap_bound(constants: dict, w_emp: float, d_max: float, N: int) -> float:
    return constants["Chat1"] * w_emp + constants["Chat2"] * d_max + constants["Chat3"] / N


def nash_gap_curve(model: Model, equilibrium: EquilibriumResult, N_list, seeds, *, site_rule: str = "quantile",
                   tol: float | None = None, max_iter: int = 200, probes: int = 8) -> tuple[list, dict]:
    """Measured deviation gains against the bound for every ``(N, seed)``.

    Returns the table rows (also carrying the two flow-distance checks) and a
    manifest with the constants and tolerances used.
    """
    N_list = list(N_list)
    if N_list != sorted(N_list):
        raise ValueError("N_list must be ascending")
    diag = equilibrium.diagnostics
    consts = diag["constants"]
    scheme_tol = float(diag["scheme_tol"])
    tol = tol if tol is not None else float(diag.get("tol_W", 1e-3)) / 10
    grid = equilibrium.flow.grid
    sgrid = equilibrium.vfield.sgrid
    rows = []
    for N in N_list:
        done = None
        for seed in seeds:
            if done is not None and site_rule != "iid-sample":
                # sites do not depend on the seed, so the measurement is identical
                rows.append(dict(done, seed=seed))
                continue
            setup = setup_players(model, N, site_rule, seed=seed)
            profile = build_profile(equilibrium.bundle, model.m0, setup)
            base = simulate_profile(model, setup, profile, grid, tol=tol, max_iter=max_iter,
                                    init=equilibrium.flow)
            gains, dev_w = [], 0.0
            conv = base.converged
            for j in probe_players(N, probes):
                cands = default_candidates(model, base.flow, sgrid, setup.sites[j])
                g, info = deviation_gain(model, setup, profile, j, cands, grid, baseline=base, tol=tol,
                                         max_iter=max_iter)
                gains.append(g)
                conv = conv and info["all_converged"]
                dev_w = max(dev_w, flow_distance(info["flow"], equilibrium.flow))
            bound = gap_bound(consts, setup.w_emp, setup.d_max, N)
            rows.append({
                "N": N, "seed": seed, "w_emp": setup.w_emp, "d_max": setup.d_max,
                "gain": float(max(gains)), "bound": bound, "converged": bool(conv),
                "flow_w1": flow_distance(base.flow, equilibrium.flow),
                "flow_bound": consts["C3"] * setup.w_emp + scheme_tol,
                "deviation_flow_w1": dev_w,
                "deviation_flow_bound": consts["C3"] * setup.w_emp + consts["C4"] / N + scheme_tol,
            })
            done = rows[-1]
            log.info("N=%d seed=%s gain=%.3e bound=%.3e", N, seed, rows[-1]["gain"], bound)
    manifest = {
        "constants": consts,
        "scheme_tol": scheme_tol,
        "inner_tol": tol,
        "inner_max_iter": max_iter,
        "probes": probes,
        "site_rule": site_rule,
        "seeds": list(seeds),
        "N_list": N_list,
        "rows": rows,
    }
    return rows, manifest


def write_gap_csv(rows, path) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(GAP_HEADER)
        for r in rows:
            writer.writerow([r["N"], r["seed"], _fmt(r["w_emp"]), _fmt(r["d_max"]), _fmt(r["gain"]),
                             _fmt(r["bound"]), int(r["converged"])])


def write_manifest(manifest: dict, path) -> None:
    with open(path, "w") as fh:
        fh.write(_dump_json(manifest))
