"""Best-response push-forward operator, the fixed-point driver and its artifacts."""
from __future__ import annotations

import csv
import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator

import numpy as np

from .dynamics import RelaxedControl, Trajectory, integrate_indices, payoff_many
from .measures import (DEFAULT_SUPPORT_CAP, MeasureFlow, ParticleMeasure, TimeGrid, _dump_json, _fmt,
                       consolidate_flow, flow_distance, flow_lipschitz_defect, mix_flows)
from .model import Box, Model, argmax_ties, bound_box_and_K, constant_ledger, estimate_ledger
from .value import (StateGrid, ValueField, best_response_many, default_state_grid, one_step_objective,
                    solve_value)

log = logging.getLogger(__name__)

DEFAULT_PARTICLE_CAP = 5000


@dataclass(frozen=True)
class TrajectoryBundle:
    """Weighted family of pure-control trajectories, one or more per initial atom.

    ``controls`` holds control indices per cell, ``states`` and ``cost`` the
    integrated paths.  Together with the weights this is a finitely supported
    measure on (trajectory, cost) pairs.
    """

    grid: TimeGrid
    n_controls: int
    weights: np.ndarray
    atom_index: np.ndarray
    controls: np.ndarray
    states: np.ndarray
    cost: np.ndarray

    def __post_init__(self):
        w = np.asarray(self.weights, dtype=float)
        if np.any(w <= 0) or abs(w.sum() - 1.0) > 1e-12:
            raise ValueError(f"bundle weights must be positive and sum to 1 (sum={w.sum():.17g})")
        B = w.shape[0]
        if self.controls.shape != (B, self.grid.steps) or self.states.shape[:2] != (B, self.grid.n_nodes):
            raise ValueError("bundle arrays disagree with the grid")

    def __len__(self) -> int:
        return self.weights.shape[0]

    @property
    def x0(self) -> np.ndarray:
        return self.states[:, 0]

    def entries(self) -> Iterator[tuple[float, np.ndarray, RelaxedControl, Trajectory]]:
        for i in range(len(self)):
            yield (float(self.weights[i]), self.states[i, 0],
                   RelaxedControl.from_indices(self.grid, self.n_controls, self.controls[i]),
                   Trajectory(self.grid, self.states[i], self.cost[i]))

    def snapshot(self, k: int) -> ParticleMeasure:
        return ParticleMeasure(self.states[:, k], self.weights, normalize=True).merged()

    def flow(self) -> MeasureFlow:
        return MeasureFlow(self.grid, tuple(self.snapshot(k) for k in range(self.grid.n_nodes)))

    def reintegration_defect(self, model: Model, mu: MeasureFlow) -> float:
        states, cost = integrate_indices(model, mu, self.x0, self.controls)
        return float(max(np.abs(states - self.states).max(), np.abs(cost - self.cost).max()))

    def to_csv(self, path) -> None:
        n = self.states.shape[2]
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh, lineterminator="\n")
            writer.writerow(["entry", "atom", "weight", "k", "t"] + [f"x_{i + 1}" for i in range(n)]
                            + ["z", "control"])
            for e in range(len(self)):
                for k, t in enumerate(self.grid.nodes):
                    ctrl = str(self.controls[e, k]) if k < self.grid.steps else ""
                    writer.writerow([e, int(self.atom_index[e]), _fmt(self.weights[e]), k, _fmt(t)]
                                    + [_fmt(v) for v in self.states[e, k]] + [_fmt(self.cost[e, k]), ctrl])

    @classmethod
    def from_csv(cls, path, grid: TimeGrid, n_controls: int) -> TrajectoryBundle:
        with open(path) as fh:
            rows = list(csv.reader(fh))
        header, body = rows[0], rows[1:]
        n = sum(1 for h in header if h.startswith("x_"))
        S = grid.n_nodes
        if len(body) % S:
            raise ValueError("bundle file row count is not a multiple of the node count")
        B = len(body) // S
        weights = np.empty(B)
        atoms = np.empty(B, dtype=int)
        ctrl = np.empty((B, grid.steps), dtype=int)
        states = np.empty((B, S, n))
        cost = np.empty((B, S))
        for r, row in enumerate(body):
            e, k = divmod(r, S)
            atoms[e] = int(row[1])
            weights[e] = float(row[2])
            states[e, k] = [float(v) for v in row[5:5 + n]]
            cost[e, k] = float(row[5 + n])
            if k < grid.steps:
                ctrl[e, k] = int(row[6 + n])
        return cls(grid, n_controls, weights, atoms, ctrl, states, cost)


def _split_first(model: Model, mu: MeasureFlow, vfield: ValueField, X0: np.ndarray, w0: np.ndarray):
    """Expand each atom over all first-cell argmax controls with equal weight."""
    ties = argmax_ties(one_step_objective(model, mu, vfield, 0, X0), axis=1)
    atom, first, weight = [], [], []
    for a in range(X0.shape[0]):
        js = np.flatnonzero(ties[a])
        for j in js:
            atom.append(a)
            first.append(j)
            weight.append(w0[a] / len(js))
    return np.array(atom), np.array(first), np.array(weight)


def apply_A(model: Model, mu: MeasureFlow, sgrid: StateGrid, *, split_ties: bool = False):
    """Best responses of every initial atom against ``mu`` and the flow they generate.

    Returns ``(nu, bundle, vfield)`` with ``nu[0] = m0``.
    """
    vfield = solve_value(model, mu, sgrid)
    m0 = model.m0
    X0, w0 = m0.points, m0.weights
    if split_ties:
        atom, first, weight = _split_first(model, mu, vfield, X0, w0)
        idx, states, cost = best_response_many(model, mu, vfield, X0[atom], first=first)
    else:
        atom = np.arange(X0.shape[0])
        weight = w0
        idx, states, cost = best_response_many(model, mu, vfield, X0)
    weight = np.asarray(weight, dtype=float)
    weight = weight / weight.sum()
    bundle = TrajectoryBundle(mu.grid, model.n_controls, weight, atom, idx, states, cost)
    snaps = [m0] + [bundle.snapshot(k) for k in range(1, mu.grid.n_nodes)]
    return MeasureFlow(mu.grid, tuple(snaps)), bundle, vfield


def schedule_beta(schedule: str, k: int, beta: float | None = None) -> float:
    """Damping weight for update ``k`` (0-based).

    ``fictitious``: 1, 1/2, 1/3, ... so the iterate is the running average of
    all best-response flows.  ``picard``: always 1.  ``constant``: ``beta``
    after a full first step.
    """
    if k == 0 or schedule == "picard":
        return 1.0
    if schedule == "fictitious":
        return 1.0 / (k + 1)
    if schedule == "constant":
        if beta is None or not 0 < beta <= 1:
            raise ValueError("constant schedule needs 0 < beta <= 1")
        return float(beta)
    raise ValueError(f"unknown schedule {schedule!r}")


@dataclass
class EquilibriumResult:
    flow: MeasureFlow
    vfield: ValueField
    bundle: TrajectoryBundle
    residual: float
    iterations: int
    converged: bool
    diagnostics: dict = field(default_factory=dict)

    def save(self, directory) -> None:
        d = Path(directory)
        d.mkdir(parents=True, exist_ok=True)
        self.flow.to_json(d / "flow.json")
        write_flow_csv(self.flow, d / "flow.csv")
        self.vfield.to_csv(d / "value.csv")
        (d / "value.json").write_text(_dump_json(self.vfield.meta()))
        self.bundle.to_csv(d / "bundle.csv")
        (d / "diagnostics.json").write_text(_dump_json(self.diagnostics))


def write_flow_csv(flow: MeasureFlow, path) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["k", "t"] + [f"x_{i + 1}" for i in range(flow.dim)] + ["w"])
        for k, (t, snap) in enumerate(zip(flow.grid.nodes, flow.snapshots)):
            ts = _fmt(t)
            for x, w in zip(snap.points, snap.weights):
                writer.writerow([k, ts] + [_fmt(v) for v in x] + [_fmt(w)])


def load_result(directory, model: Model) -> EquilibriumResult:
    """Reload a saved result; raises ``ValueError``/``OSError`` on missing or corrupt files."""
    d = Path(directory)
    flow = MeasureFlow.from_json(d / "flow.json")
    vfield = ValueField.from_csv(d / "value.csv", d / "value.json")
    if vfield.grid != flow.grid:
        raise ValueError("value and flow grids differ")
    bundle = TrajectoryBundle.from_csv(d / "bundle.csv", flow.grid, model.n_controls)
    diag = json.loads((d / "diagnostics.json").read_text())
    return EquilibriumResult(flow, vfield, bundle, float(diag["residual"]), int(diag["iterations"]),
                             bool(diag["converged"]), diag)


def fixed_point_solve(model: Model, sgrid: StateGrid | None = None, *, steps: int = 64,
                      schedule: str = "fictitious", beta: float | None = None, tol_W: float = 1e-3,
                      max_iter: int = 50, particle_cap: int = DEFAULT_PARTICLE_CAP,
                      split_ties: bool = False, state_nodes: int | None = None) -> EquilibriumResult:
    """Damped iteration ``mu <- (1 - beta_k) mu + beta_k A(mu)`` from the frozen initial flow.

    Stops once ``W(A(mu), mu) <= tol_W`` or after ``max_iter`` updates; the
    returned flow is the last iterate together with its measured residual.
    """
    if tol_W <= 0:
        raise ValueError("tol_W must be positive")
    if max_iter < 0:
        raise ValueError("max_iter must be nonnegative")
    grid = model.time_grid(steps)
    box, K = bound_box_and_K(model, grid)
    if sgrid is None:
        sgrid = default_state_grid(model, box, state_nodes, reach=1.01 * K * grid.dt)
    mu = MeasureFlow.constant(grid, model.m0)
    history, betas, moved = [], [], []
    it = 0
    while True:
        nu, bundle, vfield = apply_A(model, mu, sgrid, split_ties=split_ties)
        res = flow_distance(nu, mu)
        history.append(res)
        log.info("iteration %d residual %.3e", it, res)
        if res <= tol_W or it >= max_iter:
            break
        b = schedule_beta(schedule, it, beta)
        betas.append(b)
        mu, shift = consolidate_flow(mix_flows(mu, nu, b), particle_cap)
        moved.append(shift)
        it += 1
    converged = bool(res <= tol_W)
    J = payoff_many(model, mu, bundle.states, bundle.cost)
    dp_gap = float(np.max(np.abs(J - vfield.at_node(0, bundle.x0))))
    bundle_gap = flow_distance(bundle.flow(), mu)
    ledger = model.lipschitz
    if ledger is None:
        log.warning("model declares no Lipschitz ledger; using sampled estimates on the invariant box")
        ledger = estimate_ledger(model, box)
    diag = {
        "residual": res,
        "iterations": it,
        "converged": converged,
        "residual_history": history,
        "betas": betas,
        "schedule": schedule,
        "tol_W": tol_W,
        "max_iter": max_iter,
        "particle_cap": particle_cap,
        "split_ties": split_ties,
        "consolidation_w1": max(moved, default=0.0),
        "dp_consistency": dp_gap,
        "scheme_tol": max(dp_gap, res),
        "bundle_flow_w1": bundle_gap,
        "flow_lipschitz_defect": flow_lipschitz_defect(mu, K),
        "K": K,
        "box": box.to_json_obj(),
        "steps": grid.steps,
        "T": grid.T,
        "constants": constant_ledger(model, grid, box, ledger),
        "ledger_source": "declared" if model.lipschitz is not None else "sampled",
        "model": {"name": model.name, "params": model.params},
    }
    if not converged:
        log.warning("fixed point not reached: residual %.3e > tol %.3e after %d updates", res, tol_W, it)
    return EquilibriumResult(mu, vfield, bundle, res, it, converged, diag)


def cell_index(points: np.ndarray, edges) -> np.ndarray:
    """Cell multi-index of each point for per-axis ``edges`` (right edge closed)."""
    idx = np.empty(points.shape, dtype=int)
    for a, e in enumerate(edges):
        e = np.asarray(e, dtype=float)
        x = points[:, a]
        if np.any(x < e[0] - 1e-12) or np.any(x > e[-1] + 1e-12):
            raise ValueError("cell partition does not cover all particles")
        idx[:, a] = np.clip(np.searchsorted(e, x, side="right") - 1, 0, len(e) - 2)
    return idx


def mean_field_velocity(bundle: TrajectoryBundle, k: int, edges) -> list[tuple[tuple, np.ndarray, float]]:
    """Per nonempty cell: mass-weighted mean discrete velocity of bundle particles at node ``k``."""
    if not 0 <= k < bundle.grid.steps:
        raise ValueError("node index must leave room for a forward difference")
    X = bundle.states[:, k]
    V = (bundle.states[:, k + 1] - X) / bundle.grid.dt
    cells = cell_index(X, edges)
    out = {}
    for c, v, w in zip(map(tuple, cells), V, bundle.weights):
        acc = out.setdefault(c, [np.zeros(X.shape[1]), 0.0])
        acc[0] += w * v
        acc[1] += w
    return [(c, acc[0] / acc[1], acc[1]) for c, acc in sorted(out.items())]


def integral_transform_defect(bundle: TrajectoryBundle, edges, phi, grad_phi) -> float:
    """``max_k |d/dt ∫phi d mu - sum_cells mass <b, grad phi(center)>|`` with forward differences."""
    dt = bundle.grid.dt
    centers = [0.5 * (np.asarray(e)[1:] + np.asarray(e)[:-1]) for e in edges]
    worst = 0.0
    for k in range(bundle.grid.steps):
        lhs = float(bundle.weights @ (phi(bundle.states[:, k + 1]) - phi(bundle.states[:, k]))) / dt
        rhs = 0.0
        for c, b, mass in mean_field_velocity(bundle, k, edges):
            center = np.array([centers[a][i] for a, i in enumerate(c)])[None, :]
            rhs += mass * float(np.dot(b, grad_phi(center)[0]))
        worst = max(worst, abs(lhs - rhs))
    return worst
