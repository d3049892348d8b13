"""Backward dynamic programming for the value function against a frozen flow.

The scheme is semi-Lagrangian: one explicit Euler step along each control,
multilinear interpolation of the next time slice, and an exact max over the
finite control set.  Interpolation clamps at the box boundary, which keeps the
scheme monotone.
"""
from __future__ import annotations

import csv
import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .dynamics import RelaxedControl, Trajectory, payoff_many, rk4_step_pure
from .measures import MeasureFlow, TimeGrid, _dump_json, _fmt
from .model import Box, Model, argmax_ties, conjugate_1d, conjugate_from_vertices, _vertices

DEFAULT_NODES = {1: 101, 2: 61, 3: 21}


class StateGridTooSmall(ValueError):
    pass


@dataclass(frozen=True)
class StateGrid:
    """Tensor lattice on ``box``.

    ``core`` is the region whose characteristic feet must stay inside the
    lattice (normally the invariant box of the dynamics); nodes outside it
    only serve as a clamped margin.
    """

    box: Box
    counts: tuple
    core: Box | None = None

    def __post_init__(self):
        counts = tuple(int(c) for c in np.atleast_1d(self.counts))
        if len(counts) != self.box.dim or min(counts) < 2:
            raise ValueError("need at least 2 nodes per axis, one count per axis")
        if np.any(self.box.hi <= self.box.lo):
            raise ValueError("state grid box must have positive width on every axis")
        if self.core is not None and not (np.all(self.core.lo >= self.box.lo - 1e-12)
                                          and np.all(self.core.hi <= self.box.hi + 1e-12)):
            raise ValueError("state grid box must contain the core box")
        object.__setattr__(self, "counts", counts)
        axes = tuple(np.linspace(lo, hi, c) for lo, hi, c in zip(self.box.lo, self.box.hi, counts))
        object.__setattr__(self, "_axes", axes)
        mesh = np.meshgrid(*axes, indexing="ij")
        object.__setattr__(self, "_nodes", np.stack([g.reshape(-1) for g in mesh], axis=1))

    @property
    def axes(self) -> tuple:
        return self._axes

    @property
    def nodes(self) -> np.ndarray:
        return self._nodes

    @property
    def dim(self) -> int:
        return self.box.dim

    @property
    def spacing(self) -> np.ndarray:
        return (self.box.hi - self.box.lo) / (np.array(self.counts) - 1)

    def interp(self, values: np.ndarray, pts: np.ndarray) -> np.ndarray:
        """Multilinear interpolation of node ``values`` at ``pts`` (clamped to the box)."""
        pts = np.atleast_2d(pts)
        if self.dim == 1:
            return np.interp(pts[:, 0], self._axes[0], values)
        vals = values.reshape(self.counts)
        s = (pts - self.box.lo) / self.spacing
        hi_idx = np.array(self.counts) - 1
        s = np.clip(s, 0, hi_idx)
        i0 = np.minimum(np.floor(s).astype(int), hi_idx - 1)
        fr = s - i0
        out = np.zeros(pts.shape[0])
        for corner in range(2 ** self.dim):
            bits = [(corner >> a) & 1 for a in range(self.dim)]
            w = np.ones(pts.shape[0])
            idx = []
            for a, b in enumerate(bits):
                w = w * (fr[:, a] if b else 1.0 - fr[:, a])
                idx.append(i0[:, a] + b)
            out += w * vals[tuple(idx)]
        return out


def default_state_grid(model: Model, core: Box, nodes: int | None = None, *, margin: float = 1.1,
                       reach: float = 0.0) -> StateGrid:
    """Lattice on ``core`` inflated by ``margin``, widened to at least ``reach`` beyond the core."""
    if model.dim >= 4:
        raise ValueError("grid-based DP is limited to state dimension <= 3")
    box = core.inflate(margin)
    short = np.maximum(reach - np.minimum(core.lo - box.lo, box.hi - core.hi), 0.0)
    if np.any(short > 0):
        box = box.pad(short)
    width = box.hi - box.lo
    box = box.pad(np.where(width > 0, 0.0, 0.5))
    n = nodes or DEFAULT_NODES[model.dim]
    return StateGrid(box, (n,) * model.dim, core)


@dataclass(frozen=True)
class ValueField:
    grid: TimeGrid
    sgrid: StateGrid
    values: np.ndarray
    argmax: np.ndarray | None = None

    def at_node(self, k: int, pts) -> np.ndarray:
        return self.sgrid.interp(self.values[k], np.atleast_2d(pts))

    def value(self, t: float, pts) -> np.ndarray:
        """Interpolate linearly in time between nodes and multilinearly in space."""
        s = min(max(t / self.grid.dt, 0.0), float(self.grid.steps))
        k = min(int(np.floor(s)), self.grid.steps - 1)
        fr = s - k
        a = self.at_node(k, pts)
        if fr == 0:
            return a
        return (1 - fr) * a + fr * self.at_node(k + 1, pts)

    def to_csv(self, path) -> None:
        n = self.sgrid.dim
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh, lineterminator="\n")
            writer.writerow(["t"] + [f"x_{i + 1}" for i in range(n)] + ["V"])
            for k, t in enumerate(self.grid.nodes):
                ts = _fmt(t)
                for x, v in zip(self.sgrid.nodes, self.values[k]):
                    writer.writerow([ts] + [_fmt(c) for c in x] + [_fmt(v)])

    def meta(self) -> dict:
        return {
            "grid": {"T": self.grid.T, "steps": self.grid.steps},
            "state_grid": {"box": self.sgrid.box.to_json_obj(), "counts": list(self.sgrid.counts),
                           "core": self.sgrid.core.to_json_obj() if self.sgrid.core else None},
        }

    def to_json(self, path) -> None:
        doc = self.meta()
        doc["values"] = self.values.tolist()
        Path(path).write_text(_dump_json(doc))

    @classmethod
    def from_csv(cls, csv_path, meta_path) -> ValueField:
        meta = json.loads(Path(meta_path).read_text())
        grid = TimeGrid(meta["grid"]["T"], meta["grid"]["steps"])
        sg = meta["state_grid"]
        core = Box(sg["core"]["lo"], sg["core"]["hi"]) if sg.get("core") else None
        sgrid = StateGrid(Box(sg["box"]["lo"], sg["box"]["hi"]), tuple(sg["counts"]), core)
        with open(csv_path) as fh:
            rows = list(csv.reader(fh))[1:]
        data = np.array(rows, dtype=float)
        M = sgrid.nodes.shape[0]
        if data.shape[0] != grid.n_nodes * M:
            raise ValueError(f"value file has {data.shape[0]} rows, expected {grid.n_nodes * M}")
        return cls(grid, sgrid, data[:, -1].reshape(grid.n_nodes, M))


def solve_value(model: Model, mu: MeasureFlow, sgrid: StateGrid) -> ValueField:
    """``V(t_k, x) = max_u [-dt g + V(t_{k+1}, x + dt f)]`` backward from ``V(T) = sigma(., mu[T])``."""
    grid = mu.grid
    X = sgrid.nodes
    h = grid.dt
    V = np.empty((grid.n_nodes, X.shape[0]))
    V[-1] = model.terminal(X, mu[-1])
    argmax = np.zeros((grid.steps, X.shape[0], model.n_controls), dtype=bool)
    check = sgrid.core.contains(X) if sgrid.core is not None else None
    vals = np.empty((model.n_controls, X.shape[0]))
    for k in range(grid.steps - 1, -1, -1):
        m, t = mu[k], grid.nodes[k]
        for j in range(model.n_controls):
            feet = X + h * model.velocity(t, X, m, j)
            if check is not None:
                bad = check & ~sgrid.box.contains(feet, 1e-12)
                if bad.any():
                    raise StateGridTooSmall(
                        f"state grid too small: characteristic from {X[bad][0].tolist()} at t={t:.6g} "
                        "leaves the lattice; enlarge the state box")
            vals[j] = -h * model.running_cost(t, X, m, j) + sgrid.interp(V[k + 1], feet)
        V[k] = vals.max(axis=0)
        argmax[k] = argmax_ties(vals, axis=0).T
    return ValueField(grid, sgrid, V, argmax)


def one_step_objective(model: Model, mu: MeasureFlow, vfield: ValueField, k: int, X: np.ndarray) -> np.ndarray:
    """DP objective of every control at states ``X`` and node ``k``; shape ``(B, |P|)``."""
    h = mu.grid.dt
    m, t = mu[k], mu.grid.nodes[k]
    out = np.empty((X.shape[0], model.n_controls))
    for j in range(model.n_controls):
        out[:, j] = -h * model.running_cost(t, X, m, j) + vfield.at_node(k + 1, X + h * model.velocity(t, X, m, j))
    return out


def best_response_many(model: Model, mu: MeasureFlow, vfield: ValueField, X0, *, first=None):
    """Greedy forward extraction for a batch of starting points.

    At every node the first control (in index order) maximizing the one-step
    objective is taken; the state then advances by RK4 under that control.
    ``first`` optionally forces the control used in the first cell.
    Returns ``(indices (B, steps), states, cost)``.
    """
    grid = mu.grid
    X = np.array(X0, dtype=float).reshape(-1, model.dim)
    if not np.all(vfield.sgrid.box.contains(X, 1e-12)):
        raise StateGridTooSmall("starting point outside the state grid box")
    B = X.shape[0]
    idx = np.empty((B, grid.steps), dtype=int)
    states = np.empty((B, grid.n_nodes, model.dim))
    cost = np.zeros((B, grid.n_nodes))
    states[:, 0] = X
    z = np.zeros(B)
    for k in range(grid.steps):
        if k == 0 and first is not None:
            choice = np.asarray(first, dtype=int)
        else:
            obj = one_step_objective(model, mu, vfield, k, X)
            choice = np.argmax(argmax_ties(obj, axis=1), axis=1)
        idx[:, k] = choice
        X, dz = rk4_step_pure(model, mu[k], grid.nodes[k], grid.dt, X, choice)
        z = z + dz
        states[:, k + 1] = X
        cost[:, k + 1] = z
    return idx, states, cost


def best_response(model: Model, mu: MeasureFlow, vfield: ValueField, x0) -> RelaxedControl:
    """Pure (Dirac per cell) best response from ``x0`` at time 0."""
    idx, _, _ = best_response_many(model, mu, vfield, np.reshape(x0, (1, -1)))
    return RelaxedControl.from_indices(mu.grid, model.n_controls, idx[0])


def dp_consistency(model: Model, mu: MeasureFlow, vfield: ValueField, X0) -> float:
    """Largest gap between the realized best-response payoff and ``V(0, x0)``."""
    X0 = np.atleast_2d(X0)
    _, states, cost = best_response_many(model, mu, vfield, X0)
    J = payoff_many(model, mu, states, cost)
    return float(np.max(np.abs(J - vfield.at_node(0, X0))))


def check_viability(model: Model, mu: MeasureFlow, vfield: ValueField, traj: Trajectory, tol: float,
                    start_node: int = 0) -> dict:
    """Graph viability of ``(x(t), z(t))`` with ``z(t) = V(t_s, x_s) + ∫ g``.

    Also checks that the discrete velocity pair lies in ``E^-`` via
    ``zdot >= H*(xdot) - tol``.
    """
    grid = mu.grid
    S = traj.states
    z = -traj.cost
    Vk = np.array([vfield.at_node(k, S[k:k + 1])[0] for k in range(grid.n_nodes)])
    anchor = Vk[start_node] - z[start_node]
    graph = np.abs(Vk[start_node:] - (anchor + z[start_node:]))
    h = grid.dt
    worst_e = -np.inf
    for k in range(start_node, grid.steps):
        xdot = (S[k + 1] - S[k]) / h
        zdot = (z[k + 1] - z[k]) / h
        F, G = _vertices(model, grid.nodes[k], S[k], mu[k])
        if model.dim == 1:
            hs = float(conjugate_1d(F[:, 0], G, xdot, hull_tol=tol)[0])
        else:
            hs = conjugate_from_vertices(F, G, xdot)
        worst_e = max(worst_e, hs - zdot)
    graph_defect = float(graph.max())
    return {
        "graph_defect": graph_defect,
        "e_minus_defect": float(worst_e) if np.isfinite(worst_e) else float("inf"),
        "tol": tol,
        "pass": bool(graph_defect <= tol and worst_e <= tol),
    }


def check_hadamard(model: Model, mu: MeasureFlow, vfield: ValueField, sample_points, deltas) -> dict:
    """Difference-quotient estimates of the infinitesimal minimax conditions.

    For each sample ``(t, x)`` and control ``u`` the quotient
    ``(V(t + d, x + d f_u) - V(t, x)) / d`` is formed for the two smallest
    ``deltas``; their max estimates the upper derivative and their min the
    lower one.  The upper condition ``max_u [d+V(1, f_u) - g_u] >= 0`` comes
    from ``E^-`` (vertices suffice), the lower condition
    ``max_u [d-V(1, f_u) - g_u] <= 0`` from the singleton ``E^+`` selections.
    """
    pts = np.atleast_2d(np.asarray(sample_points, dtype=float))
    ds = sorted(float(d) for d in deltas)[:2]
    if len(ds) == 1:
        ds = ds * 2
    upper = np.empty(pts.shape[0])
    lower = np.empty(pts.shape[0])
    for i, row in enumerate(pts):
        t, x = row[0], row[1:]
        m = mu[mu.grid.node_of(t)]
        F, G = _vertices(model, t, x, m)
        v0 = vfield.value(t, x[None, :])[0]
        q = np.array([(vfield.value(t + d, x[None, :] + d * F) - v0) / d for d in ds])
        upper[i] = np.max(q.max(axis=0) - G)
        lower[i] = np.max(q.min(axis=0) - G)
    return {
        "upper_worst": float(upper.min()),
        "lower_worst": float(lower.max()),
        "upper_defect": float(max(0.0, -upper.min())),
        "lower_defect": float(max(0.0, lower.max())),
        "upper": upper.tolist(),
        "lower": lower.tolist(),
        "deltas": ds,
        "points": int(pts.shape[0]),
    }


def interior_samples(vfield: ValueField, box: Box, count: int, t_margin: float, seed: int = 0) -> np.ndarray:
    """Deterministic random ``(t, x)`` samples with ``t <= T - t_margin`` and ``x`` in ``box``."""
    rng = np.random.default_rng(seed)
    T = vfield.grid.T
    t = rng.random(count) * max(T - t_margin, 0.0)
    x = box.sample(rng, count)
    return np.column_stack([t, x])
