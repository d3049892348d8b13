"""Relaxed-control trajectories against a frozen measure flow, and payoffs."""
from __future__ import annotations

import csv
from dataclasses import dataclass

import numpy as np

from .measures import MeasureFlow, ParticleMeasure, TimeGrid, _fmt, w1_distance
from .model import Box, Model


@dataclass(frozen=True)
class RelaxedControl:
    """Per-cell probability vectors over the model's control set (shape ``(steps, |P|)``)."""

    grid: TimeGrid
    cells: np.ndarray

    def __post_init__(self):
        c = np.asarray(self.cells, dtype=float)
        if c.ndim != 2 or c.shape[0] != self.grid.steps:
            raise ValueError(f"expected ({self.grid.steps}, |P|) cell weights, got {c.shape}")
        if np.any(c < 0) or np.any(np.abs(c.sum(axis=1) - 1.0) > 1e-12):
            raise ValueError("each cell must be a probability vector")
        c.flags.writeable = False
        object.__setattr__(self, "cells", c)

    @classmethod
    def constant(cls, grid: TimeGrid, n_controls: int, index: int) -> RelaxedControl:
        cells = np.zeros((grid.steps, n_controls))
        cells[:, index] = 1.0
        return cls(grid, cells)

    @classmethod
    def from_indices(cls, grid: TimeGrid, n_controls: int, idx) -> RelaxedControl:
        idx = np.asarray(idx, dtype=int)
        cells = np.zeros((grid.steps, n_controls))
        cells[np.arange(grid.steps), idx] = 1.0
        return cls(grid, cells)

    @property
    def n_controls(self) -> int:
        return self.cells.shape[1]

    def is_pure(self) -> bool:
        return bool(np.all(self.cells.max(axis=1) == 1.0))

    def indices(self) -> np.ndarray:
        """Control index per cell; only meaningful for pure controls."""
        return np.argmax(self.cells, axis=1)


@dataclass(frozen=True)
class Trajectory:
    grid: TimeGrid
    states: np.ndarray
    cost: np.ndarray

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh, lineterminator="\n")
            writer.writerow(["t"] + [f"x_{i + 1}" for i in range(self.states.shape[1])] + ["z"])
            for t, x, z in zip(self.grid.nodes, self.states, self.cost):
                writer.writerow([_fmt(t)] + [_fmt(v) for v in x] + [_fmt(z)])


class BoxViolation(RuntimeError):
    pass


def _field(model: Model, m: ParticleMeasure, t: float, X: np.ndarray, Wk: np.ndarray, active):
    vel = np.zeros_like(X)
    rate = np.zeros(X.shape[0])
    for j in active:
        w = Wk[:, j]
        vel += w[:, None] * model.velocity(t, X, m, j)
        rate -= w * model.running_cost(t, X, m, j)
    return vel, rate


def rk4_step(model: Model, m: ParticleMeasure, t: float, h: float, X: np.ndarray, Wk: np.ndarray):
    """One RK4 step of state and accumulated reward under cell weights ``Wk`` (shape ``(B, |P|)``)."""
    active = np.flatnonzero(Wk.any(axis=0))
    v1, r1 = _field(model, m, t, X, Wk, active)
    v2, r2 = _field(model, m, t + 0.5 * h, X + 0.5 * h * v1, Wk, active)
    v3, r3 = _field(model, m, t + 0.5 * h, X + 0.5 * h * v2, Wk, active)
    v4, r4 = _field(model, m, t + h, X + h * v3, Wk, active)
    Xn = X + (h / 6.0) * (v1 + 2 * v2 + 2 * v3 + v4)
    dz = (h / 6.0) * (r1 + 2 * r2 + 2 * r3 + r4)
    return Xn, dz


def _field_pure(model: Model, m: ParticleMeasure, t: float, X: np.ndarray, idx: np.ndarray):
    return model.velocity_rows(t, X, m, idx), -model.running_cost_rows(t, X, m, idx)


def rk4_step_pure(model: Model, m: ParticleMeasure, t: float, h: float, X: np.ndarray, idx: np.ndarray):
    """:func:`rk4_step` for one pure control index per row."""
    v1, r1 = _field_pure(model, m, t, X, idx)
    v2, r2 = _field_pure(model, m, t + 0.5 * h, X + 0.5 * h * v1, idx)
    v3, r3 = _field_pure(model, m, t + 0.5 * h, X + 0.5 * h * v2, idx)
    v4, r4 = _field_pure(model, m, t + h, X + h * v3, idx)
    Xn = X + (h / 6.0) * (v1 + 2 * v2 + 2 * v3 + v4)
    dz = (h / 6.0) * (r1 + 2 * r2 + 2 * r3 + r4)
    return Xn, dz


def integrate_many(model: Model, mu: MeasureFlow, start_node: int, X0, W, *,
                   box: Box | None = None, box_tol: float = 1e-9):
    """Batched :func:`integrate`.

    ``X0`` has shape ``(B, n)`` and ``W`` shape ``(B, steps, |P|)``.  Returns
    states ``(B, steps + 1, n)`` and accumulated rewards ``(B, steps + 1)``.
    The measure is held at the left node of each cell.
    """
    grid = mu.grid
    X = np.array(X0, dtype=float).reshape(-1, model.dim)
    W = np.asarray(W, dtype=float)
    B = X.shape[0]
    states = np.empty((B, grid.n_nodes, model.dim))
    cost = np.zeros((B, grid.n_nodes))
    states[:, : start_node + 1] = X[:, None, :]
    z = np.zeros(B)
    h = grid.dt
    for k in range(start_node, grid.steps):
        X, dz = rk4_step(model, mu[k], grid.nodes[k], h, X, W[:, k, :])
        z = z + dz
        states[:, k + 1] = X
        cost[:, k + 1] = z
        if box is not None and not np.all(box.contains(X, box_tol)):
            raise BoxViolation(f"invariant box violated at t={grid.nodes[k + 1]:.6g}")
    return states, cost


def integrate(model: Model, mu: MeasureFlow, start_node: int, x0, alpha: RelaxedControl, *,
              box: Box | None = None) -> Trajectory:
    """Trajectory of ``x' = sum_u alpha_k(u) f(t, x, mu[t_k], u)`` started at node ``start_node``.

    The ``cost`` field is the accumulated ``-∫ g`` (zero before ``start_node``).
    """
    if alpha.grid != mu.grid:
        raise ValueError("control and flow grids differ")
    states, cost = integrate_many(model, mu, start_node, np.reshape(x0, (1, -1)),
                                  alpha.cells[None], box=box)
    return Trajectory(mu.grid, states[0], cost[0])


def payoff_many(model: Model, mu: MeasureFlow, states: np.ndarray, cost: np.ndarray) -> np.ndarray:
    return model.terminal(states[:, -1, :], mu[-1]) + cost[:, -1]


def payoff(model: Model, mu: MeasureFlow, start_node: int, x0, alpha: RelaxedControl, *,
           box: Box | None = None) -> float:
    """``sigma(x(T), mu[T]) - ∫ g`` along the integrated trajectory."""
    tr = integrate(model, mu, start_node, x0, alpha, box=box)
    return float(model.terminal(tr.states[-1:], mu[-1])[0] + tr.cost[-1])


def control_distance(a: RelaxedControl, b: RelaxedControl, control_set) -> float:
    """``sum_k dt * W1(a_k, b_k)`` with the Euclidean ground cost on the control points."""
    if a.grid != b.grid:
        raise ValueError("grid mismatch")
    if a.n_controls != b.n_controls:
        raise ValueError("control sets differ")
    P = np.asarray(control_set, dtype=float)
    if P.ndim == 1:
        P = P[:, None]
    total = 0.0
    for ca, cb in zip(a.cells, b.cells):
        if np.array_equal(ca, cb):
            continue
        total += w1_distance(ParticleMeasure(P, ca, normalize=True), ParticleMeasure(P, cb, normalize=True))
    return total * a.grid.dt


def integrate_indices(model: Model, mu: MeasureFlow, X0, idx, *, box: Box | None = None):
    """Batched integration of pure controls given as per-cell indices ``(B, steps)``."""
    grid = mu.grid
    X = np.array(X0, dtype=float).reshape(-1, model.dim)
    idx = np.asarray(idx, dtype=int)
    B = X.shape[0]
    states = np.empty((B, grid.n_nodes, model.dim))
    cost = np.zeros((B, grid.n_nodes))
    states[:, 0] = X
    z = np.zeros(B)
    for k in range(grid.steps):
        X, dz = rk4_step_pure(model, mu[k], grid.nodes[k], grid.dt, X, idx[:, k])
        z = z + dz
        states[:, k + 1] = X
        cost[:, k + 1] = z
        if box is not None and not np.all(box.contains(X, 1e-9)):
            raise BoxViolation(f"invariant box violated at t={grid.nodes[k + 1]:.6g}")
    return states, cost
