"""Finitely supported probability measures, measure flows and Wasserstein-1.

Everything here works on particles: a measure is a list of atoms with
positive weights.  Continuous initial distributions are discretized by the
caller (see :func:`uniform_quantiles`).
"""
from __future__ import annotations

import csv
import heapq
import json
import math
import os
from dataclasses import dataclass
from functools import cached_property
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

WEIGHT_TOL = 1e-12
DEFAULT_SUPPORT_CAP = 2000


def _fmt(x: float) -> str:
    return f"{float(x):.17g}"


@dataclass(frozen=True)
class TimeGrid:
    """Uniform grid ``t_k = k * T / steps`` on ``[0, T]``."""

    T: float
    steps: int

    def __post_init__(self):
        if not (self.T > 0 and math.isfinite(self.T)):
            raise ValueError(f"horizon T must be positive, got {self.T}")
        if int(self.steps) != self.steps or self.steps < 1:
            raise ValueError(f"steps must be a positive integer, got {self.steps}")
        object.__setattr__(self, "steps", int(self.steps))
        object.__setattr__(self, "T", float(self.T))

    @property
    def dt(self) -> float:
        return self.T / self.steps

    @property
    def n_nodes(self) -> int:
        return self.steps + 1

    @cached_property
    def nodes(self) -> np.ndarray:
        return np.arange(self.steps + 1) * self.dt

    def node_of(self, t: float) -> int:
        """Index of the cell ``[t_k, t_{k+1})`` containing ``t`` (clamped)."""
        k = int(math.floor(t / self.dt + 1e-9))
        return min(max(k, 0), self.steps - 1)


class ParticleMeasure:
    """Probability measure with finitely many atoms.

    Zero-weight atoms are dropped on construction.  Atom order is preserved,
    so index-based bookkeeping (e.g. mapping atoms of ``m0`` to trajectories)
    stays valid.
    """

    def __init__(self, points, weights=None, *, normalize: bool = False):
        pts = np.asarray(points, dtype=float)
        if pts.ndim == 1:
            pts = pts[:, None]
        if pts.ndim != 2 or pts.shape[0] == 0:
            raise ValueError("a measure needs at least one atom given as an (k, n) array")
        if weights is None:
            w = np.full(pts.shape[0], 1.0 / pts.shape[0])
        else:
            w = np.asarray(weights, dtype=float).reshape(-1)
        if w.shape[0] != pts.shape[0]:
            raise ValueError(f"{pts.shape[0]} points but {w.shape[0]} weights")
        if not np.all(np.isfinite(pts)) or not np.all(np.isfinite(w)):
            raise ValueError("non-finite atom or weight")
        if np.any(w < 0):
            raise ValueError("negative weight")
        keep = w > 0
        pts, w = pts[keep], w[keep]
        if pts.shape[0] == 0:
            raise ValueError("all weights are zero")
        total = math.fsum(w)
        if normalize:
            w = w / total
        elif abs(total - 1.0) > WEIGHT_TOL:
            raise ValueError(f"weights sum to {total!r}, expected 1")
        pts.flags.writeable = False
        w.flags.writeable = False
        self.points = pts
        self.weights = w

    @classmethod
    def dirac(cls, x) -> ParticleMeasure:
        return cls(np.atleast_1d(np.asarray(x, dtype=float))[None, :], [1.0])

    @property
    def dim(self) -> int:
        return self.points.shape[1]

    def __len__(self) -> int:
        return self.points.shape[0]

    def __repr__(self) -> str:
        return f"ParticleMeasure(atoms={len(self)}, dim={self.dim})"

    @cached_property
    def mean(self) -> np.ndarray:
        return self.weights @ self.points

    def integrate(self, phi: Callable[[np.ndarray], np.ndarray]) -> float:
        """``∫ phi dm`` for a vectorized ``phi`` taking an (k, n) array."""
        return float(self.weights @ np.asarray(phi(self.points), dtype=float))

    def bbox(self) -> tuple[np.ndarray, np.ndarray]:
        return self.points.min(axis=0), self.points.max(axis=0)

    def merged(self, radius: float = 0.0) -> ParticleMeasure:
        """Merge coincident atoms (or atoms within ``radius``) by summing weights."""
        if radius <= 0:
            uniq, inv = np.unique(self.points, axis=0, return_inverse=True)
            if uniq.shape[0] == len(self):
                return self
            w = np.bincount(inv.reshape(-1), weights=self.weights, minlength=uniq.shape[0])
            return ParticleMeasure(uniq, w, normalize=True)
        from scipy.spatial import cKDTree

        tree = cKDTree(self.points)
        label = np.full(len(self), -1)
        reps = []
        for i in range(len(self)):
            if label[i] >= 0:
                continue
            nbrs = [j for j in tree.query_ball_point(self.points[i], radius) if label[j] < 0]
            label[nbrs] = len(reps)
            reps.append(i)
        w = np.bincount(label, weights=self.weights)
        centers = np.zeros((len(reps), self.dim))
        np.add.at(centers, label, self.weights[:, None] * self.points)
        centers /= w[:, None]
        return ParticleMeasure(centers, w, normalize=True)

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh, lineterminator="\n")
            writer.writerow([f"x_{i + 1}" for i in range(self.dim)] + ["weight"])
            for x, w in zip(self.points, self.weights):
                writer.writerow([_fmt(v) for v in x] + [_fmt(w)])

    @classmethod
    def from_csv(cls, path) -> ParticleMeasure:
        with open(path, newline="") as fh:
            rows = [r for r in csv.reader(fh) if r and not r[0].startswith("#")]
        if rows and rows[0][0].strip().startswith("x"):
            rows = rows[1:]
        data = np.array(rows, dtype=float)
        return cls(data[:, :-1], data[:, -1], normalize=True)

    def to_json_obj(self) -> list:
        return [[[float(v) for v in x], float(w)] for x, w in zip(self.points, self.weights)]

    @classmethod
    def from_json_obj(cls, obj) -> ParticleMeasure:
        pts = np.array([a[0] for a in obj], dtype=float)
        w = np.array([a[1] for a in obj], dtype=float)
        return cls(pts, w, normalize=True)


def uniform_quantiles(lo: float, hi: float, atoms: int) -> ParticleMeasure:
    """Midpoint quantile discretization of the uniform law on ``[lo, hi]``."""
    x = lo + (np.arange(atoms) + 0.5) * (hi - lo) / atoms
    return ParticleMeasure(x[:, None])


@dataclass(frozen=True)
class MeasureFlow:
    """Time-indexed family of particle measures on a :class:`TimeGrid`."""

    grid: TimeGrid
    snapshots: tuple

    def __post_init__(self):
        snaps = tuple(self.snapshots)
        if len(snaps) != self.grid.n_nodes:
            raise ValueError(f"flow has {len(snaps)} snapshots for {self.grid.n_nodes} grid nodes")
        if any(not isinstance(s, ParticleMeasure) for s in snaps):
            raise TypeError("snapshots must be ParticleMeasure instances")
        object.__setattr__(self, "snapshots", snaps)

    @classmethod
    def constant(cls, grid: TimeGrid, m: ParticleMeasure) -> MeasureFlow:
        return cls(grid, (m,) * grid.n_nodes)

    def __getitem__(self, k: int) -> ParticleMeasure:
        return self.snapshots[k]

    def __len__(self) -> int:
        return len(self.snapshots)

    @property
    def dim(self) -> int:
        return self.snapshots[0].dim

    def max_atoms(self) -> int:
        return max(len(s) for s in self.snapshots)

    def to_json(self, path) -> None:
        doc = {
            "grid": {"T": self.grid.T, "steps": self.grid.steps},
            "snapshots": [s.to_json_obj() for s in self.snapshots],
        }
        Path(path).write_text(_dump_json(doc))

    @classmethod
    def from_json(cls, path) -> MeasureFlow:
        doc = json.loads(Path(path).read_text())
        grid = TimeGrid(doc["grid"]["T"], doc["grid"]["steps"])
        return cls(grid, tuple(ParticleMeasure.from_json_obj(s) for s in doc["snapshots"]))

    def to_csv_dir(self, directory) -> None:
        """One CSV per snapshot plus ``index.csv`` listing ``k,t,file``."""
        d = Path(directory)
        d.mkdir(parents=True, exist_ok=True)
        with open(d / "index.csv", "w", newline="") as fh:
            writer = csv.writer(fh, lineterminator="\n")
            writer.writerow(["k", "t", "file"])
            for k, s in enumerate(self.snapshots):
                name = f"snapshot_{k:05d}.csv"
                s.to_csv(d / name)
                writer.writerow([k, _fmt(self.grid.nodes[k]), name])
        meta = {"T": self.grid.T, "steps": self.grid.steps}
        (d / "grid.json").write_text(_dump_json(meta))

    @classmethod
    def from_csv_dir(cls, directory) -> MeasureFlow:
        d = Path(directory)
        meta = json.loads((d / "grid.json").read_text())
        grid = TimeGrid(meta["T"], meta["steps"])
        with open(d / "index.csv") as fh:
            rows = list(csv.DictReader(fh))
        snaps = [ParticleMeasure.from_csv(d / r["file"]) for r in sorted(rows, key=lambda r: int(r["k"]))]
        return cls(grid, tuple(snaps))


def _dump_json(doc) -> str:
    return json.dumps(doc, indent=1, sort_keys=True, allow_nan=True)


# ---------------------------------------------------------------------------
# transport
# ---------------------------------------------------------------------------


def quantile_plan_1d(xa, wa, xb, wb):
    """Monotone (sorted-quantile) coupling of two 1D particle measures.

    Returns ``(i, j, mass)`` arrays indexing atoms of the two inputs.  Atoms
    at equal positions are consumed in index order (stable sort), and equal
    cumulative weights consume the left measure's atom first.
    """
    xa = np.asarray(xa, dtype=float).reshape(-1)
    xb = np.asarray(xb, dtype=float).reshape(-1)
    oa = np.argsort(xa, kind="stable")
    ob = np.argsort(xb, kind="stable")
    ca = np.cumsum(np.asarray(wa, dtype=float)[oa])
    cb = np.cumsum(np.asarray(wb, dtype=float)[ob])
    ca[-1] = cb[-1] = 1.0
    brk = np.union1d(ca, cb)
    lo = np.concatenate(([0.0], brk[:-1]))
    mass = brk - lo
    keep = mass > 0
    lo, mass = lo[keep], mass[keep]
    mid = lo + 0.5 * mass
    ia = np.minimum(np.searchsorted(ca, mid, side="right"), len(ca) - 1)
    ib = np.minimum(np.searchsorted(cb, mid, side="right"), len(cb) - 1)
    return oa[ia], ob[ib], mass


def _pairwise(xa: np.ndarray, xb: np.ndarray) -> np.ndarray:
    diff = xa[:, None, :] - xb[None, :, :]
    return np.sqrt(np.einsum("ijk,ijk->ij", diff, diff))


def _emd(wa, wb, cost):
    # POT probes every installed tensor backend on import unless told not to.
    for key in ("PYTORCH", "TENSORFLOW", "JAX", "CUPY"):
        os.environ.setdefault(f"POT_BACKEND_DISABLE_{key}", "1")
    import ot

    plan, log = ot.emd(np.ascontiguousarray(wa), np.ascontiguousarray(wb),
                       np.ascontiguousarray(cost), numItermax=50_000_000, log=True)
    if log.get("warning"):
        raise RuntimeError(f"network simplex did not terminate cleanly: {log['warning']}")
    return plan


def transport_plan(a: ParticleMeasure, b: ParticleMeasure, *, cap: int = DEFAULT_SUPPORT_CAP):
    """Optimal W1 plan as a dense ``(len(a), len(b))`` matrix."""
    _check_pair(a, b, cap)
    if a.dim == 1:
        i, j, mass = quantile_plan_1d(a.points[:, 0], a.weights, b.points[:, 0], b.weights)
        plan = np.zeros((len(a), len(b)))
        np.add.at(plan, (i, j), mass)
        return plan
    return _emd(a.weights, b.weights, _pairwise(a.points, b.points))


def _check_pair(a: ParticleMeasure, b: ParticleMeasure, cap: int) -> None:
    if a.dim != b.dim:
        raise ValueError(f"dimension mismatch: {a.dim} vs {b.dim}")
    if a.dim > 1 and len(a) * len(b) > cap * cap:
        raise ValueError(
            f"support sizes {len(a)}x{len(b)} exceed the exact-transport cap {cap}x{cap}; "
            "subsample or consolidate the measures first"
        )


def w1_distance(a: ParticleMeasure, b: ParticleMeasure, *, cap: int = DEFAULT_SUPPORT_CAP) -> float:
    """Exact Wasserstein-1 distance with Euclidean ground cost."""
    _check_pair(a, b, cap)
    if a.dim == 1:
        i, j, mass = quantile_plan_1d(a.points[:, 0], a.weights, b.points[:, 0], b.weights)
        return float(mass @ np.abs(a.points[i, 0] - b.points[j, 0]))
    cost = _pairwise(a.points, b.points)
    plan = _emd(a.weights, b.weights, cost)
    return float(np.sum(plan * cost))


def flow_distance(mu: MeasureFlow, nu: MeasureFlow) -> float:
    """``sup_t W(mu[t], nu[t])`` over the grid nodes."""
    if mu.grid != nu.grid:
        raise ValueError(f"grid mismatch: {mu.grid} vs {nu.grid}")
    return max(w1_distance(a, b) for a, b in zip(mu.snapshots, nu.snapshots))


def flow_lipschitz_defect(mu: MeasureFlow, K: float) -> float:
    """Largest excess of ``W(mu[t_{k+1}], mu[t_k])`` over ``K * dt``."""
    if K < 0:
        raise ValueError("K must be nonnegative")
    dt = mu.grid.dt
    worst = 0.0
    for a, b in zip(mu.snapshots[:-1], mu.snapshots[1:]):
        worst = max(worst, w1_distance(a, b) - K * dt)
    return worst


def push_forward(m: ParticleMeasure, fn: Callable[[np.ndarray], np.ndarray], *,
                 merge_radius: float = 0.0) -> ParticleMeasure:
    """Image measure of ``m`` under ``fn`` (applied to the (k, n) atom array)."""
    img = np.asarray(fn(m.points), dtype=float)
    if img.ndim == 1:
        img = img[:, None]
    out = ParticleMeasure(img, m.weights.copy(), normalize=True)
    return out.merged(merge_radius)


def mix(a: ParticleMeasure, b: ParticleMeasure, beta: float) -> ParticleMeasure:
    """``(1 - beta) a + beta b`` as a particle union with exact-duplicate merging."""
    if beta <= 0:
        return a
    if beta >= 1:
        return b
    pts = np.vstack([a.points, b.points])
    w = np.concatenate([(1.0 - beta) * a.weights, beta * b.weights])
    return ParticleMeasure(pts, w, normalize=True).merged()


def mix_flows(mu: MeasureFlow, nu: MeasureFlow, beta: float) -> MeasureFlow:
    if mu.grid != nu.grid:
        raise ValueError("grid mismatch")
    return MeasureFlow(mu.grid, tuple(mix(a, b, beta) for a, b in zip(mu.snapshots, nu.snapshots)))


def consolidate(m: ParticleMeasure, cap: int) -> tuple[ParticleMeasure, float]:
    """Reduce to at most ``cap`` atoms by merging the lightest atom into its nearest neighbour.

    Returns the new measure and an upper bound on the W1 perturbation.
    """
    if len(m) <= cap:
        return m, 0.0
    if m.dim == 1:
        return _consolidate_1d(m, cap)
    pts = m.points.copy()
    w = m.weights.copy()
    alive = np.ones(len(w), dtype=bool)
    moved = 0.0
    for _ in range(len(w) - cap):
        idx = np.flatnonzero(alive)
        i = idx[np.argmin(w[idx])]
        others = idx[idx != i]
        d = np.linalg.norm(pts[others] - pts[i], axis=1)
        j = others[np.argmin(d)]
        moved += w[i] * d.min()
        w[j] += w[i]
        alive[i] = False
    return ParticleMeasure(pts[alive], w[alive], normalize=True), moved


def _consolidate_1d(m: ParticleMeasure, cap: int) -> tuple[ParticleMeasure, float]:
    # sorted order makes the nearest neighbour one of the two adjacent live atoms
    order = np.argsort(m.points[:, 0], kind="stable")
    x = m.points[order, 0].copy()
    w = m.weights[order].copy()
    k = len(w)
    left = np.arange(-1, k - 1)
    right = np.arange(1, k + 1)
    right[-1] = -1
    alive = np.ones(k, dtype=bool)
    heap = [(w[i], i, w[i]) for i in range(k)]
    heapq.heapify(heap)
    moved = 0.0
    remaining = k
    while remaining > cap:
        wi, i, stamp = heapq.heappop(heap)
        if not alive[i] or stamp != w[i]:
            continue
        lo, hi = left[i], right[i]
        dl = x[i] - x[lo] if lo >= 0 else np.inf
        dr = x[hi] - x[i] if hi >= 0 else np.inf
        j = lo if dl <= dr else hi
        moved += w[i] * min(dl, dr)
        w[j] += w[i]
        heapq.heappush(heap, (w[j], j, w[j]))
        alive[i] = False
        if lo >= 0:
            right[lo] = hi
        if hi >= 0:
            left[hi] = lo
        remaining -= 1
    return ParticleMeasure(x[alive][:, None], w[alive], normalize=True), moved


def consolidate_flow(mu: MeasureFlow, cap: int) -> tuple[MeasureFlow, float]:
    snaps, worst = [], 0.0
    for s in mu.snapshots:
        c, d = consolidate(s, cap)
        snaps.append(c)
        worst = max(worst, d)
    return MeasureFlow(mu.grid, tuple(snaps)), worst


def empirical(sites) -> ParticleMeasure:
    """Uniform empirical measure ``(1/N) sum_i delta_{x_i}`` (duplicates kept)."""
    pts = np.asarray(sites, dtype=float)
    if pts.ndim == 1:
        pts = pts[:, None]
    return ParticleMeasure(pts, np.full(pts.shape[0], 1.0 / pts.shape[0]), normalize=True)


def empirical_plan(m0: ParticleMeasure, sites, *, cap: int = DEFAULT_SUPPORT_CAP):
    """Optimal plan between ``m0`` and the uniform empirical measure on ``sites``.

    Returns ``(plan, w)`` with ``plan`` of shape ``(len(m0), N)``; column ``i``
    carries mass ``1/N``.
    """
    target = empirical(sites)
    if len(target) == 0:
        raise ValueError("sites must be nonempty")
    plan = transport_plan(m0, target, cap=cap)
    cost = _pairwise(m0.points, target.points)
    colsum = plan.sum(axis=0)
    if not np.allclose(colsum, 1.0 / len(target), atol=1e-9):
        raise RuntimeError("transport plan violates the empirical marginal")
    return plan, float(np.sum(plan * cost))


def decompose_to_empirical(m0: ParticleMeasure, sites: Sequence) -> tuple[list[ParticleMeasure], float]:
    """Split ``m0`` into ``N`` pieces routed to ``sites`` by an optimal plan.

    ``parts[i]`` is the normalized piece (mass 1), so ``sum_i parts[i] / N``
    reconstructs ``m0`` and ``sum_i (1/N) ∫|x - x_i| parts[i](dx)`` equals the
    returned ``W(m0, delta_x^N)``.
    """
    plan, w = empirical_plan(m0, sites)
    n_sites = plan.shape[1]
    parts = []
    for i in range(n_sites):
        col = plan[:, i]
        nz = col > 0
        parts.append(ParticleMeasure(m0.points[nz], col[nz], normalize=True))
    return parts, w
