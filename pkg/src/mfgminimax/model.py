"""Problem data for a first-order mean field game and the bounds derived from it.

Callables use a batched convention: ``f(t, x, m, u)`` takes ``x`` of shape
``(k, n)``, one control point ``u`` of shape ``(d,)`` and a
:class:`~mfgminimax.measures.ParticleMeasure` ``m``; it returns velocities of
shape ``(k, n)``.  ``g(t, x, m, u)`` and ``sigma(x, m)`` return shape ``(k,)``.
"""
from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field, fields, replace
from typing import Any, Callable

import numpy as np
from scipy.optimize import linprog

from .measures import ParticleMeasure, TimeGrid, uniform_quantiles, w1_distance

TIE_RTOL = 1e-12


@dataclass(frozen=True)
class LipschitzLedger:
    L_fx: float
    L_fm: float
    L_gx: float
    L_gm: float
    L_sx: float
    L_sm: float

    def __post_init__(self):
        for f_ in fields(self):
            v = getattr(self, f_.name)
            if v is None or not (v >= 0) or not math.isfinite(v):
                raise ValueError(f"Lipschitz constant {f_.name} must be finite and nonnegative, got {v}")

    def as_dict(self) -> dict[str, float]:
        return {f_.name: float(getattr(self, f_.name)) for f_ in fields(self)}


@dataclass(frozen=True)
class Box:
    """Axis-aligned box ``[lo, hi]``."""

    lo: np.ndarray
    hi: np.ndarray

    def __post_init__(self):
        lo = np.atleast_1d(np.asarray(self.lo, dtype=float))
        hi = np.atleast_1d(np.asarray(self.hi, dtype=float))
        if lo.shape != hi.shape or np.any(hi < lo):
            raise ValueError(f"invalid box lo={lo} hi={hi}")
        object.__setattr__(self, "lo", lo)
        object.__setattr__(self, "hi", hi)

    @property
    def dim(self) -> int:
        return self.lo.shape[0]

    @property
    def center(self) -> np.ndarray:
        return 0.5 * (self.lo + self.hi)

    @property
    def diam(self) -> float:
        return float(np.linalg.norm(self.hi - self.lo))

    def inflate(self, factor: float) -> Box:
        half = 0.5 * (self.hi - self.lo) * factor
        return Box(self.center - half, self.center + half)

    def pad(self, width) -> Box:
        return Box(self.lo - width, self.hi + width)

    def contains(self, x, tol: float = 0.0) -> np.ndarray:
        x = np.atleast_2d(x)
        return np.all((x >= self.lo - tol) & (x <= self.hi + tol), axis=1)

    def sample(self, rng: np.random.Generator, k: int) -> np.ndarray:
        return self.lo + rng.random((k, self.dim)) * (self.hi - self.lo)

    def corners(self) -> np.ndarray:
        grids = np.meshgrid(*[[a, b] for a, b in zip(self.lo, self.hi)], indexing="ij")
        return np.stack([g.reshape(-1) for g in grids], axis=1)

    def to_json_obj(self) -> dict:
        return {"lo": self.lo.tolist(), "hi": self.hi.tolist()}


@dataclass(frozen=True)
class HamiltonianEval:
    value: float
    argmax_controls: list[int]


@dataclass(frozen=True)
class Model:
    """Dynamics ``f``, running cost ``g``, terminal payoff ``sigma`` and the rest of the game data."""

    dim: int
    horizon: float
    control_set: np.ndarray
    f: Callable
    g: Callable
    sigma: Callable
    m0: ParticleMeasure
    lipschitz: LipschitzLedger | None = None
    name: str = "custom"
    params: dict = field(default_factory=dict)
    # f and g also accept a (B, d) array holding one control per state row
    rowwise: bool = False

    def __post_init__(self):
        P = np.asarray(self.control_set, dtype=float)
        if P.ndim == 1:
            P = P[:, None]
        if P.shape[0] == 0:
            raise ValueError("control_set must be nonempty")
        object.__setattr__(self, "control_set", P)
        if self.m0.dim != self.dim:
            raise ValueError(f"m0 has dimension {self.m0.dim}, model has {self.dim}")
        if not (self.horizon > 0):
            raise ValueError("horizon must be positive")

    @property
    def n_controls(self) -> int:
        return self.control_set.shape[0]

    def velocity(self, t: float, x: np.ndarray, m: ParticleMeasure, j: int) -> np.ndarray:
        return np.asarray(self.f(t, x, m, self.control_set[j]), dtype=float).reshape(x.shape)

    def running_cost(self, t: float, x: np.ndarray, m: ParticleMeasure, j: int) -> np.ndarray:
        return np.broadcast_to(np.asarray(self.g(t, x, m, self.control_set[j]), dtype=float),
                               (x.shape[0],))

    def velocity_rows(self, t: float, x: np.ndarray, m: ParticleMeasure, idx: np.ndarray) -> np.ndarray:
        """Velocity with control ``control_set[idx[b]]`` at row ``b``."""
        if self.rowwise:
            return np.asarray(self.f(t, x, m, self.control_set[idx]), dtype=float).reshape(x.shape)
        out = np.empty_like(x)
        for j in np.unique(idx):
            sel = idx == j
            out[sel] = self.velocity(t, x[sel], m, j)
        return out

    def running_cost_rows(self, t: float, x: np.ndarray, m: ParticleMeasure, idx: np.ndarray) -> np.ndarray:
        if self.rowwise:
            return np.broadcast_to(np.asarray(self.g(t, x, m, self.control_set[idx]), dtype=float),
                                   (x.shape[0],))
        out = np.empty(x.shape[0])
        for j in np.unique(idx):
            sel = idx == j
            out[sel] = self.running_cost(t, x[sel], m, j)
        return out

    def terminal(self, x: np.ndarray, m: ParticleMeasure) -> np.ndarray:
        return np.broadcast_to(np.asarray(self.sigma(x, m), dtype=float), (x.shape[0],))

    def time_grid(self, steps: int) -> TimeGrid:
        return TimeGrid(self.horizon, steps)


def _point(x, n):
    x = np.asarray(x, dtype=float).reshape(1, n)
    return x


def _vertices(model: Model, t, x, m):
    """Velocity/cost pairs ``(f(u), g(u))`` for every control at one state."""
    xs = _point(x, model.dim)
    F = np.array([model.velocity(t, xs, m, j)[0] for j in range(model.n_controls)])
    G = np.array([model.running_cost(t, xs, m, j)[0] for j in range(model.n_controls)])
    for j in range(model.n_controls):
        if not (np.all(np.isfinite(F[j])) and np.isfinite(G[j])):
            raise ValueError(f"non-finite f or g for control #{j} = {model.control_set[j].tolist()}")
    return F, G


def argmax_ties(values: np.ndarray, axis: int = -1) -> np.ndarray:
    """Boolean mask of entries within a relative ``TIE_RTOL`` of the max along ``axis``."""
    best = values.max(axis=axis, keepdims=True)
    return values >= best - TIE_RTOL * np.maximum(1.0, np.abs(best))


def hamiltonian(model: Model, t: float, x, m: ParticleMeasure, p) -> HamiltonianEval:
    """``H = max_u [<p, f(u)> - g(u)]`` over the finite control set."""
    F, G = _vertices(model, t, x, m)
    vals = F @ np.asarray(p, dtype=float).reshape(model.dim) - G
    ties = argmax_ties(vals)
    return HamiltonianEval(float(vals.max()), [int(j) for j in np.flatnonzero(ties)])


def conjugate_from_vertices(F: np.ndarray, G: np.ndarray, xi, *, hull_tol: float = 0.0) -> float:
    """``min {sum l_u G_u : sum l_u F_u = xi, l in simplex}``, ``inf`` outside the hull."""
    xi = np.asarray(xi, dtype=float).reshape(-1)
    if F.shape[1] == 1:
        return float(conjugate_1d(F[:, 0], G, xi[:1], hull_tol=hull_tol)[0])
    k = F.shape[0]
    A_eq = np.vstack([F.T, np.ones((1, k))])
    b_eq = np.concatenate([xi, [1.0]])
    res = linprog(G, A_eq=A_eq, b_eq=b_eq, bounds=(0, None), method="highs")
    if res.status == 2:
        return math.inf
    if res.status != 0:
        raise RuntimeError(f"conjugate LP failed: {res.message}")
    return float(res.fun)


def conjugate_1d(fv: np.ndarray, gv: np.ndarray, xi: np.ndarray, *, hull_tol: float = 0.0) -> np.ndarray:
    """Lower convex envelope of the points ``(fv, gv)`` evaluated at each ``xi``."""
    xi = np.asarray(xi, dtype=float).reshape(-1)
    lo, hi = fv.min(), fv.max()
    xc = np.clip(xi, lo, hi)
    out = np.full(xi.shape, math.inf)
    inside = (xi >= lo - hull_tol) & (xi <= hi + hull_tol)
    if not inside.any():
        return out
    fi, fj = fv[:, None, None], fv[None, :, None]
    gi, gj = gv[:, None, None], gv[None, :, None]
    x = xc[None, None, inside]
    ok = (fi <= x) & (x <= fj)
    span = fj - fi
    with np.errstate(divide="ignore", invalid="ignore"):
        lam = np.where(span > 0, (x - fi) / span, 0.0)
    val = np.where(ok, gi + lam * (gj - gi), math.inf)
    out[inside] = val.min(axis=(0, 1))
    return out


def conjugate(model: Model, t: float, x, m: ParticleMeasure, xi) -> float:
    """Convex conjugate ``H*(t, x, m, xi)`` of the finite-control Hamiltonian."""
    F, G = _vertices(model, t, x, m)
    return conjugate_from_vertices(F, G, xi)


# ---------------------------------------------------------------------------
# invariant box and speed bound
# ---------------------------------------------------------------------------


def _sample_measures(box: Box, m0: ParticleMeasure, rng: np.random.Generator, count: int = 4):
    out = [m0, ParticleMeasure.dirac(box.center)]
    for c in box.corners()[:4]:
        out.append(ParticleMeasure.dirac(c))
    for _ in range(count):
        out.append(ParticleMeasure(box.sample(rng, 16)))
    return out


def _speeds(model: Model, ts, pts, measures) -> np.ndarray:
    vel = []
    for t in ts:
        for m in measures:
            for j in range(model.n_controls):
                vel.append(model.velocity(t, pts, m, j))
    v = np.concatenate(vel, axis=0)
    if not np.all(np.isfinite(v)):
        raise ValueError("invariant box not found: non-finite velocities")
    return v


def bound_box_and_K(model: Model, grid: TimeGrid, *, safety: float = 1.1, samples: int = 64,
                    seed: int = 0, max_growth: float = 1e6) -> tuple[Box, float]:
    """Reachable box ``G`` of the dynamics from ``supp(m0)`` and the speed bound ``K``.

    The box is swept forward over the grid: each face moves outward by ``dt``
    times the largest outward velocity sampled in a slab next to that face.
    Both ``G`` and ``K`` are inflated by ``safety`` unless the dynamics are
    at rest (``K == 0``).
    """
    rng = np.random.default_rng(seed)
    lo, hi = model.m0.bbox()
    box = Box(lo, hi)
    scale0 = 1.0 + box.diam
    dt = grid.dt
    for k in range(grid.steps):
        ts = (grid.nodes[k], grid.nodes[k] + 0.5 * dt)
        measures = _sample_measures(box, model.m0, rng)
        pts = np.vstack([box.sample(rng, samples), box.corners(), box.center[None, :]])
        kglob = float(np.max(np.linalg.norm(_speeds(model, ts, pts, measures), axis=1)))
        if kglob == 0:
            continue
        lo, hi = box.lo.copy(), box.hi.copy()
        for i in range(model.dim):
            width = dt * kglob
            for side in (+1, -1):
                slab = box.sample(rng, samples)
                if side > 0:
                    slab[:, i] = np.maximum(box.lo[i], box.hi[i] - rng.random(samples) * width)
                    slab[0, i] = box.hi[i]
                else:
                    slab[:, i] = np.minimum(box.hi[i], box.lo[i] + rng.random(samples) * width)
                    slab[0, i] = box.lo[i]
                v = _speeds(model, ts, slab, measures)[:, i] * side
                push = dt * max(0.0, float(v.max()))
                if side > 0:
                    hi[i] += push
                else:
                    lo[i] -= push
        box = Box(lo, hi)
        if box.diam > max_growth * scale0:
            raise ValueError("invariant box not found: reachable set grows without bound")
    measures = _sample_measures(box, model.m0, rng, count=8)
    pts = np.vstack([box.sample(rng, 4 * samples), box.corners(), box.center[None, :]])
    K = float(np.max(np.linalg.norm(_speeds(model, grid.nodes, pts, measures), axis=1)))
    if K == 0:
        return box, 0.0
    return box.inflate(safety), K * safety


def estimate_ledger(model: Model, box: Box, *, pairs: int = 200, seed: int = 0,
                    inflate: float = 1.05) -> LipschitzLedger:
    """Sampled finite-difference Lipschitz constants on ``box``, inflated by 5%."""
    rng = np.random.default_rng(seed)
    T = model.horizon
    L = dict(L_fx=0.0, L_fm=0.0, L_gx=0.0, L_gm=0.0, L_sx=0.0, L_sm=0.0)
    xa, xb = box.sample(rng, pairs), box.sample(rng, pairs)
    dx = np.linalg.norm(xa - xb, axis=1)
    ok = dx > 1e-12
    ms = [model.m0] + [ParticleMeasure(box.sample(rng, 8)) for _ in range(6)]
    for t in np.linspace(0, T, 4):
        for m in ms:
            for j in range(model.n_controls):
                df = np.linalg.norm(model.velocity(t, xa, m, j) - model.velocity(t, xb, m, j), axis=1)
                dg = np.abs(model.running_cost(t, xa, m, j) - model.running_cost(t, xb, m, j))
                L["L_fx"] = max(L["L_fx"], float(np.max(df[ok] / dx[ok], initial=0)))
                L["L_gx"] = max(L["L_gx"], float(np.max(dg[ok] / dx[ok], initial=0)))
    for m in ms:
        ds = np.abs(model.terminal(xa, m) - model.terminal(xb, m))
        L["L_sx"] = max(L["L_sx"], float(np.max(ds[ok] / dx[ok], initial=0)))
    pts = box.sample(rng, 32)
    for a, b in zip(ms, ms[1:] + ms[:1]):
        W = w1_distance(a, b)
        if W < 1e-12:
            continue
        ds = np.abs(model.terminal(pts, a) - model.terminal(pts, b))
        L["L_sm"] = max(L["L_sm"], float(ds.max()) / W)
        for t in np.linspace(0, T, 3):
            for j in range(model.n_controls):
                df = np.linalg.norm(model.velocity(t, pts, a, j) - model.velocity(t, pts, b, j), axis=1)
                dg = np.abs(model.running_cost(t, pts, a, j) - model.running_cost(t, pts, b, j))
                L["L_fm"] = max(L["L_fm"], float(df.max()) / W)
                L["L_gm"] = max(L["L_gm"], float(dg.max()) / W)
    return LipschitzLedger(**{k: v * inflate for k, v in L.items()})


def check_ledger(model: Model, box: Box, *, slack: float = 1.01) -> list[str]:
    """Compare the declared ledger with sampled ratios; warn (not raise) on violations."""
    if model.lipschitz is None:
        return []
    est = estimate_ledger(model, box, inflate=1.0)
    problems = []
    for name, declared in model.lipschitz.as_dict().items():
        sampled = getattr(est, name)
        if sampled > declared * slack + 1e-12:
            problems.append(f"{name}: sampled {sampled:.6g} exceeds declared {declared:.6g}")
    for msg in problems:
        warnings.warn(msg, stacklevel=2)
    return problems


def constant_ledger(model: Model, grid: TimeGrid, box: Box | None = None,
                    ledger: LipschitzLedger | None = None) -> dict[str, float]:
    """Closed-form constants of the finite-player estimates.

    The hatted constants are the coefficients of the final displayed
    inequality: ``Chat1`` multiplies ``W(m0, delta^N)``, ``Chat2`` multiplies
    ``N max_i ∫|x - x_i| m_N^i(dx)`` and ``Chat3`` multiplies ``1/N``.
    """
    led = ledger or model.lipschitz
    if led is None:
        raise ValueError("model has no Lipschitz ledger; declare one or call estimate_ledger")
    if box is None:
        box, _ = bound_box_and_K(model, grid)
    T = grid.T
    d = box.diam
    C1 = math.exp(led.L_fx * T) * led.L_fm
    C2 = math.exp(led.L_fx * T)
    C3 = C2 * math.exp(C1 * T)
    C4 = d * math.exp(C1 * T)
    C5 = C1 * C3 * T
    C6 = led.L_gx * C2 * T
    C7 = T * T * C1 * C3 * (led.L_gx + led.L_gm)
    C8 = led.L_gm * C4 * T + C1 * C4 * T * T * led.L_gx
    out = dict(C1=C1, C2=C2, C3=C3, C4=C4, C5=C5, C6=C6, C7=C7, C8=C8)
    out["Chat1"] = 2.0 * (led.L_sx * C5 + led.L_sm * C3 + C7)
    out["Chat2"] = 2.0 * (led.L_sx * C2 + C6)
    out["Chat3"] = led.L_sx * C1 * C4 * T + led.L_sm * C4 + C8
    out["diam_G"] = d
    out["T"] = T
    out.update(led.as_dict())
    return out


# ---------------------------------------------------------------------------
# built-in templates
# ---------------------------------------------------------------------------


def make_m0(spec: dict | None) -> ParticleMeasure:
    """Initial measure from a small config dict."""
    spec = dict(spec or {"type": "uniform"})
    kind = spec.pop("type", "uniform")
    if kind == "uniform":
        return uniform_quantiles(float(spec.get("lo", -1.0)), float(spec.get("hi", 1.0)),
                                 int(spec.get("atoms", 200)))
    if kind == "dirac":
        return ParticleMeasure.dirac(np.atleast_1d(spec.get("at", 0.0)))
    if kind == "atoms":
        pts = np.asarray(spec["points"], dtype=float)
        return ParticleMeasure(pts, spec.get("weights"), normalize=True)
    raise ValueError(f"unknown m0 type {kind!r}")


def _controls_1d(u_max: float, n: int) -> np.ndarray:
    return np.linspace(-u_max, u_max, n)[:, None]


def _target_sigma(x_target: float):
    def sigma(x, m):
        return -np.sum((x - x_target) ** 2, axis=1)
    return sigma


def _f_control(t, x, m, u):
    return np.broadcast_to(u, x.shape)


def _half_sq(u) -> np.ndarray:
    u = np.atleast_2d(u)
    return 0.5 * np.sum(u * u, axis=1)


def _with_ledger(model: Model, grid_steps: int, ledger_fn: Callable[[Box], LipschitzLedger]) -> Model:
    box, _ = bound_box_and_K(model, model.time_grid(grid_steps))
    return replace(model, lipschitz=ledger_fn(box), rowwise=True)


def lq1d(c: float = 0.1, x_target: float = 0.5, u_max: float = 1.5, n_controls: int = 31,
         horizon: float = 1.0, m0: dict | None = None, steps: int = 64) -> Model:
    """``f = u``, ``g = u^2/2 + c (x - mean m)^2``, ``sigma = -(x - x_target)^2``."""

    def g(t, x, m, u):
        return _half_sq(u) + c * (x[:, 0] - m.mean[0]) ** 2

    model = Model(1, horizon, _controls_1d(u_max, n_controls), _f_control, g,
                  _target_sigma(x_target), make_m0(m0), name="lq1d",
                  params=dict(c=c, x_target=x_target, u_max=u_max, n_controls=n_controls))

    def ledger(box: Box) -> LipschitzLedger:
        d = box.diam
        reach = float(max(abs(box.lo[0] - x_target), abs(box.hi[0] - x_target)))
        return LipschitzLedger(0.0, 0.0, 2 * c * d, 2 * c * d, 2 * reach, 0.0)

    return _with_ledger(model, steps, ledger)


def congestion1d(c: float = 0.5, bandwidth: float = 0.25, x_target: float = 0.0, u_max: float = 1.5,
                 n_controls: int = 31, horizon: float = 1.0, m0: dict | None = None,
                 steps: int = 64) -> Model:
    """Crowd-averse players: ``g = u^2/2 + c * (Gaussian-kernel density of m at x)``."""
    norm = 1.0 / (bandwidth * math.sqrt(2 * math.pi))

    def density(x, m):
        z = (x[:, 0][:, None] - m.points[:, 0][None, :]) / bandwidth
        return norm * (np.exp(-0.5 * z * z) @ m.weights)

    def g(t, x, m, u):
        return _half_sq(u) + c * density(x, m)

    model = Model(1, horizon, _controls_1d(u_max, n_controls), _f_control, g,
                  _target_sigma(x_target), make_m0(m0 or {"type": "atoms", "points": [-0.5, 0.5]}),
                  name="congestion1d",
                  params=dict(c=c, bandwidth=bandwidth, x_target=x_target, u_max=u_max,
                              n_controls=n_controls))

    def ledger(box: Box) -> LipschitzLedger:
        # sup |K'| of the Gaussian kernel, attained at one bandwidth from the center
        lip = c * norm * math.exp(-0.5) / bandwidth
        reach = float(max(abs(box.lo[0] - x_target), abs(box.hi[0] - x_target)))
        return LipschitzLedger(0.0, 0.0, lip, lip, 2 * reach, 0.0)

    return _with_ledger(model, steps, ledger)


def uncoupled(x_target: float = 0.5, u_max: float = 1.5, n_controls: int = 31, horizon: float = 1.0,
              m0: dict | None = None, steps: int = 64) -> Model:
    """No dependence on the population: ``f = u``, ``g = u^2/2``."""

    def g(t, x, m, u):
        return np.broadcast_to(_half_sq(u), (x.shape[0],))

    model = Model(1, horizon, _controls_1d(u_max, n_controls), _f_control, g,
                  _target_sigma(x_target), make_m0(m0), name="uncoupled",
                  params=dict(x_target=x_target, u_max=u_max, n_controls=n_controls))

    def ledger(box: Box) -> LipschitzLedger:
        reach = float(max(abs(box.lo[0] - x_target), abs(box.hi[0] - x_target)))
        return LipschitzLedger(0.0, 0.0, 0.0, 0.0, 2 * reach, 0.0)

    return _with_ledger(model, steps, ledger)


def consensus1d(kappa: float = 0.5, x_target: float = 0.5, u_max: float = 1.0, n_controls: int = 21,
                horizon: float = 1.0, m0: dict | None = None, steps: int = 64) -> Model:
    """Dynamics pulled toward the population mean: ``f = u + kappa (mean m - x)``."""

    def f(t, x, m, u):
        return np.atleast_2d(u) + kappa * (m.mean[None, :] - x)

    def g(t, x, m, u):
        return np.broadcast_to(_half_sq(u), (x.shape[0],))

    model = Model(1, horizon, _controls_1d(u_max, n_controls), f, g, _target_sigma(x_target),
                  make_m0(m0), name="consensus1d",
                  params=dict(kappa=kappa, x_target=x_target, u_max=u_max, n_controls=n_controls))

    def ledger(box: Box) -> LipschitzLedger:
        reach = float(max(abs(box.lo[0] - x_target), abs(box.hi[0] - x_target)))
        return LipschitzLedger(kappa, kappa, 0.0, 0.0, 2 * reach, 0.0)

    return _with_ledger(model, steps, ledger)


TEMPLATES: dict[str, Callable[..., Model]] = {
    "lq1d": lq1d,
    "congestion1d": congestion1d,
    "uncoupled": uncoupled,
    "consensus1d": consensus1d,
}


def build_model(template: str, params: dict[str, Any] | None = None, *, m0: dict | None = None,
                horizon: float | None = None, steps: int = 64) -> Model:
    if template not in TEMPLATES:
        raise ValueError(f"unknown model template {template!r}; choose from {sorted(TEMPLATES)}")
    kw = dict(params or {})
    if horizon is not None:
        kw["horizon"] = horizon
    return TEMPLATES[template](m0=m0, steps=steps, **kw)
