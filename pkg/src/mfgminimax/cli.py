"""Command-line entry point: ``solve``, ``check``, ``nash-gap`` and ``w1``.

Heavy modules are imported inside the commands so that ``--threads`` can cap
the BLAS pool before numpy loads.
"""
from __future__ import annotations

import argparse
import copy
import json
import logging
import math
import os
import sys
from dataclasses import dataclass
from pathlib import Path

import yaml

EXIT_OK, EXIT_ERROR, EXIT_NOT_CONVERGED = 0, 1, 2
ENV_PREFIX = "MFGMM_"

DEFAULTS = {
    "model": {"template": "lq1d", "params": {}, "horizon": None, "m0": None},
    "grids": {"steps": 64, "state_nodes": None},
    "solver": {"schedule": "fictitious", "beta": None, "tol_W": 1e-3, "max_iter": 50,
               "particle_cap": 5000, "split_ties": False},
    "checks": {"terminal_tol": 1e-9, "viability_factor": 5.0, "hadamard_tol": 0.1,
               "hadamard_samples": 50},
    "nplayer": {"N_list": [8, 32, 128], "seeds": [0, 1, 2], "site_rule": "quantile",
                "gain_factor": 5.0, "probes": 8, "inner_max_iter": 200},
    "output": "results",
    "seed": 0,
}

log = logging.getLogger("mfgminimax")


class ConfigError(ValueError):
    pass


def _line_map(text: str) -> dict[tuple, int]:
    """Dotted key path -> 1-based source line, for error messages."""
    out: dict[tuple, int] = {}

    def walk(node, path):
        if isinstance(node, yaml.MappingNode):
            for k, v in node.value:
                p = path + (k.value,)
                out[p] = k.start_mark.line + 1
                walk(v, p)

    root = yaml.compose(text)
    if root is not None:
        walk(root, ())
    return out


def _merge(base: dict, extra: dict, path=()) -> dict:
    out = copy.deepcopy(base)
    for k, v in extra.items():
        if k not in out:
            raise ConfigError(f"unknown config field {'.'.join(path + (k,))!r}")
        if isinstance(out[k], dict) and k != "params" and isinstance(v, dict):
            out[k] = _merge(out[k], v, path + (k,))
        else:
            out[k] = v
    return out


def apply_env(cfg: dict, environ=None) -> dict:
    """Override any key from ``MFGMM_SECTION__KEY=value`` (values parsed as YAML scalars)."""
    environ = os.environ if environ is None else environ
    cfg = copy.deepcopy(cfg)
    for name, raw in sorted(environ.items()):
        if not name.startswith(ENV_PREFIX):
            continue
        parts = name[len(ENV_PREFIX):].split("__")
        node = cfg
        for i, part in enumerate(parts):
            match = next((k for k in node if k.lower() == part.lower()), None)
            if match is None:
                raise ConfigError(f"environment override {name} names unknown field {part!r}")
            if i == len(parts) - 1:
                node[match] = yaml.safe_load(raw)
            else:
                if not isinstance(node[match], dict):
                    raise ConfigError(f"environment override {name}: {match!r} is not a section")
                node = node[match]
    return cfg


@dataclass
class RunConfig:
    raw: dict
    source: str = "<defaults>"

    @property
    def model(self) -> dict:
        return self.raw["model"]

    @property
    def grids(self) -> dict:
        return self.raw["grids"]

    @property
    def solver(self) -> dict:
        return self.raw["solver"]

    @property
    def checks(self) -> dict:
        return self.raw["checks"]

    @property
    def nplayer(self) -> dict:
        return self.raw["nplayer"]

    @property
    def output(self) -> str:
        return self.raw["output"]

    @property
    def seed(self) -> int:
        return int(self.raw["seed"])


def _validate(cfg: dict, lines: dict, source: str) -> None:
    def fail(path, msg):
        line = lines.get(tuple(path.split(".")))
        where = f"{source}:{line}" if line else source
        raise ConfigError(f"{where}: field {path!r} {msg}")

    def positive(path, value, integer=False, allow_zero=False):
        ok = isinstance(value, (int, float)) and not isinstance(value, bool) and math.isfinite(value)
        if ok and integer:
            ok = float(value).is_integer()
        if not ok or value < 0 or (value == 0 and not allow_zero):
            kind = "integer" if integer else "number"
            fail(path, f"must be a {'nonnegative' if allow_zero else 'positive'} {kind}, got {value!r}")

    from .model import TEMPLATES
    from .nplayer import SITE_RULES

    m = cfg["model"]
    if m["template"] not in TEMPLATES:
        fail("model.template", f"must be one of {sorted(TEMPLATES)}, got {m['template']!r}")
    if not isinstance(m["params"], dict):
        fail("model.params", "must be a mapping")
    if m["horizon"] is not None:
        positive("model.horizon", m["horizon"])
    if m["m0"] is not None and not isinstance(m["m0"], dict):
        fail("model.m0", "must be a mapping")
    positive("grids.steps", cfg["grids"]["steps"], integer=True)
    if cfg["grids"]["state_nodes"] is not None:
        positive("grids.state_nodes", cfg["grids"]["state_nodes"], integer=True)
        if cfg["grids"]["state_nodes"] < 2:
            fail("grids.state_nodes", "must be at least 2")
    s = cfg["solver"]
    if s["schedule"] not in ("fictitious", "picard", "constant"):
        fail("solver.schedule", f"must be fictitious, picard or constant, got {s['schedule']!r}")
    if s["schedule"] == "constant" or s["beta"] is not None:
        positive("solver.beta", s["beta"])
        if s["beta"] > 1:
            fail("solver.beta", "must not exceed 1")
    positive("solver.tol_W", s["tol_W"])
    positive("solver.max_iter", s["max_iter"], integer=True, allow_zero=True)
    positive("solver.particle_cap", s["particle_cap"], integer=True)
    if not isinstance(s["split_ties"], bool):
        fail("solver.split_ties", "must be true or false")
    c = cfg["checks"]
    for key in ("terminal_tol", "viability_factor", "hadamard_tol"):
        positive(f"checks.{key}", c[key])
    positive("checks.hadamard_samples", c["hadamard_samples"], integer=True)
    n = cfg["nplayer"]
    Ns = n["N_list"]
    if not isinstance(Ns, list) or not Ns:
        fail("nplayer.N_list", "must be a nonempty list")
    for N in Ns:
        positive("nplayer.N_list", N, integer=True)
    if Ns != sorted(Ns):
        fail("nplayer.N_list", "must be ascending")
    if not isinstance(n["seeds"], list) or not n["seeds"] or not all(
            isinstance(v, int) and not isinstance(v, bool) for v in n["seeds"]):
        fail("nplayer.seeds", "must be a nonempty list of integers")
    if n["site_rule"] not in SITE_RULES:
        fail("nplayer.site_rule", f"must be one of {list(SITE_RULES)}, got {n['site_rule']!r}")
    positive("nplayer.gain_factor", n["gain_factor"])
    positive("nplayer.probes", n["probes"], integer=True)
    positive("nplayer.inner_max_iter", n["inner_max_iter"], integer=True)
    if not isinstance(cfg["seed"], int) or isinstance(cfg["seed"], bool):
        fail("seed", f"must be an integer, got {cfg['seed']!r}")


def load_config(path: str | None, environ=None) -> RunConfig:
    text, source, doc = "", "<defaults>", {}
    if path is not None:
        source = str(path)
        try:
            text = Path(path).read_text()
        except OSError as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from exc
        try:
            doc = yaml.safe_load(text) or {}
        except yaml.YAMLError as exc:
            raise ConfigError(f"{source}: malformed YAML: {exc}") from exc
        if not isinstance(doc, dict):
            raise ConfigError(f"{source}: top level must be a mapping")
    cfg = apply_env(_merge(DEFAULTS, doc), environ)
    _validate(cfg, _line_map(text) if text else {}, source)
    return RunConfig(cfg, source)


def build_model_from(cfg: RunConfig):
    from .model import build_model

    m = cfg.model
    return build_model(m["template"], m["params"], m0=m["m0"], horizon=m["horizon"], steps=cfg.grids["steps"])


def _solve(cfg: RunConfig, out: Path) -> int:
    from .equilibrium import fixed_point_solve
    from .measures import _dump_json

    model = build_model_from(cfg)
    s = cfg.solver
    res = fixed_point_solve(model, steps=cfg.grids["steps"], schedule=s["schedule"], beta=s["beta"],
                            tol_W=s["tol_W"], max_iter=s["max_iter"], particle_cap=s["particle_cap"],
                            split_ties=s["split_ties"], state_nodes=cfg.grids["state_nodes"])
    res.save(out)
    (out / "config.json").write_text(_dump_json(cfg.raw))
    print(f"residual {res.residual:.6e} after {res.iterations} updates "
          f"({'converged' if res.converged else 'NOT converged'}); results in {out}")
    return EXIT_OK if res.converged else EXIT_NOT_CONVERGED


def run_checks(cfg: RunConfig, model, res) -> dict:
    """Defects of every condition family for a loaded result."""
    import numpy as np

    from .measures import flow_distance, flow_lipschitz_defect, w1_distance
    from .value import check_hadamard, check_viability, interior_samples

    c = cfg.checks
    diag = res.diagnostics
    scheme_tol = float(diag["scheme_tol"])
    vf, flow = res.vfield, res.flow
    X = vf.sgrid.nodes
    term = float(np.max(np.abs(vf.values[-1] - model.terminal(X, flow[-1]))))

    vtol = c["viability_factor"] * scheme_tol
    graph = emin = 0.0
    for _, _, _, traj in res.bundle.entries():
        rep = check_viability(model, flow, vf, traj, vtol)
        graph = max(graph, rep["graph_defect"])
        emin = max(emin, rep["e_minus_defect"])

    dt = flow.grid.dt
    deltas = [math.sqrt(dt), 0.5 * math.sqrt(dt)]
    lo, hi = model.m0.bbox()
    from .model import Box

    pts = interior_samples(vf, Box(lo, hi), int(c["hadamard_samples"]), max(deltas), seed=cfg.seed)
    had = check_hadamard(model, flow, vf, pts, deltas)
    K = float(diag["K"])
    inv = {
        "initial_w1": w1_distance(flow[0], model.m0),
        "flow_lipschitz_defect": flow_lipschitz_defect(flow, K),
        "bundle_flow_w1": flow_distance(res.bundle.flow(), flow),
        "bundle_reintegration": res.bundle.reintegration_defect(model, flow),
    }
    inv_pass = (inv["initial_w1"] <= 1e-12 and inv["flow_lipschitz_defect"] <= 1e-9
                and inv["bundle_flow_w1"] <= res.residual + 1e-12 and inv["bundle_reintegration"] <= 1e-9)
    report = {
        "terminal": {"defect": term, "tol": c["terminal_tol"], "pass": term <= c["terminal_tol"]},
        "viability": {"graph_defect": graph, "e_minus_defect": emin, "tol": vtol,
                      "pass": graph <= vtol and emin <= vtol},
        "upper_hadamard": {"defect": had["upper_defect"], "worst": had["upper_worst"],
                           "tol": c["hadamard_tol"], "pass": had["upper_defect"] <= c["hadamard_tol"]},
        "lower_hadamard": {"defect": had["lower_defect"], "worst": had["lower_worst"],
                           "tol": c["hadamard_tol"], "pass": had["lower_defect"] <= c["hadamard_tol"]},
        "invariants": dict(inv, **{"pass": bool(inv_pass)}),
        "hadamard_deltas": deltas,
        "hadamard_samples": int(pts.shape[0]),
        "scheme_tol": scheme_tol,
        "note": "finite control sets make the lower condition's selections exact; "
                "for a discretized continuous control set it is approximate",
    }
    for fam in ("terminal", "viability", "upper_hadamard", "lower_hadamard"):
        report[fam]["pass"] = bool(report[fam]["pass"])
    report["pass"] = all(report[f]["pass"] for f in
                         ("terminal", "viability", "upper_hadamard", "lower_hadamard", "invariants"))
    return report


def _check(cfg: RunConfig, result_dir: Path, out: Path) -> int:
    from .equilibrium import load_result
    from .measures import _dump_json

    model = build_model_from(cfg)
    res = load_result(result_dir, model)
    report = run_checks(cfg, model, res)
    out.mkdir(parents=True, exist_ok=True)
    (out / "check_report.json").write_text(_dump_json(report))
    for fam in ("terminal", "viability", "upper_hadamard", "lower_hadamard", "invariants"):
        print(f"{fam:15s} {'pass' if report[fam]['pass'] else 'FAIL'}")
    return EXIT_OK if report["pass"] else EXIT_NOT_CONVERGED


def _nash_gap(cfg: RunConfig, result_dir: Path, out: Path) -> int:
    from datetime import datetime, timezone

    from .equilibrium import load_result
    from .nplayer import nash_gap_curve, write_gap_csv, write_manifest

    model = build_model_from(cfg)
    res = load_result(result_dir, model)
    n = cfg.nplayer
    rows, manifest = nash_gap_curve(model, res, n["N_list"], n["seeds"], site_rule=n["site_rule"],
                                    max_iter=n["inner_max_iter"], probes=n["probes"])
    slack = n["gain_factor"] * manifest["scheme_tol"]
    ok = all(r["gain"] <= r["bound"] + slack for r in rows if r["converged"])
    manifest.update({"gain_slack": slack, "pass": ok, "created": datetime.now(timezone.utc).isoformat()})
    out.mkdir(parents=True, exist_ok=True)
    write_gap_csv(rows, out / "nash_gap.csv")
    write_manifest(manifest, out / "nash_gap_manifest.json")
    for r in rows:
        print(f"N={r['N']:4d} seed={r['seed']} gain={r['gain']:.3e} bound={r['bound']:.3e}"
              f"{'' if r['converged'] else ' (not converged)'}")
    return EXIT_OK if ok else EXIT_NOT_CONVERGED


def _load_measure(path: str):
    from .measures import ParticleMeasure

    p = Path(path)
    if p.suffix == ".json":
        return ParticleMeasure.from_json_obj(json.loads(p.read_text()))
    return ParticleMeasure.from_csv(p)


def _w1(a: str, b: str) -> int:
    from .measures import _fmt, w1_distance

    print(_fmt(w1_distance(_load_measure(a), _load_measure(b))))
    return EXIT_OK


def _set_threads(n: int | None) -> None:
    if n is None:
        return
    if n < 1:
        raise ConfigError("--threads must be at least 1")
    for var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS"):
        os.environ[var] = str(n)


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="mfgminimax", description=__doc__.splitlines()[0])
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("config", help="YAML run configuration")
        p.add_argument("--out", help="output directory (default: config 'output')")
        p.add_argument("--seed", type=int, help="override the config seed")
        p.add_argument("--threads", type=int, help="cap the numeric thread pool")

    common(sub.add_parser("solve", help="compute the equilibrium and write the result directory"))
    p = sub.add_parser("check", help="verify the minimax conditions on a result directory")
    common(p)
    p.add_argument("result_dir", nargs="?", help="result directory (default: config 'output')")
    p = sub.add_parser("nash-gap", help="measure N-player deviation gains against the bound")
    common(p)
    p.add_argument("result_dir", nargs="?", help="result directory (default: config 'output')")
    p = sub.add_parser("w1", help="Wasserstein-1 distance between two measure files (CSV or JSON)")
    p.add_argument("a")
    p.add_argument("b")
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        if args.command == "w1":
            return _w1(args.a, args.b)
        _set_threads(args.threads)
        cfg = load_config(args.config)
        if args.seed is not None:
            cfg.raw["seed"] = args.seed
        if args.command == "solve":
            return _solve(cfg, Path(args.out or cfg.output))
        result_dir = Path(args.result_dir or cfg.output)
        if not result_dir.is_dir():
            raise ConfigError(f"result directory {result_dir} does not exist")
        out = Path(args.out) if args.out else result_dir
        if args.command == "check":
            return _check(cfg, result_dir, out)
        return _nash_gap(cfg, result_dir, out)
    except (ValueError, RuntimeError, OSError, KeyError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_ERROR


if __name__ == "__main__":
    sys.exit(main())
