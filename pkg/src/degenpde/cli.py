"""Command-line runner: JSON config in, CSV fields and a JSON report out.

Exit codes: 0 success, 2 unreadable or malformed config, 3 invalid config
or data, 4 solver failure, 5 oracle mismatch or broken invariant.
"""
from __future__ import annotations

import argparse
import copy
import json
import sys
import time
from dataclasses import dataclass
from pathlib import Path
from typing import Any

import numpy as np

from . import geometry
from .bvp import (BvpProblem, ManufacturedSolution, MissingConstantError, SolverError, apriori_bound,
                  manufactured_problem, solve_bvp)
from .discretization import AssemblyError, DomainSpec, Grid, Tag, assemble_system, build_grid, write_field_csv
from .obstacle import (CompatibilityError, ObstacleProblem, complementarity_residual, continuation_region,
                       payoff, solve_lcp_policy, solve_lcp_psor, solve_penalized)
from .operator_core import (Bounds, HestonParams, InvalidParameterError, constant_coefficients,
                            heston_coefficients)
from .perron import make_patches, perron_sweep_bvp, perron_sweep_obstacle
from .verification import OracleReport, brute_force_lcp, compare, inject_sign_fault, oblique_residual

EXIT_OK, EXIT_PARSE, EXIT_VALIDATION, EXIT_SOLVER, EXIT_ORACLE = 0, 2, 3, 4, 5

CASES = ("bvp", "obstacle", "perron-bvp", "perron-obstacle", "transform-check", "verify")
REQUIRED = object()

SCHEMA: dict[str, Any] = {
    "case": REQUIRED,
    "operator": {"heston": None, "constant": None},
    "domain": {"kind": "TruncatedSlab", "bounds": None, "dirichlet_faces": None},
    "grid": {"n": None, "stretch": None},
    "data": {"f": 0.0, "g": 0.0, "psi": None},
    "solver": {"method": None, "omega": 1.5, "tol": 1e-10, "max_iter": 500_000,
               "eps_schedule": [1e-2, 1e-3, 1e-4, 1e-5, 1e-6], "order": "lexicographic"},
    "perron": {"radius": 8, "overlap": 2, "tol": 1e-9, "max_sweeps": 1000, "mode": "two-tier",
               "order": "lexicographic", "init": "auto"},
    "transform": {"dim": 2, "samples": [9, 5], "w1_max": 3.0, "model_b": [0.3, 0.6], "model_c": 0.05},
    "verify": {"levels": [[17, 17], [33, 33], [65, 65]], "inject_fault": None, "lcp_cases": 5,
               "mms_tol": 0.05, "lcp_tol": 1e-10, "roundtrip_tol": 1e-10, "roundtrip_points": 1000},
    "output": {"dir": None},
}
HESTON_KEYS = {"sigma", "rho", "kappa", "theta", "r", "q"}
CONSTANT_KEYS = {"a", "b", "c", "bounds", "degenerate"}
FAULTS = ("assembly_sign",)


class ConfigParseError(Exception):
    pass


class ConfigValidationError(Exception):
    def __init__(self, problems: list[str]):
        super().__init__("; ".join(problems))
        self.problems = problems


class OracleMismatch(Exception):
    def __init__(self, msg: str, reports=()):
        super().__init__(msg)
        self.reports = list(reports)


@dataclass
class RunConfig:
    raw: dict
    resolved: dict
    source: Path | None = None

    @property
    def case(self) -> str:
        return self.resolved["case"]

    def section(self, name: str) -> dict:
        return self.resolved[name]


# ------------------------------------------------------------------ config


def _merge(schema: dict, given: dict, path: str, problems: list[str]) -> dict:
    out = {}
    for key in given:
        if key not in schema:
            problems.append(f"unknown key {path}{key}")
    for key, default in schema.items():
        if key in given:
            val = given[key]
            if isinstance(default, dict) and key != "operator":
                if not isinstance(val, dict):
                    problems.append(f"{path}{key} must be an object")
                    out[key] = copy.deepcopy(default)
                else:
                    out[key] = _merge(default, val, f"{path}{key}.", problems)
            else:
                out[key] = copy.deepcopy(val)
        elif default is REQUIRED:
            problems.append(f"missing required key {path}{key}")
        elif key == "operator":
            out[key] = None
        else:
            out[key] = copy.deepcopy(default)
    return out


def _validate_data_spec(name: str, spec, problems: list[str], base: Path | None) -> None:
    if spec is None or isinstance(spec, (int, float)) and not isinstance(spec, bool):
        return
    if isinstance(spec, dict) and len(spec) == 1:
        (kind, val), = spec.items()
        if kind == "payoff":
            if not isinstance(val, dict) or set(val) - {"kind", "K"} or val.get("kind") not in ("put", "call"):
                problems.append(f"data.{name}.payoff needs kind put|call and K")
            elif not isinstance(val.get("K"), (int, float)) or not val["K"] > 0:
                problems.append(f"data.{name}.payoff.K must be a positive number")
            return
        if kind == "expr":
            if not isinstance(val, str):
                problems.append(f"data.{name}.expr must be a string")
            return
        if kind == "csv":
            p = Path(val)
            if base is not None and not p.is_absolute():
                p = base / p
            if not p.exists():
                problems.append(f"data.{name}.csv file {val} does not exist")
            return
    problems.append(f"data.{name} must be a number or one of {{payoff, expr, csv}}")


def validate(raw: dict, base: Path | None = None) -> RunConfig:
    problems: list[str] = []
    if not isinstance(raw, dict):
        raise ConfigValidationError(["top level must be an object"])
    cfg = _merge(SCHEMA, raw, "", problems)
    case = cfg.get("case")
    if case not in CASES:
        problems.append(f"case must be one of {', '.join(CASES)} (got {case!r})")

    op = raw.get("operator")
    if case not in ("transform-check",) or op is not None:
        if not isinstance(op, dict) or len(op) != 1 or next(iter(op)) not in ("heston", "constant"):
            problems.append("operator must be an object with exactly one of heston, constant")
        else:
            (kind, params), = op.items()
            if not isinstance(params, dict):
                problems.append(f"operator.{kind} must be an object")
            else:
                allowed = HESTON_KEYS if kind == "heston" else CONSTANT_KEYS
                for key in params:
                    if key not in allowed:
                        problems.append(f"unknown key operator.{kind}.{key}")
                if kind == "heston":
                    missing = {"sigma", "rho", "kappa", "theta"} - set(params)
                    problems.extend(f"missing required key operator.heston.{k}" for k in sorted(missing))
                    if not missing:
                        try:
                            HestonParams(**{"r": 0.0, "q": 0.0, **params}).validate()
                        except (InvalidParameterError, TypeError) as exc:
                            problems.append(f"operator.heston: {exc}")
                else:
                    for key in ("a", "b", "c"):
                        if key not in params:
                            problems.append(f"missing required key operator.constant.{key}")
                    if "bounds" in params:
                        bad = set(params["bounds"]) - set(Bounds().__dict__)
                        problems.extend(f"unknown key operator.constant.bounds.{k}" for k in sorted(bad))

    needs_grid = case in ("bvp", "obstacle", "perron-bvp", "perron-obstacle")
    if needs_grid or case == "verify":
        dom = cfg["domain"]
        if dom["bounds"] is None:
            problems.append("missing required key domain.bounds")
        else:
            try:
                DomainSpec(dom["kind"], dom["bounds"],
                           None if dom["dirichlet_faces"] is None else frozenset(dom["dirichlet_faces"]))
            except (ValueError, TypeError) as exc:
                problems.append(f"domain: {exc}")
    if needs_grid:
        n = cfg["grid"]["n"]
        if n is None:
            problems.append("missing required key grid.n")
        elif not (isinstance(n, int) or (isinstance(n, list) and all(isinstance(k, int) for k in n))):
            problems.append("grid.n must be an integer or a list of integers")
        elif min(n if isinstance(n, list) else [n]) < 3:
            problems.append("grid.n must be at least 3 per axis")

    sol = cfg["solver"]
    if not 0.0 < float(sol["omega"]) < 2.0:
        problems.append("solver.omega must lie in (0, 2)")
    if not float(sol["tol"]) > 0:
        problems.append("solver.tol must be positive")
    if sol["method"] is None:
        sol["method"] = "psor" if case in ("obstacle", "perron-obstacle") else "direct"
    allowed_methods = {"bvp": ("direct", "sor"), "perron-bvp": ("direct", "sor"),
                       "obstacle": ("psor", "penalized", "policy"), "perron-obstacle": ("psor", "penalized", "policy")}
    if case in allowed_methods and sol["method"] not in allowed_methods[case]:
        problems.append(f"solver.method {sol['method']!r} not available for case {case}")
    if sol["order"] not in ("lexicographic", "red-black"):
        problems.append("solver.order must be lexicographic or red-black")

    per = cfg["perron"]
    if per["mode"] not in ("two-tier", "obstacle"):
        problems.append("perron.mode must be two-tier or obstacle")
    if per["order"] not in ("lexicographic", "colored"):
        problems.append("perron.order must be lexicographic or colored")
    if per["init"] not in ("auto",) and not isinstance(per["init"], dict):
        problems.append("perron.init must be 'auto' or a data spec")

    data = cfg["data"]
    for name in ("f", "g", "psi"):
        _validate_data_spec(name, data[name], problems, base)
    if case in ("obstacle", "perron-obstacle") and data["psi"] is None:
        problems.append("obstacle cases need data.psi")
    if cfg["verify"]["inject_fault"] not in (None,) + FAULTS:
        problems.append(f"verify.inject_fault must be one of {FAULTS}")

    if problems:
        raise ConfigValidationError(problems)
    run = RunConfig(raw, cfg, base)
    if case in ("obstacle", "perron-obstacle"):
        _check_compatibility(run)
    return run


def _check_compatibility(cfg: RunConfig) -> None:
    """Reject obstacles that exceed the Dirichlet data (psi <= g on the Dirichlet boundary)."""
    grid = build_grid(build_domain(cfg), cfg.section("grid")["n"], cfg.section("grid")["stretch"])
    psi = evaluate_data(cfg.section("data")["psi"], grid, cfg.source)
    g = evaluate_data(cfg.section("data")["g"], grid, cfg.source)
    dirichlet = grid.mask(Tag.DIRICHLET, Tag.CORNER)
    bad = np.flatnonzero(dirichlet & (psi > g + 1e-12))
    if bad.size:
        pts = grid.points
        raise ConfigValidationError([
            f"obstacle/boundary compatibility (psi <= g on the Dirichlet boundary) violated at "
            f"{bad.size} node(s), first at x={pts[bad[0]].tolist()}: psi={psi[bad[0]]!r} > g={g[bad[0]]!r}"])


def parse_config(path) -> RunConfig:
    """Read and validate a JSON run configuration."""
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise ConfigParseError(f"cannot read {path}: {exc}") from exc
    try:
        raw = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigParseError(f"{path}:{exc.lineno}:{exc.colno}: {exc.msg}") from exc
    return validate(raw, path.parent)


# ------------------------------------------------------------ construction


def build_operator(cfg: RunConfig):
    (kind, params), = cfg.resolved["operator"].items()
    if kind == "heston":
        return heston_coefficients(HestonParams(**{"r": 0.0, "q": 0.0, **params}))
    bounds = Bounds(**params.get("bounds", {}))
    return constant_coefficients(params["a"], params["b"], params["c"], bounds,
                                 degenerate=params.get("degenerate", True))


def build_domain(cfg: RunConfig) -> DomainSpec:
    dom = cfg.section("domain")
    faces = None if dom["dirichlet_faces"] is None else frozenset(dom["dirichlet_faces"])
    return DomainSpec(dom["kind"], dom["bounds"], faces)


_EXPR_NAMES = {name: getattr(np, name) for name in
               ("exp", "log", "sin", "cos", "tan", "sqrt", "abs", "maximum", "minimum", "where", "tanh",
                "arctan", "pi", "e")}


def evaluate_data(spec, grid: Grid, base: Path | None = None) -> np.ndarray | None:
    """Turn a data spec (number, payoff, expr, csv) into a grid field."""
    if spec is None:
        return None
    if isinstance(spec, (int, float)):
        return np.full(grid.size, float(spec))
    (kind, val), = spec.items()
    pts = grid.points
    if kind == "payoff":
        return payoff(val["kind"], float(val["K"]), pts[:, 0])
    if kind == "expr":
        names = dict(_EXPR_NAMES)
        names.update({f"x{k + 1}": pts[:, k] for k in range(grid.dim)})
        try:
            out = eval(compile(val, "<expr>", "eval"), {"__builtins__": {}}, names)  # noqa: S307
        except Exception as exc:  # noqa: BLE001
            raise ConfigValidationError([f"cannot evaluate expression {val!r}: {exc}"]) from exc
        return np.broadcast_to(np.asarray(out, dtype=float), (grid.size,)).copy()
    if kind == "csv":
        from .discretization import read_field_csv
        p = Path(val)
        if base is not None and not p.is_absolute():
            p = base / p
        values = read_field_csv(p)["value"]
        if values.shape[0] != grid.size:
            raise ConfigValidationError([f"csv field {val} has {values.shape[0]} rows, grid has {grid.size}"])
        return values
    raise ConfigValidationError([f"unknown data spec {kind}"])


# --------------------------------------------------------------- outputs


def _jsonable(obj):
    if isinstance(obj, dict):
        return {str(k): _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return [_jsonable(v) for v in obj.tolist()]
    if isinstance(obj, (np.floating, float)):
        v = float(obj)
        return v if np.isfinite(v) else repr(v)
    if isinstance(obj, (np.integer,)):
        return int(obj)
    if isinstance(obj, (np.bool_,)):
        return bool(obj)
    if hasattr(obj, "to_dict"):
        return _jsonable(obj.to_dict())
    return obj


def write_outputs(fields: dict, reports: dict, out_dir) -> list[Path]:
    """Write each (grid, values) field as CSV and the reports as report.json."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    written = []
    for name, (grid, values) in sorted(fields.items()):
        p = out / f"{name}.csv"
        write_field_csv(p, grid, values)
        written.append(p)
    p = out / "report.json"
    p.write_text(json.dumps(_jsonable(reports), sort_keys=True, indent=2) + "\n")
    written.append(p)
    return written


# ------------------------------------------------------------------ cases


def _grid_and_system(cfg: RunConfig):
    cs = build_operator(cfg)
    dom = build_domain(cfg)
    grid = build_grid(dom, cfg.section("grid")["n"], cfg.section("grid")["stretch"])
    return cs, dom, grid, assemble_system(cs, grid)


def _bound_for(cs, dom, f, g, psi=None, obstacle=False):
    try:
        if obstacle:
            return apriori_bound(cs, float(np.max(f)), float(np.max(g)),
                                 None if psi is None else float(np.max(psi)), "obstacle_c0")
        try:
            return apriori_bound(cs, float(np.abs(f).max()), float(np.abs(g).max()), variant="solution_c0")
        except MissingConstantError:
            return apriori_bound(cs, float(np.abs(f).max()), float(np.abs(g).max()), variant="finite_height",
                                 nu=dom.height)
    except MissingConstantError:
        return None


def _case_bvp(cfg, acceptance, report, fields, perron=False):
    cs, dom, grid, sys_ = _grid_and_system(cfg)
    data, sol = cfg.section("data"), cfg.section("solver")
    f = evaluate_data(data["f"], grid, cfg.source)
    g = evaluate_data(data["g"], grid, cfg.source)
    prob = BvpProblem(sys_, f, g)
    report["monotonicity"] = sys_.monotonicity
    t0 = time.perf_counter()
    u, info = solve_bvp(prob, sol["method"], omega=sol["omega"], tol=sol["tol"], max_iter=sol["max_iter"],
                        return_info=True)
    report["timings"] = {"solve": time.perf_counter() - t0}
    report["solve"] = {"method": info.method, "iterations": info.iterations, "final_residual": info.residual}
    bound = _bound_for(cs, dom, f[sys_.free], g[sys_.dirichlet])
    report["apriori_bound"] = bound
    report["max_abs_u"] = float(np.abs(u).max())
    fields["solution"] = (grid, u)
    if acceptance:
        if not sys_.monotonicity.passed:
            raise OracleMismatch("assembled system is not monotone")
        if bound is not None and report["max_abs_u"] > bound.value + 1e-8:
            raise OracleMismatch(f"max|u| = {report['max_abs_u']} exceeds the a priori bound {bound.value}")
    if perron:
        per = cfg.section("perron")
        patches = make_patches(grid, per["radius"], per["overlap"])
        init = "auto_subsolution" if per["init"] == "auto" else evaluate_data(per["init"], grid, cfg.source)
        t0 = time.perf_counter()
        st = perron_sweep_bvp(prob, patches, init, per["tol"], per["max_sweeps"], reference=u, order=per["order"])
        report["timings"]["perron"] = time.perf_counter() - t0
        report["perron"] = {"patches": len(patches), **st.to_dict()}
        fields["perron_solution"] = (grid, st.current)
        if acceptance and sys_.monotonicity.passed and st.monotone_violation > 1e-12:
            raise OracleMismatch(f"Perron iterates not monotone ({st.monotone_violation:.3e})")


def _case_obstacle(cfg, acceptance, report, fields, perron=False):
    cs, dom, grid, sys_ = _grid_and_system(cfg)
    data, sol = cfg.section("data"), cfg.section("solver")
    f = evaluate_data(data["f"], grid, cfg.source)
    g = evaluate_data(data["g"], grid, cfg.source)
    psi = evaluate_data(data["psi"], grid, cfg.source)
    try:
        prob = ObstacleProblem(sys_, f, g, psi)
    except CompatibilityError as exc:
        raise ConfigValidationError([f"obstacle/boundary compatibility (psi <= g on the Dirichlet boundary) "
                                     f"violated: {exc}"]) from exc
    report["monotonicity"] = sys_.monotonicity
    t0 = time.perf_counter()
    if sol["method"] == "psor":
        u, info = solve_lcp_psor(prob, sol["omega"], sol["tol"], sol["max_iter"], order=sol["order"],
                                 return_info=True)
        its = info.iterations
    elif sol["method"] == "policy":
        u, info = solve_lcp_policy(prob, return_info=True)
        its = info.iterations
    else:
        u = solve_penalized(prob, sol["eps_schedule"], tol=max(sol["tol"], 1e-9))
        its = len(sol["eps_schedule"])
    report["timings"] = {"solve": time.perf_counter() - t0}
    res = complementarity_residual(prob, u)
    # the smoothed penalty leaves u a few eps above psi where the contact force is small
    mask_tol = max(sol["tol"], 100.0 * sol["eps_schedule"][-1]) if sol["method"] == "penalized" else sol["tol"]
    cont, coinc = continuation_region(u, psi, mask_tol, sys_.free)
    report["solve"] = {"method": sol["method"], "iterations": its, "final_residual": res,
                       "active_count": int(coinc.sum()), "mask_tol": mask_tol}
    bound = _bound_for(cs, dom, f[sys_.free], g[sys_.dirichlet], psi, obstacle=True)
    report["apriori_bound"] = bound
    report["max_u"] = float(u.max())
    r = sys_.apply(u) - prob.rhs
    r[sys_.dirichlet] = 0.0
    fields.update({"solution": (grid, u), "mask": (grid, cont.astype(float)), "residual": (grid, r)})
    if acceptance:
        if not sys_.monotonicity.passed:
            raise OracleMismatch("assembled system is not monotone")
        if bound is not None and u.max() > bound.value + 1e-8:
            raise OracleMismatch(f"max u = {u.max()} exceeds the a priori bound {bound.value}")
        if res > 10 * sol["tol"] and sol["method"] != "penalized":
            raise OracleMismatch(f"complementarity residual {res:.3e} too large")
    if perron:
        per = cfg.section("perron")
        patches = make_patches(grid, per["radius"], per["overlap"])
        init = "auto_supersolution" if per["init"] == "auto" else evaluate_data(per["init"], grid, cfg.source)
        t0 = time.perf_counter()
        st = perron_sweep_obstacle(prob, patches, init, per["tol"], per["max_sweeps"], reference=u,
                                   mode=per["mode"], order=per["order"])
        report["timings"]["perron"] = time.perf_counter() - t0
        report["perron"] = {"patches": len(patches),
                            "complementarity_residual": complementarity_residual(prob, st.current),
                            **st.to_dict()}
        fields["perron_solution"] = (grid, st.current)
        if acceptance and sys_.monotonicity.passed and st.monotone_violation > 1e-12:
            raise OracleMismatch(f"Perron iterates not monotone ({st.monotone_violation:.3e})")


def _case_transform(cfg, acceptance, report, fields, out_dir):
    tr = cfg.section("transform")
    cs = build_operator(cfg) if cfg.raw.get("operator") else geometry.model2d_operator(
        tr["model_b"][0], tr["model_b"][1], tr["model_c"])
    if cs.dim != 2:
        raise ConfigValidationError(["transform-check tabulates two-dimensional operators"])
    ns, nt = tr["samples"]
    s = np.linspace(-tr["w1_max"], tr["w1_max"], ns)
    t = np.linspace(0.0, np.pi / 2, nt + 2)[1:-1]
    W = np.array([(a, b) for a in s for b in t])
    pb = geometry.pullback_coefficients(cs, W)
    c_direct = cs.evaluate(geometry.inverse_map(W))[2]
    b1, b2 = tr["model_b"]
    rows = []
    for k, (ws, wt) in enumerate(W):
        deltas = geometry.closed_form_deltas(b1, b2, tr["model_c"], ws, wt)
        rows.append([ws, wt, pb.tilde_a[k, 0, 0], pb.tilde_a[k, 0, 1], pb.tilde_a[k, 1, 1], pb.tilde_b[k, 0],
                     pb.tilde_b[k, 1], pb.tilde_c[k], deltas["x"], deltas["y"], deltas["laplace_factor"],
                     deltas["b1"], deltas["b2"], deltas["c"]])
    header = ["w1", "wd", "a11", "a12", "a22", "b1", "b2", "c", "delta_x", "delta_y", "delta_laplace",
              "delta_b1", "delta_b2", "delta_c"]
    Path(out_dir).mkdir(parents=True, exist_ok=True)
    with open(Path(out_dir) / "transform.csv", "w") as fh:
        fh.write(",".join(header) + "\n")
        for r in rows:
            fh.write(",".join(format(float(v), ".17g") for v in r) + "\n")
    asym = float(np.abs(pb.tilde_a - np.swapaxes(pb.tilde_a, 1, 2)).max())
    min_eig = float(np.linalg.eigvalsh(pb.tilde_a)[:, 0].min())
    c_err = float(np.abs(pb.tilde_c - c_direct).max())
    report["transform"] = {"points": len(rows), "max_asymmetry": asym, "min_eigenvalue": min_eig,
                           "max_c_error": c_err}
    if acceptance and (asym > 1e-13 or min_eig <= 0 or c_err > 1e-13):
        raise OracleMismatch("pullback invariants violated")


def _mms_solution():
    def val(x):
        return np.sin(x[:, 0]) * x[:, 1] ** 2

    def grad(x):
        return np.stack([np.cos(x[:, 0]) * x[:, 1] ** 2, 2 * np.sin(x[:, 0]) * x[:, 1]], axis=1)

    def hess(x):
        H = np.empty((x.shape[0], 2, 2))
        H[:, 0, 0] = -np.sin(x[:, 0]) * x[:, 1] ** 2
        H[:, 0, 1] = H[:, 1, 0] = 2 * np.cos(x[:, 0]) * x[:, 1]
        H[:, 1, 1] = 2 * np.sin(x[:, 0])
        return H

    return ManufacturedSolution(val, grad, hess)


def random_lcp_system(rng: np.random.Generator, n_free: int | None = None):
    """Small 1D or 2D monotone obstacle problem with random data."""
    from .discretization import box, truncated_slab
    if rng.random() < 0.5:
        n = int(n_free or rng.integers(3, 13))
        dom = box([(0.0, 1.0)])
        grid = build_grid(dom, n + 2)
        cs = constant_coefficients([[rng.uniform(0.5, 2.0)]], [rng.uniform(-1, 1)], rng.uniform(0.0, 1.0),
                                   degenerate=False)
    else:
        nx = int(rng.integers(3, 6))
        ny = int(rng.integers(2, 12 // (nx - 2) + 1))
        dom = truncated_slab([(-1.0, 1.0), (0.0, 1.0)])
        grid = build_grid(dom, (nx, ny + 1))
        cs = constant_coefficients(np.diag(rng.uniform(0.5, 2.0, 2)), [rng.uniform(-1, 1), rng.uniform(0.2, 1.5)],
                                   rng.uniform(0.0, 1.0))
    sys_ = assemble_system(cs, grid, upwind="always")
    pts = grid.points
    f = rng.uniform(-2, 2) * np.sin(3 * pts[:, 0] + rng.uniform(0, 6)) + rng.uniform(-1, 1)
    psi = rng.uniform(-0.5, 0.5) + rng.uniform(0.2, 1.0) * np.cos(4 * pts[:, 0] + rng.uniform(0, 6))
    g = np.maximum(psi, 0.0) + rng.uniform(0, 0.2)
    return ObstacleProblem(sys_, f, g, psi)


def _case_verify(cfg, acceptance, report, fields, seed):
    ver = cfg.section("verify")
    cs = build_operator(cfg)
    dom = build_domain(cfg)
    reports: list[OracleReport] = []

    u_ex = _mms_solution()
    errs, hs, obl = [], [], []
    for n in ver["levels"]:
        grid = build_grid(dom, n)
        prob, exact = manufactured_problem(cs, u_ex, grid)
        if ver["inject_fault"] == "assembly_sign":
            prob = BvpProblem(inject_sign_fault(prob.sys), prob.f, prob.g)
        try:
            u = solve_bvp(prob, "direct", tol=cfg.section("solver")["tol"])
        except SolverError:
            u = np.full(grid.size, np.nan)
        err = float(np.nan_to_num(np.abs(u - exact), nan=np.inf).max())
        errs.append(err)
        hs.append(grid.spacing())
        if grid.dim == 2 and dom.degenerate_face is not None:
            obl.append(float(np.nan_to_num(oblique_residual(u, prob.f, cs, grid), nan=np.inf).max()))
        reports.append(OracleReport(f"mms-level-{len(errs) - 1}", 0.0, err, err, ver["mms_tol"],
                                    {"h": grid.spacing(), "nodes": grid.size}))
    report["mms"] = {"h": hs, "max_error": errs, "oblique_residual": obl}
    if acceptance and len(errs) >= 2 and all(np.isfinite(errs)):
        order = float(np.log(errs[-2] / errs[-1]) / np.log(hs[-2] / hs[-1]))
        reports.append(OracleReport("mms-order", 1.8, order, max(0.0, 1.8 - order), 0.0))

    rng = np.random.default_rng(seed)
    for k in range(ver["lcp_cases"]):
        prob = random_lcp_system(rng)
        if ver["inject_fault"] == "assembly_sign":
            prob = ObstacleProblem(inject_sign_fault(prob.sys), prob.f, prob.g, prob.psi)
        try:
            oracle = brute_force_lcp(prob.sys, prob.f, prob.g, prob.psi)
            cand = solve_lcp_psor(prob, tol=1e-12, max_iter=200_000)
            reports.append(compare(f"lcp-{k}", oracle, cand, ver["lcp_tol"]))
        except Exception as exc:  # noqa: BLE001 - any failure here is an oracle failure
            reports.append(OracleReport(f"lcp-{k}", None, None, float("inf"), ver["lcp_tol"], {"error": str(exc)}))

    x = rng.normal(size=(ver["roundtrip_points"], 2))
    x /= np.linalg.norm(x, axis=1)[:, None]
    x *= 0.999 * np.sqrt(rng.random(x.shape[0]))[:, None]
    x[:, 1] = np.abs(x[:, 1])
    back = geometry.inverse_map(geometry.forward_map(x))
    reports.append(compare("transform-roundtrip", x, back, ver["roundtrip_tol"]))
    report["oracles"] = reports
    failed = [r.case_id for r in reports if not r.passed]
    if failed:
        raise OracleMismatch(f"oracle mismatch in {', '.join(failed)}", reports)


def run_case(cfg: RunConfig, out_dir=None, *, seed: int = 0, acceptance: bool = False) -> int:
    """Execute the configured case, write artifacts, return the exit status."""
    out_dir = Path(out_dir or cfg.section("output")["dir"] or "out")
    report: dict[str, Any] = {"config": cfg.resolved, "case": cfg.case, "seed": seed, "acceptance": acceptance}
    fields: dict = {}
    status = EXIT_OK
    try:
        if cfg.case in ("bvp", "perron-bvp"):
            _case_bvp(cfg, acceptance, report, fields, perron=cfg.case == "perron-bvp")
        elif cfg.case in ("obstacle", "perron-obstacle"):
            _case_obstacle(cfg, acceptance, report, fields, perron=cfg.case == "perron-obstacle")
        elif cfg.case == "transform-check":
            _case_transform(cfg, acceptance, report, fields, out_dir)
        else:
            _case_verify(cfg, acceptance, report, fields, seed)
    except ConfigValidationError as exc:
        report["error"] = {"kind": "validation", "problems": exc.problems}
        status = EXIT_VALIDATION
    except (InvalidParameterError, CompatibilityError, AssemblyError, MissingConstantError) as exc:
        report["error"] = {"kind": "validation", "problems": [str(exc)]}
        status = EXIT_VALIDATION
    except OracleMismatch as exc:
        report["error"] = {"kind": "oracle-mismatch", "message": str(exc)}
        if exc.reports:
            report["oracles"] = exc.reports
        status = EXIT_ORACLE
    except SolverError as exc:
        report["error"] = {"kind": "solver", "message": str(exc), "history_tail": exc.history[-10:]}
        status = EXIT_SOLVER
    report["exit_status"] = status
    write_outputs(fields, report, out_dir)
    return status


def main(argv=None) -> int:
    ap = argparse.ArgumentParser(prog="degenpde", description=__doc__.splitlines()[0])
    ap.add_argument("--config", required=True, help="JSON run configuration")
    ap.add_argument("--out", default=None, help="output directory (default: output.dir or ./out)")
    ap.add_argument("--seed", type=int, default=0, help="seed for randomized checks")
    ap.add_argument("--acceptance", action="store_true", help="treat broken invariants as failures")
    args = ap.parse_args(argv)
    try:
        cfg = parse_config(args.config)
    except ConfigParseError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_PARSE
    except ConfigValidationError as exc:
        print("invalid configuration:", file=sys.stderr)
        for p in exc.problems:
            print(f"  - {p}", file=sys.stderr)
        return EXIT_VALIDATION
    status = run_case(cfg, args.out, seed=args.seed, acceptance=args.acceptance)
    if status:
        print(f"run failed with exit status {status}; see report.json", file=sys.stderr)
    return status


if __name__ == "__main__":
    sys.exit(main())
