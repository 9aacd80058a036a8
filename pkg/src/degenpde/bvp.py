"""Linear partial-Dirichlet solves, sup-norm bounds and manufactured-solution studies."""
from __future__ import annotations

import io
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np
import scipy.sparse.linalg as spla

from ._kernels import run_relaxation
from .discretization import DomainSpec, StencilSystem, Tag, assemble_system, build_grid
from .operator_core import CoefficientSet, apply_operator_pointwise


class SolverError(RuntimeError):
    """A solve failed; ``history`` holds the residuals seen so far."""

    def __init__(self, msg: str, history: Sequence[float] = ()):
        super().__init__(msg)
        self.history = list(history)


class MissingConstantError(ValueError):
    pass


@dataclass
class BvpProblem:
    sys: StencilSystem
    f: np.ndarray
    g: np.ndarray

    def __post_init__(self):
        n = self.sys.size
        self.f = np.asarray(self.f, dtype=float).reshape(-1)
        self.g = np.asarray(self.g, dtype=float).reshape(-1)
        if self.f.shape[0] != n or self.g.shape[0] != n:
            raise ValueError("f and g must have one entry per grid node")
        if not np.all(np.isfinite(self.f)):
            raise ValueError("f must be finite")
        if not np.all(np.isfinite(self.g[self.sys.dirichlet])):
            raise ValueError("g must be finite on Dirichlet nodes")

    @property
    def rhs(self) -> np.ndarray:
        return self.sys.rhs(self.f, self.g)

    def residual(self, u) -> np.ndarray:
        """L_h u - f on equation rows, zero on Dirichlet rows."""
        r = self.sys.apply(u) - self.rhs
        r[self.sys.dirichlet] = 0.0
        return r


@dataclass
class SolveInfo:
    method: str
    iterations: int
    residual: float
    history: list = field(default_factory=list)


def solve_bvp(p: BvpProblem, method: str = "direct", *, omega: float = 1.5, tol: float = 1e-10,
              max_iter: int = 200_000, u0=None, return_info: bool = False):
    """Solve L_h u = f on equation rows with u = g on Dirichlet rows.

    ``direct`` uses a sparse LU factorization followed by iterative
    refinement; ``sor`` runs successive over-relaxation from ``u0``.
    Convergence is declared on the max-norm of the equation residual.
    """
    rhs = p.rhs
    dir_mask = p.sys.dirichlet
    if method == "direct":
        try:
            lu = spla.splu(p.sys.matrix.tocsc())
        except RuntimeError as exc:
            raise SolverError(f"singular system: {exc}") from exc
        u = lu.solve(rhs)
        history = []
        for it in range(10):
            r = rhs - p.sys.apply(u)
            r[dir_mask] = 0.0
            res = float(np.max(np.abs(r))) if r.size else 0.0
            history.append(res)
            if not np.isfinite(res):
                raise SolverError("direct solve produced non-finite values", history)
            if res <= tol:
                break
            u = u + lu.solve(r)
        else:
            raise SolverError(f"iterative refinement stalled at residual {history[-1]:.3e}", history)
        u[dir_mask] = p.g[dir_mask]
        info = SolveInfo("direct", len(history) - 1, history[-1], history)
    elif method == "sor":
        if not 0.0 < omega < 2.0:
            raise ValueError("omega must lie in (0, 2)")
        u = np.zeros(p.sys.size) if u0 is None else np.array(u0, dtype=float)
        u[dir_mask] = p.g[dir_mask]
        it, res, hist = run_relaxation(p.sys.matrix, rhs, u, ~dir_mask, omega=omega, tol=tol,
                                       max_iter=max_iter)
        if res > tol:
            raise SolverError(f"SOR did not reach {tol:g} in {max_iter} sweeps (residual {res:.3e})",
                              hist.tolist())
        info = SolveInfo("sor", it, res, hist.tolist())
    else:
        raise ValueError(f"unknown method {method!r}")
    return (u, info) if return_info else u


# ---------------------------------------------------------------- bounds

BOUND_VARIANTS = ("solution_c0", "finite_height", "obstacle_c0")


@dataclass
class AprioriBound:
    value: float
    formula_id: str
    inputs: dict

    def to_dict(self) -> dict:
        return {"value": self.value, "formula_id": self.formula_id, "inputs": self.inputs}


def apriori_bound(cs: CoefficientSet | None, sup_f: float, sup_g: float, sup_psi: float | None = None,
                  variant: str = "solution_c0", **overrides) -> AprioriBound:
    """Sup-norm bounds from the weak maximum principle.

    ``solution_c0``:   max(sup|f| / c0, sup|g|)
    ``finite_height``: exp(b0 nu / 2 Lambda) * max(4 Lambda sup|f| / b0^2, sup|g|)
    ``obstacle_c0``:   max(0, sup f / c0, sup g, sup psi)   (upper bound only)

    For the first two variants ``sup_f`` and ``sup_g`` are sup-norms.
    Constants come from ``cs.bounds`` unless passed as keyword overrides.
    """
    consts = dict(cs.bounds.declared()) if cs is not None else {}
    consts.update({k: v for k, v in overrides.items() if v is not None})

    def need(name):
        v = consts.get(name)
        if v is None:
            raise MissingConstantError(f"variant {variant!r} needs the constant {name}")
        if not v > 0:
            raise MissingConstantError(f"variant {variant!r} needs {name} > 0, got {v}")
        return float(v)

    if variant == "solution_c0":
        c0 = need("c0")
        value = max(sup_f / c0, sup_g)
        inputs = {"c0": c0, "sup_abs_f": sup_f, "sup_abs_g": sup_g}
    elif variant == "finite_height":
        b0, lam, nu = need("b0"), need("Lambda"), need("nu")
        value = float(np.exp(b0 * nu / (2.0 * lam)) * max(4.0 * lam * sup_f / b0 ** 2, sup_g))
        inputs = {"b0": b0, "Lambda": lam, "nu": nu, "sup_abs_f": sup_f, "sup_abs_g": sup_g}
    elif variant == "obstacle_c0":
        c0 = need("c0")
        terms = [0.0, sup_f / c0, sup_g]
        if sup_psi is not None:
            terms.append(sup_psi)
        value = max(terms)
        inputs = {"c0": c0, "sup_f": sup_f, "sup_g": sup_g, "sup_psi": sup_psi}
    else:
        raise ValueError(f"unknown bound variant {variant!r}")
    return AprioriBound(float(value), variant, inputs)


def subsolution_constant(cs: CoefficientSet, f, g) -> float:
    """M- = min(0, inf f / c0, inf g): a constant discrete subsolution."""
    c0 = cs.bounds.c0
    if c0 is None or not c0 > 0:
        raise MissingConstantError("a constant subsolution needs c0 > 0")
    return float(min(0.0, np.min(f) / c0, np.min(g)))


def supersolution_constant(cs: CoefficientSet, f, g, psi=None) -> float:
    """M+ = max(0, sup f / c0, sup g [, sup psi]): a constant discrete supersolution."""
    c0 = cs.bounds.c0
    if c0 is None or not c0 > 0:
        raise MissingConstantError("a constant supersolution needs c0 > 0")
    terms = [0.0, np.max(f) / c0, np.max(g)]
    if psi is not None:
        terms.append(np.max(psi))
    return float(max(terms))


# ----------------------------------------------------- manufactured solutions


@dataclass(frozen=True)
class ManufacturedSolution:
    value: Callable[[np.ndarray], np.ndarray]
    gradient: Callable[[np.ndarray], np.ndarray]
    hessian: Callable[[np.ndarray], np.ndarray]

    def source(self, cs: CoefficientSet, pts: np.ndarray) -> np.ndarray:
        return apply_operator_pointwise(cs, self.value(pts), self.gradient(pts), self.hessian(pts), pts)


def manufactured_problem(cs: CoefficientSet, u: ManufacturedSolution, grid) -> tuple[BvpProblem, np.ndarray]:
    sys = assemble_system(cs, grid)
    pts = grid.points
    exact = np.asarray(u.value(pts), dtype=float)
    return BvpProblem(sys, u.source(cs, pts), exact), exact


@dataclass
class ConvergenceTable:
    h: list
    err_interior: list
    err_degenerate: list
    extras: dict = field(default_factory=dict)

    @staticmethod
    def _orders(h, e):
        out = [float("nan")]
        for k in range(1, len(h)):
            if e[k] > 0 and e[k - 1] > 0:
                out.append(float(np.log(e[k - 1] / e[k]) / np.log(h[k - 1] / h[k])))
            else:
                out.append(float("nan"))
        return out

    @property
    def order_interior(self) -> list:
        return self._orders(self.h, self.err_interior)

    @property
    def order_degenerate(self) -> list:
        return self._orders(self.h, self.err_degenerate)

    def to_csv(self) -> str:
        buf = io.StringIO()
        buf.write("level,h,err_interior,err_degenerate,order_interior,order_degenerate\n")
        oi, od = self.order_interior, self.order_degenerate
        for k in range(len(self.h)):
            vals = [self.h[k], self.err_interior[k], self.err_degenerate[k], oi[k], od[k]]
            buf.write(f"{k}," + ",".join(format(v, ".17g") for v in vals) + "\n")
        return buf.getvalue()


def mms_convergence(cs: CoefficientSet, u_exact: ManufacturedSolution, dom: DomainSpec,
                    levels: Sequence, *, method: str = "direct", tol: float = 1e-10,
                    keep_solutions: bool = False) -> ConvergenceTable:
    """Solve with f := A u_exact and g := u_exact on each grid level and tabulate errors."""
    if len(levels) < 3:
        raise ValueError("at least three levels are needed")
    table = ConvergenceTable([], [], [])
    sols = []
    for n in levels:
        grid = build_grid(dom, n)
        prob, exact = manufactured_problem(cs, u_exact, grid)
        u = solve_bvp(prob, method, tol=tol)
        err = np.abs(u - exact)
        interior = grid.mask(Tag.INTERIOR)
        degen = grid.mask(Tag.DEGENERATE)
        table.h.append(grid.spacing())
        table.err_interior.append(float(err[interior].max()) if interior.any() else 0.0)
        table.err_degenerate.append(float(err[degen].max()) if degen.any() else 0.0)
        if keep_solutions:
            sols.append((grid, prob, u))
    if keep_solutions:
        table.extras["solutions"] = sols
    return table
