"""Independent oracles and boundary diagnostics.

Nothing here reuses the assembly stencils: derivatives are taken with
separate one-sided or central formulas so that a bug in the production
path cannot cancel itself out.
"""
from __future__ import annotations

import itertools
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np
import scipy.sparse as sp

from .discretization import Grid, StencilSystem, Tag
from .operator_core import CoefficientSet

MAX_BRUTE_FORCE = 12


class OracleFailure(RuntimeError):
    pass


@dataclass
class OracleReport:
    case_id: str
    oracle: object
    candidate: object
    deviation: float
    tolerance: float
    details: dict = field(default_factory=dict)

    @property
    def passed(self) -> bool:
        return bool(self.deviation <= self.tolerance)

    def to_dict(self) -> dict:
        def plain(v):
            if isinstance(v, np.ndarray):
                return [float(t) for t in v.ravel()]
            if isinstance(v, (np.floating, np.integer)):
                return v.item()
            return v

        return {
            "case_id": self.case_id,
            "oracle": plain(self.oracle),
            "candidate": plain(self.candidate),
            "deviation": float(self.deviation),
            "tolerance": float(self.tolerance),
            "passed": self.passed,
            **{k: plain(v) for k, v in self.details.items()},
        }


def compare(case_id: str, oracle, candidate, tolerance: float, **details) -> OracleReport:
    o = np.asarray(oracle, dtype=float)
    c = np.asarray(candidate, dtype=float)
    dev = float(np.max(np.abs(o - c))) if o.size else 0.0
    return OracleReport(case_id, o, c, dev, tolerance, details)


# ------------------------------------------------------------ LCP oracle


def brute_force_lcp(sys: StencilSystem, f, g, psi, *, feas_tol: float = 1e-12,
                    return_active: bool = False):
    """Solve the discrete obstacle problem by trying every active set.

    For each subset S of the equation rows, fix u = psi on S, solve the
    remaining equations, and accept the first configuration with
    u >= psi off S and L_h u - f >= 0 on S.
    """
    free = np.flatnonzero(sys.free)
    n = free.size
    if n > MAX_BRUTE_FORCE:
        raise ValueError(f"{n} unknowns exceed the enumeration cap of {MAX_BRUTE_FORCE}")
    a = sys.matrix.toarray()
    rhs = sys.rhs(f, g)
    psi = np.asarray(psi, dtype=float).reshape(-1)
    base = np.array(rhs, dtype=float)
    base[sys.free] = 0.0
    fixed = sys.dirichlet
    scale = 1.0 + np.abs(rhs).max() + np.abs(psi[sys.free]).max(initial=0.0)
    for k in range(n + 1):
        for combo in itertools.combinations(range(n), k):
            act = np.zeros(n, dtype=bool)
            act[list(combo)] = True
            u = base.copy()
            u[free[act]] = psi[free[act]]
            rest = free[~act]
            if rest.size:
                known = np.concatenate([np.flatnonzero(fixed), free[act]])
                b = rhs[rest] - a[np.ix_(rest, known)] @ u[known]
                u[rest] = np.linalg.solve(a[np.ix_(rest, rest)], b)
            if np.any(u[rest] < psi[rest] - feas_tol * scale):
                continue
            r = a[free[act]] @ u - rhs[free[act]]
            if np.any(r < -feas_tol * scale):
                continue
            return (u, free[act]) if return_active else u
    raise OracleFailure("no active set is feasible; the system is probably not an M-matrix")


# ------------------------------------------------------ boundary regularity


def _layer_second_differences(u: np.ndarray, g: Grid, layer: int) -> np.ndarray:
    """|x_d D^2_h u| on the given layer above the degenerate face, per node."""
    if g.dim != 2:
        raise ValueError("the layer diagnostic is implemented for two-dimensional grids")
    U = u.reshape(g.shape)
    x, y = g.axes
    if U.shape[1] < layer + 2:
        raise ValueError("too few layers above the degenerate face")
    j = layer
    i = np.arange(1, U.shape[0] - 1)
    hx_m, hx_p = x[i] - x[i - 1], x[i + 1] - x[i]
    hy_m, hy_p = y[j] - y[j - 1], y[j + 1] - y[j]
    uxx = 2.0 * (hx_m * U[i + 1, j] - (hx_m + hx_p) * U[i, j] + hx_p * U[i - 1, j]) / (hx_m * hx_p * (hx_m + hx_p))
    uyy = 2.0 * (hy_m * U[i, j + 1] - (hy_m + hy_p) * U[i, j] + hy_p * U[i, j - 1]) / (hy_m * hy_p * (hy_m + hy_p))
    uxy = (U[i + 1, j + 1] - U[i + 1, j - 1] - U[i - 1, j + 1] + U[i - 1, j - 1]) / ((hx_m + hx_p) * (hy_m + hy_p))
    return y[j] * np.maximum(np.maximum(np.abs(uxx), np.abs(uyy)), np.abs(uxy))


def _rates(hs: Sequence[float], vals: Sequence[float]) -> list:
    out = []
    for k in range(1, len(vals)):
        if vals[k] > 0 and vals[k - 1] > 0:
            out.append(float(np.log(vals[k - 1] / vals[k]) / np.log(hs[k - 1] / hs[k])))
        else:
            out.append(float("nan"))
    return out


@dataclass
class RefinementReport:
    h: list
    values: list

    @property
    def rates(self) -> list:
        return _rates(self.h, self.values)

    @property
    def decreasing(self) -> bool:
        return all(b < a for a, b in zip(self.values, self.values[1:]))

    def stays_above(self, fraction: float = 0.1) -> bool:
        return all(v >= fraction * self.values[0] for v in self.values)

    def to_dict(self) -> dict:
        return {"h": list(map(float, self.h)), "values": list(map(float, self.values)),
                "rates": self.rates, "decreasing": self.decreasing}


def boundary_regularity_check(levels: Sequence[tuple], layer: int = 1) -> RefinementReport:
    """Max of |x_d D^2_h u| on the first layer above x_d = 0, per refinement level.

    ``levels`` is a sequence of (u, grid) pairs, coarse to fine.
    """
    hs, vals = [], []
    for u, g in levels:
        q = _layer_second_differences(np.asarray(u, dtype=float), g, layer)
        hs.append(g.axes[-1][layer] - g.axes[-1][layer - 1])
        vals.append(float(q.max()))
    return RefinementReport(hs, vals)


def _one_sided_normal(U: np.ndarray, y: np.ndarray) -> np.ndarray:
    """Second-order forward derivative in x_d at the bottom row (nonuniform allowed)."""
    h1, h2 = y[1] - y[0], y[2] - y[1]
    s = h1 + h2
    w0 = -(2 * h1 + h2) / (h1 * s)
    w1 = s / (h1 * h2)
    w2 = -h1 / (h2 * s)
    return w0 * U[..., 0] + w1 * U[..., 1] + w2 * U[..., 2]


def oblique_residual(u, f, cs: CoefficientSet, g: Grid) -> np.ndarray:
    """|-<b, D u> + c u - f| at the degenerate nodes, second-order differences."""
    if g.dim != 2:
        raise ValueError("the oblique residual is implemented for two-dimensional grids")
    degen = np.flatnonzero(g.mask(Tag.DEGENERATE))
    if degen.size == 0:
        raise ValueError("the grid has no degenerate nodes")
    U = np.asarray(u, dtype=float).reshape(g.shape)
    F = np.asarray(f, dtype=float).reshape(g.shape)
    x, y = g.axes
    i = g.multi_index[degen, 0]
    hm, hp = x[i] - x[i - 1], x[i + 1] - x[i]
    ux = (hm ** 2 * U[i + 1, 0] + (hp ** 2 - hm ** 2) * U[i, 0] - hp ** 2 * U[i - 1, 0]) / (hm * hp * (hm + hp))
    uy = _one_sided_normal(U[i], y)
    _, b, c = cs.evaluate(g.points[degen])
    return np.abs(-b[:, 0] * ux - b[:, 1] * uy + c * U[i, 0] - F[i, 0])


def oblique_residual_check(levels: Sequence[tuple], cs: CoefficientSet) -> RefinementReport:
    """Max oblique residual at x_d = 0 for each (u, f, grid) level."""
    hs, vals = [], []
    for u, f, g in levels:
        hs.append(g.spacing())
        vals.append(float(oblique_residual(u, f, cs, g).max()))
    return RefinementReport(hs, vals)


def corner_compatibility_probe(cs: CoefficientSet, f, g: Grid, u, corner: Optional[int] = None) -> float:
    """|-<b, D^+ u> + c u - f| at a corner node, differences taken into the domain.

    By default the corner node closest to the origin is used.
    """
    corners = np.flatnonzero(g.mask(Tag.CORNER))
    if corners.size == 0:
        raise ValueError("the grid has no corner nodes")
    pts = g.points
    if corner is None:
        corner = int(corners[np.argmin(np.linalg.norm(pts[corners], axis=1))])
    U = np.asarray(u, dtype=float).reshape(-1)
    F = np.asarray(f, dtype=float).reshape(-1)
    idx = g.multi_index[corner]
    grad = np.zeros(g.dim)
    for p in range(g.dim):
        step = np.zeros(g.dim, dtype=int)
        step[p] = 1 if idx[p] == 0 else -1
        nb = g.index(*(idx + step))
        grad[p] = (U[nb] - U[corner]) / (pts[nb, p] - pts[corner, p])
    _, b, c = cs.evaluate(pts[corner][None])
    return float(abs(-b[0] @ grad + c[0] * U[corner] - F[corner]))


# --------------------------------------------------------- fault injection


def inject_sign_fault(sys: StencilSystem) -> StencilSystem:
    """Copy of ``sys`` with the x_1 neighbour weights of interior rows negated."""
    m = sys.matrix.tolil(copy=True)
    stride = int(np.prod(sys.grid.shape[1:]))
    for k in np.flatnonzero(sys.grid.mask(Tag.INTERIOR)):
        for col in (k - stride, k + stride):
            if m[k, col] != 0:
                m[k, col] = -m[k, col]
    return sys.with_matrix(sp.csr_matrix(m))
