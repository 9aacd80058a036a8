"""Perron iteration by patchwise lifts.

A lift replaces a field on one patch by the local solution of the equation
(or the local obstacle problem), with the field itself supplying the data on
the patch boundary.  Starting from a constant subsolution the lifts increase
the field monotonically toward the solution; starting from a supersolution
they decrease it.  On grids this is an overlapping Schwarz iteration whose
monotonicity is the discrete counterpart of the sup/inf envelopes.
"""
from __future__ import annotations

import logging
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Optional, Sequence, Union

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from .bvp import BvpProblem, SolverError, solve_bvp, subsolution_constant, supersolution_constant
from .discretization import Grid, Tag
from .obstacle import ObstacleProblem, continuation_region, solve_lcp_psor

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class Patch:
    kind: str  # "Ball" or "HalfBall"
    interior: np.ndarray  # nodes whose values the lift replaces
    nodes: np.ndarray  # interior plus the ring that supplies boundary data
    lo: tuple
    hi: tuple
    overlap: int

    def __repr__(self) -> str:
        return f"Patch({self.kind}, box={self.lo}..{self.hi}, n={self.interior.size})"


def make_patches(g: Grid, radius_nodes: int, overlap_nodes: int) -> list[Patch]:
    """Cover the equation nodes with overlapping boxes.

    The index range of equation nodes is cut into blocks of ``radius_nodes``
    per axis; each block is widened by ``overlap_nodes`` on every side and
    clipped.  Boxes touching the degenerate face are half-balls.
    """
    if radius_nodes < 2:
        raise ValueError("radius must be at least 2 nodes")
    if overlap_nodes < 1:
        raise ValueError("overlap must be at least 1 node")
    free = g.mask(Tag.INTERIOR, Tag.DEGENERATE)
    if not free.any():
        raise ValueError("grid has no equation nodes to cover")
    mi = g.multi_index
    lo_all = mi[free].min(axis=0)
    hi_all = mi[free].max(axis=0)
    starts = [list(range(lo, hi + 1, radius_nodes)) for lo, hi in zip(lo_all, hi_all)]
    free_grid = free.reshape(g.shape)
    degen = g.mask(Tag.DEGENERATE)
    patches = []
    for corner in np.array(np.meshgrid(*starts, indexing="ij")).reshape(g.dim, -1).T:
        lo = np.maximum(corner - overlap_nodes, lo_all)
        hi = np.minimum(corner + radius_nodes - 1 + overlap_nodes, hi_all)
        sl = tuple(slice(a, b + 1) for a, b in zip(lo, hi))
        box_mask = np.zeros(g.shape, dtype=bool)
        box_mask[sl] = True
        interior = np.flatnonzero((box_mask & free_grid).ravel())
        if interior.size == 0:
            continue
        ring_sl = tuple(slice(max(a - 1, 0), min(b + 2, n)) for a, b, n in zip(lo, hi, g.shape))
        ring = np.zeros(g.shape, dtype=bool)
        ring[ring_sl] = True
        nodes = np.flatnonzero(ring.ravel())
        kind = "HalfBall" if degen[interior].any() else "Ball"
        patches.append(Patch(kind, interior, nodes, tuple(int(v) for v in lo), tuple(int(v) for v in hi),
                             overlap_nodes))
    covered = np.zeros(g.size, dtype=bool)
    for p in patches:
        covered[p.interior] = True
    if not np.all(covered[free]):
        raise ValueError("patches do not cover every equation node")
    return patches


class LocalSolver:
    """Per-patch blocks of the global operator, with cached factorizations."""

    def __init__(self, problem: Union[BvpProblem, ObstacleProblem], patches: Sequence[Patch]):
        self.problem = problem
        self.patches = list(patches)
        m = problem.sys.matrix.tocsr()
        self.rhs = problem.rhs
        self._blocks = []
        for p in self.patches:
            rows = m[p.interior]
            inner = rows[:, p.interior].tocsc()
            mask = np.ones(m.shape[0], dtype=bool)
            mask[p.interior] = False
            outer_cols = np.flatnonzero(mask)
            outer = rows[:, outer_cols].tocsr()
            keep = np.unique(outer.indices)
            self._blocks.append((inner, outer[:, keep], outer_cols[keep], spla.splu(inner)))

    def local_rhs(self, k: int, state: np.ndarray) -> np.ndarray:
        inner, outer, cols, _ = self._blocks[k]
        return self.rhs[self.patches[k].interior] - outer @ state[cols]

    def plain(self, k: int, state: np.ndarray) -> np.ndarray:
        return self._blocks[k][3].solve(self.local_rhs(k, state))

    def obstacle(self, k: int, state: np.ndarray) -> np.ndarray:
        """Exact local LCP solution by policy iteration."""
        inner, _, _, lu = self._blocks[k]
        b = self.local_rhs(k, state)
        psi = self.problem.psi[self.patches[k].interior]
        u = lu.solve(b)
        binding = np.zeros(u.size, dtype=bool)
        n = u.size
        for _ in range(4 * n + 10):
            r = inner @ u - b
            new = u - psi < r
            if np.array_equal(new, binding):
                return u
            binding = new
            if not binding.any():
                u = lu.solve(b)
                continue
            keep = sp.diags((~binding).astype(float))
            mat = (keep @ inner + sp.diags(binding.astype(float))).tocsc()
            u = spla.spsolve(mat, np.where(binding, psi, b))
        raise SolverError("local obstacle lift did not settle")


def local_lift(state, patch: Patch, p: Union[BvpProblem, ObstacleProblem], *, obstacle: Optional[bool] = None,
               solver: Optional[LocalSolver] = None) -> np.ndarray:
    """Return a copy of ``state`` with ``patch`` replaced by the local solve.

    For an obstacle problem the local obstacle problem is solved unless
    ``obstacle=False``.
    """
    state = np.asarray(state, dtype=float)
    if solver is None:
        solver = LocalSolver(p, [patch])
        k = 0
    else:
        k = next(i for i, q in enumerate(solver.patches) if q is patch)
    if obstacle is None:
        obstacle = isinstance(p, ObstacleProblem)
    out = state.copy()
    out[patch.interior] = solver.obstacle(k, state) if obstacle else solver.plain(k, state)
    return out


@dataclass
class SweepState:
    current: np.ndarray
    sweep_index: int
    monotone_violation: float
    gap_to_reference: float
    converged: bool = False
    telemetry: list = field(default_factory=list)
    reference: Optional[np.ndarray] = None

    def to_dict(self) -> dict:
        return {
            "sweep_index": self.sweep_index,
            "monotone_violation": self.monotone_violation,
            "gap_to_reference": self.gap_to_reference,
            "converged": self.converged,
            "telemetry": self.telemetry,
        }


def color_patches(patches: Sequence[Patch]) -> list[list[int]]:
    """Greedy coloring: patches sharing a color never read each other's updates."""
    sets = [(set(p.interior.tolist()), set(p.nodes.tolist())) for p in patches]
    colors: list[list[int]] = []
    for k, (inner_k, nodes_k) in enumerate(sets):
        for group in colors:
            if all(not (inner_k & sets[j][1]) and not (sets[j][0] & nodes_k) for j in group):
                group.append(k)
                break
        else:
            colors.append([k])
    return colors


def _thread_cap() -> int:
    try:
        return max(1, int(os.environ.get("DEGEN_THREADS", os.cpu_count() or 1)))
    except ValueError:
        return 1


def _sweep(u: np.ndarray, solver: LocalSolver, choose, order: str, groups) -> None:
    """One pass over all patches, updating ``u`` in place."""
    if order == "lexicographic":
        for k, patch in enumerate(solver.patches):
            u[patch.interior] = choose(k, u)
        return
    workers = _thread_cap()
    with ThreadPoolExecutor(max_workers=workers) as pool:
        for group in groups:
            snapshot = u
            results = list(pool.map(lambda k: choose(k, snapshot), group))
            for k, vals in zip(group, results):
                u[solver.patches[k].interior] = vals


def _run(p, patches, u, direction, tol, max_sweeps, reference, choose_factory, order, require_monotone,
         mono_tol=1e-12, solver=None):
    if order not in ("lexicographic", "colored"):
        raise ValueError(f"unknown sweep order {order!r}")
    solver = solver or LocalSolver(p, patches)
    groups = color_patches(solver.patches) if order == "colored" else None
    choose = choose_factory(solver)
    sign = 1.0 if direction == "up" else -1.0
    telemetry = []
    worst = 0.0
    converged = False
    k = 0
    for k in range(1, max_sweeps + 1):
        prev = u.copy()
        _sweep(u, solver, choose, order, groups)
        change = u - prev
        wrong = float(max(0.0, -(sign * change).min()))
        worst = max(worst, wrong)
        gap = float(np.abs(u - reference).max()) if reference is not None else float("nan")
        telemetry.append({"max_change": float(change.max()), "min_change": float(change.min()),
                          "gap_to_reference": gap})
        if wrong > mono_tol:
            msg = f"sweep {k}: change of {wrong:.3e} against the {direction} direction"
            if require_monotone:
                log.warning(msg)
            else:
                log.info(msg)
        if np.abs(change).max() <= tol:
            converged = True
            break
    gap = float(np.abs(u - reference).max()) if reference is not None else float("nan")
    state = SweepState(u, k, worst, gap, converged, telemetry, reference)
    if not converged:
        raise SweepLimitError(f"no convergence within {max_sweeps} sweeps", state)
    return state


class SweepLimitError(SolverError):
    def __init__(self, msg, state: SweepState):
        super().__init__(msg, [t["max_change"] for t in state.telemetry])
        self.state = state


def _initial(p, init, kind: str):
    g = p.g
    dirichlet = p.sys.dirichlet
    cs = p.sys.cs
    if isinstance(init, str):
        if init == "auto_subsolution":
            level = subsolution_constant(cs, p.f[p.sys.free], g[dirichlet])
            direction = "up"
        elif init == "auto_supersolution":
            psi = p.psi[p.sys.free] if kind == "obstacle" else None
            level = supersolution_constant(cs, p.f[p.sys.free], g[dirichlet], psi)
            direction = "down"
        else:
            raise ValueError(f"unknown initialization {init!r}")
        u = np.full(p.sys.size, level)
    else:
        u = np.array(init, dtype=float)
        if u.shape != (p.sys.size,):
            raise ValueError("initial field has the wrong size")
        direction = None
    u[dirichlet] = g[dirichlet]
    return u, direction


def perron_sweep_bvp(p: BvpProblem, patches: Sequence[Patch], init="auto_subsolution", tol: float = 1e-10,
                     max_sweeps: int = 1000, *, reference=None, direction: Optional[str] = None,
                     order: str = "lexicographic", solver: Optional[LocalSolver] = None) -> SweepState:
    """Repeated plain lifts over all patches until the largest change is at most ``tol``.

    ``reference`` defaults to the direct solve; the gap to it is recorded
    after every sweep.
    """
    u, auto_dir = _initial(p, init, "bvp")
    direction = direction or auto_dir or "up"
    if reference is None:
        reference = solve_bvp(p, "direct", tol=min(tol, 1e-12))
    monotone = p.sys.monotonicity.passed

    def factory(solver):
        return lambda k, state: solver.plain(k, state)

    return _run(p, patches, u, direction, tol, max_sweeps, reference, factory, order, monotone, solver=solver)


def perron_sweep_obstacle(p: ObstacleProblem, patches: Sequence[Patch], init="auto_supersolution",
                          tol: float = 1e-10, max_sweeps: int = 1000, *, reference=None,
                          mode: str = "two-tier", order: str = "lexicographic",
                          cont_tol: float = 1e-12, solver: Optional[LocalSolver] = None) -> SweepState:
    """Downward sweep of lifts for the obstacle problem.

    ``mode="two-tier"`` lifts half-ball patches lying inside the current
    continuation region with the plain equation and falls back to the local
    obstacle problem when the result dips below the obstacle; every other
    patch gets an obstacle lift.  ``mode="obstacle"`` uses obstacle lifts
    everywhere.  ``reference`` defaults to the PSOR solution.
    """
    if mode not in ("two-tier", "obstacle"):
        raise ValueError(f"unknown mode {mode!r}")
    u, auto_dir = _initial(p, init, "obstacle")
    if reference is None:
        reference = solve_lcp_psor(p, tol=min(tol, 1e-12))
    monotone = p.sys.monotonicity.passed

    def factory(solver):
        def choose(k, state):
            patch = solver.patches[k]
            if mode == "two-tier" and patch.kind == "HalfBall":
                inside = state[patch.interior] - p.psi[patch.interior] > cont_tol
                if inside.all():
                    vals = solver.plain(k, state)
                    if np.all(vals >= p.psi[patch.interior]):
                        return vals
            return solver.obstacle(k, state)
        return choose

    return _run(p, patches, u, auto_dir or "down", tol, max_sweeps, reference, factory, order, monotone,
                solver=solver)


@dataclass
class ComparisonReport:
    passed: bool
    max_violation: float
    location: Optional[int]
    supersolution_ok: bool
    supersolution_defect: float

    def to_dict(self) -> dict:
        return dict(self.__dict__)


def supersolution_defect(v, p: Union[BvpProblem, ObstacleProblem]) -> float:
    """How far ``v`` is from being a discrete supersolution (0 when it is one)."""
    v = np.asarray(v, dtype=float)
    free = p.sys.free
    r = (p.sys.apply(v) - p.rhs)[free]
    defects = [np.maximum(-r, 0).max(initial=0.0)]
    d = p.sys.dirichlet
    defects.append(np.maximum(p.g[d] - v[d], 0).max(initial=0.0))
    if isinstance(p, ObstacleProblem):
        defects.append(np.maximum(p.psi - v, 0).max(initial=0.0))
    return float(max(defects))


def comparison_check(u_candidate, v_super, p: Union[BvpProblem, ObstacleProblem], tol: float = 1e-10,
                     super_tol: float = 1e-10) -> ComparisonReport:
    """Check u_candidate <= v_super + tol at every node."""
    u = np.asarray(u_candidate, dtype=float)
    v = np.asarray(v_super, dtype=float)
    diff = u - v
    k = int(np.argmax(diff))
    worst = float(diff[k])
    defect = supersolution_defect(v, p)
    return ComparisonReport(bool(worst <= tol), max(worst, 0.0), k if worst > 0 else None,
                            bool(defect <= super_tol), defect)
