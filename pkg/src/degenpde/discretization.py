"""Tensor grids, node classification and monotone finite-difference assembly.

Boundary faces are named ``"x{k}-"`` / ``"x{k}+"`` (1-based axis).  The
bottom face of the last axis may be declared degenerate: no data is imposed
there and the row carries the first-order operator -<b, Du> + c u.  Every
other face must be a Dirichlet face.
"""
from __future__ import annotations

import csv
from dataclasses import dataclass, field
from enum import IntEnum
from typing import Callable, Optional, Sequence

import numpy as np
import scipy.sparse as sp

from .operator_core import CoefficientSet


class Tag(IntEnum):
    INTERIOR = 0
    DEGENERATE = 1
    DIRICHLET = 2
    CORNER = 3


TAG_NAMES = {Tag.INTERIOR: "Interior", Tag.DEGENERATE: "Degenerate", Tag.DIRICHLET: "Dirichlet",
             Tag.CORNER: "Corner"}
TAG_FROM_NAME = {v: k for k, v in TAG_NAMES.items()}

KINDS = ("TruncatedSlab", "Box", "HalfBallViaSlab")


class AssemblyError(ValueError):
    pass


def face_names(d: int) -> list[str]:
    return [f"x{k + 1}{s}" for k in range(d) for s in "-+"]


@dataclass(frozen=True)
class DomainSpec:
    kind: str
    bounds: tuple
    dirichlet_faces: frozenset = None
    degenerate_face: Optional[str] = None

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown domain kind {self.kind!r}")
        bounds = tuple((float(lo), float(hi)) for lo, hi in self.bounds)
        object.__setattr__(self, "bounds", bounds)
        d = len(bounds)
        if d < 1:
            raise ValueError("at least one axis required")
        for k, (lo, hi) in enumerate(bounds):
            if not lo < hi:
                raise ValueError(f"axis {k + 1}: lower bound {lo} must be below upper bound {hi}")
        faces = set(face_names(d))
        bottom = f"x{d}-"
        degen = self.degenerate_face
        if degen is None and self.kind in ("TruncatedSlab", "HalfBallViaSlab"):
            degen = bottom
        if degen is not None:
            if degen != bottom:
                raise ValueError(f"the degenerate face must be {bottom}, got {degen}")
            if bounds[-1][0] != 0.0:
                raise ValueError("the degenerate face must sit at x_d = 0")
        object.__setattr__(self, "degenerate_face", degen)
        dirichlet = self.dirichlet_faces
        if dirichlet is None:
            dirichlet = faces - {degen}
        dirichlet = frozenset(dirichlet)
        if not dirichlet <= faces:
            raise ValueError(f"unknown faces {sorted(dirichlet - faces)}")
        if degen in dirichlet:
            raise ValueError("the degenerate face cannot carry Dirichlet data")
        missing = faces - dirichlet - {degen}
        if missing:
            raise ValueError(f"faces {sorted(missing)} are neither Dirichlet nor degenerate")
        object.__setattr__(self, "dirichlet_faces", dirichlet)

    @property
    def dim(self) -> int:
        return len(self.bounds)

    @property
    def height(self) -> float:
        return self.bounds[-1][1]


def truncated_slab(bounds, **kw) -> DomainSpec:
    return DomainSpec("TruncatedSlab", bounds, **kw)


def box(bounds, **kw) -> DomainSpec:
    return DomainSpec("Box", bounds, **kw)


def half_ball_slab(width: float) -> DomainSpec:
    """Slab image of the unit half-disk, truncated to |w_1| <= width."""
    return DomainSpec("HalfBallViaSlab", ((-width, width), (0.0, np.pi / 2)))


def graded_axis(lo: float, hi: float, n: int, ratio: float = 1.0) -> np.ndarray:
    """n points on [lo, hi] whose spacings grow geometrically by ``ratio``."""
    if ratio <= 0:
        raise ValueError("grading ratio must be positive")
    if ratio == 1.0:
        return np.linspace(lo, hi, n)
    steps = ratio ** np.arange(n - 1)
    t = np.concatenate([[0.0], np.cumsum(steps)])
    t /= t[-1]
    out = lo + (hi - lo) * t
    out[-1] = hi
    return out


@dataclass(frozen=True)
class Grid:
    dom: DomainSpec
    axes: tuple
    tags: np.ndarray = field(repr=False)

    @property
    def dim(self) -> int:
        return len(self.axes)

    @property
    def shape(self) -> tuple:
        return tuple(len(a) for a in self.axes)

    @property
    def size(self) -> int:
        return int(np.prod(self.shape))

    @property
    def points(self) -> np.ndarray:
        mesh = np.meshgrid(*self.axes, indexing="ij")
        return np.stack([m.ravel() for m in mesh], axis=1)

    @property
    def multi_index(self) -> np.ndarray:
        return np.stack(np.unravel_index(np.arange(self.size), self.shape), axis=1)

    def index(self, *ijk) -> int:
        return int(np.ravel_multi_index(ijk, self.shape))

    def mask(self, *tags: Tag) -> np.ndarray:
        return np.isin(self.tags, [int(t) for t in tags])

    @property
    def unknowns(self) -> np.ndarray:
        """Indices of rows that are not fixed by Dirichlet data."""
        return np.flatnonzero(self.mask(Tag.INTERIOR, Tag.DEGENERATE))

    def sample(self, fn: Callable[[np.ndarray], np.ndarray]) -> np.ndarray:
        return np.asarray(fn(self.points), dtype=float).reshape(self.size)

    def spacing(self) -> float:
        return max(float(np.max(np.diff(a))) for a in self.axes)


def build_grid(dom: DomainSpec, n, stretch: float | None = None) -> Grid:
    """Tensor grid on ``dom``; ``stretch`` grades the last axis toward x_d = 0."""
    d = dom.dim
    n = (int(n),) * d if np.isscalar(n) else tuple(int(k) for k in n)
    if len(n) != d:
        raise ValueError(f"need {d} node counts, got {len(n)}")
    if min(n) < 3:
        raise ValueError("at least 3 nodes per axis")
    axes = []
    for k, ((lo, hi), m) in enumerate(zip(dom.bounds, n)):
        ratio = stretch if (stretch is not None and k == d - 1) else 1.0
        axes.append(graded_axis(lo, hi, m, ratio))
    mi = np.stack(np.unravel_index(np.arange(int(np.prod(n))), n), axis=1)
    on_dirichlet = np.zeros(mi.shape[0], dtype=bool)
    for k in range(d):
        if f"x{k + 1}-" in dom.dirichlet_faces:
            on_dirichlet |= mi[:, k] == 0
        if f"x{k + 1}+" in dom.dirichlet_faces:
            on_dirichlet |= mi[:, k] == n[k] - 1
    on_degen = np.zeros_like(on_dirichlet)
    if dom.degenerate_face is not None:
        on_degen = mi[:, -1] == 0
    tags = np.full(mi.shape[0], Tag.INTERIOR, dtype=np.int8)
    tags[on_degen] = Tag.DEGENERATE
    tags[on_dirichlet] = Tag.DIRICHLET
    tags[on_dirichlet & on_degen] = Tag.CORNER
    return Grid(dom, tuple(axes), tags)


# --------------------------------------------------------------- assembly


@dataclass
class MonotonicityReport:
    passed: bool
    bad_diagonal: np.ndarray
    bad_offdiagonal: np.ndarray
    bad_rowsum: np.ndarray
    max_offdiagonal: float
    min_rowsum: float

    @property
    def violating_rows(self) -> np.ndarray:
        return np.union1d(np.union1d(self.bad_diagonal, self.bad_offdiagonal), self.bad_rowsum)

    def to_dict(self) -> dict:
        return {
            "passed": bool(self.passed),
            "violating_rows": [int(r) for r in self.violating_rows],
            "max_offdiagonal": float(self.max_offdiagonal),
            "min_rowsum": float(self.min_rowsum),
        }


@dataclass
class StencilSystem:
    """Sparse difference operator; row k belongs to node k of ``grid``."""

    matrix: sp.csr_matrix
    grid: Grid
    cs: Optional[CoefficientSet] = None
    upwinded: Optional[np.ndarray] = None  # (N, d) bool, drift switched to upwind
    monotonicity: Optional[MonotonicityReport] = None

    @property
    def tags(self) -> np.ndarray:
        return self.grid.tags

    @property
    def size(self) -> int:
        return self.matrix.shape[0]

    @property
    def dirichlet(self) -> np.ndarray:
        return self.grid.mask(Tag.DIRICHLET, Tag.CORNER)

    @property
    def free(self) -> np.ndarray:
        return ~self.dirichlet

    def rhs(self, f, g=None) -> np.ndarray:
        """Right-hand side: f on equation rows, g on Dirichlet rows."""
        f = np.asarray(f, dtype=float).reshape(-1)
        if f.shape[0] != self.size:
            raise ValueError(f"field has {f.shape[0]} entries, system has {self.size} rows")
        out = f.copy()
        if g is not None:
            g = np.asarray(g, dtype=float).reshape(-1)
            if g.shape[0] != self.size:
                raise ValueError(f"field has {g.shape[0]} entries, system has {self.size} rows")
            out[self.dirichlet] = g[self.dirichlet]
        return out

    def row(self, k: int) -> dict[int, float]:
        s, e = self.matrix.indptr[k], self.matrix.indptr[k + 1]
        return dict(zip(self.matrix.indices[s:e].tolist(), self.matrix.data[s:e].tolist()))

    def apply(self, u) -> np.ndarray:
        return self.matrix @ np.asarray(u, dtype=float)

    def with_matrix(self, m) -> "StencilSystem":
        m = sp.csr_matrix(m)
        out = StencilSystem(m, self.grid, self.cs, self.upwinded)
        out.monotonicity = monotonicity_check(out)
        return out


def _second_diff(h_m: float, h_p: float) -> tuple[float, float, float]:
    """Weights (minus, center, plus) of the three-point second derivative."""
    s = h_m + h_p
    return 2.0 / (h_m * s), -2.0 / (h_m * h_p), 2.0 / (h_p * s)


def _central_first(h_m: float, h_p: float) -> tuple[float, float, float]:
    s = h_m + h_p
    return -h_p / (h_m * s), (h_p - h_m) / (h_m * h_p), h_m / (h_p * s)


def assemble_system(cs: CoefficientSet, g: Grid, *, upwind: str = "auto") -> StencilSystem:
    """Assemble the monotone difference operator for ``cs`` on ``g``.

    Interior rows: three-point second differences, the seven-point mixed
    stencil oriented by sgn(a_pq), centred drift that falls back to
    upwinding per node and axis when it would produce a positive
    off-diagonal.  ``upwind="always"`` upwinds every drift term.
    Degenerate rows: -<b, D_h u> + c u with a forward difference in x_d.
    Dirichlet and corner rows: identity.
    """
    if upwind not in ("auto", "always"):
        raise ValueError("upwind must be 'auto' or 'always'")
    if cs.dim != g.dim:
        raise AssemblyError(f"coefficient dimension {cs.dim} does not match grid dimension {g.dim}")
    pts = g.points
    try:
        a, b, c = cs.evaluate(pts)
    except Exception as exc:  # noqa: BLE001 - any failure of user callbacks
        raise AssemblyError(f"coefficients not evaluable on the grid: {exc}") from exc
    if not (np.all(np.isfinite(a)) and np.all(np.isfinite(b)) and np.all(np.isfinite(c))):
        raise AssemblyError("coefficients not finite on the grid")
    wgt = cs.weight(pts)
    shape, d = g.shape, g.dim
    mi = g.multi_index
    strides = np.array([int(np.prod(shape[k + 1:])) for k in range(d)])
    tags = g.tags
    if np.any(tags == Tag.DEGENERATE) and not cs.degenerate:
        raise AssemblyError("degenerate face present but the operator is not of degenerate type")

    rows, cols, vals = [], [], []
    upwinded = np.zeros((g.size, d), dtype=bool)

    def add(r, col, v):
        rows.append(r)
        cols.append(col)
        vals.append(v)

    for k in range(g.size):
        t = tags[k]
        if t in (Tag.DIRICHLET, Tag.CORNER):
            add(k, k, 1.0)
            continue
        idx = mi[k]
        w = {}  # column -> weight

        def put(col, v):
            w[col] = w.get(col, 0.0) + v

        put(k, c[k])
        if t == Tag.DEGENERATE:
            bd = b[k, -1]
            if not bd > 0:
                raise AssemblyError(
                    f"drift normal component b_d = {bd} <= 0 at degenerate node {k}; "
                    "the boundary condition would not be inflow")
            h = g.axes[-1][1] - g.axes[-1][0]
            put(k, bd / h)
            put(k + strides[-1], -bd / h)
            for p in range(d - 1):
                hm = g.axes[p][idx[p]] - g.axes[p][idx[p] - 1]
                hp = g.axes[p][idx[p] + 1] - g.axes[p][idx[p]]
                bp = b[k, p]
                upwinded[k, p] = True
                if bp > 0:
                    put(k, bp / hp)
                    put(k + strides[p], -bp / hp)
                elif bp < 0:
                    put(k, -bp / hm)
                    put(k - strides[p], bp / hm)
            for col, v in w.items():
                add(k, col, v)
            continue

        hms = [g.axes[p][idx[p]] - g.axes[p][idx[p] - 1] for p in range(d)]
        hps = [g.axes[p][idx[p] + 1] - g.axes[p][idx[p]] for p in range(d)]
        for p in range(d):
            wm, w0, wp = _second_diff(hms[p], hps[p])
            f = -wgt[k] * a[k, p, p]
            put(k - strides[p], f * wm)
            put(k, f * w0)
            put(k + strides[p], f * wp)
        for p in range(d):
            for q in range(p + 1, d):
                apq = a[k, p, q]
                if apq == 0.0:
                    continue
                f = -2.0 * wgt[k] * apq
                sp_, sq = strides[p], strides[q]
                hm, hp, km, kp = hms[p], hps[p], hms[q], hps[q]
                if apq > 0:
                    u1, u2 = 0.5 / (hp * kp), 0.5 / (hm * km)
                    put(k + sp_ + sq, f * u1)
                    put(k + sp_, -f * u1)
                    put(k + sq, -f * u1)
                    put(k, f * (u1 + u2))
                    put(k - sp_, -f * u2)
                    put(k - sq, -f * u2)
                    put(k - sp_ - sq, f * u2)
                else:
                    u1, u2 = 0.5 / (hp * km), 0.5 / (hm * kp)
                    put(k + sp_ - sq, -f * u1)
                    put(k + sp_, f * u1)
                    put(k - sq, f * u1)
                    put(k, -f * (u1 + u2))
                    put(k - sp_ + sq, -f * u2)
                    put(k - sp_, f * u2)
                    put(k + sq, f * u2)
        for p in range(d):
            bp = b[k, p]
            if bp == 0.0:
                continue
            cm, c0, cp = _central_first(hms[p], hps[p])
            lo, hi = k - strides[p], k + strides[p]
            central_ok = (w.get(lo, 0.0) - bp * cm <= 0.0) and (w.get(hi, 0.0) - bp * cp <= 0.0)
            if upwind == "auto" and central_ok:
                put(lo, -bp * cm)
                put(k, -bp * c0)
                put(hi, -bp * cp)
            else:
                upwinded[k, p] = True
                if bp > 0:
                    put(k, bp / hps[p])
                    put(hi, -bp / hps[p])
                else:
                    put(k, -bp / hms[p])
                    put(lo, bp / hms[p])
        for col, v in w.items():
            add(k, col, v)

    m = sp.csr_matrix((vals, (rows, cols)), shape=(g.size, g.size))
    m.sum_duplicates()
    m.sort_indices()
    out = StencilSystem(m, g, cs, upwinded)
    out.monotonicity = monotonicity_check(out)
    return out


def monotonicity_check(sys: StencilSystem, *, offdiag_tol: float = 1e-14,
                       rowsum_tol: float = 1e-12) -> MonotonicityReport:
    """Per-row M-matrix sign pattern: diag > 0, off-diag <= 0, row sum >= 0."""
    m = sys.matrix.tocsr()
    n = m.shape[0]
    diag = m.diagonal()
    rowsum = np.asarray(m.sum(axis=1)).ravel()
    off = m - sp.diags(diag)
    off = sp.csr_matrix(off)
    max_off = np.full(n, -np.inf)
    if off.nnz:
        coo = off.tocoo()
        np.maximum.at(max_off, coo.row, coo.data)
    bad_diag = np.flatnonzero(diag <= 0)
    bad_off = np.flatnonzero(max_off > offdiag_tol)
    bad_sum = np.flatnonzero(rowsum < -rowsum_tol)
    return MonotonicityReport(
        passed=bool(bad_diag.size == 0 and bad_off.size == 0 and bad_sum.size == 0),
        bad_diagonal=bad_diag,
        bad_offdiagonal=bad_off,
        bad_rowsum=bad_sum,
        max_offdiagonal=float(max_off.max()) if n else 0.0,
        min_rowsum=float(rowsum.min()) if n else 0.0,
    )


def discrete_residual(sys: StencilSystem, u, f, g=None) -> np.ndarray:
    """L_h u - f on equation rows, u - g on Dirichlet rows.

    Without ``g`` the Dirichlet data is read from ``f`` on those rows.
    """
    u = np.asarray(u, dtype=float).reshape(-1)
    if u.shape[0] != sys.size:
        raise ValueError(f"field has {u.shape[0]} entries, system has {sys.size} rows")
    return sys.apply(u) - sys.rhs(f, g)


# -------------------------------------------------------------------- CSV


def write_field_csv(path, grid: Grid, values) -> None:
    """Write a grid field as ``idx,i,j,x1,x2,tag,value`` rows."""
    values = np.asarray(values, dtype=float).reshape(-1)
    if values.shape[0] != grid.size:
        raise ValueError("field size does not match the grid")
    pts, mi = grid.points, grid.multi_index
    with open(path, "w", newline="") as fh:
        wr = csv.writer(fh, lineterminator="\n")
        wr.writerow(["idx", "i", "j", "x1", "x2", "tag", "value"])
        for k in range(grid.size):
            j = mi[k, 1] if grid.dim > 1 else 0
            x2 = pts[k, 1] if grid.dim > 1 else 0.0
            wr.writerow([k, mi[k, 0], j, format(pts[k, 0], ".17g"), format(x2, ".17g"),
                         TAG_NAMES[Tag(grid.tags[k])], format(values[k], ".17g")])


def read_field_csv(path) -> dict[str, np.ndarray]:
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    return {
        "idx": np.array([int(r["idx"]) for r in rows]),
        "i": np.array([int(r["i"]) for r in rows]),
        "j": np.array([int(r["j"]) for r in rows]),
        "x1": np.array([float(r["x1"]) for r in rows]),
        "x2": np.array([float(r["x2"]) for r in rows]),
        "tag": np.array([r["tag"] for r in rows]),
        "value": np.array([float(r["value"]) for r in rows]),
    }


def restrict_to(sys: StencilSystem, nodes: Sequence[int]) -> sp.csr_matrix:
    """Rows and columns of the operator for the given node indices."""
    nodes = np.asarray(nodes)
    return sys.matrix[nodes][:, nodes]
