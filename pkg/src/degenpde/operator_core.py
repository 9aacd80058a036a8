"""Degenerate-elliptic operator family and the Heston instance.

The operator acts on smooth functions of x = (x_1, ..., x_d) in the closed
upper half-space as

    A v = -x_d tr(a D^2 v) - <b, D v> + c v,

so the principal part switches off on the face x_d = 0.  Coefficients are
plain evaluation callbacks working on point batches of shape (n, d); the
scalar bounds the theory talks about live in :class:`Bounds`.
"""
from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Callable, Optional

import numpy as np

ArrayFn = Callable[[np.ndarray], np.ndarray]


class InvalidParameterError(ValueError):
    pass


@dataclass(frozen=True)
class Bounds:
    """Declared coefficient constants; ``None`` means not declared."""

    lambda0: Optional[float] = None  # <a xi, xi> >= lambda0 |xi|^2
    Lambda: Optional[float] = None  # a^{dd} <= Lambda
    b0: Optional[float] = None  # b^d >= b0 on the degenerate face
    c0: Optional[float] = None  # c >= c0
    nu: Optional[float] = None  # height of the domain
    K: Optional[float] = None  # tr(x_d a) + <b, x> <= K (1 + |x|^2)

    def declared(self) -> dict[str, float]:
        return {k: v for k, v in self.__dict__.items() if v is not None}


@dataclass(frozen=True)
class CoefficientSet:
    """Coefficients (a, b, c) of the operator plus declared bounds.

    ``a``, ``b`` and ``c`` map an (n, d) array of points to arrays of shape
    (n, d, d), (n, d) and (n,).  When ``degenerate`` is False the x_d factor
    in front of the principal part is dropped, which gives the strictly
    elliptic operators used for patch tests and 1D toys.
    """

    dim: int
    a: ArrayFn
    b: ArrayFn
    c: ArrayFn
    bounds: Bounds = field(default_factory=Bounds)
    degenerate: bool = True
    gauge: float = 0.0
    label: str = ""

    def __post_init__(self) -> None:
        if self.dim < 1:
            raise InvalidParameterError(f"dim must be >= 1, got {self.dim}")

    def points(self, x) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        if x.ndim == 1:
            x = x.reshape(1, -1) if x.size == self.dim else x.reshape(-1, 1)
        if x.shape[-1] != self.dim:
            raise ValueError(f"points must have {self.dim} columns, got shape {x.shape}")
        return x

    def evaluate(self, x) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        x = self.points(x)
        n = x.shape[0]
        a = np.broadcast_to(np.asarray(self.a(x), dtype=float), (n, self.dim, self.dim))
        b = np.broadcast_to(np.asarray(self.b(x), dtype=float), (n, self.dim))
        c = np.broadcast_to(np.asarray(self.c(x), dtype=float), (n,))
        return a, b, c

    def weight(self, x: np.ndarray) -> np.ndarray:
        """Factor multiplying tr(a D^2 v): x_d, or 1 for the elliptic variant."""
        x = self.points(x)
        return x[:, -1].copy() if self.degenerate else np.ones(x.shape[0])


def constant_coefficients(a, b, c, bounds: Bounds | None = None, *, degenerate: bool = True,
                          label: str = "") -> CoefficientSet:
    """Coefficient set with spatially constant a, b, c."""
    a = np.atleast_2d(np.asarray(a, dtype=float))
    b = np.atleast_1d(np.asarray(b, dtype=float))
    d = b.shape[0]
    if a.shape != (d, d):
        raise InvalidParameterError(f"a has shape {a.shape}, expected {(d, d)}")
    c = float(c)
    return CoefficientSet(
        dim=d,
        a=lambda x: np.broadcast_to(a, (x.shape[0], d, d)),
        b=lambda x: np.broadcast_to(b, (x.shape[0], d)),
        c=lambda x: np.full(x.shape[0], c),
        bounds=bounds or Bounds(),
        degenerate=degenerate,
        label=label,
    )


# ---------------------------------------------------------------- Heston


@dataclass(frozen=True)
class HestonParams:
    sigma: float
    rho: float
    kappa: float
    theta: float
    r: float = 0.0
    q: float = 0.0

    def validate(self) -> None:
        problems = []
        if not np.isfinite(self.sigma) or self.sigma <= 0:
            problems.append(f"sigma must be > 0 (got {self.sigma})")
        if not -1.0 < self.rho < 1.0:
            problems.append(f"rho must lie in (-1, 1) (got {self.rho})")
        if not self.kappa > 0:
            problems.append(f"kappa must be > 0 (got {self.kappa})")
        if not self.theta > 0:
            problems.append(f"theta must be > 0 (got {self.theta})")
        if not (np.isfinite(self.r) and np.isfinite(self.q)):
            problems.append("r and q must be finite")
        if problems:
            raise InvalidParameterError("; ".join(problems))


def ellipticity_floor(p: HestonParams) -> float:
    """Smaller eigenvalue of [[1, rho sigma], [rho sigma, sigma^2]].

    This is the ellipticity constant of the unscaled Heston diffusion matrix;
    the operator itself carries an extra factor 1/2, see
    :func:`heston_coefficients`.
    """
    p.validate()
    s2 = p.sigma ** 2
    disc = 1.0 - 2.0 * s2 + 4.0 * p.rho ** 2 * s2 + s2 ** 2
    # (1 + s2 - sqrt(disc)) / 2 cancels badly for small sigma; use the product of roots.
    big = 0.5 * (1.0 + s2 + np.sqrt(disc))
    det = s2 * (1.0 - p.rho ** 2)
    return float(det / big)


def heston_coefficients(p: HestonParams) -> CoefficientSet:
    """Coefficients of the elliptic Heston operator in (log-price, variance).

    a = 1/2 [[1, rho sigma], [rho sigma, sigma^2]],
    b = (r - q - x_2/2, kappa (theta - x_2)),  c = r.
    """
    p.validate()
    a = 0.5 * np.array([[1.0, p.rho * p.sigma], [p.rho * p.sigma, p.sigma ** 2]])

    def b(x):
        out = np.empty((x.shape[0], 2))
        out[:, 0] = p.r - p.q - 0.5 * x[:, 1]
        out[:, 1] = p.kappa * (p.theta - x[:, 1])
        return out

    # tr(x_2 a) + <b, x> <= K (1 + |x|^2) on x_2 >= 0, term by term:
    # |r-q| |x1| <= |r-q|(1+x1^2)/2, |x1 x2|/2 <= (x1^2+x2^2)/4,
    # x2 (1+s^2)/2 <= (1+s^2)(1+x2^2)/4, kappa theta x2 <= kappa theta (1+x2^2)/2.
    K = 0.5 * abs(p.r - p.q) + 0.25 + 0.25 * (1.0 + p.sigma ** 2) + 0.5 * p.kappa * p.theta
    bounds = Bounds(
        lambda0=0.5 * ellipticity_floor(p),
        Lambda=0.5 * p.sigma ** 2,
        b0=p.kappa * p.theta,
        c0=p.r if p.r > 0 else None,
        K=K,
    )
    return CoefficientSet(
        dim=2,
        a=lambda x: np.broadcast_to(a, (x.shape[0], 2, 2)),
        b=b,
        c=lambda x: np.full(x.shape[0], float(p.r)),
        bounds=bounds,
        label="heston",
    )


# -------------------------------------------------------------- conditions


@dataclass
class ConditionEntry:
    id: str
    holds: bool
    margin: float
    witness: Optional[np.ndarray]

    def to_dict(self) -> dict:
        return {
            "id": self.id,
            "holds": bool(self.holds),
            "margin": float(self.margin),
            "witness": None if self.witness is None else [float(v) for v in self.witness],
        }


@dataclass
class ConditionReport:
    entries: dict[str, ConditionEntry]

    def __getitem__(self, key: str) -> ConditionEntry:
        return self.entries[key]

    def __contains__(self, key: str) -> bool:
        return key in self.entries

    @property
    def all_hold(self) -> bool:
        return all(e.holds for e in self.entries.values())

    def failed(self) -> list[str]:
        return [k for k, e in self.entries.items() if not e.holds]

    def to_dict(self) -> dict:
        return {k: e.to_dict() for k, e in self.entries.items()}


# which declared bound feeds which check
BOUND_CHECKS = {
    "lambda0": ("strict_ellipticity",),
    "Lambda": ("upper_bound_add",),
    "b0": ("lower_bound_bd_boundary", "lower_bound_bd_domain"),
    "c0": ("lower_bound_c",),
    "nu": ("finite_height",),
    "K": ("quadratic_growth",),
}


def _entry(cid, values, points, threshold, strict=False) -> ConditionEntry:
    k = int(np.argmin(values))
    margin = float(values[k])
    ok = margin > threshold if strict else margin >= threshold
    return ConditionEntry(cid, bool(ok), margin, points[k].copy())


def verify_conditions(cs: CoefficientSet, dom=None, samples=None, *, boundary_tol: float = 1e-14,
                      ell_tol: float = 1e-12) -> ConditionReport:
    """Sampled check of the coefficient conditions.

    Margins are reported so that ``holds`` is equivalent to ``margin >= 0``
    (``> 0`` for the strict positivity conditions).  Boundary conditions on
    b^d and c are evaluated only at samples with x_d = 0.  ``dom`` may be any
    object with a ``height`` attribute; it is used for the finite-height check.
    """
    if samples is None:
        raise ValueError("empty sample set")
    x = cs.points(samples)
    if x.shape[0] == 0:
        raise ValueError("empty sample set")
    a, b, c = cs.evaluate(x)
    d = cs.dim
    bd = np.abs(x[:, -1]) <= boundary_tol
    bnd = cs.bounds
    out: dict[str, ConditionEntry] = {}

    asym = np.abs(a - np.swapaxes(a, 1, 2)).reshape(x.shape[0], -1).max(axis=1)
    out["symmetry"] = _entry("symmetry", 1e-14 - asym, x, 0.0)
    out["nonnegative_c"] = _entry("nonnegative_c", c, x, 0.0)
    if bd.any():
        out["nonnegative_bd_boundary"] = _entry("nonnegative_bd_boundary", b[bd, -1], x[bd], 0.0)
        out["positive_bd_boundary"] = _entry("positive_bd_boundary", b[bd, -1], x[bd], 0.0, strict=True)
        out["positive_c_boundary"] = _entry("positive_c_boundary", c[bd], x[bd], 0.0, strict=True)

    if bnd.lambda0 is not None:
        eig = np.linalg.eigvalsh(0.5 * (a + np.swapaxes(a, 1, 2)))[:, 0]
        out["strict_ellipticity"] = _entry("strict_ellipticity", eig - bnd.lambda0, x, -ell_tol)
    if bnd.Lambda is not None:
        out["upper_bound_add"] = _entry("upper_bound_add", bnd.Lambda - a[:, d - 1, d - 1], x, 0.0)
    if bnd.b0 is not None:
        if bd.any():
            out["lower_bound_bd_boundary"] = _entry(
                "lower_bound_bd_boundary", b[bd, -1] - bnd.b0, x[bd], 0.0)
        else:
            out["lower_bound_bd_boundary"] = ConditionEntry("lower_bound_bd_boundary", False, -np.inf, None)
        out["lower_bound_bd_domain"] = _entry("lower_bound_bd_domain", b[:, -1] - bnd.b0, x, 0.0)
    if bnd.c0 is not None:
        out["lower_bound_c"] = _entry("lower_bound_c", c - bnd.c0, x, 0.0)
    if bnd.nu is not None:
        heights = bnd.nu - x[:, -1]
        entry = _entry("finite_height", heights, x, 0.0)
        dom_height = getattr(dom, "height", None)
        if dom_height is not None and bnd.nu - dom_height < entry.margin:
            entry = ConditionEntry("finite_height", bnd.nu - dom_height >= 0, bnd.nu - dom_height, None)
        out["finite_height"] = entry
    if bnd.K is not None:
        growth = np.einsum("nii->n", a) * x[:, -1] + np.einsum("ni,ni->n", b, x)
        out["quadratic_growth"] = _entry(
            "quadratic_growth", bnd.K * (1.0 + np.einsum("ni,ni->n", x, x)) - growth, x, 0.0)
        if bnd.c0 is not None:
            m = bnd.c0 - 2.0 * bnd.K
            out["strong_quadratic_growth"] = ConditionEntry("strong_quadratic_growth", m >= 0, m, None)
    return ConditionReport(out)


# ------------------------------------------------------------------ gauge


def exponential_gauge(cs: CoefficientSet, sigma_gauge: float) -> CoefficientSet:
    """Coefficients of the operator conjugated by v = exp(sigma x_d) u.

    The returned set satisfies  A~(e^{s x_d} u) = e^{s x_d} A u  with
    a~ = a,  b~^i = b^i - 2 s x_d a^{id},  c~ = c + s b^d - s^2 x_d a^{dd}.
    """
    s = float(sigma_gauge)
    if s < 0:
        raise InvalidParameterError("sigma_gauge must be >= 0")
    if s == 0.0:
        return cs
    if not cs.degenerate:
        raise InvalidParameterError("the exponential gauge is defined for the degenerate family only")

    def b(x):
        a_ = np.asarray(cs.a(x), dtype=float)
        out = np.array(cs.b(x), dtype=float, copy=True)
        return out - 2.0 * s * x[:, -1:] * a_[:, :, -1]

    def c(x):
        a_ = np.asarray(cs.a(x), dtype=float)
        b_ = np.asarray(cs.b(x), dtype=float)
        return np.asarray(cs.c(x), dtype=float) + s * b_[:, -1] - s * s * x[:, -1] * a_[:, -1, -1]

    bnd = replace(cs.bounds, c0=None, K=None)
    return replace(cs, b=b, c=c, bounds=bnd, gauge=cs.gauge + s, label=f"{cs.label}+gauge({s:g})")


def gauge_field(values: np.ndarray, x: np.ndarray, sigma_gauge: float) -> np.ndarray:
    return np.asarray(values) * np.exp(sigma_gauge * np.asarray(x)[:, -1])


def ungauge_field(values: np.ndarray, x: np.ndarray, sigma_gauge: float) -> np.ndarray:
    return np.asarray(values) * np.exp(-sigma_gauge * np.asarray(x)[:, -1])


def apply_operator_pointwise(cs: CoefficientSet, value, gradient, hessian, x) -> np.ndarray:
    """Evaluate A u from u, Du, D^2u supplied at a batch of points."""
    x = cs.points(x)
    n = x.shape[0]
    value = np.broadcast_to(np.asarray(value, dtype=float), (n,))
    gradient = np.asarray(gradient, dtype=float).reshape(n, cs.dim)
    hessian = np.asarray(hessian, dtype=float).reshape(n, cs.dim, cs.dim)
    a, b, c = cs.evaluate(x)
    second = np.einsum("nij,nji->n", a, hessian)
    return -cs.weight(x) * second - np.einsum("ni,ni->n", b, gradient) + c * value
