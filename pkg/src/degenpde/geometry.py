"""Half-ball to slab diffeomorphism, coefficient pullback, cycloidal metric.

The map is the d-dimensional version of  z -> Log((1+z)/(1-z)):

    xi(x) = ((1 - |x|^2) e_1 + 2 (x - x_1 e_1)) / |e_1 - x|^2
    w_1 = ln |(xi_1, xi_d)|,  w_d = arg(xi_1 + i xi_d),  w_j = xi_j  (1 < j < d)

It sends the open unit half-ball onto R^{d-1} x (0, pi/2), the flat face to
w_d = 0 and the hemisphere to w_d = pi/2.  Points on the corner sphere
{|x| = 1, x_d = 0} go to infinity and are rejected.

Arrays of points always carry coordinates along the last axis.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .operator_core import CoefficientSet

CORNER_TOL = 1e-9


class CornerPointError(ValueError):
    """Point too close to the corner sphere, where the map diverges."""


def _as_points(x, d: int | None = None) -> tuple[np.ndarray, bool]:
    x = np.asarray(x, dtype=float)
    single = x.ndim == 1
    x = np.atleast_2d(x)
    if d is not None and x.shape[1] != d:
        raise ValueError(f"expected {d} coordinates, got {x.shape[1]}")
    if x.shape[1] < 2:
        raise ValueError("dimension must be at least 2")
    return x, single


def _check_half_ball(x: np.ndarray) -> None:
    if np.any(x[:, -1] < -1e-15) or np.any(np.einsum("ni,ni->n", x, x) > 1.0 + 1e-12):
        raise ValueError("point outside the closed unit half-ball")
    tangential = np.sqrt(np.einsum("ni,ni->n", x[:, :-1], x[:, :-1]))
    dist = np.hypot(tangential - 1.0, x[:, -1])
    if np.any(dist < CORNER_TOL):
        k = int(np.argmin(dist))
        raise CornerPointError(f"point {x[k].tolist()} lies within {CORNER_TOL} of the corner sphere")


def _xi(x: np.ndarray) -> np.ndarray:
    den = np.sum((x - np.eye(x.shape[1])[0]) ** 2, axis=1)
    xi = 2.0 * x / den[:, None]
    xi[:, 0] = (1.0 - np.einsum("ni,ni->n", x, x)) / den
    return xi


def forward_map(x, d: int | None = None) -> np.ndarray:
    """w = Phi(x) for points of the closed half-ball minus the corner sphere."""
    x, single = _as_points(x, d)
    _check_half_ball(x)
    xi = _xi(x)
    w = xi.copy()
    w[:, 0] = np.log(np.hypot(xi[:, 0], xi[:, -1]))
    w[:, -1] = np.arctan2(xi[:, -1], xi[:, 0])
    return w[0] if single else w


def inverse_map(w, d: int | None = None) -> np.ndarray:
    """x = Phi^{-1}(w); for d = 2 this is z = (e^W - 1)/(e^W + 1), W = w_1 + i w_2."""
    w, single = _as_points(w, d)
    if not np.all(np.isfinite(w)):
        raise ValueError("w must be finite")
    r = np.exp(w[:, 0])
    xi = w.copy()
    xi[:, 0] = r * np.cos(w[:, -1])
    xi[:, -1] = r * np.sin(w[:, -1])
    shifted = xi.copy()
    shifted[:, 0] += 1.0
    den = np.einsum("ni,ni->n", shifted, shifted)
    x = 2.0 * xi / den[:, None]
    x[:, 0] = (np.einsum("ni,ni->n", xi, xi) - 1.0) / den
    return x[0] if single else x


def jacobian(x, d: int | None = None) -> tuple[np.ndarray, np.ndarray]:
    """First and second derivatives of w = Phi(x).

    Returns ``J`` with J[..., k, i] = dw_k/dx_i and ``H`` with
    H[..., k, i, j] = d^2 w_k / dx_i dx_j.
    """
    x, single = _as_points(x, d)
    _check_half_ball(x)
    n, d = x.shape
    eye = np.eye(d)
    e1 = eye[0]

    # xi_a = N_a / Q with N_1 = 1 - |x|^2, N_j = 2 x_j and Q = |e_1 - x|^2
    Q = np.sum((x - e1) ** 2, axis=1)
    dQ = 2.0 * (x - e1)
    N = 2.0 * x
    N[:, 0] = 1.0 - np.einsum("ni,ni->n", x, x)
    dN = np.broadcast_to(2.0 * eye, (n, d, d)).copy()
    dN[:, 0, :] = -2.0 * x
    d2N = np.zeros((d, d, d))
    d2N[0] = -2.0 * eye

    xi = N / Q[:, None]
    Qi = 1.0 / Q
    dxi = (dN - xi[:, :, None] * dQ[:, None, :]) * Qi[:, None, None]
    cross = dN[:, :, :, None] * dQ[:, None, None, :] + dN[:, :, None, :] * dQ[:, None, :, None]
    d2xi = (
        d2N[None] * Qi[:, None, None, None]
        - cross * (Qi ** 2)[:, None, None, None]
        - N[:, :, None, None] * (2.0 * eye)[None, None] * (Qi ** 2)[:, None, None, None]
        + 2.0 * N[:, :, None, None] * (dQ[:, None, :, None] * dQ[:, None, None, :]) * (Qi ** 3)[:, None, None, None]
    )

    # w as a function of xi: only (w_1, w_d) depend nonlinearly on (xi_1, xi_d)
    p, q = xi[:, 0], xi[:, -1]
    R2 = p * p + q * q
    R4 = R2 * R2
    G = np.broadcast_to(eye, (n, d, d)).copy()
    G[:, 0, :] = 0.0
    G[:, -1, :] = 0.0
    G[:, 0, 0], G[:, 0, -1] = p / R2, q / R2
    G[:, -1, 0], G[:, -1, -1] = -q / R2, p / R2
    GG = np.zeros((n, d, d, d))
    A = (q * q - p * p) / R4
    B = 2.0 * p * q / R4
    GG[:, 0, 0, 0], GG[:, 0, -1, -1] = A, -A
    GG[:, 0, 0, -1] = GG[:, 0, -1, 0] = -B
    GG[:, -1, 0, 0], GG[:, -1, -1, -1] = B, -B
    GG[:, -1, 0, -1] = GG[:, -1, -1, 0] = A

    J = np.einsum("nka,nai->nki", G, dxi)
    H = np.einsum("nka,naij->nkij", G, d2xi) + np.einsum("nkab,nai,nbj->nkij", GG, dxi, dxi)
    if single:
        return J[0], H[0]
    return J, H


def _xd_over_wd(x: np.ndarray, w: np.ndarray) -> np.ndarray:
    # x_d = (1 - |x|^2) tan(w_d) / 2, which stays accurate as w_d -> 0
    t = w[:, -1]
    small = np.abs(t) < 1e-6
    safe = np.where(small, 1.0, t)
    ratio = np.where(small, 1.0 + t * t / 3.0, np.tan(safe) / safe)
    return 0.5 * (1.0 - np.einsum("ni,ni->n", x, x)) * ratio


@dataclass
class PullbackResult:
    """Coefficients of the slab operator  -w_d tr(a~ D^2 v) - <b~, Dv> + c~ v."""

    tilde_a: np.ndarray
    tilde_b: np.ndarray
    tilde_c: np.ndarray
    at_w: np.ndarray


def pullback_coefficients(cs: CoefficientSet, w, *, drift: str = "chain") -> PullbackResult:
    """Transport the operator's coefficients to the slab.

    With J = dw/dx and H the second derivatives of w,

        a~ = (x_d / w_d) J a J^T,
        b~_k = b^i J_ki + x_d a^{ij} H_kij,
        c~ = c o Phi^{-1}.

    ``drift="no_jacobian"`` replaces the first term of b~ by b^k itself; it
    is kept for comparison only and does not give an operator equivalent to
    the original one.
    """
    if drift not in ("chain", "no_jacobian"):
        raise ValueError(f"unknown drift variant {drift!r}")
    w, single = _as_points(w, cs.dim)
    x = inverse_map(w)
    J, H = jacobian(x)
    a, b, c = cs.evaluate(x)
    ratio = _xd_over_wd(x, w)
    ta = ratio[:, None, None] * np.einsum("nki,nij,nlj->nkl", J, a, J)
    second = x[:, -1][:, None] * np.einsum("nij,nkij->nk", a, H)
    if drift == "chain":
        tb = np.einsum("nki,ni->nk", J, b) + second
    else:
        tb = b + second
    tc = np.array(c, copy=True)
    res = PullbackResult(ta, tb, tc, w)
    if single:
        return PullbackResult(ta[0], tb[0], tc[0], w[0])
    return res


# ------------------------------------------------------------ 2D closed form


@dataclass
class ClosedForm2D:
    """Closed-form strip coefficients for -y(u_xx + u_yy) - b.Du + c u.

    ``laplace_factor`` is the coefficient multiplying -(v_ss + v_tt), which
    should equal theta * a~.
    """

    x: float
    y: float
    D: float
    s_x: float
    s_y: float
    laplace_factor: float
    tilde_b: np.ndarray
    tilde_c: float


def model2d_closed_form(b1: float, b2: float, c: float, s: float, theta: float) -> ClosedForm2D:
    """Reference closed forms for the model operator on the strip.

    Several of these disagree with the exact map (y lacks a factor e^s, and
    so do the drift and Laplacian factors); they are kept unreconciled so
    that ``closed_form_deltas`` can measure the disagreement.
    """
    den = 1.0 + 2.0 * np.exp(s) * np.cos(theta) + np.exp(2.0 * s)
    x = (np.exp(2.0 * s) - 1.0) / den
    y = 2.0 * np.sin(theta) / den
    D = 4.0 / den
    s_x = 2.0 * np.cos(theta) / D + np.sin(theta) ** 2
    s_y = -2.0 * x * np.sin(theta) / D
    lap = np.sin(theta) ** 2 / (2.0 * y * np.exp(4.0 * s))
    tb = np.array([
        b1 * (2.0 * np.cos(theta) / D + np.sin(theta) ** 2) - b2 * (2.0 * x * np.sin(theta) / D),
        b1 * (2.0 * x * np.sin(theta) / D) + b2 * (2.0 * np.cos(theta) / D + np.sin(theta) ** 2),
    ])
    return ClosedForm2D(float(x), float(y), float(D), float(s_x), float(s_y), float(lap), tb, float(c))


def model2d_operator(b1: float, b2: float, c: float) -> CoefficientSet:
    from .operator_core import constant_coefficients

    return constant_coefficients(np.eye(2), [b1, b2], c, label="model2d")


def closed_form_deltas(b1: float, b2: float, c: float, s: float, theta: float) -> dict[str, float]:
    """Differences between the closed forms and the chain-rule pullback at (s, theta)."""
    cf = model2d_closed_form(b1, b2, c, s, theta)
    w = np.array([s, theta])
    pb = pullback_coefficients(model2d_operator(b1, b2, c), w)
    x = inverse_map(w)
    J, _ = jacobian(x)
    return {
        "x": cf.x - x[0],
        "y": cf.y - x[1],
        "s_x": cf.s_x - J[0, 0],
        "s_y": cf.s_y - J[0, 1],
        "laplace_factor": cf.laplace_factor - theta * pb.tilde_a[0, 0],
        "b1": cf.tilde_b[0] - pb.tilde_b[0],
        "b2": cf.tilde_b[1] - pb.tilde_b[1],
        "c": cf.tilde_c - pb.tilde_c,
    }


# ------------------------------------------------------- cycloidal metric


def cycloidal_distance(x, y) -> np.ndarray | float:
    """s(x, y) = |x - y| / sqrt(x_d + y_d + |x - y|), vectorized over leading axes."""
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    r = np.linalg.norm(x - y, axis=-1)
    den = np.sqrt(x[..., -1] + y[..., -1] + r)
    out = np.divide(r, den, out=np.zeros_like(r), where=den > 0)
    return float(out) if out.ndim == 0 else out


def holder_seminorm(f, g, alpha: float, *, max_pairs: int = 1_000_000, seed: int = 0) -> float:
    """max |f(x) - f(y)| / s(x, y)^alpha over distinct node pairs.

    ``g`` is a grid (anything with a ``points`` array) or an (n, d) array of
    nodes.  Above ``max_pairs`` pairs a seeded random subsample is used.
    """
    if not 0.0 < alpha < 1.0:
        raise ValueError("alpha must lie in (0, 1)")
    pts = np.asarray(getattr(g, "points", g), dtype=float)
    vals = np.asarray(f, dtype=float).ravel()
    n = pts.shape[0]
    if n < 2:
        raise ValueError("need at least two nodes")
    if vals.shape[0] != n:
        raise ValueError("field and grid sizes differ")
    total = n * (n - 1) // 2
    if total <= max_pairs:
        i, j = np.triu_indices(n, k=1)
    else:
        rng = np.random.default_rng(seed)
        i = rng.integers(0, n, size=max_pairs)
        j = rng.integers(0, n - 1, size=max_pairs)
        j = np.where(j >= i, j + 1, j)
    best = 0.0
    chunk = 200_000
    for k in range(0, i.shape[0], chunk):
        a, b = i[k:k + chunk], j[k:k + chunk]
        s = cycloidal_distance(pts[a], pts[b])
        q = np.abs(vals[a] - vals[b]) / s ** alpha
        best = max(best, float(q.max()))
    return best
