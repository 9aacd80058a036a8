"""Discrete obstacle problems: payoffs, mollified obstacles, PSOR, penalization."""
from __future__ import annotations

import itertools
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from ._kernels import run_relaxation
from .bvp import SolveInfo, SolverError
from .discretization import Grid, StencilSystem


class CompatibilityError(ValueError):
    """The obstacle exceeds the Dirichlet data on a Dirichlet node."""


@dataclass
class ObstacleProblem:
    sys: StencilSystem
    f: np.ndarray
    g: np.ndarray
    psi: np.ndarray
    compat_tol: float = 1e-12

    def __post_init__(self):
        n = self.sys.size
        self.f = np.asarray(self.f, dtype=float).reshape(-1)
        self.g = np.asarray(self.g, dtype=float).reshape(-1)
        self.psi = np.asarray(self.psi, dtype=float).reshape(-1)
        for name in ("f", "g", "psi"):
            if getattr(self, name).shape[0] != n:
                raise ValueError(f"{name} must have one entry per grid node")
        d = self.sys.dirichlet
        excess = self.psi[d] - self.g[d]
        if excess.size and excess.max() > self.compat_tol:
            k = np.flatnonzero(d)[int(np.argmax(excess))]
            raise CompatibilityError(
                f"obstacle exceeds boundary data at node {k}: psi={self.psi[k]!r} > g={self.g[k]!r}")

    @property
    def rhs(self) -> np.ndarray:
        return self.sys.rhs(self.f, self.g)

    @property
    def free(self) -> np.ndarray:
        return self.sys.free

    def initial_guess(self) -> np.ndarray:
        u = self.psi.copy()
        u[self.sys.dirichlet] = self.g[self.sys.dirichlet]
        return u


# ------------------------------------------------------------------ payoffs


def payoff(kind: str, K: float, x1):
    """Put (K - e^x)^+ or call (e^x - K)^+ as a function of log-price x."""
    if not K > 0:
        raise ValueError("strike must be positive")
    s = np.exp(np.asarray(x1, dtype=float))
    if kind == "put":
        out = np.maximum(K - s, 0.0)
    elif kind == "call":
        out = np.maximum(s - K, 0.0)
    else:
        raise ValueError(f"unknown payoff kind {kind!r}")
    return float(out) if out.ndim == 0 else out


def payoff_semiconvexity(grid: Grid) -> float:
    """Constant C making put/call payoffs + C|x|^2/2 convex on the grid's box."""
    return float(np.exp(grid.axes[0].max()))


def _bump(r):
    out = np.zeros_like(r)
    inside = r < 1.0
    out[inside] = np.exp(-1.0 / (1.0 - r[inside] ** 2))
    return out


def _dual_lengths(axis: np.ndarray) -> np.ndarray:
    h = np.diff(axis)
    out = np.zeros_like(axis)
    out[:-1] += 0.5 * h
    out[1:] += 0.5 * h
    return out


def mollify_obstacle(psi, delta: float, C: float, g: Grid) -> np.ndarray:
    """psi_delta = J_delta(psi + C|x|^2/2) - C|x|^2/2 with a normalized bump of radius delta.

    The kernel is renormalized over the nodes it reaches, so near the edge
    of the grid the average is one-sided.
    """
    if not delta > 0:
        raise ValueError("delta must be positive")
    if C < 0:
        raise ValueError("the semiconvexity constant must be nonnegative")
    if delta < g.spacing():
        raise ValueError(f"kernel radius {delta} below the grid spacing {g.spacing()}: unresolved")
    psi = np.asarray(psi, dtype=float).reshape(g.shape)
    pts = g.points
    quad = 0.5 * C * np.einsum("ni,ni->n", pts, pts).reshape(g.shape)
    lifted = psi + quad
    coords = np.meshgrid(*g.axes, indexing="ij")
    vols = np.ones(g.shape)
    for k, ax in enumerate(g.axes):
        shape = [1] * g.dim
        shape[k] = -1
        vols = vols * _dual_lengths(ax).reshape(shape)
    reach = [int(np.ceil(delta / np.min(np.diff(ax)))) for ax in g.axes]
    num = np.zeros(g.shape)
    den = np.zeros(g.shape)
    for off in itertools.product(*[range(-r, r + 1) for r in reach]):
        dst = tuple(slice(max(0, -o), n - max(0, o)) for o, n in zip(off, g.shape))
        src = tuple(slice(max(0, o), n - max(0, -o)) for o, n in zip(off, g.shape))
        dist2 = sum((coords[k][src] - coords[k][dst]) ** 2 for k in range(g.dim))
        wgt = _bump(np.sqrt(dist2) / delta) * vols[src]
        num[dst] += wgt * lifted[src]
        den[dst] += wgt
    return (num / den - quad).reshape(-1)


# -------------------------------------------------------------- diagnostics


def complementarity_residual(p: ObstacleProblem, u) -> float:
    """max over equation rows of |min(r, u - psi)|, (psi - u)^+ and (-r)^+ with r = L_h u - f."""
    u = np.asarray(u, dtype=float).reshape(-1)
    if u.shape[0] != p.sys.size:
        raise ValueError("field size does not match the system")
    free = p.free
    r = (p.sys.apply(u) - p.rhs)[free]
    gap = (u - p.psi)[free]
    if r.size == 0:
        return 0.0
    return float(max(np.abs(np.minimum(r, gap)).max(), np.maximum(-gap, 0).max(), np.maximum(-r, 0).max()))


def continuation_region(u, psi, tol: float = 1e-10, free=None) -> tuple[np.ndarray, np.ndarray]:
    """Masks of the continuation set {u - psi > tol} and its complement.

    With ``free`` given both masks are restricted to those nodes.
    """
    u = np.asarray(u, dtype=float).reshape(-1)
    psi = np.asarray(psi, dtype=float).reshape(-1)
    if u.shape != psi.shape:
        raise ValueError("u and psi differ in shape")
    free = np.ones(u.shape, dtype=bool) if free is None else np.asarray(free, dtype=bool)
    cont = (u - psi > tol) & free
    return cont, free & ~cont


def active_set(p: ObstacleProblem, u, tol: float = 1e-9) -> np.ndarray:
    """Equation-row indices where the obstacle binds."""
    return np.flatnonzero(p.free & (np.asarray(u) - p.psi <= tol))


# ------------------------------------------------------------------ solvers


def solve_lcp_psor(p: ObstacleProblem, omega: float = 1.5, tol: float = 1e-10, max_iter: int = 500_000,
                   *, order: str = "lexicographic", u0=None, return_info: bool = False):
    """Projected SOR; stops when the complementarity residual is at most ``tol``."""
    if not 0.0 < omega < 2.0:
        raise ValueError("omega must lie in (0, 2)")
    n = p.sys.size
    if order == "lexicographic":
        idx = np.arange(n)
    elif order == "red-black":
        parity = p.sys.grid.multi_index.sum(axis=1) % 2
        idx = np.concatenate([np.flatnonzero(parity == 0), np.flatnonzero(parity == 1)])
    else:
        raise ValueError(f"unknown sweep order {order!r}")
    u = p.initial_guess() if u0 is None else np.array(u0, dtype=float)
    u[p.sys.dirichlet] = p.g[p.sys.dirichlet]
    it, res, hist = run_relaxation(p.sys.matrix, p.rhs, u, p.free, psi=p.psi, omega=omega, tol=tol,
                                   max_iter=max_iter, order=idx)
    if res > tol:
        raise SolverError(f"PSOR did not reach {tol:g} in {max_iter} sweeps (residual {res:.3e})",
                          hist.tolist())
    info = SolveInfo("psor", it, res, hist.tolist())
    return (u, info) if return_info else u


def solve_lcp_policy(p: ObstacleProblem, *, max_iter: int = 200, u0=None, return_info: bool = False):
    """Policy iteration on min(L_h u - f, u - psi) = 0.

    Each step fixes u = psi on rows where the obstacle term is smaller and
    solves the remaining equations; for M-matrices the iteration terminates
    with the exact LCP solution.
    """
    m = p.sys.matrix.tocsr()
    n = m.shape[0]
    rhs = p.rhs
    free = p.free
    u = p.initial_guess() if u0 is None else np.array(u0, dtype=float)
    eye = sp.identity(n, format="csr")
    binding = np.zeros(n, dtype=bool)
    history = []
    for it in range(max_iter):
        r = m @ u - rhs
        new = free & (u - p.psi < r)
        if it > 0 and np.array_equal(new, binding):
            break
        binding = new
        keep = sp.diags((~binding).astype(float))
        mat = keep @ m + sp.diags(binding.astype(float)) @ eye
        b = np.where(binding, p.psi, rhs)
        u = spla.spsolve(mat.tocsc(), b)
        history.append(int(binding.sum()))
    else:
        raise SolverError("policy iteration did not settle", history)
    res = complementarity_residual(p, u)
    info = SolveInfo("policy", len(history), res, history)
    return (u, info) if return_info else u


@dataclass(frozen=True)
class PenaltySpec:
    epsilon: float

    def __post_init__(self):
        if not self.epsilon > 0:
            raise ValueError("epsilon must be positive")

    def beta(self, t):
        t = np.asarray(t, dtype=float)
        e = self.epsilon
        return (t - np.hypot(t, e)) / (2.0 * e)

    def dbeta(self, t):
        t = np.asarray(t, dtype=float)
        e = self.epsilon
        return (1.0 - t / np.hypot(t, e)) / (2.0 * e)


DEFAULT_EPS = (1e-2, 1e-3, 1e-4, 1e-5, 1e-6)


def solve_penalized(p: ObstacleProblem, eps_schedule=DEFAULT_EPS, tol: float = 1e-10, *,
                    max_newton: int = 100, u0=None, return_trace: bool = False):
    """Solve L_h u + beta_eps(u - psi) = f along a decreasing eps schedule.

    Damped Newton with Jacobian L_h + diag(beta_eps'), warm-started from the
    previous eps.  Returns the iterate for the last eps (and the per-eps
    iterates when ``return_trace``).
    """
    eps = list(eps_schedule)
    if not eps or any(e <= 0 for e in eps) or any(b >= a for a, b in zip(eps, eps[1:])):
        raise ValueError("eps schedule must be positive and strictly decreasing")
    m = p.sys.matrix.tocsr()
    rhs = p.rhs
    free = p.free.astype(float)
    dirichlet = p.sys.dirichlet
    u = p.initial_guess() if u0 is None else np.array(u0, dtype=float)
    u[dirichlet] = p.g[dirichlet]
    trace = []

    for e in eps:
        pen = PenaltySpec(e)

        def F(v):
            return m @ v + free * pen.beta(v - p.psi) - rhs

        res = F(u)
        norm = np.abs(res).max()
        for _ in range(max_newton):
            if norm <= tol:
                break
            jac = m + sp.diags(free * pen.dbeta(u - p.psi))
            step = spla.spsolve(jac.tocsc(), -res)
            lam = 1.0
            while lam > 1e-12:
                trial = u + lam * step
                tres = F(trial)
                tnorm = np.abs(tres).max()
                if tnorm < (1.0 - 1e-4 * lam) * norm or tnorm <= tol:
                    break
                lam *= 0.5
            else:
                raise SolverError(f"Newton line search failed at eps={e:g} (residual {norm:.3e})", [norm])
            u, res, norm = trial, tres, tnorm
        else:
            if norm > tol:
                raise SolverError(f"Newton did not converge at eps={e:g} (residual {norm:.3e})", [norm])
        trace.append(u.copy())
    return (u, trace) if return_trace else u
