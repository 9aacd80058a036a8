"""Compiled relaxation sweeps over CSR matrices."""
from __future__ import annotations

import numpy as np
from numba import njit


@njit(cache=True)
def _lcp_residual(indptr, indices, data, rhs, u, free, psi, projected):
    worst = 0.0
    for i in range(u.shape[0]):
        if not free[i]:
            continue
        r = -rhs[i]
        for p in range(indptr[i], indptr[i + 1]):
            r += data[p] * u[indices[p]]
        if projected:
            gap = u[i] - psi[i]
            m = abs(min(r, gap))
            if -gap > m:
                m = -gap
            if -r > m:
                m = -r
        else:
            m = abs(r)
        if m > worst:
            worst = m
    return worst


@njit(cache=True)
def relax(indptr, indices, data, rhs, u, free, order, psi, projected, omega, tol, max_iter, history):
    """(Projected) SOR until the residual drops to ``tol``.

    ``u`` is updated in place.  Returns (sweeps, final residual); the
    residual after each sweep is written to ``history``.
    """
    res = _lcp_residual(indptr, indices, data, rhs, u, free, psi, projected)
    if res <= tol:
        return 0, res
    for it in range(max_iter):
        for oi in range(order.shape[0]):
            i = order[oi]
            if not free[i]:
                continue
            diag = 0.0
            s = rhs[i]
            for p in range(indptr[i], indptr[i + 1]):
                j = indices[p]
                if j == i:
                    diag += data[p]
                else:
                    s -= data[p] * u[j]
            new = (1.0 - omega) * u[i] + omega * s / diag
            if projected and new < psi[i]:
                new = psi[i]
            u[i] = new
        res = _lcp_residual(indptr, indices, data, rhs, u, free, psi, projected)
        if it < history.shape[0]:
            history[it] = res
        if res <= tol:
            return it + 1, res
    return max_iter, res


def run_relaxation(matrix, rhs, u, free, *, psi=None, omega=1.5, tol=1e-10, max_iter=100_000,
                   order=None):
    m = matrix.tocsr()
    n = m.shape[0]
    projected = psi is not None
    psi_arr = np.asarray(psi, dtype=float) if projected else np.zeros(n)
    order = np.arange(n, dtype=np.int64) if order is None else np.asarray(order, dtype=np.int64)
    history = np.full(min(max_iter, 100_000), np.nan)
    it, res = relax(m.indptr.astype(np.int64), m.indices.astype(np.int64), m.data.astype(float),
                    np.asarray(rhs, dtype=float), u, np.asarray(free, dtype=np.bool_), order,
                    psi_arr, projected, float(omega), float(tol), int(max_iter), history)
    return int(it), float(res), history[:min(it, history.shape[0])]
