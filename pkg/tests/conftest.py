import numpy as np
import pytest

from degenpde.bvp import ManufacturedSolution
from degenpde.operator_core import HestonParams, heston_coefficients

# parameter set used by the Perron and convergence checks
HESTON = HestonParams(sigma=0.5, rho=-0.3, kappa=2.0, theta=0.3, r=0.05, q=0.0)


def sin_times_square():
    """u = sin(x1) x2^2 with hand-written derivatives."""

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


@pytest.fixture
def heston():
    return heston_coefficients(HESTON)


@pytest.fixture
def rng():
    return np.random.default_rng(20261016)


# ------------------------------------------------------- acceptance verdicts

CRITERIA = {
    1: "transform round trip",
    2: "boundary faces map to slab faces",
    3: "pullback coefficients",
    4: "manufactured-solution convergence",
    5: "maximum-principle bounds",
    6: "exponential gauge consistency",
    7: "LCP solvers against enumeration",
    8: "Perron sweep for the boundary value problem",
    9: "Perron sweep for the perpetual put",
    10: "boundary regularity diagnostic",
    11: "negative controls and fault injection",
}
VERDICTS: dict[int, list] = {}


def record(number: int, part: str, passed: bool, detail: str) -> None:
    """Store one checked part of an acceptance criterion, then assert it."""
    VERDICTS.setdefault(number, []).append((part, bool(passed), detail))
    assert passed, f"{part}: {detail}"


def pytest_terminal_summary(terminalreporter):
    if not VERDICTS:
        return
    tr = terminalreporter
    tr.section("acceptance criteria")
    for k, title in CRITERIA.items():
        parts = VERDICTS.get(k)
        if not parts:
            tr.line(f"[{k:>2}] {title}: NOT RUN")
            continue
        ok = all(p[1] for p in parts)
        tr.line(f"[{k:>2}] {title}: {'PASS' if ok else 'FAIL'}")
        for part, passed, detail in parts:
            tr.line(f"       {'ok ' if passed else 'BAD'} {part}: {detail}")
