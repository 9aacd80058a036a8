import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from degenpde.geometry import (CornerPointError, closed_form_deltas, cycloidal_distance, forward_map,
                               holder_seminorm, inverse_map, jacobian, model2d_closed_form, model2d_operator,
                               pullback_coefficients)
from degenpde.operator_core import apply_operator_pointwise, constant_coefficients, heston_coefficients

from conftest import HESTON


def half_ball(n, d, seed=0, shrink=0.999):
    rng = np.random.default_rng(seed)
    x = rng.normal(size=(n, d))
    x /= np.linalg.norm(x, axis=1)[:, None]
    x *= shrink * rng.random(n)[:, None] ** (1.0 / d)
    x[:, -1] = np.abs(x[:, -1])
    return x


def test_forward_examples():
    np.testing.assert_allclose(forward_map([0.0, 1.0]), [0.0, np.pi / 2], atol=1e-15)
    np.testing.assert_allclose(forward_map([0.0, np.sqrt(2) - 1]), [0.0, np.pi / 4], atol=1e-15)
    ys = [1e-2, 1e-4, 1e-8]
    wd = [forward_map([0.0, y])[1] for y in ys]
    assert wd[0] > wd[1] > wd[2] > 0


def test_inverse_examples():
    np.testing.assert_allclose(inverse_map([0.0, np.pi / 2]), [0.0, 1.0], atol=1e-15)
    np.testing.assert_allclose(inverse_map([0.0, np.pi / 4]), [0.0, 0.41421356237309503], atol=1e-15)


@pytest.mark.parametrize("d", [2, 3, 5])
def test_round_trip_both_ways(d):
    x = half_ball(2000, d, seed=d)
    assert np.abs(inverse_map(forward_map(x)) - x).max() <= 1e-10
    rng = np.random.default_rng(d)
    w = np.column_stack([rng.uniform(-3, 3, (2000, d - 1)), rng.uniform(0, np.pi / 2, 2000)])
    assert np.abs(forward_map(inverse_map(w)) - w).max() <= 1e-10


@pytest.mark.parametrize("x", [[1.0, 0.0], [-1.0, 0.0], [1.0 - 1e-11, 0.0], [0.0, 1.0, 0.0]])
def test_corner_points_rejected(x):
    with pytest.raises(CornerPointError):
        forward_map(x)
    with pytest.raises(CornerPointError):
        jacobian(x)


def test_jacobian_at_origin():
    J, _ = jacobian([0.0, 0.0])
    np.testing.assert_allclose(J, 2 * np.eye(2), atol=1e-15)
    # along the symmetry axis w_d = 2 atan(x_d)
    y = 1e-3
    J, _ = jacobian([0.0, y])
    assert J[1, 1] == pytest.approx(2 / (1 + y * y), rel=1e-12)
    # on the flat face J_dd = 2 / (1 - x_1^2)
    J, _ = jacobian([0.6, 1e-12])
    assert J[1, 1] == pytest.approx(2 / (1 - 0.36), rel=1e-9)


def test_cauchy_riemann():
    x = half_ball(500, 2, seed=4)
    J, _ = jacobian(x)
    np.testing.assert_allclose(J[:, 0, 0], J[:, 1, 1], atol=1e-12 * np.abs(J).max())
    np.testing.assert_allclose(J[:, 0, 1], -J[:, 1, 0], atol=1e-12 * np.abs(J).max())


@pytest.mark.parametrize("d", [2, 3, 4])
def test_jacobian_matches_finite_differences(d):
    x = half_ball(100, d, seed=10 + d, shrink=0.9)
    x[:, -1] = np.maximum(x[:, -1], 1e-3)
    J, H = jacobian(x)
    h = 1e-6
    for i in range(d):
        e = np.zeros(d)
        e[i] = h
        fd = (forward_map(x + e) - forward_map(x - e)) / (2 * h)
        rel = np.abs(fd - J[:, :, i]) / np.maximum(np.abs(J[:, :, i]), 1.0)
        assert rel.max() <= 1e-6
        fdJ = (jacobian(x + e)[0] - jacobian(x - e)[0]) / (2 * h)
        rel = np.abs(fdJ - H[:, :, :, i]) / np.maximum(np.abs(H[:, :, :, i]), 1.0)
        assert rel.max() <= 1e-6


def test_constant_zeroth_order_term_preserved():
    cs = constant_coefficients(np.eye(3), [0.1, 0.2, 0.5], 0.37)
    rng = np.random.default_rng(0)
    w = np.column_stack([rng.uniform(-3, 3, (50, 2)), rng.uniform(0.01, 1.5, 50)])
    assert np.all(pullback_coefficients(cs, w).tilde_c == 0.37)


def test_identity_diffusion_stays_conformal():
    cs = constant_coefficients(np.eye(2), [0.0, 1.0], 0.0)
    rng = np.random.default_rng(1)
    w = np.column_stack([rng.uniform(-3, 3, 300), rng.uniform(1e-3, np.pi / 2 - 1e-3, 300)])
    ta = pullback_coefficients(cs, w).tilde_a
    assert np.abs(ta[:, 0, 1]).max() <= 1e-12
    np.testing.assert_allclose(ta[:, 0, 0], ta[:, 1, 1], rtol=1e-12)
    assert ta[:, 0, 0].min() > 0


def _fd_derivatives(fn, y, h):
    """Fourth-order central differences of a scalar function of 2D points."""
    n, d = y.shape
    e = np.eye(d) * h
    grad = np.empty((n, d))
    hess = np.empty((n, d, d))
    for i in range(d):
        grad[:, i] = (-fn(y + 2 * e[i]) + 8 * fn(y + e[i]) - 8 * fn(y - e[i]) + fn(y - 2 * e[i])) / (12 * h)
        hess[:, i, i] = (-fn(y + 2 * e[i]) + 16 * fn(y + e[i]) - 30 * fn(y) + 16 * fn(y - e[i])
                         - fn(y - 2 * e[i])) / (12 * h * h)
        for j in range(i + 1, d):
            dj = lambda z: (-fn(z + 2 * e[j]) + 8 * fn(z + e[j]) - 8 * fn(z - e[j]) + fn(z - 2 * e[j])) / (12 * h)
            hess[:, i, j] = hess[:, j, i] = (-dj(y + 2 * e[i]) + 8 * dj(y + e[i]) - 8 * dj(y - e[i])
                                             + dj(y - 2 * e[i])) / (12 * h)
    return fn(y), grad, hess


def _slab_operator(pb, v, w, h=1e-3):
    val, grad, hess = _fd_derivatives(v, w, h)
    return (-w[:, -1] * np.einsum("nij,nij->n", pb.tilde_a, hess)
            - np.einsum("ni,ni->n", pb.tilde_b, grad) + pb.tilde_c * val)


def _test_function(x):
    return np.sin(2 * x[:, 0]) * np.exp(x[:, 1]) + x[:, 0] * x[:, 1] ** 2


def _test_derivatives(x):
    s, c, e = np.sin(2 * x[:, 0]), np.cos(2 * x[:, 0]), np.exp(x[:, 1])
    val = s * e + x[:, 0] * x[:, 1] ** 2
    grad = np.stack([2 * c * e + x[:, 1] ** 2, s * e + 2 * x[:, 0] * x[:, 1]], axis=1)
    H = np.empty((x.shape[0], 2, 2))
    H[:, 0, 0] = -4 * s * e
    H[:, 0, 1] = H[:, 1, 0] = 2 * c * e + 2 * x[:, 1]
    H[:, 1, 1] = s * e + 2 * x[:, 0]
    return val, grad, H


def test_laplacian_scaling_matches():
    cs = constant_coefficients(np.eye(2), [0.0, 0.0], 0.0)
    x = half_ball(40, 2, seed=5, shrink=0.8)
    x[:, 1] = np.maximum(x[:, 1], 0.05)
    w = forward_map(x)
    pb = pullback_coefficients(cs, w)
    assert np.abs(pb.tilde_b).max() <= 1e-10  # the map is harmonic
    v = lambda y: _test_function(inverse_map(y))
    _, _, hess_w = _fd_derivatives(v, w, 1e-3)
    lhs = x[:, 1] * np.trace(_test_derivatives(x)[2], axis1=1, axis2=2)
    rhs = w[:, 1] * np.einsum("nij,nij->n", pb.tilde_a, hess_w)
    np.testing.assert_allclose(rhs, lhs, rtol=1e-8, atol=1e-8 * np.abs(lhs).max())


def test_chain_rule_pullback_reproduces_operator():
    cs = heston_coefficients(HESTON)
    x = half_ball(40, 2, seed=6, shrink=0.8)
    x[:, 1] = np.maximum(x[:, 1], 0.05)
    w = forward_map(x)
    au = apply_operator_pointwise(cs, *_test_derivatives(x), x)
    v = lambda y: _test_function(inverse_map(y))
    chain = _slab_operator(pullback_coefficients(cs, w), v, w)
    np.testing.assert_allclose(chain, au, rtol=1e-7, atol=1e-7 * np.abs(au).max())
    plain = _slab_operator(pullback_coefficients(cs, w, drift="no_jacobian"), v, w)
    assert np.abs(plain - au).max() > 1e-2


def test_closed_form_limits():
    b1, b2, c = 0.3, 0.6, 0.05
    s = 0.7
    top = model2d_closed_form(b1, b2, c, s, np.pi / 2)
    np.testing.assert_allclose(top.tilde_b, [b1 - 0.5 * (np.exp(2 * s) - 1) * b2,
                                             0.5 * (np.exp(2 * s) - 1) * b1 + b2], rtol=1e-12)
    low = model2d_closed_form(b1, b2, c, s, 1e-9)
    assert low.tilde_b[1] == pytest.approx(0.5 * (1 + np.exp(s)) ** 2 * b2, rel=1e-8)
    mid = model2d_closed_form(b1, b2, c, 0.0, np.pi / 2)
    assert (mid.x, mid.y, mid.D) == pytest.approx((0.0, 1.0, 2.0), abs=1e-15)


def test_closed_form_deltas_reported():
    d = closed_form_deltas(0.3, 0.6, 0.05, 0.4, 0.7)
    assert abs(d["x"]) <= 1e-14 and d["c"] == 0.0
    # the closed-form y lacks a factor e^s
    x = inverse_map([0.4, 0.7])
    assert d["y"] == pytest.approx(x[1] * np.exp(-0.4) - x[1], rel=1e-12)
    # at s = 0 the two agree
    assert abs(closed_form_deltas(0.3, 0.6, 0.05, 0.0, 0.7)["y"]) <= 1e-15


def test_model_operator_face_drift_limit():
    # on the face the chain-rule drift is J_dd b2 = (1 + e^s)^2 b2 / (2 e^s);
    # the closed form carries the same expression without the 1/e^s
    b1, b2 = 0.3, 0.6
    cs = model2d_operator(b1, b2, 0.0)
    for s in (0.0, 0.4, -0.8):
        pb = pullback_coefficients(cs, np.array([s, 1e-9]))
        assert pb.tilde_b[1] == pytest.approx(0.5 * (1 + np.exp(s)) ** 2 * b2 / np.exp(s), rel=1e-7)
        closed = model2d_closed_form(b1, b2, 0.0, s, 1e-9).tilde_b[1]
        assert closed / pb.tilde_b[1] == pytest.approx(np.exp(s), rel=1e-7)


def test_cycloidal_distance_examples():
    assert cycloidal_distance([0.3, 0.2], [0.3, 0.2]) == 0.0
    assert cycloidal_distance([0.0, 0.0], [0.0, 1.0]) == pytest.approx(1 / np.sqrt(2), abs=1e-15)


@given(st.lists(st.floats(-10, 10), min_size=2, max_size=2), st.lists(st.floats(-10, 10), min_size=2, max_size=2),
       st.floats(0, 10), st.floats(0, 10))
def test_cycloidal_properties(a, b, ya, yb):
    x = np.array([a[0], ya])
    y = np.array([b[0], yb])
    s = cycloidal_distance(x, y)
    assert s == cycloidal_distance(y, x)
    assert s <= np.linalg.norm(x - y) ** 0.5 + 1e-12
    if not np.array_equal(x, y):
        assert s > 0 or np.linalg.norm(x - y) < 1e-300
    else:
        assert s == 0


def test_holder_seminorm_examples():
    nodes = np.array([[0.0, 0.0], [0.0, 1.0]])
    for alpha in (0.25, 0.5, 0.75):
        assert holder_seminorm(nodes[:, 1], nodes, alpha) == pytest.approx((1 / np.sqrt(2)) ** -alpha, rel=1e-15)
    rng = np.random.default_rng(0)
    pts = np.column_stack([rng.uniform(-1, 1, 50), rng.uniform(0, 1, 50)])
    f = np.sin(pts[:, 0]) + pts[:, 1]
    assert holder_seminorm(np.full(50, 3.0), pts, 0.5) == 0.0
    assert holder_seminorm(f + 7.0, pts, 0.5) == pytest.approx(holder_seminorm(f, pts, 0.5), rel=1e-12)
    with pytest.raises(ValueError):
        holder_seminorm([1.0], pts[:1], 0.5)


def test_holder_seminorm_subsamples_deterministically():
    rng = np.random.default_rng(0)
    pts = rng.uniform(0, 1, (300, 2))
    f = pts[:, 0] ** 2
    a = holder_seminorm(f, pts, 0.5, max_pairs=1000, seed=7)
    b = holder_seminorm(f, pts, 0.5, max_pairs=1000, seed=7)
    full = holder_seminorm(f, pts, 0.5)
    assert a == b and a <= full
