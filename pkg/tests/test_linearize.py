"""Linearization: Jacobian oracles, per-component rows, error nonnegativity."""

import math
import warnings

import numpy as np
import pytest

from scmpc.expr import (
    Affine,
    DCFunctionSpec,
    QuadForm,
    eval_dc,
    min_over_box,
)
from scmpc.geometry import Box
from scmpc.linearize import (
    error_expressions,
    error_value,
    error_value_dc,
    linearize_at,
    linearize_rows,
)
from scmpc.models import example1, example2


def _fd_jacobian(f, x0, u0, h=1e-7):
    z0 = np.concatenate([x0, u0])
    n = z0.size
    J = np.zeros((f.n_x, n))
    for i in range(n):
        e = np.zeros(n)
        e[i] = h
        zp, zm = z0 + e, z0 - e
        J[:, i] = (eval_dc(f, zp[:f.n_x], zp[f.n_x:])
                   - eval_dc(f, zm[:f.n_x], zm[f.n_x:])) / (2 * h)
    return J[:, :f.n_x], J[:, f.n_x:]


def test_jacobian_oracle_exp_decay_model():
    f = example1()[0].f
    step = linearize_at(f, [5.0, 10.0], [0.0])
    A_expected = np.array([[1.0, 0.008],
                           [-0.0016 * math.exp(-5.0), 0.992]])
    np.testing.assert_allclose(step.A, A_expected, rtol=1e-13)
    np.testing.assert_allclose(step.B, [[0.0], [0.008]], atol=1e-15)
    assert step.A[1, 0] == pytest.approx(-1.0780715198536747e-05, rel=1e-12)
    np.testing.assert_allclose(step.f0, eval_dc(f, [5.0, 10.0], [0.0]),
                               atol=1e-15)


def test_jacobian_oracle_oscillator_model_at_origin():
    f = example2()[0].f
    step = linearize_at(f, np.zeros(4), np.zeros(2))
    dt = 1e-2
    kappa = 1250.0
    A_expected = np.eye(4) + dt * np.array([
        [0, 0, 1, 0], [0, 0, 0, 1],
        [-kappa, -kappa, 0, 0], [-kappa, -kappa, 0, 0]])
    B_expected = dt * np.array([[0, 0], [0, 0], [1, 0], [0, 1]])
    np.testing.assert_allclose(step.A, A_expected, atol=1e-14)
    np.testing.assert_allclose(step.B, B_expected, atol=1e-14)


def test_jacobians_match_finite_differences():
    rng = np.random.default_rng(5)
    for f in (example1()[0].f, example2()[0].f):
        for _ in range(5):
            x0 = rng.uniform(-2, 2, f.n_x)
            u0 = rng.uniform(-2, 2, f.n_u)
            step = linearize_at(f, x0, u0)
            A_fd, B_fd = _fd_jacobian(f, x0, u0)
            # FD cancellation noise scales with the value magnitude.
            noise = 1e-6 * max(1.0, float(np.max(np.abs(step.f0))))
            np.testing.assert_allclose(step.A, A_fd, rtol=1e-6, atol=noise)
            np.testing.assert_allclose(step.B, B_fd, rtol=1e-6, atol=noise)


def test_linear_model_jacobians_point_independent():
    F = np.array([[0.9, 0.1], [0.0, 0.8]])
    G = np.array([[0.0], [1.0]])
    g = tuple(Affine(np.concatenate([F[j], G[j]]), 0.0) for j in range(2))
    f = DCFunctionSpec(2, 1, g, (Affine.zero(3), Affine.zero(3)))
    for pt in ([0.0, 0.0], [3.0, -2.0]):
        step = linearize_at(f, pt, [1.0])
        np.testing.assert_allclose(step.A, F, atol=1e-15)
        np.testing.assert_allclose(step.B, G, atol=1e-15)
        np.testing.assert_allclose(error_value(step, [9.0, 9.0], [5.0]),
                                   np.zeros(2), atol=1e-12)


def test_per_component_rows_use_own_base_points():
    f = example1()[0].f
    step = linearize_rows(f, [([4.0, 10.0], [0.0]), ([5.0, 10.0], [0.0])])
    # Row 2 (index 1) anchored at x1 = 5; a row anchored at x1 = 4 would give
    # the steeper slope -0.0016*exp(-4).
    assert step.A[1, 0] == pytest.approx(-0.0016 * math.exp(-5.0), rel=1e-13)
    step4 = linearize_rows(f, [([5.0, 10.0], [0.0]), ([4.0, 10.0], [0.0])])
    assert step4.A[1, 0] == pytest.approx(-0.0016 * math.exp(-4.0), rel=1e-13)
    # Identical points reduce to the shared-base linearization.
    same = linearize_rows(f, [([5.0, 10.0], [0.0])] * 2)
    shared = linearize_at(f, [5.0, 10.0], [0.0])
    np.testing.assert_allclose(same.A, shared.A, atol=1e-15)
    np.testing.assert_allclose(same.B, shared.B, atol=1e-15)


def test_error_zero_at_base_point():
    f = example1()[0].f
    step = linearize_at(f, [5.0, 10.0], [0.0])
    np.testing.assert_allclose(error_value(step, [5.0, 10.0], [0.0]),
                               np.zeros(2), atol=1e-15)


def test_error_value_oracle():
    f = example1()[0].f
    step = linearize_at(f, [5.0, 10.0], [0.0])
    e = error_value(step, [4.0, 10.0], [0.0])
    expected = 0.0016 * (math.exp(-4.0) - 2.0 * math.exp(-5.0))
    assert expected == pytest.approx(7.743591824901192e-06, rel=1e-12)
    assert e[0] == pytest.approx(0.0, abs=1e-15)
    assert e[1] == pytest.approx(expected, rel=1e-12)
    assert e[1] >= 0.0


def test_error_nonnegative_for_convex_model():
    f = example1()[0].f
    step = linearize_at(f, [1.0, -2.0], [3.0])
    rng = np.random.default_rng(17)
    for _ in range(1000):
        x = rng.uniform(-10, 10, 2)
        u = rng.uniform(-150, 150, 1)
        e = error_value(step, x, u)
        assert np.all(e >= -1e-12)


def test_error_parts_nonnegative_for_dc_model():
    # f(x) = x - 0.1 x^2 + u: g = x + u, h = 0.1 x^2.
    g = (Affine([1.0, 1.0], 0.0),)
    h = (QuadForm(np.array([[0.1]]), np.array([[1.0, 0.0]]), np.zeros(1)),)
    f = DCFunctionSpec(1, 1, g, h)
    step = linearize_at(f, [2.0], [0.5])
    rng = np.random.default_rng(23)
    for _ in range(500):
        eg, eh = error_value_dc(step, rng.uniform(-5, 5, 1), rng.uniform(-5, 5, 1))
        assert np.all(eg >= -1e-12)
        assert np.all(eh >= -1e-12)
    # Sanity: combined error can be negative for DC models.
    e = error_value(step, [-3.0], [0.0])
    np.testing.assert_allclose(e, error_value_dc(step, [-3.0], [0.0])[0]
                               - error_value_dc(step, [-3.0], [0.0])[1],
                               atol=1e-15)


def test_error_expression_minimum_is_zero_at_base():
    f = example1()[0].f
    base_x, base_u = np.array([1.0, 2.0]), np.array([3.0])
    step = linearize_at(f, base_x, base_u)
    eg, _ = error_expressions(step)
    stacked = Box(np.array([-10.0, -10.0, -150.0]),
                  np.array([10.0, 10.0, 150.0]))
    for j in range(2):
        val, arg = min_over_box(eg[j], stacked)
        assert val == pytest.approx(0.0, abs=1e-10)
    # The exponential component's error has a unique interior minimizer at
    # the base point.
    _, arg = min_over_box(eg[1], stacked)
    assert arg[0] == pytest.approx(1.0, abs=1e-4)


def test_out_of_box_linearization_warns_not_raises():
    f = example1()[0].f
    operating = Box(np.array([-10.0, -10.0, -150.0]),
                    np.array([10.0, 10.0, 150.0]))
    with pytest.warns(RuntimeWarning, match="outside the operating box"):
        step = linearize_at(f, [50.0, 0.0], [0.0], operating=operating)
    assert np.isfinite(step.A).all()
    with warnings.catch_warnings():
        warnings.simplefilter("error")
        linearize_at(f, [5.0, 10.0], [0.0], operating=operating)


def test_dimension_mismatch_raises():
    f = example1()[0].f
    step = linearize_at(f, [0.0, 0.0], [0.0])
    with pytest.raises(ValueError):
        error_value(step, [0.0, 0.0, 0.0], [0.0])
    with pytest.raises(ValueError):
        linearize_rows(f, [([0.0, 0.0], [0.0])])  # needs n_x points
