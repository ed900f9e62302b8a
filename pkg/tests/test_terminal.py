"""Terminal ingredients: Riccati oracles, box verification, beta estimate."""

import math

import numpy as np
import pytest

from scmpc.expr import Affine, DCFunctionSpec, QuadForm
from scmpc.geometry import Box, Polytope, box_in_polytope, box_subset
from scmpc.models import example1, example2
from scmpc.terminal import (
    RiccatiError,
    TerminalIngredients,
    compute_k_qn,
    dare_residual,
    estimate_beta,
    interval_propagate,
    solve_dare,
    synthesize_terminal_box,
    verify_terminal_nominal,
    verify_terminal_robust,
)


def _scalar_model(a: float, b: float) -> DCFunctionSpec:
    """x+ = a x + b u as a DC spec with n_u = 1."""
    return DCFunctionSpec(1, 1, (Affine([a, b], 0.0),), (Affine.zero(2),))


# ---------------------------------------------------------------------------
# Riccati
# ---------------------------------------------------------------------------


def test_scalar_riccati_against_value_iteration():
    a, b, q, r = 1.1, 1.0, 1.0, 1.0
    # Independent value-iteration oracle.
    p = q
    for _ in range(1000):
        p = q + a * p * a - (a * p * b) ** 2 / (r + b * p * b)
    P, K = solve_dare([[a]], [[b]], [[q]], [[r]])
    assert P[0, 0] == pytest.approx(p, rel=1e-10)
    assert K[0, 0] == pytest.approx(-(b * p * a) / (r + b * p * b), rel=1e-8)
    assert abs(a + b * K[0, 0]) < 1.0


def test_riccati_residual_small():
    rng = np.random.default_rng(8)
    for _ in range(10):
        n, m = 3, 2
        A = rng.normal(size=(n, n)) * 0.6
        B = rng.normal(size=(n, m))
        Q = np.eye(n)
        R = np.eye(m)
        P, K = solve_dare(A, B, Q, R)
        assert dare_residual(P, A, B, Q, R) <= 1e-10


def test_riccati_against_scipy():
    from scipy.linalg import solve_discrete_are

    rng = np.random.default_rng(9)
    A = np.array([[1.01, 0.1], [0.0, 0.98]])
    B = np.array([[0.0], [0.5]])
    P, _ = solve_dare(A, B, np.eye(2), np.eye(1))
    P_ref = solve_discrete_are(A, B, np.eye(2), np.eye(1))
    np.testing.assert_allclose(P, P_ref, rtol=1e-9)


def test_stable_system_with_zero_input_matrix():
    A = np.array([[0.5, 0.1], [0.0, 0.7]])
    B = np.zeros((2, 1))
    P, K = solve_dare(A, B, np.eye(2), np.eye(1))
    np.testing.assert_allclose(K, np.zeros((1, 2)), atol=1e-12)
    # P solves the Lyapunov equation A'PA - P + Q = 0.
    np.testing.assert_allclose(A.T @ P @ A - P + np.eye(2),
                               np.zeros((2, 2)), atol=1e-9)


def test_unstabilizable_raises():
    with pytest.raises(RiccatiError):
        solve_dare([[1.1]], [[0.0]], [[1.0]], [[1.0]], max_iter=2000)


def test_compute_k_qn_on_presets():
    for preset in (example1, example2):
        prob = preset()[0]
        K, Q_N = compute_k_qn(prob.f, prob.reference.x_ref,
                              prob.reference.u_ref, prob.Q, prob.R)
        np.testing.assert_allclose(K, prob.K, atol=1e-12)
        np.testing.assert_allclose(Q_N, prob.Q_N, atol=1e-10)


# ---------------------------------------------------------------------------
# Robust box verification: hand-checkable scalar cases
# ---------------------------------------------------------------------------


def test_robust_box_fails_when_disturbance_too_large():
    f = _scalar_model(0.5, 0.0)
    rep = verify_terminal_robust(f, [[0.0]], Box([-1.0], [1.0]),
                                 [-0.6], [0.6], Polytope.symmetric_box([10.0]),
                                 [0.0], [0.0])
    up = rep.check("invariance_upper")
    assert not up.passed
    assert up.margin == pytest.approx(1.0 - 1.1)  # 0.5 + 0.6 = 1.1 > 1


def test_robust_box_passes_with_small_disturbance():
    f = _scalar_model(0.5, 0.0)
    rep = verify_terminal_robust(f, [[0.0]], Box([-1.0], [1.0]),
                                 [-0.2], [0.2], Polytope.symmetric_box([10.0]),
                                 [0.0], [0.0])
    assert rep.passed
    assert rep.check("invariance_upper").margin == pytest.approx(1.0 - 0.7)
    assert rep.check("invariance_lower").margin == pytest.approx(1.0 - 0.7)


def test_zero_disturbance_reduces_to_nominal_invariance():
    f = _scalar_model(0.5, 0.0)
    T = Box([-1.0], [1.0])
    rob = verify_terminal_robust(f, [[0.0]], T, [0.0], [0.0],
                                 Polytope.symmetric_box([10.0]), [0.0], [0.0])
    nom = verify_terminal_nominal(f, [[0.0]], [[1.0]], T,
                                  Polytope.symmetric_box([10.0]),
                                  [[1.0]], [[1.0]], [0.0], [0.0])
    for name in ("invariance_upper", "invariance_lower"):
        assert rob.check(name).margin == pytest.approx(nom.check(name).margin)


def test_input_bound_violation_reported_with_margin():
    f = _scalar_model(0.5, 1.0)
    # K = [[-4]] over box [-1,1]: |u| up to 4 > bound 3 -> margin -1.
    rep = verify_terminal_robust(f, [[-4.0]], Box([-1.0], [1.0]),
                                 [0.0], [0.0], Polytope.symmetric_box([3.0]),
                                 [0.0], [0.0])
    chk = rep.check("input_feasible")
    assert not chk.passed
    assert chk.margin == pytest.approx(-1.0)


def test_singleton_terminal_at_equilibrium_passes_all_checks():
    prob = example1()[0]
    rep = verify_terminal_nominal(
        prob.f, prob.K, prob.Q_N, Box.singleton([0.0, 0.0]), prob.U,
        prob.Q, prob.R, prob.reference.x_ref, prob.reference.u_ref)
    assert rep.passed


# ---------------------------------------------------------------------------
# Interval propagation
# ---------------------------------------------------------------------------


def test_interval_propagation_exact_for_affine_dynamics():
    # x+ = [[0.5, 0.2],[0, 0.9]] x, componentwise interval arithmetic oracle.
    A = np.array([[0.5, 0.2], [0.0, 0.9]])
    g = tuple(Affine(np.concatenate([A[j], [0.0]]), 0.0) for j in range(2))
    f = DCFunctionSpec(2, 1, g, (Affine.zero(3),) * 2)
    box = Box([-1.0, 2.0], [3.0, 4.0])
    prop = interval_propagate(f, box, np.zeros((1, 2)), [0.0])
    # Row 0: 0.5*x1 + 0.2*x2: min = -0.5+0.4, max = 1.5+0.8.
    np.testing.assert_allclose(prop.lower, [-0.1, 1.8], atol=1e-9)
    np.testing.assert_allclose(prop.upper, [2.3, 3.6], atol=1e-9)


def test_interval_propagation_monotone_in_the_box():
    prob = example1()[1]
    rng = np.random.default_rng(12)
    for _ in range(25):
        c = rng.uniform(-2, 2, 2)
        w_small = rng.uniform(0.05, 0.5, 2)
        w_big = w_small + rng.uniform(0.0, 0.5, 2)
        inner = Box(c - w_small, c + w_small)
        outer = Box(c - w_big, c + w_big)
        p_in = interval_propagate(prob.f, inner, prob.K, [0.0],
                                  prob.W.w_lower, prob.W.w_upper)
        p_out = interval_propagate(prob.f, outer, prob.K, [0.0],
                                   prob.W.w_lower, prob.W.w_upper)
        assert box_subset(p_in, p_out, tol=1e-9)


# ---------------------------------------------------------------------------
# Beta estimate
# ---------------------------------------------------------------------------


def test_beta_zero_for_linear_lqr_without_disturbance():
    f = _scalar_model(0.9, 1.0)
    P, K = solve_dare([[0.9]], [[1.0]], [[1.0]], [[1.0]])
    beta = estimate_beta(f, K, P, [[1.0]], [[1.0]], Box([-2.0], [2.0]),
                         [0.0], [0.0], [0.0], [0.0])
    assert beta == pytest.approx(0.0, abs=1e-9)


def test_beta_matches_scalar_closed_form():
    a, b = 0.9, 1.0
    f = _scalar_model(a, b)
    P, K = solve_dare([[a]], [[b]], [[1.0]], [[1.0]])
    p = P[0, 0]
    acl = a + b * K[0, 0]
    x_max, w_max = 2.0, 0.3
    # l(x,Kx) + p(acl*x + w)^2 - p x^2 = (Riccati identity) 2 p acl x w + p w^2,
    # maximized at |x| = x_max, |w| = w_max with matching signs.
    analytic = 2 * p * abs(acl) * x_max * w_max + p * w_max ** 2
    beta = estimate_beta(f, K, P, [[1.0]], [[1.0]], Box([-x_max], [x_max]),
                         [-w_max], [w_max], [0.0], [0.0])
    assert beta == pytest.approx(1.10 * analytic, rel=1e-9)


def test_beta_monotone_in_disturbance():
    prob = example1()[1]
    args = (prob.f, prob.K, prob.Q_N, prob.Q, prob.R, prob.terminal_box)
    tail = (prob.reference.x_ref, prob.reference.u_ref)
    b1 = estimate_beta(*args, prob.W.w_lower, prob.W.w_upper, *tail)
    b2 = estimate_beta(*args, 2 * prob.W.w_lower, 2 * prob.W.w_upper, *tail)
    assert b2 >= b1 >= 0.0


def test_preset_beta_nonnegative():
    for preset in (example1, example2):
        assert preset()[1].beta >= 0.0


# ---------------------------------------------------------------------------
# Synthesis
# ---------------------------------------------------------------------------


def _synthesis_gates_hold(f, K, X, U, box, x_ref, u_ref, w_lo=None, w_up=None):
    c = np.asarray(u_ref) - np.atleast_2d(K) @ np.asarray(x_ref)
    ok_state = box_in_polytope(box, np.zeros(box.dim), X)
    from scmpc.geometry import feedback_image_in_polytope

    ok_input = feedback_image_in_polytope(box, K, c, U)
    prop = interval_propagate(f, box, K, c, w_lo, w_up)
    ok_step = box_in_polytope(prop, np.zeros(box.dim), X)
    return ok_state and ok_input and ok_step


def test_synthesized_nominal_box_passes_gates():
    for preset in (example1, example2):
        prob = preset()[0]
        box = synthesize_terminal_box(prob.f, prob.K, prob.X, prob.U,
                                      prob.reference.x_ref,
                                      prob.reference.u_ref, prob.Q_N)
        assert not box.is_singleton()
        assert _synthesis_gates_hold(prob.f, prob.K, prob.X, prob.U, box,
                                     prob.reference.x_ref, prob.reference.u_ref)


def test_synthesized_robust_box_passes_gates():
    for preset in (example1, example2):
        prob = preset()[1]
        box = prob.terminal_box
        assert not box.is_singleton()
        assert _synthesis_gates_hold(prob.f, prob.K, prob.X, prob.U, box,
                                     prob.reference.x_ref, prob.reference.u_ref,
                                     prob.W.w_lower, prob.W.w_upper)
        rep = verify_terminal_robust(prob.f, prob.K, box, prob.W.w_lower,
                                     prob.W.w_upper, prob.U,
                                     prob.reference.x_ref, prob.reference.u_ref)
        assert rep.check("contains_reference").passed
        assert rep.check("input_feasible").passed


def test_synthesis_rejects_reference_outside_state_set():
    prob = example1()[0]
    with pytest.raises(ValueError):
        synthesize_terminal_box(prob.f, prob.K, prob.X, prob.U,
                                [50.0, 0.0], [0.0], prob.Q_N)


# ---------------------------------------------------------------------------
# Serialization
# ---------------------------------------------------------------------------


def test_ingredients_json_roundtrip():
    prob = example1()[1]
    rep = verify_terminal_robust(prob.f, prob.K, prob.terminal_box,
                                 prob.W.w_lower, prob.W.w_upper, prob.U,
                                 prob.reference.x_ref, prob.reference.u_ref)
    ing = TerminalIngredients(K=prob.K, Q_N=prob.Q_N,
                              terminal_box=prob.terminal_box,
                              beta=prob.beta, robust_report=rep)
    back = TerminalIngredients.from_json(ing.to_json())
    np.testing.assert_allclose(back.K, prob.K)
    np.testing.assert_allclose(back.Q_N, prob.Q_N)
    assert back.beta == pytest.approx(prob.beta)
    assert box_subset(back.terminal_box, prob.terminal_box, tol=1e-12)
    assert len(back.robust_report.checks) == len(rep.checks)
