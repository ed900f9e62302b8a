"""Model catalog: discretization oracles, preset parameter values,
equilibrium and convexity checks."""

import math

import numpy as np
import pytest

from scmpc.expr import Affine, DCFunctionSpec, eval_dc, flatten
from scmpc.geometry import Box
from scmpc.models import (
    ContinuousModelSpec,
    DisturbanceBox,
    EquilibriumReference,
    NMPCProblem,
    discretize_euler,
    example1,
    example1_initial_state,
    example2,
    example2_initial_state,
    validate_model_convexity,
)


def test_euler_integrator_trivial():
    # dx/dt = u with dt = 0.1 -> x + 0.1 u.
    rhs = DCFunctionSpec(1, 1, (Affine([0.0, 1.0], 0.0),), (Affine.zero(2),))
    f = discretize_euler(ContinuousModelSpec(rhs, dt=0.1))
    assert eval_dc(f, [2.0], [3.0])[0] == pytest.approx(2.3)


def test_discretize_rejects_nonpositive_step():
    rhs = DCFunctionSpec(1, 1, (Affine([0.0, 1.0], 0.0),), (Affine.zero(2),))
    with pytest.raises(ValueError):
        ContinuousModelSpec(rhs, dt=0.0)


def test_exp_decay_discrete_atom_coefficients():
    f = example1()[0].f
    flat = flatten(f.g[1])
    assert len(flat.exps) == 1
    scale, a, b = flat.exps[0]
    assert scale == pytest.approx(0.2 * 8e-3)           # 0.0016
    np.testing.assert_allclose(a, [-1.0, 0.0, 0.0])
    np.testing.assert_allclose(flat.lin, [0.0, 1.0 - 8e-3, 8e-3])
    assert flat.const == pytest.approx(-0.2 * 8e-3)


def test_oscillator_discrete_quadratic_coefficients():
    f = example2()[0].f
    flat = flatten(f.g[2])
    assert len(flat.quads) == 1
    W, C, d = flat.quads[0]
    assert W[0, 0] == pytest.approx(3.0 * 1e-2)          # 0.03
    np.testing.assert_allclose(C, [[1, 0, 0, 0, 0, 0]])
    # Euler passthrough keeps the x3 term; the coupling scales by dt.
    np.testing.assert_allclose(flat.lin, [-12.5, -12.5, 1.0, 0, 0.01, 0])


def test_exp_decay_map_matches_scalar_reference():
    f = example1()[0].f
    rng = np.random.default_rng(3)
    for _ in range(100):
        x1, x2 = rng.uniform(-10, 10, 2)
        u = rng.uniform(-150, 150)
        ref1 = x1 + 8e-3 * x2
        ref2 = x2 + 8e-3 * (0.2 * math.exp(-x1) - x2 + u - 0.2)
        out = eval_dc(f, [x1, x2], [u])
        assert out[0] == pytest.approx(ref1, rel=1e-12, abs=1e-12)
        assert out[1] == pytest.approx(ref2, rel=1e-12, abs=1e-12)


def test_oscillator_map_matches_scalar_reference():
    f = example2()[0].f
    rng = np.random.default_rng(4)
    for _ in range(100):
        x = rng.uniform(-10, 10, 4)
        u = rng.uniform(-33, 33, 2)
        dt, kap = 1e-2, 1250.0
        ref = np.array([
            x[0] + dt * x[2],
            x[1] + dt * x[3],
            x[2] + dt * (-kap * (x[0] + x[1]) + 3 * x[0] ** 2 + u[0]),
            x[3] + dt * (-kap * (x[0] + x[1]) + 3 * x[1] ** 2 + u[1]),
        ])
        np.testing.assert_allclose(eval_dc(f, x, u), ref, rtol=1e-12, atol=1e-12)


def test_origin_is_equilibrium_of_both_models():
    for preset in (example1, example2):
        prob = preset()[0]
        np.testing.assert_allclose(
            eval_dc(prob.f, np.zeros(prob.n_x), np.zeros(prob.n_u)),
            np.zeros(prob.n_x), atol=1e-16)


def test_example2_initial_state_oracle():
    x0 = example2_initial_state()
    s = 1.0 / math.sqrt(2.0)
    np.testing.assert_allclose(
        x0, [0.0, 2 * s, (1 - 1 / 50) * s, (1 + 1 / 50) * s], atol=1e-15)
    assert x0[1] == pytest.approx(math.sqrt(2.0))


def test_example1_parameters():
    nom, rob = example1()
    assert nom.N == 25 and rob.N == 25
    assert nom.dt == pytest.approx(8e-3)
    np.testing.assert_allclose(nom.Q, np.eye(2))
    np.testing.assert_allclose(nom.R, np.eye(1))
    assert nom.tol == 1e-6 and nom.maxiters == 3
    assert nom.termination_threshold == pytest.approx(1e-4)
    bb = nom.X.bounding_box()
    np.testing.assert_allclose(bb.upper, [10.0, 10.0])
    np.testing.assert_allclose(nom.U.bounding_box().upper, [150.0])
    np.testing.assert_allclose(rob.X.bounding_box().upper, [20.0, 20.0])
    np.testing.assert_allclose(rob.W.w_upper, [1.6e-4, 1.6e-4])
    np.testing.assert_allclose(rob.W.w_lower, [-1.6e-4, -1.6e-4])
    np.testing.assert_allclose(example1_initial_state(), [5.0, 10.0])
    np.testing.assert_allclose(example1_initial_state(robust=True), [6.2, 10.0])


def test_example2_parameters():
    nom, rob = example2()
    assert nom.N == 25 and rob.N == 10
    assert nom.dt == pytest.approx(1e-2)
    np.testing.assert_allclose(nom.Q, 1e-2 * np.eye(4))
    np.testing.assert_allclose(rob.Q, 1e-4 * np.eye(4))
    np.testing.assert_allclose(nom.U.bounding_box().upper, [33.0, 33.0])
    np.testing.assert_allclose(rob.U.bounding_box().upper, [250.0, 250.0])
    np.testing.assert_allclose(rob.X.bounding_box().upper, 20.0 * np.ones(4))
    np.testing.assert_allclose(rob.W.w_upper, 1e-6 * np.ones(4))


def test_terminal_gain_stabilizes_linearization():
    from scmpc.linearize import linearize_at

    for preset in (example1, example2):
        nom, rob = preset()
        for prob in (nom, rob):
            step = linearize_at(prob.f, prob.reference.x_ref, prob.reference.u_ref)
            radius = np.max(np.abs(np.linalg.eigvals(step.A + step.B @ prob.K)))
            assert radius < 1.0


def test_riccati_solution_against_scipy():
    from scipy.linalg import solve_discrete_are

    from scmpc.linearize import linearize_at

    for preset in (example1, example2):
        prob = preset()[0]
        step = linearize_at(prob.f, prob.reference.x_ref, prob.reference.u_ref)
        P_ref = solve_discrete_are(step.A, step.B, prob.Q, prob.R)
        np.testing.assert_allclose(prob.Q_N, P_ref, rtol=1e-8, atol=1e-10)


def test_models_pass_convexity_witness():
    for preset in (example1, example2):
        prob = preset()[0]
        assert prob.f.all_h_zero()
        bx = prob.X.bounding_box()
        bu = prob.U.bounding_box()
        validate_model_convexity(prob.f, bx, bu)


def test_disturbance_box_validation():
    with pytest.raises(ValueError, match="origin"):
        DisturbanceBox([0.1], [0.2])
    DisturbanceBox([0.1], [0.2], contains_origin=False)
    with pytest.raises(ValueError):
        DisturbanceBox([0.3], [0.2], contains_origin=False)
    assert DisturbanceBox.zero(3).is_zero()
    w = DisturbanceBox.from_continuous(0.02, 2, 8e-3)
    np.testing.assert_allclose(w.w_upper, [1.6e-4, 1.6e-4])


def test_problem_validation():
    nom = example1()[0]
    with pytest.raises(ValueError, match="positive definite"):
        NMPCProblem(f=nom.f, dt=nom.dt, N=nom.N, Q=np.zeros((2, 2)), R=nom.R,
                    Q_N=nom.Q_N, X=nom.X, U=nom.U, X_N=nom.X_N, K=nom.K,
                    reference=nom.reference)
    bad_ref = EquilibriumReference([1.0, 0.0], [0.0])
    with pytest.raises(ValueError, match="equilibrium"):
        NMPCProblem(f=nom.f, dt=nom.dt, N=nom.N, Q=nom.Q, R=nom.R,
                    Q_N=nom.Q_N, X=nom.X, U=nom.U, X_N=nom.X_N, K=nom.K,
                    reference=bad_ref)


def test_stage_cost_values():
    nom = example1()[0]
    assert nom.stage_cost([3.0, 4.0], [2.0]) == pytest.approx(9 + 16 + 4)
    rob2 = example2()[1]
    assert rob2.stage_cost([1.0, 0, 0, 0], [0.0, 0.0]) == pytest.approx(1e-4)
