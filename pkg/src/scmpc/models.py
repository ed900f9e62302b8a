"""Problem data types and the bundled example models.

A control problem bundles a discrete-time difference-of-convex model with
horizon, cost weights, constraint polytopes, terminal ingredients, reference,
and solve parameters.  Continuous-time models enter through forward-Euler
discretization, which preserves the componentwise DC structure because the
affine part absorbs the x term:

    x_+ = x + dt * (g_c(x, u) - h_c(x, u))
        = [x + dt * g_c(x, u)] - [dt * h_c(x, u)].

Two ready-made presets ship with the package:

  * ``example1``: a 2-state exponential-decay system (one input), dt = 8e-3;
  * ``example2``: a 4-state oscillator chain with quadratic coupling
    (two inputs), dt = 1e-2.

Each preset returns a nominal problem and a robust variant with its
disturbance box and box-family terminal set.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from functools import lru_cache
from typing import Callable, Optional, Sequence, Tuple

import numpy as np

from .expr import (
    Affine,
    ConvexExpr,
    DCFunctionSpec,
    ExpAffine,
    QuadForm,
    WeightedSum,
    add,
    check_convexity,
    eval_dc,
)
from .geometry import Box, Polytope
from . import terminal as term


@dataclass(frozen=True)
class ContinuousModelSpec:
    """Componentwise DC right-hand side dx/dt = g_c(x,u) - h_c(x,u)."""

    rhs: DCFunctionSpec
    dt: float

    def __post_init__(self):
        if self.dt <= 0.0:
            raise ValueError("time step must be positive")


def discretize_euler(cont: ContinuousModelSpec) -> DCFunctionSpec:
    """Forward-Euler map x + dt*(g_c - h_c) as a componentwise DC function."""
    f = cont.rhs
    dt = cont.dt
    g_out = []
    h_out = []
    for j in range(f.n_x):
        e_j = np.zeros(f.dim)
        e_j[j] = 1.0
        g_out.append(WeightedSum((Affine(e_j, 0.0), f.g[j]), (1.0, dt)))
        h_out.append(WeightedSum((f.h[j],), (dt,)))
    return DCFunctionSpec(f.n_x, f.n_u, tuple(g_out), tuple(h_out))


@dataclass(frozen=True)
class EquilibriumReference:
    """Constant reference pair (x_ref, u_ref) with x_ref = f(x_ref, u_ref)."""

    x_ref: np.ndarray
    u_ref: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "x_ref",
                           np.asarray(self.x_ref, dtype=float).ravel())
        object.__setattr__(self, "u_ref",
                           np.asarray(self.u_ref, dtype=float).ravel())

    def x(self, i: int) -> np.ndarray:
        return self.x_ref

    def u(self, i: int) -> np.ndarray:
        return self.u_ref

    def assert_consistent(self, f: DCFunctionSpec, tol: float = 1e-9):
        nxt = eval_dc(f, self.x_ref, self.u_ref)
        gap = float(np.max(np.abs(nxt - self.x_ref)))
        if gap > tol:
            raise ValueError(
                f"reference is not an equilibrium: |f(x_r,u_r) - x_r| = {gap:.3e}")


@dataclass(frozen=True)
class DisturbanceBox:
    """Additive discrete-time disturbance bounds w_lower <= w <= w_upper."""

    w_lower: np.ndarray
    w_upper: np.ndarray
    contains_origin: bool = True

    def __post_init__(self):
        lo = np.asarray(self.w_lower, dtype=float).ravel()
        up = np.asarray(self.w_upper, dtype=float).ravel()
        if lo.shape != up.shape:
            raise ValueError("disturbance bound shape mismatch")
        if np.any(lo > up):
            raise ValueError("disturbance lower bound exceeds upper bound")
        if self.contains_origin and (np.any(lo > 0.0) or np.any(up < 0.0)):
            raise ValueError("disturbance box does not contain the origin")
        object.__setattr__(self, "w_lower", lo)
        object.__setattr__(self, "w_upper", up)

    @property
    def dim(self) -> int:
        return self.w_lower.shape[0]

    def is_zero(self) -> bool:
        return bool(np.all(self.w_lower == 0.0) and np.all(self.w_upper == 0.0))

    def as_box(self) -> Box:
        return Box(self.w_lower, self.w_upper)

    @staticmethod
    def zero(n: int) -> "DisturbanceBox":
        return DisturbanceBox(np.zeros(n), np.zeros(n))

    @staticmethod
    def from_continuous(bound: float, n: int, dt: float) -> "DisturbanceBox":
        """Convert a continuous-time magnitude bound |w_j(t)| <= bound to the
        forward-Euler increment box dt*[-bound, bound]^n."""
        r = dt * float(bound) * np.ones(n)
        return DisturbanceBox(-r, r)


def _check_pd(M: np.ndarray, name: str):
    M = np.atleast_2d(np.asarray(M, dtype=float))
    if np.min(np.linalg.eigvalsh(0.5 * (M + M.T))) <= 0.0:
        raise ValueError(f"{name} must be positive definite")


@dataclass(frozen=True)
class NMPCProblem:
    """Nominal problem data for the successive-convexification controller."""

    f: DCFunctionSpec
    dt: float
    N: int
    Q: np.ndarray
    R: np.ndarray
    Q_N: np.ndarray
    X: Polytope
    U: Polytope
    X_N: Polytope
    K: np.ndarray
    reference: EquilibriumReference
    tol: float = 1e-6
    maxiters: int = 3
    termination_threshold: Optional[float] = None  # on ||predicted x_N||

    def __post_init__(self):
        for name in ("Q", "R", "Q_N", "K"):
            object.__setattr__(self, name,
                               np.atleast_2d(np.asarray(getattr(self, name),
                                                        dtype=float)))
        _check_pd(self.Q, "Q")
        _check_pd(self.R, "R")
        _check_pd(self.Q_N, "Q_N")
        if self.N < 1 or self.maxiters < 1:
            raise ValueError("horizon and maxiters must be >= 1")
        self.reference.assert_consistent(self.f)
        if not self.X_N.contains(self.reference.x_ref):
            raise ValueError("reference tail must lie in the terminal set")
        if not self.U.contains(self.reference.u_ref):
            raise ValueError("reference input must lie in the input set")

    @property
    def n_x(self) -> int:
        return self.f.n_x

    @property
    def n_u(self) -> int:
        return self.f.n_u

    def stage_cost(self, x, u) -> float:
        dx = np.asarray(x, dtype=float) - self.reference.x_ref
        du = np.asarray(u, dtype=float) - self.reference.u_ref
        return float(dx @ self.Q @ dx + du @ self.R @ du)


@dataclass(frozen=True)
class RobustProblem:
    """Robust problem data: disturbance box and sub-box terminal family."""

    f: DCFunctionSpec
    dt: float
    N: int
    Q: np.ndarray
    R: np.ndarray
    Q_N: np.ndarray
    X: Polytope
    U: Polytope
    terminal_box: Box
    W: DisturbanceBox
    K: np.ndarray
    reference: EquilibriumReference
    beta: float = 0.0
    tol: float = 1e-6
    maxiters: int = 3
    termination_threshold: Optional[float] = None

    def __post_init__(self):
        for name in ("Q", "R", "Q_N", "K"):
            object.__setattr__(self, name,
                               np.atleast_2d(np.asarray(getattr(self, name),
                                                        dtype=float)))
        _check_pd(self.Q, "Q")
        _check_pd(self.R, "R")
        _check_pd(self.Q_N, "Q_N")
        if self.N < 1 or self.maxiters < 1:
            raise ValueError("horizon and maxiters must be >= 1")
        if self.W.dim != self.f.n_x:
            raise ValueError("disturbance dimension must match the state")
        if self.beta < 0.0:
            raise ValueError("beta must be nonnegative")
        self.reference.assert_consistent(self.f)
        if not self.terminal_box.contains(self.reference.x_ref):
            raise ValueError("reference tail must lie in the terminal box")
        if not self.U.contains(self.reference.u_ref):
            raise ValueError("reference input must lie in the input set")

    @property
    def n_x(self) -> int:
        return self.f.n_x

    @property
    def n_u(self) -> int:
        return self.f.n_u

    def stage_cost(self, x, u) -> float:
        dx = np.asarray(x, dtype=float) - self.reference.x_ref
        du = np.asarray(u, dtype=float) - self.reference.u_ref
        return float(dx @ self.Q @ dx + du @ self.R @ du)


# ---------------------------------------------------------------------------
# Example 1: 2-state exponential-decay system
# ---------------------------------------------------------------------------


def _example1_continuous() -> ContinuousModelSpec:
    # dx1/dt = x2 + w1
    # dx2/dt = 0.2 exp(-x1) - x2 + u - 0.2 + w2
    # argument p = (x1, x2, u)
    g1 = Affine([0.0, 1.0, 0.0], 0.0)
    g2 = add(Affine([0.0, -1.0, 1.0], -0.2), ExpAffine(0.2, [-1.0, 0.0, 0.0], 0.0))
    zero = Affine.zero(3)
    rhs = DCFunctionSpec(n_x=2, n_u=1, g=(g1, g2), h=(zero, zero))
    return ContinuousModelSpec(rhs=rhs, dt=8e-3)


def _example2_continuous() -> ContinuousModelSpec:
    # Oscillator pair in normal coordinates, eta = 50:
    # dx1/dt = x3, dx2/dt = x4
    # dx3/dt = -(eta^2/2)(x1 + x2) + 3 x1^2 + u1
    # dx4/dt = -(eta^2/2)(x1 + x2) + 3 x2^2 + u2
    # argument p = (x1..x4, u1, u2)
    eta = 50.0
    kappa = eta * eta / 2.0
    dim = 6
    g1 = Affine([0, 0, 1, 0, 0, 0], 0.0)
    g2 = Affine([0, 0, 0, 1, 0, 0], 0.0)
    g3 = add(Affine([-kappa, -kappa, 0, 0, 1, 0], 0.0),
             QuadForm(np.array([[3.0]]), np.array([[1, 0, 0, 0, 0, 0]]),
                      np.zeros(1)))
    g4 = add(Affine([-kappa, -kappa, 0, 0, 0, 1], 0.0),
             QuadForm(np.array([[3.0]]), np.array([[0, 1, 0, 0, 0, 0]]),
                      np.zeros(1)))
    zero = Affine.zero(dim)
    rhs = DCFunctionSpec(n_x=4, n_u=2, g=(g1, g2, g3, g4),
                         h=(zero,) * 4)
    return ContinuousModelSpec(rhs=rhs, dt=1e-2)


def example2_initial_state() -> np.ndarray:
    """Initial condition from the normal-coordinate transform E = (1/sqrt 2)
    [[-1, 1], [1, 1]]: positions E(1,1)', velocities E(1/eta, 1)'."""
    eta = 50.0
    E = np.array([[-1.0, 1.0], [1.0, 1.0]]) / math.sqrt(2.0)
    pos = E @ np.array([1.0, 1.0])
    vel = E @ np.array([1.0 / eta, 1.0])
    return np.concatenate([pos, vel])


def _zero_reference(n_x: int, n_u: int) -> EquilibriumReference:
    return EquilibriumReference(np.zeros(n_x), np.zeros(n_u))


@lru_cache(maxsize=None)
def _example1_cached() -> Tuple[NMPCProblem, RobustProblem]:
    cont = _example1_continuous()
    f = discretize_euler(cont)
    ref = _zero_reference(2, 1)
    Q = np.eye(2)
    R = np.eye(1)
    K, Q_N = term.compute_k_qn(f, ref.x_ref, ref.u_ref, Q, R)

    X_nom = Polytope.symmetric_box([10.0, 10.0])
    U = Polytope.symmetric_box([150.0])
    # Terminal state constraint: the full state set.  A nondegenerate
    # invariant box cannot exist for this model (the first state is an exact
    # integrator of the second), and any materially smaller terminal box is
    # unreachable over one horizon from the intended operating region; the
    # terminal module still reports invariance margins for any candidate box.
    nominal = NMPCProblem(
        f=f, dt=cont.dt, N=25, Q=Q, R=R, Q_N=Q_N,
        X=X_nom, U=U, X_N=X_nom,
        K=K, reference=ref, tol=1e-6, maxiters=3,
        termination_threshold=1e-4)

    X_rob = Polytope.symmetric_box([20.0, 20.0])
    W = DisturbanceBox.from_continuous(0.02, 2, cont.dt)
    t_box = term.synthesize_terminal_box(f, K, X_rob, U, ref.x_ref, ref.u_ref,
                                         Q_N, W.w_lower, W.w_upper)
    beta = term.estimate_beta(f, K, Q_N, Q, R, t_box, W.w_lower, W.w_upper,
                              ref.x_ref, ref.u_ref)
    robust = RobustProblem(
        f=f, dt=cont.dt, N=25, Q=Q, R=R, Q_N=Q_N,
        X=X_rob, U=U, terminal_box=t_box, W=W,
        K=K, reference=ref, beta=beta, tol=1e-6, maxiters=3,
        termination_threshold=1e-4)
    return nominal, robust


def example1() -> Tuple[NMPCProblem, RobustProblem]:
    """2-state exponential-decay system: nominal and robust problem data."""
    return _example1_cached()


def example1_initial_state(robust: bool = False) -> np.ndarray:
    return np.array([6.2, 10.0]) if robust else np.array([5.0, 10.0])


@lru_cache(maxsize=None)
def _example2_cached() -> Tuple[NMPCProblem, RobustProblem]:
    cont = _example2_continuous()
    f = discretize_euler(cont)
    ref = _zero_reference(4, 2)

    Q_nom = 1e-2 * np.eye(4)
    R_nom = 1e-2 * np.eye(2)
    K_nom, QN_nom = term.compute_k_qn(f, ref.x_ref, ref.u_ref, Q_nom, R_nom)
    X_nom = Polytope.symmetric_box([10.0] * 4)
    U_nom = Polytope.symmetric_box([33.0] * 2)
    # Terminal state constraint = state set (see the example-1 note).
    nominal = NMPCProblem(
        f=f, dt=cont.dt, N=25, Q=Q_nom, R=R_nom, Q_N=QN_nom,
        X=X_nom, U=U_nom, X_N=X_nom,
        K=K_nom, reference=ref, tol=1e-6, maxiters=3,
        termination_threshold=1e-6)

    Q_rob = 1e-4 * np.eye(4)
    R_rob = 1e-4 * np.eye(2)
    K_rob, QN_rob = term.compute_k_qn(f, ref.x_ref, ref.u_ref, Q_rob, R_rob)
    X_rob = Polytope.symmetric_box([20.0] * 4)
    U_rob = Polytope.symmetric_box([250.0] * 2)
    W = DisturbanceBox.from_continuous(1e-4, 4, cont.dt)
    t_box = term.synthesize_terminal_box(f, K_rob, X_rob, U_rob, ref.x_ref,
                                         ref.u_ref, QN_rob,
                                         W.w_lower, W.w_upper)
    beta = term.estimate_beta(f, K_rob, QN_rob, Q_rob, R_rob, t_box,
                              W.w_lower, W.w_upper, ref.x_ref, ref.u_ref)
    robust = RobustProblem(
        f=f, dt=cont.dt, N=10, Q=Q_rob, R=R_rob, Q_N=QN_rob,
        X=X_rob, U=U_rob, terminal_box=t_box, W=W,
        K=K_rob, reference=ref, beta=beta, tol=1e-6, maxiters=3,
        termination_threshold=1e-6)
    return nominal, robust


def example2() -> Tuple[NMPCProblem, RobustProblem]:
    """4-state oscillator chain: nominal and robust problem data."""
    return _example2_cached()


PRESETS: dict = {
    "example1": example1,
    "example2": example2,
}


def validate_model_convexity(f: DCFunctionSpec, box_x: Box, box_u: Box,
                             rng: Optional[np.random.Generator] = None):
    """Sampled convexity witness for every g and h component over X x U."""
    stacked = Box(np.concatenate([box_x.lower, box_u.lower]),
                  np.concatenate([box_x.upper, box_u.upper]))
    for j in range(f.n_x):
        check_convexity(f.g[j], stacked, rng=rng)
        check_convexity(f.h[j], stacked, rng=rng)
