"""Terminal ingredients: feedback gain, terminal weight, terminal sets, and
the average-cost constant beta.

The gain K and weight Q_N come from the discrete-time LQR problem for the
model linearized at the reference equilibrium; Q_N is the Riccati fixed
point, so the quadratic decrease inequality holds exactly for the linearized
dynamics.  Terminal sets are axis-aligned boxes around the reference:

  * the nominal terminal set is used as a polytopic state constraint on the
    final predicted stage;
  * the robust terminal family is "all sub-boxes of a fixed box T", which
    turns terminal membership of a bound pair into two affine rows.

Verification is split honestly into exact checks (vertex maxima and smooth
box minima per component, support-function input tests) and sampled checks
(the quadratic decrease condition on a deterministic grid, labelled as
sampled with its grid density).  Box synthesis bisects a scale factor on the
LQR level-set bounding box, accepting the largest box that stays inside the
state set, keeps the terminal controller inside the input set, and whose
one-step image (plus disturbance) stays inside the state set.  One-step
*invariance of the box itself* is reported with margins but is not a gate:
for dynamics with an exact integrator row (both bundled examples), no
nondegenerate axis-aligned box is invariant, and gating on it would collapse
the set to a point.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import List, Optional, Sequence, Tuple

import numpy as np

from .expr import CompiledExpr, DCFunctionSpec, eval_dc_batch, max_over_box, min_over_box
from .geometry import (
    Box,
    Polytope,
    box_in_polytope,
    feedback_image_in_polytope,
    vertices,
)
from .linearize import linearize_at

RICCATI_TOL = 1e-10


class RiccatiError(RuntimeError):
    """Riccati iteration failed to converge (unstabilizable linearization)."""


def solve_dare(A: np.ndarray, B: np.ndarray, Q: np.ndarray, R: np.ndarray,
               tol: float = RICCATI_TOL, max_iter: int = 200_000
               ) -> Tuple[np.ndarray, np.ndarray]:
    """Fixed-point iteration for the discrete algebraic Riccati equation.

    Returns (P, K) with u = K x the optimal feedback; the iteration residual
    is driven below `tol` in the infinity norm.
    """
    A = np.atleast_2d(np.asarray(A, dtype=float))
    B = np.atleast_2d(np.asarray(B, dtype=float))
    Q = np.atleast_2d(np.asarray(Q, dtype=float))
    R = np.atleast_2d(np.asarray(R, dtype=float))
    P = Q.copy()
    for _ in range(max_iter):
        BtP = B.T @ P
        gain_term = np.linalg.solve(R + BtP @ B, BtP @ A)
        P_next = Q + A.T @ P @ A - A.T @ P @ B @ gain_term
        P_next = 0.5 * (P_next + P_next.T)
        if np.max(np.abs(P_next - P)) <= tol:
            P = P_next
            break
        P = P_next
    else:
        raise RiccatiError("Riccati iteration did not converge; the "
                           "linearized pair (A, B) may not be stabilizable")
    K = -np.linalg.solve(R + B.T @ P @ B, B.T @ P @ A)
    return P, K


def compute_k_qn(f: DCFunctionSpec, x_ref, u_ref, Q, R
                 ) -> Tuple[np.ndarray, np.ndarray]:
    """LQR terminal pair (K, Q_N) at the reference point.

    K is the discrete LQR gain for the Jacobian linearization at
    (x_ref, u_ref) with weights (Q, R); Q_N is the Riccati solution, which
    satisfies the terminal decrease inequality exactly for the linearized
    dynamics.  Raises RiccatiError when the closed loop is not contractive.
    """
    step = linearize_at(f, x_ref, u_ref)
    P, K = solve_dare(step.A, step.B, Q, R)
    radius = np.max(np.abs(np.linalg.eigvals(step.A + step.B @ K)))
    if radius >= 1.0:
        raise RiccatiError(f"closed-loop spectral radius {radius:.6f} >= 1")
    return K, P


def dare_residual(P, A, B, Q, R) -> float:
    BtP = B.T @ P
    rhs = Q + A.T @ P @ A - A.T @ P @ B @ np.linalg.solve(R + BtP @ B, BtP @ A)
    return float(np.max(np.abs(P - rhs)))


# ---------------------------------------------------------------------------
# Verification reports
# ---------------------------------------------------------------------------


@dataclass
class CheckResult:
    """One verification condition.

    margin >= 0 means satisfied with that much slack; negative means violated
    by |margin|.  samples > 0 marks a sampled (grid) check rather than an
    exact one.
    """

    name: str
    passed: bool
    margin: float
    samples: int = 0
    detail: str = ""


@dataclass
class TerminalReport:
    checks: List[CheckResult] = field(default_factory=list)

    def add(self, name: str, margin: float, samples: int = 0,
            detail: str = "", tol: float = 1e-12):
        self.checks.append(CheckResult(name, margin >= -tol, float(margin),
                                       samples, detail))

    @property
    def passed(self) -> bool:
        return all(c.passed for c in self.checks)

    def check(self, name: str) -> CheckResult:
        for c in self.checks:
            if c.name == name:
                return c
        raise KeyError(name)

    def exact_passed(self) -> bool:
        return all(c.passed for c in self.checks if c.samples == 0)

    def summary(self) -> str:
        lines = []
        for c in self.checks:
            kind = f"sampled({c.samples})" if c.samples else "exact"
            lines.append(f"{'PASS' if c.passed else 'FAIL'} {c.name} "
                         f"[{kind}] margin={c.margin:+.3e} {c.detail}")
        return "\n".join(lines)


def _feedback_offset(K: np.ndarray, x_ref: np.ndarray, u_ref: np.ndarray
                     ) -> np.ndarray:
    """kappa(x) = K x + c with c = u_ref - K x_ref."""
    return u_ref - K @ x_ref


def _grid_points(box: Box, per_dim: int) -> np.ndarray:
    axes = [np.linspace(box.lower[j], box.upper[j], per_dim)
            for j in range(box.dim)]
    mesh = np.meshgrid(*axes, indexing="ij")
    pts = np.stack([m.ravel() for m in mesh], axis=1)
    return np.vstack([pts, vertices(box)])


def _default_grid_density(n_x: int) -> int:
    return 21 if n_x <= 2 else 9


def interval_propagate(f: DCFunctionSpec, box: Box, K, c, w_lower=None,
                       w_upper=None) -> Box:
    """Sound componentwise bounds of f(x, Kx + c) + w over a box.

    Convex components are extremized exactly (vertex maximum, smooth box
    minimum); for difference-of-convex components the interval combination
    max g - min h / min g - max h is used, which over-approximates the range.
    """
    n_x = f.n_x
    K = np.atleast_2d(np.asarray(K, dtype=float))
    c = np.asarray(c, dtype=float).ravel()
    lo = np.zeros(n_x)
    up = np.zeros(n_x)
    for j in range(n_x):
        g_max, _ = max_over_box(f.g[j], box, feedback=(K, c))
        g_min, _ = min_over_box(f.g[j], box, feedback=(K, c))
        if f.h_is_zero(j):
            up[j], lo[j] = g_max, g_min
        else:
            h_max, _ = max_over_box(f.h[j], box, feedback=(K, c))
            h_min, _ = min_over_box(f.h[j], box, feedback=(K, c))
            up[j] = g_max - h_min
            lo[j] = g_min - h_max
    if w_lower is not None:
        lo = lo + np.asarray(w_lower, dtype=float).ravel()
    if w_upper is not None:
        up = up + np.asarray(w_upper, dtype=float).ravel()
    return Box(np.minimum(lo, up), np.maximum(lo, up))


def _quad(M: np.ndarray, V: np.ndarray) -> np.ndarray:
    """Row-wise v' M v for stacked vectors V (n_pts, n)."""
    return np.einsum("ij,jk,ik->i", V, M, V)


def verify_terminal_nominal(f: DCFunctionSpec, K, Q_N, candidate: Box,
                            U: Polytope, Q, R, x_ref, u_ref,
                            grid_per_dim: Optional[int] = None
                            ) -> TerminalReport:
    """Verify nominal terminal conditions for a candidate box.

    Exact checks: reference membership, per-component one-step invariance
    (vertex maxima / smooth minima), and terminal-controller input
    feasibility via support rows.  Sampled check: the quadratic decrease
    inequality on a deterministic grid plus vertices (density recorded).
    """
    K = np.atleast_2d(np.asarray(K, dtype=float))
    Q_N = np.atleast_2d(np.asarray(Q_N, dtype=float))
    Q = np.atleast_2d(np.asarray(Q, dtype=float))
    R = np.atleast_2d(np.asarray(R, dtype=float))
    x_ref = np.asarray(x_ref, dtype=float).ravel()
    u_ref = np.asarray(u_ref, dtype=float).ravel()
    c = _feedback_offset(K, x_ref, u_ref)
    report = TerminalReport()

    ref_margin = float(np.min(np.minimum(candidate.upper - x_ref,
                                         x_ref - candidate.lower)))
    report.add("contains_reference", ref_margin)

    report.add("input_feasible",
               _support_margin_feedback(candidate, K, c, U),
               detail="terminal controller stays in the input set")

    prop = interval_propagate(f, candidate, K, c)
    inv_upper = float(np.min(candidate.upper - prop.upper))
    inv_lower = float(np.min(prop.lower - candidate.lower))
    report.add("invariance_upper", inv_upper,
               detail="one-step componentwise maxima vs box upper bounds")
    report.add("invariance_lower", inv_lower,
               detail="one-step componentwise minima vs box lower bounds")

    per_dim = grid_per_dim or _default_grid_density(f.n_x)
    pts = _grid_points(candidate, per_dim)
    u_pts = pts @ K.T + c
    nxt = eval_dc_batch(f, np.hstack([pts, u_pts]))
    stage = _quad(Q, pts - x_ref) + _quad(R, u_pts - u_ref)
    decrease = stage + _quad(Q_N, nxt - x_ref) - _quad(Q_N, pts - x_ref)
    report.add("cost_decrease", float(-np.max(decrease)), samples=pts.shape[0],
               detail=f"grid {per_dim}/dim plus vertices; sampled, not exact",
               tol=1e-9)
    return report


def _support_margin_feedback(box: Box, K, c, poly: Polytope) -> float:
    from .geometry import support_rows

    c_up, c_lo, h, d = support_rows(poly, gain=K)
    lhs = c_up @ box.upper + c_lo @ box.lower + h @ np.asarray(c, dtype=float)
    return float(np.min(d - lhs))


def _support_margin_state(box: Box, poly: Polytope) -> float:
    from .geometry import support_rows

    c_up, c_lo, h, d = support_rows(poly)
    lhs = c_up @ box.upper + c_lo @ box.lower
    return float(np.min(d - lhs))


def verify_terminal_robust(f: DCFunctionSpec, K, T: Box, w_lower, w_upper,
                           U: Polytope, x_ref, u_ref) -> TerminalReport:
    """Verify the robust terminal family (all sub-boxes of T).

    Interval propagation is monotone in the input box, so checking the
    extreme pair (the box T itself) suffices: if T's one-step bounds plus the
    disturbance stay inside T, any sub-box's do too.
    """
    K = np.atleast_2d(np.asarray(K, dtype=float))
    x_ref = np.asarray(x_ref, dtype=float).ravel()
    u_ref = np.asarray(u_ref, dtype=float).ravel()
    c = _feedback_offset(K, x_ref, u_ref)
    report = TerminalReport()

    ref_margin = float(np.min(np.minimum(T.upper - x_ref, x_ref - T.lower)))
    report.add("contains_reference", ref_margin)
    report.add("input_feasible", _support_margin_feedback(T, K, c, U))

    prop = interval_propagate(f, T, K, c, w_lower, w_upper)
    report.add("invariance_upper", float(np.min(T.upper - prop.upper)),
               detail="propagated upper bounds + disturbance vs T")
    report.add("invariance_lower", float(np.min(prop.lower - T.lower)),
               detail="propagated lower bounds + disturbance vs T")
    return report


def estimate_beta(f: DCFunctionSpec, K, Q_N, Q, R, T: Box, w_lower, w_upper,
                  x_ref, u_ref, grid_per_dim: Optional[int] = None,
                  safety: float = 1.10) -> float:
    """Average-cost constant: grid estimate of the worst positive part of

        l(x, kappa(x)) + ||f(x,kappa(x)) + w - x_ref||^2_{Q_N}
                       - ||x - x_ref||^2_{Q_N}

    over x in T and disturbance vertices, inflated by a safety factor.
    An estimate, not a certificate: the grid is recorded, not exhaustive.
    """
    K = np.atleast_2d(np.asarray(K, dtype=float))
    Q_N = np.atleast_2d(np.asarray(Q_N, dtype=float))
    Q = np.atleast_2d(np.asarray(Q, dtype=float))
    R = np.atleast_2d(np.asarray(R, dtype=float))
    x_ref = np.asarray(x_ref, dtype=float).ravel()
    u_ref = np.asarray(u_ref, dtype=float).ravel()
    c = _feedback_offset(K, x_ref, u_ref)
    per_dim = grid_per_dim or _default_grid_density(f.n_x)
    pts = _grid_points(T, per_dim)
    u_pts = pts @ K.T + c
    nxt = eval_dc_batch(f, np.hstack([pts, u_pts]))
    stage = _quad(Q, pts - x_ref) + _quad(R, u_pts - u_ref)
    v_now = _quad(Q_N, pts - x_ref)
    w_box = Box(np.asarray(w_lower, dtype=float), np.asarray(w_upper, dtype=float))
    worst = 0.0
    for w in vertices(w_box):
        diff = stage + _quad(Q_N, nxt + w - x_ref) - v_now
        worst = max(worst, float(np.max(diff)))
    return safety * max(0.0, worst)


# ---------------------------------------------------------------------------
# Synthesis
# ---------------------------------------------------------------------------


def _level_set_halfwidths(Q_N: np.ndarray) -> np.ndarray:
    """Bounding-box halfwidths of {x : x' Q_N x <= 1}."""
    inv = np.linalg.inv(Q_N)
    return np.sqrt(np.clip(np.diag(inv), 0.0, None))


def synthesize_terminal_box(f: DCFunctionSpec, K, X: Polytope, U: Polytope,
                            x_ref, u_ref, Q_N,
                            w_lower=None, w_upper=None,
                            bisect_iters: int = 60) -> Box:
    """Largest LQR-level-set-shaped box passing the synthesis gates.

    Gates (all exact): box inside the state set; terminal controller image
    inside the input set; one-step propagated bounds (plus disturbance, when
    given) inside the state set.  Bisects the scale of the Riccati level-set
    bounding box around the reference.
    """
    K = np.atleast_2d(np.asarray(K, dtype=float))
    x_ref = np.asarray(x_ref, dtype=float).ravel()
    u_ref = np.asarray(u_ref, dtype=float).ravel()
    c = _feedback_offset(K, x_ref, u_ref)
    hw = _level_set_halfwidths(np.atleast_2d(np.asarray(Q_N, dtype=float)))
    if np.any(hw <= 0.0):
        raise ValueError("terminal weight produced a degenerate level set")

    bb = X.bounding_box()
    slack = np.minimum(bb.upper - x_ref, x_ref - bb.lower)
    if np.any(slack <= 0.0):
        raise ValueError("reference is not strictly inside the state set")
    scale_hi = float(np.min(slack / hw))

    def gates(scale: float) -> bool:
        box = Box(x_ref - scale * hw, x_ref + scale * hw)
        if not box_in_polytope(box, np.zeros(box.dim), X, tol=0.0):
            return False
        if _support_margin_feedback(box, K, c, U) < 0.0:
            return False
        prop = interval_propagate(f, box, K, c, w_lower, w_upper)
        return box_in_polytope(prop, np.zeros(prop.dim), X, tol=0.0)

    lo_scale = 0.0
    hi_scale = scale_hi
    if gates(hi_scale):
        lo_scale = hi_scale
    else:
        for _ in range(bisect_iters):
            mid = 0.5 * (lo_scale + hi_scale)
            if gates(mid):
                lo_scale = mid
            else:
                hi_scale = mid
    if lo_scale == 0.0:
        raise ValueError("no nondegenerate terminal box passes the gates")
    return Box(x_ref - lo_scale * hw, x_ref + lo_scale * hw)


# ---------------------------------------------------------------------------
# Serialization sidecar
# ---------------------------------------------------------------------------


@dataclass
class TerminalIngredients:
    K: np.ndarray
    Q_N: np.ndarray
    terminal_box: Box
    beta: float = 0.0
    nominal_report: Optional[TerminalReport] = None
    robust_report: Optional[TerminalReport] = None

    def to_json(self) -> str:
        def report(r):
            if r is None:
                return None
            return [{"name": c.name, "passed": c.passed, "margin": c.margin,
                     "samples": c.samples, "detail": c.detail}
                    for c in r.checks]

        return json.dumps({
            "K": self.K.tolist(),
            "Q_N": self.Q_N.tolist(),
            "terminal_lower": self.terminal_box.lower.tolist(),
            "terminal_upper": self.terminal_box.upper.tolist(),
            "beta": self.beta,
            "nominal_report": report(self.nominal_report),
            "robust_report": report(self.robust_report),
        }, indent=2)

    @staticmethod
    def from_json(text: str) -> "TerminalIngredients":
        data = json.loads(text)

        def report(entries):
            if entries is None:
                return None
            rep = TerminalReport()
            for e in entries:
                rep.checks.append(CheckResult(e["name"], e["passed"],
                                              e["margin"], e["samples"],
                                              e["detail"]))
            return rep

        return TerminalIngredients(
            K=np.array(data["K"], dtype=float),
            Q_N=np.array(data["Q_N"], dtype=float),
            terminal_box=Box(np.array(data["terminal_lower"]),
                             np.array(data["terminal_upper"])),
            beta=float(data["beta"]),
            nominal_report=report(data.get("nominal_report")),
            robust_report=report(data.get("robust_report")),
        )
