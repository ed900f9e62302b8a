"""Robust tube MPC by successive convexification over box state tubes.

The closed loop applies u = K x + c0_k, where the feedforward sequence c0 is
improved once per time step by a short sequence of convex subproblems:

1.  Around the current c0, propagate a box tube containing every trajectory
    of the disturbed closed loop (`seed_tube_and_linearize`).  Each component
    of the one-step map is a difference g - h of convex functions; over a box
    the convex part is bounded above by its vertex maximum and the concave
    part below by the minimum of the convex function it subtracts, so the
    image of a box, widened by the disturbance box, is again a box.  The
    per-component extremizers double as base points for the linearizations.

2.  Solve a convex program over a correction sequence c, the tube bounds, and
    per-stage epigraph scalars (`build_rcmpc` / `solve_rcmpc`).  Image rows
    keep each side of the difference exact where it appears convexly and
    replace the other side by its supporting tangent, enforced at every
    vertex of the stage box; polytope rows keep the tube inside the state set
    and its feedback image inside the input set; the terminal cross-section
    is pinned inside the terminal box.  The objective is the worst-case
    tracking cost over the tube.

3.  Absorb the correction, c0 <- c* + c0, and repeat until ||c*|| is small.

Tube coordinates are absolute states (not deviations from a rolled seed
trajectory): the nominal scheme's seed is replaced by the pair (c0, X0).
With a zero disturbance box every cross-section collapses to the rolled
trajectory of c0 and the scheme reduces to the nominal one.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Dict, List, Optional, Tuple

import numpy as np

from .expr import (
    Flattened,
    compose_affine,
    eval_dc,
    flatten,
    max_over_box,
    min_over_box,
)
from .geometry import (
    Box,
    BoxTube,
    EnumerationCapError,
    VERTEX_CAP_DIM,
    support_rows,
)
from .linearize import LinearizedStep, linearize_rows
from .models import DisturbanceBox, RobustProblem
from .nominal import (
    INIT_STALL_RELATIVE,
    INIT_STALL_WINDOW,
    INIT_SUCCESS_GAP,
    SeedInitializationError,
    SeedTrajectory,
    SubproblemError,
    VariableLayout,
    _AffineRow,
    _cost_sqrt_rows,
)
from .solver import ConvexProgram, Solution, SolverOptions, solve

__all__ = [
    "seed_tube_and_linearize",
    "build_rcmpc",
    "build_rcmpc_init",
    "solve_rcmpc",
    "RcMPCSolution",
    "RobustIterationRecord",
    "RobustStepResult",
    "run_time_step_robust",
    "initialize_seed_robust",
    "perturbation_from_reference",
    "perturbation_from_seed",
    "perturbation_to_seed",
    "RobustFeasibilityReport",
    "robust_seed_feasibility_report",
]


# ---------------------------------------------------------------------------
# Feedforward perturbations
# ---------------------------------------------------------------------------


def _as_perturbation(c0, n_u: int) -> np.ndarray:
    c0 = np.atleast_2d(np.asarray(c0, dtype=float))
    if c0.shape[1] != n_u:
        raise ValueError("perturbation width does not match the input size")
    return c0


def perturbation_from_reference(problem: RobustProblem,
                                time_index: int = 0) -> np.ndarray:
    """Feedforward sequence that tracks the reference tail exactly:
    c0_k = u_r(i+k) - K x_r(i+k), so K x + c0_k equals u_r on the reference."""
    ref = problem.reference
    return np.stack([ref.u(time_index + k) - problem.K @ ref.x(time_index + k)
                     for k in range(problem.N)])


def perturbation_from_seed(seed: SeedTrajectory, K: np.ndarray) -> np.ndarray:
    """Feedforward sequence replicating a nominal seed trajectory: with
    c0_k = u_k - K x_k the policy K x + c0_k reproduces the seed inputs along
    the seed states, and with a zero disturbance box the tube collapses onto
    the seed."""
    K = np.atleast_2d(np.asarray(K, dtype=float))
    return seed.inputs - seed.states[:-1] @ K.T


def perturbation_to_seed(f, x_i: np.ndarray, c0: np.ndarray,
                         K: np.ndarray) -> SeedTrajectory:
    """Roll the undisturbed closed loop u = K x + c0_k from x_i."""
    c0 = _as_perturbation(c0, f.n_u)
    K = np.atleast_2d(np.asarray(K, dtype=float))
    N = c0.shape[0]
    states = np.empty((N + 1, f.n_x))
    inputs = np.empty((N, f.n_u))
    states[0] = np.asarray(x_i, dtype=float).ravel()
    for k in range(N):
        inputs[k] = K @ states[k] + c0[k]
        states[k + 1] = eval_dc(f, states[k], inputs[k])
    return SeedTrajectory(states, inputs)


# ---------------------------------------------------------------------------
# Tube propagation around a feedforward sequence
# ---------------------------------------------------------------------------


def seed_tube_and_linearize(f, x_i: np.ndarray, c0: np.ndarray,
                            K: np.ndarray, W: DisturbanceBox
                            ) -> Tuple[BoxTube, Tuple[LinearizedStep, ...]]:
    """Propagate the disturbed closed loop u = K x + c0_k through box
    cross-sections and linearize each stage at its box extremizers.

    Stage k maps the box X_k through every component f_j = g_j - h_j:

        upper_{k+1,j} = max_{x in X_k} g_j(x, Kx + c0_k) - min h_j + w_up_j
        lower_{k+1,j} = min g_j - min h_j + w_lo_j

    Both bounds use the same minimum of the concave part's convex function,
    so upper >= lower always.  The convex parts are linearized at their own
    per-component minimizers; anchoring each tangent at its box argmin makes
    the tangent's minimum over the box coincide with the function's, which
    is what keeps the tube rows below satisfiable by the tube itself.
    """
    x_i = np.asarray(x_i, dtype=float).ravel()
    c0 = _as_perturbation(c0, f.n_u)
    K = np.atleast_2d(np.asarray(K, dtype=float))
    N, n_x = c0.shape[0], f.n_x
    if x_i.shape[0] != n_x:
        raise ValueError("initial state dimension mismatch")
    if n_x > VERTEX_CAP_DIM:
        raise EnumerationCapError(
            f"box tube propagation enumerates 2^{n_x} vertices per stage, "
            f"beyond the enumeration cap of {VERTEX_CAP_DIM}")
    lower = np.empty((N + 1, n_x))
    upper = np.empty((N + 1, n_x))
    lower[0] = upper[0] = x_i
    steps: List[LinearizedStep] = []
    for k in range(N):
        box = Box(lower[k], upper[k])
        fb = (K, c0[k])
        points_g: List[Tuple[np.ndarray, np.ndarray]] = []
        points_h: List[Tuple[np.ndarray, np.ndarray]] = []
        for j in range(n_x):
            g_max, _ = max_over_box(f.g[j], box, feedback=fb)
            g_min, xg = min_over_box(f.g[j], box, feedback=fb)
            h_min, xh = min_over_box(f.h[j], box, feedback=fb)
            points_g.append((xg, K @ xg + c0[k]))
            points_h.append((xh, K @ xh + c0[k]))
            upper[k + 1, j] = g_max - h_min + W.w_upper[j]
            lower[k + 1, j] = g_min - h_min + W.w_lower[j]
        steps.append(linearize_rows(f, points_g, points_h=points_h))
    return BoxTube(lower, upper), tuple(steps)


def _nesting_margin(inner: BoxTube, outer: BoxTube) -> float:
    """Max violation of inner <= outer per cross-section; <= 0 means nested."""
    return float(max(np.max(outer.lower - inner.lower),
                     np.max(inner.upper - outer.upper)))


# ---------------------------------------------------------------------------
# Subproblem assembly
# ---------------------------------------------------------------------------


def _raw_atoms(flat: Flattened):
    """Square/exp atoms of a flattened convex function, un-anchored.

    Returns (sq, ex) with sq entries (coef, off) for terms (coef'q + off)^2
    and ex entries (scale, coef, off) for terms scale * exp(coef'q + off)."""
    sq = []
    for Wq, C, d in flat.quads:
        evals, evecs = np.linalg.eigh(Wq)
        for lam_e, v_e in zip(evals, evecs.T):
            if lam_e <= 1e-14:
                continue
            coef = np.sqrt(lam_e) * (v_e @ C)
            sq.append((coef, float(np.sqrt(lam_e) * (v_e @ d))))
    ex = [(float(s), np.asarray(a, dtype=float), float(b))
          for s, a, b in flat.exps]
    return sq, ex


def _feedback_embedding(n_x: int, n_u: int, K: np.ndarray,
                        c0_k: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    """Affine map (x, c) -> (x, K x + c + c0_k) into the model argument."""
    M = np.zeros((n_x + n_u, n_x + n_u))
    M[:n_x, :n_x] = np.eye(n_x)
    M[n_x:, :n_x] = K
    M[n_x:, n_x:] = np.eye(n_u)
    m = np.concatenate([np.zeros(n_x), c0_k])
    return M, m


def _emit_robust_polytope_rows(prog: ConvexProgram, layout: VariableLayout,
                               problem: RobustProblem,
                               c0: np.ndarray) -> None:
    """State rows (X_k in X for k < N), input rows (K X_k + c_k + c0_k in U)
    and the terminal box pinning X_N."""
    CX_up, CX_lo, HX, dX = support_rows(problem.X)
    for k in range(problem.N):
        lo_idx, up_idx = layout.s_lo(k), layout.s_up(k)
        for r in range(HX.shape[0]):
            row = _AffineRow()
            row.add(up_idx, CX_up[r])
            row.add(lo_idx, CX_lo[r])
            row.const = -float(dX[r])
            prog.new_inequality_row(row.idx, row.val, row.const,
                                    name=f"state[{k},{r}]")
    CU_up, CU_lo, HU, dU = support_rows(problem.U, gain=problem.K)
    for k in range(problem.N):
        shift = HU @ c0[k] - dU
        lo_idx, up_idx = layout.s_lo(k), layout.s_up(k)
        c_idx = layout.c(k)
        for r in range(HU.shape[0]):
            row = _AffineRow()
            row.add(up_idx, CU_up[r])
            row.add(lo_idx, CU_lo[r])
            row.add(c_idx, HU[r])
            row.const = float(shift[r])
            prog.new_inequality_row(row.idx, row.val, row.const,
                                    name=f"input[{k},{r}]")
    T = problem.terminal_box
    lo_idx, up_idx = layout.s_lo(problem.N), layout.s_up(problem.N)
    for d in range(problem.n_x):
        prog.new_inequality_row([int(up_idx[d])], [1.0], -float(T.upper[d]),
                                name=f"terminal_up[{d}]")
        prog.new_inequality_row([int(lo_idx[d])], [-1.0], float(T.lower[d]),
                                name=f"terminal_lo[{d}]")


def _emit_robust_image_rows(prog: ConvexProgram, layout: VariableLayout,
                            problem: RobustProblem,
                            lin: Tuple[LinearizedStep, ...],
                            c0: np.ndarray) -> None:
    """One-step image rows at every vertex of each stage box.

    For component j with model row f_j = g_j - h_j, base points taken from
    the stage linearization, and q = (x, c) the stacked vertex/correction
    argument:

        upper:  g_j(x, Kx + c + c0_k) - [tangent of h_j](x, c) + w_up_j
                  <= xup_{k+1,j}
        lower:  xlo_{k+1,j}
                  <= [tangent of g_j](x, c) - h_j(x, Kx + c + c0_k) + w_lo_j

    Each row keeps one side exact (it enters the <= 0 form convexly) and
    supports the other side from below by its tangent.  Over a box the upper
    row's left side is convex in x and the lower row's right side is concave,
    so enforcing them at all 2^{n_x} vertices enforces them on the whole box.
    """
    n_x, n_u = problem.n_x, problem.n_u
    if n_x > VERTEX_CAP_DIM:
        raise EnumerationCapError(
            f"image rows enumerate 2^{n_x} box vertices per stage, beyond "
            f"the enumeration cap of {VERTEX_CAP_DIM}")
    K = problem.K
    w_up, w_lo = problem.W.w_upper, problem.W.w_lower
    for k in range(problem.N):
        step = lin[k]
        M, m = _feedback_embedding(n_x, n_u, K, c0[k])
        g_flat = [flatten(compose_affine(problem.f.g[j], M, m))
                  for j in range(n_x)]
        h_flat = [flatten(compose_affine(problem.f.h[j], M, m))
                  for j in range(n_x)]
        AKg = step.Ag + step.Bg @ K
        AKh = step.Ah + step.Bh @ K
        lo_idx, up_idx = layout.s_lo(k), layout.s_up(k)
        nlo_idx, nup_idx = layout.s_lo(k + 1), layout.s_up(k + 1)
        c_idx = layout.c(k)
        for j in range(n_x):
            sq_g, ex_g = _raw_atoms(g_flat[j])
            sq_h, ex_h = _raw_atoms(h_flat[j])
            x0g = step.base_g[j][:n_x]
            x0h = step.base_h[j][:n_x]
            # Affine parts over (x, c) and the constant, per row family.
            up_lin_x = g_flat[j].lin[:n_x] - AKh[j]
            up_lin_c = g_flat[j].lin[n_x:] - step.Bh[j]
            up_const = float(g_flat[j].const - step.hval[j]
                             + AKh[j] @ x0h + w_up[j])
            lo_lin_x = h_flat[j].lin[:n_x] - AKg[j]
            lo_lin_c = h_flat[j].lin[n_x:] - step.Bg[j]
            lo_const = float(h_flat[j].const - step.gval[j]
                             + AKg[j] @ x0g - w_lo[j])
            for bits in range(1 << n_x):
                sel = np.array([up_idx[d] if (bits >> d) & 1 else lo_idx[d]
                                for d in range(n_x)])
                row = _AffineRow()
                row.add(sel, up_lin_x)
                row.add(c_idx, up_lin_c)
                row.add(nup_idx[j], -1.0)
                row.const = up_const
                rid = prog.new_inequality_row(row.idx, row.val, row.const,
                                              name=f"img_up[{k},{j}]@v{bits}")
                for coef, off in sq_g:
                    prog.add_square_term(rid, list(sel) + list(c_idx),
                                         list(coef[:n_x]) + list(coef[n_x:]),
                                         off)
                for scale, coef, off in ex_g:
                    prog.add_exp_term(rid, scale,
                                      list(sel) + list(c_idx),
                                      list(coef[:n_x]) + list(coef[n_x:]),
                                      off)

                row = _AffineRow()
                row.add(sel, lo_lin_x)
                row.add(c_idx, lo_lin_c)
                row.add(nlo_idx[j], 1.0)
                row.const = lo_const
                rid = prog.new_inequality_row(row.idx, row.val, row.const,
                                              name=f"img_lo[{k},{j}]@v{bits}")
                for coef, off in sq_h:
                    prog.add_square_term(rid, list(sel) + list(c_idx),
                                         list(coef[:n_x]) + list(coef[n_x:]),
                                         off)
                for scale, coef, off in ex_h:
                    prog.add_exp_term(rid, scale,
                                      list(sel) + list(c_idx),
                                      list(coef[:n_x]) + list(coef[n_x:]),
                                      off)


def _emit_robust_epigraph_rows(prog: ConvexProgram, layout: VariableLayout,
                               problem: RobustProblem,
                               c0: np.ndarray) -> None:
    """Per-stage worst-case tracking cost: t_k >= cost at every box vertex,
    with the input written through the policy u = K x + c_k + c0_k."""
    n_x = problem.n_x
    LQ = _cost_sqrt_rows(problem.Q)
    LR = _cost_sqrt_rows(problem.R)
    LQN = _cost_sqrt_rows(problem.Q_N)
    KR = LR @ problem.K
    for k in range(problem.N + 1):
        terminal = k == problem.N
        xref = problem.reference.x(k)
        lo_idx, up_idx = layout.s_lo(k), layout.s_up(k)
        t_idx = layout.t(k)
        if not terminal:
            uref = problem.reference.u(k)
            c_idx = layout.c(k)
        n_vertices = 1 if k == 0 else (1 << n_x)  # X_0 is a singleton
        for bits in range(n_vertices):
            sel = np.array([up_idx[d] if (bits >> d) & 1 else lo_idx[d]
                            for d in range(n_x)])
            rid = prog.new_inequality_row([t_idx], [-1.0], 0.0,
                                          name=f"cost[{k}]@v{bits}")
            Lx = LQN if terminal else LQ
            for r in range(Lx.shape[0]):
                prog.add_square_term(rid, sel, Lx[r], -float(Lx[r] @ xref))
            if not terminal:
                for r in range(LR.shape[0]):
                    prog.add_square_term(
                        rid, list(sel) + list(c_idx),
                        list(KR[r]) + list(LR[r]),
                        float(LR[r] @ (c0[k] - uref)))


def build_rcmpc(problem: RobustProblem, tube: BoxTube,
                lin: Tuple[LinearizedStep, ...], c0: np.ndarray
                ) -> Tuple[ConvexProgram, VariableLayout]:
    """Assemble the robust tube subproblem around (c0, tube).

    `tube` and `lin` must come from `seed_tube_and_linearize` with the same
    c0; the pair (c = 0, X = tube) is then feasible for the program, which
    is what guarantees solvability at every iteration.
    """
    c0 = _as_perturbation(c0, problem.n_u)
    if c0.shape[0] != problem.N or tube.horizon != problem.N:
        raise ValueError("perturbation/tube horizon does not match")
    if len(lin) != problem.N:
        raise ValueError("need one stage linearization per step")
    layout = VariableLayout(problem.N, problem.n_x, problem.n_u)
    prog = ConvexProgram(layout.total)
    prog.add_objective_linear(
        [layout.t(k) for k in range(problem.N + 1)],
        np.ones(problem.N + 1))
    x_i = tube.lower[0]
    for j, (lo, up) in enumerate(zip(layout.s_lo(0), layout.s_up(0))):
        prog.add_equality([int(lo)], [1.0], float(x_i[j]))
        prog.add_equality([int(up)], [1.0], float(x_i[j]))
    _emit_robust_polytope_rows(prog, layout, problem, c0)
    _emit_robust_image_rows(prog, layout, problem, lin, c0)
    _emit_robust_epigraph_rows(prog, layout, problem, c0)
    return prog, layout


def build_rcmpc_init(problem: RobustProblem, tube: BoxTube,
                     lin: Tuple[LinearizedStep, ...], c0: np.ndarray,
                     x_init: np.ndarray
                     ) -> Tuple[ConvexProgram, VariableLayout]:
    """Seed-search subproblem: the stage-0 cross-section is a free singleton
    and the objective pulls it toward the requested initial state."""
    c0 = _as_perturbation(c0, problem.n_u)
    layout = VariableLayout(problem.N, problem.n_x, problem.n_u,
                            with_epigraph=False)
    prog = ConvexProgram(layout.total)
    lo0, up0 = layout.s_lo(0), layout.s_up(0)
    for lo, up in zip(lo0, up0):
        prog.add_equality([int(lo), int(up)], [1.0, -1.0], 0.0)
    x_init = np.asarray(x_init, dtype=float).ravel()
    for d in range(problem.n_x):
        prog.add_objective_square([int(up0[d])], [1.0], -float(x_init[d]))
    _emit_robust_polytope_rows(prog, layout, problem, c0)
    _emit_robust_image_rows(prog, layout, problem, lin, c0)
    return prog, layout


# ---------------------------------------------------------------------------
# Solutions and the per-time-step iteration
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class RcMPCSolution:
    c: np.ndarray            # (N, n_u) feedforward corrections
    tube: BoxTube            # solved tube, absolute state coordinates
    J: float                 # epigraph objective (worst-case cost)
    stage_costs: np.ndarray  # epigraph scalars t_k
    solver: Solution

    @property
    def c_norm(self) -> float:
        return float(np.linalg.norm(self.c))


def _unpack_rcmpc(problem: RobustProblem, layout: VariableLayout,
                  sol: Solution) -> RcMPCSolution:
    z = sol.z
    c = np.stack([z[layout.c(k)] for k in range(problem.N)])
    lower = np.stack([z[layout.s_lo(k)] for k in range(problem.N + 1)])
    upper = np.stack([z[layout.s_up(k)] for k in range(problem.N + 1)])
    cross = lower > upper
    if np.any(cross):
        mid = 0.5 * (lower[cross] + upper[cross])
        lower[cross] = mid
        upper[cross] = mid
    t = np.array([z[layout.t(k)] for k in range(problem.N + 1)])
    return RcMPCSolution(c=c, tube=BoxTube(lower, upper), J=sol.objective,
                         stage_costs=t, solver=sol)


def _vertex_cost(problem: RobustProblem, box_lo: np.ndarray,
                 box_up: np.ndarray, k: int, c0_k) -> float:
    """Worst tracking cost over the vertices of one stage box under the
    policy u = K x + c0_k (terminal stage: state cost only)."""
    terminal = k == problem.N
    xref = problem.reference.x(k)
    worst = -np.inf
    for bits in range(1 << problem.n_x):
        xv = np.array([box_up[d] if (bits >> d) & 1 else box_lo[d]
                       for d in range(problem.n_x)])
        dx = xv - xref
        val = float(dx @ (problem.Q_N if terminal else problem.Q) @ dx)
        if not terminal:
            du = problem.K @ xv + c0_k - problem.reference.u(k)
            val += float(du @ problem.R @ du)
        worst = max(worst, val)
    return worst


def _primal_start(problem: RobustProblem, layout: VariableLayout,
                  tube: BoxTube, c0: np.ndarray) -> np.ndarray:
    """Feasible primal start built from the propagated tube: corrections at
    zero, tube bounds as propagated, epigraph at the worst vertex cost.

    The subproblem variables are absolute tube bounds, so the all-zero
    default start sits far outside the operating region and can stall the
    interior-point method; this point satisfies every row by construction.
    """
    z = np.zeros(layout.total)
    for k in range(layout.N + 1):
        z[layout.s_lo(k)] = tube.lower[k]
        z[layout.s_up(k)] = tube.upper[k]
        if layout.with_epigraph:
            c0_k = c0[k] if k < layout.N else None
            z[layout.t(k)] = _vertex_cost(problem, tube.lower[k],
                                          tube.upper[k], k, c0_k) + 1.0
    return z


def solve_rcmpc(problem: RobustProblem, tube: BoxTube,
                lin: Tuple[LinearizedStep, ...], c0: np.ndarray,
                warm_start: Optional[np.ndarray] = None,
                options: Optional[SolverOptions] = None) -> RcMPCSolution:
    prog, layout = build_rcmpc(problem, tube, lin, c0)
    if warm_start is None:
        warm_start = _primal_start(problem, layout, tube, c0)
    sol = solve(prog, warm_start=warm_start, options=options)
    # Accept reduced-accuracy solutions whose recomputed residuals clear the
    # usable() thresholds: once the corrections converge, the squeezed
    # epigraph/bound pairs carry dual rays and complementarity cannot be
    # certified to full tolerance even at an essentially optimal iterate.
    if not sol.usable():
        raise SubproblemError(sol.status,
                              detail=f"kkt={sol.kkt}, n={prog.n}, "
                                     f"rows={prog.n_ineq}")
    return _unpack_rcmpc(problem, layout, sol)


@dataclass(frozen=True)
class RobustIterationRecord:
    iteration: int
    J_star: float
    c_norm: float
    solver_iterations: int
    solver_status: str
    seed_tube_max_width: float  # widest cross-section of the propagated tube
    tube_max_width: float       # widest cross-section of the solved tube
    nesting_margin: float       # propagated tube inside the previous solved
                                # tube; <= 0 means nested, nan on iteration 1


@dataclass(frozen=True)
class RobustStepResult:
    u: np.ndarray
    seed: np.ndarray              # shifted perturbation for the next step
    records: Tuple[RobustIterationRecord, ...]
    predicted_terminal_norm: float
    perturbation: np.ndarray      # converged perturbation at this step
    tube: BoxTube                 # tube from the final subproblem solve
    first_seed_tube: BoxTube      # propagated tube of the first iteration
    iteration_tubes: Tuple[BoxTube, ...] = ()  # solved tube per iteration,
                                               # kept only on request

    @property
    def iterations(self) -> int:
        return len(self.records)


def run_time_step_robust(problem: RobustProblem, c0: np.ndarray,
                         x_i: np.ndarray, time_index: int = 0,
                         options: Optional[SolverOptions] = None,
                         keep_iteration_tubes: bool = False
                         ) -> RobustStepResult:
    """One closed-loop time step: iterate propagate/solve/absorb, apply the
    policy input for the measured state, and shift the perturbation."""
    x_i = np.asarray(x_i, dtype=float).ravel()
    c0 = _as_perturbation(c0, problem.n_u).copy()
    records: List[RobustIterationRecord] = []
    prev: Optional[RcMPCSolution] = None
    first_tube: Optional[BoxTube] = None
    kept_tubes: List[BoxTube] = []
    for n in range(1, problem.maxiters + 1):
        tube0, lin = seed_tube_and_linearize(problem.f, x_i, c0,
                                             problem.K, problem.W)
        if first_tube is None:
            first_tube = tube0
        margin = (np.nan if prev is None
                  else _nesting_margin(tube0, prev.tube))
        # Each solve starts from the propagated tube's feasible point; a
        # tube carried over from the previous iteration satisfies the old
        # rows, not the re-linearized ones.
        sol = solve_rcmpc(problem, tube0, lin, c0, options=options)
        records.append(RobustIterationRecord(
            iteration=n,
            J_star=sol.J,
            c_norm=sol.c_norm,
            solver_iterations=sol.solver.iterations,
            solver_status=sol.solver.status,
            seed_tube_max_width=tube0.max_width(),
            tube_max_width=sol.tube.max_width(),
            nesting_margin=float(margin),
        ))
        c0 = sol.c + c0
        prev = sol
        if keep_iteration_tubes:
            kept_tubes.append(sol.tube)
        if sol.c_norm < problem.tol:
            break

    u_i = problem.K @ x_i + c0[0]
    ref = problem.reference
    N = problem.N
    tail = ref.u(time_index + N) - problem.K @ ref.x(time_index + N)
    shifted = np.vstack([c0[1:], tail[None, :]])
    mid_N = 0.5 * (sol.tube.lower[N] + sol.tube.upper[N])
    xN_dev = mid_N - ref.x(N + time_index)
    return RobustStepResult(u=u_i, seed=shifted, records=tuple(records),
                            predicted_terminal_norm=float(
                                np.linalg.norm(xN_dev)),
                            perturbation=c0, tube=sol.tube,
                            first_seed_tube=first_tube,
                            iteration_tubes=tuple(kept_tubes))


# ---------------------------------------------------------------------------
# Feasibility reporting and offline seed initialization
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class RobustFeasibilityReport:
    state_margin: float      # max violation of X rows over k < N
    input_margin: float      # max violation of U rows by the policy image
    terminal_margin: float   # max violation of the terminal box at k = N

    @property
    def feasible(self) -> bool:
        return max(self.state_margin, self.input_margin,
                   self.terminal_margin) <= 1e-7


def robust_seed_feasibility_report(problem: RobustProblem, x_i: np.ndarray,
                                   c0: np.ndarray) -> RobustFeasibilityReport:
    """Margins of the propagated tube against the problem's constraints.

    A non-positive report certifies that (c = 0, X = tube) is feasible for
    the subproblem built around (c0, tube), i.e. the closed loop can start
    from x_i with this perturbation.
    """
    c0 = _as_perturbation(c0, problem.n_u)
    tube, _ = seed_tube_and_linearize(problem.f, x_i, c0,
                                      problem.K, problem.W)
    CX_up, CX_lo, HX, dX = support_rows(problem.X)
    state = -np.inf
    for k in range(problem.N):
        vals = CX_up @ tube.upper[k] + CX_lo @ tube.lower[k] - dX
        state = max(state, float(np.max(vals)))
    CU_up, CU_lo, HU, dU = support_rows(problem.U, gain=problem.K)
    inp = -np.inf
    for k in range(problem.N):
        vals = (CU_up @ tube.upper[k] + CU_lo @ tube.lower[k]
                + HU @ c0[k] - dU)
        inp = max(inp, float(np.max(vals)))
    T = problem.terminal_box
    term = float(max(np.max(tube.upper[problem.N] - T.upper),
                     np.max(T.lower - tube.lower[problem.N])))
    return RobustFeasibilityReport(state_margin=state, input_margin=inp,
                                   terminal_margin=term)


def initialize_seed_robust(problem: RobustProblem, x_init: np.ndarray,
                           max_rounds: int = 200,
                           options: Optional[SolverOptions] = None
                           ) -> Tuple[np.ndarray, Dict[str, float]]:
    """Find a perturbation whose tube subproblem is feasible from x_init.

    Starts from the reference tail and walks the free stage-0 singleton
    toward the target one solve at a time, absorbing each round's correction
    into the perturbation.
    """
    x_init = np.asarray(x_init, dtype=float).ravel()
    ref = problem.reference
    N = problem.N
    x0 = ref.x(N)
    c0 = np.stack([ref.u(N + k) - problem.K @ ref.x(N + k)
                   for k in range(N)])
    gaps: List[float] = [float(np.linalg.norm(x_init - x0))]
    if gaps[0] <= INIT_SUCCESS_GAP:
        return c0, {"gap": gaps[0], "rounds": 0}
    for round_no in range(1, max_rounds + 1):
        tube0, lin = seed_tube_and_linearize(problem.f, x0, c0,
                                             problem.K, problem.W)
        prog, layout = build_rcmpc_init(problem, tube0, lin, c0, x_init)
        sol = solve(prog, warm_start=_primal_start(problem, layout,
                                                   tube0, c0),
                    options=options)
        # Boundary targets make these programs degenerate (squeezed rows,
        # dual rays): accept reduced-accuracy exits whose residuals are far
        # tighter than the walk needs.
        if not sol.usable():
            raise SubproblemError(sol.status,
                                  detail="robust seed initialization")
        x0 = sol.z[layout.s_up(0)].copy()
        c_star = np.stack([sol.z[layout.c(k)] for k in range(N)])
        c0 = c_star + c0
        gap = float(np.linalg.norm(x_init - x0))
        gaps.append(gap)
        if gap <= INIT_SUCCESS_GAP:
            return c0, {"gap": gap, "rounds": round_no}
        # Near-boundary targets are approached only as sqrt(mu).  The goal
        # is a perturbation usable from x_init itself, so once the gap is
        # small, accept if the tube propagated from x_init verifiably
        # satisfies every constraint.
        if gap <= 1e-3:
            if robust_seed_feasibility_report(problem, x_init, c0).feasible:
                return c0, {"gap": 0.0, "rounds": round_no}
        if len(gaps) > INIT_STALL_WINDOW:
            recent = gaps[-(INIT_STALL_WINDOW + 1):]
            rel = [(recent[i] - recent[i + 1]) / max(recent[i], 1e-30)
                   for i in range(INIT_STALL_WINDOW)]
            if all(r < INIT_STALL_RELATIVE for r in rel):
                raise SeedInitializationError(gap, round_no)
    raise SeedInitializationError(gaps[-1], max_rounds)
