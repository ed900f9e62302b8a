"""Infeasible-start primal-dual interior-point solver for smooth convex
programs built from the expression atoms.

Problem form:

    minimize    1/2 z'Pz + q'z + const
    subject to  A z = b
                row_r(z) <= 0,   r = 1..m

where each inequality row is an affine part plus sums of squared affine
terms and scaled exponentials of affine terms:

    row_r(z) = [G z + g0]_r + sum_{t: qrow_t = r} (Cs_t z + ds_t)^2
                            + sum_{t: erow_t = r} es_t * exp(Ea_t z + eb_t).

This is exactly the image of the convex atom language under affine maps of
the decision vector, so values, Jacobians and Hessians are closed-form.
Rows are stored sparse (each term touches few variables); the Newton system
is factorized dense, which is where the work concentrates at these sizes.

The method is standard infeasible-start path following: slacks s > 0 and
multipliers lam > 0, Newton steps on the perturbed KKT system with the
inequality block eliminated, fraction-to-boundary 0.99, and a merit line
search on the KKT residual norms.  No phase I is needed; programs whose
canonical feasible points sit on the boundary (zero-width tube stages) are
handled by the infeasible start.

A presolve pass deduplicates equality rows, turns single-variable equalities
and flat inequality-pair bounds into variable fixings (substituted out, with
multipliers reconstructed from stationarity afterwards), and raises
StructuralInfeasibleError on contradictory fixings — a distinct outcome from
the merit-divergence infeasibility heuristic.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
import scipy.sparse as sp

from .expr import ConvexExpr, compose_affine, flatten

# Defaults; per-solve overrides via SolverOptions.
DEFAULT_TOL = 1e-9
CONTRACT_TOL = 1e-8  # documented optimal-status guarantee
MAX_ITER = 200
FRACTION_TO_BOUNDARY = 0.99
REG_INIT = 1e-9
REG_MAX = 1e-3
# Fallback saturation levels for the slack-block curvature lam/s.  Degenerate
# active rows (both sides of a squeezed pair binding, strict complementarity
# failing) drive s -> 0 with lam large, pushing entries of W beyond 1e19 and
# breaking Cholesky on roundoff no matter the diagonal shift.  When every
# exact-curvature rung fails to factor, the ladder retries with D capped at
# these levels; healthy iterations never see the cap.
D_CAP_LADDER = (1e12, 1e9)

OPTIMAL = "optimal"
INFEASIBLE = "infeasible-detected"
ITERATION_LIMIT = "iteration-limit"
NUMERICAL_FAILURE = "numerical-failure"
STRUCTURAL_INFEASIBLE = "structural-infeasible"


class StructuralInfeasibleError(ValueError):
    """Contradictory fixings detected by presolve (not a numerical result)."""


@dataclass
class SolverOptions:
    tol: float = DEFAULT_TOL
    max_iter: int = MAX_ITER
    verbose: bool = False
    # Predictor-corrector is the default search direction; the plain
    # single-direction path-following variant is kept selectable.
    mehrotra: bool = True


class ConvexProgram:
    """Mutable container for one convex program.

    Rows can be added either from expression objects (`add_inequality`) or
    through the raw term interface used by the bulk MPC builders
    (`new_inequality_row` / `add_square_term` / `add_exp_term`).
    """

    def __init__(self, n: int, var_names: Optional[Sequence[str]] = None):
        if n < 0:
            raise ValueError("negative dimension")
        self.n = n
        self.var_names = list(var_names) if var_names is not None else None
        if self.var_names is not None and len(self.var_names) != n:
            raise ValueError("variable name count mismatch")
        self.P = np.zeros((n, n))
        self.q = np.zeros(n)
        self.const = 0.0
        # Equalities (triplets).
        self._eq_i: List[int] = []
        self._eq_j: List[int] = []
        self._eq_v: List[float] = []
        self.b_eq: List[float] = []
        # Inequality affine parts (triplets) and constants.
        self._g_i: List[int] = []
        self._g_j: List[int] = []
        self._g_v: List[float] = []
        self.g0: List[float] = []
        self.row_names: List[Optional[str]] = []
        # Square terms: (Cs z + ds)^2 added to row qrow.
        self._q_i: List[int] = []
        self._q_j: List[int] = []
        self._q_v: List[float] = []
        self.ds: List[float] = []
        self.qrow: List[int] = []
        # Exponential terms: es * exp(Ea z + eb) added to row erow.
        self._e_i: List[int] = []
        self._e_j: List[int] = []
        self._e_v: List[float] = []
        self.eb: List[float] = []
        self.es: List[float] = []
        self.erow: List[int] = []

    # -- objective ---------------------------------------------------------

    def set_objective(self, P=None, q=None, const: float = 0.0):
        if P is not None:
            P = np.atleast_2d(np.asarray(P, dtype=float))
            if P.shape != (self.n, self.n):
                raise ValueError("objective matrix shape mismatch")
            if not np.allclose(P, P.T, atol=1e-12):
                raise ValueError("objective matrix must be symmetric")
            P = 0.5 * (P + P.T)
            if self.n and np.min(np.linalg.eigvalsh(P)) < -1e-10:
                raise ValueError("objective matrix must be PSD")
            self.P = P
        if q is not None:
            q = np.asarray(q, dtype=float).ravel()
            if q.shape[0] != self.n:
                raise ValueError("objective vector shape mismatch")
            self.q = q.copy()
        self.const = float(const)

    def add_objective_square(self, idx, vals, offset: float = 0.0,
                             weight: float = 1.0):
        """Add weight * (vals' z[idx] + offset)^2 to the objective."""
        idx = np.asarray(idx, dtype=int).ravel()
        vals = np.asarray(vals, dtype=float).ravel()
        if weight < 0:
            raise ValueError("negative square weight")
        self.P[np.ix_(idx, idx)] += 2.0 * weight * np.outer(vals, vals)
        self.q[idx] += 2.0 * weight * offset * vals
        self.const += weight * offset * offset

    def add_objective_linear(self, idx, vals):
        idx = np.asarray(idx, dtype=int).ravel()
        self.q[idx] += np.asarray(vals, dtype=float).ravel()

    # -- constraints -------------------------------------------------------

    @property
    def n_eq(self) -> int:
        return len(self.b_eq)

    @property
    def n_ineq(self) -> int:
        return len(self.g0)

    def add_equality(self, idx, vals, rhs: float):
        idx = np.asarray(idx, dtype=int).ravel()
        vals = np.asarray(vals, dtype=float).ravel()
        r = len(self.b_eq)
        self._eq_i.extend([r] * idx.size)
        self._eq_j.extend(int(j) for j in idx)
        self._eq_v.extend(float(v) for v in vals)
        self.b_eq.append(float(rhs))

    def new_inequality_row(self, idx=(), vals=(), const: float = 0.0,
                           name: Optional[str] = None) -> int:
        """Open row `affine <= 0`; square/exp terms may be attached to it."""
        idx = np.asarray(idx, dtype=int).ravel()
        vals = np.asarray(vals, dtype=float).ravel()
        r = len(self.g0)
        self._g_i.extend([r] * idx.size)
        self._g_j.extend(int(j) for j in idx)
        self._g_v.extend(float(v) for v in vals)
        self.g0.append(float(const))
        self.row_names.append(name)
        return r

    def row_add_linear(self, row: int, idx, vals):
        idx = np.asarray(idx, dtype=int).ravel()
        vals = np.asarray(vals, dtype=float).ravel()
        self._g_i.extend([row] * idx.size)
        self._g_j.extend(int(j) for j in idx)
        self._g_v.extend(float(v) for v in vals)

    def add_square_term(self, row: int, idx, vals, offset: float = 0.0):
        idx = np.asarray(idx, dtype=int).ravel()
        vals = np.asarray(vals, dtype=float).ravel()
        t = len(self.ds)
        self._q_i.extend([t] * idx.size)
        self._q_j.extend(int(j) for j in idx)
        self._q_v.extend(float(v) for v in vals)
        self.ds.append(float(offset))
        self.qrow.append(int(row))

    def add_exp_term(self, row: int, scale: float, idx, vals,
                     offset: float = 0.0):
        if scale < 0:
            raise ValueError("negative exponential scale")
        if scale == 0.0:
            return
        idx = np.asarray(idx, dtype=int).ravel()
        vals = np.asarray(vals, dtype=float).ravel()
        t = len(self.eb)
        self._e_i.extend([t] * idx.size)
        self._e_j.extend(int(j) for j in idx)
        self._e_v.extend(float(v) for v in vals)
        self.eb.append(float(offset))
        self.es.append(float(scale))
        self.erow.append(int(row))

    def add_inequality(self, expr: ConvexExpr, M=None, m=None,
                       name: Optional[str] = None) -> int:
        """Add expr(M z + m) <= 0 (M, m default to the identity map)."""
        if M is not None or m is not None:
            M = np.eye(self.n) if M is None else np.atleast_2d(np.asarray(M))
            m = np.zeros(M.shape[0]) if m is None else np.asarray(m, dtype=float)
            expr = compose_affine(expr, M, m)
        if expr.dim != self.n:
            raise ValueError("expression dimension must equal the decision "
                             "dimension (or pass an affine map)")
        flat = flatten(expr)
        idx = np.flatnonzero(flat.lin)
        row = self.new_inequality_row(idx, flat.lin[idx], flat.const, name)
        for W, C, d in flat.quads:
            evals, evecs = np.linalg.eigh(W)
            for lam_e, v_e in zip(evals, evecs.T):
                if lam_e <= 1e-14:
                    continue
                coef = np.sqrt(lam_e) * (v_e @ C)
                nz = np.flatnonzero(coef)
                self.add_square_term(row, nz, coef[nz],
                                     float(np.sqrt(lam_e) * (v_e @ d)))
        for scale, a, b in flat.exps:
            nz = np.flatnonzero(a)
            self.add_exp_term(row, scale, nz, a[nz], b)
        return row

    def add_box_bounds(self, idx, lower, upper, name: Optional[str] = None):
        """Bounds lower <= z[idx] <= upper as two affine rows per variable."""
        idx = np.asarray(idx, dtype=int).ravel()
        lower = np.broadcast_to(np.asarray(lower, dtype=float), idx.shape)
        upper = np.broadcast_to(np.asarray(upper, dtype=float), idx.shape)
        for j, lo, up in zip(idx, lower, upper):
            self.new_inequality_row([j], [1.0], -up,
                                    name and f"{name}[{j}]<=ub")
            self.new_inequality_row([j], [-1.0], lo,
                                    name and f"{name}[{j}]>=lb")

    # -- assembly ----------------------------------------------------------

    def matrices(self):
        A = sp.csr_matrix((self._eq_v, (self._eq_i, self._eq_j)),
                          shape=(self.n_eq, self.n))
        G = sp.csr_matrix((self._g_v, (self._g_i, self._g_j)),
                          shape=(self.n_ineq, self.n))
        Cs = sp.csr_matrix((self._q_v, (self._q_i, self._q_j)),
                           shape=(len(self.ds), self.n))
        Ea = sp.csr_matrix((self._e_v, (self._e_i, self._e_j)),
                           shape=(len(self.eb), self.n))
        return (A, np.array(self.b_eq, dtype=float),
                G, np.array(self.g0, dtype=float),
                Cs, np.array(self.ds, dtype=float),
                np.array(self.qrow, dtype=int),
                Ea, np.array(self.eb, dtype=float),
                np.array(self.es, dtype=float),
                np.array(self.erow, dtype=int))

    def objective_value(self, z: np.ndarray) -> float:
        return float(0.5 * z @ self.P @ z + self.q @ z + self.const)

    def to_json_file(self, path: str):
        """Debug dump of the full program (objective, rows, terms)."""
        A, b, G, g0, Cs, ds, qrow, Ea, eb, es, erow = self.matrices()

        def tri(Mat):
            coo = Mat.tocoo()
            return {"i": coo.row.tolist(), "j": coo.col.tolist(),
                    "v": coo.data.tolist(), "shape": list(coo.shape)}

        payload = {
            "n": self.n,
            "var_names": self.var_names,
            "objective": {"P": self.P.tolist(), "q": self.q.tolist(),
                          "const": self.const},
            "equalities": {"A": tri(A), "b": b.tolist()},
            "inequalities": {"G": tri(G), "g0": g0.tolist(),
                             "names": self.row_names},
            "square_terms": {"Cs": tri(Cs), "ds": ds.tolist(),
                             "row": qrow.tolist()},
            "exp_terms": {"Ea": tri(Ea), "eb": eb.tolist(),
                          "scale": es.tolist(), "row": erow.tolist()},
        }
        with open(path, "w", encoding="utf-8") as fh:
            json.dump(payload, fh)


@dataclass
class Solution:
    status: str
    z: np.ndarray
    objective: float
    nu: np.ndarray        # equality multipliers
    lam: np.ndarray       # inequality multipliers (>= 0)
    kkt: Dict[str, float]
    iterations: int
    merit_history: List[float] = field(default_factory=list)

    @property
    def optimal(self) -> bool:
        return self.status == OPTIMAL

    def usable(self, stat_tol: float = 1e-3, feas_tol: float = 1e-6,
               gap_tol: float = 1e-6) -> bool:
        """Whether the returned point is accurate enough for an outer loop
        that only needs a few correct digits (successive-convexification
        rounds, seed initialization).

        Programs whose optimal face squeezes inequality pairs to width zero
        admit dual rays, and on those the complementarity gap cannot be
        certified much below the square root of machine epsilon even though
        the iterate itself is essentially optimal.  A solve that stopped
        short of full tolerance is still usable when all residuals clear the
        (much looser) thresholds given here.  The feasibility threshold is
        scaled-residual relative; the outer loops roll out the true dynamics
        themselves, so a row violation at this level does not propagate.
        """
        if self.status == OPTIMAL:
            return True
        if self.status not in (ITERATION_LIMIT, NUMERICAL_FAILURE):
            return False
        return (self.kkt.get("primal_feasibility", np.inf) <= feas_tol
                and self.kkt.get("stationarity", np.inf) <= stat_tol
                and self.kkt.get("relative_gap", np.inf) <= gap_tol)


# ---------------------------------------------------------------------------
# Presolve
# ---------------------------------------------------------------------------


@dataclass
class _Reduced:
    """Reduced arrays after fixing variables and dropping rows."""

    n_full: int
    keep: np.ndarray              # kept variable indices
    fixed_idx: np.ndarray
    fixed_val: np.ndarray
    fix_source: Dict[int, tuple]  # var -> ("eq", row, coef) | ("ineq_pair", ...)
    P: np.ndarray
    q: np.ndarray
    const: float
    A: sp.csr_matrix
    b: np.ndarray
    eq_keep_rows: np.ndarray      # original equality row per reduced row
    G: sp.csr_matrix
    g0: np.ndarray
    ineq_keep_rows: np.ndarray
    Cs: sp.csr_matrix
    ds: np.ndarray
    qrow: np.ndarray
    Ea: sp.csr_matrix
    eb: np.ndarray
    es: np.ndarray
    erow: np.ndarray
    n_eq_full: int
    n_ineq_full: int


def _presolve(prog: ConvexProgram, feas_tol: float = 1e-9) -> _Reduced:
    A, b, G, g0, Cs, ds, qrow, Ea, eb, es, erow = prog.matrices()
    n = prog.n
    fixed_val: Dict[int, float] = {}
    fix_source: Dict[int, tuple] = {}

    # Single-variable equality rows -> fixings; contradictions are structural.
    A_csr = A.tocsr()
    for r in range(A_csr.shape[0]):
        cols = A_csr.indices[A_csr.indptr[r]:A_csr.indptr[r + 1]]
        vals = A_csr.data[A_csr.indptr[r]:A_csr.indptr[r + 1]]
        nz = vals != 0.0
        cols, vals = cols[nz], vals[nz]
        if cols.size == 1:
            j, a = int(cols[0]), float(vals[0])
            v = b[r] / a
            if j in fixed_val and abs(fixed_val[j] - v) > feas_tol:
                raise StructuralInfeasibleError(
                    f"variable {j} fixed to both {fixed_val[j]} and {v}")
            if j not in fixed_val:
                fixed_val[j] = v
                fix_source[j] = ("eq", r, a)

    # Flat inequality-pair bounds: +-z_j rows with equal implied bounds.
    ub: Dict[int, Tuple[float, int]] = {}
    lb: Dict[int, Tuple[float, int]] = {}
    G_csr = G.tocsr()
    has_terms = np.zeros(G_csr.shape[0], dtype=bool)
    if qrow.size:
        has_terms[qrow] = True
    if erow.size:
        has_terms[erow] = True
    for r in range(G_csr.shape[0]):
        if has_terms[r]:
            continue
        cols = G_csr.indices[G_csr.indptr[r]:G_csr.indptr[r + 1]]
        vals = G_csr.data[G_csr.indptr[r]:G_csr.indptr[r + 1]]
        nz = vals != 0.0
        cols, vals = cols[nz], vals[nz]
        if cols.size != 1:
            continue
        j, a = int(cols[0]), float(vals[0])
        bound = -g0[r] / a
        if a > 0:  # z_j <= bound
            if j not in ub or bound < ub[j][0]:
                ub[j] = (bound, r)
        else:      # z_j >= bound
            if j not in lb or bound > lb[j][0]:
                lb[j] = (bound, r)
    for j in set(ub) & set(lb):
        hi, r_hi = ub[j]
        lo, r_lo = lb[j]
        if lo > hi + feas_tol:
            raise StructuralInfeasibleError(
                f"variable {j} bounded to the empty interval [{lo}, {hi}]")
        if hi - lo <= feas_tol and j not in fixed_val:
            v = 0.5 * (lo + hi)
            fixed_val[j] = v
            a_hi = float(G_csr[r_hi, j])
            a_lo = float(G_csr[r_lo, j])
            fix_source[j] = ("ineq_pair", r_hi, a_hi, r_lo, a_lo)

    fixed_idx = np.array(sorted(fixed_val), dtype=int)
    fixed_vals = np.array([fixed_val[j] for j in fixed_idx], dtype=float)
    keep = np.setdiff1d(np.arange(n), fixed_idx)

    # Substitute fixings into every block.
    def split(Mat: sp.csr_matrix):
        Mc = Mat.tocsc()
        return Mc[:, keep].tocsr(), Mc[:, fixed_idx].tocsr()

    if fixed_idx.size:
        A_k, A_f = split(A)
        b = b - A_f @ fixed_vals
        G_k, G_f = split(G)
        g0 = g0 + G_f @ fixed_vals
        Cs_k, Cs_f = split(Cs)
        ds = ds + Cs_f @ fixed_vals
        Ea_k, Ea_f = split(Ea)
        eb = eb + Ea_f @ fixed_vals
        Pff = prog.P[np.ix_(fixed_idx, fixed_idx)]
        q = prog.q[keep] + prog.P[np.ix_(keep, fixed_idx)] @ fixed_vals
        const = (prog.const + prog.q[fixed_idx] @ fixed_vals
                 + 0.5 * fixed_vals @ Pff @ fixed_vals)
        P = prog.P[np.ix_(keep, keep)]
    else:
        A_k, G_k, Cs_k, Ea_k = A, G, Cs, Ea
        P, q, const = prog.P, prog.q.copy(), prog.const

    # Drop equality rows that became constant (must be consistent), then
    # deduplicate identical rows.
    eq_rows = []
    A_lil = A_k.tocsr()
    seen = {}
    for r in range(A_lil.shape[0]):
        start, end = A_lil.indptr[r], A_lil.indptr[r + 1]
        cols = A_lil.indices[start:end]
        vals = A_lil.data[start:end]
        nz = vals != 0.0
        cols, vals = cols[nz], vals[nz]
        if cols.size == 0:
            if abs(b[r]) > max(feas_tol, 1e-9 * (1 + abs(b[r]))):
                raise StructuralInfeasibleError(
                    f"equality row {r} reduces to 0 = {b[r]:.3e}")
            continue
        key = (tuple(cols.tolist()), tuple(np.round(vals, 12).tolist()),
               round(float(b[r]), 12))
        if key in seen:
            continue
        seen[key] = r
        eq_rows.append(r)
    eq_rows = np.array(eq_rows, dtype=int)

    # Drop inequality rows that became constants.
    has_terms_k = np.zeros(G_k.shape[0], dtype=bool)
    if qrow.size:
        has_terms_k[qrow] = True
    if erow.size:
        has_terms_k[erow] = True
    nnz_per_row = np.diff(G_k.tocsr().indptr)
    const_rows = (nnz_per_row == 0) & ~has_terms_k
    # Constant rows must be satisfiable: g0 + (const square/exp terms) <= 0.
    bad = const_rows & (g0 > feas_tol)
    if np.any(bad):
        r = int(np.flatnonzero(bad)[0])
        raise StructuralInfeasibleError(
            f"inequality row {r} reduces to the false statement "
            f"{g0[r]:.3e} <= 0")
    ineq_rows = np.flatnonzero(~const_rows)

    remap = -np.ones(G_k.shape[0], dtype=int)
    remap[ineq_rows] = np.arange(ineq_rows.size)

    return _Reduced(
        n_full=n, keep=keep, fixed_idx=fixed_idx, fixed_val=fixed_vals,
        fix_source=fix_source,
        P=P, q=q, const=const,
        A=A_k[eq_rows], b=b[eq_rows], eq_keep_rows=eq_rows,
        G=G_k[ineq_rows], g0=g0[ineq_rows], ineq_keep_rows=ineq_rows,
        Cs=Cs_k, ds=ds, qrow=remap[qrow] if qrow.size else qrow,
        Ea=Ea_k, eb=eb, es=es, erow=remap[erow] if erow.size else erow,
        n_eq_full=prog.n_eq, n_ineq_full=prog.n_ineq,
    )


def presolve_summary(prog: ConvexProgram) -> Dict[str, int]:
    """Dimensions before/after presolve (diagnostic helper)."""
    red = _presolve(prog)
    return {
        "variables_before": prog.n,
        "variables_after": int(red.keep.size),
        "equalities_before": prog.n_eq,
        "equalities_after": int(red.b.shape[0]),
        "inequalities_before": prog.n_ineq,
        "inequalities_after": int(red.g0.shape[0]),
    }


# ---------------------------------------------------------------------------
# Row evaluation on reduced arrays
# ---------------------------------------------------------------------------


class _Rows:
    def __init__(self, red: _Reduced):
        self.red = red
        self.m = red.g0.shape[0]
        self.n = red.keep.size
        self.GT = red.G.T.tocsr()
        # Per-row coefficient norms for scaled feasibility measures.
        sq = np.asarray(red.G.power(2).sum(axis=1)).ravel()
        self.row_scale = 1.0 + np.sqrt(sq)
        self.absG = abs(red.G).tocsr()
        # Scatter square/exp terms that landed on dropped rows are impossible:
        # dropped rows had no terms by construction.
        if red.qrow.size and np.any(red.qrow < 0):
            raise AssertionError("square term attached to a dropped row")
        if red.erow.size and np.any(red.erow < 0):
            raise AssertionError("exponential term attached to a dropped row")

    def eval(self, z: np.ndarray):
        """Row values plus caches (y, expu) for Jacobian/Hessian reuse."""
        red = self.red
        v = red.G @ z + red.g0
        y = red.Cs @ z + red.ds if red.ds.size else np.zeros(0)
        if y.size:
            np.add.at(v, red.qrow, y * y)
        u = red.Ea @ z + red.eb if red.eb.size else np.zeros(0)
        if u.size:
            if np.any(u > 500.0):
                raise FloatingPointError("exponential overflow in row eval")
            expu = red.es * np.exp(u)
            np.add.at(v, red.erow, expu)
        else:
            expu = np.zeros(0)
        return v, y, expu

    def jacobian(self, y: np.ndarray, expu: np.ndarray) -> sp.csr_matrix:
        red = self.red
        J = red.G
        if y.size:
            Sc = sp.csr_matrix(
                (2.0 * y, (red.qrow, np.arange(y.size))),
                shape=(self.m, y.size))
            J = J + Sc @ red.Cs
        if expu.size:
            Se = sp.csr_matrix(
                (expu, (red.erow, np.arange(expu.size))),
                shape=(self.m, expu.size))
            J = J + Se @ red.Ea
        return J.tocsr()

    def magnitudes(self, z: np.ndarray, y: np.ndarray,
                   expu: np.ndarray) -> np.ndarray:
        """Cancellation-free per-row magnitude: sum of |additive terms|.

        A row value is a difference of terms this large, so feasibility can
        only be judged relative to it (float64 limits the achievable
        violation to roughly machine epsilon times this number).
        """
        red = self.red
        mag = self.absG @ np.abs(z) + np.abs(red.g0) + 1.0
        if y.size:
            np.add.at(mag, red.qrow, y * y)
        if expu.size:
            np.add.at(mag, red.erow, expu)
        return mag

    def hessian_weighted(self, lam: np.ndarray, expu: np.ndarray) -> np.ndarray:
        """Dense sum_r lam_r * Hessian(row_r)."""
        red = self.red
        H = np.zeros((self.n, self.n))
        if red.ds.size:
            w = 2.0 * lam[red.qrow]
            H += (red.Cs.T @ sp.diags(w) @ red.Cs).toarray()
        if red.eb.size:
            w = lam[red.erow] * expu
            H += (red.Ea.T @ sp.diags(w) @ red.Ea).toarray()
        return H


# ---------------------------------------------------------------------------
# Interior-point core
# ---------------------------------------------------------------------------


def _scaled_residuals(red: _Reduced, rows: _Rows, z, nu, lam, s, obj):
    v, y, expu = rows.eval(z)
    J = rows.jacobian(y, expu)
    r_d = red.P @ z + red.q + red.A.T @ nu + J.T @ lam
    r_p = red.A @ z - red.b
    r_i = v + s
    stat = float(np.max(np.abs(r_d))) if r_d.size else 0.0
    pfeas_eq = float(np.max(np.abs(r_p))) if r_p.size else 0.0
    # Violation and slack mismatch, relative to each row's term magnitude.
    if v.size:
        scale = rows.magnitudes(z, y, expu)
        pfeas_in = float(np.max(np.maximum(v, 0.0) / scale))
        slack_res = float(np.max(np.abs(r_i) / scale))
    else:
        pfeas_in = 0.0
        slack_res = 0.0
    gap = float(lam @ s) if s.size else 0.0
    relgap = gap / (1.0 + abs(obj))
    return (r_d, r_p, r_i, J, v, y, expu, stat, pfeas_eq, pfeas_in,
            slack_res, relgap)


def _solve_reduced(red: _Reduced, warm: Optional[np.ndarray],
                   opts: SolverOptions):
    n = red.keep.size
    m = red.g0.shape[0]
    p = red.b.shape[0]
    rows = _Rows(red)

    z = np.zeros(n) if warm is None else warm.copy()
    nu = np.zeros(p)
    if m == 0:
        # Equality-constrained (or unconstrained) quadratic: one KKT solve.
        return _solve_eq_only(red, z, opts)

    try:
        v0, _, _ = rows.eval(z)
    except FloatingPointError:
        z = np.zeros(n)
        v0, _, _ = rows.eval(z)
    s = np.maximum(1e-2, -v0 + 1e-2)
    lam = np.maximum(1e-2, 1.0 / s)
    lam = np.minimum(lam, 1e2)

    merit_hist: List[float] = []
    status = ITERATION_LIMIT
    it = 0
    no_progress = 0
    alpha_rep = 1.0
    sigma_plain = 0.2
    for it in range(1, opts.max_iter + 1):
        (r_d, r_p, r_i, J, v, y, expu, stat, pfeas_eq, pfeas_in,
         slack_res, relgap) = _scaled_residuals(
             red, rows, z, nu, lam, s,
             red.const + 0.5 * z @ red.P @ z + red.q @ z)
        mu = float(lam @ s) / m
        merit = (np.linalg.norm(r_d) + np.linalg.norm(r_p)
                 + np.linalg.norm(r_i) + float(lam @ s))
        merit_hist.append(merit)
        if opts.verbose:
            print(f"  it {it:3d} mu={mu:9.2e} stat={stat:9.2e} "
                  f"eq={pfeas_eq:9.2e} in={pfeas_in:9.2e} gap={relgap:9.2e} "
                  f"alpha={alpha_rep:5.2f}")
        if (stat <= opts.tol * (1.0 + _dual_scale(red, z, nu, lam, J))
                and pfeas_eq <= opts.tol and pfeas_in <= 10 * opts.tol
                and slack_res <= 10 * opts.tol and relgap <= opts.tol):
            status = OPTIMAL
            break
        infeasible_signature = pfeas_in > 1e-6 or pfeas_eq > 1e-6
        if mu < 1e-13:
            # The barrier parameter cannot be driven further in float64;
            # the closing residual check below may still certify optimality.
            status = INFEASIBLE if infeasible_signature else ITERATION_LIMIT
            break
        if no_progress >= 12:
            # Merit stopped decreasing: a persistently violated primal is
            # reported as (heuristic) infeasibility.
            status = INFEASIBLE if infeasible_signature else ITERATION_LIMIT
            break
        if infeasible_signature and it > 10 and (
                mu < 1e-10 or float(np.max(lam)) > 1e10):
            # Complementarity converged (or duals diverged) while the primal
            # remains violated: the feasible set is judged empty.
            status = INFEASIBLE
            break

        D = lam / s
        H = red.P + rows.hessian_weighted(lam, expu)
        JT = J.T.tocsr()
        JDJ = (JT @ sp.diags(D) @ J).toarray()

        # Near the solution, allow steps closer to the boundary (strictly
        # inside: s and lam must stay positive).
        tau = max(FRACTION_TO_BOUNDARY, 1.0 - max(mu, 1e-10))

        def try_step(dz, dnu, ds_d, dlam_d, separate, halvings):
            # Backtrack a common scale on both step lengths until the KKT
            # merit does not increase (keeps the logged merit monotone).
            alpha_p = _ftb(s, ds_d, tau)
            alpha_d = _ftb(lam, dlam_d, tau)
            if not separate:
                alpha_p = alpha_d = min(alpha_p, alpha_d)
            scale = 1.0
            for _ in range(halvings):
                z_t = z + scale * alpha_p * dz
                nu_t = nu + scale * alpha_d * dnu
                lam_t = lam + scale * alpha_d * dlam_d
                s_t = s + scale * alpha_p * ds_d
                try:
                    v_t, y_t, expu_t = rows.eval(z_t)
                except FloatingPointError:
                    scale *= 0.5
                    continue
                J_t = rows.jacobian(y_t, expu_t)
                r_d_t = red.P @ z_t + red.q + red.A.T @ nu_t + J_t.T @ lam_t
                r_p_t = red.A @ z_t - red.b
                r_i_t = v_t + s_t
                merit_t = (np.linalg.norm(r_d_t) + np.linalg.norm(r_p_t)
                           + np.linalg.norm(r_i_t) + float(lam_t @ s_t))
                if merit_t <= merit * (1.0 + 1e-10) + 1e-16:
                    return (z_t, nu_t, lam_t, s_t, merit_t,
                            scale * max(alpha_p, alpha_d))
                scale *= 0.5
            return None

        # Centering parameter for the fallback direction (updated once per
        # iteration, not per regularization rung).
        if alpha_rep >= 0.9:
            sigma_plain = 0.1
        elif alpha_rep >= 0.4:
            sigma_plain = 0.3
        else:
            sigma_plain = min(0.8, sigma_plain * 1.5 + 0.05)

        result = None
        factored = False
        for d_cap in (None,) + D_CAP_LADDER:
            if d_cap is None:
                s_eff, D_eff, JDJ_eff = s, D, JDJ
            else:
                # Fallback rungs: compute the step as seen from a nearby,
                # strictly more interior point (slacks inflated so that
                # lam/s_eff <= d_cap).  Engages only when every exact rung
                # below failed to factor.
                s_eff = np.maximum(s, lam / d_cap)
                D_eff = lam / s_eff
                JDJ_eff = (JT @ sp.diags(D_eff) @ J).toarray()
            delta = REG_INIT
            while delta <= REG_MAX:
                W = H + JDJ_eff + delta * np.eye(n)
                try:
                    L = np.linalg.cholesky(W)
                except np.linalg.LinAlgError:
                    delta = delta * 10 if delta > 0 else 1e-8
                    continue
                factored = True

                def direction(r_c):
                    rhs_z = -r_d - JT @ (D_eff * r_i - r_c / s_eff)
                    dz, dnu = _newton_step(L, red.A, rhs_z, r_p)
                    # Two rounds of iterative refinement keep the direction
                    # accurate once D spreads over many orders of magnitude.
                    for _ in range(2):
                        res_z = rhs_z - W @ dz - red.A.T @ dnu
                        res_p = -r_p - red.A @ dz
                        cz, cnu = _newton_step(L, red.A, res_z, -res_p)
                        dz = dz + cz
                        dnu = dnu + cnu
                    ds_d = -r_i - J @ dz
                    # from S dlam + Lam ds = -r_c
                    dlam_d = (-r_c - lam * ds_d) / s_eff
                    return dz, dnu, ds_d, dlam_d

                final_rung = (delta * 100 > REG_MAX
                              and d_cap == D_CAP_LADDER[-1])
                if opts.mehrotra:
                    # Predictor: pure Newton (sigma = 0) probes the gap.
                    dz_a, dnu_a, ds_a, dlam_a = direction(lam * s)
                    ap = _ftb(s, ds_a, tau)
                    ad = _ftb(lam, dlam_a, tau)
                    gap_aff = float((s + ap * ds_a)
                                    @ (lam + ad * dlam_a)) / m
                    sigma = min(0.8, max(1e-4,
                                         (gap_aff / max(mu, 1e-300)) ** 3))
                    r_c = lam * s + ds_a * dlam_a - sigma * mu
                    result = try_step(*direction(r_c), separate=True,
                                      halvings=4)
                if result is None:
                    # Centering direction with equal step lengths: a
                    # guaranteed merit-descent direction, used alone in plain
                    # mode and as fallback when the corrector is rejected.
                    r_c = lam * s - sigma_plain * mu
                    result = try_step(*direction(r_c), separate=False,
                                      halvings=30 if final_rung else 6)
                if result is not None:
                    break
                # Rejected at this regularization level: the direction is
                # likely polluted by a near-singular subspace, so stiffen
                # and retry.
                delta = delta * 100 if delta > 0 else 1e-8
            if result is not None:
                break
        if not factored:
            status = NUMERICAL_FAILURE
            break
        if result is not None:
            z, nu, lam, s, merit_t, alpha_rep = result
            no_progress = 0 if merit_t < merit * (1.0 - 1e-12) else \
                no_progress + 1
        else:
            no_progress += 1
            alpha_rep = 0.0

    obj = red.const + 0.5 * z @ red.P @ z + red.q @ z
    (r_d, r_p, r_i, J, v, y, expu, stat, pfeas_eq, pfeas_in,
     slack_res, relgap) = _scaled_residuals(red, rows, z, nu, lam, s, obj)
    if status in (ITERATION_LIMIT, NUMERICAL_FAILURE) and (
            stat <= CONTRACT_TOL * (1.0 + _dual_scale(red, z, nu, lam, J))
            and pfeas_eq <= CONTRACT_TOL and pfeas_in <= CONTRACT_TOL
            and relgap <= CONTRACT_TOL):
        status = OPTIMAL
    kkt = {
        "stationarity": stat,
        "primal_feasibility": max(pfeas_eq, pfeas_in),
        "complementarity": float(np.max(lam * s)) if m else 0.0,
        "relative_gap": relgap,
    }
    return status, z, nu, lam, kkt, it, merit_hist


def _dual_scale(red: _Reduced, z, nu, lam, J) -> float:
    """Cancellation-free magnitude of the stationarity sum's terms.

    Stationarity adds quantities as large as |J|'lam componentwise; float64
    cannot cancel them more accurately than machine epsilon times this, so
    the stationarity tolerance is judged relative to it.
    """
    mag = np.abs(red.P) @ np.abs(z) + np.abs(red.q)
    if nu.size:
        mag = mag + abs(red.A.T) @ np.abs(nu)
    if lam.size:
        mag = mag + abs(J.T) @ lam  # multipliers are kept positive
    return float(np.max(mag)) if mag.size else 0.0


def _ftb(x: np.ndarray, dx: np.ndarray,
         tau: float = FRACTION_TO_BOUNDARY) -> float:
    """Largest step in [0, 1] keeping x + alpha*dx componentwise positive."""
    neg = dx < 0
    if not np.any(neg):
        return 1.0
    return min(1.0, tau * float(np.min(-x[neg] / dx[neg])))


def _newton_step(L: np.ndarray, A: sp.csr_matrix, rhs_z: np.ndarray,
                 r_p: np.ndarray):
    """Solve [W A'; A 0] [dz; dnu] = [rhs_z; -r_p] given W = L L'."""
    def w_solve(rhs):
        return np.linalg.solve(L.T, np.linalg.solve(L, rhs))

    if A.shape[0] == 0:
        return w_solve(rhs_z), np.zeros(0)
    Ad = A.toarray()
    WiA = w_solve(Ad.T)          # n x p
    Wir = w_solve(rhs_z)
    Y = Ad @ WiA
    Y = Y + 1e-12 * np.eye(Y.shape[0])
    dnu = np.linalg.solve(Y, Ad @ Wir + r_p)
    dz = Wir - WiA @ dnu
    return dz, dnu


def _solve_eq_only(red: _Reduced, z0: np.ndarray, opts: SolverOptions):
    n = red.keep.size
    p = red.b.shape[0]
    if n + p == 0:
        kkt = {"stationarity": 0.0, "primal_feasibility": 0.0,
               "complementarity": 0.0, "relative_gap": 0.0}
        return OPTIMAL, np.zeros(0), np.zeros(0), np.zeros(0), kkt, 0, [0.0]
    Ad = red.A.toarray() if p else np.zeros((0, n))
    KKT = np.zeros((n + p, n + p))
    KKT[:n, :n] = red.P + 1e-12 * np.eye(n)
    KKT[:n, n:] = Ad.T
    KKT[n:, :n] = Ad
    rhs = np.concatenate([-red.q, red.b])
    try:
        sol = np.linalg.solve(KKT, rhs)
    except np.linalg.LinAlgError:
        sol, *_ = np.linalg.lstsq(KKT, rhs, rcond=None)
    z, nu = sol[:n], sol[n:]
    r_d = red.P @ z + red.q + Ad.T @ nu
    r_p = Ad @ z - red.b if p else np.zeros(0)
    stat = float(np.max(np.abs(r_d))) if n else 0.0
    pfeas = float(np.max(np.abs(r_p))) if p else 0.0
    ok = stat <= CONTRACT_TOL * (1 + float(np.max(np.abs(red.q))
                                           if n else 0.0)) \
        and pfeas <= CONTRACT_TOL
    kkt = {"stationarity": stat, "primal_feasibility": pfeas,
           "complementarity": 0.0, "relative_gap": 0.0}
    return (OPTIMAL if ok else NUMERICAL_FAILURE, z, nu, np.zeros(0), kkt, 1,
            [stat + pfeas])


# ---------------------------------------------------------------------------
# Public solve with reconstruction
# ---------------------------------------------------------------------------


def solve(prog: ConvexProgram, warm_start: Optional[np.ndarray] = None,
          options: Optional[SolverOptions] = None) -> Solution:
    """Solve the program; deterministic for identical inputs and warm start.

    Returns a Solution whose primal/duals and KKT residuals refer to the
    *original* program: presolve fixings are substituted back and their
    multipliers are reconstructed from stationarity.
    """
    opts = options or SolverOptions()
    try:
        red = _presolve(prog)
    except StructuralInfeasibleError:
        return Solution(
            status=STRUCTURAL_INFEASIBLE, z=np.full(prog.n, np.nan),
            objective=np.nan, nu=np.zeros(prog.n_eq),
            lam=np.zeros(prog.n_ineq),
            kkt={"stationarity": np.nan, "primal_feasibility": np.nan,
                 "complementarity": np.nan, "relative_gap": np.nan},
            iterations=0)

    warm_red = None
    if warm_start is not None:
        warm_start = np.asarray(warm_start, dtype=float).ravel()
        if warm_start.shape[0] != prog.n:
            raise ValueError("warm start dimension mismatch")
        warm_red = warm_start[red.keep]

    status, z_red, nu_red, lam_red, kkt, iters, hist = _solve_reduced(
        red, warm_red, opts)

    # The predictor-corrector direction can stall on programs whose optimal
    # face squeezes inequality pairs to zero width (duplicate rows carry
    # dual rays and the corrector overshoots), ending in a false
    # infeasibility call or an iteration limit while the plain damped
    # path-following direction walks in cleanly.  Retry with the plain
    # direction before reporting a failure — but only when the first
    # attempt's residuals are too poor for reduced-accuracy acceptance;
    # an essentially-converged stall gains nothing from a retry.
    if status != OPTIMAL and opts.mehrotra:
        near_done = (kkt.get("primal_feasibility", np.inf) <= 1e-6
                     and kkt.get("stationarity", np.inf) <= 1e-3
                     and kkt.get("relative_gap", np.inf) <= 1e-6)
        if not near_done:
            plain = SolverOptions(tol=opts.tol,
                                  max_iter=min(opts.max_iter, 100),
                                  verbose=opts.verbose, mehrotra=False)
            (status2, z2, nu2, lam2, kkt2, iters2, hist2) = _solve_reduced(
                red, warm_red, plain)
            if status2 == OPTIMAL or (
                    kkt2.get("primal_feasibility", np.inf)
                    <= kkt.get("primal_feasibility", np.inf)):
                status, z_red, nu_red, lam_red = status2, z2, nu2, lam2
                kkt, hist = kkt2, hist2
            iters = iters + iters2

    # Reconstruct the full primal.
    z = np.empty(prog.n)
    z[red.keep] = z_red
    z[red.fixed_idx] = red.fixed_val

    # Scatter inequality multipliers back to original row numbering.
    lam = np.zeros(prog.n_ineq)
    lam[red.ineq_keep_rows] = lam_red
    nu = np.zeros(prog.n_eq)
    nu[red.eq_keep_rows] = nu_red

    # Multipliers for eliminated fixings from full-program stationarity.
    if red.fixed_idx.size and np.all(np.isfinite(z)):
        A, b, G, g0, Cs, ds, qrow, Ea, eb, es, erow = prog.matrices()
        grad_L = prog.P @ z + prog.q + A.T @ nu
        if prog.n_ineq:
            y = Cs @ z + ds if ds.size else np.zeros(0)
            u = Ea @ z + eb if eb.size else np.zeros(0)
            expu = es * np.exp(np.minimum(u, 500.0)) if eb.size else np.zeros(0)
            J = G
            if y.size:
                Sc = sp.csr_matrix((2.0 * y, (qrow, np.arange(y.size))),
                                   shape=(prog.n_ineq, y.size))
                J = J + Sc @ Cs
            if expu.size:
                Se = sp.csr_matrix((expu, (erow, np.arange(expu.size))),
                                   shape=(prog.n_ineq, expu.size))
                J = J + Se @ Ea
            grad_L = grad_L + J.T @ lam
        for j in red.fixed_idx:
            source = red.fix_source[int(j)]
            if source[0] == "eq":
                _, row, coef = source
                nu[row] += -grad_L[j] / coef
            else:
                # Flat inequality pair: the implied multiplier's sign
                # selects the active side (lam must stay nonnegative).
                _, r_hi, a_hi, r_lo, a_lo = source
                if -grad_L[j] / a_hi >= 0.0:
                    lam[r_hi] += -grad_L[j] / a_hi
                else:
                    lam[r_lo] += -grad_L[j] / a_lo
            grad_L[j] = 0.0

    objective = prog.objective_value(z) if np.all(np.isfinite(z)) else np.nan
    return Solution(status=status, z=z, objective=objective, nu=nu, lam=lam,
                    kkt=kkt, iterations=iters, merit_history=hist)


def kkt_residuals(prog: ConvexProgram, sol: Solution) -> Dict[str, float]:
    """Recompute KKT residuals of a solution against the original program."""
    A, b, G, g0, Cs, ds, qrow, Ea, eb, es, erow = prog.matrices()
    z, lam, nu = sol.z, sol.lam, sol.nu
    v = G @ z + g0
    y = Cs @ z + ds if ds.size else np.zeros(0)
    if y.size:
        np.add.at(v, qrow, y * y)
    u = Ea @ z + eb if eb.size else np.zeros(0)
    expu = es * np.exp(u) if u.size else np.zeros(0)
    if expu.size:
        np.add.at(v, erow, expu)
    J = G
    if y.size:
        Sc = sp.csr_matrix((2.0 * y, (qrow, np.arange(y.size))),
                           shape=(prog.n_ineq, y.size))
        J = J + Sc @ Cs
    if expu.size:
        Se = sp.csr_matrix((expu, (erow, np.arange(expu.size))),
                           shape=(prog.n_ineq, expu.size))
        J = J + Se @ Ea
    r_d = prog.P @ z + prog.q
    if prog.n_eq:
        r_d = r_d + A.T @ nu
    if prog.n_ineq:
        r_d = r_d + J.T @ lam
    out = {
        "stationarity": float(np.max(np.abs(r_d))) if r_d.size else 0.0,
        "primal_eq": float(np.max(np.abs(A @ z - b))) if prog.n_eq else 0.0,
        "primal_ineq": float(np.max(v)) if prog.n_ineq else 0.0,
        "comp_slack": float(np.max(np.abs(lam * np.minimum(v, 0.0))))
        if prog.n_ineq else 0.0,
        "dual_sign": float(np.min(lam)) if prog.n_ineq else 0.0,
    }
    return out
