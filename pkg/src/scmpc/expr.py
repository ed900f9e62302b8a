"""Convex scalar expressions over a fixed argument vector.

The expression language is deliberately tiny.  Every expression is convex by
construction from four atoms:

    Affine(a, b)            a'p + b
    QuadForm(W, C, d)       (Cp + d)' W (Cp + d)   with W symmetric PSD
    ExpAffine(s, a, b)      s * exp(a'p + b)        with s >= 0
    WeightedSum(terms)      sum_i w_i * expr_i      with w_i >= 0

Each atom knows its value, gradient and Hessian analytically, composes with
affine maps p = M q + m in closed form, and flattens to plain coefficient
arrays for fast batched evaluation.  Model components are stored as a
difference of two such expressions g - h (h identically zero for convex
components), which is what the linearization and tube machinery consume.

Exact extremization over boxes:
  * max_over_box enumerates vertices (a convex function attains its maximum
    over a box at a vertex);
  * min_over_box runs a projected Newton method with Armijo backtracking
    (the minimum is generally interior), with an analytic shortcut for pure
    affine expressions.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import List, Optional, Sequence, Tuple, Union

import numpy as np

from .geometry import Box, EnumerationCapError, vertices

# Structural tolerance for the PSD check on quadratic-form weights.
PSD_TOL = 1e-10

# Exponent guard: values above this overflow float64 well before any sane
# model evaluation; raising keeps failures loud instead of returning inf.
_EXP_OVERFLOW = 700.0


class MinimizeError(RuntimeError):
    """Projected Newton failed to reach tolerance within the iteration cap."""


def _vec(a, n: Optional[int] = None) -> np.ndarray:
    arr = np.atleast_1d(np.asarray(a, dtype=float))
    if arr.ndim != 1:
        raise ValueError(f"expected a vector, got shape {arr.shape}")
    if n is not None and arr.shape[0] != n:
        raise ValueError(f"expected length {n}, got {arr.shape[0]}")
    return arr


# ---------------------------------------------------------------------------
# Atoms
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class Affine:
    """a'p + b."""

    a: np.ndarray
    b: float = 0.0

    def __post_init__(self):
        object.__setattr__(self, "a", _vec(self.a))
        object.__setattr__(self, "b", float(self.b))

    @property
    def dim(self) -> int:
        return self.a.shape[0]

    @staticmethod
    def zero(dim: int) -> "Affine":
        return Affine(np.zeros(dim), 0.0)


@dataclass(frozen=True)
class QuadForm:
    """(Cp + d)' W (Cp + d) with W symmetric positive semidefinite."""

    W: np.ndarray
    C: np.ndarray
    d: np.ndarray

    def __post_init__(self):
        W = np.atleast_2d(np.asarray(self.W, dtype=float))
        C = np.atleast_2d(np.asarray(self.C, dtype=float))
        d = _vec(self.d)
        if W.shape[0] != W.shape[1]:
            raise ValueError("W must be square")
        if not np.allclose(W, W.T, atol=1e-12, rtol=1e-12):
            raise ValueError("W must be symmetric")
        W = 0.5 * (W + W.T)
        if np.min(np.linalg.eigvalsh(W)) < -PSD_TOL:
            raise ValueError("W must be positive semidefinite")
        if C.shape[0] != W.shape[0] or d.shape[0] != W.shape[0]:
            raise ValueError("inner affine map dimension mismatch")
        object.__setattr__(self, "W", W)
        object.__setattr__(self, "C", C)
        object.__setattr__(self, "d", d)

    @property
    def dim(self) -> int:
        return self.C.shape[1]

    @staticmethod
    def squared_norm(weight, C, d) -> "QuadForm":
        """||C p + d||_weight^2 convenience constructor."""
        return QuadForm(weight, C, d)


@dataclass(frozen=True)
class ExpAffine:
    """scale * exp(a'p + b) with scale >= 0."""

    scale: float
    a: np.ndarray
    b: float = 0.0

    def __post_init__(self):
        if float(self.scale) < 0.0:
            raise ValueError("exponential scale must be nonnegative")
        object.__setattr__(self, "scale", float(self.scale))
        object.__setattr__(self, "a", _vec(self.a))
        object.__setattr__(self, "b", float(self.b))

    @property
    def dim(self) -> int:
        return self.a.shape[0]


@dataclass(frozen=True)
class WeightedSum:
    """sum_i weights[i] * terms[i] with nonnegative weights."""

    terms: Tuple["ConvexExpr", ...]
    weights: Tuple[float, ...]

    def __post_init__(self):
        terms = tuple(self.terms)
        weights = tuple(float(w) for w in self.weights)
        if len(terms) != len(weights):
            raise ValueError("terms/weights length mismatch")
        if any(w < 0.0 for w in weights):
            raise ValueError("weights must be nonnegative")
        if not terms:
            raise ValueError("empty weighted sum")
        dims = {t.dim for t in terms}
        if len(dims) != 1:
            raise ValueError("terms must share an argument dimension")
        object.__setattr__(self, "terms", terms)
        object.__setattr__(self, "weights", weights)

    @property
    def dim(self) -> int:
        return self.terms[0].dim


ConvexExpr = Union[Affine, QuadForm, ExpAffine, WeightedSum]


def add(*exprs: ConvexExpr) -> WeightedSum:
    return WeightedSum(tuple(exprs), tuple(1.0 for _ in exprs))


def subtract_affine(expr: ConvexExpr, aff: Affine) -> WeightedSum:
    """expr - (a'p + b), which stays convex (and in-language)."""
    return WeightedSum((expr, Affine(-aff.a, -aff.b)), (1.0, 1.0))


# ---------------------------------------------------------------------------
# Flattened form and evaluation
# ---------------------------------------------------------------------------


@dataclass
class Flattened:
    """expr(p) = const + lin'p + sum (C_t p + d_t)' W_t (C_t p + d_t)
                      + sum s_t exp(a_t'p + b_t)."""

    dim: int
    const: float
    lin: np.ndarray
    quads: List[Tuple[np.ndarray, np.ndarray, np.ndarray]]  # (W, C, d)
    exps: List[Tuple[float, np.ndarray, float]]  # (scale, a, b)


def flatten(expr: ConvexExpr, weight: float = 1.0,
            out: Optional[Flattened] = None) -> Flattened:
    if out is None:
        out = Flattened(expr.dim, 0.0, np.zeros(expr.dim), [], [])
    if isinstance(expr, Affine):
        out.lin = out.lin + weight * expr.a
        out.const += weight * expr.b
    elif isinstance(expr, QuadForm):
        if weight > 0.0:
            out.quads.append((weight * expr.W, expr.C, expr.d))
    elif isinstance(expr, ExpAffine):
        if weight * expr.scale > 0.0:
            out.exps.append((weight * expr.scale, expr.a, expr.b))
    elif isinstance(expr, WeightedSum):
        for w, term in zip(expr.weights, expr.terms):
            flatten(term, weight * w, out)
    else:
        raise TypeError(f"not a convex expression: {type(expr).__name__}")
    return out


def evaluate(expr: ConvexExpr, point) -> float:
    p = _vec(point, expr.dim)
    if isinstance(expr, Affine):
        return float(expr.a @ p + expr.b)
    if isinstance(expr, QuadForm):
        y = expr.C @ p + expr.d
        return float(y @ expr.W @ y)
    if isinstance(expr, ExpAffine):
        u = expr.a @ p + expr.b
        if u > _EXP_OVERFLOW:
            raise OverflowError(f"exponent {u:.3g} overflows float64")
        return expr.scale * math.exp(u)
    if isinstance(expr, WeightedSum):
        return float(sum(w * evaluate(t, p) for w, t in
                         zip(expr.weights, expr.terms)))
    raise TypeError(f"not a convex expression: {type(expr).__name__}")


def gradient(expr: ConvexExpr, point) -> np.ndarray:
    p = _vec(point, expr.dim)
    if isinstance(expr, Affine):
        return expr.a.copy()
    if isinstance(expr, QuadForm):
        y = expr.C @ p + expr.d
        return 2.0 * (expr.C.T @ (expr.W @ y))
    if isinstance(expr, ExpAffine):
        u = expr.a @ p + expr.b
        if u > _EXP_OVERFLOW:
            raise OverflowError(f"exponent {u:.3g} overflows float64")
        return expr.scale * math.exp(u) * expr.a
    if isinstance(expr, WeightedSum):
        g = np.zeros(expr.dim)
        for w, t in zip(expr.weights, expr.terms):
            if w:
                g += w * gradient(t, p)
        return g
    raise TypeError(f"not a convex expression: {type(expr).__name__}")


def hessian(expr: ConvexExpr, point) -> np.ndarray:
    p = _vec(point, expr.dim)
    if isinstance(expr, Affine):
        return np.zeros((expr.dim, expr.dim))
    if isinstance(expr, QuadForm):
        return 2.0 * expr.C.T @ expr.W @ expr.C
    if isinstance(expr, ExpAffine):
        u = expr.a @ p + expr.b
        if u > _EXP_OVERFLOW:
            raise OverflowError(f"exponent {u:.3g} overflows float64")
        return expr.scale * math.exp(u) * np.outer(expr.a, expr.a)
    if isinstance(expr, WeightedSum):
        h = np.zeros((expr.dim, expr.dim))
        for w, t in zip(expr.weights, expr.terms):
            if w:
                h += w * hessian(t, p)
        return h
    raise TypeError(f"not a convex expression: {type(expr).__name__}")


def compose_affine(expr: ConvexExpr, M, m) -> ConvexExpr:
    """Expression q -> expr(M q + m), exact and in-language."""
    M = np.atleast_2d(np.asarray(M, dtype=float))
    m = _vec(m)
    if M.shape[0] != expr.dim or m.shape[0] != expr.dim:
        raise ValueError("affine map output dimension must match expression")
    if isinstance(expr, Affine):
        return Affine(M.T @ expr.a, float(expr.a @ m + expr.b))
    if isinstance(expr, QuadForm):
        return QuadForm(expr.W, expr.C @ M, expr.C @ m + expr.d)
    if isinstance(expr, ExpAffine):
        return ExpAffine(expr.scale, M.T @ expr.a, float(expr.a @ m + expr.b))
    if isinstance(expr, WeightedSum):
        return WeightedSum(tuple(compose_affine(t, M, m) for t in expr.terms),
                           expr.weights)
    raise TypeError(f"not a convex expression: {type(expr).__name__}")


class CompiledExpr:
    """Array-backed evaluator for one flattened expression.

    Precomputes the constant quadratic Hessian block and stacks exponential
    rows so value/gradient/Hessian and batched evaluation are plain BLAS
    calls.  Used by the box extremizers and the terminal-set grids, which
    evaluate the same expression at thousands of points.
    """

    def __init__(self, expr: ConvexExpr):
        flat = flatten(expr)
        self.dim = flat.dim
        self.const = flat.const
        self.lin = flat.lin
        # Quadratics: value = sum ||L_t C_t p + L_t d_t||^2 via stacked rows.
        rows = []
        offs = []
        for W, C, d in flat.quads:
            evals, evecs = np.linalg.eigh(W)
            evals = np.clip(evals, 0.0, None)
            L = (evecs * np.sqrt(evals)) @ evecs.T  # symmetric sqrt
            rows.append(L @ C)
            offs.append(L @ d)
        if rows:
            self.Q = np.vstack(rows)           # (m_q, dim)
            self.q0 = np.concatenate(offs)     # (m_q,)
            self.hess_quad = 2.0 * self.Q.T @ self.Q
        else:
            self.Q = np.zeros((0, self.dim))
            self.q0 = np.zeros(0)
            self.hess_quad = np.zeros((self.dim, self.dim))
        if flat.exps:
            self.es = np.array([s for s, _, _ in flat.exps])
            self.ea = np.array([a for _, a, _ in flat.exps])  # (m_e, dim)
            self.eb = np.array([b for _, _, b in flat.exps])
        else:
            self.es = np.zeros(0)
            self.ea = np.zeros((0, self.dim))
            self.eb = np.zeros(0)
        self.is_affine = self.Q.shape[0] == 0 and self.es.shape[0] == 0

    def _exp_terms(self, p: np.ndarray) -> np.ndarray:
        if self.es.shape[0] == 0:
            return np.zeros(0)
        u = self.ea @ p + self.eb
        if np.any(u > _EXP_OVERFLOW):
            raise OverflowError("exponent overflows float64")
        return self.es * np.exp(u)

    def value(self, p: np.ndarray) -> float:
        y = self.Q @ p + self.q0
        return float(self.const + self.lin @ p + y @ y + self._exp_terms(p).sum())

    def value_batch(self, P: np.ndarray) -> np.ndarray:
        P = np.atleast_2d(np.asarray(P, dtype=float))
        vals = self.const + P @ self.lin
        if self.Q.shape[0]:
            Y = P @ self.Q.T + self.q0
            vals = vals + np.sum(Y * Y, axis=1)
        if self.es.shape[0]:
            U = P @ self.ea.T + self.eb
            if np.any(U > _EXP_OVERFLOW):
                raise OverflowError("exponent overflows float64")
            vals = vals + np.exp(U) @ self.es
        return vals

    def grad(self, p: np.ndarray) -> np.ndarray:
        g = self.lin.copy()
        if self.Q.shape[0]:
            g += 2.0 * (self.Q.T @ (self.Q @ p + self.q0))
        e = self._exp_terms(p)
        if e.shape[0]:
            g += self.ea.T @ e
        return g

    def hess(self, p: np.ndarray) -> np.ndarray:
        h = self.hess_quad.copy()
        e = self._exp_terms(p)
        if e.shape[0]:
            h += (self.ea.T * e) @ self.ea
        return h


def _feedback_map(feedback, n_x: int) -> Tuple[np.ndarray, np.ndarray]:
    """Map x -> (x, K x + c) as an affine pair (M, m)."""
    K, c = feedback
    K = np.atleast_2d(np.asarray(K, dtype=float))
    c = _vec(c)
    if K.shape[1] != n_x:
        raise ValueError("gain column count must match the box dimension")
    M = np.vstack([np.eye(n_x), K])
    m = np.concatenate([np.zeros(n_x), c])
    return M, m


def _composed_over_box(expr: ConvexExpr, box: Box, feedback) -> ConvexExpr:
    if feedback is None:
        if expr.dim != box.dim:
            raise ValueError("expression/box dimension mismatch")
        return expr
    M, m = _feedback_map(feedback, box.dim)
    if expr.dim != M.shape[0]:
        raise ValueError("expression dimension must match (x, u) stack")
    return compose_affine(expr, M, m)


def max_over_box(expr: ConvexExpr, box: Box,
                 feedback: Optional[Tuple[np.ndarray, np.ndarray]] = None
                 ) -> Tuple[float, np.ndarray]:
    """Exact maximum of a convex expression over a box, with an argmax vertex.

    With feedback=(K, c) the expression takes the stacked argument
    (x, K x + c) and the maximization is over x in the box.
    """
    comp = CompiledExpr(_composed_over_box(expr, box, feedback))
    verts = vertices(box)
    vals = comp.value_batch(verts)
    idx = int(np.argmax(vals))
    return float(vals[idx]), verts[idx]


def min_over_box(expr: ConvexExpr, box: Box,
                 feedback: Optional[Tuple[np.ndarray, np.ndarray]] = None,
                 tol: float = 1e-9, max_iter: int = 200
                 ) -> Tuple[float, np.ndarray]:
    """Global minimum of a convex expression over a box, with its argmin.

    Affine expressions are solved analytically at a vertex.  Otherwise a
    projected Newton method with Armijo backtracking runs from the box
    midpoint; the projected-gradient norm certifies optimality.  The returned
    value is the expression evaluated at the returned argmin, so value and
    point are always consistent.
    """
    comp = CompiledExpr(_composed_over_box(expr, box, feedback))
    lo, up = box.lower, box.upper
    if comp.is_affine:
        x = np.where(comp.lin >= 0.0, lo, up)
        return comp.value(x), x

    x = box.midpoint()
    fx = comp.value(x)
    free_width = up - lo > 0.0
    band = 1e-7 * np.maximum(np.where(free_width, up - lo, 1.0), 1.0)
    for _ in range(max_iter):
        g = comp.grad(x)
        # A coordinate pushed against a nearby bound can approach it only
        # asymptotically through the line search (each clipped step halves
        # the remaining distance), which keeps a near-singular direction in
        # the Newton block forever.  Snap such coordinates onto the bound
        # when doing so verifiably does not increase the value.
        snap_lo = (x > lo) & (x <= lo + band) & (g > 0.0)
        snap_up = (x < up) & (x >= up - band) & (g < 0.0)
        if np.any(snap_lo | snap_up):
            x_try = x.copy()
            x_try[snap_lo] = lo[snap_lo]
            x_try[snap_up] = up[snap_up]
            f_try = comp.value(x_try)
            if f_try <= fx + 1e-12 * (1.0 + abs(fx)):
                x, fx = x_try, f_try
                g = comp.grad(x)
        # Projected gradient: zero out components pushing into an active bound.
        pg = g.copy()
        at_lo = (x <= lo) & (g > 0.0)
        at_up = (x >= up) & (g < 0.0)
        pg[at_lo | at_up | ~free_width] = 0.0
        if np.linalg.norm(pg, ord=np.inf) <= 1e-11 * (1.0 + abs(fx)):
            return comp.value(x), x
        free = ~(at_lo | at_up) & free_width
        H = comp.hess(x)
        step = np.zeros_like(x)
        idx = np.flatnonzero(free)
        Hf = H[np.ix_(idx, idx)] + 1e-12 * np.eye(idx.size)
        try:
            step[idx] = -np.linalg.solve(Hf, g[idx])
        except np.linalg.LinAlgError:
            step[idx] = -g[idx]
        if step[idx] @ g[idx] > 0.0:  # not a descent direction; fall back
            step = np.zeros_like(x)
            step[idx] = -g[idx]
        alpha = 1.0
        for _ in range(60):
            x_new = np.clip(x + alpha * step, lo, up)
            f_new = comp.value(x_new)
            descent = g @ (x_new - x)
            if descent < 0.0 and f_new <= fx + 1e-4 * descent:
                break
            alpha *= 0.5
        else:
            # No Armijo progress possible at float resolution.
            break
        x, fx = x_new, f_new
    # Certify the exit point; a large projected gradient means the search
    # stalled without reaching a minimizer and the value cannot be trusted.
    # Near a minimum with curvature lam the smallest gradient resolvable in
    # floating point is ~sqrt(2 eps lam scale) — below that f is flat at
    # machine resolution — so the requested tol is floored at that level.
    g = comp.grad(x)
    pg = g.copy()
    pg[((x <= lo) & (g > 0.0)) | ((x >= up) & (g < 0.0)) | ~free_width] = 0.0
    lam = max(float(np.linalg.norm(comp.hess(x), 2)), 1.0)
    scale = 1.0 + abs(fx)
    attainable = np.sqrt(2.0 * np.finfo(float).eps * lam * scale)
    if np.linalg.norm(pg, ord=np.inf) <= max(tol * scale, attainable):
        return comp.value(x), x
    raise MinimizeError("projected Newton stalled with a non-vanishing "
                        "projected gradient; the expression may be "
                        "ill-conditioned over this box")


# ---------------------------------------------------------------------------
# Difference-of-convex component functions
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class DCFunctionSpec:
    """Vector map f(x, u) = g(x, u) - h(x, u), componentwise.

    g[j] and h[j] are convex expressions over the stacked argument
    p = (x, u) of length n_x + n_u.  Convex components carry h[j] == 0.
    """

    n_x: int
    n_u: int
    g: Tuple[ConvexExpr, ...]
    h: Tuple[ConvexExpr, ...]

    def __post_init__(self):
        g = tuple(self.g)
        h = tuple(self.h)
        if len(g) != self.n_x or len(h) != self.n_x:
            raise ValueError("need one (g, h) pair per state component")
        dim = self.n_x + self.n_u
        for j, e in enumerate(g + h):
            if e.dim != dim:
                raise ValueError(
                    f"component {j % self.n_x} expression has argument length "
                    f"{e.dim}, expected n_x + n_u = {dim}")
        object.__setattr__(self, "g", g)
        object.__setattr__(self, "h", h)

    @property
    def dim(self) -> int:
        return self.n_x + self.n_u

    def h_is_zero(self, j: int) -> bool:
        flat = flatten(self.h[j])
        return (not flat.quads and not flat.exps
                and flat.const == 0.0 and not np.any(flat.lin))

    def all_h_zero(self) -> bool:
        return all(self.h_is_zero(j) for j in range(self.n_x))


def eval_dc(f: DCFunctionSpec, x, u) -> np.ndarray:
    """f(x, u) = g(x, u) - h(x, u) evaluated componentwise."""
    p = np.concatenate([_vec(x, f.n_x), _vec(u, f.n_u)])
    return np.array([evaluate(f.g[j], p) - evaluate(f.h[j], p)
                     for j in range(f.n_x)])


def eval_dc_batch(f: DCFunctionSpec, P: np.ndarray) -> np.ndarray:
    """Evaluate f at stacked points P (rows are (x, u)); returns (n_pts, n_x)."""
    P = np.atleast_2d(np.asarray(P, dtype=float))
    cols = [CompiledExpr(f.g[j]).value_batch(P)
            - CompiledExpr(f.h[j]).value_batch(P) for j in range(f.n_x)]
    return np.stack(cols, axis=1)


def check_convexity(expr: ConvexExpr, box: Box, n_samples: int = 200,
                    rng: Optional[np.random.Generator] = None,
                    tol: float = 1e-9) -> float:
    """Sampled midpoint-convexity witness over a box.

    Draws point pairs and interpolation weights and returns the worst
    violation of f(t a + (1-t) b) <= t f(a) + (1-t) f(b) (negative or tiny
    when convexity holds).  A structural check in spirit; the atoms are convex
    by construction, so this guards against composition bugs.
    """
    if rng is None:
        rng = np.random.default_rng(0)
    comp = CompiledExpr(expr)
    A = rng.uniform(box.lower, box.upper, size=(n_samples, box.dim))
    B = rng.uniform(box.lower, box.upper, size=(n_samples, box.dim))
    t = rng.uniform(0.0, 1.0, size=(n_samples, 1))
    mid = t * A + (1.0 - t) * B
    viol = comp.value_batch(mid) - (t[:, 0] * comp.value_batch(A)
                                    + (1 - t[:, 0]) * comp.value_batch(B))
    worst = float(np.max(viol))
    if worst > tol * (1.0 + float(np.max(np.abs(comp.value_batch(A))))):
        raise ValueError(f"convexity witness violated by {worst:.3e}")
    return worst
