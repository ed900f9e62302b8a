"""Jacobian linearization of difference-of-convex models.

A model component f_j = g_j - h_j is linearized either at one shared base
point or at per-component base points (one per row, and separately for the
convex and concave parts).  The exact linearization error

    e(x, u) = f(x, u) - f(x0, u0) - A (x - x0) - B (u - u0)

splits as e = e_g - e_h with both parts pointwise nonnegative, because a
convex function lies above its tangent plane.  The error parts are also
materialized as convex expressions in the atom language (convex minus affine
stays in-language), which is what the tube-constraint builders consume.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass
from typing import List, Optional, Sequence, Tuple

import numpy as np

from .expr import (
    Affine,
    ConvexExpr,
    DCFunctionSpec,
    WeightedSum,
    evaluate,
    gradient,
    subtract_affine,
)
from .geometry import Box


@dataclass(frozen=True)
class LinearizedStep:
    """Row-wise linearization data for one model at given base points.

    Row j of (Ag, Bg) is the gradient of g_j at base_g[j]; gval[j] is
    g_j(base_g[j]).  The h-blocks are anchored at base_h[j], which may differ
    from base_g[j].  When every base point coincides, A = Ag - Ah and
    B = Bg - Bh are the ordinary model Jacobians and f0 = gval - hval is the
    model value at the base.
    """

    model: DCFunctionSpec
    base_g: np.ndarray  # (n_x, n_x + n_u)
    base_h: np.ndarray  # (n_x, n_x + n_u)
    Ag: np.ndarray
    Bg: np.ndarray
    gval: np.ndarray
    Ah: np.ndarray
    Bh: np.ndarray
    hval: np.ndarray

    @property
    def n_x(self) -> int:
        return self.model.n_x

    @property
    def n_u(self) -> int:
        return self.model.n_u

    @property
    def A(self) -> np.ndarray:
        return self.Ag - self.Ah

    @property
    def B(self) -> np.ndarray:
        return self.Bg - self.Bh

    @property
    def f0(self) -> np.ndarray:
        """g - h values at the row base points (model value when bases agree)."""
        return self.gval - self.hval

    def shared_base(self) -> Tuple[np.ndarray, np.ndarray]:
        """The common base point; raises if rows use different bases."""
        if not (np.all(self.base_g == self.base_g[0])
                and np.all(self.base_h == self.base_g[0])):
            raise ValueError("linearization rows do not share a base point")
        n_x = self.model.n_x
        return self.base_g[0, :n_x], self.base_g[0, n_x:]


def _check_operating(points: np.ndarray, operating: Optional[Box], what: str):
    if operating is None:
        return
    for p in np.atleast_2d(points):
        if not operating.contains(p):
            warnings.warn(
                f"{what} base point {np.array2string(p, precision=4)} lies "
                "outside the operating box; linearization proceeds anyway",
                RuntimeWarning, stacklevel=3)
            return


def _rows(exprs: Sequence[ConvexExpr], bases: np.ndarray, n_x: int
          ) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    n = len(exprs)
    A = np.zeros((n, n_x))
    B = np.zeros((n, bases.shape[1] - n_x))
    val = np.zeros(n)
    for j, e in enumerate(exprs):
        grad = gradient(e, bases[j])
        A[j] = grad[:n_x]
        B[j] = grad[n_x:]
        val[j] = evaluate(e, bases[j])
    return A, B, val


def linearize_rows(f: DCFunctionSpec,
                   points: Sequence[Tuple[np.ndarray, np.ndarray]],
                   points_h: Optional[Sequence[Tuple[np.ndarray, np.ndarray]]] = None,
                   operating: Optional[Box] = None) -> LinearizedStep:
    """Linearize with one base point per component (g and h separately).

    `points[j]` is the (x, u) base for row j.  `points_h` defaults to
    `points`; passing it separately anchors the concave parts at their own
    per-component points.
    """
    if len(points) != f.n_x:
        raise ValueError("need one base point per state component")
    base_g = np.array([np.concatenate([np.asarray(x, dtype=float).ravel(),
                                       np.asarray(u, dtype=float).ravel()])
                       for x, u in points])
    if base_g.shape[1] != f.dim:
        raise ValueError("base point dimension mismatch")
    if points_h is None:
        base_h = base_g.copy()
    else:
        if len(points_h) != f.n_x:
            raise ValueError("need one h-base point per state component")
        base_h = np.array([np.concatenate([np.asarray(x, dtype=float).ravel(),
                                           np.asarray(u, dtype=float).ravel()])
                           for x, u in points_h])
        if base_h.shape[1] != f.dim:
            raise ValueError("h base point dimension mismatch")
    _check_operating(base_g, operating, "linearization")
    if points_h is not None:
        _check_operating(base_h, operating, "linearization (concave part)")
    Ag, Bg, gval = _rows(f.g, base_g, f.n_x)
    Ah, Bh, hval = _rows(f.h, base_h, f.n_x)
    return LinearizedStep(f, base_g, base_h, Ag, Bg, gval, Ah, Bh, hval)


def linearize_at(f: DCFunctionSpec, x0, u0,
                 operating: Optional[Box] = None) -> LinearizedStep:
    """Linearize all components at one shared base point (x0, u0)."""
    x0 = np.asarray(x0, dtype=float).ravel()
    u0 = np.asarray(u0, dtype=float).ravel()
    return linearize_rows(f, [(x0, u0)] * f.n_x, operating=operating)


def error_value_dc(step: LinearizedStep, x, u) -> Tuple[np.ndarray, np.ndarray]:
    """Linearization errors (e_g, e_h) of the convex parts at (x, u).

    e_g[j] = g_j(z) - g_j(z0g_j) - grad g_j(z0g_j)'(z - z0g_j), likewise e_h;
    both are nonnegative up to roundoff for any query point.
    """
    f = step.model
    z = np.concatenate([np.asarray(x, dtype=float).ravel(),
                        np.asarray(u, dtype=float).ravel()])
    if z.shape[0] != f.dim:
        raise ValueError("query point dimension mismatch")
    eg = np.zeros(f.n_x)
    eh = np.zeros(f.n_x)
    for j in range(f.n_x):
        dg = z - step.base_g[j]
        eg[j] = (evaluate(f.g[j], z) - step.gval[j]
                 - step.Ag[j] @ dg[:f.n_x] - step.Bg[j] @ dg[f.n_x:])
        dh = z - step.base_h[j]
        eh[j] = (evaluate(f.h[j], z) - step.hval[j]
                 - step.Ah[j] @ dh[:f.n_x] - step.Bh[j] @ dh[f.n_x:])
    return eg, eh


def error_value(step: LinearizedStep, x, u) -> np.ndarray:
    """Linearization error e = f(x,u) - f0 - A(x-x0) - B(u-u0) (= e_g - e_h)."""
    eg, eh = error_value_dc(step, x, u)
    return eg - eh


def _tangent_remainder(expr: ConvexExpr, base: np.ndarray, row_x: np.ndarray,
                       row_u: np.ndarray, val: float) -> WeightedSum:
    grad = np.concatenate([row_x, row_u])
    # expr(z) - [val + grad'(z - base)] >= 0 for convex expr.
    return subtract_affine(expr, Affine(grad, val - float(grad @ base)))


def error_expressions(step: LinearizedStep
                      ) -> Tuple[List[ConvexExpr], List[ConvexExpr]]:
    """Per-component error parts (e_g[j], e_h[j]) as convex expressions.

    Each is a function of the stacked argument z = (x, u); nonnegative
    everywhere and zero at its own base point.
    """
    f = step.model
    eg = [_tangent_remainder(f.g[j], step.base_g[j], step.Ag[j], step.Bg[j],
                             step.gval[j]) for j in range(f.n_x)]
    eh = [_tangent_remainder(f.h[j], step.base_h[j], step.Ah[j], step.Bh[j],
                             step.hval[j]) for j in range(f.n_x)]
    return eg, eh
