"""Axis-aligned boxes, polytopes, box tubes and support-function rows.

Boxes are the tube cross-sections {x : lower <= x <= upper}.  Polytopes
{z : Hz <= d} represent the state/input constraint sets.  Containment of a
(possibly shifted, possibly feedback-mapped) box in a polytope reduces to one
affine inequality per polytope row via the support function

    max_{l <= x <= u} h'x = sum_j max(h_j * u_j, h_j * l_j),

which is linear in (l, u) once split by the sign of h_j.  The same split is
emitted as coefficient rows so the bounds can be decision variables inside a
convex program.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Iterable, List, Optional, Sequence, Tuple

import numpy as np

# Inclusion tests allow this much slack: interior-point solutions satisfy
# constraints to solver tolerance, not exactly, and nesting assertions must
# not fail on 1e-12 noise.
INCLUSION_TOL = 1e-9

# Vertex enumeration is capped at 2^16 points.
VERTEX_CAP_DIM = 16


class EnumerationCapError(ValueError):
    """Raised when a box has too many dimensions to enumerate vertices."""


def _as_vector(v, name: str) -> np.ndarray:
    arr = np.atleast_1d(np.asarray(v, dtype=float))
    if arr.ndim != 1:
        raise ValueError(f"{name} must be a vector, got shape {arr.shape}")
    return arr


@dataclass(frozen=True)
class Box:
    """Axis-aligned box {x : lower <= x <= upper}."""

    lower: np.ndarray
    upper: np.ndarray

    def __post_init__(self):
        lo = _as_vector(self.lower, "lower")
        up = _as_vector(self.upper, "upper")
        if lo.shape != up.shape:
            raise ValueError("lower/upper dimension mismatch")
        if np.any(lo > up + 1e-9):
            raise ValueError("box has lower > upper beyond tolerance")
        # Clamp sub-tolerance crossings produced by finite-precision solves.
        object.__setattr__(self, "lower", lo)
        object.__setattr__(self, "upper", np.maximum(lo, up))

    @property
    def dim(self) -> int:
        return self.lower.shape[0]

    def widths(self) -> np.ndarray:
        return self.upper - self.lower

    def midpoint(self) -> np.ndarray:
        return 0.5 * (self.lower + self.upper)

    def contains(self, x, tol: float = INCLUSION_TOL) -> bool:
        x = np.asarray(x, dtype=float)
        return bool(np.all(x >= self.lower - tol) and np.all(x <= self.upper + tol))

    def is_singleton(self, tol: float = 0.0) -> bool:
        return bool(np.all(self.widths() <= tol))

    @staticmethod
    def singleton(point) -> "Box":
        p = _as_vector(point, "point")
        return Box(p.copy(), p.copy())


def vertices(box: Box) -> np.ndarray:
    """All corner points of a box, shape (n_v, dim).

    Flat (zero-width) dimensions are deduplicated, so a singleton returns a
    single point and the count is 2**(number of non-flat dimensions).
    """
    if box.dim > VERTEX_CAP_DIM:
        raise EnumerationCapError(
            f"vertex enumeration of a {box.dim}-dimensional box exceeds the "
            f"2^{VERTEX_CAP_DIM} cap"
        )
    free = np.flatnonzero(box.widths() > 0.0)
    n_free = free.size
    out = np.tile(box.lower, (2 ** n_free, 1))
    if n_free:
        # Binary grid over the non-flat dimensions.
        grid = (np.arange(2 ** n_free)[:, None] >> np.arange(n_free)[None, :]) & 1
        out[:, free] = np.where(grid.astype(bool), box.upper[free], box.lower[free])
    return out


def box_subset(inner: Box, outer: Box, tol: float = INCLUSION_TOL) -> bool:
    """Elementwise inclusion inner ⊆ outer with tolerance slack."""
    if inner.dim != outer.dim:
        raise ValueError("box dimension mismatch")
    return bool(
        np.all(outer.lower - tol <= inner.lower)
        and np.all(inner.upper <= outer.upper + tol)
    )


@dataclass(frozen=True)
class Polytope:
    """Polytope {z : H z <= d}."""

    H: np.ndarray
    d: np.ndarray

    def __post_init__(self):
        H = np.atleast_2d(np.asarray(self.H, dtype=float))
        d = _as_vector(self.d, "d")
        if H.shape[0] != d.shape[0]:
            raise ValueError("row count mismatch between H and d")
        object.__setattr__(self, "H", H)
        object.__setattr__(self, "d", d)

    @property
    def dim(self) -> int:
        return self.H.shape[1]

    @property
    def n_rows(self) -> int:
        return self.H.shape[0]

    @staticmethod
    def from_box(lower, upper) -> "Polytope":
        lo = _as_vector(lower, "lower")
        up = _as_vector(upper, "upper")
        n = lo.shape[0]
        eye = np.eye(n)
        return Polytope(np.vstack([eye, -eye]), np.concatenate([up, -lo]))

    @staticmethod
    def symmetric_box(radii) -> "Polytope":
        r = _as_vector(radii, "radii")
        return Polytope.from_box(-r, r)

    def contains(self, z, tol: float = INCLUSION_TOL) -> bool:
        z = np.asarray(z, dtype=float)
        return bool(np.all(self.H @ z <= self.d + tol))

    def _axis_bounds(self):
        """(lower, upper) when every row constrains a single coordinate,
        else None."""
        n = self.dim
        lo = np.full(n, -np.inf)
        up = np.full(n, np.inf)
        for h, di in zip(self.H, self.d):
            nz = np.nonzero(h)[0]
            if nz.size != 1:
                return None
            j = nz[0]
            if h[j] > 0:
                up[j] = min(up[j], di / h[j])
            else:
                lo[j] = max(lo[j], di / h[j])
        return lo, up

    def project(self, z, sweeps: int = 200, tol: float = 1e-12) -> np.ndarray:
        """Euclidean projection onto the polytope.

        Axis-aligned polytopes (boxes) are clipped exactly; general ones use
        Dykstra's alternating projections onto the half-space rows.
        """
        z = np.asarray(z, dtype=float)
        if self.contains(z, tol=0.0):
            return z.copy()
        bounds = self._axis_bounds()
        if bounds is not None:
            return np.clip(z, bounds[0], bounds[1])
        y = z.copy()
        corrections = np.zeros((self.n_rows, self.dim))
        for _ in range(sweeps):
            moved = 0.0
            for i in range(self.n_rows):
                h, di = self.H[i], self.d[i]
                w = y + corrections[i]
                excess = float(h @ w - di)
                if excess > 0.0:
                    step = (excess / float(h @ h)) * h
                    y_new = w - step
                else:
                    y_new = w
                corrections[i] = w - y_new
                moved = max(moved, float(np.max(np.abs(y_new - y))))
                y = y_new
            if moved <= tol:
                break
        return y

    def bounding_box(self) -> Box:
        """Bounding box by per-coordinate LPs; verifies nonempty and bounded."""
        from scipy.optimize import linprog

        n = self.dim
        lo = np.empty(n)
        up = np.empty(n)
        for j in range(n):
            for sign, dest in ((1.0, lo), (-1.0, up)):
                c = np.zeros(n)
                c[j] = sign
                res = linprog(c, A_ub=self.H, b_ub=self.d, bounds=[(None, None)] * n,
                              method="highs")
                if res.status == 2:
                    raise ValueError("polytope is empty")
                if res.status == 3:
                    raise ValueError("polytope is unbounded")
                if not res.success:
                    raise ValueError(f"bounding-box LP failed: {res.message}")
                dest[j] = sign * res.fun
        return Box(lo, up)


def support_rows(poly: Polytope, gain: Optional[np.ndarray] = None,
                 box_dim: Optional[int] = None
                 ) -> Tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray]:
    """Affine certificate rows for {M x : l <= x <= u} ⊕ {shift} ⊆ poly.

    With a = H M (or a = H when gain is None), row r of the containment test is

        C_up[r]·u + C_lo[r]·l + H[r]·shift <= d[r]

    where C_up = max(a, 0) and C_lo = min(a, 0).  Returns (C_up, C_lo, H, d);
    the caller supplies bounds/shift as numbers or decision-variable columns.
    """
    if gain is None:
        a = poly.H
        if box_dim is not None and box_dim != poly.dim:
            raise ValueError("box/polytope dimension mismatch")
    else:
        gain = np.atleast_2d(np.asarray(gain, dtype=float))
        if gain.shape[0] != poly.dim:
            raise ValueError("gain output dimension must match polytope")
        a = poly.H @ gain
    return np.maximum(a, 0.0), np.minimum(a, 0.0), poly.H, poly.d


def box_in_polytope(box: Box, shift, poly: Polytope,
                    tol: float = INCLUSION_TOL) -> bool:
    """True iff box ⊕ {shift} ⊆ poly (support-function test)."""
    c_up, c_lo, h, d = support_rows(poly, gain=None, box_dim=box.dim)
    shift = _as_vector(shift, "shift")
    lhs = c_up @ box.upper + c_lo @ box.lower + h @ shift
    return bool(np.all(lhs <= d + tol))


def feedback_image_in_polytope(box: Box, gain, shift, poly: Polytope,
                               tol: float = INCLUSION_TOL) -> bool:
    """True iff K·box ⊕ {shift} ⊆ poly for the matrix gain K."""
    c_up, c_lo, h, d = support_rows(poly, gain=np.atleast_2d(gain))
    shift = _as_vector(shift, "shift")
    lhs = c_up @ box.upper + c_lo @ box.lower + h @ shift
    return bool(np.all(lhs <= d + tol))


@dataclass(frozen=True)
class BoxTube:
    """Sequence of boxes indexed by prediction stage k = 0..N."""

    lower: np.ndarray  # (N+1, n)
    upper: np.ndarray  # (N+1, n)

    def __post_init__(self):
        lo = np.atleast_2d(np.asarray(self.lower, dtype=float))
        up = np.atleast_2d(np.asarray(self.upper, dtype=float))
        if lo.shape != up.shape:
            raise ValueError("tube lower/upper shape mismatch")
        if np.any(lo > up + 1e-9):
            raise ValueError("tube has lower > upper beyond tolerance")
        object.__setattr__(self, "lower", lo)
        object.__setattr__(self, "upper", np.maximum(lo, up))

    @property
    def horizon(self) -> int:
        return self.lower.shape[0] - 1

    @property
    def dim(self) -> int:
        return self.lower.shape[1]

    def __len__(self) -> int:
        return self.lower.shape[0]

    def cross_section(self, k: int) -> Box:
        return Box(self.lower[k], self.upper[k])

    def boxes(self) -> List[Box]:
        return [self.cross_section(k) for k in range(len(self))]

    def max_width(self) -> float:
        return float(np.max(self.upper - self.lower))

    @staticmethod
    def from_boxes(boxes: Sequence[Box]) -> "BoxTube":
        return BoxTube(np.array([b.lower for b in boxes]),
                       np.array([b.upper for b in boxes]))

    def contains_trajectory(self, states: np.ndarray,
                            tol: float = INCLUSION_TOL) -> bool:
        states = np.atleast_2d(np.asarray(states, dtype=float))
        if states.shape != self.lower.shape:
            raise ValueError("trajectory shape mismatch")
        return bool(np.all(states >= self.lower - tol)
                    and np.all(states <= self.upper + tol))
