"""Boxes, polytopes, support rows: oracles and order properties."""

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from scmpc.geometry import (
    Box,
    BoxTube,
    EnumerationCapError,
    Polytope,
    box_in_polytope,
    box_subset,
    feedback_image_in_polytope,
    support_rows,
    vertices,
)


# ---------------------------------------------------------------------------
# Box basics
# ---------------------------------------------------------------------------


def test_box_rejects_inverted_bounds():
    with pytest.raises(ValueError):
        Box([0.0, 1.0], [1.0, 0.5])


def test_box_clamps_subtolerance_crossings():
    b = Box([0.0, 1.0 + 1e-12], [1.0, 1.0])
    assert np.all(b.lower <= b.upper)


def test_singleton_box():
    b = Box.singleton([2.0, -3.0])
    assert b.is_singleton()
    assert b.contains([2.0, -3.0])
    assert not b.contains([2.0, -3.1])


# ---------------------------------------------------------------------------
# Vertex enumeration
# ---------------------------------------------------------------------------


def test_vertices_dedup_flat_dimension():
    b = Box([-1.0, 2.0, 0.0], [1.0, 2.0, 3.0])
    v = vertices(b)
    assert v.shape == (4, 3)
    expected = {(-1.0, 2.0, 0.0), (-1.0, 2.0, 3.0), (1.0, 2.0, 0.0), (1.0, 2.0, 3.0)}
    assert {tuple(row) for row in v} == expected


def test_vertices_singleton_is_one_point():
    v = vertices(Box.singleton([5.0, 10.0]))
    assert v.shape == (1, 2)
    np.testing.assert_array_equal(v[0], [5.0, 10.0])


def test_vertices_full_box_count():
    v = vertices(Box(-np.ones(4), np.ones(4)))
    assert v.shape == (16, 4)
    assert len({tuple(r) for r in v}) == 16


def test_vertices_cap():
    n = 17
    with pytest.raises(EnumerationCapError):
        vertices(Box(-np.ones(n), np.ones(n)))


# ---------------------------------------------------------------------------
# Subset order
# ---------------------------------------------------------------------------


def test_box_subset_basic():
    inner = Box([0.0, 0.0], [1.0, 1.0])
    outer = Box([-0.5, 0.0], [1.5, 1.0])
    assert box_subset(inner, outer)
    assert not box_subset(outer, inner)
    assert box_subset(inner, inner)


def test_box_subset_tolerance():
    inner = Box([0.0], [1.0 + 5e-10])
    outer = Box([0.0], [1.0])
    assert box_subset(inner, outer)            # within default 1e-9 slack
    assert not box_subset(inner, outer, tol=1e-12)


boxes_2d = st.builds(
    lambda c, w: Box(np.array(c) - np.abs(w), np.array(c) + np.abs(w)),
    st.tuples(st.floats(-5, 5), st.floats(-5, 5)),
    st.tuples(st.floats(0, 3), st.floats(0, 3)),
)


@given(boxes_2d, boxes_2d, boxes_2d)
@settings(max_examples=100, deadline=None)
def test_box_subset_is_a_partial_order(a, b, c):
    # Reflexive; antisymmetric up to tolerance; transitive.
    assert box_subset(a, a, tol=0.0)
    if box_subset(a, b, tol=0.0) and box_subset(b, a, tol=0.0):
        np.testing.assert_allclose(a.lower, b.lower, atol=0)
        np.testing.assert_allclose(a.upper, b.upper, atol=0)
    if box_subset(a, b, tol=0.0) and box_subset(b, c, tol=0.0):
        assert box_subset(a, c, tol=1e-12)


@given(boxes_2d, boxes_2d)
@settings(max_examples=100, deadline=None)
def test_subset_iff_all_vertices_inside(inner, outer):
    # Cross-check the coordinatewise test against brute-force vertex membership.
    by_rule = box_subset(inner, outer, tol=0.0)
    by_vertices = all(outer.contains(v, tol=0.0) for v in vertices(inner))
    assert by_rule == by_vertices


# ---------------------------------------------------------------------------
# Polytopes and support-function containment
# ---------------------------------------------------------------------------


def test_polytope_from_box_membership():
    poly = Polytope.from_box([-1.0, -2.0], [1.0, 2.0])
    assert poly.contains([0.5, -1.5])
    assert not poly.contains([1.2, 0.0])


def test_bounding_box_roundtrip():
    poly = Polytope.from_box([-3.0, -10.0], [5.0, 2.0])
    bb = poly.bounding_box()
    np.testing.assert_allclose(bb.lower, [-3.0, -10.0], atol=1e-8)
    np.testing.assert_allclose(bb.upper, [5.0, 2.0], atol=1e-8)


def test_bounding_box_detects_empty():
    poly = Polytope(np.array([[1.0], [-1.0]]), np.array([0.0, -1.0]))  # x<=0, x>=1
    with pytest.raises(ValueError, match="empty"):
        poly.bounding_box()


def test_bounding_box_detects_unbounded():
    poly = Polytope(np.array([[1.0, 0.0]]), np.array([1.0]))  # half-plane
    with pytest.raises(ValueError, match="unbounded"):
        poly.bounding_box()


def test_box_in_polytope_matches_vertex_check():
    rng = np.random.default_rng(7)
    poly = Polytope(rng.normal(size=(6, 2)), rng.uniform(0.5, 2.0, size=6))
    for _ in range(50):
        c = rng.uniform(-1.5, 1.5, size=2)
        w = rng.uniform(0.0, 1.0, size=2)
        box = Box(c - w, c + w)
        shift = rng.uniform(-0.5, 0.5, size=2)
        brute = all(poly.contains(v + shift, tol=0.0) for v in vertices(box))
        assert box_in_polytope(box, shift, poly, tol=0.0) == brute


def test_feedback_image_matches_vertex_check():
    rng = np.random.default_rng(11)
    poly = Polytope(rng.normal(size=(5, 1)), rng.uniform(0.5, 2.0, size=5))
    K = rng.normal(size=(1, 2))
    for _ in range(50):
        c = rng.uniform(-1.0, 1.0, size=2)
        w = rng.uniform(0.0, 1.0, size=2)
        box = Box(c - w, c + w)
        shift = rng.uniform(-0.5, 0.5, size=1)
        brute = all(poly.contains(K @ v + shift, tol=0.0) for v in vertices(box))
        assert feedback_image_in_polytope(box, K, shift, poly, tol=0.0) == brute


def test_support_rows_certificate_values():
    # max over [l, u] of h'x = max(h,0)'u + min(h,0)'l, checked by hand:
    # h = (2, -3), u = (1, 4), l = (-1, 2) -> 2*1 + (-3)*2 = -4.
    poly = Polytope(np.array([[2.0, -3.0]]), np.array([0.0]))
    c_up, c_lo, h, d = support_rows(poly)
    lhs = c_up @ np.array([1.0, 4.0]) + c_lo @ np.array([-1.0, 2.0])
    assert lhs == pytest.approx(-4.0, abs=1e-14)


# ---------------------------------------------------------------------------
# Tubes
# ---------------------------------------------------------------------------


def test_box_tube_cross_sections_and_width():
    lower = np.array([[0.0, 0.0], [-1.0, 0.5]])
    upper = np.array([[0.0, 0.0], [1.0, 0.75]])
    tube = BoxTube(lower, upper)
    assert len(tube) == 2
    assert tube.horizon == 1
    assert tube.cross_section(0).is_singleton()
    assert tube.max_width() == pytest.approx(2.0)
    traj = np.array([[0.0, 0.0], [0.9, 0.6]])
    assert tube.contains_trajectory(traj)
    bad = np.array([[0.0, 0.0], [1.1, 0.6]])
    assert not tube.contains_trajectory(bad)


def test_box_tube_from_boxes_roundtrip():
    boxes = [Box([0.0], [1.0]), Box([-2.0], [2.0])]
    tube = BoxTube.from_boxes(boxes)
    assert box_subset(tube.cross_section(0), boxes[0])
    assert box_subset(boxes[1], tube.cross_section(1))
