import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from dhsynth.errors import GeometryError
from dhsynth.geometry import (Ball, Box, CellGrid, Region, center, contains, cover, dump_boxes_csv,
                              inflate, load_boxes_csv)

coord = st.floats(-50, 50, allow_nan=False)


@st.composite
def boxes(draw, dim=2):
    lo = [draw(coord) for _ in range(dim)]
    w = [draw(st.floats(0, 20)) for _ in range(dim)]
    return Box(lo, [a + b for a, b in zip(lo, w)])


def test_cover_examples():
    assert cover(Box([0], [1]), [0.5]).count() == 1
    assert cover(Box([0, 0], [1, 1]), [0.25, 0.25]).count() == 4
    g = cover(Box([0], [1.1]), [0.5])
    assert g.count() == 2
    assert g.hull() == Box([0], [2.0])


def test_center_examples():
    assert np.allclose(center(Box([0], [2])), [1])
    assert np.allclose(center(Box([-1, -1], [1, 1])), [0, 0])
    assert np.allclose(center(Box([0.7, -2], [1.0, 2])), [0.85, 0])


def test_contains_examples():
    assert contains(Ball(1.0), Box([-1], [1]))
    assert not contains(Ball(1.0), Box([-1], [1.01]))
    g = CellGrid(Box([0], [0.5]), [0.25]).full_like()
    assert contains(g, Box([0.1], [0.4]))


def test_inflate_examples():
    assert inflate(Box([0], [2]), 0.5) == Box([-0.5], [2.5])
    assert inflate(Box([0], [2]), 0.0) == Box([0], [2])
    b = inflate(Box([1], [1]), 0.1)
    assert np.allclose(b.lo, [0.9]) and np.allclose(b.hi, [1.1])


def test_dimension_mismatch_is_reported():
    with pytest.raises(GeometryError):
        Box([0, 0], [1, 1]).intersect(Box([0], [1]))
    with pytest.raises(GeometryError):
        cover(Box([0, 0], [1, 1]), [0.5, 0.5, 0.5])


def test_inverted_box_rejected():
    with pytest.raises(GeometryError):
        Box([1], [0])


@given(boxes(), boxes())
def test_intersection_is_contained_in_both(a, b):
    c = a.intersect(b)
    if c is None:
        assert not a.intersects(b)
    else:
        assert a.contains_box(c) and b.contains_box(c)


@given(boxes(), boxes())
def test_hull_contains_both(a, b):
    h = a.hull(b)
    assert h.contains_box(a) and h.contains_box(b)


@given(boxes(), st.floats(0.05, 3))
def test_cover_contains_region(b, r):
    g = cover(b, [r, r])
    assert g.hull().contains_box(b)
    assert np.allclose(g.cell_radius, r)


@given(boxes(), st.floats(0, 5))
def test_inflate_widens_every_side(b, lam):
    c = inflate(b, lam)
    assert np.allclose(c.lo, b.lo - lam) and np.allclose(c.hi, b.hi + lam)


def _brute_covers(grid, lo, hi):
    """Every cell meeting the open interior of [lo, hi] is occupied."""
    for idx in np.ndindex(*grid.shape):
        cell = grid.cell_box(idx)
        if np.all(cell.lo < hi) and np.all(cell.hi > lo) and not grid.mask[idx]:
            return False
    return True


def _brute_meets(grid, lo, hi):
    for idx in grid.indices():
        cell = grid.cell_box(idx)
        if np.all(cell.lo <= hi) and np.all(cell.hi >= lo):
            return True
    return False


def _random_grid(seed):
    rng = np.random.default_rng(seed)
    grid = CellGrid(Box([0, 0], [4, 4]), [0.25, 0.25])
    return grid.with_mask(rng.random(grid.shape) < 0.7)


@settings(max_examples=60, deadline=None)
@given(st.integers(0, 2 ** 20), st.lists(st.tuples(st.floats(-1, 5), st.floats(0.01, 3), st.floats(-1, 5),
                                                   st.floats(0.01, 3)), min_size=1, max_size=8))
def test_vectorised_containment_matches_brute_force(seed, raw):
    grid = _random_grid(seed)
    lo = np.array([[a, c] for a, _, c, _ in raw])
    hi = lo + np.array([[b, d] for _, b, _, d in raw])
    cov = grid.covers_boxes(lo, hi)
    meet = grid.meets_boxes(lo, hi)
    for i in range(len(lo)):
        if np.all(lo[i] >= 0) and np.all(hi[i] <= 4):
            assert cov[i] == _brute_covers(grid, lo[i], hi[i])
        elif np.any(lo[i] < -1e-6) or np.any(hi[i] > 4 + 1e-6):
            # faces within 1e-9 cell widths of a grid line snap onto it
            assert not cov[i]
        assert meet[i] == _brute_meets(grid, lo[i], hi[i])


@settings(max_examples=60, deadline=None)
@given(st.integers(0, 2 ** 20), st.integers(0, 16), st.integers(0, 16))
def test_point_on_grid_vertex_covered_only_if_an_adjacent_cell_is(seed, i, j):
    grid = _random_grid(seed)
    p = np.array([[i * 0.25, j * 0.25]])
    if grid.covers_boxes(p, p)[0]:
        assert any(np.all(b.lo <= p[0]) and np.all(p[0] <= b.hi) for b in grid.boxes())


def test_tight_cover_on_grid_lines():
    g = CellGrid(Box([0], [2]), [0.25])
    lo, hi = g.cover_span(np.array([[0.5]]), np.array([[1.0]]))
    # pitch 0.5: [0.5, 1.0] is exactly cell 1, its neighbours only touch it
    assert lo[0, 0] == 1 and hi[0, 0] == 1


def test_region_with_ball_and_clip():
    grid = CellGrid(Box([-2], [2]), [0.25]).empty_like().add_box(Box([1.0], [1.5]))
    r = Region(grid, Ball(0.5, [0.0]), Box([-2], [2]))
    assert r.contains_box(Box([-0.5], [0.5]))
    assert r.contains_box(Box([1.0], [1.5]))
    assert not r.contains_box(Box([0.4], [1.2]))
    lo = np.array([[-0.5], [1.0], [0.4]])
    hi = np.array([[0.5], [1.5], [1.2]])
    assert list(r.contains_boxes(lo, hi)) == [True, True, False]


def test_ball_centre_offsets_containment():
    b = Ball(1.0, [5.0])
    assert b.contains_box(Box([4.5], [6.0]))
    assert not b.contains_box(Box([-0.5], [0.5]))


@given(st.lists(boxes(), min_size=1, max_size=5))
def test_box_csv_round_trip(bs):
    rows = [(f"m{i}", b) for i, b in enumerate(bs)]
    back = load_boxes_csv(dump_boxes_csv(rows, 2))
    assert back == rows


def test_grid_set_operations():
    g = CellGrid(Box([0, 0], [1, 1]), [0.125, 0.125])
    a = g.empty_like().add_box(Box([0, 0], [0.5, 0.5]))
    b = g.empty_like().add_box(Box([0.25, 0.25], [1, 1]))
    assert a.union(b).count() == 4 + 9 - 1
    assert a.intersection(b).count() == 1
    assert a.difference(b).count() == 3
    assert a.intersection(b).issubset(a)
    assert a.dilate(1).count() == 9
