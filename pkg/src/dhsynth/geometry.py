"""Boxes, the infinity-norm ball, and grid-aligned cell sets.

Cells of a grid have half-width ``cell_radius`` and are laid out from
``domain.lo`` with pitch ``2 * cell_radius``.  A trailing partial cell is kept
at full size, so a grid may overhang its domain on the upper side.  Points on
a shared face belong to the lower-index cell.
"""
from __future__ import annotations

import csv
import io
import itertools
import math
from dataclasses import dataclass

import numpy as np

from .errors import GeometryError

_SNAP = 1e-9


def _vec(values, name="vector"):
    arr = np.array(values, dtype=float).reshape(-1)
    arr.setflags(write=False)
    return arr


class Box:
    """Closed hyper-rectangle ``[lo, hi]``."""

    __slots__ = ("lo", "hi")

    def __init__(self, lo, hi):
        lo = _vec(lo)
        hi = _vec(hi)
        if lo.shape != hi.shape:
            raise GeometryError(f"box bounds differ in length: {lo.size} vs {hi.size}")
        if np.any(np.isnan(lo)) or np.any(np.isnan(hi)):
            raise GeometryError("box bounds must not be NaN")
        if np.any(lo > hi):
            raise GeometryError(f"box has lo > hi: lo={lo.tolist()}, hi={hi.tolist()}")
        object.__setattr__(self, "lo", lo)
        object.__setattr__(self, "hi", hi)

    def __setattr__(self, key, value):
        raise AttributeError("Box is immutable")

    @classmethod
    def from_center(cls, c, radius):
        c = np.asarray(c, dtype=float)
        radius = np.broadcast_to(np.asarray(radius, dtype=float), c.shape)
        return cls(c - radius, c + radius)

    @property
    def dim(self):
        return self.lo.size

    @property
    def radius(self):
        return (self.hi - self.lo) / 2.0

    @property
    def width(self):
        return self.hi - self.lo

    def is_bounded(self):
        return bool(np.all(np.isfinite(self.lo)) and np.all(np.isfinite(self.hi)))

    def contains_box(self, other):
        _check_dim(self, other)
        return bool(np.all(other.lo >= self.lo) and np.all(other.hi <= self.hi))

    def contains_point(self, x):
        x = np.asarray(x, dtype=float)
        return bool(np.all(x >= self.lo) and np.all(x <= self.hi))

    def intersects(self, other):
        _check_dim(self, other)
        return bool(np.all(np.maximum(self.lo, other.lo) <= np.minimum(self.hi, other.hi)))

    def intersect(self, other):
        """Intersection box, or None when the boxes are disjoint."""
        _check_dim(self, other)
        lo = np.maximum(self.lo, other.lo)
        hi = np.minimum(self.hi, other.hi)
        if np.any(lo > hi):
            return None
        return Box(lo, hi)

    def hull(self, other):
        _check_dim(self, other)
        return Box(np.minimum(self.lo, other.lo), np.maximum(self.hi, other.hi))

    def norm(self):
        """Largest infinity norm of any point in the box."""
        return float(np.max(np.maximum(np.abs(self.lo), np.abs(self.hi))))

    def corners(self):
        return np.array(list(itertools.product(*zip(self.lo, self.hi))))

    def sample(self, rng, k):
        return self.lo + (self.hi - self.lo) * rng.random((k, self.dim))

    def to_json(self):
        return {"lo": [_num_out(v) for v in self.lo], "hi": [_num_out(v) for v in self.hi]}

    def __eq__(self, other):
        return (isinstance(other, Box) and np.array_equal(self.lo, other.lo)
                and np.array_equal(self.hi, other.hi))

    def __hash__(self):
        return hash((self.lo.tobytes(), self.hi.tobytes()))

    def __repr__(self):
        return f"Box(lo={self.lo.tolist()}, hi={self.hi.tolist()})"


def _num_out(v):
    v = float(v)
    if math.isinf(v):
        return "inf" if v > 0 else "-inf"
    return v


def _check_dim(a, b):
    if a.dim != b.dim:
        raise GeometryError(f"dimension mismatch: {a.dim} vs {b.dim}")


def hull_of(boxes):
    boxes = list(boxes)
    if not boxes:
        return None
    lo = np.min([b.lo for b in boxes], axis=0)
    hi = np.max([b.hi for b in boxes], axis=0)
    return Box(lo, hi)


@dataclass(frozen=True)
class Ball:
    """Closed infinity-norm ball of the given radius, around ``center`` (default the origin)."""

    radius: float
    center: tuple = None

    def __post_init__(self):
        if not self.radius > 0:
            raise GeometryError(f"ball radius must be positive, got {self.radius}")
        if self.center is not None:
            object.__setattr__(self, "center", tuple(float(v) for v in np.atleast_1d(self.center)))

    def offset(self, dim):
        return np.zeros(dim) if self.center is None else np.asarray(self.center)

    def box(self, dim):
        c = self.offset(dim)
        return Box(c - self.radius, c + self.radius)

    def contains_box(self, b):
        c = self.offset(b.dim)
        return float(np.max(np.maximum(np.abs(b.lo - c), np.abs(b.hi - c)))) <= self.radius

    def contains_points(self, pts, tol=0.0):
        pts = np.atleast_2d(pts)
        return np.max(np.abs(pts - self.offset(pts.shape[1])), axis=1) <= self.radius + tol


def center(b):
    return (b.lo + b.hi) / 2.0


def inflate(b, lam):
    """Grow ``b`` by ``lam`` on every side (the half-width of ``b`` is kept)."""
    lam = np.broadcast_to(np.asarray(lam, dtype=float), b.lo.shape)
    if np.any(lam < 0):
        raise GeometryError("inflation amount must be nonnegative")
    return Box(b.lo - lam, b.hi + lam)


def _snap(q):
    r = np.round(q)
    return np.where(np.abs(q - r) < _SNAP, r, q)


class CellGrid:
    """Set of cells on a regular grid anchored at ``domain.lo``.

    Occupancy is stored as a boolean array indexed by cell index.  Indices
    run from 0 to ``shape - 1`` along each axis.
    """

    __slots__ = ("domain", "cell_radius", "shape", "mask")

    def __init__(self, domain, cell_radius, mask=None):
        rho = np.broadcast_to(np.asarray(cell_radius, dtype=float), domain.lo.shape).copy()
        if np.any(rho <= 0):
            raise GeometryError("cell radius must be positive")
        if not domain.is_bounded():
            raise GeometryError("grid domain must be bounded")
        rho.setflags(write=False)
        counts = np.ceil(_snap(domain.width / (2 * rho))).astype(int)
        shape = tuple(int(max(c, 1)) for c in counts)
        if mask is None:
            mask = np.zeros(shape, dtype=bool)
        else:
            mask = np.array(mask, dtype=bool)
            if mask.shape != shape:
                raise GeometryError(f"occupancy shape {mask.shape} does not match grid {shape}")
        mask.setflags(write=False)
        object.__setattr__(self, "domain", domain)
        object.__setattr__(self, "cell_radius", rho)
        object.__setattr__(self, "shape", shape)
        object.__setattr__(self, "mask", mask)

    def __setattr__(self, key, value):
        raise AttributeError("CellGrid is immutable")

    @property
    def dim(self):
        return self.domain.dim

    @property
    def pitch(self):
        return 2 * self.cell_radius

    def with_mask(self, mask):
        return CellGrid(self.domain, self.cell_radius, mask)

    def empty_like(self):
        return CellGrid(self.domain, self.cell_radius)

    def full_like(self):
        return CellGrid(self.domain, self.cell_radius, np.ones(self.shape, dtype=bool))

    def refined(self, levels):
        """Empty grid with the same anchor and cells split ``2**levels`` times per axis."""
        return CellGrid(self.domain, self.cell_radius / (2 ** levels))

    def count(self):
        return int(self.mask.sum())

    def is_empty(self):
        return not self.mask.any()

    def indices(self):
        """Occupied indices in ascending lexicographic order."""
        return [tuple(int(v) for v in row) for row in np.argwhere(self.mask)]

    def index_array(self):
        return np.argwhere(self.mask)

    def index_of(self, x):
        """Index of the cell holding point(s) ``x`` (may be out of range)."""
        x = np.asarray(x, dtype=float)
        q = _snap((x - self.domain.lo) / self.pitch)
        idx = np.ceil(q).astype(np.int64) - 1
        return np.where(q <= 0, np.where(q == 0, 0, idx), idx)

    def cell_box(self, idx):
        idx = np.asarray(idx, dtype=float)
        lo = self.domain.lo + self.pitch * idx
        return Box(lo, lo + self.pitch)

    def cell_lo(self, idx_array):
        return self.domain.lo + self.pitch * np.asarray(idx_array, dtype=float)

    def in_range(self, idx_array):
        idx_array = np.atleast_2d(idx_array)
        return np.all((idx_array >= 0) & (idx_array < np.array(self.shape)), axis=1)

    def span(self, b):
        """Inclusive index range of cells meeting box ``b``."""
        return self.index_of(b.lo), self.index_of(b.hi)

    def cover_span(self, los, his):
        """Inclusive index range of the fewest cells covering each box.

        A box face lying on a grid line needs only the cell on the box's side
        of that line.
        """
        qlo = _snap((np.asarray(los, dtype=float) - self.domain.lo) / self.pitch)
        qhi = _snap((np.asarray(his, dtype=float) - self.domain.lo) / self.pitch)
        ilo = np.floor(qlo).astype(np.int64)
        ihi = np.maximum(np.ceil(qhi).astype(np.int64) - 1, ilo)
        return ilo, ihi

    def boxes(self):
        return [self.cell_box(i) for i in self.indices()]

    def union(self, other):
        self._compatible(other)
        return self.with_mask(self.mask | other.mask)

    def intersection(self, other):
        self._compatible(other)
        return self.with_mask(self.mask & other.mask)

    def difference(self, other):
        self._compatible(other)
        return self.with_mask(self.mask & ~other.mask)

    def issubset(self, other):
        self._compatible(other)
        return not np.any(self.mask & ~other.mask)

    def dilate(self, k):
        """Occupancy grown by ``k[i]`` cells along axis ``i`` (box dilation)."""
        k = np.broadcast_to(np.asarray(k, dtype=int), (self.dim,))
        out = self.mask.copy()
        for axis, kk in enumerate(k):
            if kk <= 0:
                continue
            src = out.copy()
            n = self.shape[axis]
            for s in range(1, min(int(kk), n - 1) + 1):
                lead = [slice(None)] * self.dim
                trail = [slice(None)] * self.dim
                lead[axis] = slice(s, None)
                trail[axis] = slice(None, n - s)
                out[tuple(lead)] |= src[tuple(trail)]
                out[tuple(trail)] |= src[tuple(lead)]
        return self.with_mask(out)

    def add_boxes(self, los, his):
        """Copy with every cell meeting any of the boxes ``[los[k], his[k]]`` marked."""
        los = np.atleast_2d(los)
        his = np.atleast_2d(his)
        if los.size == 0:
            return self
        out = self.mask.copy()
        ilo, ihi = self.cover_span(los, his)
        ilo = np.clip(ilo, 0, np.array(self.shape) - 1)
        ihi = np.clip(ihi, 0, np.array(self.shape) - 1)
        for a, b in zip(ilo, ihi):
            out[tuple(slice(int(s), int(e) + 1) for s, e in zip(a, b))] = True
        return self.with_mask(out)

    def add_box(self, b):
        return self.add_boxes(b.lo[None, :], b.hi[None, :])

    def meets_box(self, b):
        """True when some occupied cell meets ``b``."""
        lo, hi = self.span(b)
        lo = np.maximum(lo, 0)
        hi = np.minimum(hi, np.array(self.shape) - 1)
        if np.any(lo > hi):
            return False
        return bool(self.mask[tuple(slice(int(s), int(e) + 1) for s, e in zip(lo, hi))].any())

    def _prefix(self):
        """Summed occupancy table padded with a leading zero slab on every axis."""
        t = np.zeros(tuple(k + 1 for k in self.shape), dtype=np.int64)
        t[tuple(slice(1, None) for _ in self.shape)] = self.mask
        for axis in range(self.dim):
            np.cumsum(t, axis=axis, out=t)
        return t

    def _count_in(self, table, lo, hi):
        """Occupied cells in the index boxes ``[lo, hi]`` (inclusive, already clipped)."""
        total = np.zeros(len(lo), dtype=np.int64)
        for corner in itertools.product((0, 1), repeat=self.dim):
            idx = tuple(np.where(c, hi[:, k] + 1, lo[:, k]) for k, c in enumerate(corner))
            sign = (-1) ** (self.dim - sum(corner))
            total += sign * table[idx]
        return total

    def covers_boxes(self, los, his):
        """For each box, whether occupied cells cover it entirely."""
        los, his = np.atleast_2d(los), np.atleast_2d(his)
        lo, hi = self.cover_span(los, his)
        limit = np.array(self.shape) - 1
        inside = np.all((lo >= 0) & (hi <= limit), axis=1)
        out = np.zeros(len(los), dtype=bool)
        if inside.any():
            l, h = lo[inside], hi[inside]
            vol = np.prod(h - l + 1, axis=1)
            out[inside] = self._count_in(self._prefix(), l, h) == vol
        return out

    def meets_boxes(self, los, his):
        """For each box, whether some occupied cell meets it (closed cells)."""
        los, his = np.atleast_2d(los), np.atleast_2d(his)
        lo = np.maximum(self.index_of(los), 0)
        hi = np.minimum(self.index_of(his), np.array(self.shape) - 1)
        ok = np.all(lo <= hi, axis=1)
        out = np.zeros(len(los), dtype=bool)
        if ok.any():
            out[ok] = self._count_in(self._prefix(), lo[ok], hi[ok]) > 0
        return out

    def contains_points(self, pts, tol=0.0):
        """Membership of points within ``tol`` (infinity norm) of an occupied cell."""
        pts = np.atleast_2d(np.asarray(pts, dtype=float))
        lo = self.index_of(pts - tol)
        hi = self.index_of(pts + tol)
        extent = int(np.max(hi - lo)) if pts.size else 0
        hit = np.zeros(len(pts), dtype=bool)
        limit = np.array(self.shape)
        for off in itertools.product(range(extent + 1), repeat=self.dim):
            idx = lo + np.array(off)
            ok = np.all((idx <= hi) & (idx >= 0) & (idx < limit), axis=1)
            if not ok.any():
                continue
            sel = np.where(ok)[0]
            hit[sel] |= self.mask[tuple(idx[sel].T)]
        return hit

    def hull(self):
        if self.is_empty():
            return None
        idx = self.index_array()
        lo = self.cell_lo(idx.min(axis=0))
        hi = self.cell_lo(idx.max(axis=0)) + self.pitch
        return Box(lo, hi)

    def _compatible(self, other):
        if (self.shape != other.shape or not np.array_equal(self.cell_radius, other.cell_radius)
                or self.domain != other.domain):
            raise GeometryError("grids are not on the same master grid")

    def __eq__(self, other):
        return (isinstance(other, CellGrid) and self.domain == other.domain
                and np.array_equal(self.cell_radius, other.cell_radius)
                and np.array_equal(self.mask, other.mask))

    def __hash__(self):
        return hash((self.domain, self.cell_radius.tobytes(), self.mask.tobytes()))

    def __repr__(self):
        return f"CellGrid(shape={self.shape}, rho={self.cell_radius.tolist()}, occupied={self.count()})"


def cover(region, rho):
    """Canonical cover of ``region``: every cell of the grid anchored at ``region.lo``."""
    rho = np.asarray(rho, dtype=float)
    if rho.ndim and rho.size != region.dim:
        raise GeometryError(f"dimension mismatch: region has {region.dim}, rho has {rho.size}")
    return CellGrid(region, rho).full_like()


class Region:
    """``(grid ∪ ball) ∩ clip`` with any part optional."""

    __slots__ = ("grid", "ball", "clip")

    def __init__(self, grid=None, ball=None, clip=None):
        self.grid = grid
        self.ball = ball
        self.clip = clip

    def contains_box(self, b):
        if self.clip is not None and not self.clip.contains_box(b):
            return False
        if self.ball is not None and self.ball.contains_box(b):
            return True
        if self.grid is None:
            return False
        g = self.grid
        lo, hi = g.cover_span(b.lo, b.hi)
        axes = [np.arange(s, e + 1) for s, e in zip(lo, hi)]
        mesh = np.stack(np.meshgrid(*axes, indexing="ij"), axis=-1).reshape(-1, g.dim)
        inside = g.in_range(mesh)
        occ = np.zeros(len(mesh), dtype=bool)
        occ[inside] = g.mask[tuple(mesh[inside].T)]
        if occ.all():
            return True
        if self.ball is None:
            return False
        rest = mesh[~occ]
        clo = g.cell_lo(rest)
        plo = np.maximum(clo, b.lo)
        phi = np.minimum(clo + g.pitch, b.hi)
        c = self.ball.offset(g.dim)
        return bool(np.all(np.maximum(np.abs(plo - c), np.abs(phi - c)) <= self.ball.radius))

    def contains_boxes(self, los, his):
        """Vectorised :meth:`contains_box` over boxes ``[los[k], his[k]]``."""
        los, his = np.atleast_2d(los), np.atleast_2d(his)
        ok = np.ones(len(los), dtype=bool)
        if self.clip is not None:
            ok &= np.all((los >= self.clip.lo) & (his <= self.clip.hi), axis=1)
        done = np.zeros(len(los), dtype=bool)
        if self.ball is not None:
            c = self.ball.offset(los.shape[1])
            done |= np.max(np.maximum(np.abs(los - c), np.abs(his - c)), axis=1) <= self.ball.radius
        if self.grid is not None:
            rest = ok & ~done
            if rest.any():
                done[rest] |= self.grid.covers_boxes(los[rest], his[rest])
        if self.ball is not None and self.grid is not None:
            # boxes partly in the ball and partly on occupied cells
            for i in np.where(ok & ~done)[0]:
                done[i] = self.contains_box(Box(los[i], his[i]))
        return ok & done

    def contains_points(self, pts, tol=0.0):
        pts = np.atleast_2d(np.asarray(pts, dtype=float))
        hit = np.zeros(len(pts), dtype=bool)
        if self.grid is not None:
            hit |= self.grid.contains_points(pts, tol)
        if self.ball is not None:
            hit |= self.ball.contains_points(pts, tol)
        if self.clip is not None:
            hit &= np.all((pts >= self.clip.lo - tol) & (pts <= self.clip.hi + tol), axis=1)
        return hit

    def bounding_box(self):
        parts = []
        if self.grid is not None and not self.grid.is_empty():
            parts.append(self.grid.hull())
        if self.ball is not None:
            dim = self.grid.dim if self.grid is not None else self.clip.dim
            parts.append(self.ball.box(dim))
        h = hull_of(parts)
        if h is not None and self.clip is not None:
            h = h.intersect(self.clip)
        return h


def contains(region, b):
    """True iff every point of ``b`` lies in ``region`` (a CellGrid, Ball, Box or Region)."""
    if isinstance(region, Region):
        return region.contains_box(b)
    if isinstance(region, CellGrid):
        return Region(grid=region).contains_box(b)
    if isinstance(region, Ball):
        return region.contains_box(b)
    if isinstance(region, Box):
        return region.contains_box(b)
    raise GeometryError(f"unsupported region type {type(region).__name__}")


def dump_boxes_csv(rows, dim):
    """CSV text with one ``mode,lo_1,hi_1,...`` row per (label, Box) pair."""
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    header = ["mode"]
    for i in range(1, dim + 1):
        header += [f"lo_{i}", f"hi_{i}"]
    w.writerow(header)
    for label, b in rows:
        row = [label]
        for lo, hi in zip(b.lo, b.hi):
            row += [f"{lo:.17g}", f"{hi:.17g}"]
        w.writerow(row)
    return buf.getvalue()


def load_boxes_csv(text):
    """Inverse of :func:`dump_boxes_csv`; returns a list of (label, Box)."""
    reader = csv.reader(io.StringIO(text))
    header = next(reader, None)
    if header is None or header[0] != "mode":
        raise GeometryError("box CSV must start with a 'mode,lo_1,hi_1,...' header")
    out = []
    for row in reader:
        if not row:
            continue
        vals = [float(v) for v in row[1:]]
        out.append((row[0], Box(vals[0::2], vals[1::2])))
    return out
