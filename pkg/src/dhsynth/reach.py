"""Forward reach tubes, safe refinement of cells, and the per-mode invariant fixed point.

A cell stands for every history segment whose values stay inside the cell.
Its tube is the nominal trajectory from the constant history at the cell
center, widened by the growth bound and the disturbance tube.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .errors import EmptyInvariant, IntegrationError
from .geometry import Ball, Box, CellGrid, Region
from .growth import build_table

# rounding allowance used when comparing computed tube bounds with set boundaries
_FP_TOL = 1e-12


def _fp_shrink(lo, hi):
    tol = _FP_TOL * (1.0 + np.maximum(np.abs(lo), np.abs(hi)))
    mid = 0.5 * (lo + hi)
    return np.minimum(lo + tol, mid), np.maximum(hi - tol, mid)


def _cubic_range(a, b, c, d):
    """Min and max of ``a t^3 + b t^2 + c t + d`` over ``t in [0, 1]`` (vectorised)."""
    cands = [np.zeros_like(a), np.ones_like(a)]
    qa, qb, qc = 3 * a, 2 * b, c
    with np.errstate(all="ignore"):
        disc = qb * qb - 4 * qa * qc
        sq = np.sqrt(np.maximum(disc, 0.0))
        lin = np.abs(qa) < 1e-300
        r_lin = np.where(np.abs(qb) > 0, -qc / np.where(qb == 0, 1, qb), 0.0)
        r1 = np.where(lin, r_lin, (-qb + sq) / np.where(lin, 1, 2 * qa))
        r2 = np.where(lin, r_lin, (-qb - sq) / np.where(lin, 1, 2 * qa))
    ok = disc >= 0
    for r in (r1, r2):
        r = np.where(ok & np.isfinite(r), np.clip(r, 0.0, 1.0), 0.0)
        cands.append(r)
    vals = [((a * t + b) * t + c) * t + d for t in cands]
    return np.minimum.reduce(vals), np.maximum.reduce(vals)


@dataclass
class Tube:
    """Samples of a batch of reach tubes on the growth-table grid."""

    x: np.ndarray        # nominal states, (steps+1, k, n)
    radius: np.ndarray   # growth + disturbance + integration allowance, (steps+1, k, n)
    lo: np.ndarray       # per-interval lower bounds, (steps, k, n)
    hi: np.ndarray       # per-interval upper bounds, (steps, k, n)

    def slice_box(self, step):
        return self.x[step] - self.radius[step], self.x[step] + self.radius[step]

    def hull(self, start, stop):
        return self.lo[start:stop].min(axis=0), self.hi[start:stop].max(axis=0)


class ReachEngine:
    """Tube computation and safe refinement for one mode on a fixed master grid."""

    def __init__(self, dyn, table, w_max, safe_box, master, rho_th=None):
        self.dyn = dyn
        self.table = table
        self.w_max = float(w_max)
        self.safe_box = safe_box
        self.master = master
        self.rho = master.cell_radius.copy()
        self.rho_th = self.rho / 8 if rho_th is None else np.broadcast_to(
            np.asarray(rho_th, dtype=float), self.rho.shape).copy()
        self.h = table.h
        self.substeps = table.substeps
        self.depth = 0
        r = self.rho.copy()
        while np.all(r / 2 >= self.rho_th * (1 - 1e-12)):
            r = r / 2
            self.depth += 1
        self._lnorm = float(np.max(np.sum(np.abs(table.L), axis=1)))
        self._cache = {}

    # -- nominal trajectories -------------------------------------------------
    def nominal(self, centers, steps, stride=1.0, past=None):
        """RK4 from ``centers`` with zero disturbance (step ``stride * h``).

        The history before time 0 is constant at ``past``, or at ``centers`` when not given.
        """
        c = np.atleast_2d(np.asarray(centers, dtype=float))
        before = c if past is None else np.broadcast_to(np.asarray(past, dtype=float), c.shape)
        k, n = c.shape
        h, r = self.h * stride, self.dyn.delay
        X = np.empty((steps + 1, k, n))
        F = np.empty((steps + 1, k, n))
        w0 = np.zeros((k, self.dyn.m))
        X[0] = c

        def delayed(s):
            if s <= 1e-12 * h:
                return before
            u = s / h
            j = int(math.floor(u + 1e-9))
            th = u - j
            if th < 1e-9:
                return X[j]
            h00 = 2 * th ** 3 - 3 * th ** 2 + 1
            h10 = th ** 3 - 2 * th ** 2 + th
            h01 = -2 * th ** 3 + 3 * th ** 2
            h11 = th ** 3 - th ** 2
            return h00 * X[j] + h10 * h * F[j] + h01 * X[j + 1] + h11 * h * F[j + 1]

        f = self.dyn.rhs
        for j in range(steps):
            t = j * h
            x = X[j]
            k1 = f(x, delayed(t - r), w0)
            F[j] = k1
            xm = delayed(t + 0.5 * h - r)
            k2 = f(x + 0.5 * h * k1, xm, w0)
            k3 = f(x + 0.5 * h * k2, xm, w0)
            k4 = f(x + h * k3, delayed(t + h - r), w0)
            X[j + 1] = x + (h / 6.0) * (k1 + 2 * k2 + 2 * k3 + k4)
            if not np.all(np.isfinite(X[j + 1])):
                raise IntegrationError("nominal trajectory is not finite")
        F[steps] = f(X[steps], delayed(steps * h - r), w0)
        return X, F

    def tube(self, cell_lo, rho, steps, history=None):
        """Reach tubes of cells ``[cell_lo, cell_lo + 2 rho]`` over ``steps`` grid intervals.

        Histories range in the cell unless ``history`` gives a box, which must
        contain every cell, for the states before time 0.
        """
        cell_lo = np.atleast_2d(cell_lo)
        rho = np.asarray(rho, dtype=float)
        past = None if history is None else (history.lo + history.hi) / 2.0
        X, F = self.nominal(cell_lo + rho, steps, past=past)
        lam = self.table.values(rho, None if history is None else history.radius)[: steps + 1]
        e = (lam + self.table.tube[: steps + 1])[:, None, :] + self._rk_allowance(cell_lo + rho, steps, X, past)
        h = self.h
        x0, x1 = X[:-1], X[1:]
        f0, f1 = h * F[:-1], h * F[1:]
        e0 = e[:-1]
        de = e[1:] - e[:-1]
        # chord error of the smooth radius curve, bounded through its second derivative
        m = (h * self._lnorm / 8.0) * np.abs(de)
        a = 2 * x0 + f0 - 2 * x1 + f1
        b = -3 * x0 - 2 * f0 + 3 * x1 - f1
        lo, _ = _cubic_range(a, b + 4 * m, f0 - de - 4 * m, x0 - e0)
        _, hi = _cubic_range(a, b - 4 * m, f0 + de + 4 * m, x0 + e0)
        return Tube(x=X, radius=e, lo=lo, hi=hi)

    def _rk_allowance(self, centers, steps, X, past=None):
        """Integration error allowance for the nominal samples, from a step-doubling comparison.

        The difference between the runs is about fifteen times the error of
        the finer one; odd samples take the larger neighbouring value.
        """
        if 2 * self.h <= self.dyn.delay and steps % 2 == 0:
            Xc, _ = self.nominal(centers, steps // 2, stride=2.0, past=past)
            d = np.abs(X[::2] - Xc)
        else:
            Xf, _ = self.nominal(centers, 2 * steps, stride=0.5, past=past)
            return np.abs(X - Xf[::2])
        out = np.empty_like(X)
        out[::2] = d
        out[1::2] = np.maximum(d[:-1], d[1:])
        return out

    def step_hulls(self, cell_lo, rho):
        t = self.tube(cell_lo, rho, self.substeps)
        return t.hull(0, self.substeps)

    # -- safe refinement ------------------------------------------------------
    def safe_boxes(self, idx):
        """Accepted tube hulls for master cells ``idx`` (with caching).

        Returns a list (one entry per cell) of (los, his) arrays and the number
        of dropped leaf cells.
        """
        idx = np.atleast_2d(np.asarray(idx, dtype=np.int64))
        keys = [tuple(int(v) for v in row) for row in idx]
        todo = [i for i, key in enumerate(keys) if key not in self._cache]
        if todo:
            results, dropped = self._safe_r(self.master.cell_lo(idx[todo]), self.rho)
            for i, res, dr in zip(todo, results, dropped):
                self._cache[keys[i]] = (res, dr)
        out = [self._cache[key][0] for key in keys]
        return out, sum(self._cache[key][1] for key in keys)

    def _safe_r(self, cell_lo, rho):
        n = self.dyn.n
        k = len(cell_lo)
        acc = [[] for _ in range(k)]
        dropped = np.zeros(k, dtype=int)
        lo = np.asarray(cell_lo, dtype=float)
        owner = np.arange(k)
        rho = np.asarray(rho, dtype=float)
        S = self.safe_box
        bits = np.array(list(np.ndindex(*(2,) * n)), dtype=float)
        while len(lo):
            hlo, hhi = self.step_hulls(lo, rho)
            slo, shi = _fp_shrink(hlo, hhi)
            inside = np.all((slo >= S.lo) & (shi <= S.hi), axis=1)
            meets = np.all((slo <= S.hi) & (shi >= S.lo), axis=1)
            for i in np.where(inside)[0]:
                acc[owner[i]].append((hlo[i], hhi[i]))
            can_refine = bool(np.all(rho / 2 >= self.rho_th * (1 - 1e-12)))
            refine = meets & ~inside & can_refine
            np.add.at(dropped, owner[~inside & ~refine], 1)
            if not refine.any():
                break
            parents = lo[refine]
            lo = (parents[:, None, :] + bits[None, :, :] * rho).reshape(-1, n)
            owner = np.repeat(owner[refine], len(bits))
            rho = rho / 2
        out = []
        for boxes in acc:
            if boxes:
                out.append((np.array([b[0] for b in boxes]), np.array([b[1] for b in boxes])))
            else:
                out.append((np.empty((0, n)), np.empty((0, n))))
        return out, dropped.tolist()

    def rasterize(self, results):
        grid = self.master.empty_like()
        los = [r[0] for r in results if len(r[0])]
        his = [r[1] for r in results if len(r[1])]
        if not los:
            return grid
        return grid.add_boxes(np.concatenate(los), np.concatenate(his))


def make_engine(mode, w_max, rho, tau, horizon, rho_th=None, substeps=16):
    """Engine for ``mode`` on the master grid covering its safe region."""
    safe = mode.safe_region()
    master = CellGrid(safe, rho)
    table = build_table(mode.dynamics, safe, w_max, tau, horizon, substeps)
    return ReachEngine(mode.dynamics, table, w_max, safe, master, rho_th)


# -- single-cell operations ------------------------------------------------------

def _adhoc_engine(cell, dyn, tau, w_max, growth, safe=None, rho_th=None, rho=None):
    if rho is None:
        rho = cell.radius
    domain = safe if safe is not None else cell
    rho_grid = np.where(np.asarray(rho) > 0, rho, 1.0)
    master = CellGrid(Box(cell.lo, np.maximum(cell.hi, domain.hi)) if safe is None else domain, rho_grid)
    return ReachEngine(dyn, growth, w_max, domain, master, rho_th)


def step_reach(cell, dyn, tau, w_max, growth):
    """Box holding every state reached over ``[0, tau]`` from histories inside ``cell``."""
    if abs(growth.tau - tau) > 1e-12 * tau:
        raise ValueError("growth table was built for a different step")
    eng = _adhoc_engine(cell, dyn, tau, w_max, growth)
    lo, hi = eng.step_hulls(cell.lo[None, :], cell.radius)
    return Box(lo[0], hi[0])


def safe_r(cell, rho, tau, S, dyn, growth, rho_th, master=None):
    """Rasterised union of safe tube hulls over the refinement tree of ``cell``."""
    if master is None:
        master = CellGrid(S, rho)
    eng = ReachEngine(dyn, growth, growth.w_max, S, master, rho_th)
    results, _ = eng._safe_r(cell.lo[None, :], np.asarray(rho, dtype=float))
    return eng.rasterize(results)


@dataclass
class ReachConfig:
    rho: np.ndarray
    rho_th: np.ndarray
    tau: float
    eps: float
    T_star: float

    def __post_init__(self):
        self.rho = np.atleast_1d(np.asarray(self.rho, dtype=float))
        self.rho_th = np.broadcast_to(np.asarray(self.rho_th, dtype=float), self.rho.shape).copy()
        if np.any(self.rho <= 0) or np.any(self.rho_th <= 0) or np.any(self.rho_th > self.rho):
            raise ValueError("need 0 < rho_th <= rho")
        if not (self.tau > 0 and self.eps > 0):
            raise ValueError("tau and eps must be positive")


@dataclass
class InvariantResult:
    grid: CellGrid
    ball_radius: float
    clip: Box
    fixed_point_reached: bool
    iterations: int
    elapsed_model_time: float
    history: list = field(default_factory=list, repr=False)
    ball_center: np.ndarray = None

    def __post_init__(self):
        if self.ball_center is None:
            self.ball_center = np.zeros(self.clip.dim)
        self.ball_center = np.asarray(self.ball_center, dtype=float)

    @property
    def ball(self):
        return Ball(self.ball_radius, self.ball_center) if self.ball_radius > 0 else None

    @property
    def region(self):
        ball = self.ball
        return Region(self.grid, ball, self.clip)

    def contains_box(self, b):
        return self.region.contains_box(b)

    def contains_points(self, pts, tol=0.0):
        return self.region.contains_points(pts, tol)

    def ball_part(self):
        """Box ``ball ∩ clip`` or None."""
        if self.ball_radius <= 0:
            return None
        return self.ball.box(self.clip.dim).intersect(self.clip)

    def bounding_box(self):
        return self.region.bounding_box()

    def cover_grid(self):
        """Master-grid cells meeting the set (occupied cells plus those meeting ball ∩ clip)."""
        g = self.grid
        bp = self.ball_part()
        if bp is not None:
            g = g.add_box(bp)
        return g

    def same_set(self, other):
        return (self.grid == other.grid and self.ball_radius == other.ball_radius and self.clip == other.clip
                and np.array_equal(self.ball_center, other.ball_center))

    def union(self, other):
        if not np.array_equal(self.ball_center, other.ball_center):
            raise ValueError("invariants with different ball centers cannot be merged")
        return InvariantResult(self.grid.union(other.grid), max(self.ball_radius, other.ball_radius),
                               self.clip, self.fixed_point_reached and other.fixed_point_reached,
                               self.iterations, self.elapsed_model_time,
                               ball_center=self.ball_center)


def d_invariant(xi, dyn, config, S, r1, growth, master=None, engine=None, keep_history=False,
                center=None):
    """Iterate ``P <- P ∪ reach(P)`` from ``xi ∩ S`` until a fixed point or the horizon.

    The attractor ball of radius ``r1 + eps`` sits at ``center`` (default the origin).
    """
    if engine is None:
        if master is None:
            master = CellGrid(S, config.rho)
        engine = ReachEngine(dyn, growth, growth.w_max, S, master, config.rho_th)
    master = engine.master
    start = xi.intersect(S)
    if start is None:
        raise EmptyInvariant("initial set does not meet the safe set")
    ball_r = r1 + config.eps
    ball = Ball(ball_r, center) if ball_r > 0 else None
    if ball is not None:
        bb = ball.box(S.dim)
        if bb.intersects(S) and not S.contains_box(bb):
            # trajectories inside the ball may leave S, so ball ∩ S is not invariant
            raise EmptyInvariant(f"attractor ball {bb} crosses the safe set {S}")
    P = master.empty_like().add_box(start)
    processed = master.empty_like()
    history = [P] if keep_history else []
    t = 0.0
    i = 0
    fixed = False
    while t <= config.T_star * (1 + 1e-12) + 1e-12:
        new = P.difference(processed)
        idx = new.index_array()
        results, dr = engine.safe_boxes(idx)
        if dr:
            # a dropped branch leaves its cell in P with successors outside S
            raise EmptyInvariant(f"{dr} reach branch(es) leave the safe set at iteration {i}")
        processed = P
        all_idx = P.index_array()
        if not any(len(r[0]) for r in engine.safe_boxes(all_idx)[0]):
            if not (ball is not None and all(ball.contains_box(b) for b in P.boxes())):
                raise EmptyInvariant(f"every reach branch left the safe set at iteration {i}")
        region = Region(P, ball, S)
        closed = _all_contained(region, results)
        if closed:
            fixed = True
            break
        P = P.union(engine.rasterize(results))
        if keep_history:
            history.append(P)
        t += config.tau
        i += 1
    return InvariantResult(grid=P, ball_radius=ball_r, clip=S, fixed_point_reached=fixed,
                           iterations=i + (1 if fixed else 0), elapsed_model_time=t,
                           history=history, ball_center=center)


def verify_fixpoint(result, engine):
    """Recompute one reach step from every occupied cell and test containment (exact)."""
    fresh = ReachEngine(engine.dyn, engine.table, engine.w_max, engine.safe_box, engine.master, engine.rho_th)
    results, _ = fresh.safe_boxes(result.grid.index_array())
    return _all_contained(result.region, results)


def _all_contained(region, results):
    los = [r[0] for r in results if len(r[0])]
    if not los:
        return True
    lo, hi = _fp_shrink(np.concatenate(los), np.concatenate([r[1] for r in results if len(r[1])]))
    return bool(np.all(region.contains_boxes(lo, hi)))
