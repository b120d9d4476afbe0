"""Cells whose every trajectory lands in a target guard after the jump delay.

The result under-approximates the backward reachable set: a cell is kept only
when its whole forward tube stays in the mode invariant over ``[0, D]`` and
its slice at ``D`` lies inside the target.  Tubes start from a point in the
cell with a history anywhere in the invariant hull.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .geometry import Box, CellGrid
from .model import interval_sup_rhs
from .reach import ReachEngine, _fp_shrink

# cells x steps handled per tube batch (bounds peak memory)
_BATCH_CELLS = 1_500_000


@dataclass
class BackreachResult:
    guard_star: CellGrid
    candidates_examined: int
    refined: int
    window_lo: np.ndarray = field(repr=False, default=None)
    window_hi: np.ndarray = field(repr=False, default=None)

    def window_boxes(self):
        return [Box(lo, hi) for lo, hi in zip(self.window_lo, self.window_hi)]

    def window_hull(self):
        if self.window_lo is None or not len(self.window_lo):
            return None
        return Box(self.window_lo.min(axis=0), self.window_hi.max(axis=0))


def candidate_set(g_tilde, i_star, d, rho):
    """Cells of ``i_star`` whose centers lie within ``d + 4 rho`` of some cell of ``g_tilde``."""
    d = np.broadcast_to(np.asarray(d, dtype=float), (g_tilde.dim,))
    rho = np.broadcast_to(np.asarray(rho, dtype=float), (g_tilde.dim,))
    # cells k apart have centers 2 rho k apart
    k = np.floor((d + 4 * rho) / (2 * rho) + 1e-9).astype(int)
    return g_tilde.dilate(k).intersection(i_star)


def _steps_for(duration, h):
    k = duration / h
    r = round(k)
    if abs(k - r) > 1e-9 * max(1.0, k):
        raise ValueError(f"duration {duration} is not a multiple of the integration step {h}")
    return int(r)


def back_reach(g_tilde, D, i_star, dyn, rho, tau, w_max, growth, rho_th=None,
               guard=None, reset=None, target_box=None, target_delay=None):
    """Backward reach set of ``g_tilde`` across the jump delay ``D``.

    ``i_star`` is the mode invariant (an InvariantResult).  When ``reset`` and
    ``target_box`` are given, a cell is also required to map its trailing
    window of length ``target_delay`` into ``target_box``; ``guard`` restricts
    accepted cells to the original edge guard.
    """
    master = g_tilde
    rho = np.broadcast_to(np.asarray(rho, dtype=float), (master.dim,)).copy()
    if abs(growth.tau - tau) > 1e-12 * tau:
        raise ValueError("growth table was built for a different step")
    engine = ReachEngine(dyn, growth, w_max, i_star.clip, master.empty_like(), rho_th)
    fine = master.refined(engine.depth).empty_like()
    n = master.dim
    empty = BackreachResult(fine, 0, 0, np.empty((0, n)), np.empty((0, n)))
    if g_tilde.is_empty():
        return empty
    region = i_star.region
    hull = i_star.bounding_box()
    sup_f = interval_sup_rhs(dyn, hull, hull, w_max)
    d = sup_f * D
    cands = candidate_set(g_tilde, i_star.cover_grid(), d, rho)
    idx = cands.index_array()
    if not len(idx):
        return empty
    # a trajectory committing soon after entering the mode still carries states
    # from elsewhere in the invariant, so the delayed argument is bounded by its hull
    past = hull.hull(cands.hull())

    h = growth.h
    steps = _steps_for(D, h)
    win_len = dyn.delay if target_delay is None else float(target_delay)
    win_start = max(0, int(math.floor((D - win_len) / h + 1e-9)))
    pre_commit = max(0.0, win_len - D)
    if steps > growth.steps:
        raise ValueError("growth table horizon is shorter than the jump delay")
    bits = np.array(list(np.ndindex(*(2,) * n)), dtype=float)

    def judge(lo, level_rho):
        """Accept / split flags and window bounds for a batch of cells."""
        k = len(lo)
        if steps > 0:
            tube = engine.tube(lo, level_rho, steps, history=past)
            s_lo, s_hi = tube.slice_box(steps)
            chunks = [tube.hull(start, min(start + growth.substeps, steps))
                      for start in range(0, steps, growth.substeps)]
            w_lo, w_hi = tube.hull(win_start, steps)
        else:
            s_lo, s_hi = lo, lo + 2 * level_rho
            chunks = [(s_lo, s_hi)]
            w_lo, w_hi = s_lo.copy(), s_hi.copy()
        if pre_commit > 0:
            grow = sup_f * pre_commit
            w_lo = np.minimum(w_lo, np.maximum(lo - grow, hull.lo))
            w_hi = np.maximum(w_hi, np.minimum(lo + 2 * level_rho + grow, hull.hi))
        in_inv = np.ones(k, dtype=bool)
        for c_lo, c_hi in chunks:
            a, b = _fp_shrink(c_lo, c_hi)
            sel = np.where(in_inv)[0]
            in_inv[sel] = region.contains_boxes(a[sel], b[sel])
        a, b = _fp_shrink(s_lo, s_hi)
        land = in_inv & g_tilde.covers_boxes(a, b)
        meet = land | (in_inv & g_tilde.meets_boxes(a, b))
        ok = land
        if guard is not None:
            ok &= np.all((lo >= guard.lo) & (lo + 2 * level_rho <= guard.hi), axis=1)
        if target_box is not None:
            for i in np.where(ok)[0]:
                img = Box(w_lo[i], w_hi[i])
                if reset is not None:
                    img = reset.apply_box(img)
                if not target_box.contains_box(img):
                    ok[i] = False
        return ok, in_inv & meet & ~ok, w_lo, w_hi

    lo = master.cell_lo(idx)
    level_rho = rho.copy()
    examined = 0
    refined = 0
    acc_lo, acc_hi, win_lo, win_hi = [], [], [], []
    batch = max(1, _BATCH_CELLS // max(1, steps))
    while len(lo):
        examined += len(lo)
        can_refine = bool(np.all(level_rho / 2 >= engine.rho_th * (1 - 1e-12)))
        children = []
        for s0 in range(0, len(lo), batch):
            part = lo[s0:s0 + batch]
            ok, split, w_lo, w_hi = judge(part, level_rho)
            acc_lo.extend(part[ok])
            acc_hi.extend(part[ok] + 2 * level_rho)
            win_lo.extend(w_lo[ok])
            win_hi.extend(w_hi[ok])
            if can_refine and split.any():
                refined += int(split.sum())
                children.append((part[split][:, None, :] + bits[None, :, :] * level_rho).reshape(-1, n))
        if not children:
            break
        lo = np.concatenate(children)
        level_rho = level_rho / 2

    if acc_lo:
        alo, ahi = np.array(acc_lo), np.array(acc_hi)
        # shrink by a quarter fine cell so only the covered fine cells are marked
        q = 0.25 * fine.pitch
        fine = fine.add_boxes(alo + q, ahi - q)
        wl, wh = np.array(win_lo), np.array(win_hi)
    else:
        wl, wh = np.empty((0, n)), np.empty((0, n))
    return BackreachResult(fine, examined, refined, wl, wh)
