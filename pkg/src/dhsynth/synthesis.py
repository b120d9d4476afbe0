"""Global fixed point over modes and edges, producing the refined automaton.

Each round recertifies every mode for its current initial box, recomputes the
mode invariant, derives the landing guards and their backward reach sets, and
grows the initial boxes with the reset images of the pre-jump windows.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .backreach import back_reach
from .convergence import certify_mode
from .errors import EmptyGuard, EmptyInvariant, SynthesisFailure
from .geometry import Box, CellGrid, hull_of
from .growth import build_table
from .reach import ReachConfig, ReachEngine, _fp_shrink, d_invariant, verify_fixpoint
from .simulate import run_campaigns, sim_step

DEFAULT_MAX_ITERS = 16


@dataclass
class ModeSettings:
    rho: np.ndarray
    tau: float
    eps: float
    rho_th: np.ndarray

    @classmethod
    def for_mode(cls, mode, overrides=None):
        d = dict(mode.reach)
        d.update({k: v for k, v in (overrides or {}).items() if v is not None})
        missing = [k for k in ("rho", "tau", "eps") if k not in d]
        if missing:
            raise ValueError(f"mode {mode.name}: no value for {', '.join(missing)}")
        n = mode.safe.dim
        rho = np.broadcast_to(np.asarray(d["rho"], dtype=float), (n,)).copy()
        rho_th = d.get("rho_th")
        rho_th = rho / 8 if rho_th is None else np.broadcast_to(np.asarray(rho_th, dtype=float), (n,)).copy()
        return cls(rho, float(d["tau"]), float(d["eps"]), rho_th)


class RefinedAutomaton:
    """The input automaton together with the synthesized sets.

    ``initial[q]`` is the refined initial box, ``invariant[q]`` the mode
    invariant, ``guard_star[e]`` the refined guard (fine grid),
    ``fake_guard[e]`` the landing target and ``windows[e]`` the pre-jump
    window boxes of the accepted guard cells.
    """

    def __init__(self, base, initial, invariant, guard_star, fake_guard, windows,
                 certificates, growth, settings):
        self.base = base
        self.initial = initial
        self.invariant = invariant
        self.guard_star = guard_star
        self.fake_guard = fake_guard
        self.windows = windows
        self.certificates = certificates
        self.growth = growth
        self.settings = settings
        delays = [q.dynamics.delay for q in base.modes]
        taus = min(s.tau for s in settings.values()) if settings else None
        self.sim_step = sim_step(delays, taus, [e.jump_delay for e in base.edges])


@dataclass
class CheckResult:
    passed: bool
    detail: str = ""
    counterexample: dict = None
    checked: int = 0

    def to_json(self):
        d = {"passed": self.passed, "checked": self.checked}
        if self.detail:
            d["detail"] = self.detail
        if self.counterexample is not None:
            d["counterexample"] = self.counterexample
        return d


@dataclass
class RefinementReport:
    r1_safe: CheckResult
    r2_refinement: CheckResult
    r3_nonblocking: CheckResult
    c1: CheckResult
    c2: CheckResult
    samples: int = 0
    seed: int = 0

    @property
    def passed(self):
        return all(c.passed for c in (self.r1_safe, self.r2_refinement, self.r3_nonblocking, self.c1, self.c2))

    def to_json(self):
        return {"passed": self.passed, "samples": self.samples, "seed": self.seed,
                "r1_safe": self.r1_safe.to_json(), "r2_refinement": self.r2_refinement.to_json(),
                "r3_nonblocking": self.r3_nonblocking.to_json(), "c1": self.c1.to_json(),
                "c2": self.c2.to_json()}


@dataclass
class SynthesisResult:
    refined: RefinedAutomaton
    iterations: int
    converged: bool
    k_history: list = field(default_factory=list, repr=False)
    i_history: list = field(default_factory=list, repr=False)
    report: RefinementReport = None


def _landing_guard(edge, inv_src, dst_box, master):
    """Cover cells of the source invariant inside ``G(e) ∩ I(q)`` whose reset image lies in ``dst_box``."""
    cover_grid = inv_src.cover_grid()
    keep = np.zeros(master.shape, dtype=bool)
    src_region = inv_src.region
    for idx in cover_grid.indices():
        cell = master.cell_box(idx)
        if not edge.guard.contains_box(cell) or not src_region.contains_box(cell):
            continue
        if not dst_box.contains_box(edge.reset.apply_box(cell)):
            continue
        keep[idx] = True
    return master.with_mask(keep)


class _ModeContext:
    def __init__(self, mode, settings, w_max, horizon):
        self.mode = mode
        self.settings = settings
        self.safe = mode.safe_region()
        self.master = CellGrid(self.safe, settings.rho)
        self.table = build_table(mode.dynamics, self.safe, w_max, settings.tau, horizon)
        self.engine = ReachEngine(mode.dynamics, self.table, w_max, self.safe, self.master, settings.rho_th)


def synthesize(H, settings=None, max_iters=DEFAULT_MAX_ITERS, log=None):
    """Run the synthesis loop; raises SynthesisFailure (with ``partial``) when it cannot finish."""
    settings = settings or {}
    cfg = {q.name: settings.get(q.name) if isinstance(settings.get(q.name), ModeSettings)
           else ModeSettings.for_mode(q, settings.get(q.name)) for q in H.modes}
    ctx = {}
    for q in H.modes:
        outgoing = [e.jump_delay for e in H.edges_from(q.name)]
        horizon = max([cfg[q.name].tau] + outgoing)
        for D in outgoing:
            k = D / cfg[q.name].tau
            if abs(k - round(k)) > 1e-9 * max(1.0, k):
                raise ValueError(f"jump delay {D} from mode {q.name} is not a multiple of tau")
        ctx[q.name] = _ModeContext(q, cfg[q.name], H.w_max, horizon)

    K = {}
    for q in H.modes:
        K[q.name] = q.initial.intersect(ctx[q.name].safe)
        if K[q.name] is None:
            raise EmptyInvariant(f"mode {q.name}: initial set does not meet the safe set")
    inv_prev = None
    k_hist, i_hist = [dict(K)], []
    gstar, gtilde, windows, certs = {}, {}, {}, {}
    converged = False
    n_iter = 0
    for n_iter in range(1, max_iters + 1):
        if n_iter > 1:
            for q in H.modes:
                hull = hull_of([K[q.name]] + [e.reset.apply_box(windows[e.name])
                                               for e in H.edges_into(q.name) if windows.get(e.name)])
                K[q.name] = hull.intersect(ctx[q.name].safe)
            if all(K[q] == k_hist[-1][q] for q in K):
                # same initial boxes give the same invariants and guards
                converged = True
                n_iter -= 1
                break
            k_hist.append(dict(K))
        inv = {}
        for q in H.modes:
            c = ctx[q.name]
            s = c.settings
            cert = certify_mode(q, H.w_max, s.eps, initial=K[q.name])
            certs[q.name] = cert
            rc = ReachConfig(s.rho, s.rho_th, s.tau, s.eps, cert.bound.T_star)
            res = d_invariant(K[q.name], q.dynamics, rc, c.safe, cert.bound.r1, c.table, engine=c.engine,
                              center=cert.center)
            if inv_prev is not None:
                res = res.union(inv_prev[q.name])
            inv[q.name] = res
        i_hist.append(inv)
        for e in H.edges:
            c = ctx[e.source]
            dst = H.mode(e.target)
            gt = _landing_guard(e, inv[e.source], ctx[e.target].safe, c.master)
            gtilde[e.name] = gt
            br = back_reach(gt, e.jump_delay, inv[e.source], c.mode.dynamics, c.settings.rho,
                            c.settings.tau, H.w_max, c.table, c.settings.rho_th, guard=e.guard,
                            reset=e.reset, target_box=ctx[dst.name].safe, target_delay=dst.dynamics.delay)
            gstar[e.name] = br
            windows[e.name] = br.window_hull()
        if log:
            log(f"iteration {n_iter}: " + ", ".join(f"{q}={inv[q].grid.count()} cells" for q in inv))
        if inv_prev is not None and all(inv[q].same_set(inv_prev[q]) for q in inv):
            converged = True
            inv_prev = inv
            break
        inv_prev = inv

    refined = RefinedAutomaton(
        base=H, initial={q.name: q.initial.intersect(ctx[q.name].safe) for q in H.modes},
        invariant=inv_prev, guard_star={e: g.guard_star for e, g in gstar.items()},
        fake_guard=dict(gtilde), windows={e: (g.window_lo, g.window_hi) for e, g in gstar.items()},
        certificates=certs, growth={q: c.table for q, c in ctx.items()}, settings=cfg)
    result = SynthesisResult(refined, n_iter, converged, k_hist, i_hist)
    if not converged:
        raise SynthesisFailure(f"no fixed point within {max_iters} iterations", partial=result)
    empty = [e for e, g in gstar.items() if g.guard_star.is_empty()]
    if empty:
        raise EmptyGuard(f"refined guard is empty for edge(s) {', '.join(sorted(empty))}", partial=result)
    return result


# -- refinement checks ----------------------------------------------------------

def _shrunk(b):
    lo, hi = _fp_shrink(b.lo, b.hi)
    return Box(lo, hi)


def _r2_check(H, hstar):
    """Containments of the refined sets in the original ones.

    Grid cell faces are computed as ``lo + k * pitch``; boxes are shrunk by
    the shared 1e-12 relative rounding allowance before comparison.
    """
    checked = 0
    for q in H.modes:
        checked += 1
        xi = hstar.initial[q.name]
        base = q.initial.intersect(q.safe)
        if xi is not None and (base is None or not base.contains_box(xi)):
            return CheckResult(False, f"refined initial set of {q.name} leaves the original", {"mode": q.name}, checked)
        inv = hstar.invariant[q.name]
        bb = inv.bounding_box()
        if bb is not None and not (q.invariant.contains_box(bb) and q.safe.contains_box(bb)):
            return CheckResult(False, f"invariant of {q.name} leaves I or S", {"mode": q.name, "box": bb.to_json()},
                               checked)
    for e in H.edges:
        g = hstar.guard_star[e.name]
        src = hstar.invariant[e.source]
        dst = hstar.invariant[e.target]
        for b in map(_shrunk, g.boxes()):
            checked += 1
            if not (e.guard.contains_box(b) and src.contains_box(b)):
                return CheckResult(False, f"guard cell of {e.name} outside G(e) ∩ I*",
                                   {"edge": e.name, "cell": b.to_json()}, checked)
        wl, wh = hstar.windows[e.name]
        for lo, hi in zip(wl, wh):
            checked += 1
            img = _shrunk(e.reset.apply_box(Box(lo, hi)))
            if not dst.contains_box(img):
                return CheckResult(False, f"reset window of {e.name} leaves the target invariant",
                                   {"edge": e.name, "window": img.to_json()}, checked)
    return CheckResult(True, checked=checked)


def _r3_check(H, hstar):
    for q in H.modes:
        inv = hstar.invariant[q.name]
        if inv.grid.is_empty() and inv.ball_part() is None:
            return CheckResult(False, f"mode {q.name} has an empty invariant", {"mode": q.name}, len(H.modes))
        out = H.edges_from(q.name)
        if out and all(hstar.guard_star[e.name].is_empty() for e in out):
            return CheckResult(False, f"mode {q.name} has no enabled outgoing guard", {"mode": q.name},
                               len(H.modes))
    return CheckResult(True, checked=len(H.modes))


def _from_prop(p):
    return CheckResult(p.passed, "" if p.passed else f"{p.violations} violation(s)", p.counterexample, p.checked)


def check_refinement(H, hstar, samples=1000, seed=0, horizon=None, threads=1, campaign=None):
    """Exact checks for r2 and r3, seeded hybrid executions for r1, c1 and c2.

    The hybrid results are kept on the report as ``campaign`` so a later
    validation with the same seed can reuse them.
    """
    fix = CheckResult(True)
    for q in H.modes:
        s = hstar.settings[q.name]
        inv = hstar.invariant[q.name]
        eng = ReachEngine(q.dynamics, hstar.growth[q.name], H.w_max, q.safe_region(),
                          CellGrid(q.safe_region(), s.rho), s.rho_th)
        if not verify_fixpoint(inv, eng):
            fix = CheckResult(False, f"one more reach step leaves the invariant of {q.name}", {"mode": q.name})
            break
    props = campaign if campaign is not None else run_campaigns(hstar, samples, seed, horizon, threads=threads)
    c1 = fix if not fix.passed else _from_prop(props["containment"])
    c2 = _from_prop(props["c2"])
    land = props["guard_landing"]
    if not land.passed and c2.passed:
        c2 = CheckResult(False, f"{land.violations} landing violation(s)", land.counterexample, c2.checked)
    report = RefinementReport(r1_safe=_from_prop(props["safety"]), r2_refinement=_r2_check(H, hstar),
                              r3_nonblocking=_r3_check(H, hstar), c1=c1, c2=c2, samples=samples, seed=seed)
    report.campaign = props
    return report
