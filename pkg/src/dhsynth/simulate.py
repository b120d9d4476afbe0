"""Method-of-steps simulation of delay systems and hybrid executions.

This module is the validation oracle.  It integrates with classical RK4 on a
fixed grid whose step divides every delay, so delayed arguments fall on grid
points or midpoints and are read back by cubic Hermite interpolation.
Many trajectories are advanced together; each carries its own mode.
"""
from __future__ import annotations

import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from fractions import Fraction

import numpy as np

from .errors import IntegrationError
from .geometry import Box

SIM_TOL = 1e-3


# -- inputs -------------------------------------------------------------------

class HistorySegment:
    """Initial function on ``[-r, 0]`` sampled on a grid, read by cubic Hermite interpolation."""

    def __init__(self, times, values, derivs=None):
        self.times = np.asarray(times, dtype=float)
        self.values = np.atleast_2d(np.asarray(values, dtype=float))
        if self.values.shape[0] != len(self.times):
            self.values = self.values.T
        if derivs is None:
            derivs = np.gradient(self.values, self.times, axis=0) if len(self.times) > 1 \
                else np.zeros_like(self.values)
        self.derivs = np.asarray(derivs, dtype=float).reshape(self.values.shape)
        if not (abs(self.times[-1]) < 1e-12 and np.all(np.diff(self.times) > 0)):
            raise ValueError("history grid must increase and end at 0")

    @classmethod
    def constant(cls, value, delay):
        v = np.atleast_1d(np.asarray(value, dtype=float))
        return cls([-delay, 0.0], [v, v], np.zeros((2, len(v))))

    @classmethod
    def from_function(cls, fn, delay, step, dfn=None):
        k = max(1, int(math.ceil(delay / step - 1e-9)))
        t = np.linspace(-delay, 0.0, k + 1)
        vals = np.array([np.atleast_1d(fn(s)) for s in t], dtype=float)
        ders = None if dfn is None else np.array([np.atleast_1d(dfn(s)) for s in t], dtype=float)
        return cls(t, vals, ders)

    @property
    def delay(self):
        return -float(self.times[0])

    def __call__(self, s):
        """Values and derivatives at times ``s`` (array) inside ``[-r, 0]``."""
        s = np.atleast_1d(np.asarray(s, dtype=float))
        t = self.times
        j = np.clip(np.searchsorted(t, s, side="right") - 1, 0, len(t) - 2)
        hh = t[j + 1] - t[j]
        th = np.clip((s - t[j]) / hh, 0.0, 1.0)[:, None]
        x0, x1 = self.values[j], self.values[j + 1]
        f0, f1 = self.derivs[j] * hh[:, None], self.derivs[j + 1] * hh[:, None]
        h00 = 2 * th ** 3 - 3 * th ** 2 + 1
        h10 = th ** 3 - 2 * th ** 2 + th
        h01 = -2 * th ** 3 + 3 * th ** 2
        h11 = th ** 3 - th ** 2
        val = h00 * x0 + h10 * f0 + h01 * x1 + h11 * f1
        d00 = (6 * th ** 2 - 6 * th)
        d10 = 3 * th ** 2 - 4 * th + 1
        d11 = 3 * th ** 2 - 2 * th
        der = (d00 * x0 + d10 * f0 - d00 * x1 + d11 * f1) / hh[:, None]
        return val, der


class DisturbanceSignal:
    """Per-trajectory disturbances bounded by ``w_max`` in the max norm.

    kinds: ``zero``, ``constant`` (``value``), ``piecewise`` (seeded values
    held for ``dwell`` seconds, half of them pushed to ``±w_max``) and
    ``sinusoid`` (``amplitude``, ``frequency``, optional ``phase``).
    """

    def __init__(self, kind, w_max, m, count=1, seed=0, value=None, dwell=0.5,
                 amplitude=None, frequency=1.0, phase=None, horizon=0.0):
        self.kind = kind
        self.w_max = float(w_max)
        self.m = int(m)
        self.count = int(count)
        rng = np.random.default_rng(seed)
        if kind == "zero":
            pass
        elif kind == "constant":
            if value is None:
                value = rng.uniform(-1, 1, (self.count, self.m)) * self.w_max
            self.value = np.broadcast_to(np.asarray(value, dtype=float), (self.count, self.m)).copy()
            if np.any(np.abs(self.value) > self.w_max * (1 + 1e-12)):
                raise ValueError("constant disturbance exceeds w_max")
        elif kind == "piecewise":
            self.dwell = float(dwell)
            segs = int(math.ceil(max(horizon, dwell) / dwell)) + 2
            vals = rng.uniform(-1, 1, (self.count, segs, self.m))
            snap = rng.random((self.count, segs, self.m)) < 0.5
            vals = np.where(snap, np.sign(vals), vals)
            self.table = vals * self.w_max
        elif kind == "sinusoid":
            amp = self.w_max if amplitude is None else float(amplitude)
            if amp > self.w_max * (1 + 1e-12):
                raise ValueError("sinusoid amplitude exceeds w_max")
            self.amplitude = amp
            self.frequency = float(frequency)
            self.phase = (np.zeros((self.count, self.m)) if phase is None
                          else np.broadcast_to(np.asarray(phase, dtype=float), (self.count, self.m)).copy())
        else:
            raise ValueError(f"unknown disturbance kind {kind!r}")

    def __call__(self, t, rows=None):
        count = self.count if rows is None else len(rows)
        if self.kind == "zero" or self.m == 0:
            return np.zeros((count, self.m))
        sel = slice(None) if rows is None else rows
        if self.kind == "constant":
            return self.value[sel]
        if self.kind == "piecewise":
            k = min(int(t / self.dwell + 1e-12), self.table.shape[1] - 1)
            return self.table[sel, k]
        return self.amplitude * np.cos(self.frequency * t + self.phase[sel])


def sim_step(delays, tau=None, jump_delays=()):
    """Common integration step dividing every delay and jump delay.

    Starts from ``min(r/8, tau/4)`` over the given delays and shrinks it to a
    divisor of their common rational period.
    """
    delays = [float(r) for r in delays]
    target = min(r / 8 for r in delays)
    if tau is not None:
        target = min(target, tau / 4)
    period = None
    for v in list(delays) + [float(d) for d in jump_delays if d > 0]:
        fr = Fraction(v).limit_denominator(10 ** 6)
        period = fr if period is None else Fraction(math.gcd(period.numerator * fr.denominator,
                                                             fr.numerator * period.denominator),
                                                    period.denominator * fr.denominator)
    per = float(period)
    k = max(1, int(math.ceil(per / target - 1e-9)))
    return per / k


# -- batch engine -------------------------------------------------------------

class _Batch:
    """Fixed-step RK4 for a batch of trajectories sharing a ring buffer of past samples."""

    def __init__(self, dyns, h, count, n, disturbance, max_back):
        self.dyns = list(dyns)
        self.h = float(h)
        self.n = n
        self.count = count
        self.w = disturbance
        self.lag = []
        for d in self.dyns:
            k = d.delay / h
            if abs(k - round(k)) > 1e-6 or round(k) < 1:
                raise IntegrationError(f"step {h} does not divide delay {d.delay}")
            self.lag.append(int(round(k)))
        self.size = max(max(self.lag), int(math.ceil(max_back / h - 1e-9))) + 3
        self.X = np.zeros((self.size, count, n))
        self.FR = np.zeros((self.size, count, n))
        self.FL = np.zeros((self.size, count, n))
        self.j = 0
        self.mode = np.zeros(count, dtype=int)

    def slot(self, j):
        return j % self.size

    def load_history(self, values, derivs):
        """``values``/``derivs``: (k+1, count, n) on grid ``-k..0``."""
        k = values.shape[0] - 1
        if k + 1 > self.size:
            raise IntegrationError("history longer than the buffer")
        for i in range(k + 1):
            s = self.slot(i - k)
            self.X[s] = values[i]
            self.FR[s] = derivs[i]
            self.FL[s] = derivs[i]
        self.j = 0

    def _delayed(self, rows, lag, half):
        """Delayed state for ``rows`` at ``t_j - lag h`` (+ h/2 if ``half``)."""
        a = self.slot(self.j - lag)
        if not half:
            return self.X[a, rows]
        b = self.slot(self.j - lag + 1)
        x0, x1 = self.X[a, rows], self.X[b, rows]
        f0, f1 = self.FR[a, rows], self.FL[b, rows]
        return 0.5 * (x0 + x1) + (self.h / 8.0) * (f0 - f1)

    def _ahead(self, rows, lag):
        return self.X[self.slot(self.j - lag + 1), rows]

    def rhs_now(self, rows=None):
        """Derivative at the current sample under each row's current mode."""
        out = np.zeros((self.count, self.n)) if rows is None else np.zeros((len(rows), self.n))
        rows = np.arange(self.count) if rows is None else rows
        t = self.j * self.h
        for q, dyn in enumerate(self.dyns):
            sel = np.where(self.mode[rows] == q)[0]
            if not len(sel):
                continue
            r = rows[sel]
            out[sel] = dyn.rhs(self.X[self.slot(self.j), r], self._delayed(r, self.lag[q], False),
                               self.w(t, r), t)
        return out

    def step(self):
        h = self.h
        t = self.j * h
        cur = self.slot(self.j)
        nxt = self.slot(self.j + 1)
        x = self.X[cur]
        k1 = self.FR[cur]
        new = np.empty_like(x)
        wm = self.w(t + 0.5 * h)
        we = self.w(t + h)
        for q, dyn in enumerate(self.dyns):
            r = np.where(self.mode == q)[0]
            if not len(r):
                continue
            lag = self.lag[q]
            xm = self._delayed(r, lag, True)
            xe = self._ahead(r, lag)
            a = k1[r]
            b = dyn.rhs(x[r] + 0.5 * h * a, xm, wm[r], t + 0.5 * h)
            c = dyn.rhs(x[r] + 0.5 * h * b, xm, wm[r], t + 0.5 * h)
            d = dyn.rhs(x[r] + h * c, xe, we[r], t + h)
            new[r] = x[r] + (h / 6.0) * (a + 2 * b + 2 * c + d)
        if not np.all(np.isfinite(new)):
            raise IntegrationError(f"trajectory became non-finite at t={t + h:g}")
        self.X[nxt] = new
        self.j += 1
        f = self.rhs_now()
        self.FL[nxt] = f
        self.FR[nxt] = f

    def state(self):
        return self.X[self.slot(self.j)]

    def window(self, rows, lag):
        """Samples of the trailing window of ``lag`` steps for ``rows``: (lag+1, len(rows), n)."""
        idx = [self.slot(self.j - i) for i in range(lag, -1, -1)]
        return self.X[idx][:, rows]

    def apply_reset(self, rows, reset, new_mode):
        self.mode[rows] = new_mode
        if not reset.identity:
            for arr, fn in ((self.X, reset.apply_points), (self.FR, reset.apply_derivs),
                            (self.FL, reset.apply_derivs)):
                arr[:, rows] = fn(arr[:, rows])
        cur = self.slot(self.j)
        self.FR[cur, rows] = self.rhs_now(rows)


# -- traces -------------------------------------------------------------------

@dataclass
class JumpRecord:
    edge: str
    hit_time: float
    completion_time: float


@dataclass
class ExecutionTrace:
    times: np.ndarray
    modes: list
    states: np.ndarray
    jumps: list = field(default_factory=list)
    blocked: bool = False

    def to_csv(self):
        n = self.states.shape[1]
        lines = ["t,mode," + ",".join(f"x_{i + 1}" for i in range(n))]
        for t, q, x in zip(self.times, self.modes, self.states):
            lines.append(f"{t:.17g},{q}," + ",".join(f"{v:.17g}" for v in x))
        return "\n".join(lines) + "\n"


def _history_arrays(phi, h, lag):
    grid = -h * np.arange(lag, -1, -1)
    grid[-1] = 0.0
    vals, ders = phi(grid)
    return vals[:, None, :], ders[:, None, :]


def _run_mode(dyn, phi, w, T, h, record_every=1):
    steps = int(round(T / h))
    if abs(steps * h - T) > 1e-9 * max(1.0, T):
        steps = int(math.ceil(T / h))
    batch = _Batch([dyn], h, 1, dyn.n, w, dyn.delay)
    lag = batch.lag[0]
    vals, ders = _history_arrays(phi, h, lag)
    batch.load_history(vals, ders)
    f0 = batch.rhs_now()
    batch.FR[batch.slot(0)] = f0
    times = [0.0]
    states = [batch.state()[0].copy()]
    for k in range(steps):
        batch.step()
        if (k + 1) % record_every == 0 or k + 1 == steps:
            times.append(batch.j * h)
            states.append(batch.state()[0].copy())
    return np.array(times), np.array(states)


def simulate_mode(dyn, phi, w, T, tau_sim=None, tol=1e-8, min_step=1e-9):
    """Single-mode trajectory from history ``phi`` under disturbance ``w``.

    With ``tol`` set, the step is halved until one step and two half steps
    agree to ``tol`` per step (measured on the common grid).
    """
    if tau_sim is None:
        tau_sim = sim_step([dyn.delay])
    k = dyn.delay / tau_sim
    if abs(k - round(k)) > 1e-6 or tau_sim > dyn.delay / 4 * (1 + 1e-12):
        raise IntegrationError(f"step {tau_sim} must divide the delay and be at most r/4")
    if w is None:
        w = DisturbanceSignal("zero", 0.0, dyn.m)
    h = tau_sim
    if tol is None:
        t, x = _run_mode(dyn, phi, w, T, h)
        return ExecutionTrace(t, ["q"] * len(t), x)
    _, x1 = _run_mode(dyn, phi, w, T, h)
    while True:
        t2, x2 = _run_mode(dyn, phi, w, T, h / 2)
        err = float(np.max(np.abs(x2[::2][: len(x1)] - x1))) if len(x1) > 1 else 0.0
        if err <= tol * max(1, len(x1) - 1):
            return ExecutionTrace(t2, ["q"] * len(t2), x2)
        h /= 2
        if h < min_step:
            raise IntegrationError("step size underflow in error control")
        x1 = x2


# -- hybrid executions ----------------------------------------------------------

def random_histories(box, count, delay, h, rng, constant_share=0.25):
    """History samples inside ``box``: smooth sinusoids around random centers plus constants.

    Returns values and derivatives with shape (k+1, count, n) on the grid ``-k h .. 0``.
    """
    n = box.dim
    lag = int(round(delay / h))
    s = -h * np.arange(lag, -1, -1)
    c = box.lo + rng.random((count, n)) * (box.hi - box.lo)
    room = np.minimum(c - box.lo, box.hi - c)
    amp = rng.random((count, n)) * room
    corner = rng.random(count) < constant_share / 2
    c[corner] = np.where(rng.random((int(corner.sum()), n)) < 0.5, box.lo, box.hi)
    const = rng.random(count) < constant_share
    amp[const | corner] = 0.0
    omega = rng.uniform(0.1, 4.0, (count, n)) / max(delay, 1e-12)
    phase = rng.uniform(0, 2 * np.pi, (count, n))
    arg = omega[None] * s[:, None, None] + phase[None]
    vals = c[None] + amp[None] * np.sin(arg)
    ders = amp[None] * omega[None] * np.cos(arg)
    return np.clip(vals, box.lo, box.hi), ders


@dataclass
class PropertyResult:
    name: str
    checked: int = 0
    violations: int = 0
    min_margin: float = math.inf
    counterexample: dict = None

    @property
    def passed(self):
        return self.violations == 0

    def record(self, margins, where):
        """``margins``: array, negative beyond tolerance means violation; ``where``: callable(i) -> dict."""
        margins = np.asarray(margins, dtype=float)
        if not margins.size:
            return
        self.checked += margins.size
        i = int(np.argmin(margins))
        if margins.flat[i] < self.min_margin:
            self.min_margin = float(margins.flat[i])
        bad = margins < 0
        if bad.any():
            self.violations += int(bad.sum())
            if self.counterexample is None:
                self.counterexample = where(int(np.flatnonzero(bad.ravel())[0]))

    def merge(self, other):
        """Fold in the result of a later chunk (counterexample of the earliest chunk wins)."""
        self.checked += other.checked
        self.violations += other.violations
        self.min_margin = min(self.min_margin, other.min_margin)
        if self.counterexample is None:
            self.counterexample = other.counterexample

    def to_json(self):
        d = {"passed": self.passed, "checked": self.checked, "violations": self.violations,
             "min_margin": None if math.isinf(self.min_margin) else self.min_margin}
        if self.counterexample is not None:
            d["counterexample"] = self.counterexample
        return d


def _box_margin(pts, box, tol):
    """Signed distance (max norm) from points to the outside of ``box``, shifted by ``tol``."""
    return np.min(np.minimum(pts - box.lo, box.hi - pts), axis=-1) + tol


def hybrid_campaign(hstar, count, seed, horizon, policy="mixed", disturbance="mixed",
                    tol=SIM_TOL, initial_mode=None, trace_rows=(), max_dwell=None, props=None):
    """Simulate ``count`` executions of a refined automaton and check them.

    ``hstar`` provides ``base`` (the automaton), ``initial[q]`` boxes,
    ``invariant[q]`` (objects with ``contains_points``), ``guard_star[e]``,
    ``fake_guard[e]`` and ``sim_step``.
    """
    H = hstar.base
    rng = np.random.default_rng(seed)
    n = H.state_dim
    modes = [q.name for q in H.modes]
    dyns = [q.dynamics for q in H.modes]
    h = hstar.sim_step
    max_back = max(d.delay for d in dyns)
    count = int(count)
    props = props if props is not None else {k: PropertyResult(k) for k in
                                             ("safety", "containment", "guard_landing", "c2")}
    if count == 0:
        return props, []
    m = dyns[0].m
    w = _make_disturbance(disturbance, H.w_max, m, count, rng, horizon)
    batch = _Batch(dyns, h, count, n, w, max_back)
    if initial_mode is None:
        start = [q for q in modes if hstar.initial.get(q) is not None]
        mode0 = rng.integers(0, len(start), count)
        mode0 = np.array([modes.index(start[i]) for i in mode0])
    else:
        mode0 = np.full(count, modes.index(initial_mode))
    batch.mode[:] = mode0
    lag_max = max(batch.lag)
    vals = np.zeros((lag_max + 1, count, n))
    ders = np.zeros((lag_max + 1, count, n))
    for qi, q in enumerate(modes):
        rows = np.where(mode0 == qi)[0]
        if not len(rows):
            continue
        v, d = random_histories(hstar.initial[q], len(rows), lag_max * h, h, rng)
        vals[:, rows], ders[:, rows] = v, d
    batch.load_history(vals, ders)
    batch.FR[batch.slot(0)] = batch.rhs_now()

    edges = list(H.edges)
    out_edges = {qi: [k for k, e in enumerate(edges) if e.source == q] for qi, q in enumerate(modes)}
    pending = np.full(count, -1)
    countdown = np.zeros(count, dtype=int)
    hit_time = np.zeros(count)
    jump_steps = [int(round(e.jump_delay / h)) for e in edges]
    if policy == "mixed":
        use_dwell = rng.random(count) < 0.5
    else:
        use_dwell = np.full(count, policy == "dwell")
    if max_dwell is None:
        max_dwell = max([e.jump_delay for e in edges] + [max_back]) * 4
    dwell_left = rng.uniform(0, max_dwell, count)
    traces = {int(r): {"t": [0.0], "mode": [modes[mode0[r]]], "x": [batch.state()[r].copy()], "jumps": []}
              for r in trace_rows}
    steps = int(math.ceil(horizon / h - 1e-9))
    safe_boxes = [q.safe for q in H.modes]

    def check_state(t):
        x = batch.state()
        for qi, q in enumerate(modes):
            rows = np.where(batch.mode == qi)[0]
            if not len(rows):
                continue
            pts = x[rows]
            props["safety"].record(_box_margin(pts, safe_boxes[qi], tol),
                                   lambda i, rows=rows, pts=pts: {"seed": seed, "trajectory": int(rows[i]),
                                                                  "t": t, "mode": q,
                                                                  "state": pts[i].tolist()})
            inside = hstar.invariant[q].contains_points(pts, tol)
            props["containment"].record(np.where(inside, 1.0, -1.0),
                                        lambda i, rows=rows, pts=pts: {"seed": seed, "trajectory": int(rows[i]),
                                                                       "t": t, "mode": q,
                                                                       "state": pts[i].tolist()})

    check_state(0.0)
    for k in range(steps):
        t = batch.j * h
        # commit decisions at the current sample
        idle = np.where(pending < 0)[0]
        if len(idle):
            x = batch.state()
            for qi in range(len(modes)):
                rows = idle[batch.mode[idle] == qi]
                for ek in out_edges[qi]:
                    if not len(rows):
                        break
                    g = hstar.guard_star[edges[ek].name]
                    en = g.contains_points(x[rows]) if not g.is_empty() else np.zeros(len(rows), bool)
                    cand = rows[en]
                    if not len(cand):
                        continue
                    draw = rng.random(len(cand))
                    go = np.where(use_dwell[cand], dwell_left[cand] <= 0, draw < 0.5)
                    chosen = cand[go]
                    pending[chosen] = ek
                    countdown[chosen] = jump_steps[ek]
                    hit_time[chosen] = t
                    rows = np.setdiff1d(rows, chosen)
        dwell_left -= h
        done = np.where((pending >= 0) & (countdown == 0))[0]
        if len(done):
            _complete(batch, edges, modes, hstar, pending, done, hit_time, t, props, tol, seed,
                      traces, dwell_left, rng, max_dwell)
        batch.step()
        countdown[pending >= 0] -= 1
        t1 = batch.j * h
        done = np.where((pending >= 0) & (countdown == 0))[0]
        if len(done):
            _complete(batch, edges, modes, hstar, pending, done, hit_time, t1, props, tol, seed,
                      traces, dwell_left, rng, max_dwell)
        check_state(t1)
        for r, tr in traces.items():
            tr["t"].append(t1)
            tr["mode"].append(modes[batch.mode[r]])
            tr["x"].append(batch.state()[r].copy())
    out = []
    for r in trace_rows:
        tr = traces[int(r)]
        out.append(ExecutionTrace(np.array(tr["t"]), tr["mode"], np.array(tr["x"]), tr["jumps"]))
    return props, out


def _complete(batch, edges, modes, hstar, pending, done, hit_time, t, props, tol, seed,
              traces, dwell_left, rng, max_dwell):
    x = batch.state()
    for ek in np.unique(pending[done]):
        e = edges[ek]
        rows = done[pending[done] == ek]
        land = hstar.fake_guard[e.name].contains_points(x[rows], tol)
        props["guard_landing"].record(np.where(land, 1.0, -1.0),
                                      lambda i, rows=rows: {"seed": seed, "trajectory": int(rows[i]),
                                                            "edge": e.name, "t": t,
                                                            "state": x[rows[i]].tolist()})
        target = modes.index(e.target)
        batch.apply_reset(rows, e.reset, target)
        lag = batch.lag[target]
        win = batch.window(rows, lag)
        inside = hstar.invariant[e.target].contains_points(win.reshape(-1, win.shape[-1]), tol)
        inside = inside.reshape(win.shape[0], len(rows)).all(axis=0)
        props["c2"].record(np.where(inside, 1.0, -1.0),
                           lambda i, rows=rows: {"seed": seed, "trajectory": int(rows[i]), "edge": e.name,
                                                 "t": t, "hit_time": float(hit_time[rows[i]])})
        for r in rows:
            if int(r) in traces:
                traces[int(r)]["jumps"].append(JumpRecord(e.name, float(hit_time[r]), float(t)))
    pending[done] = -1
    dwell_left[done] = rng.uniform(0, max_dwell, len(done))


def _make_disturbance(kind, w_max, m, count, rng, horizon):
    seed = int(rng.integers(0, 2 ** 31))
    if kind != "mixed":
        return DisturbanceSignal(kind, w_max, m, count, seed=seed, horizon=horizon)
    return _MixedDisturbance(w_max, m, count, seed, horizon)


class _MixedDisturbance:
    """Each trajectory gets one of: zero, constant, piecewise constant or sinusoid."""

    def __init__(self, w_max, m, count, seed, horizon):
        rng = np.random.default_rng(seed)
        self.kind = rng.integers(0, 4, count)
        self.parts = [
            DisturbanceSignal("zero", w_max, m, count),
            DisturbanceSignal("constant", w_max, m, count, seed=seed + 1),
            DisturbanceSignal("piecewise", w_max, m, count, seed=seed + 2,
                              dwell=float(rng.uniform(0.05, 2.0)), horizon=horizon),
            DisturbanceSignal("sinusoid", w_max, m, count, frequency=float(rng.uniform(0.5, 4.0)),
                              phase=rng.uniform(0, 2 * np.pi, (count, m))),
        ]
        self.m = m
        self.w_max = w_max

    def __call__(self, t, rows=None):
        rows = np.arange(len(self.kind)) if rows is None else rows
        out = np.zeros((len(rows), self.m))
        for k, part in enumerate(self.parts):
            sel = np.where(self.kind[rows] == k)[0]
            if len(sel):
                out[sel] = part(t, rows[sel])
        return out


def simulate_hybrid(hstar, phi0, mode0, seed=0, w=None, T=100.0, policy="bernoulli"):
    """One execution from history ``phi0`` in ``mode0`` (trace of every sample)."""
    H = hstar.base
    modes = [q.name for q in H.modes]
    dyns = [q.dynamics for q in H.modes]
    h = hstar.sim_step
    n = H.state_dim
    rng = np.random.default_rng(seed)
    if w is None:
        w = DisturbanceSignal("zero", H.w_max, dyns[0].m)
    batch = _Batch(dyns, h, 1, n, w, max(d.delay for d in dyns))
    lag = max(batch.lag)
    batch.mode[:] = modes.index(mode0)
    vals, ders = _history_arrays(phi0, h, lag) if isinstance(phi0, HistorySegment) else phi0
    batch.load_history(vals, ders)
    batch.FR[batch.slot(0)] = batch.rhs_now()
    edges = list(H.edges)
    tr = {"t": [0.0], "mode": [mode0], "x": [batch.state()[0].copy()], "jumps": []}
    pending, countdown, hit = -1, 0, 0.0
    blocked = False
    steps = int(math.ceil(T / h - 1e-9))
    for _ in range(steps):
        t = batch.j * h
        q = modes[batch.mode[0]]
        x = batch.state()[0]
        if pending < 0:
            enabled = [k for k, e in enumerate(edges) if e.source == q
                       and hstar.guard_star[e.name].contains_points(x[None])[0]]
            if enabled and (policy != "bernoulli" or rng.random() < 0.5):
                pending = enabled[int(rng.integers(0, len(enabled)))]
                countdown = int(round(edges[pending].jump_delay / h))
                hit = t
            elif not enabled and not hstar.invariant[q].contains_points(x[None], SIM_TOL)[0]:
                blocked = True
        if pending >= 0 and countdown == 0:
            e = edges[pending]
            batch.apply_reset(np.array([0]), e.reset, modes.index(e.target))
            tr["jumps"].append(JumpRecord(e.name, hit, t))
            pending = -1
        batch.step()
        if pending >= 0:
            countdown -= 1
        tr["t"].append(batch.j * h)
        tr["mode"].append(modes[batch.mode[0]])
        tr["x"].append(batch.state()[0].copy())
    return ExecutionTrace(np.array(tr["t"]), tr["mode"], np.array(tr["x"]), tr["jumps"], blocked)


# -- single-mode campaigns ----------------------------------------------------

def mode_campaign(dyn, box, count, T, h, seed, w_kind="mixed", w_max=0.0, identical_pairs=False):
    """Batch single-mode runs from random histories in ``box``; returns (times, states).

    With ``identical_pairs`` the second half of the batch shares disturbances
    with the first half (for growth-bound pair tests).
    """
    rng = np.random.default_rng(seed)
    n = dyn.n
    if identical_pairs:
        half = count
        count = 2 * half
    w = _make_disturbance(w_kind, w_max, dyn.m, count if not identical_pairs else half, rng, T)
    if identical_pairs:
        base = w
        w = lambda t, rows=None: _pair_w(base, t, rows, half)  # noqa: E731
    batch = _Batch([dyn], h, count, n, w, dyn.delay)
    vals, ders = random_histories(box, count, dyn.delay, h, rng)
    batch.load_history(vals, ders)
    batch.FR[batch.slot(0)] = batch.rhs_now()
    steps = int(math.ceil(T / h - 1e-9))
    times = np.arange(steps + 1) * h
    out = np.empty((steps + 1, count, n))
    out[0] = batch.state()
    for k in range(steps):
        batch.step()
        out[k + 1] = batch.state()
    return times, out


def _pair_w(base, t, rows, half):
    rows = np.arange(2 * half) if rows is None else rows
    return base(t, rows % half)


# -- validation ---------------------------------------------------------------

@dataclass
class ValidationReport:
    samples: int
    seed: int
    properties: dict
    no_evidence: bool = False

    @property
    def passed(self):
        return all(p.passed for p in self.properties.values())

    def to_json(self):
        return {"samples": self.samples, "seed": self.seed, "passed": self.passed,
                "no_evidence": self.no_evidence,
                "properties": {k: v.to_json() for k, v in sorted(self.properties.items())}}


HYBRID_PROPERTIES = ("safety", "containment", "guard_landing", "c2")


def default_horizon(hstar, cap=200.0, max_steps=20000):
    """Campaign horizon: ``cap`` seconds unless that exceeds ``max_steps`` integration steps."""
    return min(cap, max_steps * hstar.sim_step)


def run_campaigns(hstar, samples, seed, horizon=None, tol=SIM_TOL, chunk=250, threads=1):
    """Hybrid executions in fixed-size seeded chunks, merged in chunk order.

    The chunking does not depend on ``threads``, so results are identical for
    any worker count.
    """
    props = {k: PropertyResult(k) for k in HYBRID_PROPERTIES}
    if samples <= 0:
        return props
    if horizon is None:
        horizon = default_horizon(hstar)
    sizes = [min(chunk, samples - s) for s in range(0, samples, chunk)]
    seeds = [int(ss.generate_state(1)[0]) for ss in np.random.SeedSequence(seed).spawn(len(sizes))]

    def one(args):
        k, sd = args
        return hybrid_campaign(hstar, k, sd, horizon, tol=tol)[0]

    jobs = list(zip(sizes, seeds))
    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            parts = list(pool.map(one, jobs))
    else:
        parts = [one(j) for j in jobs]
    for part in parts:
        for k in HYBRID_PROPERTIES:
            props[k].merge(part[k])
    return props


def validate(hstar, n_samples=1000, seed=0, horizon=None, tol=SIM_TOL, mode_samples=None,
             threads=1, campaign=None):
    """Seeded validation campaign over hybrid executions and per-mode properties.

    ``campaign`` reuses hybrid results already computed with the same seed.
    """
    names = list(HYBRID_PROPERTIES) + ["attractor", "growth_bound"]
    props = {k: PropertyResult(k) for k in names}
    if n_samples <= 0:
        return ValidationReport(0, seed, props, no_evidence=True)
    hybrid = campaign if campaign is not None else run_campaigns(hstar, n_samples, seed, horizon, tol,
                                                                  threads=threads)
    for k in HYBRID_PROPERTIES:
        props[k].merge(hybrid[k])
    extra = np.random.SeedSequence([seed, 1]).spawn(2)
    ms = n_samples if mode_samples is None else mode_samples
    _attractor_checks(hstar, ms, int(extra[0].generate_state(1)[0]), tol, props["attractor"])
    _growth_checks(hstar, ms, int(extra[1].generate_state(1)[0]), tol, props["growth_bound"])
    return ValidationReport(n_samples, seed, props)


def _attractor_checks(hstar, count, seed, tol, prop, max_time=None):
    H = hstar.base
    for qi, q in enumerate(H.modes):
        cert = hstar.certificates.get(q.name)
        if cert is None or not q.dynamics.is_affine or count <= 0:
            continue
        radius = cert.ball_radius
        T = 10 * max(cert.bound.T_star, q.dynamics.delay)
        if max_time is not None:
            T = min(T, max_time)
        ball = Box(cert.center - radius, cert.center + radius)
        h = sim_step([q.dynamics.delay])
        _, xs = mode_campaign(q.dynamics, ball, count, T, h, seed + qi, w_max=H.w_max)
        xs = xs - cert.center
        norms = np.max(np.abs(xs), axis=-1)
        margin = (radius + tol) - norms
        worst = np.min(margin, axis=0)
        prop.record(worst, lambda i, q=q, xs=xs: {"seed": seed + qi, "mode": q.name, "trajectory": int(i),
                                                  "max_norm": float(np.max(np.abs(xs[:, i])))})


def _growth_checks(hstar, count, seed, tol, prop, delays=5):
    H = hstar.base
    rng = np.random.default_rng(seed)
    for qi, q in enumerate(H.modes):
        table = hstar.growth.get(q.name) if hstar.growth else None
        inv = hstar.invariant.get(q.name)
        if table is None or count <= 0 or inv is None:
            continue
        grid = inv.grid
        idx = grid.index_array()
        if not len(idx):
            continue
        rho = grid.cell_radius
        pick = idx[rng.integers(0, len(idx), count)]
        T = min(delays * q.dynamics.delay, table.horizon)
        h = sim_step([q.dynamics.delay], jump_delays=[table.h])
        centers = grid.cell_lo(pick) + rho
        margins = []
        lam = np.array([table.growth_bound(rho, t) for t in np.arange(int(T / h) + 1) * h])
        times, xs = _cell_pairs(q.dynamics, centers, rho, count, T, h, seed + qi, H.w_max)
        diff = np.abs(xs[:, :count] - xs[:, count:])
        k = min(len(lam), len(times))
        margins = np.min(lam[:k, None, :] + tol - diff[:k], axis=(0, 2))
        prop.record(margins, lambda i, q=q: {"seed": seed + qi, "mode": q.name, "pair": int(i)})


def _cell_pairs(dyn, centers, rho, count, T, h, seed, w_max):
    rng = np.random.default_rng(seed)
    n = dyn.n
    w = _make_disturbance("mixed", w_max, dyn.m, count, rng, T)
    batch = _Batch([dyn], h, 2 * count, n, lambda t, rows=None: _pair_w(w, t, rows, count), dyn.delay)
    lag = batch.lag[0]
    vals = np.empty((lag + 1, 2 * count, n))
    ders = np.empty_like(vals)
    # first member: constant history at the cell center; second: any history inside the cell
    vals[:, :count] = centers[None]
    ders[:, :count] = 0.0
    for i in range(count):
        box = Box(centers[i] - rho, centers[i] + rho)
        v, d = random_histories(box, 1, dyn.delay, h, rng)
        vals[:, count + i], ders[:, count + i] = v[:, 0], d[:, 0]
    batch.load_history(vals, ders)
    batch.FR[batch.slot(0)] = batch.rhs_now()
    steps = int(math.ceil(T / h - 1e-9))
    out = np.empty((steps + 1, 2 * count, n))
    out[0] = batch.state()
    for k in range(steps):
        batch.step()
        out[k + 1] = batch.state()
    return np.arange(steps + 1) * h, out


__all__ = ["HistorySegment", "DisturbanceSignal", "ExecutionTrace", "JumpRecord", "simulate_mode",
           "simulate_hybrid", "hybrid_campaign", "mode_campaign", "validate", "ValidationReport",
           "PropertyResult", "sim_step", "random_histories"]
