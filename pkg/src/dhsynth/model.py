"""Delay hybrid automata: dynamics, modes, edges and the JSON model format."""
from __future__ import annotations

import json
import math
from importlib import resources

import numpy as np
import sympy as sp
from sympy.parsing.sympy_parser import parse_expr

from .errors import EvaluationError, ModelError
from .geometry import Box
from .interval import ieval, imul, iadd

_ALLOWED_FUNCS = {"sin": sp.sin, "cos": sp.cos, "exp": sp.exp}
_ALLOWED_TYPES = (sp.Add, sp.Mul, sp.Pow, sp.Symbol, sp.Number, sp.sin, sp.cos, sp.exp)


def state_symbols(n, m):
    xs = sp.symbols(" ".join(f"x{i + 1}" for i in range(n)), seq=True)
    xds = sp.symbols(" ".join(f"xd{i + 1}" for i in range(n)), seq=True)
    ws = sp.symbols(" ".join(f"w{j + 1}" for j in range(m)), seq=True) if m else ()
    return tuple(xs), tuple(xds), tuple(ws), sp.Symbol("t")


def parse_term(text, n, m, path="term"):
    """Parse one right-hand-side expression over x1..xn, xd1..xdn, w1..wm and t."""
    xs, xds, ws, t = state_symbols(n, m)
    local = {s.name: s for s in (*xs, *xds, *ws, t)}
    local.update(_ALLOWED_FUNCS)
    if not isinstance(text, (str, int, float)):
        raise ModelError("expression must be a string or number", path)
    try:
        expr = parse_expr(str(text), local_dict=local, global_dict={"Integer": sp.Integer,
                                                                  "Float": sp.Float,
                                                                  "Rational": sp.Rational,
                                                                  "Symbol": sp.Symbol},
                          evaluate=True)
    except Exception as exc:  # sympy raises many types for malformed input
        raise ModelError(f"cannot parse expression {text!r}: {exc}", path) from None
    allowed = set(local.values())
    for node in sp.preorder_traversal(expr):
        if isinstance(node, sp.Symbol) and node not in allowed:
            raise ModelError(f"unknown variable {node.name!r} in {text!r}", path)
        if not isinstance(node, _ALLOWED_TYPES) and not (node.is_number and not node.free_symbols):
            raise ModelError(f"unsupported operation {type(node).__name__} in {text!r}", path)
    return expr


class Reset:
    """Affine map ``x -> M x + b`` applied pointwise to the carried history."""

    def __init__(self, M=None, b=None, n=None):
        if M is None:
            self.identity = True
            self.M = np.eye(n)
            self.b = np.zeros(n)
        else:
            self.identity = False
            self.M = np.array(M, dtype=float)
            self.b = np.array(b, dtype=float)

    def apply_points(self, pts):
        if self.identity:
            return np.array(pts, dtype=float)
        return np.asarray(pts) @ self.M.T + self.b

    def apply_derivs(self, d):
        if self.identity:
            return np.array(d, dtype=float)
        return np.asarray(d) @ self.M.T

    def apply_box(self, box):
        if self.identity:
            return box
        c = (box.lo + box.hi) / 2
        r = (box.hi - box.lo) / 2
        cc = self.M @ c + self.b
        rr = np.abs(self.M) @ r
        return Box(cc - rr, cc + rr)

    def to_json(self):
        if self.identity:
            return "identity"
        return {"M": self.M.tolist(), "b": self.b.tolist()}


class DdeDynamics:
    """``x' = A x + B x(t - r) + C w + N(x, x(t - r), w, t)`` with optional ``N``."""

    def __init__(self, A, B, C, delay, nonlinear=None, g_max_hint=None, nonlinear_src=None):
        self.A = np.array(A, dtype=float)
        self.B = np.array(B, dtype=float)
        self.C = np.array(C, dtype=float)
        self.delay = float(delay)
        self.n = self.A.shape[0]
        self.m = self.C.shape[1]
        self.nonlinear = tuple(nonlinear) if nonlinear is not None else None
        if nonlinear_src is None and self.nonlinear is not None:
            nonlinear_src = tuple(str(e) for e in self.nonlinear)
        self.nonlinear_src = nonlinear_src
        self.g_max_hint = None if g_max_hint is None else float(g_max_hint)
        if self.A.shape != (self.n, self.n) or self.B.shape != (self.n, self.n) or self.C.shape[0] != self.n:
            raise ModelError("inconsistent matrix dimensions")
        if not self.delay > 0:
            raise ModelError(f"delay must be positive, got {self.delay}")
        xs, xds, ws, t = state_symbols(self.n, self.m)
        self.symbols = (xs, xds, ws, t)
        self._fn = None
        if self.nonlinear is not None:
            if len(self.nonlinear) != self.n:
                raise ModelError(f"expected {self.n} nonlinear terms, got {len(self.nonlinear)}")
            self._fn = sp.lambdify((*xs, *xds, *ws, t), list(self.nonlinear), "numpy")

    @property
    def is_linear(self):
        return self.nonlinear is None

    @property
    def is_affine(self):
        """True when the extra terms are constants (or absent)."""
        return self.nonlinear is None or all(not e.free_symbols for e in self.nonlinear)

    def offset(self):
        """Constant forcing vector of an affine system."""
        if self.nonlinear is None:
            return np.zeros(self.n)
        return np.array([float(e) for e in self.nonlinear])

    def nonlinear_symbols(self):
        if self.nonlinear is None:
            return set()
        out = set()
        for e in self.nonlinear:
            out |= {s.name for s in e.free_symbols}
        return out

    def rhs(self, x, xd, w, t=0.0):
        """Vectorised right-hand side; leading axes of x, xd, w broadcast."""
        x = np.asarray(x, dtype=float)
        xd = np.asarray(xd, dtype=float)
        w = np.asarray(w, dtype=float)
        out = x @ self.A.T + xd @ self.B.T + w @ self.C.T
        if self._fn is not None:
            args = [x[..., i] for i in range(self.n)] + [xd[..., i] for i in range(self.n)]
            args += [w[..., j] for j in range(self.m)] + [np.asarray(t, dtype=float)]
            with np.errstate(all="ignore"):
                vals = self._fn(*args)
            for i, v in enumerate(vals):
                v = np.broadcast_to(np.asarray(v, dtype=float), out.shape[:-1])
                if not np.all(np.isfinite(v)):
                    raise EvaluationError(
                        f"component {i + 1} term {self.nonlinear_src[i]!r} is not finite at the given point")
                out[..., i] += v
        return out

    def interval_env(self, x_box, xd_box, w_max, t_range=(-math.inf, math.inf)):
        xs, xds, ws, t = self.symbols
        env = {}
        for i in range(self.n):
            env[xs[i].name] = (float(x_box.lo[i]), float(x_box.hi[i]))
            env[xds[i].name] = (float(xd_box.lo[i]), float(xd_box.hi[i]))
        for j in range(self.m):
            env[ws[j].name] = (-float(w_max), float(w_max))
        env[t.name] = t_range
        return env

    def interval_rhs(self, x_box, xd_box, w_max):
        """Componentwise enclosure (lo, hi) of the right-hand side over the boxes."""
        env = self.interval_env(x_box, xd_box, w_max)
        out = []
        for i in range(self.n):
            acc = (0.0, 0.0)
            for j in range(self.n):
                acc = iadd(acc, imul((self.A[i, j], self.A[i, j]), env[self.symbols[0][j].name]))
                acc = iadd(acc, imul((self.B[i, j], self.B[i, j]), env[self.symbols[1][j].name]))
            for j in range(self.m):
                acc = iadd(acc, imul((self.C[i, j], self.C[i, j]), (-float(w_max), float(w_max))))
            if self.nonlinear is not None:
                acc = iadd(acc, ieval(self.nonlinear[i], env))
            out.append(acc)
        return out

    def jacobian_exprs(self):
        """Symbolic Jacobians of the full right-hand side w.r.t. x and x(t - r)."""
        xs, xds, _, _ = self.symbols
        Jx = [[sp.Float(self.A[i, j]) for j in range(self.n)] for i in range(self.n)]
        Jd = [[sp.Float(self.B[i, j]) for j in range(self.n)] for i in range(self.n)]
        if self.nonlinear is not None:
            for i, e in enumerate(self.nonlinear):
                for j in range(self.n):
                    Jx[i][j] = Jx[i][j] + sp.diff(e, xs[j])
                    Jd[i][j] = Jd[i][j] + sp.diff(e, xds[j])
        return Jx, Jd

    def jacobian_bounds(self, x_box, xd_box, w_max):
        """Interval enclosures of both Jacobians over the boxes, as (lo, hi) arrays."""
        env = self.interval_env(x_box, xd_box, w_max)
        Jx, Jd = self.jacobian_exprs()
        out = []
        for J in (Jx, Jd):
            lo = np.zeros((self.n, self.n))
            hi = np.zeros((self.n, self.n))
            for i in range(self.n):
                for j in range(self.n):
                    lo[i, j], hi[i, j] = ieval(sp.sympify(J[i][j]), env)
            out.append((lo, hi))
        return out

    def to_json(self):
        d = {"delay": self.delay, "A": self.A.tolist(), "B": self.B.tolist(), "C": self.C.tolist()}
        if self.nonlinear is not None:
            d["nonlinear"] = list(self.nonlinear_src)
        if self.g_max_hint is not None:
            d["g_max"] = self.g_max_hint
        return d


def evaluate_rhs(dyn, x, xd, w, t=0.0):
    return dyn.rhs(x, xd, w, t)


def interval_sup_rhs(dyn, x_box, xd_box, w_max):
    """Upper bound of ``|f|`` per component over the boxes and all ``|w| <= w_max``."""
    return np.array([max(abs(lo), abs(hi)) for lo, hi in dyn.interval_rhs(x_box, xd_box, w_max)])


class Mode:
    def __init__(self, name, dynamics, invariant, initial, safe, iota=None, reach=None):
        self.name = name
        self.dynamics = dynamics
        self.invariant = invariant
        self.initial = initial
        self.safe = safe
        self.iota = iota
        self.reach = dict(reach or {})

    def safe_region(self):
        """Safe box intersected with the mode invariant (the box every set must stay in)."""
        box = self.safe.intersect(self.invariant)
        if box is None:
            raise ModelError(f"mode {self.name}: safe set and invariant are disjoint")
        return box

    def to_json(self):
        d = {"name": self.name}
        d.update(self.dynamics.to_json())
        d["invariant"] = self.invariant.to_json()
        d["initial"] = self.initial.to_json()
        d["safe"] = self.safe.to_json()
        if self.iota is not None:
            d["iota"] = self.iota
        if self.reach:
            d["reach"] = self.reach
        return d


class Edge:
    def __init__(self, name, source, target, guard, jump_delay, reset):
        self.name = name
        self.source = source
        self.target = target
        self.guard = guard
        self.jump_delay = float(jump_delay)
        self.reset = reset

    def to_json(self):
        return {"name": self.name, "from": self.source, "to": self.target,
                "guard": self.guard.to_json(), "jump_delay": self.jump_delay,
                "reset": self.reset.to_json()}


class DelayHybridAutomaton:
    def __init__(self, name, state_dim, w_max, modes, edges):
        self.name = name
        self.state_dim = int(state_dim)
        self.w_max = float(w_max)
        self.modes = tuple(modes)
        self.edges = tuple(edges)
        self._by_name = {m.name: m for m in self.modes}

    def mode(self, name):
        try:
            return self._by_name[name]
        except KeyError:
            raise ModelError(f"unknown mode {name!r}") from None

    def edge(self, name):
        for e in self.edges:
            if e.name == name:
                return e
        raise ModelError(f"unknown edge {name!r}")

    def edges_from(self, name):
        return [e for e in self.edges if e.source == name]

    def edges_into(self, name):
        return [e for e in self.edges if e.target == name]

    def to_json(self):
        return {"name": self.name, "state_dim": self.state_dim, "w_max": self.w_max,
                "modes": [m.to_json() for m in self.modes],
                "edges": [e.to_json() for e in self.edges]}

    def __eq__(self, other):
        return isinstance(other, DelayHybridAutomaton) and self.to_json() == other.to_json()

    __hash__ = None


# --- parsing -----------------------------------------------------------------

def _number(v, path, allow_inf=False):
    if isinstance(v, bool):
        raise ModelError("expected a number", path)
    if isinstance(v, (int, float)):
        v = float(v)
    elif isinstance(v, str) and allow_inf and v.strip().lower() in ("inf", "+inf", "-inf", "infinity", "-infinity"):
        v = -math.inf if v.strip().startswith("-") else math.inf
    else:
        raise ModelError(f"expected a number, got {v!r}", path)
    if math.isnan(v) or (math.isinf(v) and not allow_inf):
        raise ModelError("expected a finite number", path)
    return v


def _matrix(v, rows, cols, path):
    if not isinstance(v, list) or len(v) != rows:
        raise ModelError(f"expected a {rows}x{cols} matrix (list of {rows} rows)", path)
    out = []
    for i, row in enumerate(v):
        if not isinstance(row, list) or len(row) != cols:
            raise ModelError(f"expected a {rows}x{cols} matrix, row {i} has wrong length", path)
        out.append([_number(x, f"{path}[{i}][{j}]") for j, x in enumerate(row)])
    return np.array(out, dtype=float).reshape(rows, cols)


def _box(v, n, path):
    if not isinstance(v, dict) or "lo" not in v or "hi" not in v:
        raise ModelError("expected a box {lo: [...], hi: [...]}", path)
    lo, hi = v["lo"], v["hi"]
    for key, arr in (("lo", lo), ("hi", hi)):
        if not isinstance(arr, list) or len(arr) != n:
            raise ModelError(f"expected {n} values", f"{path}.{key}")
    lo = [_number(x, f"{path}.lo[{i}]", allow_inf=True) for i, x in enumerate(lo)]
    hi = [_number(x, f"{path}.hi[{i}]", allow_inf=True) for i, x in enumerate(hi)]
    if any(a > b for a, b in zip(lo, hi)):
        raise ModelError("box has lo > hi", path)
    return Box(lo, hi)


def _require(d, key, path):
    if key not in d:
        raise ModelError(f"missing required key {key!r}", path)
    return d[key]


def model_from_dict(data):
    if not isinstance(data, dict):
        raise ModelError("top level must be an object")
    n = _require(data, "state_dim", "")
    if isinstance(n, bool) or not isinstance(n, int) or n < 1:
        raise ModelError("state_dim must be a positive integer", "state_dim")
    w_max = _number(_require(data, "w_max", ""), "w_max")
    if w_max < 0:
        raise ModelError("w_max must be nonnegative", "w_max")
    modes_raw = _require(data, "modes", "")
    if not isinstance(modes_raw, list) or not modes_raw:
        raise ModelError("at least one mode is required", "modes")
    modes = []
    for k, md in enumerate(modes_raw):
        p = f"modes[{k}]"
        if not isinstance(md, dict):
            raise ModelError("mode must be an object", p)
        name = _require(md, "name", p)
        if not isinstance(name, str) or not name:
            raise ModelError("mode name must be a nonempty string", f"{p}.name")
        delay = _number(_require(md, "delay", p), f"{p}.delay")
        if delay < 0:
            raise ModelError(f"negative delay {delay}", f"{p}.delay")
        if delay == 0:
            raise ModelError("delay must be positive", f"{p}.delay")
        A = _matrix(_require(md, "A", p), n, n, f"{p}.A")
        B = _matrix(_require(md, "B", p), n, n, f"{p}.B")
        C_raw = _require(md, "C", p)
        if not isinstance(C_raw, list) or len(C_raw) != n or not all(isinstance(r, list) for r in C_raw):
            raise ModelError(f"expected C with {n} rows", f"{p}.C")
        m = len(C_raw[0])
        C = _matrix(C_raw, n, m, f"{p}.C")
        nonlinear = None
        src = None
        if md.get("nonlinear") is not None:
            raw = md["nonlinear"]
            if not isinstance(raw, list) or len(raw) != n:
                raise ModelError(f"expected {n} expressions", f"{p}.nonlinear")
            nonlinear = [parse_term(t, n, m, f"{p}.nonlinear[{i}]") for i, t in enumerate(raw)]
            src = tuple(str(t) for t in raw)
        g_hint = md.get("g_max")
        if g_hint is not None:
            g_hint = _number(g_hint, f"{p}.g_max")
            if g_hint < 0:
                raise ModelError("g_max must be nonnegative", f"{p}.g_max")
        dyn = DdeDynamics(A, B, C, delay, nonlinear, g_hint, src)
        inv = _box(_require(md, "invariant", p), n, f"{p}.invariant")
        init = _box(_require(md, "initial", p), n, f"{p}.initial")
        safe = _box(_require(md, "safe", p), n, f"{p}.safe")
        if not safe.is_bounded():
            raise ModelError("safe set must be bounded", f"{p}.safe")
        iota = md.get("iota")
        if iota is not None:
            iota = _number(iota, f"{p}.iota")
            if iota <= 0:
                raise ModelError("iota must be positive", f"{p}.iota")
        reach = md.get("reach") or {}
        if not isinstance(reach, dict):
            raise ModelError("reach must be an object", f"{p}.reach")
        reach = _reach_block(reach, n, f"{p}.reach")
        mode = Mode(name, dyn, inv, init, safe, iota, reach)
        if init.intersect(inv) is None or init.intersect(safe) is None:
            raise ModelError("initial set does not meet invariant and safe set", f"{p}.initial")
        modes.append(mode)
    names = [m.name for m in modes]
    if len(set(names)) != len(names):
        raise ModelError("mode names must be unique", "modes")
    edges = []
    edges_raw = data.get("edges", [])
    if not isinstance(edges_raw, list):
        raise ModelError("edges must be a list", "edges")
    by_name = {m.name: m for m in modes}
    for k, ed in enumerate(edges_raw):
        p = f"edges[{k}]"
        if not isinstance(ed, dict):
            raise ModelError("edge must be an object", p)
        src_name = _require(ed, "from", p)
        dst_name = _require(ed, "to", p)
        for key, nm in (("from", src_name), ("to", dst_name)):
            if nm not in by_name:
                raise ModelError(f"unknown mode {nm!r}", f"{p}.{key}")
        guard = _box(_require(ed, "guard", p), n, f"{p}.guard")
        D = _number(_require(ed, "jump_delay", p), f"{p}.jump_delay")
        if D < 0:
            raise ModelError(f"negative jump delay {D}", f"{p}.jump_delay")
        reset_raw = ed.get("reset", "identity")
        if reset_raw in ("identity", None):
            reset = Reset(n=n)
        elif isinstance(reset_raw, dict):
            M = _matrix(_require(reset_raw, "M", f"{p}.reset"), n, n, f"{p}.reset.M")
            b_raw = reset_raw.get("b", [0.0] * n)
            if not isinstance(b_raw, list) or len(b_raw) != n:
                raise ModelError(f"expected {n} values", f"{p}.reset.b")
            b = [_number(x, f"{p}.reset.b[{i}]") for i, x in enumerate(b_raw)]
            reset = Reset(M, b)
        else:
            raise ModelError("reset must be 'identity' or {M, b}", f"{p}.reset")
        tau = by_name[src_name].reach.get("tau")
        if tau is not None and D > 0:
            ratio = D / tau
            if abs(ratio - round(ratio)) > 1e-9 * max(1.0, ratio):
                raise ModelError(f"jump delay {D} is not a multiple of the reach step {tau}",
                                 f"{p}.jump_delay")
        edges.append(Edge(ed.get("name", f"e{k + 1}"), src_name, dst_name, guard, D, reset))
    ename = [e.name for e in edges]
    if len(set(ename)) != len(ename):
        raise ModelError("edge names must be unique", "edges")
    return DelayHybridAutomaton(data.get("name", "model"), n, w_max, modes, edges)


def _reach_block(reach, n, path):
    out = {}
    for key in ("tau", "eps"):
        if key in reach:
            v = _number(reach[key], f"{path}.{key}")
            if v <= 0:
                raise ModelError(f"{key} must be positive", f"{path}.{key}")
            out[key] = v
    for key in ("rho", "rho_th"):
        if key in reach:
            v = reach[key]
            vals = v if isinstance(v, list) else [v] * n
            if len(vals) != n:
                raise ModelError(f"expected {n} values", f"{path}.{key}")
            vals = [_number(x, f"{path}.{key}[{i}]") for i, x in enumerate(vals)]
            if any(x <= 0 for x in vals):
                raise ModelError(f"{key} must be positive", f"{path}.{key}")
            out[key] = vals
    unknown = set(reach) - {"tau", "eps", "rho", "rho_th"}
    if unknown:
        raise ModelError(f"unknown keys {sorted(unknown)}", path)
    return out


def parse_model(text):
    try:
        data = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ModelError(f"invalid JSON: {exc.msg}", f"line {exc.lineno}, column {exc.colno}") from None
    return model_from_dict(data)


def serialize_model(model):
    return json.dumps(model.to_json(), indent=2) + "\n"


def load_model(path):
    with open(path, encoding="utf-8") as fh:
        return parse_model(fh.read())


BUNDLED = ("heating", "lowpass_filter", "predator_prey")


def bundled_model_text(name):
    if name not in BUNDLED:
        raise ModelError(f"no bundled model named {name!r}; choose from {', '.join(BUNDLED)}")
    return resources.files("dhsynth.models").joinpath(f"{name}.json").read_text(encoding="utf-8")


def bundled_model(name):
    return parse_model(bundled_model_text(name))
