"""Ball-convergence certificates for Metzler-coupled linear and nonlinear DDEs.

For ``x' = A x + B x(t - r) + C w`` with ``M = A + B`` Hurwitz Metzler, every
trajectory obeys::

    ||x(t)|| <= r1 + beta * (||phi|| - F / delta)^+ * exp(-gamma t)

where ``F`` is the forcing magnitude (``C_max * w_max`` plus, for nonlinear
modes, a bound on the higher-order remainder).
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
import sympy as sp

from .errors import CertificationFailure, EvaluationError, ModelError
from .geometry import Box
from .interval import ieval


def is_metzler(M):
    M = np.atleast_2d(np.asarray(M, dtype=float))
    off = M - np.diag(np.diag(M))
    return bool(np.all(off >= 0))


def is_hurwitz_metzler(M):
    """M-matrix test: ``-M`` nonsingular with a nonnegative inverse."""
    M = np.atleast_2d(np.asarray(M, dtype=float))
    if not is_metzler(M):
        return False
    try:
        inv = np.linalg.inv(-M)
    except np.linalg.LinAlgError:
        return False
    if not np.all(np.isfinite(inv)):
        return False
    scale = max(1.0, float(np.max(np.abs(inv))))
    if not np.all(inv >= -1e-12 * scale):
        return False
    # a singular-but-invertible-in-floating-point matrix would pass above; require M zeta < 0
    zeta = np.maximum(inv @ np.ones(M.shape[0]), 0)
    return bool(np.all(zeta > 0) and np.all(M @ zeta < 0))


def find_zeta(M):
    M = np.atleast_2d(np.asarray(M, dtype=float))
    n = M.shape[0]
    ones = np.ones(n)
    if np.all(M @ ones < 0):
        return ones
    zeta = np.linalg.solve(M, -ones)
    zeta = zeta / np.max(np.abs(zeta))
    if not (np.all(zeta > 0) and np.all(M @ zeta < 0)):
        raise CertificationFailure("no positive vector zeta with M zeta < 0 (M is not Hurwitz Metzler)")
    return zeta


@dataclass
class ConvergenceCertificate:
    M: np.ndarray
    zeta: np.ndarray
    beta: float
    gamma: float
    delta: float
    eta: float
    c_max: float
    gammas: np.ndarray
    residuals: np.ndarray
    delay: float
    B_abs: np.ndarray = field(repr=False)


def _h_row(gamma, i, zeta, B_abs, r, eta):
    return gamma * zeta[i] + float(np.sum(zeta * B_abs[i])) * math.expm1(gamma * r) - eta


def _gamma_root(i, zeta, B_abs, r, eta):
    lo = 1e-12
    if _h_row(lo, i, zeta, B_abs, r, eta) > 0:
        raise CertificationFailure(f"row {i}: no positive decay rate (H_i > 0 at gamma ~ 0)")
    hi = eta
    while _h_row(hi, i, zeta, B_abs, r, eta) <= 0:
        hi *= 2
        if hi > 1e12:
            raise CertificationFailure(f"row {i}: decay-rate bracket diverged")
    while hi - lo > 1e-12 * max(1.0, hi):
        mid = 0.5 * (lo + hi)
        if _h_row(mid, i, zeta, B_abs, r, eta) > 0:
            hi = mid
        else:
            lo = mid
    # pick the bracket end with the smaller residual; both are within 1e-12 of the root
    a, b = _h_row(lo, i, zeta, B_abs, r, eta), _h_row(hi, i, zeta, B_abs, r, eta)
    return (lo, a) if abs(a) <= abs(b) else (hi, b)


def convergence_constants(M, B_delay, r, zeta, C):
    M = np.atleast_2d(np.asarray(M, dtype=float))
    B_abs = np.abs(np.atleast_2d(np.asarray(B_delay, dtype=float)))
    C = np.atleast_2d(np.asarray(C, dtype=float))
    zeta = np.asarray(zeta, dtype=float)
    eta = float(np.min(-(M @ zeta)))
    if not eta > 0:
        raise CertificationFailure(f"eta = {eta} is not positive")
    beta = 1.0 / float(np.min(zeta))
    delta = eta * beta
    roots = [_gamma_root(i, zeta, B_abs, float(r), eta) for i in range(M.shape[0])]
    gammas = np.array([g for g, _ in roots])
    residuals = np.array([abs(h) for _, h in roots])
    c_max = float(np.max(np.sum(np.abs(C), axis=1))) if C.size else 0.0
    return ConvergenceCertificate(M=M, zeta=zeta, beta=beta, gamma=float(np.min(gammas)),
                                  delta=delta, eta=eta, c_max=c_max, gammas=gammas,
                                  residuals=residuals, delay=float(r), B_abs=B_abs)


@dataclass
class HorizonBound:
    r1: float
    r2: float
    eps: float
    T_star: float


def horizon(cert, phi_norm, w_max, eps, forcing=None):
    """Attractor radius and time after which trajectories are within ``eps`` of it.

    ``forcing`` overrides ``C_max * w_max`` (nonlinear modes pass the total bound).
    """
    if not eps > 0:
        raise ValueError("eps must be positive")
    F = cert.c_max * w_max if forcing is None else forcing
    r1 = F / cert.eta
    r2 = cert.beta * (phi_norm - F / cert.delta)
    T = max(0.0, math.log(r2 / eps) / cert.gamma) if r2 > 0 else 0.0
    return HorizonBound(r1=r1, r2=r2, eps=eps, T_star=T)


# --- nonlinear modes ----------------------------------------------------------

def linearize(dyn):
    """Jacobians of the full right-hand side at the origin w.r.t. x and x(t - r)."""
    if dyn.is_linear:
        return dyn.A.copy(), dyn.B.copy()
    xs, xds, ws, t = dyn.symbols
    at0 = {s: 0 for s in (*xs, *xds, *ws, t)}
    A = dyn.A.copy()
    B = dyn.B.copy()
    for i, e in enumerate(dyn.nonlinear):
        for j in range(dyn.n):
            for target, sym in ((A, xs[j]), (B, xds[j])):
                d = sp.diff(e, sym).subs(at0)
                try:
                    v = complex(d)
                except (TypeError, ValueError):
                    raise ModelError(f"term {i + 1} is not differentiable at the origin") from None
                if not math.isfinite(v.real) or v.imag != 0:
                    raise ModelError(f"term {i + 1} is not differentiable at the origin")
                target[i, j] += v.real
    return A, B


def remainder_terms(dyn):
    """Nonlinear part minus its linearization at the origin, expanded."""
    if dyn.is_linear:
        return None
    xs, xds, ws, t = dyn.symbols
    at0 = {s: 0 for s in (*xs, *xds, *ws, t)}
    out = []
    for e in dyn.nonlinear:
        lin = sum(sp.diff(e, s).subs(at0) * s for s in (*xs, *xds))
        out.append(sp.expand(sp.expand(e) - lin))
    return out


@dataclass
class NonlinearBound:
    g_max: float
    G: float
    iota: float


def _remainder_sup(terms, dyn, radius):
    xs, xds, ws, t = dyn.symbols
    env = {s.name: (-radius, radius) for s in (*xs, *xds)}
    out = 0.0
    for e in terms:
        lo, hi = ieval(e, env)
        out = max(out, abs(lo), abs(hi))
    return out


def g_max_fixed_point(dyn, cert, w_max, iota_cap, g_cap=1e9):
    """Smallest remainder bound g with sup ||g|| over the radius-H1(g) box <= g."""
    base = cert.c_max * w_max
    if dyn.is_linear:
        if dyn.g_max_hint is not None:
            g = dyn.g_max_hint
            return NonlinearBound(g, base + g, iota_cap)
        return NonlinearBound(0.0, base, iota_cap)
    used = dyn.nonlinear_symbols()
    if used & ({w.name for w in dyn.symbols[2]} | {"t"}):
        raise CertificationFailure("nonlinear terms depending on w or t cannot be certified")
    terms = remainder_terms(dyn)

    def h1(g):
        G = base + g
        return G / cert.eta + cert.beta * max(iota_cap - G / cert.delta, 0.0)

    def h2(g):
        try:
            return _remainder_sup(terms, dyn, h1(g))
        except EvaluationError as exc:
            raise CertificationFailure(f"remainder bound failed: {exc}") from None

    if h2(0.0) <= 0.0:
        g = 0.0
    else:
        g_prev, g = 0.0, 1e-9
        while h2(g) > g:
            g_prev, g = g, 2 * g
            if g > g_cap:
                raise CertificationFailure("no remainder bound below the cap; linearization invalid at this scale")
        lo, hi = g_prev, g
        for _ in range(80):
            mid = 0.5 * (lo + hi)
            if h2(mid) <= mid:
                hi = mid
            else:
                lo = mid
            if hi - lo <= 1e-12 * hi:
                break
        g = hi
    G = base + g
    return NonlinearBound(g, G, min(iota_cap, h1(g)))


def equilibrium(dyn):
    """Rest point of an affine mode (``(A + B) x + c = 0``); the origin otherwise."""
    if dyn.is_linear or not dyn.is_affine:
        return np.zeros(dyn.n)
    return np.linalg.solve(dyn.A + dyn.B, -dyn.offset())


@dataclass
class ModeCertificate:
    """Everything the reach engine needs from the convergence analysis of one mode.

    ``center`` is the point the attractor ball is centred on: the equilibrium
    of an affine mode, the origin otherwise.
    """

    cert: ConvergenceCertificate
    nonlinear: NonlinearBound
    bound: HorizonBound
    phi_norm: float
    center: np.ndarray = None

    def __post_init__(self):
        if self.center is None:
            self.center = np.zeros(len(self.cert.zeta))

    @property
    def ball_radius(self):
        return self.bound.r1 + self.bound.eps

    def to_json(self):
        return {"zeta": self.cert.zeta.tolist(), "beta": self.cert.beta, "gamma": self.cert.gamma,
                "delta": self.cert.delta, "eta": self.cert.eta, "C_max": self.cert.c_max,
                "r1": self.bound.r1, "r2": self.bound.r2, "eps": self.bound.eps,
                "T_star": self.bound.T_star, "g_max": self.nonlinear.g_max,
                "G": self.nonlinear.G, "iota": self.nonlinear.iota, "phi_norm": self.phi_norm,
                "gamma_residual": float(np.max(self.cert.residuals)), "center": self.center.tolist()}


def certify_mode(mode, w_max, eps, initial=None):
    """Certificate for ``mode`` with histories ranging in ``initial`` (default: its initial box)."""
    dyn = mode.dynamics
    init = mode.initial if initial is None else initial
    clipped = init.intersect(mode.safe_region()) or init
    if dyn.is_affine and not dyn.is_linear:
        # affine modes are analysed in coordinates centred on their rest point
        center = equilibrium(dyn)
        M = dyn.A + dyn.B
        if not is_hurwitz_metzler(M):
            raise CertificationFailure(f"mode {mode.name}: A + B is not Hurwitz Metzler")
        cert = convergence_constants(M, dyn.B, dyn.delay, find_zeta(M), dyn.C)
        phi_norm = Box(clipped.lo - center, clipped.hi - center).norm()
        nl = NonlinearBound(0.0, cert.c_max * w_max, max(mode.iota or 0.0, phi_norm))
        bound = horizon(cert, phi_norm, w_max, eps)
        return ModeCertificate(cert=cert, nonlinear=nl, bound=bound, phi_norm=phi_norm, center=center)
    phi_norm = clipped.norm()
    A, B = linearize(dyn)
    M = A + B
    if not is_metzler(M):
        raise CertificationFailure(f"mode {mode.name}: A + B is not Metzler")
    if not is_hurwitz_metzler(M):
        raise CertificationFailure(f"mode {mode.name}: A + B is not Hurwitz")
    zeta = find_zeta(M)
    cert = convergence_constants(M, B, dyn.delay, zeta, dyn.C)
    iota_cap = max(mode.iota or 0.0, phi_norm)
    nl = g_max_fixed_point(dyn, cert, w_max, iota_cap)
    if phi_norm > nl.iota * (1 + 1e-12):
        raise CertificationFailure(
            f"mode {mode.name}: initial histories reach norm {phi_norm:.6g} beyond validity radius {nl.iota:.6g}")
    bound = horizon(cert, phi_norm, w_max, eps, forcing=nl.G)
    return ModeCertificate(cert=cert, nonlinear=nl, bound=bound, phi_norm=phi_norm)
