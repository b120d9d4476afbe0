"""Growth bounds for delayed linear comparison systems.

``Lambda(rho, t)`` bounds ``|y(t) - x(t)|`` for two trajectories whose histories
differ by at most ``rho``::

    Lambda(t) = e^{Lt} rho + int_0^t e^{L(t-s)} |B| Lambda(s - r) ds,  Lambda(s <= 0) = rho

The disturbance tube bounds the extra spread caused by ``|w| <= w_max``.
"""
from __future__ import annotations

import math

import numpy as np

_SNAP = 1e-9


def build_L(A):
    A = np.atleast_2d(np.asarray(A, dtype=float))
    L = np.abs(A)
    np.fill_diagonal(L, np.diag(A))
    return L


def _taylor_order(norm, tol):
    term = 1.0
    k = 0
    while True:
        k += 1
        term *= norm / k
        # remainder after order k: sum_{j>k} norm^j/j! <= term*norm/(k+1) / (1 - norm/(k+2))
        rem = term * norm / (k + 1) / (1 - norm / (k + 2))
        if rem <= tol:
            return k


def matrix_exp(M, t=1.0):
    """``exp(M t)`` by scaling and squaring a Taylor polynomial with a bounded remainder."""
    X = np.atleast_2d(np.asarray(M, dtype=float)) * float(t)
    n = X.shape[0]
    norm = float(np.max(np.sum(np.abs(X), axis=1))) if n else 0.0
    if norm == 0.0:
        return np.eye(n)
    s = max(0, int(math.ceil(math.log2(norm / 0.5)))) if norm > 0.5 else 0
    Y = X / (2 ** s)
    ynorm = norm / (2 ** s)
    # each squaring can at most double the relative error, so budget for that
    order = _taylor_order(ynorm, 1e-17 / (2 ** s))
    out = np.eye(n)
    term = np.eye(n)
    for k in range(1, order + 1):
        term = term @ Y / k
        out = out + term
    for _ in range(s):
        out = out @ out
    return out


def exp_integral(L, h):
    """``int_0^h e^{L u} du`` via the exponential of an augmented block matrix."""
    L = np.atleast_2d(np.asarray(L, dtype=float))
    n = L.shape[0]
    big = np.zeros((2 * n, 2 * n))
    big[:n, :n] = L
    big[:n, n:] = np.eye(n)
    return matrix_exp(big, h)[:n, n:]


class GrowthBoundTable:
    """Sampled growth bound and disturbance tube on a grid of step ``h``.

    ``h = tau / substeps`` is halved further until it does not exceed the delay.
    """

    def __init__(self, L, B_abs, C_abs, delay, tau, w_max, horizon, substeps=16):
        self.L = np.atleast_2d(np.asarray(L, dtype=float))
        self.B_abs = np.atleast_2d(np.asarray(B_abs, dtype=float))
        self.C_abs = np.atleast_2d(np.asarray(C_abs, dtype=float))
        self.n = self.L.shape[0]
        self.delay = float(delay)
        self.tau = float(tau)
        self.w_max = float(w_max)
        while tau / substeps > self.delay:
            substeps *= 2
        self.substeps = int(substeps)
        self.h = self.tau / self.substeps
        k = horizon / self.h
        k = round(k) if abs(k - round(k)) < _SNAP * max(1.0, k) else math.ceil(k)
        self.steps = max(int(k), self.substeps)
        self.horizon = self.steps * self.h
        self.times = np.arange(self.steps + 1) * self.h
        self._E = matrix_exp(self.L, self.h)
        phi = exp_integral(self.L, self.h)
        # the integral of e^{Lu} is entrywise nonnegative for Metzler L; clamp roundoff
        self._PB = np.maximum(phi @ self.B_abs, 0.0)
        forcing = np.maximum(phi, 0.0) @ self.C_abs @ np.ones(self.C_abs.shape[1]) * self.w_max \
            if self.C_abs.size else np.zeros(self.n)
        self._lam_cache = {}
        self.tube = self._march(np.zeros(self.n), forcing)

    def _march(self, boundary, forcing, history=None):
        h, r = self.h, self.delay
        past = boundary if history is None else history
        V = np.empty((self.steps + 1, self.n))
        V[0] = boundary

        def delayed(k_time):
            s = k_time * h - r
            if s <= 0:
                return past
            u = s / h
            j = int(math.floor(u + _SNAP))
            if abs(u - j) < _SNAP:
                return V[j]
            return np.maximum(V[j], V[j + 1])

        for k in range(self.steps):
            d = np.maximum(delayed(k), delayed(k + 1))
            V[k + 1] = self._E @ V[k] + self._PB @ d + forcing
        return V

    def values(self, rho, history_rho=None):
        """Growth bound from an initial gap ``rho``; the gap over the past is ``history_rho`` if given."""
        rho = np.broadcast_to(np.asarray(rho, dtype=float), (self.n,))
        past = rho if history_rho is None else np.broadcast_to(np.asarray(history_rho, dtype=float), (self.n,))
        key = rho.tobytes() + past.tobytes()
        if key not in self._lam_cache:
            self._lam_cache[key] = self._march(rho.copy(), np.zeros(self.n), past.copy())
        return self._lam_cache[key]

    def _lookup(self, V, t):
        if t < 0 or t > self.horizon * (1 + _SNAP):
            raise ValueError(f"t={t} outside the table horizon [0, {self.horizon}]")
        u = t / self.h
        j = int(math.floor(u + _SNAP))
        if abs(u - j) < _SNAP or j >= self.steps:
            return V[min(j, self.steps)].copy()
        return np.maximum(V[j], V[j + 1])

    def growth_bound(self, rho, t):
        return self._lookup(self.values(rho), t)

    def disturbance_tube(self, t):
        return self._lookup(self.tube, t)


def growth_bound(table, rho, t):
    return table.growth_bound(rho, t)


def disturbance_tube(table, t):
    return table.disturbance_tube(t)


def growth_matrices(dyn, region, w_max):
    """Comparison matrices (L, |B|, |C|); Jacobian bounds over ``region`` for nonlinear terms."""
    if dyn.is_linear:
        return build_L(dyn.A), np.abs(dyn.B), np.abs(dyn.C)
    (jx_lo, jx_hi), (jd_lo, jd_hi) = dyn.jacobian_bounds(region, region, w_max)
    L = np.maximum(np.abs(jx_lo), np.abs(jx_hi))
    np.fill_diagonal(L, np.diag(jx_hi))
    Bd = np.maximum(np.abs(jd_lo), np.abs(jd_hi))
    return L, Bd, np.abs(dyn.C)


def build_table(dyn, region, w_max, tau, horizon, substeps=16):
    L, Bd, Cd = growth_matrices(dyn, region, w_max)
    return GrowthBoundTable(L, Bd, Cd, dyn.delay, tau, w_max, horizon, substeps)
