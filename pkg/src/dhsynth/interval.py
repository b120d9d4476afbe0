"""Natural interval extension of sympy expression trees with outward rounding."""
from __future__ import annotations

import math

import sympy as sp

from .errors import EvaluationError

INF = math.inf


def _down(v):
    return math.nextafter(v, -INF) if math.isfinite(v) else v


def _up(v):
    return math.nextafter(v, INF) if math.isfinite(v) else v


def _out(lo, hi):
    return (_down(lo), _up(hi))


def _mul_num(a, b):
    # 0 * inf is taken as 0: an unbounded factor times an exact zero stays zero
    if a == 0 or b == 0:
        return 0.0
    return a * b


def iadd(a, b):
    lo, hi = a[0] + b[0], a[1] + b[1]
    # a floating-point sum that comes out as zero is exact
    return (lo if lo == 0 else _down(lo), hi if hi == 0 else _up(hi))


def imul(a, b):
    if a == (0.0, 0.0) or b == (0.0, 0.0):
        return (0.0, 0.0)
    prods = [_mul_num(x, y) for x in a for y in b]
    return _out(min(prods), max(prods))


def ineg(a):
    return (-a[1], -a[0])


def ipow_int(a, k):
    if k == 0:
        return (1.0, 1.0)
    if k < 0:
        if a[0] <= 0 <= a[1]:
            raise EvaluationError(f"negative power of an interval containing zero: {a}")
        p = ipow_int(a, -k)
        return _out(1.0 / p[1], 1.0 / p[0])
    lo, hi = a
    if k % 2 == 1:
        return _out(lo ** k, hi ** k)
    if lo >= 0:
        return _out(lo ** k, hi ** k)
    if hi <= 0:
        return _out(hi ** k, lo ** k)
    return (0.0, _up(max(lo ** k, hi ** k)))


def ipow_real(a, p):
    if a[0] < 0 or (a[0] == 0 and p < 0):
        raise EvaluationError(f"fractional power of an interval reaching nonpositive values: {a}")
    vals = [a[0] ** p, a[1] ** p]
    return _out(min(vals), max(vals))


def iexp(a):
    return _out(math.exp(a[0]) if a[0] > -INF else 0.0, math.exp(a[1]) if a[1] < 709 else INF)


def isin(a):
    return _trig(a, 0.0)


def icos(a):
    return _trig(a, math.pi / 2)


def _trig(a, shift):
    # sin(x + shift) on [lo, hi]
    lo, hi = a[0] + shift, a[1] + shift
    if not (math.isfinite(lo) and math.isfinite(hi)) or hi - lo >= 2 * math.pi:
        return (-1.0, 1.0)
    vals = [math.sin(lo), math.sin(hi)]
    k = math.ceil((lo - math.pi / 2) / (2 * math.pi))
    if math.pi / 2 + 2 * math.pi * k <= hi:
        vals.append(1.0)
    k = math.ceil((lo + math.pi / 2) / (2 * math.pi))
    if -math.pi / 2 + 2 * math.pi * k <= hi:
        vals.append(-1.0)
    lo_v, hi_v = _out(min(vals), max(vals))
    return (max(lo_v, -1.0), min(hi_v, 1.0))


def _const(v):
    v = float(v)
    return (v, v)


def ieval(expr, env):
    """Enclosure of ``expr`` with symbols ranging over ``env[name] = (lo, hi)``."""
    if expr.is_Number:
        if expr.is_Integer or expr.is_Float:
            return _const(expr)
        return _out(float(expr), float(expr))
    if expr.is_Symbol:
        try:
            return env[expr.name]
        except KeyError:
            raise EvaluationError(f"no range given for symbol {expr.name}") from None
    if not expr.free_symbols:
        v = float(expr)
        return _out(v, v)
    if expr.is_Add:
        acc = (0.0, 0.0)
        for arg in expr.args:
            acc = iadd(acc, ieval(arg, env))
        return acc
    if expr.is_Mul:
        acc = (1.0, 1.0)
        for arg in expr.args:
            acc = imul(acc, ieval(arg, env))
        return acc
    if expr.is_Pow:
        base, ex = expr.args
        b = ieval(base, env)
        if ex.is_Integer:
            return ipow_int(b, int(ex))
        if ex.is_Number:
            return ipow_real(b, float(ex))
        raise EvaluationError(f"non-constant exponent in {expr}")
    if isinstance(expr, sp.sin):
        return isin(ieval(expr.args[0], env))
    if isinstance(expr, sp.cos):
        return icos(ieval(expr.args[0], env))
    if isinstance(expr, sp.exp):
        return iexp(ieval(expr.args[0], env))
    raise EvaluationError(f"unsupported term {expr}")


def isup_abs(expr, env):
    lo, hi = ieval(expr, env)
    return max(abs(lo), abs(hi))
