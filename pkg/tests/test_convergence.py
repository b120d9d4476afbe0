import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.optimize import brentq

from dhsynth.convergence import (_remainder_sup, certify_mode, convergence_constants, equilibrium, find_zeta,
                                 g_max_fixed_point, horizon, is_hurwitz_metzler, is_metzler, linearize,
                                 remainder_terms)
from dhsynth.errors import CertificationFailure
from dhsynth.model import DdeDynamics, parse_term


def test_metzler_examples():
    assert is_metzler(np.diag([-12.58, -18.05]))
    assert not is_metzler(np.array([[-1, -0.1], [0, -1]]))
    assert is_metzler(np.zeros((2, 2)))


def test_hurwitz_metzler_examples():
    assert is_hurwitz_metzler(np.array([[-0.1]]))
    assert not is_hurwitz_metzler(np.array([[0.0]]))
    assert is_hurwitz_metzler(np.diag([-0.8, -1.4]))


def test_zeta_examples():
    assert np.allclose(find_zeta(np.diag([-12.58, -18.05])), [1, 1])
    assert np.allclose(find_zeta(np.array([[-0.1]])), [1])
    assert np.allclose(find_zeta(np.array([[-2.0, 1.0], [0.0, -1.0]])), [1, 1])


@settings(max_examples=60, deadline=None)
@given(st.integers(0, 10 ** 6))
def test_zeta_is_a_positive_certificate(seed):
    rng = np.random.default_rng(seed)
    n = int(rng.integers(1, 4))
    off = rng.uniform(0, 1, (n, n))
    np.fill_diagonal(off, 0)
    M = off - np.diag(off.sum(axis=1) + rng.uniform(0.1, 2, n))
    z = find_zeta(M)
    assert np.all(z > 0) and np.max(z) == pytest.approx(1.0)
    assert np.all(M @ z < 0)


def test_lowpass_rate_constants(lowpass):
    expected = {"q1": 12.58, "q2": 24.66}
    for q in lowpass.modes:
        dyn = q.dynamics
        M = dyn.A + dyn.B
        cert = convergence_constants(M, dyn.B, dyn.delay, find_zeta(M), dyn.C)
        assert np.allclose(cert.zeta, [1, 1])
        assert abs(cert.beta - 1.0) <= 1e-9
        assert abs(cert.eta - expected[q.name]) <= 1e-9
        assert abs(cert.delta - cert.eta) <= 1e-9


def test_gamma_without_delay_coupling_equals_eta():
    M = np.diag([-2.0, -3.0])
    cert = convergence_constants(M, np.zeros((2, 2)), 0.5, find_zeta(M), np.eye(2))
    assert cert.gamma == pytest.approx(cert.eta, rel=1e-9)


@pytest.mark.parametrize("model", ["lowpass", "heating"])
def test_gamma_roots_match_independent_bracketing(model, request):
    H = request.getfixturevalue(model)
    for q in H.modes:
        dyn = q.dynamics
        M = dyn.A + dyn.B
        cert = convergence_constants(M, dyn.B, dyn.delay, find_zeta(M), dyn.C)
        assert np.max(cert.residuals) <= 1e-9
        z, Babs, r, eta = cert.zeta, np.abs(dyn.B), dyn.delay, cert.eta
        for i in range(len(z)):
            def H_i(g, i=i):
                return g * z[i] + float(np.sum(z * Babs[i])) * math.expm1(g * r) - eta
            root = brentq(H_i, 1e-12, eta / z[i] + 1e-9, xtol=1e-14)
            assert cert.gammas[i] == pytest.approx(root, rel=1e-9)


def _cert_1d(m, b, r):
    M = np.array([[m + b]])
    return convergence_constants(M, np.array([[b]]), r, find_zeta(M), np.eye(1))


def test_horizon_nonpositive_transient():
    cert = _cert_1d(-1.0, 0.1, 1.0)
    hb = horizon(cert, 0.01, 1.0, 0.1)
    assert hb.r2 <= 0 and hb.T_star == 0.0


def test_horizon_eps_equals_r2():
    cert = _cert_1d(-1.0, 0.1, 1.0)
    r2 = horizon(cert, 5.0, 0.0, 1.0).r2
    assert horizon(cert, 5.0, 0.0, r2).T_star == 0.0


def test_horizon_formulas():
    cert = _cert_1d(-1.0, 0.1, 1.0)
    hb = horizon(cert, 5.0, 0.5, 0.01)
    assert hb.r1 == pytest.approx(0.5 / cert.eta)
    assert hb.r2 == pytest.approx(cert.beta * (5.0 - 0.5 / cert.delta))
    assert hb.T_star == pytest.approx(math.log(hb.r2 / 0.01) / cert.gamma)


def test_predator_linearisation(predator):
    A, B = linearize(predator.mode("q1").dynamics)
    assert A[0, 0] == pytest.approx(-1.0) and B[0, 0] == pytest.approx(0.2)
    assert A[1, 1] == pytest.approx(-1.5) and B[1, 1] == pytest.approx(0.1)


def test_linearise_linear_dynamics_is_identity():
    dyn = DdeDynamics([[-1.0, 0.5], [0.0, -2.0]], [[0.1, 0], [0, 0.2]], np.eye(2), 1.0)
    A, B = linearize(dyn)
    assert np.array_equal(A, dyn.A) and np.array_equal(B, dyn.B)


def test_linearise_sine_matches_finite_difference():
    dyn = DdeDynamics([[0.0]], [[0.0]], [[1.0]], 1.0, [parse_term("sin(x1)", 1, 1)])
    A, _ = linearize(dyn)
    h = 1e-6
    fd = (dyn.rhs(np.array([h]), np.zeros(1), np.zeros(1))[0]
          - dyn.rhs(np.array([-h]), np.zeros(1), np.zeros(1))[0]) / (2 * h)
    assert A[0, 0] == pytest.approx(1.0)
    assert fd == pytest.approx(A[0, 0], abs=1e-8)


def test_predator_rate_constants(predator):
    reference = {"q1": (0.8, 0.008, 0.078), "q2": (1.85, 0.0046, 0.0746)}
    for q in predator.modes:
        eta_ref, g_ref, G_ref = reference[q.name]
        A, B = linearize(q.dynamics)
        M = A + B
        cert = convergence_constants(M, B, q.dynamics.delay, find_zeta(M), q.dynamics.C)
        assert abs(cert.eta - eta_ref) <= 1e-9
        assert abs(cert.delta - eta_ref) <= 1e-9
        # the aggregate forcing bound reproduces the reference G from the reference g_max
        assert abs(cert.c_max * predator.w_max + g_ref - G_ref) <= 1e-6
        iota = q.initial.norm()
        nl = g_max_fixed_point(q.dynamics, cert, predator.w_max, iota)
        assert nl.G == pytest.approx(cert.c_max * predator.w_max + nl.g_max)
        # own search: a genuine fixed point of H2 within twice the published value
        G = nl.G
        radius = G / cert.eta + cert.beta * max(iota - G / cert.delta, 0.0)
        h2 = _remainder_sup(remainder_terms(q.dynamics), q.dynamics, radius)
        assert h2 <= nl.g_max * (1 + 1e-9)
        assert nl.g_max <= 2 * g_ref


def test_linear_mode_has_no_remainder(lowpass):
    q = lowpass.mode("q1")
    A, B = linearize(q.dynamics)
    cert = convergence_constants(A + B, B, q.dynamics.delay, find_zeta(A + B), q.dynamics.C)
    nl = g_max_fixed_point(q.dynamics, cert, lowpass.w_max, 1.0)
    assert nl.g_max == 0.0 and nl.G == pytest.approx(cert.c_max * lowpass.w_max)


def test_affine_mode_is_centred_on_rest_point(heating):
    q1 = heating.mode("q1")
    assert equilibrium(q1.dynamics) == pytest.approx([80.0])
    cert = certify_mode(q1, heating.w_max, 0.01)
    assert cert.center == pytest.approx([80.0])
    assert cert.bound.r1 == pytest.approx(heating.w_max / 0.1)


def test_non_hurwitz_mode_is_refused(heating):
    from dhsynth.model import Mode
    q = heating.mode("q1")
    dyn = DdeDynamics([[0.1]], [[0.0]], [[1.0]], 1.0)
    bad = Mode("bad", dyn, q.invariant, q.initial, q.safe)
    with pytest.raises(CertificationFailure):
        certify_mode(bad, 0.5, 0.01)
