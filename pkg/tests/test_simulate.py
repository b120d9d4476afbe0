import dataclasses
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from dhsynth.errors import IntegrationError
from dhsynth.geometry import Box
from dhsynth.model import DdeDynamics, DelayHybridAutomaton
from dhsynth.simulate import (DisturbanceSignal, HistorySegment, ValidationReport, run_campaigns, sim_step,
                              simulate_hybrid, simulate_mode, validate)
from dhsynth.synthesis import RefinedAutomaton


def _dyn(a, b, r=1.0):
    return DdeDynamics([[a]], [[b]], [[1.0]], r)


def test_decay_matches_exponential():
    tr = simulate_mode(_dyn(-1.0, 0.0), HistorySegment.constant([1.0], 1.0), None, 1.0)
    assert tr.states[-1, 0] == pytest.approx(math.exp(-1.0), abs=1e-6)


def test_pure_delay_by_steps():
    # x' = -x(t-1), x = 1 on [-1, 0]: x(t) = 1 - t on [0, 1], then x(2) = -1/2
    tr = simulate_mode(_dyn(0.0, -1.0), HistorySegment.constant([1.0], 1.0), None, 2.0)
    t, x = tr.times, tr.states[:, 0]
    assert x[np.argmin(np.abs(t - 1.0))] == pytest.approx(0.0, abs=1e-9)
    assert x[-1] == pytest.approx(-0.5, abs=1e-9)


def test_zero_dynamics_stay_constant():
    dyn = DdeDynamics([[0.0]], [[0.0]], [[0.0]], 1.0)
    tr = simulate_mode(dyn, HistorySegment.constant([3.0], 1.0), None, 5.0)
    assert np.all(tr.states == 3.0)


def test_fourth_order_convergence():
    dyn = _dyn(-1.0, 0.5)

    def end(h):
        return simulate_mode(dyn, HistorySegment.constant([1.0], 1.0), None, 3.0, tau_sim=h, tol=None).states[-1, 0]

    a, b, c = end(0.25), end(0.125), end(0.0625)
    assert 12 < (a - b) / (b - c) < 20


def test_step_must_divide_delay():
    with pytest.raises(IntegrationError):
        simulate_mode(_dyn(-1.0, 0.0), HistorySegment.constant([1.0], 1.0), None, 1.0, tau_sim=0.3)


@pytest.mark.parametrize("delays,tau,jumps", [([1.0], None, ()), ([0.1, 0.15], 0.1, (0.5,)),
                                              ([1.0, 1.0], 0.1, (2.0, 2.0)), ([0.3], None, (0.7,))])
def test_sim_step_divides_every_delay(delays, tau, jumps):
    h = sim_step(delays, tau, jumps)
    for v in list(delays) + list(jumps):
        assert abs(v / h - round(v / h)) < 1e-6
    assert h <= min(delays) / 8 + 1e-12


@settings(max_examples=40, deadline=None)
@given(st.sampled_from(["zero", "constant", "piecewise", "sinusoid"]), st.floats(0.0, 3.0),
       st.integers(0, 2 ** 31 - 1), st.floats(0.0, 50.0))
def test_disturbances_respect_bound(kind, w_max, seed, t):
    w = DisturbanceSignal(kind, w_max, 2, count=7, seed=seed, horizon=50.0)
    assert np.all(np.abs(w(t)) <= w_max * (1 + 1e-12))


def test_campaigns_do_not_depend_on_thread_count(heating_synth):
    R = heating_synth.refined
    a = run_campaigns(R, 300, 7, horizon=20.0, threads=1)
    b = run_campaigns(R, 300, 7, horizon=20.0, threads=4)
    assert {k: v.to_json() for k, v in a.items()} == {k: v.to_json() for k, v in b.items()}


def test_heating_execution_alternates_and_stays_safe(heating_synth):
    R = heating_synth.refined
    w = DisturbanceSignal("piecewise", R.base.w_max, 1, seed=1, horizon=100.0)
    tr = simulate_hybrid(R, HistorySegment.constant(R.initial["q1"].lo + 1, 1.0), "q1", seed=1, w=w, T=100.0)
    names = [j.edge for j in tr.jumps]
    assert len(names) >= 2
    assert all(a != b for a, b in zip(names, names[1:]))
    assert tr.states.min() >= 20.0 and tr.states.max() <= 90.0
    assert not tr.blocked


def test_no_edges_matches_single_mode(heating_synth):
    R = heating_synth.refined
    H = R.base
    base = DelayHybridAutomaton(H.name, H.state_dim, H.w_max, H.modes, ())
    lone = RefinedAutomaton(base, R.initial, R.invariant, {}, {}, {}, R.certificates, R.growth, R.settings)
    phi = HistorySegment.constant([60.0], 1.0)
    hyb = simulate_hybrid(lone, phi, "q1", T=10.0)
    single = simulate_mode(base.mode("q1").dynamics, phi, None, 10.0, tau_sim=lone.sim_step, tol=None)
    assert np.allclose(hyb.states, single.states, rtol=0, atol=1e-12)


def test_empty_refined_guard_with_invariant_exit_blocks(heating_synth):
    R = heating_synth.refined
    empty = {e: g.empty_like() for e, g in R.guard_star.items()}
    inv = dict(R.invariant)
    # a narrow band around 60 with no ball: the flow toward 80 must leave it
    g = inv["q1"].grid
    inv["q1"] = dataclasses.replace(inv["q1"], grid=g.empty_like().add_box(Box([59.0], [61.0])), ball_radius=0.0)
    hstar = RefinedAutomaton(R.base, R.initial, inv, empty, R.fake_guard, R.windows, R.certificates, R.growth,
                             R.settings)
    tr = simulate_hybrid(hstar, HistorySegment.constant([60.0], 1.0), "q1", T=50.0)
    assert tr.blocked and not tr.jumps


def test_empty_guard_inside_invariant_is_not_blocked(heating_synth):
    R = heating_synth.refined
    empty = {e: g.empty_like() for e, g in R.guard_star.items()}
    hstar = RefinedAutomaton(R.base, R.initial, R.invariant, empty, R.fake_guard, R.windows, R.certificates,
                             R.growth, R.settings)
    tr = simulate_hybrid(hstar, HistorySegment.constant([60.0], 1.0), "q1", T=50.0)
    assert not tr.blocked and not tr.jumps


def test_no_samples_means_no_evidence(heating_synth):
    rep = validate(heating_synth.refined, n_samples=0)
    assert isinstance(rep, ValidationReport) and rep.no_evidence and rep.samples == 0


def test_history_segment_interpolates_cubics():
    f = lambda s: np.array([s ** 3 - 2 * s])  # noqa: E731
    df = lambda s: np.array([3 * s ** 2 - 2])  # noqa: E731
    seg = HistorySegment.from_function(f, 1.0, 0.25, df)
    s = np.linspace(-1, 0, 17)
    val, der = seg(s)
    assert np.allclose(val[:, 0], s ** 3 - 2 * s, atol=1e-12)
    assert np.allclose(der[:, 0], 3 * s ** 2 - 2, atol=1e-12)


def test_trace_csv_header(heating_synth):
    tr = simulate_hybrid(heating_synth.refined, HistorySegment.constant([55.0], 1.0), "q1", T=1.0)
    lines = tr.to_csv().splitlines()
    assert lines[0] == "t,mode,x_1" and len(lines) == len(tr.times) + 1

