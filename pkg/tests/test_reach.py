import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from dhsynth.convergence import certify_mode
from dhsynth.geometry import Box, CellGrid
from dhsynth.growth import build_table
from dhsynth.model import DdeDynamics, Mode
from dhsynth.reach import ReachConfig, ReachEngine, d_invariant, safe_r, step_reach, verify_fixpoint
from dhsynth.simulate import mode_campaign, sim_step


def _lin(a, b=0.0, c=1.0, r=1.0):
    return DdeDynamics([[a]], [[b]], [[c]], r)


def test_zero_dynamics_reach_is_the_cell():
    dyn = _lin(0.0, 0.0, 0.0)
    cell = Box([1.0], [1.5])
    table = build_table(dyn, cell, 0.0, 0.1, 0.1)
    out = step_reach(cell, dyn, 0.1, 0.0, table)
    assert np.allclose(out.lo, cell.lo, atol=1e-9) and np.allclose(out.hi, cell.hi, atol=1e-9)


def test_decay_from_a_point_covers_closed_form():
    dyn = _lin(-1.0, 0.0, 1.0)
    cell = Box([1.0], [1.0])
    table = build_table(dyn, Box([0.0], [2.0]), 0.0, 1.0, 1.0)
    out = step_reach(cell, dyn, 1.0, 0.0, table)
    assert out.lo[0] <= math.exp(-1.0) and out.hi[0] >= 1.0
    assert out.lo[0] >= math.exp(-1.0) - 1e-6


def test_heating_cell_reach_contains_simulations(heating):
    q1 = heating.mode("q1")
    dyn = q1.dynamics
    cell = Box([49.9], [50.1])
    table = build_table(dyn, q1.safe, heating.w_max, 0.1, 0.1)
    out = step_reach(cell, dyn, 0.1, heating.w_max, table)
    h = sim_step([dyn.delay], tau=0.1)
    _, xs = mode_campaign(dyn, cell, 1000, 0.1, h / 4, seed=11, w_max=heating.w_max)
    assert xs.min() >= out.lo[0] and xs.max() <= out.hi[0]


@settings(max_examples=25, deadline=None)
@given(st.floats(-2.0, -0.1), st.floats(-0.5, 0.5), st.floats(-3, 3), st.floats(0.01, 0.5),
       st.floats(0.0, 1.0), st.integers(0, 2 ** 31 - 1))
def test_step_reach_is_sound(a, b, lo, width, w_max, seed):
    dyn = _lin(a, b, 1.0, 0.5)
    cell = Box([lo], [lo + width])
    table = build_table(dyn, Box([-10.0], [10.0]), w_max, 0.2, 0.2)
    out = step_reach(cell, dyn, 0.2, w_max, table)
    _, xs = mode_campaign(dyn, cell, 100, 0.2, 0.5 / 80, seed=seed, w_max=w_max)
    assert xs.min() >= out.lo[0] - 1e-9 and xs.max() <= out.hi[0] + 1e-9


def _engine(dyn, S, rho, tau, w_max, rho_th=None):
    table = build_table(dyn, S, w_max, tau, tau)
    return ReachEngine(dyn, table, w_max, S, CellGrid(S, rho), rho_th), table


def test_safe_r_interior_cell_is_its_reach():
    dyn = _lin(-1.0, 0.0, 0.5)
    S = Box([-2.0], [2.0])
    _, table = _engine(dyn, S, [0.05], 0.1, 1.0)
    cell = Box([0.5], [0.6])
    got = safe_r(cell, [0.05], 0.1, S, dyn, table, [0.05 / 8])
    ref = CellGrid(S, [0.05]).empty_like().add_box(step_reach(cell, dyn, 0.1, 1.0, table))
    assert got == ref


def test_safe_r_outside_is_empty():
    dyn = _lin(0.0, 0.0, 1.0)
    S = Box([0.0], [1.0])
    table = build_table(dyn, S, 5.0, 0.1, 0.1)
    got = safe_r(Box([0.9], [1.0]), [0.05], 0.1, S, dyn, table, [0.05 / 8])
    assert got.is_empty()


def test_safe_r_straddling_matches_recursion_oracle():
    dyn = _lin(0.5, 0.0, 1.0)
    S = Box([0.0], [1.0])
    rho, rho_th, tau, w = 0.1, 0.0125, 0.1, 0.05
    table = build_table(dyn, S, w, tau, tau)

    def oracle(cell, r):
        reach = step_reach(cell, dyn, tau, w, table)
        if S.contains_box(reach):
            return [reach]
        if not reach.intersects(S) or r / 2 < rho_th * (1 - 1e-12):
            return []
        mid = cell.lo[0] + r
        return oracle(Box(cell.lo, [mid]), r / 2) + oracle(Box([mid], cell.hi), r / 2)

    cell = Box([0.6], [0.8])
    expected = CellGrid(S, [rho]).empty_like()
    for b in oracle(cell, rho):
        expected = expected.add_box(b)
    got = safe_r(cell, [rho], tau, S, dyn, table, [rho_th])
    assert not got.is_empty()
    assert got == expected


def _decay_mode(c, xi, S):
    dyn = _lin(-1.0, 0.0, c, 0.1)
    return Mode("q", dyn, S, xi, S)


def test_invariant_inside_ball_is_immediate():
    S = Box([-2.0], [2.0])
    mode = _decay_mode(0.5, Box([-0.1], [0.1]), S)
    cert = certify_mode(mode, 1.0, 0.01)
    table = build_table(mode.dynamics, S, 1.0, 0.1, 0.1)
    cfg = ReachConfig([0.05], [0.05 / 8], 0.1, 0.01, cert.bound.T_star)
    res = d_invariant(mode.initial, mode.dynamics, cfg, S, cert.bound.r1, table)
    assert res.fixed_point_reached and res.iterations == 1
    assert res.ball_radius == pytest.approx(0.51)


def test_invariant_contains_simulated_states():
    S = Box([-2.0], [2.0])
    mode = _decay_mode(0.5, Box([0.9], [1.1]), S)
    cert = certify_mode(mode, 1.0, 0.01)
    table = build_table(mode.dynamics, S, 1.0, 0.1, 0.1)
    cfg = ReachConfig([0.05], [0.05 / 8], 0.1, 0.01, cert.bound.T_star)
    res = d_invariant(mode.initial, mode.dynamics, cfg, S, cert.bound.r1, table, keep_history=True)
    _, xs = mode_campaign(mode.dynamics, mode.initial, 1000, 10.0, 0.1 / 8, seed=5, w_max=1.0)
    assert np.all(res.contains_points(xs.reshape(-1, 1)))
    for a, b in zip(res.history, res.history[1:]):
        assert a.issubset(b)


def test_heating_invariants_are_closed(heating_synth):
    R = heating_synth.refined
    for q in R.base.modes:
        s = R.settings[q.name]
        eng = ReachEngine(q.dynamics, R.growth[q.name], R.base.w_max, q.safe_region(),
                          CellGrid(q.safe_region(), s.rho), s.rho_th)
        assert verify_fixpoint(R.invariant[q.name], eng)


def test_reach_growth_iterates_are_monotone(heating):
    q1 = heating.mode("q1")
    cert = certify_mode(q1, heating.w_max, 0.01)
    table = build_table(q1.dynamics, q1.safe, heating.w_max, 0.1, 0.1)
    cfg = ReachConfig([0.25], [0.25 / 8], 0.1, 0.01, cert.bound.T_star)
    res = d_invariant(q1.initial, q1.dynamics, cfg, q1.safe, cert.bound.r1, table, keep_history=True,
                      center=cert.center)
    assert len(res.history) > 2
    for a, b in zip(res.history, res.history[1:]):
        assert a.issubset(b)
