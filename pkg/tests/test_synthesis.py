import numpy as np
import pytest

from conftest import decay_dict, heating_dict
from dhsynth.errors import EmptyInvariant, SynthesisFailure
from dhsynth.geometry import Box, CellGrid
from dhsynth.model import DelayHybridAutomaton, Mode, model_from_dict
from dhsynth.reach import InvariantResult
from dhsynth.synthesis import RefinedAutomaton, _r2_check, check_refinement, synthesize


def _mutant(R, **kw):
    parts = dict(base=R.base, initial=R.initial, invariant=R.invariant, guard_star=R.guard_star,
                 fake_guard=R.fake_guard, windows=R.windows, certificates=R.certificates, growth=R.growth,
                 settings=R.settings)
    parts.update(kw)
    return RefinedAutomaton(**parts)


def test_initial_boxes_grow_monotonically(heating_synth, shifted_pair_synth):
    for res in (heating_synth, shifted_pair_synth):
        for a, b in zip(res.k_history, res.k_history[1:]):
            assert all(b[q].contains_box(a[q]) for q in a)


def test_invariants_grow_monotonically(heating_synth, shifted_pair_synth):
    for res in (heating_synth, shifted_pair_synth):
        for a, b in zip(res.i_history, res.i_history[1:]):
            for q in a:
                assert a[q].grid.issubset(b[q].grid)
                assert b[q].ball_radius >= a[q].ball_radius


def test_single_mode_without_edges_converges_at_once():
    res = synthesize(model_from_dict(decay_dict(w_max=0.1)))
    assert res.converged and res.iterations == 1
    assert res.refined.guard_star == {}


def test_heating_with_tight_safe_set_fails():
    H = model_from_dict(heating_dict())
    S = Box([50.0], [55.0])
    modes = [Mode(q.name, q.dynamics, q.invariant, q.initial, S, reach=q.reach) for q in H.modes]
    tight = DelayHybridAutomaton("tight", 1, H.w_max, modes, H.edges)
    with pytest.raises((SynthesisFailure, EmptyInvariant)):
        synthesize(tight)
    with pytest.raises(EmptyInvariant):
        synthesize(DelayHybridAutomaton("tight_q1", 1, H.w_max, modes[:1], ()))


def test_ball_crossing_the_safe_set_is_refused():
    d = heating_dict()
    d["w_max"] = 5.0
    with pytest.raises(EmptyInvariant, match="ball"):
        synthesize(model_from_dict(d))


def test_heating_refined_sets_stay_in_the_original(heating, heating_synth):
    R = heating_synth.refined
    assert _r2_check(heating, R).passed
    for e in heating.edges:
        g = R.guard_star[e.name]
        assert not g.is_empty()
        hull = g.hull()
        assert e.guard.contains_box(Box(hull.lo + 1e-9, hull.hi - 1e-9))


def test_heating_refinement_report(heating, heating_synth):
    rep = check_refinement(heating, heating_synth.refined, samples=200, seed=0, horizon=50.0)
    assert rep.passed, rep.to_json()


def test_shifted_pair_report(shifted_pair, shifted_pair_synth):
    rep = check_refinement(shifted_pair, shifted_pair_synth.refined, samples=200, seed=0, horizon=30.0)
    assert rep.passed, rep.to_json()


def test_widened_guard_is_caught(shifted_pair, shifted_pair_synth):
    R = shifted_pair_synth.refined
    wide = R.invariant["q1"].bounding_box().intersect(shifted_pair.edge("e1").guard)
    g = dict(R.guard_star)
    g["e1"] = g["e1"].empty_like().add_box(wide)
    rep = check_refinement(shifted_pair, _mutant(R, guard_star=g), samples=200, seed=0, horizon=30.0)
    assert not rep.c2.passed and rep.c2.counterexample is not None
    assert not rep.r1_safe.passed and "state" in rep.r1_safe.counterexample


def test_unrefined_invariant_under_large_disturbance_is_caught(heating_synth):
    d = heating_dict()
    d["w_max"] = 5.0
    H = model_from_dict(d)
    R = heating_synth.refined
    inv = {q.name: InvariantResult(CellGrid(q.safe, R.settings[q.name].rho).full_like(), 0.0, q.safe, True, 1, 0.0)
           for q in H.modes}
    g = {e.name: R.guard_star[e.name].empty_like().add_box(e.guard.intersect(H.mode(e.source).safe))
         for e in H.edges}
    none = {e: (np.empty((0, 1)), np.empty((0, 1))) for e in g}
    M = RefinedAutomaton(H, {q.name: q.initial for q in H.modes}, inv, g, g, none, {}, R.growth, R.settings)
    rep = check_refinement(H, M, samples=200, seed=0, horizon=60.0)
    assert not rep.r1_safe.passed
    assert rep.r1_safe.counterexample["state"][0] > 90.0 or rep.r1_safe.counterexample["state"][0] < 20.0


def test_report_serialises_every_check(heating, heating_synth):
    js = check_refinement(heating, heating_synth.refined, samples=20, seed=1, horizon=10.0).to_json()
    assert {"r1_safe", "r2_refinement", "r3_nonblocking", "c1", "c2"} <= set(js)
