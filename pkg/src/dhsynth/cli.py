"""Command-line entry point: ``dhsynth <subcommand> [options]``.

Exit codes: 0 success, 2 model or file error, 3 synthesis failure, 4 failed
refinement check or validation, 5 certification failure, 6 integration
error, 7 evaluation or geometry error.
"""
from __future__ import annotations

import argparse
import logging
import os
import sys

import numpy as np

from . import __version__
from .artifacts import (SCHEMA_VERSION, dumps, guards_csv, invariants_csv, load_refined,
                        synthesis_json, write_text)
from .backreach import back_reach
from .convergence import certify_mode
from .errors import (CertificationFailure, EmptyInvariant, EvaluationError, GeometryError,
                     IntegrationError, ModelError, SynthesisFailure)
from .geometry import CellGrid, dump_boxes_csv
from .growth import build_table
from .model import BUNDLED, bundled_model, load_model
from .reach import ReachConfig, ReachEngine, d_invariant
from .simulate import DisturbanceSignal, HistorySegment, default_horizon, simulate_hybrid, validate
from .synthesis import ModeSettings, _landing_guard, check_refinement, synthesize

EXIT_OK, EXIT_MODEL, EXIT_SYNTH, EXIT_VALIDATION, EXIT_CERT, EXIT_INTEGRATION, EXIT_EVAL = 0, 2, 3, 4, 5, 6, 7

log = logging.getLogger("dhsynth")


def _positive(text):
    try:
        v = float(text)
    except ValueError:
        raise argparse.ArgumentTypeError(f"not a number: {text!r}") from None
    if not v > 0:
        raise argparse.ArgumentTypeError(f"must be positive: {text!r}")
    return v


def _count(text):
    v = int(text)
    if v < 0:
        raise argparse.ArgumentTypeError("must be non-negative")
    return v


def _global_flags(parser, suppress):
    d = (lambda v: argparse.SUPPRESS) if suppress else (lambda v: v)
    parser.add_argument("--model", default=d("heating"),
                        help=f"model JSON file or bundled name ({', '.join(BUNDLED)})")
    parser.add_argument("--out", default=d("."), help="output directory")
    parser.add_argument("--seed", type=_count, default=d(0))
    parser.add_argument("--threads", type=int, default=d(1), help="worker threads for simulation campaigns")
    parser.add_argument("-v", "--verbose", action="store_true", default=d(False))


def _reach_flags(parser):
    parser.add_argument("--rho", type=_positive, help="grid cell radius (all modes)")
    parser.add_argument("--tau", type=_positive, help="reach time step")
    parser.add_argument("--eps", type=_positive, help="attractor ball margin")
    parser.add_argument("--rho-th", type=_positive, dest="rho_th", help="finest refinement radius")


def build_parser():
    p = argparse.ArgumentParser(prog="dhsynth", description="Safe switching-controller synthesis "
                                "for delay hybrid automata.")
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    _global_flags(p, suppress=False)
    sub = p.add_subparsers(dest="command", required=True)

    def cmd(name, help_):
        sp = sub.add_parser(name, help=help_)
        _global_flags(sp, suppress=True)
        return sp

    cmd("check-convergence", "print the per-mode convergence certificate")
    sp = cmd("invariant", "compute one mode invariant")
    sp.add_argument("--mode", required=True)
    _reach_flags(sp)
    sp = cmd("backreach", "compute the refined guard of one edge")
    sp.add_argument("--edge", required=True)
    _reach_flags(sp)
    sp = cmd("synthesize", "run the synthesis loop and write the refined automaton")
    _reach_flags(sp)
    sp.add_argument("--max-iters", type=int, default=16)
    sp = cmd("simulate", "simulate one execution of the refined automaton")
    sp.add_argument("--synth", help="synthesis JSON to load instead of synthesizing")
    sp.add_argument("--horizon", type=_positive, default=None)
    sp.add_argument("--trace-out", default=None, help="trace CSV path (default <out>/<name>.trace.csv)")
    sp = cmd("validate", "seeded validation campaign")
    sp.add_argument("--synth", help="synthesis JSON to load instead of synthesizing")
    sp.add_argument("--samples", type=_count, default=1000)
    sp.add_argument("--horizon", type=_positive, default=None)
    sp = cmd("pipeline", "certificate, synthesis, checks, validation and a sample trace")
    _reach_flags(sp)
    sp.add_argument("--samples", type=_count, default=1000)
    sp.add_argument("--horizon", type=_positive, default=None)
    sp.add_argument("--max-iters", type=int, default=16)
    return p


# -- helpers ------------------------------------------------------------------

def _load(spec):
    if os.path.exists(spec):
        try:
            return load_model(spec)
        except OSError as exc:
            raise ModelError(str(exc), spec) from None
    if spec in BUNDLED:
        return bundled_model(spec)
    raise ModelError("no such model file or bundled model", spec)


def _overrides(args, H):
    o = {k: getattr(args, k, None) for k in ("rho", "tau", "eps", "rho_th")}
    return {q.name: dict(o) for q in H.modes}


def _outdir(args):
    try:
        os.makedirs(args.out, exist_ok=True)
    except OSError as exc:
        raise ModelError(str(exc), args.out) from None
    return args.out


def _emit(args, filename, text, echo=False):
    path = write_text(_outdir(args), filename, text)
    log.info("wrote %s", path)
    if echo:
        sys.stdout.write(text)
    return path


def _cert_json(H, certs):
    return dumps({"schema_version": SCHEMA_VERSION, "model": H.name,
                  "modes": {q: c.to_json() for q, c in certs.items()}})


def _certify_all(H, settings):
    return {q.name: certify_mode(q, H.w_max, settings[q.name].eps) for q in H.modes}


def _single_invariant(H, q, s):
    cert = certify_mode(q, H.w_max, s.eps)
    safe = q.safe_region()
    horizon = max([s.tau] + [e.jump_delay for e in H.edges_from(q.name)])
    table = build_table(q.dynamics, safe, H.w_max, s.tau, horizon)
    engine = ReachEngine(q.dynamics, table, H.w_max, safe, CellGrid(safe, s.rho), s.rho_th)
    rc = ReachConfig(s.rho, s.rho_th, s.tau, s.eps, cert.bound.T_star)
    inv = d_invariant(q.initial, q.dynamics, rc, safe, cert.bound.r1, table, engine=engine, center=cert.center)
    return inv, table, engine


def _write_synthesis(args, H, result, status, message="", report=None):
    name = H.name
    inv_file = guard_file = None
    if result is not None:
        R = result.refined
        inv_file, guard_file = f"{name}.invariants.csv", f"{name}.guards.csv"
        _emit(args, inv_file, invariants_csv(H, R.invariant))
        _emit(args, guard_file, guards_csv(H, R.guard_star, R.fake_guard, R.windows))
    return _emit(args, f"{name}.synth.json",
                 synthesis_json(name, H, result, status, message, report, inv_file, guard_file))


def _run_synthesis(args, H, settings):
    try:
        return synthesize(H, settings, max_iters=getattr(args, "max_iters", 16), log=log.info)
    except SynthesisFailure as exc:
        _write_synthesis(args, H, exc.partial, "failed", str(exc))
        raise
    except EmptyInvariant as exc:
        _write_synthesis(args, H, None, "failed", str(exc))
        raise


def _hstar(args, H):
    if getattr(args, "synth", None):
        return load_refined(args.synth)
    return _run_synthesis(args, H, _settings(args, H)).refined


def _settings(args, H):
    ov = _overrides(args, H)
    try:
        return {q.name: ModeSettings.for_mode(q, ov[q.name]) for q in H.modes}
    except ValueError as exc:
        raise ModelError(str(exc)) from None


def _trace(hstar, seed, horizon):
    H = hstar.base
    q0 = H.modes[0]
    rng = np.random.default_rng([seed, 2])
    box = hstar.initial[q0.name]
    phi = HistorySegment.constant(box.sample(rng, 1)[0], max(q.dynamics.delay for q in H.modes))
    w = DisturbanceSignal("piecewise", H.w_max, q0.dynamics.m, 1, seed=int(rng.integers(2 ** 31)),
                          horizon=horizon)
    return simulate_hybrid(hstar, phi, q0.name, seed=seed, w=w, T=horizon)


# -- subcommands --------------------------------------------------------------

def cmd_check_convergence(args, H):
    settings = _settings(args, H)
    _emit(args, f"{H.name}.certificate.json", _cert_json(H, _certify_all(H, settings)), echo=True)
    return EXIT_OK


def cmd_invariant(args, H):
    q = H.mode(args.mode)
    s = _settings(args, H)[q.name]
    inv, _, _ = _single_invariant(H, q, s)
    rows = [(q.name, b) for b in inv.grid.boxes()]
    if inv.ball_part() is not None:
        rows.append((f"{q.name}:ball", inv.ball_part()))
    _emit(args, f"{H.name}.{q.name}.invariant.csv", dump_boxes_csv(rows, H.state_dim))
    bb = inv.bounding_box()
    summary = {"schema_version": SCHEMA_VERSION, "model": H.name, "mode": q.name,
               "iterations": inv.iterations, "fixed_point": inv.fixed_point_reached,
               "cells": inv.grid.count(), "ball_radius": inv.ball_radius, "ball_center": inv.ball_center,
               "bounding_box": None if bb is None else bb.to_json()}
    _emit(args, f"{H.name}.{q.name}.invariant.json", dumps(summary), echo=True)
    return EXIT_OK


def cmd_backreach(args, H):
    e = H.edge(args.edge)
    settings = _settings(args, H)
    src, dst = H.mode(e.source), H.mode(e.target)
    s = settings[src.name]
    inv, table, engine = _single_invariant(H, src, s)
    gt = _landing_guard(e, inv, dst.safe_region(), engine.master)
    br = back_reach(gt, e.jump_delay, inv, src.dynamics, s.rho, s.tau, H.w_max, table, s.rho_th,
                    guard=e.guard, reset=e.reset, target_box=dst.safe_region(), target_delay=dst.dynamics.delay)
    g = br.guard_star
    _emit(args, f"{H.name}.{e.name}.guard.csv", dump_boxes_csv([(e.name, b) for b in g.boxes()], H.state_dim))
    hull = g.hull()
    stats = {"schema_version": SCHEMA_VERSION, "model": H.name, "edge": e.name, "cells": g.count(),
             "landing_cells": gt.count(), "candidates_examined": br.candidates_examined, "refined": br.refined,
             "bounding_box": None if hull is None else hull.to_json()}
    _emit(args, f"{H.name}.{e.name}.guard.json", dumps(stats), echo=True)
    return EXIT_OK


def cmd_synthesize(args, H):
    result = _run_synthesis(args, H, _settings(args, H))
    path = _write_synthesis(args, H, result, "ok")
    print(path)
    return EXIT_OK


def cmd_simulate(args, H):
    hstar = _hstar(args, H)
    horizon = args.horizon or default_horizon(hstar)
    tr = _trace(hstar, args.seed, horizon)
    path = args.trace_out or os.path.join(_outdir(args), f"{H.name}.trace.csv")
    try:
        with open(path, "w", encoding="utf-8", newline="\n") as fh:
            fh.write(tr.to_csv())
    except OSError as exc:
        raise ModelError(str(exc), path) from None
    print(path)
    return EXIT_OK


def cmd_validate(args, H):
    hstar = _hstar(args, H)
    rep = validate(hstar, args.samples, args.seed, horizon=args.horizon, threads=args.threads)
    d = rep.to_json()
    d["schema_version"] = SCHEMA_VERSION
    d["model"] = H.name
    _emit(args, f"{H.name}.validation.json", dumps(d), echo=True)
    return EXIT_OK if rep.passed and not rep.no_evidence else EXIT_VALIDATION


def cmd_pipeline(args, H):
    settings = _settings(args, H)
    _emit(args, f"{H.name}.certificate.json", _cert_json(H, _certify_all(H, settings)))
    result = _run_synthesis(args, H, settings)
    hstar = result.refined
    horizon = args.horizon or default_horizon(hstar)
    log.info("refinement checks: %d samples, horizon %g", args.samples, horizon)
    report = check_refinement(H, hstar, args.samples, args.seed, horizon, threads=args.threads)
    result.report = report
    _write_synthesis(args, H, result, "ok", report=report)
    rep = validate(hstar, args.samples, args.seed, horizon=horizon, threads=args.threads,
                   campaign=report.campaign)
    d = rep.to_json()
    d["schema_version"] = SCHEMA_VERSION
    d["model"] = H.name
    _emit(args, f"{H.name}.validation.json", dumps(d))
    _emit(args, f"{H.name}.trace.csv", _trace(hstar, args.seed, horizon).to_csv())
    ok = report.passed and rep.passed and not rep.no_evidence
    print(f"{H.name}: synthesis converged in {result.iterations} iteration(s); "
          f"refinement checks {'passed' if report.passed else 'FAILED'}; "
          f"validation {'passed' if rep.passed else 'FAILED'}")
    return EXIT_OK if ok else EXIT_VALIDATION


COMMANDS = {"check-convergence": cmd_check_convergence, "invariant": cmd_invariant, "backreach": cmd_backreach,
            "synthesize": cmd_synthesize, "simulate": cmd_simulate, "validate": cmd_validate,
            "pipeline": cmd_pipeline}


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(name)s: %(message)s", stream=sys.stderr)
    try:
        H = _load(args.model)
        return COMMANDS[args.command](args, H)
    except ModelError as exc:
        code, msg = EXIT_MODEL, f"model error: {exc}"
    except (SynthesisFailure, EmptyInvariant) as exc:
        code, msg = EXIT_SYNTH, f"synthesis failed: {exc}"
    except CertificationFailure as exc:
        code, msg = EXIT_CERT, f"certification failed: {exc}"
    except IntegrationError as exc:
        code, msg = EXIT_INTEGRATION, f"integration error: {exc}"
    except (EvaluationError, GeometryError) as exc:
        code, msg = EXIT_EVAL, f"evaluation error: {exc}"
    print(f"dhsynth: {msg}", file=sys.stderr)
    return code


if __name__ == "__main__":
    sys.exit(main())
