"""Reading and writing of run artifacts (JSON summaries and CSV box dumps).

JSON is written with sorted keys and no timestamps, so identical runs give
identical bytes.  A refined automaton can be rebuilt from its synthesis JSON
and the two CSV files it names.
"""
from __future__ import annotations

import json
import math
import os

import numpy as np

from .convergence import certify_mode
from .errors import ModelError
from .geometry import Box, CellGrid, dump_boxes_csv, load_boxes_csv
from .growth import build_table
from .model import model_from_dict
from .reach import InvariantResult

SCHEMA_VERSION = 1


def dumps(obj):
    return json.dumps(_plain(obj), indent=2, sort_keys=True) + "\n"


def _plain(v):
    if isinstance(v, dict):
        return {str(k): _plain(x) for k, x in v.items()}
    if isinstance(v, (list, tuple)):
        return [_plain(x) for x in v]
    if isinstance(v, np.ndarray):
        return _plain(v.tolist())
    if isinstance(v, (np.floating, float)):
        v = float(v)
        if math.isinf(v):
            return "inf" if v > 0 else "-inf"
        return v
    if isinstance(v, (np.integer,)):
        return int(v)
    if isinstance(v, np.bool_):
        return bool(v)
    return v


def write_text(directory, filename, text):
    path = os.path.join(directory, filename)
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(text)
    return path


def box_from_json(d):
    return Box([float(x) for x in d["lo"]], [float(x) for x in d["hi"]])


def _grid_json(grid):
    return {"domain": grid.domain.to_json(), "rho": grid.cell_radius.tolist(), "shape": list(grid.shape)}


def _grid_from(d, boxes):
    grid = CellGrid(box_from_json(d["domain"]), d["rho"])
    mask = np.zeros(grid.shape, dtype=bool)
    for b in boxes:
        idx = grid.index_of((b.lo + b.hi) / 2)
        if not grid.in_range(idx[None, :])[0]:
            raise ModelError("cell outside its grid", "csv")
        mask[tuple(idx)] = True
    return grid.with_mask(mask)


# -- CSV dumps ----------------------------------------------------------------

def invariants_csv(H, invariants):
    rows = []
    for q in H.modes:
        inv = invariants[q.name]
        rows += [(q.name, b) for b in inv.grid.boxes()]
        bp = inv.ball_part()
        if bp is not None:
            rows.append((f"{q.name}:ball", bp))
    return dump_boxes_csv(rows, H.state_dim)


def guards_csv(H, guard_star, fake_guard, windows):
    rows = []
    for e in H.edges:
        rows += [(e.name, b) for b in guard_star[e.name].boxes()]
        rows += [(f"{e.name}:landing", b) for b in fake_guard[e.name].boxes()]
        wl, wh = windows[e.name]
        rows += [(f"{e.name}:window", Box(lo, hi)) for lo, hi in zip(wl, wh)]
    return dump_boxes_csv(rows, H.state_dim)


# -- synthesis JSON -----------------------------------------------------------

def synthesis_json(name, H, result, status, message="", report=None,
                   invariants_file=None, guards_file=None):
    d = {"schema_version": SCHEMA_VERSION, "status": status, "model_name": name, "model": H.to_json()}
    if message:
        d["message"] = message
    if result is not None:
        R = result.refined
        d["iterations"] = result.iterations
        d["converged"] = result.converged
        d["settings"] = {q: {"rho": s.rho, "tau": s.tau, "eps": s.eps, "rho_th": s.rho_th}
                         for q, s in R.settings.items()}
        modes = {}
        for q in H.modes:
            inv = R.invariant[q.name]
            k_box = result.k_history[-1][q.name]
            bb = inv.bounding_box()
            modes[q.name] = {
                "initial_closure": k_box.to_json(),
                "grid": _grid_json(inv.grid),
                "cells": inv.grid.count(),
                "ball_radius": inv.ball_radius,
                "ball_center": inv.ball_center,
                "clip": inv.clip.to_json(),
                "fixed_point": inv.fixed_point_reached,
                "bounding_box": None if bb is None else bb.to_json(),
            }
        d["modes"] = modes
        edges = {}
        for e in H.edges:
            g = R.guard_star[e.name]
            hull = g.hull()
            edges[e.name] = {"grid": _grid_json(g), "landing_grid": _grid_json(R.fake_guard[e.name]),
                             "cells": g.count(), "landing_cells": R.fake_guard[e.name].count(),
                             "windows": len(R.windows[e.name][0]),
                             "bounding_box": None if hull is None else hull.to_json()}
        d["edges"] = edges
        d["files"] = {"invariants": invariants_file, "guards": guards_file}
    if report is not None:
        d["report"] = report.to_json()
    return dumps(d)


def load_refined(path):
    """Rebuild a RefinedAutomaton from a synthesis JSON file and its CSV dumps."""
    from .synthesis import ModeSettings, RefinedAutomaton

    directory = os.path.dirname(os.path.abspath(path))
    with open(path, encoding="utf-8") as fh:
        d = json.load(fh)
    if d.get("schema_version") != SCHEMA_VERSION:
        raise ModelError(f"unsupported schema_version {d.get('schema_version')!r}", path)
    if d.get("status") != "ok":
        raise ModelError("synthesis artifact does not hold a finished controller", path)
    H = model_from_dict(d["model"])
    with open(os.path.join(directory, d["files"]["invariants"]), encoding="utf-8") as fh:
        inv_rows = load_boxes_csv(fh.read())
    with open(os.path.join(directory, d["files"]["guards"]), encoding="utf-8") as fh:
        guard_rows = load_boxes_csv(fh.read())
    settings, invariants, certs, growth, initial = {}, {}, {}, {}, {}
    for q in H.modes:
        s = d["settings"][q.name]
        settings[q.name] = ModeSettings(np.asarray(s["rho"], float), float(s["tau"]), float(s["eps"]),
                                        np.asarray(s["rho_th"], float))
        m = d["modes"][q.name]
        grid = _grid_from(m["grid"], [b for lab, b in inv_rows if lab == q.name])
        invariants[q.name] = InvariantResult(grid=grid, ball_radius=float(m["ball_radius"]),
                                             clip=box_from_json(m["clip"]),
                                             fixed_point_reached=bool(m["fixed_point"]), iterations=0,
                                             elapsed_model_time=0.0, ball_center=np.asarray(m["ball_center"]))
        k_box = box_from_json(m["initial_closure"])
        certs[q.name] = certify_mode(q, H.w_max, settings[q.name].eps, initial=k_box)
        horizon = max([settings[q.name].tau] + [e.jump_delay for e in H.edges_from(q.name)])
        growth[q.name] = build_table(q.dynamics, q.safe_region(), H.w_max, settings[q.name].tau, horizon)
        initial[q.name] = q.initial.intersect(q.safe_region())
    gstar, gtilde, windows = {}, {}, {}
    for e in H.edges:
        ed = d["edges"][e.name]
        gstar[e.name] = _grid_from(ed["grid"], [b for lab, b in guard_rows if lab == e.name])
        gtilde[e.name] = _grid_from(ed["landing_grid"], [b for lab, b in guard_rows if lab == f"{e.name}:landing"])
        wins = [b for lab, b in guard_rows if lab == f"{e.name}:window"]
        n = H.state_dim
        windows[e.name] = (np.array([b.lo for b in wins]).reshape(-1, n), np.array([b.hi for b in wins]).reshape(-1, n))
    return RefinedAutomaton(H, initial, invariants, gstar, gtilde, windows, certs, growth, settings)
