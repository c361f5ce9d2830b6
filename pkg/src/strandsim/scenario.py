"""Scenario configuration: parsing, validation, canonical serialization.

Scenarios are YAML with nested sections (the canonical schema is documented
in the README). Parsing validates everything and reports *all* errors, each
with its field path. Serialization is canonical (sorted keys), so
parse -> serialize -> parse is a fixed point and the config hash is stable.
All quantities are SI.
"""

from __future__ import annotations

import hashlib
import math
from dataclasses import dataclass, field

import numpy as np
import yaml

from . import geometry as geo
from .engine import EngineConfig, Molecule, Simulation
from .line_dynamics import CurveTransform, RoadBlock
from .model import (Bimolecular1D, Bimolecular3D, BindToCurve, OperatorSite,
                    ReactionNetwork, Species, TransportSpec, UnbindFromCurve,
                    Unimolecular)
from .propagators import GridParams


class ScenarioError(ValueError):
    def __init__(self, errors):
        self.errors = list(errors)
        super().__init__("invalid scenario:\n  " + "\n  ".join(self.errors))


@dataclass
class Scenario:
    name: str
    seed: int
    t_final: float
    boundary: dict
    engine: EngineConfig
    species: dict
    reactions: list
    curves: list
    initial: list
    snapshot_every: int = 1
    record_positions: bool = False
    stop_on_species: str | None = None

    def network(self):
        return ReactionNetwork(self.reactions)


_BOUNDARY_KEYS = {
    "sphere": {"kind", "radius", "subdivisions"},
    "cylinder": {"kind", "radius", "height", "n_around", "n_axial"},
    "mesh_file": {"kind", "file"},
}
_CURVE_KEYS = {
    "line": {"kind", "p", "q", "segments"},
    "spiral": {"kind", "offset", "r_c", "pitch", "turns", "segments", "phase"},
    "points": {"kind", "points"},
    "random_lines": {"kind", "count", "radius"},
}
_CURVE_COMMON = {"reaction_radius", "transform", "road_blocks", "operator_sites"}
_REACTION_KEYS = {
    "bind": {"kind", "reactant", "product", "k_r"},
    "unbind": {"kind", "reactant", "product", "k_d"},
    "bi3d": {"kind", "a", "b", "product", "k_r"},
    "bi1d": {"kind", "a", "b", "product", "k_r"},
    "uni": {"kind", "reactant", "products", "rate"},
}


def _check_keys(d, allowed, where, errors):
    for k in d:
        if k not in allowed:
            errors.append(f"{where}: unknown key {k!r}")


def _vec3(v, where, errors):
    try:
        a = np.asarray(v, dtype=float)
        if a.shape != (3,):
            raise ValueError
        return a
    except (TypeError, ValueError):
        errors.append(f"{where}: expected a 3-vector")
        return np.zeros(3)


def parse_scenario(text):
    """Parse and validate; raises ScenarioError listing every problem."""
    try:
        raw = yaml.safe_load(text)
    except yaml.YAMLError as exc:
        raise ScenarioError([f"not valid YAML: {exc}"]) from exc
    if not isinstance(raw, dict):
        raise ScenarioError(["top level must be a mapping"])
    errors = []
    top_allowed = {"name", "seed", "t_final", "boundary", "engine", "species",
                   "reactions", "curves", "initial", "outputs",
                   "stop_on_species"}
    _check_keys(raw, top_allowed, "top level", errors)

    name = str(raw.get("name", "scenario"))
    seed = int(raw.get("seed", 0))
    t_final = float(raw.get("t_final", 0.0))
    if t_final <= 0.0:
        errors.append("t_final: must be > 0")

    boundary = dict(raw.get("boundary") or {})
    kind = boundary.get("kind")
    if kind not in _BOUNDARY_KEYS:
        errors.append(f"boundary.kind: expected one of {sorted(_BOUNDARY_KEYS)}, "
                      f"got {kind!r}")
    else:
        _check_keys(boundary, _BOUNDARY_KEYS[kind], "boundary", errors)
        if kind in ("sphere", "cylinder") and float(boundary.get("radius", 0)) <= 0:
            errors.append("boundary.radius: must be > 0")
        if kind == "cylinder" and float(boundary.get("height", 0)) <= 0:
            errors.append("boundary.height: must be > 0")

    eng_raw = dict(raw.get("engine") or {})
    grid_raw = dict(eng_raw.pop("grid", {}) or {})
    _check_keys(grid_raw, {"n_cells", "n_substeps", "r_max_factor", "h0_frac",
                           "rannacher_steps"}, "engine.grid", errors)
    eng_allowed = {"K", "dt_min", "dt_split", "pair_distance_factor",
                   "r0_bucketing", "dt_on_curve"}
    _check_keys(eng_raw, eng_allowed, "engine", errors)
    try:
        grid = GridParams(**grid_raw)
        grid.validate()
    except (TypeError, ValueError) as exc:
        errors.append(f"engine.grid: {exc}")
        grid = GridParams()
    engine = EngineConfig(seed=seed, grid=grid,
                          **{k: v for k, v in eng_raw.items()})
    engine.validate(errors)

    species = {}
    for i, s in enumerate(raw.get("species") or []):
        where = f"species[{i}]"
        s = dict(s)
        _check_keys(s, {"name", "D_free", "D_bound", "radius", "transport"},
                    where, errors)
        if "name" not in s:
            errors.append(f"{where}: missing name")
            continue
        tr = None
        if s.get("transport") is not None:
            t = dict(s["transport"])
            _check_keys(t, {"target", "step", "coefficient", "divisor"},
                        f"{where}.transport", errors)
            tr = TransportSpec(target=_vec3(t.get("target", [0, 0, 0]),
                                            f"{where}.transport.target", errors),
                               step=None if t.get("step") is None else float(t["step"]),
                               coefficient=None if t.get("coefficient") is None
                               else float(t["coefficient"]),
                               divisor=float(t.get("divisor", 40.0)))
        sp = Species(name=str(s["name"]),
                     D_free=float(s.get("D_free", 0.0)),
                     D_bound=float(s.get("D_bound", 0.0)),
                     radius=float(s.get("radius", 1e-9)),
                     transport=tr)
        sp.validate(errors, where)
        if sp.name in species:
            errors.append(f"{where}: duplicate species {sp.name!r}")
        species[sp.name] = sp

    reactions = []
    for i, r in enumerate(raw.get("reactions") or []):
        where = f"reactions[{i}]"
        r = dict(r)
        kind = r.get("kind")
        if kind not in _REACTION_KEYS:
            errors.append(f"{where}.kind: expected one of "
                          f"{sorted(_REACTION_KEYS)}, got {kind!r}")
            continue
        _check_keys(r, _REACTION_KEYS[kind], where, errors)
        try:
            if kind == "bind":
                reactions.append(BindToCurve(str(r["reactant"]), str(r["product"]),
                                             float(r["k_r"])))
            elif kind == "unbind":
                reactions.append(UnbindFromCurve(str(r["reactant"]),
                                                 str(r["product"]),
                                                 float(r["k_d"])))
            elif kind == "bi3d":
                reactions.append(Bimolecular3D(str(r["a"]), str(r["b"]),
                                               str(r["product"]), float(r["k_r"])))
            elif kind == "bi1d":
                reactions.append(Bimolecular1D(str(r["a"]), str(r["b"]),
                                               str(r["product"]), float(r["k_r"])))
            else:
                prods = tuple(str(p) for p in r["products"])
                if len(prods) not in (1, 2):
                    errors.append(f"{where}.products: need 1 or 2 products")
                reactions.append(Unimolecular(str(r["reactant"]), prods,
                                              float(r["rate"])))
        except KeyError as exc:
            errors.append(f"{where}: missing key {exc.args[0]!r}")

    curves = []
    for i, c in enumerate(raw.get("curves") or []):
        where = f"curves[{i}]"
        c = dict(c)
        kind = c.get("kind")
        if kind not in _CURVE_KEYS:
            errors.append(f"{where}.kind: expected one of {sorted(_CURVE_KEYS)}, "
                          f"got {kind!r}")
            continue
        _check_keys(c, _CURVE_KEYS[kind] | _CURVE_COMMON, where, errors)
        if float(c.get("reaction_radius", 0.0)) <= 0.0:
            errors.append(f"{where}.reaction_radius: must be > 0")
        tr = c.get("transform")
        if tr is not None:
            tr = dict(tr)
            _check_keys(tr, {"rotate", "grow", "D_l", "l_min", "l_max"},
                        f"{where}.transform", errors)
            transform = CurveTransform(rotate=bool(tr.get("rotate", False)),
                                       grow=bool(tr.get("grow", False)),
                                       D_l=float(tr.get("D_l", 0.0)),
                                       l_min=float(tr.get("l_min", 0.0)),
                                       l_max=float(tr.get("l_max", math.inf)))
            transform.validate(errors, f"{where}.transform")
            c["transform"] = transform
        for j, rb in enumerate(c.get("road_blocks") or []):
            _check_keys(rb, {"s", "radius"}, f"{where}.road_blocks[{j}]", errors)
        for j, st in enumerate(c.get("operator_sites") or []):
            _check_keys(st, {"s", "radius", "absorbs", "product"},
                        f"{where}.operator_sites[{j}]", errors)
            for key in ("absorbs", "product"):
                nm = st.get(key)
                if nm is not None and nm not in species:
                    errors.append(f"{where}.operator_sites[{j}].{key}: "
                                  f"unknown species {nm!r}")
        curves.append(c)

    network = ReactionNetwork([r for r in reactions])
    network.validate(species, errors)

    initial = []
    for i, c in enumerate(raw.get("initial") or []):
        where = f"initial[{i}]"
        c = dict(c)
        _check_keys(c, {"species", "count", "distribution", "positions",
                        "bound_on", "arclengths"}, where, errors)
        if c.get("species") not in species:
            errors.append(f"{where}.species: unknown species "
                          f"{c.get('species')!r}")
        if "positions" not in c and "arclengths" not in c:
            if int(c.get("count", -1)) < 0:
                errors.append(f"{where}.count: must be >= 0")
            if c.get("distribution", "uniform") != "uniform":
                errors.append(f"{where}.distribution: only 'uniform' or explicit "
                              "positions are supported")
        initial.append(c)

    outputs = dict(raw.get("outputs") or {})
    _check_keys(outputs, {"snapshot_every", "positions"}, "outputs", errors)
    stop_sp = raw.get("stop_on_species")
    if stop_sp is not None and stop_sp not in species:
        errors.append(f"stop_on_species: unknown species {stop_sp!r}")

    if errors:
        raise ScenarioError(errors)
    return Scenario(name=name, seed=seed, t_final=t_final, boundary=boundary,
                    engine=engine, species=species, reactions=reactions,
                    curves=curves, initial=initial,
                    snapshot_every=int(outputs.get("snapshot_every", 1)),
                    record_positions=bool(outputs.get("positions", False)),
                    stop_on_species=stop_sp)


def load_scenario(path):
    with open(path) as fh:
        return parse_scenario(fh.read())


# ---------------------------------------------------------------------------
# Canonical serialization and hashing
# ---------------------------------------------------------------------------

def scenario_to_dict(sc):
    eng = sc.engine
    d = {
        "name": sc.name,
        "seed": sc.seed,
        "t_final": sc.t_final,
        "boundary": dict(sc.boundary),
        "engine": {
            "K": eng.K, "dt_min": eng.dt_min, "dt_split": eng.dt_split,
            "pair_distance_factor": eng.pair_distance_factor,
            "r0_bucketing": eng.r0_bucketing,
            "dt_on_curve": eng.dt_on_curve,
            "grid": {"n_cells": eng.grid.n_cells,
                     "n_substeps": eng.grid.n_substeps,
                     "r_max_factor": eng.grid.r_max_factor,
                     "h0_frac": eng.grid.h0_frac,
                     "rannacher_steps": eng.grid.rannacher_steps},
        },
        "species": [],
        "reactions": [],
        "curves": [],
        "initial": [dict(c) for c in sc.initial],
        "outputs": {"snapshot_every": sc.snapshot_every,
                    "positions": sc.record_positions},
        "stop_on_species": sc.stop_on_species,
    }
    for sp in sc.species.values():
        row = {"name": sp.name, "D_free": sp.D_free, "D_bound": sp.D_bound,
               "radius": sp.radius}
        if sp.transport is not None:
            row["transport"] = {"target": [float(v) for v in sp.transport.target],
                                "step": sp.transport.step,
                                "coefficient": sp.transport.coefficient,
                                "divisor": sp.transport.divisor}
        d["species"].append(row)
    for r in sc.reactions:
        if isinstance(r, BindToCurve):
            d["reactions"].append({"kind": "bind", "reactant": r.reactant,
                                   "product": r.product, "k_r": r.k_r})
        elif isinstance(r, UnbindFromCurve):
            d["reactions"].append({"kind": "unbind", "reactant": r.reactant,
                                   "product": r.product, "k_d": r.k_d})
        elif isinstance(r, Bimolecular3D):
            d["reactions"].append({"kind": "bi3d", "a": r.a, "b": r.b,
                                   "product": r.product, "k_r": r.k_r})
        elif isinstance(r, Bimolecular1D):
            d["reactions"].append({"kind": "bi1d", "a": r.a, "b": r.b,
                                   "product": r.product, "k_r": r.k_r})
        else:
            d["reactions"].append({"kind": "uni", "reactant": r.reactant,
                                   "products": list(r.products), "rate": r.rate})
    for c in sc.curves:
        row = {k: v for k, v in c.items() if k != "transform"}
        tr = c.get("transform")
        if tr is not None:
            row["transform"] = {"rotate": tr.rotate, "grow": tr.grow,
                                "D_l": tr.D_l, "l_min": tr.l_min,
                                "l_max": None if math.isinf(tr.l_max) else tr.l_max}
        d["curves"].append(row)
    return d


def _plain(obj):
    if isinstance(obj, dict):
        return {k: _plain(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_plain(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return [_plain(v) for v in obj.tolist()]
    if isinstance(obj, (np.floating, float)):
        return float(obj)
    if isinstance(obj, (np.integer, int)) and not isinstance(obj, bool):
        return int(obj)
    return obj


def serialize_scenario(sc):
    d = _plain(scenario_to_dict(sc))
    # l_max: None round-trips to inf via the parser default only if omitted
    for c in d["curves"]:
        tr = c.get("transform")
        if tr is not None and tr.get("l_max") is None:
            tr.pop("l_max")
    if d.get("stop_on_species") is None:
        d.pop("stop_on_species")
    return yaml.safe_dump(d, sort_keys=True, default_flow_style=None)


def config_hash(sc):
    return hashlib.sha256(serialize_scenario(sc).encode()).hexdigest()[:16]


# ---------------------------------------------------------------------------
# Building a runnable simulation
# ---------------------------------------------------------------------------

def build_boundary(sc):
    b = sc.boundary
    if b["kind"] == "sphere":
        return geo.icosphere(float(b["radius"]), int(b.get("subdivisions", 4)))
    if b["kind"] == "cylinder":
        return geo.cylinder_mesh(float(b["radius"]), float(b["height"]),
                                 int(b.get("n_around", 48)),
                                 int(b.get("n_axial", 12)))
    return geo.read_mesh(b["file"])


def build_curves(sc, rng):
    """Instantiate curves (+ blocks/sites/transforms); random generators draw
    from the provided stream, so each trajectory gets its own arrangement."""
    curves, blocks, sites, transforms = [], [], [], {}
    cid = 0
    for c in sc.curves:
        built = []
        rr = float(c["reaction_radius"])
        if c["kind"] == "line":
            built.append(geo.line_curve(np.asarray(c["p"], float),
                                        np.asarray(c["q"], float), rr,
                                        int(c.get("segments", 1)), cid))
        elif c["kind"] == "spiral":
            built.append(geo.spiral_curve(np.asarray(c["offset"], float),
                                          float(c["r_c"]), float(c["pitch"]),
                                          float(c["turns"]),
                                          int(c.get("segments", 30)), rr,
                                          float(c.get("phase", 0.0)), cid))
        elif c["kind"] == "points":
            built.append(geo.PolylineCurve(np.asarray(c["points"], float), rr, cid))
        else:  # random_lines: diameters through the origin, uniform directions
            R = float(c["radius"])
            for _ in range(int(c["count"])):
                u = rng.normal(size=3)
                u /= np.linalg.norm(u)
                built.append(geo.line_curve(R * u, -R * u, rr, 1, cid + len(built)))
        for k, curve in enumerate(built):
            curves.append(curve)
            if c.get("transform") is not None:
                transforms[curve.id] = c["transform"]
            if k == 0:
                for rb in c.get("road_blocks") or []:
                    blocks.append(RoadBlock(curve.id, float(rb["s"]),
                                            float(rb["radius"])))
                for st in c.get("operator_sites") or []:
                    sites.append(OperatorSite(curve.id, float(st["s"]),
                                              float(st["radius"]),
                                              str(st["absorbs"]),
                                              str(st["product"])))
        cid = len(curves)
    return curves, blocks, sites, transforms


def sample_initial_positions(sc, mesh, curves, rng):
    """Exact counts; uniform-in-volume placement by rejection in the mesh."""
    mols = []
    lo = mesh.vertices.min(axis=0)
    hi = mesh.vertices.max(axis=0)
    next_id = 0
    for c in sc.initial:
        spname = c["species"]
        if "positions" in c:
            for p in c["positions"]:
                x = np.asarray(p, dtype=float)
                if not bool(mesh.contains(x)[0]):
                    raise ScenarioError([f"initial position {p} outside boundary"])
                mols.append(Molecule(next_id, spname, position=x))
                next_id += 1
            continue
        if "arclengths" in c:
            cid = int(c.get("bound_on", 0))
            for s in c["arclengths"]:
                mols.append(Molecule(next_id, spname,
                                     bound=geo.CurveLocation(cid, float(s))))
                next_id += 1
            continue
        need = int(c.get("count", 0))
        got = 0
        attempts = 0
        while got < need:
            n_draw = max(2 * (need - got), 64)
            pts = rng.uniform(lo, hi, size=(n_draw, 3))
            inside = mesh.contains(pts)
            attempts += n_draw
            for x in pts[inside]:
                if got == need:
                    break
                mols.append(Molecule(next_id, spname, position=x.copy()))
                next_id += 1
                got += 1
            if attempts > max(10_000, 1000 * need) and got < attempts * 1e-3:
                raise ScenarioError(["rejection sampling acceptance below 1e-3; "
                                     "degenerate boundary mesh"])
    return mols


def build_simulation(sc, trajectory_index=0, seed=None, record_positions=None):
    """Deterministic per-trajectory stream: (seed, trajectory_index)."""
    base_seed = sc.seed if seed is None else seed
    rng = np.random.default_rng(np.random.SeedSequence(
        entropy=base_seed, spawn_key=(trajectory_index,)))
    mesh = build_boundary(sc)
    curves, blocks, sites, transforms = build_curves(sc, rng)
    mols = sample_initial_positions(sc, mesh, curves, rng)
    rec = sc.record_positions if record_positions is None else record_positions
    return Simulation(mesh, curves, sc.species, sc.network(), mols, sc.engine,
                      road_blocks=blocks, sites=sites, transforms=transforms,
                      rng=rng, record_positions=rec)
