"""Engine/geometry property checks shared by unit tests and acceptance."""

import math

import numpy as np

from strandsim import geometry as geo
from strandsim.engine import (EngineConfig, Molecule, PairFrame, Simulation,
                              propagate_pair_3d, propagate_pair_on_curve)
from strandsim.model import (BindToCurve, ReactionNetwork, Species,
                             UnbindFromCurve)
from strandsim.propagators import GridParams, PropagatorCache
from strandsim.validation import chi2_pvalue

FAST_GRID = GridParams(n_cells=120, n_substeps=40)


def check_pair_frame_round_trip():
    rng = np.random.default_rng(0)
    worst = 0.0
    for _ in range(10_000):
        x1 = rng.normal(size=3)
        x2 = rng.normal(size=3)
        D1, D2 = 10.0 ** rng.uniform(-14, -11, 2)
        f = PairFrame.from_positions(x1, x2, D1, D2)
        y1, y2 = f.to_positions()
        scale = max(np.abs(x1).max(), np.abs(x2).max())
        worst = max(worst, np.abs(y1 - x1).max() / scale,
                    np.abs(y2 - x2).max() / scale)
    return worst < 1e-12, f"worst relative round-trip error {worst:.2e}"


def _uniformity_chi2(radii, R, n_bins=20):
    edges = R * (np.arange(n_bins + 1) / n_bins) ** (1.0 / 3.0)
    counts, _ = np.histogram(radii, edges)
    return chi2_pvalue(counts, np.full(n_bins, len(radii) / n_bins))


def check_uniform_sphere():
    """Pure diffusion in the reflecting sphere stays uniform (radius^3)."""
    R = 1e-6
    mesh = geo.icosphere(R, 4)
    cfg = EngineConfig(dt_split=2e-3, grid=FAST_GRID)
    rng = np.random.default_rng(1)
    mols = []
    while len(mols) < 1000:
        x = rng.uniform(-R, R, 3)
        if x @ x < (0.999 * R) ** 2:
            mols.append(Molecule(len(mols), "A", position=x))
    sim = Simulation(mesh, [], {"A": Species("A", D_free=1e-12)},
                     ReactionNetwork(), mols, cfg, rng=rng)
    for _ in range(40):
        sim.advance_window()
    radii = np.array([np.linalg.norm(m.position) for m in sim.molecules])
    p = _uniformity_chi2(radii, R)
    return p > 0.01, f"chi2 p = {p:.3f} over 20 equal-volume bins"


def check_uniform_cylinder():
    R, H = 1e-6, 2e-6
    mesh = geo.cylinder_mesh(R, H)
    cfg = EngineConfig(dt_split=2e-3, grid=FAST_GRID)
    rng = np.random.default_rng(2)
    mols = []
    while len(mols) < 1000:
        x = rng.uniform([-H / 2, -R, -R], [H / 2, R, R])
        if x[1] ** 2 + x[2] ** 2 < (0.999 * R) ** 2 and abs(x[0]) < 0.999 * H / 2:
            mols.append(Molecule(len(mols), "A", position=x))
    sim = Simulation(mesh, [], {"A": Species("A", D_free=1e-12)},
                     ReactionNetwork(), mols, cfg, rng=rng)
    for _ in range(40):
        sim.advance_window()
    pos = np.array([m.position for m in sim.molecules])
    r2 = (pos[:, 1] ** 2 + pos[:, 2] ** 2) / R ** 2   # uniform on [0, 1]
    xn = (pos[:, 0] / H + 0.5)                        # uniform on [0, 1]
    c_r, _ = np.histogram(r2, np.linspace(0, 1, 11))
    c_x, _ = np.histogram(xn, np.linspace(0, 1, 11))
    p_r = chi2_pvalue(c_r, np.full(10, len(pos) / 10))
    p_x = chi2_pvalue(c_x, np.full(10, len(pos) / 10))
    return min(p_r, p_x) > 0.01, f"chi2 p radial = {p_r:.3f}, axial = {p_x:.3f}"


def _long_line_sim(n_mols, n_lines, D_bound, spacing, rng, dt_split=1e-3,
                   radius=1e-12):
    """Independent bound molecules spread over several long lines."""
    mesh = geo.icosphere(1.0, 1)  # effectively unbounded
    curves = [geo.line_curve(np.array([-0.4, 2e-3 * k, 0]),
                             np.array([0.4, 2e-3 * k, 0]), 1e-9, 1, k)
              for k in range(n_lines)]
    species = {"B": Species("B", D_bound=D_bound, radius=radius)}
    mols = []
    per = n_mols // n_lines
    for k in range(n_lines):
        for j in range(per):
            s = 0.1 + j * spacing
            mols.append(Molecule(len(mols), "B",
                                 bound=geo.CurveLocation(k, s)))
    cfg = EngineConfig(dt_split=dt_split, grid=FAST_GRID)
    return Simulation(mesh, curves, species, ReactionNetwork(), mols, cfg,
                      rng=rng), mols


def check_on_curve_msd():
    """MSD of bound diffusion equals 2 D t within 3%."""
    rng = np.random.default_rng(3)
    D = 1e-14
    n_windows = 25
    sim, mols = _long_line_sim(10_000, 100, D, 1e-6, rng)
    s0 = np.array([m.bound.s for m in mols])
    for _ in range(n_windows):
        sim.advance_window()
    s1 = np.array([m.bound.s for m in mols])
    msd = ((s1 - s0) ** 2).mean()
    expect = 2.0 * D * n_windows * sim.config.dt_split
    return abs(msd / expect - 1.0) < 0.03, f"msd/2Dt = {msd / expect:.4f}"


def check_circle_effective_diffusion():
    """Arclength diffusion on a fine circle keeps the nominal D within 5%.

    Molecules sit far apart (contact exclusion would otherwise produce
    single-file subdiffusion, a different effect than the one measured
    here): total drift std over the run is ~2e-8 against 1.2e-7 spacing.
    """
    R, n_seg, D = 1e-6, 360, 1e-14
    mesh = geo.icosphere(1.0, 1)
    rng = np.random.default_rng(4)
    curves = []
    mols = []
    for k in range(80):
        curves.append(geo.discretize_curve(
            lambda t: np.array([R * math.cos(t), R * math.sin(t), 3e-6 * k]),
            (0.0, 2.0 * math.pi), n_seg, 1e-9, curve_id=k))
        l_half = curves[k].total_length / 2.0
        for j in range(50):
            mols.append(Molecule(len(mols), "B",
                                 bound=geo.CurveLocation(k, l_half + (j - 25) * 1.2e-7)))
    cfg = EngineConfig(dt_split=1e-3, grid=FAST_GRID)
    sim = Simulation(mesh, curves, {"B": Species("B", D_bound=D, radius=1e-12)},
                     ReactionNetwork(), mols, cfg, rng=rng)
    s0 = np.array([m.bound.s for m in mols])
    n_windows = 20
    for _ in range(n_windows):
        sim.advance_window()
    s1 = np.array([m.bound.s for m in mols])
    msd = ((s1 - s0) ** 2).mean()
    d_eff = msd / (2.0 * n_windows * cfg.dt_split)
    return abs(d_eff / D - 1.0) < 0.05, f"D_eff/D = {d_eff / D:.4f}"


def check_free_msd():
    """Free-space MSD is 6 D t within 3% before boundary effects."""
    R = 1e-5
    mesh = geo.icosphere(R, 2)
    rng = np.random.default_rng(5)
    mols = [Molecule(i, "A", position=np.zeros(3) + rng.normal(0, 1e-7, 3))
            for i in range(3000)]
    cfg = EngineConfig(dt_split=1e-3, grid=FAST_GRID)
    sim = Simulation(mesh, [], {"A": Species("A", D_free=1e-12)},
                     ReactionNetwork(), mols, cfg, rng=rng)
    p0 = np.array([m.position for m in mols])
    n_windows = 5   # t = 5e-3 << R^2/(20 D) = 5e-3... stay below
    for _ in range(n_windows):
        sim.advance_window()
    p1 = np.array([m.position for m in mols])
    msd = ((p1 - p0) ** 2).sum(axis=1).mean()
    expect = 6.0 * 1e-12 * n_windows * cfg.dt_split
    return abs(msd / expect - 1.0) < 0.03, f"msd/6Dt = {msd / expect:.4f}"


def check_determinism(tmp_dir):
    """Same seed and config give byte-identical outputs."""
    import os
    from strandsim.output import run_trajectory
    from strandsim.scenario import parse_scenario
    text = _MINI_SCENARIO
    sc1 = parse_scenario(text)
    sc2 = parse_scenario(text)
    d1 = run_trajectory(sc1, 0, os.path.join(tmp_dir, "a"))
    d2 = run_trajectory(sc2, 0, os.path.join(tmp_dir, "b"))
    same = True
    for name in ("counts_000.tsv", "events_000.tsv"):
        b1 = open(os.path.join(d1, name), "rb").read()
        b2 = open(os.path.join(d2, name), "rb").read()
        same = same and b1 == b2
    return same, "counts and event logs byte-identical"


def check_conservation_audit(tmp_dir):
    """A reactive run completes with the per-window count audit enabled."""
    import os
    from strandsim.output import run_trajectory
    from strandsim.scenario import parse_scenario
    sc = parse_scenario(_MINI_SCENARIO)
    run_trajectory(sc, 1, os.path.join(tmp_dir, "audit"))
    return True, "audit held over a reactive trajectory"


_MINI_SCENARIO = """
name: mini-audit
seed: 9
t_final: 0.05
boundary: {kind: cylinder, radius: 1.0e-6, height: 2.0e-6}
engine:
  dt_split: 2.0e-3
  r0_bucketing: true
  grid: {n_cells: 120, n_substeps: 40}
species:
  - {name: A, D_free: 1.0e-12, radius: 1.0e-9}
  - {name: Acyl, D_bound: 1.0e-14, radius: 1.0e-9}
reactions:
  - {kind: bind, reactant: A, product: Acyl, k_r: 1.0e-11}
  - {kind: unbind, reactant: Acyl, product: A, k_d: 50.0}
curves:
  - {kind: line, p: [-1.0e-6, 0, 0], q: [1.0e-6, 0, 0], reaction_radius: 1.0e-9}
initial:
  - {species: A, count: 60, distribution: uniform}
"""


ALL_CHECKS = [
    ("pair-frame round trip (1e-12)", check_pair_frame_round_trip),
    ("uniform stationary sphere", check_uniform_sphere),
    ("uniform stationary cylinder", check_uniform_cylinder),
    ("on-curve MSD within 3%", check_on_curve_msd),
    ("circle effective D within 5%", check_circle_effective_diffusion),
    ("free-space MSD within 3%", check_free_msd),
]
