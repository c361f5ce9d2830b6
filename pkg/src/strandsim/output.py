"""Trajectory outputs: species-count series, event log, position snapshots.

All files are tab-separated text with '#' header lines carrying the seed,
the config hash and the unit convention (SI). Values print with 17
significant digits, so a read-back reproduces them exactly and two runs
with the same seed and config are byte-identical.
"""

from __future__ import annotations

import os
from concurrent.futures import ProcessPoolExecutor

import numpy as np

from .scenario import build_simulation, config_hash


def _fmt(x):
    return f"{x:.17g}"


def _header(fh, sc, trajectory_index, columns):
    fh.write(f"# scenario: {sc.name}\n")
    fh.write(f"# seed: {sc.seed}  trajectory: {trajectory_index}  "
             f"config_hash: {config_hash(sc)}\n")
    fh.write("# units: SI (m, s)\n")
    fh.write("# " + "\t".join(columns) + "\n")


def write_counts(path, sc, trajectory_index, series, species_order):
    with open(path, "w") as fh:
        _header(fh, sc, trajectory_index,
                ["time", *species_order, "total_curve_length"])
        for t, counts, total_len in series:
            row = [_fmt(t)] + [str(counts.get(s, 0)) for s in species_order] \
                + [_fmt(total_len)]
            fh.write("\t".join(row) + "\n")


def write_events(path, sc, trajectory_index, events):
    with open(path, "w") as fh:
        _header(fh, sc, trajectory_index,
                ["time", "kind", "species", "id1", "id2", "where"])
        for t, kind, species, id1, id2, where in sorted(
                events, key=lambda e: (e[0], e[3])):
            fh.write(f"{_fmt(t)}\t{kind}\t{species}\t{id1}\t{id2}\t{_fmt(where)}\n")


def write_positions(path, sc, trajectory_index, positions_log):
    with open(path, "w") as fh:
        _header(fh, sc, trajectory_index,
                ["time", "id", "species", "bound", "x", "y", "z", "arclength"])
        for t, rows in positions_log:
            for mid, spname, bound, x, y, z, s in rows:
                fh.write(f"{_fmt(t)}\t{mid}\t{spname}\t{bound}\t{_fmt(x)}\t"
                         f"{_fmt(y)}\t{_fmt(z)}\t{_fmt(s)}\n")


def read_table(path):
    """Read one of the delimited outputs; returns (columns, list of rows as
    strings) with header comments skipped."""
    columns = None
    rows = []
    with open(path) as fh:
        for line in fh:
            if line.startswith("#"):
                stripped = line[1:].strip()
                if "\t" in stripped and not stripped.startswith(("scenario",
                                                                 "seed", "units")):
                    columns = stripped.split("\t")
                continue
            if line.strip():
                rows.append(line.rstrip("\n").split("\t"))
    return columns, rows


def read_counts(path):
    columns, rows = read_table(path)
    out = {c: np.array([float(r[i]) for r in rows])
           for i, c in enumerate(columns)}
    return out


def read_events(path):
    columns, rows = read_table(path)
    return [(float(r[0]), r[1], r[2], int(r[3]), int(r[4]), float(r[5]))
            for r in rows]


def read_positions(path):
    columns, rows = read_table(path)
    return [(float(r[0]), int(r[1]), r[2], int(r[3]),
             float(r[4]), float(r[5]), float(r[6]), float(r[7]))
            for r in rows]


# ---------------------------------------------------------------------------
# Running trajectories to files
# ---------------------------------------------------------------------------

def run_trajectory(sc, trajectory_index, out_dir):
    os.makedirs(out_dir, exist_ok=True)
    sim = build_simulation(sc, trajectory_index)
    sim.run(sc.t_final, record_every=sc.snapshot_every,
            stop_species=sc.stop_on_species)
    species_order = sorted(sc.species)
    tag = f"{trajectory_index:03d}"
    write_counts(os.path.join(out_dir, f"counts_{tag}.tsv"), sc,
                 trajectory_index, sim.series, species_order)
    write_events(os.path.join(out_dir, f"events_{tag}.tsv"), sc,
                 trajectory_index, sim.events)
    if sim.positions_log is not None:
        write_positions(os.path.join(out_dir, f"positions_{tag}.tsv"), sc,
                        trajectory_index, sim.positions_log)
    return out_dir


def _run_one(args):
    sc, idx, out_dir = args
    run_trajectory(sc, idx, out_dir)
    return idx


def run_ensemble(sc, n_trajectories, out_dir, workers=1):
    """Independent trajectories; per-trajectory RNG streams come from
    (seed, index), so results do not depend on worker scheduling."""
    jobs = [(sc, i, out_dir) for i in range(n_trajectories)]
    if workers <= 1:
        for job in jobs:
            _run_one(job)
    else:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            list(pool.map(_run_one, jobs))
    return out_dir
