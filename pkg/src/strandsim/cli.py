"""Command-line interface: run / validate / oracle / analyze."""

from __future__ import annotations

import argparse
import math
import os
import sys

import numpy as np


def _add_run(sub):
    p = sub.add_parser("run", help="run a scenario ensemble to an output directory")
    p.add_argument("--scenario", required=True)
    p.add_argument("--out-dir", required=True)
    p.add_argument("--trajectories", type=int, default=1)
    p.add_argument("--seed", type=int, default=None,
                   help="override the scenario seed")
    p.add_argument("--workers", type=int,
                   default=int(os.environ.get("STRANDSIM_WORKERS", "1")))
    p.add_argument("--positions", action="store_true",
                   help="record position snapshots regardless of the scenario")


def _add_validate(sub):
    p = sub.add_parser("validate", help="run the invariant/oracle quick suite")
    p.add_argument("--seed", type=int, default=0)


def _add_oracle(sub):
    p = sub.add_parser("oracle", help="Brownian-dynamics reference for one "
                                      "radiation-BC problem")
    p.add_argument("--geometry", choices=["1d", "2d", "3d"], required=True)
    p.add_argument("--D", type=float, required=True)
    p.add_argument("--sigma", type=float, required=True)
    p.add_argument("--k-r", type=float, required=True)
    p.add_argument("--r0", type=float, required=True)
    p.add_argument("--dt", type=float, required=True)
    p.add_argument("--dt-bd", type=float, default=None)
    p.add_argument("--trials", type=int, default=100_000)
    p.add_argument("--seed", type=int, default=0)


def _add_analyze(sub):
    p = sub.add_parser("analyze", help="plot-ready tables from run outputs")
    p.add_argument("--out-dir", required=True)
    p.add_argument("--observable", required=True,
                   choices=["bound-counts", "first-binding",
                            "radial-histogram", "length-correlation"])
    p.add_argument("--species", default=None)
    p.add_argument("--radius", type=float, default=None,
                   help="domain radius for radial-histogram bins")
    p.add_argument("--bins", type=int, default=20)
    p.add_argument("--event-kind", default="absorb")
    p.add_argument("--skip", type=int, default=0,
                   help="leading snapshots to drop (equilibration)")


def cmd_run(args):
    from .scenario import load_scenario
    from .output import run_ensemble
    sc = load_scenario(args.scenario)
    if args.seed is not None:
        sc.seed = args.seed
        sc.engine.seed = args.seed
    if args.positions:
        sc.record_positions = True
    run_ensemble(sc, args.trajectories, args.out_dir, workers=args.workers)
    print(f"wrote {args.trajectories} trajectories to {args.out_dir}")
    return 0


def cmd_oracle(args):
    from .validation import BdOracleConfig, bd_oracle
    cfg = BdOracleConfig(args.geometry, args.D, args.sigma, args.k_r, args.r0,
                         args.dt, dt_bd=args.dt_bd, trials=args.trials,
                         seed=args.seed)
    res = bd_oracle(cfg)
    print(f"survival\t{res.survival:.6f}")
    print(f"survival_se\t{res.survival_se:.2e}")
    print(f"p_acc\t{res.p_acc:.6g}")
    print(f"dt_bd\t{res.dt_bd:.6g}")
    if len(res.final_radii):
        print(f"mean_final_radius\t{np.mean(res.final_radii):.6e}")
    return 0


def cmd_analyze(args):
    from . import validation as va
    if args.observable == "bound-counts":
        if not args.species:
            print("--species is required for bound-counts", file=sys.stderr)
            return 2
        times, mean, se = va.bound_count_stats(args.out_dir, args.species)
        print("time\tmean\tse")
        for t, m, s in zip(times, mean, se):
            print(f"{t:.17g}\t{m:.17g}\t{s:.17g}")
    elif args.observable == "first-binding":
        mean, se, firsts = va.first_event_time_stats(args.out_dir,
                                                     args.event_kind)
        print("mean\tse\tn")
        print(f"{mean:.17g}\t{se:.17g}\t{len(firsts)}")
    elif args.observable == "radial-histogram":
        if args.radius is None:
            print("--radius is required for radial-histogram", file=sys.stderr)
            return 2
        edges, counts, radii = va.radial_histogram(args.out_dir, args.radius,
                                                   args.bins)
        print("bin_lo\tbin_hi\tcount")
        for lo, hi, c in zip(edges[:-1], edges[1:], counts):
            print(f"{lo:.17g}\t{hi:.17g}\t{c}")
        print(f"# mean_radius\t{np.mean(radii):.17g}\t"
              f"se\t{np.std(radii, ddof=1) / math.sqrt(len(radii)):.17g}")
    else:
        if not args.species:
            print("--species is required for length-correlation", file=sys.stderr)
            return 2
        r, ci = va.length_correlation(args.out_dir, args.species, skip=args.skip)
        print("pearson_r\tci_lo\tci_hi")
        print(f"{r:.6f}\t{ci[0]:.6f}\t{ci[1]:.6f}")
    return 0


def cmd_validate(args):
    """Curated quick checks; prints one PASS/FAIL line each."""
    import numpy as np
    from . import geometry as geo
    from .engine import PairFrame
    from .propagators import (GridParams, RadiationProblem,
                              sample_radius, sample_reaction_time,
                              solve_radiation_pde)
    from .validation import (BdOracleConfig, SsaReaction, bd_oracle,
                             ks_uniform_pvalue, ssa_wellmixed)

    failures = 0

    def check(label, ok, detail=""):
        nonlocal failures
        print(f"{'PASS' if ok else 'FAIL'}  {label}" + (f"  ({detail})" if detail else ""))
        failures += 0 if ok else 1

    rng = np.random.default_rng(args.seed)
    for geom in ("1d", "2d", "3d"):
        prob = RadiationProblem(geom, 1e-12, 1e-9, 1e-11 if geom == "3d" else
                                (1e-11 if geom == "2d" else 1e-4), 2e-9, 1e-5)
        prop = solve_radiation_pde(prob)
        c = abs(prop.survival[-1] + prop.absorbed[-1] - 1.0)
        check(f"conservation {geom}", c < 1e-6, f"defect {c:.1e}")
    prop0 = solve_radiation_pde(RadiationProblem("3d", 1e-12, 1e-9, 0.0, 2e-9, 1e-5))
    check("reflecting limit survival", abs(prop0.survival[-1] - 1.0) < 1e-6)
    from scipy.special import erfc
    res = bd_oracle(BdOracleConfig("3d", 1e-12, 1e-9, math.inf, 2e-9, 1e-4,
                                   trials=20_000, seed=args.seed))
    # hitting probability by time t: (sigma/r0) erfc((r0-sigma)/sqrt(4 D t))
    expect = 0.5 * erfc(1e-9 / math.sqrt(4.0 * 1e-12 * 1e-4))
    check("absorbing-limit hit fraction vs first-passage law",
          abs((1.0 - res.survival) - expect) < 0.015,
          f"got {1.0 - res.survival:.3f}, expect {expect:.3f}")
    # inverse-transform self-consistency
    prop = solve_radiation_pde(RadiationProblem("3d", 1e-12, 1e-9, 0.0, 5e-9, 1e-5))
    us = rng.uniform(size=4000)
    rs = np.array([sample_radius(prop, 1e-5, u) for u in us])
    cdf = prop.cdf(len(prop.t_grid) - 1)
    vals = np.interp(rs, prop.r_faces, cdf / cdf[-1])
    check("sampling self-consistency (KS)", ks_uniform_pvalue(vals) > 0.01)
    # pair frame round trip
    x1, x2 = rng.normal(size=3), rng.normal(size=3)
    f = PairFrame.from_positions(x1, x2, 1e-12, 3e-12)
    y1, y2 = f.to_positions()
    check("pair-frame round trip", np.allclose(y1, x1, rtol=1e-12)
          and np.allclose(y2, x2, rtol=1e-12))
    # frame round trip
    fr = geo.cylindrical_frame(np.zeros(3), np.array([0.0, 0.0, 1.0]),
                               np.array([1e-9, 2e-9, 3e-9]))
    back = fr.to_cartesian(fr.r, fr.theta, fr.z)
    check("cylindrical frame round trip",
          np.allclose(back, [1e-9, 2e-9, 3e-9], rtol=1e-12))
    # SSA single-channel exponential waiting times (dedicated substream)
    times, path = ssa_wellmixed([SsaReaction(1.0, {"A": 1}, {"A": 1})],
                                {"A": 1}, 2000.0,
                                np.random.default_rng(args.seed + 12345))
    waits = np.diff(times)
    check("SSA exponential waiting times (KS)",
          ks_uniform_pvalue(1.0 - np.exp(-waits)) > 0.01)
    print("validate:", "OK" if failures == 0 else f"{failures} failure(s)")
    return 0 if failures == 0 else 1


def main(argv=None):
    parser = argparse.ArgumentParser(prog="strandsim")
    sub = parser.add_subparsers(dest="cmd", required=True)
    _add_run(sub)
    _add_validate(sub)
    _add_oracle(sub)
    _add_analyze(sub)
    args = parser.parse_args(argv)
    try:
        if args.cmd == "run":
            return cmd_run(args)
        if args.cmd == "validate":
            return cmd_validate(args)
        if args.cmd == "oracle":
            return cmd_oracle(args)
        return cmd_analyze(args)
    except Exception as exc:  # surface a clean diagnostic, nonzero exit
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
