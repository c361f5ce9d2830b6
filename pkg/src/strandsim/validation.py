"""Independent references: Brownian-dynamics oracle, exact SSA, estimators.

The BD oracle is a fixed-step random walk with mirror reflection at the
contact radius and a calibrated per-contact-step acceptance probability

    p = p1 * (1 - 0.6 * p1),   p1 = (k_r / A(sigma)) * sqrt(pi * dt_bd / D)

capped at 1. p1 is the leading-order matched-flux construction; the
(1 - 0.6 p1) factor removes the second-order recontact excess, with the
0.6 coefficient calibrated against the closed-form half-line radiation
survival (see the oracle tests). In the capped (absorbing) regime the
contact test radius is inflated by 0.5826*sqrt(2*D*dt_bd) to correct the
discrete-monitoring undershoot. All of this is validated by the
reflecting/absorbing limit tests and by self-convergence under dt_bd
halving, not assumed.
"""

from __future__ import annotations

import math
import os
from dataclasses import dataclass, field

import numpy as np
from scipy import stats as sps

from ._kernels import bd_radiation_walk, bd_free_angle_walk

_DIM = {"1d": 1, "2d": 2, "3d": 3}

# discrete-monitoring barrier shift constant: -zeta(1/2)/sqrt(2*pi)
BARRIER_SHIFT = 0.5826


def _contact_area(geometry, sigma):
    if geometry == "1d":
        return 1.0
    if geometry == "2d":
        return 2.0 * math.pi * sigma
    return 4.0 * math.pi * sigma ** 2


@dataclass
class BdOracleConfig:
    geometry: str
    D: float
    sigma: float
    k_r: float
    r0: float
    horizon: float
    dt_bd: float | None = None   # default sigma^2 / (100 D)
    trials: int = 100_000
    seed: int = 0

    def resolved_dt(self):
        return self.dt_bd if self.dt_bd is not None else self.sigma ** 2 / (100.0 * self.D)


@dataclass
class BdOracleResult:
    survival: float
    survival_se: float
    final_radii: np.ndarray      # survivors only
    reaction_times: np.ndarray   # reacted trials only
    trials: int
    dt_bd: float
    p_acc: float


def bd_oracle(cfg: BdOracleConfig) -> BdOracleResult:
    """Empirical survival/positions for one radiation-BC problem."""
    dt_bd = cfg.resolved_dt()
    area = _contact_area(cfg.geometry, cfg.sigma)
    if cfg.k_r == 0.0:
        p_acc, test_radius = 0.0, cfg.sigma
    else:
        p_raw = (cfg.k_r / area) * math.sqrt(math.pi * dt_bd / cfg.D)
        if p_raw >= 1.0 or math.isinf(p_raw):
            p_acc = 1.0
            test_radius = cfg.sigma + BARRIER_SHIFT * math.sqrt(2.0 * cfg.D * dt_bd)
        else:
            p_acc = p_raw * (1.0 - 0.6 * p_raw)  # recontact-excess correction
            test_radius = cfg.sigma
    reacted, t_rx, r_fin = bd_radiation_walk(
        _DIM[cfg.geometry], cfg.D, cfg.sigma, cfg.r0, cfg.horizon, dt_bd,
        p_acc, test_radius, cfg.trials, cfg.seed)
    frac = reacted.mean()
    surv = 1.0 - frac
    se = math.sqrt(max(surv * (1.0 - surv), 1e-300) / cfg.trials)
    return BdOracleResult(surv, se, r_fin[reacted == 0], t_rx[reacted == 1],
                          cfg.trials, dt_bd, p_acc)


def bd_angle_oracle(D, r, dt, dt_bd, trials, seed=0, window=0.02):
    """Free 3D walks from radius r; cos(angle) samples conditioned on the
    final radius landing within +-window of r."""
    r_fin, cos_fin = bd_free_angle_walk(D, r, dt, dt_bd, trials, seed)
    keep = np.abs(r_fin / r - 1.0) < window
    return cos_fin[keep]


# ---------------------------------------------------------------------------
# Exact well-mixed SSA
# ---------------------------------------------------------------------------

@dataclass
class SsaReaction:
    rate: float
    reactants: dict
    products: dict


def _propensity(rx, counts):
    a = rx.rate
    for sp, order in rx.reactants.items():
        n = counts[sp]
        if order == 1:
            a *= n
        elif order == 2:
            a *= n * (n - 1) / 2.0
        else:
            raise ValueError("reaction order above 2 not supported")
    return a


def ssa_wellmixed(reactions, initial_counts, t_f, rng, record_times=None):
    """One exact SSA path.

    With ``record_times`` returns counts sampled at those times (dict of
    arrays); otherwise returns the full event path (times list, counts dict
    of lists including the initial state).
    """
    for rx in reactions:
        if rx.rate < 0.0:
            raise ValueError("rates must be non-negative")
    counts = dict(initial_counts)
    t = 0.0
    if record_times is not None:
        record_times = np.asarray(record_times, dtype=float)
        out = {sp: np.empty(len(record_times)) for sp in counts}
        ptr = 0
    else:
        times = [0.0]
        path = {sp: [counts[sp]] for sp in counts}
    while True:
        props = np.array([_propensity(rx, counts) for rx in reactions])
        total = props.sum()
        t_next = t + rng.exponential(1.0 / total) if total > 0.0 else math.inf
        if record_times is not None:
            while ptr < len(record_times) and record_times[ptr] < min(t_next, t_f):
                for sp in counts:
                    out[sp][ptr] = counts[sp]
                ptr += 1
        if t_next >= t_f:
            break
        t = t_next
        j = int(np.searchsorted(np.cumsum(props), rng.uniform() * total))
        rx = reactions[j]
        for sp, k in rx.reactants.items():
            counts[sp] -= k
        for sp, k in rx.products.items():
            counts[sp] = counts.get(sp, 0) + k
        if record_times is None:
            times.append(t)
            for sp in path:
                path[sp].append(counts.get(sp, 0))
    if record_times is not None:
        while ptr < len(record_times):
            for sp in counts:
                out[sp][ptr] = counts[sp]
            ptr += 1
        return out
    return times, path


@dataclass
class MesoRates:
    """Well-mixed rates matching the microscopic cylinder-binding model.

    k_r_meso is the inverse mean binding time from uniform starts. The
    dissociation rate follows from detailed balance: the microscopic
    equilibrium odds bound:free are k_r / (A_disk * k_d), so
    k_d_meso = k_d * k_r_meso * A_disk / k_r.
    """

    k_r_meso: float
    k_d_meso: float

    @classmethod
    def from_binding_time(cls, T_bind, k_r, k_d, R_cyl):
        if T_bind <= 0.0 or k_r <= 0.0:
            raise ValueError("T_bind and k_r must be positive")
        a_disk = math.pi * R_cyl ** 2
        k_r_meso = 1.0 / T_bind
        k_d_meso = k_d * k_r_meso * a_disk / k_r
        if k_r_meso <= 0.0 or k_d_meso < 0.0:
            raise ValueError("meso rates must be positive")
        return cls(k_r_meso, k_d_meso)


# ---------------------------------------------------------------------------
# Statistics helpers
# ---------------------------------------------------------------------------

def ks_uniform_pvalue(samples_cdf_values):
    """KS test of CDF-transformed samples against U(0,1)."""
    return sps.kstest(samples_cdf_values, "uniform").pvalue


def chi2_pvalue(observed_counts, expected_counts):
    obs = np.asarray(observed_counts, dtype=float)
    exp = np.asarray(expected_counts, dtype=float)
    exp = exp * obs.sum() / exp.sum()
    stat = ((obs - exp) ** 2 / exp).sum()
    return float(sps.chi2.sf(stat, len(obs) - 1))


def chi2_histogram_pvalue(samples_a, samples_b, n_bins=20):
    """Two-sample chi-square over quantile bins of the pooled sample."""
    pooled = np.concatenate([samples_a, samples_b])
    edges = np.quantile(pooled, np.linspace(0.0, 1.0, n_bins + 1))
    edges[0] -= 1.0
    edges[-1] += 1.0
    ca, _ = np.histogram(samples_a, edges)
    cb, _ = np.histogram(samples_b, edges)
    # standard two-sample chi-square with unequal totals
    na, nb = ca.sum(), cb.sum()
    k1, k2 = math.sqrt(nb / na), math.sqrt(na / nb)
    keep = (ca + cb) > 0
    stat = (((k1 * ca - k2 * cb) ** 2)[keep] / (ca + cb)[keep]).sum()
    dof = keep.sum() - 1
    return float(sps.chi2.sf(stat, dof))


def pearson_with_bootstrap(x, y, n_boot=1000, seed=0):
    """Pearson r with a percentile bootstrap 95% CI over (x, y) pairs."""
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    if len(x) != len(y) or len(x) < 3:
        raise ValueError("need equal-length series with at least 3 points")
    if np.std(x) == 0.0 or np.std(y) == 0.0:
        raise ValueError("Pearson correlation undefined for a constant series")
    r = float(sps.pearsonr(x, y).statistic)
    rng = np.random.default_rng(seed)
    n = len(x)
    rs = np.empty(n_boot)
    for b in range(n_boot):
        idx = rng.integers(0, n, size=n)
        xb, yb = x[idx], y[idx]
        if np.std(xb) == 0.0 or np.std(yb) == 0.0:
            rs[b] = np.nan
            continue
        rs[b] = sps.pearsonr(xb, yb).statistic
    lo, hi = np.nanpercentile(rs, [2.5, 97.5])
    return r, (float(lo), float(hi))


def mean_with_se(samples):
    s = np.asarray(samples, dtype=float)
    return float(s.mean()), float(s.std(ddof=1) / math.sqrt(len(s)))


# ---------------------------------------------------------------------------
# Mean binding time in the cylinder-with-axis-line system
# ---------------------------------------------------------------------------

def estimate_T_bind(R_cyl, height, sigma_line, k_r, D, trials=1000, seed=0,
                    grid=None, dt_split=0.02, t_cap=500.0):
    """Mean first-binding time of one molecule from a uniform start.

    Estimated by direct microscale simulation (irreversible binding); the
    exact binding times come from the engine's event log. Returns
    (mean, se, times array).
    """
    from . import geometry as geo
    from .engine import EngineConfig, Molecule, Simulation
    from .model import BindToCurve, ReactionNetwork, Species
    from .propagators import GridParams, PropagatorCache

    grid = grid or GridParams(n_cells=120, n_substeps=40)
    cfg = EngineConfig(dt_split=dt_split, grid=grid, r0_bucketing=True)
    mesh = geo.cylinder_mesh(R_cyl, height)
    species = {"A": Species("A", D_free=D, radius=sigma_line),
               "Acyl": Species("Acyl", D_bound=0.0, radius=sigma_line)}
    net = ReactionNetwork([BindToCurve("A", "Acyl", k_r)])
    cache = PropagatorCache(grid, r0_bucketing=True)
    half = height / 2.0
    times = np.empty(trials)
    for k in range(trials):
        rng = np.random.default_rng(np.random.SeedSequence(entropy=seed,
                                                           spawn_key=(k,)))
        while True:
            x = rng.uniform([-half, -R_cyl, -R_cyl], [half, R_cyl, R_cyl])
            if x[1] ** 2 + x[2] ** 2 < R_cyl ** 2 and bool(mesh.contains(x)[0]):
                break
        line = geo.line_curve(np.array([-half, 0.0, 0.0]),
                              np.array([half, 0.0, 0.0]), sigma_line, 1, 0)
        sim = Simulation(mesh, [line], species, net,
                         [Molecule(0, "A", position=x)], cfg, rng=rng,
                         cache=cache)
        t_bound = None
        while sim.t < t_cap:
            sim.advance_window()
            if sim.events:
                t_bound = sim.events[0][0]
                break
        times[k] = t_bound if t_bound is not None else t_cap
    mean, se = mean_with_se(times)
    return mean, se, times


# ---------------------------------------------------------------------------
# Observables over output directories
# ---------------------------------------------------------------------------

def _counts_files(out_dir):
    import glob
    files = sorted(glob.glob(os.path.join(out_dir, "counts_*.tsv")))
    if not files:
        raise FileNotFoundError(f"no counts_*.tsv under {out_dir}")
    return files


def bound_count_stats(out_dir, species):
    """Ensemble mean +- SE of one species' count at each snapshot time."""
    from .output import read_counts
    files = _counts_files(out_dir)
    tables = [read_counts(f) for f in files]
    times = tables[0]["time"]
    for tb in tables[1:]:
        if len(tb["time"]) != len(times) or not np.allclose(tb["time"], times):
            raise ValueError("trajectories have mismatched snapshot times")
    stack = np.array([tb[species] for tb in tables])
    mean = stack.mean(axis=0)
    se = stack.std(axis=0, ddof=1) / math.sqrt(len(tables)) if len(tables) > 1 \
        else np.zeros_like(mean)
    return times, mean, se


def first_event_time_stats(out_dir, kind="absorb"):
    """Per-trajectory first event of a kind; mean +- SE over trajectories."""
    import glob
    from .output import read_events
    files = sorted(glob.glob(os.path.join(out_dir, "events_*.tsv")))
    firsts = []
    for f in files:
        evs = [e for e in read_events(f) if e[1] == kind]
        if evs:
            firsts.append(min(e[0] for e in evs))
    if not firsts:
        raise ValueError(f"no '{kind}' events found under {out_dir}")
    mean, se = mean_with_se(firsts)
    return mean, se, np.asarray(firsts)


def radial_histogram(out_dir, R, n_bins=20, at_time=None):
    """Histogram of molecule radial positions over equal-volume bins.

    Uses the last snapshot of every positions file unless at_time is given.
    Returns (bin edges, counts, radii)."""
    import glob
    from .output import read_positions
    files = sorted(glob.glob(os.path.join(out_dir, "positions_*.tsv")))
    if not files:
        raise FileNotFoundError(f"no positions_*.tsv under {out_dir}")
    radii = []
    for f in files:
        rows = read_positions(f)
        times = sorted({r[0] for r in rows})
        if at_time is None:
            t_sel = times[-1]
        else:
            t_sel = min(times, key=lambda t: abs(t - at_time))
        for t, mid, spname, bound, x, y, z, s in rows:
            if t == t_sel:
                radii.append(math.sqrt(x * x + y * y + z * z))
    edges = R * (np.arange(n_bins + 1) / n_bins) ** (1.0 / 3.0)
    counts, _ = np.histogram(radii, edges)
    return edges, counts, np.asarray(radii)


def length_correlation(out_dir, species, trajectory=0, skip=0):
    """Pearson correlation between a bound-species count and the total curve
    length over one trajectory, with a bootstrap 95% CI."""
    from .output import read_counts
    files = _counts_files(out_dir)
    tb = read_counts(files[trajectory])
    x = tb["total_curve_length"][skip:]
    y = tb[species][skip:]
    r, ci = pearson_with_bootstrap(x, y)
    return r, ci
