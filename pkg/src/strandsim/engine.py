"""The GFRD scheduler: decomposition, per-entity propagation, reactions.

Within one splitting window the curves are frozen. Molecules are grouped
once per window (mutual-nearest-neighbor pairs, near-curve, on-curve,
singles) and each entity then consumes the window in sub-steps sized by its
isolation clearances, dt = clearance^2 / (K * 6 * D), floored at dt_min.
Unimolecular events carry pre-sampled exponential firing times and are
executed in time order inside each entity's sub-stepping loop.

Non-reactive 3D encounters are transparent: the pair propagator applies to
species pairs coupled by a bimolecular rule, everything else diffuses
freely. On curves all molecules exclude each other (reflective at contact).
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field

import numpy as np

from . import geometry as geo
from . import line_dynamics as ld
from .geometry import CurveLocation
from .model import ReactionNetwork, UnbindFromCurve, Unimolecular
from .propagators import (GridParams, PropagatorCache, sample_radius,
                          sample_reaction_time, sample_theta_z)

log = logging.getLogger(__name__)

_WINDOW_EPS = 1e-12


class EngineError(RuntimeError):
    pass


@dataclass
class EngineConfig:
    K: float = 25.0
    dt_min: float = 1e-8
    dt_split: float = 1e-3
    pair_distance_factor: float = 5.0
    seed: int = 0
    grid: GridParams = field(default_factory=GridParams)
    r0_bucketing: bool = False
    dt_on_curve: float | None = None
    placement_retries: int = 8

    def validate(self, errors=None):
        errs = [] if errors is None else errors
        if self.K < 1.0:
            errs.append("engine.K must be >= 1")
        if not (0.0 < self.dt_min <= self.dt_split):
            errs.append("engine requires 0 < dt_min <= dt_split")
        if errors is None and errs:
            raise ValueError("; ".join(errs))
        return errs


@dataclass(eq=False)
class Molecule:
    id: int
    species: str
    position: np.ndarray | None = None
    bound: CurveLocation | None = None
    event_time: float = math.inf
    event_rule: object = None
    removed: bool = False

    @property
    def is_bound(self):
        return self.bound is not None


@dataclass
class PairFrame:
    """Weighted-mean / relative coordinates of a diffusing pair."""

    Y: np.ndarray
    y: np.ndarray
    D: float
    _a: float
    _b: float

    @classmethod
    def from_positions(cls, x1, x2, D1, D2):
        if D1 <= 0.0 or D2 <= 0.0:
            raise ValueError("PairFrame requires both diffusivities positive")
        a = math.sqrt(D2 / D1)
        b = math.sqrt(D1 / D2)
        x1 = np.asarray(x1, dtype=float)
        x2 = np.asarray(x2, dtype=float)
        return cls(a * x1 + b * x2, x2 - x1, D1 + D2, a, b)

    def to_positions(self):
        x1 = (self.Y - self._b * self.y) / (self._a + self._b)
        return x1, x1 + self.y


def choose_time_step(D, clearance, remaining, config):
    """dt = min(clearance^2 / (K 6 D), remaining), floored at dt_min."""
    if D <= 0.0 or clearance == math.inf:
        dt = remaining
    else:
        dt = min(clearance * clearance / (config.K * 6.0 * D), remaining)
    return min(max(dt, config.dt_min), remaining)


def quantize_step(dt, config):
    """Round down to the dyadic ladder dt_split / 2^k (cache reuse)."""
    if not config.r0_bucketing or dt >= config.dt_split:
        return dt
    k = math.ceil(math.log2(config.dt_split / dt) - 1e-12)
    return config.dt_split / (2.0 ** min(k, 60))


# ---------------------------------------------------------------------------
# Stand-alone pair propagation (used by the scheduler and directly testable)
# ---------------------------------------------------------------------------

def propagate_pair_3d(x1, x2, D1, D2, sigma, k_r, dt, rng, cache):
    """One radiation-BC step of a 3D pair.

    Returns ("reacted", tau, product_position_weight_point) or
    ("moved", x1_new, x2_new). The product point divides the contact vector
    at sigma * D1/(D1+D2) from molecule 1.
    """
    x1 = np.asarray(x1, dtype=float)
    x2 = np.asarray(x2, dtype=float)
    D = D1 + D2
    if D <= 0.0:
        return ("moved", x1.copy(), x2.copy())
    y = x2 - x1
    r0 = float(np.linalg.norm(y))
    yhat = y / r0 if r0 > 0.0 else np.array([1.0, 0.0, 0.0])
    r0 = max(r0, sigma)
    prop, r0_used = cache.radial("3d", D, sigma, k_r, dt, r0)
    tau = None
    if k_r > 0.0:
        tau = sample_reaction_time(prop, rng.uniform())
    w1 = D1 / D
    if tau is not None:
        if D1 > 0.0 and D2 > 0.0:
            frame = PairFrame.from_positions(x1, x2, D1, D2)
            frame.Y = frame.Y + rng.normal(0.0, math.sqrt(2.0 * D * tau), 3)
            frame.y = sigma * yhat
            x1n, x2n = frame.to_positions()
        elif D2 == 0.0:
            x2n = x2
            x1n = x2 - sigma * yhat
        else:
            x1n = x1
            x2n = x1 + sigma * yhat
        return ("reacted", tau, x1n + sigma * w1 * yhat)
    r_new = sample_radius(prop, dt, rng.uniform())
    ang = cache.angular(D, r_new, dt)
    theta = ang.sample(rng.uniform())
    phi = rng.uniform(0.0, 2.0 * math.pi)
    e1 = geo._perpendicular(yhat)
    e2 = geo._cross3(yhat, e1)
    y_new = r_new * (math.cos(theta) * yhat
                     + math.sin(theta) * (math.cos(phi) * e1 + math.sin(phi) * e2))
    if D1 > 0.0 and D2 > 0.0:
        frame = PairFrame.from_positions(x1, x2, D1, D2)
        frame.Y = frame.Y + rng.normal(0.0, math.sqrt(2.0 * D * dt), 3)
        frame.y = y_new
        x1n, x2n = frame.to_positions()
    elif D2 == 0.0:
        x2n = x2.copy()
        x1n = x2 - y_new
    else:
        x1n = x1.copy()
        x2n = x1 + y_new
    return ("moved", x1n, x2n)


def propagate_pair_on_curve(s1, s2, D1, D2, sigma, k_r, dt, rng, cache):
    """One radiation-BC step of an on-curve pair in arclength coordinates.

    Returns ("reacted", tau, s_product) or ("moved", s1_new, s2_new).
    """
    D = D1 + D2
    if D <= 0.0:
        return ("moved", s1, s2)
    sign = 1.0 if s2 >= s1 else -1.0
    y0 = max(abs(s2 - s1), sigma)
    prop, _ = cache.radial("1d", D, sigma, k_r, dt, y0)
    tau = None
    if k_r > 0.0:
        tau = sample_reaction_time(prop, rng.uniform())
    w1 = D1 / D
    if tau is not None:
        if D1 > 0.0 and D2 > 0.0:
            a = math.sqrt(D2 / D1)
            b = math.sqrt(D1 / D2)
            Y = a * s1 + b * s2 + rng.normal(0.0, math.sqrt(2.0 * D * tau))
            s1n = (Y - b * sign * sigma) / (a + b)
        elif D2 == 0.0:
            s1n = s2 - sign * sigma
        else:
            s1n = s1
        return ("reacted", tau, s1n + sign * sigma * w1)
    y_new = sample_radius(prop, dt, rng.uniform())
    if D1 > 0.0 and D2 > 0.0:
        a = math.sqrt(D2 / D1)
        b = math.sqrt(D1 / D2)
        Y = a * s1 + b * s2 + rng.normal(0.0, math.sqrt(2.0 * D * dt))
        s1n = (Y - b * sign * y_new) / (a + b)
        s2n = s1n + sign * y_new
    elif D2 == 0.0:
        s2n = s2
        s1n = s2 - sign * y_new
    else:
        s1n = s1
        s2n = s1 + sign * y_new
    return ("moved", s1n, s2n)


def on_curve_step(s, D, dt, rng, transport=None, target_s=None):
    """Displacement of a single bound molecule over dt.

    Diffusive: Gaussian with variance 2 D dt. Deterministic transport: one
    step of the configured displacement toward target_s.
    """
    if transport is not None:
        step = transport.step_of(dt)
        if target_s is None:
            return s
        if abs(target_s - s) <= step:
            return target_s
        return s + math.copysign(step, target_s - s)
    if D <= 0.0 or dt <= 0.0:
        return s
    return s + rng.normal(0.0, math.sqrt(2.0 * D * dt))


# ---------------------------------------------------------------------------
# Decomposition
# ---------------------------------------------------------------------------

def pair_decomposition(molecules, curves, species, config, road_blocks=(),
                       sites=()):
    """Group molecules into pairs / singles / near-curve / on-curve sets.

    Free molecules: nearest-to-a-curve molecules (within
    pair_distance_factor * sqrt(6 D dt_split) and nearer to the curve than
    to any molecule) go to the near-curve group; the rest form mutual
    nearest-neighbor pairs, leftovers are singles. On-curve molecules pair
    when mutually nearest and on the same segment with no obstacle between.
    """
    live = [m for m in molecules if not m.removed]
    free = [m for m in live if m.bound is None]
    bound = [m for m in live if m.bound is not None]
    out = {"pairs": [], "singles": [], "near_curve": [],
           "on_curve_pairs": [], "on_curve_singles": []}

    if free:
        pos = np.array([m.position for m in free])
        n = len(free)
        d_curve = np.full(n, math.inf)
        curve_idx = np.full(n, -1, dtype=int)
        for c in curves:
            _, _, d = c.closest_point_many(pos)
            better = d < d_curve
            d_curve[better] = d[better]
            curve_idx[better] = c.id
        if n >= 2:
            diff = pos[:, None, :] - pos[None, :, :]
            dmat = np.sqrt(np.einsum("ijk,ijk->ij", diff, diff))
            np.fill_diagonal(dmat, math.inf)
            nn = np.argmin(dmat, axis=1)  # first minimum: lowest id wins ties
            d_nn = dmat[np.arange(n), nn]
        else:
            nn = np.full(n, -1)
            d_nn = np.full(n, math.inf)
        near = np.zeros(n, dtype=bool)
        for i, m in enumerate(free):
            reach = config.pair_distance_factor * math.sqrt(
                6.0 * species[m.species].D_free * config.dt_split)
            near[i] = curve_idx[i] >= 0 and d_curve[i] < reach and d_curve[i] < d_nn[i]
            if near[i]:
                out["near_curve"].append((m, int(curve_idx[i])))
        paired = set()
        for i in range(len(free)):
            if near[i] or i in paired:
                continue
            j = int(nn[i])
            if j >= 0 and not near[j] and j not in paired and int(nn[j]) == i:
                lo, hi = (i, j) if i < j else (j, i)
                out["pairs"].append((free[lo], free[hi]))
                paired.update((i, j))
            elif j < 0 or True:
                pass
        in_pairs = {id(m) for p in out["pairs"] for m in p}
        out["singles"] = [m for k, m in enumerate(free)
                          if not near[k] and id(m) not in in_pairs]

    by_curve = {}
    for m in bound:
        by_curve.setdefault(m.bound.curve_id, []).append(m)
    obstacles = {}
    for b in road_blocks:
        obstacles.setdefault(b.curve_id, []).append(b.s)
    for st in sites:
        obstacles.setdefault(st.curve_id, []).append(st.s)
    for cid in sorted(by_curve):
        mols = sorted(by_curve[cid], key=lambda m: (m.bound.s, m.id))
        curve = curves[cid]
        obs = sorted(obstacles.get(cid, []))
        k = len(mols)
        if k == 1:
            out["on_curve_singles"].append(mols[0])
            continue
        gaps = [abs(mols[i + 1].bound.s - mols[i].bound.s) for i in range(k - 1)]
        nn1 = []
        for i in range(k):
            left = gaps[i - 1] if i > 0 else math.inf
            right = gaps[i] if i < k - 1 else math.inf
            nn1.append(i - 1 if left <= right else i + 1)
        paired = set()
        for i in range(k - 1):
            if i in paired or i + 1 in paired:
                continue
            if nn1[i] == i + 1 and nn1[i + 1] == i:
                m1, m2 = mols[i], mols[i + 1]
                same_seg = curve.segment_of(m1.bound.s) == curve.segment_of(m2.bound.s)
                blocked = any(m1.bound.s < o < m2.bound.s for o in obs)
                if same_seg and not blocked:
                    out["on_curve_pairs"].append((m1, m2))
                    paired.update((i, i + 1))
        out["on_curve_singles"].extend(mols[i] for i in range(k) if i not in paired)
    return out


# ---------------------------------------------------------------------------
# The simulation driver
# ---------------------------------------------------------------------------

class Simulation:
    def __init__(self, mesh, curves, species, network, molecules, config,
                 road_blocks=(), sites=(), transforms=None, rng=None,
                 record_positions=False, cache=None):
        self.mesh = mesh
        self.curves = list(curves)
        self.species = species
        self.network = network if isinstance(network, ReactionNetwork) \
            else ReactionNetwork(network)
        self.molecules = list(molecules)
        self.config = config
        config.validate()
        self.road_blocks = list(road_blocks)
        self.sites = list(sites)
        self.active_sites = list(sites)
        self.transforms = dict(transforms or {})
        self.rng = rng if rng is not None else np.random.default_rng(config.seed)
        # propagators are immutable once solved, so a cache may be shared
        # across simulations (ensemble trials) safely
        self.cache = cache if cache is not None \
            else PropagatorCache(config.grid, config.r0_bucketing)
        self.t = 0.0
        self.events = []
        self.virtual_counts = {}
        self.series = []
        self.positions_log = [] if record_positions else None
        self._next_id = max((m.id for m in self.molecules), default=-1) + 1
        self.stop_species = None        # stop once this species appears
        self._stopped = False
        self._curve_reg = None          # cid -> [bound molecules], rebuilt lazily
        for m in self.molecules:
            self._resample_events(m, 0.0)
        self._audit_base = self._live_counts()

    def _bound_on_curve(self, cid):
        if self._curve_reg is None:
            reg = {}
            for m in self.molecules:
                if not m.removed and m.bound is not None:
                    reg.setdefault(m.bound.curve_id, []).append(m)
            self._curve_reg = reg
        return self._curve_reg.get(cid, ())

    # -- bookkeeping ---------------------------------------------------------

    def _live_counts(self):
        counts = dict(self.virtual_counts)
        for m in self.molecules:
            if not m.removed:
                counts[m.species] = counts.get(m.species, 0) + 1
        return counts

    def counts(self):
        return self._live_counts()

    def total_curve_length(self):
        return sum(c.total_length for c in self.curves)

    def _new_molecule(self, species, position=None, bound=None):
        m = Molecule(self._next_id, species, position, bound)
        self._next_id += 1
        self.molecules.append(m)
        self._curve_reg = None
        return m

    def _log(self, t_abs, kind, species, id1, id2=-1, where=math.nan):
        self.events.append((t_abs, kind, species, id1, id2, where))

    def _resample_events(self, m, t_abs):
        """Pre-sample the molecule's next unimolecular firing time."""
        best_t, best_rule = math.inf, None
        candidates = []
        if m.is_bound:
            ub = self.network.unbind_for(m.species)
            if ub is not None and ub.k_d > 0.0:
                candidates.append((ub.k_d, ub))
        for rule in self.network.uni_for(m.species):
            if rule.rate > 0.0:
                candidates.append((rule.rate, rule))
        for rate, rule in candidates:
            t = t_abs + self.rng.exponential(1.0 / rate)
            if t < best_t:
                best_t, best_rule = t, rule
        m.event_time, m.event_rule = best_t, best_rule

    # -- event execution -------------------------------------------------------

    def _place_off_curve(self, curve, s, distance):
        """Point at the given radial distance from the curve, random azimuth;
        re-drawn if outside the boundary, then reflected as a last resort."""
        base = curve.arclength_to_point(s)
        axis = curve.tangent_at(s)
        e1 = geo._perpendicular(axis)
        e2 = geo._cross3(axis, e1)
        for _ in range(self.config.placement_retries):
            phi = self.rng.uniform(0.0, 2.0 * math.pi)
            x = base + distance * (math.cos(phi) * e1 + math.sin(phi) * e2)
            if bool(self.mesh.contains(x)[0]):
                return x
        return self.mesh.reflect(x)

    def _execute_event(self, m, t_abs):
        """Fire the molecule's pending unimolecular event. Returns new
        molecules that must be advanced for the rest of the window."""
        rule = m.event_rule
        if isinstance(rule, UnbindFromCurve):
            curve = self.curves[m.bound.curve_id]
            eps = self.config.grid.h0_frac * curve.reaction_radius
            x = self._place_off_curve(curve, m.bound.s, curve.reaction_radius + eps)
            m.position = x
            m.bound = None
            m.species = rule.product
            self._curve_reg = None
            self._log(t_abs, "unbind", m.species, m.id)
            self._resample_events(m, t_abs)
            return []
        if isinstance(rule, Unimolecular):
            if len(rule.products) == 1:
                m.species = rule.products[0]
                self._log(t_abs, "uni", m.species, m.id)
                self._resample_events(m, t_abs)
                return []
            p1, p2 = rule.products
            sp1, sp2 = self.species[p1], self.species[p2]
            sigma = sp1.radius + sp2.radius
            Dsum = sp1.D_free + sp2.D_free
            w1 = sp1.D_free / Dsum if Dsum > 0.0 else 0.5
            m.removed = True
            self._curve_reg = None
            if m.is_bound:
                curve = self.curves[m.bound.curve_id]
                s = m.bound.s
                a = self._new_molecule(p1, bound=CurveLocation(curve.id, s - sigma * w1))
                b = self._new_molecule(p2, bound=CurveLocation(curve.id, s + sigma * (1.0 - w1)))
                for prod in (a, b):
                    prod.bound.s = min(max(prod.bound.s, 0.0), curve.total_length)
            else:
                u = self.rng.normal(size=3)
                u /= np.linalg.norm(u)
                xa = m.position - sigma * w1 * u
                xb = m.position + sigma * (1.0 - w1) * u
                a = self._new_molecule(p1, position=geo.reflect_at_boundary(
                    m.position, xa, self.mesh))
                b = self._new_molecule(p2, position=geo.reflect_at_boundary(
                    m.position, xb, self.mesh))
            self._log(t_abs, "dissociate", m.species, m.id, a.id, b.id)
            self._resample_events(a, t_abs)
            self._resample_events(b, t_abs)
            return [a, b]
        raise EngineError(f"unknown event rule {rule!r}")

    # -- clearance helpers -------------------------------------------------------

    def _nearest_curve(self, x):
        best = (None, -1, math.inf, 0.0)
        for c in self.curves:
            seg, s, d = c.closest_point(x)
            if d < best[2]:
                best = (c, seg, d, s)
        return best

    def _isolation_from_segments(self, x, curve_id, seg_idx):
        """Distance to the nearest segment other than seg_idx +- 1 of the
        nearest curve (other curves count whole)."""
        best = math.inf
        for c in self.curves:
            if c.id == curve_id:
                if c.n_segments <= 3 and 0 <= seg_idx <= c.n_segments - 1 \
                        and c.n_segments - 1 <= seg_idx + 1 and seg_idx - 1 <= 0:
                    continue  # every segment is adjacent; nothing to isolate
                w = np.abs(np.arange(c.n_segments) - seg_idx) > 1
                if not np.any(w):
                    continue
                starts = c.seg_starts[w]
                vecs = c.seg_vecs[w]
                lens = c.seg_lengths[w]
                t = np.clip(np.einsum("ij,ij->i", x[None, :] - starts, vecs)
                            / lens ** 2, 0.0, 1.0)
                proj = starts + t[:, None] * vecs
                dd = np.linalg.norm(x[None, :] - proj, axis=1).min()
                best = min(best, float(dd))
            else:
                _, _, d = c.closest_point(x)
                best = min(best, d)
        return best

    def _reactive_partner_distance(self, m):
        """Distance to the nearest free molecule reactively coupled to m."""
        if not self.network.has_bi3d:
            return math.inf, 0.0
        best, sig = math.inf, 0.0
        for other in self.molecules:
            if other is m or other.removed or other.bound is not None:
                continue
            rule = self.network.bi3d_for(m.species, other.species)
            if rule is None:
                continue
            d = float(np.linalg.norm(other.position - m.position))
            if d < best:
                best = d
                sig = self.species[m.species].radius + self.species[other.species].radius
        return best, sig

    def _on_curve_neighbors(self, m):
        """(lo_edge, hi_edge, nearest_gap) contact edges from same-curve
        molecules around m, edge-to-edge."""
        s = m.bound.s
        rm = self.species[m.species].radius
        lo, hi = -math.inf, math.inf
        gap = math.inf
        for other in self._bound_on_curve(m.bound.curve_id):
            if other is m or other.removed or other.bound is None:
                continue
            sig = rm + self.species[other.species].radius
            if other.bound.s <= s:
                lo = max(lo, other.bound.s + sig)
                gap = min(gap, s - other.bound.s - sig)
            else:
                hi = min(hi, other.bound.s - sig)
                gap = min(gap, other.bound.s - s - sig)
        return lo, hi, max(gap, 0.0)

    def _site_obstacle_edges(self, m, exclude_site=None):
        cid = m.bound.curve_id
        s = m.bound.s
        rm = self.species[m.species].radius
        lo, hi = -math.inf, math.inf
        for st in self.active_sites:
            if st is exclude_site or st.curve_id != cid:
                continue
            edge = st.radius + rm
            if st.s <= s:
                lo = max(lo, st.s + edge)
            else:
                hi = min(hi, st.s - edge)
        return lo, hi

    # -- propagation ---------------------------------------------------------------

    def step_window(self):
        """Advance every molecule by exactly dt_split of local time."""
        window = self.config.dt_split
        groups = pair_decomposition(self.molecules, self.curves, self.species,
                                    self.config, self.road_blocks, self.active_sites)
        for m1, m2 in groups["pairs"]:
            self._advance_pair_3d(m1, m2, 0.0, window)
        for m1, m2 in groups["on_curve_pairs"]:
            if self.network.bi1d_for(m1.species, m2.species) is None:
                # non-reactive exclusion is handled by contact clipping;
                # the exact pair propagator is reserved for reactive pairs
                self._advance_molecule(m1, 0.0, window)
                self._advance_molecule(m2, 0.0, window)
            else:
                self._advance_pair_on_curve(m1, m2, 0.0, window)
        for m, _cid in groups["near_curve"]:
            self._advance_molecule(m, 0.0, window)
        for m in groups["singles"]:
            self._advance_molecule(m, 0.0, window, far_single=True)
        for m in groups["on_curve_singles"]:
            self._advance_molecule(m, 0.0, window)

    def _advance_molecule(self, m, t_loc, window, far_single=False):
        t_loc = self._advance_molecule_inner(m, t_loc, window, far_single)
        # local-time synchrony: the molecule's clock reaches the window end
        assert m.removed or self._stopped or t_loc >= window * (1.0 - 1e-9)

    def _advance_molecule_inner(self, m, t_loc, window, far_single=False):
        cfg = self.config
        while not m.removed and t_loc < window * (1.0 - _WINDOW_EPS) \
                and not self._stopped:
            remaining = window - t_loc
            t_abs = self.t + t_loc
            t_evt = m.event_time - t_abs
            if t_evt <= 0.0:
                for prod in self._execute_event(m, m.event_time):
                    self._advance_molecule(prod, t_loc, window)
                continue
            horizon = min(remaining, t_evt)
            if m.is_bound:
                t_loc += self._bound_step(m, t_abs, horizon)
            else:
                sp = self.species[m.species]
                if far_single:
                    dt = self._free_dt(m, sp, horizon)
                    self._free_move(m, sp, dt)
                    t_loc += dt
                    continue
                curve, seg, d, s_near = self._nearest_curve(m.position)
                if curve is None or sp.D_free <= 0.0:
                    dt = self._free_dt(m, sp, horizon)
                    self._free_move(m, sp, dt)
                    t_loc += dt
                    continue
                # free steps are exact while the curve is beyond reach; the
                # 2D propagator takes over once a safe free step would be
                # uneconomically small
                clear_curve = max(d - curve.reaction_radius, 0.0)
                dt_raw = clear_curve ** 2 / (cfg.K * 6.0 * sp.D_free)
                if dt_raw >= horizon / 16.0:
                    dt = min(self._free_dt(m, sp, horizon), max(dt_raw, cfg.dt_min),
                             horizon)
                    self._free_move(m, sp, dt)
                    t_loc += dt
                else:
                    t_loc += self._near_curve_step(m, sp, curve, seg, horizon, t_abs)
        return t_loc

    def _free_dt(self, m, sp, horizon):
        d, sig = self._reactive_partner_distance(m)
        if d == math.inf:
            return horizon
        clearance = max((d - sig) / 2.0, 0.0)
        return choose_time_step(sp.D_free, clearance, horizon, self.config)

    def _free_move(self, m, sp, dt):
        if sp.D_free > 0.0:
            disp = self.rng.normal(0.0, math.sqrt(2.0 * sp.D_free * dt), 3)
            m.position = geo.reflect_at_boundary(m.position, m.position + disp,
                                                 self.mesh)

    def _near_curve_step(self, m, sp, curve, seg, horizon, t_abs):
        """2D-propagator step against the nearest segment; binds on firing."""
        cfg = self.config
        frame = geo.cylindrical_frame(curve.seg_starts[seg], curve.seg_dirs[seg],
                                      m.position)
        sigma = curve.reaction_radius
        h0 = cfg.grid.h0_frac * sigma
        r0 = max(frame.r, sigma + 0.5 * h0)
        R_prot = geo.protective_radius(m.position, curve.points[seg],
                                       curve.points[seg + 1])
        d_iso = self._isolation_from_segments(m.position, curve.id, seg)
        d_rx, sig_rx = self._reactive_partner_distance(m)
        clearance = min(R_prot, max(d_iso - sigma, 0.0),
                        max((d_rx - sig_rx) / 2.0, 0.0) if d_rx < math.inf else math.inf)
        dt = quantize_step(choose_time_step(sp.D_free, clearance, horizon, cfg), cfg)
        bind = self.network.bind_for(m.species)
        k_r = bind.k_r if bind is not None else 0.0
        prop, r0_used = self.cache.radial("2d", sp.D_free, sigma, k_r, dt, r0)
        tau = sample_reaction_time(prop, self.rng.uniform()) if k_r > 0.0 else None
        if tau is not None:
            dz = self.rng.normal(0.0, math.sqrt(2.0 * sp.D_free * tau))
            z_bind = min(max(frame.z + dz, 0.0), curve.seg_lengths[seg])
            s_bind = curve.cum_lengths[seg] + z_bind
            m.position = None
            m.bound = CurveLocation(curve.id, s_bind)
            m.species = bind.product
            self._curve_reg = None
            self._log(t_abs + tau, "bind", m.species, m.id, where=s_bind)
            self._resample_events(m, t_abs + tau)
            return tau
        r_new = sample_radius(prop, dt, self.rng.uniform())
        r_new += r0 - r0_used  # undo the bucket snap so moves stay unbiased
        r_new = max(r_new, sigma)
        dtheta, dz = sample_theta_z(sp.D_free, r_new, dt, self.rng)
        x_new = frame.to_cartesian(r_new, frame.theta + dtheta, frame.z + dz)
        m.position = geo.reflect_at_boundary(m.position, x_new, self.mesh)
        return dt

    def _bound_step(self, m, t_abs, horizon):
        cfg = self.config
        sp = self.species[m.species]
        curve = self.curves[m.bound.curve_id]
        s = m.bound.s
        cblocks = [b for b in self.road_blocks if b.curve_id == curve.id]
        lo_n, hi_n, gap_n = self._on_curve_neighbors(m)

        # absorbing operator site nearby?
        site, site_gap = None, math.inf
        for st in self.active_sites:
            if st.curve_id != curve.id or st.absorbs != m.species:
                continue
            g = abs(st.s - s) - (st.radius + sp.radius)
            if g < site_gap:
                site, site_gap = st, g
        D_eff = sp.D_bound
        reach_1d = cfg.pair_distance_factor * math.sqrt(2.0 * max(D_eff, 0.0) * horizon)
        if site is not None and site_gap < reach_1d and sp.transport is None:
            return self._site_pair_step(m, sp, curve, site, horizon, t_abs,
                                        cblocks, lo_n, hi_n, gap_n)

        lo_s, hi_s = self._site_obstacle_edges(m, exclude_site=None)
        lo = max(lo_n, lo_s)
        hi = min(hi_n, hi_s)
        if sp.transport is not None:
            return self._transport_step(m, sp, curve, horizon, cblocks, lo, hi)
        # diffusive single: clearance against reactive neighbors only
        clearance = math.inf
        if gap_n < math.inf and self._has_reactive_1d_neighbor(m):
            clearance = max(gap_n / 2.0, 0.0)
        dt = choose_time_step(D_eff, clearance, horizon, cfg)
        if cfg.dt_on_curve is not None:
            dt = min(dt, max(cfg.dt_on_curve, cfg.dt_min), horizon)
        s_new = on_curve_step(s, D_eff, dt, self.rng)
        s_new = ld.clip_on_curve_move(s, s_new, sp.radius, curve, cblocks, lo, hi)
        m.bound.s = min(max(s_new, 0.0), curve.total_length)
        return dt

    def _has_reactive_1d_neighbor(self, m):
        for other in self._bound_on_curve(m.bound.curve_id):
            if other is m or other.removed or other.bound is None:
                continue
            if self.network.bi1d_for(m.species, other.species) is not None:
                return True
        return False

    def _site_pair_step(self, m, sp, curve, site, horizon, t_abs, cblocks,
                        lo_n, hi_n, gap_n):
        """1D pair against a static absorbing site."""
        cfg = self.config
        sigma = site.radius + sp.radius
        side = 1.0 if m.bound.s >= site.s else -1.0
        r0 = max(abs(m.bound.s - site.s), sigma)
        clearance = max(gap_n / 2.0, 0.0) if gap_n < math.inf else math.inf
        dt = quantize_step(choose_time_step(sp.D_bound, clearance, horizon, cfg), cfg)
        prop, r0_used = self.cache.radial("1d", sp.D_bound, sigma, math.inf, dt, r0)
        tau = sample_reaction_time(prop, self.rng.uniform())
        if tau is not None:
            m.removed = True
            self._curve_reg = None
            self.active_sites = [st for st in self.active_sites if st is not site]
            self.virtual_counts[site.product] = \
                self.virtual_counts.get(site.product, 0) + 1
            self._log(t_abs + tau, "absorb", site.product, m.id, where=site.s)
            if self.stop_species == site.product:
                self._stopped = True
            return tau
        y_new = sample_radius(prop, dt, self.rng.uniform())
        y_new += r0 - r0_used
        s_new = site.s + side * max(y_new, sigma)
        lo_s, hi_s = self._site_obstacle_edges(m, exclude_site=site)
        s_new = ld.clip_on_curve_move(m.bound.s, s_new, sp.radius, curve, cblocks,
                                      max(lo_n, lo_s), min(hi_n, hi_s))
        m.bound.s = min(max(s_new, 0.0), curve.total_length)
        return dt

    def _transport_step(self, m, sp, curve, horizon, cblocks, lo, hi):
        """Deterministic motion toward the curve point nearest the target,
        executed as per-step displacements at the configured cadence."""
        cfg = self.config
        dt_step = cfg.dt_on_curve if cfg.dt_on_curve is not None else horizon
        dt_step = min(dt_step, horizon)
        n_steps = max(int(horizon / dt_step + 1e-9), 1)
        step = sp.transport.step_of(dt_step)
        _, target_s, _ = curve.closest_point(np.asarray(sp.transport.target, float))
        s = m.bound.s
        total = step * n_steps
        if abs(target_s - s) <= total:
            s_new = target_s
        else:
            s_new = s + math.copysign(total, target_s - s)
        s_new = ld.clip_on_curve_move(s, s_new, sp.radius, curve, cblocks, lo, hi)
        m.bound.s = min(max(s_new, 0.0), curve.total_length)
        return n_steps * dt_step if n_steps * dt_step <= horizon else horizon

    def _advance_pair_3d(self, m1, m2, t_loc, window):
        cfg = self.config
        rule = self.network.bi3d_for(m1.species, m2.species)
        while t_loc < window * (1.0 - _WINDOW_EPS) and not self._stopped:
            if m1.removed or m2.removed or m1.is_bound or m2.is_bound:
                break
            rule = self.network.bi3d_for(m1.species, m2.species)
            remaining = window - t_loc
            t_abs = self.t + t_loc
            t_evt = min(m1.event_time, m2.event_time) - t_abs
            if t_evt <= 0.0:
                first = m1 if m1.event_time <= m2.event_time else m2
                born = self._execute_event(first, first.event_time)
                for prod in born:
                    self._advance_molecule(prod, t_loc, window)
                continue
            sp1, sp2 = self.species[m1.species], self.species[m2.species]
            if rule is None:
                # transparent pair: advance both as independent singles
                self._advance_molecule(m1, t_loc, window)
                self._advance_molecule(m2, t_loc, window)
                return
            horizon = min(remaining, t_evt)
            sigma = sp1.radius + sp2.radius
            D = sp1.D_free + sp2.D_free
            r0 = float(np.linalg.norm(m2.position - m1.position))
            d1, s1g = self._reactive_partner_distance_excluding(m1, m2)
            d2, s2g = self._reactive_partner_distance_excluding(m2, m1)
            clearance = min(max((d1 - s1g) / 2.0, 0.0), max((d2 - s2g) / 2.0, 0.0))
            for x in (m1.position, m2.position):
                c, seg, d, _ = self._nearest_curve(x)
                if c is not None:
                    clearance = min(clearance, max(d - c.reaction_radius, 0.0))
            if r0 > sigma + cfg.pair_distance_factor * math.sqrt(6.0 * D * horizon):
                # far apart: free moves are exact for a non-contacting pair
                dt = choose_time_step(max(sp1.D_free, sp2.D_free),
                                      clearance, horizon, cfg)
                self._free_move(m1, sp1, dt)
                self._free_move(m2, sp2, dt)
                t_loc += dt
                continue
            dt = quantize_step(choose_time_step(D, clearance, horizon, cfg), cfg)
            outcome = propagate_pair_3d(m1.position, m2.position,
                                        sp1.D_free, sp2.D_free,
                                        sigma, rule.k_r, dt, self.rng, self.cache)
            if outcome[0] == "reacted":
                _, tau, x_prod = outcome
                m1.removed = True
                m2.removed = True
                prod = self._new_molecule(rule.product, position=geo.reflect_at_boundary(
                    x_prod, x_prod, self.mesh))
                self._log(t_abs + tau, "react3d", rule.product, m1.id, m2.id)
                self._resample_events(prod, t_abs + tau)
                self._advance_molecule(prod, t_loc + tau, window)
                return
            _, x1n, x2n = outcome
            m1.position = geo.reflect_at_boundary(m1.position, x1n, self.mesh)
            m2.position = geo.reflect_at_boundary(m2.position, x2n, self.mesh)
            t_loc += dt

    def _reactive_partner_distance_excluding(self, m, partner):
        if not self.network.has_bi3d:
            return math.inf, 0.0
        best, sig = math.inf, 0.0
        for other in self.molecules:
            if other in (m, partner) or other.removed or other.bound is not None:
                continue
            if self.network.bi3d_for(m.species, other.species) is None:
                continue
            d = float(np.linalg.norm(other.position - m.position))
            if d < best:
                best = d
                sig = self.species[m.species].radius + self.species[other.species].radius
        return best, sig

    def _advance_pair_on_curve(self, m1, m2, t_loc, window):
        cfg = self.config
        while t_loc < window * (1.0 - _WINDOW_EPS) and not self._stopped:
            if m1.removed or m2.removed or not m1.is_bound or not m2.is_bound:
                break
            remaining = window - t_loc
            t_abs = self.t + t_loc
            t_evt = min(m1.event_time, m2.event_time) - t_abs
            if t_evt <= 0.0:
                first = m1 if m1.event_time <= m2.event_time else m2
                born = self._execute_event(first, first.event_time)
                for prod in born:
                    self._advance_molecule(prod, t_loc, window)
                continue
            sp1, sp2 = self.species[m1.species], self.species[m2.species]
            curve = self.curves[m1.bound.curve_id]
            rule = self.network.bi1d_for(m1.species, m2.species)
            k_r = rule.k_r if rule is not None else 0.0
            sigma = sp1.radius + sp2.radius
            D = sp1.D_bound + sp2.D_bound
            horizon = min(remaining, t_evt)
            lo1, hi1, gap1 = self._on_curve_neighbors_excluding(m1, m2)
            lo2, hi2, gap2 = self._on_curve_neighbors_excluding(m2, m1)
            clearance = min(gap1, gap2) / 2.0 if min(gap1, gap2) < math.inf else math.inf
            dt = quantize_step(choose_time_step(D, clearance, horizon, cfg), cfg)
            if D <= 0.0:
                t_loc += horizon
                continue
            outcome = propagate_pair_on_curve(m1.bound.s, m2.bound.s,
                                              sp1.D_bound, sp2.D_bound,
                                              sigma, k_r, dt, self.rng, self.cache)
            if outcome[0] == "reacted":
                _, tau, s_prod = outcome
                m1.removed = True
                m2.removed = True
                prod = self._new_molecule(rule.product, bound=CurveLocation(
                    curve.id, min(max(s_prod, 0.0), curve.total_length)))
                self._log(t_abs + tau, "react1d", rule.product, m1.id, m2.id,
                          where=prod.bound.s)
                self._resample_events(prod, t_abs + tau)
                self._advance_molecule(prod, t_loc + tau, window)
                return
            _, s1n, s2n = outcome
            cblocks = [b for b in self.road_blocks if b.curve_id == curve.id]
            s1n = ld.clip_on_curve_move(m1.bound.s, s1n, sp1.radius, curve,
                                        cblocks, lo1, hi1)
            s2n = ld.clip_on_curve_move(m2.bound.s, s2n, sp2.radius, curve,
                                        cblocks, lo2, hi2)
            s1n = min(max(s1n, 0.0), curve.total_length)
            s2n = min(max(s2n, 0.0), curve.total_length)
            if abs(s2n - s1n) < sigma:
                mid = (s1n + s2n) / 2.0
                sign = 1.0 if s2n >= s1n else -1.0
                s1n = mid - sign * sigma / 2.0
                s2n = mid + sign * sigma / 2.0
            m1.bound.s = min(max(s1n, 0.0), curve.total_length)
            m2.bound.s = min(max(s2n, 0.0), curve.total_length)
            t_loc += dt

    def _on_curve_neighbors_excluding(self, m, partner):
        s = m.bound.s
        rm = self.species[m.species].radius
        lo, hi = -math.inf, math.inf
        gap = math.inf
        for other in self._bound_on_curve(m.bound.curve_id):
            if other is m or other is partner or other.removed or other.bound is None:
                continue
            sig = rm + self.species[other.species].radius
            if other.bound.s <= s:
                lo = max(lo, other.bound.s + sig)
                gap = min(gap, s - other.bound.s - sig)
            else:
                hi = min(hi, other.bound.s - sig)
                gap = min(gap, other.bound.s - s - sig)
        lo_s, hi_s = self._site_obstacle_edges(m)
        return max(lo, lo_s), min(hi, hi_s), max(gap, 0.0)

    # -- window orchestration ---------------------------------------------------

    def advance_window(self):
        counts_before = self._live_counts()
        n_events_before = len(self.events)
        self.step_window()
        self._apply_transforms()
        ld.resolve_overlaps(self.molecules, self.curves, self.species,
                            self.road_blocks, self.active_sites)
        self.t += self.config.dt_split
        self._audit(counts_before, n_events_before)

    def _apply_transforms(self):
        if not self.transforms:
            return
        point_maps = {}
        old_curves = {c.id: c for c in self.curves}
        for cid, tr in sorted(self.transforms.items()):
            curve = self.curves[cid]
            new_curve, pm = ld.apply_window_transform(curve, tr,
                                                      self.config.dt_split, self.rng)
            self.curves[cid] = new_curve
            point_maps[cid] = pm
        ld.reproject_bound(self.molecules, old_curves,
                           {c.id: c for c in self.curves}, point_maps)

    def _audit(self, counts_before, n_events_before):
        """Counts change only through logged reactions."""
        expected = dict(counts_before)
        for ev in self.events[n_events_before:]:
            _, kind, species, *_ = ev
            if kind == "bind":
                reactant = next(r.reactant for r in self.network.rules
                                if getattr(r, "product", None) == species
                                and hasattr(r, "k_r") and hasattr(r, "reactant"))
                expected[reactant] = expected.get(reactant, 0) - 1
                expected[species] = expected.get(species, 0) + 1
            elif kind == "unbind":
                reactant = next(r.reactant for r in self.network.rules
                                if isinstance(r, UnbindFromCurve)
                                and r.product == species)
                expected[reactant] = expected.get(reactant, 0) - 1
                expected[species] = expected.get(species, 0) + 1
            elif kind in ("react3d", "react1d"):
                t, k, prod_sp, id1, id2, w = ev
                rule = next(r for r in self.network.rules
                            if getattr(r, "product", None) == prod_sp
                            and hasattr(r, "a"))
                expected[rule.a] = expected.get(rule.a, 0) - 1
                expected[rule.b] = expected.get(rule.b, 0) - 1
                expected[prod_sp] = expected.get(prod_sp, 0) + 1
            elif kind == "uni":
                rule = next(r for r in self.network.rules
                            if isinstance(r, Unimolecular)
                            and len(r.products) == 1 and r.products[0] == species)
                expected[rule.reactant] = expected.get(rule.reactant, 0) - 1
                expected[species] = expected.get(species, 0) + 1
            elif kind == "dissociate":
                rule = next(r for r in self.network.rules
                            if isinstance(r, Unimolecular)
                            and len(r.products) == 2 and r.reactant == species)
                expected[species] = expected.get(species, 0) - 1
                for p in rule.products:
                    expected[p] = expected.get(p, 0) + 1
            elif kind == "absorb":
                site_rule = next(st for st in self.sites if st.product == species)
                expected[site_rule.absorbs] = expected.get(site_rule.absorbs, 0) - 1
                expected[species] = expected.get(species, 0) + 1
        actual = self._live_counts()
        for sp in set(expected) | set(actual):
            if expected.get(sp, 0) != actual.get(sp, 0):
                raise EngineError(
                    f"conservation audit failed for {sp}: expected "
                    f"{expected.get(sp, 0)}, found {actual.get(sp, 0)}")

    def run(self, t_f, record_every=1, stop_species=None):
        """Advance whole windows until t >= t_f, recording count series."""
        self.stop_species = stop_species
        n_windows = int(round(t_f / self.config.dt_split))
        self._record()
        for w in range(n_windows):
            if self._stopped:
                break
            self.advance_window()
            if (w + 1) % record_every == 0:
                self._record()
        return self

    def _record(self):
        self.series.append((self.t, self._live_counts(), self.total_curve_length()))
        if self.positions_log is not None:
            rows = []
            for m in self.molecules:
                if m.removed:
                    continue
                if m.is_bound:
                    x = self.curves[m.bound.curve_id].arclength_to_point(m.bound.s)
                    rows.append((m.id, m.species, 1, x[0], x[1], x[2], m.bound.s))
                else:
                    x = m.position
                    rows.append((m.id, m.species, 0, x[0], x[1], x[2], math.nan))
            self.positions_log.append((self.t, rows))
