"""Per-window curve transformations and the post-transform cleanup.

At every splitting window boundary the curves rotate and grow/shrink while
the molecules are frozen; bound molecules ride along with their curve
(their 3D point is mapped by the same transform before reprojection, so
rigid motions preserve arclengths exactly and similarity scaling rescales
them by the length ratio). Afterwards overlapping molecules are pushed
apart deterministically.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field

import numpy as np

from . import geometry as geo

log = logging.getLogger(__name__)


@dataclass
class RoadBlock:
    """Stationary, non-reactive but reflective obstacle on a curve."""

    curve_id: int
    s: float
    radius: float


@dataclass
class CurveTransform:
    """Random rigid rotation and clamped length change, applied per window."""

    rotate: bool = False
    grow: bool = False
    D_l: float = 0.0
    l_min: float = 0.0
    l_max: float = math.inf

    def validate(self, errors, where):
        if self.grow:
            if self.l_min <= 0.0:
                errors.append(f"{where}: l_min must be > 0")
            if self.l_max <= self.l_min:
                errors.append(f"{where}: l_max must exceed l_min")


def rotation_matrix(dtheta, dphi):
    """Rotation by dtheta about x, then dphi about y."""
    ct, st = math.cos(dtheta), math.sin(dtheta)
    cp, sp = math.cos(dphi), math.sin(dphi)
    rx = np.array([[1.0, 0.0, 0.0], [0.0, ct, -st], [0.0, st, ct]])
    ry = np.array([[cp, 0.0, sp], [0.0, 1.0, 0.0], [-sp, 0.0, cp]])
    return ry @ rx


def rotate_curve(curve, dtheta, dphi):
    """Rigid rotation about the origin; lengths are preserved exactly."""
    R = rotation_matrix(dtheta, dphi)
    return geo.apply_transform(curve, lambda pts: pts @ R.T)


def grow_shrink(curve, X, l_min, l_max):
    """Scale the curve about its centroid to length clamp(l + X)."""
    l_old = curve.total_length
    l_new = min(max(l_old + X, l_min), l_max)
    ratio = l_new / l_old
    c = curve.points.mean(axis=0)
    return geo.apply_transform(curve, lambda pts: c + ratio * (pts - c)), ratio


def window_point_map(transform, dt_split, rng):
    """Draw this window's increments; returns (point_map, log entry).

    Rotation increments are 2*pi*dt*X_i about the x and y axes; the length
    increment is Gaussian with variance 2*D_l*dt, clamped downstream.
    """
    R = None
    if transform.rotate:
        x1, x2 = rng.normal(), rng.normal()
        R = rotation_matrix(2.0 * math.pi * dt_split * x1,
                            2.0 * math.pi * dt_split * x2)
    X = rng.normal(0.0, math.sqrt(2.0 * transform.D_l * dt_split)) if transform.grow else 0.0
    return R, X


def apply_window_transform(curve, transform, dt_split, rng):
    """One operator-splitting transform step for a single curve."""
    R, X = window_point_map(transform, dt_split, rng)
    new_curve = curve
    if R is not None:
        new_curve = geo.apply_transform(new_curve, lambda pts: pts @ R.T)
    if transform.grow:
        new_curve, _ = grow_shrink(new_curve, X, transform.l_min, transform.l_max)

    def point_map(pts):
        out = np.atleast_2d(np.asarray(pts, dtype=float))
        if R is not None:
            out = out @ R.T
        if transform.grow:
            c_old = (curve.points @ R.T).mean(axis=0) if R is not None \
                else curve.points.mean(axis=0)
            ratio = new_curve.total_length / curve.total_length
            out = c_old + ratio * (out - c_old)
        return out

    return new_curve, point_map


def reproject_bound(molecules, old_curves, new_curves, point_maps):
    """Carry bound molecules through their curve's transform.

    The molecule's 3D point under the old curve is mapped by the same
    transform and then projected to the closest point of the new curve;
    points carried past a shrunk end land on the endpoint.
    """
    for m in molecules:
        if m.bound is None:
            continue
        cid = m.bound.curve_id
        pm = point_maps.get(cid)
        if pm is None:
            continue
        old_pos = old_curves[cid].arclength_to_point(m.bound.s)
        new_pos = pm(old_pos)[0]
        _, s_new, _ = new_curves[cid].closest_point(new_pos)
        m.bound.s = min(max(s_new, 0.0), new_curves[cid].total_length)


def _intervals_between_obstacles(curve, blocks, sites, radius):
    """Feasible [lo, hi] intervals for a molecule of the given radius."""
    edges = [0.0]
    for b in sorted(blocks, key=lambda b: b.s):
        edges += [b.s - b.radius - radius, b.s + b.radius + radius]
    edges.append(curve.total_length)
    return [(edges[i], edges[i + 1]) for i in range(0, len(edges), 2)]


def clip_on_curve_move(s_old, s_new, radius, curve, blocks,
                       neighbor_lo=None, neighbor_hi=None):
    """Clip a proposed arclength move at road blocks, curve ends and
    neighbor contact; reflective clipping stops at contact."""
    lo, hi = 0.0, curve.total_length
    for b in blocks:
        edge_lo = b.s - b.radius - radius
        edge_hi = b.s + b.radius + radius
        if b.s < s_old:
            lo = max(lo, edge_hi)
        elif b.s > s_old:
            hi = min(hi, edge_lo)
        # a block exactly at s_old cannot happen post overlap resolution
    if neighbor_lo is not None:
        lo = max(lo, neighbor_lo)
    if neighbor_hi is not None:
        hi = min(hi, neighbor_hi)
    if lo > hi:
        return s_old
    return min(max(s_new, lo), hi)


def resolve_overlaps(molecules, curves, species, blocks, sites):
    """Push apart overlapping molecules after a transform step.

    On-curve clusters are respaced symmetrically about their centroid at
    contact separation (respecting curve ends and road blocks); free
    molecules inside a curve's reaction radius are pushed radially outward.
    Processing order is deterministic: (curve id, arclength), then molecule
    id for free molecules.
    """
    by_curve = {}
    for m in molecules:
        if m.bound is not None:
            by_curve.setdefault(m.bound.curve_id, []).append(m)
    for cid in sorted(by_curve):
        curve = curves[cid]
        mols = sorted(by_curve[cid], key=lambda m: (m.bound.s, m.id))
        cblocks = [b for b in blocks if b.curve_id == cid]
        intervals = _intervals_between_obstacles(curve, cblocks, sites, 0.0)
        for lo, hi in intervals:
            group = [m for m in mols if lo <= m.bound.s <= hi]
            _respace_interval(group, species, lo, hi)
    for m in sorted(molecules, key=lambda m: m.id):
        if m.bound is not None:
            continue
        for curve in curves:
            _, s_near, d = curve.closest_point(m.position)
            sig = curve.reaction_radius
            if d < sig:
                base = curve.arclength_to_point(s_near)
                if d > 1e-30:
                    direction = (m.position - base) / d
                else:
                    direction = geo._perpendicular(curve.tangent_at(s_near))
                m.position = base + sig * direction


def _respace_interval(group, species, lo, hi):
    """Respace one bounded run of molecules so no pair overlaps."""
    n = len(group)
    i = 0
    while i < n:
        # grow a cluster of consecutively overlapping molecules
        j = i
        while j + 1 < n:
            sig = species[group[j].species].radius + species[group[j + 1].species].radius
            if group[j + 1].bound.s - group[j].bound.s < sig * (1.0 - 1e-12):
                j += 1
            else:
                break
        if j > i:
            cluster = group[i:j + 1]
            sigs = [species[a.species].radius + species[b.species].radius
                    for a, b in zip(cluster, cluster[1:])]
            span = sum(sigs)
            center = sum(m.bound.s for m in cluster) / len(cluster)
            start = center - span / 2.0
            start = min(max(start, lo + 1e-15), max(hi - span, lo + 1e-15))
            if span > hi - lo:
                log.warning("cannot fully separate %d molecules in [%g, %g]; "
                            "left at minimal feasible spacing", len(cluster), lo, hi)
                sigs = [(hi - lo) / max(len(cluster) - 1, 1)] * (len(cluster) - 1)
                start = lo
            s = start
            for k, m in enumerate(cluster):
                m.bound.s = s
                if k < len(sigs):
                    s += sigs[k]
        i = j + 1
