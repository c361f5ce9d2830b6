"""Piecewise-linear curves, triangulated reflecting boundaries and local frames.

Curves are ordered point lists; bound molecules address them by global
arclength. Boundaries are closed triangle meshes; reflection uses one plane
per vertex (point = vertex, normal = mean of incident triangle normals),
which approximates the surface well when steps are small compared to the
local curvature radius. Domains are assumed convex (sphere, cylinder).
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field

import numpy as np
from scipy.spatial import cKDTree

log = logging.getLogger(__name__)


# ---------------------------------------------------------------------------
# Polyline curves
# ---------------------------------------------------------------------------

class PolylineCurve:
    """A connected chain of straight segments approximating a space curve."""

    def __init__(self, points, reaction_radius, curve_id=0):
        pts = np.asarray(points, dtype=float)
        if pts.ndim != 2 or pts.shape[1] != 3 or pts.shape[0] < 2:
            raise ValueError("points must be an (N+1, 3) array with N >= 1")
        seg = np.diff(pts, axis=0)
        lengths = np.linalg.norm(seg, axis=1)
        if np.any(lengths <= 0.0):
            raise ValueError("curve has a zero-length segment")
        self.points = pts
        self.reaction_radius = float(reaction_radius)
        self.id = int(curve_id)
        self.seg_starts = pts[:-1]
        self.seg_vecs = seg
        self.seg_lengths = lengths
        self.seg_dirs = seg / lengths[:, None]
        # cum_lengths[i] = arclength at the start of segment i
        self.cum_lengths = np.concatenate(([0.0], np.cumsum(lengths)))
        self.total_length = float(self.cum_lengths[-1])

    @property
    def n_segments(self):
        return len(self.seg_lengths)

    def with_points(self, new_points):
        """Same identity and reaction radius, new geometry."""
        return PolylineCurve(new_points, self.reaction_radius, self.id)

    def arclength_to_point(self, s):
        """3D position at global arclength s; s outside [0, l] is clamped."""
        if s < 0.0 or s > self.total_length:
            log.warning("arclength %.3e outside [0, %.3e]; clamped", s, self.total_length)
            s = min(max(s, 0.0), self.total_length)
        i = int(np.searchsorted(self.cum_lengths, s, side="right")) - 1
        i = min(max(i, 0), self.n_segments - 1)
        return self.seg_starts[i] + (s - self.cum_lengths[i]) * self.seg_dirs[i]

    def segment_of(self, s):
        """Segment index containing arclength s (clamped)."""
        s = min(max(s, 0.0), self.total_length)
        i = int(np.searchsorted(self.cum_lengths, s, side="right")) - 1
        return min(max(i, 0), self.n_segments - 1)

    def closest_point(self, x):
        """Nearest point on the polyline.

        Returns (segment index, global arclength, distance). Ties go to the
        lowest segment index.
        """
        if self.n_segments <= 4:
            # scalar path: the vectorized one pays ~10x numpy overhead here
            x0, x1, x2 = float(x[0]), float(x[1]), float(x[2])
            best = (0, 0.0, np.inf)
            for i in range(self.n_segments):
                sx, sy, sz = self.seg_starts[i]
                vx, vy, vz = self.seg_vecs[i]
                L2 = self.seg_lengths[i] ** 2
                t = ((x0 - sx) * vx + (x1 - sy) * vy + (x2 - sz) * vz) / L2
                t = 0.0 if t < 0.0 else (1.0 if t > 1.0 else t)
                dx = x0 - sx - t * vx
                dy = x1 - sy - t * vy
                dz = x2 - sz - t * vz
                d2 = dx * dx + dy * dy + dz * dz
                if d2 < best[2]:
                    best = (i, t, d2)
            i, t, d2 = best
            s = self.cum_lengths[i] + t * self.seg_lengths[i]
            return i, float(s), math.sqrt(d2)
        x = np.asarray(x, dtype=float)
        w = x[None, :] - self.seg_starts
        t = np.einsum("ij,ij->i", w, self.seg_vecs) / (self.seg_lengths ** 2)
        t = np.clip(t, 0.0, 1.0)
        proj = self.seg_starts + t[:, None] * self.seg_vecs
        d2 = np.einsum("ij,ij->i", x - proj, x - proj)
        i = int(np.argmin(d2))  # argmin returns the first minimum: lowest index wins
        s = self.cum_lengths[i] + t[i] * self.seg_lengths[i]
        return i, float(s), float(np.sqrt(d2[i]))

    def closest_point_many(self, xs):
        """Vectorized closest_point: returns (seg_idx, s, dist) arrays."""
        xs = np.atleast_2d(np.asarray(xs, dtype=float))
        w = xs[:, None, :] - self.seg_starts[None, :, :]
        t = np.einsum("nij,ij->ni", w, self.seg_vecs) / (self.seg_lengths ** 2)[None, :]
        t = np.clip(t, 0.0, 1.0)
        proj = self.seg_starts[None, :, :] + t[..., None] * self.seg_vecs[None, :, :]
        diff = xs[:, None, :] - proj
        d2 = np.einsum("nij,nij->ni", diff, diff)
        idx = np.argmin(d2, axis=1)
        rows = np.arange(len(xs))
        s = self.cum_lengths[idx] + t[rows, idx] * self.seg_lengths[idx]
        return idx, s, np.sqrt(d2[rows, idx])

    def tangent_at(self, s):
        return self.seg_dirs[self.segment_of(s)]


@dataclass
class CurveLocation:
    """Where a bound molecule sits: curve id plus global arclength."""

    curve_id: int
    s: float

    def position(self, curves):
        return curves[self.curve_id].arclength_to_point(self.s)


def discretize_curve(parametric, s_range, n_segments, reaction_radius, curve_id=0):
    """Sample a parametric curve at uniform parameter spacing.

    ``parametric`` maps a scalar parameter to a 3-vector. Endpoints of every
    segment lie exactly on the parametric curve.
    """
    if n_segments < 1:
        raise ValueError("n_segments must be >= 1")
    s0, s1 = s_range
    params = np.linspace(s0, s1, n_segments + 1)
    pts = np.array([np.asarray(parametric(si), dtype=float) for si in params])
    return PolylineCurve(pts, reaction_radius, curve_id)


def line_curve(p, q, reaction_radius, n_segments=1, curve_id=0):
    p = np.asarray(p, dtype=float)
    q = np.asarray(q, dtype=float)
    return discretize_curve(lambda t: p + t * (q - p), (0.0, 1.0), n_segments,
                            reaction_radius, curve_id)


def spiral_curve(offset, r_c, pitch, turns, n_segments, reaction_radius,
                 phase=0.0, curve_id=0):
    """Helix along x: offset + (pitch*s, r_c cos(2 pi s + phase), r_c sin(...))."""
    offset = np.asarray(offset, dtype=float)

    def gamma(s):
        a = 2.0 * np.pi * s + phase
        return offset + np.array([pitch * s, r_c * np.cos(a), r_c * np.sin(a)])

    return discretize_curve(gamma, (0.0, turns), n_segments, reaction_radius, curve_id)


def protective_radius(x, p1, p2):
    """Distance from x to the nearer endpoint of the segment (p1, p2)."""
    x = np.asarray(x, dtype=float)
    return float(min(np.linalg.norm(x - p1), np.linalg.norm(x - p2)))


@dataclass
class CylindricalFrame:
    """Cylindrical coordinates about a segment axis.

    z runs along the axis from the segment start; (e1, e2) span the normal
    plane so that theta = atan2(x.e2, x.e1).
    """

    origin: np.ndarray
    axis: np.ndarray
    e1: np.ndarray
    e2: np.ndarray
    r: float
    theta: float
    z: float

    def to_cartesian(self, r, theta, z):
        return (self.origin + z * self.axis
                + r * (np.cos(theta) * self.e1 + np.sin(theta) * self.e2))


def _cross3(a, b):
    # np.cross has ~30us overhead on single 3-vectors; this is ~1us
    return np.array([a[1] * b[2] - a[2] * b[1],
                     a[2] * b[0] - a[0] * b[2],
                     a[0] * b[1] - a[1] * b[0]])


def _perpendicular(axis):
    # any unit vector normal to axis; pick the most stable coordinate axis
    ax, ay, az = abs(axis[0]), abs(axis[1]), abs(axis[2])
    if ax <= ay and ax <= az:
        helper = np.array([1.0, 0.0, 0.0])
    elif ay <= az:
        helper = np.array([0.0, 1.0, 0.0])
    else:
        helper = np.array([0.0, 0.0, 1.0])
    e1 = _cross3(axis, helper)
    return e1 / math.sqrt(e1 @ e1)


def cylindrical_frame(seg_start, seg_dir, x):
    """Frame of a point about a segment axis; round-trips to 1e-12 relative."""
    x = np.asarray(x, dtype=float)
    axis = np.asarray(seg_dir, dtype=float)
    rel = x - seg_start
    z = float(rel @ axis)
    radial = rel - z * axis
    r = float(np.linalg.norm(radial))
    e1 = _perpendicular(axis)
    e2 = _cross3(axis, e1)
    theta = 0.0 if r == 0.0 else float(np.arctan2(radial @ e2, radial @ e1))
    return CylindricalFrame(np.asarray(seg_start, float), axis, e1, e2, r, theta, z)


def apply_transform(curve, point_map):
    """Map every curve point; connectivity is preserved by construction."""
    new_pts = point_map(curve.points)
    new_pts = np.asarray(new_pts, dtype=float)
    if np.any(np.linalg.norm(np.diff(new_pts, axis=0), axis=1) <= 0.0):
        raise ValueError("transform produced a zero-length segment")
    return curve.with_points(new_pts)


# ---------------------------------------------------------------------------
# Triangulated reflecting boundary
# ---------------------------------------------------------------------------

class SurfaceMesh:
    """Closed outward-oriented triangle mesh with per-vertex dual planes."""

    def __init__(self, vertices, triangles):
        self.vertices = np.asarray(vertices, dtype=float)
        self.triangles = np.asarray(triangles, dtype=np.int64)
        if self.vertices.ndim != 2 or self.vertices.shape[1] != 3:
            raise ValueError("vertices must be (V, 3)")
        if self.triangles.ndim != 2 or self.triangles.shape[1] != 3:
            raise ValueError("triangles must be (T, 3)")
        self.centroid = self.vertices.mean(axis=0)
        self._orient_outward()
        self._build_dual_planes()
        self._tree = cKDTree(self.vertices)
        edges = np.concatenate([
            self.vertices[self.triangles[:, 1]] - self.vertices[self.triangles[:, 0]],
            self.vertices[self.triangles[:, 2]] - self.vertices[self.triangles[:, 1]],
            self.vertices[self.triangles[:, 0]] - self.vertices[self.triangles[:, 2]],
        ])
        self.max_edge = float(np.linalg.norm(edges, axis=1).max())
        self.bound_radius = float(
            np.linalg.norm(self.vertices - self.centroid, axis=1).max())
        # largest sphere about the centroid certain to be inside every dual
        # plane; points within it skip the nearest-vertex query entirely
        self.inner_radius = float(np.einsum(
            "ij,ij->i", self.vertices - self.centroid, self.dual_normals).min())

    def _orient_outward(self):
        v = self.vertices
        t = self.triangles
        n = np.cross(v[t[:, 1]] - v[t[:, 0]], v[t[:, 2]] - v[t[:, 0]])
        tri_centers = v[t].mean(axis=1)
        flip = np.einsum("ij,ij->i", n, tri_centers - self.centroid) < 0.0
        if np.any(flip):
            t[flip] = t[flip][:, [0, 2, 1]]

    def _build_dual_planes(self):
        v = self.vertices
        t = self.triangles
        fn = np.cross(v[t[:, 1]] - v[t[:, 0]], v[t[:, 2]] - v[t[:, 0]])
        fn /= np.linalg.norm(fn, axis=1)[:, None]
        normals = np.zeros_like(v)
        for k in range(3):
            np.add.at(normals, t[:, k], fn)
        norms = np.linalg.norm(normals, axis=1)
        if np.any(norms == 0.0):
            raise ValueError("mesh has a vertex with no incident triangles")
        self.dual_normals = normals / norms[:, None]

    # -- queries ------------------------------------------------------------

    def nearest_vertex(self, xs):
        _, idx = self._tree.query(np.atleast_2d(xs))
        return idx

    def signed_distance(self, xs):
        """Distance to the local dual plane; negative inside."""
        xs = np.atleast_2d(np.asarray(xs, dtype=float))
        idx = self.nearest_vertex(xs)
        return np.einsum("ij,ij->i", xs - self.vertices[idx], self.dual_normals[idx])

    def contains(self, xs):
        xs = np.atleast_2d(np.asarray(xs, dtype=float))
        rel = xs - self.centroid
        out = np.einsum("ij,ij->i", rel, rel) < self.inner_radius ** 2
        far = ~out
        if np.any(far):
            out[far] = self.signed_distance(xs[far]) < 0.0
        return out

    def reflect(self, proposed, max_iter=8):
        """Mirror outside points back across their local dual planes.

        Iterates because a reflection near an edge can land outside the
        neighboring plane; leftovers after ``max_iter`` are clamped just
        inside and logged.
        """
        x = np.atleast_2d(np.asarray(proposed, dtype=float)).copy()
        active = np.arange(len(x))
        for _ in range(max_iter):
            idx = self.nearest_vertex(x[active])
            d = np.einsum("ij,ij->i", x[active] - self.vertices[idx],
                          self.dual_normals[idx])
            outside = d > 0.0
            if not np.any(outside):
                return x if len(x) > 1 else x[0]
            rows = active[outside]
            x[rows] -= 2.0 * d[outside, None] * self.dual_normals[idx[outside]]
            active = rows
        idx = self.nearest_vertex(x[active])
        d = np.einsum("ij,ij->i", x[active] - self.vertices[idx], self.dual_normals[idx])
        still = d > 0.0
        if np.any(still):
            rows = active[still]
            eps = 1e-6 * self.bound_radius
            x[rows] -= (d[still] + eps)[:, None] * self.dual_normals[idx[still]]
            log.warning("reflection did not converge for %d point(s); clamped inside",
                        len(rows))
        return x if len(x) > 1 else x[0]


def reflect_at_boundary(x_old, x_proposed, mesh):
    """Reflect a proposed move at the mesh; inside proposals pass through."""
    del x_old  # the plane is chosen from the proposal's nearest vertex
    x = np.asarray(x_proposed, dtype=float)
    d = x - mesh.centroid
    if d @ d < mesh.inner_radius ** 2:
        return x
    if bool(mesh.contains(x)[0]):
        return x
    return mesh.reflect(x)


# -- generators --------------------------------------------------------------

def icosphere(radius, subdivisions=3):
    """Icosahedron subdivided ``subdivisions`` times, vertices on the sphere."""
    phi = (1.0 + np.sqrt(5.0)) / 2.0
    verts = np.array([
        [-1, phi, 0], [1, phi, 0], [-1, -phi, 0], [1, -phi, 0],
        [0, -1, phi], [0, 1, phi], [0, -1, -phi], [0, 1, -phi],
        [phi, 0, -1], [phi, 0, 1], [-phi, 0, -1], [-phi, 0, 1],
    ], dtype=float)
    verts /= np.linalg.norm(verts, axis=1)[:, None]
    faces = [
        (0, 11, 5), (0, 5, 1), (0, 1, 7), (0, 7, 10), (0, 10, 11),
        (1, 5, 9), (5, 11, 4), (11, 10, 2), (10, 7, 6), (7, 1, 8),
        (3, 9, 4), (3, 4, 2), (3, 2, 6), (3, 6, 8), (3, 8, 9),
        (4, 9, 5), (2, 4, 11), (6, 2, 10), (8, 6, 7), (9, 8, 1),
    ]
    verts = [v for v in verts]
    cache = {}

    def midpoint(i, j):
        key = (min(i, j), max(i, j))
        if key not in cache:
            m = verts[i] + verts[j]
            m /= np.linalg.norm(m)
            verts.append(m)
            cache[key] = len(verts) - 1
        return cache[key]

    for _ in range(subdivisions):
        new_faces = []
        for a, b, c in faces:
            ab, bc, ca = midpoint(a, b), midpoint(b, c), midpoint(c, a)
            new_faces += [(a, ab, ca), (b, bc, ab), (c, ca, bc), (ab, bc, ca)]
        faces = new_faces
    return SurfaceMesh(radius * np.array(verts), np.array(faces))


def cylinder_mesh(radius, height, n_around=48, n_axial=12, n_cap_rings=4):
    """Closed cylinder along the x axis, x in [-height/2, height/2]."""
    angles = np.linspace(0.0, 2.0 * np.pi, n_around, endpoint=False)
    xs = np.linspace(-height / 2.0, height / 2.0, n_axial + 1)
    verts = []
    index = {}
    for i, x in enumerate(xs):
        for j, a in enumerate(angles):
            index[("side", i, j)] = len(verts)
            verts.append([x, radius * np.cos(a), radius * np.sin(a)])
    tris = []
    for i in range(n_axial):
        for j in range(n_around):
            j2 = (j + 1) % n_around
            v00 = index[("side", i, j)]
            v01 = index[("side", i, j2)]
            v10 = index[("side", i + 1, j)]
            v11 = index[("side", i + 1, j2)]
            tris += [(v00, v01, v11), (v00, v11, v10)]
    # caps: concentric rings closed by a center vertex
    for cap, x, ring0 in ((0, xs[0], 0), (1, xs[-1], n_axial)):
        prev = [index[("side", ring0, j)] for j in range(n_around)]
        for k in range(1, n_cap_rings):
            r = radius * (1.0 - k / n_cap_rings)
            ring = []
            for a in angles:
                ring.append(len(verts))
                verts.append([x, r * np.cos(a), r * np.sin(a)])
            for j in range(n_around):
                j2 = (j + 1) % n_around
                tris += [(prev[j], prev[j2], ring[j2]), (prev[j], ring[j2], ring[j])]
            prev = ring
        center = len(verts)
        verts.append([x, 0.0, 0.0])
        for j in range(n_around):
            j2 = (j + 1) % n_around
            tris.append((prev[j], prev[j2], center))
    return SurfaceMesh(np.array(verts), np.array(tris))


# -- ASCII mesh files ---------------------------------------------------------

def read_mesh(path):
    """Vertex count, vertices (three decimals per line), triangle count, index triples."""
    with open(path) as fh:
        tokens = fh.read().split()
    pos = 0
    nv = int(tokens[pos]); pos += 1
    verts = np.array(tokens[pos:pos + 3 * nv], dtype=float).reshape(nv, 3)
    pos += 3 * nv
    nt = int(tokens[pos]); pos += 1
    tris = np.array(tokens[pos:pos + 3 * nt], dtype=np.int64).reshape(nt, 3)
    return SurfaceMesh(verts, tris)


def write_mesh(mesh, path):
    with open(path, "w") as fh:
        fh.write(f"{len(mesh.vertices)}\n")
        for v in mesh.vertices:
            fh.write(f"{v[0]:.17g} {v[1]:.17g} {v[2]:.17g}\n")
        fh.write(f"{len(mesh.triangles)}\n")
        for t in mesh.triangles:
            fh.write(f"{t[0]} {t[1]} {t[2]}\n")
