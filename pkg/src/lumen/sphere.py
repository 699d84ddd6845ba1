"""Spherical aperture discretization and target measures.

The aperture is discretized with a subdivided icosahedron restricted to the
domain; node weights come from spherical-excess triangle areas, with boundary
triangles clipped by deterministic subsampling. Subdivision nests nodes, so
doubling the resolution keeps every coarse node.

Target measures are either finite atom lists (points for the near field,
unit directions for the far field) or a planar density patch materialized
as a fixed fine sample grid; hierarchical cells partition those samples
exactly, which makes cell masses conserved across refinement levels.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np

from .errors import NumericError

__all__ = [
    "Cell",
    "CellPartition",
    "DomainSpec",
    "IntensityField",
    "PlanarPatch",
    "SphericalGrid",
    "TargetMeasure",
    "build_grid",
    "build_partition",
    "integrate",
    "refine_partition",
]

_PHI = (1.0 + np.sqrt(5.0)) / 2.0


# ---------------------------------------------------------------------------
# Domains on the unit sphere
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class DomainSpec:
    """A region of the unit sphere: a spherical cap or a convex geodesic
    polygon. Caps cover the hemisphere (half angle pi/2) and the full
    sphere (half angle pi) as special cases."""

    kind: str  # "cap" | "polygon"
    axis: Optional[np.ndarray] = None
    half_angle: Optional[float] = None
    vertices: Optional[np.ndarray] = None

    @classmethod
    def cap(cls, axis, half_angle):
        a = np.asarray(axis, dtype=float)
        n = np.linalg.norm(a)
        if n <= 0.0:
            raise ValueError("cap axis must be nonzero")
        if not 0.0 < half_angle <= np.pi:
            raise ValueError("cap half angle must lie in (0, pi]")
        return cls("cap", axis=a / n, half_angle=float(half_angle))

    @classmethod
    def hemisphere(cls, axis=(0.0, 0.0, 1.0)):
        return cls.cap(axis, np.pi / 2.0)

    @classmethod
    def full_sphere(cls):
        return cls.cap((0.0, 0.0, 1.0), np.pi)

    @classmethod
    def polygon(cls, vertices):
        v = np.asarray(vertices, dtype=float)
        if v.ndim != 2 or v.shape[0] < 3 or v.shape[1] != 3:
            raise ValueError("polygon needs at least 3 vertices of shape (n, 3)")
        v = v / np.linalg.norm(v, axis=1, keepdims=True)
        return cls("polygon", vertices=v)

    def contains(self, points, tol=1e-12):
        """Boolean mask of points inside the closed domain."""
        p = np.atleast_2d(np.asarray(points, dtype=float))
        if self.kind == "cap":
            mask = p @ self.axis >= np.cos(self.half_angle) - tol
        else:
            # convex polygon: inside every edge's great-circle half space
            v = self.vertices
            mask = np.ones(p.shape[0], dtype=bool)
            for i in range(v.shape[0]):
                n = np.cross(v[i], v[(i + 1) % v.shape[0]])
                mask &= p @ n >= -tol * np.linalg.norm(n)
        return mask if np.asarray(points).ndim > 1 else bool(mask[0])

    def boundary_distance(self, points):
        """Signed angular margin to the boundary (positive inside), used to
        spot triangles that may straddle the boundary."""
        p = np.atleast_2d(np.asarray(points, dtype=float))
        if self.kind == "cap":
            if self.half_angle >= np.pi:  # full sphere: no boundary
                return np.full(p.shape[0], np.pi)
            return self.half_angle - np.arccos(np.clip(p @ self.axis, -1.0, 1.0))
        v = self.vertices
        margins = np.full(p.shape[0], np.inf)
        for i in range(v.shape[0]):
            n = np.cross(v[i], v[(i + 1) % v.shape[0]])
            n = n / np.linalg.norm(n)
            margins = np.minimum(margins, np.arcsin(np.clip(p @ n, -1.0, 1.0)))
        return margins

    def area(self):
        """Closed-form area: cap 2 pi (1 - cos a); polygon by Girard excess."""
        if self.kind == "cap":
            return 2.0 * np.pi * (1.0 - np.cos(self.half_angle))
        v = self.vertices
        centroid = v.mean(axis=0)
        centroid /= np.linalg.norm(centroid)
        total = 0.0
        for i in range(v.shape[0]):
            total += _triangle_excess(
                centroid[None], v[i][None], v[(i + 1) % v.shape[0]][None]
            )[0]
        return float(total)

    def enclosing_cap(self):
        """(axis, half angle) of a cap covering the domain, for sampling."""
        if self.kind == "cap":
            return self.axis, self.half_angle
        centroid = self.vertices.mean(axis=0)
        centroid /= np.linalg.norm(centroid)
        ang = np.arccos(np.clip(self.vertices @ centroid, -1.0, 1.0)).max()
        return centroid, min(float(ang) * 1.0000001 + 1e-9, np.pi)


# ---------------------------------------------------------------------------
# Icosphere construction
# ---------------------------------------------------------------------------


def _icosahedron():
    """Golden-ratio icosahedron; the vertex set is exactly symmetric under
    sign flips of every coordinate, so symmetric configurations produce
    bitwise ties on the symmetry planes."""
    f = _PHI
    verts = np.array(
        [
            (-1, f, 0), (1, f, 0), (-1, -f, 0), (1, -f, 0),
            (0, -1, f), (0, 1, f), (0, -1, -f), (0, 1, -f),
            (f, 0, -1), (f, 0, 1), (-f, 0, -1), (-f, 0, 1),
        ],
        dtype=float,
    )
    verts /= np.linalg.norm(verts, axis=1, keepdims=True)
    faces = np.array(
        [
            (0, 11, 5), (0, 5, 1), (0, 1, 7), (0, 7, 10), (0, 10, 11),
            (1, 5, 9), (5, 11, 4), (11, 10, 2), (10, 7, 6), (7, 1, 8),
            (3, 9, 4), (3, 4, 2), (3, 2, 6), (3, 6, 8), (3, 8, 9),
            (4, 9, 5), (2, 4, 11), (6, 2, 10), (8, 6, 7), (9, 8, 1),
        ],
        dtype=np.int64,
    )
    return verts, faces


def _subdivide(verts, faces):
    """One 4-to-1 subdivision round; new vertices are normalized edge
    midpoints, deduplicated so the coarse vertex set is preserved."""
    edges = np.concatenate(
        [faces[:, [0, 1]], faces[:, [1, 2]], faces[:, [2, 0]]], axis=0
    )
    edges = np.sort(edges, axis=1)
    uniq, inverse = np.unique(edges, axis=0, return_inverse=True)
    mids = verts[uniq[:, 0]] + verts[uniq[:, 1]]
    mids /= np.linalg.norm(mids, axis=1, keepdims=True)
    mid_idx = inverse.reshape(3, -1).T + verts.shape[0]
    a, b, c = faces[:, 0], faces[:, 1], faces[:, 2]
    ab, bc, ca = mid_idx[:, 0], mid_idx[:, 1], mid_idx[:, 2]
    new_faces = np.concatenate(
        [
            np.stack([a, ab, ca], axis=1),
            np.stack([b, bc, ab], axis=1),
            np.stack([c, ca, bc], axis=1),
            np.stack([ab, bc, ca], axis=1),
        ],
        axis=0,
    )
    return np.concatenate([verts, mids], axis=0), new_faces


def _icosphere(level, domain=None):
    """Icosphere at the given subdivision level; with a domain, faces that
    provably cannot meet it are pruned before subdividing (the boundary
    margin is 1-Lipschitz in angle, so a face whose best vertex margin is
    below -1.5x its circumradius lies strictly outside)."""
    verts, faces = _icosahedron()
    for lv in range(level):
        if domain is not None and lv >= 3:
            size = 1.11 / 2**lv
            margins = domain.boundary_distance(verts)
            keep = np.max(margins[faces], axis=1) > -1.5 * size
            faces = faces[keep]
        verts, faces = _subdivide(verts, faces)
    if domain is not None:
        used = np.unique(faces)
        remap = np.full(verts.shape[0], -1, dtype=np.int64)
        remap[used] = np.arange(used.size)
        verts, faces = verts[used], remap[faces]
    return verts, faces


def _triangle_excess(a, b, c):
    """Spherical triangle area by the van Oosterom-Strackee formula."""
    triple = np.abs(np.sum(a * np.cross(b, c), axis=-1))
    denom = 1.0 + np.sum(a * b, axis=-1) + np.sum(b * c, axis=-1) + np.sum(c * a, axis=-1)
    return 2.0 * np.arctan2(triple, denom)


def _lattice_tables(depth):
    """Barycentric corner lattice of the 4^depth sub-triangles plus the
    corner-index triples of each sub-triangle."""
    k = 2**depth
    index = {}
    corners = []
    for i in range(k + 1):
        for j in range(k + 1 - i):
            index[(i, j)] = len(corners)
            corners.append((i / k, j / k, (k - i - j) / k))
    tris = []
    for i in range(k):
        for j in range(k - i):
            tris.append((index[(i, j)], index[(i + 1, j)], index[(i, j + 1)]))
            if i + j < k - 1:
                tris.append((index[(i + 1, j)], index[(i + 1, j + 1)], index[(i, j + 1)]))
    return np.asarray(corners, dtype=float), np.asarray(tris, dtype=np.int64)


def _cut_fraction(m1, m2, m3):
    """Area fraction of {margin >= 0} on a triangle with corner margins
    m1, m2, m3, for a margin linear on the triangle. Exact for straight
    cuts, second-order accurate for smooth boundaries."""
    pos = np.stack([m1 >= 0.0, m2 >= 0.0, m3 >= 0.0])
    npos = pos.sum(axis=0)
    frac = np.where(npos == 3, 1.0, 0.0)

    def corner_share(a, b, c):
        # share of the corner with margin a against opposite margins b, c
        return a * a / ((a - b) * (a - c))

    m = np.stack([m1, m2, m3])
    with np.errstate(divide="ignore", invalid="ignore"):
        for solo in range(3):
            o1, o2 = (solo + 1) % 3, (solo + 2) % 3
            share = corner_share(m[solo], m[o1], m[o2])
            frac = np.where((npos == 1) & pos[solo], share, frac)
            frac = np.where((npos == 2) & ~pos[solo], 1.0 - share, frac)
    return frac


@dataclass(frozen=True)
class SphericalGrid:
    """Quadrature nodes and weights for a spherical domain, plus the
    triangulation restricted to kept nodes (used for meshes and for
    neighbor-pair difference quotients)."""

    nodes: np.ndarray  # (n, 3) unit vectors inside the closed domain
    weights: np.ndarray  # (n,) positive steradian weights
    faces: np.ndarray  # (m, 3) indices into nodes
    domain: DomainSpec
    level: int

    @property
    def node_count(self):
        return self.nodes.shape[0]

    @property
    def total_weight(self):
        return float(np.sum(self.weights))

    def edges(self):
        e = np.concatenate(
            [self.faces[:, [0, 1]], self.faces[:, [1, 2]], self.faces[:, [2, 0]]],
            axis=0,
        )
        return np.unique(np.sort(e, axis=1), axis=0)


def _level_for_resolution(domain, resolution):
    frac = domain.area() / (4.0 * np.pi)
    level = 0
    while (10 * 4**level + 2) * frac < resolution:
        if level >= 10 or 20 * 4 ** (level + 1) * frac > 8e6:
            break  # face budget: refuse to build pathological grids
        level += 1
    return level


def build_grid(domain: DomainSpec, resolution=20000, clip_depth=3) -> SphericalGrid:
    """Build quadrature nodes for the domain with roughly ``resolution``
    nodes. Triangles near the boundary contribute the area of their inside
    part, found by linear cuts on a 4^clip_depth geodesic sub-lattice;
    the cut is exact for boundaries straight across a sub-triangle."""
    if domain is None:
        raise ValueError("domain must be provided")
    if resolution < 4:
        raise ValueError("resolution hint must be at least 4")
    level = _level_for_resolution(domain, resolution)
    verts, faces = _icosphere(level, domain)

    inside = domain.contains(verts)
    areas = _triangle_excess(verts[faces[:, 0]], verts[faces[:, 1]], verts[faces[:, 2]])

    in_count = inside[faces].sum(axis=1)
    margin = domain.boundary_distance(verts)
    face_margin = np.min(margin[faces], axis=1)
    face_size = np.sqrt(areas.max()) * 2.0
    on_boundary = (in_count % 3 != 0) | (np.abs(face_margin) <= face_size)

    eff = np.where((in_count == 3) & ~on_boundary, areas, 0.0)

    bidx = np.nonzero(on_boundary)[0]
    if bidx.size:
        corners, tris = _lattice_tables(clip_depth)
        va, vb, vc = (verts[faces[bidx, k]] for k in range(3))
        pts = (
            corners[None, :, 0, None] * va[:, None, :]
            + corners[None, :, 1, None] * vb[:, None, :]
            + corners[None, :, 2, None] * vc[:, None, :]
        )
        pts /= np.linalg.norm(pts, axis=2, keepdims=True)
        flat = pts.reshape(-1, 3)
        m = domain.boundary_distance(flat).reshape(len(bidx), -1)
        sub_area = _triangle_excess(
            pts[:, tris[:, 0], :], pts[:, tris[:, 1], :], pts[:, tris[:, 2], :]
        )
        sub_frac = _cut_fraction(m[:, tris[:, 0]], m[:, tris[:, 1]], m[:, tris[:, 2]])
        eff[bidx] = np.sum(sub_area * sub_frac, axis=1)
    keep_face = eff > 0.0
    share = inside[faces] & keep_face[:, None]
    n_share = share.sum(axis=1)
    ok = keep_face & (n_share > 0)

    weights = np.zeros(verts.shape[0])
    contrib = np.where(ok, eff / np.maximum(n_share, 1), 0.0)
    for k in range(3):
        np.add.at(weights, faces[share[:, k] & ok, k], contrib[share[:, k] & ok])

    keep_node = inside & (weights > 0.0)
    if not np.any(keep_node):
        raise ValueError("empty domain: no quadrature nodes")
    index = -np.ones(verts.shape[0], dtype=np.int64)
    index[keep_node] = np.arange(int(keep_node.sum()))
    kept_faces = faces[np.all(keep_node[faces], axis=1)]
    return SphericalGrid(
        nodes=verts[keep_node],
        weights=weights[keep_node],
        faces=index[kept_faces],
        domain=domain,
        level=level,
    )


def integrate(grid: SphericalGrid, phi) -> float:
    """Quadrature sum of phi over the domain; phi is a callable on the node
    array or a per-node value array."""
    values = phi(grid.nodes) if callable(phi) else np.asarray(phi, dtype=float)
    values = np.broadcast_to(values, (grid.node_count,))
    bad = ~np.isfinite(values)
    if np.any(bad):
        raise NumericError(f"non-finite integrand at node {int(np.nonzero(bad)[0][0])}")
    return float(np.sum(grid.weights * values))


# ---------------------------------------------------------------------------
# Intensity
# ---------------------------------------------------------------------------


class IntensityField:
    """Radiant intensity over the aperture, bound to a grid: caches node
    values and the total flux by quadrature."""

    def __init__(self, evaluator: Callable[[np.ndarray], np.ndarray], grid: SphericalGrid):
        self.evaluator = evaluator
        self.grid = grid
        values = np.asarray(evaluator(grid.nodes), dtype=float)
        values = np.broadcast_to(values, (grid.node_count,)).copy()
        if np.any(~np.isfinite(values)) or np.any(values < 0.0):
            raise ValueError("intensity must be finite and nonnegative")
        self.values = values
        self.total_flux = float(np.sum(grid.weights * values))

    @classmethod
    def constant(cls, value, grid):
        v = float(value)
        if v < 0.0:
            raise ValueError("intensity must be nonnegative")
        return cls(lambda x: np.full(np.atleast_2d(x).shape[0], v), grid)

    @classmethod
    def from_node_values(cls, values, grid):
        arr = np.asarray(values, dtype=float)
        if arr.shape != (grid.node_count,):
            raise ValueError(
                f"node table has {arr.shape[0] if arr.ndim else 1} values, "
                f"grid has {grid.node_count} nodes"
            )

        def nearest(x):
            p = np.atleast_2d(x)
            idx = np.argmax(p @ grid.nodes.T, axis=1)
            return arr[idx]

        field = cls(nearest, grid)
        field.values = arr.copy()  # exact on nodes regardless of lookup ties
        field.total_flux = float(np.sum(grid.weights * arr))
        return field

    def __call__(self, x):
        return np.asarray(self.evaluator(x), dtype=float)


# ---------------------------------------------------------------------------
# Planar patches and target measures
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class PlanarPatch:
    """Rectangle on a plane, given by an origin point and two orthonormal
    in-plane axes with coordinate ranges."""

    origin: np.ndarray
    u_axis: np.ndarray
    v_axis: np.ndarray
    u_range: tuple
    v_range: tuple

    def __post_init__(self):
        u, v = np.asarray(self.u_axis), np.asarray(self.v_axis)
        if abs(np.linalg.norm(u) - 1) > 1e-12 or abs(np.linalg.norm(v) - 1) > 1e-12:
            raise ValueError("patch axes must be unit vectors")
        if abs(float(u @ v)) > 1e-12:
            raise ValueError("patch axes must be orthogonal")
        if self.u_range[0] >= self.u_range[1] or self.v_range[0] >= self.v_range[1]:
            raise ValueError("patch ranges must be nonempty")

    def to_xyz(self, uv):
        uv = np.atleast_2d(np.asarray(uv, dtype=float))
        return self.origin + uv[:, :1] * self.u_axis + uv[:, 1:2] * self.v_axis

    @property
    def diameter(self):
        du = self.u_range[1] - self.u_range[0]
        dv = self.v_range[1] - self.v_range[0]
        return float(np.hypot(du, dv))

    def max_distance_to_origin(self):
        corners = [
            (self.u_range[i], self.v_range[j]) for i in (0, 1) for j in (0, 1)
        ]
        return float(np.max(np.linalg.norm(self.to_xyz(corners), axis=1)))

    def min_distance_to_origin(self):
        # distance from O to the rectangle: project, clamp, measure
        rel = -self.origin
        u = float(np.clip(rel @ self.u_axis, *self.u_range))
        v = float(np.clip(rel @ self.v_axis, *self.v_range))
        return float(np.linalg.norm(self.to_xyz([(u, v)])[0]))


class TargetMeasure:
    """Prescribed output measure: discrete atoms (near-field points or
    far-field directions) or a density on a planar patch.

    Zero-weight atoms are rejected: null cells never enter the solve.
    """

    def __init__(self, kind, points, masses, overshoot_index=0, patch=None,
                 density=None, sample_uv=None, sample_mass=None, cell_du=None):
        self.kind = kind
        self.points = np.asarray(points, dtype=float)
        self.masses = np.asarray(masses, dtype=float)
        self.overshoot_index = int(overshoot_index)
        self.patch = patch
        self.density = density
        self.sample_uv = sample_uv
        self.sample_mass = sample_mass
        self._cell_du = cell_du
        if self.kind != "planar-density":
            if np.any(self.masses <= 0.0):
                raise ValueError("atom weights must be strictly positive")
            if not 0 <= self.overshoot_index < self.points.shape[0]:
                raise ValueError("overshoot index out of range")

    @classmethod
    def discrete(cls, points, weights, overshoot_index=0):
        pts = np.atleast_2d(np.asarray(points, dtype=float))
        if np.any(np.linalg.norm(pts, axis=1) <= 0.0):
            raise ValueError("target points must avoid the origin")
        return cls("discrete", pts, weights, overshoot_index)

    @classmethod
    def directions(cls, dirs, weights, overshoot_index=0):
        d = np.atleast_2d(np.asarray(dirs, dtype=float))
        n = np.linalg.norm(d, axis=1)
        if np.any(np.abs(n - 1.0) > 1e-9):
            raise ValueError("far-field targets must be unit directions")
        return cls("far-directions", d / n[:, None], weights, overshoot_index)

    @classmethod
    def planar(cls, patch: PlanarPatch, density, overshoot_uv, samples_per_axis=256):
        """Density on a patch, materialized on a fixed midpoint sample grid;
        all later cell masses are sums over these samples, so refinement
        conserves mass exactly."""
        u0, u1 = patch.u_range
        v0, v1 = patch.v_range
        k = int(samples_per_axis)
        du, dv = (u1 - u0) / k, (v1 - v0) / k
        uu = u0 + (np.arange(k) + 0.5) * du
        vv = v0 + (np.arange(k) + 0.5) * dv
        gu, gv = np.meshgrid(uu, vv, indexing="ij")
        uv = np.stack([gu.ravel(), gv.ravel()], axis=1)
        g = np.asarray(density(uv[:, 0], uv[:, 1]), dtype=float)
        g = np.broadcast_to(g, (uv.shape[0],))
        if np.any(~np.isfinite(g)) or np.any(g < 0.0):
            raise ValueError("density must be finite and nonnegative")
        mass = g * du * dv
        if mass.sum() <= 0.0:
            raise ValueError("density has zero total mass")
        p0 = np.asarray(overshoot_uv, dtype=float)
        if not (u0 <= p0[0] <= u1 and v0 <= p0[1] <= v1):
            raise ValueError("overshoot point must lie on the patch")
        obj = cls(
            "planar-density",
            patch.to_xyz([p0]),
            np.array([mass.sum()]),
            0,
            patch=patch,
            density=density,
            sample_uv=uv,
            sample_mass=mass,
            cell_du=(du, dv),
        )
        obj.overshoot_uv = p0
        return obj

    @property
    def atom_count(self):
        return self.points.shape[0]

    @property
    def total(self):
        return float(np.sum(self.sample_mass if self.kind == "planar-density" else self.masses))

    @property
    def max_op(self):
        """M: largest distance from the source to the target."""
        if self.kind == "planar-density":
            return self.patch.max_distance_to_origin()
        if self.kind == "far-directions":
            raise ValueError("far-field targets have no source distance scale")
        return float(np.max(np.linalg.norm(self.points, axis=1)))

    @property
    def min_op(self):
        if self.kind == "planar-density":
            return self.patch.min_distance_to_origin()
        return float(np.min(np.linalg.norm(self.points, axis=1)))

    @property
    def diameter(self):
        if self.kind == "planar-density":
            return self.patch.diameter
        if self.points.shape[0] == 1:
            return 0.0
        diffs = self.points[:, None, :] - self.points[None, :, :]
        return float(np.max(np.linalg.norm(diffs, axis=2)))

    def target_directions(self):
        """Unit directions of the atoms as seen from the source (D*)."""
        if self.kind == "far-directions":
            return self.points
        pts = self.points if self.kind == "discrete" else self.patch.to_xyz(self.sample_uv[::7])
        return pts / np.linalg.norm(pts, axis=1, keepdims=True)


# ---------------------------------------------------------------------------
# Hierarchical cells on a planar target
# ---------------------------------------------------------------------------


@dataclass
class Cell:
    """Axis-aligned box on the patch, its representative point and mass."""

    u0: float
    u1: float
    v0: float
    v1: float
    rep_uv: np.ndarray
    mass: float
    sample_idx: np.ndarray
    is_overshoot: bool = False

    @property
    def diameter(self):
        return float(np.hypot(self.u1 - self.u0, self.v1 - self.v0))

    def contains_uv(self, uv):
        return (self.u0 <= uv[0] <= self.u1) and (self.v0 <= uv[1] <= self.v1)


@dataclass
class CellPartition:
    level: int
    cells: list
    eps0: float

    @property
    def max_diameter(self):
        return max(c.diameter for c in self.cells)

    @property
    def total_mass(self):
        return float(sum(c.mass for c in self.cells))

    def as_discrete(self, target: TargetMeasure) -> TargetMeasure:
        """Discrete measure with one atom per cell; the overshoot cell's
        representative is the designated overshoot point itself."""
        reps = np.array([c.rep_uv for c in self.cells])
        masses = np.array([c.mass for c in self.cells])
        over = next(i for i, c in enumerate(self.cells) if c.is_overshoot)
        return TargetMeasure.discrete(target.patch.to_xyz(reps), masses, over)


def _representative(target, cell_samples_uv, cell_masses, box, p0, has_p0):
    if has_p0:
        return np.asarray(p0, dtype=float)
    rep = np.array([(box[0] + box[1]) / 2.0, (box[2] + box[3]) / 2.0])
    g_rep = float(np.asarray(target.density(rep[:1], rep[1:2])).ravel()[0])
    if g_rep > 0.0:
        return rep
    # centroid off the support: snap to the heaviest sample in the cell
    return cell_samples_uv[int(np.argmax(cell_masses))].copy()


def _split_points(lo, hi, parts, avoid=None):
    """Interior split lines for [lo, hi]; nudged off ``avoid`` so the
    overshoot point stays interior to its cell."""
    pts = lo + (hi - lo) * np.arange(1, parts) / parts
    if avoid is not None:
        width = (hi - lo) / parts
        for i, p in enumerate(pts):
            if abs(p - avoid) < 1e-9 * max(1.0, abs(hi - lo)):
                pts[i] = p + 0.11 * width
    return pts


def _boxes_from_lines(lo_u, hi_u, lo_v, hi_v, u_lines, v_lines):
    us = np.concatenate([[lo_u], u_lines, [hi_u]])
    vs = np.concatenate([[lo_v], v_lines, [hi_v]])
    for i in range(len(us) - 1):
        for j in range(len(vs) - 1):
            yield us[i], us[i + 1], vs[j], vs[j + 1]


def _fill_cells(target, boxes, parent_idx, p0):
    uv = target.sample_uv
    mass = target.sample_mass
    cells = []
    for (u0, u1, v0, v1), idx in zip(boxes, parent_idx):
        sub_uv = uv[idx]
        # half-open on the max side except at the parent's own edge
        sel = (
            (sub_uv[:, 0] >= u0)
            & (sub_uv[:, 1] >= v0)
            & ((sub_uv[:, 0] < u1) | (u1 >= target.patch.u_range[1]))
            & ((sub_uv[:, 1] < v1) | (v1 >= target.patch.v_range[1]))
        )
        sub = idx[sel]
        m = float(mass[sub].sum())
        if m <= 0.0:
            continue
        has_p0 = (u0 <= p0[0] <= u1) and (v0 <= p0[1] <= v1)
        rep = _representative(target, uv[sub], mass[sub], (u0, u1, v0, v1), p0, has_p0)
        cells.append(Cell(u0, u1, v0, v1, rep, m, sub, is_overshoot=has_p0))
    # exactly one cell may claim the overshoot point (the first containing it)
    seen = False
    for c in cells:
        if c.is_overshoot:
            if seen:
                c.is_overshoot = False
                c.rep_uv = _representative(
                    target, target.sample_uv[c.sample_idx],
                    target.sample_mass[c.sample_idx],
                    (c.u0, c.u1, c.v0, c.v1), p0, False,
                )
            seen = True
    return cells


def build_partition(target: TargetMeasure, eps0=None) -> CellPartition:
    """Level-0 cells: the smallest uniform grid whose cell diagonals do not
    exceed eps0 (default: the patch diagonal, one cell)."""
    if target.kind != "planar-density":
        raise ValueError("partitions apply to planar-density targets")
    patch = target.patch
    if eps0 is None:
        eps0 = patch.diameter
    du = patch.u_range[1] - patch.u_range[0]
    dv = patch.v_range[1] - patch.v_range[0]
    parts = 1
    while np.hypot(du / parts, dv / parts) > eps0 * (1 + 1e-12):
        parts += 1
    p0 = target.overshoot_uv
    u_lines = _split_points(*patch.u_range, parts, avoid=p0[0])
    v_lines = _split_points(*patch.v_range, parts, avoid=p0[1])
    boxes = list(_boxes_from_lines(*patch.u_range, *patch.v_range, u_lines, v_lines))
    all_idx = [np.arange(target.sample_uv.shape[0])] * len(boxes)
    cells = _fill_cells(target, boxes, all_idx, p0)
    return CellPartition(0, cells, float(eps0))


def refine_partition(partition: CellPartition, target: TargetMeasure) -> CellPartition:
    """Split every cell in four (diameters halve), drop empty children,
    re-derive representatives; masses are re-partitioned sample sums."""
    p0 = target.overshoot_uv
    boxes, parents = [], []
    for cell in partition.cells:
        um = _split_points(cell.u0, cell.u1, 2, avoid=p0[0] if cell.is_overshoot else None)
        vm = _split_points(cell.v0, cell.v1, 2, avoid=p0[1] if cell.is_overshoot else None)
        for box in _boxes_from_lines(cell.u0, cell.u1, cell.v0, cell.v1, um, vm):
            boxes.append(box)
            parents.append(cell.sample_idx)
    cells = _fill_cells(target, boxes, parents, p0)
    return CellPartition(partition.level + 1, cells, partition.eps0)
