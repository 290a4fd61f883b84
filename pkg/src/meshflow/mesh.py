"""Triangulated surfaces: representation, I/O, normalization, distances."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


class MeshError(ValueError):
    """Raised for invalid mesh structure or malformed mesh files."""


# point-to-triangle Voronoi region codes
REGION_FACE = 0
REGION_VERT0 = 1
REGION_VERT1 = 2
REGION_VERT2 = 3
REGION_EDGE01 = 4
REGION_EDGE12 = 5
REGION_EDGE20 = 6


class TriMesh:
    """Immutable triangulated surface: (N, 3) vertices and (F, 3) facets."""

    def __init__(self, vertices, facets):
        vertices = np.asarray(vertices, dtype=np.float64)
        facets = np.asarray(facets, dtype=np.int64)
        if vertices.ndim != 2 or vertices.shape[1] != 3:
            raise MeshError(f"vertices must be (N, 3), got {vertices.shape}")
        if facets.ndim != 2 or facets.shape[1] != 3:
            raise MeshError(f"facets must be (F, 3), got {facets.shape}")
        if vertices.shape[0] == 0:
            raise MeshError("mesh has no vertices")
        if facets.size and (facets.min() < 0 or facets.max() >= vertices.shape[0]):
            raise MeshError("facet index out of range")
        if facets.size:
            a, b, c = facets[:, 0], facets[:, 1], facets[:, 2]
            if np.any((a == b) | (b == c) | (a == c)):
                raise MeshError("degenerate facet (repeated vertex index)")
        # own frozen copies: never mutate (or freeze) the caller's arrays
        self.vertices = vertices.copy() if vertices.flags.writeable else vertices
        self.facets = facets.copy() if facets.flags.writeable else facets
        self.vertices.setflags(write=False)
        self.facets.setflags(write=False)
        self._edges = None
        self._degrees = None

    @property
    def num_vertices(self):
        return self.vertices.shape[0]

    @property
    def num_facets(self):
        return self.facets.shape[0]

    def with_vertices(self, vertices):
        """Same topology, new coordinates."""
        return TriMesh(vertices, self.facets)

    def edge_list(self):
        """Directed edges including self-loops, sorted by (src, dst), deduplicated.

        The neighborhood of a vertex always contains the vertex itself.
        """
        if self._edges is None:
            f = self.facets
            und = np.concatenate([f[:, [0, 1]], f[:, [1, 2]], f[:, [2, 0]]], axis=0)
            both = np.concatenate([und, und[:, ::-1]], axis=0)
            loops = np.stack([np.arange(self.num_vertices)] * 2, axis=1)
            all_edges = np.concatenate([both, loops], axis=0)
            key = all_edges[:, 0] * self.num_vertices + all_edges[:, 1]
            key = np.unique(key)
            self._edges = np.stack([key // self.num_vertices, key % self.num_vertices], axis=1)
            self._degrees = np.bincount(self._edges[:, 0], minlength=self.num_vertices)
        return self._edges

    def degrees(self):
        """Neighborhood sizes |N_i| (self-loop included)."""
        self.edge_list()
        return self._degrees

    def triangles(self):
        """(F, 3, 3) array of facet corner coordinates."""
        return self.vertices[self.facets]

    def facet_areas(self):
        tri = self.triangles()
        n = np.cross(tri[:, 1] - tri[:, 0], tri[:, 2] - tri[:, 0])
        return 0.5 * np.linalg.norm(n, axis=1)

    def is_closed(self):
        """True when every undirected edge is shared by exactly two facets."""
        f = self.facets
        und = np.concatenate([f[:, [0, 1]], f[:, [1, 2]], f[:, [2, 0]]], axis=0)
        und = np.sort(und, axis=1)
        key = und[:, 0] * self.num_vertices + und[:, 1]
        _, counts = np.unique(key, return_counts=True)
        return bool(np.all(counts == 2))

    def centroid(self):
        return self.vertices.mean(axis=0)


# ---------------------------------------------------------------------------
# OBJ / PLY I/O


def load_obj(path):
    vertices = []
    facets = []
    with open(path, "r") as fh:
        for lineno, raw in enumerate(fh, start=1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            parts = line.split()
            tag = parts[0]
            if tag == "v":
                if len(parts) != 4:
                    raise MeshError(f"{path}:{lineno}: vertex line needs 3 coordinates")
                try:
                    vertices.append([float(x) for x in parts[1:]])
                except ValueError:
                    raise MeshError(f"{path}:{lineno}: malformed vertex coordinate")
            elif tag == "f":
                if len(parts) != 4:
                    raise MeshError(f"{path}:{lineno}: only triangular faces are supported")
                idx = []
                for tok in parts[1:]:
                    tok = tok.split("/", 1)[0]
                    try:
                        i = int(tok)
                    except ValueError:
                        raise MeshError(f"{path}:{lineno}: malformed face index '{tok}'")
                    if i < 1:
                        raise MeshError(f"{path}:{lineno}: face indices are 1-based")
                    idx.append(i - 1)
                facets.append(idx)
            # other tags (vn, vt, o, g, s, mtllib, usemtl) are ignored
    if not vertices:
        raise MeshError(f"{path}: no vertices found")
    vertices = np.array(vertices)
    facets = np.array(facets, dtype=np.int64).reshape(-1, 3)
    if facets.size and facets.max() >= len(vertices):
        raise MeshError(f"{path}: face index {facets.max() + 1} exceeds vertex count {len(vertices)}")
    try:
        return TriMesh(vertices, facets)
    except MeshError as exc:
        raise MeshError(f"{path}: {exc}")


def save_obj(mesh, path):
    with open(path, "w") as fh:
        for v in mesh.vertices:
            fh.write(f"v {v[0]:.17g} {v[1]:.17g} {v[2]:.17g}\n")
        for f in mesh.facets:
            fh.write(f"f {f[0] + 1} {f[1] + 1} {f[2] + 1}\n")


def save_ply_quality(mesh, quality, path):
    """ASCII PLY with a per-vertex float 'quality' property, for viewers."""
    quality = np.asarray(quality, dtype=np.float64)
    if quality.shape != (mesh.num_vertices,):
        raise MeshError(f"quality shape {quality.shape} != ({mesh.num_vertices},)")
    with open(path, "w") as fh:
        fh.write("ply\nformat ascii 1.0\n")
        fh.write(f"element vertex {mesh.num_vertices}\n")
        fh.write("property float x\nproperty float y\nproperty float z\n")
        fh.write("property float quality\n")
        fh.write(f"element face {mesh.num_facets}\n")
        fh.write("property list uchar int vertex_indices\nend_header\n")
        for v, q in zip(mesh.vertices, quality):
            fh.write(f"{v[0]:.9g} {v[1]:.9g} {v[2]:.9g} {q:.9g}\n")
        for f in mesh.facets:
            fh.write(f"3 {f[0]} {f[1]} {f[2]}\n")


# ---------------------------------------------------------------------------
# normalization


@dataclass(frozen=True)
class NormalizeTransform:
    """Centering + uniform scale mapping world coordinates into [-1, 1]."""

    center: np.ndarray
    scale: float

    def apply(self, points):
        return (np.asarray(points, dtype=np.float64) - self.center) / self.scale

    def invert(self, points):
        return np.asarray(points, dtype=np.float64) * self.scale + self.center

    @staticmethod
    def identity():
        return NormalizeTransform(np.zeros(3), 1.0)


def normalize(mesh):
    """Center on the centroid and scale the largest |coordinate| to 1."""
    center = mesh.centroid()
    centered = mesh.vertices - center
    scale = float(np.abs(centered).max())
    if scale == 0.0:
        raise MeshError("cannot normalize: all vertices coincide")
    transform = NormalizeTransform(center, scale)
    return mesh.with_vertices(centered / scale), transform


# ---------------------------------------------------------------------------
# point / triangle distances


def _closest_point_batch(points, tris):
    """Closest points from (P, 3) points to (T, 3, 3) triangles.

    Returns (dist (P, T), closest (P, T, 3), region (P, T)). The interior
    projection is tried first; outside points fall back to the nearest of
    the three edge segments (endpoint hits classify as vertex regions).
    """
    p = points[:, None, :]  # (P, 1, 3)
    a, b, c = tris[:, 0], tris[:, 1], tris[:, 2]  # (T, 3)
    ab = b - a
    ac = c - a
    n = np.cross(ab, ac)  # (T, 3)
    nn = np.einsum("td,td->t", n, n)

    ap = p - a  # (P, T, 3)
    # barycentric of the in-plane projection (s along ab, t along ac)
    d00 = np.einsum("td,td->t", ab, ab)
    d01 = np.einsum("td,td->t", ab, ac)
    d11 = np.einsum("td,td->t", ac, ac)
    d20 = np.einsum("ptd,td->pt", ap, ab)
    d21 = np.einsum("ptd,td->pt", ap, ac)
    denom = d00 * d11 - d01 * d01
    s = (d11 * d20 - d01 * d21) / denom
    t = (d00 * d21 - d01 * d20) / denom
    inside = (s >= 0.0) & (t >= 0.0) & (s + t <= 1.0)

    closest = a + s[..., None] * ab + t[..., None] * ac
    region = np.zeros(s.shape, dtype=np.int8)

    # edge candidates for points outside the face region
    edges = (
        (a, b, REGION_EDGE01, REGION_VERT0, REGION_VERT1),
        (b, c, REGION_EDGE12, REGION_VERT1, REGION_VERT2),
        (c, a, REGION_EDGE20, REGION_VERT2, REGION_VERT0),
    )
    best_d2 = np.full(s.shape, np.inf)
    best_pt = np.zeros_like(closest)
    best_region = np.zeros(s.shape, dtype=np.int8)
    for e0, e1, reg_edge, reg_v0, reg_v1 in edges:
        ev = e1 - e0  # (T, 3)
        ee = np.einsum("td,td->t", ev, ev)
        u = np.einsum("ptd,td->pt", p - e0, ev) / ee
        uc = np.clip(u, 0.0, 1.0)
        cand = e0 + uc[..., None] * ev
        diff = p - cand
        d2 = np.einsum("ptd,ptd->pt", diff, diff)
        better = d2 < best_d2
        best_d2 = np.where(better, d2, best_d2)
        best_pt = np.where(better[..., None], cand, best_pt)
        reg = np.where(uc <= 0.0, reg_v0, np.where(uc >= 1.0, reg_v1, reg_edge)).astype(np.int8)
        best_region = np.where(better, reg, best_region)

    closest = np.where(inside[..., None], closest, best_pt)
    region = np.where(inside, region, best_region)
    diff = p - closest
    dist = np.sqrt(np.einsum("ptd,ptd->pt", diff, diff))
    # degenerate triangles have nn == 0; the caller decides whether to reject
    _ = nn
    return dist, closest, region


def point_triangle_distance(point, tri):
    """Distance and closest point from a single point to one triangle."""
    point = np.asarray(point, dtype=np.float64).reshape(3)
    tri = np.asarray(tri, dtype=np.float64).reshape(3, 3)
    n = np.cross(tri[1] - tri[0], tri[2] - tri[0])
    span = max(np.linalg.norm(tri[1] - tri[0]), np.linalg.norm(tri[2] - tri[0]), 1e-300)
    if np.linalg.norm(n) <= 1e-12 * span * span:
        raise MeshError("degenerate triangle")
    dist, closest, _ = _closest_point_batch(point[None], tri[None])
    return float(dist[0, 0]), closest[0, 0]


def nearest_on_surface(points, mesh, chunk=512):
    """Nearest facet queries for (P, 3) points against every facet.

    Returns (dist (P,), closest (P, 3), facet_idx (P,), region (P,)).
    Ties pick the lowest facet index.
    """
    points = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    tris = mesh.triangles()
    if tris.shape[0] == 0:
        raise MeshError("mesh has no facets")
    n = points.shape[0]
    dist = np.empty(n)
    closest = np.empty((n, 3))
    facet_idx = np.empty(n, dtype=np.int64)
    region = np.empty(n, dtype=np.int8)
    for lo in range(0, n, chunk):
        hi = min(lo + chunk, n)
        d, cp, reg = _closest_point_batch(points[lo:hi], tris)
        j = np.argmin(d, axis=1)
        rows = np.arange(hi - lo)
        dist[lo:hi] = d[rows, j]
        closest[lo:hi] = cp[rows, j]
        facet_idx[lo:hi] = j
        region[lo:hi] = reg[rows, j]
    return dist, closest, facet_idx, region


def unsigned_surface_distance(a, b):
    """Symmetric mean vertex-to-surface distance between two meshes."""
    da, _, _, _ = nearest_on_surface(a.vertices, b)
    db, _, _, _ = nearest_on_surface(b.vertices, a)
    return 0.5 * (float(da.mean()) + float(db.mean()))


# ---------------------------------------------------------------------------
# signed distance (ray-crossing parity, majority over jittered directions)

_RAY_DIRECTIONS = np.array(
    [
        [0.57735027, 0.57735027, 0.57735027],
        [0.82503986, -0.38384347, 0.41483564],
        [-0.27110137, 0.91365735, 0.30243237],
    ]
)


def _ray_crossings(origins, direction, tris):
    """Count ray/triangle crossings (Moller-Trumbore) for each origin."""
    e1 = tris[:, 1] - tris[:, 0]
    e2 = tris[:, 2] - tris[:, 0]
    pvec = np.cross(direction, e2)  # (T, 3)
    det = np.einsum("td,td->t", e1, pvec)
    ok = np.abs(det) > 1e-14
    inv_det = np.where(ok, 1.0 / np.where(ok, det, 1.0), 0.0)
    counts = np.zeros(origins.shape[0], dtype=np.int64)
    chunk = 512
    for lo in range(0, origins.shape[0], chunk):
        o = origins[lo : lo + chunk]
        tvec = o[:, None, :] - tris[None, :, 0]  # (P, T, 3)
        u = np.einsum("ptd,td->pt", tvec, pvec) * inv_det
        qvec = np.cross(tvec, e1)
        v = np.einsum("ptd,d->pt", qvec, direction) * inv_det
        t = np.einsum("ptd,td->pt", qvec, e2) * inv_det
        hit = ok & (u >= 0.0) & (v >= 0.0) & (u + v <= 1.0) & (t > 1e-12)
        counts[lo : lo + chunk] = hit.sum(axis=1)
    return counts


def points_inside(points, mesh):
    """Inside test for a closed mesh: crossing parity, 3-ray majority vote."""
    points = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    tris = mesh.triangles()
    votes = np.zeros(points.shape[0], dtype=np.int64)
    for direction in _RAY_DIRECTIONS:
        votes += _ray_crossings(points, direction, tris) % 2
    return votes >= 2


def signed_vertex_distance(pred, truth):
    """Per-point distance from pred to truth's surface, negative inside.

    `pred` may be a mesh (its vertices are used) or an (n, 3) point array.
    """
    if not truth.is_closed():
        raise MeshError("signed distance requires a closed reference surface")
    points = pred.vertices if isinstance(pred, TriMesh) else np.asarray(pred, dtype=np.float64)
    dist, _, _, _ = nearest_on_surface(points, truth)
    inside = points_inside(points, truth)
    return np.where(inside, -dist, dist)
