"""Triangle mesh utilities: subdivision, surface points, normals, adjacency.

A ``SurfacePoint`` (triangle index + barycentric coordinates) addresses a
location on a mesh independently of its tessellation.  1-to-4 midpoint
subdivision keeps full provenance back to the base mesh so points can be
remapped in either direction.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import value_of


class MeshError(ValueError):
    """Raised on structurally invalid meshes (e.g. non-manifold edges)."""


@dataclass
class SurfacePoints:
    """Locations on a mesh surface: (n,) triangle ids + (n, 3) barycentrics."""

    triangles: np.ndarray
    barycentric: np.ndarray

    def __post_init__(self):
        self.triangles = np.asarray(self.triangles, np.int64).reshape(-1)
        self.barycentric = np.asarray(self.barycentric, np.float64).reshape(-1, 3)
        if self.triangles.shape[0] != self.barycentric.shape[0]:
            raise MeshError("triangle/barycentric count mismatch")

    def __len__(self):
        return len(self.triangles)

    def validate(self, n_faces: int, tol: float = 1e-9) -> None:
        if len(self) and (self.triangles.min() < 0 or self.triangles.max() >= n_faces):
            raise MeshError("surface point triangle index out of range")
        if np.any(self.barycentric < -tol):
            raise MeshError("barycentric coordinates must be nonnegative")
        if len(self) and np.max(np.abs(self.barycentric.sum(axis=1) - 1.0)) > tol:
            raise MeshError("barycentric coordinates must sum to 1")


def sample_surface(points: SurfacePoints, triangles, vertices):
    """Positions of surface points given (M, 3) vertices; tape-aware.

    The sample is a fixed linear map of the vertices (barycentric mixing),
    so gradients flow through ``vertices`` only.
    """
    tris = np.asarray(triangles, np.int64)
    corner = tris[points.triangles]              # (n, 3) vertex ids
    b = points.barycentric
    v0 = vertices[corner[:, 0]] if isinstance(vertices, ad.Tensor) else value_of(vertices)[corner[:, 0]]
    v1 = vertices[corner[:, 1]] if isinstance(vertices, ad.Tensor) else value_of(vertices)[corner[:, 1]]
    v2 = vertices[corner[:, 2]] if isinstance(vertices, ad.Tensor) else value_of(vertices)[corner[:, 2]]
    return v0 * b[:, :1] + v1 * b[:, 1:2] + v2 * b[:, 2:3]


# -- topology -----------------------------------------------------------------


def edge_topology(triangles, n_vertices: int | None = None):
    """Unique undirected edges and their incident faces.

    Returns ``(edges (E, 2), edge_faces (E, 2))`` with vertex ids sorted
    within each edge and ``-1`` marking a missing second face.  Raises
    :class:`MeshError` if any edge has more than two incident faces.
    """
    tris = np.asarray(triangles, np.int64)
    raw = np.concatenate([tris[:, [0, 1]], tris[:, [1, 2]], tris[:, [2, 0]]])
    raw_sorted = np.sort(raw, axis=1)
    edges, inverse, counts = np.unique(raw_sorted, axis=0,
                                       return_inverse=True, return_counts=True)
    if np.any(counts > 2):
        raise MeshError("non-manifold edge (more than two incident faces)")
    E = len(edges)
    edge_faces = np.full((E, 2), -1, np.int64)
    face_ids = np.tile(np.arange(len(tris)), 3)
    order = np.argsort(inverse, kind="stable")
    sorted_edges = inverse[order]
    sorted_faces = face_ids[order]
    starts = np.searchsorted(sorted_edges, np.arange(E))
    for e in range(E):
        lo = starts[e]
        hi = starts[e + 1] if e + 1 < E else len(sorted_edges)
        fs = sorted_faces[lo:hi]
        edge_faces[e, :len(fs)] = np.sort(fs)
    return edges, edge_faces


def is_watertight(triangles, n_vertices: int | None = None) -> bool:
    """True iff every edge has exactly two incident faces."""
    try:
        _, ef = edge_topology(triangles)
    except MeshError:
        return False
    return bool(np.all(ef[:, 1] >= 0))


def vertex_neighbors(triangles, n_vertices: int):
    """Flattened 1-ring adjacency: (src, dst, degree) arrays.

    ``src``/``dst`` list every directed edge once, so a neighbor sum is
    one ``index_add`` of ``values[dst]`` into ``src`` bins.
    """
    edges, _ = edge_topology(triangles)
    src = np.concatenate([edges[:, 0], edges[:, 1]])
    dst = np.concatenate([edges[:, 1], edges[:, 0]])
    degree = np.bincount(src, minlength=n_vertices).astype(np.float64)
    return src, dst, degree


# -- normals ------------------------------------------------------------------


def face_normals(vertices, triangles, normalize=True):
    """Per-face normals (F, 3); tape-aware in ``vertices``."""
    tris = np.asarray(triangles, np.int64)
    v = vertices
    v0 = v[tris[:, 0]]
    v1 = v[tris[:, 1]]
    v2 = v[tris[:, 2]]
    n = ad.cross(v1 - v0, v2 - v0)
    if not normalize:
        return n
    nn = ad.sqrt(ad.maximum(ad.sum_(n * n, axis=1, keepdims=True), 1e-24))
    return n / nn


def vertex_normals(vertices, triangles):
    """Area-weighted vertex normals (M, 3), unit length; tape-aware."""
    tris = np.asarray(triangles, np.int64)
    M = value_of(vertices).shape[0]
    fn = face_normals(vertices, triangles, normalize=False)
    idx = tris.reshape(-1)
    stacked = ad.concat([fn, fn, fn], axis=0)
    # concat stacks faces 3x in corner order 0,1,2 per block
    corner_idx = np.concatenate([tris[:, 0], tris[:, 1], tris[:, 2]])
    vn = ad.index_add(stacked, corner_idx, M)
    nn = ad.sqrt(ad.maximum(ad.sum_(vn * vn, axis=1, keepdims=True), 1e-24))
    return vn / nn


# -- subdivision -----------------------------------------------------------------


@dataclass
class SubdividedMesh:
    """Midpoint-subdivided mesh with provenance into its base mesh.

    ``source_triangles``/``source_bary`` give each vertex's location as a
    surface point on the base mesh; ``face_parent`` and
    ``face_corner_bary`` map each face (and any barycentric point inside
    it) back to a base triangle.
    """

    vertices: np.ndarray           # (M', 3)
    triangles: np.ndarray          # (F', 3)
    level: int
    base_vertex_count: int
    base_triangle_count: int
    source_triangles: np.ndarray   # (M',) into base faces
    source_bary: np.ndarray        # (M', 3)
    face_parent: np.ndarray        # (F',) into base faces
    face_corner_bary: np.ndarray   # (F', 3, 3) rows: corner barys in base tri

    @property
    def n_vertices(self) -> int:
        return self.vertices.shape[0]

    @property
    def n_faces(self) -> int:
        return self.triangles.shape[0]

    def surface_points(self) -> SurfacePoints:
        """Every vertex as a surface point on the base mesh."""
        return SurfacePoints(self.source_triangles, self.source_bary)


def _identity_subdivision(vertices, triangles) -> SubdividedMesh:
    vertices = np.asarray(vertices, np.float64)
    tris = np.asarray(triangles, np.int64)
    M, F = len(vertices), len(tris)
    src_tri = np.zeros(M, np.int64)
    src_bary = np.zeros((M, 3))
    seen = np.zeros(M, bool)
    for f in range(F):
        for c in range(3):
            v = tris[f, c]
            if not seen[v]:
                seen[v] = True
                src_tri[v] = f
                src_bary[v, c] = 1.0
    if not seen.all():
        raise MeshError("mesh has vertices not referenced by any triangle")
    corner_bary = np.tile(np.eye(3), (F, 1, 1))
    return SubdividedMesh(vertices, tris, 0, M, F, src_tri, src_bary,
                          np.arange(F, dtype=np.int64), corner_bary)


# barycentric corners of the four children inside their parent triangle
_CHILD_CORNER_BARY = np.array([
    [[1.0, 0.0, 0.0], [0.5, 0.5, 0.0], [0.5, 0.0, 0.5]],
    [[0.5, 0.5, 0.0], [0.0, 1.0, 0.0], [0.0, 0.5, 0.5]],
    [[0.5, 0.0, 0.5], [0.0, 0.5, 0.5], [0.0, 0.0, 1.0]],
    [[0.5, 0.5, 0.0], [0.0, 0.5, 0.5], [0.5, 0.0, 0.5]],
])


def _subdivide_once(mesh: SubdividedMesh):
    """One 1-to-4 split; returns (new_mesh, midpoint_edges (E, 2))."""
    verts, tris = mesh.vertices, mesh.triangles
    M, F = len(verts), len(tris)
    edges, _ = edge_topology(tris)
    E = len(edges)
    key = edges[:, 0] * (M + 1) + edges[:, 1]
    lookup = {int(k): i for i, k in enumerate(key)}

    def mid_id(a, b):
        a, b = (a, b) if a < b else (b, a)
        return M + lookup[int(a * (M + 1) + b)]

    new_verts = np.concatenate([verts, 0.5 * (verts[edges[:, 0]] + verts[edges[:, 1]])])
    new_tris = np.empty((4 * F, 3), np.int64)
    new_parent = np.empty(4 * F, np.int64)
    new_corner_bary = np.empty((4 * F, 3, 3))
    for f in range(F):
        a, b, c = tris[f]
        mab, mbc, mca = mid_id(a, b), mid_id(b, c), mid_id(c, a)
        children = [(a, mab, mca), (mab, b, mbc), (mca, mbc, c), (mab, mbc, mca)]
        for ci, tri in enumerate(children):
            nf = 4 * f + ci
            new_tris[nf] = tri
            new_parent[nf] = mesh.face_parent[f]
            # child corner bary in the CURRENT face, composed into base
            new_corner_bary[nf] = _CHILD_CORNER_BARY[ci] @ mesh.face_corner_bary[f]

    # midpoint provenance: lowest-id incident face of each edge
    src_tri = np.concatenate([mesh.source_triangles, np.zeros(E, np.int64)])
    src_bary = np.concatenate([mesh.source_bary, np.zeros((E, 3))])
    _, edge_faces = edge_topology(tris)
    for e in range(E):
        f = int(edge_faces[e, 0])
        u, v = edges[e]
        cur_bary = np.zeros(3)
        for c in range(3):
            if tris[f, c] == u or tris[f, c] == v:
                cur_bary[c] = 0.5
        src_tri[M + e] = mesh.face_parent[f]
        src_bary[M + e] = cur_bary @ mesh.face_corner_bary[f]

    out = SubdividedMesh(new_verts, new_tris, mesh.level + 1,
                         mesh.base_vertex_count, mesh.base_triangle_count,
                         src_tri, src_bary, new_parent, new_corner_bary)
    return out, edges


def subdivide(vertices, triangles, level: int,
              attributes: dict[str, np.ndarray] | None = None,
              masks: dict[str, np.ndarray] | None = None):
    """Subdivide ``level`` times, carrying per-vertex data along.

    ``attributes`` rows (axis 0 = vertex) are midpoint-averaged, which
    matches linear interpolation of positions; ``masks`` are boolean and
    a midpoint is set when either endpoint is set.
    Returns ``(SubdividedMesh, attributes, masks)``.
    """
    if level < 0:
        raise ValueError("level must be >= 0")
    mesh = _identity_subdivision(vertices, triangles)
    attributes = {k: np.asarray(v, np.float64) for k, v in (attributes or {}).items()}
    masks = {k: np.asarray(v, bool) for k, v in (masks or {}).items()}
    for _ in range(level):
        mesh, edges = _subdivide_once(mesh)
        attributes = {k: np.concatenate([v, 0.5 * (v[edges[:, 0]] + v[edges[:, 1]])])
                      for k, v in attributes.items()}
        masks = {k: np.concatenate([v, v[edges[:, 0]] | v[edges[:, 1]]])
                 for k, v in masks.items()}
    return mesh, attributes, masks


def remap_to_subdivided(mesh: SubdividedMesh, points: SurfacePoints) -> SurfacePoints:
    """Express base-mesh surface points on the subdivided mesh.

    For each point the containing child face is found among the base
    triangle's descendants and the barycentrics are re-solved; positions
    are preserved exactly up to round-off.
    """
    children: dict[int, list[int]] = {}
    for f, p in enumerate(mesh.face_parent):
        children.setdefault(int(p), []).append(f)
    out_tri = np.empty(len(points), np.int64)
    out_bary = np.empty((len(points), 3))
    for i in range(len(points)):
        base_tri = int(points.triangles[i])
        p = points.barycentric[i]
        best = None
        for f in children[base_tri]:
            C = mesh.face_corner_bary[f]            # rows: corner base-barys
            w = np.linalg.solve(C.T, p)             # p = C^T w
            margin = w.min()
            if best is None or margin > best[0]:
                best = (margin, f, w)
        margin, f, w = best
        if margin < -1e-9:
            raise MeshError("surface point fell outside all child faces")
        w = np.clip(w, 0.0, None)
        out_tri[i] = f
        out_bary[i] = w / w.sum()
    return SurfacePoints(out_tri, out_bary)


# -- sampling ------------------------------------------------------------------


def triangle_areas(vertices, triangles) -> np.ndarray:
    v = np.asarray(vertices, np.float64)
    t = np.asarray(triangles, np.int64)
    n = np.cross(v[t[:, 1]] - v[t[:, 0]], v[t[:, 2]] - v[t[:, 0]])
    return 0.5 * np.linalg.norm(n, axis=1)


def sample_points_on_mesh(vertices, triangles, count: int,
                          rng: np.random.Generator):
    """Area-uniform random samples; returns (points (n,3), face ids (n,))."""
    areas = triangle_areas(vertices, triangles)
    total = areas.sum()
    if total <= 0:
        raise MeshError("mesh has zero surface area")
    faces = rng.choice(len(areas), size=count, p=areas / total)
    r1 = rng.random(count)
    r2 = rng.random(count)
    s = np.sqrt(r1)
    b0 = 1.0 - s
    b1 = s * (1.0 - r2)
    b2 = s * r2
    t = np.asarray(triangles, np.int64)[faces]
    v = np.asarray(vertices, np.float64)
    pts = (v[t[:, 0]] * b0[:, None] + v[t[:, 1]] * b1[:, None]
           + v[t[:, 2]] * b2[:, None])
    return pts, faces


def farthest_point_sample(points: np.ndarray, count: int) -> np.ndarray:
    """Deterministic farthest-point subset; starts at the point farthest
    from the centroid (lowest index on ties)."""
    pts = np.asarray(points, np.float64)
    n = len(pts)
    if count > n:
        raise ValueError("cannot sample more points than available")
    centroid = pts.mean(axis=0)
    first = int(np.argmax(np.linalg.norm(pts - centroid, axis=1)))
    chosen = [first]
    dist = np.linalg.norm(pts - pts[first], axis=1)
    for _ in range(count - 1):
        nxt = int(np.argmax(dist))
        chosen.append(nxt)
        dist = np.minimum(dist, np.linalg.norm(pts - pts[nxt], axis=1))
    return np.asarray(chosen, np.int64)
