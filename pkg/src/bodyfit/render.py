"""Pinhole projection, z-buffer rasterization, silhouette gradients.

Screen convention: pixel (row r, column c) covers [c, c+1) x [r, r+1)
with its sample point at (c + 0.5, r + 0.5); the camera looks down +z
with y pointing down in both world and image.  Rasterization uses a
top-left fill rule so triangles sharing an edge cover each pixel exactly
once, and perspective-correct barycentric coordinates are stored per
fragment.

The silhouette term compares the binary rendered mask against a target
mask.  Its gradient comes from sampling the projected silhouette
boundary edges: each sample moves along the outward screen normal and
contributes the local mask disagreement (bilinear target vs rendered
occupancy) times the sample's length element, chained through the
projection Jacobian to the mesh vertices.  Interior pixels contribute no
gradient, samples occluded by nearer geometry are skipped, and a mesh
rendered against its own mask yields exactly zero loss and gradients.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from numba import njit

from . import autodiff as ad
from .autodiff import value_of
from .mesh import edge_topology


@dataclass(frozen=True)
class PinholeCamera:
    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int
    near: float = 0.05
    far: float = 20.0

    def __post_init__(self):
        if self.fx <= 0 or self.fy <= 0:
            raise ValueError("focal lengths must be positive")
        if self.width <= 0 or self.height <= 0:
            raise ValueError("image size must be positive")
        if not (0 < self.near < self.far):
            raise ValueError("require 0 < near < far")

    def scaled(self, k: float) -> "PinholeCamera":
        return PinholeCamera(self.fx * k, self.fy * k, self.cx * k,
                             self.cy * k, int(round(self.width * k)),
                             int(round(self.height * k)), self.near, self.far)

    def to_dict(self) -> dict:
        return {"fx": self.fx, "fy": self.fy, "cx": self.cx, "cy": self.cy,
                "width": self.width, "height": self.height,
                "near": self.near, "far": self.far}

    @classmethod
    def from_dict(cls, d: dict) -> "PinholeCamera":
        return cls(**{k: d[k] for k in ("fx", "fy", "cx", "cy", "width",
                                        "height", "near", "far")})


def project(camera: PinholeCamera, points):
    """Project (N, 3) camera-space points to (N, 2) pixel coords.

    Tape-aware.  Returns ``(uv, valid)`` where ``valid`` flags points in
    front of the near plane; uv for invalid points is computed against a
    clamped depth so taped values stay finite.
    """
    x = points[:, 0]
    y = points[:, 1]
    z = points[:, 2]
    zc = ad.maximum(z, 1e-6)
    u = x / zc * camera.fx + camera.cx
    v = y / zc * camera.fy + camera.cy
    uv = ad.stack([u, v], axis=1)
    valid = value_of(z) > camera.near
    return uv, valid


def projection_jacobian(camera: PinholeCamera, points: np.ndarray) -> np.ndarray:
    """d(uv)/d(xyz) per point: (N, 2, 3); plain arrays only."""
    p = np.asarray(points, np.float64)
    z = np.maximum(p[:, 2], 1e-6)
    J = np.zeros((len(p), 2, 3))
    J[:, 0, 0] = camera.fx / z
    J[:, 0, 2] = -camera.fx * p[:, 0] / (z * z)
    J[:, 1, 1] = camera.fy / z
    J[:, 1, 2] = -camera.fy * p[:, 1] / (z * z)
    return J


def backproject(camera: PinholeCamera, depth: np.ndarray,
                mask: np.ndarray | None = None):
    """Per-pixel 3D points from a depth image.

    Returns ``(points (H, W, 3), valid (H, W))``; a pixel is valid when
    its depth is finite, inside (near, far) and allowed by ``mask``.
    """
    depth = np.asarray(depth, np.float64)
    H, W = depth.shape
    c, r = np.meshgrid(np.arange(W), np.arange(H))
    z = depth
    x = (c + 0.5 - camera.cx) / camera.fx * z
    y = (r + 0.5 - camera.cy) / camera.fy * z
    points = np.stack([x, y, z], axis=-1)
    valid = np.isfinite(depth) & (depth > camera.near) & (depth < camera.far)
    if mask is not None:
        valid &= np.asarray(mask).astype(bool)
    return points, valid


def depth_normals(points: np.ndarray, valid: np.ndarray) -> np.ndarray:
    """Per-pixel surface normals from backprojected points.

    Central differences along image rows/columns; normals are normalized
    and oriented toward the camera.  Pixels without enough valid
    neighbors get a zero normal.
    """
    H, W, _ = points.shape
    n = np.zeros((H, W, 3))
    du = np.zeros_like(points)
    dv = np.zeros_like(points)
    du[:, 1:-1] = points[:, 2:] - points[:, :-2]
    dv[1:-1, :] = points[2:, :] - points[:-2, :]
    ok = np.zeros((H, W), bool)
    ok[1:-1, 1:-1] = (valid[1:-1, 2:] & valid[1:-1, :-2]
                      & valid[2:, 1:-1] & valid[:-2, 1:-1] & valid[1:-1, 1:-1])
    raw = np.cross(du, dv)
    norm = np.linalg.norm(raw, axis=-1, keepdims=True)
    with np.errstate(invalid="ignore", divide="ignore"):
        unit = np.where(norm > 1e-12, raw / np.maximum(norm, 1e-12), 0.0)
    # orient toward the camera: n . p < 0
    flip = np.sum(unit * points, axis=-1) > 0
    unit[flip] *= -1.0
    n[ok] = unit[ok]
    return n


# -- rasterization ------------------------------------------------------------


@dataclass
class FragmentBuffer:
    """Per-pixel triangle id (-1 background), depth (+inf background) and
    perspective-correct barycentrics in original corner order."""

    triangle: np.ndarray   # (H, W) int32
    depth: np.ndarray      # (H, W) float64
    bary: np.ndarray       # (H, W, 3) float64

    def occupancy(self) -> np.ndarray:
        return (self.triangle >= 0).astype(np.float64)


@njit(cache=True)
def _tie_accept(ex, ey):
    # top-left rule for our orientation: left edges go up (ey < 0),
    # top edges are horizontal pointing right (interior below)
    return ey < 0.0 or (ey == 0.0 and ex > 0.0)


@njit(cache=True)
def _raster_kernel(uv, z, tris, width, height, near, far,
                   tri_idx, depth, bary):
    for f in range(tris.shape[0]):
        i0, i1, i2 = tris[f, 0], tris[f, 1], tris[f, 2]
        z0, z1, z2 = z[i0], z[i1], z[i2]
        if z0 <= near or z1 <= near or z2 <= near:
            continue
        if z0 > far and z1 > far and z2 > far:
            continue
        x0, y0 = uv[i0, 0], uv[i0, 1]
        x1, y1 = uv[i1, 0], uv[i1, 1]
        x2, y2 = uv[i2, 0], uv[i2, 1]
        area2 = (x1 - x0) * (y2 - y0) - (y1 - y0) * (x2 - x0)
        if area2 == 0.0:
            continue
        swapped = False
        if area2 < 0.0:
            x1, y1, x2, y2 = x2, y2, x1, y1
            z1, z2 = z2, z1
            area2 = -area2
            swapped = True
        xmin = min(x0, min(x1, x2))
        xmax = max(x0, max(x1, x2))
        ymin = min(y0, min(y1, y2))
        ymax = max(y0, max(y1, y2))
        c_lo = max(0, int(np.floor(xmin - 0.5)))
        c_hi = min(width - 1, int(np.ceil(xmax - 0.5)))
        r_lo = max(0, int(np.floor(ymin - 0.5)))
        r_hi = min(height - 1, int(np.ceil(ymax - 0.5)))
        if c_hi < c_lo or r_hi < r_lo:
            continue
        inv0, inv1, inv2 = 1.0 / z0, 1.0 / z1, 1.0 / z2
        for r in range(r_lo, r_hi + 1):
            py = r + 0.5
            for c in range(c_lo, c_hi + 1):
                px = c + 0.5
                w0 = (x2 - x1) * (py - y1) - (y2 - y1) * (px - x1)
                w1 = (x0 - x2) * (py - y2) - (y0 - y2) * (px - x2)
                w2 = (x1 - x0) * (py - y0) - (y1 - y0) * (px - x0)
                if w0 < 0.0 or w1 < 0.0 or w2 < 0.0:
                    continue
                if w0 == 0.0 and not _tie_accept(x2 - x1, y2 - y1):
                    continue
                if w1 == 0.0 and not _tie_accept(x0 - x2, y0 - y2):
                    continue
                if w2 == 0.0 and not _tie_accept(x1 - x0, y1 - y0):
                    continue
                l0 = w0 / area2
                l1 = w1 / area2
                l2 = w2 / area2
                denom = l0 * inv0 + l1 * inv1 + l2 * inv2
                zp = 1.0 / denom
                if zp < near or zp > far:
                    continue
                if zp < depth[r, c]:
                    depth[r, c] = zp
                    tri_idx[r, c] = f
                    b0 = l0 * inv0 / denom
                    b1 = l1 * inv1 / denom
                    b2 = l2 * inv2 / denom
                    if swapped:
                        b1, b2 = b2, b1
                    bary[r, c, 0] = b0
                    bary[r, c, 1] = b1
                    bary[r, c, 2] = b2


def rasterize(camera: PinholeCamera, vertices: np.ndarray,
              triangles: np.ndarray) -> FragmentBuffer:
    """Render triangles into a FragmentBuffer (plain arrays only)."""
    verts = np.ascontiguousarray(value_of(vertices))
    tris = np.ascontiguousarray(np.asarray(triangles, np.int64))
    uv, _ = project(camera, verts)
    uv = np.ascontiguousarray(uv)
    z = np.ascontiguousarray(verts[:, 2])
    H, W = camera.height, camera.width
    tri_idx = np.full((H, W), -1, np.int32)
    depth = np.full((H, W), np.inf)
    bary = np.zeros((H, W, 3))
    _raster_kernel(uv, z, tris, W, H, camera.near, camera.far,
                   tri_idx, depth, bary)
    return FragmentBuffer(tri_idx, depth, bary)


def render_depth(camera: PinholeCamera, vertices, triangles):
    """Depth image with 0 marking background; also returns the fragments."""
    frag = rasterize(camera, vertices, triangles)
    depth = np.where(frag.triangle >= 0, frag.depth, 0.0)
    return depth, frag


def coverage_supersampled(camera: PinholeCamera, vertices, triangles,
                          factor: int = 4) -> np.ndarray:
    """Box-averaged occupancy with factor^2 samples per pixel."""
    frag = rasterize(camera.scaled(factor), vertices, triangles)
    occ = frag.occupancy()
    H, W = camera.height, camera.width
    return occ.reshape(H, factor, W, factor).mean(axis=(1, 3))


def vertex_visibility(camera: PinholeCamera, vertices: np.ndarray,
                      triangles: np.ndarray,
                      frag: FragmentBuffer | None = None,
                      tol: float = 0.02) -> np.ndarray:
    """Vertices in front of the camera whose pixel depth matches their own."""
    verts = value_of(vertices)
    if frag is None:
        frag = rasterize(camera, verts, triangles)
    uv, valid = project(camera, verts)
    uv = np.asarray(uv)
    c = np.clip(np.floor(uv[:, 0]).astype(int), 0, camera.width - 1)
    r = np.clip(np.floor(uv[:, 1]).astype(int), 0, camera.height - 1)
    in_frame = ((uv[:, 0] >= 0) & (uv[:, 0] < camera.width)
                & (uv[:, 1] >= 0) & (uv[:, 1] < camera.height))
    zbuf = frag.depth[r, c]
    return valid & in_frame & (verts[:, 2] <= zbuf + tol)


# -- silhouette ------------------------------------------------------------------


def bilinear_sample(img: np.ndarray, uv: np.ndarray) -> np.ndarray:
    """Bilinear lookup at continuous pixel coords, zero outside the frame."""
    H, W = img.shape
    x = uv[:, 0] - 0.5
    y = uv[:, 1] - 0.5
    x0 = np.floor(x).astype(int)
    y0 = np.floor(y).astype(int)
    fx = x - x0
    fy = y - y0

    def at(yy, xx):
        inside = (xx >= 0) & (xx < W) & (yy >= 0) & (yy < H)
        out = np.zeros(len(xx))
        out[inside] = img[yy[inside], xx[inside]]
        return out

    v00 = at(y0, x0)
    v01 = at(y0, x0 + 1)
    v10 = at(y0 + 1, x0)
    v11 = at(y0 + 1, x0 + 1)
    return ((1 - fy) * ((1 - fx) * v00 + fx * v01)
            + fy * ((1 - fx) * v10 + fx * v11))


@dataclass
class RasterTopology:
    """Mesh edges with incident faces, precomputed once per mesh."""

    edges: np.ndarray        # (E, 2) vertex ids
    edge_faces: np.ndarray   # (E, 2) face ids, -1 for open edges

    @classmethod
    def build(cls, triangles) -> "RasterTopology":
        edges, edge_faces = edge_topology(triangles)
        return cls(edges, edge_faces)


@dataclass
class SilhouetteResult:
    loss: float
    grad_vertices: np.ndarray   # (M, 3) d(loss)/d(vertex)
    image: np.ndarray           # (H, W) rendered occupancy in {0, 1}
    n_samples: int


def _screen_area2(uv: np.ndarray, tris: np.ndarray) -> np.ndarray:
    a, b, c = uv[tris[:, 0]], uv[tris[:, 1]], uv[tris[:, 2]]
    return ((b[:, 0] - a[:, 0]) * (c[:, 1] - a[:, 1])
            - (b[:, 1] - a[:, 1]) * (c[:, 0] - a[:, 0]))


def silhouette_loss(camera: PinholeCamera, vertices: np.ndarray,
                    triangles: np.ndarray, target: np.ndarray,
                    topo: RasterTopology,
                    frag: FragmentBuffer | None = None,
                    samples_per_pixel: float = 2.0,
                    occlusion_tol: float = 0.02) -> SilhouetteResult:
    """Mean |target - rendered| mask difference and its vertex gradient."""
    verts = value_of(vertices)
    tris = np.asarray(triangles, np.int64)
    target = np.asarray(target, np.float64)
    H, W = camera.height, camera.width
    if target.shape != (H, W):
        raise ValueError("target mask size does not match the camera frame")
    if frag is None:
        frag = rasterize(camera, verts, triangles)
    S = frag.occupancy()
    P = float(H * W)
    loss = float(np.abs(target - S).sum() / P)
    grad = np.zeros_like(verts)
    if loss == 0.0:
        # exact match is the global minimum; return the zero subgradient
        return SilhouetteResult(loss, grad, S, 0)

    uv, valid = project(camera, verts)
    uv = np.asarray(uv)
    area2 = _screen_area2(uv, tris)
    front = area2 < 0.0   # outward-wound faces toward the camera

    e = topo.edges
    f0 = topo.edge_faces[:, 0]
    f1 = topo.edge_faces[:, 1]
    front0 = front[f0]
    front1 = np.where(f1 >= 0, front[np.maximum(f1, 0)], False)
    boundary = (front0 != front1) | ((f1 < 0) & front0)
    boundary &= valid[e[:, 0]] & valid[e[:, 1]]
    if not np.any(boundary):
        return SilhouetteResult(loss, grad, S, 0)

    be = e[boundary]
    owner = np.where(front0[boundary], f0[boundary], np.maximum(f1[boundary], 0))
    pa = uv[be[:, 0]]
    pb = uv[be[:, 1]]
    za = verts[be[:, 0], 2]
    zb = verts[be[:, 1], 2]
    d = pb - pa
    length = np.hypot(d[:, 0], d[:, 1])
    keep = length > 1e-9
    be, owner, pa, pb, za, zb, d, length = (
        be[keep], owner[keep], pa[keep], pb[keep], za[keep], zb[keep],
        d[keep], length[keep])
    if len(be) == 0:
        return SilhouetteResult(loss, grad, S, 0)

    # outward screen normal: perpendicular pointing away from the owner
    # face's interior (probe with its third vertex)
    n = np.stack([d[:, 1], -d[:, 0]], axis=1) / length[:, None]
    tri_owner = tris[owner]
    third = np.where(
        (tri_owner[:, 0] != be[:, 0]) & (tri_owner[:, 0] != be[:, 1]),
        tri_owner[:, 0],
        np.where((tri_owner[:, 1] != be[:, 0]) & (tri_owner[:, 1] != be[:, 1]),
                 tri_owner[:, 1], tri_owner[:, 2]))
    inward = np.sum(n * (uv[third] - pa), axis=1) > 0
    n[inward] *= -1.0

    # stratified samples along each edge, ~samples_per_pixel per pixel length
    n_s = np.maximum(2, np.ceil(length * samples_per_pixel).astype(int))
    total = int(n_s.sum())
    eid = np.repeat(np.arange(len(be)), n_s)
    offs = np.concatenate([[0], np.cumsum(n_s)])[:-1]
    t = (np.arange(total) - offs[eid] + 0.5) / n_s[eid]

    pos = pa[eid] + t[:, None] * d[eid]
    # depth interpolates linearly in 1/z along the projected edge
    z_s = 1.0 / ((1.0 - t) / za[eid] + t / zb[eid])
    dl = (length / n_s)[eid]

    col = np.clip(np.floor(pos[:, 0]).astype(int), 0, W - 1)
    row = np.clip(np.floor(pos[:, 1]).astype(int), 0, H - 1)
    active = frag.depth[row, col] >= z_s - occlusion_tol

    if not np.any(active):
        return SilhouetteResult(loss, grad, S, 0)
    pos, eid, t, dl = pos[active], eid[active], t[active], dl[active]

    # local mask disagreement: sweeping the boundary outward by unit area
    # flips |target - rendered| by 1 - 2*target, so the sample weight reads
    # the target one pixel to either side of the edge (straddling its
    # bilinear ramp) as 1 - T_in - T_out.  Sweeping only changes coverage
    # where no other geometry already covers the outside, hence the
    # 1 - S_out attenuation (it also silences edges resting against
    # another part of the rendered mask).
    pos_in = pos - n[eid]
    pos_out = pos + n[eid]
    s_out = bilinear_sample(S, pos_out)
    t_in = bilinear_sample(target, pos_in)
    t_out = bilinear_sample(target, pos_out)
    w = (1.0 - t_in - t_out) * (1.0 - s_out)
    coef = w * dl / P                                  # d(loss)/d(outward px)
    g_screen = coef[:, None] * n[eid]                  # (S, 2)

    gv = np.zeros((len(verts), 2))
    np.add.at(gv, be[eid, 0], g_screen * (1.0 - t)[:, None])
    np.add.at(gv, be[eid, 1], g_screen * t[:, None])
    J = projection_jacobian(camera, verts)
    grad = np.einsum("mij,mi->mj", J, gv)
    return SilhouetteResult(loss, grad, S, int(active.sum()))
