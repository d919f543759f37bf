"""Energy terms for sequence-level analysis-by-synthesis fitting.

Every term is mean-normalized by its residual count, so values stay
comparable across image resolutions and sequence lengths.  Data
association (projective pairs, visibility, pair partners) is computed
outside the differentiated graph and held fixed for the step; only the
silhouette term carries boundary gradients, supplied by the render
module.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor, value_of
from .mesh import SurfacePoints
from .render import PinholeCamera, RasterTopology, project, silhouette_loss


@dataclass
class FrameObservation:
    """One frame's fitting inputs.

    depth_points/depth_normals are per-pixel back-projections (invalid
    pixels arbitrary), joints2d live in normalized image coordinates
    (pixel / frame size), corr_pixels are integer (col, row) pairs and
    corr_points the surface points they are bound to, mask is the binary
    foreground silhouette.
    """

    depth_points: np.ndarray
    depth_valid: np.ndarray
    depth_normals: np.ndarray
    joints2d: np.ndarray
    joints_valid: np.ndarray
    corr_pixels: np.ndarray
    corr_points: SurfacePoints
    mask: np.ndarray

    def validate(self, camera: PinholeCamera, n_faces: int) -> None:
        H, W = camera.height, camera.width
        if self.depth_points.shape != (H, W, 3):
            raise ValueError("depth point image does not match the camera frame")
        if self.depth_valid.shape != (H, W):
            raise ValueError("depth validity mask size mismatch")
        if self.depth_normals.shape != (H, W, 3):
            raise ValueError("depth normal image size mismatch")
        if self.mask.shape != (H, W):
            raise ValueError("silhouette mask size mismatch")
        if self.joints2d.ndim != 2 or self.joints2d.shape[1] != 2:
            raise ValueError("2D joint detections must be (K, 2)")
        if self.joints_valid.shape != (self.joints2d.shape[0],):
            raise ValueError("joint validity flags do not match detections")
        if not np.all(np.isfinite(self.joints2d[self.joints_valid])):
            raise ValueError("valid joint detections must be finite")
        if len(self.corr_pixels):
            c = self.corr_pixels
            if c.min() < 0 or c[:, 0].max() >= W or c[:, 1].max() >= H:
                raise ValueError("correspondence pixel outside the frame")
        self.corr_points.validate(n_faces)


@dataclass(frozen=True)
class EnergyWeights:
    """Relative strengths of the energy terms."""

    landmarks: float = 1500.0
    dense_correspondence: float = 25.0
    projective: float = 100.0
    silhouette: float = 50.0
    surface_smoothness: float = 1500.0
    temporal_surface: float = 100.0
    temporal_rotation: float = 15.0
    pose_consistency: float = 15.0

    def skeleton_stage(self) -> "EnergyWeights":
        """Variant for the skeleton-fitting stage: detections dominate."""
        return EnergyWeights(
            landmarks=10000.0,
            dense_correspondence=self.dense_correspondence,
            projective=self.projective,
            silhouette=self.silhouette,
            surface_smoothness=self.surface_smoothness,
            temporal_surface=self.temporal_surface,
            temporal_rotation=self.temporal_rotation,
            pose_consistency=self.pose_consistency)


@dataclass
class TermRecord:
    value: float = 0.0
    weighted: float = 0.0
    count: int = 0


@dataclass
class EnergyBreakdown:
    terms: dict = field(default_factory=dict)

    def add(self, name: str, value: float, weight: float, count: int) -> None:
        rec = self.terms.setdefault(name, TermRecord())
        rec.value += float(value)
        rec.weighted += float(weight) * float(value)
        rec.count += int(count)

    @property
    def total(self) -> float:
        return sum(rec.weighted for rec in self.terms.values())

    def summary(self) -> str:
        parts = [f"total={self.total:.6f}"]
        parts += [f"{k}={rec.weighted:.6f}" for k, rec in sorted(self.terms.items())]
        return " ".join(parts)


# -- data terms ---------------------------------------------------------------


def landmark_term(camera: PinholeCamera, uv_model, detections: np.ndarray,
                  valid: np.ndarray):
    """Mean l1 distance between detected and projected landmarks.

    uv_model is in pixels, detections in normalized image coordinates;
    both are compared normalized.  Invalid detections are skipped and the
    mean runs over the valid count.
    """
    valid = np.asarray(valid, bool)
    k = int(valid.sum())
    if k == 0:
        warnings.warn("no valid landmark detections in frame", stacklevel=2)
        return 0.0, 0
    scale = np.array([1.0 / camera.width, 1.0 / camera.height])
    diff = uv_model * scale - np.asarray(detections, np.float64)
    err = ad.sum_(ad.absolute(diff) * valid[:, None].astype(np.float64))
    return err / k, k


def dense_correspondence_term(points_model, points_obs: np.ndarray):
    """Mean l1 point distance between bound surface points and observations."""
    n = len(value_of(points_model))
    if n == 0:
        return 0.0, 0
    err = ad.sum_(ad.absolute(points_model - np.asarray(points_obs, np.float64)))
    return err / n, n


@dataclass(frozen=True)
class ProjectiveAssociations:
    """Frozen sample-to-depth-point pairs for one optimization step."""

    sample_indices: np.ndarray
    obs_points: np.ndarray
    obs_normals: np.ndarray

    def __len__(self) -> int:
        return len(self.sample_indices)


def find_projective_correspondences(
        camera: PinholeCamera, points: np.ndarray, normals: np.ndarray,
        visible: np.ndarray, depth_points: np.ndarray,
        depth_valid: np.ndarray, depth_normals: np.ndarray,
        max_distance: float = 0.5,
        max_normal_angle_deg: float = 45.0) -> ProjectiveAssociations:
    """Pair each visible surface sample with the depth point at its pixel.

    Pairs farther than max_distance or with normals deviating more than
    max_normal_angle_deg are pruned.
    """
    points = np.asarray(points, np.float64)
    normals = np.asarray(normals, np.float64)
    uv, ok = project(camera, points)
    uv = np.asarray(uv)
    ok = ok & np.asarray(visible, bool)
    col = np.floor(uv[:, 0]).astype(int)
    row = np.floor(uv[:, 1]).astype(int)
    in_frame = (col >= 0) & (col < camera.width) & (row >= 0) & (row < camera.height)
    ok &= in_frame
    col = np.clip(col, 0, camera.width - 1)
    row = np.clip(row, 0, camera.height - 1)
    ok &= depth_valid[row, col]

    obs = depth_points[row, col]
    obs_n = depth_normals[row, col]
    dist = np.linalg.norm(points - obs, axis=1)
    ok &= dist <= max_distance
    cos_limit = np.cos(np.deg2rad(max_normal_angle_deg))
    ok &= np.sum(normals * obs_n, axis=1) >= cos_limit

    idx = np.flatnonzero(ok)
    return ProjectiveAssociations(idx, obs[idx].copy(), obs_n[idx].copy())


def projective_term(points_model, normals_model, assoc: ProjectiveAssociations):
    """Mean of point, normal, and point-to-plane residuals over frozen pairs.

    Per pair: l1 point distance, 1 - cos between normals, and the
    distance of the observation to the model point's tangent plane.
    """
    n = len(assoc)
    if n == 0:
        return 0.0, 0
    vm = points_model[assoc.sample_indices]
    nm = normals_model[assoc.sample_indices]
    diff = vm - assoc.obs_points
    p2p = ad.sum_(ad.absolute(diff))
    n2n = ad.sum_(1.0 - ad.sum_(nm * assoc.obs_normals, axis=1))
    p2n = ad.sum_(ad.absolute(ad.sum_(diff * nm, axis=1)))
    return (p2p + n2n + p2n) / n, n


def silhouette_term(tape, camera: PinholeCamera, vertices, triangles,
                    target: np.ndarray, topo: RasterTopology,
                    samples_per_pixel: float = 2.0):
    """Mask difference as a graph node; gradients from boundary sampling."""
    res = silhouette_loss(camera, value_of(vertices), triangles, target, topo,
                          samples_per_pixel=samples_per_pixel)
    count = target.size
    if isinstance(vertices, Tensor):
        gv = res.grad_vertices
        node = tape.custom("silhouette", np.float64(res.loss), [vertices],
                           [lambda g, gv=gv: g * gv])
        return node, count
    return res.loss, count


# -- regularizers -------------------------------------------------------------


def smoothness_term(vertices, neighbor_src: np.ndarray, neighbor_dst: np.ndarray,
                    degree: np.ndarray, active: np.ndarray):
    """Mean squared deviation of each active vertex from its 1-ring mean."""
    m = len(degree)
    active = np.asarray(active, bool) & (degree > 0)
    n_active = int(active.sum())
    if n_active == 0:
        return 0.0, 0
    nbr_sum = ad.index_add(vertices[neighbor_dst], neighbor_src, m)
    mean_nbr = nbr_sum / np.maximum(degree, 1)[:, None].astype(np.float64)
    d = vertices - mean_nbr
    sq = ad.sum_(d * d, axis=1)
    val = ad.sum_(sq * active.astype(np.float64)) / n_active
    return val, n_active


def temporal_surface_term(v_prev, v_cur, v_next):
    """Deviation of each vertex from the midpoint of its neighbors in time."""
    m = len(value_of(v_cur))
    d = v_cur - (v_prev + v_next) * 0.5
    return ad.sum_(d * d) / m, m


def temporal_rotation_term(r_prev, r_cur, r_next):
    """Frobenius drift of local joint rotations against both neighbors."""
    j = len(value_of(r_cur))
    d1 = r_cur - r_prev
    d2 = r_cur - r_next
    return (ad.sum_(d1 * d1) + ad.sum_(d2 * d2)) / j, j


# -- cross-frame consistency --------------------------------------------------


def pose_similarity_weight(rot_i, rot_j, include: np.ndarray):
    """exp(-sum of squared Frobenius rotation differences) over included joints."""
    w = np.asarray(include, np.float64).reshape(-1, 1, 1)
    d = (rot_i - rot_j) * w
    return ad.exp(-ad.sum_(d * d))


def pose_consistency_term(offsets_i, offsets_j, visible: np.ndarray, omega):
    """Visibility-masked mean l1 offset difference, scaled by pose similarity."""
    visible = np.asarray(visible, bool)
    n = int(visible.sum())
    if n == 0:
        return 0.0, 0
    mask = visible[:, None].astype(np.float64)
    diff = ad.absolute(offsets_i - offsets_j) * mask
    return omega * (ad.sum_(diff) / n), n


def consistency_include_mask(n_joints: int, excluded_joints) -> np.ndarray:
    """Joints entering the pose-similarity weight: all but root and excluded."""
    inc = np.ones(n_joints)
    inc[0] = 0.0
    for j in excluded_joints:
        inc[int(j)] = 0.0
    return inc
