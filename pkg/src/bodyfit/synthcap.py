"""Synthetic capture: known body, known motion, rendered observations.

Stands in for an RGB-D sensor plus sparse/dense detectors: a rigged
body follows a scripted trajectory while an analytic offset field adds
pose-dependent surface detail, and every frame is rendered into the
same observation bundle the fitting pipeline consumes (depth image,
silhouette mask, 2D landmark detections, dense surface
correspondences).  Because the generating parameters are known exactly,
fits can be validated closed-loop.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.interpolate import CubicSpline
from scipy.ndimage import binary_dilation, binary_erosion

from .energy import FrameObservation
from .mesh import SurfacePoints, remap_to_subdivided, sample_surface, \
    subdivide, vertex_normals
from .render import PinholeCamera, backproject, depth_normals, project, \
    rasterize
from .rigged import RiggedBodyAsset, constrain_pose, forward_kinematics, \
    invert_constrain, lbs_pose, rest_joint_locations, shaped_template

TRAJECTORY_KINDS = ("single-joint-swing", "multi-joint", "random-walk-in-bounds")


class CaptureError(ValueError):
    """Raised when a synthetic capture cannot be produced as requested."""


# -- procedural offset field -----------------------------------------------------


@dataclass(frozen=True)
class OffsetBump:
    """One spatially compact surface bump, optionally driven by a joint.

    The bump displaces the canonical surface along its normal by
    ``gain * activation(bend) * profile(distance to center)`` where the
    profile peaks at 1 on the center and falls smoothly to 0 at
    ``radius``.  ``joint < 0`` keeps the bump statically on.
    """

    center: tuple[float, float, float]
    radius: float
    gain: float
    joint: int = -1
    full_bend: float = 0.5 * np.pi

    def __post_init__(self):
        if self.radius <= 0.0:
            raise CaptureError("bump radius must be positive")
        if self.full_bend <= 0.0:
            raise CaptureError("full_bend must be positive")


def bend_activation(angle: float, full_bend: float) -> float:
    """Smoothstep of |angle| / full_bend: 0 at rest, 1 at full bend."""
    u = min(abs(float(angle)) / full_bend, 1.0)
    return u * u * (3.0 - 2.0 * u)


def bump_profile(distance: np.ndarray, radius: float) -> np.ndarray:
    """Raised-cosine falloff: 1 at distance 0, 0 from ``radius`` outward."""
    d = np.asarray(distance, np.float64)
    out = 0.5 * (1.0 + np.cos(np.pi * np.minimum(d / radius, 1.0)))
    return np.where(d < radius, out, 0.0)


def procedural_offset_field(points, normals, joint_bends,
                            bumps) -> np.ndarray:
    """Canonical-space offsets (N, 3) of the analytic bump field.

    ``points``/``normals`` describe the canonical surface, ``joint_bends``
    holds each joint's current bend angle (radians).  Every bump is zero
    at the rest pose unless it is static (``joint < 0``).
    """
    p = np.asarray(points, np.float64)
    n = np.asarray(normals, np.float64)
    bends = np.asarray(joint_bends, np.float64)
    out = np.zeros_like(p)
    for b in bumps:
        act = 1.0 if b.joint < 0 else bend_activation(bends[b.joint], b.full_bend)
        if act == 0.0:
            continue
        d = np.linalg.norm(p - np.asarray(b.center, np.float64), axis=1)
        out += (b.gain * act) * bump_profile(d, b.radius)[:, None] * n
    return out


# -- trajectories ----------------------------------------------------------------


def _swing_joint(asset: RiggedBodyAsset) -> int:
    """Default driven joint: first non-root joint not excluded."""
    for k in range(1, asset.n_joints):
        if k not in asset.excluded_joints:
            return k
    raise CaptureError("asset has no drivable joint")


def make_trajectory(asset: RiggedBodyAsset, kind: str, frames: int,
                    amplitude: float = 0.5, joint: int | None = None,
                    axis: int = 2, cycles: float = 1.0,
                    translation=(0.0, -0.15, 2.5), drift: float = 0.0,
                    seed: int = 0):
    """Scripted C1-smooth pose trajectory; returns (poses, translations).

    ``poses`` are (N, J, 3) unconstrained parameters, so the constrained
    pose is inside the joint bounds by construction.  ``amplitude`` is
    the peak joint angle in radians; swings are sinusoids with phase
    step 2*pi*cycles/frames, the random walk is a seeded cubic spline
    through sparse knots in unconstrained space.
    """
    if kind not in TRAJECTORY_KINDS:
        raise CaptureError(f"unknown trajectory kind {kind!r}")
    if frames < 3:
        raise CaptureError("a trajectory needs at least 3 frames")
    rng = np.random.default_rng(seed)
    J = asset.n_joints
    lo, hi = asset.joint_bounds_lo, asset.joint_bounds_hi
    x_rest = invert_constrain(np.zeros((J, 3)), lo, hi)
    i = np.arange(frames)

    poses = np.tile(x_rest, (frames, 1, 1))
    if kind == "single-joint-swing":
        k = _swing_joint(asset) if joint is None else int(joint)
        room = 0.98 * min(-lo[k, axis], hi[k, axis])
        if abs(amplitude) > room:
            raise CaptureError(f"amplitude {amplitude} exceeds joint {k} bounds")
        delta = np.zeros((frames, J, 3))
        delta[:, k, axis] = amplitude * np.sin(2.0 * np.pi * cycles * i / frames)
        for f in range(frames):
            poses[f] = invert_constrain(delta[f], lo, hi)
    elif kind == "multi-joint":
        delta = np.zeros((frames, J, 3))
        for k in range(1, J):
            if k in asset.excluded_joints:
                continue
            ax = int(rng.integers(0, 3))
            amp = min(abs(amplitude) * rng.uniform(0.3, 1.0),
                      0.9 * min(-lo[k, ax], hi[k, ax]))
            phase = rng.uniform(0.0, 2.0 * np.pi)
            delta[:, k, ax] = amp * np.sin(2.0 * np.pi * cycles * i / frames + phase)
        for f in range(frames):
            poses[f] = invert_constrain(delta[f], lo, hi)
    else:  # random-walk-in-bounds
        n_knots = max(4, frames // 10)
        knot_t = np.linspace(0.0, frames - 1.0, n_knots)
        walk = np.cumsum(rng.normal(0.0, 0.5 * amplitude, (n_knots, J, 3)), axis=0)
        spline = CubicSpline(knot_t, walk, axis=0)
        poses = x_rest[None] + spline(i.astype(np.float64))
        poses[:, 0, :] = x_rest[0]                  # keep the root framed

    translations = np.tile(np.asarray(translation, np.float64), (frames, 1))
    if drift != 0.0:
        translations[:, 0] += drift * np.sin(2.0 * np.pi * i / frames)
    return poses, translations


# -- ground-truth rig --------------------------------------------------------------


@dataclass
class GroundTruthRig:
    """Everything needed to render one synthetic sequence.

    ``poses`` are unconstrained (N, J, 3) parameters (bounds hold by
    construction of the constraint mapping); the summed bump gains are
    capped by ``max_amplitude`` so the ground-truth surface stays inside
    the reach of the fitted offset model.
    """

    asset: RiggedBodyAsset
    camera: PinholeCamera
    poses: np.ndarray
    translations: np.ndarray
    bumps: tuple[OffsetBump, ...] = ()
    beta: np.ndarray | None = None
    subdivision: int = 0
    max_amplitude: float = 0.25

    def __post_init__(self):
        self.poses = np.asarray(self.poses, np.float64)
        self.translations = np.asarray(self.translations, np.float64)
        self.bumps = tuple(self.bumps)
        if self.beta is not None:
            self.beta = np.asarray(self.beta, np.float64)

    @property
    def n_frames(self) -> int:
        return self.poses.shape[0]

    def validate(self) -> None:
        J = self.asset.n_joints
        if self.poses.shape != (self.n_frames, J, 3):
            raise CaptureError("pose trajectory shape does not match the skeleton")
        if self.translations.shape != (self.n_frames, 3):
            raise CaptureError("translation trajectory shape mismatch")
        if not np.all(np.isfinite(self.poses)):
            raise CaptureError("pose trajectory contains non-finite values")
        total_gain = sum(abs(b.gain) for b in self.bumps)
        if total_gain > self.max_amplitude:
            raise CaptureError(
                f"summed bump gains {total_gain:.3f} exceed max_amplitude")
        if self.beta is not None and len(self.beta) != self.asset.n_shape_params:
            raise CaptureError("beta length does not match the shape basis")


@dataclass(frozen=True)
class NoiseConfig:
    """Observation corruption; all channels default to clean."""

    depth_sigma: float = 0.0        # meters, additive per valid pixel
    joint_sigma: float = 0.0        # normalized image units
    joint_dropout: float = 0.0      # probability per landmark per frame
    corr_jitter: float = 0.0        # barycentric stddev
    mask_radius: int = 0            # erosion/dilation structuring radius

    def __post_init__(self):
        for name in ("depth_sigma", "joint_sigma", "joint_dropout",
                     "corr_jitter", "mask_radius"):
            if getattr(self, name) < 0:
                raise CaptureError(f"{name} must be nonnegative")


@dataclass
class CaptureResult:
    """Rendered sequence plus the ground truth that produced it."""

    observations: list[FrameObservation]
    gt_vertices: list[np.ndarray]      # posed surface per frame
    gt_triangles: np.ndarray
    gt_markers: np.ndarray             # (N, L, 3) posed landmark points
    gt_offsets: list[np.ndarray]       # canonical offsets per frame
    camera: PinholeCamera


def synthesize_frame_geometry(rig: GroundTruthRig, frame: int):
    """Posed ground-truth surface for one frame: (vertices, triangles, offsets)."""
    asset = rig.asset
    shaped = shaped_template(
        asset.template_vertices, asset.shape_blendshapes,
        rig.beta if rig.beta is not None else np.zeros(asset.n_shape_params))
    sub, attrs, _ = subdivide(shaped, asset.triangles, rig.subdivision,
                              attributes={"w": asset.skinning_weights})
    normals = np.asarray(vertex_normals(sub.vertices, sub.triangles))
    delta = np.asarray(constrain_pose(rig.poses[frame],
                                      asset.joint_bounds_lo,
                                      asset.joint_bounds_hi,
                                      asset.excluded_joints))
    bends = np.linalg.norm(delta, axis=1)
    offsets = procedural_offset_field(sub.vertices, normals, bends, rig.bumps)
    rest_joints = rest_joint_locations(asset.joint_regressor, shaped)
    tf = forward_kinematics(delta, rig.translations[frame], rest_joints,
                            asset.joint_parents, asset.topological_order())
    posed = np.asarray(lbs_pose(sub.vertices + offsets, attrs["w"], tf))
    return posed, sub, offsets


def _noisy_mask(occ: np.ndarray, radius: int, rng: np.random.Generator):
    if radius == 0:
        return occ
    op = binary_erosion if rng.random() < 0.5 else binary_dilation
    return op(occ > 0.5, iterations=radius).astype(np.float64)


def _jitter_barycentric(bary: np.ndarray, sigma: float,
                        rng: np.random.Generator) -> np.ndarray:
    if sigma == 0.0:
        return bary
    noisy = np.clip(bary + rng.normal(0.0, sigma, bary.shape), 0.0, None)
    s = noisy.sum(axis=1, keepdims=True)
    degenerate = s[:, 0] <= 1e-12
    noisy[degenerate] = bary[degenerate]
    s[degenerate] = 1.0
    return noisy / np.maximum(s, 1e-12)


def render_observations(rig: GroundTruthRig,
                        noise: NoiseConfig = NoiseConfig(),
                        corr_fraction: float = 0.05,
                        seed: int = 0) -> CaptureResult:
    """Render every frame of the rig into an observation bundle.

    All noise channels draw from one seeded generator, so a fixed seed
    reproduces the capture bit for bit.  Dense correspondences are
    emitted on the asset's base topology (consumers re-express them on
    their own subdivision level).
    """
    rig.validate()
    rng = np.random.default_rng(seed)
    cam = rig.camera
    asset = rig.asset
    H, W = cam.height, cam.width

    lm_base = SurfacePoints(asset.landmark_triangles, asset.landmark_barycentric)
    observations: list[FrameObservation] = []
    gt_vertices: list[np.ndarray] = []
    gt_offsets: list[np.ndarray] = []
    markers = np.zeros((rig.n_frames, asset.n_landmarks, 3))
    tris = None

    for f in range(rig.n_frames):
        posed, sub, offsets = synthesize_frame_geometry(rig, f)
        if tris is None:
            tris = sub.triangles
            lm_points = lm_base if rig.subdivision == 0 else \
                remap_to_subdivided(sub, lm_base)
        gt_vertices.append(posed)
        gt_offsets.append(offsets)

        frag = rasterize(cam, posed, tris)
        occ = frag.occupancy()
        if occ.sum() == 0:
            raise CaptureError(f"subject not visible in frame {f}")

        depth = np.where(frag.triangle >= 0, frag.depth, 0.0)
        if noise.depth_sigma > 0:
            fg = frag.triangle >= 0
            depth[fg] += rng.normal(0.0, noise.depth_sigma, int(fg.sum()))
        points, valid = backproject(cam, depth)
        normals_img = depth_normals(points, valid)

        mask = _noisy_mask(occ, noise.mask_radius, rng)

        markers[f] = np.asarray(sample_surface(lm_points, tris, posed))
        uv, in_front = project(cam, markers[f])
        uv = np.asarray(uv)
        joints2d = uv / np.array([W, H], np.float64)
        if noise.joint_sigma > 0:
            joints2d = joints2d + rng.normal(0.0, noise.joint_sigma, joints2d.shape)
        in_frame = ((uv[:, 0] >= 0) & (uv[:, 0] < W)
                    & (uv[:, 1] >= 0) & (uv[:, 1] < H))
        joints_valid = in_front & in_frame
        if noise.joint_dropout > 0:
            joints_valid &= rng.random(asset.n_landmarks) >= noise.joint_dropout

        rows, cols = np.nonzero(frag.triangle >= 0)
        n_corr = int(np.floor(corr_fraction * len(rows)))
        corr_pixels = np.zeros((0, 2), np.int64)
        corr_points = SurfacePoints(np.zeros(0, np.int64), np.zeros((0, 3)))
        if n_corr > 0:
            pick = rng.choice(len(rows), size=n_corr, replace=False)
            r, c = rows[pick], cols[pick]
            corr_pixels = np.stack([c, r], axis=1).astype(np.int64)
            face = frag.triangle[r, c].astype(np.int64)
            bary = frag.bary[r, c]
            base_tri = sub.face_parent[face]
            base_bary = np.einsum("nc,ncb->nb", bary, sub.face_corner_bary[face])
            base_bary = _jitter_barycentric(base_bary, noise.corr_jitter, rng)
            corr_points = SurfacePoints(base_tri, base_bary)

        obs = FrameObservation(
            depth_points=points, depth_valid=valid, depth_normals=normals_img,
            joints2d=joints2d, joints_valid=joints_valid,
            corr_pixels=corr_pixels, corr_points=corr_points, mask=mask)
        obs.validate(cam, asset.triangles.shape[0])
        observations.append(obs)

    return CaptureResult(observations, gt_vertices, tris, markers,
                         gt_offsets, cam)


def default_capture_camera(resolution: int = 256) -> PinholeCamera:
    """Frames the default humanoid at ~2.5 m with comfortable margins."""
    f = 200.0 * resolution / 256.0
    c = 0.5 * resolution
    return PinholeCamera(width=resolution, height=resolution,
                         fx=f, fy=f, cx=c, cy=c)
