"""Procedural humanoid asset: capsule-union SDF meshed by marching cubes.

Builds a complete :class:`~bodyfit.rigged.RiggedBodyAsset` from a handful
of proportions: skeleton joints, a watertight template surface, smooth
capsule-falloff skinning weights (top-k truncated), a Gaussian-ring joint
regressor, two shape blendshapes (overall scale, lateral girth) and a set
of farthest-point-sampled landmark surface points that stand in for a
sparse 2D keypoint detector.

World frame is y-down (camera-like): the head extends toward -y, feet
toward +y, and the body is built around the pelvis at the origin.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from skimage import measure

from .mesh import farthest_point_sample, is_watertight
from .rigged import AssetError, RiggedBodyAsset, default_joint_bounds


@dataclass(frozen=True)
class HumanoidConfig:
    height: float = 1.75            # head-to-toe scale reference (m)
    girth: float = 1.0              # capsule radius multiplier
    grid_resolution: int = 48       # cells along the longest bbox axis
    spine_segments: int = 2
    falloff: float = 0.05           # skinning weight falloff sigma (m)
    regressor_sigma: float = 0.06   # joint regressor ring sigma (m)
    n_landmarks: int = 25
    smooth_k: float = 0.02          # SDF smooth-union temperature (m)
    max_bone_influences: int = 4
    scale_unit: float = 0.1         # blendshape 0: fractional scale per unit
    girth_unit: float = 0.08        # blendshape 1: lateral inflate per unit

    @property
    def joint_count(self) -> int:
        # root + spine chain + head + 2 arms x 3 + 2 legs x 3
        return 2 + self.spine_segments + 12


def _skeleton(cfg: HumanoidConfig):
    """Joint names, parents, rest positions and bone capsules."""
    h = cfg.height / 1.75
    g = cfg.girth
    names, parents, pos = [], [], []

    def add(name, parent, p):
        names.append(name)
        parents.append(parent)
        pos.append(p)
        return len(names) - 1

    pelvis = add("pelvis", -1, (0.0, 0.0, 0.0))
    s = cfg.spine_segments
    spine_ids = []
    prev = pelvis
    for i in range(s):
        t = 0.5 if s == 1 else i / (s - 1)
        y = -(0.12 + 0.28 * t) * h
        prev = add(f"spine{i}", prev, (0.0, y, 0.0))
        spine_ids.append(prev)
    chest = spine_ids[-1]
    head = add("head", chest, (0.0, -0.46 * h, 0.0))
    caps = []  # (owner joint, p0, p1, radius)

    def P(t):
        return np.asarray(t, np.float64)

    caps.append((pelvis, P((0, -0.03 * h, 0)), P((0, 0.07 * h, 0)), 0.105 * h * g))
    chain = spine_ids + [head]
    for i, j in enumerate(spine_ids):
        caps.append((j, P(pos[j]), P(pos[chain[i + 1]]), 0.10 * h * g))
    caps.append((head, P(pos[head]), P((0, -0.62 * h, 0)), 0.08 * h * g))

    for side, sx in (("l", 1.0), ("r", -1.0)):
        sh = add(f"{side}_shoulder", chest, (sx * 0.17 * h, -0.40 * h, 0.0))
        el = add(f"{side}_elbow", sh, (sx * 0.43 * h, -0.40 * h, 0.0))
        wr = add(f"{side}_wrist", el, (sx * 0.65 * h, -0.40 * h, 0.0))
        caps.append((sh, P(pos[sh]), P(pos[el]), 0.048 * h * g))
        caps.append((el, P(pos[el]), P(pos[wr]), 0.040 * h * g))
        caps.append((wr, P(pos[wr]), P((sx * 0.75 * h, -0.40 * h, 0.0)), 0.033 * h * g))
    for side, sx in (("l", 1.0), ("r", -1.0)):
        hip = add(f"{side}_hip", pelvis, (sx * 0.09 * h, 0.05 * h, 0.0))
        kn = add(f"{side}_knee", hip, (sx * 0.10 * h, 0.49 * h, 0.0))
        an = add(f"{side}_ankle", kn, (sx * 0.10 * h, 0.90 * h, 0.0))
        caps.append((hip, P(pos[hip]), P(pos[kn]), 0.075 * h * g))
        caps.append((kn, P(pos[kn]), P(pos[an]), 0.058 * h * g))
        caps.append((an, P(pos[an]), P((sx * 0.10 * h, 0.96 * h, -0.12 * h)), 0.038 * h * g))

    excluded = [i for i, n in enumerate(names)
                if n.endswith("_wrist") or n.endswith("_ankle")]
    return (names, np.asarray(parents, np.int64),
            np.asarray(pos, np.float64), caps, np.asarray(excluded, np.int64))


def _capsule_distances(points: np.ndarray, caps) -> np.ndarray:
    """Outside distance of each point to each capsule surface: (N, C)."""
    N = len(points)
    out = np.empty((N, len(caps)))
    for c, (_, a, b, r) in enumerate(caps):
        ba = b - a
        denom = float(ba @ ba)
        if denom < 1e-18:
            t = np.zeros(N)
        else:
            t = np.clip((points - a) @ ba / denom, 0.0, 1.0)
        closest = a + t[:, None] * ba
        out[:, c] = np.linalg.norm(points - closest, axis=1) - r
    return out


def _sdf(points: np.ndarray, caps, smooth_k: float) -> np.ndarray:
    """Smooth-min union of capsule SDFs (negative inside)."""
    d = _capsule_distances(points, caps)
    dmin = d.min(axis=1, keepdims=True)
    return (dmin - smooth_k * np.log(
        np.sum(np.exp(-(d - dmin) / smooth_k), axis=1, keepdims=True))).ravel()


def _extract_surface(cfg: HumanoidConfig, caps):
    pts = np.concatenate([[a, b] for _, a, b, _ in caps])
    rmax = max(r for *_, r in caps)
    lo = pts.min(axis=0) - (rmax + 0.08)
    hi = pts.max(axis=0) + (rmax + 0.08)
    extent = hi - lo
    cell = extent.max() / cfg.grid_resolution
    dims = np.maximum(np.ceil(extent / cell).astype(int) + 1, 2)
    xs = [lo[k] + cell * np.arange(dims[k]) for k in range(3)]
    grid = np.stack(np.meshgrid(*xs, indexing="ij"), axis=-1).reshape(-1, 3)
    vol = _sdf(grid, caps, cfg.smooth_k).reshape(dims)
    if vol.min() >= 0:
        raise AssetError("SDF has no interior; check proportions/resolution")
    verts, faces, _, _ = measure.marching_cubes(vol, level=0.0,
                                                spacing=(cell, cell, cell))
    verts = verts.astype(np.float64) + lo
    faces = faces.astype(np.int64)
    # orient all faces outward (positive enclosed volume)
    v = verts
    vol6 = np.einsum("ij,ij->i", v[faces[:, 0]],
                     np.cross(v[faces[:, 1]], v[faces[:, 2]])).sum()
    if vol6 < 0:
        faces = faces[:, ::-1]
    return verts, faces


def build_humanoid(cfg: HumanoidConfig | None = None) -> RiggedBodyAsset:
    """Generate and validate a complete rigged humanoid asset."""
    cfg = cfg or HumanoidConfig()
    if cfg.spine_segments < 1:
        raise AssetError("spine_segments must be >= 1")
    if cfg.grid_resolution < 12:
        raise AssetError("grid_resolution too coarse to mesh the body")
    names, parents, joints, caps, excluded_joints = _skeleton(cfg)
    verts, faces = _extract_surface(cfg, caps)
    if not is_watertight(faces):
        raise AssetError("extracted surface is not watertight; "
                         "raise grid_resolution")
    M, J = len(verts), len(parents)

    # skinning: capsule-surface distance falloff, truncated to top-k
    d = np.maximum(_capsule_distances(verts, caps), 0.0)
    w_cap = np.exp(-((d / cfg.falloff) ** 2))
    W = np.zeros((M, J))
    for c, (owner, *_rest) in enumerate(caps):
        W[:, owner] = np.maximum(W[:, owner], w_cap[:, c])
    k = cfg.max_bone_influences
    if k < J:
        thresh = np.partition(W, J - k, axis=1)[:, J - k][:, None]
        W[W < thresh] = 0.0
    W /= W.sum(axis=1, keepdims=True)

    # joint regressor: Gaussian ring of surface vertices around each joint
    reg = np.exp(-np.square(
        np.linalg.norm(verts[None, :, :] - joints[:, None, :], axis=2)
        / cfg.regressor_sigma))
    reg /= reg.sum(axis=1, keepdims=True)

    # blendshapes: 0 = overall scale about the pelvis, 1 = lateral girth
    blend = np.zeros((2, M, 3))
    blend[0] = cfg.scale_unit * verts
    blend[1, :, 0] = cfg.girth_unit * verts[:, 0]
    blend[1, :, 2] = cfg.girth_unit * verts[:, 2]

    excluded_vertices = np.flatnonzero(
        np.isin(np.argmax(W, axis=1), excluded_joints))

    # landmark surface points: farthest-point spread over the template
    lm_verts = farthest_point_sample(verts, cfg.n_landmarks)
    first_face = np.full(M, -1, np.int64)
    corner = np.full(M, 0, np.int64)
    for f in range(len(faces) - 1, -1, -1):
        for c in range(3):
            first_face[faces[f, c]] = f
            corner[faces[f, c]] = c
    lm_tris = first_face[lm_verts]
    lm_bary = np.zeros((cfg.n_landmarks, 3))
    lm_bary[np.arange(cfg.n_landmarks), corner[lm_verts]] = 1.0

    lo_b, hi_b = default_joint_bounds(J)
    asset = RiggedBodyAsset(
        template_vertices=verts, triangles=faces, joint_parents=parents,
        joint_regressor=reg, skinning_weights=W, shape_blendshapes=blend,
        joint_bounds_lo=lo_b, joint_bounds_hi=hi_b,
        excluded_joints=excluded_joints, excluded_vertices=excluded_vertices,
        landmark_triangles=lm_tris, landmark_barycentric=lm_bary)
    asset.validate()
    return asset
