"""Rigged template body: pose constraint, kinematics, linear blend skinning.

All math helpers dual-dispatch through :mod:`bodyfit.autodiff`, so they
accept either plain float64 arrays or tape tensors and propagate
gradients in the latter case.

Conventions: joint 0 is the root; rotations are axis-angle per joint in
the parent frame; the constrained pose ``delta`` lives strictly inside
per-component bounds via a tanh squash of the unconstrained parameters.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor, value_of

ASSET_FORMAT = "rigged-body-asset"
ASSET_VERSION = 1


class AssetError(ValueError):
    """Raised when a rigged body asset violates a structural invariant."""


@dataclass
class RiggedBodyAsset:
    """Template mesh, skeleton and skinning data for one body model.

    Shapes: ``M`` template vertices, ``F`` triangles, ``J`` joints
    (root included), ``S`` shape blendshapes, ``L`` landmark surface
    points (used to emulate a sparse 2D keypoint detector).
    """

    template_vertices: np.ndarray        # (M, 3)
    triangles: np.ndarray                # (F, 3) int
    joint_parents: np.ndarray            # (J,) int, parents[root] == -1
    joint_regressor: np.ndarray          # (J, M) rows nonnegative
    skinning_weights: np.ndarray         # (M, J) rows sum to 1
    shape_blendshapes: np.ndarray        # (S, M, 3), S may be 0
    joint_bounds_lo: np.ndarray          # (J, 3)
    joint_bounds_hi: np.ndarray          # (J, 3)
    excluded_joints: np.ndarray = field(default_factory=lambda: np.zeros(0, int))
    excluded_vertices: np.ndarray = field(default_factory=lambda: np.zeros(0, int))
    pose_blendshapes: np.ndarray | None = None   # (9*(J-1), M, 3) optional
    landmark_triangles: np.ndarray = field(default_factory=lambda: np.zeros(0, int))
    landmark_barycentric: np.ndarray = field(default_factory=lambda: np.zeros((0, 3)))

    def __post_init__(self):
        self.template_vertices = np.asarray(self.template_vertices, np.float64)
        self.triangles = np.asarray(self.triangles, np.int64)
        self.joint_parents = np.asarray(self.joint_parents, np.int64)
        self.joint_regressor = np.asarray(self.joint_regressor, np.float64)
        self.skinning_weights = np.asarray(self.skinning_weights, np.float64)
        self.shape_blendshapes = np.asarray(self.shape_blendshapes, np.float64)
        if self.shape_blendshapes.size == 0:
            self.shape_blendshapes = self.shape_blendshapes.reshape(
                0, self.n_vertices, 3)
        self.joint_bounds_lo = np.asarray(self.joint_bounds_lo, np.float64)
        self.joint_bounds_hi = np.asarray(self.joint_bounds_hi, np.float64)
        self.excluded_joints = np.asarray(self.excluded_joints, np.int64)
        self.excluded_vertices = np.asarray(self.excluded_vertices, np.int64)
        if self.pose_blendshapes is not None:
            self.pose_blendshapes = np.asarray(self.pose_blendshapes, np.float64)
        self.landmark_triangles = np.asarray(self.landmark_triangles, np.int64)
        self.landmark_barycentric = np.asarray(self.landmark_barycentric, np.float64)
        self._topo_order: np.ndarray | None = None

    # -- sizes -------------------------------------------------------------

    @property
    def n_vertices(self) -> int:
        return self.template_vertices.shape[0]

    @property
    def n_joints(self) -> int:
        return self.joint_parents.shape[0]

    @property
    def n_shape_params(self) -> int:
        return self.shape_blendshapes.shape[0]

    @property
    def n_landmarks(self) -> int:
        return self.landmark_triangles.shape[0]

    def topological_order(self) -> np.ndarray:
        """Joint indices ordered so every parent precedes its children."""
        if self._topo_order is None:
            parents = self.joint_parents
            order, seen = [], np.zeros(len(parents), bool)
            roots = np.flatnonzero(parents < 0)
            stack = list(roots[::-1])
            children: list[list[int]] = [[] for _ in parents]
            for k, p in enumerate(parents):
                if p >= 0:
                    children[p].append(k)
            while stack:
                k = stack.pop()
                if seen[k]:
                    raise AssetError("joint hierarchy contains a cycle")
                seen[k] = True
                order.append(k)
                stack.extend(reversed(children[k]))
            if not seen.all():
                raise AssetError("joint hierarchy is disconnected")
            self._topo_order = np.asarray(order, np.int64)
        return self._topo_order

    # -- validation ----------------------------------------------------------

    def validate(self) -> None:
        M, J = self.n_vertices, self.n_joints
        def bad(msg):
            raise AssetError(msg)

        for name in ("template_vertices", "joint_regressor", "skinning_weights",
                     "shape_blendshapes", "joint_bounds_lo", "joint_bounds_hi",
                     "landmark_barycentric"):
            if not np.all(np.isfinite(getattr(self, name))):
                bad(f"{name} contains non-finite values")
        if self.template_vertices.shape != (M, 3):
            bad("template_vertices must be (M, 3)")
        if self.triangles.ndim != 2 or self.triangles.shape[1] != 3:
            bad("triangles must be (F, 3)")
        if self.triangles.size and (self.triangles.min() < 0
                                    or self.triangles.max() >= M):
            bad("triangle indices out of range")
        if np.count_nonzero(self.joint_parents < 0) != 1:
            bad("exactly one root joint required")
        if np.any(self.joint_parents >= J):
            bad("joint parent index out of range")
        self._topo_order = None
        self.topological_order()   # raises on cycles / disconnection
        if self.joint_regressor.shape != (J, M):
            bad("joint_regressor must be (J, M)")
        if np.any(self.joint_regressor < -1e-12):
            bad("joint_regressor must be nonnegative")
        if self.skinning_weights.shape != (M, J):
            bad("skinning_weights must be (M, J)")
        if np.any(self.skinning_weights < -1e-12):
            bad("skinning weights must be nonnegative")
        if np.max(np.abs(self.skinning_weights.sum(axis=1) - 1.0)) > 1e-9:
            bad("skinning weight rows must sum to 1")
        if self.shape_blendshapes.shape[1:] != (M, 3):
            bad("shape_blendshapes must be (S, M, 3)")
        if self.joint_bounds_lo.shape != (J, 3) or self.joint_bounds_hi.shape != (J, 3):
            bad("joint bounds must be (J, 3)")
        if np.any(self.joint_bounds_lo >= self.joint_bounds_hi):
            bad("joint bounds require lo < hi componentwise")
        if np.any(self.joint_bounds_lo > 0) or np.any(self.joint_bounds_hi < 0):
            bad("joint bounds must straddle the rest pose")
        root = int(np.flatnonzero(self.joint_parents < 0)[0])
        for idx, name in ((self.excluded_joints, "excluded_joints"),
                          (self.excluded_vertices, "excluded_vertices")):
            if idx.size and (idx.min() < 0 or idx.max() >= (J if name == "excluded_joints" else M)):
                bad(f"{name} indices out of range")
        if root in set(self.excluded_joints.tolist()):
            bad("root joint cannot be excluded")
        if self.pose_blendshapes is not None:
            if self.pose_blendshapes.shape != (9 * (J - 1), M, 3):
                bad("pose_blendshapes must be (9*(J-1), M, 3)")
        L = self.n_landmarks
        if self.landmark_barycentric.shape != (L, 3):
            bad("landmark_barycentric must be (L, 3)")
        if L:
            if self.landmark_triangles.min() < 0 or self.landmark_triangles.max() >= len(self.triangles):
                bad("landmark triangle indices out of range")
            if np.any(self.landmark_barycentric < -1e-12):
                bad("landmark barycentric coordinates must be nonnegative")
            if np.max(np.abs(self.landmark_barycentric.sum(axis=1) - 1.0)) > 1e-9:
                bad("landmark barycentric rows must sum to 1")

    # -- serialization ---------------------------------------------------------

    def to_dict(self) -> dict:
        d = {
            "format": ASSET_FORMAT,
            "version": ASSET_VERSION,
            "template_vertices": self.template_vertices.tolist(),
            "triangles": self.triangles.tolist(),
            "joint_parents": self.joint_parents.tolist(),
            "joint_regressor": self.joint_regressor.tolist(),
            "skinning_weights": self.skinning_weights.tolist(),
            "shape_blendshapes": self.shape_blendshapes.tolist(),
            "joint_bounds_lo": self.joint_bounds_lo.tolist(),
            "joint_bounds_hi": self.joint_bounds_hi.tolist(),
            "excluded_joints": self.excluded_joints.tolist(),
            "excluded_vertices": self.excluded_vertices.tolist(),
            "landmark_triangles": self.landmark_triangles.tolist(),
            "landmark_barycentric": self.landmark_barycentric.tolist(),
        }
        if self.pose_blendshapes is not None:
            d["pose_blendshapes"] = self.pose_blendshapes.tolist()
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "RiggedBodyAsset":
        if d.get("format") != ASSET_FORMAT:
            raise AssetError(f"not a {ASSET_FORMAT} file")
        if int(d.get("version", -1)) > ASSET_VERSION:
            raise AssetError("asset file version is newer than this reader")
        kwargs = {}
        for key in ("template_vertices", "triangles", "joint_parents",
                    "joint_regressor", "skinning_weights", "shape_blendshapes",
                    "joint_bounds_lo", "joint_bounds_hi", "excluded_joints",
                    "excluded_vertices", "landmark_triangles",
                    "landmark_barycentric"):
            if key in d:
                kwargs[key] = np.asarray(d[key])
        if "pose_blendshapes" in d:
            kwargs["pose_blendshapes"] = np.asarray(d["pose_blendshapes"])
        asset = cls(**kwargs)
        asset.validate()
        return asset

    def save(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(self.to_dict()))

    @classmethod
    def load(cls, path: str | Path) -> "RiggedBodyAsset":
        return cls.from_dict(json.loads(Path(path).read_text()))


def default_joint_bounds(n_joints: int,
                         root_limit: float = np.pi,
                         limit: float = 2.0 * np.pi / 3.0):
    """Symmetric per-component bounds: root gets the wider limit."""
    lo = np.full((n_joints, 3), -limit)
    hi = np.full((n_joints, 3), limit)
    lo[0, :] = -root_limit
    hi[0, :] = root_limit
    return lo, hi


# -- pose constraint ---------------------------------------------------------


def constrain_pose(x, lo, hi, excluded_joints=None):
    """Squash unconstrained pose ``x`` strictly inside (lo, hi) per component.

    ``x`` has shape (J, 3) or flat (3J,).  Excluded joints (if given) are
    forced to the rest rotation.  Raises on non-finite input.
    """
    lo = np.asarray(lo, np.float64)
    hi = np.asarray(hi, np.float64)
    xv = value_of(x)
    if not np.all(np.isfinite(xv)):
        bad = np.argwhere(~np.isfinite(xv))
        raise ValueError(f"non-finite pose parameter at flat index {bad[0]}")
    J = lo.shape[0]
    xr = ad.reshape(x, (J, 3)) if xv.shape != (J, 3) else x
    # tanh saturates to exactly +-1 in f64 around |x| ~ 19; clamp so the
    # result stays strictly inside the bounds for any finite input
    u = ad.minimum(ad.maximum(ad.tanh(xr), -1.0 + 1e-12), 1.0 - 1e-12)
    delta = lo + (u + 1.0) * 0.5 * (hi - lo)
    if excluded_joints is not None and len(excluded_joints) > 0:
        keep = np.ones((J, 1), bool)
        keep[np.asarray(excluded_joints, int)] = False
        delta = ad.where(keep, delta, np.zeros((J, 3)))
    return delta


def invert_constrain(delta, lo, hi):
    """Unconstrained parameters reproducing ``delta``; inverse of constrain_pose."""
    delta = np.asarray(delta, np.float64)
    lo = np.asarray(lo, np.float64)
    hi = np.asarray(hi, np.float64)
    if np.any(delta < lo) or np.any(delta > hi):
        raise ValueError("pose outside joint bounds")
    u = 2.0 * (delta - lo) / (hi - lo) - 1.0
    u = np.clip(u, -1.0 + 1e-15, 1.0 - 1e-15)
    return np.arctanh(u)


# -- rotations ----------------------------------------------------------------


def rotation_matrices(axis_angle):
    """Batched axis-angle (J, 3) to rotation matrices (J, 3, 3).

    Uses R = I + A [a]x + B (a a^T - t2 I) with A = sin(t)/t and
    B = (1 - cos(t))/t^2; both switch to their Taylor series below
    t2 = 1e-12 so gradients stay finite through the rest pose.
    """
    aav = value_of(axis_angle)
    J = aav.shape[0]
    aa = axis_angle if isinstance(axis_angle, Tensor) else aav
    t2 = ad.sum_(aa * aa, axis=1)                     # (J,)
    small = value_of(t2) < 1e-12
    t2c = ad.maximum(t2, 1e-12)
    theta = ad.sqrt(t2c)
    A = ad.where(small, 1.0 - t2 / 6.0, ad.sin(theta) / theta)
    B = ad.where(small, 0.5 - t2 / 24.0, (1.0 - ad.cos(theta)) / t2c)

    ax, ay, az = aa[:, 0], aa[:, 1], aa[:, 2]
    zero = ax * 0.0
    skew = ad.stack([zero, -az, ay, az, zero, -ax, -ay, ax, zero], axis=1)
    skew = ad.reshape(skew, (J, 3, 3))
    outer = ad.reshape(aa, (J, 3, 1)) * ad.reshape(aa, (J, 1, 3))
    eye = np.broadcast_to(np.eye(3), (J, 3, 3))
    A3 = ad.reshape(A, (J, 1, 1))
    B3 = ad.reshape(B, (J, 1, 1))
    t23 = ad.reshape(t2, (J, 1, 1))
    return eye + A3 * skew + B3 * (outer - t23 * eye)


def rodrigues(axis_angle):
    """Single axis-angle vector (3,) to one rotation matrix (3, 3)."""
    R = rotation_matrices(ad.reshape(axis_angle, (1, 3)))
    return ad.reshape(R, (3, 3))


# -- kinematics ----------------------------------------------------------------


@dataclass
class JointTransforms:
    """Per-joint rigid transforms mapping rest-pose space to posed space.

    ``rot[k] x + tr[k]`` poses a point rigidly attached to joint ``k``;
    ``joints`` are the posed joint locations; ``local_rot`` are the
    per-joint rotations in the parent frame (rodrigues of the pose).
    """

    rot: object      # (J, 3, 3) Tensor or ndarray
    tr: object       # (J, 3)
    joints: object   # (J, 3)
    local_rot: object  # (J, 3, 3)

    def matrices(self) -> np.ndarray:
        """Plain (J, 4, 4) homogeneous transforms (forward values)."""
        rot = value_of(self.rot)
        tr = value_of(self.tr)
        J = rot.shape[0]
        out = np.tile(np.eye(4), (J, 1, 1))
        out[:, :3, :3] = rot
        out[:, :3, 3] = tr
        return out


def forward_kinematics(delta, translation, rest_joints, parents,
                       topo_order=None) -> JointTransforms:
    """Compose per-joint global transforms along the hierarchy.

    ``delta`` (J, 3) constrained axis-angle pose, ``translation`` (3,)
    root offset, ``rest_joints`` (J, 3).  At the rest pose with zero
    translation every returned transform is the identity.
    """
    parents = np.asarray(parents, np.int64)
    J = parents.shape[0]
    if topo_order is None:
        topo_order = np.arange(J)
    local = rotation_matrices(delta)
    rj = rest_joints

    rot_g: list = [None] * J
    pos_g: list = [None] * J
    for k in topo_order:
        k = int(k)
        Rk = ad.reshape(local[k], (3, 3))
        jk = rj[k] if isinstance(rj, Tensor) else np.asarray(value_of(rj))[k]
        p = parents[k]
        if p < 0:
            rot_g[k] = Rk
            pos_g[k] = jk + translation
        else:
            rot_g[k] = ad.matmul(rot_g[p], Rk)
            jp = rj[p] if isinstance(rj, Tensor) else np.asarray(value_of(rj))[p]
            pos_g[k] = pos_g[p] + ad.matmul(rot_g[p], jk - jp)

    rot = ad.stack(rot_g, axis=0)
    joints = ad.stack(pos_g, axis=0)
    rj_full = rj if isinstance(rj, Tensor) else value_of(rj)
    tr = joints - ad.bmatvec(rot, rj_full)
    return JointTransforms(rot=rot, tr=tr, joints=joints, local_rot=local)


def lbs_pose(unposed_vertices, skinning_weights, transforms: JointTransforms):
    """Linear blend skinning of (M, 3) points with (M, J) weights."""
    W = np.asarray(skinning_weights, np.float64)
    M = W.shape[0]
    J = W.shape[1]
    rot_flat = ad.reshape(transforms.rot, (J, 9))
    blended_rot = ad.reshape(ad.matmul(W, rot_flat), (M, 3, 3))
    blended_tr = ad.matmul(W, transforms.tr)
    return ad.bmatvec(blended_rot, unposed_vertices) + blended_tr


def shaped_template(template_vertices, shape_blendshapes, beta):
    """Template plus shape blendshape combination: (M, 3)."""
    T = template_vertices
    S = np.asarray(value_of(shape_blendshapes)).shape[0]
    if S == 0:
        return T if isinstance(T, Tensor) else np.array(value_of(T))
    M = np.asarray(value_of(T)).shape[0]
    B = ad.reshape(shape_blendshapes, (S, M * 3))
    disp = ad.reshape(ad.matmul(beta, B), (M, 3))
    return T + disp


def pose_feature(delta, local_rot=None):
    """Flattened (R_k - I) over non-root joints: shape (J-1, 9).

    Root rotation is excluded so global orientation does not leak into
    the feature.  ``local_rot`` may pass precomputed rodrigues output.
    """
    R = rotation_matrices(delta) if local_rot is None else local_rot
    J = value_of(R).shape[0]
    eye = np.broadcast_to(np.eye(3), (J - 1, 3, 3))
    return ad.reshape(R[1:] - eye, (J - 1, 9))


def rest_joint_locations(joint_regressor, vertices):
    """Rest joint positions: regressor (J, M) applied to (M, 3) vertices."""
    return ad.matmul(joint_regressor, vertices)
