"""Procedural humanoid asset generation."""

import numpy as np
import pytest

from bodyfit.humanoid import HumanoidConfig, build_humanoid
from bodyfit.mesh import is_watertight, sample_surface
from bodyfit.rigged import AssetError


@pytest.fixture(scope="module")
def asset():
    return build_humanoid(HumanoidConfig(grid_resolution=30))


def test_default_humanoid_passes_validation(asset):
    asset.validate()   # raises on failure
    assert asset.n_joints == 16
    assert asset.n_vertices > 200
    assert asset.n_shape_params == 2


def test_template_surface_is_watertight(asset):
    assert is_watertight(asset.triangles)


def test_joint_count_follows_spine_segments():
    cfg = HumanoidConfig(spine_segments=3, grid_resolution=24)
    a = build_humanoid(cfg)
    assert cfg.joint_count == 17
    assert a.n_joints == 17
    # unconstrained pose dimension 3 per joint
    assert a.n_joints * 3 == 51


def test_skinning_rows_are_convex_and_sparse(asset):
    W = asset.skinning_weights
    assert np.all(W >= 0)
    np.testing.assert_allclose(W.sum(axis=1), 1.0, atol=1e-9)
    assert np.max(np.count_nonzero(W, axis=1)) <= 4


def test_regressor_places_joints_near_nominal_positions(asset):
    # regressed rest joints should land close to the skeleton the capsules
    # were built from (surface rings are centered on the bones)
    from bodyfit.humanoid import _skeleton
    _, _, joints, _, _ = _skeleton(HumanoidConfig(grid_resolution=30))
    regressed = asset.joint_regressor @ asset.template_vertices
    err = np.linalg.norm(regressed - joints, axis=1)
    assert np.median(err) < 0.06
    assert err.max() < 0.15


def test_scale_blendshape_scales_vertex_norms():
    cfg = HumanoidConfig(grid_resolution=24)
    a = build_humanoid(cfg)
    beta = np.array([1.0, 0.0])
    shaped = a.template_vertices + np.einsum(
        "s,smk->mk", beta, a.shape_blendshapes)
    ratio = np.linalg.norm(shaped, axis=1) / np.maximum(
        np.linalg.norm(a.template_vertices, axis=1), 1e-12)
    np.testing.assert_allclose(ratio, 1.0 + cfg.scale_unit, atol=1e-9)


def test_girth_blendshape_is_lateral_only():
    a = build_humanoid(HumanoidConfig(grid_resolution=24))
    B = a.shape_blendshapes[1]
    np.testing.assert_array_equal(B[:, 1], 0.0)   # no vertical change
    assert np.any(B[:, 0] != 0) and np.any(B[:, 2] != 0)


def test_hands_and_feet_are_excluded(asset):
    assert len(asset.excluded_joints) == 4
    assert len(asset.excluded_vertices) > 0
    # excluded vertices sit at the extremities (far from the pelvis origin)
    ex = asset.template_vertices[asset.excluded_vertices]
    assert np.all(np.abs(ex[:, 0]) + np.abs(ex[:, 1]) > 0.5)


def test_landmarks_are_valid_and_spread(asset):
    assert asset.n_landmarks == 25
    pos = sample_surface(
        __import__("bodyfit.mesh", fromlist=["SurfacePoints"]).SurfacePoints(
            asset.landmark_triangles, asset.landmark_barycentric),
        asset.triangles, asset.template_vertices)
    # pairwise distinct and covering a good part of the body
    d = np.linalg.norm(pos[:, None] - pos[None, :], axis=2)
    np.fill_diagonal(d, np.inf)
    assert d.min() > 0.02
    assert pos[:, 1].max() - pos[:, 1].min() > 1.0


def test_generation_is_deterministic():
    a1 = build_humanoid(HumanoidConfig(grid_resolution=24))
    a2 = build_humanoid(HumanoidConfig(grid_resolution=24))
    assert np.array_equal(a1.template_vertices, a2.template_vertices)
    assert np.array_equal(a1.skinning_weights, a2.skinning_weights)
    assert np.array_equal(a1.landmark_triangles, a2.landmark_triangles)


def test_degenerate_configs_are_rejected():
    with pytest.raises(AssetError):
        build_humanoid(HumanoidConfig(spine_segments=0))
    with pytest.raises(AssetError):
        build_humanoid(HumanoidConfig(grid_resolution=8))
