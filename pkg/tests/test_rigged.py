"""Pose constraint, rotations, kinematics and skinning against oracles."""

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy.spatial.transform import Rotation

from bodyfit import autodiff as ad
from bodyfit.autodiff import ParameterBlock, Tape
from bodyfit import rigged
from bodyfit.rigged import (
    AssetError,
    JointTransforms,
    RiggedBodyAsset,
    constrain_pose,
    default_joint_bounds,
    forward_kinematics,
    invert_constrain,
    lbs_pose,
    pose_feature,
    rodrigues,
    rotation_matrices,
    shaped_template,
)

# tanh at high precision (40 digits), frozen
TANH_HALF = 0.4621171572600097585023184836436725487303
TANH_M12 = -0.8336546070121552586740951218123143782196


def make_chain_asset(n_joints=3, bone=0.5):
    """Straight chain along +x with one vertex per joint segment."""
    J = n_joints
    joints = np.zeros((J, 3))
    joints[:, 0] = bone * np.arange(J)
    M = 2 * J
    verts = np.zeros((M, 3))
    verts[:, 0] = np.linspace(0.0, bone * J, M)
    tris = np.array([[0, 1, 2]])
    parents = np.full(J, -1, int)
    parents[1:] = np.arange(J - 1)
    # regressor: each joint from the two vertices nearest to it
    reg = np.zeros((J, M))
    for k in range(J):
        d = np.abs(verts[:, 0] - joints[k, 0])
        near = np.argsort(d)[:2]
        w = 1.0 / (d[near] + 1e-3)
        reg[k, near] = w / w.sum()
    # hard skinning to the segment owning each vertex
    W = np.zeros((M, J))
    for m in range(M):
        k = min(int(verts[m, 0] / bone), J - 1)
        W[m, k] = 1.0
    lo, hi = default_joint_bounds(J)
    return RiggedBodyAsset(
        template_vertices=verts, triangles=tris, joint_parents=parents,
        joint_regressor=reg, skinning_weights=W,
        shape_blendshapes=np.zeros((0, M, 3)),
        joint_bounds_lo=lo, joint_bounds_hi=hi,
        landmark_triangles=np.array([0]),
        landmark_barycentric=np.array([[1.0, 0.0, 0.0]]))


# -- constrain_pose -----------------------------------------------------------


def test_constrain_zero_maps_to_bounds_midpoint():
    lo = np.array([[-1.0, -2.0, 0.0 - 1.0]])
    hi = np.array([[1.0, 4.0, 3.0]])
    d = constrain_pose(np.zeros((1, 3)), lo, hi)
    np.testing.assert_allclose(d, (lo + hi) / 2.0, atol=1e-15)


def test_constrain_matches_high_precision_tanh_oracle():
    lo = np.full((1, 3), -1.0)
    hi = np.full((1, 3), 1.0)
    d = constrain_pose(np.array([[0.5, -1.2, 0.0]]), lo, hi)
    np.testing.assert_allclose(
        d[0], [TANH_HALF, TANH_M12, 0.0], rtol=0, atol=1e-15)


@settings(max_examples=60, deadline=None)
@given(st.floats(min_value=-1e6, max_value=1e6,
                 allow_nan=False, allow_infinity=False))
def test_constrain_stays_strictly_inside_bounds(x):
    lo = np.array([[-np.pi, -0.5, -2.0]])
    hi = np.array([[np.pi, 1.5, 0.25]])
    d = np.asarray(constrain_pose(np.full((1, 3), x), lo, hi))
    assert np.all(d > lo) and np.all(d < hi)


def test_constrain_is_monotone_per_component():
    lo, hi = np.full((1, 3), -2.0), np.full((1, 3), 2.0)
    xs = np.linspace(-4, 4, 33)
    vals = [float(np.asarray(constrain_pose(np.array([[x, 0, 0]]), lo, hi))[0, 0])
            for x in xs]
    assert np.all(np.diff(vals) > 0)


def test_constrain_rejects_non_finite_input():
    lo, hi = default_joint_bounds(1)
    with pytest.raises(ValueError, match="non-finite"):
        constrain_pose(np.array([[np.nan, 0, 0]]), lo, hi)


def test_constrain_zeroes_excluded_joints():
    lo, hi = default_joint_bounds(3)
    x = np.ones((3, 3))
    d = np.asarray(constrain_pose(x, lo, hi, excluded_joints=[2]))
    assert np.all(d[2] == 0.0)
    assert np.all(d[:2] != 0.0)


def test_invert_constrain_round_trips():
    rng = np.random.default_rng(4)
    lo, hi = default_joint_bounds(4)
    x = rng.normal(size=(4, 3))
    d = np.asarray(constrain_pose(x, lo, hi))
    x2 = invert_constrain(d, lo, hi)
    np.testing.assert_allclose(x2, x, rtol=1e-9, atol=1e-9)


def test_constrain_gradient_matches_finite_differences():
    lo, hi = default_joint_bounds(2)
    blk = ParameterBlock("x", np.array([0.3, -0.7, 1.1, 0.0, 2.0, -3.0]))
    w = np.arange(1.0, 7.0).reshape(2, 3)

    def loss(tape):
        x = tape.param(blk, (2, 3)) if tape is not None else blk.values.reshape(2, 3)
        return ad.sum_(constrain_pose(x, lo, hi) * w)

    report = ad.finite_diff_check(loss, [blk], tol=1e-6)
    assert report.passed, report.max_rel_err


# -- rotations ----------------------------------------------------------------


def test_rodrigues_identity_and_quarter_turn():
    np.testing.assert_allclose(rodrigues(np.zeros(3)), np.eye(3), atol=1e-15)
    Rz = np.asarray(rodrigues(np.array([0.0, 0.0, np.pi / 2])))
    np.testing.assert_allclose(Rz @ np.array([1.0, 0, 0]),
                               np.array([0.0, 1.0, 0.0]), atol=1e-15)


def test_rodrigues_matches_quaternion_oracle():
    v = np.array([0.3, -0.2, 0.1])
    R_mine = np.asarray(rodrigues(v))
    R_ref = Rotation.from_rotvec(v).as_matrix()
    assert np.max(np.abs(R_mine - R_ref)) < 1e-12


@settings(max_examples=50, deadline=None)
@given(st.lists(st.floats(-3.0, 3.0), min_size=3, max_size=3))
def test_rotation_matrices_are_orthonormal(v):
    R = np.asarray(rodrigues(np.array(v)))
    np.testing.assert_allclose(R @ R.T, np.eye(3), atol=1e-12)
    assert np.linalg.det(R) == pytest.approx(1.0, abs=1e-12)
    R_ref = Rotation.from_rotvec(np.array(v)).as_matrix()
    np.testing.assert_allclose(R, R_ref, atol=1e-11)


def test_rodrigues_negative_axis_is_transpose():
    v = np.array([0.4, 1.1, -0.6])
    R = np.asarray(rodrigues(v))
    np.testing.assert_allclose(np.asarray(rodrigues(-v)), R.T, atol=1e-14)


def test_rotation_gradient_finite_through_zero():
    blk = ParameterBlock("aa", np.zeros(6))
    w = np.arange(18.0).reshape(2, 3, 3)

    def loss(tape):
        aa = tape.param(blk, (2, 3)) if tape is not None else blk.values.reshape(2, 3)
        return ad.sum_(rotation_matrices(aa) * w)

    report = ad.finite_diff_check(loss, [blk], tol=1e-6)
    assert report.passed, report.max_rel_err
    assert np.all(np.isfinite(blk.grad))


def test_rotation_gradient_matches_fd_away_from_zero():
    rng = np.random.default_rng(8)
    blk = ParameterBlock("aa", rng.normal(size=9))
    w = rng.normal(size=(3, 3, 3))

    def loss(tape):
        aa = tape.param(blk, (3, 3)) if tape is not None else blk.values.reshape(3, 3)
        return ad.sum_(rotation_matrices(aa) * w)

    report = ad.finite_diff_check(loss, [blk], tol=1e-6)
    assert report.passed, report.max_rel_err


# -- forward kinematics ---------------------------------------------------------


def test_fk_rest_pose_gives_identity_transforms():
    asset = make_chain_asset()
    rj = rigged.rest_joint_locations(asset.joint_regressor, asset.template_vertices)
    tf = forward_kinematics(np.zeros((3, 3)), np.zeros(3), rj, asset.joint_parents)
    M = tf.matrices()
    np.testing.assert_allclose(M, np.tile(np.eye(4), (3, 1, 1)), atol=1e-12)


def test_fk_root_translation_shifts_everything():
    asset = make_chain_asset()
    rj = rigged.rest_joint_locations(asset.joint_regressor, asset.template_vertices)
    t = np.array([0.1, -0.2, 0.3])
    tf = forward_kinematics(np.zeros((3, 3)), t, rj, asset.joint_parents)
    np.testing.assert_allclose(np.asarray(tf.joints), np.asarray(rj) + t, atol=1e-12)
    posed = lbs_pose(asset.template_vertices, asset.skinning_weights, tf)
    np.testing.assert_allclose(np.asarray(posed),
                               asset.template_vertices + t, atol=1e-12)


def test_fk_two_bone_chain_matches_trigonometry_oracle():
    # bones 0.5 / 0.4 along +x; joint1 bends 30 deg, joint2 bends 45 deg
    # about z; oracle positions computed at 40-digit precision
    joints = np.array([[0, 0, 0], [0.5, 0, 0], [0.9, 0, 0]], float)
    parents = np.array([-1, 0, 1])
    delta = np.zeros((3, 3))
    delta[1, 2] = np.pi / 6
    delta[2, 2] = np.pi / 4
    tf = forward_kinematics(delta, np.zeros(3), joints, parents)
    np.testing.assert_allclose(
        np.asarray(tf.joints)[2],
        [0.84641016151377545871, 0.2, 0.0], atol=1e-12)
    tip = np.array([[1.2, 0.0, 0.0]])
    W = np.array([[0.0, 0.0, 1.0]])
    posed_tip = np.asarray(lbs_pose(tip, W, tf))[0]
    np.testing.assert_allclose(
        posed_tip,
        [0.92405587504453168741, 0.48977774788672048602, 0.0], atol=1e-12)


# -- skinning ----------------------------------------------------------------


def test_lbs_identity_transforms_preserve_vertices_bitwise():
    rng = np.random.default_rng(12)
    verts = rng.normal(size=(10, 3))
    # rows sum to exactly 1.0 in f64 (dyadic weights)
    patterns = np.array([[0.25, 0.25, 0.25, 0.25],
                         [0.5, 0.5, 0.0, 0.0],
                         [1.0, 0.0, 0.0, 0.0],
                         [0.125, 0.375, 0.25, 0.25]])
    W = patterns[rng.integers(0, 4, size=10)]
    J = 4
    tf = JointTransforms(rot=np.tile(np.eye(3), (J, 1, 1)),
                         tr=np.zeros((J, 3)),
                         joints=np.zeros((J, 3)),
                         local_rot=np.tile(np.eye(3), (J, 1, 1)))
    posed = np.asarray(lbs_pose(verts, W, tf))
    assert np.array_equal(posed, verts)


def test_lbs_blends_two_translations_linearly():
    verts = np.array([[0.0, 0.0, 0.0]])
    W = np.array([[0.5, 0.5]])
    tr = np.array([[1.0, 0.0, 0.0], [0.0, 1.0, 0.0]])
    tf = JointTransforms(rot=np.tile(np.eye(3), (2, 1, 1)), tr=tr,
                         joints=np.zeros((2, 3)),
                         local_rot=np.tile(np.eye(3), (2, 1, 1)))
    posed = np.asarray(lbs_pose(verts, W, tf))[0]
    np.testing.assert_allclose(posed, [0.5, 0.5, 0.0], atol=1e-15)


# -- shape blendshapes ----------------------------------------------------------


def test_shaped_template_zero_beta_is_template():
    rng = np.random.default_rng(1)
    T = rng.normal(size=(6, 3))
    B = rng.normal(size=(2, 6, 3))
    out = np.asarray(shaped_template(T, B, np.zeros(2)))
    np.testing.assert_array_equal(out, T)


def test_shaped_template_is_linear_in_beta():
    rng = np.random.default_rng(2)
    T = rng.normal(size=(5, 3))
    B = rng.normal(size=(3, 5, 3))
    b1 = rng.normal(size=3)
    b2 = rng.normal(size=3)
    lhs = np.asarray(shaped_template(T, B, b1 + b2))
    rhs = (np.asarray(shaped_template(T, B, b1))
           + np.asarray(shaped_template(T, B, b2)) - T)
    np.testing.assert_allclose(lhs, rhs, atol=1e-12)


def test_shaped_template_elementwise_oracle():
    T = np.zeros((2, 3))
    B = np.zeros((2, 2, 3))
    B[0, 0, 0] = 1.0
    B[1, 1, 2] = 2.0
    out = np.asarray(shaped_template(T, B, np.array([0.5, -0.5])))
    expect = np.zeros((2, 3))
    expect[0, 0] = 0.5
    expect[1, 2] = -1.0
    np.testing.assert_allclose(out, expect, atol=1e-15)


# -- pose feature -----------------------------------------------------------------


def test_pose_feature_zero_at_rest_and_root_invariant():
    f = np.asarray(pose_feature(np.zeros((4, 3))))
    assert f.shape == (3, 9)
    np.testing.assert_allclose(f, 0.0, atol=1e-15)
    # root rotation must not change the feature
    d = np.zeros((4, 3))
    d[0] = [0.3, 1.0, -0.4]
    np.testing.assert_allclose(np.asarray(pose_feature(d)), 0.0, atol=1e-15)


def test_pose_feature_half_turn_about_z_row():
    d = np.zeros((2, 3))
    d[1, 2] = np.pi
    f = np.asarray(pose_feature(d))[0]
    np.testing.assert_allclose(
        f, [-2.0, 0.0, 0.0, 0.0, -2.0, 0.0, 0.0, 0.0, 0.0], atol=1e-12)


# -- end-to-end gradients -----------------------------------------------------------


def test_posed_vertex_gradients_match_finite_differences():
    asset = make_chain_asset()
    rng = np.random.default_rng(21)
    x_blk = ParameterBlock("x", rng.normal(size=9) * 0.4, role="pose")
    t_blk = ParameterBlock("t", np.array([0.05, -0.1, 0.2]), role="translation")
    w = rng.normal(size=(asset.n_vertices, 3))

    def loss(tape):
        if tape is not None:
            x = tape.param(x_blk, (3, 3))
            t = tape.param(t_blk)
        else:
            x, t = x_blk.values.reshape(3, 3), t_blk.values
        delta = constrain_pose(x, asset.joint_bounds_lo, asset.joint_bounds_hi)
        rj = rigged.rest_joint_locations(asset.joint_regressor,
                                         asset.template_vertices)
        tf = forward_kinematics(delta, t, rj, asset.joint_parents,
                                asset.topological_order())
        posed = lbs_pose(asset.template_vertices, asset.skinning_weights, tf)
        return ad.sum_(posed * w)

    report = ad.finite_diff_check(loss, [x_blk, t_blk], tol=2e-6)
    assert report.passed, report.max_rel_err


def test_beta_gradient_flows_through_rest_joints():
    asset = make_chain_asset()
    M = asset.n_vertices
    B = np.zeros((1, M, 3))
    B[0, :, 0] = np.linspace(0, 1, M)  # lengthen the chain
    asset.shape_blendshapes = B
    rng = np.random.default_rng(3)
    beta_blk = ParameterBlock("beta", np.array([0.2]), role="shape")
    x = rng.normal(size=(3, 3)) * 0.3
    w = rng.normal(size=(M, 3))

    def loss(tape):
        beta = tape.param(beta_blk) if tape is not None else beta_blk.values
        shaped = shaped_template(asset.template_vertices,
                                 asset.shape_blendshapes, beta)
        delta = constrain_pose(x, asset.joint_bounds_lo, asset.joint_bounds_hi)
        rj = rigged.rest_joint_locations(asset.joint_regressor, shaped)
        tf = forward_kinematics(delta, np.zeros(3), rj, asset.joint_parents)
        posed = lbs_pose(shaped, asset.skinning_weights, tf)
        return ad.sum_(posed * w)

    report = ad.finite_diff_check(loss, [beta_blk], tol=1e-6)
    assert report.passed, report.max_rel_err


# -- asset validation -----------------------------------------------------------------


def test_asset_validate_accepts_chain():
    make_chain_asset().validate()


def test_asset_validate_rejects_bad_weights():
    asset = make_chain_asset()
    asset.skinning_weights = asset.skinning_weights * 0.9
    with pytest.raises(AssetError, match="sum to 1"):
        asset.validate()


def test_asset_validate_rejects_cycles_and_multi_root():
    asset = make_chain_asset()
    asset.joint_parents = np.array([-1, 2, 1])
    with pytest.raises(AssetError):
        asset.validate()
    asset.joint_parents = np.array([-1, -1, 1])
    with pytest.raises(AssetError, match="root"):
        asset.validate()


def test_asset_validate_rejects_bounds_not_straddling_zero():
    asset = make_chain_asset()
    asset.joint_bounds_lo = np.full((3, 3), 0.1)
    with pytest.raises(AssetError, match="straddle|lo < hi"):
        asset.validate()


def test_asset_json_round_trip(tmp_path):
    asset = make_chain_asset()
    p = tmp_path / "asset.json"
    asset.save(p)
    loaded = RiggedBodyAsset.load(p)
    np.testing.assert_array_equal(loaded.template_vertices, asset.template_vertices)
    np.testing.assert_array_equal(loaded.skinning_weights, asset.skinning_weights)
    np.testing.assert_array_equal(loaded.joint_parents, asset.joint_parents)


def test_asset_load_rejects_wrong_format(tmp_path):
    p = tmp_path / "bad.json"
    p.write_text('{"format": "something-else", "version": 1}')
    with pytest.raises(AssetError, match="not a"):
        RiggedBodyAsset.load(p)
