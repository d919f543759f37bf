"""Positional encoding, gating and the offset MLP."""

import numpy as np
import pytest

from bodyfit import autodiff as ad
from bodyfit.autodiff import ParameterBlock, Tape
from bodyfit.rigged import pose_feature
from bodyfit.surface_net import (
    SurfaceNet,
    SurfaceNetConfig,
    augment_feature_noise,
    conditioning_gates,
    local_condition,
    positional_encode,
)


def test_positional_encoding_of_zero():
    out = np.asarray(positional_encode(np.zeros((1, 3)), 10))
    assert out.shape == (1, 63)
    np.testing.assert_allclose(out[0, :3], 0.0)          # raw point
    sines = out[0, 3::6], out[0, 4::6], out[0, 5::6]
    coss = out[0, 6::6], out[0, 7::6], out[0, 8::6]
    # layout: [p, sin f0, cos f0, sin f1, cos f1, ...] in blocks of 3
    for f in range(10):
        np.testing.assert_allclose(out[0, 3 + 6 * f: 6 + 6 * f], 0.0)   # sin
        np.testing.assert_allclose(out[0, 6 + 6 * f: 9 + 6 * f], 1.0)   # cos


def test_positional_encoding_at_unit_x():
    out = np.asarray(positional_encode(np.array([[1.0, 0.0, 0.0]]), 10))[0]
    assert out[0] == 1.0
    for f in range(10):
        sin_x = out[3 + 6 * f]
        cos_x = out[6 + 6 * f]
        # sin(2^f pi), cos(2^f pi): zero / +-1 up to f64 round-off
        assert abs(sin_x) < 1e-9
        assert abs(abs(cos_x) - 1.0) < 1e-12
        expected_cos = -1.0 if f == 0 else 1.0
        assert cos_x == pytest.approx(expected_cos, abs=1e-12)


def test_positional_encoding_matches_direct_trig():
    rng = np.random.default_rng(2)
    p = rng.normal(size=(7, 3))
    out = np.asarray(positional_encode(p, 10))
    expect = [p]
    for f in range(10):
        expect.append(np.sin(2.0 ** f * np.pi * p))
        expect.append(np.cos(2.0 ** f * np.pi * p))
    np.testing.assert_allclose(out, np.concatenate(expect, axis=1), atol=1e-12)


def _chain_gates(J=5):
    """Chain skeleton, one vertex hard-bound to each joint."""
    parents = np.full(J, -1, int)
    parents[1:] = np.arange(J - 1)
    W = np.eye(J)
    return conditioning_gates(W, parents), parents


def test_conditioning_gates_two_ring_on_chain():
    gates, _ = _chain_gates(5)
    assert gates.shape == (5, 4)
    # vertex 0 bound to root: reaches features of joints 1 and 2 only
    np.testing.assert_array_equal(gates[0], [1.0, 1.0, 0.0, 0.0])
    # vertex 4 bound to tip joint 4: within 2 of joints 2, 3, 4
    np.testing.assert_array_equal(gates[4], [0.0, 1.0, 1.0, 1.0])
    # vertex 2: joints 1, 2, 3, 4 within two edges of joint 2's vertex
    np.testing.assert_array_equal(gates[2], [1.0, 1.0, 1.0, 1.0])


def test_conditioning_gates_are_clamped_unit_interval():
    rng = np.random.default_rng(0)
    parents = np.array([-1, 0, 1, 1, 3])
    W = rng.dirichlet(np.ones(5), size=40)
    g = conditioning_gates(W, parents)
    assert np.all(g >= 0.0) and np.all(g <= 1.0)


def test_local_condition_zero_feature_gives_zero():
    gates, _ = _chain_gates(4)
    out = np.asarray(local_condition(gates, np.zeros((3, 9))))
    assert out.shape == (4, 27)
    np.testing.assert_array_equal(out, 0.0)


def test_local_condition_masks_out_of_ring_joints():
    gates, _ = _chain_gates(5)
    F = np.arange(36.0).reshape(4, 9)
    out = np.asarray(local_condition(gates, F))
    # vertex 0: joints 3 and 4 gated off -> those 9-blocks are exactly zero
    np.testing.assert_array_equal(out[0, 18:], 0.0)
    np.testing.assert_array_equal(out[0, :9], F[0])


def _make_net(K=3, seed=0, random_final=False, config=None):
    config = config or SurfaceNetConfig(hidden_width=16, n_layers=4,
                                        frequency_count=4)
    rng = np.random.default_rng(seed)
    net = SurfaceNet.initialize(K, config, rng)
    if random_final:
        r, c = net.layer_shapes[-1]
        off = net._offsets[-1]
        net.block.values[off:off + r * c + c] = rng.normal(
            size=r * c + c) * 0.2
    return net


def test_fresh_net_outputs_exactly_zero():
    net = _make_net()
    rng = np.random.default_rng(1)
    enc = positional_encode(rng.normal(size=(11, 3)), 4)
    feats = rng.normal(size=(11, 9 * 3))
    out = np.asarray(net.offsets(enc, feats))
    assert out.shape == (11, 3)
    assert np.array_equal(out, np.zeros((11, 3)))


def test_offsets_bounded_by_max_amplitude():
    net = _make_net(random_final=True)
    rng = np.random.default_rng(3)
    enc = positional_encode(rng.normal(size=(10000, 3)) * 5, 4)
    feats = rng.normal(size=(10000, 27)) * 5
    out = np.asarray(net.offsets(enc, feats))
    assert np.max(np.abs(out)) <= net.config.max_amplitude
    assert np.max(np.abs(out)) > 0  # nontrivial


def test_forward_matches_plain_numpy_layer_loop():
    net = _make_net(random_final=True, seed=7)
    rng = np.random.default_rng(9)
    enc = np.asarray(positional_encode(rng.normal(size=(5, 3)), 4))
    feats = rng.normal(size=(5, 27))
    out = np.asarray(net.offsets(enc, feats))

    # independent reimplementation straight off the flat block
    h = np.concatenate([enc, feats], axis=1)
    off = 0
    flat = net.block.values
    for i, (r, c) in enumerate(net.layer_shapes):
        W = flat[off:off + r * c].reshape(r, c)
        b = flat[off + r * c:off + r * c + c]
        off += r * c + c
        h = h @ W + b
        if i < len(net.layer_shapes) - 1:
            h = np.maximum(h, 0.0)
    expect = np.tanh(h) * net.config.max_amplitude
    np.testing.assert_allclose(out, expect, atol=1e-12)


def test_default_architecture_dimensions():
    cfg = SurfaceNetConfig()
    net = SurfaceNet.initialize(15, cfg, np.random.default_rng(0))
    assert net.input_width == 3 + 60 + 9 * 15
    assert net.layer_shapes[0] == (net.input_width, 256)
    assert len(net.layer_shapes) == 8
    assert net.layer_shapes[-1] == (256, 3)


def test_out_of_ring_joint_rotation_leaves_offsets_bitwise_unchanged():
    J = 6
    parents = np.full(J, -1, int)
    parents[1:] = np.arange(J - 1)
    W = np.zeros((4, J))
    W[:, 1] = 1.0  # vertices bound to joint 1 only
    gates = conditioning_gates(W, parents)
    net = _make_net(K=J - 1, random_final=True)
    rng = np.random.default_rng(5)
    pts = rng.normal(size=(4, 3)) * 0.3
    enc = positional_encode(pts, 4)

    def run(delta):
        F = np.asarray(pose_feature(delta))
        return np.asarray(net.offsets(enc, np.asarray(local_condition(gates, F))))

    d0 = np.zeros((J, 3))
    d0[2, 0] = 0.4
    d1 = d0.copy()
    d1[5, 1] = 1.2   # joint 5 beyond the two-ring of joint 1's support
    assert np.array_equal(run(d0), run(d1))
    # in-ring joint motion does change the offsets
    d2 = d0.copy()
    d2[1, 0] = 0.8
    assert not np.array_equal(run(d0), run(d2))


def test_root_rotation_leaves_offsets_unchanged():
    J = 4
    parents = np.full(J, -1, int)
    parents[1:] = np.arange(J - 1)
    gates = conditioning_gates(np.eye(J), parents)
    net = _make_net(K=J - 1, random_final=True)
    enc = positional_encode(np.zeros((J, 3)), 4)

    def run(delta):
        F = np.asarray(pose_feature(delta))
        return np.asarray(net.offsets(enc, np.asarray(local_condition(gates, F))))

    d0 = np.zeros((J, 3))
    d1 = d0.copy()
    d1[0] = [0.7, -0.3, 0.2]
    assert np.array_equal(run(d0), run(d1))


def test_feature_noise_statistics_and_determinism():
    F = np.zeros((20, 9))
    a = augment_feature_noise(F, 0.1, np.random.default_rng(0))
    b = augment_feature_noise(F, 0.1, np.random.default_rng(0))
    assert np.array_equal(np.asarray(a), np.asarray(b))
    assert np.array_equal(np.asarray(augment_feature_noise(F, 0.0,
                                                           np.random.default_rng(1))), F)
    big = augment_feature_noise(np.zeros(100000), 0.1, np.random.default_rng(2))
    std = np.std(np.asarray(big))
    assert abs(std - 0.1) / 0.1 < 0.05
    assert abs(np.mean(np.asarray(big))) < 0.005


def test_offset_gradients_match_finite_differences():
    net = _make_net(K=2, random_final=True)
    rng = np.random.default_rng(13)
    pts_blk = ParameterBlock("pts", rng.normal(size=6) * 0.2)
    feat_blk = ParameterBlock("feats", rng.normal(size=2 * 9) * 0.3)
    w = rng.normal(size=(2, 3))
    gates = np.array([[1.0, 0.5], [0.25, 1.0]])

    def loss(tape):
        if tape is not None:
            pts = tape.param(pts_blk, (2, 3))
            F = tape.param(feat_blk, (2, 9))
        else:
            pts = pts_blk.values.reshape(2, 3)
            F = feat_blk.values.reshape(2, 9)
        enc = positional_encode(pts, net.config.frequency_count)
        out = net.offsets(enc, local_condition(gates, F), tape=tape)
        return ad.sum_(out * w)

    report = ad.finite_diff_check(loss, [pts_blk, feat_blk, net.block],
                                  tol=2e-4, rng=rng, max_per_block=20,
                                  step=1e-5)
    assert report.passed, report.max_rel_err


def test_net_save_load_round_trip_bitwise(tmp_path):
    net = _make_net(K=4, random_final=True, seed=3)
    p = tmp_path / "net.bin"
    net.save(p)
    loaded = SurfaceNet.load(p)
    assert loaded.joint_feature_count == 4
    assert loaded.config == net.config
    assert np.array_equal(loaded.block.values, net.block.values)


def test_net_load_rejects_bad_magic_and_truncation(tmp_path):
    net = _make_net()
    p = tmp_path / "net.bin"
    net.save(p)
    blob = bytearray(p.read_bytes())
    blob[:4] = b"XXXX"
    bad = tmp_path / "bad.bin"
    bad.write_bytes(bytes(blob))
    with pytest.raises(ValueError, match="magic"):
        SurfaceNet.load(bad)
    trunc = tmp_path / "trunc.bin"
    trunc.write_bytes(p.read_bytes()[:-16])
    with pytest.raises(ValueError, match="payload|truncated"):
        SurfaceNet.load(trunc)
