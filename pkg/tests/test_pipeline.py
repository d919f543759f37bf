"""Pipeline commands: bundles, fits, checkpoints, animation, energy plumbing."""

import hashlib
import json
import shutil
import warnings
from pathlib import Path

import numpy as np
import pytest

from bodyfit.autodiff import Tape, value_of
from bodyfit.bundleio import load_checkpoint, load_obj, read_bundle, read_trace
from bodyfit.energy import EnergyWeights
from bodyfit.humanoid import HumanoidConfig, build_humanoid
from bodyfit.pipeline import (
    BodyModel,
    PipelineError,
    RunConfig,
    bind_observations,
    cmd_animate,
    cmd_eval,
    cmd_export,
    cmd_fit,
    cmd_generate,
    freeze_association,
    init_state,
    model_from_checkpoint,
    total_energy,
)
from bodyfit.synthcap import (
    GroundTruthRig,
    NoiseConfig,
    default_capture_camera,
    make_trajectory,
    render_observations,
)

MICRO = dict(resolution=48, frames=4, amplitude=0.35,
             grid_resolution=14, subdivision=0, gt_subdivision=0,
             hidden_width=16, n_layers=2, frequency_count=4, seed=2,
             stage1={"sweep_max_iterations": 10, "fixed_passes": 1,
                     "fixed_rate": 0.1, "decay_passes": 1,
                     "pass_iterations": 3, "temporal_from_pass": 1},
             stage2={"fixed_passes": 2, "decay_passes": 2,
                     "checkpoint_interval": 2})


def micro_config(root: Path, **overrides) -> RunConfig:
    kw = dict(MICRO, bundle=str(root / "bundle"), output=str(root / "out"))
    kw.update(overrides)
    return RunConfig(**kw)


def tree_digest(root: Path, skip: tuple = ()) -> str:
    h = hashlib.sha256()
    for p in sorted(Path(root).rglob("*")):
        if p.is_file() and p.name not in skip:
            h.update(p.relative_to(root).as_posix().encode())
            h.update(p.read_bytes())
    return h.hexdigest()


@pytest.fixture(scope="module")
def micro_fit(tmp_path_factory):
    root = tmp_path_factory.mktemp("micro")
    cfg = micro_config(root)
    cmd_generate(cfg)
    summary = cmd_fit(cfg)
    return cfg, summary


# -- config ----------------------------------------------------------------------


def test_config_round_trip_and_rejection():
    cfg = RunConfig(frames=5, gt_beta=(0.1, -0.2))
    back = RunConfig.from_dict(cfg.to_dict())
    assert back == cfg
    with pytest.raises(PipelineError, match="unknown config keys"):
        RunConfig.from_dict({"framez": 10})
    with pytest.raises(PipelineError):
        RunConfig(frames=2).validate()
    with pytest.raises(PipelineError):
        RunConfig(bumps="spiky").validate()
    with pytest.raises(PipelineError, match="bad override key"):
        RunConfig(stage1={"sweeps": 3}).validate()


# -- generate ---------------------------------------------------------------------


def test_default_config_bundle_passes_schema(tmp_path):
    cfg = RunConfig(bundle=str(tmp_path / "bundle"),
                    output=str(tmp_path / "out"))
    cmd_generate(cfg)
    camera, obs, manifest = read_bundle(cfg.bundle)
    assert len(obs) == cfg.frames == manifest["frames"]
    assert camera.width == camera.height == cfg.resolution
    assert manifest["grid_resolution"] == cfg.grid_resolution
    asset = build_humanoid(HumanoidConfig(grid_resolution=cfg.grid_resolution))
    for o in obs:
        o.validate(camera, len(asset.triangles))  # schema check per frame
    gt = Path(cfg.bundle) / "gt"
    assert len(list(gt.glob("mesh_*.obj"))) == cfg.frames


def test_minimum_three_frames(tmp_path):
    cfg = micro_config(tmp_path, frames=3)
    cmd_generate(cfg)
    dirs = sorted((Path(cfg.bundle) / "frames").iterdir())
    assert [d.name for d in dirs] == ["0000", "0001", "0002"]


def test_same_seed_bundles_byte_identical(tmp_path):
    # the manifest echoes the config, bundle/output paths included, so it
    # is the one file allowed to differ between the two roots
    a = micro_config(tmp_path / "a", depth_sigma=0.002, joint_dropout=0.1)
    b = micro_config(tmp_path / "b", depth_sigma=0.002, joint_dropout=0.1)
    cmd_generate(a)
    cmd_generate(b)
    da = tree_digest(a.bundle, skip=("manifest.json",))
    assert da == tree_digest(b.bundle, skip=("manifest.json",))
    c = micro_config(tmp_path / "c", depth_sigma=0.002, joint_dropout=0.1,
                     seed=99)
    cmd_generate(c)
    assert tree_digest(c.bundle, skip=("manifest.json",)) != da


# -- fit outputs --------------------------------------------------------------------


def test_fit_outputs_complete(micro_fit):
    cfg, summary = micro_fit
    out = Path(cfg.output)
    assert (out / "checkpoints" / "stage1.npz").exists()
    assert (out / "checkpoints" / "final.npz").exists()
    assert (out / "checkpoints" / "stage2_pass0002.npz").exists()
    assert summary["frames"] == cfg.frames
    assert summary["config"] == cfg.to_dict()
    recs = read_trace(out / "trace.jsonl")
    stages = {r.get("stage") for r in recs}
    assert stages == {1, 2}
    fitted = json.loads((out / "fitted_poses.json").read_text())
    assert np.asarray(fitted["poses"]).shape == (cfg.frames, 16, 3)
    assert np.asarray(fitted["x"]).shape == (cfg.frames, 16, 3)
    assert np.asarray(fitted["translations"]).shape == (cfg.frames, 3)
    markers = json.loads((out / "markers.json").read_text())["markers"]
    assert np.asarray(markers).shape == (cfg.frames, 25, 3)


def test_topology_constant_across_exports(micro_fit):
    cfg, _ = micro_fit
    for sub in ("meshes", "meshes_stage1"):
        tris = None
        frames = sorted((Path(cfg.output) / sub).glob("frame_*.obj"))
        assert len(frames) == cfg.frames
        for p in frames:
            _, t = load_obj(p)
            if tris is None:
                tris = t
            assert np.array_equal(tris, t)


def test_final_checkpoint_reflects_stage2(micro_fit):
    cfg, summary = micro_fit
    ckpt = load_checkpoint(summary["checkpoint"])
    assert ckpt.stage == 2
    assert ckpt.next_pass == 4  # fixed 2 + decay 2, all passes done
    assert ckpt.adam is not None and ckpt.rng_state is not None
    assert ckpt.config == cfg.to_dict()
    assert ckpt.poses.shape == (cfg.frames, 16, 3)


def test_eval_reports_and_guards(micro_fit, tmp_path):
    cfg, _ = micro_fit
    report = cmd_eval(cfg.output, cfg.bundle, with_iou=False,
                      chamfer_samples=2000)
    assert len(report.chamfer_cm) == cfg.frames
    assert np.isfinite(report.marker_epe_cm)
    assert (Path(cfg.output) / "metrics.json").exists()
    with pytest.raises(PipelineError):
        cmd_eval(tmp_path, cfg.bundle)


# -- determinism and resume ----------------------------------------------------------


def test_same_seed_fit_bitwise_identical(tmp_path):
    cfg = micro_config(tmp_path)
    cmd_generate(cfg)
    cmd_fit(cfg)
    first_ckpt = tree_digest(Path(cfg.output) / "checkpoints")
    first_meshes = tree_digest(Path(cfg.output) / "meshes")
    shutil.rmtree(cfg.output)
    cmd_fit(cfg)
    assert tree_digest(Path(cfg.output) / "checkpoints") == first_ckpt
    assert tree_digest(Path(cfg.output) / "meshes") == first_meshes


def test_resume_continues_identically(tmp_path):
    cfg = micro_config(tmp_path)
    cmd_generate(cfg)
    cmd_fit(cfg)
    out = Path(cfg.output)
    final = (out / "checkpoints" / "final.npz").read_bytes()
    meshes = tree_digest(out / "meshes")
    full_trace = [r for r in read_trace(out / "trace.jsonl")
                  if r.get("stage") == 2 and r.get("pass", 0) >= 2]

    resumed = micro_config(tmp_path, output=str(out),
                           resume=str(out / "checkpoints" / "stage2_pass0002.npz"))
    shutil.rmtree(out / "meshes")
    cmd_fit(resumed)
    assert (out / "checkpoints" / "final.npz").read_bytes() == final
    assert tree_digest(out / "meshes") == meshes
    resumed_trace = [r for r in read_trace(out / "trace_resume.jsonl")
                     if r.get("stage") == 2]
    assert resumed_trace == full_trace


def test_resume_rejects_stage1_checkpoint(tmp_path, micro_fit):
    cfg, _ = micro_fit
    bad = micro_config(tmp_path, bundle=cfg.bundle,
                       resume=str(Path(cfg.output) / "checkpoints" / "stage1.npz"))
    with pytest.raises(PipelineError, match="stage-2"):
        cmd_fit(bad)


# -- static mode ---------------------------------------------------------------------


def test_static_mode_offsets_ignore_pose(tmp_path):
    cfg = micro_config(tmp_path, static_mode=True)
    cmd_generate(cfg)
    summary = cmd_fit(cfg)
    ckpt = load_checkpoint(summary["checkpoint"])
    assert ckpt.config["static_mode"] is True
    camera, _, _ = read_bundle(cfg.bundle)
    model = model_from_checkpoint(ckpt, camera)
    rng = np.random.default_rng(0)
    J = model.asset.n_joints
    evs = [model.frame_eval(None, 0.4 * rng.normal(size=(J, 3)),
                            np.zeros(3), ckpt.beta, use_net=True)
           for _ in range(3)]
    for ev in evs[1:]:
        assert np.array_equal(value_of(ev.offsets), value_of(evs[0].offsets))
        assert not np.array_equal(value_of(ev.posed), value_of(evs[0].posed))


# -- animate -----------------------------------------------------------------------


def test_animate_replays_fit_exactly(micro_fit, tmp_path):
    cfg, summary = micro_fit
    out = tmp_path / "anim"
    paths = cmd_animate(summary["checkpoint"],
                        Path(cfg.output) / "fitted_poses.json", out)
    assert len(paths) == cfg.frames
    for i, p in enumerate(paths):
        fit_obj = Path(cfg.output) / "meshes" / f"frame_{i:04d}.obj"
        assert p.read_bytes() == fit_obj.read_bytes()


def test_export_matches_fit_meshes(micro_fit, tmp_path):
    cfg, summary = micro_fit
    out = tmp_path / "exp"
    paths = cmd_export(summary["checkpoint"], out)
    for i, p in enumerate(paths):
        fit_obj = Path(cfg.output) / "meshes" / f"frame_{i:04d}.obj"
        assert p.read_bytes() == fit_obj.read_bytes()


def test_animate_rest_pose_is_shaped_template_plus_offsets(micro_fit, tmp_path):
    cfg, summary = micro_fit
    ckpt = load_checkpoint(summary["checkpoint"])
    model = model_from_checkpoint(ckpt)
    J = model.asset.n_joints
    poses_file = tmp_path / "rest.json"
    poses_file.write_text(json.dumps(
        {"poses": np.zeros((1, J, 3)).tolist()}))
    paths = cmd_animate(summary["checkpoint"], poses_file, tmp_path / "rest")
    v, _ = load_obj(paths[0])
    # at rest every joint transform is the identity, so the posed mesh is
    # exactly the shaped template plus the rest-pose offset field
    ev = model.frame_eval(None, np.zeros((J, 3)), np.zeros(3), ckpt.beta,
                          use_net=True)
    direct = value_of(ev.posed)
    assert np.abs(v - direct).max() < 1e-8
    from bodyfit.rigged import shaped_template
    shaped = value_of(shaped_template(model.template, model.shape_basis,
                                      ckpt.beta))
    assert np.abs(direct - (shaped + value_of(ev.offsets))).max() < 1e-12


def test_animate_clamps_out_of_bounds_with_warning(micro_fit, tmp_path):
    cfg, summary = micro_fit
    model = model_from_checkpoint(load_checkpoint(summary["checkpoint"]))
    J = model.asset.n_joints
    wild = np.zeros((2, J, 3))
    wild[1, 1, 2] = 50.0  # far beyond any joint bound
    poses_file = tmp_path / "wild.json"
    poses_file.write_text(json.dumps({"poses": wild.tolist()}))
    with pytest.warns(UserWarning, match="clamped"):
        paths = cmd_animate(summary["checkpoint"], poses_file, tmp_path / "w")
    v, _ = load_obj(paths[1])
    assert np.all(np.isfinite(v))
    lo, hi = model.asset.joint_bounds_lo, model.asset.joint_bounds_hi
    assert lo[1, 2] < hi[1, 2] <= 50.0  # the clamp had something to do


def test_animate_rejects_malformed_inputs(micro_fit, tmp_path):
    _, summary = micro_fit
    bad = tmp_path / "bad.json"
    bad.write_text(json.dumps({"poses": [[0.0, 0.0, 0.0]]}))
    with pytest.raises(PipelineError, match="N, J, 3"):
        cmd_animate(summary["checkpoint"], bad, tmp_path / "x")
    bad.write_text(json.dumps({"nothing": 1}))
    with pytest.raises(PipelineError, match="poses"):
        cmd_animate(summary["checkpoint"], bad, tmp_path / "x")


# -- sequence energy ------------------------------------------------------------------


def scene(tmp_path, **overrides):
    cfg = micro_config(tmp_path, **overrides)
    cmd_generate(cfg)
    camera, obs, _ = read_bundle(cfg.bundle)
    asset = build_humanoid(HumanoidConfig(grid_resolution=cfg.grid_resolution))
    model = BodyModel(asset, camera, cfg.net_config(),
                      subdivision=cfg.subdivision,
                      net_rng=np.random.default_rng(cfg.seed))
    bindings = bind_observations(model, obs)
    state = init_state(model, len(bindings))
    return cfg, model, bindings, state


def test_zero_weights_remove_every_term(tmp_path):
    _, model, bindings, state = scene(tmp_path)
    zero = EnergyWeights(**{f: 0.0 for f in (
        "landmarks", "dense_correspondence", "projective", "silhouette",
        "surface_smoothness", "temporal_surface", "temporal_rotation",
        "pose_consistency")})
    tape = Tape()
    total, bd = total_energy(tape, model, state, bindings, zero,
                             use_net=True, pair_rng=np.random.default_rng(0))
    assert total == 0.0
    assert bd.terms == {}


def test_breakdown_total_matches_scalar(tmp_path):
    _, model, bindings, state = scene(tmp_path)
    tape = Tape()
    total, bd = total_energy(tape, model, state, bindings, EnergyWeights(),
                             use_net=True, pair_rng=np.random.default_rng(3))
    assert value_of(total) == pytest.approx(bd.total, rel=1e-12)
    assert set(bd.terms) >= {"landmarks", "dense", "silhouette",
                             "smoothness"}


def test_breakdown_reproducible_under_seed(tmp_path):
    _, model, bindings, state = scene(tmp_path)
    outs = []
    for _ in range(2):
        tape = Tape()
        total, bd = total_energy(tape, model, state, bindings,
                                 EnergyWeights(), use_net=True,
                                 pair_rng=np.random.default_rng(11))
        outs.append({k: r.weighted for k, r in bd.terms.items()})
    assert outs[0] == outs[1]


def test_energy_rejects_frame_mismatch(tmp_path):
    _, model, bindings, state = scene(tmp_path)
    with pytest.raises(PipelineError, match="frame"):
        total_energy(Tape(), model, state, bindings[:-1], EnergyWeights())


# -- stage-1 behaviors ----------------------------------------------------------------


def test_warm_start_beats_cold_start(tmp_path):
    # smooth motion: the predecessor's solution should start at least as
    # low as a rest-pose + depth-centroid cold start on >= 90% of frames
    from bodyfit.pipeline import _sweep_objective, run_stage1
    from bodyfit.bundleio import TraceWriter

    cfg, model, bindings, state = scene(
        tmp_path, frames=12, resolution=64, amplitude=0.4,
        stage1={"sweep_max_iterations": 25, "fixed_passes": 1,
                "fixed_rate": 0.0, "decay_passes": 1})
    with TraceWriter(tmp_path / "t.jsonl") as trace:
        run_stage1(model, state, bindings, cfg.stage1_schedule(),
                   cfg.energy_weights(), trace)

    w1 = cfg.energy_weights().skeleton_stage()
    rest = init_state(model, 1)
    wins = 0
    for i in range(1, state.n_frames):
        objective = _sweep_objective(model, state, i, bindings[i], w1, None)
        saved_x, saved_t = state.x[i].values.copy(), state.t[i].values.copy()

        state.x[i].values[:] = state.x[i - 1].values
        state.t[i].values[:] = state.t[i - 1].values
        f_warm = objective()

        obs = bindings[i].obs
        ev = model.frame_eval(None, rest.x[0], rest.t[0], rest.beta,
                              use_net=False)
        centroid = obs.depth_points[obs.depth_valid].mean(axis=0)
        state.x[i].values[:] = rest.x[0].values
        state.t[i].values[:] = centroid - value_of(ev.posed).mean(axis=0)
        f_cold = objective()

        state.x[i].values[:] = saved_x
        state.t[i].values[:] = saved_t
        wins += f_warm <= f_cold
    assert wins >= 0.9 * (state.n_frames - 1)


def test_pixel_terms_stable_under_resolution_doubling():
    # silhouette and projective are pixel-count normalized: doubling the
    # image resolution moves them by < 5% on a fixed physical scene.  The
    # probe offsets the body laterally (a wide silhouette mismatch band)
    # and in depth (a large projective residual on a pair population that
    # survives the normal gate); both residuals then dwarf the pixel
    # footprint, which is what the invariant presumes.
    asset = build_humanoid(HumanoidConfig(grid_resolution=14))
    poses, trs = make_trajectory(asset, "single-joint-swing", 3, amplitude=0.3)
    values = {}
    for res in (128, 256):
        camera = default_capture_camera(res)
        rig = GroundTruthRig(asset, camera, poses, trs)
        cap = render_observations(rig, NoiseConfig())
        cfg = RunConfig(grid_resolution=14, subdivision=1,
                        hidden_width=16, n_layers=2, frequency_count=4)
        model = BodyModel(asset, camera, cfg.net_config(), subdivision=1,
                          net_rng=np.random.default_rng(0))
        bindings = bind_observations(model, cap.observations)
        state = init_state(model, 3)
        for i in range(3):
            state.x[i].values[:] = poses[i].ravel()
            state.t[i].values[:] = trs[i] + np.array([0.06, 0.0, 0.15])
        assoc = [freeze_association(model, state, i, bindings[i],
                                    use_net=False) for i in range(3)]
        tape = Tape()
        _, bd = total_energy(tape, model, state, bindings, EnergyWeights(),
                             use_net=False, assoc=assoc, temporal=False)
        values[res] = (bd.terms["silhouette"].weighted,
                       bd.terms["projective"].weighted)
    for lo, hi in zip(values[128], values[256]):
        assert abs(hi - lo) / abs(lo) < 0.05


def test_rest_pose_fit_recovers_surface(tmp_path):
    cfg = micro_config(
        tmp_path, frames=3, resolution=96, amplitude=0.0,
        grid_resolution=16,
        stage1={"sweep_max_iterations": 80, "fixed_passes": 2,
                "fixed_rate": 0.1, "decay_passes": 2, "pass_iterations": 10,
                "temporal_from_pass": 1},
        stage2={"fixed_passes": 10, "fixed_rate": 5e-5, "decay_passes": 10,
                "checkpoint_interval": 10})
    cmd_generate(cfg)
    cmd_fit(cfg)
    report = cmd_eval(cfg.output, cfg.bundle, with_iou=False,
                      chamfer_samples=4000)
    assert report.mean_chamfer_cm < 0.5  # 5 mm on a noiseless rest capture
