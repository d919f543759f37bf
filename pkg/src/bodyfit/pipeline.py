"""End-to-end fitting: model assembly, sequence energy, stages, commands.

The module owns everything above the energy terms: the cached body model
(subdivided template, positional codes, conditioning gates), the full
sequence energy with its frozen-association plumbing, the two-stage
optimization drivers, and the five user-facing commands (generate, fit,
eval, animate, export) that the CLI maps onto.

Conventions used throughout:

- a "pass" visits every frame once; stage 1 runs one L-BFGS solve per
  pass over the global parameter set, stage 2 runs one Adam step per
  frame in a shuffled order,
- data associations (projective pairs, visibility, pair-frame targets)
  are frozen before each solve/step and differentiated as constants,
- all randomness flows through explicitly seeded generators so a fixed
  seed reproduces a run bit for bit.
"""

from __future__ import annotations

import dataclasses
import json
import os
import warnings
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .autodiff import ParameterBlock, Tape, Tensor, value_of
from .bundleio import (RunCheckpoint, TraceWriter, export_obj, load_checkpoint,
                       load_obj, read_bundle, read_ground_truth,
                       save_checkpoint, write_bundle, write_ground_truth)
from .energy import (EnergyBreakdown, EnergyWeights, dense_correspondence_term,
                     consistency_include_mask, find_projective_correspondences,
                     landmark_term, pose_consistency_term,
                     pose_similarity_weight, projective_term, silhouette_term,
                     smoothness_term, temporal_rotation_term,
                     temporal_surface_term)
from .humanoid import HumanoidConfig, build_humanoid
from .mesh import (SurfacePoints, remap_to_subdivided, sample_surface,
                   subdivide, vertex_neighbors, vertex_normals)
from .metrics import MetricsReport, evaluate_sequence
from .optim import (AdamState, LbfgsConfig, StageOneSchedule, StageTwoSchedule,
                    adam_step, lbfgs_minimize)
from .render import (PinholeCamera, RasterTopology, project, rasterize,
                     vertex_visibility)
from .rigged import (RiggedBodyAsset, constrain_pose, forward_kinematics,
                     invert_constrain, lbs_pose, pose_feature,
                     rest_joint_locations, shaped_template)
from .surface_net import (SurfaceNet, SurfaceNetConfig, augment_feature_noise,
                          conditioning_gates, local_condition,
                          positional_encode)
from .synthcap import (GroundTruthRig, NoiseConfig, OffsetBump,
                       default_capture_camera, make_trajectory,
                       render_observations)

WORKER_ENV = "BODYFIT_WORKERS"


class PipelineError(RuntimeError):
    """Raised on configuration errors and aborted optimizations."""


def apply_worker_override() -> int | None:
    """Honor the worker-count environment variable, if set.

    Caps the numba thread pool (the rasterizer's only parallelism); the
    rest of the pipeline is single-process by design.
    """
    raw = os.environ.get(WORKER_ENV)
    if not raw:
        return None
    try:
        n = max(1, int(raw))
    except ValueError:
        raise PipelineError(f"{WORKER_ENV} must be an integer, got {raw!r}")
    try:
        import numba
        numba.set_num_threads(min(n, numba.get_num_threads()))
    except ImportError:
        pass
    return n


# -- configuration ---------------------------------------------------------------


@dataclass
class RunConfig:
    """Everything a run needs; defaults echo into the output manifest.

    ``weights``, ``stage1`` and ``stage2`` hold field overrides applied
    on top of the EnergyWeights / schedule defaults, so a manifest
    records only deliberate deviations but a round trip is lossless.
    """

    bundle: str = "bundle"
    output: str = "out"
    resume: str = ""

    # capture
    resolution: int = 256
    frames: int = 20
    trajectory: str = "single-joint-swing"
    amplitude: float = 0.5
    swing_joint: int = -1      # -1 picks the first bendable joint
    swing_axis: int = 2
    cycles: float = 1.0
    drift: float = 0.0
    bumps: str = "none"        # none | static | dynamic
    bump_gain: float = 0.08
    bump_radius: float = 0.12   # below torso thickness: one-sided support
    depth_sigma: float = 0.0
    joint_sigma: float = 0.0
    joint_dropout: float = 0.0
    corr_jitter: float = 0.0
    mask_radius: int = 0
    corr_fraction: float = 0.05
    gt_beta: tuple = ()
    gt_subdivision: int = 1

    # model
    grid_resolution: int = 48
    subdivision: int = 1
    hidden_width: int = 256
    n_layers: int = 8
    frequency_count: int = 10
    max_amplitude: float = 0.25
    noise_sigma: float = 0.1

    # fit
    seed: int = 0
    deterministic: bool = True
    static_mode: bool = False
    weights: dict = field(default_factory=dict)
    stage1: dict = field(default_factory=dict)
    stage2: dict = field(default_factory=dict)

    def validate(self) -> None:
        if self.frames < 3:
            raise PipelineError("a capture needs at least 3 frames")
        if self.resolution < 8:
            raise PipelineError("resolution too small to render anything")
        if self.subdivision < 0 or self.gt_subdivision < 0:
            raise PipelineError("subdivision levels must be >= 0")
        if self.bumps not in ("none", "static", "dynamic"):
            raise PipelineError(f"unknown bump preset {self.bumps!r}")
        try:
            self.energy_weights()
            self.stage1_schedule()
            self.stage2_schedule()
        except TypeError as e:
            raise PipelineError(f"bad override key: {e}")

    def energy_weights(self) -> EnergyWeights:
        return EnergyWeights(**self.weights)

    def stage1_schedule(self) -> StageOneSchedule:
        return StageOneSchedule(**self.stage1)

    def stage2_schedule(self) -> StageTwoSchedule:
        return StageTwoSchedule(**self.stage2)

    def net_config(self) -> SurfaceNetConfig:
        return SurfaceNetConfig(
            hidden_width=self.hidden_width, n_layers=self.n_layers,
            frequency_count=self.frequency_count,
            max_amplitude=self.max_amplitude, noise_sigma=self.noise_sigma)

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["gt_beta"] = list(self.gt_beta)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "RunConfig":
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = sorted(set(d) - known)
        if unknown:
            raise PipelineError(f"unknown config keys: {unknown}")
        kw = dict(d)
        if "gt_beta" in kw:
            kw["gt_beta"] = tuple(kw["gt_beta"] or ())
        cfg = cls(**kw)
        cfg.validate()
        return cfg


# -- body model -------------------------------------------------------------------


@dataclass
class FrameEval:
    """One frame's forward evaluation (tensors when taped)."""

    posed: object        # (M', 3)
    local_rot: object    # (J, 3, 3) per-joint rotations in the parent frame
    offsets: object      # (M', 3) canonical offsets, None without the net
    delta: object        # (J, 3) constrained pose


class BodyModel:
    """Rigged template with cached subdivision, codes, gates and topology.

    Everything that depends only on the template (positional codes,
    conditioning gates, raster topology, neighbor lists) is computed
    once here; per-frame state enters only through ``frame_eval``.  The
    net queries offsets at the canonical template vertices, so its point
    codes never change during fitting.
    """

    def __init__(self, asset: RiggedBodyAsset, camera: PinholeCamera | None,
                 net_config: SurfaceNetConfig, subdivision: int = 0,
                 static: bool = False, net: SurfaceNet | None = None,
                 net_rng: np.random.Generator | None = None):
        self.asset = asset
        self.camera = camera
        self.subdivision = int(subdivision)
        self.static = bool(static)

        excluded = np.zeros(asset.n_vertices, bool)
        excluded[asset.excluded_vertices] = True
        shape_attr = np.moveaxis(asset.shape_blendshapes, 0, 1)  # (M, S, 3)
        sub, attrs, masks = subdivide(
            asset.template_vertices, asset.triangles, self.subdivision,
            attributes={"skin": asset.skinning_weights, "shape": shape_attr},
            masks={"excluded": excluded})
        self.sub = sub
        self.triangles = sub.triangles
        self.template = sub.vertices
        self.skin = attrs["skin"]
        self.shape_basis = np.moveaxis(attrs["shape"], 0, 1)     # (S, M', 3)
        self.active_vertices = ~masks["excluded"]
        self.offset_keep = self.active_vertices.astype(np.float64)[:, None]

        self.posenc = positional_encode(self.template, net_config.frequency_count)
        self.gates = conditioning_gates(self.skin, asset.joint_parents)
        self.include = consistency_include_mask(asset.n_joints,
                                                asset.excluded_joints)
        self.topo = RasterTopology.build(self.triangles)
        self.nb_src, self.nb_dst, self.degree = vertex_neighbors(
            self.triangles, sub.n_vertices)

        base_landmarks = SurfacePoints(asset.landmark_triangles,
                                       asset.landmark_barycentric)
        self.landmarks = (remap_to_subdivided(sub, base_landmarks)
                          if self.subdivision > 0 else base_landmarks)

        if net is None:
            net = SurfaceNet.initialize(
                asset.n_joints - 1, net_config,
                net_rng if net_rng is not None else np.random.default_rng(0))
        if net.config.frequency_count != net_config.frequency_count:
            raise PipelineError("net frequency count does not match the model")
        self.net = net

    @property
    def n_vertices(self) -> int:
        return self.sub.n_vertices

    def rest_pose_x(self) -> np.ndarray:
        """Unconstrained parameters mapping to the zero (rest) pose."""
        return invert_constrain(np.zeros((self.asset.n_joints, 3)),
                                self.asset.joint_bounds_lo,
                                self.asset.joint_bounds_hi)

    @staticmethod
    def _input(tape, v, shape):
        if isinstance(v, ParameterBlock):
            if tape is not None:
                return tape.param_slice(v, 0, shape)
            return v.values.reshape(shape)
        return np.asarray(v, np.float64).reshape(shape)

    def frame_eval(self, tape: Tape | None, x, t, beta, *, use_net: bool,
                   pose_zero: bool = False,
                   noise_rng: np.random.Generator | None = None) -> FrameEval:
        """Pose one frame: constrain, skin offsets, kinematics, LBS.

        ``x``/``t``/``beta`` are ParameterBlocks (sliced onto the tape
        when one is given) or plain arrays.  ``pose_zero`` feeds the net
        a zeroed pose feature (warm-up and static mode); ``noise_rng``
        adds training noise to the live feature.
        """
        asset = self.asset
        J = asset.n_joints
        xv = self._input(tape, x, (J, 3))
        tv = self._input(tape, t, (3,))
        bv = self._input(tape, beta, (asset.n_shape_params,))

        delta = constrain_pose(xv, asset.joint_bounds_lo, asset.joint_bounds_hi,
                               asset.excluded_joints)
        shaped_base = shaped_template(asset.template_vertices,
                                      asset.shape_blendshapes, bv)
        rest_joints = rest_joint_locations(asset.joint_regressor, shaped_base)
        tf = forward_kinematics(delta, tv, rest_joints, asset.joint_parents,
                                asset.topological_order())

        shaped = shaped_template(self.template, self.shape_basis, bv)
        offsets = None
        if use_net:
            if pose_zero or self.static:
                gated = np.zeros((self.n_vertices, 9 * (J - 1)))
            else:
                feat = pose_feature(delta, tf.local_rot)
                if noise_rng is not None and self.net.config.noise_sigma > 0:
                    feat = augment_feature_noise(
                        feat, self.net.config.noise_sigma, noise_rng)
                gated = local_condition(self.gates, feat)
            offsets = self.net.offsets(self.posenc, gated, tape) * self.offset_keep
            unposed = shaped + offsets
        else:
            unposed = shaped
        posed = lbs_pose(unposed, self.skin, tf)
        return FrameEval(posed=posed, local_rot=tf.local_rot,
                         offsets=offsets, delta=delta)


# -- sequence state ----------------------------------------------------------------


@dataclass
class SequenceState:
    """All optimized parameters of one run, as flat blocks."""

    x: list          # per-frame unconstrained pose blocks, (J*3,)
    t: list          # per-frame translation blocks, (3,)
    beta: ParameterBlock
    net: SurfaceNet

    @property
    def n_frames(self) -> int:
        return len(self.x)

    def blocks(self) -> list:
        """Canonical block order (net, beta, poses, translations).

        Checkpoint Adam moments are stored in this order; keep stable.
        """
        return [self.net.block, self.beta] + self.x + self.t

    def poses(self) -> np.ndarray:
        J = len(self.x[0].values) // 3
        return np.stack([b.values.reshape(J, 3) for b in self.x])

    def translations(self) -> np.ndarray:
        return np.stack([b.values for b in self.t])


def init_state(model: BodyModel, n_frames: int) -> SequenceState:
    """Rest-pose state with zero shape and zero translations."""
    x_rest = model.rest_pose_x().ravel()
    x = [ParameterBlock(f"pose{i:04d}", x_rest.copy(), role="pose")
         for i in range(n_frames)]
    t = [ParameterBlock(f"trans{i:04d}", np.zeros(3), role="translation")
         for i in range(n_frames)]
    beta = ParameterBlock("beta", np.zeros(model.asset.n_shape_params),
                          role="shape")
    return SequenceState(x=x, t=t, beta=beta, net=model.net)


@dataclass
class FrameBinding:
    """One observation preprocessed against a model's topology."""

    obs: object                 # FrameObservation
    corr_points: SurfacePoints  # re-expressed on the fit subdivision level
    corr_obs: np.ndarray        # (n, 3) observed points, depth-valid only


def bind_observations(model: BodyModel, observations) -> list:
    """Validate observations and re-express correspondences on the model."""
    out = []
    n_base_faces = model.asset.triangles.shape[0]
    for f, obs in enumerate(observations):
        obs.validate(model.camera, n_base_faces)
        if obs.joints2d.shape[0] != len(model.landmarks):
            raise PipelineError(
                f"frame {f} has {obs.joints2d.shape[0]} landmark detections, "
                f"model defines {len(model.landmarks)}")
        if len(obs.corr_pixels):
            cols, rows = obs.corr_pixels[:, 0], obs.corr_pixels[:, 1]
            keep = obs.depth_valid[rows, cols]
            pts = SurfacePoints(obs.corr_points.triangles[keep],
                                obs.corr_points.barycentric[keep])
            corr_obs = obs.depth_points[rows[keep], cols[keep]]
        else:
            pts = SurfacePoints(np.zeros(0, np.int64), np.zeros((0, 3)))
            corr_obs = np.zeros((0, 3))
        if model.subdivision > 0 and len(pts):
            pts = remap_to_subdivided(model.sub, pts)
        out.append(FrameBinding(obs=obs, corr_points=pts, corr_obs=corr_obs))
    return out


# -- sequence energy ---------------------------------------------------------------


class _TermSink:
    """Accumulates weighted terms into one scalar plus a breakdown."""

    def __init__(self):
        self.breakdown = EnergyBreakdown()
        self.total = None

    def add(self, name: str, value, weight: float, count: int) -> None:
        if weight == 0.0:
            return  # zero weight removes the term (and its gradient) entirely
        self.breakdown.add(name, float(value_of(value)), weight, count)
        term = value * weight
        self.total = term if self.total is None else self.total + term

    def result(self):
        return (self.total if self.total is not None else 0.0), self.breakdown


def freeze_association(model: BodyModel, state: SequenceState, i: int,
                       binding: FrameBinding, *, use_net: bool,
                       pose_zero: bool = False):
    """Projective pairs for frame i at the current parameter values."""
    ev = model.frame_eval(None, state.x[i], state.t[i], state.beta,
                          use_net=use_net, pose_zero=pose_zero)
    posed = value_of(ev.posed)
    frag = rasterize(model.camera, posed, model.triangles)
    visible = vertex_visibility(model.camera, posed, model.triangles, frag)
    normals = value_of(vertex_normals(posed, model.triangles))
    obs = binding.obs
    return find_projective_correspondences(
        model.camera, posed, normals, visible, obs.depth_points,
        obs.depth_valid, obs.depth_normals)


def frame_visibility(model: BodyModel, state: SequenceState, i: int, *,
                     use_net: bool, pose_zero: bool = False) -> np.ndarray:
    ev = model.frame_eval(None, state.x[i], state.t[i], state.beta,
                          use_net=use_net, pose_zero=pose_zero)
    return vertex_visibility(model.camera, value_of(ev.posed), model.triangles)


def sample_pair_targets(model: BodyModel, state: SequenceState,
                        rng: np.random.Generator, *, use_net: bool,
                        pose_zero: bool = False) -> list:
    """One uniformly drawn partner j != i per frame, with j's visibility."""
    N = state.n_frames
    if N < 2:
        return [None] * N
    targets = []
    for i in range(N):
        j = int(rng.integers(N - 1))
        j += j >= i
        vis = frame_visibility(model, state, j, use_net=use_net,
                               pose_zero=pose_zero)
        targets.append((j, vis))
    return targets


def _frame_energy(sink: _TermSink, tape, model: BodyModel, ev: FrameEval,
                  binding: FrameBinding, weights: EnergyWeights, assoc,
                  use_net: bool) -> None:
    """Per-frame data terms (and the offset smoothness regularizer)."""
    cam = model.camera
    obs = binding.obs
    if weights.landmarks > 0 and obs.joints_valid.any():
        m3 = sample_surface(model.landmarks, model.triangles, ev.posed)
        uv, ok = project(cam, m3)
        val, n = landmark_term(cam, uv, obs.joints2d,
                               obs.joints_valid & np.asarray(ok))
        if n:
            sink.add("landmarks", val, weights.landmarks, n)
    if weights.dense_correspondence > 0 and len(binding.corr_points):
        pts = sample_surface(binding.corr_points, model.triangles, ev.posed)
        val, n = dense_correspondence_term(pts, binding.corr_obs)
        if n:
            sink.add("dense", val, weights.dense_correspondence, n)
    if weights.projective > 0 and assoc is not None and len(assoc):
        normals = vertex_normals(ev.posed, model.triangles)
        val, n = projective_term(ev.posed, normals, assoc)
        if n:
            sink.add("projective", val, weights.projective, n)
    if weights.silhouette > 0:
        val, n = silhouette_term(tape, cam, ev.posed, model.triangles,
                                 obs.mask, model.topo)
        sink.add("silhouette", val, weights.silhouette, n)
    if weights.surface_smoothness > 0 and use_net:
        val, n = smoothness_term(ev.posed, model.nb_src, model.nb_dst,
                                 model.degree, model.active_vertices)
        if n:
            sink.add("smoothness", val, weights.surface_smoothness, n)


def total_energy(tape, model: BodyModel, state: SequenceState, bindings,
                 weights: EnergyWeights, *, use_net: bool = False,
                 pose_zero: bool = False, assoc=None, pair_targets=None,
                 pair_rng: np.random.Generator | None = None,
                 noise_rng: np.random.Generator | None = None,
                 temporal: bool = True):
    """Full sequence energy on one tape; returns (scalar, breakdown).

    Associations, pair targets and visibility are inputs (or sampled
    here from ``pair_rng`` at the current values) and enter the graph as
    constants; the scalar is a Tensor when ``tape`` is given.  Passing
    the same frozen inputs twice yields an identical breakdown.
    """
    N = state.n_frames
    if len(bindings) != N:
        raise PipelineError(
            f"{len(bindings)} observations bound for {N} state frames")
    if assoc is None:
        assoc = [None] * N
    if len(assoc) != N:
        raise PipelineError("association list does not match the frame count")

    if (pair_targets is None and pair_rng is not None and use_net
            and weights.pose_consistency > 0):
        pair_targets = sample_pair_targets(model, state, pair_rng,
                                           use_net=use_net, pose_zero=pose_zero)

    evals = [model.frame_eval(tape, state.x[i], state.t[i], state.beta,
                              use_net=use_net, pose_zero=pose_zero,
                              noise_rng=noise_rng)
             for i in range(N)]

    sink = _TermSink()
    for i in range(N):
        _frame_energy(sink, tape, model, evals[i], bindings[i], weights,
                      assoc[i], use_net)

    if temporal and N >= 3:
        for i in range(1, N - 1):
            if weights.temporal_surface > 0:
                val, n = temporal_surface_term(
                    evals[i - 1].posed, evals[i].posed, evals[i + 1].posed)
                sink.add("temporal_surface", val, weights.temporal_surface, n)
            if weights.temporal_rotation > 0:
                val, n = temporal_rotation_term(
                    evals[i - 1].local_rot, evals[i].local_rot,
                    evals[i + 1].local_rot)
                sink.add("temporal_rotation", val, weights.temporal_rotation, n)

    if use_net and weights.pose_consistency > 0 and pair_targets is not None:
        for i, tgt in enumerate(pair_targets):
            if tgt is None:
                continue
            j, visible = tgt
            omega = pose_similarity_weight(evals[i].local_rot,
                                           evals[j].local_rot, model.include)
            val, n = pose_consistency_term(evals[i].offsets, evals[j].offsets,
                                           visible, omega)
            if n:
                sink.add("pose_consistency", val, weights.pose_consistency, n)

    return sink.result()


def _breakdown_dict(bd: EnergyBreakdown) -> dict:
    out = {name: rec.weighted for name, rec in sorted(bd.terms.items())}
    out["total"] = bd.total
    return out


# -- stage drivers -----------------------------------------------------------------


def _backward_scalar(tape: Tape, total) -> float:
    if isinstance(total, Tensor):
        tape.backward(total)
    return float(value_of(total))


def _sweep_objective(model, state, i, binding, weights, assoc):
    def objective():
        tape = Tape()
        ev = model.frame_eval(tape, state.x[i], state.t[i], state.beta,
                              use_net=False)
        sink = _TermSink()
        _frame_energy(sink, tape, model, ev, binding, weights, assoc,
                      use_net=False)
        total, _ = sink.result()
        return _backward_scalar(tape, total)
    return objective


def run_stage1(model: BodyModel, state: SequenceState, bindings,
               schedule: StageOneSchedule, weights: EnergyWeights,
               trace: TraceWriter) -> None:
    """Skeleton fit: sequential warm-started solves, then global passes.

    The sweep solves {x_i, t_i} per frame with the detections boosted
    and beta frozen; the global passes release beta, add the temporal
    terms after the configured pass and scale the L-BFGS trial step by
    the pass rate.  Projective pairs stay off for the first solves until
    the skeleton is roughly placed.
    """
    w1 = weights.skeleton_stage()
    N = state.n_frames

    # frame 0: start the root at the observed depth centroid
    obs0 = bindings[0].obs
    if obs0.depth_valid.any():
        target = obs0.depth_points[obs0.depth_valid].mean(axis=0)
        ev = model.frame_eval(None, state.x[0], state.t[0], state.beta,
                              use_net=False)
        state.t[0].values += target - value_of(ev.posed).mean(axis=0)

    for i in range(N):
        if i > 0:
            state.x[i].values[:] = state.x[i - 1].values
            state.t[i].values[:] = state.t[i - 1].values
        assoc = None
        if w1.projective > 0 and i >= schedule.projective_warmup_solves:
            assoc = freeze_association(model, state, i, bindings[i],
                                       use_net=False)
        res = lbfgs_minimize(
            _sweep_objective(model, state, i, bindings[i], w1, assoc),
            [state.x[i], state.t[i]],
            LbfgsConfig(history=schedule.history,
                        max_iterations=schedule.sweep_max_iterations))
        trace.write({"stage": 1, "phase": "sweep", "frame": i,
                     "f": res.f, "grad_norm": res.grad_norm,
                     "iterations": res.iterations})

    blocks = [state.beta] + state.x + state.t
    initial = None
    for p, rate in enumerate(schedule.pass_rates()):
        if rate <= 0.0:
            continue
        temporal = p >= schedule.temporal_from_pass
        assoc = None
        if w1.projective > 0:
            assoc = [freeze_association(model, state, i, bindings[i],
                                        use_net=False) for i in range(N)]

        def objective():
            tape = Tape()
            total, _ = total_energy(tape, model, state, bindings, w1,
                                    use_net=False, assoc=assoc,
                                    temporal=temporal)
            return _backward_scalar(tape, total)

        res = lbfgs_minimize(objective, blocks,
                             LbfgsConfig(history=schedule.history,
                                         max_iterations=schedule.pass_iterations,
                                         step_scale=rate))
        if initial is None:
            initial = res.trace[0].f0 if res.trace else res.f
        _, bd = total_energy(None, model, state, bindings, w1, use_net=False,
                             assoc=assoc, temporal=temporal)
        trace.write({"stage": 1, "phase": "global", "pass": p, "rate": rate,
                     "f": res.f, "grad_norm": res.grad_norm,
                     "terms": _breakdown_dict(bd)})
        if initial > 0 and res.f > schedule.divergence_factor * initial:
            raise PipelineError(
                f"stage 1 diverged: pass {p} energy {res.f:.6g} exceeds "
                f"{schedule.divergence_factor:g}x the initial {initial:.6g}")


def _stage2_checkpoint(state: SequenceState, adam: AdamState,
                       rng: np.random.Generator, next_pass: int,
                       config_echo: dict) -> RunCheckpoint:
    net = state.net
    meta = dict(dataclasses.asdict(net.config),
                joint_feature_count=net.joint_feature_count)
    return RunCheckpoint(
        stage=2, next_pass=next_pass, poses=state.poses(),
        translations=state.translations(), beta=state.beta.values.copy(),
        net_weights=net.block.values.copy(), net_meta=meta,
        adam=adam.snapshot(), rng_state=rng.bit_generator.state,
        config=config_echo)


def run_stage2(model: BodyModel, state: SequenceState, bindings,
               schedule: StageTwoSchedule, weights: EnergyWeights,
               trace: TraceWriter, rng: np.random.Generator, *,
               checkpoint_dir=None, config_echo: dict | None = None,
               start_pass: int = 0, adam: AdamState | None = None) -> None:
    """Joint surface fit: per-frame Adam steps in shuffled order.

    Every step freezes that frame's projective pairs, reads temporal
    neighbors and the sampled pair frame as parameter snapshots, and
    updates all blocks from one backward pass.  The pose feature is
    forced to zero until the decay phase activates the conditioning
    (never in static mode); a NaN gradient rejects the step, halves the
    rate once for the rest of the run, and aborts on recurrence.
    """
    N = state.n_frames
    blocks = state.blocks()
    if adam is None:
        adam = AdamState.for_blocks(blocks)
    rates = schedule.pass_rates()
    if not 0 <= start_pass <= len(rates):
        raise PipelineError(f"resume pass {start_pass} outside the schedule")
    sigma = model.net.config.noise_sigma
    halved = False
    echo = config_echo or {}

    for p in range(start_pass, len(rates)):
        rate = rates[p] * (0.5 if halved else 1.0)
        live = schedule.conditioning_active(p) and not model.static
        if rate > 0.0:
            order = rng.permutation(N)
            for fi in order:
                i = int(fi)
                assoc = None
                if weights.projective > 0:
                    assoc = freeze_association(model, state, i, bindings[i],
                                               use_net=True,
                                               pose_zero=not live)
                pair = None
                if weights.pose_consistency > 0 and N >= 2:
                    j = int(rng.integers(N - 1))
                    j += j >= i
                    ev_j = model.frame_eval(None, state.x[j], state.t[j],
                                            state.beta, use_net=True,
                                            pose_zero=not live)
                    vis_j = vertex_visibility(model.camera,
                                              value_of(ev_j.posed),
                                              model.triangles)
                    pair = (j, value_of(ev_j.offsets),
                            value_of(ev_j.local_rot), vis_j)
                snap_prev = snap_next = None
                if 0 < i < N - 1 and (weights.temporal_surface > 0
                                      or weights.temporal_rotation > 0):
                    snap_prev = model.frame_eval(
                        None, state.x[i - 1], state.t[i - 1], state.beta,
                        use_net=True, pose_zero=not live)
                    snap_next = model.frame_eval(
                        None, state.x[i + 1], state.t[i + 1], state.beta,
                        use_net=True, pose_zero=not live)

                for b in blocks:
                    b.zero_grad()
                tape = Tape()
                ev = model.frame_eval(
                    tape, state.x[i], state.t[i], state.beta, use_net=True,
                    pose_zero=not live,
                    noise_rng=(rng if live and sigma > 0 else None))
                sink = _TermSink()
                _frame_energy(sink, tape, model, ev, bindings[i], weights,
                              assoc, use_net=True)
                if snap_prev is not None:
                    if weights.temporal_surface > 0:
                        val, n = temporal_surface_term(
                            value_of(snap_prev.posed), ev.posed,
                            value_of(snap_next.posed))
                        sink.add("temporal_surface", val,
                                 weights.temporal_surface, n)
                    if weights.temporal_rotation > 0:
                        val, n = temporal_rotation_term(
                            value_of(snap_prev.local_rot), ev.local_rot,
                            value_of(snap_next.local_rot))
                        sink.add("temporal_rotation", val,
                                 weights.temporal_rotation, n)
                if pair is not None:
                    j, off_j, rot_j, vis_j = pair
                    omega = pose_similarity_weight(ev.local_rot, rot_j,
                                                   model.include)
                    val, n = pose_consistency_term(ev.offsets, off_j, vis_j,
                                                   omega)
                    if n:
                        sink.add("pose_consistency", val,
                                 weights.pose_consistency, n)
                total, bd = sink.result()
                f = _backward_scalar(tape, total)

                if not all(np.all(np.isfinite(b.grad)) for b in blocks):
                    if halved:
                        raise PipelineError(
                            f"stage 2 aborted: NaN gradient at pass {p} frame "
                            f"{i} after the rate was already halved")
                    halved = True
                    trace.write({"stage": 2, "pass": p, "frame": i,
                                 "event": "nan-reject"})
                    continue
                gnorm = float(np.sqrt(sum(float(b.grad @ b.grad)
                                          for b in blocks)))
                adam_step(blocks, adam, rate)
                trace.write({"stage": 2, "pass": p, "frame": i, "f": f,
                             "rate": rate, "grad_norm": gnorm,
                             "conditioning": bool(live),
                             "terms": _breakdown_dict(bd)})

        if (checkpoint_dir is not None
                and (p + 1) % schedule.checkpoint_interval == 0):
            save_checkpoint(
                Path(checkpoint_dir) / f"stage2_pass{p + 1:04d}.npz",
                _stage2_checkpoint(state, adam, rng, p + 1, echo))

    if checkpoint_dir is not None:
        save_checkpoint(Path(checkpoint_dir) / "final.npz",
                        _stage2_checkpoint(state, adam, rng, len(rates), echo))


# -- export helpers ----------------------------------------------------------------


def export_sequence(model: BodyModel, state: SequenceState, out_dir, *,
                    use_net: bool = True):
    """Write one OBJ per frame; returns (mesh paths, markers (N, L, 3))."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    paths, markers = [], []
    for i in range(state.n_frames):
        ev = model.frame_eval(None, state.x[i], state.t[i], state.beta,
                              use_net=use_net)
        posed = value_of(ev.posed)
        path = out_dir / f"frame_{i:04d}.obj"
        export_obj(path, posed, model.triangles)
        m3 = sample_surface(model.landmarks, model.triangles, posed)
        paths.append(path)
        markers.append(value_of(m3))
    return paths, np.stack(markers)


def _write_json(path, payload: dict) -> None:
    Path(path).write_text(json.dumps(payload, indent=1, sort_keys=True) + "\n")


def model_from_checkpoint(ckpt: RunCheckpoint,
                          camera: PinholeCamera | None = None) -> BodyModel:
    """Rebuild the body model a checkpoint was trained with."""
    cfg = RunConfig.from_dict(ckpt.config)
    asset = build_humanoid(HumanoidConfig(grid_resolution=cfg.grid_resolution))
    meta = dict(ckpt.net_meta)
    k = int(meta.pop("joint_feature_count"))
    net_cfg = SurfaceNetConfig(**meta)
    block = ParameterBlock("surface_net", np.array(ckpt.net_weights),
                           role="net-weights")
    net = SurfaceNet(k, net_cfg, block)
    return BodyModel(asset, camera, net_cfg, subdivision=cfg.subdivision,
                     static=cfg.static_mode, net=net)


def state_from_checkpoint(model: BodyModel, ckpt: RunCheckpoint) -> SequenceState:
    state = init_state(model, ckpt.poses.shape[0])
    for i in range(ckpt.poses.shape[0]):
        state.x[i].values[:] = ckpt.poses[i].ravel()
        state.t[i].values[:] = ckpt.translations[i]
    state.beta.values[:] = ckpt.beta
    return state


# -- commands ----------------------------------------------------------------------


def _bump_presets(config: RunConfig, asset: RiggedBodyAsset) -> tuple:
    """Surface detail presets: a belly-side bump, constant or bend-gated."""
    if config.bumps == "none":
        return ()
    # min-z side of the template faces the default capture camera; an
    # occluded bump would be unobservable and unfittable by construction
    anchor = np.array([0.0, 0.2, -0.2])
    center = asset.template_vertices[
        np.argmin(np.linalg.norm(asset.template_vertices - anchor, axis=1))]
    if config.bumps == "static":
        return (OffsetBump(center=tuple(center), radius=config.bump_radius,
                           gain=config.bump_gain),)
    excluded = set(int(j) for j in asset.excluded_joints)
    swing = (config.swing_joint if config.swing_joint >= 0 else
             next(j for j in range(1, asset.n_joints) if j not in excluded))
    return (OffsetBump(center=tuple(center), radius=config.bump_radius,
                       gain=config.bump_gain, joint=swing,
                       full_bend=max(0.5 * config.amplitude, 1e-3)),)


def cmd_generate(config: RunConfig) -> Path:
    """Render a synthetic capture bundle (with ground-truth sidecar)."""
    config.validate()
    apply_worker_override()
    asset = build_humanoid(HumanoidConfig(grid_resolution=config.grid_resolution))
    camera = default_capture_camera(config.resolution)
    joint = None if config.swing_joint < 0 else config.swing_joint
    poses, translations = make_trajectory(
        asset, config.trajectory, config.frames, amplitude=config.amplitude,
        joint=joint, axis=config.swing_axis, cycles=config.cycles,
        drift=config.drift, seed=config.seed)
    beta = np.asarray(config.gt_beta, np.float64) if config.gt_beta else None
    rig = GroundTruthRig(
        asset=asset, camera=camera, poses=poses, translations=translations,
        bumps=_bump_presets(config, asset), beta=beta,
        subdivision=config.gt_subdivision, max_amplitude=config.max_amplitude)
    noise = NoiseConfig(
        depth_sigma=config.depth_sigma, joint_sigma=config.joint_sigma,
        joint_dropout=config.joint_dropout, corr_jitter=config.corr_jitter,
        mask_radius=config.mask_radius)
    cap = render_observations(rig, noise, corr_fraction=config.corr_fraction,
                              seed=config.seed)
    root = Path(config.bundle)
    write_bundle(root, camera, cap.observations, manifest=config.to_dict())
    write_ground_truth(root, cap.gt_vertices, cap.gt_triangles, cap.gt_markers,
                       poses, translations, beta)
    return root


def cmd_fit(config: RunConfig) -> dict:
    """Two-stage fit of a bundle; exports meshes, markers and checkpoints."""
    config.validate()
    apply_worker_override()
    out = Path(config.output)
    ckpt_dir = out / "checkpoints"
    ckpt_dir.mkdir(parents=True, exist_ok=True)

    camera, observations, _ = read_bundle(config.bundle)
    asset = build_humanoid(HumanoidConfig(grid_resolution=config.grid_resolution))
    model = BodyModel(asset, camera, config.net_config(),
                      subdivision=config.subdivision, static=config.static_mode,
                      net_rng=np.random.default_rng(config.seed))
    bindings = bind_observations(model, observations)
    weights = config.energy_weights()
    echo = config.to_dict()
    rng = np.random.default_rng(config.seed + 1)
    trace_path = out / ("trace_resume.jsonl" if config.resume
                        else "trace.jsonl")

    start_pass, adam = 0, None
    if config.resume:
        ckpt = load_checkpoint(config.resume)
        if ckpt.stage != 2:
            raise PipelineError("only stage-2 checkpoints are resumable")
        if ckpt.poses.shape[0] != len(bindings):
            raise PipelineError("checkpoint frame count does not match bundle")
        state = state_from_checkpoint(model, ckpt)
        model.net.block.values[:] = ckpt.net_weights
        adam = AdamState.from_snapshot(ckpt.adam)
        rng.bit_generator.state = ckpt.rng_state
        start_pass = ckpt.next_pass
        # a resumed run is the same run: keep its original config echo so
        # its checkpoints stay byte-identical to an uninterrupted run's
        echo = ckpt.config or echo
    else:
        state = init_state(model, len(bindings))

    with TraceWriter(trace_path) as trace:
        try:
            if not config.resume:
                run_stage1(model, state, bindings, config.stage1_schedule(),
                           weights, trace)
                save_checkpoint(ckpt_dir / "stage1.npz", RunCheckpoint(
                    stage=1, next_pass=0, poses=state.poses(),
                    translations=state.translations(),
                    beta=state.beta.values.copy(),
                    net_weights=state.net.block.values.copy(),
                    net_meta=dict(dataclasses.asdict(state.net.config),
                                  joint_feature_count=state.net.joint_feature_count),
                    rng_state=rng.bit_generator.state, config=echo))
                export_sequence(model, state, out / "meshes_stage1",
                                use_net=False)
            run_stage2(model, state, bindings, config.stage2_schedule(),
                       weights, trace, rng, checkpoint_dir=ckpt_dir,
                       config_echo=echo, start_pass=start_pass, adam=adam)
        except PipelineError as e:
            raise PipelineError(f"{e} (trace: {trace_path})") from e

    mesh_paths, markers = export_sequence(model, state, out / "meshes")
    _write_json(out / "markers.json", {"markers": markers.tolist()})
    deltas = [value_of(constrain_pose(
        b.values.reshape(-1, 3), asset.joint_bounds_lo, asset.joint_bounds_hi,
        asset.excluded_joints)) for b in state.x]
    _write_json(out / "fitted_poses.json", {
        "poses": np.stack(deltas).tolist(),
        "x": state.poses().tolist(),
        "translations": state.translations().tolist()})
    summary = {"frames": state.n_frames, "config": echo,
               "meshes": str(out / "meshes"),
               "checkpoint": str(ckpt_dir / "final.npz")}
    _write_json(out / "summary.json", summary)
    return summary


def _load_fitted_sequence(fit_dir):
    fit_dir = Path(fit_dir)
    mesh_dir = fit_dir / "meshes"
    paths = sorted(mesh_dir.glob("frame_*.obj"))
    if not paths:
        raise PipelineError(f"no fitted meshes under {mesh_dir}")
    meshes, triangles = [], None
    for p in paths:
        v, f = load_obj(p)
        meshes.append(v)
        triangles = f
    markers = None
    marker_path = fit_dir / "markers.json"
    if marker_path.exists():
        markers = np.asarray(
            json.loads(marker_path.read_text())["markers"], np.float64)
    return meshes, triangles, markers


def cmd_eval(fit_dir, bundle_dir, *, with_iou: bool = True,
             iou_resolution: int = 128, chamfer_samples: int = 10000,
             seed: int = 0) -> MetricsReport:
    """Score a fitted sequence against its bundle's ground truth."""
    apply_worker_override()
    meshes, triangles, markers = _load_fitted_sequence(fit_dir)
    gt_meshes, gt_tris, gt_markers, _ = read_ground_truth(bundle_dir)
    if len(meshes) != len(gt_meshes):
        raise PipelineError(
            f"{len(meshes)} fitted frames vs {len(gt_meshes)} ground-truth")
    report = evaluate_sequence(
        meshes, gt_meshes, triangles, gt_tris,
        markers_fit=markers, markers_gt=gt_markers if markers is not None else None,
        with_iou=with_iou, iou_resolution=iou_resolution,
        chamfer_samples=chamfer_samples, seed=seed)
    _write_json(Path(fit_dir) / "metrics.json", report.to_dict())
    return report


def cmd_animate(checkpoint, poses_path, output) -> list:
    """Drive a fitted model with a new pose sequence; export meshes.

    The poses file carries constrained per-joint angles under "poses"
    (clamped into the joint bounds with a warning when outside) or raw
    unconstrained parameters under "x"; "translations" is optional.
    """
    apply_worker_override()
    ckpt = load_checkpoint(checkpoint)
    model = model_from_checkpoint(ckpt)
    asset = model.asset
    data = json.loads(Path(poses_path).read_text())

    if "x" in data:
        x_seq = np.asarray(data["x"], np.float64)
    elif "poses" in data:
        delta = np.asarray(data["poses"], np.float64)
        if delta.ndim != 3 or delta.shape[1:] != (asset.n_joints, 3):
            raise PipelineError("pose sequence must be (N, J, 3)")
        lo, hi = asset.joint_bounds_lo, asset.joint_bounds_hi
        margin = 1e-9 + 1e-6 * (hi - lo)
        clamped = np.clip(delta, lo + margin, hi - margin)
        moved = np.abs(clamped - delta) > margin  # beyond the safety inset
        moved[:, asset.excluded_joints, :] = False  # pinned anyway
        if moved.any():
            warnings.warn(f"{int(moved.sum())} pose coordinates outside the "
                          "joint bounds were clamped")
        x_seq = np.stack([invert_constrain(d, lo, hi) for d in clamped])
    else:
        raise PipelineError('poses file needs a "poses" or "x" entry')
    if x_seq.ndim != 3 or x_seq.shape[1:] != (asset.n_joints, 3):
        raise PipelineError("pose sequence must be (N, J, 3)")
    n = x_seq.shape[0]
    translations = np.asarray(data.get("translations",
                                       np.zeros((n, 3))), np.float64)
    if translations.shape != (n, 3):
        raise PipelineError("translations must be (N, 3)")

    out = Path(output)
    out.mkdir(parents=True, exist_ok=True)
    paths = []
    for i in range(n):
        ev = model.frame_eval(None, x_seq[i], translations[i], ckpt.beta,
                              use_net=True)
        path = out / f"frame_{i:04d}.obj"
        export_obj(path, value_of(ev.posed), model.triangles)
        paths.append(path)
    return paths


def cmd_export(checkpoint, output) -> list:
    """Re-export the fitted sequence meshes stored in a checkpoint."""
    apply_worker_override()
    ckpt = load_checkpoint(checkpoint)
    model = model_from_checkpoint(ckpt)
    state = state_from_checkpoint(model, ckpt)
    paths, markers = export_sequence(model, state, output,
                                     use_net=ckpt.stage >= 2)
    _write_json(Path(output) / "markers.json", {"markers": markers.tolist()})
    return paths
