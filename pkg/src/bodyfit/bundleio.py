"""On-disk formats: observation bundles, OBJ meshes, checkpoints, traces.

An observation bundle is a directory:

    bundle/
      camera.json
      manifest.json
      frames/0000/depth.png            16-bit grayscale, millimeters
      frames/0000/mask.png             8-bit, 0 background / 255 foreground
      frames/0000/joints.json          normalized detections + validity
      frames/0000/correspondences.txt  "u v tri b0 b1 b2" per line
      gt/                              optional ground truth for evaluation
        mesh_0000.obj ...
        markers.json
        params.json

Checkpoints are single .npz files written atomically (temp + rename);
traces are line-delimited JSON records.
"""

from __future__ import annotations

import io
import json
import os
import zipfile
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image

from .energy import FrameObservation
from .mesh import MeshError, SurfacePoints
from .render import PinholeCamera, backproject, depth_normals

DEPTH_UNIT = 0.001  # stored depth quantum: one millimeter


class BundleError(ValueError):
    """Raised when an observation bundle is malformed or incomplete."""


# -- images --------------------------------------------------------------------


def write_depth_png(path, depth_m: np.ndarray) -> None:
    """Write depth in meters as a 16-bit millimeter PNG (0 = no reading)."""
    mm = np.round(np.asarray(depth_m, np.float64) / DEPTH_UNIT)
    if mm.max(initial=0.0) > 65535:
        raise BundleError("depth exceeds the 16-bit millimeter range")
    Image.fromarray(np.clip(mm, 0, 65535).astype(np.uint16)).save(path)


def read_depth_png(path) -> np.ndarray:
    """Depth image in meters, 0 where the sensor had no reading."""
    return np.asarray(Image.open(path), np.float64) * DEPTH_UNIT


def write_mask_png(path, mask: np.ndarray) -> None:
    Image.fromarray(((np.asarray(mask) > 0.5) * 255).astype(np.uint8)).save(path)


def read_mask_png(path) -> np.ndarray:
    return (np.asarray(Image.open(path), np.float64) > 127).astype(np.float64)


# -- structured text -------------------------------------------------------------


def _write_json(path, payload: dict) -> None:
    Path(path).write_text(json.dumps(payload, indent=1, sort_keys=True) + "\n")


def _read_json(path) -> dict:
    return json.loads(Path(path).read_text())


def write_correspondences(path, pixels: np.ndarray,
                          points: SurfacePoints) -> None:
    lines = []
    for (u, v), tri, bary in zip(pixels, points.triangles, points.barycentric):
        lines.append(f"{int(u)} {int(v)} {int(tri)} "
                     f"{bary[0]:.9g} {bary[1]:.9g} {bary[2]:.9g}")
    Path(path).write_text("\n".join(lines) + ("\n" if lines else ""))


def read_correspondences(path):
    pixels, tris, barys = [], [], []
    for ln, line in enumerate(Path(path).read_text().splitlines()):
        parts = line.split()
        if not parts:
            continue
        if len(parts) != 6:
            raise BundleError(f"correspondence line {ln + 1} malformed")
        pixels.append((int(parts[0]), int(parts[1])))
        tris.append(int(parts[2]))
        barys.append([float(x) for x in parts[3:6]])
    pixels = np.asarray(pixels, np.int64).reshape(-1, 2)
    bary = np.asarray(barys, np.float64).reshape(-1, 3)
    if len(bary):
        bary = np.clip(bary, 0.0, None)
        bary /= bary.sum(axis=1, keepdims=True)  # undo 9-digit text rounding
    return pixels, SurfacePoints(np.asarray(tris, np.int64), bary)


# -- observation bundles ------------------------------------------------------------


def _frame_dir(root: Path, index: int) -> Path:
    return root / "frames" / f"{index:04d}"


def write_bundle(root, camera: PinholeCamera,
                 observations: list[FrameObservation],
                 manifest: dict | None = None) -> None:
    root = Path(root)
    (root / "frames").mkdir(parents=True, exist_ok=True)
    _write_json(root / "camera.json", camera.to_dict())
    _write_json(root / "manifest.json",
                dict(manifest or {}, frames=len(observations)))
    for i, obs in enumerate(observations):
        d = _frame_dir(root, i)
        d.mkdir(parents=True, exist_ok=True)
        depth = np.where(obs.depth_valid, obs.depth_points[:, :, 2], 0.0)
        write_depth_png(d / "depth.png", depth)
        write_mask_png(d / "mask.png", obs.mask)
        _write_json(d / "joints.json", {
            "joints2d": np.asarray(obs.joints2d).tolist(),
            "valid": np.asarray(obs.joints_valid, bool).tolist()})
        write_correspondences(d / "correspondences.txt",
                              obs.corr_pixels, obs.corr_points)


def read_bundle(root):
    """Load a bundle: (camera, [FrameObservation], manifest).

    Depth points and normals are re-derived from the stored depth image,
    so a written-then-read bundle differs from the in-memory original
    only by millimeter quantization.
    """
    root = Path(root)
    if not (root / "camera.json").exists():
        raise BundleError(f"no camera.json under {root}")
    camera = PinholeCamera.from_dict(_read_json(root / "camera.json"))
    manifest = _read_json(root / "manifest.json")
    n = int(manifest["frames"])
    observations = []
    for i in range(n):
        d = _frame_dir(root, i)
        if not d.exists():
            raise BundleError(f"missing frame directory {d}")
        depth = read_depth_png(d / "depth.png")
        points, valid = backproject(camera, np.where(depth > 0, depth, np.nan))
        normals = depth_normals(points, valid)
        points = np.where(np.isfinite(points), points, 0.0)
        mask = read_mask_png(d / "mask.png")
        joints = _read_json(d / "joints.json")
        pixels, corr = read_correspondences(d / "correspondences.txt")
        observations.append(FrameObservation(
            depth_points=points, depth_valid=valid, depth_normals=normals,
            joints2d=np.asarray(joints["joints2d"], np.float64).reshape(-1, 2),
            joints_valid=np.asarray(joints["valid"], bool),
            corr_pixels=pixels, corr_points=corr, mask=mask))
    return camera, observations, manifest


def write_ground_truth(root, meshes, triangles, markers: np.ndarray,
                       poses: np.ndarray, translations: np.ndarray,
                       beta: np.ndarray | None = None) -> None:
    """Ground-truth sidecar consumed only by evaluation."""
    gt = Path(root) / "gt"
    gt.mkdir(parents=True, exist_ok=True)
    for i, verts in enumerate(meshes):
        export_obj(gt / f"mesh_{i:04d}.obj", verts, triangles)
    _write_json(gt / "markers.json", {"markers": np.asarray(markers).tolist()})
    _write_json(gt / "params.json", {
        "poses": np.asarray(poses).tolist(),
        "translations": np.asarray(translations).tolist(),
        "beta": (np.asarray(beta).tolist() if beta is not None else None)})


def read_ground_truth(root):
    """Returns (meshes, triangles, markers, params dict)."""
    gt = Path(root) / "gt"
    if not gt.exists():
        raise BundleError(f"bundle has no ground-truth sidecar: {gt}")
    meshes, triangles = [], None
    for i in range(len(list(gt.glob("mesh_*.obj")))):
        v, f = load_obj(gt / f"mesh_{i:04d}.obj")
        meshes.append(v)
        triangles = f
    markers = np.asarray(_read_json(gt / "markers.json")["markers"], np.float64)
    params = _read_json(gt / "params.json")
    params = {"poses": np.asarray(params["poses"], np.float64),
              "translations": np.asarray(params["translations"], np.float64),
              "beta": (None if params["beta"] is None
                       else np.asarray(params["beta"], np.float64))}
    return meshes, triangles, markers, params


# -- OBJ ------------------------------------------------------------------------


def export_obj(path, vertices, triangles) -> None:
    """Plain OBJ, 1-based faces, 9 significant digits per coordinate."""
    v = np.asarray(vertices, np.float64)
    t = np.asarray(triangles, np.int64)
    if v.size == 0 or t.size == 0:
        raise MeshError("refusing to export an empty mesh")
    lines = [f"v {p[0]:.9g} {p[1]:.9g} {p[2]:.9g}" for p in v]
    lines += [f"f {a + 1} {b + 1} {c + 1}" for a, b, c in t]
    Path(path).write_text("\n".join(lines) + "\n")


def load_obj(path):
    verts, faces = [], []
    for line in Path(path).read_text().splitlines():
        parts = line.split()
        if not parts:
            continue
        if parts[0] == "v":
            verts.append([float(x) for x in parts[1:4]])
        elif parts[0] == "f":
            idx = [int(p.split("/")[0]) - 1 for p in parts[1:4]]
            faces.append(idx)
    return (np.asarray(verts, np.float64).reshape(-1, 3),
            np.asarray(faces, np.int64).reshape(-1, 3))


# -- checkpoints --------------------------------------------------------------------


@dataclass
class RunCheckpoint:
    """Resumable optimizer state: parameters, net weights, moments, RNG."""

    stage: int
    next_pass: int
    poses: np.ndarray          # (N, J, 3) unconstrained
    translations: np.ndarray   # (N, 3)
    beta: np.ndarray
    net_weights: np.ndarray    # flat MLP parameter vector
    net_meta: dict             # architecture echo for load-time checks
    adam: dict | None = None   # AdamState.snapshot()
    rng_state: dict | None = None
    config: dict = field(default_factory=dict)


def save_checkpoint(path, ckpt: RunCheckpoint) -> None:
    """Atomic save: write a temp file in the same directory, then rename."""
    path = Path(path)
    arrays = {
        "poses": np.asarray(ckpt.poses, np.float64),
        "translations": np.asarray(ckpt.translations, np.float64),
        "beta": np.asarray(ckpt.beta, np.float64),
        "net_weights": np.asarray(ckpt.net_weights, np.float64),
    }
    meta = {"stage": ckpt.stage, "next_pass": ckpt.next_pass,
            "net_meta": ckpt.net_meta, "config": ckpt.config,
            "rng_state": ckpt.rng_state, "adam": None}
    if ckpt.adam is not None:
        meta["adam"] = {"step": ckpt.adam["step"], "beta1": ckpt.adam["beta1"],
                        "beta2": ckpt.adam["beta2"], "eps": ckpt.adam["eps"],
                        "count": len(ckpt.adam["m"])}
        for i, (m, v) in enumerate(zip(ckpt.adam["m"], ckpt.adam["v"])):
            arrays[f"adam_m_{i}"] = np.asarray(m, np.float64)
            arrays[f"adam_v_{i}"] = np.asarray(v, np.float64)
    arrays["meta"] = np.frombuffer(json.dumps(meta).encode(), np.uint8)
    tmp = path.with_name(path.name + ".tmp")
    # hand-rolled npz: np.savez stamps wall-clock times into the zip
    # directory, which would break bitwise reproducibility across runs
    with zipfile.ZipFile(tmp, "w", zipfile.ZIP_STORED) as zf:
        for name in sorted(arrays):
            buf = io.BytesIO()
            np.lib.format.write_array(buf, np.ascontiguousarray(arrays[name]))
            info = zipfile.ZipInfo(name + ".npy", date_time=(1980, 1, 1, 0, 0, 0))
            zf.writestr(info, buf.getvalue())
    os.replace(tmp, path)


def load_checkpoint(path) -> RunCheckpoint:
    path = Path(path)
    if not path.exists():
        raise BundleError(f"checkpoint not found: {path}")
    with np.load(path, allow_pickle=False) as z:
        meta = json.loads(z["meta"].tobytes().decode())
        adam = None
        if meta["adam"] is not None:
            a = meta["adam"]
            adam = {"step": a["step"], "beta1": a["beta1"],
                    "beta2": a["beta2"], "eps": a["eps"],
                    "m": [z[f"adam_m_{i}"] for i in range(a["count"])],
                    "v": [z[f"adam_v_{i}"] for i in range(a["count"])]}
        return RunCheckpoint(
            stage=int(meta["stage"]), next_pass=int(meta["next_pass"]),
            poses=z["poses"], translations=z["translations"],
            beta=z["beta"], net_weights=z["net_weights"],
            net_meta=meta["net_meta"], adam=adam,
            rng_state=meta["rng_state"], config=meta["config"])


# -- trace log ---------------------------------------------------------------------


class TraceWriter:
    """Line-delimited JSON event log, flushed per record."""

    def __init__(self, path):
        self.path = Path(path)
        self._fh = open(self.path, "a")

    def write(self, record: dict) -> None:
        self._fh.write(json.dumps(record, sort_keys=True) + "\n")
        self._fh.flush()

    def close(self) -> None:
        self._fh.close()

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()


def read_trace(path) -> list[dict]:
    out = []
    for line in Path(path).read_text().splitlines():
        if line.strip():
            out.append(json.loads(line))
    return out
