"""Pose-conditioned per-vertex offset network.

An 8-affine-layer ReLU MLP maps a positionally encoded canonical surface
point plus locally gated pose features to a 3D offset, squashed through
tanh so no offset component can exceed ``max_amplitude`` meters.  The
final layer starts at zero, so a freshly initialized net is exactly the
identity surface.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .autodiff import ParameterBlock, Tape, value_of

NET_MAGIC = b"BODYNET\0"
NET_VERSION = 1


@dataclass(frozen=True)
class SurfaceNetConfig:
    hidden_width: int = 256
    n_layers: int = 8              # affine layers, ReLU between, tanh out
    frequency_count: int = 10
    max_amplitude: float = 0.25    # meters
    noise_sigma: float = 0.1       # train-time pose feature noise

    @property
    def point_code_width(self) -> int:
        return 3 + 6 * self.frequency_count


def positional_encode(points, frequency_count: int = 10):
    """Concatenate the raw point with sin/cos at octave frequencies.

    (..., 3) -> (..., 3 + 6 * frequency_count); tape-aware.
    """
    parts = [points]
    for f in range(frequency_count):
        s = (2.0 ** f) * np.pi
        parts.append(ad.sin(points * s))
        parts.append(ad.cos(points * s))
    axis = value_of(points).ndim - 1
    return ad.concat(parts, axis=axis)


def conditioning_gates(skin_weights: np.ndarray, parents: np.ndarray) -> np.ndarray:
    """Per-vertex gate for each non-root joint's pose feature: (M, J-1).

    A joint's feature reaches a vertex iff the vertex is skinned to any
    joint within two edges of it in the skeleton tree; the gate is the
    clamped sum of those skinning weights.
    """
    W = np.asarray(skin_weights, np.float64)
    parents = np.asarray(parents, np.int64)
    J = len(parents)
    adj = np.eye(J, dtype=bool)
    for k, p in enumerate(parents):
        if p >= 0:
            adj[k, p] = adj[p, k] = True
    ring2 = adj @ adj   # within graph distance 2 (bool matmul)
    gates = W @ ring2[:, 1:].astype(np.float64)
    return np.clip(gates, 0.0, 1.0)


def local_condition(gates: np.ndarray, features):
    """Gate pose features per vertex: (M, J-1) x (J-1, 9) -> (M, 9(J-1))."""
    M, J1 = gates.shape
    g = gates[:, :, None]                          # (M, J-1, 1)
    f = ad.reshape(features, (1, J1, 9))
    return ad.reshape(g * f, (M, 9 * J1))


def augment_feature_noise(features, sigma: float, rng: np.random.Generator):
    """Additive i.i.d. Gaussian noise on every pose feature entry."""
    if sigma == 0.0:
        return features
    noise = rng.normal(0.0, sigma, size=value_of(features).shape)
    return features + noise


class SurfaceNet:
    """MLP weights stored in one flat parameter block (optimizer-friendly)."""

    def __init__(self, joint_feature_count: int, config: SurfaceNetConfig,
                 block: ParameterBlock):
        self.config = config
        self.joint_feature_count = joint_feature_count
        self.block = block
        self.layer_shapes = self._shapes(joint_feature_count, config)
        if block.size != sum(r * c + c for r, c in self.layer_shapes):
            raise ValueError("weight block size does not match architecture")
        offs, off = [], 0
        for r, c in self.layer_shapes:
            offs.append(off)
            off += r * c + c
        self._offsets = offs

    @staticmethod
    def _shapes(K: int, config: SurfaceNetConfig):
        in_w = config.point_code_width + 9 * K
        shapes = [(in_w, config.hidden_width)]
        for _ in range(config.n_layers - 2):
            shapes.append((config.hidden_width, config.hidden_width))
        shapes.append((config.hidden_width, 3))
        return shapes

    @property
    def input_width(self) -> int:
        return self.layer_shapes[0][0]

    @classmethod
    def initialize(cls, joint_feature_count: int, config: SurfaceNetConfig,
                   rng: np.random.Generator) -> "SurfaceNet":
        """Fan-in uniform inner layers; final layer exactly zero."""
        shapes = cls._shapes(joint_feature_count, config)
        chunks = []
        for i, (r, c) in enumerate(shapes):
            if i == len(shapes) - 1:
                chunks.append(np.zeros(r * c + c))
            else:
                k = 1.0 / np.sqrt(r)
                chunks.append(rng.uniform(-k, k, size=r * c + c))
        block = ParameterBlock("surface_net", np.concatenate(chunks),
                               role="net-weights")
        return cls(joint_feature_count, config, block)

    def layer(self, tape: Tape | None, i: int):
        """(W, b) for layer ``i``; tensors when taped, views otherwise."""
        r, c = self.layer_shapes[i]
        off = self._offsets[i]
        if tape is None:
            flat = self.block.values
            return flat[off:off + r * c].reshape(r, c), flat[off + r * c:off + r * c + c]
        W = tape.param_slice(self.block, off, (r, c))
        b = tape.param_slice(self.block, off + r * c, (c,))
        return W, b

    def offsets(self, encoded_points, gated_features, tape: Tape | None = None):
        """Canonical-space offsets (M, 3); tape-aware in all inputs."""
        h = ad.concat([encoded_points, gated_features], axis=1)
        L = len(self.layer_shapes)
        for i in range(L):
            W, b = self.layer(tape, i)
            h = ad.matmul(h, W) + b
            if i < L - 1:
                h = ad.relu(h)
        return ad.tanh(h) * self.config.max_amplitude

    # -- serialization ------------------------------------------------------

    def save(self, path: str | Path) -> None:
        cfg = self.config
        header = struct.pack(
            "<8sIIIIIdd", NET_MAGIC, NET_VERSION, self.joint_feature_count,
            cfg.frequency_count, cfg.hidden_width, cfg.n_layers,
            cfg.max_amplitude, cfg.noise_sigma)
        data = self.block.values.astype("<f8").tobytes()
        Path(path).write_bytes(header + data)

    @classmethod
    def load(cls, path: str | Path) -> "SurfaceNet":
        blob = Path(path).read_bytes()
        head_size = struct.calcsize("<8sIIIIIdd")
        if len(blob) < head_size:
            raise ValueError("net checkpoint truncated")
        magic, version, K, freq, width, layers, amp, sigma = struct.unpack(
            "<8sIIIIIdd", blob[:head_size])
        if magic != NET_MAGIC:
            raise ValueError("not a surface net checkpoint (bad magic)")
        if version > NET_VERSION:
            raise ValueError("net checkpoint version is newer than this reader")
        config = SurfaceNetConfig(hidden_width=width, n_layers=layers,
                                  frequency_count=freq, max_amplitude=amp,
                                  noise_sigma=sigma)
        shapes = cls._shapes(K, config)
        n = sum(r * c + c for r, c in shapes)
        values = np.frombuffer(blob, dtype="<f8", offset=head_size)
        if values.size != n:
            raise ValueError(
                f"net checkpoint payload has {values.size} values, expected {n}")
        block = ParameterBlock("surface_net", values.astype(np.float64),
                               role="net-weights")
        return cls(K, config, block)
