"""Conditional noise predictor eps(g_t, O, t) built from equivariant transformer blocks.

Object points become one point-trivector token each; the grasp becomes a
single token carrying its two rotation columns (ideal points), its base
point, an optional pseudoscalar symmetry-breaking channel, and invariant
scalars (joint angles plus a sinusoidal step embedding).  Object tokens run
through self-attention blocks with one FPS/kNN down-sampling stage; the grasp
token cross-attends to the object tokens after every block.

Positions enter the network divided by ``pos_scale`` so that features are
O(1); translation of the grasp lives in the diffusion vector as an offset
from the object centroid in the same units.
"""

from __future__ import annotations

import json
import struct
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from . import algebra as ga
from .autodiff import MVTensor, ShapeError, Tensor, record
from .layers import (
    EquiLinear,
    Params,
    downsample,
    equi_attention,
    equi_layernorm,
    gated_gelu,
    geometric_bilinear,
)

CHECKPOINT_MAGIC = b"EQGCKPT1"
CHECKPOINT_VERSION = 1


@dataclass(frozen=True)
class DenoiserConfig:
    joint_dim: int = 4
    blocks: int = 3
    channels: int = 8
    scalars: int = 16
    heads: int = 2
    time_dim: int = 16
    downsample_m: int = 64
    downsample_k: int = 8
    downsample_after: int = 0  # block index after which object tokens are down-sampled
    symmetry_breaking: bool = True
    pos_scale: float = 0.05
    T: int = 100
    # grid for the invariant joint outputs; snapping makes them bit-stable
    # under versor actions on the inputs (0 disables)
    invariant_grid: float = 2.0**-24

    def __post_init__(self):
        if self.channels < 1 or self.blocks < 1:
            raise ga.InvalidInputError("channels and blocks must be >= 1")
        if self.channels % self.heads or self.scalars % self.heads:
            raise ga.InvalidInputError("channels and scalars must be divisible by heads")
        if self.downsample_k < 1 or self.downsample_m < 1:
            raise ga.InvalidInputError("downsample m and k must be >= 1")
        if self.time_dim % 2:
            raise ga.InvalidInputError("time_dim must be even")

    @property
    def grasp_dim(self) -> int:
        return 9 + self.joint_dim


def time_embedding(t, dim: int, T: int) -> np.ndarray:
    """Sinusoidal features of the diffusion step, shape [..., dim]."""
    t = np.asarray(t, dtype=np.float64)
    half = dim // 2
    freqs = np.exp(-np.log(1000.0) * np.arange(half) / half)
    ang = (t[..., None] / T) * 100.0 * freqs
    return np.concatenate([np.sin(ang), np.cos(ang)], axis=-1)


class _Block:
    """Pre-norm transformer block: attention then geometric-bilinear MLP, both residual."""

    def __init__(self, params: Params, name: str, cfg: DenoiserConfig, rng: np.random.Generator):
        c, s = cfg.channels, cfg.scalars
        self.heads = cfg.heads
        self.q = EquiLinear(params, f"{name}.q", c, c, s, 0, rng)
        self.k = EquiLinear(params, f"{name}.k", c, c, s, 0, rng)
        self.v = EquiLinear(params, f"{name}.v", c, c, s, s, rng)
        self.o = EquiLinear(params, f"{name}.o", c, c, s, s, rng, init_scale=0.5)
        self.left = EquiLinear(params, f"{name}.left", c, c, s, 0, rng)
        self.right = EquiLinear(params, f"{name}.right", c, c, s, 0, rng)
        self.zref = EquiLinear(params, f"{name}.zref", 1, 1, 0, 0, rng)
        self.mlp_in = EquiLinear(params, f"{name}.mlp_in", 2 * c, c, s, s, rng)
        self.mlp_out = EquiLinear(params, f"{name}.mlp_out", c, c, s, s, rng, init_scale=0.5)

    def __call__(self, x: MVTensor, context: MVTensor | None = None) -> MVTensor:
        h = equi_layernorm(x)
        kv = h if context is None else equi_layernorm(context)
        q = self.q(h)
        k = self.k(kv)
        v = self.v(kv)
        att = equi_attention(q, k, v, self.heads)
        x = x + self.o(att)
        h = equi_layernorm(x)
        # reference multivector from the channel mean of the block input
        zin = record("mean", x.mv, axis=-2, keepdims=True)
        z = self.zref(MVTensor(zin))
        bil = geometric_bilinear(self.left(h), self.right(h), z)
        y = self.mlp_in(MVTensor(bil, h.s))
        y = gated_gelu(y)
        return x + self.mlp_out(y)


@dataclass
class ObjectEncoding:
    """Per-block object token features (reusable across diffusion steps)."""

    stages: list[MVTensor]
    positions: np.ndarray


class Denoiser:
    def __init__(self, cfg: DenoiserConfig, seed: int = 0):
        self.cfg = cfg
        rng = np.random.default_rng(seed)
        self.params = Params()
        c, s, k = cfg.channels, cfg.scalars, cfg.joint_dim
        self.obj_in = EquiLinear(self.params, "obj_in", 1, c, 0, s, rng)
        self.grasp_in = EquiLinear(self.params, "grasp_in", 4, c, k + cfg.time_dim, s, rng)
        self.obj_blocks = [_Block(self.params, f"obj{i}", cfg, rng) for i in range(cfg.blocks)]
        self.cross_blocks = [_Block(self.params, f"cross{i}", cfg, rng) for i in range(cfg.blocks)]
        self.out = EquiLinear(self.params, "out", c, 3, s, k, rng)

    # -- object branch ---------------------------------------------------------

    def encode_object(self, points, mv=None) -> ObjectEncoding:
        """points: [B, N, 3] (meters).

        ``mv`` optionally overrides the point embeddings with arbitrary
        (e.g. already sandwiched) trivectors of shape [B, N, 16].
        """
        points = np.asarray(points, dtype=np.float64)
        if points.ndim == 2:
            points = points[None]
        if points.shape[-2] < 1:
            raise ga.InvalidInputError("point cloud is empty")
        pos = points / self.cfg.pos_scale
        if mv is None:
            mv = ga.embed_point(pos)
        x = MVTensor(Tensor(np.asarray(mv, dtype=np.float64).reshape(pos.shape[:-1] + (1, ga.DIM))))
        x = self.obj_in(x)
        stages = []
        for i, blk in enumerate(self.obj_blocks):
            x = blk(x)
            if i == self.cfg.downsample_after and self.cfg.downsample_m < x.tokens:
                x, pos = downsample(x, pos, self.cfg.downsample_m, min(self.cfg.downsample_k, x.tokens))
            stages.append(x)
        return ObjectEncoding(stages, pos)

    # -- grasp branch ----------------------------------------------------------

    def embed_grasp(self, g, centroid) -> np.ndarray:
        """Multivector channels [..., 4, 16] of the grasp token."""
        g = np.asarray(g, dtype=np.float64)
        if g.shape[-1] != self.cfg.grasp_dim:
            raise ShapeError(f"grasp vectors must have {self.cfg.grasp_dim} entries, got {g.shape[-1]}")
        point = np.asarray(centroid, dtype=np.float64) / self.cfg.pos_scale + g[..., 6:9]
        mv = np.zeros(g.shape[:-1] + (4, ga.DIM))
        mv[..., 0, :] = ga.embed_direction(g[..., 0:3])
        mv[..., 1, :] = ga.embed_direction(g[..., 3:6])
        mv[..., 2, :] = ga.embed_point(point)
        mv[..., 3, 15] = 1.0 if self.cfg.symmetry_breaking else 0.0
        return mv

    def grasp_tokens(self, g, centroid, t, mv=None) -> MVTensor:
        g = np.asarray(g, dtype=np.float64)
        cfg = self.cfg
        if g.shape[-1] != cfg.grasp_dim:
            raise ShapeError(f"grasp vectors must have {cfg.grasp_dim} entries, got {g.shape[-1]}")
        t = np.broadcast_to(np.asarray(t), g.shape[:-1])
        if np.any(t < 1) or np.any(t > cfg.T):
            raise ga.InvalidInputError(f"diffusion step must lie in [1, {cfg.T}]")
        if mv is None:
            mv = self.embed_grasp(g, centroid)
        s = np.concatenate([g[..., 9:], time_embedding(t, cfg.time_dim, cfg.T)], axis=-1)
        return MVTensor(Tensor(mv[..., None, :, :]), Tensor(s[..., None, :]))

    def predict(self, g, centroid, t, enc: ObjectEncoding, index=None, grasp_mv=None) -> Tensor:
        """Noise prediction [B, 9+k] for grasp vectors ``g`` [B, 9+k].

        ``index`` optionally maps each grasp row to a row of the (smaller)
        object encoding batch; ``grasp_mv`` overrides the grasp embedding.
        """
        g = np.asarray(g, dtype=np.float64)
        if grasp_mv is None:
            grasp_mv = self.embed_grasp(g, centroid)
        grasp_mv = np.asarray(grasp_mv, dtype=np.float64)
        x = self.grasp_in(self.grasp_tokens(g, centroid, t, grasp_mv))
        for blk, ctx in zip(self.cross_blocks, enc.stages):
            if index is not None:
                ctx = MVTensor(
                    record("take_tokens", ctx.mv, index=np.asarray(index), token_axis=0),
                    record("take_tokens", ctx.s, index=np.asarray(index), token_axis=0),
                )
            x = blk(x, ctx)
        y = self.out(equi_layernorm(x))
        return self._readout(y, grasp_mv[..., 2, :])

    def _readout(self, y: MVTensor, point_mv: np.ndarray) -> Tensor:
        # the grasp base point, scaled to unit weight whatever its sign
        ref = Tensor((point_mv / point_mv[..., 14:15])[..., None, :])  # [B, 1, 16]
        mv = record("slice", y.mv, index=(Ellipsis, 0, slice(None), slice(None)))  # [B, 3, 16]
        weight = record("slice", mv, index=(Ellipsis, slice(14, 15)))  # e123 coefficient
        ideal = mv - weight * ref
        sel = np.zeros((ga.DIM, 3))
        sel[[13, 12, 11], [0, 1, 2]] = [-1.0, 1.0, -1.0]
        dirs = record("dense", ideal, Tensor(sel))  # [B, 3, 3]
        dirs = record("reshape", dirs, shape=dirs.shape[:-2] + (9,))
        joints = record("slice", y.s, index=(Ellipsis, 0, slice(None)))
        joints = record("quantize", joints, grid=self.cfg.invariant_grid)
        return record("concat", dirs, joints, axis=-1)

    def __call__(self, g, points, t) -> np.ndarray:
        """Convenience forward for a single cloud shared by all grasps in ``g``."""
        points = np.asarray(points, dtype=np.float64)
        if points.ndim != 2 or points.shape[0] == 0:
            raise ga.InvalidInputError("point cloud must be a non-empty [N, 3] array")
        g = np.atleast_2d(np.asarray(g, dtype=np.float64))
        enc = self.encode_object(points[None])
        idx = np.zeros(g.shape[0], dtype=np.int64)
        return self.predict(g, points.mean(axis=0), t, enc, index=idx).value

    # -- checkpoints ---------------------------------------------------------------

    def save(self, path) -> None:
        header = {
            "version": CHECKPOINT_VERSION,
            "config": asdict(self.cfg),
            "params": [[name, list(t.value.shape)] for name, t in self.params.items()],
        }
        blob = json.dumps(header, sort_keys=True).encode()
        payload = self.params.flat().astype("<f8").tobytes()
        with open(path, "wb") as fh:
            fh.write(CHECKPOINT_MAGIC)
            fh.write(struct.pack("<Q", len(blob)))
            fh.write(blob)
            fh.write(payload)

    @staticmethod
    def read_header(path) -> dict:
        with open(path, "rb") as fh:
            if fh.read(8) != CHECKPOINT_MAGIC:
                raise ValueError(f"{path}: not a checkpoint file")
            (n,) = struct.unpack("<Q", fh.read(8))
            return json.loads(fh.read(n))

    @classmethod
    def load(cls, path, expect: DenoiserConfig | None = None) -> "Denoiser":
        header = cls.read_header(path)
        if header["version"] != CHECKPOINT_VERSION:
            raise ValueError(f"unsupported checkpoint version {header['version']}")
        cfg = DenoiserConfig(**header["config"])
        if expect is not None and expect != cfg:
            diff = sorted(k for k, v in asdict(expect).items() if header["config"].get(k) != v)
            raise ConfigMismatchError(f"checkpoint config differs in: {', '.join(diff)}", diff)
        net = cls(cfg)
        manifest = [(n, tuple(s)) for n, s in header["params"]]
        mine = [(n, t.value.shape) for n, t in net.params.items()]
        if manifest != mine:
            raise ValueError("checkpoint parameter manifest does not match the architecture")
        raw = Path(path).read_bytes()
        offset = 16 + len(json.dumps(header, sort_keys=True).encode())
        vec = np.frombuffer(raw[offset:], dtype="<f8").astype(np.float64)
        net.params.load_flat(vec)
        return net


class ConfigMismatchError(ValueError):
    def __init__(self, message: str, keys: list[str]):
        super().__init__(message)
        self.keys = keys


def act_on_grasp(u: ga.Versor, g: np.ndarray, centroid, pos_scale: float) -> tuple[np.ndarray, np.ndarray]:
    """Transform diffusion-space grasp vectors (and the object centroid) by a versor.

    Rotation columns and the centroid-relative translation act as directions;
    joint coordinates are untouched.  Returns ``(g', centroid')``.
    """
    g = np.array(g, dtype=np.float64)
    out = g.copy()
    for sl in (slice(0, 3), slice(3, 6), slice(6, 9)):
        out[..., sl] = ga.extract_direction(ga.sandwich_array(u.coeffs, ga.embed_direction(g[..., sl]), u.odd))
    c = ga.extract_point(ga.sandwich_array(u.coeffs, ga.embed_point(np.asarray(centroid, dtype=np.float64)), u.odd))
    return out, c


def act_on_noise(u: ga.Versor, eps: np.ndarray) -> np.ndarray:
    out, _ = act_on_grasp(u, eps, np.zeros(3), 1.0)
    return out
