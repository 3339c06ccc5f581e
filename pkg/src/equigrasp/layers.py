"""Equivariant layer families operating on :class:`MVTensor` values.

Every function here commutes with the twisted sandwich action of any unit
versor on the multivector part and leaves the scalar sidecar untouched.
"""

from __future__ import annotations

from collections import OrderedDict

import numpy as np

from . import algebra as ga
from .autodiff import MVTensor, ShapeError, Tensor, record

_E0123 = 15
_SCALAR_ONEHOT = np.eye(ga.DIM)[0]
_NON_E0_MASK = ga.NON_E0.astype(float)


class Params(OrderedDict):
    """Ordered name -> Tensor map; order defines the checkpoint manifest."""

    def add(self, name: str, value: np.ndarray) -> Tensor:
        if name in self:
            raise KeyError(f"duplicate parameter {name!r}")
        t = Tensor(np.asarray(value, dtype=np.float64), name=name)
        self[name] = t
        return t

    def count(self) -> int:
        return int(sum(t.value.size for t in self.values()))

    def flat(self) -> np.ndarray:
        return np.concatenate([t.value.reshape(-1) for t in self.values()]) if self else np.zeros(0)

    def load_flat(self, vec: np.ndarray) -> None:
        i = 0
        for t in self.values():
            n = t.value.size
            t.value = np.asarray(vec[i:i + n], dtype=np.float64).reshape(t.value.shape).copy()
            i += n
        if i != vec.size:
            raise ShapeError(f"parameter vector has {vec.size} entries, expected {i}")


def scalars_to_mv(s: Tensor) -> Tensor:
    """[..., n, c] scalars -> [..., n, c, 16] multivectors with only the scalar blade."""
    return record("reshape", s, shape=s.shape + (1,)) * Tensor(_SCALAR_ONEHOT)


def mv_scalar_part(x: Tensor) -> Tensor:
    return record("slice", x, index=(Ellipsis, 0))


def equi_linear(weights: Tensor, x: MVTensor | Tensor) -> Tensor:
    """Grade-wise linear map: sum_k w_k <x>_k + sum_k v_k e0 <x>_k, mixed over channels.

    ``weights`` is [out, in, 9] holding w_0..w_4 then v_0..v_3 per channel pair.
    """
    mv = x.mv if isinstance(x, MVTensor) else x
    if mv.shape[-2] != weights.shape[1]:
        raise ShapeError(f"equi_linear: {mv.shape[-2]} input channels, weights expect {weights.shape[1]}")
    return record("equi_linear", mv, weights)


class EquiLinear:
    """Equivariant linear layer with a scalar sidecar.

    Scalars mix with each other and with the multivector scalar components;
    they feed back into the scalar blade of the outputs.  Biases only touch
    invariant slots.
    """

    def __init__(self, params: Params, name: str, in_mv: int, out_mv: int,
                 in_s: int = 0, out_s: int = 0, rng: np.random.Generator | None = None,
                 init_scale: float = 1.0):
        rng = rng or np.random.default_rng(0)
        self.in_mv, self.out_mv, self.in_s, self.out_s = in_mv, out_mv, in_s, out_s
        std = init_scale / np.sqrt(2.0 * in_mv)
        self.w = params.add(f"{name}.w", rng.normal(0.0, std, size=(out_mv, in_mv, 9)))
        self.b = params.add(f"{name}.b", np.zeros(out_mv))
        self.s_to_mv = None
        if in_s:
            self.s_to_mv = params.add(
                f"{name}.s_to_mv", rng.normal(0.0, init_scale / np.sqrt(in_s + in_mv), size=(in_s, out_mv))
            )
        self.to_s = self.b_s = None
        if out_s:
            fan = in_s + in_mv
            self.to_s = params.add(
                f"{name}.to_s", rng.normal(0.0, init_scale / np.sqrt(fan), size=(in_s + in_mv, out_s))
            )
            self.b_s = params.add(f"{name}.b_s", np.zeros(out_s))

    def __call__(self, x: MVTensor) -> MVTensor:
        if x.channels != self.in_mv or x.n_scalars != self.in_s:
            raise ShapeError(
                f"EquiLinear expects ({self.in_mv} mv, {self.in_s} scalars), "
                f"got ({x.channels}, {x.n_scalars})"
            )
        mv_scalars = mv_scalar_part(x.mv)  # [..., n, in_mv]
        sc = mv_scalars if x.s is None else record("concat", x.s, mv_scalars, axis=-1)
        if self.s_to_mv is not None:
            mv_bias = record("dense", x.s, self.s_to_mv, self.b)
        else:
            mv_bias = record("reshape", self.b, shape=(1, self.out_mv))
        out = equi_linear(self.w, x) + scalars_to_mv(mv_bias)
        s_out = record("dense", sc, self.to_s, self.b_s) if self.to_s is not None else None
        return MVTensor(out, s_out)


def geometric_bilinear(x: MVTensor, y: MVTensor, z_ref: MVTensor | Tensor) -> Tensor:
    """Channel-wise ``Concat(xy, z_0123 * join(x, y))``; output has twice the channels."""
    xm = x.mv if isinstance(x, MVTensor) else x
    ym = y.mv if isinstance(y, MVTensor) else y
    zm = z_ref.mv if isinstance(z_ref, MVTensor) else z_ref
    if xm.shape != ym.shape:
        raise ShapeError(f"bilinear operands differ in shape: {xm.shape} vs {ym.shape}")
    gp = record("geometric_product", xm, ym)
    pseudo = record("slice", zm, index=(Ellipsis, slice(_E0123, _E0123 + 1)))
    jn = record("join", xm, ym) * pseudo
    return record("concat", gp, jn, axis=-2)


def _split_heads(t: Tensor, heads: int) -> Tensor:
    """[..., n, C*] -> [..., h, n, C*/h]."""
    *lead, n, width = t.shape
    if width % heads:
        raise ShapeError(f"feature width {width} not divisible by {heads} heads")
    r = record("reshape", t, shape=tuple(lead) + (n, heads, width // heads))
    nd = len(r.shape)
    axes = tuple(range(nd - 3)) + (nd - 2, nd - 3, nd - 1)
    return record("transpose", r, axes=axes)


def _merge_heads(t: Tensor) -> Tensor:
    """[..., h, n, f] -> [..., n, h*f]."""
    nd = len(t.shape)
    axes = tuple(range(nd - 3)) + (nd - 2, nd - 3, nd - 1)
    r = record("transpose", t, axes=axes)
    *lead, n, h, f = r.shape
    return record("reshape", r, shape=tuple(lead) + (n, h * f))


def equi_attention(q: MVTensor, k: MVTensor, v: MVTensor, heads: int = 1) -> MVTensor:
    """Multi-head attention with logits sum_c <q_c, k_c> / sqrt(8 n_c) per head.

    Channels are split evenly over heads; scalar sidecar values (if present
    on ``v``) are split the same way and mixed with the same weights.
    """
    if k.tokens != v.tokens:
        raise ShapeError(f"keys have {k.tokens} tokens but values have {v.tokens}")
    if q.channels != k.channels:
        raise ShapeError("queries and keys must have the same channel count")
    n_c = q.channels
    if n_c % heads or v.channels % heads:
        raise ShapeError(f"channel counts must be divisible by {heads} heads")
    per_head = n_c // heads
    mask = Tensor(_NON_E0_MASK)

    def flat(t: Tensor) -> Tensor:
        return record("reshape", t, shape=t.shape[:-2] + (t.shape[-2] * ga.DIM,))

    qf = _split_heads(flat(q.mv * mask), heads)
    kf = _split_heads(flat(k.mv), heads)
    v_mv = _split_heads(flat(v.mv), heads)
    v_width = v.channels // heads * ga.DIM
    vf = v_mv
    if v.s is not None:
        if v.n_scalars % heads:
            raise ShapeError(f"scalar channels must be divisible by {heads} heads")
        vf = record("concat", v_mv, _split_heads(v.s, heads), axis=-1)
    out = record("attention", qf, kf, vf, scale=1.0 / np.sqrt(8.0 * per_head))
    mv_part = record("slice", out, index=(Ellipsis, slice(0, v_width)))
    mv_out = _merge_heads(mv_part)
    mv_out = record("reshape", mv_out, shape=mv_out.shape[:-1] + (v.channels, ga.DIM))
    s_out = None
    if v.s is not None:
        s_out = _merge_heads(record("slice", out, index=(Ellipsis, slice(v_width, None))))
    return MVTensor(mv_out, s_out)


def attention_logits(q: np.ndarray, k: np.ndarray, heads: int = 1) -> np.ndarray:
    """Raw logits [..., h, n_q, n_k] for inspection and invariance tests."""
    n_c = q.shape[-2]
    per = n_c // heads
    qi = q[..., ga.NON_E0].reshape(q.shape[:-2] + (heads, per * 8))
    ki = k[..., ga.NON_E0].reshape(k.shape[:-2] + (heads, per * 8))
    return np.einsum("...ihd,...jhd->...hij", qi, ki) / np.sqrt(8.0 * per)


def gated_gelu(x: MVTensor) -> MVTensor:
    s = record("gelu", x.s) if x.s is not None else None
    return MVTensor(record("gated_gelu", x.mv), s)


def equi_layernorm(x: MVTensor, eps: float = 1e-8) -> MVTensor:
    s = record("layernorm", x.s, eps=eps) if x.s is not None and x.n_scalars > 1 else x.s
    return MVTensor(record("equi_layernorm", x.mv, eps=eps), s)


# --- down-sampling -------------------------------------------------------------


def farthest_point_sampling(points: np.ndarray, m: int) -> np.ndarray:
    """Greedy FPS on [..., n, 3]; seeded at the point farthest from the centroid.

    Ties resolve to the lowest index. Returns indices [..., m].
    """
    points = np.asarray(points, dtype=np.float64)
    n = points.shape[-2]
    if not 1 <= m <= n:
        raise ShapeError(f"FPS target {m} out of range for {n} points")
    lead = points.shape[:-2]
    pts = points.reshape((-1, n, 3))
    out = np.empty((pts.shape[0], m), dtype=np.int64)
    for b, cloud in enumerate(pts):
        centroid = cloud.mean(axis=0)
        first = int(np.argmax(np.sum((cloud - centroid) ** 2, axis=1)))
        dist = np.sum((cloud - cloud[first]) ** 2, axis=1)
        out[b, 0] = first
        for i in range(1, m):
            nxt = int(np.argmax(dist))
            out[b, i] = nxt
            dist = np.minimum(dist, np.sum((cloud - cloud[nxt]) ** 2, axis=1))
    return out.reshape(lead + (m,))


def knn_indices(points: np.ndarray, centers: np.ndarray, k: int) -> np.ndarray:
    """Indices [..., m, k] of the k nearest ``points`` to each center (stable order)."""
    n = points.shape[-2]
    if not 1 <= k <= n:
        raise ShapeError(f"k={k} out of range for {n} points")
    d2 = np.sum((centers[..., :, None, :] - points[..., None, :, :]) ** 2, axis=-1)
    return np.argsort(d2, axis=-1, kind="stable")[..., :k]


POOL_TIE_RTOL = 1e-9


def downsample(x: MVTensor, positions: np.ndarray, m: int, k: int) -> tuple[MVTensor, np.ndarray]:
    """FPS to ``m`` tokens, then per-channel max-pool (by scalar component) over k neighbors.

    Returns the pooled tensor and the selected positions. Selection indices are
    constants of the backward pass.
    """
    n = x.tokens
    if not 1 <= m <= n:
        raise ShapeError(f"downsample target m={m} out of range for {n} tokens")
    if not 1 <= k <= n:
        raise ShapeError(f"downsample k={k} out of range for {n} tokens")
    positions = np.asarray(positions, dtype=np.float64)
    sel = farthest_point_sampling(positions, m)
    centers = np.take_along_axis(positions, sel[..., None], axis=-2)
    nbr = knn_indices(positions, centers, k)  # [..., m, k]

    def pick(values: np.ndarray) -> np.ndarray:
        # values [..., n, c] -> winning source token per (center, channel) [..., m, c]
        cand = np.take_along_axis(values[..., None, :, :], nbr[..., :, :, None], axis=-2)  # [..., m, k, c]
        # near-ties (within POOL_TIE_RTOL) go to the nearest neighbor, so roundoff cannot flip the winner
        top = np.max(cand, axis=-2, keepdims=True)
        tol = POOL_TIE_RTOL * np.maximum(np.max(np.abs(cand), axis=-2, keepdims=True), 1e-300)
        arg = np.argmax(cand >= top - tol, axis=-2)  # [..., m, c], first = nearest
        return np.take_along_axis(nbr, arg, axis=-1)

    mv_idx = pick(x.mv.value[..., 0])
    mv = record("take_tokens", x.mv, index=mv_idx, token_axis=-3)
    s = None
    if x.s is not None:
        s = record("take_tokens", x.s, index=pick(x.s.value), token_axis=-2)
    return MVTensor(mv, s), centers

