"""Reverse-mode differentiation over a dynamically recorded tape.

Values are numpy arrays wrapped in :class:`Tensor`.  While a :class:`Tape` is
active every registered primitive appends one record; :func:`backward` walks
the records in reverse and accumulates gradients into fresh buffers, so the
same tape can be replayed any number of times with identical results.

Selection steps (farthest point sampling, kNN membership, max-pool argmax) are
computed outside the tape and enter primitives as constant integer indices.
"""

from __future__ import annotations

import threading
from dataclasses import dataclass, field
from typing import Callable

import numpy as np
from scipy.special import erf

from . import algebra as ga

__all__ = [
    "Tensor",
    "Tape",
    "MVTensor",
    "Primitive",
    "PRIMITIVES",
    "record",
    "backward",
    "grad_check",
    "ShapeError",
]


class ShapeError(ga.InvalidInputError):
    pass


class Tensor:
    """Array leaf or intermediate value participating in differentiation."""

    __slots__ = ("value", "grad", "name", "__weakref__")

    def __init__(self, value, name: str | None = None):
        self.value = np.asarray(value, dtype=np.float64)
        self.grad: np.ndarray | None = None
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.value.shape

    def __repr__(self) -> str:
        label = f" {self.name!r}" if self.name else ""
        return f"Tensor{label}(shape={self.value.shape})"

    # arithmetic sugar routes through the registered primitives
    def __add__(self, other):
        return record("add", self, _as_tensor(other))

    __radd__ = __add__

    def __sub__(self, other):
        return record("sub", self, _as_tensor(other))

    def __rsub__(self, other):
        return record("sub", _as_tensor(other), self)

    def __mul__(self, other):
        if np.isscalar(other):
            return record("scale", self, factor=float(other))
        return record("mul", self, _as_tensor(other))

    __rmul__ = __mul__

    def __neg__(self):
        return record("scale", self, factor=-1.0)


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


@dataclass
class _Record:
    prim: "Primitive"
    inputs: tuple[Tensor, ...]
    output: Tensor
    ctx: dict


@dataclass
class Tape:
    """Ordered list of executed primitive records."""

    records: list[_Record] = field(default_factory=list)

    def __enter__(self) -> "Tape":
        _STATE.stack.append(self)
        return self

    def __exit__(self, *exc) -> None:
        _STATE.stack.pop()

    def __len__(self) -> int:
        return len(self.records)


class _State(threading.local):
    def __init__(self):
        self.stack: list[Tape] = []


_STATE = _State()


@dataclass(frozen=True)
class Primitive:
    name: str
    forward: Callable  # (ctx, *arrays, **attrs) -> array
    backward: Callable  # (ctx, grad_out) -> tuple of input grads (None = no gradient)


PRIMITIVES: dict[str, Primitive] = {}


def primitive(name: str):
    def register(cls):
        PRIMITIVES[name] = Primitive(name, cls.forward, cls.backward)
        return cls

    return register


def record(op: str, *inputs: Tensor, **attrs) -> Tensor:
    """Run primitive ``op`` on ``inputs`` and append it to the active tape, if any."""
    try:
        prim = PRIMITIVES[op]
    except KeyError:
        raise ga.InvalidInputError(f"unknown primitive {op!r}") from None
    inputs = tuple(_as_tensor(x) for x in inputs)
    ctx: dict = dict(attrs)
    out = Tensor(prim.forward(ctx, *(x.value for x in inputs), **attrs))
    if _STATE.stack:
        _STATE.stack[-1].records.append(_Record(prim, inputs, out, ctx))
    return out


def backward(tape: Tape, output: Tensor, seed=None) -> dict[int, np.ndarray]:
    """Propagate ``seed`` (default ones) from ``output`` back through ``tape``.

    Returns a map ``id(tensor) -> gradient`` covering every tensor reached,
    and also stores gradients of leaves (tensors not produced on this tape)
    in their ``.grad`` attribute.
    """
    if not tape.records:
        raise ga.InvalidInputError("backward called on an empty tape")
    seed = np.ones_like(output.value) if seed is None else np.asarray(seed, dtype=np.float64)
    if seed.shape != output.value.shape:
        raise ShapeError(f"seed shape {seed.shape} does not match output shape {output.value.shape}")
    grads: dict[int, np.ndarray] = {id(output): seed.copy()}
    produced = set()
    for rec in reversed(tape.records):
        produced.add(id(rec.output))
        g = grads.get(id(rec.output))
        if g is None:
            continue
        in_grads = rec.prim.backward(rec.ctx, g)
        for x, gx in zip(rec.inputs, in_grads):
            if gx is None:
                continue
            if gx.shape != x.value.shape:
                gx = _unbroadcast(gx, x.value.shape)
            prev = grads.get(id(x))
            grads[id(x)] = gx if prev is None else prev + gx
    leaves = {id(x): x for rec in tape.records for x in rec.inputs if id(x) not in produced}
    for key, leaf in leaves.items():
        if key in grads:
            leaf.grad = grads[key]
    return grads


def grad_check(f: Callable[[np.ndarray], float], x, grad: np.ndarray | None = None,
               step: float = 1e-5, floor: float = 1e-7) -> float:
    """Worst per-coordinate relative error between an analytic gradient and central differences.

    ``f`` maps an array to a scalar. When ``grad`` is omitted it is obtained by
    recording ``f`` on a tape (``f`` must then accept a :class:`Tensor`).
    """
    if step <= 0:
        raise ga.InvalidInputError("step must be positive")
    x = np.array(x, dtype=np.float64)
    if grad is None:
        leaf = Tensor(x.copy())
        with Tape() as tape:
            out = f(leaf)
        if not np.all(np.isfinite(out.value)):
            raise FloatingPointError("f(x) is not finite")
        backward(tape, out)
        grad = leaf.grad if leaf.grad is not None else np.zeros_like(x)

        def scalar(v):
            return float(f(Tensor(v)).value)
    else:
        def scalar(v):
            return float(f(v))
    f0 = scalar(x)
    if not np.isfinite(f0):
        raise FloatingPointError("f(x) is not finite")
    flat = x.reshape(-1)
    num = np.empty(flat.size)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + step
        fp = scalar(x)
        flat[i] = orig - step
        fm = scalar(x)
        flat[i] = orig
        num[i] = (fp - fm) / (2.0 * step)
    ana = np.asarray(grad, dtype=np.float64).reshape(-1)
    denom = np.maximum(np.maximum(np.abs(ana), np.abs(num)), floor)
    return float(np.max(np.abs(ana - num) / denom)) if flat.size else 0.0


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for i, n in enumerate(shape):
        if n == 1 and g.shape[i] != 1:
            g = g.sum(axis=i, keepdims=True)
    return g


# --- elementwise and structural primitives ----------------------------------


def _check_broadcast(*arrays):
    try:
        np.broadcast_shapes(*(a.shape for a in arrays))
    except ValueError as exc:
        raise ShapeError(str(exc)) from None


@primitive("add")
class _Add:
    @staticmethod
    def forward(ctx, a, b):
        _check_broadcast(a, b)
        return a + b

    @staticmethod
    def backward(ctx, g):
        return g, g


@primitive("sub")
class _Sub:
    @staticmethod
    def forward(ctx, a, b):
        _check_broadcast(a, b)
        return a - b

    @staticmethod
    def backward(ctx, g):
        return g, -g


@primitive("mul")
class _Mul:
    @staticmethod
    def forward(ctx, a, b):
        _check_broadcast(a, b)
        ctx["a"], ctx["b"] = a, b
        return a * b

    @staticmethod
    def backward(ctx, g):
        return g * ctx["b"], g * ctx["a"]


@primitive("scale")
class _Scale:
    @staticmethod
    def forward(ctx, a, factor):
        return a * factor

    @staticmethod
    def backward(ctx, g):
        return (g * ctx["factor"],)


@primitive("quantize")
class _Quantize:
    """Round to a fixed grid; the backward pass is straight-through."""

    @staticmethod
    def forward(ctx, a, grid):
        return a if grid == 0 else np.round(a / grid) * grid

    @staticmethod
    def backward(ctx, g):
        return (g,)


@primitive("sum")
class _Sum:
    @staticmethod
    def forward(ctx, a, axis=None, keepdims=False):
        ctx.update(shape=a.shape, axis=axis, keepdims=keepdims)
        return np.sum(a, axis=axis, keepdims=keepdims)

    @staticmethod
    def backward(ctx, g):
        shape, axis = ctx["shape"], ctx["axis"]
        if axis is not None and not ctx["keepdims"]:
            axes = (axis,) if np.isscalar(axis) else tuple(axis)
            axes = tuple(a % len(shape) for a in axes)
            for a in sorted(axes):
                g = np.expand_dims(g, a)
        return (np.broadcast_to(g, shape).copy(),)


@primitive("mean")
class _Mean:
    @staticmethod
    def forward(ctx, a, axis=None, keepdims=False):
        ctx.update(shape=a.shape, axis=axis, keepdims=keepdims)
        out = np.mean(a, axis=axis, keepdims=keepdims)
        ctx["count"] = a.size // max(np.size(out), 1)
        return out

    @staticmethod
    def backward(ctx, g):
        (gs,) = _Sum.backward(ctx, g)
        return (gs / ctx["count"],)


@primitive("reshape")
class _Reshape:
    @staticmethod
    def forward(ctx, a, shape):
        ctx["in_shape"] = a.shape
        return a.reshape(shape)

    @staticmethod
    def backward(ctx, g):
        return (g.reshape(ctx["in_shape"]),)


@primitive("concat")
class _Concat:
    @staticmethod
    def forward(ctx, *arrays, axis):
        ctx["sizes"] = [a.shape[axis] for a in arrays]
        try:
            return np.concatenate(arrays, axis=axis)
        except ValueError as exc:
            raise ShapeError(str(exc)) from None

    @staticmethod
    def backward(ctx, g):
        idx = np.cumsum(ctx["sizes"])[:-1]
        return tuple(np.split(g, idx, axis=ctx["axis"]))


@primitive("slice")
class _Slice:
    """Basic (non-fancy) indexing ``a[index]``."""

    @staticmethod
    def forward(ctx, a, index):
        ctx["shape"] = a.shape
        return a[index].copy()

    @staticmethod
    def backward(ctx, g):
        out = np.zeros(ctx["shape"])
        out[ctx["index"]] = g
        return (out,)


@primitive("transpose")
class _Transpose:
    @staticmethod
    def forward(ctx, a, axes):
        return np.transpose(a, axes)

    @staticmethod
    def backward(ctx, g):
        return (np.transpose(g, np.argsort(ctx["axes"])),)


@primitive("take_tokens")
class _TakeTokens:
    """Gather along the token axis with constant integer indices.

    ``a`` has shape [..., n, *feat]; ``index`` has shape [..., m] (same index
    for every feature) or [..., m, c] (per-channel, ``a`` shaped [..., n, c, *rest]).
    Backward scatters gradients to the source tokens only.
    """

    @staticmethod
    def forward(ctx, a, index, token_axis):
        ax = token_axis % a.ndim
        idx = np.asarray(index)
        ctx["shape"], ctx["ax"] = a.shape, ax
        if idx.min(initial=0) < 0 or idx.max(initial=-1) >= a.shape[ax]:
            raise ShapeError("gather index out of range")
        full = idx.reshape(idx.shape + (1,) * (a.ndim - idx.ndim))
        full = np.broadcast_to(full, a.shape[:ax] + (idx.shape[ax],) + a.shape[ax + 1:])
        ctx["full"] = full
        return np.take_along_axis(a, full, axis=ax)

    @staticmethod
    def backward(ctx, g):
        out = np.zeros(ctx["shape"])
        full, ax = ctx["full"], ctx["ax"]
        grids = np.indices(full.shape, sparse=True)
        loc = list(grids)
        loc[ax] = full
        np.add.at(out, tuple(loc), g)
        return (out,)


@primitive("dense")
class _Dense:
    """``x @ W (+ b)`` on the last axis."""

    @staticmethod
    def forward(ctx, x, w, b=None):
        if x.shape[-1] != w.shape[0]:
            raise ShapeError(f"dense: input width {x.shape[-1]} != weight rows {w.shape[0]}")
        ctx["x"], ctx["w"], ctx["has_b"] = x, w, b is not None
        out = x @ w
        return out + b if b is not None else out

    @staticmethod
    def backward(ctx, g):
        x, w = ctx["x"], ctx["w"]
        gw = x.reshape(-1, x.shape[-1]).T @ g.reshape(-1, g.shape[-1])
        gx = g @ w.T
        if ctx["has_b"]:
            return gx, gw, g.reshape(-1, g.shape[-1]).sum(axis=0)
        return gx, gw


_SQRT2 = np.sqrt(2.0)
_INV_SQRT2PI = 1.0 / np.sqrt(2.0 * np.pi)


def gelu_value(x):
    return 0.5 * x * (1.0 + erf(x / _SQRT2))


def gelu_slope(x):
    return 0.5 * (1.0 + erf(x / _SQRT2)) + x * _INV_SQRT2PI * np.exp(-0.5 * x * x)


@primitive("gelu")
class _Gelu:
    @staticmethod
    def forward(ctx, x):
        ctx["x"] = x
        return gelu_value(x)

    @staticmethod
    def backward(ctx, g):
        return (g * gelu_slope(ctx["x"]),)


@primitive("layernorm")
class _LayerNorm:
    """Plain layer norm over the last axis, no affine part."""

    @staticmethod
    def forward(ctx, x, eps=1e-8):
        mu = x.mean(axis=-1, keepdims=True)
        xc = x - mu
        inv = 1.0 / np.sqrt((xc * xc).mean(axis=-1, keepdims=True) + eps)
        y = xc * inv
        ctx["y"], ctx["inv"] = y, inv
        return y

    @staticmethod
    def backward(ctx, g):
        y, inv = ctx["y"], ctx["inv"]
        gm = g - g.mean(axis=-1, keepdims=True)
        return (inv * (gm - y * (g * y).mean(axis=-1, keepdims=True)),)


# --- multivector primitives ---------------------------------------------------


class _BilinearBase:
    matrix: np.ndarray

    @classmethod
    def forward(cls, ctx, a, b):
        if a.shape[-1] != ga.DIM or b.shape[-1] != ga.DIM:
            raise ShapeError("multivector operands need a trailing axis of 16")
        _check_broadcast(a, b)
        ctx["a"], ctx["b"] = a, b
        outer = a[..., :, None] * b[..., None, :]
        return outer.reshape(outer.shape[:-2] + (ga.DIM * ga.DIM,)) @ cls.matrix

    @classmethod
    def backward(cls, ctx, g):
        a, b = ctx["a"], ctx["b"]
        go = (g @ cls.matrix.T).reshape(g.shape[:-1] + (ga.DIM, ga.DIM))
        ga_ = np.einsum("...ij,...j->...i", go, b)
        gb = np.einsum("...ij,...i->...j", go, a)
        return ga_, gb


@primitive("geometric_product")
class _GeometricProduct(_BilinearBase):
    matrix = ga.GP_MATRIX


@primitive("wedge")
class _Wedge(_BilinearBase):
    matrix = ga.WEDGE_MATRIX


@primitive("join")
class _Join(_BilinearBase):
    matrix = ga.JOIN_MATRIX


def _equi_basis() -> np.ndarray:
    """Nine 16x16 maps: grade projections 0..4 then e0 * grade projection 0..3.

    Row-vector convention: ``x @ B[m]``.
    """
    maps = np.zeros((9, ga.DIM, ga.DIM))
    for k in range(5):
        maps[k] = np.diag((ga.GRADES == k).astype(float))
    e0 = np.zeros(ga.DIM)
    e0[1] = 1.0
    left_e0 = np.einsum("i,ijk->jk", e0, ga.GP_TABLE)  # x @ left_e0 = e0 x
    for k in range(4):
        maps[5 + k] = maps[k] @ left_e0
    return maps


EQUI_BASIS = _equi_basis()
# [16, 9*16]: x @ EQUI_STACK gives all nine basis images side by side
EQUI_STACK = np.concatenate(list(EQUI_BASIS), axis=1)


# sparse form of the basis: entry e maps input blade EQ_IN[e] to output blade
# EQ_OUT[e] with coefficient EQ_VAL[e] under weight slot EQ_MAP[e]
EQ_MAP, EQ_IN, EQ_OUT = np.nonzero(EQUI_BASIS)
EQ_VAL = EQUI_BASIS[EQ_MAP, EQ_IN, EQ_OUT]
_EQ_SCATTER = np.zeros((len(EQ_OUT), ga.DIM))
_EQ_SCATTER[np.arange(len(EQ_OUT)), EQ_OUT] = 1.0
_EQ_GATHER_IN = np.zeros((len(EQ_IN), ga.DIM))
_EQ_GATHER_IN[np.arange(len(EQ_IN)), EQ_IN] = 1.0
_EQ_TO_MAP = np.zeros((len(EQ_MAP), 9))
_EQ_TO_MAP[np.arange(len(EQ_MAP)), EQ_MAP] = EQ_VAL


@primitive("equi_linear")
class _EquiLinear:
    """``out[..., o, :] = sum_i sum_m W[o, i, m] (x[..., i, :] @ B[m])``."""

    @staticmethod
    def forward(ctx, x, w):
        n_out, n_in, nb = w.shape
        if nb != 9:
            raise ShapeError("equi_linear weights need 9 coefficients per channel pair")
        if x.shape[-2:] != (n_in, ga.DIM):
            raise ShapeError(f"equi_linear expects [..., {n_in}, 16], got {x.shape}")
        lead = x.shape[:-2]
        xe = np.moveaxis(x[..., EQ_IN].reshape(-1, n_in, len(EQ_IN)), -1, 0)  # [E, B, i]
        we = np.moveaxis(w[:, :, EQ_MAP] * EQ_VAL, -1, 0).transpose(0, 2, 1)  # [E, i, o]
        ye = xe @ we  # [E, B, o]
        out = np.moveaxis(ye, 0, -1) @ _EQ_SCATTER  # [B, o, 16]
        ctx["xe"], ctx["we"], ctx["n_out"] = xe, we, n_out
        return out.reshape(lead + (n_out, ga.DIM))

    @staticmethod
    def backward(ctx, g):
        xe, we, n_out = ctx["xe"], ctx["we"], ctx["n_out"]
        lead = g.shape[:-2]
        ge = np.moveaxis(g.reshape(-1, n_out, ga.DIM)[..., EQ_OUT], -1, 0)  # [E, B, o]
        gxe = ge @ we.transpose(0, 2, 1)  # [E, B, i]
        gx = np.moveaxis(gxe, 0, -1) @ _EQ_GATHER_IN  # [B, i, 16]
        gwe = xe.transpose(0, 2, 1) @ ge  # [E, i, o]
        gw = np.moveaxis(gwe, 0, -1).transpose(1, 0, 2) @ _EQ_TO_MAP  # [o, i, 9]
        return gx.reshape(lead + gx.shape[-2:]), gw


@primitive("gated_gelu")
class _GatedGelu:
    """Multivector scaled by GELU of its own scalar component."""

    @staticmethod
    def forward(ctx, x):
        s = x[..., :1]
        gate = gelu_value(s)
        ctx["x"], ctx["gate"], ctx["s"] = x, gate, s
        return gate * x

    @staticmethod
    def backward(ctx, g):
        x, gate, s = ctx["x"], ctx["gate"], ctx["s"]
        gx = gate * g
        gx[..., 0] += np.sum(g * x, axis=-1) * gelu_slope(s[..., 0])
        return (gx,)


@primitive("equi_layernorm")
class _EquiLayerNorm:
    """``x / sqrt(mean_c <x_c, x_c> + eps)`` per token; channels on axis -2."""

    @staticmethod
    def forward(ctx, x, eps=1e-8):
        sq = np.sum(x[..., ga.NON_E0] ** 2, axis=-1)  # [..., c]
        inv = 1.0 / np.sqrt(sq.mean(axis=-1) + eps)  # [...]
        ctx["x"], ctx["inv"] = x, inv
        return x * inv[..., None, None]

    @staticmethod
    def backward(ctx, g):
        x, inv = ctx["x"], ctx["inv"]
        n_c = x.shape[-2]
        dot = np.sum(g * x, axis=(-1, -2))  # [...]
        gx = g * inv[..., None, None]
        corr = (dot * inv ** 3 / n_c)[..., None, None] * (x * ga.NON_E0)
        return (gx - corr,)


@primitive("attention")
class _Attention:
    """Softmax attention on flattened features.

    q: [..., h, n_q, d], k: [..., h, n_k, d], v: [..., h, n_k, f]; logits are
    multiplied by ``scale`` (default 1/sqrt(d)).
    """

    @staticmethod
    def forward(ctx, q, k, v, scale=None):
        if k.shape[-2] != v.shape[-2]:
            raise ShapeError("keys and values must have the same token count")
        if q.shape[-1] != k.shape[-1]:
            raise ShapeError("queries and keys must have the same feature width")
        scale = 1.0 / np.sqrt(q.shape[-1]) if scale is None else scale
        logits = (q @ np.swapaxes(k, -1, -2)) * scale
        logits = logits - logits.max(axis=-1, keepdims=True)
        w = np.exp(logits)
        w /= w.sum(axis=-1, keepdims=True)
        ctx.update(q=q, k=k, v=v, w=w, scale=scale)
        return w @ v

    @staticmethod
    def backward(ctx, g):
        q, k, v, w, scale = ctx["q"], ctx["k"], ctx["v"], ctx["w"], ctx["scale"]
        gv = np.swapaxes(w, -1, -2) @ g
        gw = g @ np.swapaxes(v, -1, -2)
        gl = w * (gw - np.sum(gw * w, axis=-1, keepdims=True)) * scale
        gq = gl @ k
        gk = np.swapaxes(gl, -1, -2) @ q
        return gq, gk, gv


# --- multivector tensors -------------------------------------------------------


@dataclass
class MVTensor:
    """Multivector features [..., tokens, channels, 16] plus optional invariant scalars [..., tokens, s]."""

    mv: Tensor
    s: Tensor | None = None

    def __post_init__(self):
        if not isinstance(self.mv, Tensor):
            self.mv = Tensor(self.mv)
        if self.s is not None and not isinstance(self.s, Tensor):
            self.s = Tensor(self.s)
        shape = self.mv.shape
        if len(shape) < 3 or shape[-1] != ga.DIM:
            raise ShapeError(f"MVTensor data must be [..., tokens, channels, 16], got {shape}")
        if self.s is not None and self.s.shape[:-1] != shape[:-2]:
            raise ShapeError(f"scalar sidecar {self.s.shape} does not match tokens {shape[:-2]}")

    @property
    def tokens(self) -> int:
        return self.mv.shape[-3]

    @property
    def channels(self) -> int:
        return self.mv.shape[-2]

    @property
    def n_scalars(self) -> int:
        return 0 if self.s is None else self.s.shape[-1]

    def __add__(self, other: "MVTensor") -> "MVTensor":
        s = None
        if self.s is not None and other.s is not None:
            s = self.s + other.s
        return MVTensor(self.mv + other.mv, s)

    def finite(self) -> bool:
        ok = np.all(np.isfinite(self.mv.value))
        return bool(ok and (self.s is None or np.all(np.isfinite(self.s.value))))
