"""DDPM over flat grasp vectors, with optional physics-gradient guidance.

The sampler works in *diffusion coordinates*: ``[r (6), (p - c) / s (3), q (k)]``
where ``c`` is the object centroid and ``s`` the network's position scale.
Centering keeps the 1/sqrt(alpha) rescaling of the reverse process from
dragging grasps toward the world origin, which would break translation
equivariance; scaling puts translations on the same O(1) footing as the
other coordinates.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .algebra import InvalidInputError
from .autodiff import Tensor, record
from .denoiser import Denoiser, ObjectEncoding
from .hand import Grasp, rot6d_decode, rot6d_encode
from .physics import PhysContext, phys_loss


@dataclass(frozen=True)
class DiffusionSchedule:
    T: int = 100
    beta_start: float = 1e-4
    beta_end: float = 2e-2
    betas: np.ndarray = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        if self.T < 1:
            raise InvalidInputError("T must be >= 1")
        if not (0 < self.beta_start <= self.beta_end < 1):
            raise InvalidInputError("need 0 < beta_start <= beta_end < 1")
        object.__setattr__(self, "betas", np.linspace(self.beta_start, self.beta_end, self.T))

    @classmethod
    def from_betas(cls, betas) -> "DiffusionSchedule":
        betas = np.asarray(betas, dtype=np.float64)
        if betas.ndim != 1 or len(betas) < 1 or np.any(betas <= 0) or np.any(betas >= 1):
            raise InvalidInputError("betas must be a non-empty vector in (0, 1)")
        if np.any(np.diff(betas) < 0):
            raise InvalidInputError("betas must be non-decreasing")
        out = cls(len(betas), float(betas[0]), float(betas[-1]))
        object.__setattr__(out, "betas", betas.copy())
        return out

    @property
    def alphas(self) -> np.ndarray:
        return 1.0 - self.betas

    @property
    def alpha_bars(self) -> np.ndarray:
        return np.cumprod(self.alphas)

    def alpha_bar(self, t) -> np.ndarray:
        """Cumulative product at step ``t`` (1-based; t = 0 gives 1)."""
        t = np.asarray(t)
        return np.where(t == 0, 1.0, self.alpha_bars[np.maximum(t, 1) - 1])

    def posterior_variance(self, t: int) -> float:
        self.check(t)
        ab_t = self.alpha_bar(t)
        ab_prev = self.alpha_bar(t - 1)
        return float((1.0 - ab_prev) / (1.0 - ab_t) * self.betas[t - 1])

    def check(self, t) -> None:
        t = np.asarray(t)
        if np.any(t < 1) or np.any(t > self.T):
            raise InvalidInputError(f"diffusion step must lie in [1, {self.T}]")


def to_diffusion(g, centroid, pos_scale: float) -> np.ndarray:
    g = np.array(g, dtype=np.float64)
    g[..., 6:9] = (g[..., 6:9] - centroid) / pos_scale
    return g


def from_diffusion(x, centroid, pos_scale: float) -> np.ndarray:
    x = np.array(x, dtype=np.float64)
    x[..., 6:9] = np.asarray(centroid) + pos_scale * x[..., 6:9]
    return x


def forward_sample(schedule: DiffusionSchedule, g0, t, eps) -> np.ndarray:
    """Closed-form marginal ``sqrt(ab_t) g0 + sqrt(1 - ab_t) eps``."""
    schedule.check(t)
    ab = np.asarray(schedule.alpha_bar(t))[..., None]
    return np.sqrt(ab) * np.asarray(g0) + np.sqrt(1.0 - ab) * np.asarray(eps)


def training_loss(net: Denoiser, schedule: DiffusionSchedule, g0, clouds, index, t, eps) -> Tensor:
    """Mean over the batch of the squared noise-prediction error (summed over coordinates).

    ``g0``: [B, 9+k] diffusion coordinates; ``clouds``: [U, N, 3] distinct objects;
    ``index``: [B] object row per grasp; ``t``: [B]; ``eps``: [B, 9+k].
    """
    clouds = np.asarray(clouds, dtype=np.float64)
    g_t = forward_sample(schedule, g0, t, eps)
    enc = net.encode_object(clouds)
    centroids = clouds.mean(axis=1)[np.asarray(index)]
    pred = net.predict(g_t, centroids, t, enc, index=index)
    err = pred - Tensor(np.asarray(eps, dtype=np.float64))
    sq = record("sum", record("mul", err, err), axis=-1)
    return record("mean", sq)


@dataclass(frozen=True)
class GuidanceConfig:
    """Reverse-mean shift ``-lam * beta_t * grad L_phys`` on steps ``t_min..t_max``.

    With ``backtrack > 0`` a shift that does not lower L_phys at the shifted
    mean is halved up to that many times, then dropped.
    """

    lam: float = 0.0
    t_min: int = 1
    t_max: int | None = None  # defaults to T
    source: str = "finite-difference"
    backtrack: int = 0

    def __post_init__(self):
        if self.lam < 0:
            raise InvalidInputError("guidance scale must be >= 0")
        if self.source not in ("finite-difference", "analytic"):
            raise InvalidInputError("gradient source must be 'finite-difference' or 'analytic'")

    def active(self, t: int, T: int) -> bool:
        return self.lam > 0 and self.t_min <= t <= (T if self.t_max is None else self.t_max)


@dataclass
class TraceRow:
    t: int
    sample: int
    L_phys: float
    grad_norm: float
    skipped: bool = False


def _predict(net: Denoiser, x, t, enc, centroid) -> np.ndarray:
    idx = np.zeros(len(x), dtype=np.int64)
    return net.predict(x, centroid, t, enc, index=idx).value


def reverse_mean(schedule: DiffusionSchedule, x_t, t: int, eps_hat) -> np.ndarray:
    beta = schedule.betas[t - 1]
    alpha = 1.0 - beta
    ab = schedule.alpha_bar(t)
    return (np.asarray(x_t) - beta / np.sqrt(1.0 - ab) * np.asarray(eps_hat)) / np.sqrt(alpha)


def reverse_step(net: Denoiser, schedule: DiffusionSchedule, enc: ObjectEncoding, centroid, x_t, t: int,
                 z) -> np.ndarray:
    """One ancestral step; ``z`` is the standard-normal draw (ignored at t = 1)."""
    schedule.check(t)
    mean = reverse_mean(schedule, x_t, t, _predict(net, x_t, t, enc, centroid))
    if t == 1:
        return mean
    return mean + np.sqrt(schedule.posterior_variance(t)) * np.asarray(z)


def guidance_gradient(x, centroid, pos_scale: float, ctx: PhysContext, analytic_only: bool = False):
    """L_phys and its gradient with respect to one diffusion-coordinate vector.

    The loss is evaluated at the grasp decoded from ``x`` (rotation columns
    orthonormalized).
    """
    world = from_diffusion(x, centroid, pos_scale)
    if analytic_only:
        ctx = PhysContext(ctx.points, ctx.hand, ctx.params, ctx.velocities, ctx.fd_step, fd_margin=-np.inf)
    res = phys_loss(world, ctx, with_grad=True)
    grad = res.grad.copy()
    grad[6:9] *= pos_scale
    return res.total, grad


def _descend(mean, step, centroid, pos_scale: float, ctx: PhysContext, backtrack: int) -> np.ndarray:
    if backtrack <= 0:
        return mean - step
    loss = lambda x: phys_loss(from_diffusion(x, centroid, pos_scale), ctx).total  # noqa: E731
    base = loss(mean)
    for _ in range(backtrack + 1):
        if loss(mean - step) <= base:
            return mean - step
        step = step / 2
    return mean


def guided_reverse_step(net: Denoiser, schedule: DiffusionSchedule, enc: ObjectEncoding, centroid, x_t, t: int,
                        z, guidance: GuidanceConfig, ctx: PhysContext | None,
                        trace: list[TraceRow] | None = None) -> np.ndarray:
    schedule.check(t)
    mean = reverse_mean(schedule, x_t, t, _predict(net, x_t, t, enc, centroid))
    if guidance.active(t, schedule.T):
        if ctx is None:
            raise InvalidInputError("guided sampling needs a physics context")
        scale = guidance.lam * schedule.betas[t - 1]
        for i in range(len(x_t)):
            try:
                loss, grad = guidance_gradient(x_t[i], centroid, net.cfg.pos_scale, ctx,
                                               analytic_only=guidance.source == "analytic")
            except (FloatingPointError, InvalidInputError) as exc:
                loss, grad = np.nan, np.full(x_t.shape[1], np.nan)
                warnings.warn(f"guidance skipped at t={t}, sample {i}: {exc}", RuntimeWarning, stacklevel=2)
            ok = bool(np.all(np.isfinite(grad)))
            if ok:
                mean[i] = _descend(mean[i], scale * grad, centroid, net.cfg.pos_scale, ctx, guidance.backtrack)
            elif np.isfinite(loss):
                warnings.warn(f"non-finite guidance gradient at t={t}, sample {i}; step skipped",
                              RuntimeWarning, stacklevel=2)
            if trace is not None:
                trace.append(TraceRow(t, i, float(loss), float(np.linalg.norm(grad)) if ok else np.nan, not ok))
    if t == 1:
        return mean
    return mean + np.sqrt(schedule.posterior_variance(t)) * np.asarray(z)


def draw_noise(schedule: DiffusionSchedule, n: int, dim: int, rng: np.random.Generator) -> np.ndarray:
    """Full noise stream ``[T + 1, n, dim]``: row 0 is x_T, row i the draw used at step T - i + 1."""
    return rng.standard_normal((schedule.T + 1, n, dim))


def sample(net: Denoiser, schedule: DiffusionSchedule, points, n: int, rng: np.random.Generator | None = None,
           noise=None, guidance: GuidanceConfig | None = None, ctx: PhysContext | None = None,
           trace: list[TraceRow] | None = None, decode: bool = True) -> np.ndarray:
    """Draw ``n`` grasps for one object cloud; returns world-frame grasp vectors [n, 9+k].

    Either ``rng`` or an explicit ``noise`` stream (see ``draw_noise``) must be
    given.  With ``decode`` the rotation columns are re-orthonormalized.
    """
    points = np.asarray(points, dtype=np.float64)
    dim = net.cfg.grasp_dim
    if net.cfg.T != schedule.T:
        raise InvalidInputError(f"network was built for T={net.cfg.T}, schedule has T={schedule.T}")
    if n == 0:
        return np.zeros((0, dim))
    if noise is None:
        if rng is None:
            raise InvalidInputError("sample needs an rng or an explicit noise stream")
        noise = draw_noise(schedule, n, dim, rng)
    noise = np.asarray(noise, dtype=np.float64)
    if noise.shape != (schedule.T + 1, n, dim):
        raise InvalidInputError(f"noise stream must be shaped {(schedule.T + 1, n, dim)}")
    centroid = points.mean(axis=0)
    enc = net.encode_object(points[None])
    x = noise[0].copy()
    for i, t in enumerate(range(schedule.T, 0, -1), start=1):
        if guidance is not None and guidance.lam > 0:
            x = guided_reverse_step(net, schedule, enc, centroid, x, t, noise[i], guidance, ctx, trace)
        else:
            x = reverse_step(net, schedule, enc, centroid, x, t, noise[i])
    world = from_diffusion(x, centroid, net.cfg.pos_scale)
    return decode_grasps(world) if decode else world


def decode_grasps(g) -> np.ndarray:
    g = np.array(g, dtype=np.float64)
    g[..., :6] = rot6d_encode(rot6d_decode(g[..., :6]))
    return g


def write_trace(path, rows: list[TraceRow]) -> None:
    lines = ["t\tsample\tL_phys\tgrad_norm\tskipped"]
    lines += [f"{r.t}\t{r.sample}\t{r.L_phys!r}\t{r.grad_norm!r}\t{int(r.skipped)}" for r in rows]
    Path(path).write_text("\n".join(lines) + "\n")


def as_grasps(g) -> list[Grasp]:
    return [Grasp.from_vector(row) for row in np.atleast_2d(g)]
