"""Mini-batch training of the noise predictor with Adam."""

from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np

from .algebra import InvalidInputError
from .autodiff import Tape, backward
from .denoiser import Denoiser, DenoiserConfig
from .diffusion import DiffusionSchedule, to_diffusion, training_loss


class DivergenceError(FloatingPointError):
    def __init__(self, message: str, step: int, losses: list[float]):
        super().__init__(message)
        self.step = step
        self.losses = losses


@dataclass
class Adam:
    lr: float = 2e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    clip: float | None = 1.0  # global gradient-norm clip
    m: np.ndarray | None = None
    v: np.ndarray | None = None
    t: int = 0

    def step(self, params: np.ndarray, grad: np.ndarray) -> np.ndarray:
        if self.m is None:
            self.m = np.zeros_like(params)
            self.v = np.zeros_like(params)
        if self.clip is not None:
            norm = np.linalg.norm(grad)
            if norm > self.clip:
                grad = grad * (self.clip / norm)
        self.t += 1
        self.m = self.beta1 * self.m + (1 - self.beta1) * grad
        self.v = self.beta2 * self.v + (1 - self.beta2) * grad * grad
        m_hat = self.m / (1 - self.beta1**self.t)
        v_hat = self.v / (1 - self.beta2**self.t)
        return params - self.lr * m_hat / (np.sqrt(v_hat) + self.eps)


@dataclass
class TrainResult:
    net: Denoiser
    losses: list[float] = field(default_factory=list)
    seconds: float = 0.0


def flat_grad(net: Denoiser, grads: dict[int, np.ndarray]) -> np.ndarray:
    return np.concatenate([grads.get(id(t), np.zeros_like(t.value)).ravel() for t in net.params.values()])


def loss_and_grad(net: Denoiser, schedule: DiffusionSchedule, g0, clouds, index, t, eps):
    with Tape() as tape:
        loss = training_loss(net, schedule, g0, clouds, index, t, eps)
    grads = backward(tape, loss)
    return float(loss.value), flat_grad(net, grads)


def train(clouds, grasps, object_index, cfg: DenoiserConfig, schedule: DiffusionSchedule, *, steps: int,
          seed: int, lr: float = 2e-3, batch: int = 16, objects_per_batch: int = 2, log_every: int = 0,
          divergence_factor: float = 1e3, callback=None) -> TrainResult:
    """Fit the denoiser on world-frame grasps ``grasps`` [M, 9+k] of objects ``clouds`` [U, N, 3].

    Each step draws ``objects_per_batch`` distinct objects and splits ``batch``
    grasps evenly among them, so the object branch runs once per object.
    Training aborts with ``DivergenceError`` once the loss exceeds
    ``divergence_factor`` times its initial value.
    """
    clouds = np.asarray(clouds, dtype=np.float64)
    grasps = np.asarray(grasps, dtype=np.float64)
    object_index = np.asarray(object_index, dtype=np.int64)
    if len(grasps) == 0:
        raise InvalidInputError("training set is empty")
    if grasps.shape[1] != cfg.grasp_dim:
        raise InvalidInputError(f"grasps have {grasps.shape[1]} coordinates, config expects {cfg.grasp_dim}")
    rng = np.random.default_rng(seed)
    net = Denoiser(cfg, seed=seed)
    centroids = clouds.mean(axis=1)
    x0_all = to_diffusion(grasps, centroids[object_index], cfg.pos_scale)
    by_object = [np.flatnonzero(object_index == u) for u in range(len(clouds))]
    candidates = [u for u, rows in enumerate(by_object) if len(rows)]
    n_obj = min(objects_per_batch, len(candidates))
    per = max(1, batch // n_obj)
    opt = Adam(lr=lr)
    params = net.params.flat()
    res = TrainResult(net)
    start = time.perf_counter()
    initial = None
    for step in range(steps):
        objs = rng.choice(candidates, size=n_obj, replace=False)
        rows = np.concatenate([rng.choice(by_object[u], size=per) for u in objs])
        index = np.repeat(np.arange(n_obj), per)
        t = rng.integers(1, schedule.T + 1, size=len(rows))
        eps = rng.standard_normal((len(rows), cfg.grasp_dim))
        loss, grad = loss_and_grad(net, schedule, x0_all[rows], clouds[objs], index, t, eps)
        if initial is None:
            initial = loss
        res.losses.append(loss)
        if not np.isfinite(loss) or loss > divergence_factor * initial:
            raise DivergenceError(f"loss {loss:.4g} at step {step} exceeds {divergence_factor:g}x the initial "
                                  f"{initial:.4g}", step, res.losses)
        params = opt.step(params, grad)
        net.params.load_flat(params)
        if callback is not None:
            callback(step, loss)
        if log_every and step % log_every == 0:
            print(f"step {step:5d}  L_eps {loss:.4f}", flush=True)
    res.seconds = time.perf_counter() - start
    return res
