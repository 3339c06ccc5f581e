"""Penalty-contact rigid-body rollouts and the physics-informed grasp losses.

The object is a rigid cloud of equal point masses; the hand is a frozen set of
collision spheres.  Each (point, sphere) pair with positive penetration yields
a spring-damper normal force and a viscous tangential force capped by a
Coulomb-style bound.  Per sphere, the pair forces are combined into one
contact force (the penetration-weighted mean) acting at the weighted contact
point, so contact stiffness does not scale with cloud density.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np
from numba import njit

from .algebra import InvalidInputError
from .hand import Grasp, HandSpec, forward_kinematics, rot6d_decode, rot6d_encode

ALPHA_RANGE = 0.01
ALPHA_LIMIT = 10.0


class UnstableIntegrationError(FloatingPointError):
    pass


@dataclass(frozen=True)
class ContactParams:
    k_n: float = 1000.0
    c_n: float = 10.0
    c_t: float = 5.0
    mu: float = 1.0
    dt: float = 0.01
    T_sim: int = 60
    substeps: int = 8
    mass: float = 0.1
    gravity: bool = False

    def __post_init__(self):
        if self.dt <= 0:
            raise InvalidInputError("dt must be positive")
        if min(self.k_n, self.c_n, self.c_t, self.mu) < 0:
            raise InvalidInputError("contact coefficients must be non-negative")
        if self.mass <= 0 or self.T_sim < 0 or self.substeps < 1:
            raise InvalidInputError("mass must be positive, T_sim >= 0, substeps >= 1")


@dataclass(frozen=True)
class RolloutResult:
    velocity: np.ndarray  # final linear velocity (m/s)
    angular_velocity: np.ndarray  # final angular velocity (rad/s)
    max_displacement: float  # max COM distance from start (m)
    min_clearance: float  # smallest sphere-surface gap seen (m); <= 0 means contact
    trajectory: np.ndarray | None = None  # COM positions per step


@dataclass(frozen=True)
class SimScene:
    points: np.ndarray  # object cloud, world frame (m)
    centers: np.ndarray = field(default_factory=lambda: np.zeros((0, 3)))
    radii: np.ndarray = field(default_factory=lambda: np.zeros(0))
    params: ContactParams = ContactParams()

    def __post_init__(self):
        pts = np.ascontiguousarray(self.points, dtype=np.float64)
        centers = np.ascontiguousarray(np.reshape(self.centers, (-1, 3)), dtype=np.float64)
        radii = np.ascontiguousarray(np.reshape(self.radii, -1), dtype=np.float64)
        if pts.ndim != 2 or pts.shape[1] != 3:
            raise InvalidInputError("object cloud must be [N, 3]")
        if pts.shape[0] < 3 or np.linalg.matrix_rank(pts - pts.mean(axis=0), tol=1e-9) < 2:
            raise InvalidInputError("object needs at least 3 non-collinear points")
        if centers.shape[0] != radii.shape[0]:
            raise InvalidInputError("sphere centers and radii differ in length")
        if np.any(radii <= 0):
            raise InvalidInputError("sphere radii must be positive")
        object.__setattr__(self, "points", pts)
        object.__setattr__(self, "centers", centers)
        object.__setattr__(self, "radii", radii)

    @classmethod
    def from_grasp(cls, points, hand: HandSpec, g: Grasp, params: ContactParams = ContactParams()) -> "SimScene":
        centers, radii = forward_kinematics(hand, g)
        return cls(points, centers, radii, params)

    @property
    def com(self) -> np.ndarray:
        return self.points.mean(axis=0)

    def inertia(self) -> np.ndarray:
        rel = self.points - self.com
        m = self.params.mass / len(rel)
        return m * (np.sum(rel * rel) * np.eye(3) - rel.T @ rel)


@njit(cache=True)
def _cross(a, b):
    return np.array([a[1] * b[2] - a[2] * b[1], a[2] * b[0] - a[0] * b[2], a[0] * b[1] - a[1] * b[0]])


@njit(cache=True)
def _rodrigues(w, h):
    theta = np.sqrt(w[0] ** 2 + w[1] ** 2 + w[2] ** 2) * h
    out = np.eye(3)
    if theta < 1e-15:
        return out
    k = w * h / theta
    kx = np.array([[0.0, -k[2], k[1]], [k[2], 0.0, -k[0]], [-k[1], k[0], 0.0]])
    return out + np.sin(theta) * kx + (1.0 - np.cos(theta)) * (kx @ kx)


@njit(cache=True)
def _contact_wrench(x, v, w, rot, rel, centers, radii, reach, k_n, c_n, c_t, mu):
    force = np.zeros(3)
    torque = np.zeros(3)
    clearance = np.inf
    penergy = 0.0
    n_pts = rel.shape[0]
    arms = np.empty((n_pts, 3))
    arms_ready = False
    for s in range(centers.shape[0]):
        cx, cy, cz = centers[s, 0], centers[s, 1], centers[s, 2]
        r = radii[s]
        dist_c = np.sqrt((cx - x[0]) ** 2 + (cy - x[1]) ** 2 + (cz - x[2]) ** 2)
        bound = dist_c - reach - r
        if bound > 1e-2:
            clearance = min(clearance, bound)
            continue
        if not arms_ready:
            for i in range(n_pts):
                for a in range(3):
                    arms[i, a] = rot[a, 0] * rel[i, 0] + rot[a, 1] * rel[i, 1] + rot[a, 2] * rel[i, 2]
            arms_ready = True
        wsum = 0.0
        fx = fy = fz = 0.0
        px = py = pz = 0.0
        for i in range(n_pts):
            ax, ay, az = arms[i, 0], arms[i, 1], arms[i, 2]
            dx = x[0] + ax - cx
            dy = x[1] + ay - cy
            dz = x[2] + az - cz
            dist = np.sqrt(dx * dx + dy * dy + dz * dz)
            gap = dist - r
            if gap < clearance:
                clearance = gap
            if gap >= 0.0 or dist < 1e-12:
                continue
            pen = -gap
            nx, ny, nz = dx / dist, dy / dist, dz / dist
            vx = v[0] + w[1] * az - w[2] * ay
            vy = v[1] + w[2] * ax - w[0] * az
            vz = v[2] + w[0] * ay - w[1] * ax
            vn = vx * nx + vy * ny + vz * nz
            fn = k_n * pen - c_n * vn
            if fn < 0.0:
                fn = 0.0
            tx = -c_t * (vx - vn * nx)
            ty = -c_t * (vy - vn * ny)
            tz = -c_t * (vz - vn * nz)
            ftn = np.sqrt(tx * tx + ty * ty + tz * tz)
            cap = mu * fn
            if ftn > cap:
                scale = cap / ftn
                tx *= scale
                ty *= scale
                tz *= scale
            fx += pen * (fn * nx + tx)
            fy += pen * (fn * ny + ty)
            fz += pen * (fn * nz + tz)
            px += pen * ax
            py += pen * ay
            pz += pen * az
            wsum += pen
            penergy += 0.5 * k_n * pen * pen
        if wsum > 0.0:
            fx /= wsum
            fy /= wsum
            fz /= wsum
            px /= wsum
            py /= wsum
            pz /= wsum
            force[0] += fx
            force[1] += fy
            force[2] += fz
            torque[0] += py * fz - pz * fy
            torque[1] += pz * fx - px * fz
            torque[2] += px * fy - py * fx
    return force, torque, clearance, penergy


@njit(cache=True)
def _rollout(rel, mass, ibody, centers, radii, reach, k_n, c_n, c_t, mu, dt, steps, substeps,
             x0, v0, w0, accel, energy_limit, trace, stop_disp):
    x = x0.copy()
    v = v0.copy()
    w = w0.copy()
    rot = np.eye(3)
    ibody_inv = np.linalg.inv(ibody)
    h = dt / substeps
    max_disp = 0.0
    clearance = np.inf
    traj = np.zeros((steps + 1 if trace else 0, 3))
    if trace:
        traj[0] = x
    ok = True
    for step in range(steps):
        for _ in range(substeps):
            f, tau, clr, _pe = _contact_wrench(x, v, w, rot, rel, centers, radii, reach, k_n, c_n, c_t, mu)
            if clr < clearance:
                clearance = clr
            iw = rot @ ibody @ rot.T
            iw_inv = rot @ ibody_inv @ rot.T
            v = v + h * (f / mass + accel)
            w = w + h * (iw_inv @ (tau - _cross(w, iw @ w)))
            x = x + h * v
            rot = _rodrigues(w, h) @ rot
        d = x - x0
        disp = np.sqrt(d[0] ** 2 + d[1] ** 2 + d[2] ** 2)
        if disp > max_disp:
            max_disp = disp
        if max_disp >= stop_disp:
            break
        ke = 0.5 * mass * (v[0] ** 2 + v[1] ** 2 + v[2] ** 2) + 0.5 * (w @ (rot @ ibody @ rot.T @ w))
        if not (ke <= energy_limit):
            ok = False
            break
        if trace:
            traj[step + 1] = x
    return v, w, max_disp, clearance, ok, traj


def rollout(scene: SimScene, v0, w0=(0.0, 0.0, 0.0), accel=(0.0, 0.0, 0.0), steps: int | None = None,
            trace: bool = False, stop_disp: float = np.inf) -> RolloutResult:
    """Integrate the object against the frozen hand starting at velocity ``v0``.

    ``accel`` is a constant external acceleration (m/s^2); gravity, when
    enabled in the scene parameters, is added along -z.  The run ends early
    once the COM has moved ``stop_disp`` from its start.
    """
    prm = scene.params
    v0 = np.asarray(v0, dtype=np.float64).reshape(3)
    w0 = np.asarray(w0, dtype=np.float64).reshape(3)
    acc = np.asarray(accel, dtype=np.float64).reshape(3).copy()
    if prm.gravity:
        acc[2] -= 9.81
    steps = prm.T_sim if steps is None else int(steps)
    com = scene.com
    rel = scene.points - com
    ibody = scene.inertia()
    reach = float(np.sqrt(np.max(np.sum(rel * rel, axis=1))))
    _, _, _, pe0 = _contact_wrench(com, v0, w0, np.eye(3), rel, scene.centers, scene.radii, reach,
                                   prm.k_n, prm.c_n, prm.c_t, prm.mu)
    t_total = steps * prm.dt
    ke0 = 0.5 * prm.mass * float(v0 @ v0) + 0.5 * float(w0 @ ibody @ w0)
    work = 0.5 * prm.mass * (np.linalg.norm(v0) + np.linalg.norm(acc) * t_total) ** 2
    limit = 10.0 * (ke0 + work + pe0 + 1e-9)
    v, w, disp, clr, ok, traj = _rollout(
        rel, prm.mass, ibody, scene.centers, scene.radii, reach, prm.k_n, prm.c_n, prm.c_t, prm.mu,
        prm.dt, steps, prm.substeps, com, v0, w0, acc, limit, trace, float(stop_disp),
    )
    if not ok:
        raise UnstableIntegrationError(
            f"kinetic energy exceeded 10x its reference ({limit / 10:.3g} J); reduce dt or raise substeps"
        )
    return RolloutResult(v, w, float(disp), float(clr), traj if trace else None)


def default_velocities(speed: float = 0.1) -> np.ndarray:
    return speed * np.concatenate([np.eye(3), -np.eye(3)])


def stability_terms(scene: SimScene, velocities=None) -> tuple[float, float]:
    """(L_stability, smallest clearance seen over all rollouts)."""
    vels = default_velocities() if velocities is None else np.atleast_2d(np.asarray(velocities, dtype=np.float64))
    if len(vels) < 1:
        raise InvalidInputError("need at least one initial velocity")
    speeds, clearance = [], np.inf
    for v0 in vels:
        res = rollout(scene, v0)
        speeds.append(np.sum(res.velocity * res.velocity) + np.sum(res.angular_velocity * res.angular_velocity))
        clearance = min(clearance, res.min_clearance)
    return float(np.mean(speeds)), clearance


def stability_loss(scene: SimScene, velocities=None) -> float:
    """Mean squared final linear plus angular speed over the velocity set."""
    return stability_terms(scene, velocities)[0]


def _check_limits(q, q_low, q_up):
    q = np.asarray(q, dtype=np.float64)
    q_low = np.asarray(q_low, dtype=np.float64)
    q_up = np.asarray(q_up, dtype=np.float64)
    if not (q.shape == q_low.shape == q_up.shape):
        raise InvalidInputError(f"joint vector and limits differ in length: {q.shape}, {q_low.shape}, {q_up.shape}")
    return q, q_low, q_up


def range_loss(q, q_low, q_up) -> float:
    q, q_low, q_up = _check_limits(q, q_low, q_up)
    d = q - 0.5 * (q_up + q_low)
    return float(d @ d)


def limit_loss(q, q_low, q_up) -> float:
    q, q_low, q_up = _check_limits(q, q_low, q_up)
    return float(np.sum(np.maximum(q - q_up, 0.0) + np.maximum(q_low - q, 0.0)))


def joint_loss_grad(q, q_low, q_up) -> np.ndarray:
    """Analytic gradient of ``ALPHA_RANGE * range_loss + ALPHA_LIMIT * limit_loss``."""
    q, q_low, q_up = _check_limits(q, q_low, q_up)
    g_range = 2.0 * (q - 0.5 * (q_up + q_low))
    g_limit = (q > q_up).astype(np.float64) - (q < q_low).astype(np.float64)
    return ALPHA_RANGE * g_range + ALPHA_LIMIT * g_limit


@dataclass(frozen=True)
class PhysContext:
    """Everything needed to score a grasp against one object."""

    points: np.ndarray
    hand: HandSpec
    params: ContactParams = ContactParams()
    velocities: np.ndarray | None = None
    fd_step: float = 1e-4
    # stability probes are skipped when every rollout keeps this much clearance
    fd_margin: float = 1e-3

    def scene(self, g: Grasp) -> SimScene:
        return SimScene.from_grasp(self.points, self.hand, g, self.params)


@dataclass(frozen=True)
class PhysLoss:
    total: float
    stability: float
    range: float
    limit: float
    grad: np.ndarray | None = None


def phys_loss(g, ctx: PhysContext, with_grad: bool = False) -> PhysLoss:
    """``L_stability + ALPHA_RANGE L_range + ALPHA_LIMIT L_limit`` for a grasp.

    The joint terms are differentiated analytically; the stability term by
    central differences over the 9+k grasp coordinates.  When no rollout comes
    within ``fd_margin`` of any sphere the stability term is locally constant
    and its gradient is exactly zero, so the probes are skipped.
    """
    g = g if isinstance(g, Grasp) else Grasp.from_vector(g)
    hand = ctx.hand
    if g.q.shape != (hand.dof,):
        raise InvalidInputError(f"expected {hand.dof} joint angles, got {g.q.shape[0]}")
    stab, clearance = stability_terms(ctx.scene(g), ctx.velocities)
    lr = range_loss(g.q, hand.q_low, hand.q_up)
    ll = limit_loss(g.q, hand.q_low, hand.q_up)
    total = stab + ALPHA_RANGE * lr + ALPHA_LIMIT * ll
    grad = None
    if with_grad:
        vec = g.vector()
        grad = np.zeros_like(vec)
        grad[9:] = joint_loss_grad(g.q, hand.q_low, hand.q_up)
        if clearance <= ctx.fd_margin:
            h = ctx.fd_step
            for i in range(len(vec)):
                hi, lo = vec.copy(), vec.copy()
                hi[i] += h
                lo[i] -= h
                f_hi = stability_terms(ctx.scene(Grasp.from_vector(hi)), ctx.velocities)[0]
                f_lo = stability_terms(ctx.scene(Grasp.from_vector(lo)), ctx.velocities)[0]
                grad[i] += (f_hi - f_lo) / (2.0 * h)
    return PhysLoss(total, stab, lr, ll, grad)


@dataclass(frozen=True)
class SuccessReport:
    success: bool
    displacements: np.ndarray  # max COM displacement per test (m)


def success_params(params: ContactParams = ContactParams()) -> ContactParams:
    """Evaluator contact settings: high friction cap, otherwise the rollout defaults."""
    return replace(params, mu=10.0)


def success_eval(g, points, hand: HandSpec, accel: float = 0.5, steps: int = 60, threshold: float = 0.02,
                 params: ContactParams | None = None, early_exit: bool = True) -> SuccessReport:
    """Six constant-acceleration shake tests along +-x, +-y, +-z.

    With ``early_exit`` a test stops as soon as the threshold is crossed, so
    reported displacements of failing tests are lower bounds.
    """
    g = g if isinstance(g, Grasp) else Grasp.from_vector(g)
    prm = success_params() if params is None else params
    scene = SimScene.from_grasp(points, hand, g, prm)
    disp = np.array([rollout(scene, np.zeros(3), accel=accel * a, steps=steps,
                             stop_disp=threshold if early_exit else np.inf).max_displacement
                     for a in default_velocities(1.0)])
    return SuccessReport(bool(np.all(disp < threshold)), disp)


def diversity_score(q) -> float:
    """Population standard deviation per joint across grasps, averaged over joints."""
    q = np.asarray(q, dtype=np.float64)
    if q.ndim != 2 or q.shape[0] < 2:
        raise InvalidInputError("diversity needs at least two grasps")
    # shifting by one member keeps identical sets at exactly zero
    return float(np.mean(np.std(q - q[0], axis=0)))


def transform_grasp(g: Grasp, rot: np.ndarray, t: np.ndarray) -> Grasp:
    """Apply a proper rigid motion to the hand base (joint angles unchanged)."""
    new_rot = rot @ rot6d_decode(g.r)
    return Grasp(rot6d_encode(new_rot), rot @ g.p + t, g.q)
