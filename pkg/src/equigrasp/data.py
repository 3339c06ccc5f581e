"""Synthetic primitive objects and ground-truth grasps for the toy hand."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.spatial.transform import Rotation

from .algebra import InvalidInputError
from .hand import Grasp, HandSpec, forward_kinematics, rot6d_encode
from .physics import ContactParams, success_eval, success_params


@dataclass(frozen=True)
class CloudRecord:
    label: str
    points: np.ndarray  # [N, 3] meters

    def __post_init__(self):
        object.__setattr__(self, "points", np.asarray(self.points, dtype=np.float64).reshape(-1, 3))

    def __eq__(self, other):
        return isinstance(other, CloudRecord) and self.label == other.label and np.array_equal(self.points, other.points)


@dataclass(frozen=True)
class GraspRecord:
    grasp: Grasp
    object: str = ""
    seed: int | None = None
    L_phys: float | None = None
    success: bool | None = None

    def __eq__(self, other):
        return (
            isinstance(other, GraspRecord)
            and np.array_equal(self.grasp.vector(), other.grasp.vector())
            and (self.object, self.seed, self.L_phys, self.success)
            == (other.object, other.seed, other.L_phys, other.success)
        )


def sphere_cloud(radius: float, n: int, rng: np.random.Generator) -> np.ndarray:
    """Jittered Fibonacci lattice on a sphere surface (tie-free for FPS)."""
    i = np.arange(n) + 0.5
    z = 1.0 - 2.0 * i / n
    phi = np.pi * (1.0 + 5.0**0.5) * i
    dirs = np.stack([np.sqrt(1 - z * z) * np.cos(phi), np.sqrt(1 - z * z) * np.sin(phi), z], axis=1)
    dirs += rng.normal(scale=0.3 / np.sqrt(n), size=dirs.shape)
    dirs /= np.linalg.norm(dirs, axis=1, keepdims=True)
    return radius * dirs


def box_cloud(edges, n: int, rng: np.random.Generator) -> np.ndarray:
    """Jittered grids on the six faces of an axis-aligned box centered at the origin.

    Faces receive points in proportion to their area; the result has exactly
    ``n`` points (the largest faces absorb rounding).
    """
    edges = np.asarray(edges, dtype=np.float64)
    half = edges / 2
    faces = [(ax, sgn) for ax in range(3) for sgn in (-1.0, 1.0)]
    areas = np.array([np.prod(np.delete(edges, ax)) for ax, _ in faces])
    counts = np.floor(n * areas / areas.sum()).astype(int)
    for i in np.argsort(-areas, kind="stable")[: n - counts.sum()]:
        counts[i] += 1
    out = []
    for (ax, sgn), m in zip(faces, counts):
        u_ax, v_ax = [a for a in range(3) if a != ax]
        aspect = edges[u_ax] / edges[v_ax]
        nu = max(1, int(round(np.sqrt(m * aspect))))
        nv = int(np.ceil(m / nu))
        cells = rng.permutation(nu * nv)[:m]
        iu, iv = cells // nv, cells % nv
        u = (iu + 0.5 + rng.uniform(-0.3, 0.3, m)) / nu
        v = (iv + 0.5 + rng.uniform(-0.3, 0.3, m)) / nv
        pts = np.empty((m, 3))
        pts[:, ax] = sgn * half[ax]
        pts[:, u_ax] = (u - 0.5) * edges[u_ax]
        pts[:, v_ax] = (v - 0.5) * edges[v_ax]
        out.append(pts)
    return np.concatenate(out)


def make_object(kind: str, rng: np.random.Generator, n: int = 256) -> CloudRecord:
    if kind == "sphere":
        r = rng.uniform(0.02, 0.04)
        return CloudRecord(f"sphere_r{r:.4f}", sphere_cloud(r, n, rng))
    if kind == "box":
        e = rng.uniform(0.03, 0.06, size=3)
        return CloudRecord("box_" + "x".join(f"{v:.4f}" for v in e), box_cloud(e, n, rng))
    raise InvalidInputError(f"unknown object kind {kind!r}")


def _max_penetration(points: np.ndarray, centers: np.ndarray, radii: np.ndarray) -> float:
    d = np.linalg.norm(points[:, None, :] - centers[None, :, :], axis=-1)
    return float(np.max(radii[None, :] - d))


def _hand_frame(approach: np.ndarray, roll: float) -> np.ndarray:
    """Rotation whose z column is ``approach`` and whose x column is rolled by ``roll``."""
    z = approach / np.linalg.norm(approach)
    helper = np.array([1.0, 0.0, 0.0]) if abs(z[0]) < 0.9 else np.array([0.0, 1.0, 0.0])
    x = np.cross(helper, z)
    x /= np.linalg.norm(x)
    y = np.cross(z, x)
    c, s = np.cos(roll), np.sin(roll)
    x, y = c * x + s * y, -s * x + c * y
    return np.stack([x, y, z], axis=1)


def _finger_joints(hand: HandSpec) -> list[list[int]]:
    """Joint indices grouped per chain hanging off the base link."""
    chains: list[list[int]] = []
    owner: dict[str, int] = {}
    for j, joint in enumerate(hand.joints):
        if joint.parent == hand.base:
            owner[joint.child] = len(chains)
            chains.append([j])
        else:
            idx = owner[joint.parent]
            owner[joint.child] = idx
            chains[idx].append(j)
    return chains


def _sphere_owner(hand: HandSpec) -> np.ndarray:
    """Per collision sphere, the chain index (-1 for the base)."""
    chain_of = {hand.base: -1}
    for c, joints in enumerate(_finger_joints(hand)):
        for j in joints:
            chain_of[hand.joints[j].child] = c
    return np.array([chain_of[link] for link in hand.links for _ in hand.spheres.get(link, ())])


def _sphere_link_index(hand: HandSpec) -> np.ndarray:
    return np.array([link for link in hand.links for _ in hand.spheres.get(link, ())])


def synthesize_grasp(points: np.ndarray, hand: HandSpec, approach: np.ndarray, roll: float,
                     squeeze: float = 5e-4, dq: float = 0.01,
                     step: float = 2e-3) -> Grasp | None:
    """Place the palm against the object along ``approach`` and curl each finger shut.

    The palm is slid along the approach axis until its deepest sphere
    penetration equals ``squeeze``.  Each finger then closes its joints in
    lockstep; when a link reaches the same depth, the joints up to that link
    stop and the distal ones keep curling until the last link touches.
    Returns None if a finger runs into its limits without its tip touching.
    """
    center = points.mean(axis=0)
    rot = _hand_frame(approach, roll)
    a = rot[:, 2]
    q = np.zeros(hand.dof)
    owner = _sphere_owner(hand)
    palm = owner == -1

    def depth(offset):
        c, r = forward_kinematics(hand, Grasp(rot6d_encode(rot), center - offset * a, q))
        return _max_penetration(points, c[palm], r[palm])

    # slide in from outside the support plane; the cloud is a hollow shell so
    # penetration is only monotone while approaching from outside
    outside = float(np.max((points - center) @ -a)) + 0.03
    inside = outside
    while depth(inside) < squeeze:
        outside, inside = inside, inside - step
        if inside <= 0.0:
            return None
    for _ in range(12):
        mid = 0.5 * (outside + inside)
        outside, inside = (outside, mid) if depth(mid) >= squeeze else (mid, inside)
    p = center - inside * a
    link_sphere = _sphere_link_index(hand)
    for joints in _finger_joints(hand):
        # joints[i] drives link i of the chain; a touching link freezes joints[:i+1]
        frozen = 0
        while frozen < len(joints):
            active = joints[frozen:]
            if all(q[j] >= hand.q_up[j] for j in active):
                return None
            for j in active:
                q[j] = min(q[j] + dq, hand.q_up[j])
            c, r = forward_kinematics(hand, Grasp(rot6d_encode(rot), p, q))
            for i in range(len(joints) - 1, frozen - 1, -1):
                mask = link_sphere == hand.joints[joints[i]].child
                if _max_penetration(points, c[mask], r[mask]) >= squeeze:
                    frozen = i + 1
                    break
    return Grasp(rot6d_encode(rot), p, q.copy())


def random_approach(label: str, rng: np.random.Generator) -> np.ndarray:
    if label.startswith("box"):
        axis = rng.integers(3)
        a = np.zeros(3)
        a[axis] = rng.choice([-1.0, 1.0])
        return a
    v = rng.normal(size=3)
    return v / np.linalg.norm(v)


def grasps_for_object(cloud: CloudRecord, hand: HandSpec, n: int, rng: np.random.Generator,
                      params: ContactParams | None = None, max_tries: int | None = None,
                      squeeze: float = 5e-4) -> list[Grasp]:
    params = success_params() if params is None else params
    out: list[Grasp] = []
    tries = 0
    max_tries = 20 * n if max_tries is None else max_tries
    while len(out) < n and tries < max_tries:
        tries += 1
        g = synthesize_grasp(cloud.points, hand, random_approach(cloud.label, rng), rng.uniform(0, 2 * np.pi),
                             squeeze=squeeze)
        if g is not None and success_eval(g, cloud.points, hand, params=params).success:
            out.append(g)
    if not out:
        raise RuntimeError(f"no passing grasps for {cloud.label} after {tries} attempts")
    return out


def random_rigid(rng: np.random.Generator, max_shift: float = 0.2) -> tuple[np.ndarray, np.ndarray]:
    return Rotation.random(random_state=rng).as_matrix(), rng.uniform(-max_shift, max_shift, size=3)
