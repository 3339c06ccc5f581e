"""Toy dexterous hand: kinematic chains, collision spheres, grasp parameterization.

The hand base frame sits at the palm center with the palm normal along +z;
fingers rest in the palm plane and positive joint angles curl them toward +z.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .algebra import InvalidInputError


class DegenerateRotationError(InvalidInputError):
    pass


def rot6d_decode(r) -> np.ndarray:
    """Gram-Schmidt decode of a 6D rotation ``[a1, a2]`` into a 3x3 matrix (columns b1, b2, b3)."""
    r = np.asarray(r, dtype=np.float64)
    a1, a2 = r[..., 0:3], r[..., 3:6]
    n1 = np.linalg.norm(a1, axis=-1, keepdims=True)
    if np.any(n1 <= 1e-9):
        raise DegenerateRotationError("6D rotation column a1 is (near) zero")
    b1 = a1 / n1
    u2 = a2 - np.sum(b1 * a2, axis=-1, keepdims=True) * b1
    n2 = np.linalg.norm(u2, axis=-1, keepdims=True)
    if np.any(n2 <= 1e-9):
        raise DegenerateRotationError("6D rotation column a2 is (near) parallel to a1")
    b2 = u2 / n2
    b3 = np.cross(b1, b2)
    return np.stack([b1, b2, b3], axis=-1)


def rot6d_encode(rot) -> np.ndarray:
    rot = np.asarray(rot, dtype=np.float64)
    return np.concatenate([rot[..., :, 0], rot[..., :, 1]], axis=-1)


def axis_angle_matrix(axis, angle) -> np.ndarray:
    """Rodrigues rotation; ``angle`` may be an array (broadcast over leading dims)."""
    axis = np.asarray(axis, dtype=np.float64)
    angle = np.asarray(angle, dtype=np.float64)
    k = axis / np.linalg.norm(axis)
    kx = np.array([[0.0, -k[2], k[1]], [k[2], 0.0, -k[0]], [-k[1], k[0], 0.0]])
    s = np.sin(angle)[..., None, None]
    c = np.cos(angle)[..., None, None]
    return np.eye(3) + s * kx + (1.0 - c) * (kx @ kx)


@dataclass(frozen=True)
class Grasp:
    r: np.ndarray
    p: np.ndarray
    q: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "r", np.asarray(self.r, dtype=np.float64).reshape(6))
        object.__setattr__(self, "p", np.asarray(self.p, dtype=np.float64).reshape(3))
        object.__setattr__(self, "q", np.asarray(self.q, dtype=np.float64).reshape(-1))

    @classmethod
    def from_vector(cls, g) -> "Grasp":
        g = np.asarray(g, dtype=np.float64)
        return cls(g[:6], g[6:9], g[9:])

    def vector(self) -> np.ndarray:
        return np.concatenate([self.r, self.p, self.q])

    @property
    def rotation(self) -> np.ndarray:
        return rot6d_decode(self.r)


@dataclass(frozen=True)
class Joint:
    name: str
    parent: str  # parent link name
    child: str
    axis: tuple[float, float, float]
    origin: tuple[float, float, float]  # joint origin in parent link frame (m)
    lower: float
    upper: float


@dataclass(frozen=True)
class HandSpec:
    """Kinematic forest rooted at link ``base``; every link carries collision spheres."""

    joints: tuple[Joint, ...]
    spheres: dict[str, tuple[tuple[tuple[float, float, float], float], ...]] = field(default_factory=dict)
    base: str = "palm"

    def __post_init__(self):
        links = {self.base}
        for j in self.joints:
            if j.parent not in links:
                raise InvalidInputError(f"joint {j.name!r}: parent link {j.parent!r} not defined before use")
            if j.child in links:
                raise InvalidInputError(f"joint {j.name!r}: link {j.child!r} already has a parent")
            if not j.lower < j.upper:
                raise InvalidInputError(f"joint {j.name!r}: lower limit must be below upper limit")
            links.add(j.child)
        for link, sph in self.spheres.items():
            if link not in links:
                raise InvalidInputError(f"spheres attached to unknown link {link!r}")
            if any(rad <= 0 for _, rad in sph):
                raise InvalidInputError(f"link {link!r}: sphere radii must be positive")

    @property
    def dof(self) -> int:
        return len(self.joints)

    @property
    def q_low(self) -> np.ndarray:
        return np.array([j.lower for j in self.joints])

    @property
    def q_up(self) -> np.ndarray:
        return np.array([j.upper for j in self.joints])

    @property
    def links(self) -> list[str]:
        return [self.base] + [j.child for j in self.joints]

    @property
    def num_spheres(self) -> int:
        return sum(len(v) for v in self.spheres.values())

    def sphere_radii(self) -> np.ndarray:
        return np.array([rad for link in self.links for _, rad in self.spheres.get(link, ())])

    def to_dict(self) -> dict:
        return {
            "base": self.base,
            "joints": [
                {
                    "name": j.name,
                    "parent": j.parent,
                    "child": j.child,
                    "axis": list(j.axis),
                    "origin": list(j.origin),
                    "limits": [j.lower, j.upper],
                }
                for j in self.joints
            ],
            "spheres": {
                link: [{"center": list(c), "radius": rad} for c, rad in sph]
                for link, sph in self.spheres.items()
            },
        }

    @classmethod
    def from_dict(cls, d: dict) -> "HandSpec":
        joints = tuple(
            Joint(
                j["name"], j["parent"], j["child"], tuple(j["axis"]), tuple(j["origin"]),
                float(j["limits"][0]), float(j["limits"][1]),
            )
            for j in d["joints"]
        )
        spheres = {
            link: tuple((tuple(s["center"]), float(s["radius"])) for s in sph)
            for link, sph in d["spheres"].items()
        }
        return cls(joints, spheres, d.get("base", "palm"))

    def dumps(self) -> str:
        return json.dumps(self.to_dict(), indent=2)

    @classmethod
    def loads(cls, text: str) -> "HandSpec":
        return cls.from_dict(json.loads(text))

    def save(self, path) -> None:
        Path(path).write_text(self.dumps())

    @classmethod
    def load(cls, path) -> "HandSpec":
        return cls.loads(Path(path).read_text())


def toy_hand(k_fingers: int = 2, joints_per_finger: int = 2) -> HandSpec:
    """Planar-palm hand with fingers evenly spaced around a 4 cm palm.

    Knuckles sit on a 2 cm circle; each finger points radially outward at q = 0
    with 2 cm phalanges and curls toward +z as its joints close. Limits are
    [0, pi/2], spheres have 6 mm radius.
    """
    if int(k_fingers) != k_fingers or k_fingers < 2:
        raise InvalidInputError("k_fingers must be an integer >= 2")
    if int(joints_per_finger) != joints_per_finger or joints_per_finger < 1:
        raise InvalidInputError("joints_per_finger must be an integer >= 1")
    palm_r, phalanx, radius = 0.02, 0.02, 0.006
    palm_spheres = [((0.0, 0.0, 0.0), radius)]
    joints = []
    spheres = {}
    for f in range(k_fingers):
        phi = 2.0 * np.pi * f / k_fingers
        u = np.array([np.cos(phi), np.sin(phi), 0.0])
        axis = np.cross(u, [0.0, 0.0, 1.0])
        palm_spheres.append((tuple(0.5 * palm_r * u), radius))
        palm_spheres.append((tuple(palm_r * u), radius))
        parent = "palm"
        for j in range(joints_per_finger):
            child = f"f{f}_l{j}"
            origin = palm_r * u if j == 0 else phalanx * u
            joints.append(
                Joint(f"f{f}_j{j}", parent, child, tuple(axis), tuple(origin), 0.0, np.pi / 2)
            )
            spheres[child] = ((tuple(0.5 * phalanx * u), radius), (tuple(phalanx * u), radius))
            parent = child
    spheres = {"palm": tuple(palm_spheres), **spheres}
    return HandSpec(tuple(joints), spheres)


def link_frames(spec: HandSpec, rot: np.ndarray, p: np.ndarray, q: np.ndarray) -> dict[str, tuple[np.ndarray, np.ndarray]]:
    frames = {spec.base: (rot, p)}
    for j, angle in zip(spec.joints, q):
        pr, pp = frames[j.parent]
        jr = axis_angle_matrix(j.axis, angle)
        frames[j.child] = (pr @ jr, pp + pr @ np.asarray(j.origin))
    return frames


def forward_kinematics(spec: HandSpec, g: Grasp) -> tuple[np.ndarray, np.ndarray]:
    """World-frame collision sphere centers [S, 3] and radii [S], links in spec order."""
    q = np.asarray(g.q, dtype=np.float64)
    if q.shape != (spec.dof,):
        raise InvalidInputError(f"expected {spec.dof} joint angles, got {q.shape[0]}")
    frames = link_frames(spec, g.rotation, g.p, q)
    centers, radii = [], []
    for link in spec.links:
        rot, origin = frames[link]
        for c, rad in spec.spheres.get(link, ()):
            centers.append(origin + rot @ np.asarray(c))
            radii.append(rad)
    return np.array(centers).reshape(-1, 3), np.array(radii)


def fingertips(spec: HandSpec, g: Grasp) -> np.ndarray:
    """Centers of the last sphere of each leaf link."""
    frames = link_frames(spec, g.rotation, g.p, np.asarray(g.q, dtype=np.float64))
    parents = {j.parent for j in spec.joints}
    tips = []
    for link in spec.links:
        if link not in parents and link != spec.base and spec.spheres.get(link):
            rot, origin = frames[link]
            tips.append(origin + rot @ np.asarray(spec.spheres[link][-1][0]))
    return np.array(tips)
