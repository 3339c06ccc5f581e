"""Projective geometric algebra G(3,0,1).

Multivectors are stored as 16 float64 coefficients in the blade order::

    1, e0, e1, e2, e3, e01, e02, e03, e12, e13, e23, e012, e013, e023, e123, e0123

``e0`` squares to zero, ``e1..e3`` square to one.  The array functions in this
module operate on the trailing axis of arbitrary-rank arrays so the network
code can call them on whole token/channel batches; :class:`Multivector` and
:class:`Versor` are thin immutable wrappers for the single-element API.
"""

from __future__ import annotations

from itertools import combinations

import numpy as np

__all__ = [
    "BLADES",
    "BLADE_NAMES",
    "GRADES",
    "DIM",
    "InvalidInputError",
    "DegeneratePointError",
    "Multivector",
    "Versor",
    "blade_product",
    "geometric_product",
    "wedge",
    "join",
    "dual",
    "reverse",
    "grade_involution",
    "grade_project",
    "inner_invariant",
    "sandwich",
    "embed_point",
    "embed_direction",
    "embed_plane",
    "extract_point",
    "extract_direction",
    "rotor",
    "translator",
    "motor_from_pose",
    "reflection",
]


class InvalidInputError(ValueError):
    """Raised when an argument violates an operation's precondition."""


class DegeneratePointError(InvalidInputError):
    """Raised when extracting a Euclidean point from an ideal (infinite) point."""


DIM = 16

BLADES: tuple[tuple[int, ...], ...] = tuple(
    blade for k in range(5) for blade in combinations(range(4), k)
)
BLADE_NAMES: tuple[str, ...] = tuple(
    "1" if not b else "e" + "".join(str(i) for i in b) for b in BLADES
)
GRADES = np.array([len(b) for b in BLADES], dtype=np.int64)
_INDEX = {b: i for i, b in enumerate(BLADES)}
METRIC = (0.0, 1.0, 1.0, 1.0)

# coefficient slots that do not contain e0; the invariant inner product lives here
NON_E0 = np.array([0 not in b for b in BLADES])
NON_E0_INDICES = np.flatnonzero(NON_E0)


def blade_product(a: tuple[int, ...], b: tuple[int, ...]) -> tuple[float, tuple[int, ...]]:
    """Geometric product of two basis blades by bubble-sorting the index list.

    Returns ``(sign, blade)``; sign is 0 when a repeated ``e0`` annihilates the
    product.
    """
    idx = list(a) + list(b)
    sign = 1.0
    # bubble sort, counting transpositions of distinct indices
    for i in range(len(idx)):
        for j in range(len(idx) - 1 - i):
            if idx[j] > idx[j + 1]:
                idx[j], idx[j + 1] = idx[j + 1], idx[j]
                sign = -sign
    out: list[int] = []
    k = 0
    while k < len(idx):
        if k + 1 < len(idx) and idx[k] == idx[k + 1]:
            sign *= METRIC[idx[k]]
            k += 2
        else:
            out.append(idx[k])
            k += 1
    return sign, tuple(out)


def _bilinear_table(rule) -> np.ndarray:
    """Dense [16*16, 16] table for a bilinear product defined on blade pairs."""
    table = np.zeros((DIM, DIM, DIM))
    for i, a in enumerate(BLADES):
        for j, b in enumerate(BLADES):
            sign, blade = rule(a, b)
            if sign != 0.0:
                table[i, j, _INDEX[blade]] += sign
    return table


def _wedge_rule(a, b):
    if set(a) & set(b):
        return 0.0, ()
    return blade_product(a, b)


GP_TABLE = _bilinear_table(blade_product)
WEDGE_TABLE = _bilinear_table(_wedge_rule)

# right complement: e_I ^ dual(e_I) = +e0123 for every basis blade
_PSEUDO = _INDEX[(0, 1, 2, 3)]
DUAL_INDEX = np.empty(DIM, dtype=np.int64)
DUAL_SIGN = np.empty(DIM)
for _i, _b in enumerate(BLADES):
    _c = tuple(sorted(set(range(4)) - set(_b)))
    _s, _blade = _wedge_rule(_b, _c)
    assert _blade == (0, 1, 2, 3)
    DUAL_INDEX[_i] = _INDEX[_c]
    DUAL_SIGN[_i] = _s
del _i, _b, _c, _s, _blade

# dual as a matrix acting on coefficient vectors: out = coeffs @ DUAL_MATRIX
DUAL_MATRIX = np.zeros((DIM, DIM))
DUAL_MATRIX[np.arange(DIM), DUAL_INDEX] = DUAL_SIGN

REVERSE_SIGN = np.array([(-1.0) ** (g * (g - 1) // 2) for g in GRADES])
INVOLUTION_SIGN = np.array([(-1.0) ** g for g in GRADES])


def _join_table() -> np.ndarray:
    eye = np.eye(DIM)
    da = eye @ DUAL_MATRIX
    table = np.einsum("ai,bj,ijk->abk", da, da, WEDGE_TABLE)
    return np.einsum("abk,kl->abl", table, DUAL_MATRIX)


JOIN_TABLE = _join_table()

# flattened [256, 16] forms used by the batched products
GP_MATRIX = GP_TABLE.reshape(DIM * DIM, DIM)
WEDGE_MATRIX = WEDGE_TABLE.reshape(DIM * DIM, DIM)
JOIN_MATRIX = JOIN_TABLE.reshape(DIM * DIM, DIM)


def _bilinear(a: np.ndarray, b: np.ndarray, matrix: np.ndarray) -> np.ndarray:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    outer = a[..., :, None] * b[..., None, :]
    return outer.reshape(outer.shape[:-2] + (DIM * DIM,)) @ matrix


def geometric_product(a, b) -> np.ndarray:
    return _bilinear(a, b, GP_MATRIX)


def wedge(a, b) -> np.ndarray:
    return _bilinear(a, b, WEDGE_MATRIX)


def join(a, b) -> np.ndarray:
    """``dual(dual(a) ^ dual(b))``."""
    return _bilinear(a, b, JOIN_MATRIX)


def dual(x) -> np.ndarray:
    return np.asarray(x, dtype=np.float64) @ DUAL_MATRIX


def reverse(x) -> np.ndarray:
    return np.asarray(x, dtype=np.float64) * REVERSE_SIGN


def grade_involution(x) -> np.ndarray:
    return np.asarray(x, dtype=np.float64) * INVOLUTION_SIGN


def grade_project(x, k: int) -> np.ndarray:
    if k not in (0, 1, 2, 3, 4):
        raise InvalidInputError(f"grade must be in 0..4, got {k!r}")
    return np.where(GRADES == k, np.asarray(x, dtype=np.float64), 0.0)


def inner_invariant(a, b) -> np.ndarray:
    """Dot product over the 8 coefficients whose blades do not contain e0."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    return np.sum(a[..., NON_E0] * b[..., NON_E0], axis=-1)


# --- geometric embeddings -------------------------------------------------

_E012, _E013, _E023, _E123 = (_INDEX[b] for b in [(0, 1, 2), (0, 1, 3), (0, 2, 3), (1, 2, 3)])
# point (x, y, z) <-> e123 + x*e023*(-1) + y*e013 + z*e012*(-1)
_POINT_SLOTS = np.array([_E023, _E013, _E012])
_POINT_SIGNS = np.array([-1.0, 1.0, -1.0])


def embed_point(p) -> np.ndarray:
    """Euclidean point as a trivector with unit ``e123`` coefficient."""
    p = np.asarray(p, dtype=np.float64)
    out = np.zeros(p.shape[:-1] + (DIM,))
    out[..., _POINT_SLOTS] = p * _POINT_SIGNS
    out[..., _E123] = 1.0
    return out


def embed_direction(d) -> np.ndarray:
    """Ideal point (direction): the point embedding without the e123 weight."""
    d = np.asarray(d, dtype=np.float64)
    out = np.zeros(d.shape[:-1] + (DIM,))
    out[..., _POINT_SLOTS] = d * _POINT_SIGNS
    return out


def extract_point(x, eps: float = 1e-12) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    w = x[..., _E123]
    if np.any(np.abs(w) <= eps):
        raise DegeneratePointError("cannot extract a point from an ideal point (e123 weight is zero)")
    return x[..., _POINT_SLOTS] * _POINT_SIGNS / w[..., None]


def extract_direction(x) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    return x[..., _POINT_SLOTS] * _POINT_SIGNS


def embed_plane(normal, offset) -> np.ndarray:
    """Plane ``normal . x + offset = 0`` as a vector ``n1 e1 + n2 e2 + n3 e3 + offset e0``."""
    normal = np.asarray(normal, dtype=np.float64)
    offset = np.asarray(offset, dtype=np.float64)
    out = np.zeros(normal.shape[:-1] + (DIM,))
    out[..., 2:5] = normal
    out[..., 1] = offset
    return out


# --- versors ----------------------------------------------------------------

_E01, _E02, _E03 = (_INDEX[b] for b in [(0, 1), (0, 2), (0, 3)])
_E12, _E13, _E23 = (_INDEX[b] for b in [(1, 2), (1, 3), (2, 3)])


def rotor(axis, angle: float) -> np.ndarray:
    """Rotation by ``angle`` (right hand rule) about ``axis`` through the origin."""
    axis = np.asarray(axis, dtype=np.float64)
    n = np.linalg.norm(axis)
    if n == 0.0:
        raise InvalidInputError("rotation axis must be nonzero")
    ax, ay, az = axis / n
    s, c = np.sin(angle / 2.0), np.cos(angle / 2.0)
    out = np.zeros(DIM)
    out[0] = c
    out[_E23] = -s * ax
    out[_E13] = s * ay
    out[_E12] = -s * az
    return out


def translator(t) -> np.ndarray:
    tx, ty, tz = np.asarray(t, dtype=np.float64)
    out = np.zeros(DIM)
    out[0] = 1.0
    out[_E01] = -0.5 * tx
    out[_E02] = -0.5 * ty
    out[_E03] = -0.5 * tz
    return out


def _rotor_from_matrix(rot: np.ndarray) -> np.ndarray:
    # quaternion (w, x, y, z) via Shepperd's method, then mapped onto the rotor blades
    m = rot
    tr = np.trace(m)
    if tr > 0:
        s = 2.0 * np.sqrt(tr + 1.0)
        w, x, y, z = 0.25 * s, (m[2, 1] - m[1, 2]) / s, (m[0, 2] - m[2, 0]) / s, (m[1, 0] - m[0, 1]) / s
    elif m[0, 0] > m[1, 1] and m[0, 0] > m[2, 2]:
        s = 2.0 * np.sqrt(1.0 + m[0, 0] - m[1, 1] - m[2, 2])
        w, x, y, z = (m[2, 1] - m[1, 2]) / s, 0.25 * s, (m[0, 1] + m[1, 0]) / s, (m[0, 2] + m[2, 0]) / s
    elif m[1, 1] > m[2, 2]:
        s = 2.0 * np.sqrt(1.0 + m[1, 1] - m[0, 0] - m[2, 2])
        w, x, y, z = (m[0, 2] - m[2, 0]) / s, (m[0, 1] + m[1, 0]) / s, 0.25 * s, (m[1, 2] + m[2, 1]) / s
    else:
        s = 2.0 * np.sqrt(1.0 + m[2, 2] - m[0, 0] - m[1, 1])
        w, x, y, z = (m[1, 0] - m[0, 1]) / s, (m[0, 2] + m[2, 0]) / s, (m[1, 2] + m[2, 1]) / s, 0.25 * s
    out = np.zeros(DIM)
    out[0] = w
    out[_E23] = -x
    out[_E13] = y
    out[_E12] = -z
    return out / np.sqrt(w * w + x * x + y * y + z * z)


def motor_from_pose(r6, p) -> "Versor":
    """Motor acting as ``x -> R x + p`` with ``R`` decoded from a 6D rotation."""
    from .hand import rot6d_decode

    rot = rot6d_decode(r6)
    mv = geometric_product(translator(p), _rotor_from_matrix(rot))
    return Versor(mv)


def motor_from_matrix(rot, p) -> "Versor":
    rot = np.asarray(rot, dtype=np.float64)
    return Versor(geometric_product(translator(p), _rotor_from_matrix(rot)))


def reflection(normal, offset: float = 0.0) -> "Versor":
    """Reflection in the plane ``normal . x + offset = 0``."""
    normal = np.asarray(normal, dtype=np.float64)
    n = np.linalg.norm(normal)
    return Versor(embed_plane(normal / n, offset / n))


def _is_parity_pure(mv: np.ndarray, tol: float) -> int | None:
    even = np.abs(mv[GRADES % 2 == 0]).max()
    odd = np.abs(mv[GRADES % 2 == 1]).max()
    if odd <= tol:
        return 0
    if even <= tol:
        return 1
    return None


def sandwich_array(u: np.ndarray, x, odd: bool) -> np.ndarray:
    """Twisted sandwich ``u x u^-1`` (grade involution of ``x`` for odd ``u``)."""
    x = np.asarray(x, dtype=np.float64)
    if odd:
        x = grade_involution(x)
    return geometric_product(geometric_product(u, x), reverse(u))


def sandwich(u: "Versor", x) -> np.ndarray:
    """Action of a unit versor on a multivector (or batch of multivectors)."""
    if not isinstance(u, Versor):
        u = Versor(u)
    coeffs = x.coeffs if isinstance(x, Multivector) else x
    out = sandwich_array(u.coeffs, coeffs, u.odd)
    return Multivector(out) if isinstance(x, Multivector) else out


class Multivector:
    """Immutable single element of G(3,0,1)."""

    __slots__ = ("_coeffs",)

    def __init__(self, coeffs=None):
        c = np.zeros(DIM) if coeffs is None else np.array(coeffs, dtype=np.float64)
        if c.shape != (DIM,):
            raise InvalidInputError(f"expected 16 coefficients, got shape {c.shape}")
        if not np.all(np.isfinite(c)):
            raise InvalidInputError("multivector coefficients must be finite")
        c.setflags(write=False)
        self._coeffs = c

    @classmethod
    def blade(cls, name: str, value: float = 1.0) -> "Multivector":
        c = np.zeros(DIM)
        c[BLADE_NAMES.index(name)] = value
        return cls(c)

    @classmethod
    def scalar(cls, value: float) -> "Multivector":
        return cls.blade("1", value)

    @property
    def coeffs(self) -> np.ndarray:
        return self._coeffs

    def __getitem__(self, name: str) -> float:
        return float(self._coeffs[BLADE_NAMES.index(name)])

    def _coerce(self, other) -> np.ndarray | None:
        if isinstance(other, Multivector):
            return other.coeffs
        if isinstance(other, (int, float, np.floating)):
            return Multivector.scalar(float(other)).coeffs
        return None

    def __add__(self, other):
        o = self._coerce(other)
        return NotImplemented if o is None else Multivector(self._coeffs + o)

    __radd__ = __add__

    def __sub__(self, other):
        o = self._coerce(other)
        return NotImplemented if o is None else Multivector(self._coeffs - o)

    def __rsub__(self, other):
        o = self._coerce(other)
        return NotImplemented if o is None else Multivector(o - self._coeffs)

    def __neg__(self):
        return Multivector(-self._coeffs)

    def __mul__(self, other):
        if isinstance(other, (int, float, np.floating)):
            return Multivector(self._coeffs * float(other))
        o = self._coerce(other)
        return NotImplemented if o is None else Multivector(geometric_product(self._coeffs, o))

    def __rmul__(self, other):
        if isinstance(other, (int, float, np.floating)):
            return Multivector(self._coeffs * float(other))
        return NotImplemented

    def __xor__(self, other):
        o = self._coerce(other)
        return NotImplemented if o is None else Multivector(wedge(self._coeffs, o))

    def __and__(self, other):
        o = self._coerce(other)
        return NotImplemented if o is None else Multivector(join(self._coeffs, o))

    def __eq__(self, other):
        o = self._coerce(other)
        return NotImplemented if o is None else bool(np.array_equal(self._coeffs, o))

    def __hash__(self):
        return hash(self._coeffs.tobytes())

    def reverse(self) -> "Multivector":
        return Multivector(reverse(self._coeffs))

    def dual(self) -> "Multivector":
        return Multivector(dual(self._coeffs))

    def grade(self, k: int) -> "Multivector":
        return Multivector(grade_project(self._coeffs, k))

    def inner(self, other: "Multivector") -> float:
        return float(inner_invariant(self._coeffs, other.coeffs))

    def allclose(self, other, atol: float = 1e-12) -> bool:
        o = self._coerce(other)
        return bool(np.allclose(self._coeffs, o, rtol=0.0, atol=atol))

    def __repr__(self) -> str:
        terms = [f"{c:g}·{n}" for c, n in zip(self._coeffs, BLADE_NAMES) if c != 0.0]
        return "Multivector(" + (" + ".join(terms) if terms else "0") + ")"


class Versor(Multivector):
    """Unit versor: even (motor) or odd (reflection) with ``u ~u = 1``."""

    __slots__ = ("odd",)

    def __init__(self, coeffs, tol: float = 1e-9):
        if isinstance(coeffs, Multivector):
            coeffs = coeffs.coeffs
        super().__init__(coeffs)
        c = self.coeffs
        parity = _is_parity_pure(c, tol)
        if parity is None:
            raise InvalidInputError("versor must be purely even or purely odd")
        norm = float(inner_invariant(c, c))
        if abs(norm - 1.0) > tol:
            raise InvalidInputError(f"versor must have unit norm, got <u,u> = {norm:.6g}")
        unit = geometric_product(c, reverse(c))
        expected = np.zeros(DIM)
        expected[0] = 1.0
        if np.abs(unit - expected).max() > 1e-7:
            raise InvalidInputError("u ~u is not 1; element is not a unit versor")
        self.odd = bool(parity)

    def __mul__(self, other):
        if isinstance(other, Versor):
            return Versor(geometric_product(self.coeffs, other.coeffs))
        return super().__mul__(other)

    def apply(self, x):
        return sandwich(self, x)

    def matrix(self) -> np.ndarray:
        """3x3 linear part of the induced Euclidean map (sign-aware for reflections)."""
        pts = embed_point(np.vstack([np.zeros(3), np.eye(3)]))
        img = extract_point(sandwich_array(self.coeffs, pts, self.odd))
        return (img[1:] - img[0]).T

    def translation(self) -> np.ndarray:
        return extract_point(sandwich_array(self.coeffs, embed_point(np.zeros(3)), self.odd))
