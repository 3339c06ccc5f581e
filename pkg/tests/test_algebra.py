import time

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays
from scipy.spatial.transform import Rotation

from equigrasp import algebra as ga
from equigrasp.algebra import Multivector, Versor
from equigrasp.hand import rot6d_encode

from . import oracles

finite = st.floats(-10, 10, allow_nan=False, allow_infinity=False)
mvs = arrays(np.float64, 16, elements=finite)


def e(name):
    return Multivector.blade(name)


def random_motor(rng, shift=1.0):
    return ga.motor_from_matrix(Rotation.random(random_state=rng).as_matrix(), rng.uniform(-shift, shift, 3))


# --- geometric product -------------------------------------------------------

def test_basic_products():
    assert e("e1") * e("e2") == e("e12")
    assert e("e0") * e("e0") == Multivector()
    assert e("e12") * e("e12") == Multivector.scalar(-1.0)


def test_cayley_table_matches_bubble_sort_oracle():
    start = time.perf_counter()
    for i, a in enumerate(oracles.BLADES):
        for j, b in enumerate(oracles.BLADES):
            sign, blade = oracles.blade_product(a, b)
            expect = np.zeros(16)
            if sign:
                expect[oracles.BLADES.index(blade)] = sign
            assert np.array_equal(ga.GP_TABLE[i, j], expect), (a, b)
    assert time.perf_counter() - start < 1.0


def test_random_products_match_oracle():
    rng = np.random.default_rng(0)
    for _ in range(20):
        a, b = rng.normal(size=(2, 16))
        np.testing.assert_allclose(ga.geometric_product(a, b), oracles.gp(a, b), rtol=1e-12, atol=1e-12)


@settings(max_examples=50, deadline=None)
@given(mvs, mvs, mvs)
def test_associative_and_distributive(a, b, c):
    scale = 1 + np.max(np.abs(a)) * np.max(np.abs(b)) * np.max(np.abs(c)) * 64
    left = ga.geometric_product(ga.geometric_product(a, b), c)
    right = ga.geometric_product(a, ga.geometric_product(b, c))
    assert np.max(np.abs(left - right)) <= 1e-12 * scale
    dist = ga.geometric_product(a, b + c) - ga.geometric_product(a, b) - ga.geometric_product(a, c)
    assert np.max(np.abs(dist)) <= 1e-12 * scale


@settings(max_examples=30, deadline=None)
@given(mvs, finite)
def test_scalars_commute(a, s):
    sc = np.zeros(16)
    sc[0] = s
    np.testing.assert_allclose(ga.geometric_product(sc, a), ga.geometric_product(a, sc), atol=0)
    np.testing.assert_allclose(ga.geometric_product(sc, a), s * a, atol=1e-12 * (1 + abs(s) * np.abs(a).max()))


# --- grades, reverse, dual, join -------------------------------------------------

def test_grade_projection():
    x = Multivector.scalar(1) + e("e1") + e("e12")
    assert x.grade(1) == e("e1")
    assert e("e0123").grade(4) == e("e0123")
    with pytest.raises(ga.InvalidInputError):
        ga.grade_project(np.zeros(16), 5)


@settings(max_examples=30, deadline=None)
@given(mvs)
def test_grade_partition(x):
    assert np.array_equal(sum(ga.grade_project(x, k) for k in range(5)), x)


def test_reverse_flips_grades_2_and_3():
    assert list(ga.REVERSE_SIGN) == [1, 1, 1, 1, 1, -1, -1, -1, -1, -1, -1, -1, -1, -1, -1, 1]


def test_dual_conventions():
    assert Multivector.scalar(1).dual() == e("e0123")
    eye = np.eye(16)
    for i in range(16):
        assert np.array_equal(ga.wedge(eye[i], ga.dual(eye[i])), eye[15])
        # complement table: the blade of dual(e_I) holds the indices missing from e_I
        d = ga.dual(eye[i])
        (j,) = np.nonzero(d)[0]
        assert set(oracles.BLADES[i]) | set(oracles.BLADES[j]) == {0, 1, 2, 3}
        assert not set(oracles.BLADES[i]) & set(oracles.BLADES[j])
        dd = ga.dual(d)
        assert np.array_equal(np.abs(dd), eye[i])
        assert dd[i] == ga.DUAL_SIGN[i] * ga.DUAL_SIGN[j]


def test_wedge_is_antisymmetrised_product_for_vectors():
    rng = np.random.default_rng(1)
    a, b = np.zeros((2, 16))
    a[1:5], b[1:5] = rng.normal(size=(2, 4))
    anti = 0.5 * (ga.geometric_product(a, b) - ga.geometric_product(b, a))
    np.testing.assert_allclose(ga.wedge(a, b), anti, atol=1e-14)


def test_join_of_two_points_is_their_line():
    p, q = ga.embed_point([0, 0, 0]), ga.embed_point([1, 0, 0])
    line = ga.join(p, q)
    assert np.count_nonzero(ga.GRADES[np.abs(line) > 1e-14] != 2) == 0
    # a third collinear point lies on the line: the join with it vanishes
    assert np.allclose(ga.join(line, ga.embed_point([3, 0, 0])), 0)
    assert not np.allclose(ga.join(line, ga.embed_point([0, 1, 0])), 0)


# --- versors and embeddings ----------------------------------------------------

def test_identity_and_zero_translation():
    rng = np.random.default_rng(2)
    x = rng.normal(size=16)
    assert np.array_equal(ga.sandwich(Versor(np.eye(16)[0]), x), x)
    np.testing.assert_allclose(ga.sandwich(Versor(ga.translator([0, 0, 0])), x), x, atol=0)


def test_quarter_turn_about_z():
    u = Versor(ga.rotor([0, 0, 1], np.pi / 2))
    np.testing.assert_allclose(ga.sandwich(u, ga.embed_point([1, 0, 0])), ga.embed_point([0, 1, 0]), atol=1e-15)


def test_origin_and_pure_translation():
    o = ga.embed_point([0, 0, 0])
    assert np.array_equal(o, np.eye(16)[14])
    u = ga.motor_from_pose(rot6d_encode(np.eye(3)), [1, 2, 3])
    np.testing.assert_allclose(ga.sandwich(u, o), ga.embed_point([1, 2, 3]), atol=1e-15)


def test_motor_matches_matrix_oracle_1000_points():
    rng = np.random.default_rng(3)
    pts = rng.normal(size=(1000, 3))
    for _ in range(5):
        r6, p = rng.normal(size=6), rng.normal(size=3)
        rot = oracles.gram_schmidt(r6)
        got = ga.extract_point(ga.sandwich(ga.motor_from_pose(r6, p), ga.embed_point(pts)))
        assert np.max(np.abs(got - (pts @ rot.T + p))) < 1e-9


def test_rotor_matches_rodrigues():
    rng = np.random.default_rng(4)
    for _ in range(10):
        axis, angle = rng.normal(size=3), rng.uniform(-np.pi, np.pi)
        pts = rng.normal(size=(20, 3))
        got = ga.extract_point(ga.sandwich(Versor(ga.rotor(axis, angle)), ga.embed_point(pts)))
        np.testing.assert_allclose(got, pts @ oracles.rotation_about(axis, angle).T, atol=1e-12)


def test_composition_law():
    rng = np.random.default_rng(5)
    pts = rng.normal(size=(10, 3))
    for _ in range(10):
        u, v = random_motor(rng), random_motor(rng)
        both = ga.extract_point(ga.sandwich(u * v, ga.embed_point(pts)))
        seq = ga.extract_point(ga.sandwich(u, ga.sandwich(v, ga.embed_point(pts))))
        assert np.max(np.abs(both - seq)) < 1e-9
        expect = (pts @ v.matrix().T + v.translation()) @ u.matrix().T + u.translation()
        assert np.max(np.abs(both - expect)) < 1e-9


def test_reflection_mirrors_points():
    u = ga.reflection([1, 0, 0], -0.5)  # plane x = 0.5
    got = ga.sandwich(u, ga.embed_point([2.0, 1.0, -1.0]))
    np.testing.assert_allclose(got / got[14], ga.embed_point([-1.0, 1.0, -1.0]), atol=1e-14)


def test_directions_ignore_translation():
    d = ga.embed_direction([0.3, -0.2, 0.9])
    u = Versor(ga.translator([5, -1, 2]))
    np.testing.assert_allclose(ga.sandwich(u, d), d, atol=1e-14)


def test_non_unit_versor_rejected():
    with pytest.raises(ga.InvalidInputError):
        Versor(2 * np.eye(16)[0])
    with pytest.raises(ga.InvalidInputError):
        Versor(np.eye(16)[0] + np.eye(16)[1] * 0.5 + np.eye(16)[5] * 0.3)  # mixed parity


def test_extract_point_on_ideal_point():
    with pytest.raises(ga.DegeneratePointError):
        ga.extract_point(ga.embed_direction([1, 0, 0]))


@settings(max_examples=40, deadline=None)
@given(arrays(np.float64, 3, elements=finite))
def test_embed_extract_roundtrip(p):
    assert np.array_equal(ga.extract_point(ga.embed_point(p)), p)
    assert np.array_equal(ga.extract_direction(ga.embed_direction(p)), p)


def test_inner_invariant():
    assert ga.inner_invariant(np.eye(16)[0], np.eye(16)[0]) == 1
    assert ga.inner_invariant(np.eye(16)[1], np.eye(16)[1]) == 0
    rng = np.random.default_rng(6)
    for _ in range(100):
        u = random_motor(rng) if rng.random() < 0.7 else ga.reflection(rng.normal(size=3), rng.normal())
        a, b = rng.normal(size=(2, 16))
        before = ga.inner_invariant(a, b)
        after = ga.inner_invariant(ga.sandwich(u, a), ga.sandwich(u, b))
        assert abs(after - before) < 1e-10 * (1 + abs(before))


def test_versor_unit_norm():
    rng = np.random.default_rng(7)
    for _ in range(20):
        u = random_motor(rng)
        assert abs(ga.inner_invariant(u.coeffs, u.coeffs) - 1) < 1e-9


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_sandwich_preserves_grade_of_embeddings(seed):
    rng = np.random.default_rng(seed)
    u = random_motor(rng)
    for x in (ga.embed_point(rng.normal(size=3)), ga.embed_direction(rng.normal(size=3)),
              ga.embed_plane(rng.normal(size=3), rng.normal())):
        grade = set(ga.GRADES[np.abs(x) > 0])
        y = ga.sandwich(u, x)
        assert set(ga.GRADES[np.abs(y) > 1e-12 * np.abs(y).max()]) <= grade


def test_outputs_finite_on_large_inputs():
    a = np.full(16, 1e100)
    assert np.all(np.isfinite(ga.geometric_product(a, np.eye(16)[0])))
