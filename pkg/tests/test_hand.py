import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.spatial.transform import Rotation

from equigrasp.algebra import InvalidInputError
from equigrasp.hand import (
    DegenerateRotationError,
    Grasp,
    HandSpec,
    Joint,
    fingertips,
    forward_kinematics,
    rot6d_decode,
    rot6d_encode,
    toy_hand,
)
from equigrasp.physics import transform_grasp

from . import oracles


def test_rot6d_examples():
    assert np.array_equal(rot6d_decode([1, 0, 0, 0, 1, 0]), np.eye(3))
    r = np.random.default_rng(0).normal(size=6)
    np.testing.assert_allclose(rot6d_decode(5 * r), rot6d_decode(r), atol=1e-15)


def test_rot6d_roundtrip_1000_rotations():
    rots = Rotation.random(1000, random_state=1).as_matrix()
    back = rot6d_decode(rot6d_encode(rots))
    assert np.max(np.abs(back - rots)) < 1e-12
    raw = np.random.default_rng(2).normal(size=(1000, 6))
    dec = rot6d_decode(raw)
    np.testing.assert_allclose(dec @ np.swapaxes(dec, -1, -2), np.broadcast_to(np.eye(3), dec.shape), atol=1e-9)
    np.testing.assert_allclose(np.linalg.det(dec), 1.0, atol=1e-9)
    np.testing.assert_allclose(rot6d_decode(rot6d_encode(dec)), dec, atol=1e-12)
    np.testing.assert_allclose(rot6d_decode(3.5 * raw), dec, atol=1e-12)


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_decode_matches_gram_schmidt_oracle(seed):
    r = np.random.default_rng(seed).normal(size=6)
    np.testing.assert_allclose(rot6d_decode(r), oracles.gram_schmidt(r), atol=1e-12)


def test_degenerate_rotation_names_column():
    with pytest.raises(DegenerateRotationError, match="a1"):
        rot6d_decode([0, 0, 0, 0, 1, 0])
    with pytest.raises(DegenerateRotationError, match="a2"):
        rot6d_decode([1, 0, 0, 2, 0, 0])


def test_toy_hand_structure():
    hand = toy_hand(2, 2)
    assert hand.dof == 4
    assert np.all(hand.q_low < hand.q_up)
    assert np.allclose(hand.q_up, np.pi / 2) and np.all(hand.q_low == 0)
    assert np.all(hand.sphere_radii() == 0.006)
    assert toy_hand(3, 2).dof == 6
    for bad in ((1, 2), (2, 0), (2.5, 1)):
        with pytest.raises(InvalidInputError):
            toy_hand(*bad)


def test_fingertips_at_rest_are_two_phalanges_from_knuckles():
    hand = toy_hand(4, 2)
    g = Grasp([1, 0, 0, 0, 1, 0], np.zeros(3), np.zeros(4 * 2))
    tips = fingertips(hand, g)
    for f, tip in enumerate(tips):
        phi = 2 * np.pi * f / 4
        knuckle = 0.02 * np.array([np.cos(phi), np.sin(phi), 0])
        assert np.linalg.norm(tip - knuckle) == pytest.approx(0.04, abs=1e-15)
        np.testing.assert_allclose((tip - knuckle) / 0.04, knuckle / 0.02, atol=1e-14)


def test_fk_reference_and_translation():
    hand = toy_hand()
    ident = Grasp([1, 0, 0, 0, 1, 0], np.zeros(3), np.zeros(4))
    centers, radii = forward_kinematics(hand, ident)
    ref = np.array([c for link in hand.links for c, _ in hand.spheres.get(link, ())])
    # reference positions: each link's sphere offsets placed along its rest chain
    assert len(centers) == len(radii) == hand.num_spheres
    shifted, _ = forward_kinematics(hand, Grasp(ident.r, [0.1, -0.2, 0.3], ident.q))
    np.testing.assert_allclose(shifted, centers + [0.1, -0.2, 0.3], atol=1e-15)
    # palm spheres are given in the palm frame and coincide with the reference
    np.testing.assert_array_equal(centers[:5], ref[:5])


def test_fk_joint_curl_direction():
    hand = toy_hand(2, 1)
    g = Grasp([1, 0, 0, 0, 1, 0], np.zeros(3), [np.pi / 2, 0])
    tips = fingertips(hand, g)
    np.testing.assert_allclose(tips[0], [0.02, 0, 0.02], atol=1e-15)


def test_fk_rigid_equivariance():
    rng = np.random.default_rng(3)
    hand = toy_hand(3, 2)
    for _ in range(20):
        g = Grasp(rng.normal(size=6), rng.normal(size=3) * 0.1, rng.uniform(0, 1.5, hand.dof))
        rot, t = Rotation.random(random_state=rng).as_matrix(), rng.normal(size=3)
        a, ra = forward_kinematics(hand, transform_grasp(g, rot, t))
        b, rb = forward_kinematics(hand, g)
        assert np.max(np.abs(a - (b @ rot.T + t))) < 1e-9
        assert np.array_equal(ra, rb)


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_sphere_count_independent_of_configuration(seed):
    rng = np.random.default_rng(seed)
    hand = toy_hand(int(rng.integers(2, 5)), int(rng.integers(1, 4)))
    g = Grasp(rng.normal(size=6), rng.normal(size=3), rng.normal(size=hand.dof) * 3)
    centers, radii = forward_kinematics(hand, g)
    assert centers.shape == (hand.num_spheres, 3) and radii.shape == (hand.num_spheres,)


def test_fk_rejects_wrong_joint_count():
    with pytest.raises(InvalidInputError):
        forward_kinematics(toy_hand(), Grasp(np.eye(3)[:2].ravel(), np.zeros(3), np.zeros(3)))


def test_handspec_validation():
    j = Joint("j", "palm", "a", (0, 0, 1), (0, 0, 0), 0.0, 1.0)
    with pytest.raises(InvalidInputError):
        HandSpec((Joint("j", "nowhere", "a", (0, 0, 1), (0, 0, 0), 0.0, 1.0),))
    with pytest.raises(InvalidInputError):
        HandSpec((j, Joint("k", "palm", "a", (0, 0, 1), (0, 0, 0), 0.0, 1.0)))
    with pytest.raises(InvalidInputError):
        HandSpec((Joint("j", "palm", "a", (0, 0, 1), (0, 0, 0), 1.0, 1.0),))
    with pytest.raises(InvalidInputError):
        HandSpec((j,), {"a": (((0, 0, 0), 0.0),)})
    with pytest.raises(InvalidInputError):
        HandSpec((j,), {"b": (((0, 0, 0), 1.0),)})


def test_handspec_text_roundtrip(tmp_path):
    hand = toy_hand(3, 2)
    assert HandSpec.loads(hand.dumps()) == hand
    hand.save(tmp_path / "hand.json")
    assert HandSpec.load(tmp_path / "hand.json") == hand
    assert '"limits"' in hand.dumps() and '"radius"' in hand.dumps()
