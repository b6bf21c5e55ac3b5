import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from stablecone.cone import ConeSpec, axis_angle, contains, dist_to_boundary, sample_interior_grid


def _dist_to_ray(p, u):
    t = p @ u
    return np.linalg.norm(p - t * u) if t > 0 else np.linalg.norm(p)


def _brute_distance(theta, x):
    """Distance to the two boundary rays in the plane spanned by e_d and x."""
    lat = np.linalg.norm(x[:-1])
    p = np.array([lat, x[-1]])
    rays = [np.array([math.sin(theta), math.cos(theta)]),
            np.array([-math.sin(theta), math.cos(theta)])]
    return min(_dist_to_ray(p, u) for u in rays)


angles = st.floats(0.05, math.pi - 0.05)
coords = st.floats(-50, 50, allow_nan=False, allow_infinity=False)


def test_validation():
    with pytest.raises(ValueError):
        ConeSpec(2, 0.0)
    with pytest.raises(ValueError):
        ConeSpec(2, math.pi)
    with pytest.raises(ValueError):
        ConeSpec(1, 1.0)
    with pytest.raises(ValueError):
        ConeSpec(0, 1.0)
    assert ConeSpec(1, math.pi / 2).is_halfspace


def test_halfspace_membership_and_distance():
    c = ConeSpec(3, math.pi / 2)
    assert contains(c, [5.0, -3.0, 0.1])
    assert not contains(c, [1.0, 1.0, 0.0])
    assert dist_to_boundary(c, np.array([[1.0, 2.0, 3.0]]))[0] == 3.0
    assert c.cos_theta == 0.0


@settings(max_examples=300, deadline=None)
@given(theta=angles, x=st.lists(coords, min_size=3, max_size=3))
def test_membership_matches_angle(theta, x):
    x = np.array(x)
    if np.linalg.norm(x) < 1e-6:
        return
    c = ConeSpec(3, theta)
    ang = math.acos(np.clip(x[-1] / np.linalg.norm(x), -1, 1))
    if abs(ang - theta) > 1e-9:
        assert contains(c, x) == (ang < theta)


@settings(max_examples=300, deadline=None)
@given(theta=angles, x=st.lists(coords, min_size=3, max_size=3),
       scale=st.floats(0.01, 100), rot=st.floats(0, 2 * math.pi))
def test_distance_matches_brute_force_and_symmetries(theta, x, scale, rot):
    c = ConeSpec(3, theta)
    x = np.array(x)
    if np.linalg.norm(x) < 1e-3 or not contains(c, x) or axis_angle(x) > theta - 1e-6:
        return
    d = dist_to_boundary(c, x)
    assert d == pytest.approx(_brute_distance(theta, x), rel=1e-9, abs=1e-12)
    # homogeneous of degree one, invariant under rotations about the axis
    assert dist_to_boundary(c, scale * x) == pytest.approx(scale * d, rel=1e-9)
    R = np.array([[math.cos(rot), -math.sin(rot), 0], [math.sin(rot), math.cos(rot), 0], [0, 0, 1]])
    assert dist_to_boundary(c, R @ x) == pytest.approx(d, rel=1e-9, abs=1e-12)


def test_distance_rejects_exterior():
    with pytest.raises(ValueError):
        dist_to_boundary(ConeSpec(2, 0.5), [1.0, 0.0])


def test_axis_angle_accuracy_near_axis():
    assert axis_angle(np.array([1e-12, 1.0])) == pytest.approx(1e-12, rel=1e-9)
    assert axis_angle(np.array([1.0, 0.0])) == pytest.approx(math.pi / 2)


def test_interior_grid():
    c = ConeSpec(3, math.pi / 4)
    pts = sample_interior_grid(c, [1.0, 2.0], [0.0, 0.3, 0.6])
    assert pts.shape == (6, 3)
    assert np.all(contains(c, pts))
    assert np.allclose(np.linalg.norm(pts, axis=1), [1, 1, 1, 2, 2, 2])
    assert np.allclose(axis_angle(pts), [0, 0.3, 0.6] * 2)
    with pytest.raises(ValueError):
        sample_interior_grid(c, [1.0], [math.pi / 4])
