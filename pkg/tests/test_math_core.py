import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from blockfusion.math_core import (Intrinsics, Pose, depth_to_points, look_at,
                                   orthonormalize, pose_increment, project, rodrigues,
                                   rotation_angle, skew, unproject)

finite = st.floats(-3.0, 3.0, allow_nan=False)
vec3 = st.tuples(finite, finite, finite).map(np.array)


def random_pose(seed):
    r = np.random.default_rng(seed)
    return Pose(rodrigues(r.normal(size=3)), r.normal(size=3))


@given(vec3)
def test_rodrigues_is_rotation(w):
    r = rodrigues(w)
    assert np.allclose(r.T @ r, np.eye(3), atol=1e-12)
    assert np.isclose(np.linalg.det(r), 1.0)


@given(vec3)
def test_rodrigues_angle_and_axis(w):
    theta = np.linalg.norm(w)
    r = rodrigues(w)
    # angle is theta folded into [0, pi]
    folded = theta % (2 * np.pi)
    folded = min(folded, 2 * np.pi - folded)
    assert rotation_angle(r) == pytest.approx(folded, abs=1e-7)
    assert np.allclose(r @ w, w, atol=1e-9)


def test_rodrigues_matches_expm_series():
    w = np.array([0.3, -0.2, 0.5])
    k = skew(w)
    expm = np.eye(3)
    term = np.eye(3)
    for n in range(1, 30):
        term = term @ k / n
        expm = expm + term
    assert np.allclose(rodrigues(w), expm, atol=1e-14)


@pytest.mark.parametrize("scale", [1e-12, 0.999e-8, 1.001e-8, 1e-6])
def test_small_angles_match_high_precision(scale):
    mpmath = pytest.importorskip("mpmath")
    mpmath.mp.dps = 40
    w = np.array([1.0, 2.0, -1.0]) / np.sqrt(6) * scale
    theta = mpmath.sqrt(sum(mpmath.mpf(v) ** 2 for v in w))
    k = mpmath.matrix(skew(w).tolist())
    exact = (mpmath.eye(3) + (mpmath.sin(theta) / theta) * k
             + ((1 - mpmath.cos(theta)) / theta ** 2) * (k * k))
    expected = np.array(exact.tolist(), dtype=np.float64)
    assert np.allclose(rodrigues(w), expected, rtol=0, atol=1e-16)


def test_skew_is_cross_product():
    a, b = np.array([1.0, 2.0, 3.0]), np.array([-2.0, 0.5, 4.0])
    assert np.allclose(skew(a) @ b, np.cross(a, b))


def test_rotation_angle_near_pi():
    r = rodrigues([0.0, np.pi - 1e-9, 0.0])
    assert rotation_angle(r) == pytest.approx(np.pi, abs=1e-8)


@given(st.integers(0, 10_000))
def test_pose_inverse_and_composition(seed):
    p, q = random_pose(seed), random_pose(seed + 1)
    assert (p @ p.inverse()).allclose(Pose.identity(), atol=1e-12)
    x = np.random.default_rng(seed).normal(size=(5, 3))
    assert np.allclose((p @ q).apply(x), p.apply(q.apply(x)))
    assert np.allclose(p.inverse().apply(p.apply(x)), x)


def test_pose_matrix_roundtrip_and_immutability():
    p = random_pose(3)
    assert Pose.from_matrix(p.matrix).allclose(p, atol=0)
    with pytest.raises(ValueError):
        p.rotation[0, 0] = 2.0


def test_camera_centre_maps_to_origin():
    p = random_pose(7)
    assert np.allclose(p.apply(p.centre), 0.0, atol=1e-12)


def test_orthonormalize_projects_onto_rotations():
    r = rodrigues([0.1, 0.2, 0.3])
    noisy = r + 1e-3 * np.random.default_rng(0).normal(size=(3, 3))
    fixed = orthonormalize(noisy)
    assert Pose(fixed, np.zeros(3)).is_orthonormal(1e-12)
    assert np.linalg.norm(fixed - r) < 5e-3
    # reflections are turned into proper rotations
    assert np.linalg.det(orthonormalize(np.diag([1.0, 1.0, -1.0]))) > 0


def test_pose_increment_identity_twist():
    p = random_pose(9)
    assert pose_increment(p, np.zeros(6)).allclose(p, atol=1e-12)


def test_pose_increment_stays_orthonormal_after_many_steps():
    p = Pose.identity()
    r = np.random.default_rng(5)
    for _ in range(10_000):
        p = pose_increment(p, 1e-2 * r.normal(size=6))
    assert p.is_orthonormal(1e-9)


def test_look_at_axes():
    p = look_at((0.0, 0.0, -2.0), (0.0, 0.0, 0.0))
    assert np.allclose(p.apply([0.0, 0.0, 0.0]), [0.0, 0.0, 2.0])
    # world up projects to image up (negative camera y)
    assert p.rotation[1] @ np.array([0.0, 1.0, 0.0]) < 0


def test_project_unproject_roundtrip():
    intr = Intrinsics(500.0, 510.0, 320.0, 240.0, 640, 480)
    px = np.array([[10.0, 20.0], [320.0, 240.0], [600.5, 3.25]])
    pts = unproject(intr, px, np.array([1.0, 2.0, 0.5]))
    assert np.allclose(project(intr, pts), px)
    assert np.allclose(project(intr, [0.0, 0.0, 1.0]), [320.0, 240.0])


def test_depth_to_points_shape():
    intr = Intrinsics(100.0, 100.0, 1.5, 1.0, 4, 3)
    pts = depth_to_points(intr, np.full((3, 4), 2.0))
    assert pts.shape == (3, 4, 3)
    assert np.allclose(pts[..., 2], 2.0)
    assert np.allclose(pts[1, 0], [-0.03, 0.0, 2.0])


def test_downsampled_intrinsics():
    intr = Intrinsics(500.0, 500.0, 319.5, 239.5, 640, 480)
    d = intr.downsampled(1)
    assert (d.width, d.height) == (320, 240)
    assert (d.fx, d.cx, d.cy) == (250.0, 159.5, 119.5)
    assert intr.downsampled(0) == intr


@pytest.mark.parametrize("bad", [dict(fx=0.0), dict(cx=700.0), dict(cy=-1.0)])
def test_intrinsics_validation(bad):
    args = dict(fx=1.0, fy=1.0, cx=1.0, cy=1.0, width=4, height=4) | bad
    with pytest.raises(ValueError):
        Intrinsics(**args)


@settings(max_examples=50)
@given(st.integers(0, 10_000))
def test_rotation_angle_of_composition(seed):
    r = np.random.default_rng(seed)
    axis = r.normal(size=3)
    axis /= np.linalg.norm(axis)
    a, b = r.uniform(0, 1.5, size=2)
    assert rotation_angle(rodrigues(axis * a) @ rodrigues(axis * b)) == pytest.approx(a + b)
