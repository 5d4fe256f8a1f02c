import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from cosurf.geometry import (REORTHO_EVERY, Intrinsics, RigidTransform, backproject, compose, exp_se3, invert,
                             log_se3, pose_error, project, project_points)

from oracles import expm_twist, random_matrix_pose, random_matrix_poses

K500 = Intrinsics(500.0, 500.0, 320.0, 240.0, 640, 480)

finite = st.floats(-1.0, 1.0, allow_nan=False)
twists = st.lists(finite, min_size=6, max_size=6).map(np.array)


def rt(m):
    return RigidTransform.from_matrix(m)


def test_identity_is_neutral():
    t = rt(random_matrix_pose(np.random.default_rng(0)))
    assert compose(RigidTransform.identity(), t).allclose(t)
    assert compose(t, RigidTransform.identity()).allclose(t)


def test_compose_matches_homogeneous_product():
    rng = np.random.default_rng(1)
    for a, b in zip(random_matrix_poses(rng, 50), random_matrix_poses(rng, 50)):
        np.testing.assert_allclose(compose(rt(a), rt(b)).matrix, a @ b, atol=1e-12)


def test_compose_applies_right_operand_first():
    rot = rt(expm_twist(np.array([0, 0, 0, 0, 0, math.pi / 2])))
    shift = RigidTransform.from_translation([1.0, 0, 0])
    np.testing.assert_allclose((rot @ shift).apply([0.0, 0, 0]), [0, 1, 0], atol=1e-12)


def test_invert_examples():
    assert invert(RigidTransform.identity()).allclose(RigidTransform.identity())
    np.testing.assert_array_equal(invert(RigidTransform.from_translation([1, 2, 3])).translation, [-1, -2, -3])
    rng = np.random.default_rng(2)
    for m in random_matrix_poses(rng, 50):
        t = rt(m)
        np.testing.assert_allclose(invert(t).matrix, np.linalg.inv(m), atol=1e-12)
        assert (t @ invert(t)).allclose(RigidTransform.identity())


def test_associativity():
    rng = np.random.default_rng(3)
    ms = random_matrix_poses(rng, 60)
    for a, b, c in ms.reshape(20, 3, 4, 4):
        a, b, c = rt(a), rt(b), rt(c)
        assert ((a @ b) @ c).allclose(a @ (b @ c))


def test_long_chain_stays_orthonormal():
    rng = np.random.default_rng(4)
    steps = [rt(m) for m in random_matrix_poses(rng, 64, 0.01)]
    t = RigidTransform.identity()
    worst = 0.0
    for i in range(10_000):
        t = t @ steps[i % len(steps)]
        worst = max(worst, t.orthonormality_error())
    assert worst < 1e-9
    assert np.linalg.det(t.rotation) == pytest.approx(1.0, abs=1e-9)
    assert t.chain < REORTHO_EVERY


def test_normals_keep_unit_length():
    rng = np.random.default_rng(5)
    n = rng.normal(size=(100, 3))
    n /= np.linalg.norm(n, axis=1, keepdims=True)
    for m in random_matrix_poses(rng, 10):
        np.testing.assert_allclose(np.linalg.norm(rt(m).rotate(n), axis=1), 1.0, atol=1e-9)


def test_project_examples():
    np.testing.assert_allclose(project([0, 0, 1], K500), [320, 240])
    assert project([0, 0, -1], K500) is None
    np.testing.assert_allclose(project([0.5, 0.25, 2], K500), [445, 302.5])


def test_project_out_of_bounds_and_near_plane():
    assert project([0, 0, 0.05], K500) is None
    assert project([10.0, 0, 1], K500) is None
    _, valid = project_points(np.array([[0, 0, 1.0], [0, 0, 0.01], [-1, 0, 1.0]]), K500)
    assert valid.tolist() == [True, False, False]


def test_backproject_examples():
    np.testing.assert_allclose(backproject([320, 240], 1.0, K500), [0, 0, 1])
    np.testing.assert_allclose(backproject([445, 302.5], 2.0, K500), [0.5, 0.25, 2])
    for z in (0.0, -1.0):
        with pytest.raises(ValueError):
            backproject([1, 1], z, K500)


# the exact image border is excluded: rounding in the round trip may land a hair outside it
@given(st.floats(1e-6, 639.9), st.floats(1e-6, 479.9), st.floats(0.06, 9.0))
def test_project_backproject_round_trip(u, v, z):
    p = backproject([u, v], z, K500)
    np.testing.assert_allclose(project(p, K500), [u, v], atol=1e-6)
    np.testing.assert_allclose(backproject(project(p, K500), z, K500), p, atol=1e-9)


def test_exp_examples():
    assert exp_se3(np.zeros(6)).allclose(RigidTransform.identity(), atol=0)
    quarter = exp_se3([0, 0, 0, 0, 0, math.pi / 2])
    np.testing.assert_allclose(quarter.rotation, [[0, -1, 0], [1, 0, 0], [0, 0, 1]], atol=1e-12)
    np.testing.assert_allclose(quarter.translation, 0, atol=1e-15)


@given(twists)
def test_exp_matches_matrix_exponential(xi):
    np.testing.assert_allclose(exp_se3(xi).matrix, expm_twist(xi), atol=1e-10)


def test_log_exp_round_trip_small_twists():
    rng = np.random.default_rng(6)
    for xi in rng.uniform(-0.5, 0.5, (1000, 6)):
        np.testing.assert_allclose(log_se3(exp_se3(xi)), xi, atol=1e-9)


def test_exp_log_round_trip_tiny_angles():
    for scale in (1e-12, 1e-9, 1e-7):
        xi = np.array([0.1, -0.2, 0.3, scale, -scale, 2 * scale])
        np.testing.assert_allclose(log_se3(exp_se3(xi)), xi, atol=1e-12)


def test_exp_log_round_trip_large_random_poses():
    rng = np.random.default_rng(7)
    for m in random_matrix_poses(rng, 200):
        t = rt(m)
        if t.rotation_angle() < math.pi - 1e-3:
            assert exp_se3(log_se3(t)).allclose(t)


def test_log_rejects_half_turn():
    with pytest.raises(ValueError):
        log_se3(exp_se3([0, 0, 0, math.pi, 0, 0]))
    with pytest.raises(ValueError):
        log_se3(exp_se3([0, 0, 0, 0, math.pi - 1e-7, 0]))


def test_quaternion_round_trip():
    rng = np.random.default_rng(8)
    for m in random_matrix_poses(rng, 100):
        t = rt(m)
        q = t.quaternion()
        assert q[3] >= 0
        assert RigidTransform.from_quaternion(t.translation, q).allclose(t, 1e-12)
    with pytest.raises(ValueError):
        RigidTransform.from_quaternion([0, 0, 0], [0, 0, 0, 0])


def test_pose_error():
    a = RigidTransform.identity()
    b = exp_se3([0.3, 0.4, 0, 0, 0, 0.1])
    dt, dr = pose_error(a, b)
    assert dt == pytest.approx(np.linalg.norm(b.translation))
    assert dr == pytest.approx(0.1)


def test_intrinsics_invariants():
    with pytest.raises(ValueError):
        Intrinsics(0.0, 1.0, 1, 1, 4, 4)
    with pytest.raises(ValueError):
        Intrinsics(1.0, 1.0, 4.0, 1, 4, 4)
    k = Intrinsics.default(640, 480)
    assert (k.fx, k.cx, k.cy) == (525.0, 319.5, 239.5)


def test_scaled_intrinsics_preserve_pixel_centres():
    k = Intrinsics.default(160, 120)
    k1, k2 = k.scaled(1), k.scaled(2)
    assert (k1.width, k1.height, k2.width, k2.height) == (80, 60, 40, 30)
    p = np.array([0.1, -0.05, 1.3])
    u0, u1 = project(p, k), project(p, k1)
    np.testing.assert_allclose((u0 + 0.5) / 2 - 0.5, u1, atol=1e-12)
