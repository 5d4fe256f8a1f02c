import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from cosurf.config import SurfelConfig
from cosurf.frame import RgbdFrame
from cosurf.geometry import Intrinsics, RigidTransform
from cosurf.scene import render_synthetic_frame
from cosurf.scenarios import look_at, textured_room
from cosurf.surfelmap import (NEVER, Region, SurfelMap, advance_time, apply_transform, contribution_colors,
                              export_ply, fuse_frame, load_map, predict_view, read_ply, save_map)

from oracles import homogeneous_directions, homogeneous_points, random_matrix_poses

K200 = Intrinsics(200.0, 200.0, 20.0, 20.0, 41, 41)
I = RigidTransform.identity()


def one_surfel_map(z=1.0, radius=0.01, weight=20.0, n_cameras=1, time=0):
    m = SurfelMap(n_cameras)
    m.add([0, 0, z], [0, 0, -1], radius, weight, [10, 20, 30], time, 0, time)
    m.advance_time(0, time)
    return m


def random_map(rng, n=200, n_cameras=2):
    m = SurfelMap(n_cameras)
    nrm = rng.normal(size=(n, 3))
    nrm /= np.linalg.norm(nrm, axis=1, keepdims=True)
    m.add(rng.uniform(-1, 1, (n, 3)), nrm, rng.uniform(0.001, 0.02, n), rng.uniform(0, 20, n),
          rng.integers(0, 256, (n, 3)), 3, 0, 3)
    return m


def flat_frame(z, k=K200, camera=0, index=0):
    h, w = k.shape
    return RgbdFrame(camera, index, 0.0, np.full((h, w, 3), 100, np.uint8), np.full((h, w), z), k)


def test_empty_map_predicts_empty_view():
    v = predict_view(SurfelMap(), 0, I, K200)
    assert not v.depth.any() and v.valid_count == 0


def test_single_surfel_splat_radius():
    v = predict_view(one_surfel_map(), 0, I, K200)
    # radius 0.01 m at z = 1 with f = 200 covers 2 px
    dv, du = np.nonzero(v.valid)
    r2 = (du - 20) ** 2 + (dv - 20) ** 2
    assert r2.max() == 4
    assert v.valid_count == 13
    np.testing.assert_allclose(v.depth[v.valid], 1.0)
    assert np.all(v.index[v.valid] == 0)


def test_splat_radius_has_one_pixel_floor():
    v = predict_view(one_surfel_map(radius=1e-5), 0, I, K200)
    assert v.valid_count == 5


def test_zbuffer_keeps_nearest():
    m = one_surfel_map(z=2.0, radius=0.04)
    m.add([0, 0, 1.0], [0, 0, -1], 0.01, 20.0, [0, 0, 0], 0, 0, 0)
    v = predict_view(m, 0, I, K200)
    assert v.depth[20, 20] == 1.0 and v.index[20, 20] == 1
    assert v.depth[20, 23] == 2.0 and v.index[20, 23] == 0


def test_stability_gating():
    m = one_surfel_map(weight=5.0)
    assert predict_view(m, 0, I, K200).valid_count == 0
    assert predict_view(m, 0, I, K200, stable_only=False).valid_count == 13


def test_fuse_weighted_average():
    m = one_surfel_map(weight=1.0)
    stats = fuse_frame(m, flat_frame(1.01), I, 1)
    s = m.surfel(0)
    np.testing.assert_allclose(s.position, [0, 0, 1.005], atol=1e-12)
    assert s.weight == pytest.approx(2.0)
    assert s.last_seen == (1,)
    assert stats.updated == 1


def test_fuse_identical_frame_twice_merges():
    room = textured_room()
    k = Intrinsics.default(80, 60)
    pose = look_at([0, 0.3, 0], [0.3, 0.5, 1.5])
    f = render_synthetic_frame(room, pose, k)
    m = SurfelMap()
    first = fuse_frame(m, f, pose, 0)
    w1 = m.weights.copy()
    m.advance_time(0, 1)
    second = fuse_frame(m, f, pose, 1)
    assert first.merged == 0 and first.inserted == len(m) - second.inserted
    assert second.inserted <= 0.01 * first.inserted
    assert second.merged >= 0.99 * first.inserted
    seen_again = m.last_seen[: len(w1), 0] == 1
    assert seen_again.mean() > 0.99
    np.testing.assert_allclose(m.weights[: len(w1)][seen_again], 2 * w1[seen_again], rtol=1e-12)


def test_fusion_is_per_camera():
    k = Intrinsics.default(80, 60)
    pose = look_at([0, 0.3, 0], [0.3, 0.5, 1.5])
    f = render_synthetic_frame(textured_room(), pose, k, camera_id=0)
    m = SurfelMap(2)
    fuse_frame(m, f, pose, 0)
    m.advance_time(1, 0)
    assert not m.region_mask(1, Region.ACTIVE).any()
    assert np.all(m.last_seen[:, 1] == NEVER)
    assert predict_view(m, 1, pose, k, stable_only=False).valid_count == 0
    before = m.last_seen[:, 0].copy()
    f1 = render_synthetic_frame(textured_room(), pose, k, camera_id=1)
    m.advance_time(1, 7)
    fuse_frame(m, f1, pose, 7)
    np.testing.assert_array_equal(m.last_seen[: len(before), 0], before)


def test_fuse_rejects_bad_input():
    m = one_surfel_map()
    bent = RigidTransform(np.diag([1.0, 1.0, 1.001]), np.zeros(3))
    with pytest.raises(ValueError):
        fuse_frame(m, flat_frame(1.0), bent, 1)
    with pytest.raises(ValueError):
        fuse_frame(m, flat_frame(1.0, camera=3), I, 1)


def test_advance_time_window_is_inclusive():
    m = SurfelMap(config=SurfelConfig(delta_t=20))
    m.add([0, 0, 1], [0, 0, -1], 0.01, 1.0, [0, 0, 0], 5, 0, 5)
    for now, active in [(10, True), (25, True), (26, False)]:
        advance_time(m, 0, now)
        assert m.region_mask(0, Region.ACTIVE).tolist() == [active]
        assert m.region_mask(0, Region.INACTIVE).tolist() == [not active]
    with pytest.raises(ValueError):
        advance_time(m, 0, 25)


@given(st.integers(0, 50), st.integers(0, 30), st.lists(st.integers(-1, 60), min_size=1, max_size=30))
def test_regions_partition_the_map(now, delta, seen):
    m = SurfelMap(config=SurfelConfig(delta_t=delta))
    for t in seen:
        i = m.add([0, 0, 1], [0, 0, -1], 0.01, 1.0, [0, 0, 0], 0, 0, 0)
        m.touch(i, 0, t)
    m.advance_time(0, now)
    a = m.region_mask(0, Region.ACTIVE)
    b = m.region_mask(0, Region.INACTIVE)
    assert not np.any(a & b) and np.all(a | b)
    expected = [(t != NEVER) and (now - t <= delta) for t in seen]
    assert a.tolist() == expected


def test_apply_transform_examples():
    rng = np.random.default_rng(0)
    m = random_map(rng)
    ref = m.copy()
    apply_transform(m, I)
    assert m.state_equal(ref)
    apply_transform(m, RigidTransform.from_translation([1, 0, 0]))
    np.testing.assert_allclose(m.positions, ref.positions + [1, 0, 0], atol=1e-15)
    np.testing.assert_array_equal(m.normals, ref.normals)
    for mat in random_matrix_poses(rng, 5):
        m = ref.copy()
        apply_transform(m, RigidTransform.from_matrix(mat))
        np.testing.assert_allclose(m.positions, homogeneous_points(mat, ref.positions), atol=1e-9)
        np.testing.assert_allclose(m.normals, homogeneous_directions(mat, ref.normals), atol=1e-9)
        for name in ("radii", "weights", "colors", "init_times", "last_seen"):
            np.testing.assert_array_equal(getattr(m, name), getattr(ref, name))
        d0 = np.linalg.norm(ref.positions[1:] - ref.positions[:-1], axis=1)
        d1 = np.linalg.norm(m.positions[1:] - m.positions[:-1], axis=1)
        np.testing.assert_allclose(d1, d0, atol=1e-9)
        ip0 = np.sum(ref.normals[:-1] * (ref.positions[1:] - ref.positions[:-1]), axis=1)
        ip1 = np.sum(m.normals[:-1] * (m.positions[1:] - m.positions[:-1]), axis=1)
        np.testing.assert_allclose(ip1, ip0, atol=1e-9)


def test_ply_empty_map():
    ply = read_ply(export_ply(SurfelMap()))
    assert len(ply.vertices) == 0
    assert ply.names == ["x", "y", "z", "nx", "ny", "nz", "radius", "red", "green", "blue"]


def test_ply_contribution_colours():
    m = SurfelMap(3)
    m.add([0, 0, 1], [0, 0, -1], 0.01, 1.0, [9, 9, 9], 0, 0, 0)
    m.add([0, 0, 2], [0, 0, -1], 0.01, 1.0, [9, 9, 9], 0, 0, 0)
    m.touch([1], 1, 4)
    ply = read_ply(export_ply(m, "contribution"))
    np.testing.assert_array_equal(ply.column("red", "green", "blue"), [[255, 0, 0], [127, 127, 0]])
    np.testing.assert_array_equal(contribution_colors(m)[1], [127, 127, 0])
    with pytest.raises(ValueError):
        export_ply(m, "rainbow")


def test_ply_colour_mode_and_stable_filter():
    m = SurfelMap()
    m.add([[0, 0, 1], [0, 1, 1]], [[0, 0, -1], [0, 0, -1]], [0.01, 0.02], [1.0, 50.0],
          [[10.4, 20.6, 30], [1, 2, 3]], 0, 0, 0)
    ply = read_ply(export_ply(m))
    np.testing.assert_array_equal(ply.column("red", "green", "blue"), [[10, 21, 30], [1, 2, 3]])
    np.testing.assert_allclose(ply.column("radius")[:, 0], [0.01, 0.02])
    stable = read_ply(export_ply(m, stable_only=True))
    np.testing.assert_allclose(stable.points, [[0, 1, 1]])


def test_save_load_round_trip(tmp_path):
    m = random_map(np.random.default_rng(1))
    m.touch([3, 4], 1, 9)
    m.advance_time(1, 9)
    save_map(m, tmp_path / "m.npz")
    back = load_map(tmp_path / "m.npz")
    assert back.state_equal(m)
    np.testing.assert_array_equal(back.now, m.now)


def test_extend_and_grow_cameras():
    a = one_surfel_map()
    b = random_map(np.random.default_rng(2), n=5000, n_cameras=3)
    a.extend(b)
    assert len(a) == 5001 and a.n_cameras == 3
    assert a.last_seen[0].tolist() == [0, NEVER, NEVER]
    np.testing.assert_array_equal(a.positions[1:], b.positions)
