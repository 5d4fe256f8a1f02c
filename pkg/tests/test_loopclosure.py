import math

import numpy as np
import pytest

from cosurf.collab import map_and_track, new_reference_frame
from cosurf.config import SessionConfig
from cosurf.geometry import Intrinsics, RigidTransform, exp_se3, pose_error
from cosurf.loopclosure import (MergeEvent, close_global_loop, close_local_loop, estimate_from_fern, format_event,
                                inter_map_closure, merge_maps, orient_event, parse_event, search_candidates)
from cosurf.scenarios import look_at, orbit, render_sequence, textured_room, textureless_wall_scene
from cosurf.surfelmap import NEVER, Region, predict_view

K = Intrinsics.default()
CFG = SessionConfig()
POSES = orbit((0.0, 0.3, 0.0), 1.2, 0.0, (0.0, 0.6, 1.5), -10, -4, 4)


def build_ref(ref_id, camera, frames, n_cameras=2):
    ref = new_reference_frame(ref_id, n_cameras, CFG)
    ref.add_camera(camera, POSES[0])
    for step, f in enumerate(frames):
        map_and_track(ref, camera, f, step, CFG)
    return ref


@pytest.fixture(scope="module")
def room_refs():
    f0 = render_sequence(textured_room(), POSES, K, camera_id=0)
    f1 = render_sequence(textured_room(), POSES, K, camera_id=1)
    return build_ref(0, 0, f0), build_ref(1, 1, f1)


@pytest.fixture(scope="module")
def wall_ref():
    wall = [look_at([0, 0, 0.2 + 0.01 * i], [0, 0, 2]) for i in range(3)]
    frames = render_sequence(textureless_wall_scene(), wall, K, camera_id=1)
    ref = new_reference_frame(2, 2, CFG)
    ref.add_camera(1, wall[0])
    for step, f in enumerate(frames):
        map_and_track(ref, 1, f, step, CFG)
    return ref


def _event(**kw):
    base = dict(absorbed=1, survivor=0, transform=exp_se3([0.1, -0.2, 0.3, 0.05, 0.1, -0.02]), camera=1,
                timestep=17, dissimilarity=0.05, final_error=1.25e-4, inliers=4321)
    return MergeEvent(**{**base, **kw})


def test_event_log_round_trip():
    e = _event()
    back = parse_event(format_event(e))
    assert (back.absorbed, back.survivor, back.camera, back.timestep, back.inliers) == (1, 0, 1, 17, 4321)
    assert back.final_error == pytest.approx(1.25e-4)
    assert back.transform.allclose(e.transform, 1e-8)
    with pytest.raises(ValueError):
        parse_event("1 2 3")


def test_inverted_event():
    e = _event()
    inv = e.inverted()
    assert (inv.absorbed, inv.survivor) == (0, 1)
    assert (inv.transform @ e.transform).allclose(RigidTransform.identity())


def test_estimate_from_fern_composition():
    rng = np.random.default_rng(0)
    f, h, c = (exp_se3(rng.normal(0, 0.3, 6)) for _ in range(3))
    t_hat, pose_k = estimate_from_fern(f, h, c)
    assert pose_k.allclose(f @ h.inverse())
    assert (t_hat @ c).allclose(pose_k)


def test_matching_maps_give_identity_merge_without_mutation(room_refs):
    a, b = room_refs
    before = (a.map.copy(), b.map.copy(), len(a.db), len(b.db), dict(b.poses))
    view = b.views[1]
    cands = search_candidates(b, view, [a, b])
    assert [r.id for r, _ in cands] == [0]
    e = inter_map_closure(b, a, 1, view, 9, CFG)
    assert e is not None and (e.absorbed, e.survivor) == (1, 0)
    dt, dr = pose_error(e.transform, RigidTransform.identity())
    assert dt < 0.02 and math.degrees(dr) < 1.0
    assert a.map.state_equal(before[0]) and b.map.state_equal(before[1])
    assert (len(a.db), len(b.db)) == before[2:4]
    assert b.poses == before[4]


def _wall_view(ref):
    # tracking against a bare wall is rejected, so the session keeps no cached view
    assert 1 not in ref.views
    return predict_view(ref.map, 1, ref.poses[1], K, Region.ALL, stable_only=False)


def test_disjoint_scenes_do_not_match(room_refs, wall_ref):
    a, _ = room_refs
    view = _wall_view(wall_ref)
    assert search_candidates(wall_ref, view, [a]) == []
    assert inter_map_closure(wall_ref, a, 1, view, 5, CFG) is None


def test_same_reference_frame_rejected(room_refs):
    a, _ = room_refs
    with pytest.raises(ValueError):
        inter_map_closure(a, a, 0, a.views[0], 0, CFG)


def test_orient_event_prefers_bigger_map(room_refs, wall_ref):
    a, _ = room_refs
    refs = {0: a, 2: wall_ref}
    big_first = orient_event(_event(absorbed=0, survivor=2), refs)
    expected = (2, 0) if len(a.map) > len(wall_ref.map) else (0, 2)
    assert (big_first.absorbed, big_first.survivor) == expected


def test_global_loop_needs_a_fern_match(room_refs, wall_ref):
    view = _wall_view(wall_ref)
    assert close_global_loop(new_reference_frame(5, 1, CFG), 0, view, 100, CFG) is None
    a, _ = room_refs
    before = a.map.copy()
    assert len(a.db) > 0
    assert close_global_loop(a, 0, view, 100, CFG) is None
    assert a.map.state_equal(before)


def test_local_loop_needs_inactive_surface(room_refs):
    a, _ = room_refs
    ref = new_reference_frame(6, 1, CFG)
    ref.map.extend(a.map.copy())
    ref.map.advance_time(0, len(POSES) - 1)
    ref.add_camera(0)
    assert not ref.map.region_mask(0, Region.INACTIVE).any()
    seen = ref.map.last_seen.copy()
    assert close_local_loop(ref, 0, POSES[-1], K, 10, CFG) is None
    np.testing.assert_array_equal(ref.map.last_seen, seen)


def test_merge_with_identity_transform():
    f0 = render_sequence(textured_room(), POSES[:2], K, camera_id=0)
    f1 = render_sequence(textured_room(), POSES[:2], K, camera_id=1)
    a, b = build_ref(0, 0, f0), build_ref(1, 1, f1)
    n_a, n_b, db_a, db_b = len(a.map), len(b.map), len(a.db), len(b.db)
    seen_b = b.map.last_seen.copy()
    pos_b = b.map.positions.copy()
    e = _event(absorbed=1, survivor=0, transform=RigidTransform.identity())
    merged = merge_maps(b, a, e)
    assert merged is a and b.retired and b.cameras == []
    assert len(a.map) == n_a + n_b and len(a.db) == db_a + db_b
    assert a.cameras == [0, 1]
    np.testing.assert_array_equal(a.map.positions[n_a:], pos_b)
    # both cameras keep their own activity: merged-in surfels stay unseen by camera 0 and vice versa
    np.testing.assert_array_equal(a.map.last_seen[n_a:], seen_b)
    assert np.all(a.map.last_seen[n_a:, 0] == NEVER)
    assert np.all(a.map.last_seen[:n_a, 1] == NEVER)
    assert a.frame_counts[1] == 2 and len(a.trajectories[1]) == 2
    view = predict_view(a.map, 1, a.poses[1], K)
    assert view.valid_count > 0
    with pytest.raises(ValueError):
        merge_maps(b, a, e)
