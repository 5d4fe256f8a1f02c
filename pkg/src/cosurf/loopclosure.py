"""Intra-map loop closures, inter-map loop closure and map merging.

Poses are camera-to-reference transforms. An inter-map transform ``T_j^k``
maps points of reference frame ``j`` into reference frame ``k``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .config import SessionConfig
from .deformation import (DeformationGraph, OptimizationResult, SurfaceConstraint, apply_deformation,
                          deform_pose, influence_region, optimize_graph, sample_deformation_graph)
from .fern import Match
from .frame import build_pyramid_from_maps, intensity_of
from .geometry import Intrinsics, RigidTransform, polar_rotation
from .odometry import TrackingResult, check_constrained, track
from .reference import ReferenceFrame
from .surfelmap import ModelView, Region, point_index_map, predict_view

__all__ = [
    "DeformationGraph", "SurfaceConstraint", "sample_deformation_graph", "influence_region",
    "apply_deformation", "optimize_graph", "deform_pose", "LoopClosure", "MergeEvent",
    "close_global_loop", "close_local_loop", "inter_map_closure", "merge_maps", "estimate_from_fern",
    "format_event", "parse_event", "search_candidates", "orient_event",
]


@dataclass(frozen=True)
class LoopClosure:
    kind: str  # global | local
    camera: int
    correction: RigidTransform  # rigid estimate of the applied correction
    tracking: TrackingResult
    optimization: OptimizationResult
    reactivated: int = 0


@dataclass(frozen=True)
class MergeEvent:
    absorbed: int
    survivor: int
    transform: RigidTransform  # absorbed frame -> surviving frame
    camera: int
    timestep: int
    dissimilarity: float
    final_error: float
    inliers: int
    initial_estimate: RigidTransform = field(default=None, compare=False)

    def inverted(self) -> "MergeEvent":
        init = None if self.initial_estimate is None else self.initial_estimate.inverse()
        return MergeEvent(self.survivor, self.absorbed, self.transform.inverse(), self.camera, self.timestep,
                          self.dissimilarity, self.final_error, self.inliers, init)


def format_event(e: MergeEvent) -> str:
    t = e.transform.translation
    q = e.transform.quaternion()
    nums = " ".join(f"{v:.9f}" for v in (*t, *q))
    return f"{e.timestep} {e.camera} {e.absorbed} {e.survivor} {nums} {e.final_error:.9g} {e.inliers}"


def parse_event(line: str) -> MergeEvent:
    parts = line.split()
    if len(parts) != 13:
        raise ValueError(f"session log line needs 13 fields, got {len(parts)}")
    step, cam, src, dst = (int(x) for x in parts[:4])
    vals = [float(x) for x in parts[4:11]]
    t = RigidTransform.from_quaternion(vals[:3], vals[3:])
    return MergeEvent(src, dst, t, cam, step, math.nan, float(parts[11]), int(parts[12]))


# ---------------------------------------------------------------------------
# helpers


def snapshot_pyramid(color, depth, k: Intrinsics, config: SessionConfig):
    return build_pyramid_from_maps(intensity_of(color), np.asarray(depth, float), k,
                                   discontinuity=config.frame.normal_discontinuity)


def _sample_pixels(mask: np.ndarray, n: int) -> np.ndarray:
    """Deterministic uniform subsample of the true pixels of ``mask`` (flat indices)."""
    pix = np.flatnonzero(mask.reshape(-1))
    if len(pix) <= n:
        return pix
    return pix[np.linspace(0, len(pix) - 1, n).round().astype(np.int64)]


def _view_points(view: ModelView, pix: np.ndarray) -> np.ndarray:
    return view.pose.apply(view.vertices.reshape(-1, 3)[pix])


def _deform_and_commit(ref: ReferenceFrame, camera: int, correction: RigidTransform, constraints, now: int,
                       config: SessionConfig, deform_history: bool):
    """Optimize a fresh graph, deform the map and move the camera by the rigid ``correction``.

    With ``deform_history`` the stored trajectories and the other cameras'
    poses follow the graph as well.
    """
    graph = sample_deformation_graph(ref.map, config.loop.node_rate, config.loop)
    if len(graph) == 0 or not constraints:
        return None, graph
    res = optimize_graph(graph, constraints)
    if not res.converged:
        return res, graph
    apply_deformation(ref.map, graph)
    if deform_history:
        for cam in ref.cameras:
            ref.trajectories[cam] = [(s, step, deform_pose(p, step, graph)) for s, step, p in ref.trajectories[cam]]
            if cam != camera:
                ref.poses[cam] = deform_pose(ref.poses[cam], now, graph)
    # back-to-back closures would otherwise compound rounding in the rotation
    moved = correction @ ref.poses[camera]
    ref.poses[camera] = RigidTransform(polar_rotation(moved.rotation), moved.translation)
    return res, graph


# ---------------------------------------------------------------------------
# Global loop closure


def close_global_loop(ref: ReferenceFrame, camera: int, view: ModelView, now: int,
                      config: SessionConfig | None = None) -> LoopClosure | None:
    """Align the view to a fern-matched old keyframe of the same map and deform the map."""
    cfg = config or SessionConfig()
    if len(ref.db) == 0 or view.valid_count == 0:
        return None
    enc = ref.db.encode(view.color, view.depth)
    min_age = cfg.loop.global_min_age
    match = ref.db.find_match(enc, eligible=lambda e: now - e.time >= min_age)
    if match is None:
        return None
    kf = ref.db.entries[match.entry]
    # nothing to close when the surface in view is the one the keyframe saw
    seen_ids = view.index[view.valid]
    if np.median(ref.map.init_times[seen_ids]) - kf.time < min_age:
        return None
    live = snapshot_pyramid(kf.color, kf.depth, view.intrinsics, cfg)
    r = track(view, live, config=cfg.odometry)
    if not check_constrained(r, cfg.odometry):
        return None
    # current map point X' = P T p_kf belongs at P_kf p_kf
    correction = kf.pose @ r.increment.inverse() @ view.pose.inverse()
    pix = _sample_pixels(view.valid, cfg.loop.n_constraints)
    if not len(pix):
        return None
    src = _view_points(view, pix)
    dst = correction.apply(src)
    times = ref.map.init_times[view.index.reshape(-1)[pix]]
    constraints = [SurfaceConstraint(s, d, int(t)) for s, d, t in zip(src, dst, times)]
    constraints += [SurfaceConstraint(d, d, int(kf.time)) for d in dst]
    ref.poses[camera] = view.pose
    res, _ = _deform_and_commit(ref, camera, correction, constraints, now, cfg, deform_history=True)
    if res is None or not res.converged:
        return None
    return LoopClosure("global", camera, correction, r, res)


# ---------------------------------------------------------------------------
# Local loop closure


def inactive_in_view(ref: ReferenceFrame, camera: int, pose: RigidTransform, k: Intrinsics) -> int:
    """Cheap count of stable inactive surfel centres projecting into the image."""
    m = ref.map
    mask = m.region_mask(camera, Region.INACTIVE) & m.stable_mask()
    if not mask.any():
        return 0
    imap, _ = point_index_map(m, mask, pose, k)
    return int(np.count_nonzero(imap >= 0))


def close_local_loop(ref: ReferenceFrame, camera: int, pose: RigidTransform, k: Intrinsics, now: int,
                     config: SessionConfig | None = None, active_view: ModelView | None = None,
                     frame_index: int | None = None) -> LoopClosure | None:
    """Register the active region in view onto the inactive one, deform, and reactivate.

    ``now`` is the session clock used by deformation; reactivated surfels get
    ``last_seen = frame_index`` (the camera's activity clock, default ``now``).
    """
    cfg = config or SessionConfig()
    frame_index = now if frame_index is None else frame_index
    n_min = cfg.odometry.n_min_for(k.width, k.height)
    if inactive_in_view(ref, camera, pose, k) < n_min:
        return None
    m = ref.map
    phi = predict_view(m, camera, pose, k, Region.INACTIVE)
    if phi.valid_count < n_min:
        return None
    theta = active_view if active_view is not None else predict_view(m, camera, pose, k, Region.ACTIVE)
    if theta.valid_count < n_min:
        return None
    r = track(phi, theta, config=cfg.odometry)
    if not check_constrained(r, cfg.odometry):
        return None
    correction = pose @ r.increment @ pose.inverse()
    pix = _sample_pixels(theta.valid, cfg.loop.n_constraints)
    src = _view_points(theta, pix)
    constraints = [SurfaceConstraint(s, d, int(t)) for s, d, t in
                   zip(src, correction.apply(src), m.init_times[theta.index.reshape(-1)[pix]])]
    pins = _sample_pixels(phi.valid, cfg.loop.n_constraints)
    anchor = _view_points(phi, pins)
    constraints += [SurfaceConstraint(p, p, int(t)) for p, t in
                    zip(anchor, m.init_times[phi.index.reshape(-1)[pins]])]
    ref.poses[camera] = pose
    res, _ = _deform_and_commit(ref, camera, correction, constraints, now, cfg, deform_history=False)
    if res is None or not res.converged:
        return None
    new_pose = ref.poses.get(camera, pose)
    seen = predict_view(m, camera, new_pose, k, Region.INACTIVE, stable_only=False).visible_surfels()
    m.touch(seen, camera, frame_index)
    return LoopClosure("local", camera, correction, r, res, len(seen))


# ---------------------------------------------------------------------------
# Inter-map loop closure and merging


def estimate_from_fern(fern_pose: RigidTransform, h_rel: RigidTransform, camera_pose: RigidTransform):
    """Initial inter-map estimate from a fern alignment.

    ``h_rel`` maps keyframe-camera points into the camera's current frame, so
    the camera's pose in the other reference frame is ``H = P_f h_rel^-1``
    and ``T_hat = H (C_i^j)^-1``. Returns ``(T_hat, H)``.
    """
    h = fern_pose @ h_rel.inverse()
    return h @ camera_pose.inverse(), h


def search_candidates(ref_j: ReferenceFrame, view: ModelView, refs) -> list:
    """Fern matches of ``view`` in every other live reference frame, cheapest first."""
    out = []
    if view is None or view.valid_count == 0:
        return out
    for ref_k in refs:
        if ref_k.id == ref_j.id or ref_k.retired or len(ref_k.db) == 0:
            continue
        match = ref_k.db.find_match(ref_k.db.encode(view.color, view.depth))
        if match is not None:
            out.append((match.dissimilarity, ref_k.id, ref_k, match))
    out.sort(key=lambda c: (c[0], c[1]))
    return [(ref_k, match) for _, _, ref_k, match in out]


def inter_map_closure(ref_j: ReferenceFrame, ref_k: ReferenceFrame, camera: int, view: ModelView, timestep: int,
                      config: SessionConfig | None = None, match: Match | None = None) -> MergeEvent | None:
    """Estimate ``T_j^k`` for a camera of ``ref_j`` whose view matches ``ref_k``; no state is mutated."""
    cfg = config or SessionConfig()
    if ref_j.id == ref_k.id:
        raise ValueError("inter-map closure needs two distinct reference frames")
    if view is None or view.valid_count == 0:
        return None
    if match is None:
        match = ref_k.db.find_match(ref_k.db.encode(view.color, view.depth))
        if match is None:
            return None
    kf = ref_k.db.entries[match.entry]
    k = view.intrinsics
    first = track(view, snapshot_pyramid(kf.color, kf.depth, k, cfg), config=cfg.odometry)
    if not first.converged:
        return None
    c_ij = ref_j.poses[camera]
    t_hat, c_ik = estimate_from_fern(kf.pose, first.increment, c_ij)
    model = predict_view(ref_k.map, camera, c_ik, k, Region.ALL, stable_only=True)
    if model.valid_count == 0:
        return None
    refine = track(model, view, config=cfg.odometry)
    if not check_constrained(refine, cfg.odometry):
        return None
    t = (c_ik @ refine.increment) @ c_ij.inverse()
    return MergeEvent(ref_j.id, ref_k.id, t, camera, timestep, match.dissimilarity,
                      refine.final_error, refine.inlier_count, t_hat)


def orient_event(e: MergeEvent, refs: dict) -> MergeEvent:
    """Make the reference frame with more surfels the survivor (ties: lower id)."""
    a, b = refs[e.absorbed], refs[e.survivor]
    na, nb = len(a.map), len(b.map)
    if na > nb or (na == nb and a.id < b.id):
        return e.inverted()
    return e


def merge_maps(ref_j: ReferenceFrame, ref_k: ReferenceFrame, e: MergeEvent) -> ReferenceFrame:
    """Move everything of ``ref_j`` into ``ref_k`` through ``e.transform`` and retire ``ref_j``."""
    if e.absorbed != ref_j.id or e.survivor != ref_k.id:
        raise ValueError("merge event does not name these reference frames")
    if ref_j.retired or ref_k.retired:
        raise ValueError("cannot merge a retired reference frame")
    t = e.transform
    moved = ref_j.map.copy()
    moved.apply_transform(t)
    db = ref_j.db.transformed(t)
    poses = {c: t @ p for c, p in ref_j.poses.items()}
    trajectories = {c: [(s, step, t @ p) for s, step, p in traj] for c, traj in ref_j.trajectories.items()}
    # commit
    n_cams = max(ref_k.map.n_cameras, moved.n_cameras)
    ref_k.map.ensure_cameras(n_cams)
    ref_k.map.extend(moved)
    ref_k.db.extend(db)
    for c in ref_j.cameras:
        ref_k.cameras.append(c)
        ref_k.poses[c] = poses[c]
        ref_k.trajectories[c] = trajectories[c]
        ref_k.frame_counts[c] = ref_j.frame_counts.get(c, 0)
        if c in ref_j.bootstrapped:
            ref_k.bootstrapped.add(c)
    ref_k.cameras.sort()
    ref_j.views.clear()
    ref_j.cameras = []
    ref_j.retired = True
    return ref_k
