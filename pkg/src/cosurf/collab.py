"""Multi-camera sessions: per-camera reference frames, sequential mapping and map merging.

Every camera starts in its own reference frame. Each timestep runs the
single-camera pipeline for every camera with a pending frame (in camera id
order) and then looks for inter-map loop closures; an accepted closure
merges the two reference frames immediately.

Two clocks are used. The session timestep orders surfel creation, keyframes
and deformation; each camera's own frame counter drives its activity window.
"""

from __future__ import annotations

import collections
import logging
import threading
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .config import SessionConfig
from .eval import TimingRecord
from .fern import FernDatabase
from .frame import RgbdFrame, build_pyramid, format_trajectory
from .geometry import Intrinsics, RigidTransform, exp_se3
from .loopclosure import (LoopClosure, MergeEvent, close_global_loop, close_local_loop, format_event,
                          inter_map_closure, merge_maps, orient_event, search_candidates)
from .odometry import TrackingResult, track
from .reference import ReferenceFrame
from .surfelmap import SurfelMap, fuse_frame, predict_view

log = logging.getLogger(__name__)


@dataclass
class FrameOutcome:
    pose: RigidTransform
    tracked: bool
    stages: dict  # stage -> milliseconds
    tracking: TrackingResult | None = None
    loop: LoopClosure | None = None
    keyframe_added: bool = False


class _Stopwatch:
    def __init__(self):
        self.stages = {}

    def time(self, name):
        sw = self

        class _Ctx:
            def __enter__(self):
                self.t0 = time.perf_counter()

            def __exit__(self, *exc):
                sw.stages[name] = sw.stages.get(name, 0.0) + 1e3 * (time.perf_counter() - self.t0)

        return _Ctx()


def tracking_failed(r: TrackingResult, config: SessionConfig) -> bool:
    """Underconstrained or degenerate tracking: hold the pose and skip fusion."""
    if r.status == "degenerate":
        return True
    return r.hessian_spectrum[0] <= config.odometry.eps_eig or r.condition_number >= config.odometry.kappa_max


def _has_old_keyframes(ref: ReferenceFrame, now: int, min_age: int) -> bool:
    return any(now - e.time >= min_age for e in ref.db.entries)


def new_reference_frame(ref_id: int, n_cameras: int, config: SessionConfig, spec=None) -> ReferenceFrame:
    db = FernDatabase(spec, config.fern) if spec is not None else FernDatabase.create(config.fern)
    return ReferenceFrame(ref_id, SurfelMap(n_cameras, config.surfel), db)


def map_and_track(ref: ReferenceFrame, camera: int, frame: RgbdFrame, step: int,
                  config: SessionConfig | None = None) -> FrameOutcome:
    """Run one frame through the single-map pipeline of ``camera`` in ``ref``.

    Order: predict the active view and track; try a global loop closure, else
    a local one; fuse at the (possibly deformed) pose; offer the post-fusion
    prediction as a fern keyframe. The camera's first frame is fused at its
    current pose without tracking.
    """
    cfg = config or SessionConfig()
    if camera not in ref.cameras:
        raise ValueError(f"camera {camera} is not in reference frame {ref.id}")
    if frame.camera_id != camera:
        raise ValueError(f"frame from camera {frame.camera_id} routed to camera {camera}")
    traj = ref.trajectories[camera]
    if traj and frame.stamp <= traj[-1][0]:
        raise ValueError(f"non-monotone timestamp {frame.stamp} after {traj[-1][0]} for camera {camera}")
    m = ref.map
    k = frame.intrinsics
    idx = ref.frame_counts.get(camera, 0)
    ref.frame_counts[camera] = idx + 1
    m.advance_time(camera, idx)
    sw = _Stopwatch()
    pose = ref.poses[camera]
    outcome = FrameOutcome(pose, True, sw.stages)

    if camera not in ref.bootstrapped:
        with sw.time("fuse"):
            n0 = len(m)
            stats = fuse_frame(m, frame, pose, idx, camera, init_time=step)
            # the first frame is trusted outright so the next one has a model to track against
            m._wgt[n0:len(m)] = np.maximum(m._wgt[n0:len(m)], cfg.surfel.w_stable)
        if stats.inserted:
            ref.bootstrapped.add(camera)
    else:
        with sw.time("predict"):
            view = predict_view(m, camera, pose, k)
        with sw.time("track"):
            r = track(view, build_pyramid(frame, cfg.frame), config=cfg.odometry)
        outcome.tracking = r
        if tracking_failed(r, cfg):
            outcome.tracked = False
            log.info("camera %d step %d: tracking failed (%s), pose held", camera, step, r.status)
        else:
            pose = pose @ r.increment
            if cfg.odometry.drift_twist is not None:
                pose = pose @ exp_se3(cfg.odometry.drift_twist)
            ref.poses[camera] = pose
            with sw.time("predict"):
                current = predict_view(m, camera, pose, k)
            loop = None
            if cfg.loop.global_loops and _has_old_keyframes(ref, step, cfg.loop.global_min_age):
                with sw.time("global_loop"):
                    loop = close_global_loop(ref, camera, predict_view(m, camera, pose, k, stable_only=False),
                                             step, cfg)
            if loop is None and cfg.loop.local_loops:
                with sw.time("local_loop"):
                    loop = close_local_loop(ref, camera, pose, k, step, cfg, active_view=current,
                                            frame_index=idx)
            if loop is not None:
                pose = ref.poses[camera]
                outcome.loop = loop
            with sw.time("fuse"):
                fuse_frame(m, frame, pose, idx, camera, init_time=step)

    if outcome.tracked:
        with sw.time("fern"):
            # fern codes need a hole-free image, so keyframes include not-yet-stable surfels
            post = predict_view(m, camera, pose, k, stable_only=False)
            ref.views[camera] = post
            if post.valid_count:
                added = ref.db.try_add(ref.db.encode(post.color, post.depth), pose, post.color, post.depth,
                                       camera, step, k)
                outcome.keyframe_added = added.added
    else:
        ref.views.pop(camera, None)
    ref.record(camera, frame.stamp, step, pose)
    outcome.pose = pose
    return outcome


class StandalonePipeline:
    """Single camera, single map: the pipeline with no session layer around it."""

    def __init__(self, camera: int = 0, config: SessionConfig | None = None):
        self.config = config or SessionConfig()
        self.camera = camera
        self.ref = new_reference_frame(0, camera + 1, self.config)
        self.ref.add_camera(camera)
        self.step = 0
        self.outcomes = []

    def process(self, frame: RgbdFrame) -> FrameOutcome:
        out = map_and_track(self.ref, self.camera, frame, self.step, self.config)
        self.step += 1
        self.outcomes.append(out)
        return out

    def run(self, frames):
        for f in frames:
            self.process(f)
        return self

    @property
    def map(self) -> SurfelMap:
        return self.ref.map

    def trajectory(self) -> list:
        return self.ref.trajectory(self.camera)


class Session:
    """Collaborative mapping session over any number of cameras."""

    def __init__(self, config: SessionConfig | None = None):
        self.config = config or SessionConfig()
        self.config.validate(1)
        self.refs: dict[int, ReferenceFrame] = {}
        self.camera_ref: dict[int, int] = {}
        self.intrinsics: dict[int, Intrinsics] = {}
        self.step = 0
        self.events: list[MergeEvent] = []
        self.timings: list[TimingRecord] = []
        self.failures: collections.Counter = collections.Counter()
        self.log_lines: list[str] = []
        self.outcomes: list[tuple[int, int, FrameOutcome]] = []  # (timestep, camera, outcome)
        self.drops: collections.Counter = collections.Counter()
        self._queues: dict[int, collections.deque] = {}
        self._arrivals = collections.deque()  # camera ids in arrival order
        self._lock = threading.Lock()
        self._spec = None
        self._next_ref = 0

    # -- cameras -----------------------------------------------------------

    def register_camera(self, camera_id: int, intrinsics: Intrinsics | None = None) -> ReferenceFrame:
        if camera_id in self.camera_ref:
            raise ValueError(f"camera {camera_id} is already registered")
        if camera_id < 0:
            raise ValueError("camera ids must be non-negative")
        self.config.validate(len(self.camera_ref) + 1)
        n_cams = max([camera_id, *self.camera_ref]) + 1
        for ref in self.live_refs():
            ref.map.ensure_cameras(n_cams)
        ref = new_reference_frame(self._next_ref, n_cams, self.config, self._spec)
        self._spec = ref.db.spec  # every database shares one fern spec so they can be merged
        self._next_ref += 1
        ref.add_camera(camera_id)
        self.refs[ref.id] = ref
        self.camera_ref[camera_id] = ref.id
        self.intrinsics[camera_id] = intrinsics
        with self._lock:
            self._queues[camera_id] = collections.deque()
        return ref

    def live_refs(self) -> list[ReferenceFrame]:
        return [r for r in self.refs.values() if not r.retired]

    def reference_of(self, camera: int) -> ReferenceFrame:
        return self.refs[self.camera_ref[camera]]

    @property
    def cameras(self) -> list[int]:
        return sorted(self.camera_ref)

    # -- ingestion -----------------------------------------------------------

    def submit(self, frame: RgbdFrame) -> bool:
        """Queue a frame; beyond capacity the oldest queued frame of that camera is dropped."""
        with self._lock:
            q = self._queues.get(frame.camera_id)
            if q is None:
                raise KeyError(f"camera {frame.camera_id} is not registered")
            dropped = len(q) >= self.config.queue_capacity
            if dropped:
                q.popleft()
                self._arrivals.remove(frame.camera_id)
                self.drops[frame.camera_id] += 1
            q.append(frame)
            self._arrivals.append(frame.camera_id)
            return not dropped

    def pending(self) -> int:
        with self._lock:
            return sum(len(q) for q in self._queues.values())

    def _take_round(self) -> dict[int, RgbdFrame]:
        with self._lock:
            if self.config.scheduling == "lockstep":
                order = [c for c in sorted(self._queues) if self._queues[c]]
            else:
                order = list(dict.fromkeys(self._arrivals))
            frames = {}
            for c in order:
                frames[c] = self._queues[c].popleft()
                self._arrivals.remove(c)
            return frames

    # -- processing ----------------------------------------------------------

    def process_timestep(self, frames=None) -> list[MergeEvent]:
        """Process at most one frame per camera, then attempt inter-map closures.

        ``frames`` maps camera id to frame (or is a list of frames); when
        omitted one frame per camera is taken from the ingestion queues.
        """
        if frames is None:
            frames = self._take_round()
        elif not isinstance(frames, dict):
            frames = {f.camera_id: f for f in frames}
        step = self.step
        if self.config.scheduling == "lockstep":
            order = sorted(frames)
        else:
            order = list(frames)
        records = {}
        for cam in order:
            if cam not in self.camera_ref:
                raise KeyError(f"camera {cam} is not registered")
            t0 = time.perf_counter()
            out = map_and_track(self.reference_of(cam), cam, frames[cam], step, self.config)
            if not out.tracked:
                self.failures[cam] += 1
                self.log_lines.append(f"{step} {cam} tracking-failure")
            self.outcomes.append((step, cam, out))
            records[cam] = [dict(out.stages), time.perf_counter() - t0, False]

        events = []
        if self.config.loop.inter_map:
            for cam in order:
                if len(self.live_refs()) < 2 or events:
                    break  # at most one merge per timestep
                t0 = time.perf_counter()
                e = self._try_inter_map(cam, step)
                dt = time.perf_counter() - t0
                rec = records[cam]
                if e is None:
                    rec[0]["inter_map"] = rec[0].get("inter_map", 0.0) + 1e3 * dt
                    rec[1] += dt
                    continue
                rec[0]["inter_map"] = rec[0].get("inter_map", 0.0) + 1e3 * e[1]
                rec[0]["merge"] = 1e3 * (dt - e[1])
                rec[1] += dt
                rec[2] = True
                events.append(e[0])

        for cam in order:
            stages, total, merged = records[cam]
            self.timings.append(TimingRecord(cam, step, stages, 1e3 * total, merged))
        self.step += 1
        return events

    def _try_inter_map(self, cam: int, step: int):
        ref_j = self.reference_of(cam)
        view = ref_j.views.get(cam)
        t0 = time.perf_counter()
        cands = search_candidates(ref_j, view, self.live_refs())
        if not cands:
            return None
        ref_k, match = cands[0]
        e = inter_map_closure(ref_j, ref_k, cam, view, step, self.config, match)
        search = time.perf_counter() - t0
        if e is None:
            return None
        e = orient_event(e, self.refs)
        survivor = merge_maps(self.refs[e.absorbed], self.refs[e.survivor], e)
        for c in survivor.cameras:
            self.camera_ref[c] = survivor.id
        self.events.append(e)
        self.log_lines.append(format_event(e))
        log.info("merge: %s", self.log_lines[-1])
        return e, search

    def run(self, sequences: dict, start: dict | None = None) -> list[MergeEvent]:
        """Lockstep run over per-camera frame lists; ``start[c]`` delays camera ``c`` by that many steps."""
        start = start or {}
        for c in sorted(sequences):
            if c not in self.camera_ref:
                self.register_camera(c, sequences[c][0].intrinsics if len(sequences[c]) else None)
        n = max((start.get(c, 0) + len(s) for c, s in sequences.items()), default=0)
        events = []
        for t in range(n):
            frames = {}
            for c, seq in sequences.items():
                i = t - start.get(c, 0)
                if 0 <= i < len(seq):
                    frames[c] = seq[i]
            events += self.process_timestep(frames)
        return events

    # -- output ----------------------------------------------------------------

    def trajectory(self, camera: int) -> list:
        return self.reference_of(camera).trajectory(camera)

    def write_trajectories(self, directory) -> list[Path]:
        out = Path(directory)
        out.mkdir(parents=True, exist_ok=True)
        paths = []
        for c in self.cameras:
            p = out / f"camera_{c}.txt"
            p.write_text(format_trajectory(self.trajectory(c)))
            paths.append(p)
        return paths

    def session_log(self) -> str:
        return "".join(line + "\n" for line in self.log_lines)

    def check_totality(self) -> bool:
        live = {r.id for r in self.live_refs()}
        owners = collections.Counter(c for r in self.live_refs() for c in r.cameras)
        return (all(self.camera_ref[c] in live for c in self.camera_ref)
                and all(owners[c] == 1 for c in self.camera_ref)
                and all(c in self.refs[self.camera_ref[c]].cameras for c in self.camera_ref))
