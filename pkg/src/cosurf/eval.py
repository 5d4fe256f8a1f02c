"""Trajectory and reconstruction metrics, and per-stage timing reports."""

from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass, field

import numpy as np
from scipy.spatial import cKDTree

from .geometry import RigidTransform
from .scene import SyntheticScene, point_triangle_distance

STAGES = ("predict", "track", "global_loop", "local_loop", "fuse", "fern", "inter_map", "merge")
MAX_DT = 0.02


class EvaluationError(ValueError):
    pass


# ---------------------------------------------------------------------------
# Trajectories


def _stamped(traj) -> tuple[np.ndarray, np.ndarray]:
    stamps = np.array([float(s) for s, _ in traj])
    xyz = np.array([np.asarray(p.translation if isinstance(p, RigidTransform) else p, float)
                    for _, p in traj]).reshape(-1, 3)
    return stamps, xyz


def associate(est_stamps, gt_stamps, max_dt: float = MAX_DT) -> list[tuple[int, int]]:
    """One-to-one nearest-timestamp matching within ``max_dt`` (closest pairs claimed first)."""
    est_stamps = np.asarray(est_stamps, float)
    gt_stamps = np.asarray(gt_stamps, float)
    if not len(est_stamps) or not len(gt_stamps):
        return []
    diff = np.abs(est_stamps[:, None] - gt_stamps[None, :])
    cand = np.argwhere(diff <= max_dt)
    order = np.lexsort((cand[:, 1], cand[:, 0], diff[cand[:, 0], cand[:, 1]]))
    used_e, used_g, pairs = set(), set(), []
    for i, j in cand[order]:
        if i not in used_e and j not in used_g:
            used_e.add(i)
            used_g.add(j)
            pairs.append((int(i), int(j)))
    return sorted(pairs)


@dataclass
class TrajectoryPair:
    """Estimated and ground-truth trajectories as ``(stamp, pose)`` lists."""

    estimated: list
    ground_truth: list
    max_dt: float = MAX_DT
    pairs: list = field(init=False)

    def __post_init__(self):
        es, _ = _stamped(self.estimated)
        gs, _ = _stamped(self.ground_truth)
        self.pairs = associate(es, gs, self.max_dt)

    def positions(self) -> tuple[np.ndarray, np.ndarray]:
        if len(self.pairs) < 2:
            raise EvaluationError(f"need at least 2 associated poses, got {len(self.pairs)}")
        _, e = _stamped(self.estimated)
        _, g = _stamped(self.ground_truth)
        idx = np.array(self.pairs)
        return e[idx[:, 0]], g[idx[:, 1]]


def align_rigid(src: np.ndarray, dst: np.ndarray) -> RigidTransform:
    """Least-squares rotation and translation taking ``src`` onto ``dst`` (Kabsch)."""
    src = np.asarray(src, float)
    dst = np.asarray(dst, float)
    mu_s, mu_d = src.mean(axis=0), dst.mean(axis=0)
    cov = (dst - mu_d).T @ (src - mu_s)
    u, _, vt = np.linalg.svd(cov)
    d = np.sign(np.linalg.det(u @ vt)) or 1.0
    r = u @ np.diag([1.0, 1.0, d]) @ vt
    return RigidTransform(r, mu_d - r @ mu_s)


def ate_residuals(tp: TrajectoryPair) -> np.ndarray:
    e, g = tp.positions()
    t = align_rigid(e, g)
    return np.linalg.norm(t.apply(e) - g, axis=1)


def ate_rmse(tp: TrajectoryPair) -> float:
    """RMSE of translation residuals after the optimal rigid alignment of the estimate."""
    r = ate_residuals(tp)
    return float(math.sqrt(np.mean(r * r)))


# ---------------------------------------------------------------------------
# Surfaces


def _stable_points(m, stable_only: bool) -> np.ndarray:
    if isinstance(m, np.ndarray):
        return np.asarray(m, float).reshape(-1, 3)
    mask = m.stable_mask() if stable_only else np.ones(len(m), bool)
    return m.positions[mask]


def surface_distances(m, reference, stable_only: bool = True) -> np.ndarray:
    """Per-surfel distance to a reference scene, triangle soup ``(M, 3, 3)`` or point set ``(M, 3)``."""
    pts = _stable_points(m, stable_only)
    if not len(pts):
        raise EvaluationError("map has no surfels to evaluate")
    if isinstance(reference, SyntheticScene):
        reference = reference.all_triangles()
    ref = np.asarray(reference, float)
    if not ref.size:
        raise EvaluationError("empty reference")
    if ref.ndim == 3:
        return point_triangle_distance(pts, ref)
    dist, _ = cKDTree(ref.reshape(-1, 3)).query(pts)
    return dist


def surface_accuracy(m, reference, stable_only: bool = True) -> float:
    """Mean distance from (stable) surfels to the reference surface."""
    return float(np.mean(surface_distances(m, reference, stable_only)))


# ---------------------------------------------------------------------------
# Timing


@dataclass
class TimingRecord:
    camera: int
    timestep: int
    stages: dict  # stage name -> milliseconds
    total: float  # milliseconds
    merged: bool = False

    def stage(self, name: str) -> float:
        return float(self.stages.get(name, 0.0))


@dataclass
class TimingReport:
    summary: dict  # stage -> (mean, max) ms
    series: list  # rows: timestep, camera, total, stage..., merged
    flagged: list  # timesteps with a merge

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["timestep", "camera", "total_ms", *(f"{s}_ms" for s in STAGES), "merge"])
        for row in self.series:
            w.writerow([row[0], row[1], *(f"{v:.3f}" for v in row[2:-1]), int(row[-1])])
        return buf.getvalue()


def timing_report(records) -> TimingReport:
    records = list(records)
    series = [(r.timestep, r.camera, r.total, *(r.stage(s) for s in STAGES), r.merged) for r in records]
    summary = {}
    if records:
        for i, s in enumerate(("total", *STAGES)):
            col = np.array([row[2 + i] for row in series])
            summary[s] = (float(col.mean()), float(col.max()))
    flagged = sorted({r.timestep for r in records if r.merged})
    return TimingReport(summary, series, flagged)


def read_timing_csv(text: str) -> list[TimingRecord]:
    rows = list(csv.DictReader(io.StringIO(text)))
    return [TimingRecord(int(r["camera"]), int(r["timestep"]),
                         {s: float(r[f"{s}_ms"]) for s in STAGES}, float(r["total_ms"]), r["merge"] == "1")
            for r in rows]
