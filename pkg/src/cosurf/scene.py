"""Analytic synthetic scenes: boxes and triangles, ray-cast into RGB-D frames.

Scene files are line oriented::

    box cx cy cz sx sy sz r g b
    tri x1 y1 z1 x2 y2 z2 x3 y3 z3 r g b
    traj <cam> <t> tx ty tz qx qy qz qw
    texture <amplitude> <wavelength> <seed>
    light lx ly lz

``texture`` and ``light`` are optional. The texture is a smooth solid
pattern that modulates every face's albedo so photometric alignment and
place recognition have something to lock onto.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .config import Z_MAX
from .frame import RgbdFrame
from .geometry import Z_MIN, Intrinsics, RigidTransform

AMBIENT = 0.45


@dataclass(frozen=True)
class Box:
    center: tuple
    size: tuple
    albedo: tuple

    @property
    def lo(self) -> np.ndarray:
        return np.asarray(self.center, float) - 0.5 * np.asarray(self.size, float)

    @property
    def hi(self) -> np.ndarray:
        return np.asarray(self.center, float) + 0.5 * np.asarray(self.size, float)

    def triangles(self) -> np.ndarray:
        lo, hi = self.lo, self.hi
        c = np.array([[x, y, z] for x in (lo[0], hi[0]) for y in (lo[1], hi[1]) for z in (lo[2], hi[2])])
        # corner index = 4*ix + 2*iy + iz
        quads = [(0, 1, 3, 2), (4, 6, 7, 5), (0, 4, 5, 1), (2, 3, 7, 6), (0, 2, 6, 4), (1, 5, 7, 3)]
        tris = []
        for a, b, cc, d in quads:
            tris.append([c[a], c[b], c[cc]])
            tris.append([c[a], c[cc], c[d]])
        return np.array(tris)


@dataclass(frozen=True)
class Triangle:
    vertices: tuple  # three (x, y, z)
    albedo: tuple


@dataclass(frozen=True)
class Texture:
    amplitude: float = 0.35
    wavelength: float = 0.3
    seed: int = 7

    def __call__(self, points: np.ndarray) -> np.ndarray:
        """Smooth pattern in [-1, 1] evaluated at world points."""
        rng = np.random.default_rng(self.seed)
        dirs = rng.normal(size=(5, 3))
        dirs /= np.linalg.norm(dirs, axis=1, keepdims=True)
        scales = self.wavelength * np.array([1.0, 0.77, 1.31, 0.59, 1.83])
        phases = rng.uniform(0, 2 * np.pi, 5)
        freq = dirs * (2 * np.pi / scales)[:, None]
        return np.sin(points @ freq.T + phases).mean(axis=-1)


@dataclass
class SyntheticScene:
    boxes: list = field(default_factory=list)
    triangles: list = field(default_factory=list)
    trajectories: dict = field(default_factory=dict)  # camera -> [(t, RigidTransform)]
    texture: Texture | None = None
    light: tuple = (0.35, -0.8, 0.45)

    def all_triangles(self) -> np.ndarray:
        tris = [b.triangles() for b in self.boxes]
        if self.triangles:
            tris.append(np.array([t.vertices for t in self.triangles], dtype=float))
        return np.concatenate(tris) if tris else np.zeros((0, 3, 3))

    def bounds(self) -> tuple[np.ndarray, np.ndarray]:
        tris = self.all_triangles()
        if len(tris) == 0:
            return np.zeros(3), np.zeros(3)
        pts = tris.reshape(-1, 3)
        return pts.min(0), pts.max(0)


@dataclass(frozen=True)
class NoiseSpec:
    sigma0: float = 0.0  # depth noise std = sigma0 * z^2
    seed: int = 0


def _raycast_box(box: Box, origin, dirs):
    lo, hi = box.lo, box.hi
    safe = np.where(dirs == 0, 1e-30, dirs)
    t1 = (lo - origin) / safe
    t2 = (hi - origin) / safe
    tnear = np.minimum(t1, t2)
    tfar = np.maximum(t1, t2)
    tmin = tnear.max(axis=1)
    tmax = tfar.min(axis=1)
    inside = bool(np.all(origin > lo) and np.all(origin < hi))
    if inside:
        t = tmax
        axis = np.argmin(tfar, axis=1)
        hit = np.isfinite(t) & (t > 0)
    else:
        t = tmin
        axis = np.argmax(tnear, axis=1)
        hit = (tmin <= tmax) & (tmin > 0)
    normals = np.zeros_like(dirs)
    comp = dirs[np.arange(len(dirs)), axis]
    normals[np.arange(len(dirs)), axis] = -np.sign(comp)
    return np.where(hit, t, np.inf), normals


def _raycast_triangle(tri: np.ndarray, origin, dirs):
    v0, v1, v2 = tri
    e1, e2 = v1 - v0, v2 - v0
    pvec = np.cross(dirs, e2)
    det = pvec @ e1
    ok = np.abs(det) > 1e-14
    inv = np.where(ok, 1.0 / np.where(ok, det, 1.0), 0.0)
    tvec = origin - v0
    u = (pvec @ tvec) * inv
    qvec = np.cross(tvec, e1)
    v = (dirs @ qvec) * inv
    t = (qvec @ e2) * inv
    hit = ok & (u >= 0) & (v >= 0) & (u + v <= 1) & (t > 0)
    n = np.cross(e1, e2)
    n = n / np.linalg.norm(n)
    normals = np.where((dirs @ n)[:, None] > 0, -n, n)
    return np.where(hit, t, np.inf), normals


def raycast(scene: SyntheticScene, origin: np.ndarray, dirs: np.ndarray):
    """Nearest hit for each ray: ``(t, normals, albedo)``; ``t = inf`` on a miss."""
    n = len(dirs)
    best_t = np.full(n, np.inf)
    best_n = np.zeros((n, 3))
    best_a = np.zeros((n, 3))
    prims = [(b, b.albedo) for b in scene.boxes] + [(t, t.albedo) for t in scene.triangles]
    for prim, albedo in prims:
        if isinstance(prim, Box):
            t, nrm = _raycast_box(prim, origin, dirs)
        else:
            t, nrm = _raycast_triangle(np.asarray(prim.vertices, float), origin, dirs)
        closer = t < best_t
        best_t = np.where(closer, t, best_t)
        best_n[closer] = nrm[closer]
        best_a[closer] = albedo
    return best_t, best_n, best_a


def shade(scene: SyntheticScene, points, normals, albedo) -> np.ndarray:
    light = np.asarray(scene.light, float)
    light = light / np.linalg.norm(light)
    lambert = np.abs(normals @ light)
    value = albedo * (AMBIENT + (1.0 - AMBIENT) * lambert)[:, None]
    if scene.texture is not None:
        value = value * (1.0 + scene.texture.amplitude * scene.texture(points))[:, None]
    return np.clip(np.round(value), 0, 255).astype(np.uint8)


def render_synthetic_frame(scene: SyntheticScene, pose: RigidTransform, k: Intrinsics,
                           noise: NoiseSpec | None = None, camera_id: int = 0, index: int = 0,
                           stamp: float | None = None, z_max: float = Z_MAX,
                           supersample: int = 2) -> RgbdFrame:
    """Ray-cast a z-depth + shaded colour frame from camera-to-world ``pose``.

    Depth comes from the pixel-centre ray. Colour is the box-filtered mean of
    ``supersample**2`` sub-pixel rays, which models pixel integration and
    keeps fine texture from aliasing.
    """
    rays_cam = k.pixel_rays().reshape(-1, 3)
    dirs = pose.rotate(rays_cam)
    t, normals, albedo = raycast(scene, pose.translation, dirs)
    hit = np.isfinite(t)
    depth = np.where(hit, t, 0.0)  # camera rays have unit z, so t is z-depth
    color = np.zeros((len(t), 3), dtype=np.uint8)
    if supersample <= 1:
        if hit.any():
            points = pose.translation + dirs * np.where(hit, t, 0.0)[:, None]
            color[hit] = shade(scene, points[hit], normals[hit], albedo[hit])
    else:
        acc = np.zeros((len(t), 3))
        offsets = (np.arange(supersample) + 0.5) / supersample - 0.5
        for oy in offsets:
            for ox in offsets:
                sub = rays_cam + np.array([ox / k.fx, oy / k.fy, 0.0])
                sd = pose.rotate(sub)
                st, sn, sa = raycast(scene, pose.translation, sd)
                sh = np.isfinite(st)
                if sh.any():
                    pts = pose.translation + sd[sh] * st[sh, None]
                    acc[sh] += shade(scene, pts, sn[sh], sa[sh])
        color = np.clip(np.round(acc / supersample**2), 0, 255).astype(np.uint8)
    if noise is not None and noise.sigma0 > 0:
        rng = np.random.default_rng((noise.seed, camera_id, index))
        depth = depth + rng.normal(size=depth.shape) * noise.sigma0 * depth**2
    depth = np.where((depth >= Z_MIN) & (depth <= z_max), depth, 0.0)
    h, w = k.shape
    return RgbdFrame(camera_id, index, float(index) / 30.0 if stamp is None else stamp,
                     color.reshape(h, w, 3), depth.reshape(h, w), k)


def point_triangle_distance(points: np.ndarray, tris: np.ndarray, chunk: int = 4096) -> np.ndarray:
    """Exact Euclidean distance from each point to the nearest triangle."""
    points = np.asarray(points, float)
    out = np.full(len(points), np.inf)
    a, b, c = tris[:, 0], tris[:, 1], tris[:, 2]
    for s in range(0, len(points), chunk):
        p = points[s:s + chunk, None, :]
        out[s:s + chunk] = np.sqrt(_sq_dist_point_triangles(p, a, b, c).min(axis=1))
    return out


def _sq_dist_point_triangles(p, a, b, c):
    # closest point on triangle (Ericson, Real-Time Collision Detection 5.1.5), vectorized
    ab, ac, ap = b - a, c - a, p - a
    d1 = np.sum(ab * ap, -1)
    d2 = np.sum(ac * ap, -1)
    bp = p - b
    d3 = np.sum(ab * bp, -1)
    d4 = np.sum(ac * bp, -1)
    cp = p - c
    d5 = np.sum(ab * cp, -1)
    d6 = np.sum(ac * cp, -1)
    va = d3 * d6 - d5 * d4
    vb = d5 * d2 - d1 * d6
    vc = d1 * d4 - d3 * d2
    denom = va + vb + vc
    denom = np.where(np.abs(denom) < 1e-300, 1e-300, denom)
    v = vb / denom
    w = vc / denom
    closest = a + ab * v[..., None] + ac * w[..., None]

    def pick(mask, value):
        nonlocal closest
        closest = np.where(mask[..., None], value, closest)

    with np.errstate(divide="ignore", invalid="ignore"):
        # edge regions
        pick((va <= 0) & (d4 - d3 >= 0) & (d5 - d6 >= 0),
             b + (c - b) * np.nan_to_num((d4 - d3) / ((d4 - d3) + (d5 - d6)))[..., None])
        pick((vb <= 0) & (d2 >= 0) & (d6 <= 0), a + ac * np.nan_to_num(d2 / (d2 - d6))[..., None])
        pick((vc <= 0) & (d1 >= 0) & (d3 <= 0), a + ab * np.nan_to_num(d1 / (d1 - d3))[..., None])
    # vertex regions
    pick((d6 >= 0) & (d5 <= d6), np.broadcast_to(c, closest.shape))
    pick((d3 >= 0) & (d4 <= d3), np.broadcast_to(b, closest.shape))
    pick((d1 <= 0) & (d2 <= 0), np.broadcast_to(a, closest.shape))
    diff = p - closest
    return np.sum(diff * diff, -1)


def surface_distance(scene: SyntheticScene, points: np.ndarray) -> np.ndarray:
    return point_triangle_distance(points, scene.all_triangles())


def visible_fraction(scene: SyntheticScene, poses, k: Intrinsics, min_valid: float = 0.5) -> float:
    """Fraction of poses whose view has at least ``min_valid`` of pixels hitting geometry."""
    if not poses:
        return 1.0
    coarse = k.scaled(2)
    ok = 0
    for pose in poses:
        f = render_synthetic_frame(scene, pose, coarse)
        ok += (f.depth > 0).mean() >= min_valid
    return ok / len(poses)


def parse_scene(text: str) -> SyntheticScene:
    scene = SyntheticScene()
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        kind, *rest = line.split()
        try:
            vals = [float(x) for x in rest]
        except ValueError:
            raise ValueError(f"scene line {lineno}: non-numeric field") from None
        expected = {"box": 9, "tri": 12, "traj": 9, "texture": 3, "light": 3}
        if kind not in expected:
            raise ValueError(f"scene line {lineno}: unknown primitive {kind!r}")
        if len(vals) != expected[kind]:
            raise ValueError(f"scene line {lineno}: {kind} takes {expected[kind]} values, got {len(vals)}")
        if kind == "box":
            scene.boxes.append(Box(tuple(vals[0:3]), tuple(vals[3:6]), tuple(vals[6:9])))
        elif kind == "tri":
            scene.triangles.append(Triangle((tuple(vals[0:3]), tuple(vals[3:6]), tuple(vals[6:9])),
                                            tuple(vals[9:12])))
        elif kind == "traj":
            cam = int(vals[0])
            pose = RigidTransform.from_quaternion(vals[2:5], vals[5:9])
            scene.trajectories.setdefault(cam, []).append((int(vals[1]), pose))
        elif kind == "texture":
            scene.texture = Texture(vals[0], vals[1], int(vals[2]))
        else:
            scene.light = tuple(vals)
    for cam in scene.trajectories:
        scene.trajectories[cam].sort(key=lambda e: e[0])
    return scene


def format_scene(scene: SyntheticScene) -> str:
    lines = []
    for b in scene.boxes:
        lines.append("box " + " ".join(f"{v:g}" for v in (*b.center, *b.size, *b.albedo)))
    for t in scene.triangles:
        flat = [c for v in t.vertices for c in v]
        lines.append("tri " + " ".join(f"{v:g}" for v in (*flat, *t.albedo)))
    if scene.texture is not None:
        tx = scene.texture
        lines.append(f"texture {tx.amplitude:g} {tx.wavelength:g} {tx.seed}")
    lines.append("light " + " ".join(f"{v:g}" for v in scene.light))
    for cam in sorted(scene.trajectories):
        for t, pose in scene.trajectories[cam]:
            q = pose.quaternion()
            vals = (*pose.translation, *q)
            lines.append(f"traj {cam} {t} " + " ".join(f"{v:.12g}" for v in vals))
    return "\n".join(lines) + "\n"


def load_scene(path) -> SyntheticScene:
    return parse_scene(Path(path).read_text())


def save_scene(scene: SyntheticScene, path) -> None:
    Path(path).write_text(format_scene(scene))
