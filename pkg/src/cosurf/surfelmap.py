"""Shared surfel map with per-camera activity windows.

Surfels are stored as parallel arrays (structure-of-arrays) so rendering,
fusion and rigid/non-rigid transforms stay vectorized. Each surfel keeps one
last-seen timestamp per camera; :data:`NEVER` marks cameras that have never
observed it.
"""

from __future__ import annotations

import enum
import io
import math
from dataclasses import dataclass

import numpy as np

from .config import PALETTE, SurfelConfig
from ._kernels import point_zbuffer, splat_discs
from .frame import RgbdFrame, _median_of_valid, compute_normals
from .geometry import Z_MIN, Intrinsics, RigidTransform, backproject_depth

NEVER = -1


class Region(enum.Enum):
    ACTIVE = "active"
    INACTIVE = "inactive"
    ALL = "all"


@dataclass(frozen=True)
class Surfel:
    position: np.ndarray
    normal: np.ndarray
    radius: float
    weight: float
    color: tuple
    init_time: int
    last_seen: tuple


@dataclass(frozen=True)
class FusionStats:
    merged: int
    inserted: int
    updated: int


_FIELDS = ("_pos", "_nrm", "_rad", "_wgt", "_col", "_init", "_seen")


class SurfelMap:
    def __init__(self, n_cameras: int = 1, config: SurfelConfig | None = None):
        self.config = config or SurfelConfig()
        cap = max(16, self.config.initial_capacity)
        self.n_cameras = n_cameras
        self._n = 0
        self._pos = np.zeros((cap, 3))
        self._nrm = np.zeros((cap, 3))
        self._rad = np.zeros(cap)
        self._wgt = np.zeros(cap)
        self._col = np.zeros((cap, 3))
        self._init = np.zeros(cap, dtype=np.int64)
        self._seen = np.full((cap, n_cameras), NEVER, dtype=np.int64)
        self.now = np.full(n_cameras, NEVER, dtype=np.int64)

    # -- storage -----------------------------------------------------------

    def __len__(self) -> int:
        return self._n

    @property
    def positions(self) -> np.ndarray:
        return self._pos[: self._n]

    @property
    def normals(self) -> np.ndarray:
        return self._nrm[: self._n]

    @property
    def radii(self) -> np.ndarray:
        return self._rad[: self._n]

    @property
    def weights(self) -> np.ndarray:
        return self._wgt[: self._n]

    @property
    def colors(self) -> np.ndarray:
        """Accumulated colour as floats in [0, 255]."""
        return self._col[: self._n]

    @property
    def init_times(self) -> np.ndarray:
        return self._init[: self._n]

    @property
    def last_seen(self) -> np.ndarray:
        return self._seen[: self._n]

    def surfel(self, i: int) -> Surfel:
        if not 0 <= i < self._n:
            raise IndexError(i)
        return Surfel(self._pos[i].copy(), self._nrm[i].copy(), float(self._rad[i]),
                      float(self._wgt[i]), tuple(int(c) for c in np.round(self._col[i])),
                      int(self._init[i]), tuple(int(t) for t in self._seen[i]))

    def _reserve(self, extra: int) -> None:
        need = self._n + extra
        cap = len(self._rad)
        if need <= cap:
            return
        new_cap = max(need, 2 * cap)
        for name in _FIELDS:
            old = getattr(self, name)
            fill = NEVER if name == "_seen" else 0
            new = np.full((new_cap,) + old.shape[1:], fill, dtype=old.dtype)
            new[: self._n] = old[: self._n]
            setattr(self, name, new)

    def ensure_cameras(self, n: int) -> None:
        """Grow the last-seen arrays so camera ids ``< n`` are addressable."""
        if n <= self.n_cameras:
            return
        extra = n - self.n_cameras
        self._seen = np.concatenate(
            [self._seen, np.full((len(self._seen), extra), NEVER, dtype=np.int64)], axis=1)
        self.now = np.concatenate([self.now, np.full(extra, NEVER, dtype=np.int64)])
        self.n_cameras = n

    def add(self, positions, normals, radii, weights, colors, init_time, camera: int, time: int) -> np.ndarray:
        positions = np.asarray(positions, float).reshape(-1, 3)
        m = len(positions)
        self._reserve(m)
        s = slice(self._n, self._n + m)
        self._pos[s] = positions
        self._nrm[s] = np.asarray(normals, float).reshape(-1, 3)
        self._rad[s] = radii
        self._wgt[s] = weights
        self._col[s] = np.asarray(colors, float).reshape(-1, 3)
        self._init[s] = init_time
        self._seen[s] = NEVER
        self._seen[s, camera] = time
        self._n += m
        return np.arange(s.start, s.stop)

    def copy(self) -> "SurfelMap":
        other = SurfelMap(self.n_cameras, self.config)
        for name in _FIELDS:
            setattr(other, name, getattr(self, name)[: max(self._n, 1)].copy())
        other._n = self._n
        other.now = self.now.copy()
        return other

    def extend(self, other: "SurfelMap") -> None:
        """Append all of ``other``'s surfels (caller aligns coordinates first)."""
        self.ensure_cameras(other.n_cameras)
        other.ensure_cameras(self.n_cameras)
        m = len(other)
        self._reserve(m)
        s = slice(self._n, self._n + m)
        for name in _FIELDS:
            getattr(self, name)[s] = getattr(other, name)[:m]
        self._n += m
        self.now = np.maximum(self.now, other.now)

    def state_equal(self, other: "SurfelMap") -> bool:
        """Bit-for-bit equality of all surfel attributes."""
        if len(self) != len(other) or self.n_cameras != other.n_cameras:
            return False
        return all(np.array_equal(getattr(self, n)[: self._n], getattr(other, n)[: other._n])
                   for n in _FIELDS)

    def touch(self, indices, camera: int, time: int) -> None:
        self._seen[np.asarray(indices, dtype=np.int64), camera] = time

    # -- activity ----------------------------------------------------------

    def advance_time(self, camera: int, now: int) -> None:
        if now < self.now[camera]:
            raise ValueError(f"time regression for camera {camera}: {now} < {self.now[camera]}")
        self.now[camera] = now

    def active_mask(self, camera: int, now: int | None = None) -> np.ndarray:
        now = int(self.now[camera]) if now is None else now
        seen = self.last_seen[:, camera]
        return (seen != NEVER) & (now - seen <= self.config.delta_t)

    def region_mask(self, camera: int, region: Region) -> np.ndarray:
        if region is Region.ALL:
            return np.ones(self._n, dtype=bool)
        active = self.active_mask(camera)
        return active if region is Region.ACTIVE else ~active

    def stable_mask(self) -> np.ndarray:
        return self.weights >= self.config.w_stable

    # -- rigid motion ------------------------------------------------------

    def apply_transform(self, t: RigidTransform) -> None:
        n = self._n
        self._pos[:n] = self._pos[:n] @ t.rotation.T + t.translation
        self._nrm[:n] = self._nrm[:n] @ t.rotation.T


def save_map(m: SurfelMap, path) -> None:
    """Store all surfel attributes and activity clocks in a ``.npz`` archive."""
    n = len(m)
    np.savez_compressed(path, **{name[1:]: getattr(m, name)[:n] for name in _FIELDS}, now=m.now,
                        n_cameras=np.array(m.n_cameras))


def load_map(path, config: SurfelConfig | None = None) -> SurfelMap:
    with np.load(path) as z:
        m = SurfelMap(int(z["n_cameras"]), config)
        n = len(z["pos"])
        m._reserve(n)
        for name in _FIELDS:
            getattr(m, name)[:n] = z[name[1:]]
        m._n = n
        m.now = z["now"].copy()
    return m


def apply_transform(m: SurfelMap, t: RigidTransform) -> None:
    m.apply_transform(t)


def advance_time(m: SurfelMap, camera: int, now: int) -> None:
    m.advance_time(camera, now)


# ---------------------------------------------------------------------------
# Rendering


@dataclass(frozen=True, eq=False)
class ModelView:
    depth: np.ndarray
    color: np.ndarray  # uint8
    normals: np.ndarray  # camera frame
    vertices: np.ndarray  # camera frame
    index: np.ndarray  # surfel id per pixel, -1 where empty
    pose: RigidTransform
    intrinsics: Intrinsics

    @property
    def valid(self) -> np.ndarray:
        return self.index >= 0

    @property
    def valid_count(self) -> int:
        return int(np.count_nonzero(self.index >= 0))

    def visible_surfels(self) -> np.ndarray:
        return np.unique(self.index[self.index >= 0])


def empty_view(pose: RigidTransform, k: Intrinsics) -> ModelView:
    h, w = k.shape
    return ModelView(np.zeros((h, w)), np.zeros((h, w, 3), np.uint8), np.zeros((h, w, 3)),
                     np.zeros((h, w, 3)), np.full((h, w), -1, np.int64), pose, k)


def predict_view(m: SurfelMap, camera: int, pose: RigidTransform, k: Intrinsics,
                 region: Region = Region.ACTIVE, stable_only: bool = True) -> ModelView:
    """Forward splat surfels as screen-space discs with a z-buffer."""
    mask = m.region_mask(camera, region)
    if stable_only:
        mask &= m.stable_mask()
    ids = np.flatnonzero(mask)
    h, w = k.shape
    if len(ids) == 0:
        return empty_view(pose, k)
    p = (m.positions[ids] - pose.translation) @ pose.rotation
    z = p[:, 2]
    front = z > Z_MIN
    ids, p, z = ids[front], p[front], z[front]
    zs = np.where(z > 0, z, 1.0)
    u = k.fx * p[:, 0] / zs + k.cx
    v = k.fy * p[:, 1] / zs + k.cy
    rpx = np.clip(m.radii[ids] * k.fx / zs, 1.0, float(m.config.max_splat_px))
    inside = (u + rpx >= -0.5) & (u - rpx < w - 0.5) & (v + rpx >= -0.5) & (v - rpx < h - 0.5)
    ids, p, z, u, v, rpx = ids[inside], p[inside], z[inside], u[inside], v[inside], rpx[inside]
    if len(ids) == 0:
        return empty_view(pose, k)
    n_cam = np.ascontiguousarray(m.normals[ids] @ pose.rotation)
    plane_d = np.sum(n_cam * p, axis=1)
    dbuf, owner = splat_discs(u, v, rpx, z, plane_d, n_cam, m.radii[ids].copy(), ids,
                              k.fx, k.fy, k.cx, k.cy, w, h, m.config.same_surface)
    pix = np.flatnonzero(owner >= 0)
    depth, sid = dbuf[pix], owner[pix]
    return _fill_view(m, pix, depth, sid, pose, k)


def _fill_view(m: SurfelMap, pix, depth, sid, pose, k) -> ModelView:
    h, w = k.shape
    dmap = np.zeros(h * w)
    imap = np.full(h * w, -1, np.int64)
    cmap = np.zeros((h * w, 3), np.uint8)
    nmap = np.zeros((h * w, 3))
    vmap = np.zeros((h * w, 3))
    dmap[pix] = depth
    imap[pix] = sid
    cmap[pix] = np.clip(np.round(m.colors[sid]), 0, 255).astype(np.uint8)
    nmap[pix] = m.normals[sid] @ pose.rotation
    py, px = np.divmod(pix, w)
    vmap[pix, 0] = (px - k.cx) / k.fx * depth
    vmap[pix, 1] = (py - k.cy) / k.fy * depth
    vmap[pix, 2] = depth
    return ModelView(dmap.reshape(h, w), cmap.reshape(h, w, 3), nmap.reshape(h, w, 3),
                     vmap.reshape(h, w, 3), imap.reshape(h, w), pose, k)


def point_index_map(m: SurfelMap, mask: np.ndarray, pose: RigidTransform, k: Intrinsics):
    """Surfel centres projected to their nearest pixel, nearest depth wins.

    Returns ``(index_map, subpixel_uv)`` where ``subpixel_uv`` holds the
    projected centre of every map surfel (NaN when not projected).
    """
    h, w = k.shape
    imap = np.full(h * w, -1, np.int64)
    ids = np.flatnonzero(mask)
    uv_all = np.full((len(m), 2), np.nan)
    if len(ids):
        p = (m.positions[ids] - pose.translation) @ pose.rotation
        z = p[:, 2]
        zs = np.where(z > Z_MIN, z, 1.0)
        u = k.fx * p[:, 0] / zs + k.cx
        v = k.fy * p[:, 1] / zs + k.cy
        iu, iv = np.rint(u).astype(np.int64), np.rint(v).astype(np.int64)
        ok = (z > Z_MIN) & (iu >= 0) & (iu < w) & (iv >= 0) & (iv < h)
        ids, z, u, v, iu, iv = ids[ok], z[ok], u[ok], v[ok], iu[ok], iv[ok]
        uv_all[ids, 0] = u
        uv_all[ids, 1] = v
        _, imap = point_zbuffer(iv * w + iu, z, ids, h * w)
    return imap.reshape(h, w), uv_all


# ---------------------------------------------------------------------------
# Fusion


def measurement_weights(k: Intrinsics, sigma: float) -> np.ndarray:
    """Confidence of each pixel from its normalized radial distance to the principal point."""
    u, v = np.meshgrid(np.arange(k.width, dtype=float), np.arange(k.height, dtype=float))
    half_diag = math.hypot(k.width / 2.0, k.height / 2.0)
    gamma = np.hypot(u - k.cx, v - k.cy) / half_diag
    return np.exp(-(gamma**2) / (2.0 * sigma**2))


def measurement_radii(depth: np.ndarray, normals: np.ndarray, valid: np.ndarray, k: Intrinsics,
                      min_abs_nz: float = 0.5) -> np.ndarray:
    nz = np.maximum(np.abs(normals[..., 2]), min_abs_nz)
    r = np.where(valid, depth * math.sqrt(2.0) / (k.fx * nz), 0.0)
    # clamp to twice the median of valid radii in the 3x3 neighbourhood
    h, w = r.shape
    padded = np.pad(r, 1)
    stack = np.stack([padded[1 + dy:1 + dy + h, 1 + dx:1 + dx + w]
                      for dy in (-1, 0, 1) for dx in (-1, 0, 1)], axis=-1)
    med = _median_of_valid(stack)
    return np.where(valid, np.minimum(r, 2.0 * np.where(med > 0, med, r)), 0.0)


def fuse_frame(m: SurfelMap, f: RgbdFrame, pose: RigidTransform, time: int,
               camera: int | None = None, init_time: int | None = None,
               normals: np.ndarray | None = None) -> FusionStats:
    """Projectively associate ``f`` with the camera's active surfels and fuse.

    Each surfel accepts at most one measurement per frame (the pixel nearest
    its projected centre); other pixels that associated with it are counted
    as merged without changing it. Unassociated pixels become new surfels.
    """
    cfg = m.config
    camera = f.camera_id if camera is None else camera
    init_time = time if init_time is None else init_time
    k = f.intrinsics
    if pose.orthonormality_error() > 1e-6:
        raise ValueError("pose rotation is not orthonormal")
    if camera >= m.n_cameras:
        raise ValueError(f"camera {camera} not registered with this map")
    h, w = k.shape
    depth = np.asarray(f.depth, float)
    verts = backproject_depth(depth, k)
    if normals is None:
        normals, nvalid = compute_normals(verts, depth)
    else:
        nvalid = np.linalg.norm(normals, axis=-1) > 0.5
    valid = (depth > 0) & nvalid
    if not valid.any():
        return FusionStats(0, 0, 0)
    conf = measurement_weights(k, cfg.sigma)
    radii = measurement_radii(depth, normals, valid, k, cfg.min_abs_nz)

    active = m.active_mask(camera)
    imap, uv = point_index_map(m, active, pose, k)
    pix = np.flatnonzero(valid.ravel())
    py, px = np.divmod(pix, w)
    z_meas = depth.ravel()[pix]
    n_meas = normals.reshape(-1, 3)[pix]
    cos_gate = math.cos(math.radians(cfg.normal_gate_deg))

    best = np.full(len(pix), -1, np.int64)
    best_score = np.full(len(pix), np.inf)
    padded = np.pad(imap, 1, constant_values=-1)
    for dy in (-1, 0, 1):
        for dx in (-1, 0, 1):
            cand = padded[py + 1 + dy, px + 1 + dx]
            has = cand >= 0
            if not has.any():
                continue
            c = cand[has]
            pc = (m.positions[c] - pose.translation) @ pose.rotation
            nc = m.normals[c] @ pose.rotation
            dz = np.abs(pc[:, 2] - z_meas[has])
            ok = (dz < cfg.depth_gate * z_meas[has]) & (np.sum(nc * n_meas[has], axis=1) > cos_gate)
            d2 = (uv[c, 0] - px[has]) ** 2 + (uv[c, 1] - py[has]) ** 2
            score = np.where(ok, d2 + 1e-3 * dz / z_meas[has], np.inf)
            sel = np.flatnonzero(has)
            better = score < best_score[sel]
            best[sel[better]] = c[better]
            best_score[sel[better]] = score[better]

    assoc = best >= 0
    merged = int(assoc.sum())
    updated = 0
    if merged:
        a_pix = np.flatnonzero(assoc)
        s_ids = best[a_pix]
        d2 = (uv[s_ids, 0] - px[a_pix]) ** 2 + (uv[s_ids, 1] - py[a_pix]) ** 2
        order = np.lexsort((a_pix, d2, s_ids))
        s_sorted = s_ids[order]
        first = np.ones(len(order), dtype=bool)
        first[1:] = s_sorted[1:] != s_sorted[:-1]
        win = a_pix[order[first]]
        sid = best[win]
        updated = len(sid)
        wp = conf.ravel()[pix[win]]
        w_old = m._wgt[sid]
        w_new = w_old + wp
        a = (w_old / w_new)[:, None]
        b = (wp / w_new)[:, None]
        pts_world = pose.apply(verts.reshape(-1, 3)[pix[win]])
        nrm_world = pose.rotate(n_meas[win])
        col = f.color.reshape(-1, 3)[pix[win]].astype(float)
        m._pos[sid] = a * m._pos[sid] + b * pts_world
        nrm = a * m._nrm[sid] + b * nrm_world
        m._nrm[sid] = nrm / np.linalg.norm(nrm, axis=1, keepdims=True)
        m._col[sid] = a * m._col[sid] + b * col
        m._wgt[sid] = w_new
        m._rad[sid] = np.minimum(m._rad[sid], radii.ravel()[pix[win]])
        m._seen[sid, camera] = time

    new = np.flatnonzero(~assoc)
    if len(new):
        q = pix[new]
        m.add(pose.apply(verts.reshape(-1, 3)[q]), pose.rotate(n_meas[new]), radii.ravel()[q],
              conf.ravel()[q], f.color.reshape(-1, 3)[q], init_time, camera, time)
    return FusionStats(merged, len(new), updated)


# ---------------------------------------------------------------------------
# PLY


def contribution_colors(m: SurfelMap, palette=PALETTE) -> np.ndarray:
    """Equal-weight blend of the palette colours of every camera that saw a surfel."""
    pal = np.array([palette[i % len(palette)] for i in range(m.n_cameras)], dtype=np.int64)
    seen = m.last_seen != NEVER
    count = seen.sum(axis=1)
    total = seen.astype(np.int64) @ pal
    out = np.full((len(m), 3), 128, dtype=np.int64)
    nz = count > 0
    out[nz] = total[nz] // count[nz, None]
    return out.astype(np.uint8)


def export_ply(m: SurfelMap, mode: str = "color", palette=PALETTE, stable_only: bool = False) -> bytes:
    if mode not in ("color", "contribution"):
        raise ValueError(f"unknown export mode {mode!r}")
    sel = m.stable_mask() if stable_only else np.ones(len(m), dtype=bool)
    if mode == "color":
        colors = np.clip(np.round(m.colors), 0, 255).astype(np.uint8)
    else:
        colors = contribution_colors(m, palette)
    pos, nrm, rad, colors = m.positions[sel], m.normals[sel], m.radii[sel], colors[sel]
    buf = io.StringIO()
    buf.write("ply\nformat ascii 1.0\ncomment cosurf surfel map\n")
    buf.write(f"element vertex {len(pos)}\n")
    for name in ("x", "y", "z", "nx", "ny", "nz", "radius"):
        buf.write(f"property float {name}\n")
    for name in ("red", "green", "blue"):
        buf.write(f"property uchar {name}\n")
    buf.write("end_header\n")
    for i in range(len(pos)):
        p, n, c = pos[i], nrm[i], colors[i]
        buf.write(f"{p[0]:.6f} {p[1]:.6f} {p[2]:.6f} {n[0]:.6f} {n[1]:.6f} {n[2]:.6f} "
                  f"{rad[i]:.6f} {c[0]} {c[1]} {c[2]}\n")
    return buf.getvalue().encode("ascii")


@dataclass
class PlyData:
    vertices: np.ndarray  # (N, k) float columns in header order
    names: list
    faces: np.ndarray | None

    def column(self, *names) -> np.ndarray:
        return self.vertices[:, [self.names.index(n) for n in names]]

    @property
    def points(self) -> np.ndarray:
        return self.column("x", "y", "z")

    def triangles(self) -> np.ndarray | None:
        if self.faces is None or len(self.faces) == 0:
            return None
        return self.points[self.faces]


def read_ply(data: bytes) -> PlyData:
    """Minimal ASCII PLY reader (vertex properties and triangle faces)."""
    text = data.decode("ascii")
    lines = text.splitlines()
    if not lines or lines[0].strip() != "ply":
        raise ValueError("not a PLY file")
    n_vert, n_face, names = 0, 0, []
    element = None
    body_start = None
    for i, line in enumerate(lines[1:], start=1):
        parts = line.split()
        if not parts:
            continue
        if parts[0] == "format" and parts[1] != "ascii":
            raise ValueError("only ASCII PLY is supported")
        if parts[0] == "element":
            element = parts[1]
            if element == "vertex":
                n_vert = int(parts[2])
            elif element == "face":
                n_face = int(parts[2])
        elif parts[0] == "property" and element == "vertex":
            names.append(parts[-1])
        elif parts[0] == "end_header":
            body_start = i + 1
            break
    if body_start is None:
        raise ValueError("PLY header not terminated")
    rows = [ln.split() for ln in lines[body_start:body_start + n_vert]]
    verts = np.array(rows, dtype=float).reshape(n_vert, len(names))
    faces = None
    if n_face:
        tri = []
        for ln in lines[body_start + n_vert:body_start + n_vert + n_face]:
            vals = [int(x) for x in ln.split()]
            idx = vals[1:1 + vals[0]]
            for j in range(1, len(idx) - 1):
                tri.append([idx[0], idx[j], idx[j + 1]])
        faces = np.array(tri, dtype=np.int64).reshape(-1, 3)
    return PlyData(verts, names, faces)
