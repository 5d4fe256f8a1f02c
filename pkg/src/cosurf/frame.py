"""RGB-D frames, image pyramids, and TUM RGB-D dataset ingestion."""

from __future__ import annotations

import logging
import math
from collections.abc import Sequence
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from PIL import Image
from scipy import ndimage

from .config import Z_MAX, FrameConfig
from .geometry import Z_MIN, Intrinsics, RigidTransform, backproject_depth

log = logging.getLogger(__name__)

N_LEVELS = 3
TUM_DEPTH_SCALE = 5000.0
ASSOCIATION_TOLERANCE = 0.02
_GAUSS_1D = np.array([1.0, 4.0, 6.0, 4.0, 1.0]) / 16.0
_GAUSS_5x5 = np.outer(_GAUSS_1D, _GAUSS_1D)


class DatasetError(ValueError):
    """Malformed or missing dataset input."""


class DepthScaleError(DatasetError):
    pass


@dataclass(frozen=True, eq=False)
class RgbdFrame:
    """One colour + depth capture. ``index`` is the per-camera frame counter."""

    camera_id: int
    index: int
    stamp: float
    color: np.ndarray  # (H, W, 3) uint8
    depth: np.ndarray  # (H, W) metres, 0 = invalid
    intrinsics: Intrinsics

    def __post_init__(self):
        h, w = self.intrinsics.shape
        if self.color.shape != (h, w, 3) or self.depth.shape != (h, w):
            raise ValueError(
                f"frame size {self.depth.shape}/{self.color.shape} does not match intrinsics {w}x{h}"
            )
        if self.color.dtype != np.uint8:
            raise ValueError("colour must be uint8")
        d = self.depth
        bad = (d != 0) & ((d < Z_MIN) | (d > Z_MAX) | ~np.isfinite(d))
        if bad.any():
            raise ValueError(f"{int(bad.sum())} depth values outside [{Z_MIN}, {Z_MAX}] m")

    @property
    def valid_count(self) -> int:
        return int(np.count_nonzero(self.depth))


def clean_depth(depth: np.ndarray, z_max: float = Z_MAX) -> np.ndarray:
    """Zero out values the frame invariants do not admit."""
    d = np.asarray(depth, dtype=float)
    d = np.where(np.isfinite(d), d, 0.0)
    return np.where((d >= Z_MIN) & (d <= min(z_max, Z_MAX)), d, 0.0)


def intensity_of(color: np.ndarray) -> np.ndarray:
    c = np.asarray(color, dtype=float)
    return (0.299 * c[..., 0] + 0.587 * c[..., 1] + 0.114 * c[..., 2]) / 255.0


def gaussian_downsample(image: np.ndarray) -> np.ndarray:
    smoothed = ndimage.convolve(image, _GAUSS_5x5, mode="nearest")
    return smoothed[::2, ::2]


def _median_of_valid(blocks: np.ndarray) -> np.ndarray:
    """Median over the last axis ignoring zeros (all-invalid -> 0)."""
    vals = np.where(blocks > 0, blocks, np.inf)
    vals = np.sort(vals, axis=-1)
    count = np.count_nonzero(blocks > 0, axis=-1)
    lo = np.clip((count - 1) // 2, 0, None)
    hi = np.clip(count // 2, 0, None)
    a = np.take_along_axis(vals, lo[..., None], -1)[..., 0]
    b = np.take_along_axis(vals, hi[..., None], -1)[..., 0]
    return np.where(count > 0, 0.5 * (a + b), 0.0)


def median_downsample(depth: np.ndarray, factor: int = 2) -> np.ndarray:
    """Block median-of-valid depth downsampling to ``ceil(dim / factor)``."""
    h, w = depth.shape
    hh, ww = math.ceil(h / factor), math.ceil(w / factor)
    padded = np.zeros((hh * factor, ww * factor))
    padded[:h, :w] = depth
    blocks = padded.reshape(hh, factor, ww, factor).transpose(0, 2, 1, 3).reshape(hh, ww, -1)
    return _median_of_valid(blocks)


def mean_downsample_color(color: np.ndarray, factor: int) -> np.ndarray:
    h, w, _ = color.shape
    hh, ww = math.ceil(h / factor), math.ceil(w / factor)
    padded = np.zeros((hh * factor, ww * factor, 3))
    count = np.zeros((hh * factor, ww * factor, 1))
    padded[:h, :w] = color
    count[:h, :w] = 1
    s = padded.reshape(hh, factor, ww, factor, 3).sum(axis=(1, 3))
    n = count.reshape(hh, factor, ww, factor, 1).sum(axis=(1, 3))
    return np.round(s / n).astype(np.uint8)


def downscale_frame(frame: RgbdFrame, factor: int) -> RgbdFrame:
    """Integer-factor resolution reduction (e.g. 640x480 -> 160x120 with factor 4)."""
    if factor == 1:
        return frame
    k = frame.intrinsics
    s = float(factor)
    k2 = Intrinsics(k.fx / s, k.fy / s, (k.cx + 0.5) / s - 0.5, (k.cy + 0.5) / s - 0.5,
                    math.ceil(k.width / s), math.ceil(k.height / s))
    return RgbdFrame(frame.camera_id, frame.index, frame.stamp,
                     mean_downsample_color(frame.color, factor),
                     median_downsample(frame.depth, factor), k2)


def bilateral_filter(depth: np.ndarray, sigma_space: float = 1.5, sigma_depth: float = 0.02,
                     radius: int = 2) -> np.ndarray:
    """Edge-preserving depth smoothing; invalid pixels stay invalid."""
    h, w = depth.shape
    padded = np.pad(depth, radius)
    num = np.zeros_like(depth)
    den = np.zeros_like(depth)
    for dy in range(-radius, radius + 1):
        for dx in range(-radius, radius + 1):
            nb = padded[radius + dy:radius + dy + h, radius + dx:radius + dx + w]
            wgt = np.exp(-(dx * dx + dy * dy) / (2 * sigma_space**2)
                         - (nb - depth) ** 2 / (2 * sigma_depth**2))
            wgt = np.where(nb > 0, wgt, 0.0)
            num += wgt * nb
            den += wgt
    return np.where((depth > 0) & (den > 0), num / np.maximum(den, 1e-12), 0.0)


def compute_normals(vertices: np.ndarray, depth: np.ndarray, discontinuity: float = 0.1):
    """Central-difference normals facing the camera.

    Returns ``(normals, valid)``. A pixel is invalid on the image border,
    when it or any 4-neighbour has no depth, or when a neighbour's depth
    jumps by more than ``discontinuity * z``.
    """
    h, w = depth.shape
    normals = np.zeros((h, w, 3))
    valid = np.zeros((h, w), dtype=bool)
    if h < 3 or w < 3:
        return normals, valid
    c = depth[1:-1, 1:-1]
    left, right = depth[1:-1, :-2], depth[1:-1, 2:]
    up, down = depth[:-2, 1:-1], depth[2:, 1:-1]
    ok = (c > 0) & (left > 0) & (right > 0) & (up > 0) & (down > 0)
    jump = np.maximum.reduce([np.abs(left - c), np.abs(right - c), np.abs(up - c), np.abs(down - c)])
    ok &= jump <= discontinuity * c
    dx = vertices[1:-1, 2:] - vertices[1:-1, :-2]
    dy = vertices[2:, 1:-1] - vertices[:-2, 1:-1]
    n = np.cross(dy, dx)
    norm = np.linalg.norm(n, axis=-1)
    ok &= norm > 1e-12
    n = n / np.where(norm > 0, norm, 1.0)[..., None]
    facing = np.sum(n * vertices[1:-1, 1:-1], axis=-1) > 0
    n[facing] *= -1
    normals[1:-1, 1:-1] = np.where(ok[..., None], n, 0.0)
    valid[1:-1, 1:-1] = ok
    return normals, valid


@dataclass(frozen=True, eq=False)
class PyramidLevel:
    intensity: np.ndarray  # (h, w) in [0, 1]
    depth: np.ndarray
    vertices: np.ndarray  # (h, w, 3) camera frame
    normals: np.ndarray  # (h, w, 3), zero where invalid
    normal_valid: np.ndarray
    intrinsics: Intrinsics

    @property
    def valid(self) -> np.ndarray:
        return self.depth > 0


@dataclass(frozen=True, eq=False)
class FramePyramid:
    levels: tuple

    def __getitem__(self, level: int) -> PyramidLevel:
        return self.levels[level]

    def __len__(self) -> int:
        return len(self.levels)


def make_level(intensity, depth, k: Intrinsics, discontinuity: float) -> PyramidLevel:
    vertices = backproject_depth(depth, k)
    normals, nvalid = compute_normals(vertices, depth, discontinuity)
    return PyramidLevel(intensity, depth, vertices, normals, nvalid, k)


def build_pyramid_from_maps(intensity: np.ndarray, depth: np.ndarray, k: Intrinsics,
                            n_levels: int = N_LEVELS, discontinuity: float = 0.1) -> FramePyramid:
    levels = [make_level(intensity, depth, k, discontinuity)]
    for lvl in range(1, n_levels):
        intensity = gaussian_downsample(intensity)
        depth = median_downsample(depth)
        levels.append(make_level(intensity, depth, k.scaled(lvl), discontinuity))
    return FramePyramid(tuple(levels))


def build_pyramid(frame: RgbdFrame, config: FrameConfig | None = None) -> FramePyramid:
    cfg = config or FrameConfig()
    depth = np.asarray(frame.depth, dtype=float)
    if cfg.bilateral:
        depth = bilateral_filter(depth, cfg.bilateral_sigma_space, cfg.bilateral_sigma_depth)
    return build_pyramid_from_maps(intensity_of(frame.color), depth, frame.intrinsics,
                                   discontinuity=cfg.normal_discontinuity)


# ---------------------------------------------------------------------------
# TUM RGB-D format


def read_trajectory(path) -> list[tuple[float, RigidTransform]]:
    """Read ``timestamp tx ty tz qx qy qz qw`` lines (``#`` comments allowed)."""
    poses = []
    for lineno, line in enumerate(Path(path).read_text().splitlines(), start=1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        parts = line.split()
        if len(parts) != 8:
            raise DatasetError(f"{path}:{lineno}: expected 8 fields, got {len(parts)}")
        try:
            vals = [float(x) for x in parts]
        except ValueError as exc:
            raise DatasetError(f"{path}:{lineno}: {exc}") from None
        try:
            pose = RigidTransform.from_quaternion(vals[1:4], vals[4:8])
        except ValueError as exc:
            raise DatasetError(f"{path}:{lineno}: {exc}") from None
        poses.append((vals[0], pose))
    poses.sort(key=lambda p: p[0])
    return poses


def format_trajectory(poses) -> str:
    lines = []
    for stamp, pose in poses:
        t = pose.translation
        q = pose.quaternion()
        lines.append(f"{stamp:.6f} {t[0]:.9f} {t[1]:.9f} {t[2]:.9f} "
                     f"{q[0]:.9f} {q[1]:.9f} {q[2]:.9f} {q[3]:.9f}")
    return "\n".join(lines) + ("\n" if lines else "")


def write_trajectory(path, poses) -> None:
    Path(path).write_text(format_trajectory(poses))


def read_depth_png(path, scale: float = TUM_DEPTH_SCALE) -> np.ndarray:
    try:
        with Image.open(path) as img:
            mode = img.mode
            raw = np.array(img)
    except FileNotFoundError:
        raise
    except OSError as exc:
        raise DatasetError(f"{path}: unreadable depth image ({exc})") from None
    if raw.ndim != 2:
        raise DatasetError(f"{path}: depth image must be single channel")
    if mode not in ("I;16", "I;16B", "I;16L", "I"):
        # an 8-bit depth image cannot carry the 5000 units per metre scale
        raise DepthScaleError(f"{path}: depth image must be 16-bit, got mode {mode}")
    if raw.dtype.kind == "f" or raw.max(initial=0) > 65535 or raw.min(initial=0) < 0:
        raise DepthScaleError(f"{path}: depth values exceed the 16-bit range")
    return raw.astype(float) / scale


def read_color_png(path) -> np.ndarray:
    with Image.open(path) as img:
        return np.array(img.convert("RGB"), dtype=np.uint8)


@dataclass(frozen=True)
class _Entry:
    stamp: float
    rgb: Path
    depth: Path


class TumSequence(Sequence):
    """Lazily loaded, timestamp-ordered frames of one TUM sequence."""

    def __init__(self, entries, intrinsics: Intrinsics, camera_id: int = 0, factor: int = 1,
                 first_index: int = 0, z_max: float = Z_MAX):
        self._entries = list(entries)
        self.intrinsics = intrinsics
        self.camera_id = camera_id
        self.factor = factor
        self.first_index = first_index
        self.z_max = z_max

    def __len__(self) -> int:
        return len(self._entries)

    def __getitem__(self, i):
        if isinstance(i, slice):
            return [self[j] for j in range(*i.indices(len(self)))]
        e = self._entries[i]
        depth = clean_depth(read_depth_png(e.depth), self.z_max)
        color = read_color_png(e.rgb)
        frame = RgbdFrame(self.camera_id, self.first_index + (i % len(self)), e.stamp,
                          color, depth, self.intrinsics)
        return downscale_frame(frame, self.factor)

    @property
    def stamps(self) -> list[float]:
        return [e.stamp for e in self._entries]

    def split(self, parts: int) -> list["TumSequence"]:
        """Equal-length consecutive subsequences, one per pseudo camera."""
        n = len(self) // parts
        return [TumSequence(self._entries[p * n:(p + 1) * n], self.intrinsics, camera_id=p,
                            factor=self.factor, z_max=self.z_max) for p in range(parts)]


def load_tum_sequence(directory, association="associations.txt", intrinsics: Intrinsics | None = None,
                      groundtruth="groundtruth.txt", camera_id: int = 0, factor: int = 1,
                      z_max: float = Z_MAX):
    """Index a TUM RGB-D sequence.

    Returns ``(frames, groundtruth)`` where ``frames`` is a lazily loaded
    sequence and ``groundtruth`` is a list of ``(stamp, pose)`` or None.
    Association lines whose two timestamps differ by more than 0.02 s are
    dropped with a warning.
    """
    root = Path(directory)
    assoc_path = root / association
    if not assoc_path.exists():
        raise FileNotFoundError(assoc_path)
    entries = []
    for lineno, line in enumerate(assoc_path.read_text().splitlines(), start=1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        parts = line.split()
        if len(parts) != 4:
            raise DatasetError(f"{assoc_path}:{lineno}: expected 'ts rgb ts depth', got {len(parts)} fields")
        try:
            ts_rgb, ts_depth = float(parts[0]), float(parts[2])
        except ValueError:
            raise DatasetError(f"{assoc_path}:{lineno}: bad timestamp") from None
        if abs(ts_rgb - ts_depth) > ASSOCIATION_TOLERANCE:
            log.warning("%s:%d: rgb/depth stamps %.3f s apart, skipped", assoc_path, lineno,
                        abs(ts_rgb - ts_depth))
            continue
        rgb, depth = root / parts[1], root / parts[3]
        for p in (rgb, depth):
            if not p.exists():
                raise FileNotFoundError(f"{assoc_path}:{lineno}: missing {p}")
        entries.append(_Entry(ts_depth, rgb, depth))
    entries.sort(key=lambda e: e.stamp)
    if intrinsics is None:
        if entries:
            with Image.open(entries[0].depth) as img:
                w, h = img.size
        else:
            w, h = 640, 480
        intrinsics = Intrinsics(525.0 * w / 640, 525.0 * h / 480, (w - 1) / 2, (h - 1) / 2, w, h)
    gt = None
    gt_path = root / groundtruth if groundtruth else None
    if gt_path is not None and gt_path.exists():
        gt = read_trajectory(gt_path)
    return TumSequence(entries, intrinsics, camera_id, factor, z_max=z_max), gt
