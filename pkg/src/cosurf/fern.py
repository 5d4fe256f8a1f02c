"""Fern keyframe encoding and retrieval for place recognition.

A fern is a group of binary tests on a small downsampled RGB-D image; its
4-bit outcome is the fern's code. Frames are compared by the fraction of
ferns whose codes differ (block Hamming distance).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np

from .config import FernConfig
from .frame import mean_downsample_color, median_downsample
from .geometry import RigidTransform

CHANNELS = ("R", "G", "B", "D")


@dataclass(frozen=True, eq=False)
class FernSpec:
    """Per-test pixel coordinates, channel (0-2 colour, 3 depth) and threshold, shape (N, tests)."""

    xs: np.ndarray
    ys: np.ndarray
    channels: np.ndarray
    thresholds: np.ndarray
    width: int
    height: int
    seed: int | None = None

    def __post_init__(self):
        shapes = {self.xs.shape, self.ys.shape, self.channels.shape, self.thresholds.shape}
        if len(shapes) != 1 or self.xs.ndim != 2:
            raise ValueError("fern test arrays must share one (n_ferns, tests) shape")
        if self.xs.shape[1] > 8:
            raise ValueError("codes are stored in one byte: at most 8 tests per fern")
        if (self.xs.min(initial=0) < 0 or self.xs.max(initial=0) >= self.width
                or self.ys.min(initial=0) < 0 or self.ys.max(initial=0) >= self.height):
            raise ValueError("fern test coordinates outside the image")

    @property
    def n_ferns(self) -> int:
        return self.xs.shape[0]

    @property
    def tests_per_fern(self) -> int:
        return self.xs.shape[1]

    @property
    def key(self) -> tuple:
        """Identity used to refuse comparing encodings from different specs."""
        return (self.n_ferns, self.tests_per_fern, self.width, self.height, self.seed,
                hash(self.thresholds.tobytes()), hash(self.xs.tobytes()), hash(self.channels.tobytes()))

    def same_as(self, other: "FernSpec") -> bool:
        return self.key == other.key


def generate_spec(config: FernConfig | None = None) -> FernSpec:
    cfg = config or FernConfig()
    rng = np.random.default_rng(cfg.seed)
    shape = (cfg.n_ferns, cfg.tests_per_fern)
    xs = rng.integers(0, cfg.width, size=shape)
    ys = rng.integers(0, cfg.height, size=shape)
    channels = rng.integers(0, 4, size=shape)
    color_t = rng.uniform(0.0, 255.0, size=shape)
    depth_t = rng.uniform(cfg.depth_min, cfg.depth_max, size=shape)
    thresholds = np.where(channels == 3, depth_t, color_t)
    return FernSpec(xs, ys, channels, thresholds, cfg.width, cfg.height, cfg.seed)


@dataclass(frozen=True, eq=False)
class FernEncoding:
    codes: np.ndarray  # uint8, one code per fern
    spec_key: tuple

    def __eq__(self, other):
        return (isinstance(other, FernEncoding) and self.spec_key == other.spec_key
                and np.array_equal(self.codes, other.codes))

    def __hash__(self):
        return hash((self.codes.tobytes(), self.spec_key))


def fern_image(color: np.ndarray, depth: np.ndarray, spec: FernSpec):
    """Downsample an RGB-D pair by an integer factor to the fern resolution."""
    h, w = depth.shape
    if (w, h) == (spec.width, spec.height):
        return color, depth
    fx, fy = w / spec.width, h / spec.height
    if fx != fy or fx != int(fx):
        raise ValueError(f"cannot reduce {w}x{h} to {spec.width}x{spec.height} by an integer factor")
    f = int(fx)
    return mean_downsample_color(color, f), median_downsample(depth, f)


def encode(color: np.ndarray, depth: np.ndarray, spec: FernSpec) -> FernEncoding:
    """Encode an image at exactly the fern resolution."""
    if depth.shape != (spec.height, spec.width) or color.shape[:2] != depth.shape:
        raise ValueError(f"fern input must be {spec.width}x{spec.height}, got "
                         f"{depth.shape[1]}x{depth.shape[0]}")
    d = np.where(np.isfinite(depth) & (depth > 0), depth, 0.0)
    planes = np.concatenate([np.asarray(color, float), d[..., None]], axis=-1)
    values = planes[spec.ys, spec.xs, spec.channels]
    bits = (values >= spec.thresholds).astype(np.uint8)
    weights = (1 << np.arange(spec.tests_per_fern)).astype(np.uint8)
    codes = (bits * weights).sum(axis=1).astype(np.uint8)
    return FernEncoding(codes, spec.key)


def encode_any(color: np.ndarray, depth: np.ndarray, spec: FernSpec) -> FernEncoding:
    return encode(*fern_image(color, depth, spec), spec)


def dissimilarity(a: FernEncoding, b: FernEncoding) -> float:
    if a.spec_key != b.spec_key:
        raise ValueError("encodings come from different fern specs")
    return float(np.count_nonzero(a.codes != b.codes)) / len(a.codes)


@dataclass
class Keyframe:
    encoding: FernEncoding
    pose: RigidTransform
    color: np.ndarray  # snapshot at tracking resolution
    depth: np.ndarray
    camera: int
    time: int
    intrinsics: object = None


@dataclass(frozen=True)
class AddResult:
    added: bool
    entry: int  # new id when added, else the nearest existing entry
    dissimilarity: float


@dataclass(frozen=True)
class Match:
    entry: int
    dissimilarity: float


@dataclass
class FernDatabase:
    spec: FernSpec
    config: FernConfig = field(default_factory=FernConfig)
    entries: list = field(default_factory=list)

    def __post_init__(self):
        self._index = [[[] for _ in range(1 << self.spec.tests_per_fern)] for _ in range(self.spec.n_ferns)]
        self._codes = np.zeros((0, self.spec.n_ferns), np.uint8)
        entries, self.entries = self.entries, []
        for e in entries:
            self._append(e)

    @classmethod
    def create(cls, config: FernConfig | None = None) -> "FernDatabase":
        cfg = config or FernConfig()
        return cls(generate_spec(cfg), cfg)

    def __len__(self) -> int:
        return len(self.entries)

    def _append(self, e: Keyframe) -> int:
        if e.encoding.spec_key != self.spec.key:
            raise ValueError("keyframe encoded with a different fern spec")
        i = len(self.entries)
        self.entries.append(e)
        for f, c in enumerate(e.encoding.codes):
            self._index[f][c].append(i)
        self._codes = np.vstack([self._codes, e.encoding.codes[None]])
        return i

    def encode(self, color, depth) -> FernEncoding:
        return encode_any(color, depth, self.spec)

    def similarity_counts(self, q: FernEncoding) -> np.ndarray:
        """Number of ferns each entry shares with ``q``, accumulated through the inverted index."""
        if q.spec_key != self.spec.key:
            raise ValueError("query encoded with a different fern spec")
        lists = [self._index[f][c] for f, c in enumerate(q.codes)]
        hits = np.fromiter((i for lst in lists for i in lst), dtype=np.int64)
        return np.bincount(hits, minlength=len(self.entries))

    def nearest(self, q: FernEncoding, eligible=None):
        """``(entry, dissimilarity)`` of the closest eligible entry, lowest id on ties."""
        if not self.entries:
            return None
        counts = self.similarity_counts(q)
        if eligible is not None:
            mask = np.array([bool(eligible(e)) for e in self.entries])
            if not mask.any():
                return None
            counts = np.where(mask, counts, -1)
        best = int(np.argmax(counts))  # argmax returns the first (lowest id) maximum
        return best, float(self.spec.n_ferns - counts[best]) / self.spec.n_ferns

    def nearest_linear(self, q: FernEncoding, eligible=None):
        """Exhaustive scan using :func:`dissimilarity` (reference for :meth:`nearest`)."""
        best = None
        for i, e in enumerate(self.entries):
            if eligible is not None and not eligible(e):
                continue
            d = dissimilarity(q, e.encoding)
            if best is None or d < best[1]:
                best = (i, d)
        return best

    def try_add(self, q: FernEncoding, pose: RigidTransform, color, depth, camera: int, time: int,
                intrinsics=None) -> AddResult:
        near = self.nearest(q)
        if near is not None and near[1] <= self.config.t_add:
            return AddResult(False, near[0], near[1])
        i = self._append(Keyframe(q, pose, np.array(color), np.array(depth), camera, time, intrinsics))
        return AddResult(True, i, 0.0 if near is None else near[1])

    def find_match(self, q: FernEncoding, eligible=None) -> Match | None:
        near = self.nearest(q, eligible)
        if near is None or not near[1] < self.config.t_match:
            return None
        return Match(*near)

    def check_index(self) -> bool:
        """True when the inverted index agrees with one rebuilt from the stored encodings."""
        rebuilt = [[[] for _ in range(1 << self.spec.tests_per_fern)] for _ in range(self.spec.n_ferns)]
        for i, e in enumerate(self.entries):
            for f, c in enumerate(e.encoding.codes):
                rebuilt[f][c].append(i)
        return rebuilt == self._index

    def transformed(self, t: RigidTransform) -> "FernDatabase":
        """Copy with every stored pose mapped through ``t`` (poses are camera-to-world)."""
        return FernDatabase(self.spec, self.config, [replace(e, pose=t @ e.pose) for e in self.entries])

    def extend(self, other: "FernDatabase") -> None:
        if not other.spec.same_as(self.spec):
            raise ValueError("cannot merge fern databases built from different specs")
        for e in other.entries:
            self._append(e)

    def copy(self) -> "FernDatabase":
        return FernDatabase(self.spec, self.config, list(self.entries))


def try_add_keyframe(db: FernDatabase, color, depth, pose, camera: int, time: int, intrinsics=None) -> AddResult:
    return db.try_add(db.encode(color, depth), pose, color, depth, camera, time, intrinsics)


def find_match(db: FernDatabase, color, depth, eligible=None) -> Match | None:
    return db.find_match(db.encode(color, depth), eligible)


def flip_codes(enc: FernEncoding, n: int, rng: np.random.Generator, tests_per_fern: int = 4) -> FernEncoding:
    """Encoding with exactly ``n`` randomly chosen fern codes changed (fixture helper)."""
    codes = enc.codes.copy()
    which = rng.choice(len(codes), size=n, replace=False)
    codes[which] = (codes[which] + rng.integers(1, 1 << tests_per_fern, size=n)) % (1 << tests_per_fern)
    return FernEncoding(codes.astype(np.uint8), enc.spec_key)


def boundary_flip_count(config: FernConfig) -> int:
    """Number of codes to flip to land exactly on ``t_add``."""
    return math.floor(config.t_add * config.n_ferns)
