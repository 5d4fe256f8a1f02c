"""SE(3)/SO(3) algebra, pinhole intrinsics and (back)projection.

Twists are ordered ``(vx, vy, vz, wx, wy, wz)``: translational part first.
Poses are camera-to-world unless stated otherwise.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

Z_MIN = 0.05  # metres; consumer depth sensors report nothing closer
SMALL_ANGLE = 1e-8
LOG_MAX_ANGLE = math.pi - 1e-6
REORTHO_EVERY = 1000


def skew(v: np.ndarray) -> np.ndarray:
    x, y, z = np.asarray(v, dtype=float).reshape(3)
    return np.array([[0.0, -z, y], [z, 0.0, -x], [-y, x, 0.0]])


def skew_batch(v: np.ndarray) -> np.ndarray:
    """Stack of skew matrices for an (N, 3) array."""
    v = np.asarray(v, dtype=float)
    out = np.zeros(v.shape[:-1] + (3, 3))
    out[..., 0, 1] = -v[..., 2]
    out[..., 0, 2] = v[..., 1]
    out[..., 1, 0] = v[..., 2]
    out[..., 1, 2] = -v[..., 0]
    out[..., 2, 0] = -v[..., 1]
    out[..., 2, 1] = v[..., 0]
    return out


def polar_rotation(m: np.ndarray) -> np.ndarray:
    """Nearest rotation matrix (orthogonal polar factor with det +1)."""
    u, _, vt = np.linalg.svd(m)
    r = u @ vt
    if np.linalg.det(r) < 0:
        u[:, -1] *= -1
        r = u @ vt
    return r


@dataclass(frozen=True, eq=False)
class RigidTransform:
    """Element of SE(3): ``x -> rotation @ x + translation``."""

    rotation: np.ndarray
    translation: np.ndarray
    # number of compositions since the last re-orthonormalization
    chain: int = field(default=0, repr=False)

    def __post_init__(self):
        object.__setattr__(self, "rotation", np.array(self.rotation, dtype=float).reshape(3, 3))
        object.__setattr__(self, "translation", np.array(self.translation, dtype=float).reshape(3))

    @classmethod
    def identity(cls) -> "RigidTransform":
        return cls(np.eye(3), np.zeros(3))

    @classmethod
    def from_matrix(cls, m: np.ndarray) -> "RigidTransform":
        m = np.asarray(m, dtype=float)
        return cls(m[:3, :3], m[:3, 3])

    @classmethod
    def from_translation(cls, t) -> "RigidTransform":
        return cls(np.eye(3), t)

    @classmethod
    def from_quaternion(cls, translation, quat_xyzw) -> "RigidTransform":
        """Build from a TUM-style ``(qx, qy, qz, qw)`` quaternion (normalized here)."""
        q = np.asarray(quat_xyzw, dtype=float)
        n = np.linalg.norm(q)
        if n == 0.0:
            raise ValueError("zero quaternion")
        x, y, z, w = q / n
        r = np.array([
            [1 - 2 * (y * y + z * z), 2 * (x * y - z * w), 2 * (x * z + y * w)],
            [2 * (x * y + z * w), 1 - 2 * (x * x + z * z), 2 * (y * z - x * w)],
            [2 * (x * z - y * w), 2 * (y * z + x * w), 1 - 2 * (x * x + y * y)],
        ])
        return cls(r, translation)

    def quaternion(self) -> np.ndarray:
        """Unit quaternion ``(qx, qy, qz, qw)`` with ``qw >= 0``."""
        r = self.rotation
        tr = np.trace(r)
        if tr > 0:
            s = math.sqrt(tr + 1.0) * 2
            q = [(r[2, 1] - r[1, 2]) / s, (r[0, 2] - r[2, 0]) / s, (r[1, 0] - r[0, 1]) / s, 0.25 * s]
        elif r[0, 0] > r[1, 1] and r[0, 0] > r[2, 2]:
            s = math.sqrt(1.0 + r[0, 0] - r[1, 1] - r[2, 2]) * 2
            q = [0.25 * s, (r[0, 1] + r[1, 0]) / s, (r[0, 2] + r[2, 0]) / s, (r[2, 1] - r[1, 2]) / s]
        elif r[1, 1] > r[2, 2]:
            s = math.sqrt(1.0 + r[1, 1] - r[0, 0] - r[2, 2]) * 2
            q = [(r[0, 1] + r[1, 0]) / s, 0.25 * s, (r[1, 2] + r[2, 1]) / s, (r[0, 2] - r[2, 0]) / s]
        else:
            s = math.sqrt(1.0 + r[2, 2] - r[0, 0] - r[1, 1]) * 2
            q = [(r[0, 2] + r[2, 0]) / s, (r[1, 2] + r[2, 1]) / s, 0.25 * s, (r[1, 0] - r[0, 1]) / s]
        q = np.array(q)
        q /= np.linalg.norm(q)
        return -q if q[3] < 0 else q

    @property
    def matrix(self) -> np.ndarray:
        m = np.eye(4)
        m[:3, :3] = self.rotation
        m[:3, 3] = self.translation
        return m

    def compose(self, other: "RigidTransform") -> "RigidTransform":
        """``self @ other``: apply ``other`` first, then ``self``."""
        r = self.rotation @ other.rotation
        t = self.rotation @ other.translation + self.translation
        chain = max(self.chain, other.chain) + 1
        if chain >= REORTHO_EVERY:
            r = polar_rotation(r)
            chain = 0
        return RigidTransform(r, t, chain)

    __matmul__ = compose

    def inverse(self) -> "RigidTransform":
        rt = self.rotation.T
        return RigidTransform(rt, -rt @ self.translation, self.chain)

    def apply(self, points: np.ndarray) -> np.ndarray:
        """Transform points of shape (3,) or (..., 3)."""
        p = np.asarray(points, dtype=float)
        return p @ self.rotation.T + self.translation

    def rotate(self, vectors: np.ndarray) -> np.ndarray:
        """Rotate direction vectors (normals); translation is ignored."""
        return np.asarray(vectors, dtype=float) @ self.rotation.T

    def orthonormality_error(self) -> float:
        return float(np.abs(self.rotation.T @ self.rotation - np.eye(3)).max())

    def rotation_angle(self) -> float:
        c = (np.trace(self.rotation) - 1.0) / 2.0
        return float(math.acos(min(1.0, max(-1.0, c))))

    def allclose(self, other: "RigidTransform", atol: float = 1e-9) -> bool:
        return bool(np.allclose(self.matrix, other.matrix, rtol=0.0, atol=atol))

    def __repr__(self) -> str:
        t = np.array2string(self.translation, precision=4)
        return f"RigidTransform(t={t}, angle={math.degrees(self.rotation_angle()):.3f}deg)"


def compose(a: RigidTransform, b: RigidTransform) -> RigidTransform:
    return a.compose(b)


def invert(t: RigidTransform) -> RigidTransform:
    return t.inverse()


def pose_error(a: RigidTransform, b: RigidTransform) -> tuple[float, float]:
    """Translation (m) and rotation (rad) magnitude of ``a^-1 b``."""
    d = a.inverse() @ b
    return float(np.linalg.norm(d.translation)), d.rotation_angle()


def _so3_coefficients(theta: float):
    if theta < SMALL_ANGLE:
        t2 = theta * theta
        return 1.0 - t2 / 6.0, 0.5 - t2 / 24.0, 1.0 / 6.0 - t2 / 120.0
    s, c = math.sin(theta), math.cos(theta)
    return s / theta, (1.0 - c) / (theta * theta), (theta - s) / theta**3


def so3_exp(omega: np.ndarray) -> np.ndarray:
    omega = np.asarray(omega, dtype=float).reshape(3)
    a, b, _ = _so3_coefficients(float(np.linalg.norm(omega)))
    k = skew(omega)
    return np.eye(3) + a * k + b * (k @ k)


def exp_se3(xi) -> RigidTransform:
    """Exponential map from a twist ``(v, w)`` to SE(3)."""
    xi = np.asarray(xi, dtype=float).reshape(6)
    v, omega = xi[:3], xi[3:]
    theta = float(np.linalg.norm(omega))
    a, b, c = _so3_coefficients(theta)
    k = skew(omega)
    k2 = k @ k
    r = np.eye(3) + a * k + b * k2
    jac = np.eye(3) + b * k + c * k2
    return RigidTransform(r, jac @ v)


def log_se3(t: RigidTransform) -> np.ndarray:
    """Logarithm of a transform with rotation angle below pi."""
    r = t.rotation
    cos_theta = min(1.0, max(-1.0, (np.trace(r) - 1.0) / 2.0))
    theta = math.acos(cos_theta)
    if theta >= LOG_MAX_ANGLE:
        raise ValueError(f"log undefined near angle pi (got {theta:.9f} rad)")
    w_vee = np.array([r[2, 1] - r[1, 2], r[0, 2] - r[2, 0], r[1, 0] - r[0, 1]])
    if theta < SMALL_ANGLE:
        omega = 0.5 * w_vee
        d = 1.0 / 12.0
    else:
        omega = theta / (2.0 * math.sin(theta)) * w_vee
        a, b, _ = _so3_coefficients(theta)
        d = (1.0 - a / (2.0 * b)) / (theta * theta)
    k = skew(omega)
    jac_inv = np.eye(3) - 0.5 * k + d * (k @ k)
    return np.concatenate([jac_inv @ t.translation, omega])


@dataclass(frozen=True)
class Intrinsics:
    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int

    def __post_init__(self):
        if not (self.fx > 0 and self.fy > 0):
            raise ValueError("focal lengths must be positive")
        if not (0 <= self.cx < self.width and 0 <= self.cy < self.height):
            raise ValueError("principal point outside the image")

    @classmethod
    def default(cls, width: int = 160, height: int = 120) -> "Intrinsics":
        """Kinect-like field of view at the requested resolution."""
        s = width / 640.0
        return cls(525.0 * s, 525.0 * s, (width - 1) / 2.0, (height - 1) / 2.0, width, height)

    @property
    def shape(self) -> tuple[int, int]:
        return self.height, self.width

    @property
    def matrix(self) -> np.ndarray:
        return np.array([[self.fx, 0, self.cx], [0, self.fy, self.cy], [0, 0, 1.0]])

    def scaled(self, level: int) -> "Intrinsics":
        """Intrinsics of pyramid level ``level`` (each level halves the image).

        Pixel centres are preserved: level pixel ``u`` covers level-0 pixels
        ``2u`` and ``2u + 1``.
        """
        s = 2.0**level
        return Intrinsics(
            self.fx / s,
            self.fy / s,
            (self.cx + 0.5) / s - 0.5,
            (self.cy + 0.5) / s - 0.5,
            math.ceil(self.width / s),
            math.ceil(self.height / s),
        )

    def pixel_rays(self) -> np.ndarray:
        """(H, W, 3) camera-frame rays with unit z."""
        u, v = np.meshgrid(np.arange(self.width, dtype=float), np.arange(self.height, dtype=float))
        return np.stack([(u - self.cx) / self.fx, (v - self.cy) / self.fy, np.ones_like(u)], axis=-1)


def project_points(points: np.ndarray, k: Intrinsics, z_min: float = Z_MIN):
    """Vectorized pinhole projection.

    Returns ``(uv, valid)``; ``valid`` is False behind the near plane or
    outside ``[0, width) x [0, height)``.
    """
    p = np.asarray(points, dtype=float)
    z = p[..., 2]
    front = z > z_min
    safe_z = np.where(front, z, 1.0)
    u = k.fx * p[..., 0] / safe_z + k.cx
    v = k.fy * p[..., 1] / safe_z + k.cy
    valid = front & (u >= 0) & (u < k.width) & (v >= 0) & (v < k.height)
    return np.stack([u, v], axis=-1), valid


def project(p, k: Intrinsics, z_min: float = Z_MIN):
    """Project a single camera-frame point; ``None`` when out of view."""
    uv, valid = project_points(np.asarray(p, dtype=float).reshape(3), k, z_min)
    return uv if bool(valid) else None


def backproject(u, z: float, k: Intrinsics) -> np.ndarray:
    if not z > 0:
        raise ValueError("depth must be positive")
    u = np.asarray(u, dtype=float).reshape(2)
    return np.array([(u[0] - k.cx) * z / k.fx, (u[1] - k.cy) * z / k.fy, z])


def backproject_depth(depth: np.ndarray, k: Intrinsics) -> np.ndarray:
    """(H, W) depth map to (H, W, 3) camera-frame vertex map (zeros stay zero)."""
    return k.pixel_rays() * np.asarray(depth, dtype=float)[..., None]
