"""Synthetic desk-scale fixtures: a textured room and multi-camera trajectories.

World convention: y points down, so ``up = (0, -1, 0)``. Cameras look along
their +z axis with x right and y down.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .geometry import Intrinsics, RigidTransform, exp_se3, log_se3
from .scene import Box, NoiseSpec, SyntheticScene, Texture, render_synthetic_frame, visible_fraction

UP = np.array([0.0, -1.0, 0.0])


def look_at(eye, target, up=UP) -> RigidTransform:
    eye = np.asarray(eye, float)
    z = np.asarray(target, float) - eye
    z /= np.linalg.norm(z)
    x = np.cross(z, up)
    x /= np.linalg.norm(x)
    y = np.cross(z, x)
    return RigidTransform(np.stack([x, y, z], axis=1), eye)


def textured_room(texture_seed: int = 7) -> SyntheticScene:
    """A 5 x 2.6 x 5 m room (viewed from inside) with a few pieces of furniture."""
    boxes = [
        Box((0.0, 0.0, 0.0), (5.0, 2.6, 5.0), (190, 180, 165)),
        Box((0.9, 0.9, 1.6), (1.2, 0.8, 0.7), (150, 90, 60)),
        Box((-1.3, 0.6, 1.5), (0.6, 1.4, 0.6), (70, 110, 160)),
        Box((-0.2, 1.05, 2.1), (0.5, 0.5, 0.5), (200, 200, 90)),
        Box((1.9, 0.2, -0.6), (0.6, 2.2, 1.4), (90, 150, 90)),
        Box((-1.6, 0.9, -1.5), (1.0, 0.8, 1.0), (170, 80, 120)),
        Box((0.4, 1.1, -2.0), (1.6, 0.4, 0.6), (110, 100, 180)),
    ]
    return SyntheticScene(boxes=boxes, texture=Texture(0.35, 0.25, texture_seed))


def textureless_wall_scene(offset: float = 0.0) -> SyntheticScene:
    """A single large untextured wall at z = 2 (optionally shifted in x)."""
    return SyntheticScene(boxes=[Box((offset, 0.0, 2.05), (40.0, 40.0, 0.1), (160, 160, 160))])


def sweep(start: RigidTransform, twist_per_frame, n: int) -> list[RigidTransform]:
    """Constant body-frame velocity trajectory starting at ``start``."""
    step = exp_se3(twist_per_frame)
    poses = [start]
    for _ in range(n - 1):
        poses.append(poses[-1] @ step)
    return poses


def interpolate(a: RigidTransform, b: RigidTransform, n: int) -> list[RigidTransform]:
    """``n`` poses from ``a`` to ``b`` (inclusive) along the SE(3) geodesic."""
    xi = log_se3(a.inverse() @ b)
    return [a @ exp_se3(xi * (i / max(n - 1, 1))) for i in range(n)]


def render_sequence(scene, poses, k: Intrinsics, camera_id: int = 0, noise: NoiseSpec | None = None,
                    first_index: int = 0):
    return [render_synthetic_frame(scene, p, k, noise, camera_id=camera_id, index=first_index + i)
            for i, p in enumerate(poses)]


def orbit(center, radius: float, height: float, target, start_deg: float, end_deg: float, n: int):
    poses = []
    for i in range(n):
        a = math.radians(start_deg + (end_deg - start_deg) * i / max(n - 1, 1))
        eye = np.asarray(center, float) + np.array([radius * math.sin(a), height, radius * math.cos(a)])
        poses.append(look_at(eye, target))
    return poses


def check_trajectory(scene, poses, k: Intrinsics, min_fraction: float = 0.9) -> None:
    frac = visible_fraction(scene, poses, k)
    if frac < min_fraction:
        raise ValueError(f"only {frac:.0%} of frames see the scene")


@dataclass
class MultiCameraFixture:
    """Synthetic multi-camera session: ground-truth world poses per camera and start offsets.

    Each camera's reference frame is its first pose, so the true transform
    from camera ``j``'s reference frame into camera ``k``'s is
    ``G_k[0]^-1 G_j[0]``.
    """

    scene: SyntheticScene
    intrinsics: Intrinsics
    poses: dict  # camera -> list of world poses
    start: dict  # camera -> first session timestep
    fps: float = 30.0

    def true_transform(self, j: int, k: int) -> RigidTransform:
        return self.poses[k][0].inverse() @ self.poses[j][0]

    def frames(self, camera: int, noise: NoiseSpec | None = None):
        return render_sequence(self.scene, self.poses[camera], self.intrinsics, camera, noise)

    def ground_truth(self, camera: int) -> list:
        """``(stamp, pose)`` pairs in the camera's own reference frame."""
        g0 = self.poses[camera][0].inverse()
        return [(i / self.fps, g0 @ p) for i, p in enumerate(self.poses[camera])]

    @property
    def n_steps(self) -> int:
        return max(self.start[c] + len(p) for c, p in self.poses.items())


_ROOM_CENTRE = (0.0, 0.3, 0.0)
_ROOM_TARGET = (0.0, 0.6, 1.5)


def two_camera_fixture(n: int = 60, k: Intrinsics | None = None) -> MultiCameraFixture:
    """Camera 0 sweeps an arc; camera 1 starts elsewhere and sweeps into camera 0's arc."""
    k = k or Intrinsics.default()
    c1 = (0.0, 0.35, 0.0)
    poses = {
        0: orbit(_ROOM_CENTRE, 1.2, 0.0, _ROOM_TARGET, -20, 40, n),
        1: orbit(c1, 1.2, 0.0, _ROOM_TARGET, 100, 10, n),
    }
    return MultiCameraFixture(textured_room(), k, poses, {0: 0, 1: 0})


def three_camera_fixture(n: int = 60, k: Intrinsics | None = None) -> MultiCameraFixture:
    """Two cameras overlap early; a third starts later and reaches the start of camera 1's arc."""
    fx = two_camera_fixture(n, k)
    fx.poses[2] = orbit((0.0, 0.32, 0.0), 1.2, 0.0, _ROOM_TARGET, 190, 100, n)
    fx.start[2] = 50
    return fx
