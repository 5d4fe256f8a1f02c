"""Reference frames: one coordinate frame bundling a map, its cameras and fern database."""

from __future__ import annotations

from dataclasses import dataclass, field

from .fern import FernDatabase
from .geometry import RigidTransform
from .surfelmap import ModelView, SurfelMap


@dataclass
class ReferenceFrame:
    id: int
    map: SurfelMap
    db: FernDatabase
    cameras: list = field(default_factory=list)
    poses: dict = field(default_factory=dict)  # camera -> current camera-to-reference pose
    trajectories: dict = field(default_factory=dict)  # camera -> list of (stamp, timestep, pose)
    views: dict = field(default_factory=dict)  # camera -> latest predicted view
    frame_counts: dict = field(default_factory=dict)  # camera -> frames processed (activity clock)
    bootstrapped: set = field(default_factory=set)  # cameras whose first frame has been fused
    retired: bool = False

    def add_camera(self, camera: int, pose: RigidTransform | None = None) -> None:
        if camera in self.cameras:
            raise ValueError(f"camera {camera} already belongs to reference frame {self.id}")
        self.cameras.append(camera)
        self.cameras.sort()
        self.poses[camera] = pose or RigidTransform.identity()
        self.trajectories.setdefault(camera, [])
        self.frame_counts.setdefault(camera, 0)
        self.map.ensure_cameras(camera + 1)

    def record(self, camera: int, stamp: float, timestep: int, pose: RigidTransform) -> None:
        self.poses[camera] = pose
        self.trajectories[camera].append((stamp, timestep, pose))

    def trajectory(self, camera: int) -> list:
        """``(stamp, pose)`` pairs for one camera."""
        return [(s, p) for s, _, p in self.trajectories.get(camera, [])]

    def view(self, camera: int) -> ModelView | None:
        return self.views.get(camera)
