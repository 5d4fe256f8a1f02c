"""Tunables for every stage of the pipeline, grouped per subsystem.

All values are plain dataclass fields so a session can be configured from a
JSON file (see :meth:`SessionConfig.from_dict`).
"""

from __future__ import annotations

import json
from dataclasses import MISSING, asdict, dataclass, field, fields, is_dataclass
from pathlib import Path

Z_MAX = 10.0


@dataclass
class FrameConfig:
    z_max: float = Z_MAX
    bilateral: bool = False
    bilateral_sigma_space: float = 1.5
    bilateral_sigma_depth: float = 0.02
    # neighbour depth jump (fraction of z) beyond which a normal is invalid
    normal_discontinuity: float = 0.1


@dataclass
class SurfelConfig:
    delta_t: int = 200
    w_stable: float = 10.0
    sigma: float = 0.6
    depth_gate: float = 0.05
    normal_gate_deg: float = 30.0
    min_abs_nz: float = 0.5
    max_splat_px: int = 6
    # splats within this fraction of depth count as one surface in the z-buffer
    same_surface: float = 0.005
    initial_capacity: int = 4096


@dataclass
class OdometryConfig:
    # Gauss-Newton iterations for pyramid levels 0 (finest), 1, 2
    iterations: tuple = (10, 5, 4)
    lambda_rgb: float = 0.1
    huber_icp: float = 0.01  # multiplied by the live point depth
    huber_rgb: float = 0.3
    dist_gate: float = 0.1
    normal_gate_deg: float = 30.0
    rgb_depth_gate: float = 0.05
    min_inliers: int = 50
    divergence_patience: int = 3
    # relative error rise that counts as an increase (ignores noise-level jitter)
    increase_tol: float = 1e-3
    # stop a level once every twist component of the step is below this
    step_tol: float = 1e-6
    eps_eig: float = 1e-5
    kappa_max: float = 1e6
    eps_err: float = 5e-3
    n_min: int = 2000  # at 160x120, scaled with image area
    # fixture hook: twist (v, w) right-multiplied onto every tracked increment to inject drift
    drift_twist: tuple | None = None

    def n_min_for(self, width: int, height: int) -> int:
        return int(round(self.n_min * width * height / (160 * 120)))


@dataclass
class FernConfig:
    n_ferns: int = 500
    tests_per_fern: int = 4
    width: int = 80
    height: int = 60
    t_add: float = 0.1
    t_match: float = 0.2
    depth_min: float = 0.5
    depth_max: float = 4.0
    seed: int = 1234


@dataclass
class LoopConfig:
    node_rate: int = 500
    k_conn: int = 4
    k_influence: int = 4
    shortlist: int = 4
    w_rot: float = 1.0
    w_reg: float = 10.0
    w_con: float = 100.0
    n_constraints: int = 128
    max_iterations: int = 20
    rel_tol: float = 1e-6
    influence: str = "temporal-spatial"  # or "spatial-only"
    # keyframes younger than this many timesteps are not global-loop candidates
    global_min_age: int = 50
    global_loops: bool = True
    local_loops: bool = True
    inter_map: bool = True


PALETTE = [
    (255, 0, 0),
    (0, 255, 0),
    (0, 0, 255),
    (255, 255, 0),
    (255, 0, 255),
    (0, 255, 255),
    (255, 128, 0),
    (128, 0, 255),
]


@dataclass
class SessionConfig:
    frame: FrameConfig = field(default_factory=FrameConfig)
    surfel: SurfelConfig = field(default_factory=SurfelConfig)
    odometry: OdometryConfig = field(default_factory=OdometryConfig)
    fern: FernConfig = field(default_factory=FernConfig)
    loop: LoopConfig = field(default_factory=LoopConfig)
    palette: list = field(default_factory=lambda: list(PALETTE))
    scheduling: str = "lockstep"  # or "arrival-order"
    queue_capacity: int = 8

    def validate(self, n_cameras: int = 1) -> None:
        if n_cameras < 1:
            raise ValueError("at least one camera is required")
        if len(set(map(tuple, self.palette[:n_cameras]))) < n_cameras:
            raise ValueError(f"palette needs {n_cameras} distinct colours")
        if self.scheduling not in ("lockstep", "arrival-order"):
            raise ValueError(f"unknown scheduling mode {self.scheduling!r}")
        if self.loop.influence not in ("temporal-spatial", "spatial-only"):
            raise ValueError(f"unknown influence mode {self.loop.influence!r}")

    @classmethod
    def from_dict(cls, data: dict) -> "SessionConfig":
        return _build(cls, data)

    @classmethod
    def load(cls, path) -> "SessionConfig":
        return cls.from_dict(json.loads(Path(path).read_text()))

    def to_dict(self) -> dict:
        return asdict(self)


def _build(cls, data: dict):
    kwargs = {}
    known = {f.name: f for f in fields(cls)}
    for key, value in data.items():
        if key not in known:
            raise ValueError(f"unknown configuration key {cls.__name__}.{key}")
        f = known[key]
        default = f.default_factory() if f.default_factory is not MISSING else f.default
        if is_dataclass(default) and isinstance(value, dict):
            value = _build(type(default), value)
        elif isinstance(default, tuple):
            value = tuple(value)
        kwargs[key] = value
    return cls(**kwargs)
