"""Scenario configuration schema.

Config files are TOML. Every table is validated with ``extra="forbid"`` so a
misspelled key is a hard error naming its key path.
"""

from __future__ import annotations

from pathlib import Path
from typing import Literal, Optional

import tomli
from pydantic import BaseModel, ConfigDict, Field, ValidationError, field_validator

Vec3 = tuple[float, float, float]


class _Strict(BaseModel):
    model_config = ConfigDict(extra="forbid")


class SensorOverride(_Strict):
    fov: Optional[Literal["spin", "pyramid"]] = None
    h_deg: Optional[float] = None
    v_min_deg: Optional[float] = None
    v_max_deg: Optional[float] = None
    max_range: Optional[float] = None
    min_range: Optional[float] = None
    points_per_scan: Optional[int] = Field(None, gt=0)
    scan_period: Optional[float] = Field(None, gt=0)
    range_noise_sigma: Optional[float] = Field(None, ge=0)
    imu_rate: Optional[float] = Field(None, gt=0)
    gyro_noise: Optional[float] = Field(None, ge=0)
    accel_noise: Optional[float] = Field(None, ge=0)
    gyro_bias_walk: Optional[float] = Field(None, ge=0)
    accel_bias_walk: Optional[float] = Field(None, ge=0)

    def values(self) -> dict:
        return {k: v for k, v in self.model_dump().items() if v is not None}


class PlaneSpec(_Strict):
    center: Vec3
    normal: Vec3
    extent: tuple[float, float]
    reflectivity: int = Field(60, ge=0, le=255)
    u_axis: Optional[Vec3] = None


class BoxSpec(_Strict):
    center: Vec3
    size: Vec3
    yaw: float = 0.0
    reflectivity: int = Field(60, ge=0, le=255)


class DecoySpec(_Strict):
    center: Vec3
    radius: float = Field(0.25, gt=0)
    reflectivity: int = Field(255, ge=0, le=255)


class WorldSpec(_Strict):
    planes: list[PlaneSpec] = []
    boxes: list[BoxSpec] = []
    decoys: list[DecoySpec] = []
    marker_radius: float = Field(0.25, gt=0)
    marker_reflectivity: int = Field(255, ge=0, le=255)
    incidence_attenuation: float = Field(0.0, ge=0, le=1)


class DroneSpec(_Strict):
    id: int = Field(ge=0, le=255)
    sensor: str = "mid360"
    mutual_obs: bool = True
    clock_offset: float = 0.0
    bias_gyro: Vec3 = (0.0, 0.0, 0.0)
    bias_acc: Vec3 = (0.0, 0.0, 0.0)
    bias_acc_drift: Vec3 = (0.0, 0.0, 0.0)  # m/s^2 per s, e.g. thermal warm-up
    waypoints: list[tuple[float, float, float, float]]
    yaw: float = 0.0
    wiggles: list[tuple[int, float, float, float]] = []
    yaw_wiggles: list[tuple[float, float, float]] = []
    roll_wiggles: list[tuple[float, float, float]] = []
    pitch_wiggles: list[tuple[float, float, float]] = []
    wiggle_window: tuple[float, float] = (1.0, 1e9)

    @field_validator("wiggles")
    @classmethod
    def _axis(cls, v):
        for row in v:
            if row[0] not in (0, 1, 2):
                raise ValueError("wiggle axis must be 0, 1 or 2")
        return v


class ChannelSpec(_Strict):
    drop_prob: float = Field(0.0, ge=0, le=1)
    delay_mean: float = Field(0.0, ge=0)
    delay_jitter: float = Field(0.0, ge=0)


class DetectParams(_Strict):
    threshold: int = Field(200, ge=0, le=255)
    dist_tol: float = Field(0.3, gt=0)
    min_pts: int = Field(3, ge=1)
    max_pts: int = Field(2000, ge=1)
    size_min: float = Field(0.05, ge=0)
    size_max: float = Field(0.8, gt=0)
    gate: float = Field(0.5, gt=0)
    reacquire_gate: float = Field(1.5, gt=0)
    region_radius: float = Field(0.8, gt=0)
    max_coast: int = Field(10, ge=0)
    meas_sigma: float = Field(0.05, gt=0)
    odom_sigma: float = Field(0.1, gt=0)
    accel_sigma: float = Field(1.0, gt=0)
    init_vel_sigma: float = Field(2.0, gt=0)
    # centroids of near-side surface points sit ~2r/3 short of a sphere center
    center_offset: float = Field(0.1667, ge=0)


class IdentParams(_Strict):
    window: int = Field(100, ge=3)
    tol: float = Field(0.025, gt=0)
    thr: float = Field(0.1, gt=0)
    # H is a sum over the window, so this scales with window length
    sigma2_min: float = Field(1.0, ge=0)
    min_pairs: int = Field(20, ge=3)
    passive_init: bool = True
    # passive fits put the teammate origin at the end of a long lever arm; bound the
    # predicted translation error rms * |lever| / sqrt(sigma_2) before accepting one
    passive_trans_bound: float = Field(0.05, gt=0)


class FilterParams(_Strict):
    max_iter: int = Field(5, ge=1)
    eps: float = Field(1e-6, gt=0)
    point_sigma: float = Field(0.05, gt=0)
    obs_sigma: float = Field(0.05, gt=0)
    map_leaf: float = Field(0.2, gt=0)
    scan_leaf: float = Field(0.4, gt=0)
    plane_tol: float = Field(0.05, gt=0)
    residual_gate: float = Field(0.5, gt=0)
    max_neighbor_dist: float = Field(1.5, gt=0)
    gyro_noise: float = Field(0.01, ge=0)
    accel_noise: float = Field(0.1, ge=0)
    gyro_bias_walk: float = Field(1e-4, ge=0)
    accel_bias_walk: float = Field(1e-3, ge=0)
    ext_rot_walk: float = Field(1e-4, ge=0)
    ext_pos_walk: float = Field(1e-4, ge=0)
    gravity_init_time: float = Field(0.5, gt=0)
    passive_max_age: float = Field(0.2, gt=0)
    ext_init_rot_deg: float = Field(5.0, gt=0)
    ext_init_pos_var: float = Field(0.2, gt=0)
    # lower bound on the residual_rms/thr scaling of the initial extrinsic covariance
    ext_cov_floor: float = Field(0.25, gt=0)
    obs_chi2_gate: float = Field(25.0, gt=0)
    max_residuals: int = Field(1500, ge=10)
    init_pos_sigma: float = Field(0.01, gt=0)
    init_rot_sigma: float = Field(0.01, gt=0)
    init_vel_sigma: float = Field(0.05, gt=0)
    init_bg_sigma: float = Field(0.01, gt=0)
    init_ba_sigma: float = Field(0.1, gt=0)
    init_g_sigma: float = Field(0.1, gt=0)


class OutputSpec(_Strict):
    capture: bool = False


class ScenarioConfig(_Strict):
    scenario: Literal["room", "wall", "corridor", "exploration", "custom"] = "room"
    seed: int = 42
    duration: Optional[float] = Field(None, gt=0)
    mode: Literal["swarm", "solo"] = "swarm"
    threads: int = Field(0, ge=0)
    sensors: dict[str, SensorOverride] = {}
    world: WorldSpec = WorldSpec()
    drones: list[DroneSpec] = []
    channel: ChannelSpec = ChannelSpec()
    detect: DetectParams = DetectParams()
    ident: IdentParams = IdentParams()
    filter: FilterParams = FilterParams()
    output: OutputSpec = OutputSpec()


class ConfigError(ValueError):
    pass


def _format(exc: ValidationError) -> str:
    lines = []
    for err in exc.errors():
        path = ".".join(str(p) for p in err["loc"]) or "<root>"
        lines.append(f"  {path}: {err['msg']}")
    return "invalid scenario config:\n" + "\n".join(lines)


def parse_config(data: dict) -> ScenarioConfig:
    try:
        return ScenarioConfig.model_validate(data)
    except ValidationError as exc:
        raise ConfigError(_format(exc)) from None


def load_config(path) -> ScenarioConfig:
    path = Path(path)
    try:
        data = tomli.loads(path.read_text())
    except tomli.TOMLDecodeError as exc:
        raise ConfigError(f"{path}: TOML parse error: {exc}") from None
    return parse_config(data)
