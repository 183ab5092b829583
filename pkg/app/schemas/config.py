"""
Run configuration schemas and the key=value config file format
"""

from pathlib import Path
from typing import Dict, Literal, Optional, Union

from pydantic import BaseModel, ConfigDict, Field, ValidationError, field_validator, model_validator

from app.core.errors import ConfigError
from app.models.camera import CameraIntrinsics


class RoomSpec(BaseModel):
    """Procedural room request"""

    width: float = Field(4.0, gt=0)   # x extent, meters
    depth: float = Field(4.0, gt=0)   # z extent, meters
    height: float = Field(2.5, gt=0)  # y extent, meters
    n_chairs: int = Field(0, ge=0)
    n_tables: int = Field(0, ge=0)
    seed: int = Field(0, ge=0, lt=2 ** 64)
    max_retries: int = Field(200, gt=0)


class OrbitSpec(BaseModel):
    """Parametric orbit around the scene centroid"""

    radius: float = 1.2
    height: float = 1.5
    start_deg: float = 0.0
    sweep_deg: float = 360.0
    target_height: Optional[float] = None


def _require_odd(value: int, name: str) -> int:
    if value % 2 == 0:
        raise ValueError(f"{name} must be odd, got {value}")
    return value


class TsdfConfig(BaseModel):
    """Reconstruction volume parameters"""

    grid_dim: int = Field(128, gt=0)
    margin: float = Field(0.5, ge=0)
    mu_voxels: float = Field(4.0, gt=0)
    weight_max: float = Field(100.0, gt=0)
    frame_weight: float = Field(1.0, gt=0)


class FeatureConfig(BaseModel):
    """DHAC computation parameters"""

    depth_norm: float = Field(8.0, gt=0)
    height_norm: float = Field(3.0, gt=0)
    curvature_window: int = Field(11, ge=3)
    discontinuity: float = Field(0.03, gt=0)

    @field_validator("curvature_window")
    @classmethod
    def check_window(cls, value: int) -> int:
        return _require_odd(value, "curvature_window")


class TrainConfig(BaseModel):
    """Layer-wise training hyperparameters"""

    learning_rate: float = Field(0.01, gt=0)
    momentum: float = Field(0.9, ge=0, lt=1)
    epochs: int = Field(20, gt=0)
    batch_size: int = Field(512, gt=0)
    seed: int = Field(0, ge=0)
    layers: int = Field(4, gt=0)
    hidden: int = Field(32, gt=0)
    kernel: int = Field(7, ge=1)
    num_classes: int = Field(5, gt=1, le=15)
    pixels_per_image: int = Field(4000, gt=0)

    @field_validator("kernel")
    @classmethod
    def check_kernel(cls, value: int) -> int:
        return _require_odd(value, "kernel")


class RunConfig(BaseModel):
    """Every module parameter of a run, as one flat key=value document"""

    model_config = ConfigDict(extra="forbid")

    seed: int = Field(0, ge=0, lt=2 ** 64)

    # scene
    scene_source: Literal["procedural", "obj"] = "procedural"
    obj_path: Optional[str] = None
    annotation_path: Optional[str] = None
    taxonomy_path: Optional[str] = None
    condensation_path: Optional[str] = None
    room_width: float = Field(4.0, gt=0)
    room_depth: float = Field(4.0, gt=0)
    room_height: float = Field(2.5, gt=0)
    n_chairs: int = Field(2, ge=0)
    n_tables: int = Field(1, ge=0)

    # camera
    fx: float = Field(525.0, gt=0)
    fy: float = Field(525.0, gt=0)
    cx: float = 319.5
    cy: float = 239.5
    width: int = Field(640, gt=0)
    height: int = Field(480, gt=0)

    # trajectory
    n_frames: int = Field(30, ge=1)
    orbit_radius: float = 1.2
    orbit_height: float = 1.5
    orbit_start_deg: float = 0.0
    orbit_sweep_deg: float = 360.0
    orbit_target_height: Optional[float] = None

    # reconstruction
    grid_dim: int = Field(128, gt=0)
    grid_margin: float = Field(0.5, ge=0)
    mu_voxels: float = Field(4.0, gt=0)
    weight_max: float = Field(100.0, gt=0)
    frame_weight: float = Field(1.0, gt=0)
    pose_source: Literal["gt", "icp"] = "gt"
    icp_max_iterations: int = Field(20, gt=0)
    gravity_samples: int = Field(20000, ge=1000)

    # features
    depth_norm: float = Field(8.0, gt=0)
    height_norm: float = Field(3.0, gt=0)
    curvature_window: int = Field(11, ge=3)
    discontinuity: float = Field(0.03, gt=0)
    feature_depth_source: Literal["raycast", "raw"] = "raycast"

    # network
    layers: int = Field(4, gt=0)
    hidden: int = Field(32, gt=0)
    kernel: int = Field(7, ge=1)
    num_classes: int = Field(5, gt=1, le=15)
    learning_rate: float = Field(0.01, gt=0)
    momentum: float = Field(0.9, ge=0, lt=1)
    epochs: int = Field(20, gt=0)
    batch_size: int = Field(512, gt=0)
    pixels_per_image: int = Field(4000, gt=0)

    @model_validator(mode="after")
    def check_consistency(self) -> "RunConfig":
        if not 0 <= self.cx < self.width:
            raise ValueError(f"cx={self.cx} outside [0, {self.width})")
        if not 0 <= self.cy < self.height:
            raise ValueError(f"cy={self.cy} outside [0, {self.height})")
        _require_odd(self.kernel, "kernel")
        _require_odd(self.curvature_window, "curvature_window")
        return self

    @property
    def room(self) -> RoomSpec:
        return RoomSpec(width=self.room_width, depth=self.room_depth, height=self.room_height,
                        n_chairs=self.n_chairs, n_tables=self.n_tables, seed=self.seed)

    @property
    def intrinsics(self) -> CameraIntrinsics:
        return CameraIntrinsics(fx=self.fx, fy=self.fy, cx=self.cx, cy=self.cy,
                                width=self.width, height=self.height)

    @property
    def orbit(self) -> OrbitSpec:
        return OrbitSpec(radius=self.orbit_radius, height=self.orbit_height,
                         start_deg=self.orbit_start_deg, sweep_deg=self.orbit_sweep_deg,
                         target_height=self.orbit_target_height)

    @property
    def tsdf(self) -> TsdfConfig:
        return TsdfConfig(grid_dim=self.grid_dim, margin=self.grid_margin, mu_voxels=self.mu_voxels,
                          weight_max=self.weight_max, frame_weight=self.frame_weight)

    @property
    def features(self) -> FeatureConfig:
        return FeatureConfig(depth_norm=self.depth_norm, height_norm=self.height_norm,
                             curvature_window=self.curvature_window, discontinuity=self.discontinuity)

    @property
    def training(self) -> TrainConfig:
        return TrainConfig(learning_rate=self.learning_rate, momentum=self.momentum, epochs=self.epochs,
                           batch_size=self.batch_size, seed=self.seed, layers=self.layers,
                           hidden=self.hidden, kernel=self.kernel, num_classes=self.num_classes,
                           pixels_per_image=self.pixels_per_image)

    def with_overrides(self, **overrides) -> "RunConfig":
        """Copy with validated overrides (None values ignored)"""
        data = self.model_dump()
        data.update({k: v for k, v in overrides.items() if v is not None})
        return build_run_config(data)

    def dump(self) -> str:
        """Resolved config in key=value syntax, sorted keys, unset optionals omitted"""
        lines = []
        for key, value in sorted(self.model_dump().items()):
            if value is None:
                continue
            lines.append(f"{key} = {value}")
        return "\n".join(lines) + "\n"


def build_run_config(values: Dict[str, object]) -> RunConfig:
    """Validate a mapping into a RunConfig, raising ConfigError"""
    try:
        return RunConfig.model_validate(values)
    except ValidationError as e:
        raise ConfigError(str(e)) from e


def parse_config_text(text: str) -> Dict[str, str]:
    """Parse `key = value` lines; '#' starts a comment"""
    values: Dict[str, str] = {}
    for number, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"config line {number}: expected key = value")
        key, value = (part.strip() for part in line.split("=", 1))
        if not key:
            raise ConfigError(f"config line {number}: empty key")
        if key in values:
            raise ConfigError(f"config line {number}: duplicate key '{key}'")
        values[key] = value
    return values


def load_run_config(source: Union[str, Path, None] = None) -> RunConfig:
    """Load a RunConfig from a key=value file (defaults when source is None)"""
    if source is None:
        return RunConfig()
    path = Path(source)
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as e:
        raise ConfigError(f"cannot read config {path}: {e}") from e
    return build_run_config(parse_config_text(text))
