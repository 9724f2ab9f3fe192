import hashlib
import logging
import os
from contextvars import ContextVar
from pathlib import Path
from typing import Any, Dict, List, Literal, Optional, Tuple, Type

import orjson
import yaml
from pydantic import BaseModel, Field, ValidationError, model_validator
from pydantic_settings import (
    BaseSettings,
    PydanticBaseSettingsSource,
    SettingsConfigDict,
    YamlConfigSettingsSource,
)

from errors import ConfigError

logger = logging.getLogger(__name__)

CONFIG_VERSION = "irisswap-config-v1"
CONFIG_ENV_VAR = "IRISSWAP_CONFIG"

Mode = Literal["offline", "online"]

_yaml_path: ContextVar[Optional[Path]] = ContextVar("irisswap_yaml_path", default=None)


class SegmentationParams(BaseModel):
    """Classical two-stage detector parameters."""

    pupil_threshold: int = Field(default=60, ge=1, le=254, description="Pupil pixels are darker than this")
    min_pupil_area: int = Field(default=100, ge=1, description="Smallest dark component accepted as a pupil (px)")
    edge_rays: int = Field(default=64, ge=8, description="Rays used by the radial edge refinement")
    rmin_factor: float = Field(default=1.8, gt=1.0)
    rmax_factor: float = Field(default=3.5, gt=1.0)
    center_search_px: int = Field(default=3, ge=0, description="Limbus centre search radius around the pupil centre")
    limbus_angles: int = Field(default=128, ge=16)
    min_visible_fraction: float = Field(default=0.5, gt=0.0, le=1.0)
    min_limbus_contrast: float = Field(default=8.0, ge=0.0, description="Smoothed radial derivative floor, intensity/px")

    @model_validator(mode="after")
    def _band_order(self):
        if self.rmax_factor <= self.rmin_factor:
            raise ValueError("rmax_factor must exceed rmin_factor")
        return self


class RubberSheetParams(BaseModel):
    radial_res: int = Field(default=64, ge=4)
    angular_res: int = Field(default=512, ge=8)
    match_intensity: bool = Field(default=False, description="Remap the victim texture to the attacker's iris statistics")


class GaborParams(BaseModel):
    """Iris code filter bank and matcher settings."""

    bands: int = Field(default=8, ge=1)
    angular_positions: int = Field(default=128, ge=1)
    wavelength: float = Field(default=18.0, gt=0.0, description="Carrier wavelength in angular texture samples")
    sigma_ratio: float = Field(default=0.5, gt=0.0, description="Angular envelope sigma / wavelength")
    radial_sigma: float = Field(default=2.0, gt=0.0, description="Radial envelope sigma in texture rows")
    truncate: float = Field(default=3.0, gt=0.0, description="Kernel half-width in sigmas")
    band_margin: int = Field(default=4, ge=0, description="Extra rows kept between the outer bands and the texture edge")
    min_magnitude: float = Field(default=1e-3, ge=0.0, description="Fraction of the texture dynamic range")
    min_coverage: float = Field(default=0.25, gt=0.0, le=1.0)
    max_shift: int = Field(default=8, ge=0)
    threshold: float = Field(default=0.37, gt=0.0, lt=1.0)


class GazeParams(BaseModel):
    onset_trim_s: float = Field(default=0.5, ge=0.0)
    max_condition: float = Field(default=1e10, gt=1.0)


class ScanpathParams(BaseModel):
    """Challenge task layout and oculomotor model."""

    camera_rate: float = Field(default=30.0, gt=0.0)
    calibration_targets: List[Tuple[float, float]] = Field(
        default=[(0.0, 0.0), (-10.0, 8.0), (10.0, 8.0), (10.0, -8.0), (-10.0, -8.0)]
    )
    validation_targets: List[Tuple[float, float]] = Field(
        default=[(-5.0, 4.0), (5.0, 4.0), (5.0, -4.0), (-5.0, -4.0)]
    )
    offline_dwell_s: float = Field(default=4.0, gt=0.0)
    online_dwell_min_s: float = Field(default=4.0, gt=0.0)
    online_dwell_max_s: float = Field(default=6.0, gt=0.0)
    latency_min_s: float = Field(default=0.15, ge=0.0)
    latency_max_s: float = Field(default=0.25, ge=0.0)
    duration_slope_ms: float = Field(default=2.2, gt=0.0, description="Main sequence: ms per degree")
    duration_intercept_ms: float = Field(default=21.0, ge=0.0)
    peak_velocity_max: float = Field(default=500.0, gt=0.0, description="Main sequence asymptote, deg/s")
    peak_velocity_scale: float = Field(default=15.0, gt=0.0, description="Main sequence amplitude constant, deg")
    min_saccade_deg: float = Field(default=0.5, ge=0.0)


class RenderParams(BaseModel):
    width: int = Field(default=320, ge=32)
    height: int = Field(default=240, ge=32)
    sclera_level: float = 200.0
    pupil_level: float = 30.0
    noise_sigma: float = Field(default=2.0, ge=0.0)


class ProfileParams(BaseModel):
    """Ranges subject profiles are drawn from."""

    pupil_radius_range: Tuple[float, float] = (23.0, 28.0)
    limbus_radius_range: Tuple[float, float] = (58.0, 66.0)
    pupillometry_noise: float = Field(default=0.03, ge=0.0)
    gain_px_per_deg: float = Field(default=6.0, gt=0.0)
    jitter_sigma_deg: float = Field(default=0.15, ge=0.0)
    jitter_tau_s: float = Field(default=0.15, gt=0.0)
    octaves: int = Field(default=3, ge=1)
    streak_density: float = Field(default=0.6, ge=0.0)
    iris_low: float = 80.0
    iris_high: float = 175.0
    brightness_jitter: float = Field(default=5.0, ge=0.0)


class FrameDropParams(BaseModel):
    mean_factor: float = Field(default=8.9, gt=0.0)
    std_factor: float = Field(default=2.6, ge=0.0)
    min_rate_hz: float = Field(default=3.0, gt=0.0)
    force_factor: Optional[int] = Field(default=None, ge=1, description="Skip the draw and use this decimation factor")
    per_frame_jitter: bool = Field(default=False, description="Draw a new gap for every kept frame")


class LivenessParams(BaseModel):
    cap_deg_s: float = Field(default=800.0, gt=0.0)
    target_rate_hz: float = Field(default=3.0, gt=0.0)
    window: int = Field(default=7, ge=1)
    step: int = Field(default=3, ge=1)
    hidden: int = Field(default=16, ge=1)
    learning_rate: float = Field(default=1e-2, gt=0.0)
    batch_size: int = Field(default=32, ge=1)
    max_epochs: int = Field(default=300, ge=1)
    patience: int = Field(default=25, ge=1)
    clip_norm: float = Field(default=5.0, gt=0.0)
    threshold: float = Field(default=0.5, gt=0.0, lt=1.0)


class ExperimentConfig(BaseSettings):
    """
    Everything a run depends on. Defaults here are the single versioned
    default table; the config hash pins a report to them.
    """

    model_config = SettingsConfigDict(env_prefix="IRISSWAP_", env_nested_delimiter="__", extra="forbid")

    version: str = CONFIG_VERSION
    seed: int = 7
    subjects: int = Field(default=20, description="Attacker subjects per condition, victim excluded")
    victim_id: int = Field(default=0, ge=0)
    modes: List[Mode] = Field(default_factory=lambda: ["offline", "online"])
    splits: int = 10
    test_fraction: float = 0.4
    validation_fraction: float = 0.3
    test_count: Optional[int] = Field(default=None, ge=1)
    hd_frames: int = Field(default=10, ge=1)
    static_baseline: bool = True
    static_noise_deg: float = Field(default=0.02, ge=0.0)
    save_all_frames: bool = False
    out_dir: Path = Path("runs/experiment")
    workers: int = Field(default=1, ge=1)

    segmentation: SegmentationParams = Field(default_factory=SegmentationParams)
    rubbersheet: RubberSheetParams = Field(default_factory=RubberSheetParams)
    gabor: GaborParams = Field(default_factory=GaborParams)
    gaze: GazeParams = Field(default_factory=GazeParams)
    scanpath: ScanpathParams = Field(default_factory=ScanpathParams)
    render: RenderParams = Field(default_factory=RenderParams)
    profile: ProfileParams = Field(default_factory=ProfileParams)
    frame_drops: FrameDropParams = Field(default_factory=FrameDropParams)
    liveness: LivenessParams = Field(default_factory=LivenessParams)

    @model_validator(mode="after")
    def _check(self):
        if self.splits < 1:
            raise ValueError("splits must be at least 1")
        if self.subjects < 5:
            raise ValueError("at least 5 subjects are needed for a train/validation/test split")
        for name in ("test_fraction", "validation_fraction"):
            value = getattr(self, name)
            if not 0.0 < value < 1.0:
                raise ValueError(f"{name} must lie in (0, 1)")
        if self.victim_id > self.subjects:
            raise ValueError(f"victim_id {self.victim_id} outside subject ids 0..{self.subjects}")
        if not self.modes:
            raise ValueError("at least one mode is required")
        return self

    @classmethod
    def settings_customise_sources(
        cls,
        settings_cls: Type[BaseSettings],
        init_settings: PydanticBaseSettingsSource,
        env_settings: PydanticBaseSettingsSource,
        dotenv_settings: PydanticBaseSettingsSource,
        file_secret_settings: PydanticBaseSettingsSource,
    ) -> Tuple[PydanticBaseSettingsSource, ...]:
        # flags > environment > yaml file > defaults
        sources = [init_settings, env_settings]
        path = _yaml_path.get()
        if path is not None:
            sources.append(YamlConfigSettingsSource(settings_cls, yaml_file=path))
        return tuple(sources)

    def subject_ids(self) -> List[int]:
        """Attacker ids; the victim takes one id out of 0..subjects."""
        return [i for i in range(self.subjects + 1) if i != self.victim_id]


def parse_overrides(pairs: List[str]) -> Dict[str, Any]:
    """Turn ["liveness.hidden=8", "seed=3"] into a nested dict; values are parsed as YAML scalars."""
    nested: Dict[str, Any] = {}
    for pair in pairs:
        if "=" not in pair:
            raise ConfigError(f"override '{pair}' is not key=value", {"override": pair})
        key, raw = pair.split("=", 1)
        try:
            value = yaml.safe_load(raw)
        except yaml.YAMLError as ex:
            raise ConfigError(f"override '{pair}' has an unparsable value: {ex}", {"override": pair})
        node = nested
        parts = key.strip().split(".")
        for part in parts[:-1]:
            node = node.setdefault(part, {})
        node[parts[-1]] = value
    return nested


def load_config(path: Optional[Path] = None, overrides: Optional[Dict[str, Any]] = None) -> ExperimentConfig:
    """
    Resolve a config from defaults, an optional YAML file, IRISSWAP_* variables
    and flag overrides, in rising priority.
    """
    if path is None and os.environ.get(CONFIG_ENV_VAR):
        path = Path(os.environ[CONFIG_ENV_VAR])
    if path is not None:
        path = Path(path)
        if not path.is_file():
            raise ConfigError(f"config file {path} does not exist", {"path": str(path)})
        try:
            with open(path, "r") as handle:
                content = yaml.safe_load(handle)
        except yaml.YAMLError as ex:
            raise ConfigError(f"config file {path} is not valid YAML: {ex}", {"path": str(path)})
        if content is not None and not isinstance(content, dict):
            raise ConfigError(f"config file {path} must hold a mapping", {"path": str(path)})

    token = _yaml_path.set(path)
    try:
        cfg = ExperimentConfig(**(overrides or {}))
    except ValidationError as ex:
        raise ConfigError(f"invalid configuration: {ex.errors(include_url=False)}", {"path": str(path) if path else None})
    finally:
        _yaml_path.reset(token)
    logger.debug(f"Resolved config from {path or 'defaults'}")
    return cfg


def config_hash(cfg: ExperimentConfig) -> str:
    payload = cfg.model_dump(mode="json", exclude={"out_dir", "workers"})
    return hashlib.sha256(orjson.dumps(payload, option=orjson.OPT_SORT_KEYS)).hexdigest()
