"""
Configuration settings for carspeed
"""

import json
import os
from pathlib import Path
from typing import Any, Dict, List, Literal, Mapping, Optional, Union

from pydantic import BaseModel, ConfigDict, Field, field_validator

DEFAULT_CONFIG_PATH = Path(__file__).parent / "configs" / "config.json"

MODEL_NAMES = ("carspeednet", "dnn_star", "lstm", "wavenet", "bilstm", "resnet")
DEFAULT_SWEEP_SIZES = (5, 10, 20, 40, 60, 80)


class Settings:
    """Process-wide settings read from the environment"""

    LOG_LEVEL: str = os.getenv("CARSPEED_LOG_LEVEL", "INFO")
    PRECISION: str = os.getenv("CARSPEED_PRECISION", "narrow")  # narrow (float32), wide (float64)
    MAX_WORKERS: int = int(os.getenv("CARSPEED_WORKERS", "4"))


settings = Settings()


class TrainConfig(BaseModel):
    """Optimizer, schedule and stopping knobs"""

    model_config = ConfigDict(extra="forbid")

    batch_size: int = Field(default=32, gt=0, description="Mini-batch size (windows)")
    max_epochs: int = Field(default=200, gt=0, description="Maximum number of epochs")
    initial_lr: float = Field(default=0.001, gt=0, description="Initial learning rate")
    decay_steps: int = Field(default=30_000, gt=0, description="Exponential decay horizon (optimizer steps)")
    decay_rate: float = Field(default=0.2, gt=0, lt=1, description="Learning-rate multiplier per decay_steps")
    early_stop_patience: int = Field(default=1000, gt=0, description="Epochs without validation improvement before stopping")
    min_delta: float = Field(default=1e-6, ge=0, description="Validation improvement threshold ((m/s)^2)")
    beta1: float = Field(default=0.9, gt=0, lt=1, description="Adam first-moment decay")
    beta2: float = Field(default=0.999, gt=0, lt=1, description="Adam second-moment decay")
    epsilon: float = Field(default=1e-8, gt=0, description="Adam denominator epsilon")
    grad_clip: Optional[float] = Field(default=5.0, gt=0, description="Global-norm gradient clip (null disables)")
    seed: int = Field(default=0, ge=0, description="Shuffle and dropout seed")
    log_interval: int = Field(default=10, gt=0, description="Epochs between progress log lines")


class RunConfig(BaseModel):
    """Everything a CLI run needs: data paths, pipeline, model and training settings"""

    model_config = ConfigDict(extra="forbid")

    data_dir: str = Field(default="data", description="Session directory (<id>.imu.csv / <id>.gps.csv)")
    out: Optional[str] = Field(default=None, description="Output path")
    model: str = Field(default="carspeednet", description="Architecture name")
    window_size: int = Field(default=80, ge=5, description="Window length (samples at 20 Hz)")
    seed: int = Field(default=7, ge=0, description="Data split / synthesis seed")
    precision: Literal["narrow", "wide"] = Field(default=settings.PRECISION, description="Scalar width")
    imu_rate_hz: float = Field(default=500.0, gt=0, description="Nominal raw accelerometer rate (Hz)")
    target_rate_hz: float = Field(default=20.0, gt=0, description="Rate after decimation (Hz)")
    cutoff_hz: float = Field(default=8.0, gt=0, description="Low-pass cutoff (Hz)")
    gdop_max: float = Field(default=5.0, gt=0, description="GDOP gating threshold")
    max_gap_s: float = Field(default=0.1, gt=0, description="Sample gap that splits a session (s)")
    label_tolerance_s: float = Field(default=0.025, gt=0, description="Window/label alignment tolerance (s)")
    n_test_sessions: int = Field(default=1, ge=1, description="Whole sessions held out for testing")
    val_fraction: float = Field(default=0.2, gt=0, lt=1, description="Validation share of non-test windows")
    sizes: List[int] = Field(default_factory=lambda: list(DEFAULT_SWEEP_SIZES), description="Sweep window sizes (samples)")
    models: List[str] = Field(default_factory=lambda: list(MODEL_NAMES), description="Architectures to compare")
    hours: float = Field(default=1.0, gt=0, description="Synthetic corpus length (h)")
    latency_reps: int = Field(default=50, ge=10, description="Timed inference repetitions")
    train: TrainConfig = Field(default_factory=TrainConfig)

    @field_validator("model")
    @classmethod
    def validate_model(cls, v):
        if v not in MODEL_NAMES:
            raise ValueError(f"Unknown model '{v}'. Choose from {', '.join(MODEL_NAMES)}")
        return v

    @field_validator("models")
    @classmethod
    def validate_models(cls, v):
        unknown = [name for name in v if name not in MODEL_NAMES]
        if unknown:
            raise ValueError(f"Unknown models {unknown}")
        return v

    @field_validator("sizes")
    @classmethod
    def validate_sizes(cls, v):
        if not v or any(size < 5 for size in v):
            raise ValueError("Window sizes must be >= 5 samples")
        return v

    @property
    def decimation_factor(self) -> int:
        return int(round(self.imu_rate_hz / self.target_rate_hz))


def _deep_merge(base: Dict[str, Any], overrides: Mapping[str, Any]) -> Dict[str, Any]:
    merged = dict(base)
    for key, value in overrides.items():
        if value is None:
            continue
        if isinstance(value, Mapping) and isinstance(merged.get(key), dict):
            merged[key] = _deep_merge(merged[key], value)
        else:
            merged[key] = value
    return merged


def load_run_config(
    path: Optional[Union[str, Path]] = None,
    overrides: Optional[Mapping[str, Any]] = None,
) -> RunConfig:
    """Read a JSON run config and apply overrides; overrides that are None are ignored."""
    source = Path(path) if path is not None else DEFAULT_CONFIG_PATH
    with open(source, "r", encoding="utf-8") as f:
        data = json.load(f)
    return RunConfig.model_validate(_deep_merge(data, overrides or {}))


def field_help(name: str, unit: str = "", section: str = "run") -> str:
    """Help text for a CLI flag: field description plus its documented default."""
    fields = TrainConfig.model_fields if section == "train" else RunConfig.model_fields
    field = fields[name]
    default = field.default_factory() if field.default_factory is not None else field.default
    if isinstance(default, list):
        default = ",".join(str(x) for x in default)
    suffix = f" [{unit}]" if unit else ""
    return f"{field.description}{suffix} [default: {default}]"
