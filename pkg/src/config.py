"""Centralized configuration: .env settings + config.yaml loader."""

from pathlib import Path
from typing import TYPE_CHECKING, Any, Dict, Optional

import yaml
from pydantic_settings import BaseSettings, SettingsConfigDict

if TYPE_CHECKING:
    from .models import ExperimentConfig


class Settings(BaseSettings):
    """Environment variables loaded from .env file."""

    model_config = SettingsConfigDict(
        env_file=".env",
        env_file_encoding="utf-8",
        case_sensitive=False,
        extra="ignore",
    )

    # Environment
    log_level: str = "INFO"

    # Where run artifacts land when --out is not given
    output_dir: str = "output"

    # Worker processes for (method, seed) cells; 1 = in-process, sequential
    workers: int = 1

    # Dataset presets (CSV column maps)
    presets_dir: str = ""

    @property
    def presets_path(self) -> Path:
        """Return the presets directory, defaulting to the project's presets/ folder."""
        if self.presets_dir:
            return Path(self.presets_dir)
        return Path(__file__).parent.parent / "presets"


def load_yaml_config(path: Optional[Path] = None) -> dict:
    """Load config.yaml from project root."""
    if path is None:
        path = Path(__file__).parent.parent / "config.yaml"
    with open(path, "r", encoding="utf-8") as f:
        return yaml.safe_load(f) or {}


def _deep_merge(base: Dict[str, Any], override: Dict[str, Any]) -> Dict[str, Any]:
    merged = dict(base)
    for key, value in override.items():
        if isinstance(value, dict) and isinstance(merged.get(key), dict):
            merged[key] = _deep_merge(merged[key], value)
        else:
            merged[key] = value
    return merged


def yaml_defaults(yaml_config: Dict[str, Any]) -> Dict[str, Any]:
    """Map config.yaml sections onto ExperimentConfig fields."""
    inversion = yaml_config.get("inversion") or {}
    orchestration = yaml_config.get("orchestration") or {}
    split = dict(yaml_config.get("split") or {})
    if "min_test_points" in orchestration:
        split["min_test_points"] = orchestration["min_test_points"]

    data: Dict[str, Any] = {}
    for section in ("training", "attention"):
        if yaml_config.get(section):
            data[section] = dict(yaml_config[section])
    if split:
        data["split"] = split
    if inversion.get("steps") is not None:
        data["inversion_steps"] = inversion["steps"]
    if inversion.get("step_size") is not None:
        data["inversion_lr"] = inversion["step_size"]
    if orchestration.get("workers") is not None:
        data["workers"] = orchestration["workers"]
    return data


def resolve_experiment_config(
    yaml_config: Dict[str, Any],
    flags: Dict[str, Any],
    experiment_path: Optional[Path] = None,
) -> "ExperimentConfig":
    """Model defaults < config.yaml < CLI flags (None = unset) < experiment YAML file."""
    from .models import ExperimentConfig

    data = yaml_defaults(yaml_config)
    data = _deep_merge(data, {k: v for k, v in flags.items() if v is not None})
    if experiment_path is not None:
        data = _deep_merge(data, load_yaml_config(Path(experiment_path)))
    return ExperimentConfig.model_validate(data)
