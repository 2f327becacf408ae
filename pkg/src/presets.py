"""Load and validate dataset preset JSON files."""

import json
import logging
from dataclasses import replace
from pathlib import Path
from typing import List, Optional

from pydantic import BaseModel, Field, model_validator

from .data import CsvOptions, TimeSeriesDataset, alternate_targets, load_csv

logger = logging.getLogger(__name__)


class AlternatingTarget(BaseModel):
    """Two target columns merged into one scalar target by contiguous segments."""

    column_a: str
    column_b: str
    segment_min: int = Field(default=40, ge=1)
    segment_max: int = Field(default=80, ge=1)


class DatasetPreset(BaseModel):
    """Column map and parsing options for one benchmark CSV."""

    id: str
    name: str
    description: str = ""
    csv_path: str
    input_columns: List[str]
    target_columns: List[str]
    options: CsvOptions = Field(default_factory=CsvOptions)
    alternate: Optional[AlternatingTarget] = None
    notes: Optional[str] = None

    @model_validator(mode="after")
    def _check_columns(self) -> "DatasetPreset":
        if not self.input_columns or not self.target_columns:
            raise ValueError(f"preset {self.id!r} needs at least one input and one target column")
        if self.alternate:
            for column in (self.alternate.column_a, self.alternate.column_b):
                if column not in self.target_columns:
                    raise ValueError(f"alternating column {column!r} must be listed in target_columns")
        return self

    def resolve_csv(self, base_dir: Optional[Path] = None) -> Path:
        path = Path(self.csv_path)
        if path.is_absolute():
            return path
        return (base_dir or Path.cwd()) / path


def _presets_dir() -> Path:
    return Path(__file__).parent.parent / "presets"


def _read_preset(path: Path) -> DatasetPreset:
    with open(path, "r", encoding="utf-8") as f:
        data = json.load(f)
    return DatasetPreset(**data)


def load_preset(preset_id: str, presets_dir: Optional[Path] = None) -> DatasetPreset:
    """Load a single preset by ID (filename without .json) or by path to a JSON file."""
    if preset_id.endswith(".json"):
        path = Path(preset_id)
    else:
        path = (presets_dir or _presets_dir()) / f"{preset_id}.json"
    if not path.exists():
        raise FileNotFoundError(f"Preset not found: {path}")
    return _read_preset(path)


def load_all_presets(presets_dir: Optional[Path] = None) -> List[DatasetPreset]:
    """Load all preset JSON files, skipping names that start with '_'."""
    base = presets_dir or _presets_dir()
    return [_read_preset(path) for path in sorted(base.glob("*.json")) if not path.name.startswith("_")]


def load_preset_dataset(preset: DatasetPreset, seed: int = 0, base_dir: Optional[Path] = None) -> TimeSeriesDataset:
    """Read the preset's CSV and apply target alternation when configured."""
    csv_path = preset.resolve_csv(base_dir)
    logger.info(f"Loading preset {preset.id} from {csv_path}")
    ds = load_csv(csv_path, preset.input_columns, preset.target_columns, preset.options)
    if preset.alternate:
        ds = alternate_targets(
            ds,
            preset.alternate.column_a,
            preset.alternate.column_b,
            (preset.alternate.segment_min, preset.alternate.segment_max),
            seed=seed,
        )
    return replace(ds, name=preset.id)
