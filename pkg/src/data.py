"""Synthetic regime-switching generator, CSV ingestion and temporal splitting.

No function in this module reorders rows. Random draws use PCG64 generators
seeded through ``derive_seed``; Gaussian noise comes from a Box-Muller
transform of PCG64 uniforms so the stream depends only on the bit generator.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import List, Optional, Sequence, Tuple

import numpy as np
import pandas as pd
from pydantic import BaseModel, Field, model_validator

from .utils import derive_seed, make_rng

logger = logging.getLogger(__name__)

GENERATOR_VERSION = "pcg64-boxmuller/1"

MISSING_TOKENS = {"", "na", "nan", "null", "none"}

COMPASS_DEGREES = {
    "N": 0.0, "NNE": 22.5, "NE": 45.0, "ENE": 67.5,
    "E": 90.0, "ESE": 112.5, "SE": 135.0, "SSE": 157.5,
    "S": 180.0, "SSW": 202.5, "SW": 225.0, "WSW": 247.5,
    "W": 270.0, "WNW": 292.5, "NW": 315.0, "NNW": 337.5,
}


class MissingColumnError(ValueError):
    pass


class NonNumericCellError(ValueError):
    """Raised when a cell cannot be parsed as a number; carries the data-row index."""

    def __init__(self, column: str, row: int, value: str):
        super().__init__(f"non-numeric value {value!r} in column {column!r} at row {row}")
        self.column = column
        self.row = row
        self.value = value


class EmptyDatasetError(ValueError):
    pass


class DatasetTooShortError(ValueError):
    pass


# ---------------------------------------------------------------------------
# Dataset container
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class TimeSeriesDataset:
    """Rows are time steps in arrival order."""

    inputs: np.ndarray  # [T, D_in]
    targets: np.ndarray  # [T, D_out]
    name: str = "dataset"
    input_names: Tuple[str, ...] = ()
    target_names: Tuple[str, ...] = ()
    regimes: Optional[np.ndarray] = field(default=None, compare=False)

    def __post_init__(self) -> None:
        if self.inputs.ndim != 2 or self.targets.ndim != 2:
            raise ValueError("inputs and targets must be 2-D [T, D]")
        if self.inputs.shape[0] != self.targets.shape[0]:
            raise ValueError(f"{self.inputs.shape[0]} input rows but {self.targets.shape[0]} target rows")
        if not (np.all(np.isfinite(self.inputs)) and np.all(np.isfinite(self.targets))):
            raise ValueError(f"dataset {self.name!r} holds non-finite entries")
        if not self.input_names:
            object.__setattr__(self, "input_names", tuple(f"x{i}" for i in range(self.inputs.shape[1])))
        if not self.target_names:
            object.__setattr__(self, "target_names", tuple(f"y{i}" for i in range(self.targets.shape[1])))

    def __len__(self) -> int:
        return self.inputs.shape[0]

    def rows(self, index) -> "TimeSeriesDataset":
        return replace(
            self,
            inputs=self.inputs[index],
            targets=self.targets[index],
            regimes=None if self.regimes is None else self.regimes[index],
        )

    def pairs(self) -> List[Tuple[np.ndarray, np.ndarray]]:
        return list(zip(self.inputs, self.targets))


# ---------------------------------------------------------------------------
# Synthetic data
# ---------------------------------------------------------------------------

class SyntheticConfig(BaseModel):
    """Alternating segments: constant input level, regime-specific noise, Y = offset + W X + ε."""

    length: int = Field(default=1500, ge=1)
    dim: int = Field(default=50, ge=1)
    segment_min: int = Field(default=40, ge=1)
    segment_max: int = Field(default=80, ge=1)
    level_a: float = 3.0
    level_b: float = 21.0
    offset: float = 10.0
    seed: int = 0
    noise: bool = True

    @model_validator(mode="after")
    def _check_segments(self) -> "SyntheticConfig":
        if self.segment_max < self.segment_min:
            raise ValueError("segment_max must be >= segment_min")
        return self


def standard_normal(rng: np.random.Generator, size) -> np.ndarray:
    """Box-Muller (cosine branch) on PCG64 uniforms."""
    u1 = 1.0 - rng.random(size)  # (0, 1]
    u2 = rng.random(size)
    return np.sqrt(-2.0 * np.log(u1)) * np.cos(2.0 * np.pi * u2)


def draw_segments(total: int, low: int, high: int, rng: np.random.Generator) -> List[int]:
    """Segment lengths uniform on {low..high} until they cover ``total`` steps."""
    lengths: List[int] = []
    covered = 0
    while covered < total:
        length = int(rng.integers(low, high + 1))
        lengths.append(length)
        covered += length
    return lengths


def segment_labels(total: int, lengths: Sequence[int]) -> np.ndarray:
    """0/1 label per step, alternating at each segment boundary, truncated to ``total``."""
    labels = np.concatenate([np.full(n, i % 2, dtype=np.int64) for i, n in enumerate(lengths)])
    return labels[:total]


def generate_synthetic(cfg: SyntheticConfig) -> TimeSeriesDataset:
    """Regime A: X = level_a, ε ~ N(0, level_a/2 I); regime B: X = level_b, ε ~ U(-level_b, level_b)."""
    mixing_rng = make_rng(derive_seed(cfg.seed, "synthetic", "mixing"))
    segment_rng = make_rng(derive_seed(cfg.seed, "synthetic", "segments"))
    noise_rng = make_rng(derive_seed(cfg.seed, "synthetic", "noise"))

    mixing = standard_normal(mixing_rng, (cfg.dim, cfg.dim)) * math.sqrt(1.0 / cfg.dim)
    lengths = draw_segments(cfg.length, cfg.segment_min, cfg.segment_max, segment_rng)
    regimes = segment_labels(cfg.length, lengths)

    levels = np.where(regimes == 0, cfg.level_a, cfg.level_b)
    inputs = np.repeat(levels[:, None], cfg.dim, axis=1)

    noise = np.zeros((cfg.length, cfg.dim))
    if cfg.noise:
        gaussian = standard_normal(noise_rng, (cfg.length, cfg.dim)) * math.sqrt(cfg.level_a / 2.0)
        uniform = -cfg.level_b + 2.0 * cfg.level_b * noise_rng.random((cfg.length, cfg.dim))
        noise = np.where(regimes[:, None] == 0, gaussian, uniform)

    targets = cfg.offset + inputs @ mixing.T + noise
    logger.debug(f"Synthetic stream: {cfg.length} steps, {len(lengths)} segments, generator {GENERATOR_VERSION}")
    return TimeSeriesDataset(inputs=inputs, targets=targets, name="synthetic", regimes=regimes)


# ---------------------------------------------------------------------------
# CSV ingestion
# ---------------------------------------------------------------------------

class CsvOptions(BaseModel):
    """Per-dataset parsing options, usually filled from a preset file."""

    minmax_columns: List[str] = Field(default_factory=list)  # scaled to [-1, 1]
    direction_columns: List[str] = Field(default_factory=list)  # degrees or compass -> cos/sin
    lag_columns: List[str] = Field(default_factory=list)
    num_lags: int = Field(default=0, ge=0)
    filter_column: Optional[str] = None
    filter_min: Optional[float] = None
    filter_max: Optional[float] = None
    skip_rows: int = Field(default=0, ge=0)


def _direction_to_degrees(column: str, values: pd.Series) -> pd.Series:
    def convert(item: Tuple[int, str]) -> float:
        row, raw = item
        token = raw.strip().upper()
        if token in COMPASS_DEGREES:
            return COMPASS_DEGREES[token]
        try:
            return float(token)
        except ValueError:
            raise NonNumericCellError(column, row, raw) from None

    return pd.Series([convert(item) for item in values.items()], index=values.index)


def _parse_numeric(column: str, values: pd.Series) -> pd.Series:
    parsed = pd.to_numeric(values.str.strip(), errors="coerce")
    bad = parsed.isna()
    if bad.any():
        row = int(bad.idxmax())
        raise NonNumericCellError(column, row, values.loc[row])
    return parsed.astype(np.float64)


def load_csv(
    path,
    input_columns: Sequence[str],
    target_columns: Sequence[str],
    options: Optional[CsvOptions] = None,
) -> TimeSeriesDataset:
    """Parse named numeric columns from a headed UTF-8 CSV, keeping row order.

    Rows with a missing cell in any used column are dropped and counted.
    Direction columns listed among the inputs expand to ``<name>_cos`` and
    ``<name>_sin``.
    """
    options = options or CsvOptions()
    frame = pd.read_csv(path, dtype=str, keep_default_na=False, encoding="utf-8")
    frame = frame.iloc[options.skip_rows:].reset_index(drop=True)

    used = list(dict.fromkeys(list(input_columns) + list(target_columns)))
    if options.filter_column:
        used.append(options.filter_column)
    missing = [c for c in used if c not in frame.columns]
    if missing:
        raise MissingColumnError(f"{path}: missing column(s) {missing}")
    frame = frame[list(dict.fromkeys(used))]

    is_missing = frame.apply(lambda col: col.str.strip().str.lower().isin(MISSING_TOKENS))
    dropped = int(is_missing.any(axis=1).sum())
    if dropped:
        logger.warning(f"{Path(path).name}: dropped {dropped} row(s) with missing values")
    frame = frame[~is_missing.any(axis=1)]

    numeric = pd.DataFrame(index=frame.index)
    for column in frame.columns:
        if column in options.direction_columns:
            radians = np.deg2rad(_direction_to_degrees(column, frame[column]))
            numeric[f"{column}_cos"] = np.cos(radians)
            numeric[f"{column}_sin"] = np.sin(radians)
        else:
            numeric[column] = _parse_numeric(column, frame[column])

    if options.filter_column:
        keep = pd.Series(True, index=numeric.index)
        if options.filter_min is not None:
            keep &= numeric[options.filter_column] >= options.filter_min
        if options.filter_max is not None:
            keep &= numeric[options.filter_column] <= options.filter_max
        numeric = numeric[keep]

    for column in options.minmax_columns:
        low, high = numeric[column].min(), numeric[column].max()
        numeric[column] = 0.0 if high == low else 2.0 * (numeric[column] - low) / (high - low) - 1.0

    input_names: List[str] = []
    for column in input_columns:
        if column in options.direction_columns:
            input_names += [f"{column}_cos", f"{column}_sin"]
        else:
            input_names.append(column)

    if options.num_lags > 0:
        for column in options.lag_columns:
            source = f"{column}_cos" if column in options.direction_columns else column
            for lag in range(1, options.num_lags + 1):
                name = f"{source}_lag{lag}"
                numeric[name] = numeric[source].shift(lag)
                input_names.append(name)
        numeric = numeric.iloc[options.num_lags:]

    if numeric.empty:
        raise EmptyDatasetError(f"{path}: no rows left after parsing")

    return TimeSeriesDataset(
        inputs=numeric[input_names].to_numpy(dtype=np.float64),
        targets=numeric[list(target_columns)].to_numpy(dtype=np.float64),
        name=Path(path).stem,
        input_names=tuple(input_names),
        target_names=tuple(target_columns),
    )


def alternate_targets(
    ds: TimeSeriesDataset,
    column_a: str,
    column_b: str,
    segment_range: Tuple[int, int] = (40, 80),
    seed: int = 0,
) -> TimeSeriesDataset:
    """Scalar target switching between two target columns in contiguous segments, starting with column_a."""
    for column in (column_a, column_b):
        if column not in ds.target_names:
            raise MissingColumnError(f"target column {column!r} not in {list(ds.target_names)}")
    rng = make_rng(derive_seed(seed, "segments"))
    lengths = draw_segments(len(ds), segment_range[0], segment_range[1], rng)
    labels = segment_labels(len(ds), lengths)
    a = ds.targets[:, ds.target_names.index(column_a)]
    b = ds.targets[:, ds.target_names.index(column_b)]
    return replace(
        ds,
        targets=np.where(labels == 0, a, b)[:, None],
        target_names=(f"{column_a}|{column_b}",),
        regimes=labels,
    )


# ---------------------------------------------------------------------------
# Splitting and scaling
# ---------------------------------------------------------------------------

class SplitSpec(BaseModel):
    train_fraction: float = Field(default=0.85, gt=0, lt=1)
    max_points: int = Field(default=2000, ge=2)
    min_test_points: int = Field(default=1, ge=1)


def downsample_indices(total: int, max_points: int) -> np.ndarray:
    """round(i (T-1)/(M-1)) for i < M, rounding halves up; identity when T <= M."""
    if total <= max_points:
        return np.arange(total)
    i = np.arange(max_points)
    return np.floor(i * (total - 1) / (max_points - 1) + 0.5).astype(np.int64)


def split_and_downsample(
    ds: TimeSeriesDataset,
    spec: SplitSpec,
    window_length: int = 1,
) -> Tuple[TimeSeriesDataset, TimeSeriesDataset]:
    """Evenly spaced downsampling, then a prefix/suffix train/test cut."""
    if len(ds) == 0:
        raise EmptyDatasetError("cannot split an empty dataset")
    ds = ds.rows(downsample_indices(len(ds), spec.max_points))
    n_train = int(math.floor(spec.train_fraction * len(ds)))
    n_test = len(ds) - n_train
    if n_train < window_length + 1 or n_test < spec.min_test_points:
        raise DatasetTooShortError(
            f"{ds.name}: {len(ds)} points give {n_train} train / {n_test} test; "
            f"window L={window_length} needs >= {window_length + 1} train and "
            f">= {spec.min_test_points} test points, try a smaller L"
        )
    return ds.rows(slice(0, n_train)), ds.rows(slice(n_train, len(ds)))


@dataclass(frozen=True)
class Standardizer:
    """Per-column affine scaling fitted on the training split only."""

    input_mean: np.ndarray
    input_scale: np.ndarray
    target_mean: np.ndarray
    target_scale: np.ndarray

    @staticmethod
    def _scale(values: np.ndarray) -> np.ndarray:
        std = values.std(axis=0)
        return np.where(std > 0, std, 1.0)

    @classmethod
    def fit(cls, train: TimeSeriesDataset) -> "Standardizer":
        return cls(
            input_mean=train.inputs.mean(axis=0),
            input_scale=cls._scale(train.inputs),
            target_mean=train.targets.mean(axis=0),
            target_scale=cls._scale(train.targets),
        )

    def transform(self, ds: TimeSeriesDataset) -> TimeSeriesDataset:
        return replace(
            ds,
            inputs=(ds.inputs - self.input_mean) / self.input_scale,
            targets=(ds.targets - self.target_mean) / self.target_scale,
        )

    def inverse_transform_interval(self, lower: np.ndarray, upper: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
        """Map standardized interval bounds back to target units (scale > 0 keeps order)."""
        with np.errstate(invalid="ignore"):
            return lower * self.target_scale + self.target_mean, upper * self.target_scale + self.target_mean
