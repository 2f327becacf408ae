"""Data models for experiment configuration and run results."""

from datetime import datetime, timezone
from enum import Enum
from typing import Any, Dict, List, Optional, Tuple

from pydantic import BaseModel, ConfigDict, Field, field_validator, model_validator

from .attention import AttentionConfig
from .calibration import Method
from .data import SplitSpec, SyntheticConfig
from .events import json_number

SWEEP_VARIABLES = ("window", "feature_dim", "alpha", "lambda")
INTEGER_SWEEPS = ("window", "feature_dim")


class RunStatus(str, Enum):
    RUNNING = "running"
    COMPLETED = "completed"
    FAILED = "failed"


# ---------------------------------------------------------------------------
# Configuration
# ---------------------------------------------------------------------------

class TrainingConfig(BaseModel):
    """Two-stage model training: Adam with decoupled weight decay on the MSE."""

    learning_rate: float = Field(default=5e-4, gt=0)
    weight_decay: float = Field(default=1e-6, ge=0)
    batch_size: int = Field(default=64, ge=1)
    epochs: int = Field(default=10, ge=0)


class SweepSpec(BaseModel):
    """One swept variable and its values, parsed from ``<var>=<v1>,<v2>,...``."""

    var: str
    values: List[float]

    @field_validator("var")
    @classmethod
    def _known_var(cls, v: str) -> str:
        if v not in SWEEP_VARIABLES:
            raise ValueError(f"sweep variable must be one of {SWEEP_VARIABLES}, got {v!r}")
        return v

    @field_validator("values")
    @classmethod
    def _nonempty(cls, v: List[float]) -> List[float]:
        if not v:
            raise ValueError("sweep needs at least one value")
        return v

    @classmethod
    def parse(cls, text: str) -> "SweepSpec":
        if "=" not in text:
            raise ValueError(f"sweep must look like <var>=<v1>,<v2>,..., got {text!r}")
        var, _, raw = text.partition("=")
        return cls(var=var.strip(), values=[float(v) for v in raw.split(",") if v.strip()])

    def labels(self) -> List[str]:
        if self.var in INTEGER_SWEEPS:
            return [f"{self.var}={int(v)}" for v in self.values]
        return [f"{self.var}={v:g}" for v in self.values]


class ExperimentConfig(BaseModel):
    """Validated experiment description.

    ``lambda`` is the α step size; it is stored as ``lambda_`` and accepted
    under either name.
    """

    model_config = ConfigDict(populate_by_name=True)

    dataset: str = "synthetic"
    synthetic: SyntheticConfig = Field(default_factory=SyntheticConfig)
    methods: List[Method] = Field(default_factory=lambda: list(Method))
    alpha: float = Field(default=0.1, gt=0, lt=1)
    window: int = Field(default=100, ge=1)
    feature_dim: int = Field(default=50, ge=1)
    lambda_: float = Field(default=0.005, gt=0, alias="lambda")
    inversion_steps: int = Field(default=100, ge=1)
    inversion_lr: Optional[float] = Field(default=None, gt=0)
    seeds: List[int] = Field(default_factory=lambda: [0, 1, 2, 3, 4])
    out: str = "output"
    sweep: Optional[SweepSpec] = None
    training: TrainingConfig = Field(default_factory=TrainingConfig)
    attention: AttentionConfig = Field(default_factory=AttentionConfig)
    split: SplitSpec = Field(default_factory=SplitSpec)
    workers: int = Field(default=1, ge=1)

    @field_validator("methods", mode="before")
    @classmethod
    def _parse_methods(cls, v: Any) -> Any:
        if isinstance(v, str):
            v = [m for m in v.split(",") if m.strip()]
        if isinstance(v, (list, tuple)):
            return [m.strip().upper() if isinstance(m, str) else m for m in v]
        return v

    @field_validator("methods")
    @classmethod
    def _unique_methods(cls, v: List[Method]) -> List[Method]:
        if not v:
            raise ValueError("at least one method is required")
        return list(dict.fromkeys(v))

    @field_validator("seeds", mode="before")
    @classmethod
    def _parse_seeds(cls, v: Any) -> Any:
        if isinstance(v, str):
            return [int(s) for s in v.split(",") if s.strip()]
        if isinstance(v, int):
            return [v]
        return v

    @field_validator("seeds")
    @classmethod
    def _nonempty_seeds(cls, v: List[int]) -> List[int]:
        if not v:
            raise ValueError("seeds must be nonempty")
        return list(dict.fromkeys(v))

    @field_validator("sweep", mode="before")
    @classmethod
    def _parse_sweep(cls, v: Any) -> Any:
        if isinstance(v, str):
            return SweepSpec.parse(v)
        return v

    @model_validator(mode="after")
    def _check_sweep_values(self) -> "ExperimentConfig":
        if self.sweep is None:
            return self
        for value in self.sweep.values:
            self.with_sweep_value(value)
        return self

    def with_sweep_value(self, value: float) -> "ExperimentConfig":
        """Copy of this config with the swept variable set to ``value``, revalidated."""
        if self.sweep is None:
            return self
        field_name = {"lambda": "lambda_"}.get(self.sweep.var, self.sweep.var)
        cast = int(value) if self.sweep.var in INTEGER_SWEEPS else float(value)
        data = self.model_dump(by_alias=False, exclude={"sweep"})
        data[field_name] = cast
        return ExperimentConfig.model_validate(data)

    def sweep_points(self) -> List[Tuple[str, Optional[str], Optional[float], "ExperimentConfig"]]:
        """(directory label, sweep var, sweep value, config) per sweep point; one 'base' point without a sweep."""
        if self.sweep is None:
            return [("base", None, None, self)]
        return [
            (label, self.sweep.var, value, self.with_sweep_value(value))
            for label, value in zip(self.sweep.labels(), self.sweep.values)
        ]

    def cells(self) -> List[Tuple[Method, int]]:
        return [(method, seed) for method in self.methods for seed in self.seeds]

    def snapshot(self) -> Dict[str, Any]:
        return self.model_dump(mode="json", by_alias=True)


# ---------------------------------------------------------------------------
# Results
# ---------------------------------------------------------------------------

class RunSummary(BaseModel):
    """Result of one (method, seed) cell at one sweep point."""

    # Identification
    method: str
    dataset: str
    seed: int
    alpha: float
    window: int
    feature_dim: int
    lambda_: float
    sweep_var: Optional[str] = None
    sweep_value: Optional[float] = None

    # Timing
    started_at: datetime = Field(default_factory=lambda: datetime.now(timezone.utc))
    finished_at: Optional[datetime] = None
    duration_seconds: Optional[float] = None

    # Status
    status: RunStatus = RunStatus.RUNNING
    error_message: Optional[str] = None

    # Metrics
    T: int = 0
    coverage: Optional[float] = None
    mean_length: Optional[float] = None
    inf_length_steps: int = 0
    theorem1_bound_lhs: Optional[float] = None
    theorem1_bound_rhs: Optional[float] = None
    two_sided_gap: Optional[float] = None
    two_sided_bound: Optional[float] = None
    alpha_final: Optional[float] = None
    alpha_bound_violations: int = 0
    mean_inversion_residual: Optional[float] = None

    # Output files
    events_path: Optional[str] = None

    def finish(self, status: RunStatus, error: Optional[str] = None) -> None:
        self.status = status
        self.error_message = error
        self.finished_at = datetime.now(timezone.utc)
        self.duration_seconds = (self.finished_at - self.started_at).total_seconds()

    def to_json_dict(self) -> dict:
        """Serialize for summary.json; wall-clock fields live under 'timing' only."""
        return {
            "method": self.method,
            "dataset": self.dataset,
            "alpha": self.alpha,
            "L": self.window,
            "D": self.feature_dim,
            "lambda": self.lambda_,
            "seed": self.seed,
            "sweep": {"var": self.sweep_var, "value": self.sweep_value},
            "status": self.status.value,
            "error_message": self.error_message,
            "T": self.T,
            "coverage": json_number(self.coverage),
            "mean_length": json_number(self.mean_length),
            "inf_length_steps": self.inf_length_steps,
            "theorem1_bound_lhs": json_number(self.theorem1_bound_lhs),
            "theorem1_bound_rhs": json_number(self.theorem1_bound_rhs),
            "two_sided": {"gap": json_number(self.two_sided_gap), "bound": json_number(self.two_sided_bound)},
            "alpha_final": json_number(self.alpha_final),
            "alpha_bound_violations": self.alpha_bound_violations,
            "mean_inversion_residual": json_number(self.mean_inversion_residual),
            "timing": {
                "started_at": self.started_at.isoformat(),
                "finished_at": self.finished_at.isoformat() if self.finished_at else None,
                "duration_seconds": self.duration_seconds,
            },
        }


class MethodAggregate(BaseModel):
    method: str
    seeds: int
    coverage_mean: float
    coverage_std: float
    mean_length_mean: float
    mean_length_std: float


class AggregateSummary(BaseModel):
    """Cross-seed mean ± population stddev per method at one sweep point."""

    dataset: str
    sweep_var: Optional[str] = None
    sweep_value: Optional[float] = None
    methods: List[MethodAggregate] = Field(default_factory=list)
    failed_cells: List[Dict[str, Any]] = Field(default_factory=list)

    def to_json_dict(self) -> dict:
        return {
            "dataset": self.dataset,
            "sweep": {"var": self.sweep_var, "value": self.sweep_value},
            "methods": [
                {
                    "method": m.method,
                    "seeds": m.seeds,
                    "coverage": {"mean": json_number(m.coverage_mean), "std": json_number(m.coverage_std)},
                    "mean_length": {"mean": json_number(m.mean_length_mean), "std": json_number(m.mean_length_std)},
                }
                for m in self.methods
            ],
            "failed_cells": self.failed_cells,
        }
