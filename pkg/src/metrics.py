"""Time-averaged coverage / length accumulators and assumption diagnostics."""

import logging
import math
from dataclasses import dataclass, field
from typing import Dict, List, Sequence, Tuple

import numpy as np
import pandas as pd
from pydantic import BaseModel

from .calibration import PredictionInterval, WeightedScoreDistribution, feature_interval, weighted_quantile
from .events import json_number
from .neuralnet import MlpParams

logger = logging.getLogger(__name__)


class IncompleteRunLogError(ValueError):
    """Raised when a diagnostics log is empty or a step is missing data."""
    pass


# ---------------------------------------------------------------------------
# Coverage and length
# ---------------------------------------------------------------------------

@dataclass
class MetricsAccumulator:
    """Running coverage and mean interval length.

    Infinite-length steps count toward coverage but are kept out of the
    length average; their number is reported separately.
    """

    steps: int = 0
    covered: int = 0
    length_sum: float = 0.0
    finite_length_steps: int = 0
    inf_length_steps: int = 0
    trajectory: List[Tuple[int, float, float]] = field(default_factory=list)

    @property
    def coverage(self) -> float:
        return self.covered / self.steps if self.steps else float("nan")

    @property
    def mean_length(self) -> float:
        if self.finite_length_steps == 0:
            return math.inf if self.inf_length_steps else float("nan")
        return self.length_sum / self.finite_length_steps

    def summary(self) -> Dict[str, float]:
        return {
            "T": self.steps,
            "coverage": self.coverage,
            "mean_length": self.mean_length,
            "inf_length_steps": self.inf_length_steps,
        }

    def trajectory_frame(self) -> pd.DataFrame:
        return pd.DataFrame(self.trajectory, columns=["t", "running_coverage", "running_length"])


def record(acc: MetricsAccumulator, y, interval: PredictionInterval, err: int) -> MetricsAccumulator:
    """Add one step: coverage from the score-space test, length as the mean width over output dims."""
    y = np.atleast_1d(np.asarray(y, dtype=np.float64))
    if y.shape != interval.lower.shape:
        raise ValueError(f"label dimension {y.shape[0]} != interval dimension {interval.lower.shape[0]}")
    if err not in (0, 1):
        raise ValueError(f"err must be 0 or 1, got {err}")

    acc.steps += 1
    acc.covered += 1 - err
    length = interval.mean_width
    if math.isinf(length):
        acc.inf_length_steps += 1
    else:
        acc.length_sum += length
        acc.finite_length_steps += 1
    acc.trajectory.append((acc.steps, acc.coverage, acc.mean_length))
    return acc


# ---------------------------------------------------------------------------
# Assumption diagnostics
# ---------------------------------------------------------------------------

def h_operator(head: MlpParams, diameter: float, x_feature) -> float:
    """Output-space length of the feature ball of diameter M around f(x), bounded by feature_interval."""
    if math.isnan(diameter) or diameter < 0:
        raise ValueError(f"diameter must be >= 0, got {diameter}")
    x_feature = np.asarray(x_feature, dtype=np.float64)
    if not np.all(np.isfinite(x_feature)):
        raise ValueError("h_operator needs a finite feature vector")
    if diameter == 0:
        return 0.0
    return feature_interval(head, x_feature, diameter / 2.0).mean_width


@dataclass(frozen=True)
class DiagnosticStep:
    """One step of a paired AOCP / AFOCP run.

    Scores are the raw window scores; lengths are derived as 2·score.
    Weights include the trailing +inf mass.
    """

    t: int
    output_scores: np.ndarray
    output_weights: np.ndarray
    output_level: float
    feature_scores: np.ndarray
    feature_weights: np.ndarray
    feature_level: float
    window_features: np.ndarray  # [L, D]
    query_feature: np.ndarray  # [D]

    def check(self) -> None:
        window = self.feature_scores.shape[0]
        consistent = (
            window > 0
            and self.output_scores.shape[0] == window
            and self.output_weights.shape[0] == window + 1
            and self.feature_weights.shape[0] == window + 1
            and self.window_features.shape[0] == window
        )
        if not consistent:
            raise IncompleteRunLogError(f"diagnostic step t={self.t} has inconsistent window data")


class DiagnosticsReport(BaseModel):
    """Raw sides of the three time-averaged assumptions; no verdict is drawn."""

    window_length: int
    steps_used: int
    steps_skipped: int
    holder_constant: float
    exponent: float
    length_preservation_lhs: float
    length_preservation_rhs: float
    expansion_lhs: float
    expansion_rhs: float
    quantile_stability_lhs: float

    def to_json_dict(self) -> dict:
        return {
            "window_length": self.window_length,
            "steps": {"used": self.steps_used, "skipped_infinite_quantile": self.steps_skipped},
            "holder": {"R": self.holder_constant, "beta": self.exponent},
            "length_preservation": {
                "lhs": json_number(self.length_preservation_lhs),
                "rhs": json_number(self.length_preservation_rhs),
            },
            "expansion": {"lhs": json_number(self.expansion_lhs), "rhs": json_number(self.expansion_rhs)},
            "quantile_stability": {"lhs": json_number(self.quantile_stability_lhs)},
        }


def _quantile(values: np.ndarray, weights: np.ndarray, level: float) -> float:
    dist = WeightedScoreDistribution(scores=values, weights=weights[:-1], infinity_weight=float(weights[-1]))
    return weighted_quantile(dist, level)


def assumption_diagnostics(
    run_log: Sequence[DiagnosticStep],
    head: MlpParams,
    holder_constant: float = 1.0,
    exponent: float = 1.0,
) -> DiagnosticsReport:
    """Time averages of the length-preservation, expansion and quantile-stability statistics.

    Steps where any quantile is infinite are skipped and counted.
    The ε and C/√L slack terms are unknown and left out of every side.
    """
    if not run_log:
        raise IncompleteRunLogError("diagnostics need at least one logged step")

    preservation_lhs: List[float] = []
    preservation_rhs: List[float] = []
    expansion_lhs: List[float] = []
    expansion_rhs: List[float] = []
    stability: List[float] = []
    skipped = 0

    for step in run_log:
        step.check()
        output_lengths = 2.0 * step.output_scores
        feature_lengths = 2.0 * step.feature_scores

        q_output = _quantile(output_lengths, step.output_weights, step.output_level)
        q_feature = _quantile(feature_lengths, step.feature_weights, step.feature_level)
        if not (math.isfinite(q_output) and math.isfinite(q_feature)):
            skipped += 1
            continue

        h_window = np.array([h_operator(head, m, v) for m, v in zip(feature_lengths, step.window_features)])
        q_h = _quantile(h_window, step.feature_weights, step.feature_level)
        if not math.isfinite(q_h):
            skipped += 1
            continue

        preservation_lhs.append(q_h)
        preservation_rhs.append(q_output)
        expansion_lhs.append(holder_constant * float(np.mean(np.abs(q_feature - feature_lengths) ** exponent)))
        expansion_rhs.append(float(np.mean(q_h - h_window)))
        h_query = h_operator(head, q_feature, step.query_feature)
        h_at_window = np.array([h_operator(head, q_feature, v) for v in step.window_features])
        stability.append(abs(h_query - float(np.mean(h_at_window))))

    if skipped:
        logger.warning(f"Diagnostics skipped {skipped} of {len(run_log)} steps with an infinite quantile")

    def mean(values: List[float]) -> float:
        return float(np.mean(values)) if values else float("nan")

    return DiagnosticsReport(
        window_length=int(run_log[0].feature_scores.shape[0]),
        steps_used=len(preservation_lhs),
        steps_skipped=skipped,
        holder_constant=holder_constant,
        exponent=exponent,
        length_preservation_lhs=mean(preservation_lhs),
        length_preservation_rhs=mean(preservation_rhs),
        expansion_lhs=mean(expansion_lhs),
        expansion_rhs=mean(expansion_rhs),
        quantile_stability_lhs=mean(stability),
    )


# ---------------------------------------------------------------------------
# Cross-seed aggregation
# ---------------------------------------------------------------------------

def aggregate_summaries(rows: Sequence[Dict[str, object]]) -> pd.DataFrame:
    """Mean and population stddev of coverage and mean_length per method.

    ``rows`` are summary dicts with at least method, coverage and mean_length.
    Infinite mean lengths propagate into the aggregate.
    """
    frame = pd.DataFrame(list(rows), columns=["method", "seed", "coverage", "mean_length"])
    if frame.empty:
        return pd.DataFrame(
            columns=["method", "seeds", "coverage_mean", "coverage_std", "mean_length_mean", "mean_length_std"]
        )
    population_std = lambda s: s.std(ddof=0)  # noqa: E731
    return (
        frame.groupby("method", sort=False)
        .agg(
            seeds=("coverage", "size"),
            coverage_mean=("coverage", "mean"),
            coverage_std=("coverage", population_std),
            mean_length_mean=("mean_length", "mean"),
            mean_length_std=("mean_length", population_std),
        )
        .reset_index()
    )

