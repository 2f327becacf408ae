"""Per-timestep calibration event records."""

import math
from typing import Any, Dict, List, Optional

from pydantic import BaseModel

EVENT_COLUMNS = [
    "t",
    "method",
    "alpha_t",
    "score",
    "quantile",
    "err",
    "mean_interval_length",
    "inversion_residual",
]


def format_extended(value: float) -> Any:
    """Infinite values are written as the literal strings 'inf' / '-inf'."""
    if math.isinf(value):
        return "inf" if value > 0 else "-inf"
    return value


class StepEvent(BaseModel):
    """One row of the event CSV, emitted by every observe() call.

    score and quantile are standardized; stream() rewrites mean_interval_length
    in target units before the row is written.
    """

    t: int
    method: str
    alpha_t: float
    score: float
    quantile: float
    err: int
    mean_interval_length: float
    inversion_residual: float = 0.0

    def to_row(self) -> Dict[str, Any]:
        return {
            "t": self.t,
            "method": self.method,
            "alpha_t": self.alpha_t,
            "score": self.score,
            "quantile": format_extended(self.quantile),
            "err": self.err,
            "mean_interval_length": format_extended(self.mean_interval_length),
            "inversion_residual": self.inversion_residual,
        }


def events_to_rows(events: List[StepEvent]) -> List[Dict[str, Any]]:
    return [e.to_row() for e in events]


def json_number(value: Optional[float]) -> Any:
    """JSON-safe float: ±inf as 'inf' / '-inf', NaN as null."""
    if value is None or (isinstance(value, float) and math.isnan(value)):
        return None
    return format_extended(value)
