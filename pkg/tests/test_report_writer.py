"""Tests for event, summary and plot-data writers."""

import json

import pandas as pd
import pytest

from src.events import StepEvent
from src.models import RunStatus, RunSummary
from src.report_writer import (
    PLOTDATA_COLUMNS,
    NoSummariesError,
    cell_dir,
    collect_plotdata,
    emit_plotdata,
    write_events,
    write_summary,
)


def _summary(method="OCP", seed=0, status=RunStatus.COMPLETED, coverage=0.9, mean_length=1.0, **extra) -> RunSummary:
    summary = RunSummary(
        method=method, dataset="synthetic", seed=seed, alpha=0.1, window=20, feature_dim=8, lambda_=0.005, **extra
    )
    if status == RunStatus.COMPLETED:
        summary.coverage = coverage
        summary.mean_length = mean_length
        summary.finish(RunStatus.COMPLETED)
    else:
        summary.finish(status, "DatasetTooShortError: not enough points")
    return summary


def _write_cell(out, summary: RunSummary, label="base"):
    return write_summary(summary, cell_dir(out, label, summary.dataset, summary.method, summary.seed) / "summary.json")


def test_cell_dir_layout(tmp_path):
    assert cell_dir(tmp_path, "window=20", "wind", "AFOCP", 3) == tmp_path / "window=20" / "wind" / "AFOCP" / "seed3"


def test_write_events_serializes_infinity(tmp_path):
    events = [
        StepEvent(t=1, method="OCP", alpha_t=0.1, score=0.5, quantile=float("inf"), err=0,
                  mean_interval_length=float("inf")),
        StepEvent(t=2, method="OCP", alpha_t=0.1005, score=0.7, quantile=0.6, err=1, mean_interval_length=1.2),
    ]
    path = write_events(events, tmp_path / "events.csv")
    lines = open(path, encoding="utf-8").read().splitlines()
    assert lines[0] == "t,method,alpha_t,score,quantile,err,mean_interval_length,inversion_residual"
    assert lines[1].split(",")[4] == "inf"
    assert lines[1].split(",")[6] == "inf"
    assert lines[2].split(",")[5] == "1"


def test_write_summary_is_strict_json(tmp_path):
    summary = _summary(mean_length=float("inf"))
    path = write_summary(summary, tmp_path / "summary.json")
    data = json.loads(open(path, encoding="utf-8").read())
    assert data["mean_length"] == "inf"
    assert data["status"] == "completed"


class TestPlotData:
    def test_collects_completed_cells(self, tmp_path):
        _write_cell(tmp_path, _summary("OCP", 0, coverage=0.912345678912, mean_length=2.5))
        _write_cell(tmp_path, _summary("AFOCP", 0, coverage=0.88, mean_length=1.25))
        frame = collect_plotdata(tmp_path)
        assert list(frame.columns) == PLOTDATA_COLUMNS
        assert list(frame["method"]) == ["AFOCP", "OCP"]

    def test_failed_cells_omitted(self, tmp_path, caplog):
        _write_cell(tmp_path, _summary("OCP", 0))
        _write_cell(tmp_path, _summary("FOCP", 1, status=RunStatus.FAILED))
        frame = collect_plotdata(tmp_path)
        assert list(frame["method"]) == ["OCP"]
        assert "FOCP seed 1" in caplog.text

    def test_sweep_columns(self, tmp_path):
        _write_cell(tmp_path, _summary(sweep_var="window", sweep_value=20.0), label="window=20")
        _write_cell(tmp_path, _summary(sweep_var="window", sweep_value=40.0), label="window=40")
        frame = collect_plotdata(tmp_path)
        assert list(frame["sweep_var"]) == ["window", "window"]
        assert list(frame["sweep_value"]) == [20.0, 40.0]

    def test_emit_nine_significant_digits(self, tmp_path):
        _write_cell(tmp_path, _summary("OCP", 0, coverage=0.912345678912, mean_length=1234.56789012))
        path = emit_plotdata(tmp_path)
        assert path == str(tmp_path / "plotdata.csv")
        frame = pd.read_csv(path, dtype=str)
        assert frame.loc[0, "coverage"] == "0.912345679"
        assert frame.loc[0, "mean_length"] == "1234.56789"

    def test_emit_custom_path(self, tmp_path):
        _write_cell(tmp_path / "results", _summary())
        path = emit_plotdata(tmp_path / "results", tmp_path / "out" / "plot.csv")
        assert path == str(tmp_path / "out" / "plot.csv")

    def test_empty_directory(self, tmp_path):
        with pytest.raises(NoSummariesError):
            emit_plotdata(tmp_path)
