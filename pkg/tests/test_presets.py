"""Tests for dataset preset loading."""

import json
import tempfile
from pathlib import Path

import numpy as np
import pytest

from src.presets import DatasetPreset, load_all_presets, load_preset, load_preset_dataset


@pytest.fixture
def sample_preset_data():
    return {
        "id": "test_preset",
        "name": "Test Dataset",
        "description": "Two inputs, two alternating targets",
        "csv_path": "toy.csv",
        "input_columns": ["a", "wd"],
        "target_columns": ["p", "q"],
        "options": {"direction_columns": ["wd"]},
        "alternate": {"column_a": "p", "column_b": "q", "segment_min": 2, "segment_max": 2},
    }


@pytest.fixture
def presets_dir(sample_preset_data):
    with tempfile.TemporaryDirectory() as tmpdir:
        path = Path(tmpdir) / "test_preset.json"
        with open(path, "w", encoding="utf-8") as f:
            json.dump(sample_preset_data, f)
        rows = ["a,wd,p,q"] + [f"{i},N,{i},{100 + i}" for i in range(8)]
        (Path(tmpdir) / "toy.csv").write_text("\n".join(rows) + "\n", encoding="utf-8")
        yield Path(tmpdir)


def test_load_preset_valid(presets_dir):
    preset = load_preset("test_preset", presets_dir)
    assert preset.id == "test_preset"
    assert preset.name == "Test Dataset"
    assert preset.options.direction_columns == ["wd"]
    assert preset.alternate.column_b == "q"


def test_load_preset_by_path(presets_dir):
    preset = load_preset(str(presets_dir / "test_preset.json"))
    assert preset.id == "test_preset"


def test_load_preset_not_found(presets_dir):
    with pytest.raises(FileNotFoundError):
        load_preset("nonexistent", presets_dir)


def test_load_all_presets(presets_dir, sample_preset_data):
    # Add a second preset
    second = {**sample_preset_data, "id": "second_preset", "name": "Second"}
    with open(presets_dir / "second_preset.json", "w", encoding="utf-8") as f:
        json.dump(second, f)

    presets = load_all_presets(presets_dir)
    assert len(presets) == 2
    ids = {p.id for p in presets}
    assert "test_preset" in ids
    assert "second_preset" in ids


def test_load_all_skips_underscore_files(presets_dir, sample_preset_data):
    with open(presets_dir / "_template.json", "w", encoding="utf-8") as f:
        json.dump(sample_preset_data, f)

    presets = load_all_presets(presets_dir)
    assert len(presets) == 1


def test_preset_defaults():
    """Minimal preset with just required fields."""
    preset = DatasetPreset(id="minimal", name="Minimal", csv_path="x.csv", input_columns=["a"], target_columns=["y"])
    assert preset.options.num_lags == 0
    assert preset.alternate is None
    assert preset.resolve_csv(Path("/base")) == Path("/base/x.csv")


def test_alternating_column_must_be_a_target(sample_preset_data):
    data = {**sample_preset_data, "alternate": {"column_a": "p", "column_b": "missing"}}
    with pytest.raises(ValueError):
        DatasetPreset(**data)


def test_preset_needs_columns(sample_preset_data):
    with pytest.raises(ValueError):
        DatasetPreset(**{**sample_preset_data, "input_columns": []})


def test_load_preset_dataset(presets_dir):
    ds = load_preset_dataset(load_preset("test_preset", presets_dir), seed=0, base_dir=presets_dir)
    assert ds.name == "test_preset"
    assert ds.input_names == ("a", "wd_cos", "wd_sin")
    assert ds.target_names == ("p|q",)
    np.testing.assert_array_equal(ds.targets[:, 0], [0, 1, 102, 103, 4, 5, 106, 107])


def test_load_real_presets():
    """Load all real presets from the project's presets/ directory."""
    real_dir = Path(__file__).parent.parent / "presets"
    if not real_dir.exists():
        pytest.skip("No presets/ directory found")

    presets = load_all_presets(real_dir)
    assert {p.id for p in presets} >= {"air_quality", "electricity", "bike_sharing", "wind"}

    for p in presets:
        assert p.name
        assert p.csv_path.endswith(".csv")
        assert p.input_columns and p.target_columns
