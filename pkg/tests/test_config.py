"""Tests for run configuration handling."""
import json
import math
import tempfile
from pathlib import Path

import pytest  # type: ignore

from twotone.config import (
    OUTPUT_ENV,
    OutputSection,
    ReproduceTarget,
    RunConfig,
    Task,
    load_config_file,
    load_recipe,
    merge,
    parse_range,
    resolve_config,
)
from twotone.errors import ConfigError


def test_minimal_config_defaults() -> None:
    """Test a config with only a task takes the defaults."""
    config = RunConfig.from_dict({"task": "map"})
    assert config.task is Task.MAP
    assert config.seed == 0
    assert config.jobs is None
    params = config.system.to_params()
    assert params.kappa == 1.0
    assert params.cooperativity == pytest.approx(1.0)
    assert config.sweep.dm_range == (-18.0, 18.0)


def test_hz_units_convert_rates_only() -> None:
    """Test rates are converted to angular units and dimensionless values are not."""
    config = RunConfig.from_dict(
        {
            "task": "spectrum",
            "units": "hz",
            "system": {"kappa": 1.0, "gamma_m": 0.01, "cooperativity": 2.0},
            "drive": {"delta_c": 0.5, "delta_m_norm": 3.0},
            "noise": {"n_th": 7.0},
        }
    )
    assert config.system.kappa == pytest.approx(2.0 * math.pi)
    assert config.system.gamma_m == pytest.approx(0.02 * math.pi)
    assert config.system.cooperativity == 2.0
    assert config.drive.delta_c == pytest.approx(math.pi)
    assert config.drive.delta_m_norm == 3.0
    assert config.noise.n_th == 7.0

    params, drive, noise = config.physical()
    assert drive.delta_c_norm(params) == pytest.approx(1.0)
    assert drive.delta_m_norm(params) == pytest.approx(3.0)
    assert noise.n_th == 7.0


def test_unknown_keys_rejected() -> None:
    """Test unknown keys at any level are rejected."""
    with pytest.raises(ConfigError):
        RunConfig.from_dict({"task": "map", "colour": "blue"})
    with pytest.raises(ConfigError):
        RunConfig.from_dict({"task": "map", "system": {"kapa": 1.0}})
    with pytest.raises(ConfigError):
        RunConfig.from_dict({"task": "map", "system": 3})


def test_invalid_values_rejected() -> None:
    """Test invalid values raise ConfigError."""
    bad_configs = [
        {},
        {"task": "fit"},
        {"task": "map", "units": "rpm"},
        {"task": "map", "system": {"g": 0.1, "cooperativity": 2.0}},
        {"task": "map", "system": {"kappa": "fast"}},
        {"task": "map", "sweep": {"dm_points": 0}},
        {"task": "map", "sweep": {"dm_points": True}},
        {"task": "map", "sweep": {"dc_range": [1.0, -1.0]}},
        {"task": "map", "sweep": {"quantities": ["margin", "phase"]}},
        {"task": "map", "sweep": {"tol": 0.0}},
        {"task": "map", "drive": {"delta_c": 0.1, "delta_c_norm": 0.2}},
        {"task": "map", "drive": {"mode": "three_tone"}},
        {"task": "spectrum", "spectrum": {"omega_min": -1.0}},
        {"task": "spectrum", "spectrum": {"omega_min": 1.0, "omega_max": -1.0}},
        {"task": "simulate", "simulate": {"scheme": "rk4"}},
        {"task": "simulate", "simulate": {"dt": -1.0}},
        {"task": "simulate", "simulate": {"x0": [1.0, 2.0]}},
        {"task": "contour", "contour": {"cooperativities": []}},
        {"task": "map", "output": {"formats": ["xml"]}},
        {"task": "map", "seed": -1},
        {"task": "reproduce"},
        {"task": "reproduce", "target": "fig9"},
    ]
    for data in bad_configs:
        with pytest.raises(ConfigError):
            RunConfig.from_dict(data)


def test_config_round_trip() -> None:
    """Test the resolved config loads back to the same object."""
    config = RunConfig.from_dict(
        {
            "task": "reproduce",
            "target": "fig5",
            "seed": 7,
            "jobs": 2,
            "units": "hz",
            "system": {"kappa": 2.81e6, "gamma_m": 110.0, "cooperativity": 7.0},
            "drive": {"delta_c_norm": 0.1, "delta_m_norm": -4.0},
            "sweep": {"dm_range": "-6:6", "quantities": ["margin", "power"]},
            "simulate": {"x0": [1.0, 0.0, 0.0, 0.0], "seeds": 4},
            "output": {"dir": "results", "formats": "json"},
        }
    )
    data = config.to_dict()
    assert data["units"] == "angular"
    reloaded = RunConfig.from_dict(json.loads(config.to_json()))
    assert reloaded == config
    assert reloaded.target is ReproduceTarget.FIG5
    assert reloaded.output.formats == ["json"]


def test_physical_applies_cooling() -> None:
    """Test a cooling tone broadens Γm at fixed coupling."""
    config = RunConfig.from_dict(
        {
            "task": "spectrum",
            "system": {"kappa": 1.0, "gamma_m": 0.01, "cooperativity": 2.0},
            "noise": {"n_th": 8.0, "cooling_gamma_eff": 0.04},
        }
    )
    params, _, noise = config.physical()
    assert params.gamma_m == 0.04
    assert params.cooperativity == pytest.approx(0.5)
    assert noise.n_th < 8.0

    config.noise.cooling_gamma_eff = 0.001
    with pytest.raises(ConfigError):
        config.physical()


def test_single_tone_requires_omega_m() -> None:
    """Test single-tone configs without Ωm are rejected on resolution."""
    config = RunConfig.from_dict({"task": "spectrum", "drive": {"mode": "single_tone_upper"}})
    with pytest.raises(ConfigError):
        config.physical()


def test_parse_range() -> None:
    """Test low:high parsing."""
    assert parse_range("-18:18") == (-18.0, 18.0)
    assert parse_range("0.1:2.5e1") == (0.1, 25.0)
    with pytest.raises(ConfigError):
        parse_range("1:2:3")
    with pytest.raises(ConfigError):
        parse_range("2:1")
    with pytest.raises(ConfigError):
        parse_range("a:b")


def test_merge_overrides() -> None:
    """Test overrides win and None never overrides."""
    base = {"task": "map", "seed": 3, "system": {"kappa": 2.0, "gamma_m": 0.1}}
    merged = merge(base, {"seed": None, "system": {"gamma_m": 0.5, "kappa": None}, "jobs": 4})
    assert merged == {"task": "map", "seed": 3, "jobs": 4, "system": {"kappa": 2.0, "gamma_m": 0.5}}
    assert base["system"] == {"kappa": 2.0, "gamma_m": 0.1}
    with pytest.raises(ConfigError):
        merge({"system": 1}, {"system": {"kappa": 1.0}})


def test_load_config_files() -> None:
    """Test loading TOML and JSON config files."""
    with tempfile.TemporaryDirectory() as tmpdir:
        tmppath = Path(tmpdir)
        toml_path = tmppath / "run.toml"
        toml_path.write_text(
            'task = "map"\n\n[system]\nkappa = 1.0\ngamma_m = 0.01\ncooperativity = 2.0\n',
            encoding="utf-8",
        )
        data = load_config_file(toml_path)
        assert data["system"]["cooperativity"] == 2.0

        json_path = tmppath / "run.json"
        json_path.write_text(json.dumps({"task": "contour"}), encoding="utf-8")
        assert load_config_file(json_path) == {"task": "contour"}

        (tmppath / "run.yaml").write_text("task: map\n", encoding="utf-8")
        with pytest.raises(ConfigError):
            load_config_file(tmppath / "run.yaml")
        (tmppath / "broken.toml").write_text("task = \n", encoding="utf-8")
        with pytest.raises(ConfigError):
            load_config_file(tmppath / "broken.toml")
        (tmppath / "list.json").write_text("[1, 2]", encoding="utf-8")
        with pytest.raises(ConfigError):
            load_config_file(tmppath / "list.json")
        with pytest.raises(ConfigError):
            load_config_file(tmppath / "missing.toml")


def test_load_config_from_artifacts() -> None:
    """Test the config embedded in a JSON or CSV artifact is recovered."""
    embedded = {"task": "map", "units": "angular", "seed": 3, "sweep": {"dm_points": 7}}
    with tempfile.TemporaryDirectory() as tmpdir:
        tmppath = Path(tmpdir)
        json_path = tmppath / "stability_map.json"
        json_path.write_text(
            json.dumps({"format_version": 1, "config": embedded, "columns": [], "rows": []}),
            encoding="utf-8",
        )
        assert load_config_file(json_path) == embedded

        csv_path = tmppath / "stability_map.csv"
        csv_path.write_text(
            f"# format_version: 1\n# config: {json.dumps(embedded)}\nmargin\n-0.5\n",
            encoding="utf-8",
        )
        assert load_config_file(csv_path) == embedded

        bare = tmppath / "bare.csv"
        bare.write_text("margin\n-0.5\n", encoding="utf-8")
        with pytest.raises(ConfigError):
            load_config_file(bare)


def test_resolve_config_flags_win() -> None:
    """Test command-line overrides take precedence over the file."""
    with tempfile.TemporaryDirectory() as tmpdir:
        path = Path(tmpdir) / "run.json"
        path.write_text(json.dumps({"task": "map", "seed": 1}), encoding="utf-8")
        config = resolve_config(path, {"seed": 9, "sweep": {"dm_points": 11}})
        assert config.seed == 9
        assert config.sweep.dm_points == 11
        assert resolve_config(None, {"task": "contour"}).task is Task.CONTOUR


def test_recipes_are_valid() -> None:
    """Test every shipped recipe resolves to valid run configs."""
    for target in ReproduceTarget:
        description, runs = load_recipe(target)
        assert description
        assert runs
        for run in runs:
            config = RunConfig.from_dict(run)
            assert config.task in (Task.MAP, Task.CONTOUR)

    _, runs = load_recipe("fig4def")
    assert [run["system"]["cooperativity"] for run in runs] == [3.5, 7.0, 14.0]
    config = RunConfig.from_dict(runs[0])
    assert config.system.kappa == pytest.approx(2.0 * math.pi * 2.81e6)


def test_output_dir_from_environment(monkeypatch: pytest.MonkeyPatch) -> None:
    """Test the output directory defaults to the environment variable."""
    monkeypatch.setenv(OUTPUT_ENV, "/tmp/twotone-results")
    assert OutputSection().dir == "/tmp/twotone-results"
    monkeypatch.delenv(OUTPUT_ENV)
    assert OutputSection().dir == "twotone-out"
