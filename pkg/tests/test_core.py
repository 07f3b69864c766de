"""Tests for core module."""
import json
import logging
import math
import tempfile
from pathlib import Path
from typing import Any, Dict

import numpy as np
import pytest  # type: ignore

from twotone import core, dynamics
from twotone.config import RunConfig, resolve_config
from twotone.core import Runner, load_points
from twotone.errors import ConfigError, UnstableSpectrumError

SYSTEM = {"kappa": 1.0, "gamma_m": 0.01, "cooperativity": 2.0}


def _runner(tmpdir: str, data: Dict[str, Any]) -> Runner:
    data = dict(data)
    data.setdefault("output", {"dir": tmpdir})
    return Runner(RunConfig.from_dict(data), max_workers=2, show_progress=False)


def test_load_points() -> None:
    """Test reading a scattered point list."""
    with tempfile.TemporaryDirectory() as tmpdir:
        path = Path(tmpdir) / "points.csv"
        path.write_text(
            "# measured set points\ndelta_m_norm,delta_c_norm\n-4.0,0.5\n3.0,-0.25\n",
            encoding="utf-8",
        )
        points = load_points(path)
        np.testing.assert_array_equal(points, [[-4.0, 0.5], [3.0, -0.25]])


def test_load_points_invalid() -> None:
    """Test malformed point lists are rejected."""
    with tempfile.TemporaryDirectory() as tmpdir:
        tmppath = Path(tmpdir)
        contents = {
            "columns.csv": "dm,dc\n1,2\n",
            "empty.csv": "delta_m_norm,delta_c_norm\n",
            "text.csv": "delta_m_norm,delta_c_norm\n1,abc\n",
            "nan.csv": "delta_m_norm,delta_c_norm\n1,nan\n",
        }
        for name, text in contents.items():
            (tmppath / name).write_text(text, encoding="utf-8")
            with pytest.raises(ConfigError):
                load_points(tmppath / name)
        with pytest.raises(ConfigError):
            load_points(tmppath / "missing.csv")


def test_runner_uses_config_jobs() -> None:
    """Test the worker count falls back to the configured jobs."""
    with tempfile.TemporaryDirectory() as tmpdir:
        config = RunConfig.from_dict({"task": "map", "jobs": 3, "output": {"dir": tmpdir}})
        assert Runner(config, show_progress=False).max_workers == 3


def test_run_map_with_quantities() -> None:
    """Test a small map with power and frequency-shift layers."""
    with tempfile.TemporaryDirectory() as tmpdir:
        runner = _runner(
            tmpdir,
            {
                "task": "map",
                "system": SYSTEM,
                "noise": {"n_th": 1.0},
                "sweep": {
                    "dm_range": [-6.0, 6.0],
                    "dc_range": [-4.0, 4.0],
                    "dm_points": 13,
                    "dc_points": 9,
                    "quantities": ["margin", "power", "delta_eff"],
                },
            },
        )
        report = runner.run()
        assert report.exit_code == 0
        assert report.summary["cells"] == 117
        assert report.summary["errors"] == 0
        assert report.summary["closed_form_corridor"] == pytest.approx(2.0 - math.sqrt(3.0))

        payload = json.loads((Path(tmpdir) / "stability_map.json").read_text(encoding="utf-8"))
        assert "power_db" in payload["columns"]
        assert "delta_eff" in payload["columns"]
        assert payload["shape"] == [13, 9]
        assert len(payload["rows"]) == 117
        assert (Path(tmpdir) / "stability_map.csv").exists()


@pytest.mark.parametrize("artifact", ["stability_map.json", "stability_map.csv"])
def test_rerun_map_from_artifact(artifact: str) -> None:
    """Test an artifact's embedded config reproduces the same map."""
    with tempfile.TemporaryDirectory() as tmpdir:
        first_dir = Path(tmpdir) / "first"
        second_dir = Path(tmpdir) / "second"
        data = {
            "task": "map",
            "system": SYSTEM,
            "sweep": {"dm_range": [-6.0, 6.0], "dc_range": [-2.0, 2.0], "dm_points": 9},
            "output": {"dir": str(first_dir)},
        }
        Runner(RunConfig.from_dict(data), max_workers=2, show_progress=False).run()

        config = resolve_config(first_dir / artifact, {"output": {"dir": str(second_dir)}})
        assert config.sweep.dm_points == 9
        report = Runner(config, max_workers=2, show_progress=False).run()
        assert report.exit_code == 0

        first = json.loads((first_dir / "stability_map.json").read_text("utf-8"))
        second = json.loads((second_dir / "stability_map.json").read_text("utf-8"))
        assert second["rows"] == first["rows"]
        assert second["config"]["sweep"] == first["config"]["sweep"]
        assert second["config"]["output"]["dir"] == str(second_dir)


def test_run_map_with_points_file() -> None:
    """Test scattered points are evaluated and rasterized onto the grid."""
    with tempfile.TemporaryDirectory() as tmpdir:
        points = Path(tmpdir) / "points.csv"
        points.write_text("delta_m_norm,delta_c_norm\n-4.0,0.5\n4.0,0.5\n", encoding="utf-8")
        runner = _runner(
            tmpdir,
            {
                "task": "map",
                "system": SYSTEM,
                "sweep": {
                    "dm_range": [-6.0, 6.0],
                    "dc_range": [-1.0, 1.0],
                    "dm_points": 5,
                    "dc_points": 5,
                    "points_file": str(points),
                },
                "output": {"dir": tmpdir, "formats": ["json"]},
            },
        )
        report = runner.run()
        assert report.exit_code == 0
        scattered = json.loads((Path(tmpdir) / "scattered_points.json").read_text("utf-8"))
        assert len(scattered["rows"]) == 2
        assert not (Path(tmpdir) / "stability_map.csv").exists()


def test_run_contour() -> None:
    """Test threshold contours and corridor widths per cooperativity."""
    with tempfile.TemporaryDirectory() as tmpdir:
        runner = _runner(
            tmpdir,
            {"task": "contour", "contour": {"cooperativities": [0.5, 2.0], "dc_points": 401}},
        )
        report = runner.run()
        corridor = report.summary["stable_corridor"]
        assert corridor["2"] == pytest.approx(2.0 - math.sqrt(3.0))
        assert math.isinf(corridor["0.5"])
        assert report.summary["stable_corridor_large_c"]["2"] == pytest.approx(0.25)

        payload = json.loads((Path(tmpdir) / "threshold_contour.json").read_text("utf-8"))
        assert payload["rows"]
        assert all(row[0] == 2.0 for row in payload["rows"])


def test_run_spectrum() -> None:
    """Test the spectrum task at a stable point."""
    with tempfile.TemporaryDirectory() as tmpdir:
        runner = _runner(
            tmpdir,
            {
                "task": "spectrum",
                "system": SYSTEM,
                "drive": {"delta_c_norm": 0.5, "delta_m_norm": -4.0},
                "noise": {"n_th": 1.0},
            },
        )
        report = runner.run()
        summary = report.summary
        assert summary["margin"] < 0
        assert summary["sideband_power_exact"] > 0
        assert "frequency_shift" in summary
        assert "power_db" in summary

        payload = json.loads((Path(tmpdir) / "spectrum.json").read_text(encoding="utf-8"))
        assert payload["columns"][-1] == "psd_floor"
        assert payload["config"]["task"] == "spectrum"


def test_run_spectrum_unstable() -> None:
    """Test the spectrum task refuses an unstable point."""
    with tempfile.TemporaryDirectory() as tmpdir:
        runner = _runner(
            tmpdir,
            {
                "task": "spectrum",
                "system": SYSTEM,
                "drive": {"delta_c_norm": 1.0, "delta_m_norm": 1.0},
            },
        )
        with pytest.raises(UnstableSpectrumError):
            runner.run()


def test_run_simulate_stable() -> None:
    """Test exact trajectories at a stable point with covariance summary."""
    with tempfile.TemporaryDirectory() as tmpdir:
        runner = _runner(
            tmpdir,
            {
                "task": "simulate",
                "seed": 5,
                "system": SYSTEM,
                "drive": {"delta_c_norm": 0.5, "delta_m_norm": -4.0},
                "noise": {"n_th": 1.0},
                "simulate": {"scheme": "exact_ou", "dt": 0.5, "duration": 200.0, "seeds": 2},
            },
        )
        report = runner.run()
        assert report.summary["trajectories"] == 2
        assert report.summary["diverged"] == 0
        assert report.summary["expected_rate"] < 0
        assert report.summary["covariance_trace"] > 0
        assert (Path(tmpdir) / "trajectory_seed5.csv").exists()
        sidecar = json.loads((Path(tmpdir) / "trajectory_seed6.json").read_text("utf-8"))
        assert sidecar["seed"] == 6
        assert sidecar["scheme"] == "exact_ou"


def test_run_simulate_interrupted(monkeypatch: pytest.MonkeyPatch) -> None:
    """Test an interrupted ensemble is reported as partial with a marker file."""
    simulate = dynamics.simulate

    def interrupt_seed_6(*args: Any, **kwargs: Any) -> Any:
        if args[5] == 6:
            raise KeyboardInterrupt
        return simulate(*args, **kwargs)

    monkeypatch.setattr(dynamics, "simulate", interrupt_seed_6)
    with tempfile.TemporaryDirectory() as tmpdir:
        config = RunConfig.from_dict(
            {
                "task": "simulate",
                "seed": 5,
                "system": SYSTEM,
                "drive": {"delta_c_norm": 0.5, "delta_m_norm": -4.0},
                "simulate": {"scheme": "exact_ou", "dt": 0.5, "duration": 20.0, "seeds": 3},
                "output": {"dir": tmpdir},
            }
        )
        report = Runner(config, max_workers=1, show_progress=False).run()
        assert report.partial
        assert report.exit_code == 3
        assert report.summary["trajectories"] < 3
        assert (Path(tmpdir) / "trajectories.TRUNCATED").exists()
        assert not (Path(tmpdir) / "trajectory_seed6.csv").exists()


def test_run_simulate_rejects_large_euler_step() -> None:
    """Test an Euler-Maruyama step above the limit is refused."""
    with tempfile.TemporaryDirectory() as tmpdir:
        runner = _runner(
            tmpdir,
            {"task": "simulate", "system": SYSTEM, "simulate": {"dt": 1.0, "duration": 10.0}},
        )
        with pytest.raises(ConfigError):
            runner.run()


def test_reproduce_fig3() -> None:
    """Test reproducing the threshold-contour recipe."""
    with tempfile.TemporaryDirectory() as tmpdir:
        runner = _runner(tmpdir, {"task": "reproduce", "target": "fig3"})
        report = runner.run()
        assert report.target == "fig3"
        assert report.output_dir == Path(tmpdir) / "fig3"
        corridor = report.summary["contours"]["stable_corridor"]
        assert corridor["14"] == pytest.approx(14.0 - math.sqrt(195.0))
        assert corridor["14"] == pytest.approx(0.0358, abs=1e-4)
        assert (Path(tmpdir) / "fig3" / "contours" / "threshold_contour.csv").exists()
        recipe = json.loads((Path(tmpdir) / "fig3" / "recipe.json").read_text("utf-8"))
        assert recipe["runs"] == ["contours"]


def test_reproduce_keeps_pinned_seeds(
    monkeypatch: pytest.MonkeyPatch, caplog: pytest.LogCaptureFixture
) -> None:
    """Test a recipe's pinned seed wins over the run seed; unpinned runs take it."""
    simulate = {
        "task": "simulate",
        "system": SYSTEM,
        "drive": {"delta_c_norm": 0.5, "delta_m_norm": -4.0},
        "simulate": {"scheme": "exact_ou", "dt": 0.5, "duration": 10.0, "seeds": 1},
    }
    runs = [dict(simulate, name="pinned", seed=3), dict(simulate, name="free")]
    monkeypatch.setattr(core, "load_recipe", lambda target: ("seeded runs", runs))
    with tempfile.TemporaryDirectory() as tmpdir, caplog.at_level(logging.INFO):
        report = _runner(tmpdir, {"task": "reproduce", "target": "fig6", "seed": 9}).run()
        assert report.exit_code == 0
        assert (Path(tmpdir) / "fig6" / "pinned" / "trajectory_seed3.csv").exists()
        assert (Path(tmpdir) / "fig6" / "free" / "trajectory_seed9.csv").exists()
        assert any("pinned seed 3" in r.getMessage() for r in caplog.records)


def test_plots_written_when_requested() -> None:
    """Test SVG figures for the map and contour tasks."""
    pytest.importorskip("matplotlib")
    with tempfile.TemporaryDirectory() as tmpdir:
        _runner(
            tmpdir,
            {
                "task": "map",
                "system": SYSTEM,
                "sweep": {"dm_range": [-2.0, 2.0], "dc_range": [-2.0, 2.0], "dm_points": 9},
                "output": {"dir": tmpdir, "plot": True},
            },
        ).run()
        assert (Path(tmpdir) / "margin.svg").exists()

        _runner(
            tmpdir,
            {
                "task": "contour",
                "contour": {"cooperativities": [2.0], "dc_points": 201},
                "output": {"dir": tmpdir, "plot": True},
            },
        ).run()
        assert (Path(tmpdir) / "threshold_contour.svg").exists()
