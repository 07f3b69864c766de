"""Task orchestration for twotone.

The Runner turns a resolved RunConfig into artifacts on disk and a RunReport.
"""
import csv
import logging
import math
from pathlib import Path
from typing import Any, Dict, List, Optional, Tuple

import numpy as np

from twotone import plotting
from twotone.config import (
    RunConfig,
    Task,
    load_recipe,
    merge,
)
from twotone.dynamics import (
    Scheme,
    brute_force_nonrwa,
    collect_trajectories,
    ensemble_growth_rate,
    floquet_rate,
    run_ensemble,
    sample_covariance,
    stationary_covariance,
    step_limit,
)
from twotone.errors import ConfigError, NoGrowthDetected, UnstableSpectrumError
from twotone.model import DriveConfig, DriveMode, SystemParams
from twotone.report import ArtifactWriter, RunReport
from twotone.spectra import (
    NoiseModel,
    effective_frequency_shift,
    output_spectrum,
    sideband_power_components,
    sideband_power_exact,
    to_db,
)
from twotone.stability import (
    MapGrid,
    StabilityMap,
    analyze,
    margin_contours,
    stability_map,
    stable_corridor,
    stable_corridor_approx,
    threshold_contour,
)
from twotone.sweep import default_workers, progress_display, rasterize_scattered, run_indexed

logger = logging.getLogger(__name__)

POINT_COLUMNS = ("delta_m_norm", "delta_c_norm")


def load_points(path: Path) -> np.ndarray:
    """Read a scattered (Δ̃m, Δ̃c) point list.

    The file is CSV with a header naming ``delta_m_norm`` and ``delta_c_norm``;
    lines starting with ``#`` are skipped.

    Returns:
        (n, 2) array of (Δ̃m, Δ̃c)
    """
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"Points file does not exist: {path}")
    with open(path, "r", encoding="utf-8", newline="") as f:
        reader = csv.DictReader(line for line in f if not line.startswith("#"))
        if reader.fieldnames is None or not set(POINT_COLUMNS) <= set(reader.fieldnames):
            raise ConfigError(f"{path} needs columns {', '.join(POINT_COLUMNS)}")
        try:
            points = [[float(row[c]) for c in POINT_COLUMNS] for row in reader]
        except (TypeError, ValueError) as e:
            raise ConfigError(f"Bad value in {path}: {e}") from e
    if not points:
        raise ConfigError(f"{path} contains no points")
    array = np.asarray(points)
    if not np.all(np.isfinite(array)):
        raise ConfigError(f"{path} contains non-finite points")
    return array


def _to_display(smap: StabilityMap, line: np.ndarray) -> np.ndarray:
    """Convert a (Δ̃c, Δ̃m) polyline to the map's display units."""
    if smap.grid.axis_units != "kappa":
        return line
    params = smap.params
    return np.column_stack((line[:, 0] / 2.0, line[:, 1] * (params.gamma_m / 2.0) / params.kappa))


def _default_dc_max(cooperativities: List[float]) -> float:
    largest = max(cooperativities)
    if largest < 1.0:
        return 2.0
    return max(2.0, 1.05 * (largest + math.sqrt(largest * largest - 1.0)))


class Runner:
    """Runs one configured task and writes its artifacts.

    A facade over the analysis modules: it resolves physical parameters,
    dispatches grids to worker threads and collects summaries.
    """

    def __init__(
        self,
        config: RunConfig,
        max_workers: Optional[int] = None,
        show_progress: bool = True,
    ) -> None:
        """Initialize the runner.

        Args:
            config: Resolved configuration
            max_workers: Worker threads (None = config.jobs or auto-detect)
            show_progress: Render progress of long sweeps
        """
        self.config = config
        if max_workers is None:
            max_workers = config.jobs or default_workers()
        self.max_workers = max_workers
        self.show_progress = show_progress
        self.output_dir = Path(config.output.dir)

        logger.info(f"Initialized {config.task.value} run writing to {self.output_dir}")
        logger.debug(f"Using {max_workers} worker threads")

    def _writer(self) -> ArtifactWriter:
        return ArtifactWriter(self.output_dir, self.config.output.formats, self.config.to_dict())

    def run(self) -> RunReport:
        """Execute the configured task.

        Returns:
            RunReport with artifacts and summary
        """
        handlers = {
            Task.MAP: self.run_map,
            Task.CONTOUR: self.run_contour,
            Task.SPECTRUM: self.run_spectrum,
            Task.SIMULATE: self.run_simulate,
            Task.REPRODUCE: self.run_reproduce,
        }
        report = handlers[self.config.task]()
        logger.info(f"{self.config.task.value} complete: {len(report.artifacts)} artifacts written")
        return report

    def _map_cells(self, smap: StabilityMap, func: Any, stable_only: bool) -> List[Any]:
        """Evaluate ``func(drive)`` per map cell by row; None where it fails or is skipped."""
        n_dm, n_dc = smap.grid.shape
        params = smap.params
        skip = smap.errors != ""
        if stable_only:
            skip = skip | smap.unstable_mask | (smap.margin >= 0)

        def evaluate_row(i: int) -> List[Any]:
            row = []
            for j in range(n_dc):
                if skip[i, j]:
                    row.append(None)
                    continue
                try:
                    row.append(func(smap.grid.drive_at(params, i, j)))
                except (ArithmeticError, ValueError, RuntimeError) as e:
                    logger.debug(f"Cell ({i}, {j}) skipped: {e}")
                    row.append(None)
            return row

        outcome = run_indexed(evaluate_row, n_dm, max_workers=self.max_workers)
        if outcome.truncated:
            smap.truncated = True
        return outcome.results

    def _power_db(self, smap: StabilityMap, noise: NoiseModel) -> np.ndarray:
        params = smap.params
        ref_dm, ref_dc = self.config.spectrum.reference
        reference = DriveConfig.from_normalized(params, ref_dc, ref_dm)
        p0 = sideband_power_exact(params, reference, noise).total
        if p0 <= 0:
            raise ConfigError("Reference sideband power is zero; set noise.n_th or noise.n_ba")

        rows = self._map_cells(
            smap, lambda drive: sideband_power_exact(params, drive, noise).total, stable_only=True
        )
        power = np.full(smap.grid.shape, np.nan)
        for i, row in enumerate(rows):
            for j, value in enumerate(row or []):
                if value is not None and value > 0:
                    power[i, j] = to_db(value / p0)
        return power

    def _frequency_shifts(self, smap: StabilityMap) -> Tuple[np.ndarray, np.ndarray]:
        params = smap.params
        rows = self._map_cells(
            smap,
            lambda drive: effective_frequency_shift(params, drive, warn_unstable=False),
            stable_only=False,
        )
        reduced = np.full(smap.grid.shape, np.nan)
        full = np.full(smap.grid.shape, np.nan)
        for i, row in enumerate(rows):
            for j, shift in enumerate(row or []):
                if shift is not None:
                    reduced[i, j] = shift.delta_eff
                    full[i, j] = shift.delta_eff_full
        return reduced, full

    def _scattered_margins(
        self, params: SystemParams, smap: StabilityMap, writer: ArtifactWriter
    ) -> np.ndarray:
        points = load_points(Path(self.config.sweep.points_file))
        logger.info(f"Evaluating {len(points)} scattered points")

        def evaluate(k: int) -> float:
            drive = DriveConfig.from_normalized(params, points[k, 1], points[k, 0])
            return analyze(params, drive, tol=self.config.sweep.tol).margin

        outcome = run_indexed(evaluate, len(points), max_workers=self.max_workers, label="points")
        margins = np.array([np.nan if m is None else m for m in outcome.results], dtype=float)
        valid = np.isfinite(margins)
        if not valid.any():
            raise ConfigError("No scattered point could be evaluated")
        writer.write_table(
            "scattered_points",
            ["delta_m_norm", "delta_c_norm", "margin"],
            [[float(p[0]), float(p[1]), float(m)] for p, m in zip(points, margins)],
        )
        if outcome.partial:
            smap.truncated = smap.truncated or outcome.truncated
        return rasterize_scattered(
            points[valid], margins[valid], smap.grid.delta_m_norm, smap.grid.delta_c_norm
        )

    def run_map(self) -> RunReport:
        """Full-model stability map with optional power and frequency maps."""
        sweep = self.config.sweep
        params, _, noise = self.config.physical()
        grid = MapGrid.linspace(
            params,
            sweep.dm_range,
            sweep.dc_range,
            sweep.dm_points,
            sweep.dc_points,
            sweep.axis_units,
        )
        writer = self._writer()

        with progress_display(self.show_progress, "Stability map") as callback:
            smap = stability_map(
                params,
                grid,
                tol=sweep.tol,
                max_workers=self.max_workers,
                progress_callback=callback,
            )

        if "power" in sweep.quantities:
            logger.info("Computing sideband power map")
            smap.extra["power_db"] = self._power_db(smap, noise)
        if "delta_eff" in sweep.quantities:
            logger.info("Computing effective frequency map")
            smap.extra["delta_eff"], smap.extra["delta_eff_full"] = self._frequency_shifts(smap)
        if sweep.points_file:
            smap.extra["scattered_margin"] = self._scattered_margins(params, smap, writer)

        contours = margin_contours(smap)
        summary = smap.summary()
        summary["unstable_classes"] = smap.unstable_classes()
        writer.write_table(
            "stability_map",
            smap.columns(),
            smap.rows(),
            extra={
                "params": params.to_dict(),
                "axis_units": grid.axis_units,
                "shape": list(grid.shape),
                "metadata": smap.metadata,
                "summary": summary,
                "margin_contours": [line.tolist() for line in contours],
                "threshold_contour": [
                    b.tolist() for b in threshold_contour(params.cooperativity, grid.delta_c_norm)
                ],
            },
        )
        if smap.truncated:
            writer.mark_truncated("stability_map", "sweep interrupted before every row finished")

        if self.config.output.plot:
            self._plot_map(smap, contours)

        return RunReport(
            task=self.config.task.value,
            output_dir=self.output_dir,
            artifacts=writer.written,
            summary=summary,
            partial=smap.partial,
        )

    def _plot_map(self, smap: StabilityMap, contours: List[np.ndarray]) -> None:
        dm_axis, dc_axis = smap.grid.display_axes(smap.params)
        if smap.grid.axis_units == "kappa":
            xlabel, ylabel = "Δc/κ", "Δm/κ"
        else:
            xlabel, ylabel = "Δ̃c", "Δ̃m"
        lines = [_to_display(smap, line) for line in contours]
        panels = {"margin": (smap.margin, "max Re λ")}
        if "power_db" in smap.extra:
            panels["power_db"] = (smap.extra["power_db"], "P/P₀ (dB)")
        if "delta_eff" in smap.extra:
            panels["delta_eff"] = (smap.extra["delta_eff"], "Δeff")
        for name, (values, label) in panels.items():
            plotting.plot_heatmap(
                self.output_dir / f"{name}.svg",
                dc_axis,
                dm_axis,
                values,
                xlabel,
                ylabel,
                title=f"C = {smap.params.cooperativity:.3g}",
                colorbar_label=label,
                contours=lines,
            )

    def run_contour(self) -> RunReport:
        """Analytic threshold contours for each configured cooperativity."""
        contour = self.config.contour
        dc_max = contour.dc_max or _default_dc_max(contour.cooperativities)
        grid = np.linspace(-dc_max, dc_max, contour.dc_points)
        writer = self._writer()

        rows: List[List[float]] = []
        curves: Dict[str, List[np.ndarray]] = {}
        corridors: Dict[str, float] = {}
        corridors_approx: Dict[str, float] = {}
        for cooperativity in contour.cooperativities:
            branches = threshold_contour(cooperativity, grid)
            if not branches:
                logger.info(f"C = {cooperativity:g} < 1: no threshold contour")
            for index, branch in enumerate(branches):
                rows.extend([cooperativity, index, float(dc), float(dm)] for dc, dm in branch)
            label = f"C = {cooperativity:g}"
            curves[label] = branches
            corridors[f"{cooperativity:g}"] = stable_corridor(cooperativity)
            corridors_approx[f"{cooperativity:g}"] = stable_corridor_approx(cooperativity)

        summary: Dict[str, Any] = {
            "cooperativities": contour.cooperativities,
            "stable_corridor": corridors,
            "stable_corridor_large_c": corridors_approx,
        }
        writer.write_table(
            "threshold_contour",
            ["cooperativity", "branch", "delta_c_norm", "delta_m_norm"],
            rows,
            extra={"summary": summary},
        )
        if self.config.output.plot:
            plotting.plot_contours(self.output_dir / "threshold_contour.svg", curves)

        return RunReport(
            task=self.config.task.value,
            output_dir=self.output_dir,
            artifacts=writer.written,
            summary=summary,
        )

    def run_spectrum(self) -> RunReport:
        """Output spectrum, sideband power and frequency shift at one point.

        Raises:
            UnstableSpectrumError: If the configured point is not stable
        """
        spectrum = self.config.spectrum
        params, drive, noise = self.config.physical()
        omega_grid = None
        if not spectrum.adaptive:
            omega_grid = np.linspace(spectrum.omega_min, spectrum.omega_max, spectrum.points)

        spec = output_spectrum(params, drive, noise, omega_grid, tol=self.config.sweep.tol)
        exact = sideband_power_exact(params, drive, noise, tol=self.config.sweep.tol)
        summary: Dict[str, Any] = {
            "margin": spec.margin,
            "sideband_power": spec.features["total_power"],
            "sideband_power_exact": exact.total,
            "components": sideband_power_components(spec),
            "components_exact": exact.to_dict(),
            "feature_truncated": spec.features.get("truncated", False),
        }
        for key in ("peaks", "gamma_eff", "delta_eff", "fit"):
            if key in spec.features:
                summary[key] = spec.features[key]

        ref_dm, ref_dc = spectrum.reference
        try:
            reference = DriveConfig.from_normalized(params, ref_dc, ref_dm, drive.mode)
            p0 = sideband_power_exact(params, reference, noise).total
            if p0 > 0:
                summary["power_db"] = float(to_db(exact.total / p0))
        except (UnstableSpectrumError, ValueError) as e:
            logger.warning(f"Reference power at {spectrum.reference} unavailable: {e}")

        if drive.mode is DriveMode.TWO_TONE_BALANCED:
            summary["frequency_shift"] = effective_frequency_shift(params, drive).to_dict()

        writer = self._writer()
        writer.write_table(
            "spectrum",
            spec.columns() + ["psd_floor"],
            [row + [float(f)] for row, f in zip(spec.rows(), spec.psd_floor)],
            extra={
                "params": params.to_dict(),
                "drive": drive.to_dict(),
                "noise": noise.to_dict(),
                "summary": summary,
            },
        )
        if self.config.output.plot:
            plotting.plot_lines(
                self.output_dir / "spectrum.svg",
                {
                    "total": (spec.omega_grid, spec.psd_total),
                    "floor": (spec.omega_grid, spec.psd_floor),
                },
                "ω",
                "S(ω)",
                logy=True,
            )

        return RunReport(
            task=self.config.task.value,
            output_dir=self.output_dir,
            artifacts=writer.written,
            summary=summary,
        )

    def _default_duration(self, margin: float, kappa: float) -> float:
        if abs(margin) <= self.config.sweep.tol * kappa:
            raise ConfigError("Point is marginal; give simulate.duration explicitly")
        if margin > 0:
            return 25.0 / margin
        return 10.0 / abs(margin)

    def run_simulate(self) -> RunReport:
        """Seeded trajectories with growth-rate or covariance checks."""
        sim = self.config.simulate
        params, drive, noise = self.config.physical()
        seeds = [self.config.seed + k for k in range(sim.seeds)]

        if sim.nonrwa:
            if params.omega_m is None:
                raise ConfigError("simulate.nonrwa requires system.omega_m")
            dt = sim.dt or 0.01 / params.omega_m
            try:
                expected = floquet_rate(params, drive, dt)
            except ValueError as e:
                raise ConfigError(f"Invalid non-RWA run: {e}") from e
        else:
            dt = sim.dt or step_limit(params, drive)
            if sim.dt is None and sim.scheme == Scheme.EXACT_OU.value:
                dt *= 10.0
            elif sim.scheme == Scheme.EULER_MARUYAMA.value and dt > step_limit(params, drive):
                limit = step_limit(params, drive)
                raise ConfigError(
                    f"simulate.dt = {dt:.3g} exceeds the Euler-Maruyama limit {limit:.3g}"
                )
            expected = analyze(params, drive, tol=self.config.sweep.tol).margin
        duration = sim.duration or self._default_duration(expected, params.kappa)
        logger.info(
            f"Simulating {len(seeds)} trajectories, dt = {dt:.4g}, duration = {duration:.4g}"
        )

        with progress_display(self.show_progress, "Trajectories") as callback:
            if sim.nonrwa:
                outcome = run_indexed(
                    lambda k: brute_force_nonrwa(
                        params,
                        drive,
                        dt,
                        duration,
                        seeds[k],
                        noise=noise,
                        x0=sim.x0,
                        divergence_factor=sim.divergence_factor,
                    ),
                    len(seeds),
                    max_workers=self.max_workers,
                    progress_callback=callback,
                    label="trajectories",
                )
                ensemble = collect_trajectories(outcome, seeds)
            else:
                ensemble = run_ensemble(
                    params,
                    drive,
                    noise,
                    dt,
                    duration,
                    seeds,
                    scheme=sim.scheme,
                    max_workers=self.max_workers,
                    progress_callback=callback,
                    x0=sim.x0,
                    divergence_factor=sim.divergence_factor,
                    decimation=sim.decimation,
                )

        records = ensemble.records
        writer = self._writer()
        if ensemble.truncated:
            writer.mark_truncated(
                "trajectories",
                f"interrupted after {len(records)} of {len(seeds)} trajectories",
            )
        for record in records:
            name = f"trajectory_seed{record.seed}"
            writer.write_csv(name, record.columns(), record.rows())
            writer.write_json(name, record.sidecar())

        summary: Dict[str, Any] = {
            "trajectories": len(records),
            "dt": dt,
            "duration": duration,
            "diverged": sum(1 for r in records if r.diverged),
            "expected_rate": expected,
        }
        if expected > 0:
            try:
                growth = ensemble_growth_rate(records)
                summary["growth_rate"] = growth.mean
                summary["growth_rate_stderr"] = growth.standard_error
                summary["non_growing"] = growth.failures
            except NoGrowthDetected as e:
                logger.warning(f"Growth rate unavailable: {e}")
        elif not sim.nonrwa:
            expected_cov = stationary_covariance(params, drive, noise)
            traces = [
                float(np.trace(sample_covariance(r, burn_in=r.samples // 10)))
                for r in records
                if r.samples >= 20
            ]
            if traces:
                summary["covariance_trace"] = float(np.mean(traces))
                summary["covariance_trace_expected"] = float(np.trace(expected_cov))

        if self.config.output.plot and records:
            plotting.plot_lines(
                self.output_dir / "amplitude.svg",
                {f"seed {r.seed}": (r.times, r.amplitude()) for r in records},
                "t",
                "RMS amplitude",
                logy=True,
            )

        return RunReport(
            task=self.config.task.value,
            output_dir=self.output_dir,
            artifacts=writer.written,
            summary=summary,
            partial=ensemble.truncated,
        )

    def run_reproduce(self) -> RunReport:
        """Run every pinned run of a reproduction recipe."""
        target = self.config.target
        description, runs = load_recipe(target)
        base_dir = self.output_dir / target.value
        logger.info(f"Reproducing {target.value}: {description}")

        artifacts: List[Path] = []
        summary: Dict[str, Any] = {}
        partial = False
        names = []
        for index, raw in enumerate(runs):
            if raw.get("task") == Task.REPRODUCE.value:
                raise ConfigError(f"Recipe {target.value} nests another reproduce run")
            name = str(raw.get("name") or f"run{index}")
            names.append(name)
            seed = self.config.seed
            if "seed" in raw:
                seed = raw["seed"]
                if seed != self.config.seed:
                    logger.info(
                        f"Run {name} keeps its pinned seed {seed} instead of {self.config.seed}"
                    )
            overrides = {
                "seed": seed,
                "jobs": self.config.jobs,
                "output": {
                    "dir": str(base_dir / name),
                    "formats": self.config.output.formats,
                    "plot": self.config.output.plot or None,
                },
            }
            sub_config = RunConfig.from_dict(merge(raw, overrides))
            report = Runner(sub_config, self.max_workers, self.show_progress).run()
            artifacts.extend(report.artifacts)
            summary[name] = report.summary
            partial = partial or report.partial

        writer = ArtifactWriter(base_dir, self.config.output.formats, self.config.to_dict())
        writer.write_json(
            "recipe", {"target": target.value, "description": description, "runs": names}
        )
        return RunReport(
            task=self.config.task.value,
            output_dir=base_dir,
            artifacts=artifacts + writer.written,
            summary=summary,
            partial=partial,
            target=target.value,
        )
