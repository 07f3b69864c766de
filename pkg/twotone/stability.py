"""Eigenvalue stability analysis, threshold contours and stability maps."""
import logging
import math
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence, Tuple, Union

import contourpy
import numpy as np
from scipy import linalg

from twotone.errors import EigenSolverError, NumericalError
from twotone.model import (
    DriveConfig,
    DriveMode,
    DynamicalMatrix,
    SystemParams,
    build_dynamical_matrix,
    effective_eigenvalues,
    static_self_energy,
)
from twotone.report import dumps
from twotone.sweep import ProgressCallback, run_indexed

logger = logging.getLogger(__name__)

DEFAULT_TOL = 1e-9

MAP_COLUMNS = ("delta_m_norm", "delta_c_norm", "margin", "class", "offending_im")


class FixedPointClass(str, Enum):
    """Fixed-point taxonomy of the linearized dynamics."""

    STABLE_SPIRAL = "stable_spiral"
    STABLE_NODE = "stable_node"
    SADDLE = "saddle"
    UNSTABLE_SPIRAL = "unstable_spiral"
    UNSTABLE_NODE = "unstable_node"
    MARGINAL = "marginal"


UNSTABLE_CLASSES = frozenset(
    {FixedPointClass.SADDLE, FixedPointClass.UNSTABLE_SPIRAL, FixedPointClass.UNSTABLE_NODE}
)

ERROR_CLASS = "error"


@dataclass
class StabilityReport:
    """Eigenvalues and fixed-point class of one dynamical matrix."""

    eigenvalues: np.ndarray
    classification: FixedPointClass
    margin: float
    offending_im: float

    @property
    def offending_eigenvalue(self) -> complex:
        return complex(self.eigenvalues[0])

    @property
    def is_unstable(self) -> bool:
        return self.classification in UNSTABLE_CLASSES

    def to_dict(self) -> Dict[str, Any]:
        return {
            "eigenvalues": [[float(e.real), float(e.imag)] for e in self.eigenvalues],
            "class": self.classification.value,
            "margin": self.margin,
            "offending_im": self.offending_im,
        }


def _eigenvalues(entries: np.ndarray) -> np.ndarray:
    try:
        eigs = linalg.eigvals(entries)
    except (linalg.LinAlgError, ValueError) as e:
        logger.debug(f"Real eigensolver failed ({e}), falling back to complex Schur form")
        try:
            schur_form, _ = linalg.schur(entries.astype(complex), output="complex")
        except (linalg.LinAlgError, ValueError) as exc:
            raise EigenSolverError(f"Eigenvalue computation did not converge: {exc}") from exc
        eigs = np.diag(schur_form)
    if not np.all(np.isfinite(eigs)):
        raise EigenSolverError("Eigenvalue computation returned non-finite values")
    return eigs


def classify(
    matrix: Union[DynamicalMatrix, np.ndarray], tol: float = DEFAULT_TOL
) -> StabilityReport:
    """Classify the fixed point of dx/dt = M x.

    Eigenvalues are sorted by descending real part; on a tie the one with the
    smaller |Im| (the slow branch) comes first. Tolerances scale with κ.

    Args:
        matrix: DynamicalMatrix or raw 4x4 array
        tol: Relative tolerance for marginality and node/spiral decisions

    Returns:
        StabilityReport

    Raises:
        EigenSolverError: If the eigenvalues cannot be computed
    """
    if tol <= 0:
        raise ValueError(f"Tolerance must be positive, got {tol}")
    if isinstance(matrix, DynamicalMatrix):
        entries = matrix.entries
        kappa = matrix.params.kappa
    else:
        entries = np.asarray(matrix, dtype=float)
        kappa = -2.0 * float(entries[0, 0]) if entries.shape == (4, 4) else 0.0
    if entries.shape != (4, 4):
        raise ValueError(f"Expected a 4x4 matrix, got {entries.shape}")
    if not np.all(np.isfinite(entries)):
        raise ValueError("Dynamical matrix has non-finite entries")
    scale = kappa if kappa > 0 else max(float(np.max(np.abs(entries))), 1.0)

    eigs = _eigenvalues(entries)
    order = np.lexsort((-eigs.imag, np.abs(eigs.imag), -eigs.real))
    eigs = eigs[order]

    offending = eigs[0]
    margin = float(offending.real)
    offending_im = float(offending.imag)
    band = tol * scale
    is_real = abs(offending_im) < band

    if abs(margin) < band:
        cls = FixedPointClass.MARGINAL
    elif margin < 0:
        cls = FixedPointClass.STABLE_NODE if is_real else FixedPointClass.STABLE_SPIRAL
    elif is_real:
        cls = FixedPointClass.SADDLE if eigs[1].real < 0 else FixedPointClass.UNSTABLE_NODE
    else:
        cls = FixedPointClass.UNSTABLE_SPIRAL

    return StabilityReport(
        eigenvalues=eigs, classification=cls, margin=margin, offending_im=offending_im
    )


def analyze(params: SystemParams, drive: DriveConfig, tol: float = DEFAULT_TOL) -> StabilityReport:
    """Build the dynamical matrix and classify it."""
    return classify(build_dynamical_matrix(params, drive), tol=tol)


def normalized_threshold(cooperativity: float, delta_c_norm: Any, delta_m_norm: Any) -> Any:
    """4CΔ̃cΔ̃m - (1 + Δ̃c²)(1 + Δ̃m²); positive means unstable."""
    dc = np.asarray(delta_c_norm, dtype=float)
    dm = np.asarray(delta_m_norm, dtype=float)
    residual = 4.0 * cooperativity * dc * dm - (1.0 + dc * dc) * (1.0 + dm * dm)
    return float(residual) if residual.ndim == 0 else residual


def threshold_residual(params: SystemParams, drive: DriveConfig) -> float:
    """r = 4g²ΔmΔc - (Γm²/4 + Δm²)(κ²/4 + Δc²) in rate⁴ units."""
    _require_two_tone(drive)
    dm, dc = drive.delta_m, drive.delta_c
    return 4.0 * params.g**2 * dm * dc - (params.gamma_m**2 / 4.0 + dm * dm) * (
        params.kappa**2 / 4.0 + dc * dc
    )


def threshold_condition(params: SystemParams, drive: DriveConfig) -> float:
    """Signed instability residual in normalized form.

    Returns r / ((Γm/2)²(κ/2)²) = 4CΔ̃cΔ̃m - (1 + Δ̃c²)(1 + Δ̃m²).
    Positive means unstable according to the effective mechanical model.
    """
    _require_two_tone(drive)
    return normalized_threshold(
        params.cooperativity, drive.delta_c_norm(params), drive.delta_m_norm(params)
    )


def harmonic_frequency_squared(params: SystemParams, drive: DriveConfig) -> float:
    """Γm²/4 + Δm(Δm - 2Σ(0)), the restoring term of the damped-oscillator form.

    It vanishes exactly where :func:`threshold_condition` does.
    """
    _require_two_tone(drive)
    sigma = static_self_energy(params, drive.delta_c)
    return params.gamma_m**2 / 4.0 + drive.delta_m * (drive.delta_m - 2.0 * sigma)


def effective_margin(params: SystemParams, drive: DriveConfig) -> float:
    return effective_eigenvalues(params, drive).margin


def _require_two_tone(drive: DriveConfig) -> None:
    if drive.mode is not DriveMode.TWO_TONE_BALANCED:
        raise ValueError("Threshold condition applies to balanced two-tone driving only")


def stable_corridor(cooperativity: float) -> float:
    """Smallest unstable |Δ̃c|, C - √(C² - 1); infinite below C = 1."""
    if cooperativity < 1.0:
        return math.inf
    return cooperativity - math.sqrt(cooperativity * cooperativity - 1.0)


def stable_corridor_approx(cooperativity: float) -> float:
    """Large-C form 1/(2C) of :func:`stable_corridor`."""
    if cooperativity <= 0:
        return math.inf
    return 1.0 / (2.0 * cooperativity)


def _contour_roots(cooperativity: float, dc: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    a = 1.0 + dc * dc
    b = 2.0 * cooperativity * dc
    disc = np.sqrt(np.clip(b * b - a * a, 0.0, None))
    return (b - disc) / a, (b + disc) / a


def threshold_contour(cooperativity: float, delta_c_grid: Sequence[float]) -> List[np.ndarray]:
    """Closed threshold curves in the (Δ̃c, Δ̃m) plane.

    Solves (1 + Δ̃c²)Δ̃m² - 4CΔ̃cΔ̃m + (1 + Δ̃c²) = 0 on the grid, one branch
    per sign quadrant. The band edges C ∓ √(C² - 1) are inserted when the grid
    spans them, which closes the curve. For C = 1 each branch is the single
    point (±1, ±1); for C < 1 the result is empty.

    Args:
        cooperativity: C
        delta_c_grid: Δ̃c sample values

    Returns:
        List of (N, 2) arrays of (Δ̃c, Δ̃m) points
    """
    if cooperativity < 1.0:
        return []
    grid = np.asarray(delta_c_grid, dtype=float)
    if not np.all(np.isfinite(grid)):
        raise ValueError("Δ̃c grid must be finite")

    half_width = math.sqrt(cooperativity * cooperativity - 1.0)
    lo, hi = cooperativity - half_width, cooperativity + half_width
    branches = []
    for sign in (1.0, -1.0):
        mags = np.abs(grid[np.sign(grid) == sign])
        if mags.size == 0:
            continue
        spans = bool(mags.min() <= lo and mags.max() >= hi)
        if half_width == 0.0:
            if spans:
                branches.append(np.array([[sign, sign]]))
            continue
        inside = mags[(mags >= lo) & (mags <= hi)]
        if spans:
            inside = np.concatenate([inside, [lo, hi]])
        pts = np.unique(inside)
        if pts.size == 0:
            continue
        lower, upper = _contour_roots(cooperativity, pts)
        dc = np.concatenate([pts, pts[::-1]])
        dm = np.concatenate([lower, upper[::-1]])
        if spans:
            dc = np.append(dc, dc[0])
            dm = np.append(dm, dm[0])
        branches.append(np.column_stack((sign * dc, sign * dm)))
    return branches


@dataclass
class MapGrid:
    """Detuning grid of a stability map, stored in normalized units.

    ``axis_units`` records how the axes were specified: "normalized" for
    (Δ̃m, Δ̃c) or "kappa" for (Δm/κ, Δc/κ).
    """

    delta_m_norm: np.ndarray
    delta_c_norm: np.ndarray
    axis_units: str = "normalized"

    def __post_init__(self) -> None:
        self.delta_m_norm = np.asarray(self.delta_m_norm, dtype=float)
        self.delta_c_norm = np.asarray(self.delta_c_norm, dtype=float)
        for name, axis in (("delta_m", self.delta_m_norm), ("delta_c", self.delta_c_norm)):
            if axis.ndim != 1 or axis.size == 0:
                raise ValueError(f"{name} axis must be a non-empty 1D array")
            if not np.all(np.isfinite(axis)):
                raise ValueError(f"{name} axis must be finite")
            if axis.size > 1 and not np.all(np.diff(axis) > 0):
                raise ValueError(f"{name} axis must be strictly increasing")
        if self.axis_units not in ("normalized", "kappa"):
            raise ValueError(f"Unknown axis units '{self.axis_units}'")

    @classmethod
    def linspace(
        cls,
        params: SystemParams,
        dm_range: Tuple[float, float],
        dc_range: Tuple[float, float],
        dm_points: int,
        dc_points: int,
        axis_units: str = "normalized",
    ) -> "MapGrid":
        """Uniform grid over the given ranges in ``axis_units``."""
        dm = np.linspace(dm_range[0], dm_range[1], dm_points)
        dc = np.linspace(dc_range[0], dc_range[1], dc_points)
        if axis_units == "kappa":
            dm = dm * params.kappa / (params.gamma_m / 2.0)
            dc = dc * 2.0
        return cls(delta_m_norm=dm, delta_c_norm=dc, axis_units=axis_units)

    @property
    def shape(self) -> Tuple[int, int]:
        return (self.delta_m_norm.size, self.delta_c_norm.size)

    def display_axes(self, params: SystemParams) -> Tuple[np.ndarray, np.ndarray]:
        """Axes in the units they were specified in."""
        if self.axis_units == "kappa":
            return (
                self.delta_m_norm * (params.gamma_m / 2.0) / params.kappa,
                self.delta_c_norm / 2.0,
            )
        return self.delta_m_norm, self.delta_c_norm

    def drive_at(self, params: SystemParams, i: int, j: int) -> DriveConfig:
        return DriveConfig.from_normalized(
            params, float(self.delta_c_norm[j]), float(self.delta_m_norm[i])
        )


@dataclass
class StabilityMap:
    """Full-model stability over a (Δ̃m, Δ̃c) grid.

    Arrays are indexed ``[i_dm, j_dc]``. Cells whose evaluation failed carry
    class "error", NaN margin and a message in ``errors``.
    """

    grid: MapGrid
    params: SystemParams
    margin: np.ndarray
    classes: np.ndarray
    offending_im: np.ndarray
    errors: np.ndarray
    extra: Dict[str, np.ndarray] = field(default_factory=dict)
    metadata: Dict[str, Any] = field(default_factory=dict)
    truncated: bool = False

    @property
    def unstable_mask(self) -> np.ndarray:
        unstable = {c.value for c in UNSTABLE_CLASSES}
        return np.isin(self.classes, list(unstable))

    @property
    def error_count(self) -> int:
        return int(np.count_nonzero(self.errors != ""))

    @property
    def partial(self) -> bool:
        return self.truncated or self.error_count > 0

    def count_by_class(self) -> Dict[str, int]:
        values, counts = np.unique(self.classes, return_counts=True)
        return {str(v): int(c) for v, c in zip(values, counts)}

    def unstable_classes(self) -> List[str]:
        return sorted(set(self.classes[self.unstable_mask].tolist()))

    def narrowest_unstable_dc(self) -> float:
        """Smallest |Δ̃c| among unstable cells (inf if none)."""
        mask = self.unstable_mask
        if not mask.any():
            return math.inf
        dc = np.broadcast_to(self.grid.delta_c_norm, self.margin.shape)
        return float(np.min(np.abs(dc[mask])))

    def columns(self) -> List[str]:
        return list(MAP_COLUMNS) + sorted(self.extra) + ["error"]

    def rows(self) -> List[List[Any]]:
        names = sorted(self.extra)
        out = []
        n_dm, n_dc = self.grid.shape
        for i in range(n_dm):
            for j in range(n_dc):
                row = [
                    float(self.grid.delta_m_norm[i]),
                    float(self.grid.delta_c_norm[j]),
                    float(self.margin[i, j]),
                    str(self.classes[i, j]),
                    float(self.offending_im[i, j]),
                ]
                row.extend(float(self.extra[name][i, j]) for name in names)
                row.append(str(self.errors[i, j]))
                out.append(row)
        return out

    def to_dict(self) -> Dict[str, Any]:
        columns = self.columns()
        return {
            "params": self.params.to_dict(),
            "axis_units": self.grid.axis_units,
            "shape": list(self.grid.shape),
            "metadata": self.metadata,
            "truncated": self.truncated,
            "cells": [dict(zip(columns, row)) for row in self.rows()],
        }

    def to_json(self) -> str:
        return dumps(self.to_dict())

    def save(self, output_path: str) -> None:
        """Save the map to file, JSON when the suffix is .json, summary text otherwise."""
        output = Path(output_path)
        content = self.to_json() if output.suffix == ".json" else str(self)
        with open(output, "w", encoding="utf-8") as f:
            f.write(content)

    def summary(self) -> Dict[str, Any]:
        return {
            "cells": int(self.margin.size),
            "classes": self.count_by_class(),
            "unstable_cells": int(np.count_nonzero(self.unstable_mask)),
            "errors": self.error_count,
            "narrowest_unstable_dc": self.narrowest_unstable_dc(),
            "closed_form_corridor": stable_corridor(self.params.cooperativity),
        }

    def __str__(self) -> str:
        lines = []
        lines.append("=" * 60)
        lines.append("Stability Map")
        lines.append("=" * 60)
        n_dm, n_dc = self.grid.shape
        lines.append(f"C = {self.params.cooperativity:.6g}, grid {n_dm} x {n_dc}")
        for name, count in sorted(self.count_by_class().items()):
            lines.append(f"  {name}: {count}")
        narrow = self.narrowest_unstable_dc()
        if math.isfinite(narrow):
            lines.append(f"Narrowest unstable |Δ̃c|: {narrow:.6g}")
            corridor = stable_corridor(self.params.cooperativity)
            lines.append(f"Closed-form corridor C - √(C²-1): {corridor:.6g}")
        else:
            lines.append("✓ No unstable cells")
        if self.error_count:
            lines.append(f"⚠️  Cells with errors: {self.error_count}")
        if self.truncated:
            lines.append("⚠️  Map truncated")
        lines.append("=" * 60)
        return "\n".join(lines)


def stability_map(
    params: SystemParams,
    grid: MapGrid,
    tol: float = DEFAULT_TOL,
    max_workers: Optional[int] = None,
    progress_callback: Optional[ProgressCallback] = None,
) -> StabilityMap:
    """Classify the full 4x4 model at every grid point.

    Rows of constant Δ̃m are evaluated concurrently and placed by index. A
    failing cell is flagged rather than aborting the map.

    Args:
        params: System parameters
        grid: Detuning grid
        tol: Classification tolerance
        max_workers: Worker threads (None = auto-detect)
        progress_callback: Optional callback(current, total, message)

    Returns:
        StabilityMap
    """
    n_dm, n_dc = grid.shape
    logger.info(f"Computing {n_dm} x {n_dc} stability map at C = {params.cooperativity:.6g}")

    def evaluate_row(i: int) -> List[Tuple[float, str, float, str]]:
        row = []
        for j in range(n_dc):
            try:
                report = analyze(params, grid.drive_at(params, i, j), tol=tol)
                row.append((report.margin, report.classification.value, report.offending_im, ""))
            except (NumericalError, ValueError) as e:
                row.append((math.nan, ERROR_CLASS, math.nan, str(e)))
        return row

    outcome = run_indexed(
        evaluate_row, n_dm, max_workers=max_workers, progress_callback=progress_callback
    )

    margin = np.full((n_dm, n_dc), np.nan)
    offending_im = np.full((n_dm, n_dc), np.nan)
    classes = np.full((n_dm, n_dc), ERROR_CLASS, dtype=object)
    errors = np.full((n_dm, n_dc), "", dtype=object)
    for i, row in enumerate(outcome.results):
        if row is None:
            errors[i, :] = outcome.errors.get(i, "not evaluated")
            continue
        for j, (m, cls, im, err) in enumerate(row):
            margin[i, j] = m
            classes[i, j] = cls
            offending_im[i, j] = im
            errors[i, j] = err

    unphysical = int(np.count_nonzero(grid.delta_m_norm > 0)) * n_dc
    metadata = {
        "single_tone_unphysical": {
            "condition": "delta_m > 0 (delta_m = -omega_m > 0)",
            "cells": unphysical,
        },
        "tolerance": tol,
    }
    if unphysical:
        logger.debug(f"{unphysical} cells lie in the region unphysical for single-tone driving")

    smap = StabilityMap(
        grid=grid,
        params=params,
        margin=margin,
        classes=classes,
        offending_im=offending_im,
        errors=errors,
        metadata=metadata,
        truncated=outcome.truncated,
    )
    if smap.error_count:
        logger.warning(f"{smap.error_count} map cells could not be evaluated")
    return smap


def margin_contours(smap: StabilityMap, level: float = 0.0) -> List[np.ndarray]:
    """Marching-squares contours of the full-model margin.

    Margins are linearly interpolated between cells; failed cells are masked.

    Returns:
        List of (N, 2) arrays of (Δ̃c, Δ̃m) points
    """
    z = np.ma.masked_invalid(smap.margin)
    if smap.grid.shape[0] < 2 or smap.grid.shape[1] < 2:
        return []
    generator = contourpy.contour_generator(
        x=smap.grid.delta_c_norm, y=smap.grid.delta_m_norm, z=z, line_type="Separate"
    )
    return [np.asarray(line) for line in generator.lines(level)]
