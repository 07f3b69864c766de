"""Parallel evaluation of parameter grids."""
import logging
import os
from concurrent.futures import Future, ThreadPoolExecutor, as_completed
from contextlib import contextmanager
from dataclasses import dataclass, field
from typing import Any, Callable, Dict, Iterator, List, Optional

import numpy as np
from scipy.interpolate import griddata

try:
    from rich.progress import Progress
except ImportError:  # rich is an optional extra
    Progress = None  # type: ignore

logger = logging.getLogger(__name__)

ProgressCallback = Callable[[int, int, str], Any]


def default_workers() -> int:
    """Worker count used when none is given."""
    return min(32, (os.cpu_count() or 1) + 4)


@dataclass
class SweepOutcome:
    """Per-item results of a sweep, stored by index."""

    results: List[Any]
    errors: Dict[int, str] = field(default_factory=dict)
    truncated: bool = False

    @property
    def completed(self) -> int:
        return sum(1 for r in self.results if r is not None)

    @property
    def partial(self) -> bool:
        return self.truncated or bool(self.errors)


def run_indexed(
    func: Callable[[int], Any],
    count: int,
    max_workers: Optional[int] = None,
    progress_callback: Optional[ProgressCallback] = None,
    label: str = "rows",
) -> SweepOutcome:
    """Evaluate ``func(i)`` for every index in a thread pool.

    Results are placed by index, so the outcome does not depend on completion
    order. A failing item is logged and recorded in ``errors``; a
    ``KeyboardInterrupt`` cancels pending items and marks the outcome truncated.

    Args:
        func: Callable taking the item index
        count: Number of items
        max_workers: Worker threads (None = auto-detect)
        progress_callback: Optional callback(current, total, message)
        label: Item description used in log messages

    Returns:
        SweepOutcome with results, per-item errors and truncation flag
    """
    if max_workers is None:
        max_workers = default_workers()
    outcome = SweepOutcome(results=[None] * count)
    executor = ThreadPoolExecutor(max_workers=max_workers)
    future_to_index: Dict[Future, int] = {}
    try:
        future_to_index = {executor.submit(func, i): i for i in range(count)}
        completed = 0
        for future in as_completed(future_to_index):
            index = future_to_index[future]
            try:
                outcome.results[index] = future.result()
            except Exception as e:
                logger.warning(f"Failed to evaluate {label} {index}: {e}")
                outcome.errors[index] = str(e)

            completed += 1
            if progress_callback:
                progress_callback(completed, count, f"Evaluated {completed}/{count} {label}")
            if completed % 50 == 0:
                logger.debug(f"Evaluated {completed}/{count} {label}")
    except KeyboardInterrupt:
        logger.warning(f"Interrupted after {outcome.completed}/{count} {label}")
        for future in future_to_index:
            future.cancel()
        outcome.truncated = True
    finally:
        executor.shutdown(wait=not outcome.truncated, cancel_futures=outcome.truncated)
    return outcome


@contextmanager
def progress_display(
    enabled: bool = True, description: str = "Sweeping"
) -> Iterator[ProgressCallback]:
    """Yield a progress callback, rendered with rich when it is installed."""
    if not enabled or Progress is None:

        def log_progress(current: int, total: int, message: str) -> None:
            if total and current * 10 // total != (current - 1) * 10 // total:
                logger.info(message)

        yield log_progress if enabled else (lambda current, total, message: None)
        return

    with Progress(transient=True) as progress:
        task_id = progress.add_task(description, total=None)

        def rich_progress(current: int, total: int, message: str) -> None:
            progress.update(task_id, completed=current, total=total)

        yield rich_progress


def rasterize_scattered(
    points: np.ndarray, values: np.ndarray, x_axis: np.ndarray, y_axis: np.ndarray
) -> np.ndarray:
    """Nearest-neighbour (Voronoi) rasterization of scattered samples.

    Args:
        points: (n, 2) array of (x, y) sample locations
        values: (n,) sample values
        x_axis: Grid axis for the first coordinate
        y_axis: Grid axis for the second coordinate

    Returns:
        Array of shape (len(x_axis), len(y_axis))
    """
    points = np.asarray(points, dtype=float)
    values = np.asarray(values, dtype=float)
    if points.ndim != 2 or points.shape[1] != 2 or points.shape[0] != values.shape[0]:
        raise ValueError("points must be (n, 2) and match the number of values")
    if points.shape[0] == 0:
        raise ValueError("No scattered points to rasterize")
    gx, gy = np.meshgrid(np.asarray(x_axis, float), np.asarray(y_axis, float), indexing="ij")
    return griddata(points, values, (gx, gy), method="nearest")
