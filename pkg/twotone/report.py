"""Artifact writing and run reports for twotone."""
import csv
import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence

import numpy as np

logger = logging.getLogger(__name__)

FORMAT_VERSION = "twotone-format/1"

FORMATS = ("csv", "json")


def _json_default(value: Any) -> Any:
    if isinstance(value, (np.floating, np.integer, np.bool_)):
        return value.item()
    if isinstance(value, np.ndarray):
        return value.tolist()
    if isinstance(value, Path):
        return str(value)
    if hasattr(value, "value"):
        return value.value
    raise TypeError(f"Object of type {type(value).__name__} is not JSON serializable")


def dumps(data: Any) -> str:
    """JSON encoding that understands NumPy scalars, arrays and enums."""
    return json.dumps(data, indent=2, default=_json_default)


class ArtifactWriter:
    """Writes data files that embed the resolved config and format version.

    CSV files carry the header information as leading ``#`` comment lines;
    JSON files carry it as top-level fields.
    """

    def __init__(
        self,
        output_dir: Path,
        formats: Sequence[str] = FORMATS,
        resolved_config: Optional[Dict[str, Any]] = None,
    ) -> None:
        unknown = set(formats) - set(FORMATS)
        if unknown:
            raise ValueError(f"Unknown output formats: {sorted(unknown)}")
        self.output_dir = Path(output_dir)
        self.formats = list(formats)
        self.resolved_config = resolved_config or {}
        self.written: List[Path] = []
        self.output_dir.mkdir(parents=True, exist_ok=True)

    def _record(self, path: Path) -> Path:
        self.written.append(path)
        logger.debug(f"Wrote {path}")
        return path

    def header(self) -> Dict[str, Any]:
        return {"format_version": FORMAT_VERSION, "config": self.resolved_config}

    def write_table(
        self,
        name: str,
        columns: Sequence[str],
        rows: Sequence[Sequence[Any]],
        extra: Optional[Dict[str, Any]] = None,
    ) -> List[Path]:
        """Write a table in every requested format.

        Args:
            name: File stem
            columns: Column names
            rows: Row values
            extra: Additional JSON fields (features, metadata, ...)

        Returns:
            Paths written
        """
        paths = []
        if "csv" in self.formats:
            paths.append(self.write_csv(name, columns, rows))
        if "json" in self.formats:
            payload = self.header()
            payload.update(extra or {})
            payload["columns"] = list(columns)
            payload["rows"] = [list(r) for r in rows]
            paths.append(self.write_json(name, payload, with_header=False))
        return paths

    def write_csv(self, name: str, columns: Sequence[str], rows: Sequence[Sequence[Any]]) -> Path:
        """Write one CSV file with the config header as comment lines."""
        path = self.output_dir / f"{name}.csv"
        with open(path, "w", newline="", encoding="utf-8") as f:
            f.write(f"# format_version: {FORMAT_VERSION}\n")
            f.write(f"# config: {json.dumps(self.resolved_config, default=_json_default)}\n")
            writer = csv.writer(f)
            writer.writerow(columns)
            writer.writerows(rows)
        return self._record(path)

    def write_json(self, name: str, payload: Dict[str, Any], with_header: bool = True) -> Path:
        data = dict(self.header()) if with_header else {}
        data.update(payload)
        path = self.output_dir / f"{name}.json"
        with open(path, "w", encoding="utf-8") as f:
            f.write(dumps(data))
        return self._record(path)

    def mark_truncated(self, name: str, reason: str) -> Path:
        """Leave a marker next to partial results."""
        path = self.output_dir / f"{name}.TRUNCATED"
        path.write_text(f"{reason}\n", encoding="utf-8")
        logger.warning(f"Partial results for {name}: {reason}")
        return self._record(path)


def read_csv_config(path: Path) -> Dict[str, Any]:
    """Recover the resolved config embedded in a CSV artifact."""
    with open(path, "r", encoding="utf-8") as f:
        for line in f:
            if not line.startswith("#"):
                break
            if line.startswith("# config: "):
                return json.loads(line[len("# config: "):])
    raise ValueError(f"No embedded config in {path}")


@dataclass
class RunReport:
    """Outcome of one CLI task."""

    task: str
    output_dir: Path
    artifacts: List[Path] = field(default_factory=list)
    summary: Dict[str, Any] = field(default_factory=dict)
    partial: bool = False
    target: Optional[str] = None

    @property
    def exit_code(self) -> int:
        return 3 if self.partial else 0

    def __str__(self) -> str:
        """Generate summary report string."""
        lines = []
        lines.append("=" * 60)
        title = f"twotone {self.task}"
        if self.target:
            title += f" ({self.target})"
        lines.append(title)
        lines.append("=" * 60)
        lines.append(f"Output: {self.output_dir}")
        lines.append(f"Artifacts written: {len(self.artifacts)}")
        lines.append("")
        for key, value in self.summary.items():
            if isinstance(value, float):
                lines.append(f"{key}: {value:.6g}")
            else:
                lines.append(f"{key}: {value}")
        if self.partial:
            lines.append("")
            lines.append("⚠️  Partial results (see error column / truncation marker)")
        lines.append("=" * 60)
        return "\n".join(lines)

    def to_dict(self) -> Dict[str, Any]:
        return {
            "task": self.task,
            "target": self.target,
            "output_dir": str(self.output_dir),
            "artifacts": [str(p) for p in self.artifacts],
            "summary": self.summary,
            "partial": self.partial,
            "exit_code": self.exit_code,
        }

    def to_json(self) -> str:
        return dumps(self.to_dict())

    def save(self, output_path: str) -> None:
        """Save report to file, JSON when the suffix is .json."""
        output = Path(output_path)
        content = self.to_json() if output.suffix == ".json" else str(self)
        with open(output, "w", encoding="utf-8") as f:
            f.write(content)
