"""Run configuration: file loading, strict validation and unit handling.

Configs are TOML (hand-written), JSON, or a JSON or CSV artifact whose embedded
config is reused. Keys are grouped in the sections [system], [drive], [sweep],
[noise], [spectrum], [simulate], [contour] and [output]; unknown keys are
rejected. With ``units = "hz"`` every rate is multiplied by 2π on load.
Dimensionless values (C, normalized detunings, occupations) and times are never
converted, and the resolved config is always angular.
"""
import json
import logging
import math
import os
from dataclasses import asdict, dataclass, field, fields, replace
from enum import Enum
from pathlib import Path
from typing import Any, Dict, List, Mapping, Optional, Tuple, Union

try:
    import tomllib
except ImportError:
    try:
        import tomli as tomllib  # type: ignore
    except ImportError:
        tomllib = None  # type: ignore

from twotone.errors import ConfigError
from twotone.model import DriveConfig, DriveMode, SystemParams, to_angular
from twotone.report import read_csv_config
from twotone.spectra import NoiseModel, apply_cooling

logger = logging.getLogger(__name__)

OUTPUT_ENV = "TWOTONE_OUT"
DEFAULT_OUTPUT_DIR = "twotone-out"

MAP_QUANTITIES = ("margin", "power", "delta_eff")


class Task(str, Enum):
    MAP = "map"
    CONTOUR = "contour"
    SPECTRUM = "spectrum"
    SIMULATE = "simulate"
    REPRODUCE = "reproduce"


class ReproduceTarget(str, Enum):
    FIG3 = "fig3"
    FIG4DEF = "fig4def"
    FIG5 = "fig5"
    FIG6 = "fig6"


def _finite(name: str, value: Any) -> float:
    try:
        number = float(value)
    except (TypeError, ValueError) as e:
        raise ConfigError(f"{name} must be a number, got {value!r}") from e
    if not math.isfinite(number):
        raise ConfigError(f"{name} must be finite, got {value!r}")
    return number


def _optional(name: str, value: Any) -> Optional[float]:
    return None if value is None else _finite(name, value)


def _count(name: str, value: Any, minimum: int = 1) -> int:
    try:
        number = int(value)
    except (TypeError, ValueError) as e:
        raise ConfigError(f"{name} must be an integer, got {value!r}") from e
    if isinstance(value, bool) or number != value or number < minimum:
        raise ConfigError(f"{name} must be an integer >= {minimum}, got {value!r}")
    return number


def _range(name: str, value: Any) -> Tuple[float, float]:
    if isinstance(value, str):
        value = parse_range(value)
    if not isinstance(value, (list, tuple)) or len(value) != 2:
        raise ConfigError(f"{name} must be a pair [low, high], got {value!r}")
    lo, hi = _finite(name, value[0]), _finite(name, value[1])
    if not lo < hi:
        raise ConfigError(f"{name} must be increasing, got {lo} to {hi}")
    return (lo, hi)


def parse_range(text: str) -> Tuple[float, float]:
    """Parse "low:high" into a pair of floats."""
    parts = text.split(":")
    if len(parts) != 2:
        raise ConfigError(f"Range must look like low:high, got {text!r}")
    return _range("range", [parts[0], parts[1]])


@dataclass
class SystemSection:
    kappa: float = 1.0
    gamma_m: float = 0.01
    omega_m: Optional[float] = None
    g: Optional[float] = None
    cooperativity: Optional[float] = None

    def __post_init__(self) -> None:
        self.kappa = _finite("system.kappa", self.kappa)
        self.gamma_m = _finite("system.gamma_m", self.gamma_m)
        self.omega_m = _optional("system.omega_m", self.omega_m)
        self.g = _optional("system.g", self.g)
        self.cooperativity = _optional("system.cooperativity", self.cooperativity)
        if self.g is not None and self.cooperativity is not None:
            raise ConfigError("Give either system.g or system.cooperativity, not both")

    def to_params(self) -> SystemParams:
        try:
            if self.g is not None:
                return SystemParams(self.kappa, self.gamma_m, self.g, self.omega_m)
            cooperativity = 1.0 if self.cooperativity is None else self.cooperativity
            return SystemParams.from_cooperativity(
                self.kappa, self.gamma_m, cooperativity, omega_m=self.omega_m
            )
        except ValueError as e:
            raise ConfigError(f"Invalid [system]: {e}") from e


@dataclass
class DriveSection:
    mode: str = DriveMode.TWO_TONE_BALANCED.value
    delta_c: Optional[float] = None
    delta_m: Optional[float] = None
    delta_c_norm: Optional[float] = None
    delta_m_norm: Optional[float] = None

    def __post_init__(self) -> None:
        try:
            self.mode = DriveMode(self.mode).value
        except ValueError as e:
            raise ConfigError(f"Unknown drive.mode {self.mode!r}") from e
        for name in ("delta_c", "delta_m", "delta_c_norm", "delta_m_norm"):
            setattr(self, name, _optional(f"drive.{name}", getattr(self, name)))
        if self.delta_c is not None and self.delta_c_norm is not None:
            raise ConfigError("Give either drive.delta_c or drive.delta_c_norm, not both")
        if self.delta_m is not None and self.delta_m_norm is not None:
            raise ConfigError("Give either drive.delta_m or drive.delta_m_norm, not both")

    def to_drive(self, params: SystemParams) -> DriveConfig:
        delta_c = self.delta_c
        if delta_c is None:
            delta_c = (self.delta_c_norm or 0.0) * params.kappa / 2.0
        delta_m = self.delta_m
        if delta_m is None:
            delta_m = (self.delta_m_norm or 0.0) * params.gamma_m / 2.0
        drive = DriveConfig(mode=DriveMode(self.mode), delta_c=delta_c, delta_m=delta_m)
        try:
            drive.effective_delta_m(params)
        except ValueError as e:
            raise ConfigError(str(e)) from e
        return drive


@dataclass
class SweepSection:
    dm_range: Tuple[float, float] = (-18.0, 18.0)
    dc_range: Tuple[float, float] = (-0.3, 0.3)
    dm_points: int = 121
    dc_points: int = 121
    axis_units: str = "normalized"
    quantities: List[str] = field(default_factory=lambda: ["margin"])
    points_file: Optional[str] = None
    tol: float = 1e-9

    def __post_init__(self) -> None:
        self.dm_range = _range("sweep.dm_range", self.dm_range)
        self.dc_range = _range("sweep.dc_range", self.dc_range)
        self.dm_points = _count("sweep.dm_points", self.dm_points)
        self.dc_points = _count("sweep.dc_points", self.dc_points)
        if self.axis_units not in ("normalized", "kappa"):
            raise ConfigError(
                f"sweep.axis_units must be 'normalized' or 'kappa', got {self.axis_units!r}"
            )
        self.quantities = list(self.quantities)
        unknown = set(self.quantities) - set(MAP_QUANTITIES)
        if unknown:
            raise ConfigError(
                f"Unknown sweep.quantities {sorted(unknown)}, expected {MAP_QUANTITIES}"
            )
        self.tol = _finite("sweep.tol", self.tol)
        if self.tol <= 0:
            raise ConfigError("sweep.tol must be positive")


@dataclass
class NoiseSection:
    n_th: float = 0.0
    n_ba: float = 0.5
    kappa_ex_fraction: float = 1.0
    cooling_gamma_eff: Optional[float] = None

    def __post_init__(self) -> None:
        self.n_th = _finite("noise.n_th", self.n_th)
        self.n_ba = _finite("noise.n_ba", self.n_ba)
        self.kappa_ex_fraction = _finite("noise.kappa_ex_fraction", self.kappa_ex_fraction)
        self.cooling_gamma_eff = _optional("noise.cooling_gamma_eff", self.cooling_gamma_eff)

    def to_noise(self) -> NoiseModel:
        try:
            return NoiseModel(self.n_th, self.n_ba, self.kappa_ex_fraction)
        except ValueError as e:
            raise ConfigError(f"Invalid [noise]: {e}") from e


@dataclass
class SpectrumSection:
    omega_min: Optional[float] = None
    omega_max: Optional[float] = None
    points: int = 4001
    reference: Tuple[float, float] = (-18.0, 0.0)

    def __post_init__(self) -> None:
        self.omega_min = _optional("spectrum.omega_min", self.omega_min)
        self.omega_max = _optional("spectrum.omega_max", self.omega_max)
        if (self.omega_min is None) != (self.omega_max is None):
            raise ConfigError("Give both spectrum.omega_min and spectrum.omega_max, or neither")
        if self.omega_min is not None and not self.omega_min < self.omega_max:
            raise ConfigError("spectrum.omega_min must be below spectrum.omega_max")
        self.points = _count("spectrum.points", self.points, minimum=5)
        if not isinstance(self.reference, (list, tuple)) or len(self.reference) != 2:
            raise ConfigError("spectrum.reference must be a pair [delta_m_norm, delta_c_norm]")
        self.reference = (
            _finite("spectrum.reference", self.reference[0]),
            _finite("spectrum.reference", self.reference[1]),
        )

    @property
    def adaptive(self) -> bool:
        return self.omega_min is None


@dataclass
class SimulateSection:
    dt: Optional[float] = None
    duration: Optional[float] = None
    scheme: str = "euler_maruyama"
    seeds: int = 1
    divergence_factor: float = 1e12
    decimation: int = 1
    nonrwa: bool = False
    x0: Optional[List[float]] = None

    def __post_init__(self) -> None:
        self.dt = _optional("simulate.dt", self.dt)
        self.duration = _optional("simulate.duration", self.duration)
        if self.dt is not None and self.dt <= 0:
            raise ConfigError("simulate.dt must be positive")
        if self.duration is not None and self.duration <= 0:
            raise ConfigError("simulate.duration must be positive")
        if self.scheme not in ("euler_maruyama", "exact_ou"):
            raise ConfigError(f"Unknown simulate.scheme {self.scheme!r}")
        self.seeds = _count("simulate.seeds", self.seeds)
        self.decimation = _count("simulate.decimation", self.decimation)
        self.divergence_factor = _finite("simulate.divergence_factor", self.divergence_factor)
        self.nonrwa = bool(self.nonrwa)
        if self.x0 is not None:
            if len(self.x0) != 4:
                raise ConfigError("simulate.x0 must have four entries")
            self.x0 = [_finite("simulate.x0", v) for v in self.x0]


@dataclass
class ContourSection:
    cooperativities: List[float] = field(default_factory=lambda: [1.0, 1.5, 2.0, 3.5, 7.0, 14.0])
    dc_points: int = 2001
    dc_max: Optional[float] = None

    def __post_init__(self) -> None:
        if not isinstance(self.cooperativities, (list, tuple)) or not self.cooperativities:
            raise ConfigError("contour.cooperativities must be a non-empty list")
        self.cooperativities = [_finite("contour.cooperativities", c) for c in self.cooperativities]
        self.dc_points = _count("contour.dc_points", self.dc_points, minimum=2)
        self.dc_max = _optional("contour.dc_max", self.dc_max)
        if self.dc_max is not None and self.dc_max <= 0:
            raise ConfigError("contour.dc_max must be positive")


@dataclass
class OutputSection:
    dir: str = field(default_factory=lambda: os.environ.get(OUTPUT_ENV, DEFAULT_OUTPUT_DIR))
    formats: List[str] = field(default_factory=lambda: ["csv", "json"])
    plot: bool = False

    def __post_init__(self) -> None:
        self.dir = str(self.dir)
        if isinstance(self.formats, str):
            self.formats = [self.formats]
        self.formats = list(self.formats)
        unknown = set(self.formats) - {"csv", "json"}
        if unknown or not self.formats:
            raise ConfigError(f"output.formats must be drawn from csv/json, got {self.formats}")
        self.plot = bool(self.plot)


SECTIONS = {
    "system": SystemSection,
    "drive": DriveSection,
    "sweep": SweepSection,
    "noise": NoiseSection,
    "spectrum": SpectrumSection,
    "simulate": SimulateSection,
    "contour": ContourSection,
    "output": OutputSection,
}

RATE_KEYS = {
    "system": ("kappa", "gamma_m", "omega_m", "g"),
    "drive": ("delta_c", "delta_m"),
    "spectrum": ("omega_min", "omega_max"),
    "noise": ("cooling_gamma_eff",),
}

TOP_LEVEL_KEYS = {"task", "target", "seed", "jobs", "units", "name"} | set(SECTIONS)


@dataclass
class RunConfig:
    """Fully resolved configuration of one invocation (angular units)."""

    task: Task
    system: SystemSection = field(default_factory=SystemSection)
    drive: DriveSection = field(default_factory=DriveSection)
    sweep: SweepSection = field(default_factory=SweepSection)
    noise: NoiseSection = field(default_factory=NoiseSection)
    spectrum: SpectrumSection = field(default_factory=SpectrumSection)
    simulate: SimulateSection = field(default_factory=SimulateSection)
    contour: ContourSection = field(default_factory=ContourSection)
    output: OutputSection = field(default_factory=OutputSection)
    target: Optional[ReproduceTarget] = None
    seed: int = 0
    jobs: Optional[int] = None
    name: str = ""

    @classmethod
    def from_dict(cls, data: Mapping[str, Any]) -> "RunConfig":
        """Validate a raw config mapping.

        Args:
            data: Parsed file contents merged with overrides

        Returns:
            RunConfig with every rate converted to angular units

        Raises:
            ConfigError: On unknown keys or invalid values
        """
        unknown = set(data) - TOP_LEVEL_KEYS
        if unknown:
            raise ConfigError(f"Unknown top-level key(s): {', '.join(sorted(unknown))}")
        units = data.get("units", "angular")
        if units not in ("angular", "hz"):
            raise ConfigError(f"units must be 'angular' or 'hz', got {units!r}")

        if "task" not in data:
            raise ConfigError("No task given")
        try:
            task = Task(data["task"])
        except ValueError as e:
            raise ConfigError(f"Unknown task {data['task']!r}") from e

        target = None
        if data.get("target") is not None:
            try:
                target = ReproduceTarget(data["target"])
            except ValueError as e:
                choices = ", ".join(t.value for t in ReproduceTarget)
                raise ConfigError(
                    f"Unknown target {data['target']!r} (choose from {choices})"
                ) from e
        if task is Task.REPRODUCE and target is None:
            raise ConfigError("reproduce requires a target")

        sections = {
            name: _build_section(name, section_cls, data.get(name, {}), units)
            for name, section_cls in SECTIONS.items()
        }
        jobs = data.get("jobs")
        return cls(
            task=task,
            target=target,
            seed=_count("seed", data.get("seed", 0), minimum=0),
            jobs=None if jobs is None else _count("jobs", jobs),
            name=str(data.get("name", "")),
            **sections,
        )

    def to_dict(self) -> Dict[str, Any]:
        """Resolved config; loading it back reproduces this object."""
        data: Dict[str, Any] = {
            "task": self.task.value,
            "units": "angular",
            "seed": self.seed,
        }
        if self.target is not None:
            data["target"] = self.target.value
        if self.jobs is not None:
            data["jobs"] = self.jobs
        if self.name:
            data["name"] = self.name
        for name in SECTIONS:
            section = asdict(getattr(self, name))
            data[name] = {
                k: list(v) if isinstance(v, tuple) else v
                for k, v in section.items()
                if v is not None
            }
        return data

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2)

    def physical(self) -> Tuple[SystemParams, DriveConfig, NoiseModel]:
        """Parameters, drive and noise, with the cooling tone applied if set."""
        params = self.system.to_params()
        noise = self.noise.to_noise()
        if self.noise.cooling_gamma_eff is not None:
            try:
                params, noise = apply_cooling(params, noise, self.noise.cooling_gamma_eff)
            except ValueError as e:
                raise ConfigError(f"Invalid cooling tone: {e}") from e
        return params, self.drive.to_drive(params), noise


def _build_section(name: str, section_cls: Any, raw: Any, units: str) -> Any:
    if not isinstance(raw, Mapping):
        raise ConfigError(f"[{name}] must be a table")
    known = {f.name for f in fields(section_cls)}
    unknown = set(raw) - known
    if unknown:
        raise ConfigError(f"Unknown key(s) in [{name}]: {', '.join(sorted(unknown))}")
    values = dict(raw)
    for key in RATE_KEYS.get(name, ()):
        if values.get(key) is not None:
            values[key] = to_angular(_finite(f"{name}.{key}", values[key]), units)
    try:
        return section_cls(**values)
    except (TypeError, ValueError) as e:
        if isinstance(e, ConfigError):
            raise
        raise ConfigError(f"Invalid [{name}]: {e}") from e


def load_config_file(path: Union[str, Path]) -> Dict[str, Any]:
    """Parse a config file into a raw mapping.

    Accepts hand-written TOML or JSON, and artifacts: a JSON artifact yields
    its ``config`` field, a CSV artifact its ``# config:`` header line.
    """
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"Config file does not exist: {path}")
    try:
        if path.suffix == ".json":
            with open(path, "r", encoding="utf-8") as f:
                data = json.load(f)
            if isinstance(data, dict) and "format_version" in data and "config" in data:
                logger.info(f"Using the config embedded in artifact {path}")
                data = data["config"]
        elif path.suffix == ".toml":
            if tomllib is None:
                raise ConfigError("Reading TOML configs requires tomli on Python < 3.11")
            with open(path, "rb") as f:
                data = tomllib.load(f)
        elif path.suffix == ".csv":
            data = read_csv_config(path)
            logger.info(f"Using the config embedded in artifact {path}")
        else:
            raise ConfigError(
                f"Unsupported config format '{path.suffix}' (use .toml, .json or a .csv artifact)"
            )
    except ConfigError:
        raise
    except Exception as e:
        raise ConfigError(f"Could not parse {path}: {e}") from e
    if not isinstance(data, dict):
        raise ConfigError(f"{path} does not contain a table")
    logger.debug(f"Loaded config from {path}")
    return data


def merge(base: Mapping[str, Any], overrides: Mapping[str, Any]) -> Dict[str, Any]:
    """Overlay ``overrides`` on ``base``; None values never override."""
    merged: Dict[str, Any] = {k: dict(v) if isinstance(v, Mapping) else v for k, v in base.items()}
    for key, value in overrides.items():
        if value is None:
            continue
        if isinstance(value, Mapping):
            section = merged.setdefault(key, {})
            if not isinstance(section, dict):
                raise ConfigError(f"[{key}] must be a table")
            section.update({k: v for k, v in value.items() if v is not None})
        else:
            merged[key] = value
    return merged


def resolve_config(
    path: Optional[Union[str, Path]] = None, overrides: Optional[Mapping[str, Any]] = None
) -> RunConfig:
    """Load ``path`` (if any), apply overrides (flags win) and validate."""
    base = load_config_file(path) if path else {}
    return RunConfig.from_dict(merge(base, overrides or {}))


def load_recipe(target: Union[ReproduceTarget, str]) -> Tuple[str, List[Dict[str, Any]]]:
    """Read a pinned reproduction recipe shipped with the package.

    Returns:
        (description, raw run configs)
    """
    from importlib.resources import files

    target = ReproduceTarget(target)
    if tomllib is None:
        raise ConfigError("Reading recipes requires tomli on Python < 3.11")
    resource = files("twotone") / "recipes" / f"{target.value}.toml"
    try:
        data = tomllib.loads(resource.read_text(encoding="utf-8"))
    except FileNotFoundError as e:
        raise ConfigError(f"No recipe shipped for {target.value}") from e
    runs = data.get("runs", [])
    if not runs:
        raise ConfigError(f"Recipe {target.value} defines no runs")
    return str(data.get("description", "")), runs


def with_output(config: RunConfig, output: OutputSection) -> RunConfig:
    return replace(config, output=output)
