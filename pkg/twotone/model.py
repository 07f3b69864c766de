"""Physical parameters, drive configuration and the linear dynamical matrix.

All rates and frequencies are angular (rad/s) internally. The quadrature vector
is ``x = [Xa, Ya, Xb, Yb]`` (cavity amplitude and phase, mechanical amplitude and
phase) in the frame rotating with the drive.
"""
import cmath
import logging
import math
from dataclasses import dataclass, replace
from enum import Enum
from typing import Any, Dict, Optional, Union

import numpy as np

logger = logging.getLogger(__name__)

QUADRATURES = ("xa", "ya", "xb", "yb")

UNITS = ("angular", "hz")


class DriveMode(str, Enum):
    """How the cavity is driven."""

    SINGLE_TONE_UPPER = "single_tone_upper"
    TWO_TONE_BALANCED = "two_tone_balanced"


def to_angular(value: float, units: str = "angular") -> float:
    """Convert a rate given in ``units`` to angular frequency.

    Args:
        value: Rate or frequency
        units: Either "angular" or "hz"

    Returns:
        Angular value
    """
    if units == "angular":
        return float(value)
    if units == "hz":
        return 2.0 * math.pi * float(value)
    raise ValueError(f"Unknown units '{units}', expected one of {UNITS}")


def from_angular(value: float, units: str = "angular") -> float:
    """Inverse of :func:`to_angular`."""
    if units == "angular":
        return float(value)
    if units == "hz":
        return float(value) / (2.0 * math.pi)
    raise ValueError(f"Unknown units '{units}', expected one of {UNITS}")


def _check_finite(name: str, value: float) -> None:
    if not math.isfinite(value):
        raise ValueError(f"{name} must be finite, got {value}")


@dataclass(frozen=True)
class SystemParams:
    """Physical rates of the optomechanical system.

    The coupling is stored as the field-enhanced coupling ``g``; use
    :meth:`from_cooperativity` to build from C = 4g²/(κΓm).
    ``omega_m`` may be left unset for two-tone work in the rotating-wave model.
    """

    kappa: float
    gamma_m: float
    g: float = 0.0
    omega_m: Optional[float] = None

    def __post_init__(self) -> None:
        for name in ("kappa", "gamma_m", "g"):
            _check_finite(name, getattr(self, name))
        if self.kappa <= 0:
            raise ValueError(f"kappa must be positive, got {self.kappa}")
        if self.gamma_m <= 0:
            raise ValueError(f"gamma_m must be positive, got {self.gamma_m}")
        if self.g < 0:
            raise ValueError(f"g must be non-negative, got {self.g}")
        if self.omega_m is not None:
            _check_finite("omega_m", self.omega_m)
            if self.omega_m <= 0:
                raise ValueError(f"omega_m must be positive, got {self.omega_m}")

    @classmethod
    def from_cooperativity(
        cls,
        kappa: float,
        gamma_m: float,
        cooperativity: float,
        omega_m: Optional[float] = None,
    ) -> "SystemParams":
        """Build parameters from the cooperativity C instead of g."""
        _check_finite("cooperativity", cooperativity)
        if cooperativity < 0:
            raise ValueError(f"cooperativity must be non-negative, got {cooperativity}")
        if kappa <= 0 or gamma_m <= 0:
            raise ValueError("kappa and gamma_m must be positive")
        g = math.sqrt(cooperativity * kappa * gamma_m / 4.0)
        return cls(kappa=kappa, gamma_m=gamma_m, g=g, omega_m=omega_m)

    @property
    def cooperativity(self) -> float:
        """C = 4g²/(κΓm)."""
        return 4.0 * self.g * self.g / (self.kappa * self.gamma_m)

    def with_cooperativity(self, cooperativity: float) -> "SystemParams":
        return SystemParams.from_cooperativity(
            self.kappa, self.gamma_m, cooperativity, omega_m=self.omega_m
        )

    def with_coupling(self, g: float) -> "SystemParams":
        return replace(self, g=g)

    def with_cooling(self, gamma_eff: float) -> "SystemParams":
        """Dress the mechanics with an auxiliary cooling tone.

        The cooling tone only broadens the mechanical line to ``gamma_eff``;
        the coupling ``g`` of the measurement tones is unchanged, so C drops
        by Γm/Γeff.
        """
        if gamma_eff < self.gamma_m:
            raise ValueError(
                f"Cooled linewidth {gamma_eff} is below the intrinsic linewidth {self.gamma_m}"
            )
        return replace(self, gamma_m=gamma_eff)

    def scaled(self, factor: float) -> "SystemParams":
        """Multiply every rate by ``factor``."""
        if factor <= 0:
            raise ValueError(f"Scale factor must be positive, got {factor}")
        return SystemParams(
            kappa=self.kappa * factor,
            gamma_m=self.gamma_m * factor,
            g=self.g * factor,
            omega_m=None if self.omega_m is None else self.omega_m * factor,
        )

    def to_dict(self) -> Dict[str, Any]:
        return {
            "kappa": self.kappa,
            "gamma_m": self.gamma_m,
            "g": self.g,
            "cooperativity": self.cooperativity,
            "omega_m": self.omega_m,
        }


@dataclass(frozen=True)
class DriveConfig:
    """Drive mode plus the detuning errors Δc and Δm.

    In :attr:`DriveMode.SINGLE_TONE_UPPER` the mechanical detuning is replaced
    by -Ωm and ``delta_m`` is ignored.
    """

    mode: DriveMode = DriveMode.TWO_TONE_BALANCED
    delta_c: float = 0.0
    delta_m: float = 0.0

    def __post_init__(self) -> None:
        object.__setattr__(self, "mode", DriveMode(self.mode))
        _check_finite("delta_c", self.delta_c)
        _check_finite("delta_m", self.delta_m)

    @classmethod
    def from_normalized(
        cls,
        params: SystemParams,
        delta_c_norm: float,
        delta_m_norm: float = 0.0,
        mode: Union[DriveMode, str] = DriveMode.TWO_TONE_BALANCED,
    ) -> "DriveConfig":
        """Build a drive from Δ̃c = Δc/(κ/2) and Δ̃m = Δm/(Γm/2)."""
        return cls(
            mode=DriveMode(mode),
            delta_c=delta_c_norm * params.kappa / 2.0,
            delta_m=delta_m_norm * params.gamma_m / 2.0,
        )

    def effective_delta_m(self, params: SystemParams) -> float:
        """Mechanical detuning entering the dynamical matrix."""
        if self.mode is DriveMode.SINGLE_TONE_UPPER:
            if params.omega_m is None:
                raise ValueError("Single-tone drive requires omega_m")
            return -params.omega_m
        return self.delta_m

    def delta_c_norm(self, params: SystemParams) -> float:
        return self.delta_c / (params.kappa / 2.0)

    def delta_m_norm(self, params: SystemParams) -> float:
        return self.effective_delta_m(params) / (params.gamma_m / 2.0)

    def with_detunings(
        self, delta_c: Optional[float] = None, delta_m: Optional[float] = None
    ) -> "DriveConfig":
        return DriveConfig(
            mode=self.mode,
            delta_c=self.delta_c if delta_c is None else delta_c,
            delta_m=self.delta_m if delta_m is None else delta_m,
        )

    def to_dict(self) -> Dict[str, Any]:
        return {"mode": self.mode.value, "delta_c": self.delta_c, "delta_m": self.delta_m}


@dataclass(frozen=True, eq=False)
class DynamicalMatrix:
    """Real 4x4 matrix M of dx/dt = M x + noise, with its inputs."""

    entries: np.ndarray
    params: SystemParams
    drive: DriveConfig

    def __post_init__(self) -> None:
        entries = np.array(self.entries, dtype=float)
        if entries.shape != (4, 4):
            raise ValueError(f"Dynamical matrix must be 4x4, got {entries.shape}")
        entries.setflags(write=False)
        object.__setattr__(self, "entries", entries)

    @property
    def trace(self) -> float:
        return float(np.trace(self.entries))

    def with_coupling(self, g: float) -> "DynamicalMatrix":
        return build_dynamical_matrix(self.params.with_coupling(g), self.drive)


def static_self_energy(params: SystemParams, delta_c: float) -> float:
    """Σ(0) = 2Δc g² / (κ²/4 + Δc²), the real static self-energy."""
    return 2.0 * delta_c * params.g**2 / (params.kappa**2 / 4.0 + delta_c**2)


def normalized_self_energy(params: SystemParams, delta_c: float) -> float:
    """Σ(0)/(Γm/2) = 2CΔ̃c/(1 + Δ̃c²)."""
    dc = delta_c / (params.kappa / 2.0)
    return 2.0 * params.cooperativity * dc / (1.0 + dc * dc)


def self_energy(
    params: SystemParams, delta_c: float, omega: Union[float, np.ndarray]
) -> Union[complex, np.ndarray]:
    """Drive-induced mechanical self-energy.

    Σ(ω) = 2Δc g² / ((κ/2 - iω)² + Δc²)

    Args:
        params: System parameters
        delta_c: Cavity detuning error Δc
        omega: Frequency or array of frequencies

    Returns:
        Complex self-energy, an array if ``omega`` is an array
    """
    w = np.asarray(omega, dtype=float)
    denom = (params.kappa / 2.0 - 1j * w) ** 2 + delta_c**2
    sigma = 2.0 * delta_c * params.g**2 / denom
    if sigma.ndim == 0:
        return complex(sigma)
    return sigma


def build_dynamical_matrix(params: SystemParams, drive: DriveConfig) -> DynamicalMatrix:
    """Assemble M for the quadrature vector [Xa, Ya, Xb, Yb].

    Args:
        params: System parameters
        drive: Drive configuration

    Returns:
        DynamicalMatrix with optical block [-κ/2, -Δc; Δc, -κ/2], mechanical
        block [-Γm/2, -Δm; Δm, -Γm/2] and coupling 2g at (Ya, Xb) and (Yb, Xa)
    """
    delta_m = drive.effective_delta_m(params)
    half_k = params.kappa / 2.0
    half_g = params.gamma_m / 2.0
    two_g = 2.0 * params.g
    entries = np.array(
        [
            [-half_k, -drive.delta_c, 0.0, 0.0],
            [drive.delta_c, -half_k, two_g, 0.0],
            [0.0, 0.0, -half_g, -delta_m],
            [two_g, 0.0, delta_m, -half_g],
        ],
        dtype=float,
    )
    if not np.all(np.isfinite(entries)):
        raise ValueError("Dynamical matrix has non-finite entries")
    return DynamicalMatrix(entries=entries, params=params, drive=drive)


@dataclass(frozen=True)
class EffectiveEigenvalues:
    """Eigenvalues of the reduced mechanical model."""

    lambda_plus: complex
    lambda_minus: complex
    delta_eff: float
    self_energy: float

    @property
    def margin(self) -> float:
        return max(self.lambda_plus.real, self.lambda_minus.real)

    def as_tuple(self) -> tuple:
        return (self.lambda_plus, self.lambda_minus)


def effective_eigenvalues(params: SystemParams, drive: DriveConfig) -> EffectiveEigenvalues:
    """λ± = -Γm/2 ± i√(Δm(Δm - 2Σ(0))) of the reduced mechanical model.

    The square root uses the principal branch, so its real part (the effective
    frequency Δeff) is non-negative. The model assumes κ ≫ Γm; that regime is
    not enforced.
    """
    if drive.mode is not DriveMode.TWO_TONE_BALANCED:
        raise ValueError("Effective model applies to balanced two-tone driving only")
    sigma = static_self_energy(params, drive.delta_c)
    radicand = drive.delta_m * (drive.delta_m - 2.0 * sigma)
    root = cmath.sqrt(complex(radicand, 0.0))
    base = -params.gamma_m / 2.0
    return EffectiveEigenvalues(
        lambda_plus=complex(base) + 1j * root,
        lambda_minus=complex(base) - 1j * root,
        delta_eff=root.real,
        self_energy=sigma,
    )
