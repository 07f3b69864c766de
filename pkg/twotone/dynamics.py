"""Stochastic time-domain integration of the linear Langevin equations.

Random numbers come from NumPy's counter-based Philox generator seeded with the
run seed; Gaussian increments use ``Generator.standard_normal`` (ziggurat).
Results are bit-identical for a fixed seed within one NumPy version and agree
statistically across implementations.
"""
import logging
import math
from dataclasses import dataclass, field
from enum import Enum
from typing import Any, Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
from scipy import linalg
from scipy.signal import welch

from twotone.errors import IntegrationError, NoGrowthDetected
from twotone.model import (
    QUADRATURES,
    DriveConfig,
    DriveMode,
    SystemParams,
    build_dynamical_matrix,
)
from twotone.spectra import NoiseModel, diffusion_matrix
from twotone.sweep import ProgressCallback, SweepOutcome, run_indexed

logger = logging.getLogger(__name__)

TRAJECTORY_COLUMNS = ("t",) + QUADRATURES

DEFAULT_DIVERGENCE_FACTOR = 1e12

# Steps of Gaussian increments drawn at a time.
CHUNK_STEPS = 65536


class Scheme(str, Enum):
    """Time-stepping scheme."""

    EULER_MARUYAMA = "euler_maruyama"
    EXACT_OU = "exact_ou"


@dataclass
class TrajectoryRecord:
    """Seeded time series of the four quadratures.

    ``quadratures`` has shape (4, N). When ``diverged`` is set the series stops
    at ``truncated_at`` (the first sample beyond the divergence bound).
    """

    times: np.ndarray
    quadratures: np.ndarray
    seed: int
    dt: float
    scheme: Scheme
    params: SystemParams
    drive: DriveConfig
    diverged: bool = False
    truncated_at: Optional[int] = None
    decimation: int = 1
    metadata: Dict[str, Any] = field(default_factory=dict)

    @property
    def samples(self) -> int:
        return int(self.times.size)

    def amplitude(self) -> np.ndarray:
        """RMS over the four quadratures at every sample."""
        return np.sqrt(np.mean(self.quadratures**2, axis=0))

    def columns(self) -> List[str]:
        return list(TRAJECTORY_COLUMNS)

    def rows(self) -> List[List[float]]:
        return np.column_stack((self.times, self.quadratures.T)).tolist()

    def sidecar(self) -> Dict[str, Any]:
        """Metadata written next to the CSV export."""
        return {
            "seed": self.seed,
            "dt": self.dt,
            "scheme": self.scheme.value,
            "samples": self.samples,
            "decimation": self.decimation,
            "diverged": self.diverged,
            "truncated_at": self.truncated_at,
            "params": self.params.to_dict(),
            "drive": self.drive.to_dict(),
            "metadata": self.metadata,
        }


def make_rng(seed: int) -> np.random.Generator:
    """Counter-based generator used for every stochastic run."""
    return np.random.Generator(np.random.Philox(seed))


def _psd_sqrt(matrix: np.ndarray) -> np.ndarray:
    """Symmetric square root of a covariance, clipping round-off negatives."""
    values, vectors = linalg.eigh((matrix + matrix.T) / 2.0)
    return (vectors * np.sqrt(np.clip(values, 0.0, None))) @ vectors.T


def discretize(
    entries: np.ndarray, diffusion: np.ndarray, dt: float
) -> Tuple[np.ndarray, np.ndarray]:
    """Exact transition matrix and noise covariance over one step (Van Loan).

    Steps with ‖M‖dt > 1 are built by doubling a shorter step:
    Q(2h) = Φ(h) Q(h) Φ(h)ᵀ + Q(h).

    Returns:
        (Φ, Q) with Φ = exp(M dt) and Q = ∫₀^dt exp(Ms) D exp(Mᵀs) ds
    """
    n = entries.shape[0]
    scale = float(np.max(np.sum(np.abs(entries), axis=1))) * dt
    doublings = int(math.ceil(math.log2(scale))) if scale > 1.0 else 0
    h = dt / 2.0**doublings

    block = np.zeros((2 * n, 2 * n))
    block[:n, :n] = entries
    block[:n, n:] = diffusion
    block[n:, n:] = -entries.T
    expm_block = linalg.expm(block * h)[:n, :]
    phi = expm_block[:, :n]
    q = expm_block[:, n:] @ phi.T
    for _ in range(doublings):
        q = phi @ q @ phi.T + q
        phi = phi @ phi
    return phi, (q + q.T) / 2.0


def stationary_covariance(
    params: SystemParams, drive: DriveConfig, noise: NoiseModel
) -> np.ndarray:
    """Solution P of M P + P Mᵀ + D = 0 (stable points only)."""
    matrix = build_dynamical_matrix(params, drive)
    return linalg.solve_continuous_lyapunov(matrix.entries, -diffusion_matrix(params, noise))


def step_limit(params: SystemParams, drive: DriveConfig) -> float:
    """Largest step accepted by the Euler-Maruyama scheme."""
    rates = [
        params.kappa,
        abs(drive.delta_c),
        abs(drive.effective_delta_m(params)),
        params.g,
    ]
    return 0.01 / max(rates)


def _propagate(
    phi: np.ndarray,
    noise_factor: np.ndarray,
    x0: np.ndarray,
    steps: int,
    rng: np.random.Generator,
    bound: float,
) -> Tuple[np.ndarray, Optional[int]]:
    """Iterate x ← Φx + Lξ, stopping once the RMS amplitude exceeds ``bound``."""
    states = np.empty((steps + 1, 4))
    states[0] = x0
    x = x0.copy()
    lt = noise_factor.T
    n = 0
    while n < steps:
        chunk = min(CHUNK_STEPS, steps - n)
        kicks = rng.standard_normal((chunk, 4)) @ lt
        for k in range(chunk):
            x = phi @ x + kicks[k]
            n += 1
            states[n] = x
            rms = math.sqrt(float(x @ x) / 4.0)
            if not math.isfinite(rms):
                raise IntegrationError(n)
            if rms > bound:
                return states[: n + 1], n
    return states, None


def _initial_state(x0: Optional[Sequence[float]]) -> np.ndarray:
    if x0 is None:
        return np.zeros(4)
    state = np.asarray(x0, dtype=float)
    if state.shape != (4,) or not np.all(np.isfinite(state)):
        raise ValueError("x0 must be four finite numbers")
    return state


def _divergence_bound(x0: np.ndarray, step_covariance: np.ndarray, factor: float) -> float:
    reference = math.sqrt(float(x0 @ x0) / 4.0)
    if reference == 0.0:
        reference = math.sqrt(max(float(np.trace(step_covariance)), 0.0) / 4.0)
    if reference == 0.0:
        return math.inf
    return factor * reference


def simulate(
    params: SystemParams,
    drive: DriveConfig,
    noise: NoiseModel,
    dt: float,
    duration: float,
    seed: int,
    scheme: Union[Scheme, str] = Scheme.EULER_MARUYAMA,
    x0: Optional[Sequence[float]] = None,
    divergence_factor: float = DEFAULT_DIVERGENCE_FACTOR,
    decimation: int = 1,
) -> TrajectoryRecord:
    """Integrate dx = M x dt + √D dW.

    Euler-Maruyama uses Φ = I + M dt with increments √(D dt) ξ and requires
    dt ≤ 0.01/max(κ, |Δc|, |Δm|, g). The exact scheme propagates with
    Φ = exp(M dt) and the Van Loan step covariance, so any dt is accurate.

    Args:
        params: System parameters
        drive: Drive configuration
        noise: Input noise (same diffusion as the spectra)
        dt: Time step
        duration: Total time T; the record holds floor(T/dt) + 1 samples
        seed: Generator seed
        scheme: Time-stepping scheme
        x0: Initial state (None = origin)
        divergence_factor: Truncate once the RMS amplitude exceeds this
            multiple of the initial RMS (or of the one-step noise RMS when
            starting from the origin)
        decimation: Keep every n-th sample in the record

    Returns:
        TrajectoryRecord

    Raises:
        ValueError: For invalid step, duration or decimation
        IntegrationError: If the state becomes non-finite
    """
    scheme = Scheme(scheme)
    if not (dt > 0 and math.isfinite(dt)):
        raise ValueError(f"dt must be positive and finite, got {dt}")
    if not (duration > 0 and math.isfinite(duration)):
        raise ValueError(f"Duration must be positive and finite, got {duration}")
    if duration < dt:
        raise ValueError(f"Duration {duration} is shorter than one step {dt}")
    if decimation < 1:
        raise ValueError(f"Decimation must be >= 1, got {decimation}")
    if scheme is Scheme.EULER_MARUYAMA and dt > step_limit(params, drive):
        raise ValueError(
            f"dt = {dt:.3g} exceeds the Euler-Maruyama limit {step_limit(params, drive):.3g}"
        )

    entries = build_dynamical_matrix(params, drive).entries
    diffusion = diffusion_matrix(params, noise)
    if scheme is Scheme.EULER_MARUYAMA:
        phi = np.eye(4) + entries * dt
        step_cov = diffusion * dt
    else:
        phi, step_cov = discretize(entries, diffusion, dt)

    state = _initial_state(x0)
    steps = int(math.floor(duration / dt))
    bound = _divergence_bound(state, step_cov, divergence_factor)
    logger.debug(f"Integrating {steps} {scheme.value} steps (seed {seed})")

    states, truncated_at = _propagate(phi, _psd_sqrt(step_cov), state, steps, make_rng(seed), bound)
    if truncated_at is not None:
        logger.info(f"Trajectory diverged at step {truncated_at} (t = {truncated_at * dt:.6g})")

    times = np.arange(states.shape[0]) * dt
    return TrajectoryRecord(
        times=times[::decimation],
        quadratures=states[::decimation].T.copy(),
        seed=seed,
        dt=dt,
        scheme=scheme,
        params=params,
        drive=drive,
        diverged=truncated_at is not None,
        truncated_at=truncated_at,
        decimation=decimation,
        metadata={"noise": noise.to_dict(), "duration": duration, "bound": bound},
    )


def growth_rate(
    record: TrajectoryRecord, window_fraction: float = 0.8, min_ratio: float = 1e3
) -> float:
    """Exponential growth rate from a least-squares fit of log RMS amplitude.

    The fit window is the last ``window_fraction`` of the samples before
    truncation.

    Raises:
        NoGrowthDetected: If the amplitude grows by less than ``min_ratio``
    """
    amplitude = record.amplitude()
    times = record.times
    start = int(math.floor((1.0 - window_fraction) * amplitude.size))
    amplitude, times = amplitude[start:], times[start:]
    if amplitude.size < 4 or np.any(amplitude <= 0):
        raise NoGrowthDetected("Not enough non-zero samples to fit a growth rate")

    log_amp = np.log(amplitude)
    edge = max(1, amplitude.size // 20)
    ratio = math.exp(float(np.mean(log_amp[-edge:]) - np.mean(log_amp[:edge])))
    if ratio <= min_ratio:
        raise NoGrowthDetected(f"No growth detected (amplitude ratio {ratio:.3g})")
    slope, _ = np.polyfit(times, log_amp, 1)
    return float(slope)


@dataclass
class EnsembleGrowth:
    """Growth rates of an ensemble of trajectories."""

    rates: List[float]
    failures: int = 0

    @property
    def mean(self) -> float:
        return float(np.mean(self.rates)) if self.rates else math.nan

    @property
    def standard_error(self) -> float:
        if len(self.rates) < 2:
            return math.nan
        return float(np.std(self.rates, ddof=1) / math.sqrt(len(self.rates)))


@dataclass
class EnsembleRun:
    """Trajectories of a seeded ensemble in seed order."""

    records: List[TrajectoryRecord]
    truncated: bool = False


def collect_trajectories(outcome: SweepOutcome, seeds: Sequence[int]) -> EnsembleRun:
    """Turn per-seed sweep results into an ensemble, failing on the first error."""
    if outcome.errors:
        first = min(outcome.errors)
        message = f"Trajectory for seed {seeds[first]} failed: {outcome.errors[first]}"
        raise IntegrationError(-1, message)
    records = [r for r in outcome.results if r is not None]
    if outcome.truncated:
        logger.warning(f"Ensemble interrupted after {len(records)}/{len(seeds)} trajectories")
    return EnsembleRun(records=records, truncated=outcome.truncated)


def run_ensemble(
    params: SystemParams,
    drive: DriveConfig,
    noise: NoiseModel,
    dt: float,
    duration: float,
    seeds: Sequence[int],
    scheme: Union[Scheme, str] = Scheme.EULER_MARUYAMA,
    max_workers: Optional[int] = None,
    progress_callback: Optional[ProgressCallback] = None,
    **kwargs: Any,
) -> EnsembleRun:
    """Simulate one trajectory per seed concurrently.

    An interrupt keeps the trajectories already finished and marks the
    ensemble truncated.
    """
    seeds = list(seeds)

    def run_one(i: int) -> TrajectoryRecord:
        return simulate(params, drive, noise, dt, duration, seeds[i], scheme=scheme, **kwargs)

    outcome = run_indexed(
        run_one,
        len(seeds),
        max_workers=max_workers,
        progress_callback=progress_callback,
        label="trajectories",
    )
    return collect_trajectories(outcome, seeds)


def ensemble_growth_rate(records: Sequence[TrajectoryRecord], **kwargs: Any) -> EnsembleGrowth:
    """Mean growth rate over records that grow; non-growing ones are counted."""
    rates = []
    failures = 0
    for record in records:
        try:
            rates.append(growth_rate(record, **kwargs))
        except NoGrowthDetected as e:
            logger.debug(f"Seed {record.seed}: {e}")
            failures += 1
    if not rates:
        raise NoGrowthDetected("No trajectory in the ensemble grows")
    return EnsembleGrowth(rates=rates, failures=failures)


def sample_covariance(record: TrajectoryRecord, burn_in: int = 0) -> np.ndarray:
    """Sample covariance of the quadratures after ``burn_in`` samples."""
    data = record.quadratures[:, burn_in:]
    if data.shape[1] < 2:
        raise ValueError("Not enough samples after burn-in")
    return np.cov(data)


def welch_spectrum(
    record: TrajectoryRecord, quadrature: str = "xb", nperseg: int = 4096
) -> Tuple[np.ndarray, np.ndarray]:
    """Two-sided Welch PSD of one quadrature.

    Returns:
        (ω, S) with S normalized so that ∫ S dω/2π is the variance
    """
    index = QUADRATURES.index(quadrature)
    sample_dt = record.dt * record.decimation
    freqs, psd = welch(
        record.quadratures[index],
        fs=1.0 / sample_dt,
        nperseg=min(nperseg, record.samples),
        return_onesided=False,
        scaling="density",
    )
    order = np.argsort(freqs)
    return 2.0 * math.pi * freqs[order], psd[order]


def _modulated_matrix(
    params: SystemParams, drive: DriveConfig, t: float, drive_frequency: float
) -> np.ndarray:
    """Pre-RWA matrix: lab-frame mechanics and coupling 2g·cos(Ωd t)."""
    omega_m = params.omega_m or 0.0
    coupling = 2.0 * (2.0 * params.g * math.cos(drive_frequency * t))
    half_k = params.kappa / 2.0
    half_g = params.gamma_m / 2.0
    return np.array(
        [
            [-half_k, -drive.delta_c, 0.0, 0.0],
            [drive.delta_c, -half_k, coupling, 0.0],
            [0.0, 0.0, -half_g, omega_m],
            [coupling, 0.0, -omega_m, -half_g],
        ]
    )


def _check_nonrwa(params: SystemParams, dt: float) -> None:
    if params.omega_m is None:
        raise ValueError("Non-RWA integration requires omega_m")
    if not (dt > 0 and math.isfinite(dt)):
        raise ValueError(f"dt must be positive and finite, got {dt}")
    if dt > 0.01 / params.omega_m:
        raise ValueError(f"dt = {dt:.3g} does not resolve Ωm (limit {0.01 / params.omega_m:.3g})")
    if params.omega_m / params.kappa < 10:
        logger.warning(
            f"Ωm/κ = {params.omega_m / params.kappa:.3g} < 10; RWA comparison is not meaningful"
        )


def period_map(
    params: SystemParams, drive: DriveConfig, dt: float, diffusion: Optional[np.ndarray] = None
) -> Tuple[np.ndarray, Optional[np.ndarray], float]:
    """Propagator over one period of the pre-RWA system.

    Two-tone driving modulates the coupling at Ωd = Ωm + Δm; the period is
    split into ceil(τ/dt) exponential-midpoint substeps. Single-tone driving
    has constant coupling and uses one exact exponential over τ = 2π/Ωm.

    Returns:
        (Φτ, Qτ, τ); Qτ is None when ``diffusion`` is not given
    """
    _check_nonrwa(params, dt)
    if drive.mode is DriveMode.SINGLE_TONE_UPPER:
        period = 2.0 * math.pi / params.omega_m
        entries = build_dynamical_matrix(params, drive).entries
        if diffusion is None:
            return linalg.expm(entries * period), None, period
        phi, q = discretize(entries, diffusion, period)
        return phi, q, period

    drive_frequency = params.omega_m + drive.delta_m
    if drive_frequency <= 0:
        raise ValueError("Modulation frequency Ωm + Δm must be positive")
    period = 2.0 * math.pi / drive_frequency
    substeps = int(math.ceil(period / dt))
    h = period / substeps
    phi = np.eye(4)
    q = None if diffusion is None else np.zeros((4, 4))
    for k in range(substeps):
        entries = _modulated_matrix(params, drive, (k + 0.5) * h, drive_frequency)
        if diffusion is None:
            phi = linalg.expm(entries * h) @ phi
        else:
            step_phi, step_q = discretize(entries, diffusion, h)
            phi = step_phi @ phi
            q = step_phi @ q @ step_phi.T + step_q
    return phi, q, period


def floquet_rate(params: SystemParams, drive: DriveConfig, dt: float) -> float:
    """Largest Floquet exponent log max|eig Φτ| / τ of the pre-RWA system."""
    phi, _, period = period_map(params, drive, dt)
    multipliers = linalg.eigvals(phi)
    return float(math.log(np.max(np.abs(multipliers))) / period)


def brute_force_nonrwa(
    params: SystemParams,
    drive: DriveConfig,
    dt: float,
    duration: float,
    seed: int,
    noise: Optional[NoiseModel] = None,
    x0: Optional[Sequence[float]] = None,
    divergence_factor: float = DEFAULT_DIVERGENCE_FACTOR,
) -> TrajectoryRecord:
    """Integrate the linearized model without the rotating-wave approximation.

    The coupling is modulated explicitly as g(t) = 2g cos((Ωm + Δm)t), whose
    resonant part is the constant coupling g of the rotating-wave model, and
    the mechanics oscillate at Ωm in the lab frame. The record is sampled once
    per modulation period, so its ``dt`` is the period; ``dt`` given here is
    the integration substep.
    """
    noise = noise or NoiseModel()
    phi, q, period = period_map(params, drive, dt, diffusion_matrix(params, noise))
    if duration < period:
        raise ValueError(f"Duration {duration} is shorter than one period {period:.3g}")

    state = _initial_state(x0)
    periods = int(math.floor(duration / period))
    bound = _divergence_bound(state, q, divergence_factor)
    logger.debug(f"Propagating {periods} periods of {period:.4g} (seed {seed})")
    states, truncated_at = _propagate(phi, _psd_sqrt(q), state, periods, make_rng(seed), bound)
    if truncated_at is not None:
        logger.info(f"Non-RWA trajectory diverged after {truncated_at} periods")

    return TrajectoryRecord(
        times=np.arange(states.shape[0]) * period,
        quadratures=states.T.copy(),
        seed=seed,
        dt=period,
        scheme=Scheme.EXACT_OU,
        params=params,
        drive=drive,
        diverged=truncated_at is not None,
        truncated_at=truncated_at,
        metadata={"substep": dt, "duration": duration, "frame": "lab", "noise": noise.to_dict()},
    )
