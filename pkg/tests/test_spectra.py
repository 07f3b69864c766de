"""Tests for output spectra and sideband powers."""
import json
import logging
import math
import tempfile
from pathlib import Path

import numpy as np
import pytest  # type: ignore

from twotone.errors import UnstableSpectrumError
from twotone.model import DriveConfig, SystemParams, to_angular
from twotone.spectra import (
    NoiseModel,
    apply_cooling,
    bae_cancellation_check,
    diffusion_matrix,
    effective_frequency_shift,
    extract_features,
    lorentzian,
    normalized_power,
    output_spectrum,
    readout_rate,
    sideband_power,
    sideband_power_components,
    sideband_power_exact,
    to_db,
)
from twotone.stability import analyze


def _params(cooperativity: float, gamma_m: float = 1e-4) -> SystemParams:
    return SystemParams.from_cooperativity(kappa=1.0, gamma_m=gamma_m, cooperativity=cooperativity)


def test_noise_model_validation() -> None:
    """Test invalid occupations and coupling fractions are rejected."""
    with pytest.raises(ValueError):
        NoiseModel(n_th=-1.0)
    with pytest.raises(ValueError):
        NoiseModel(n_ba=math.nan)
    with pytest.raises(ValueError):
        NoiseModel(kappa_ex_fraction=0.0)
    with pytest.raises(ValueError):
        NoiseModel(kappa_ex_fraction=1.5)


def test_diffusion_matrix() -> None:
    """Test D = diag(2κn_ba, 2κn_ba, 2Γm n_th, 2Γm n_th) and its port split."""
    params = _params(2.0, gamma_m=0.01)
    noise = NoiseModel(n_th=3.0, n_ba=0.5, kappa_ex_fraction=0.7)
    np.testing.assert_allclose(diffusion_matrix(params, noise), np.diag([1.0, 1.0, 0.06, 0.06]))
    np.testing.assert_allclose(
        diffusion_matrix(params, noise, "thermal"), np.diag([0.0, 0.0, 0.06, 0.06])
    )
    np.testing.assert_allclose(
        diffusion_matrix(params, noise, "backaction"), np.diag([1.0, 1.0, 0.0, 0.0])
    )
    with pytest.raises(ValueError):
        diffusion_matrix(params, noise, "pump")


def test_readout_rate() -> None:
    """Test the readout rate equals 2ηCΓm."""
    params = _params(7.0, gamma_m=0.01)
    noise = NoiseModel(kappa_ex_fraction=0.5)
    assert readout_rate(params, noise) == pytest.approx(2.0 * 0.5 * 7.0 * 0.01)


@pytest.mark.parametrize("eta", [1.0, 0.5])
def test_uncoupled_floor_is_flat(eta: float) -> None:
    """Test the g = 0 output is white at n_ba for any detuning and coupling fraction."""
    params = SystemParams(kappa=1.0, gamma_m=0.01, g=0.0)
    noise = NoiseModel(n_th=4.0, n_ba=0.7, kappa_ex_fraction=eta)
    omega = np.linspace(-3.0, 3.0, 301)
    for drive in (DriveConfig(), DriveConfig(delta_c=0.8, delta_m=0.02)):
        spec = output_spectrum(params, drive, noise, omega_grid=omega)
        np.testing.assert_allclose(spec.psd_total, 0.7, rtol=1e-12)
        np.testing.assert_allclose(spec.psd_floor, 0.7, rtol=1e-12)
        assert spec.features["total_power"] == 0.0


def test_decomposition_is_exact() -> None:
    """Test total = thermal + backaction with both parts non-negative."""
    params = _params(2.0, gamma_m=0.01)
    drive = DriveConfig.from_normalized(params, 0.3, 4.0)
    spec = output_spectrum(params, drive, NoiseModel(n_th=2.0), fit=False)
    np.testing.assert_array_equal(spec.psd_total, spec.psd_thermal + spec.psd_backaction)
    assert np.all(spec.psd_thermal >= 0)
    assert np.all(spec.psd_backaction >= 0)
    assert spec.columns() == ["omega", "psd_total", "psd_thermal", "psd_backaction"]
    assert len(spec.rows()) == spec.omega_grid.size


def test_two_lorentzians_at_zero_cavity_detuning() -> None:
    """Test the feature splits into peaks at ±Δm with width Γm when Δc = 0."""
    params = _params(0.1, gamma_m=1e-3)
    drive = DriveConfig.from_normalized(params, 0.0, 18.0)
    spec = output_spectrum(params, drive, NoiseModel(n_th=1.0, n_ba=0.0))

    features = spec.features
    assert features["fit"] == "ok"
    assert len(features["peaks"]) == 2
    assert features["delta_eff"] == pytest.approx(drive.delta_m, rel=0.01)
    assert features["gamma_eff"] == pytest.approx(params.gamma_m, rel=0.01)
    centers = [p["center"] for p in features["peaks"]]
    assert centers[0] == pytest.approx(-drive.delta_m, rel=0.01)
    assert centers[1] == pytest.approx(drive.delta_m, rel=0.01)


def test_sign_flip_reflects_frequency() -> None:
    """Test S(ω; -Δc, -Δm) = S(-ω; Δc, Δm)."""
    params = _params(2.0, gamma_m=0.01)
    noise = NoiseModel(n_th=3.0, n_ba=0.5)
    omega = np.linspace(-0.05, 0.05, 201)
    drive = DriveConfig.from_normalized(params, 0.3, 4.0)
    flipped = DriveConfig.from_normalized(params, -0.3, -4.0)
    spec = output_spectrum(params, drive, noise, omega_grid=omega, fit=False)
    mirror = output_spectrum(params, flipped, noise, omega_grid=omega, fit=False)
    np.testing.assert_allclose(mirror.psd_total, spec.psd_total[::-1], rtol=1e-9)


def test_numeric_power_matches_exact() -> None:
    """Test the integrated feature agrees with the Lyapunov result."""
    params = _params(1.0, gamma_m=1e-3)
    noise = NoiseModel(n_th=5.0, n_ba=0.0)
    drive = DriveConfig.from_normalized(params, 0.0, 4.0)
    spec = output_spectrum(params, drive, noise, fit=False)
    exact = sideband_power_exact(params, drive, noise)
    assert sideband_power(spec) == pytest.approx(exact.total, rel=0.01)
    assert not spec.features["truncated"]
    components = sideband_power_components(spec)
    assert components["thermal"] == pytest.approx(exact.thermal, rel=0.01)


def test_thermal_quanta() -> None:
    """Test a bare thermal bath reads n_th quanta and scales linearly."""
    params = _params(2.0)
    drive = DriveConfig.from_normalized(params, 0.0, 6.0)
    one = sideband_power_exact(params, drive, NoiseModel(n_th=1.0, n_ba=0.0))
    two = sideband_power_exact(params, drive, NoiseModel(n_th=2.0, n_ba=0.0))
    assert one.thermal == pytest.approx(1.0, rel=0.01)
    assert one.backaction == pytest.approx(0.0, abs=1e-9)
    assert two.thermal == pytest.approx(2.0 * one.thermal, rel=1e-9)


@pytest.mark.parametrize("cooperativity", [1.0, 7.0, 14.0])
def test_backaction_evasion(cooperativity: float) -> None:
    """Test backaction drops out at Δc = Δm = 0 and 2C·n_ba quanta are evaded."""
    params = _params(cooperativity)
    report = bae_cancellation_check(params, NoiseModel(n_th=1.0, n_ba=0.5))
    assert report.cancelled
    assert report.expected_quanta == pytest.approx(cooperativity)
    assert report.relative_error < 0.01
    assert report.to_dict()["cancelled"] is True


def test_three_db_dip() -> None:
    """Test equal thermal and backaction noise halve the power at the BAE point."""
    cooperativity, n_th = 7.0, 10.0
    params = _params(cooperativity)
    noise = NoiseModel(n_th=n_th, n_ba=n_th / (2.0 * cooperativity))
    at_bae = sideband_power_exact(params, DriveConfig(), noise).total
    off = sideband_power_exact(params, DriveConfig.from_normalized(params, 0.0, 18.0), noise)
    assert at_bae == pytest.approx(n_th, rel=0.01)
    assert at_bae / off.total == pytest.approx(0.5, abs=0.02)
    assert to_db(at_bae / off.total) == pytest.approx(-3.0, abs=0.2)


def test_power_diverges_as_inverse_margin() -> None:
    """Test P ∝ 1/|margin| on the approach to threshold."""
    params = _params(2.0, gamma_m=1e-3)
    noise = NoiseModel(n_th=1.0, n_ba=0.5)

    def margin_at(dm: float) -> float:
        return analyze(params, DriveConfig.from_normalized(params, 1.0, dm)).margin

    lo, edge = 0.0, 2.0
    for _ in range(60):
        mid = 0.5 * (lo + edge)
        if margin_at(mid) < 0:
            lo = mid
        else:
            edge = mid
    assert edge == pytest.approx(2.0 - math.sqrt(3.0), rel=0.01)

    margins, powers = [], []
    for eps in (1e-2, 5e-3, 2e-3, 1e-3):
        drive = DriveConfig.from_normalized(params, 1.0, edge * (1.0 - eps))
        margin = analyze(params, drive).margin
        assert margin < 0
        if abs(margin) < 1e-7:
            continue
        margins.append(abs(margin))
        powers.append(sideband_power_exact(params, drive, noise).total)
    assert len(margins) >= 3
    slope = np.polyfit(np.log(margins), np.log(powers), 1)[0]
    assert slope == pytest.approx(-1.0, abs=0.05)


def test_unstable_point_raises() -> None:
    """Test spectra are refused inside the unstable region."""
    params = _params(2.0, gamma_m=0.01)
    drive = DriveConfig.from_normalized(params, 1.0, 1.0)
    with pytest.raises(UnstableSpectrumError) as exc_info:
        output_spectrum(params, drive, NoiseModel())
    assert exc_info.value.margin > 0
    with pytest.raises(UnstableSpectrumError):
        sideband_power_exact(params, drive, NoiseModel(n_th=1.0))


def test_normalized_power_reference() -> None:
    """Test P/P₀ is 1 at the reference detunings."""
    params = _params(7.0)
    noise = NoiseModel(n_th=7.0, n_ba=0.5)
    reference = DriveConfig.from_normalized(params, 0.0, -18.0)
    assert normalized_power(params, reference, noise) == pytest.approx(1.0)
    bae = normalized_power(params, DriveConfig(), noise)
    assert 0 < bae < 1


def test_frequency_shift_matches_full_model() -> None:
    """Test Δeff tracks the full slow-branch frequency along the Δ̃c = -0.07 cut."""
    params = SystemParams.from_cooperativity(
        kappa=to_angular(2.81e6, "hz"), gamma_m=to_angular(110.0, "hz"), cooperativity=7.0
    )
    for dm_norm in np.linspace(-18.0, -3.0, 16):
        shift = effective_frequency_shift(
            params, DriveConfig.from_normalized(params, -0.07, float(dm_norm))
        )
        assert shift.margin < 0
        assert shift.delta_eff == pytest.approx(shift.delta_eff_full, rel=0.02)

    locked = effective_frequency_shift(params, DriveConfig.from_normalized(params, -0.07, -1.0))
    assert locked.delta_eff == 0.0


def test_frequency_shift_warns_at_unstable_point(caplog: pytest.LogCaptureFixture) -> None:
    """Test an unstable point still returns values but logs a warning."""
    params = _params(2.0, gamma_m=0.01)
    with caplog.at_level(logging.WARNING, logger="twotone.spectra"):
        effective_frequency_shift(params, DriveConfig.from_normalized(params, 0.0, 5.0))
        assert not caplog.records

        shift = effective_frequency_shift(params, DriveConfig.from_normalized(params, 1.0, 1.0))
        assert shift.margin > 0
        assert any("unstable point" in r.getMessage() for r in caplog.records)

        caplog.clear()
        quiet = effective_frequency_shift(
            params, DriveConfig.from_normalized(params, 1.0, 1.0), warn_unstable=False
        )
        assert quiet == shift
        assert not caplog.records


def test_frequency_shift_without_detuning() -> None:
    """Test Δeff = Δm in both models when Δc = 0."""
    params = _params(3.0, gamma_m=0.01)
    drive = DriveConfig.from_normalized(params, 0.0, 5.0)
    shift = effective_frequency_shift(params, drive)
    assert shift.self_energy == 0.0
    assert shift.delta_eff == pytest.approx(drive.delta_m)
    assert shift.delta_eff_full == pytest.approx(drive.delta_m, rel=1e-9)


def test_frequency_vanishes_at_threshold() -> None:
    """Test both frequency estimates vanish on the full-model threshold."""
    params = _params(7.0, gamma_m=1e-3)
    for dc_norm in np.linspace(0.1, 1.5, 10):
        dc = float(dc_norm)

        def margin(dm: float) -> float:
            return analyze(params, DriveConfig.from_normalized(params, dc, dm)).margin

        lo, hi = 0.0, 2.0 * 7.0 * dc / (1.0 + dc * dc)
        assert margin(lo) < 0 < margin(hi)
        for _ in range(60):
            mid = 0.5 * (lo + hi)
            if margin(mid) < 0:
                lo = mid
            else:
                hi = mid
        shift = effective_frequency_shift(params, DriveConfig.from_normalized(params, dc, hi))
        assert shift.delta_eff < 1e-3 * params.gamma_m
        assert shift.delta_eff_full < 1e-3 * params.gamma_m


def test_extract_features_two_peaks() -> None:
    """Test a synthetic double Lorentzian is recovered."""
    omega = np.linspace(-1.0, 1.0, 2001)
    feature = lorentzian(omega, 2.0, -0.3, 0.05) + lorentzian(omega, 1.0, 0.4, 0.08)
    features = extract_features(omega, feature)
    assert features["fit"] == "ok"
    low, high = features["peaks"]
    assert low["center"] == pytest.approx(-0.3, abs=1e-4)
    assert high["center"] == pytest.approx(0.4, abs=1e-4)
    assert low["fwhm"] == pytest.approx(0.05, rel=1e-3)
    assert high["amplitude"] == pytest.approx(1.0, rel=1e-3)
    assert features["delta_eff"] == pytest.approx(0.35, abs=1e-4)


def test_extract_features_single_peak() -> None:
    """Test a single Lorentzian reports zero splitting."""
    omega = np.linspace(-1.0, 1.0, 1001)
    features = extract_features(omega, lorentzian(omega, 3.0, 0.1, 0.2))
    assert len(features["peaks"]) == 1
    assert features["delta_eff"] == 0.0
    assert features["gamma_eff"] == pytest.approx(0.2, rel=1e-3)


def test_extract_features_empty() -> None:
    """Test a non-positive feature yields no peaks."""
    omega = np.linspace(-1.0, 1.0, 101)
    features = extract_features(omega, -np.ones_like(omega))
    assert features["peaks"] == []
    assert features["fit"] == "none"
    assert math.isnan(features["gamma_eff"])


def test_apply_cooling() -> None:
    """Test a cooling tone lowers C and n_th together."""
    params = _params(7.0, gamma_m=0.01)
    cooled, noise = apply_cooling(params, NoiseModel(n_th=100.0), 0.1)
    assert cooled.cooperativity == pytest.approx(0.7)
    assert noise.n_th == pytest.approx(10.0)
    assert noise.n_ba == 0.5


def test_spectrum_to_json() -> None:
    """Test the JSON export carries the inputs and the spectrum."""
    params = _params(1.0, gamma_m=0.01)
    omega = np.linspace(-0.1, 0.1, 11)
    spec = output_spectrum(
        params, DriveConfig(delta_m=0.01), NoiseModel(n_th=1.0), omega_grid=omega, fit=False
    )
    data = json.loads(spec.to_json())
    assert data["noise"]["n_th"] == 1.0
    assert len(data["spectrum"]) == 11
    assert data["drive"]["mode"] == "two_tone_balanced"

    with tempfile.TemporaryDirectory() as tmpdir:
        path = Path(tmpdir) / "spectrum.json"
        spec.save(str(path))
        assert json.loads(path.read_text(encoding="utf-8")) == data
