import csv

import numpy as np
import pytest

from vibpol import units
from vibpol.errors import ConfigurationError
from vibpol.lattice import KGrid, harmonic_gf, omega_grid, phonon_basis
from vibpol.model import ModelParams
from vibpol.spectra import (
    DISPERSION_COLUMNS,
    RABI_COLUMNS,
    SPECTRUM_COLUMNS,
    RabiScan,
    find_peaks,
    lifetime_fs,
    rabi_from_spectrum,
    rabi_harmonic,
    rabi_scan,
    rabi_scp,
    spectral_function,
    tuning_frequency,
    write_dispersion_csv,
    write_rabi_csv,
    write_spectrum_csv,
)
from vibpol.vdmft import SelfEnergy

MEV = units.mev_to_hartree(1.0)


def _lorentz(w, c, fwhm, h=1.0):
    g = fwhm / 2
    return h * g**2 / ((w - c) ** 2 + g**2)


def test_two_lorentzians_recovered():
    w = np.linspace(300, 700, 4001) * MEV
    a = _lorentz(w, 440 * MEV, 5 * MEV) + _lorentz(w, 528 * MEV, 8 * MEV, 0.7)
    peaks = find_peaks(w, a)
    assert len(peaks) == 2
    step = w[1] - w[0]
    for p, c, fw in zip(peaks, (440, 528), (5, 8)):
        assert abs(p.position - c * MEV) <= step
        assert p.fwhm == pytest.approx(fw * MEV, rel=0.05)


def test_overlapping_pair_is_fitted():
    w = np.linspace(300, 700, 4001) * MEV
    a = _lorentz(w, 480 * MEV, 30 * MEV) + _lorentz(w, 510 * MEV, 30 * MEV)
    peaks = find_peaks(w, a)
    assert len(peaks) == 2 and all(p.fitted for p in peaks)
    assert [p.position_mev for p in peaks] == pytest.approx([480, 510], abs=0.5)
    assert [p.fwhm_mev for p in peaks] == pytest.approx([30, 30], rel=0.02)


def test_single_lorentzian_width_is_two_delta():
    p = ModelParams.from_physical().isolated_matter()
    omega = omega_grid(3 * p.omega_m, 8192)
    delta = 2 * MEV
    spec = spectral_function(harmonic_gf(phonon_basis(p, [0.0]), omega, delta))
    (peak,) = spec.peaks[0]
    assert peak.fwhm == pytest.approx(2 * delta, abs=2 * (omega[1] - omega[0]))
    assert peak.position == pytest.approx(p.omega_m, abs=omega[1] - omega[0])


def test_monotone_and_empty_slices():
    w = np.linspace(0, 1, 100)
    assert find_peaks(w, w) == []
    assert find_peaks(w, np.zeros_like(w)) == []


def test_noise_wiggle_is_not_split():
    rng = np.random.default_rng(4)
    w = np.linspace(400, 700, 3001) * MEV
    a = _lorentz(w, 550 * MEV, 60 * MEV) + 0.02 * np.sin(w / MEV * 1.3) * (np.abs(w / MEV - 550) < 15)
    a += 1e-4 * rng.standard_normal(len(w))
    peaks = find_peaks(w, a, refine=True)
    assert len(peaks) == 1
    assert peaks[0].position_mev == pytest.approx(550, abs=3)


def test_spectrum_trace_is_sum_of_components():
    p = ModelParams.from_physical(eta=0.1)
    omega = omega_grid(3 * p.omega_m, 2048)
    spec = spectral_function(harmonic_gf(phonon_basis(p, [0.0, 0.01]), omega, MEV))
    assert np.abs(spec.values - spec.components.sum(-1)).max() <= 1e-12 * spec.values.max()
    for peaks in spec.peaks:
        assert all(pk.fwhm > 0 for pk in peaks)
        assert [pk.position for pk in peaks] == sorted(pk.position for pk in peaks)
    with pytest.raises(ConfigurationError):
        spectral_function(harmonic_gf(phonon_basis(p, [0.0]), omega, MEV), method="DFT")


def test_lifetime():
    # 41.36 meV corresponds to a 100 fs period
    assert lifetime_fs(units.mev_to_hartree(41.3567)) == pytest.approx(100.0, rel=1e-3)


def test_harmonic_rabi():
    p = ModelParams.from_physical()
    assert rabi_harmonic(p) == 0.0
    p = p.with_(eta=0.1)
    assert units.hartree_to_mev(rabi_harmonic(p)) == pytest.approx(88.0, abs=0.5)
    # eigenvalue based: no dependence on spectral normalization
    omega = omega_grid(3 * p.omega_m, 8192)
    a = spectral_function(harmonic_gf(phonon_basis(p, [0.0]), omega, MEV)).values[0]
    r1, _ = rabi_from_spectrum(omega, a)
    r2, _ = rabi_from_spectrum(omega, 37.0 * a)
    assert r1 == r2 == pytest.approx(rabi_harmonic(p), abs=omega[1] - omega[0])


def test_rabi_scp_reduces_to_harmonic_at_g0():
    p = ModelParams.from_physical(eta=0.05, g_ratio=0.0)
    assert rabi_scp(p) == pytest.approx(rabi_harmonic(p), rel=1e-10)


def test_rabi_scan_harmonic_linearity():
    p = ModelParams.from_physical()
    etas = np.round(np.arange(0.02, 0.101, 0.01), 3)
    scan = rabi_scan(p, etas, "bare")
    ratio = scan.harmonic / etas
    assert np.all(np.abs(ratio / (2 * p.omega_m) - 1) < 0.02)
    assert scan.vdmft is None
    with pytest.raises(ConfigurationError):
        rabi_scan(p, [-0.1], "bare")
    with pytest.raises(ConfigurationError):
        rabi_scan(p.isolated_matter(), etas, "bare")


def test_rabi_scan_with_constant_sigma_matches_scp():
    # a purely static self-energy equal to the SCP shift reproduces the SCP splitting
    p = ModelParams.from_physical()
    from vibpol.scp import scp_solve

    scp = scp_solve(p.isolated_matter())
    omega = omega_grid(3 * p.omega_m, 8192)
    sigma = SelfEnergy.constant(omega, scp.static_shift)
    etas = [0.05, 0.1]
    scan = rabi_scan(p, etas, "scp", sigma=sigma, delta=MEV, scp=scp, workers=2)
    assert scan.omega_0 == pytest.approx(tuning_frequency(p, "scp", scp=scp))
    assert scan.vdmft == pytest.approx(scan.scp, abs=2 * (omega[1] - omega[0]))


def test_tuning_validation():
    p = ModelParams.from_physical()
    with pytest.raises(ConfigurationError):
        tuning_frequency(p, "vdmft")
    with pytest.raises(ConfigurationError):
        RabiScan(np.zeros(1), "other", 0.0, np.zeros(1), np.zeros(1), None)


def _read(path):
    with open(path) as fh:
        return list(csv.reader(fh))


def test_csv_schemas(tmp_path):
    p = ModelParams.from_physical(eta=0.1)
    basis = phonon_basis(p, KGrid.full_zone(p.a, 5))
    write_dispersion_csv(tmp_path / "d.csv", basis)
    rows = _read(tmp_path / "d.csv")
    assert tuple(rows[0]) == DISPERSION_COLUMNS and len(rows) == 1 + 5 * 2
    assert all(0.0 <= float(r[3]) <= 1.0 for r in rows[1:])

    omega = omega_grid(3 * p.omega_m, 64)
    spec = spectral_function(harmonic_gf(phonon_basis(p, [0.0]), omega, MEV))
    write_spectrum_csv(tmp_path / "s.csv", spec)
    rows = _read(tmp_path / "s.csv")
    assert tuple(rows[0]) == SPECTRUM_COLUMNS and len(rows) == 65
    for r in rows[1:]:
        assert float(r[2]) == pytest.approx(float(r[3]) + float(r[4]), rel=1e-12, abs=1e-300)

    scan = rabi_scan(p, [0.0, 0.1], "bare")
    write_rabi_csv(tmp_path / "r.csv", scan)
    rows = _read(tmp_path / "r.csv")
    assert tuple(rows[0]) == RABI_COLUMNS
    assert rows[1][1] == "bare" and rows[1][4] == "nan"
