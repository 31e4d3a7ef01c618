import numpy as np
import pytest

from vibpol import units
from vibpol.errors import ConfigurationError, InstabilityError
from vibpol.lattice import KGrid, dynamical_matrix, dyson_gf, omega_grid
from vibpol.md import MdOptions
from vibpol.model import ModelParams, onsite_matter_force_constant
from vibpol.vdmft import (
    BathModel,
    Hybridization,
    ImpurityResult,
    SelfEnergy,
    VdmftOptions,
    assemble_polariton_gf,
    causal_projection,
    discretize_bath,
    extract_self_energy,
    hybridization_update,
    kramers_kronig_real,
    lattice_gf,
    local_gf,
    local_gf_streaming,
    solve_impurity,
    spectral_distance,
    vdmft_loop,
)

DELTA = units.mev_to_hartree(1.0)


@pytest.fixture
def grid(matter):
    return omega_grid(3 * matter.omega_m, 4096)


def _pole(omega, w0, gamma, weight):
    z = omega + 1j * gamma
    return weight / (z**2 - w0**2)


def test_kramers_kronig_recovers_real_part(matter, grid):
    f = _pole(grid, 1.2 * matter.omega_m, 0.05 * matter.omega_m, 1e-4)
    re = kramers_kronig_real(grid, f.imag)
    inner = (grid > 0.3 * matter.omega_m) & (grid < 2.5 * matter.omega_m)
    err = np.abs(re - f.real)[inner].max() / np.abs(f).max()
    assert err < 5e-3


def test_causal_projection_restores_constant(matter, grid):
    f = _pole(grid, 1.2 * matter.omega_m, 0.05 * matter.omega_m, 1e-4)
    scale = np.abs(f).max()
    inner = ((grid > 0.3 * matter.omega_m) & (grid < 2.5 * matter.omega_m)).astype(float)
    proj, const = causal_projection(grid, f + 0.1 * scale, inner)
    assert const == pytest.approx(0.1 * scale, abs=5e-3 * scale)
    assert np.array_equal(proj.imag, f.imag)


def test_hybridization_vanishes_for_isolated_sites(grid):
    p = ModelParams.from_physical(Omega_m_mev=0.0).isolated_matter()
    sigma = SelfEnergy.constant(grid, 2e-5)
    d_loc = local_gf(lattice_gf(p, KGrid.uniform(p.a, 32), sigma, grid, DELTA), KGrid.uniform(p.a, 32))
    hyb = hybridization_update(d_loc, sigma, p, grid, DELTA)
    assert np.abs(hyb.values).max() < 1e-12 * np.abs(1 / d_loc).max()
    assert discretize_bath(hyb, 10).n_modes == 0


def test_hybridization_is_causal_for_the_band(matter, grid):
    kg = KGrid.uniform(matter.a, 512)
    d_loc = local_gf_streaming(matter, kg, None, grid, DELTA, chunk=100)
    ref = local_gf(lattice_gf(matter, kg, None, grid, DELTA), kg)
    assert np.allclose(d_loc, ref, rtol=1e-10, atol=1e-10 * np.abs(ref).max())
    hyb = hybridization_update(d_loc, None, matter, grid, DELTA)
    assert hyb.causal
    assert np.all(hyb.values.imag[1:] <= 0)


def test_single_pole_bath_is_exact(grid, matter):
    w0, c = 1.3 * matter.omega_m, 2e-3 * matter.omega_m
    hyb = Hybridization(grid, c**2 / ((grid + 1j * DELTA) ** 2 - w0**2), DELTA)
    bath = discretize_bath(hyb, 1)
    assert bath.frequencies[0] == pytest.approx(w0, rel=1e-3)
    assert bath.couplings[0] == pytest.approx(c, rel=0.02)


def test_bath_refinement_reduces_error(grid, matter):
    # semicircular band of width ~2 Omega_m
    lo, hi = matter.omega_m, np.sqrt(matter.omega_m**2 + 4 * matter.Omega_m**2)
    j = np.where((grid > lo) & (grid < hi), np.sqrt(np.clip((grid - lo) * (hi - grid), 0, None)), 0.0)
    modes = BathModel(grid[j > 0], np.sqrt(2 * grid[j > 0] * j[j > 0] * (grid[1] - grid[0]) / np.pi) * 1e-2)
    hyb = Hybridization(grid, modes.hybridization(grid, 5 * DELTA), 5 * DELTA)
    errs = [discretize_bath(hyb, n).reconstruction_error for n in (10, 30, 100, 300)]
    assert all(b < a * 1.05 for a, b in zip(errs, errs[1:]))
    assert errs[-1] < errs[0]
    with pytest.raises(ConfigurationError, match="bath modes"):
        discretize_bath(hyb, 3, tol=1e-6)


def test_extract_self_energy_roundtrip(matter, grid):
    z2 = (grid + 1j * DELTA) ** 2
    onsite = onsite_matter_force_constant(matter)
    bath = BathModel(np.array([0.9, 1.1, 1.4]) * matter.omega_m, np.array([2, 3, 2]) * 1e-3 * matter.omega_m**1.5)
    true = 3e-5 + _pole(grid, 1.5 * matter.omega_m, 0.1 * matter.omega_m, 2e-8)
    d = 1.0 / (z2 - onsite - bath.hybridization(grid, DELTA) - true)
    imp = ImpurityResult(grid, d, np.zeros(len(grid)), bath, onsite)
    raw = extract_self_energy(imp, matter, DELTA, causal=False)
    assert np.abs(raw.values - true).max() < 1e-10 * np.abs(true).max() + 1e-18
    proj = extract_self_energy(imp, matter, DELTA)
    region = np.abs(d) > 0.05 * np.abs(d).max()
    assert np.abs(proj.values - true)[region].max() < 0.02 * np.abs(true).max()
    assert proj.meta["sigma_inf"] is not None


def test_impurity_instability_detected(matter, grid):
    bath = BathModel(np.array([0.1 * matter.omega_m]), np.array([matter.omega_m]))
    with pytest.raises(InstabilityError):
        solve_impurity(matter, bath, MdOptions(n_trajectories=1), grid, DELTA)


def test_polariton_gf_reduces_to_harmonic(grid):
    p = ModelParams.from_physical(eta=0.1)
    k = np.array([0.0, 1e-3])
    gf = assemble_polariton_gf(p, SelfEnergy.zero(grid), k, grid, DELTA)
    ref = dyson_gf(dynamical_matrix(p, k), grid, DELTA)
    assert np.allclose(gf.values, ref)
    with pytest.raises(ConfigurationError):
        assemble_polariton_gf(p.isolated_matter(), SelfEnergy.zero(grid), k, grid, DELTA)
    with pytest.raises(ConfigurationError, match="grids"):
        lattice_gf(p, k, SelfEnergy.zero(grid[:-1]), grid, DELTA)


def test_spectral_distance():
    w = np.linspace(0, 1, 101)
    a = np.exp(-((w - 0.5) ** 2) / 0.01)
    assert spectral_distance(a, a, w) == 0.0
    assert spectral_distance(1.1 * a, a, w) == pytest.approx(0.1)


def test_loop_requires_matter_chain():
    with pytest.raises(ConfigurationError, match="isolated matter chain"):
        vdmft_loop(ModelParams.from_physical(eta=0.1))


def test_harmonic_limit_converges_in_one_iteration():
    p = ModelParams.from_physical(g_ratio=0.0).isolated_matter()
    md = MdOptions(dt=3.0, n_equil_steps=1024, n_trajectories=200, batch_size=100)
    res = vdmft_loop(p, VdmftOptions(md=md, nk_local=512, max_iter=3))
    assert res.converged and res.n_iterations == 1
    # Sigma is zero within its noise floor and the peaks are the bare band
    region = np.abs(res.impurity.gf) > 0.05 * np.abs(res.impurity.gf).max()
    assert np.abs(res.sigma.values[region]).max() < 3 * res.sigma.noise_floor
    for ik, k in enumerate(res.probe_k):
        w = np.sqrt(p.omega_m**2 + 4 * p.Omega_m**2 * np.sin(k * p.a / 2) ** 2)
        assert units.hartree_to_mev(abs(res.omega[np.argmax(res.spectra[-1][ik])] - w)) < 3.0
