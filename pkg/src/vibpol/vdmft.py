"""Vibrational dynamical mean-field theory (VDMFT).

Self-energies are carried in frequency-squared units on the matter
coordinate and are referenced to the *bare* dynamical matrix, so the static
SCP shift and the dynamic broadening live in the same object:

    D(k, w)^-1 = (w + i delta)^2 - D_bare(k) - P Sigma(w) P

The impurity is one anharmonic matter coordinate with the bare on-site
force constant ``w_loc^2 = wm^2 + 2 Wm^2 + 2 d_se`` coupled to a discretized
harmonic bath that reproduces the hybridization

    Delta(w) = (w + i delta)^2 - w_loc^2 - Sigma(w) - 1/D_loc(w).
"""

import logging
from dataclasses import dataclass, field, replace

import numpy as np
from scipy.integrate import cumulative_trapezoid
from scipy.signal import hilbert, savgol_filter

from . import units
from .errors import ConfigurationError, InstabilityError
from .lattice import KGrid, MatrixGF, dynamical_matrix, dyson_gf, omega_grid
from .md import ImpurityBathSystem, MdOptions, STABILITY_LIMIT, estimate_gf, run_trajectories
from .model import onsite_matter_force_constant
from .scp import scp_solve

log = logging.getLogger(__name__)


@dataclass
class SelfEnergy:
    """Local matter self-energy ``Sigma(w)`` (frequency squared, bare reference)."""

    omega: np.ndarray
    values: np.ndarray
    reference: float = None
    iteration: int = 0
    noise: np.ndarray = None
    noise_floor: float = 0.0
    smoothing: dict = None
    meta: dict = field(default_factory=dict)

    @classmethod
    def constant(cls, omega, value, **kw):
        omega = np.asarray(omega, dtype=float)
        return cls(omega=omega, values=np.full(len(omega), value, dtype=complex), **kw)

    @classmethod
    def zero(cls, omega, **kw):
        return cls.constant(omega, 0.0, **kw)


@dataclass
class Hybridization:
    omega: np.ndarray
    values: np.ndarray
    delta: float
    clipped: float = 0.0
    causal: bool = True


@dataclass
class BathModel:
    """Discrete harmonic bath, ``Delta_fit(z) = sum_b c_b^2 / (z^2 - w_b^2)``."""

    frequencies: np.ndarray
    couplings: np.ndarray
    reconstruction_error: float = 0.0

    @property
    def n_modes(self):
        return len(self.frequencies)

    def hybridization(self, omega, delta):
        z2 = (np.asarray(omega) + 1j * delta) ** 2
        if self.n_modes == 0:
            return np.zeros(len(z2), dtype=complex)
        return np.sum(
            self.couplings[:, None] ** 2 / (z2[None, :] - self.frequencies[:, None] ** 2), axis=0
        )

    def static_shift(self):
        """``Delta_fit(0) = -sum_b c_b^2 / w_b^2``."""
        if self.n_modes == 0:
            return 0.0
        return -float(np.sum(self.couplings**2 / self.frequencies**2))


def _check_grid(omega, sigma):
    if sigma is None:
        return None
    if isinstance(sigma, SelfEnergy):
        if len(sigma.omega) != len(omega) or not np.allclose(sigma.omega, omega, rtol=1e-12, atol=0):
            raise ConfigurationError("self-energy and Green's function frequency grids differ")
        return sigma.values
    sigma = np.asarray(sigma)
    if sigma.ndim == 0:
        return np.full(len(omega), complex(sigma))
    if sigma.shape != (len(omega),):
        raise ConfigurationError("self-energy and Green's function frequency grids differ")
    return sigma


def lattice_gf(params, kgrid, sigma, omega, delta):
    """Lattice Dyson equation with the local matter self-energy."""
    k = kgrid.points if isinstance(kgrid, KGrid) else np.atleast_1d(np.asarray(kgrid, float))
    omega = np.asarray(omega, dtype=float)
    values = dyson_gf(dynamical_matrix(params, k), omega, delta, _check_grid(omega, sigma))
    return MatrixGF(k=k, omega=omega, values=values, delta=delta, basis="site")


def local_gf(gf, kgrid):
    """BZ average of the matter-matter element."""
    if not isinstance(kgrid, KGrid) or kgrid.kind != "uniform":
        raise ConfigurationError("local GF needs a uniform Brillouin-zone grid with weights")
    if len(kgrid) != gf.values.shape[0]:
        raise ConfigurationError("k-grid does not match the Green's function")
    m = gf.n_coords - 1
    return np.tensordot(kgrid.weights, gf.values[:, :, m, m], axes=(0, 0))


def local_gf_streaming(params, kgrid, sigma, omega, delta, chunk=256):
    """``local_gf(lattice_gf(...))`` without holding all k-points in memory."""
    if kgrid.kind != "uniform":
        raise ConfigurationError("local GF needs a uniform Brillouin-zone grid with weights")
    out = np.zeros(len(omega), dtype=complex)
    for s in range(0, len(kgrid), chunk):
        sub = slice(s, s + chunk)
        gf = lattice_gf(params, kgrid.points[sub], sigma, omega, delta)
        m = gf.n_coords - 1
        out += np.tensordot(kgrid.weights[sub], gf.values[:, :, m, m], axes=(0, 0))
    return out


def hybridization_update(d_loc, sigma, params, omega, delta, noise_threshold=1e-3):
    """Cavity function of the local GF, with causality enforced.

    Positive ``Im Delta`` at ``w > 0`` is clipped to zero; if the clipped
    magnitude exceeds ``noise_threshold * max|Delta|`` the result is flagged
    as inconsistent (``causal=False``).
    """
    omega = np.asarray(omega, dtype=float)
    sig = _check_grid(omega, sigma)
    if sig is None:
        sig = 0.0
    z2 = (omega + 1j * delta) ** 2
    w_loc2 = onsite_matter_force_constant(params)
    values = z2 - w_loc2 - sig - 1.0 / np.asarray(d_loc)
    bad = (omega > 0) & (values.imag > 0)
    clipped = float(values.imag[bad].max()) if bad.any() else 0.0
    values = np.where(bad, values.real + 0j, values)
    # guard the relative test when Delta vanishes (isolated sites)
    scale = max(np.abs(values).max(), 1e-12 * w_loc2)
    causal = clipped <= noise_threshold * scale
    if not causal:
        log.warning("hybridization: clipped Im Delta up to %.3g (%.2g of max)", clipped, clipped / scale)
    return Hybridization(omega=omega, values=values, delta=delta, clipped=clipped, causal=causal)


def discretize_bath(hyb, n_bath, tol=None):
    """Equal-weight discretization of ``J(w) = -Im Delta(w)`` into harmonic modes.

    Each bin holds ``1/n_bath`` of the spectral weight; its mode sits at the
    J-weighted mean frequency with ``c_b^2 = (2 w_b / pi) int_bin J``, which is
    exact for a single sharp pole.
    """
    if n_bath < 1:
        raise ConfigurationError("need at least one bath mode", key="n_bath")
    omega = hyb.omega
    spec = np.where(omega > 0, np.clip(-hyb.values.imag, 0.0, None), 0.0)
    cum = cumulative_trapezoid(spec, omega, initial=0.0)
    total = cum[-1]
    if total <= 1e-12 * omega[-1] ** 3:  # no spectral weight beyond roundoff
        return BathModel(np.zeros(0), np.zeros(0), 0.0)
    cum_w = cumulative_trapezoid(spec * omega, omega, initial=0.0)
    # drop flat stretches so cum is strictly increasing for interpolation
    keep = np.concatenate([[True], np.diff(cum) > 0])
    targets = total * np.arange(n_bath + 1) / n_bath
    edges = np.interp(targets, cum[keep], omega[keep])
    first = np.interp(edges, omega, cum_w)
    weight = np.diff(targets)
    freqs = np.diff(first) / weight
    couplings = np.sqrt(2.0 * freqs * weight / np.pi)
    bath = BathModel(freqs, couplings)
    fit = bath.hybridization(omega, hyb.delta)
    bath.reconstruction_error = float(np.abs(fit - hyb.values).max() / np.abs(hyb.values).max())
    if tol is not None and bath.reconstruction_error > tol:
        raise ConfigurationError(
            f"bath reconstruction error {bath.reconstruction_error:.3g} exceeds {tol:.3g}; "
            f"increase the number of bath modes (now {n_bath})",
            key="n_bath",
        )
    return bath


@dataclass
class ImpurityResult:
    omega: np.ndarray
    gf: np.ndarray
    stderr: np.ndarray
    bath: BathModel
    onsite: float
    meta: dict = field(default_factory=dict)


def solve_impurity(params, bath, opts, omega, delta, onsite=None):
    """MD solution of the anharmonic impurity coupled to ``bath``.

    The impurity potential is ``1/2 w_loc^2 r^2 + 1/2 g r^4`` (``onsite``
    overrides ``w_loc^2``). Returns ``D_imp(w + i delta)`` estimated with an
    exponential window ``tau = 1/delta``.
    """
    if onsite is None:
        onsite = onsite_matter_force_constant(params)
    static = onsite + bath.static_shift()
    if static <= 0:
        raise InstabilityError(
            f"impurity statically unstable: w_loc^2 + Delta(0) = {static:.4g} <= 0"
        )
    system = ImpurityBathSystem(onsite, params.g, bath.frequencies, bath.couplings)
    trajs = run_trajectories(params, system, opts)
    gf, _ = estimate_gf(trajs, params, [0.0], omega, opts, delta)
    meta = dict(gf.meta)
    err = meta.pop("stderr")[0, :, 0, 0]
    return ImpurityResult(
        omega=np.asarray(omega), gf=gf.values[0, :, 0, 0], stderr=err, bath=bath, onsite=onsite, meta=meta
    )


def relevant_region(gf_values, fraction=0.05):
    """Frequencies where ``-Im D`` exceeds ``fraction`` of its maximum."""
    a = -np.asarray(gf_values).imag
    return a >= fraction * a.max()


def kramers_kronig_real(omega, imag, pad=4):
    """Real part of a causal function from its imaginary part on ``[0, w_max]``.

    ``imag`` is extended oddly to negative frequencies (``f(-w*) = f(w)*``),
    zero-padded to ``pad`` times its length and Hilbert transformed by FFT.
    The additive constant ``f(infinity)`` is not included.
    """
    imag = np.asarray(imag, dtype=float)
    n = len(imag)
    full = np.concatenate([-imag[:0:-1], imag])
    m = len(full)
    buf = np.zeros(pad * m)
    off = (pad * m - m) // 2
    buf[off : off + m] = full
    return -np.imag(hilbert(buf))[off + n - 1 : off + m]


def causal_projection(omega, values, weights=None):
    """Replace ``Re f`` by the Kramers-Kronig transform of ``Im f`` plus a constant.

    The constant is the ``weights``-weighted mean of the difference between
    the input real part and the transform.
    """
    re_kk = kramers_kronig_real(omega, values.imag)
    w = np.ones(len(omega)) if weights is None else np.asarray(weights, dtype=float)
    const = float(np.sum(w * (values.real - re_kk)) / np.sum(w))
    return const + re_kk + 1j * values.imag, const


def extract_self_energy(
    imp, params, delta, smoothing=None, mask_fraction=1e-3, iteration=0, causal=True
):
    """``Sigma = (w+i delta)^2 - w_loc^2 - Delta_fit - 1/D_imp``.

    Points where ``|D_imp|`` falls below ``mask_fraction * max|D_imp|`` are
    masked and linearly interpolated. ``smoothing`` is an optional
    ``{"window": odd int, "order": int}`` Savitzky-Golay filter. Positive
    ``Im Sigma`` (acausal noise) is clipped to zero and reported. With
    ``causal`` the real part is rebuilt from the imaginary part by a
    Kramers-Kronig transform, which keeps the lattice Green's function
    analytic (and its first-moment sum rule intact) despite MD noise.
    """
    omega = imp.omega
    z2 = (omega + 1j * delta) ** 2
    d = imp.gf
    absd = np.abs(d)
    mask = absd < mask_fraction * absd.max()
    safe = np.where(mask, 1.0, d)
    sigma = z2 - imp.onsite - imp.bath.hybridization(omega, delta) - 1.0 / safe
    if mask.any() and (~mask).sum() >= 2:
        good = ~mask
        sigma = np.interp(omega, omega[good], sigma[good].real) + 1j * np.interp(
            omega, omega[good], sigma[good].imag
        )
    noise = np.abs(imp.stderr) / np.where(absd > 0, absd, np.inf) ** 2
    if smoothing:
        win, order = int(smoothing["window"]), int(smoothing.get("order", 3))
        sigma = savgol_filter(sigma.real, win, order) + 1j * savgol_filter(sigma.imag, win, order)
    # Im Sigma is odd in w, so it vanishes at w = 0 and is non-positive above
    acausal = (omega >= 0) & (sigma.imag > 0)
    clipped = float(sigma.imag[acausal].max()) if acausal.any() else 0.0
    sigma = np.where(acausal, sigma.real + 0j, sigma)
    region = relevant_region(d)
    sigma_inf = None
    if causal:
        sigma, sigma_inf = causal_projection(omega, sigma, region.astype(float))
    noise_floor = float(np.nanmax(noise[region])) if np.isfinite(noise[region]).any() else 0.0
    return SelfEnergy(
        omega=omega,
        values=sigma,
        reference=imp.onsite,
        iteration=iteration,
        noise=noise,
        noise_floor=noise_floor,
        smoothing=smoothing,
        meta={
            "masked_points": int(mask.sum()),
            "clipped_im": clipped,
            "sigma_inf": sigma_inf,
        },
    )


# ------------------------------------------------------------------ the loop


@dataclass(frozen=True)
class VdmftOptions:
    n_omega: int = 4096
    omega_max_factor: float = 3.0  # grid spans [0, factor * omega_m]
    delta: float = units.mev_to_hartree(1.0)
    n_bath: int = 300
    bath_tol: float = None
    mixing: float = 0.5
    max_iter: int = 8
    min_iter: int = 1
    tol_sigma: float = 1e-3  # relative to omega_m^2
    tol_spectrum: float = 0.05  # relative L1 distance
    nk_local: int = 2048
    smoothing: dict = field(default_factory=lambda: {"window": 41, "order": 3})
    md: MdOptions = MdOptions(dt=3.0, n_equil_steps=2048, n_trajectories=800, batch_size=100)

    def omega(self, params):
        return omega_grid(self.omega_max_factor * params.omega_m, self.n_omega)


@dataclass
class VdmftResult:
    params: object
    sigma: SelfEnergy
    sigma_input: SelfEnergy
    omega: np.ndarray
    probe_k: np.ndarray
    spectra: list  # per iteration, A(probe_k, w) from that iteration's extracted Sigma
    log: list
    converged: bool
    hybridization: Hybridization = None
    bath: BathModel = None
    impurity: ImpurityResult = None
    scp: object = None
    delta: float = None

    @property
    def n_iterations(self):
        return len(self.log)


def spectral_distance(a, b, omega):
    """Relative L1 distance ``int|a-b| / int|b|``."""
    num = np.trapezoid(np.abs(a - b), omega, axis=-1)
    den = np.trapezoid(np.abs(b), omega, axis=-1)
    return num / den


def _probe_spectra(params, probe_k, sigma, omega, delta):
    gf = lattice_gf(params, probe_k, sigma, omega, delta)
    return -np.trace(gf.values, axis1=-2, axis2=-1).imag / np.pi


def _impurity_md_options(md, bath, onsite, seed):
    w_max = max(np.sqrt(onsite), bath.frequencies.max() if bath.n_modes else 0.0)
    limit = 0.98 * STABILITY_LIMIT / w_max
    if md.dt <= limit:
        return replace(md, seed=seed)
    # shrink dt, keeping equilibration time, record spacing and length fixed
    stride = int(np.ceil(md.stride * md.dt / limit))
    dt = md.stride * md.dt / stride
    return replace(
        md,
        dt=dt,
        n_equil_steps=int(np.ceil(md.n_equil_steps * md.dt / dt)),
        n_prod_steps=md.n_records * stride,
        stride=stride,
        seed=seed,
    )


def vdmft_loop(params, opts=None, probe_k=None, scp=None, allow_coupled=False):
    """Self-consistent VDMFT for the isolated matter chain.

    Starts from the static SCP shift, then iterates lattice GF -> local GF ->
    hybridization -> bath -> MD impurity -> self-energy with linear mixing.
    Converges when the fixed-point residual ``max|Sigma_out - Sigma_in|`` in
    the spectrally relevant window is below ``max(tol_sigma*wm^2, 3*noise)``,
    or when successive probe spectra differ by less than ``tol_spectrum``.
    On failure the last iterate is returned with ``converged=False``.
    """
    opts = opts or VdmftOptions()
    if not params.matter_only and not allow_coupled:
        raise ConfigurationError(
            "VDMFT production path is the isolated matter chain; pass allow_coupled=True"
        )
    omega = opts.omega(params)
    delta = opts.delta
    if probe_k is None:
        probe_k = np.array([0.0, np.pi / params.a])
    probe_k = np.atleast_1d(np.asarray(probe_k, dtype=float))
    kgrid = KGrid.uniform(params.a, opts.nk_local)
    if scp is None:
        scp = scp_solve(params, KGrid.uniform(params.a, params.n_sites))
    sigma = SelfEnergy.constant(omega, scp.static_shift, reference=onsite_matter_force_constant(params))
    spectra = [_probe_spectra(params, probe_k, sigma, omega, delta)]
    history = []
    converged = False
    hyb = bath = imp = None
    out = sigma
    seeds = np.random.SeedSequence(opts.md.seed).generate_state(opts.max_iter)
    for it in range(1, opts.max_iter + 1):
        d_loc = local_gf_streaming(params, kgrid, sigma, omega, delta)
        hyb = hybridization_update(d_loc, sigma, params, omega, delta)
        bath = discretize_bath(hyb, opts.n_bath, opts.bath_tol)
        w_loc2 = onsite_matter_force_constant(params)
        md = _impurity_md_options(opts.md, bath, w_loc2, int(seeds[it - 1]))
        imp = solve_impurity(params, bath, md, omega, delta)
        out = extract_self_energy(imp, params, delta, opts.smoothing, iteration=it)
        region = relevant_region(imp.gf)
        resid = float(np.abs(out.values - sigma.values)[region].max())
        spectra.append(_probe_spectra(params, probe_k, out, omega, delta))
        dist = spectral_distance(spectra[-1], spectra[-2], omega)
        entry = {
            "iteration": it,
            "sigma_residual": resid / params.omega_m**2,
            "noise_floor": out.noise_floor / params.omega_m**2,
            "spectral_distance": [float(x) for x in np.atleast_1d(dist)],
            "bath_modes": bath.n_modes,
            "bath_error": bath.reconstruction_error,
            "hybridization_clipped": hyb.clipped,
            "hybridization_causal": hyb.causal,
            "sigma_clipped": out.meta["clipped_im"],
            "md_dt": md.dt,
            "max_energy_drift": imp.meta.get("max_energy_drift"),
        }
        history.append(entry)
        log.info("VDMFT iteration %d: %s", it, entry)
        tol = max(opts.tol_sigma * params.omega_m**2, 3.0 * out.noise_floor)
        done = resid < tol or np.max(dist) < opts.tol_spectrum
        sigma_in = sigma
        sigma = replace(
            out,
            values=opts.mixing * out.values + (1.0 - opts.mixing) * sigma.values,
        )
        if done and it >= opts.min_iter:
            converged = True
            break
    return VdmftResult(
        params=params,
        sigma=out,
        sigma_input=sigma_in,
        omega=omega,
        probe_k=probe_k,
        spectra=spectra,
        log=history,
        converged=converged,
        hybridization=hyb,
        bath=bath,
        impurity=imp,
        scp=scp,
        delta=delta,
    )


def assemble_polariton_gf(params, sigma, kpoints, omega=None, delta=None):
    """Coupled cavity/matter GF dressed with the matter-chain self-energy.

    The light-matter coupling is assumed not to change the matter self-energy,
    so the isolated-chain ``Sigma`` is inserted on the matter diagonal of the
    coupled bare dynamical matrix.
    """
    if params.matter_only:
        raise ConfigurationError("polariton assembly needs the coupled model")
    if omega is None:
        omega = sigma.omega
    if delta is None:
        raise ConfigurationError("broadening delta is required", key="delta")
    return lattice_gf(params, kpoints, sigma, omega, delta)
