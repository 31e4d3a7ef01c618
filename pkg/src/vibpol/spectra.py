"""Spectral functions, peak and linewidth extraction, Rabi splittings."""

import csv
import logging
from dataclasses import dataclass, field

import numpy as np
from scipy.optimize import curve_fit
from scipy.signal import find_peaks as _scipy_find_peaks
from scipy.signal import savgol_filter

from . import units
from .errors import ConfigurationError
from .lattice import diagonalize, dynamical_matrix
from .scp import scp_dispersion, scp_solve

log = logging.getLogger(__name__)

METHODS = ("harmonic", "SCP", "VDMFT", "MD")
TUNINGS = ("bare", "scp", "vdmft")


@dataclass
class Peak:
    """A spectral peak; position and width in Hartree."""

    position: float
    fwhm: float
    height: float
    fitted: bool = False
    prominence: float = None

    def __post_init__(self):
        if self.prominence is None:
            self.prominence = self.height

    @property
    def position_mev(self):
        return units.hartree_to_mev(self.position)

    @property
    def fwhm_mev(self):
        return units.hartree_to_mev(self.fwhm)


@dataclass
class SpectrumResult:
    """``A(k, w)`` on a k-path with per-coordinate diagonal parts and peaks."""

    k: np.ndarray
    omega: np.ndarray
    values: np.ndarray  # (nk, n_omega), trace
    components: np.ndarray  # (nk, n_omega, n_coords), diagonal
    method: str = "harmonic"
    peaks: list = field(default_factory=list)

    def __post_init__(self):
        if self.method not in METHODS:
            raise ConfigurationError(f"unknown spectrum method {self.method!r}", key="method")

    def first_moment(self):
        """``int w A dw`` per k (``n_coords / 2`` classically)."""
        return np.trapezoid(self.omega * self.values, self.omega, axis=-1)

    def area(self):
        return np.trapezoid(self.values, self.omega, axis=-1)


def spectral_function(gf, method="harmonic", peak_options=None, with_peaks=True):
    """``A(k, w) = -Tr Im D(k, w) / pi`` with per-coordinate diagonal parts."""
    diag = -np.diagonal(gf.values, axis1=-2, axis2=-1).imag / np.pi
    values = diag.sum(axis=-1)
    peaks = []
    if with_peaks:
        peaks = [find_peaks(gf.omega, a, **(peak_options or {})) for a in values]
    return SpectrumResult(
        k=np.asarray(gf.k), omega=np.asarray(gf.omega), values=values, components=diag,
        method=method, peaks=peaks,
    )


def _half_crossing(omega, a, i, half, step):
    j = i
    while 0 <= j + step < len(a) and a[j + step] >= half:
        j += step
    if not 0 <= j + step < len(a):
        return None, j
    lo, hi = a[j], a[j + step]
    frac = (lo - half) / (lo - hi)
    return omega[j] + frac * (omega[j + step] - omega[j]), j


def _lorentz2(w, h1, c1, g1, h2, c2, g2):
    return h1 * g1**2 / ((w - c1) ** 2 + g1**2) + h2 * g2**2 / ((w - c2) ** 2 + g2**2)


def _fit_pair(omega, a, i, j, p, q):
    lo, hi = min(i, j), max(i, j)
    span = omega[hi] - omega[lo]
    sel = (omega >= omega[lo] - 2 * span - 2 * p.fwhm) & (omega <= omega[hi] + 2 * span + 2 * q.fwhm)
    g1 = max(p.fwhm, omega[1] - omega[0]) / 2
    g2 = max(q.fwhm, omega[1] - omega[0]) / 2
    guess = [p.height, p.position, g1, q.height, q.position, g2]
    try:
        popt, _ = curve_fit(_lorentz2, omega[sel], a[sel], p0=guess, maxfev=20000)
    except (RuntimeError, ValueError):
        return None
    h1, c1, g1, h2, c2, g2 = popt
    step = omega[1] - omega[0]
    inside = omega[lo] - span <= min(c1, c2) and max(c1, c2) <= omega[hi] + span
    if min(h1, h2) <= 0 or not inside:
        return None
    if abs(c1 - c2) < max(step, abs(g1), abs(g2)):
        # closer than half the larger FWHM: a noise wiggle on one line
        return [max(p, q, key=lambda x: x.height)]
    return [Peak(c1, 2 * abs(g1), h1, True), Peak(c2, 2 * abs(g2), h2, True)]


def _lorentz1(w, h, c, g, b):
    return h * g**2 / ((w - c) ** 2 + g**2) + b


def _refine(omega, a, peak, i):
    # Lorentzian plus offset over the contiguous region above half height
    half = a[i] / 2
    lo = hi = i
    while lo > 0 and a[lo - 1] >= half:
        lo -= 1
    while hi < len(a) - 1 and a[hi + 1] >= half:
        hi += 1
    if hi - lo < 4:
        return peak
    sel = slice(lo, hi + 1)
    try:
        popt, _ = curve_fit(
            _lorentz1, omega[sel], a[sel], p0=[a[i], omega[i], peak.fwhm / 2, 0.0], maxfev=5000
        )
    except (RuntimeError, ValueError):
        return peak
    if not omega[lo] <= popt[1] <= omega[hi]:
        return peak
    return Peak(float(popt[1]), peak.fwhm, peak.height, True, peak.prominence)


def find_peaks(omega, a, prominence=0.05, smoothing=None, fit_overlaps=True, refine=False):
    """Local maxima of one spectral slice with half-height FWHM.

    ``prominence`` is relative to the global maximum. When the slice between
    two neighbouring peaks never drops below half the lower peak's height,
    both are refitted as a sum of two Lorentzians and flagged ``fitted``.
    ``smoothing`` is an optional ``(window, order)`` Savitzky-Golay filter
    applied before the search. With ``refine`` each isolated peak position
    is taken from a Lorentzian fit to its top half, which is robust against
    the jitter of noisy MD or VDMFT maxima. Returns peaks sorted by position.
    """
    omega = np.asarray(omega, dtype=float)
    a = np.asarray(a, dtype=float)
    if smoothing:
        a = savgol_filter(a, *smoothing)
    top = a.max() if a.size else 0.0
    if top <= 0:
        return []
    idx, props = _scipy_find_peaks(a, prominence=prominence * top)
    peaks = []
    for i, prom in zip(idx, props["prominences"]):
        half = a[i] / 2
        left, _ = _half_crossing(omega, a, i, half, -1)
        right, _ = _half_crossing(omega, a, i, half, +1)
        if left is None or right is None:
            continue  # truncated by the grid edge
        peaks.append(Peak(float(omega[i]), float(right - left), float(a[i]), prominence=float(prom)))
    idx = [i for i in idx if any(p.position == omega[i] for p in peaks)]
    if fit_overlaps and len(peaks) > 1:
        out, skip = [], False
        for n in range(len(peaks)):
            if skip:
                skip = False
                continue
            if n + 1 < len(peaks):
                i, j = idx[n], idx[n + 1]
                low = min(a[i], a[j]) / 2
                if a[i : j + 1].min() >= low:
                    pair = _fit_pair(omega, a, i, j, peaks[n], peaks[n + 1])
                    if pair is not None:
                        out.extend(pair)
                        skip = True
                        continue
            out.append(peaks[n])
        peaks = out
    if refine:
        by_pos = {float(omega[i]): i for i in idx}
        peaks = [
            _refine(omega, a, p, by_pos[p.position]) if not p.fitted and p.position in by_pos else p
            for p in peaks
        ]
    return sorted(peaks, key=lambda p: p.position)


def lifetime_fs(fwhm):
    """Lifetime ``h / FWHM`` (period of the energy width) in femtoseconds."""
    return units.au_to_fs(2.0 * np.pi / fwhm)


# --------------------------------------------------------------- Rabi splitting


def _gamma_pair(freqs):
    freqs = np.sort(np.ravel(freqs))
    if len(freqs) < 2:
        return 0.0
    return float(freqs[-1] - freqs[-2])


def rabi_harmonic(params):
    """``w_UP - w_LP`` at Gamma from the bare 2x2 dynamical matrix."""
    freqs, _ = diagonalize(dynamical_matrix(params, np.array([0.0])))
    return _gamma_pair(freqs)


def rabi_scp(params, scp=None):
    """Rabi splitting of the SCP-renormalized coupled model at Gamma."""
    if scp is None:
        scp = scp_solve(params)
    return _gamma_pair(scp_dispersion(scp, [0.0]))


def rabi_from_spectrum(omega, a, prominence=5e-3):
    """Distance between the two dominant peaks of a Gamma-point spectrum.

    Dominance is ranked by topographic prominence. The threshold is low
    because a broad matter peak can be far lower than a sharp photon line.
    """
    peaks = find_peaks(omega, a, prominence=prominence)
    if len(peaks) < 2:
        return 0.0, peaks
    top = sorted(peaks, key=lambda p: p.prominence)[-2:]
    return abs(top[1].position - top[0].position), top


def rabi_vdmft(params, sigma, delta, prominence=5e-3):
    """Rabi splitting read off the VDMFT polariton spectrum at Gamma."""
    from .vdmft import assemble_polariton_gf

    gf = assemble_polariton_gf(params, sigma, np.array([0.0]), sigma.omega, delta)
    a = -np.trace(gf.values[0], axis1=-2, axis2=-1).imag / np.pi
    split, _ = rabi_from_spectrum(sigma.omega, a, prominence)
    return split


@dataclass
class RabiScan:
    """Rabi splittings (Hartree) versus coupling for one cavity tuning."""

    etas: np.ndarray
    tuning: str
    omega_0: float
    harmonic: np.ndarray
    scp: np.ndarray
    vdmft: np.ndarray

    def __post_init__(self):
        if self.tuning not in TUNINGS:
            raise ConfigurationError(f"tuning must be one of {TUNINGS}", key="tuning")

    def rows(self):
        for i, eta in enumerate(self.etas):
            yield (
                float(eta),
                self.tuning,
                units.hartree_to_mev(self.harmonic[i]),
                units.hartree_to_mev(self.scp[i]),
                units.hartree_to_mev(self.vdmft[i]) if self.vdmft is not None else float("nan"),
            )


def matter_gamma_peak(omega, spectrum):
    """Position of the strongest peak of a matter-chain Gamma spectrum."""
    peaks = find_peaks(omega, spectrum, refine=True)
    if not peaks:
        raise ConfigurationError("no peak found in the matter Gamma spectrum")
    return max(peaks, key=lambda p: p.height).position


def tuning_frequency(params, tuning, scp=None, vdmft=None):
    """Cavity frequency for a tuning case, measured from this run's solvers.

    ``scp`` is a matter-chain :class:`ScpResult`; ``vdmft`` a matter-chain
    :class:`VdmftResult` (its Gamma spectrum is the first probe k).
    """
    if tuning == "bare":
        return params.omega_m
    if tuning == "scp":
        if scp is None:
            scp = scp_solve(params.isolated_matter())
        return float(scp_dispersion(scp, [0.0])[0, -1])
    if tuning == "vdmft":
        if vdmft is None:
            raise ConfigurationError("vdmft tuning needs a converged matter-chain VDMFT result")
        ik = int(np.argmin(np.abs(vdmft.probe_k)))
        return matter_gamma_peak(vdmft.omega, vdmft.spectra[-1][ik])
    raise ConfigurationError(f"tuning must be one of {TUNINGS}", key="tuning")


def rabi_scan(
    params, etas, tuning, sigma=None, delta=None, scp=None, vdmft=None, workers=None, omega_0=None
):
    """Rabi splitting at three levels of theory over a list of couplings.

    ``params`` is a coupled-model template; its ``omega_0`` is replaced by
    the tuning target (or by ``omega_0`` when given, e.g. a VDMFT peak
    measured elsewhere). ``sigma`` is the matter-chain VDMFT self-energy,
    independent of ``eta``; without it the VDMFT column is omitted.
    """
    if params.matter_only:
        raise ConfigurationError("Rabi scan needs the coupled model")
    etas = np.asarray(etas, dtype=float)
    if np.any(etas < 0):
        raise ConfigurationError("coupling strengths must be non-negative", key="etas")
    if sigma is None and vdmft is not None:
        sigma = vdmft.sigma
    if delta is None and vdmft is not None:
        delta = vdmft.delta
    if tuning not in TUNINGS:
        raise ConfigurationError(f"tuning must be one of {TUNINGS}", key="tuning")
    w0 = omega_0 if omega_0 is not None else tuning_frequency(params, tuning, scp=scp, vdmft=vdmft)
    base = params.with_(omega_0=w0)

    def point(eta):
        p = base.with_(eta=float(eta))
        rv = rabi_vdmft(p, sigma, delta) if sigma is not None else np.nan
        return rabi_harmonic(p), rabi_scp(p), rv

    if workers and workers > 1:
        from concurrent.futures import ThreadPoolExecutor

        with ThreadPoolExecutor(workers) as pool:
            res = list(pool.map(point, etas))
    else:
        res = [point(e) for e in etas]
    res = np.array(res, dtype=float).reshape(len(etas), 3)
    return RabiScan(
        etas=etas, tuning=tuning, omega_0=w0, harmonic=res[:, 0], scp=res[:, 1],
        vdmft=res[:, 2] if sigma is not None else None,
    )


# ------------------------------------------------------------------ CSV output

DISPERSION_COLUMNS = ("k_invbohr", "band", "omega_meV", "light_fraction")
SPECTRUM_COLUMNS = ("k_invbohr", "omega_meV", "A_trace", "A_cavity", "A_matter")
RABI_COLUMNS = ("eta", "tuning", "rabi_harm_meV", "rabi_scp_meV", "rabi_vdmft_meV")


def _fmt(x):
    return x if isinstance(x, str) else repr(float(x))


def _write(path, header, rows):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for row in rows:
            w.writerow([_fmt(x) for x in row])


def write_dispersion_csv(path, basis):
    """Band data from a :class:`PhononBasis`."""
    light = basis.light_fraction
    rows = (
        (k, b, units.hartree_to_mev(basis.frequencies[i, b]), light[i, b])
        for i, k in enumerate(basis.k)
        for b in range(basis.n_bands)
    )
    _write(path, DISPERSION_COLUMNS, rows)


def write_spectrum_csv(path, spectrum, stride=1):
    """``A(k, w)`` long-format table; ``A_cavity`` is zero for the matter chain."""
    comp = spectrum.components
    n = comp.shape[-1]

    def rows():
        for i, k in enumerate(spectrum.k):
            for j in range(0, len(spectrum.omega), stride):
                cav = comp[i, j, 0] if n == 2 else 0.0
                yield (
                    k, units.hartree_to_mev(spectrum.omega[j]), spectrum.values[i, j], cav,
                    comp[i, j, n - 1],
                )

    _write(path, SPECTRUM_COLUMNS, rows())


def write_rabi_csv(path, scans):
    if isinstance(scans, RabiScan):
        scans = [scans]
    _write(path, RABI_COLUMNS, (row for s in scans for row in s.rows()))
