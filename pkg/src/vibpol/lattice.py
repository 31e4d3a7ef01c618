"""Harmonic lattice dynamics of the two-atom unit cell.

Coordinate order inside a unit cell is ``(cavity, matter)``; the isolated
matter chain has a single coordinate.
"""

from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigurationError, InstabilityError
from .model import analytic_cavity_dispersion, effective_couplings
from .stencil import stencil_band, stencil_coefficients  # noqa: F401  (re-export)

CAVITY, MATTER = 0, 1


@dataclass(frozen=True)
class KGrid:
    """Wavevectors in the first Brillouin zone with integration weights."""

    points: np.ndarray
    weights: np.ndarray
    kind: str = "uniform"

    def __post_init__(self):
        pts = np.atleast_1d(np.asarray(self.points, dtype=float))
        wts = np.atleast_1d(np.asarray(self.weights, dtype=float))
        if pts.shape != wts.shape:
            raise ConfigurationError("k-point and weight arrays differ in length")
        if np.any(wts < 0):
            raise ConfigurationError("negative k-point weight")
        if abs(wts.sum() - 1.0) > 1e-12:
            raise ConfigurationError(f"k-point weights sum to {wts.sum()!r}, expected 1")
        if self.kind not in ("uniform", "path"):
            raise ConfigurationError(f"unknown k-grid kind {self.kind!r}")
        object.__setattr__(self, "points", pts)
        object.__setattr__(self, "weights", wts)

    def __len__(self):
        return len(self.points)

    @classmethod
    def uniform(cls, a, n):
        """``n`` points ``k = 2 pi m / (n a)`` folded into ``(-pi/a, pi/a]``."""
        m = np.arange(n)
        m = np.where(m > n // 2, m - n, m)
        pts = 2.0 * np.pi * m / (n * a)
        return cls(pts, np.full(n, 1.0 / n), "uniform")

    @classmethod
    def path(cls, points):
        pts = np.atleast_1d(np.asarray(points, dtype=float))
        return cls(pts, np.full(len(pts), 1.0 / len(pts)), "path")

    @classmethod
    def full_zone(cls, a, n=401):
        """Evenly spaced display path from Gamma to the zone edge ``pi/a``."""
        return cls.path(np.linspace(0.0, np.pi / a, n))

    @classmethod
    def near_gamma(cls, params, n=201, kmax=None, k_first=None):
        """Display path dense near Gamma, geometric in ``|k|``.

        Spans ``[0, kmax]`` with ``kmax = 20 omega_m / c`` by default; the
        first nonzero point sits at ``k_first`` (``kmax / 1e3`` by default).
        """
        if kmax is None:
            kmax = 20.0 * params.omega_m / params.c
        if k_first is None:
            k_first = kmax * 1e-3
        pts = np.concatenate([[0.0], np.geomspace(k_first, kmax, n - 1)])
        return cls.path(pts)


def fold_k(k, a):
    """Map wavevectors into ``(-pi/a, pi/a]``."""
    k = np.asarray(k, dtype=float)
    g = 2.0 * np.pi / a
    folded = k - g * np.floor((k + np.pi / a) / g)
    # -pi/a maps to +pi/a
    return np.where(np.isclose(folded, -np.pi / a, rtol=0, atol=1e-14 * g), np.pi / a, folded)


def _check_zone(params, k, fold):
    k = np.asarray(k, dtype=float)
    edge = np.pi / params.a
    if np.any(np.abs(k) > edge * (1 + 1e-12)):
        if not fold:
            raise ConfigurationError(f"wavevector outside first Brillouin zone |k| > {edge:.6g}")
        k = fold_k(k, params.a)
    return k


def cavity_band_squared(params, k, analytic=False):
    """Squared photon-chain frequency at ``k`` (stencil or continuum)."""
    k = np.asarray(k, dtype=float)
    if analytic:
        return analytic_cavity_dispersion(params, k) ** 2
    stiff = (params.c / params.a) ** 2
    return params.omega_0**2 + stiff * stencil_band(params.stencil_order, k * params.a)


def matter_band_squared(params, k):
    """Squared bare matter frequency ``wm^2 + 4 Wm^2 sin^2(ka/2)`` (no DSE)."""
    k = np.asarray(k, dtype=float)
    return params.omega_m**2 + 4.0 * params.Omega_m**2 * np.sin(0.5 * k * params.a) ** 2


def dynamical_matrix(params, k, fold=True):
    """Bloch dynamical matrix, shape ``k.shape + (n, n)``.

    ``n`` is 2 for the coupled model and 1 for the isolated matter chain. The
    light-matter coupling is strictly on-site, so the off-diagonal element is
    real and k-independent.
    """
    k = _check_zone(params, k, fold)
    mat = matter_band_squared(params, k)
    if params.matter_only:
        return mat[..., None, None].astype(complex)
    c = effective_couplings(params)
    out = np.zeros(k.shape + (2, 2), dtype=complex)
    out[..., CAVITY, CAVITY] = cavity_band_squared(params, k)
    out[..., MATTER, MATTER] = mat + 2.0 * c["d_se"]
    out[..., CAVITY, MATTER] = c["G_lm"]
    out[..., MATTER, CAVITY] = c["G_lm"]
    return out


@dataclass
class PhononBasis:
    """Per-k frequencies (ascending) and unitary eigenvector matrices."""

    k: np.ndarray
    frequencies: np.ndarray  # (nk, nb)
    vectors: np.ndarray  # (nk, n, nb); column lambda is c_{., lambda}(k)
    matter_only: bool = False

    @property
    def n_bands(self):
        return self.frequencies.shape[-1]

    @property
    def matter_index(self):
        return 0 if self.matter_only else MATTER

    @property
    def light_fraction(self):
        if self.matter_only:
            return np.zeros_like(self.frequencies)
        return np.abs(self.vectors[:, CAVITY, :]) ** 2

    def matter_components(self):
        """``c_{m, lambda}(k)``, shape ``(nk, nb)``."""
        return self.vectors[:, self.matter_index, :]


def _fix_phase(vecs):
    # largest-magnitude component of each column made real positive
    idx = np.argmax(np.abs(vecs), axis=-2)
    lead = np.take_along_axis(vecs, idx[..., None, :], axis=-2)
    return vecs * (np.abs(lead) / lead)


def diagonalize(matrices, k=None):
    """Eigen-decomposition of Hermitian force-constant matrices.

    Raises :class:`InstabilityError` naming the first k with a negative
    eigenvalue.
    """
    evals, evecs = np.linalg.eigh(matrices)
    bad = np.argwhere(evals < 0)
    if len(bad):
        i = tuple(bad[0][:-1])
        where = f" at k={np.asarray(k)[i]:.6g}" if k is not None else ""
        raise InstabilityError(f"negative squared frequency {evals[tuple(bad[0])]:.4g}{where}")
    return np.sqrt(evals), _fix_phase(evecs)


def phonon_basis(params, kgrid):
    k = kgrid.points if isinstance(kgrid, KGrid) else np.atleast_1d(np.asarray(kgrid, float))
    freqs, vecs = diagonalize(dynamical_matrix(params, k), k)
    return PhononBasis(k=k, frequencies=freqs, vectors=vecs, matter_only=params.matter_only)


@dataclass
class MatrixGF:
    """Retarded phonon Green's function ``D(k, omega)``.

    ``values`` has shape ``(nk, n_omega, n, n)``; the frequency argument is
    ``omega + i*delta``.
    """

    k: np.ndarray
    omega: np.ndarray
    values: np.ndarray
    delta: float
    basis: str = "site"
    meta: dict = field(default_factory=dict)

    @property
    def n_coords(self):
        return self.values.shape[-1]

    def diagonal(self):
        return np.diagonal(self.values, axis1=-2, axis2=-1)


def omega_grid(omega_max, n=4096):
    """Uniform real-frequency grid on ``[0, omega_max]``."""
    return np.linspace(0.0, omega_max, n)


def invert_small(mat):
    """Inverse of stacked 1x1 or 2x2 matrices, closed form."""
    n = mat.shape[-1]
    if n == 1:
        return 1.0 / mat
    if n == 2:
        a, b = mat[..., 0, 0], mat[..., 0, 1]
        c, d = mat[..., 1, 0], mat[..., 1, 1]
        det = a * d - b * c
        out = np.empty_like(mat)
        out[..., 0, 0] = d / det
        out[..., 0, 1] = -b / det
        out[..., 1, 0] = -c / det
        out[..., 1, 1] = a / det
        return out
    return np.linalg.inv(mat)


def dyson_gf(dyn, omega, delta, sigma=None, matter_index=None):
    """``[(omega + i delta)^2 - D(k) - P Sigma(omega) P]^-1`` on a grid.

    ``dyn`` has shape ``(nk, n, n)``; ``sigma`` (optional) is a complex array
    over ``omega`` added to the matter diagonal.
    """
    z2 = (np.asarray(omega) + 1j * delta) ** 2
    n = dyn.shape[-1]
    mat = -np.broadcast_to(dyn[:, None, :, :], (dyn.shape[0], len(z2), n, n)).copy()
    idx = np.arange(n)
    mat[..., idx, idx] += z2[None, :, None]
    if sigma is not None:
        mi = n - 1 if matter_index is None else matter_index
        mat[..., mi, mi] -= np.asarray(sigma)[None, :]
    return invert_small(mat)


def harmonic_gf(basis, omega, delta, params=None):
    """Harmonic retarded GF in site coordinates from a phonon basis.

    Uses the spectral sum ``sum_l c_l c_l^H / ((omega+i delta)^2 - Omega_l^2)``.
    """
    if delta <= 0:
        raise ConfigurationError("broadening delta must be positive", key="delta")
    omega = np.asarray(omega, dtype=float)
    z2 = (omega + 1j * delta) ** 2
    denom = 1.0 / (z2[None, :, None] - basis.frequencies[:, None, :] ** 2)  # (nk, nw, nb)
    c = basis.vectors
    vals = np.einsum("kal,kwl,kbl->kwab", c, denom, c.conj(), optimize=True)
    return MatrixGF(k=basis.k, omega=omega, values=vals, delta=delta, basis="site")


def dipole_gauge_crosscheck(params, k, analytic=False):
    """Eigenfrequencies of the per-k two-oscillator (Hopfield-type) model.

    Photon ``omega_c(k)^2`` (stencil, or continuum when ``analytic``), matter
    ``omega_m(k)^2 + 2 d_se`` and coupling ``G_lm``. With the stencil photon
    this is the Fourier image of the real-space model.
    """
    k = np.atleast_1d(np.asarray(k, dtype=float))
    c = effective_couplings(params)
    mat = np.zeros(k.shape + (2, 2))
    mat[..., 0, 0] = cavity_band_squared(params, k, analytic=analytic)
    mat[..., 1, 1] = matter_band_squared(params, k) + 2.0 * c["d_se"]
    mat[..., 0, 1] = mat[..., 1, 0] = c["G_lm"]
    return np.sqrt(np.linalg.eigvalsh(mat))
