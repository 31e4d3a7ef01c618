"""Classical self-consistent phonon (SCP) renormalization.

The only anharmonicity is the on-site quartic ``1/2 g r^4`` of the matter
atoms, so the reciprocal fourth-order force constant factorizes into matter
eigenvector components and the mean field reduces to a BZ-averaged matter
mean-square displacement.
"""

import logging
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigurationError, ConvergenceError
from .lattice import KGrid, PhononBasis, diagonalize, dynamical_matrix, phonon_basis

log = logging.getLogger(__name__)


def quartic_force_constant(basis, ik, lam, lam1, ik2, lam2, lam3, g, n=None):
    """Reciprocal quartic force constant ``Phi(k, -k, k', -k')`` for given bands.

    ``ik``/``ik2`` index ``basis.k``; eigenvectors at ``-k`` are the complex
    conjugates of those at ``k`` (real force constants). ``n`` defaults to the
    number of k-points in ``basis``.
    """
    if n is None:
        n = len(basis.k)
    cm = basis.matter_components()
    return (
        cm[ik, lam] * np.conj(cm[ik, lam1]) * cm[ik2, lam2] * np.conj(cm[ik2, lam3]) * 12.0 * g / n
    ).real


@dataclass
class ScpResult:
    """Converged SCP solution on a uniform grid."""

    params: object
    kgrid: KGrid
    harmonic: PhononBasis
    frequencies: np.ndarray  # (nk, nb) renormalized, ascending
    rotation: np.ndarray  # (nk, nb, nb) U(k): harmonic -> SCP eigenvectors
    force_constants: np.ndarray  # (nk, nb, nb) V(k) in the harmonic basis
    mean_square: float  # classical <r_j^2> of a matter atom
    history: list = field(default_factory=list)
    converged: bool = True

    @property
    def T(self):
        return self.params.T

    @property
    def static_shift(self):
        """Mean-field addition ``6 g <r^2>`` to the matter force constant."""
        return 6.0 * self.params.g * self.mean_square

    def gamma_frequencies(self):
        return scp_dispersion(self, [0.0])[0]


def _matter_mean_square(harm, omega2, rot, kT):
    # <Q*_l'' Q_l'''>(k') = sum_mu U_{l'' mu} kT / Omega_mu^2 U*_{l''' mu}
    qq = np.einsum("kam,km,kbm->kab", rot, kT / omega2, rot.conj())
    cm = harm.matter_components()
    per_k = np.einsum("ka,kab,kb->k", cm, qq, cm.conj()).real
    return per_k.mean()


def _build_v(harm, shift):
    cm = harm.matter_components()
    v = np.einsum("ka,kb->kab", cm, cm.conj()) * shift
    idx = np.arange(harm.n_bands)
    v[:, idx, idx] += harm.frequencies**2
    return v


def scp_solve(params, kgrid=None, tol=1e-8, mixing=0.5, max_iter=500):
    """Iterate the classical SCP equations to a fixed point.

    The loop variable is the effective force-constant matrix ``V(k)`` in the
    harmonic basis; its new value is linearly mixed with the previous iterate
    (which mixes ``Omega^2`` in a fixed eigenbasis). Convergence is declared
    when ``max |Delta Omega^2| / omega_m^2 < tol``.
    """
    if not 0 < mixing <= 1:
        raise ConfigurationError(f"mixing must lie in (0, 1], got {mixing}", key="mixing")
    if tol <= 0:
        raise ConfigurationError("tol must be positive", key="tol")
    if kgrid is None:
        kgrid = KGrid.uniform(params.a, params.n_sites)
    if kgrid.kind != "uniform":
        raise ConfigurationError("SCP requires a uniform Brillouin-zone grid")
    harm = phonon_basis(params, kgrid)
    kT = params.kT
    nb = harm.n_bands

    v = _build_v(harm, 0.0)
    omega2 = harm.frequencies**2
    rot = np.broadcast_to(np.eye(nb, dtype=complex), (len(kgrid), nb, nb)).copy()
    history = []
    for it in range(1, max_iter + 1):
        msd = _matter_mean_square(harm, omega2, rot, kT)
        v_new = _build_v(harm, 6.0 * params.g * msd)
        v_mixed = (1.0 - mixing) * v + mixing * v_new if it > 1 else v_new
        freqs, rot_new = diagonalize(v_mixed, kgrid.points)
        resid = np.max(np.abs(freqs**2 - omega2)) / params.omega_m**2
        history.append(float(resid))
        v, omega2, rot = v_mixed, freqs**2, rot_new
        if resid < tol:
            break
    else:
        raise ConvergenceError(
            f"SCP did not converge in {max_iter} iterations (last residual {history[-1]:.3g})",
            history,
        )
    msd = _matter_mean_square(harm, omega2, rot, kT)
    log.debug("SCP converged in %d iterations, <r^2>=%.6g", len(history), msd)
    return ScpResult(
        params=params,
        kgrid=kgrid,
        harmonic=harm,
        frequencies=np.sqrt(omega2),
        rotation=rot,
        force_constants=v,
        mean_square=float(msd),
        history=history,
    )


def scp_dispersion(result, kpoints):
    """Renormalized bands at arbitrary k, shape ``(nk, nb)``.

    The mean field is a BZ average, so evaluating ``V(k)`` at new k-points with
    the converged ``<r^2>`` is exact (no interpolation).
    """
    if not result.converged:
        raise ConvergenceError("SCP result is not converged", result.history)
    k = kpoints.points if isinstance(kpoints, KGrid) else np.atleast_1d(np.asarray(kpoints, float))
    dyn = dynamical_matrix(result.params, k)
    m = dyn.shape[-1] - 1
    dyn[..., m, m] += result.static_shift
    freqs, _ = diagonalize(dyn, k)
    return freqs


def scp_basis(result, kpoints):
    """SCP quasiparticle basis (frequencies and site-basis eigenvectors)."""
    k = kpoints.points if isinstance(kpoints, KGrid) else np.atleast_1d(np.asarray(kpoints, float))
    dyn = dynamical_matrix(result.params, k)
    m = dyn.shape[-1] - 1
    dyn[..., m, m] += result.static_shift
    freqs, vecs = diagonalize(dyn, k)
    return PhononBasis(k=k, frequencies=freqs, vectors=vecs, matter_only=result.params.matter_only)


def single_site_scp_frequency(omega, g, kT):
    """Closed-form classical SCP frequency of one quartic oscillator.

    Solves ``W^2 = omega^2 + 6 g kT / W^2``.
    """
    return np.sqrt(0.5 * (omega**2 + np.sqrt(omega**4 + 24.0 * g * kT)))
