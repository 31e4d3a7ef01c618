"""Parameters and real-space potential of the coupled cavity/matter chain.

Each unit cell carries one "cavity" coordinate ``x_j`` (a localized photon
mode) and one "matter" coordinate ``r_j``. In mass-weighted atomic units the
potential is

    V = 1/2 sum_j [w0^2 x_j^2 + (c/a)^2 (x_j - x_{j+1})^2]
      + 1/2 sum_j [wm^2 r_j^2 + g r_j^4 + Wm^2 (r_j - r_{j+1})^2]
      + sum_j G x_j r_j + sum_j d_se r_j^2

with ``G = 2 eta sqrt(w0^3 wm)`` and ``d_se = 2 eta^2 w0 wm``. ``eta`` is the
density-scaled coupling, so results do not depend on the supercell size.
Higher photon stencil orders replace the nearest-neighbour photon bond by the
corresponding longer-ranged central difference.
"""

from dataclasses import dataclass, field, replace

import numpy as np

from . import units
from .errors import ConfigurationError
from .stencil import SUPPORTED_ORDERS, stencil_coefficients


@dataclass(frozen=True)
class ModelParams:
    """Physical and numerical parameters, all in atomic units.

    ``g`` is stored in absolute units (frequency cubed); use
    :meth:`from_physical` to give it as a multiple of ``omega_m**3``.
    ``matter_only`` switches to the isolated matter chain (no cavity atoms,
    no coupling, no dipole self-energy).
    """

    a: float
    omega_m: float
    Omega_m: float
    g: float
    omega_0: float
    eta: float
    T: float
    n_sites: int = 128
    stencil_order: int = 2
    c: float = units.SPEED_OF_LIGHT
    matter_only: bool = False

    def __post_init__(self):
        checks = [
            ("a", self.a > 0),
            ("omega_m", self.omega_m > 0),
            ("Omega_m", self.Omega_m >= 0),
            ("g", self.g >= 0),
            ("omega_0", self.omega_0 > 0),
            ("eta", self.eta >= 0),
            ("T", self.T > 0),
            ("n_sites", int(self.n_sites) == self.n_sites and self.n_sites >= 2),
            ("c", self.c > 0),
        ]
        for key, ok in checks:
            if not ok:
                raise ConfigurationError(f"{key}={getattr(self, key)!r} out of range", key=key)
        if self.stencil_order not in SUPPORTED_ORDERS:
            raise ConfigurationError(
                f"stencil_order must be one of {SUPPORTED_ORDERS}, got {self.stencil_order!r}",
                key="stencil_order",
            )

    @classmethod
    def from_physical(
        cls,
        a_angstrom=3.0,
        omega_m_mev=440.0,
        Omega_m_mev=215.0,
        g_ratio=4.3,
        omega_0_mev=None,
        eta=0.0,
        T=300.0,
        **kwargs,
    ):
        """Build parameters from laboratory units (Angstrom, meV, Kelvin)."""
        omega_m = units.mev_to_hartree(omega_m_mev)
        if omega_0_mev is None:
            omega_0_mev = omega_m_mev
        return cls(
            a=units.angstrom_to_bohr(a_angstrom),
            omega_m=omega_m,
            Omega_m=units.mev_to_hartree(Omega_m_mev),
            g=g_ratio * omega_m**3,
            omega_0=units.mev_to_hartree(omega_0_mev),
            eta=eta,
            T=T,
            **kwargs,
        )

    @property
    def kT(self):
        return units.kelvin_to_hartree(self.T)

    @property
    def coupling(self):
        """Effective eta; always zero for the isolated matter chain."""
        return 0.0 if self.matter_only else self.eta

    @property
    def n_coords(self):
        return 1 if self.matter_only else 2

    def isolated_matter(self):
        return replace(self, matter_only=True)

    def with_(self, **changes):
        return replace(self, **changes)


@dataclass
class DisplacementState:
    """Mass-weighted displacements and velocities of a periodic chain."""

    x: np.ndarray
    r: np.ndarray
    v_x: np.ndarray = None
    v_r: np.ndarray = None
    periodic: bool = field(default=True)

    def __post_init__(self):
        self.x = np.asarray(self.x, dtype=float)
        self.r = np.asarray(self.r, dtype=float)
        self.v_x = np.zeros_like(self.x) if self.v_x is None else np.asarray(self.v_x, dtype=float)
        self.v_r = np.zeros_like(self.r) if self.v_r is None else np.asarray(self.v_r, dtype=float)

    @classmethod
    def zeros(cls, n_sites):
        return cls(np.zeros(n_sites), np.zeros(n_sites))

    def check(self, params):
        n = params.n_sites
        for name in ("x", "r", "v_x", "v_r"):
            arr = getattr(self, name)
            if arr.shape[-1] != n:
                raise ConfigurationError(
                    f"state field {name} has {arr.shape[-1]} sites, expected {n}", key=name
                )
        if not self.periodic:
            raise ConfigurationError("only periodic boundary conditions are supported")


def effective_couplings(params):
    """Per-site light-matter coupling ``G_lm`` and dipole self-energy ``d_se``.

    ``d_se`` multiplies ``r_j**2`` in the potential, so it adds ``2*d_se`` to the
    matter force constant.
    """
    eta = params.coupling
    w0, wm = params.omega_0, params.omega_m
    return {
        "G_lm": 2.0 * eta * np.sqrt(w0**3 * wm),
        "d_se": 2.0 * eta**2 * w0 * wm,
    }


def analytic_cavity_dispersion(params, k):
    """Continuum cavity dispersion ``sqrt(w0^2 + c^2 k^2)`` of the lowest branch."""
    k = np.asarray(k, dtype=float)
    return np.sqrt(params.omega_0**2 + (params.c * k) ** 2)


def onsite_matter_force_constant(params):
    """Diagonal (k-averaged) matter force constant ``wm^2 + 2 Wm^2 + 2 d_se``."""
    d_se = effective_couplings(params)["d_se"]
    return params.omega_m**2 + 2.0 * params.Omega_m**2 + 2.0 * d_se


def _ring_neighbors(u, m):
    return np.roll(u, -m, axis=-1) + np.roll(u, m, axis=-1)


def photon_potential(params, x):
    w = stencil_coefficients(params.stencil_order)
    stiff = (params.c / params.a) ** 2
    lap = w[0] * x
    for m, wm in enumerate(w[1:], start=1):
        lap = lap + wm * _ring_neighbors(x, m)
    return 0.5 * np.sum(params.omega_0**2 * x**2 - stiff * x * lap, axis=-1)


def photon_forces(params, x):
    w = stencil_coefficients(params.stencil_order)
    stiff = (params.c / params.a) ** 2
    lap = w[0] * x
    for m, wm in enumerate(w[1:], start=1):
        lap = lap + wm * _ring_neighbors(x, m)
    return -params.omega_0**2 * x + stiff * lap


def matter_potential(params, r):
    """Isolated-chain part of the potential, vectorized over leading axes."""
    bond = r - np.roll(r, -1, axis=-1)
    return 0.5 * np.sum(
        params.omega_m**2 * r**2 + params.g * r**4 + params.Omega_m**2 * bond**2, axis=-1
    )


def matter_forces(params, r):
    """Forces of the isolated matter chain, vectorized over leading axes."""
    return -(
        params.omega_m**2 * r
        + 2.0 * params.g * r**3
        + params.Omega_m**2 * (2.0 * r - _ring_neighbors(r, 1))
    )


def chain_potential(params, x, r):
    """Potential of the coupled chain for arrays shaped ``(..., n_sites)``."""
    c = effective_couplings(params)
    v = matter_potential(params, r) + c["d_se"] * np.sum(r**2, axis=-1)
    if params.matter_only:
        return v
    return v + photon_potential(params, x) + c["G_lm"] * np.sum(x * r, axis=-1)


def chain_forces(params, x, r):
    """Return ``(-dV/dx, -dV/dr)`` for arrays shaped ``(..., n_sites)``."""
    c = effective_couplings(params)
    f_r = matter_forces(params, r) - 2.0 * c["d_se"] * r
    if params.matter_only:
        return np.zeros_like(x), f_r
    f_x = photon_forces(params, x) - c["G_lm"] * r
    f_r = f_r - c["G_lm"] * x
    return f_x, f_r


def potential_energy(params, state):
    """Total potential energy (Hartree) of a displacement state."""
    state.check(params)
    return float(chain_potential(params, state.x, state.r))


def forces(params, state):
    """Forces on cavity and matter atoms; returns ``(f_x, f_r)``."""
    state.check(params)
    return chain_forces(params, state.x, state.r)
