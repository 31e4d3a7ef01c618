"""Conversion constants between atomic units and laboratory units.

Everything inside the package is in Hartree atomic units with mass-weighted
coordinates. These constants are only used at the input/output boundary.
"""

HARTREE_MEV = 27211.386
BOHR_ANGSTROM = 0.529177
KB_HARTREE_PER_K = 3.1668115e-6
AU_TIME_FS = 0.0241888
SPEED_OF_LIGHT = 137.035999
# Planck constant in meV*fs (h = 2*pi*hbar), used for linewidth -> lifetime
H_MEV_FS = 2.0 * 3.141592653589793 * HARTREE_MEV * AU_TIME_FS


def mev_to_hartree(value):
    return value / HARTREE_MEV


def hartree_to_mev(value):
    return value * HARTREE_MEV


def angstrom_to_bohr(value):
    return value / BOHR_ANGSTROM


def fs_to_au(value):
    return value / AU_TIME_FS


def au_to_fs(value):
    return value * AU_TIME_FS


def kelvin_to_hartree(value):
    return value * KB_HARTREE_PER_K
