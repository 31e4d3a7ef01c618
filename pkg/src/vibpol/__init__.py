"""Anharmonic vibrational polaritons on a one-dimensional cavity/matter chain.

Harmonic dispersion, self-consistent phonon renormalization, vibrational
dynamical mean-field theory and a classical molecular-dynamics reference.
"""

__version__ = "0.1.0"

from .errors import ConfigurationError, ConvergenceError, InstabilityError, VibpolError
from .model import ModelParams

__all__ = [
    "ConfigurationError",
    "ConvergenceError",
    "InstabilityError",
    "ModelParams",
    "VibpolError",
    "__version__",
]
