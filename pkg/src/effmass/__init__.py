"""Onset of effective-mass dynamics for a force-quenched particle in an optical lattice."""

__version__ = "0.1.0"

from .units import LatticeConfig  # noqa: E402,F401
from .bandstructure import BandData, solve_bands  # noqa: E402,F401
