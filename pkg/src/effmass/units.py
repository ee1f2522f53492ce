"""Lattice parameters and recoil-unit conversions.

Everything inside the package is dimensionless: energies in E_r, crystal
momenta in k_r, momenta in hbar*k_r, lengths in 1/k_r, times in
t_r = hbar/E_r, velocities in v_r = hbar*k_r/m0 and forces in E_r*k_r.
With these choices the kinetic energy of a plane wave of momentum p is p**2,
a velocity equals the momentum that carries it, and an acceleration of F/m0
is simply F (in v_r/t_r).  SI values appear only at the I/O boundary.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy import constants

HBAR = constants.hbar
RB87_MASS = 86.909180527 * constants.atomic_mass
DEFAULT_WAVELENGTH = 1064e-9


@dataclass(frozen=True)
class LatticeConfig:
    """Lattice depth ``s = U_L/E_r``, laser wavelength (m) and bare mass (kg)."""

    s: float = 9.4
    wavelength: float = DEFAULT_WAVELENGTH
    bare_mass: float = RB87_MASS
    # derived, filled in __post_init__
    d: float = field(init=False, repr=False)
    k_r: float = field(init=False, repr=False)
    E_r: float = field(init=False, repr=False)
    v_r: float = field(init=False, repr=False)
    t_r: float = field(init=False, repr=False)

    def __post_init__(self):
        if not np.isfinite(self.s) or self.s < 0:
            raise ValueError(f"lattice depth s must be >= 0, got {self.s}")
        if not self.wavelength > 0:
            raise ValueError(f"wavelength must be > 0, got {self.wavelength}")
        if not self.bare_mass > 0:
            raise ValueError(f"bare_mass must be > 0, got {self.bare_mass}")
        k_r = 2 * np.pi / self.wavelength
        E_r = HBAR**2 * k_r**2 / (2 * self.bare_mass)
        object.__setattr__(self, "d", self.wavelength / 2)
        object.__setattr__(self, "k_r", k_r)
        object.__setattr__(self, "E_r", E_r)
        object.__setattr__(self, "v_r", HBAR * k_r / self.bare_mass)
        object.__setattr__(self, "t_r", HBAR / E_r)

    def with_depth(self, s: float) -> "LatticeConfig":
        return LatticeConfig(s=s, wavelength=self.wavelength, bare_mass=self.bare_mass)

    # --- scale factors (SI value of one recoil unit) -------------------------
    @property
    def scales(self) -> dict[str, float]:
        return {
            "energy": self.E_r,
            "time": self.t_r,
            "length": 1.0 / self.k_r,
            "wavevector": self.k_r,
            "momentum": HBAR * self.k_r,
            "velocity": self.v_r,
            "acceleration": self.v_r / self.t_r,
            "force": self.E_r * self.k_r,
            "frequency": 1.0 / self.t_r,
        }

    def to_recoil(self, value, kind: str):
        """Convert an SI quantity of the given kind to recoil units."""
        return np.asarray(value, dtype=float) / self.scales[kind] if np.ndim(value) else float(value) / self.scales[kind]

    def to_si(self, value, kind: str):
        """Convert a recoil-unit quantity of the given kind to SI."""
        return np.asarray(value, dtype=float) * self.scales[kind] if np.ndim(value) else float(value) * self.scales[kind]

    # --- frequently needed combinations ---------------------------------------
    def force_from_acceleration(self, accel_si: float) -> float:
        """Dimensionless force for a bare-mass acceleration F/m0 given in m/s^2."""
        return self.to_recoil(accel_si, "acceleration")

    def bloch_angular_frequency(self, accel_si: float) -> float:
        """omega_B = F d / hbar in rad/s for F/m0 given in m/s^2."""
        return self.bare_mass * accel_si * self.d / HBAR
