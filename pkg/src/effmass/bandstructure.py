"""Bloch bands of the 1D optical lattice ``U_L cos^2(k_r z)`` in a plane-wave basis.

At crystal momentum k the Hamiltonian couples plane waves k + 2l (l = -L..L)
through the lattice Fourier components s/4, so it is real symmetric and
tridiagonal.  All quantities are in recoil units (see :mod:`effmass.units`).
"""

from __future__ import annotations

import csv
import logging
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy.linalg import LinAlgError, eigh_tridiagonal

from .units import LatticeConfig

log = logging.getLogger(__name__)

DEFAULT_CUTOFF = 32
DEFAULT_BANDS = 8
DEFAULT_NK = 257
DEGENERACY_FLOOR = 1e-6
# k-step of the five-point stencil used for the band curvature
CURVATURE_STEP = 2.5e-4


class TruncationError(ValueError):
    """Plane-wave cutoff too small for the requested bands."""


class EigensolveError(RuntimeError):
    def __init__(self, k, band, cause=None):
        super().__init__(f"eigensolve did not converge at k={k!r} (band {band}): {cause}")
        self.k = k
        self.band = band


class DegeneracyError(ValueError):
    """Interband quantity requested where |E_nm| is below the degeneracy floor."""


def _depth(cfg) -> float:
    return float(cfg.s if isinstance(cfg, LatticeConfig) else cfg)


def build_hamiltonian(cfg, k: float, cutoff: int = DEFAULT_CUTOFF):
    """Return ``(diagonal, off_diagonal)`` of H(k) in E_r.

    ``cfg`` may be a :class:`LatticeConfig` or a bare depth s.  The diagonal is
    ``(k + 2l)**2 + s/2`` for l = -cutoff..cutoff and every off-diagonal
    element equals ``s/4``.  The linear force is not part of H(k).
    """
    if cutoff < 4:
        raise TruncationError(f"plane-wave cutoff must be >= 4, got {cutoff}")
    if abs(k) > 1 + 1e-12:
        raise ValueError(f"k must lie in the first Brillouin zone [-1, 1], got {k}")
    s = _depth(cfg)
    ell = np.arange(-cutoff, cutoff + 1)
    diag = (k + 2.0 * ell) ** 2 + s / 2
    off = np.full(2 * cutoff, s / 4)
    return diag, off


def dense_hamiltonian(cfg, k: float, cutoff: int = DEFAULT_CUTOFF) -> np.ndarray:
    diag, off = build_hamiltonian(cfg, k, cutoff)
    return np.diag(diag) + np.diag(off, 1) + np.diag(off, -1)


def _reduce(k: float):
    """Split k into a first-zone representative and an integer zone shift."""
    j = int(np.round(k / 2.0))
    return k - 2.0 * j, j


def band_energies(cfg, k: float, n_bands: int, cutoff: int = DEFAULT_CUTOFF) -> np.ndarray:
    """Lowest ``n_bands`` energies at any k (periodic in k with period 2)."""
    k_red, _ = _reduce(k)
    diag, off = build_hamiltonian(cfg, abs(k_red), cutoff)
    try:
        return eigh_tridiagonal(diag, off, eigvals_only=True, select="i",
                                select_range=(0, n_bands - 1))
    except LinAlgError as exc:
        raise EigensolveError(k, n_bands, exc) from exc


def eigensystem(cfg, k: float, n_bands: int, cutoff: int = DEFAULT_CUTOFF):
    """Energies and plane-wave coefficients ``c[n, l]`` at k.

    The solve is done at |k| of the first-zone representative; negative k is
    obtained by the parity map l -> -l, which makes E(-k) = E(k) bit-exact.
    Outside the first zone the coefficients are shifted so that index l still
    refers to the plane wave k + 2l (periodic gauge).
    """
    if n_bands > 2 * cutoff:
        raise TruncationError(f"{n_bands} bands need cutoff >= {n_bands / 2}, got {cutoff}")
    k_red, j = _reduce(k)
    diag, off = build_hamiltonian(cfg, abs(k_red), cutoff)
    try:
        w, v = eigh_tridiagonal(diag, off, select="i", select_range=(0, n_bands - 1))
    except LinAlgError as exc:
        raise EigensolveError(k, n_bands, exc) from exc
    if not np.all(np.isfinite(w)):
        bad = int(np.argmin(np.isfinite(w)))
        raise EigensolveError(k, bad + 1, "non-finite eigenvalue")
    c = v.T
    if k_red < 0:
        c = c[:, ::-1]
    if j:
        shifted = np.zeros_like(c)
        if j > 0:
            shifted[:, :-j] = c[:, j:]
        else:
            shifted[:, -j:] = c[:, :j]
        c = shifted
    return w, c


def fix_gauge(coeffs: np.ndarray, k_grid: np.ndarray) -> np.ndarray:
    """Deterministic real gauge for eigenvectors ``coeffs[ik, n, l]``.

    Each vector is rotated so its largest-modulus coefficient is real positive
    (H(k) is real, so the result is real); sign flips are then undone by
    walking outward from the k-point closest to zero and requiring a positive
    overlap with the already-fixed neighbour.
    """
    coeffs = np.asarray(coeffs)
    flat = np.abs(coeffs)
    idx = np.argmax(flat, axis=-1)
    pivot = np.take_along_axis(coeffs, idx[..., None], axis=-1)
    phase = np.conj(pivot) / np.abs(pivot)
    fixed = np.real(coeffs * phase).astype(float)
    nk = fixed.shape[0]
    start = int(np.argmin(np.abs(k_grid)))
    for order in (range(start + 1, nk), range(start - 1, -1, -1)):
        prev = start
        for ik in order:
            overlap = np.einsum("nl,nl->n", fixed[prev], fixed[ik])
            fixed[ik] *= np.where(overlap < 0, -1.0, 1.0)[:, None]
            prev = ik
    return fixed


def momentum_elements(k, coeffs: np.ndarray) -> np.ndarray:
    """``p[.., n, m] = sum_l c_n(l)* (k + 2l) c_m(l)`` in hbar k_r."""
    k = np.asarray(k, dtype=float)
    L = (coeffs.shape[-1] - 1) // 2
    q = k[..., None] + 2.0 * np.arange(-L, L + 1)
    return np.einsum("...nl,...l,...ml->...nm", np.conj(coeffs), q, coeffs)


def group_slope(cfg, k: float, n_bands: int, cutoff: int = DEFAULT_CUTOFF) -> np.ndarray:
    """dE_n/dk = 2 p_nn(k) (Hellmann-Feynman), in E_r/k_r."""
    _, c = eigensystem(cfg, k, n_bands, cutoff)
    return 2.0 * np.einsum("nl,l,nl->n", c, k + 2.0 * np.arange(-cutoff, cutoff + 1), c)


def curvature(cfg, k: float, n_bands: int, cutoff: int = DEFAULT_CUTOFF,
              step: float = CURVATURE_STEP) -> np.ndarray:
    """d^2E_n/dk^2 from a five-point central difference of the exact band slope.

    Differencing the slope instead of E itself avoids the eps*||H||/step**2
    round-off of a second difference of eigenvalues (||H|| ~ 4 L^2).
    """
    k_abs = abs(k)  # E is even in k
    e = [group_slope(cfg, k_abs + j * step, n_bands, cutoff) for j in (-2, -1, 1, 2)]
    return (e[0] - 8 * e[1] + 8 * e[2] - e[3]) / (12 * step)


def symmetric_k_grid(n: int = DEFAULT_NK) -> np.ndarray:
    """n points spanning [-1, 1] with k[-i-1] == -k[i] exactly."""
    return (np.arange(n) - (n - 1) / 2) * (2.0 / (n - 1))


@dataclass(frozen=True, eq=False)
class BandData:
    """Band quantities on a k-grid; arrays are read-only.

    Shapes: ``energies[ik, n]``, ``coeffs[ik, n, l]``, ``gaps[ik, n, m]``,
    ``p_matrix[ik, n, m]``, ``lax[ik, n, m]``.  ``lax`` holds NaN where the
    bands are degenerate to within :data:`DEGENERACY_FLOOR`.
    """

    s: float
    k_grid: np.ndarray
    energies: np.ndarray
    coeffs: np.ndarray
    inverse_mass: np.ndarray  # m0/m*_n(k)
    gaps: np.ndarray
    p_matrix: np.ndarray
    lax: np.ndarray
    cutoff: int

    def __post_init__(self):
        for name in ("k_grid", "energies", "coeffs", "inverse_mass", "gaps", "p_matrix", "lax"):
            getattr(self, name).setflags(write=False)

    @property
    def n_bands(self) -> int:
        return self.energies.shape[1]

    @property
    def eff_mass(self) -> np.ndarray:
        """m*_n(k)/m0 (infinite where the band is locally flat)."""
        with np.errstate(divide="ignore"):
            return 1.0 / self.inverse_mass

    def index_of(self, k: float) -> int:
        ik = int(np.argmin(np.abs(self.k_grid - k)))
        if abs(self.k_grid[ik] - k) > 1e-9:
            raise KeyError(f"k={k} is not on the band grid")
        return ik

    @classmethod
    def from_eigensystem(cls, cfg, k_grid, energies, coeffs, inverse_mass, cutoff):
        """Assemble gauge-fixed band data from raw (arbitrary-phase) eigenvectors."""
        k_grid = np.array(k_grid, dtype=float)
        coeffs = fix_gauge(coeffs, k_grid)
        gaps = energies[:, :, None] - energies[:, None, :]
        p = momentum_elements(k_grid, coeffs).astype(complex)
        lax = np.full_like(p, np.nan)
        off = ~np.eye(energies.shape[1], dtype=bool)
        ok = off[None] & (np.abs(gaps) >= DEGENERACY_FLOOR)
        lax[ok] = p[ok] / (0.5j * gaps[ok])
        diag = _diagonal_connection(k_grid, coeffs)
        n = np.arange(energies.shape[1])
        lax[:, n, n] = diag
        return cls(s=_depth(cfg), k_grid=k_grid, energies=np.asarray(energies, float),
                   coeffs=coeffs, inverse_mass=np.asarray(inverse_mass, float),
                   gaps=gaps, p_matrix=p, lax=lax, cutoff=cutoff)

    def to_csv(self, path) -> Path:
        """Write k, E_n, m*_n/m0, Delta_21 and |p_21| per k-point."""
        path = Path(path)
        nb = self.n_bands
        header = (["k/k_r"] + [f"E_{n + 1}/E_r" for n in range(nb)]
                  + [f"m*_{n + 1}/m0" for n in range(nb)] + ["Delta_21/E_r", "|p_21|/hbar k_r"])
        m_eff = self.eff_mass
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(header)
            for ik, k in enumerate(self.k_grid):
                row = [k, *self.energies[ik], *m_eff[ik]]
                row += [self.gaps[ik, 1, 0] if nb > 1 else np.nan,
                        abs(self.p_matrix[ik, 1, 0]) if nb > 1 else np.nan]
                w.writerow([f"{x:.15g}" for x in row])
        return path


def _diagonal_connection(k_grid, coeffs):
    """xi_nn = i sum_l c* dc/dk by central differences along the grid."""
    nk = len(k_grid)
    if nk < 2:
        return np.zeros(coeffs.shape[:2])
    dc = np.gradient(coeffs, k_grid, axis=0)
    return np.real(1j * np.einsum("knl,knl->kn", np.conj(coeffs), dc))


def solve_bands(cfg, k_grid=None, n_bands: int = DEFAULT_BANDS,
                cutoff: int = DEFAULT_CUTOFF) -> BandData:
    """Diagonalise H(k) on ``k_grid`` (default: 257 symmetric points over the zone).

    Grids extending beyond the first zone are accepted; band quantities are
    evaluated in the periodic gauge there.
    """
    if n_bands > 2 * cutoff:
        raise TruncationError(f"{n_bands} bands need cutoff >= {n_bands / 2}, got {cutoff}")
    k_grid = symmetric_k_grid() if k_grid is None else np.asarray(k_grid, dtype=float)
    nk = len(k_grid)
    energies = np.empty((nk, n_bands))
    coeffs = np.empty((nk, n_bands, 2 * cutoff + 1))
    inv_mass = np.empty((nk, n_bands))
    for ik, k in enumerate(k_grid):
        energies[ik], coeffs[ik] = eigensystem(cfg, k, n_bands, cutoff)
        inv_mass[ik] = 0.5 * curvature(cfg, _reduce(k)[0], n_bands, cutoff)
    return BandData.from_eigensystem(cfg, k_grid, energies, coeffs, inv_mass, cutoff)


def momentum_matrix(band_data: BandData, n: int, m: int, k: float) -> complex:
    """p_nm(k) in hbar k_r; bands are 1-based."""
    return complex(band_data.p_matrix[band_data.index_of(k), n - 1, m - 1])


def lax_connection(band_data: BandData, n: int, m: int, k: float) -> complex:
    """xi_nm(k) in 1/k_r; bands are 1-based.  Raises near degeneracies."""
    val = band_data.lax[band_data.index_of(k), n - 1, m - 1]
    if np.isnan(val):
        raise DegeneracyError(f"bands {n} and {m} are degenerate at k={k}")
    return complex(val)


def sum_rule_terms(band_data: BandData, N: int, ik: int, n_terms: int) -> np.ndarray:
    """Interband pieces (2/m0) |p_nN|^2 / Delta_nN for bands 1..n_terms, n != N."""
    if n_terms > band_data.n_bands:
        raise TruncationError(f"n_terms={n_terms} exceeds the {band_data.n_bands} solved bands")
    n = np.array([b for b in range(n_terms) if b != N - 1])
    p2 = np.abs(band_data.p_matrix[ik, n, N - 1]) ** 2
    return 4.0 * p2 / band_data.gaps[ik, n, N - 1]


def sum_rule_residual(band_data: BandData, N: int, k: float, n_terms: int) -> float:
    """|m0/m*_N + sum_n (2/m0) p_nN^2/Delta_nN - 1| at a grid k."""
    ik = band_data.index_of(k)
    total = band_data.inverse_mass[ik, N - 1] + sum_rule_terms(band_data, N, ik, n_terms).sum()
    return float(abs(total - 1.0))
