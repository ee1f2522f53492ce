"""Closed-form and first-order predictions for a force-quenched single-band wavepacket.

Accelerations are returned in units of F/m0 unless stated otherwise; with the
recoil units of :mod:`effmass.units` an acceleration of F/m0 is numerically
``F`` in v_r/t_r, so ``a = F * bracket``.  All band quantities are evaluated
along the straight line k = kappa + F t swept by the crystal momenta, in the
real, sign-continuous gauge of :func:`effmass.bandstructure.fix_gauge`.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field

import numpy as np
from scipy.integrate import cumulative_simpson
from scipy.interpolate import CubicSpline

from . import bandstructure as bs
from .bandstructure import BandData, DegeneracyError

N_NODES = 129
VALIDITY_LIMIT = 0.3
MAX_STEP = 5e-4
# above this many distinct momenta, band data is splined from a uniform grid
EXACT_LIMIT = 2048
# fast-oscillation period is resolved by at least this many internal steps
STEPS_PER_PERIOD = 64


@dataclass(frozen=True, eq=False)
class WavepacketSpec:
    """Band-N amplitudes c_N(k) on uniform nodes with trapezoid weights.

    Uniform nodes keep every drifted momentum kappa + F t on one lattice when
    the time step is matched to the node spacing, so band data can be solved
    exactly instead of interpolated.
    """

    band: int
    k_nodes: np.ndarray
    weights: np.ndarray
    amplitudes: np.ndarray

    def __post_init__(self):
        if self.k_nodes.min() <= -1 or self.k_nodes.max() >= 1:
            raise ValueError("wavepacket support must stay inside the open Brillouin zone")
        norm = np.sum(self.weights * np.abs(self.amplitudes) ** 2)
        if abs(norm - 1) > 1e-10:
            raise ValueError(f"wavepacket not normalised: {norm}")

    @classmethod
    def from_function(cls, func, k_lo, k_hi, band=1, n_nodes=N_NODES):
        k = np.linspace(k_lo, k_hi, n_nodes)
        w = np.full(n_nodes, k[1] - k[0])
        w[[0, -1]] *= 0.5
        c = np.asarray(func(k), dtype=complex)
        c = c / np.sqrt(np.sum(w * np.abs(c) ** 2))
        return cls(band=band, k_nodes=k, weights=w, amplitudes=c)

    @classmethod
    def gaussian(cls, k0=0.0, sigma_k=0.02, band=1, n_nodes=N_NODES, span=6.0):
        """|c_N(k)|^2 Gaussian with mean k0 and standard deviation sigma_k."""
        return cls.from_function(lambda k: np.exp(-((k - k0) ** 2) / (4 * sigma_k**2)),
                                 k0 - span * sigma_k, k0 + span * sigma_k, band, n_nodes)

    @property
    def spacing(self) -> float:
        return float(self.k_nodes[1] - self.k_nodes[0])

    @property
    def density(self) -> np.ndarray:
        return self.weights * np.abs(self.amplitudes) ** 2


@dataclass(frozen=True, eq=False)
class VelocityTrace:
    """Time series in recoil units: t in t_r, velocity in v_r, acceleration in v_r/t_r.

    ``peaks`` optionally holds per-frame diffraction amplitudes and
    ``peak_velocities`` their velocities (columns = diffraction orders).
    """

    t: np.ndarray
    velocity: np.ndarray
    acceleration: np.ndarray | None = None
    peaks: np.ndarray | None = None
    peak_velocities: np.ndarray | None = None
    flags: tuple = ()
    meta: dict = field(default_factory=dict)

    def to_csv(self, path, components: "AccelDecomposition | None" = None):
        import csv

        cols = {"t/t_r": self.t, "v/v_r": self.velocity}
        if self.acceleration is not None:
            cols["a/(v_r/t_r)"] = self.acceleration
        if components is not None:
            cols.update({"a_total/(F/m0)": components.total, "a_intra/(F/m0)": components.intra,
                         "a_inter/(F/m0)": components.inter, "a_coh/(F/m0)": components.coherence})
        if self.peaks is not None:
            for j in range(self.peaks.shape[1]):
                cols[f"peak_{j}"] = self.peaks[:, j]
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(cols)
            for row in zip(*cols.values()):
                w.writerow([f"{x:.15g}" for x in row])
        return path


@dataclass(frozen=True, eq=False)
class AccelDecomposition:
    """Band-N intraband/interband and coherence accelerations, in units of F/m0."""

    t: np.ndarray
    intra: np.ndarray
    inter: np.ndarray
    coherence: np.ndarray

    @property
    def total(self) -> np.ndarray:
        return self.intra + self.inter + self.coherence


@dataclass(frozen=True, eq=False)
class BandAmplitudes:
    """Amplitudes ``values[n, j]`` at current crystal momenta ``k[j] = kappa[j] + F t``."""

    k: np.ndarray
    kappa: np.ndarray
    weights: np.ndarray
    values: np.ndarray

    def norm(self) -> float:
        return float(np.sum(self.weights * np.abs(self.values) ** 2))


class BandTable:
    """Band data at an arbitrary set of crystal momenta.

    The requested points are merged (to 1e-12) into one sorted grid, padded so
    that neighbouring points are at most :data:`MAX_STEP` apart; this keeps
    the sign-continuous gauge well defined between any two requested points.
    ``index`` maps the request onto grid positions.  Past
    :data:`EXACT_LIMIT` points the data is splined from a uniform grid instead.
    """

    def __init__(self, band_data: BandData, points, n_bands=None):
        n_bands = band_data.n_bands if n_bands is None else n_bands
        pts = np.asarray(points, dtype=float)
        uniq, inverse = np.unique(np.round(pts.ravel(), 12), return_inverse=True)
        pieces = [uniq[:1]]
        for a, b in zip(uniq[:-1], uniq[1:]):
            n_fill = int(np.ceil((b - a) / MAX_STEP))
            pieces.append(np.linspace(a, b, n_fill + 1)[1:])
        grid = np.concatenate(pieces)
        self.index = np.searchsorted(grid, uniq)[inverse].reshape(pts.shape)
        self.n_bands = n_bands
        self.k = grid
        exact = len(grid) <= EXACT_LIMIT
        if exact:
            src = bs.solve_bands(band_data.s, grid, n_bands, band_data.cutoff)
        else:
            # many distinct momenta: solve on a uniform grid and spline onto the request
            n = int(np.ceil((grid[-1] - grid[0]) / MAX_STEP)) + 1
            src = bs.solve_bands(band_data.s, np.linspace(grid[0], grid[-1], max(n, 8)),
                                 n_bands, band_data.cutoff)
        xi = np.real(np.diagonal(src.lax, axis1=1, axis2=2))
        p = np.real(src.p_matrix)  # real gauge
        if len(src.k_grid) == 1:
            self.energies, self.p, self.inverse_mass = src.energies, p, src.inverse_mass
            self._e_int = np.zeros_like(self.energies)
            self._xi_int = np.zeros_like(self.energies)
            return
        e_spline = CubicSpline(src.k_grid, src.energies)
        self._e_int = e_spline.antiderivative()(grid)
        self._xi_int = CubicSpline(src.k_grid, xi).antiderivative()(grid)
        if exact:
            self.energies, self.p, self.inverse_mass = src.energies, p, src.inverse_mass
        else:
            self.energies = e_spline(grid)
            self.p = CubicSpline(src.k_grid, p)(grid)
            self.inverse_mass = CubicSpline(src.k_grid, src.inverse_mass)(grid)

    def phases(self, i_kappa, i_k, t, F):
        """gamma_n(kappa, t) = int_0^t [E_n(kappa + F t') - F xi_nn(kappa + F t')] dt'."""
        t = np.asarray(t, dtype=float)[..., None]
        drift = np.abs(F * t) > 1e-9
        with np.errstate(divide="ignore", invalid="ignore"):
            e_part = np.where(drift, (self._e_int[i_k] - self._e_int[i_kappa]) / (F if F else 1.0),
                              self.energies[i_kappa] * t)
        return e_part - (self._xi_int[i_k] - self._xi_int[i_kappa])


def _interband(N, n_bands):
    return np.array([n for n in range(n_bands) if n != N - 1], dtype=int)


def short_time_acceleration(band_data: BandData, spec: WavepacketSpec, F, t, n_bands=None):
    """Bracket of the short-time formula, i.e. <a(t)> in units of F/m0.

    m0/m*_N + sum_{n != N} (2/m0) p_nN^2/Delta_nN cos(Delta_nN t/hbar), averaged
    over |c_N(k)|^2 at fixed k.  ``F`` only sets the physical scale and does
    not enter the bracket.
    """
    table = BandTable(band_data, spec.k_nodes, n_bands)
    N = spec.band
    i = table.index
    E = table.energies[i]
    others = _interband(N, table.n_bands)
    gap = E[:, others] - E[:, [N - 1]]
    weight = 4.0 * table.p[i][:, others, N - 1] ** 2 / gap
    t = np.asarray(t, dtype=float)
    osc = np.cos(gap[None] * t.reshape(-1, 1, 1))
    per_k = table.inverse_mass[i, N - 1][None] + np.sum(weight[None] * osc, axis=-1)
    out = per_k @ spec.density
    return out.reshape(t.shape) if t.ndim else float(out[0])


def _guard(table, N, F):
    """max |F x_nN / E_nN| with x_nN = hbar p_nN / (i m0 E_nN), over the table."""
    others = _interband(N, table.n_bands)
    gap = table.energies[:, others] - table.energies[:, [N - 1]]
    with np.errstate(divide="ignore"):
        return float(np.max(np.abs(2.0 * F * table.p[:, others, N - 1] / gap**2)))


def _check_gaps(gap):
    if np.any(np.abs(gap) < bs.DEGENERACY_FLOOR):
        raise DegeneracyError("degenerate bands along the wavepacket path")


def _time_step(band_data, spec, F, n_bands):
    """Internal step: resolves every gap that carries non-negligible weight and,
    for F != 0, moves the nodes by an integer fraction of their spacing."""
    nb = band_data.n_bands if n_bands is None else n_bands
    N = spec.band
    k_mid = spec.k_nodes[len(spec.k_nodes) // 2]
    E, c = bs.eigensystem(band_data.s, k_mid, nb, band_data.cutoff)
    p = bs.momentum_elements(k_mid, c).real
    others = _interband(N, nb)
    gap = np.abs(E[others] - E[N - 1])
    weight = 4.0 * p[others, N - 1] ** 2 / np.maximum(gap, bs.DEGENERACY_FLOOR)
    relevant = gap[weight > 1e-9]
    fastest = relevant.max() if relevant.size else gap.min()
    tau = 2 * np.pi / fastest / STEPS_PER_PERIOD
    if F == 0:
        return tau
    m = int(np.ceil(spec.spacing / (abs(F) * tau)))
    return spec.spacing / (m * abs(F))


def _first_order(table, spec, F, t, i_kappa, i_k):
    """Per-time <a>/(F/m0) from the first-order modified-Bloch-state result."""
    N = spec.band
    others = _interband(N, table.n_bands)
    E0 = table.energies[i_kappa]
    gap0 = E0[:, others] - E0[:, [N - 1]]
    p0 = table.p[i_kappa][:, others, N - 1]
    out = np.empty(len(t))
    for a in range(0, len(t), 256):
        sl = slice(a, a + 256)
        ik = i_k[sl]
        E = table.energies[ik]
        gap = E[..., others] - E[..., [N - 1]]
        gam = table.phases(i_kappa[None], ik, t[sl, None], F)
        gamma_Nn = gam[..., [N - 1]] - gam[..., others]
        coh = gap / gap0**2 * table.p[ik][..., N - 1, others] * p0 * np.cos(gamma_Nn)
        per_k = table.inverse_mass[ik, N - 1] + 4.0 * coh.sum(-1)
        out[sl] = per_k @ spec.density
    return out


def perturbative_velocity_trace(band_data: BandData, spec: WavepacketSpec, F, t_grid,
                                n_bands=None) -> VelocityTrace:
    """First-order <v(t)> and <a(t)> for a band-N packet under a force switched on at t=0.

    The acceleration includes the drift of every component through the zone
    and the renormalised phases gamma_n; velocity is its cumulative integral
    from the initial group velocity.  ``band_data`` supplies the depth,
    cutoff and band count; band quantities are solved exactly along the path.
    """
    t_grid = np.asarray(t_grid, dtype=float)
    if t_grid.ndim != 1 or np.any(np.diff(t_grid) <= 0) or t_grid[0] < 0:
        raise ValueError("t_grid must be non-negative and strictly increasing")
    tau = _time_step(band_data, spec, F, n_bands)
    n = max(int(np.ceil(t_grid[-1] / tau)), 4)
    fine = tau * np.arange(n + 1)
    table = BandTable(band_data, spec.k_nodes[None] + F * fine[:, None], n_bands)
    i_kappa, i_k = table.index[0], table.index
    bracket = _first_order(table, spec, F, fine, i_kappa, i_k)
    accel = F * bracket
    N = spec.band
    v0 = float(table.p[i_kappa, N - 1, N - 1] @ spec.density)
    v = v0 + cumulative_simpson(accel, x=fine, initial=0.0)
    v_out = CubicSpline(fine, v)(t_grid)
    a_out = CubicSpline(fine, accel)(t_grid)
    guard = _guard(table, N, F)
    flags = ()
    if guard > VALIDITY_LIMIT:
        warnings.warn(f"first-order guard |F x_nN/E_nN| = {guard:.3g} exceeds {VALIDITY_LIMIT}",
                      RuntimeWarning, stacklevel=2)
        flags = ("perturbative_guard",)
    return VelocityTrace(t=t_grid, velocity=v_out, acceleration=a_out, flags=flags,
                         meta={"source": "first-order", "F": F, "s": band_data.s,
                               "max_guard": guard, "internal_step": tau})


def _amplitude_table(band_data, spec, F, t, n_bands):
    table = BandTable(band_data, np.stack([spec.k_nodes, spec.k_nodes + F * t]), n_bands)
    return table, table.index[0], table.index[1]


def modified_bloch_amplitudes(band_data: BandData, spec: WavepacketSpec, F, t,
                              n_bands=None) -> BandAmplitudes:
    """b_n(k, t) of the force-dressed basis, to first order in F."""
    table, i_kappa, i_k = _amplitude_table(band_data, spec, F, t, n_bands)
    N = spec.band
    others = _interband(N, table.n_bands)
    E = table.energies[i_k]
    gap = E[:, others] - E[:, [N - 1]]
    _check_gaps(gap)
    gam = table.phases(i_kappa, i_k, t, F)
    b = np.empty((table.n_bands, len(i_k)), dtype=complex)
    b[N - 1] = spec.amplitudes * np.exp(-1j * gam[:, N - 1])
    x = table.p[i_k][:, others, N - 1] / (0.5j * gap)
    b[others] = (-spec.amplitudes[:, None] * F * x / gap * np.exp(-1j * gam[:, others])).T
    return BandAmplitudes(k=spec.k_nodes + F * t, kappa=spec.k_nodes, weights=spec.weights,
                          values=b)


def _bloch_values(table, spec, F, t, i_kappa, i_k):
    N = spec.band
    others = _interband(N, table.n_bands)
    E, E0 = table.energies[i_k], table.energies[i_kappa]
    gap = E[:, others] - E[:, [N - 1]]
    gap0 = E0[:, others] - E0[:, [N - 1]]
    _check_gaps(gap)
    _check_gaps(gap0)
    gam = table.phases(i_kappa, i_k, t, F)
    # F x_nN / E_nN at the current and at the initial crystal momentum
    ratio = F * table.p[i_k][:, others, N - 1] / (0.5j * gap**2)
    ratio0 = F * table.p[i_kappa][:, others, N - 1] / (0.5j * gap0**2)
    c = np.empty((table.n_bands, len(i_k)), dtype=complex)
    c[N - 1] = spec.amplitudes * np.exp(-1j * gam[:, N - 1])
    c[others] = (spec.amplitudes[:, None] * (ratio * np.exp(-1j * gam[:, [N - 1]])
                                             - ratio0 * np.exp(-1j * gam[:, others]))).T
    return c, gap


def bloch_basis_amplitudes(band_data: BandData, spec: WavepacketSpec, F, t,
                           n_bands=None) -> BandAmplitudes:
    """c_n(k, t) in the ordinary Bloch basis, to first order in F."""
    table, i_kappa, i_k = _amplitude_table(band_data, spec, F, t, n_bands)
    c, _ = _bloch_values(table, spec, F, t, i_kappa, i_k)
    return BandAmplitudes(k=spec.k_nodes + F * t, kappa=spec.k_nodes, weights=spec.weights,
                          values=c)


def acceleration_decomposition(band_data: BandData, spec: WavepacketSpec, F, t_grid,
                               n_bands=None) -> AccelDecomposition:
    """<a(t)> split into its intraband and interband origins, in units of F/m0.

    The coherence term is built from the first-order Bloch amplitudes with
    <N k|[p, H0]|n k> = E_nN(k) p_Nn(k).
    """
    t_grid = np.atleast_1d(np.asarray(t_grid, dtype=float))
    times = np.concatenate([[0.0], t_grid])
    table = BandTable(band_data, spec.k_nodes[None] + F * times[:, None], n_bands)
    i_kappa = table.index[0]
    N = spec.band
    others = _interband(N, table.n_bands)
    dens = spec.density
    intra = np.empty(len(t_grid))
    inter = np.empty(len(t_grid))
    coh = np.zeros(len(t_grid))
    for i, t in enumerate(t_grid):
        i_k = table.index[i + 1]
        inv_m = table.inverse_mass[i_k, N - 1]
        intra[i] = inv_m @ dens
        inter[i] = (1.0 - inv_m) @ dens
        if F == 0:
            continue
        c, gap = _bloch_values(table, spec, F, t, i_kappa, i_k)
        # a_coh = (1/i hbar) sum_n c_N^* c_n E_nN p_Nn + c.c.; in units of F/m0 = F
        term = -1j * np.conj(c[N - 1])[:, None] * c[others].T * gap * table.p[i_k][:, N - 1, others]
        coh[i] = 2.0 * np.real(term.sum(-1) @ spec.weights) / F
    return AccelDecomposition(t=t_grid, intra=intra, inter=inter, coherence=coh)
