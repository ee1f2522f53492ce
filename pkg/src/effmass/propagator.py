"""Split-step spectral propagation of a 1D wavefunction in a tilted lattice.

The potential is ``s(t) cos^2(z) - F(t) z + g |psi|^2`` in recoil units
(z in 1/k_r, so one lattice period is pi).  Time stepping is Strang
splitting with the kinetic operator p**2 applied in Fourier space.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field, replace

import numpy as np
from scipy import fft as sfft

from . import bandstructure as bs
from .analytic import VelocityTrace
from .units import LatticeConfig

DEFAULT_SITES = 512
DEFAULT_POINTS_PER_SITE = 16
DEFAULT_DT = 1.0 / 500
MAX_DT = 1.0 / 200
STABILITY_LIMIT = 0.5
EDGE_SITES = 50
EDGE_TOLERANCE = 1e-6
LEAKAGE_TOLERANCE = 1e-6
DEFAULT_ENVELOPE_UM = 20.0


class StabilityError(ValueError):
    """Time step violates the s*dt guard or the dt <= t_r/200 precondition."""


class BoxTooSmallError(RuntimeError):
    """Probability reached the absorbing margin of the finite box."""


class LeakageError(ValueError):
    """Momentum envelope too wide: band-1 state would reach the zone edge."""


@dataclass(frozen=True)
class GridSpec:
    """Uniform periodic grid of ``sites`` lattice periods, ``points_per_site`` each."""

    sites: int = DEFAULT_SITES
    points_per_site: int = DEFAULT_POINTS_PER_SITE

    def __post_init__(self):
        n = self.sites * self.points_per_site
        if n & (n - 1) or n <= 0:
            raise ValueError(f"total points {n} must be a power of two")
        if self.points_per_site < 8:
            raise ValueError("need at least 8 points per lattice period")

    @property
    def n_points(self) -> int:
        return self.sites * self.points_per_site

    @property
    def length(self) -> float:
        return self.sites * np.pi

    @property
    def dz(self) -> float:
        return np.pi / self.points_per_site

    @property
    def z(self) -> np.ndarray:
        return (np.arange(self.n_points) - self.n_points // 2) * self.dz

    @property
    def p(self) -> np.ndarray:
        return 2 * np.pi * sfft.fftfreq(self.n_points, self.dz)


@dataclass(frozen=True, eq=False)
class Wavefunction:
    """psi(z) on ``grid`` at ``time``; ``depth`` and ``force`` are the potential parameters then."""

    values: np.ndarray
    grid: GridSpec
    time: float = 0.0
    depth: float = 0.0
    force: float = 0.0

    def norm(self) -> float:
        return float(np.sum(np.abs(self.values) ** 2) * self.grid.dz)

    def momentum_amplitudes(self) -> np.ndarray:
        """psi~(p) on ``grid.p`` with sum |psi~|^2 = 1 for a normalised state."""
        z0 = self.grid.z[0]
        phase = np.exp(-1j * self.grid.p * z0)
        return sfft.fft(self.values) * phase * np.sqrt(self.grid.dz / self.grid.n_points)


@dataclass(frozen=True)
class ForceSchedule:
    """Force F(t) in E_r*k_r: zero until ``delay``, linear over ``rise``, then ``force``."""

    force: float = 0.0
    delay: float = 0.0
    rise: float = 0.0

    def __post_init__(self):
        if self.delay < 0 or self.rise < 0:
            raise ValueError("delay and rise must be non-negative")

    @classmethod
    def from_acceleration(cls, cfg: LatticeConfig, accel_si, delay_s=20e-6, rise_s=20e-6):
        """Schedule for a bare-mass acceleration F/m0 in m/s^2 and times in seconds."""
        return cls(force=cfg.force_from_acceleration(accel_si),
                   delay=cfg.to_recoil(delay_s, "time"), rise=cfg.to_recoil(rise_s, "time"))

    @classmethod
    def from_si(cls, cfg: LatticeConfig, force_N, delay_s=20e-6, rise_s=20e-6):
        return cls(force=cfg.to_recoil(force_N, "force"),
                   delay=cfg.to_recoil(delay_s, "time"), rise=cfg.to_recoil(rise_s, "time"))

    def __call__(self, t):
        t = np.asarray(t, dtype=float)
        if self.rise == 0:
            frac = (t >= self.delay).astype(float)
        else:
            with np.errstate(over="ignore"):
                frac = np.clip((t - self.delay) / self.rise, 0.0, 1.0)
        out = self.force * frac
        return float(out) if out.ndim == 0 else out


def _depth(cfg) -> float:
    return float(cfg.s if isinstance(cfg, LatticeConfig) else cfg)


def envelope_sigma_k(cfg: LatticeConfig, envelope_width_um=DEFAULT_ENVELOPE_UM) -> float:
    """Momentum std (k_r) of a Gaussian whose density has rms width ``envelope_width_um``."""
    sigma_z = cfg.to_recoil(envelope_width_um * 1e-6, "length")
    return 1.0 / (2.0 * sigma_z)


def _check_margin(psi: Wavefunction):
    edge = EDGE_SITES * psi.grid.points_per_site
    dens = np.abs(psi.values) ** 2
    outside = (dens[:edge].sum() + dens[-edge:].sum()) * psi.grid.dz
    if outside > EDGE_TOLERANCE:
        raise BoxTooSmallError(f"probability {outside:.3g} within {EDGE_SITES} sites of the "
                               f"box edge at t={psi.time:.4g} t_r; enlarge the grid")


def bloch_wavepacket(s, grid: GridSpec, sigma_k, k0=0.0, band=1, cutoff=bs.DEFAULT_CUTOFF):
    """Gaussian superposition of exact band-``band`` Bloch states, returned as psi(z).

    Each grid momentum q = k + 2l gets amplitude c(k) * c_band(l, k) with
    |c(k)|^2 Gaussian of mean k0 and standard deviation sigma_k.
    """
    q = grid.p
    ell = np.round(q / 2.0).astype(int)
    k = q - 2.0 * ell
    k[k >= 1 - 1e-12] -= 2.0
    ell = np.round((q - k) / 2.0).astype(int)
    env = np.exp(-((k - k0) ** 2) / (4 * sigma_k**2))
    ks = np.unique(np.round(k, 12))
    env_k = np.exp(-((ks - k0) ** 2) / (4 * sigma_k**2))
    leak = np.sum(env_k[np.abs(ks) > 0.75] ** 2) / np.sum(env_k**2)
    if leak > LEAKAGE_TOLERANCE:
        raise LeakageError(f"envelope too narrow in space: {leak:.2g} of the momentum weight "
                           "lies near the zone edge")
    keep = env_k > 1e-16 * env_k.max()
    ks = ks[keep]
    coeffs = np.array([bs.eigensystem(s, kk, band, cutoff)[1] for kk in ks])
    coeffs = bs.fix_gauge(coeffs, ks)[:, band - 1, :]
    amp = np.zeros(grid.n_points, dtype=complex)
    pos = np.searchsorted(ks, np.round(k, 12))
    pos = np.clip(pos, 0, len(ks) - 1)
    hit = np.isclose(ks[pos], k, atol=1e-9) & (np.abs(ell) <= cutoff)
    amp[hit] = env[hit] * coeffs[pos[hit], ell[hit] + cutoff]
    return _from_momentum(amp, grid)


def _from_momentum(amp, grid: GridSpec) -> np.ndarray:
    psi = sfft.ifft(amp * np.exp(1j * grid.p * grid.z[0]))
    return psi / np.sqrt(np.sum(np.abs(psi) ** 2) * grid.dz)


def prepare_ground_state(cfg, grid: GridSpec | None = None, envelope_width=DEFAULT_ENVELOPE_UM,
                         sigma_k=None, mode="exact", ramp_time=None, dt=DEFAULT_DT,
                         cutoff=bs.DEFAULT_CUTOFF) -> Wavefunction:
    """Band-1, k~0 state under a Gaussian envelope of rms ``envelope_width`` (um).

    ``sigma_k`` overrides the envelope with a momentum width directly.
    ``mode="ramp"`` instead starts from the free Gaussian and raises the depth
    with a raised-cosine profile over ``ramp_time`` (t_r).
    """
    cfg = cfg if isinstance(cfg, LatticeConfig) else LatticeConfig(s=float(cfg))
    grid = grid or GridSpec()
    if sigma_k is None:
        sigma_k = envelope_sigma_k(cfg, envelope_width)
    if mode == "exact":
        psi = Wavefunction(bloch_wavepacket(cfg.s, grid, sigma_k, cutoff=cutoff), grid, 0.0, cfg.s, 0.0)
    elif mode == "ramp":
        if not ramp_time or ramp_time <= 0:
            raise ValueError("ramp mode needs a positive ramp_time")
        free = Wavefunction(bloch_wavepacket(0.0, grid, sigma_k, cutoff=cutoff), grid, 0.0, 0.0, 0.0)

        def depth(t):
            return cfg.s * 0.5 * (1 - np.cos(np.pi * min(t / ramp_time, 1.0)))

        psi = evolve(free, cfg, ForceSchedule(), dt=dt, t_final=ramp_time, depth=depth)[-1]
        psi = replace(psi, time=0.0)
    else:
        raise ValueError(f"unknown preparation mode {mode!r}")
    _check_margin(psi)
    return psi


def evolve(psi: Wavefunction, cfg, schedule: ForceSchedule | None = None, dt=DEFAULT_DT,
           t_final=None, g=0.0, cadence=None, depth=None, workers=None):
    """Propagate ``psi`` to ``t_final`` (t_r) and return the list of snapshots.

    Snapshots are taken every ``cadence`` t_r (the step is shortened so the
    cadence is an integer number of steps) and always at start and end.
    ``depth`` optionally makes s time dependent.
    """
    return list(iter_evolve(psi, cfg, schedule, dt, t_final, g, cadence, depth, workers))


def iter_evolve(psi: Wavefunction, cfg, schedule: ForceSchedule | None = None, dt=DEFAULT_DT,
                t_final=None, g=0.0, cadence=None, depth=None, workers=None):
    """Generator form of :func:`evolve`; yields each snapshot as it is produced."""
    s0 = _depth(cfg)
    schedule = schedule or ForceSchedule()
    depth_of = depth if callable(depth) else (lambda t: s0)
    if g < 0:
        raise ValueError("nonlinearity g must be >= 0")
    if dt <= 0 or dt > MAX_DT + 1e-15:
        raise StabilityError(f"dt = {dt:g} t_r exceeds t_r/200")
    s_max = max(s0, depth_of(psi.time), depth_of(t_final if t_final is not None else psi.time))
    if s_max * dt > STABILITY_LIMIT:
        raise StabilityError(f"s*dt/t_r = {s_max * dt:g} > {STABILITY_LIMIT}; reduce dt")
    if t_final is None or t_final < psi.time:
        raise ValueError("t_final must be >= the current time")
    span = t_final - psi.time
    if cadence:
        per_snap = max(1, int(np.ceil(cadence / dt - 1e-9)))
        n_snaps = int(round(span / cadence))
        dt = cadence / per_snap
        n_steps = n_snaps * per_snap
    else:
        n_steps = max(1, int(np.ceil(span / dt - 1e-9))) if span > 0 else 0
        dt = span / n_steps if n_steps else dt
        per_snap = max(n_steps, 1)

    grid = psi.grid
    z = grid.z
    cos2 = np.cos(z) ** 2
    half = np.exp(-0.5j * dt * grid.p**2)
    full = half * half
    t0 = psi.time
    fwd = lambda x: sfft.fft(x, workers=workers)
    inv = lambda x: sfft.ifft(x, workers=workers)

    def snapshot(spec_k, t):
        vals = inv(spec_k * half)
        return Wavefunction(vals, grid, t, float(depth_of(t)), float(schedule(t)))

    yield replace(psi, depth=float(depth_of(t0)), force=float(schedule(t0)))
    if n_steps == 0:
        return
    cached = (None, None, None)
    spec_k = fwd(psi.values) * half
    for i in range(n_steps):
        t_mid = t0 + (i + 0.5) * dt
        s_t, f_t = float(depth_of(t_mid)), float(schedule(t_mid))
        x = inv(spec_k)
        if g:
            phase = np.exp(-1j * dt * (s_t * cos2 - f_t * z + g * np.abs(x) ** 2))
        else:
            if cached[0] != (s_t, f_t):
                cached = ((s_t, f_t), np.exp(-1j * dt * (s_t * cos2 - f_t * z)), None)
            phase = cached[1]
        spec_k = fwd(x * phase)
        if (i + 1) % per_snap == 0 or i + 1 == n_steps:
            snap = snapshot(spec_k, t0 + (i + 1) * dt)
            _check_margin(snap)
            yield snap
        spec_k = spec_k * full


def energy(psi: Wavefunction, g=0.0) -> float:
    """<p^2> + <s cos^2 z - F z> + (g/2) int |psi|^4 in E_r."""
    a = psi.momentum_amplitudes()
    dens = np.abs(psi.values) ** 2 * psi.grid.dz
    z = psi.grid.z
    pot = psi.depth * np.cos(z) ** 2 - psi.force * z
    return float(np.sum(np.abs(a) ** 2 * psi.grid.p**2) + np.sum(dens * pot)
                 + 0.5 * g * np.sum(np.abs(psi.values) ** 4) * psi.grid.dz)


def observables(psi: Wavefunction, n_orders=2) -> dict:
    """Mean velocity (v_r), Ehrenfest acceleration (v_r/t_r), momentum distribution
    and diffraction-order populations for orders -n_orders..n_orders.

    Order windows have full width 2 hbar k_r so that they tile momentum space.
    """
    a = psi.momentum_amplitudes()
    prob = np.abs(a) ** 2
    total = prob.sum()
    p = psi.grid.p
    v = float(np.sum(p * prob) / total)
    dens = np.abs(psi.values) ** 2 * psi.grid.dz
    accel = psi.force + psi.depth * float(np.sum(dens * np.sin(2 * psi.grid.z)) / dens.sum())
    orders = np.arange(-n_orders, n_orders + 1)
    order_of = np.floor((p + 1.0) / 2.0).astype(int)
    pops = np.array([prob[order_of == n].sum() for n in orders]) / total
    idx = np.argsort(p)
    return {"mean_velocity": v, "mean_acceleration": accel,
            "momentum_distribution": (p[idx], prob[idx] / total),
            "peak_populations": pops, "orders": orders}


@dataclass(frozen=True, eq=False)
class TofProfile:
    """1D density after time of flight: ``x`` in um, ``density`` per um.

    ``um_per_vr`` converts a velocity in v_r to a position on this axis.
    """

    x: np.ndarray
    density: np.ndarray
    um_per_vr: float
    tof_time: float
    blur: float

    def to_csv(self, path):
        np.savetxt(path, np.column_stack([self.x, self.density]), delimiter=",",
                   header="x_um,density_per_um", comments="", fmt="%.15g")
        return path


def density_rms_um(psi: Wavefunction, cfg: LatticeConfig) -> float:
    dens = np.abs(psi.values) ** 2
    dens = dens / dens.sum()
    z = psi.grid.z
    mu = np.sum(dens * z)
    return float(cfg.to_si(np.sqrt(np.sum(dens * (z - mu) ** 2)), "length") * 1e6)


def tof_expand(psi: Wavefunction, tof_time, cfg: LatticeConfig | None = None, x=None,
               blur=None, threshold=1e-14) -> TofProfile:
    """Far-field profile after ``tof_time`` seconds: x = p v_r t_tof, blurred by ``blur`` um.

    ``blur`` defaults to the rms width of the in-lattice density.
    """
    cfg = cfg or LatticeConfig(s=psi.depth)
    scale = cfg.v_r * tof_time * 1e6
    if blur is None:
        blur = density_rms_um(psi, cfg)
    p, w = observables(psi)["momentum_distribution"]
    keep = w > threshold * w.max()
    centres, w = p[keep] * scale, w[keep] / w[keep].sum()
    if x is None:
        step = blur / 4
        lo = np.floor((centres.min() - 8 * blur) / step) * step
        hi = np.ceil((centres.max() + 8 * blur) / step) * step
        x = np.arange(lo, hi + step / 2, step)
    x = np.asarray(x, dtype=float)
    dens = np.zeros_like(x)
    norm = 1.0 / (np.sqrt(2 * np.pi) * blur)
    for chunk in np.array_split(np.arange(len(centres)), max(1, len(centres) // 256)):
        dens += (w[chunk, None] * np.exp(-0.5 * ((x[None, :] - centres[chunk, None]) / blur) ** 2)).sum(0)
    return TofProfile(x, dens * norm, scale, float(tof_time), float(blur))


def save_snapshot(psi: Wavefunction, path, binary=False):
    """Write (z, Re psi, Im psi) as CSV or, with ``binary``, as .npz."""
    if binary:
        np.savez(path, z=psi.grid.z, re=psi.values.real, im=psi.values.imag, t=psi.time,
                 sites=psi.grid.sites, points_per_site=psi.grid.points_per_site)
    else:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["z_kr", "re_psi", "im_psi"])
            for row in zip(psi.grid.z, psi.values.real, psi.values.imag):
                w.writerow([f"{v:.17g}" for v in row])
    return path


def load_snapshot(path) -> Wavefunction:
    if str(path).endswith(".npz"):
        d = np.load(path)
        grid = GridSpec(int(d["sites"]), int(d["points_per_site"]))
        return Wavefunction(d["re"] + 1j * d["im"], grid, float(d["t"]))
    data = np.loadtxt(path, delimiter=",", skiprows=1)
    dz = data[1, 0] - data[0, 0]
    pps = int(round(np.pi / dz))
    grid = GridSpec(len(data) // pps, pps)
    return Wavefunction(data[:, 1] + 1j * data[:, 2], grid)


@dataclass(frozen=True, eq=False)
class SimulationRun:
    """Observable trace of a protocol run plus optional TOF profiles per frame."""

    trace: VelocityTrace
    profiles: list = field(default_factory=list)


def run_protocol(cfg: LatticeConfig, schedule: ForceSchedule, duration, cadence,
                 grid: GridSpec | None = None, envelope_width=DEFAULT_ENVELOPE_UM, sigma_k=None,
                 dt=DEFAULT_DT, g=0.0, n_orders=2, tof_time=None, workers=None,
                 psi0: Wavefunction | None = None) -> SimulationRun:
    """Load, wait ``schedule.delay``, then record ``duration`` t_r after force onset.

    Trace times are measured from the onset (the start of the force ramp).
    """
    grid = grid or GridSpec()
    psi = psi0 or prepare_ground_state(cfg, grid, envelope_width, sigma_k)
    if schedule.delay > 0:
        psi = evolve(psi, cfg, schedule, dt=dt, t_final=schedule.delay, g=g, workers=workers)[-1]
    rows, pops, profiles = [], [], []
    blur = density_rms_um(psi, cfg) if tof_time else None
    for snap in iter_evolve(psi, cfg, schedule, dt, schedule.delay + duration, g, cadence,
                            workers=workers):
        ob = observables(snap, n_orders)
        rows.append((snap.time - schedule.delay, ob["mean_velocity"], ob["mean_acceleration"]))
        pops.append(ob["peak_populations"])
        if tof_time:
            profiles.append(tof_expand(snap, tof_time, cfg, blur=blur))
    t, v, a = np.array(rows).T
    orders = np.arange(-n_orders, n_orders + 1)
    trace = VelocityTrace(t, v, a, np.array(pops), np.tile(2.0 * orders, (len(t), 1)),
                          meta={"source": "split-step", "s": cfg.s, "F": schedule.force,
                                "delay": schedule.delay, "rise": schedule.rise, "g": g,
                                "time_origin": "force onset"})
    return SimulationRun(trace, profiles)
