"""Measurement pipeline: diffraction-comb fits, velocity reconstruction,
two-sinusoid fits and mass estimates.

Times are in t_r and velocities in v_r, matching the simulation output;
TOF profile positions are in um with ``um_per_vr`` as the velocity scale.
"""

from __future__ import annotations

import json
import warnings
from dataclasses import asdict, dataclass, field

import numpy as np
from scipy import signal
from scipy.optimize import least_squares

from .analytic import VelocityTrace

DEFAULT_WINDOW_S = 300e-6
DEEP_LATTICE = 10.0
PARAM_NAMES = ("A_d", "omega_d", "phi_d", "A_B", "omega_B", "phi_B")


class FitError(RuntimeError):
    """Least squares did not converge; ``history`` holds the residual norms tried."""

    def __init__(self, message, history=()):
        super().__init__(message)
        self.history = list(history)


class SpectralPeakError(FitError):
    """Spectral peaks too weak or too close to seed a fit."""

    def __init__(self, message, candidates=()):
        super().__init__(message)
        self.candidates = list(candidates)


class UnstableEstimateError(ValueError):
    """Cosine factor of the Bloch component is too close to zero at t0."""


def _wrap(phi):
    return float(np.pi - (np.pi - phi) % (2 * np.pi))


def gaussian_comb(x, offset, spacing, width, amplitudes):
    """Sum of area-``amplitudes`` Gaussians centred at offset + j*spacing."""
    j = np.arange(len(amplitudes))
    z = (x[:, None] - offset - j[None, :] * spacing) / width
    return (np.exp(-0.5 * z**2) @ np.asarray(amplitudes)) / (np.sqrt(2 * np.pi) * width)


@dataclass(frozen=True, eq=False)
class DiffractionFit:
    """Equal-width, equally spaced Gaussian comb fitted to one TOF profile."""

    amplitudes: np.ndarray
    offset: float
    spacing: float
    width: float
    residual_norm: float
    velocities: np.ndarray
    flags: tuple = ()

    @property
    def centers(self) -> np.ndarray:
        return self.offset + self.spacing * np.arange(len(self.amplitudes))

    def to_dict(self) -> dict:
        d = asdict(self)
        d["amplitudes"] = self.amplitudes.tolist()
        d["velocities"] = self.velocities.tolist()
        d["flags"] = list(self.flags)
        return d


def add_profile_noise(density, amplitude, rng):
    """Additive Gaussian noise of std ``amplitude * max(density)``."""
    density = np.asarray(density, dtype=float)
    return density + amplitude * density.max() * rng.standard_normal(density.shape)


def _comb_start(x, y, spacing, n_peaks):
    """Offset of the n_peaks-long comb that captures the most signal."""
    w = np.clip(y, 0, None)
    phase = np.angle(np.sum(w * np.exp(2j * np.pi * x / spacing)))
    base = phase / (2 * np.pi) * spacing
    lo = np.floor((x.min() - base) / spacing) - 1
    hi = np.ceil((x.max() - base) / spacing) + 1
    starts = base + spacing * np.arange(lo, hi - n_peaks + 2)
    best, best_mass = starts[0], -1.0
    for s0 in starts:
        mass = sum(w[np.abs(x - (s0 + j * spacing)) < spacing / 2].sum() for j in range(n_peaks))
        if mass > best_mass:
            best, best_mass = s0, mass
    return best


def fit_diffraction(x, density, n_peaks=4, um_per_vr=None, spacing=None, width=None,
                    window=None, depth=None, outside_tolerance=1e-3) -> DiffractionFit:
    """Fit ``n_peaks`` area-normalised Gaussians sharing width and spacing.

    Only data inside the imaging ``window = (x_lo, x_hi)`` are fitted.
    ``spacing`` defaults to 2 v_r on the profile axis.  Signal beyond the
    window, or inside it but left unexplained by the comb, above
    ``outside_tolerance`` of the total raises ``peak_outside_window`` or
    ``unfitted_signal``.
    """
    x = np.asarray(x, dtype=float)
    y = np.asarray(density, dtype=float)
    if um_per_vr is None and spacing is None:
        raise ValueError("need um_per_vr or spacing to set the comb spacing")
    spacing0 = spacing if spacing is not None else 2.0 * um_per_vr
    scale = um_per_vr if um_per_vr is not None else spacing0 / 2.0
    flags = []
    if window is not None:
        inside = (x >= window[0]) & (x <= window[1])
        dx = np.gradient(x)
        total = np.sum(np.clip(y, 0, None) * dx)
        if total > 0 and np.sum(np.clip(y[~inside], 0, None) * dx[~inside]) > outside_tolerance * total:
            flags.append("peak_outside_window")
        x, y = x[inside], y[inside]
    if depth is not None and depth > DEEP_LATTICE and n_peaks <= 4:
        flags.append("few_peaks_deep_lattice")
    width0 = width if width is not None else spacing0 / 8
    off0 = _comb_start(x, y, spacing0, n_peaks)
    dx = np.mean(np.diff(x))
    amp0 = np.array([np.clip(y[np.abs(x - off0 - j * spacing0) < spacing0 / 2], 0, None).sum() * dx
                     for j in range(n_peaks)])
    history = []

    def resid(q):
        r = gaussian_comb(x, q[0], q[1], q[2], q[3:]) - y
        history.append(float(np.linalg.norm(r)))
        return r

    q0 = np.r_[off0, spacing0, width0, np.maximum(amp0, 1e-12)]
    lower = np.r_[-np.inf, 0.5 * spacing0, 1e-3 * spacing0, np.zeros(n_peaks)]
    upper = np.r_[np.inf, 1.5 * spacing0, spacing0, np.full(n_peaks, np.inf)]
    try:
        res = least_squares(resid, q0, bounds=(lower, upper), x_scale="jac", max_nfev=2000)
    except (ValueError, FloatingPointError) as exc:
        raise FitError(f"comb fit failed: {exc}", history) from exc
    if not res.success:
        raise FitError(f"comb fit did not converge: {res.message}", history)
    off, sp, wd = res.x[:3]
    amps = res.x[3:]
    dxw = np.gradient(x) if len(x) > 1 else np.ones(1)
    signal_total = np.sum(np.clip(y, 0, None) * dxw)
    unexplained = np.sum(np.clip(y - gaussian_comb(x, off, sp, wd, amps), 0, None) * dxw)
    if signal_total > 0 and unexplained > outside_tolerance * signal_total:
        flags.append("unfitted_signal")
    centers = off + sp * np.arange(n_peaks)
    return DiffractionFit(amps, float(off), float(sp), float(wd), float(np.linalg.norm(res.fun)),
                          centers / scale, tuple(flags))


def reconstruct_velocity(times, fits) -> VelocityTrace:
    """Amplitude-weighted mean velocity per frame; frames with no signal are dropped."""
    t, v, amps, vels, dropped = [], [], [], [], []
    for ti, fit in zip(times, fits):
        total = fit.amplitudes.sum()
        if total <= 0:
            dropped.append(float(ti))
            continue
        t.append(ti)
        v.append(float(fit.amplitudes @ fit.velocities / total))
        amps.append(fit.amplitudes)
        vels.append(fit.velocities)
    flags = ()
    if dropped:
        warnings.warn(f"dropped {len(dropped)} frame(s) with zero total amplitude", stacklevel=2)
        flags = ("dropped_frames",)
    frame_flags = sorted({f for fit in fits for f in fit.flags})
    return VelocityTrace(np.array(t), np.array(v), None, np.array(amps), np.array(vels),
                         flags + tuple(frame_flags),
                         meta={"source": "diffraction", "dropped_times": dropped})


# --- two-sinusoid model -------------------------------------------------------

def two_sine(t, params):
    A_d, w_d, p_d, A_B, w_B, p_B = params
    return A_d * np.sin(w_d * t + p_d) + A_B * np.sin(w_B * t + p_B)


def _two_sine_jac(t, params):
    A_d, w_d, p_d, A_B, w_B, p_B = params
    sd, cd = np.sin(w_d * t + p_d), np.cos(w_d * t + p_d)
    sB, cB = np.sin(w_B * t + p_B), np.cos(w_B * t + p_B)
    return np.column_stack([sd, A_d * t * cd, A_d * cd, sB, A_B * t * cB, A_B * cB])


@dataclass(frozen=True, eq=False)
class TwoSineFit:
    """Fast (gap) and slow (Bloch) sinusoids with 1-sigma errors; t in t_r, v in v_r."""

    params: np.ndarray
    errors: np.ndarray
    window: tuple
    residual_norm: float
    covariance: np.ndarray
    n_points: int

    def __getattr__(self, name):
        if name in PARAM_NAMES:
            return float(self.params[PARAM_NAMES.index(name)])
        if name.startswith("d") and name[1:] in PARAM_NAMES:
            return float(self.errors[PARAM_NAMES.index(name[1:])])
        raise AttributeError(name)

    def __call__(self, t):
        return two_sine(np.asarray(t, dtype=float), self.params)

    def to_dict(self) -> dict:
        return {"params": dict(zip(PARAM_NAMES, map(float, self.params))),
                "errors": dict(zip(PARAM_NAMES, map(float, self.errors))),
                "window": list(map(float, self.window)), "residual_norm": self.residual_norm,
                "n_points": self.n_points, "covariance": self.covariance.tolist()}

    @classmethod
    def from_dict(cls, d) -> "TwoSineFit":
        return cls(np.array([d["params"][k] for k in PARAM_NAMES]),
                   np.array([d["errors"][k] for k in PARAM_NAMES]), tuple(d["window"]),
                   d["residual_norm"], np.array(d["covariance"]), d["n_points"])


def _periodogram(t, v, pad=16):
    dt = np.median(np.diff(t))
    y = v - np.polyval(np.polyfit(t, v, 2), t)
    n = pad * len(y)
    spec = np.abs(np.fft.rfft(y * np.hanning(len(y)), n)) ** 2
    omega = 2 * np.pi * np.fft.rfftfreq(n, dt)
    return omega, spec


def spectral_peaks(t, v, omega_min=0.0, n=2):
    """Angular frequencies of the ``n`` strongest local maxima above ``omega_min``."""
    omega, spec = _periodogram(t, v)
    idx, _ = signal.find_peaks(spec)
    idx = idx[omega[idx] > omega_min]
    if idx.size == 0:
        raise SpectralPeakError("no spectral peak above the Bloch band", [])
    idx = idx[np.argsort(spec[idx])[::-1]][:n]
    return omega[idx], spec[idx]


def _linear_start(t, v, w_d, w_B):
    basis = np.column_stack([np.sin(w_d * t), np.cos(w_d * t), np.sin(w_B * t), np.cos(w_B * t)])
    c = np.linalg.lstsq(basis, v, rcond=None)[0]
    return np.array([np.hypot(c[0], c[1]), w_d, np.arctan2(c[1], c[0]),
                     np.hypot(c[2], c[3]), w_B, np.arctan2(c[3], c[2])])


def _normalise(params):
    p = np.array(params, dtype=float)
    for a, ph in ((0, 2), (3, 5)):
        if p[a] < 0:
            p[a], p[ph] = -p[a], p[ph] + np.pi
        p[ph] = _wrap(p[ph])
    return p


def fit_two_sine(t, v, window=None, force=None, omega_B=None, omega_d=None,
                 spectrum_from_full=True, sigma=None) -> TwoSineFit:
    """Least-squares fit of v(t) = A_d sin(w_d t + p_d) + A_B sin(w_B t + p_B).

    ``window`` = (t_start, t_stop) or a duration measured from ``t[0]``.
    The slow frequency is seeded from pi*F when ``force`` is known (recoil
    units), otherwise from the low-frequency spectral peak of the full trace;
    the fast one from the strongest spectral peak above it.  Starting values
    for amplitudes and phases come from a linear solve at fixed frequencies.
    """
    t = np.asarray(t, dtype=float)
    v = np.asarray(v, dtype=float)
    if window is None:
        window = (t[0], t[-1])
    elif np.isscalar(window):
        window = (t[0], t[0] + float(window))
    sel = (t >= window[0] - 1e-12) & (t <= window[1] + 1e-12)
    tw, vw = t[sel], v[sel]
    if len(tw) < 8:
        raise FitError("fewer than 8 samples in the fit window")
    ts, vs = (t, v) if spectrum_from_full else (tw, vw)
    if omega_B is None:
        if force is not None and force != 0:
            omega_B = np.pi * abs(force)
        else:
            om, sp = _periodogram(ts, vs - vs.mean())
            low = signal.find_peaks(np.r_[0.0, sp])[0] - 1
            if low.size == 0:
                raise SpectralPeakError("no low-frequency peak for the Bloch seed", [])
            omega_B = float(om[low[0]])
    if omega_d is None:
        cands, power = spectral_peaks(tw, vw, omega_min=2 * omega_B)
    else:
        cands, power = np.atleast_1d(omega_d), np.ones(1)
    history, last = [], None
    for w_d in cands:
        q0 = _linear_start(tw, vw, w_d, omega_B)
        try:
            res = least_squares(lambda q: two_sine(tw, q) - vw, q0,
                                jac=lambda q: _two_sine_jac(tw, q), method="lm",
                                x_scale="jac", max_nfev=5000)
        except ValueError as exc:
            last = exc
            continue
        history.append(float(np.linalg.norm(res.fun)))
        q = _normalise(res.x)
        if res.success and q[1] > q[4] > 0:
            return _finish(tw, vw, q, res, window, sigma)
        last = res.message
    raise SpectralPeakError(f"two-sine fit failed from every start ({last}); "
                            f"candidate fast frequencies {list(map(float, cands))}",
                            list(map(float, cands)))


def _finish(t, v, q, res, window, sigma):
    J = _two_sine_jac(t, q)
    r = two_sine(t, q) - v
    dof = max(len(t) - len(q), 1)
    s2 = sigma**2 if sigma is not None else float(r @ r) / dof
    try:
        cov = np.linalg.inv(J.T @ J) * s2
    except np.linalg.LinAlgError:
        cov = np.full((6, 6), np.nan)
    err = np.sqrt(np.clip(np.diag(cov), 0, None))
    return TwoSineFit(q, err, (float(window[0]), float(window[1])),
                      float(np.linalg.norm(r)), cov, len(t))


def fit_trace(trace: VelocityTrace, window=None, force=None, **kw) -> TwoSineFit:
    return fit_two_sine(trace.t, trace.velocity, window, force, **kw)


# --- masses --------------------------------------------------------------------

@dataclass(frozen=True)
class MassEstimate:
    """Effective and dynamical masses in units of m0 at the zero-phase time t0 (t_r)."""

    m_eff: float
    m_dyn: float
    t0: float
    m_eff_err: float
    m_dyn_err: float

    def to_dict(self) -> dict:
        return asdict(self)


def zero_phase_time(fit: TwoSineFit, force=1.0) -> float:
    """Time nearest zero where the fast sinusoid's phase is 0 (pi for negative force)."""
    target = 0.0 if force >= 0 else np.pi
    return _wrap(target - fit.phi_d) / fit.omega_d


def _masses(q, force):
    A_d, w_d, p_d, A_B, w_B, p_B = q
    target = 0.0 if force >= 0 else np.pi
    t0 = _wrap(target - p_d) / w_d
    slow = A_B * w_B * np.cos(w_B * t0 + p_B)
    fast = A_d * w_d * np.cos(target)
    return force / slow, force / (fast + slow), t0, np.cos(w_B * t0 + p_B)


def extract_masses(fit: TwoSineFit, force, min_cos=0.1) -> MassEstimate:
    """Slope construction at t0: F/m_eff = A_B w_B cos(w_B t0 + p_B) and
    F/m_dyn = A_d w_d + A_B w_B cos(w_B t0 + p_B), with F in recoil units."""
    if force == 0:
        raise ValueError("force must be nonzero")
    m_eff, m_dyn, t0, c = _masses(fit.params, force)
    if abs(c) < min_cos:
        raise UnstableEstimateError(f"cos(w_B t0 + p_B) = {c:.3g} is too small for a stable estimate")
    if not np.isfinite(m_dyn):
        raise UnstableEstimateError("dynamical-mass denominator vanished")
    grads = np.zeros((2, 6))
    for i in range(6):
        h = 1e-6 * max(abs(fit.params[i]), 1e-3)
        up, dn = fit.params.copy(), fit.params.copy()
        up[i] += h
        dn[i] -= h
        grads[:, i] = (np.array(_masses(up, force)[:2]) - np.array(_masses(dn, force)[:2])) / (2 * h)
    var = np.einsum("ij,jk,ik->i", grads, fit.covariance, grads)
    err = np.sqrt(np.clip(var, 0, None))
    return MassEstimate(float(m_eff), float(m_dyn), float(t0), float(err[0]), float(err[1]))


# --- smoothing -----------------------------------------------------------------

def lowpass_guide(t, v, cutoff=None, omega_B=None, omega_d=None, order=4):
    """Zero-phase Butterworth low-pass of a uniformly sampled trace.

    ``cutoff`` is an angular frequency in 1/t_r; by default the geometric mean
    of ``omega_B`` and ``omega_d``.
    """
    t = np.asarray(t, dtype=float)
    v = np.asarray(v, dtype=float)
    dt = np.diff(t)
    if not np.allclose(dt, dt[0], rtol=1e-6):
        raise ValueError("lowpass_guide needs uniform sampling")
    if cutoff is None:
        if omega_B is None or omega_d is None:
            raise ValueError("give a cutoff or both omega_B and omega_d")
        cutoff = np.sqrt(omega_B * omega_d)
    nyquist = np.pi / dt[0]
    if not 0 < cutoff < nyquist:
        raise ValueError(f"cutoff {cutoff:g} outside (0, {nyquist:g})")
    sos = signal.butter(order, cutoff / nyquist, output="sos")
    return signal.sosfiltfilt(sos, v)


# --- I/O -----------------------------------------------------------------------

def load_trace_csv(path) -> VelocityTrace:
    """Read a trace CSV with columns ``t/t_r`` and ``v/v_r`` (others ignored)."""
    data = np.genfromtxt(path, delimiter=",", names=True, deletechars="")
    names = data.dtype.names
    t_col = next(n for n in names if n.startswith("t"))
    v_col = next(n for n in names if n.startswith("v"))
    a_col = next((n for n in names if n.startswith("a/")), None)
    return VelocityTrace(np.atleast_1d(data[t_col]), np.atleast_1d(data[v_col]),
                         None if a_col is None else np.atleast_1d(data[a_col]))


def write_json(obj, path):
    payload = obj.to_dict() if hasattr(obj, "to_dict") else obj
    with open(path, "w") as fh:
        json.dump(payload, fh, indent=2, sort_keys=True)
    return path


def write_residuals(fit: TwoSineFit, t, v, path):
    t = np.asarray(t, dtype=float)
    sel = (t >= fit.window[0] - 1e-12) & (t <= fit.window[1] + 1e-12)
    r = np.asarray(v)[sel] - fit(t[sel])
    np.savetxt(path, np.column_stack([t[sel], r]), delimiter=",", header="t/t_r,residual/v_r",
               comments="", fmt="%.15g")
    return path
