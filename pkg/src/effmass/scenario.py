"""Declarative scenarios: validated configs and the deterministic bundle runner."""

from __future__ import annotations

import copy
import csv
import hashlib
import itertools
import json
import os
import platform
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import scipy
import yaml

from . import __version__
from . import analysis as an
from . import bandstructure as bs
from . import propagator as pr
from .units import RB87_MASS, LatticeConfig

SCHEMA_VERSION = 1
SPECIES = {"Rb87": RB87_MASS}

DEFAULTS = {
    "schema_version": SCHEMA_VERSION,
    "name": None,
    "seed": 0,
    "lattice": {"s": None, "wavelength": 1064e-9, "mass": None},
    "force": {"acceleration": 11.7, "delay": 20e-6, "rise": 20e-6},
    "sweep": {},
    "grid": {"sites": pr.DEFAULT_SITES, "points_per_site": pr.DEFAULT_POINTS_PER_SITE,
             "dt": pr.DEFAULT_DT, "envelope_width": pr.DEFAULT_ENVELOPE_UM, "g": 0.0},
    "run": {"duration": 2e-3, "min_bloch_periods": 0.0, "cadence": 4e-6},
    "analysis": {"velocity": "diffraction", "tof_time": 20e-3, "n_peaks": 4,
                 "imaging_window": None, "noise": 0.0, "fit_window": an.DEFAULT_WINDOW_S,
                 "lowpass": True},
    "bands": {"n_bands": bs.DEFAULT_BANDS, "cutoff": bs.DEFAULT_CUTOFF, "nk": bs.DEFAULT_NK},
    "output": {"dir": None},
}
SWEEP_AXES = ("s", "acceleration")

BUILTINS = {
    "fig2": {"name": "fig2", "lattice": {"s": 9.4, "mass": "Rb87"},
             "force": {"acceleration": 11.7, "delay": 20e-6, "rise": 20e-6},
             "run": {"duration": 2e-3, "cadence": 4e-6}},
    "fig3": {"name": "fig3", "lattice": {"s": 9.4, "mass": "Rb87"},
             "force": {"acceleration": 11.7, "delay": 20e-6, "rise": 20e-6},
             "sweep": {"s": [3.0, 6.0, 9.4, 12.0], "acceleration": [4.0, 6.0, 8.0, 10.0, 12.0]},
             "run": {"duration": 2e-3, "min_bloch_periods": 2.0, "cadence": 4e-6},
             "analysis": {"velocity": "direct", "lowpass": False}},
    "fig4": {"name": "fig4", "lattice": {"s": 9.4, "mass": "Rb87"},
             "force": {"acceleration": 2.0, "delay": 20e-6, "rise": 0.0},
             "sweep": {"s": [2.0, 3.0, 4.0, 5.0, 6.0, 7.0, 8.0, 9.0, 10.0, 11.0, 12.0, 14.0, 16.0]},
             "run": {"duration": 300e-6, "cadence": 4e-6}},
}

EXIT_OK, EXIT_VALIDATION, EXIT_RUNTIME = 0, 3, 4


class ConfigError(ValueError):
    """Config failed validation; ``issues`` lists every offending field."""

    def __init__(self, issues):
        super().__init__("invalid scenario:\n  " + "\n  ".join(issues))
        self.issues = list(issues)


@dataclass
class Report:
    errors: list = field(default_factory=list)
    warnings: list = field(default_factory=list)

    @property
    def ok(self) -> bool:
        return not self.errors

    def lines(self) -> list[str]:
        return [f"error: {e}" for e in self.errors] + [f"warning: {w}" for w in self.warnings]


def load_config(source) -> dict:
    """YAML file path, builtin name or dict -> raw config dict."""
    if isinstance(source, dict):
        return copy.deepcopy(source)
    if str(source) in BUILTINS:
        return copy.deepcopy(BUILTINS[str(source)])
    with open(source) as fh:
        data = yaml.safe_load(fh)
    if not isinstance(data, dict):
        raise ConfigError([f"{source}: top level must be a mapping"])
    return data


def _merge(defaults, raw, path, issues):
    out = copy.deepcopy(defaults)
    for key, val in raw.items():
        where = f"{path}{key}"
        if key not in defaults:
            issues.append(f"{where}: unknown field")
        elif isinstance(defaults[key], dict) and key != "sweep":
            if not isinstance(val, dict):
                issues.append(f"{where}: expected a mapping")
            else:
                out[key] = _merge(defaults[key], val, where + ".", issues)
        else:
            out[key] = val
    return out


def normalise(raw: dict) -> tuple[dict, list]:
    issues = []
    cfg = _merge(DEFAULTS, raw, "", issues)
    return cfg, issues


def _num(cfg, dotted, issues, positive=False, nonneg=False, allow_none=False):
    node = cfg
    for part in dotted.split("."):
        node = node.get(part) if isinstance(node, dict) else None
    if node is None:
        if not allow_none:
            issues.append(f"{dotted}: missing")
        return None
    if isinstance(node, bool) or not isinstance(node, (int, float)):
        issues.append(f"{dotted}: expected a number, got {node!r}")
        return None
    if positive and not node > 0:
        issues.append(f"{dotted}: must be > 0, got {node}")
    if nonneg and not node >= 0:
        issues.append(f"{dotted}: must be >= 0, got {node}")
    return float(node)


def _mass(cfg, issues):
    m = cfg["lattice"].get("mass")
    if m is None:
        issues.append("lattice.mass: missing (kg or a species name such as 'Rb87')")
        return None
    if isinstance(m, str):
        if m not in SPECIES:
            issues.append(f"lattice.mass: unknown species {m!r}")
            return None
        return SPECIES[m]
    return _num(cfg, "lattice.mass", issues, positive=True)


def sweep_points(cfg: dict) -> list[tuple[float, float]]:
    s_vals = cfg["sweep"].get("s", [cfg["lattice"]["s"]])
    a_vals = cfg["sweep"].get("acceleration", [cfg["force"]["acceleration"]])
    return [(float(s), float(a)) for s, a in itertools.product(s_vals, a_vals)]


def _writable(path) -> bool:
    p = Path(path).resolve()
    while not p.exists():
        p = p.parent
    return p.is_dir() and os.access(p, os.W_OK)


def validate(source, out_dir=None) -> Report:
    """Schema and physics guards without running anything."""
    rep = Report()
    try:
        raw = load_config(source)
    except (OSError, yaml.YAMLError, ConfigError) as exc:
        rep.errors.append(str(exc))
        return rep
    cfg, rep.errors = normalise(raw)
    e = rep.errors
    if cfg.get("schema_version") != SCHEMA_VERSION:
        e.append(f"schema_version: expected {SCHEMA_VERSION}, got {cfg.get('schema_version')!r}")
    if not cfg.get("name") or not isinstance(cfg["name"], str):
        e.append("name: missing")
    sweep = cfg.get("sweep") or {}
    if not isinstance(sweep, dict):
        e.append("sweep: expected a mapping")
        sweep = {}
    for axis, vals in sweep.items():
        if axis not in SWEEP_AXES:
            e.append(f"sweep.{axis}: unknown axis (allowed: {', '.join(SWEEP_AXES)})")
        elif not isinstance(vals, list) or not vals:
            e.append(f"sweep.{axis}: must be a nonempty list")
        elif any(isinstance(v, bool) or not isinstance(v, (int, float)) for v in vals):
            e.append(f"sweep.{axis}: values must be numbers")
    if "s" not in sweep:
        _num(cfg, "lattice.s", e, nonneg=True)
    elif any(isinstance(v, (int, float)) and v < 0 for v in sweep.get("s") or []):
        e.append("sweep.s: lattice depths must be >= 0")
    mass = _mass(cfg, e)
    wl = _num(cfg, "lattice.wavelength", e, positive=True)
    _num(cfg, "force.acceleration", e)
    _num(cfg, "force.delay", e, nonneg=True)
    _num(cfg, "force.rise", e, nonneg=True)
    dt = _num(cfg, "grid.dt", e, positive=True)
    env = _num(cfg, "grid.envelope_width", e, positive=True)
    _num(cfg, "grid.g", e, nonneg=True)
    dur = _num(cfg, "run.duration", e, positive=True)
    cad = _num(cfg, "run.cadence", e, positive=True)
    _num(cfg, "run.min_bloch_periods", e, nonneg=True)
    _num(cfg, "analysis.fit_window", e, positive=True)
    _num(cfg, "analysis.noise", e, nonneg=True)
    _num(cfg, "analysis.tof_time", e, positive=True)
    if cfg["analysis"]["velocity"] not in ("diffraction", "direct"):
        e.append("analysis.velocity: must be 'diffraction' or 'direct'")
    win = cfg["analysis"]["imaging_window"]
    if win is not None and not (isinstance(win, list) and len(win) == 2 and win[0] < win[1]):
        e.append("analysis.imaging_window: expected [low, high] in v_r")
    for key in ("sites", "points_per_site"):
        if not isinstance(cfg["grid"][key], int) or cfg["grid"][key] <= 0:
            e.append(f"grid.{key}: must be a positive integer")
    for key in ("n_bands", "cutoff", "nk"):
        if not isinstance(cfg["bands"][key], int) or cfg["bands"][key] <= 0:
            e.append(f"bands.{key}: must be a positive integer")
    if not isinstance(cfg["analysis"]["n_peaks"], int) or cfg["analysis"]["n_peaks"] < 1:
        e.append("analysis.n_peaks: must be a positive integer")
    if not e:
        try:
            grid = pr.GridSpec(cfg["grid"]["sites"], cfg["grid"]["points_per_site"])
        except ValueError as exc:
            e.append(f"grid: {exc}")
            grid = None
        if 2 * cfg["bands"]["cutoff"] < cfg["bands"]["n_bands"] or cfg["bands"]["cutoff"] < 4:
            e.append("bands.cutoff: too small for the requested band count (need cutoff >= 4 and 2*cutoff >= n_bands)")
        if dt > pr.MAX_DT:
            e.append(f"grid.dt: {dt:g} t_r exceeds the t_r/200 limit")
        for s, a in sweep_points(cfg):
            lat = LatticeConfig(s=s, wavelength=wl, bare_mass=mass)
            F = lat.force_from_acceleration(a)
            if s * dt > pr.STABILITY_LIMIT:
                e.append(f"grid.dt: s*dt/t_r = {s * dt:g} at s={s:g} breaks the split-step rule "
                         f"s*dt/t_r <= {pr.STABILITY_LIMIT}")
            if cad and cad / lat.t_r < dt:
                rep.warnings.append(f"run.cadence: shorter than one time step at s={s:g}")
            if grid is not None:
                _box_guard(lat, grid, env, F, dur, cfg, rep)
            if F:
                e2, c = bs.eigensystem(s, 0.0, 2)
                p21 = abs(bs.momentum_elements(0.0, c)[1, 0])
                gap = e2[1] - e2[0]
                guard = abs(2 * F * p21 / gap**2) if gap > bs.DEGENERACY_FLOOR else np.inf
                if guard > 0.3:
                    rep.warnings.append(f"force: first-order amplitude {guard:.2f} > 0.3 at s={s:g}, "
                                        f"a={a:g} m/s^2; perturbative predictions unreliable")
    out = out_dir or cfg["output"]["dir"]
    if out is not None and not _writable(out):
        e.append(f"output.dir: {out} is not writable")
    return rep


def _box_guard(lat, grid, env_um, F, duration_s, cfg, rep):
    sigma_z = lat.to_recoil(env_um * 1e-6, "length")
    t_end = lat.to_recoil(duration_s + cfg["force"]["delay"], "time")
    t_end = max(t_end, cfg["run"]["min_bloch_periods"] * 2 / abs(F)) if F else t_end
    if lat.s < 1.0:
        drift = abs(F) * t_end**2
    else:
        e0, e1 = bs.band_energies(lat.s, 0.0, 1)[0], bs.band_energies(lat.s, 1.0, 1)[0]
        drift = min(abs(F) * t_end**2, (e1 - e0) / abs(F) if F else 0.0)
    room = grid.length / 2 - pr.EDGE_SITES * np.pi
    need = 5 * sigma_z + drift
    if need > room:
        rep.errors.append(f"grid.sites: wavepacket needs {need / np.pi:.0f} sites from the centre but the "
                          f"box leaves {room / np.pi:.0f} inside the {pr.EDGE_SITES}-site margin at s={lat.s:g}")


# --- running -------------------------------------------------------------------

def _canonical(obj) -> str:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"))


def _sha(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def _label(s, a) -> str:
    return f"s{s:g}_a{a:g}".replace(".", "p")


def _fmt(x) -> str:
    if isinstance(x, str):
        return x
    if x is None or (isinstance(x, float) and not np.isfinite(x)):
        return "nan"
    return f"{x:.10g}"


def _write_csv(path, header, rows):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(header)
        for row in rows:
            w.writerow([_fmt(v) for v in row])
    return path


def _run_point(cfg: dict, index: int, s: float, a: float, out_dir: str) -> dict:
    lat = LatticeConfig(s=s, wavelength=cfg["lattice"]["wavelength"], bare_mass=cfg["_mass"])
    sched = pr.ForceSchedule.from_acceleration(lat, a, cfg["force"]["delay"], cfg["force"]["rise"])
    F = sched.force
    dur = lat.to_recoil(cfg["run"]["duration"], "time")
    if F and cfg["run"]["min_bloch_periods"]:
        dur = max(dur, cfg["run"]["min_bloch_periods"] * 2 / abs(F))
    cadence = lat.to_recoil(cfg["run"]["cadence"], "time")
    an_cfg = cfg["analysis"]
    diffraction = an_cfg["velocity"] == "diffraction"
    grid = pr.GridSpec(cfg["grid"]["sites"], cfg["grid"]["points_per_site"])
    run = pr.run_protocol(lat, sched, dur, cadence, grid, cfg["grid"]["envelope_width"],
                          dt=cfg["grid"]["dt"], g=cfg["grid"]["g"],
                          tof_time=an_cfg["tof_time"] if diffraction else None, workers=1)
    direct = run.trace
    label = _label(s, a)
    pdir = Path(out_dir) / "points" / label
    pdir.mkdir(parents=True, exist_ok=True)
    flags = []
    if diffraction:
        rng = np.random.default_rng([cfg["seed"], index])
        window = an_cfg["imaging_window"]
        fits = []
        for prof in run.profiles:
            dens = prof.density
            if an_cfg["noise"]:
                dens = an.add_profile_noise(dens, an_cfg["noise"], rng)
            win = None if window is None else (window[0] * prof.um_per_vr, window[1] * prof.um_per_vr)
            fits.append(an.fit_diffraction(prof.x, dens, an_cfg["n_peaks"], prof.um_per_vr,
                                           window=win, depth=s))
        trace = an.reconstruct_velocity(direct.t, fits)
        flags += list(trace.flags)
        peaks = trace.peaks
    else:
        trace = direct
        peaks = None
    t_w = lat.to_recoil(an_cfg["fit_window"], "time")
    result = {"label": label, "s": s, "acceleration": a, "F": F, "error": ""}
    try:
        fast = an.fit_two_sine(trace.t, trace.velocity, window=(0.0, t_w), force=F)
        bloch = an.fit_two_sine(trace.t, trace.velocity, force=F)
        an.write_json(fast, pdir / "fit_window.json")
        an.write_json(bloch, pdir / "fit_full.json")
        an.write_residuals(fast, trace.t, trace.velocity, pdir / "residuals_window.csv")
        result.update(omega_d=fast.omega_d / lat.t_r, omega_d_err=fast.domega_d / lat.t_r,
                      omega_B_window=fast.omega_B / lat.t_r,
                      omega_B=bloch.omega_B / lat.t_r, omega_B_err=bloch.domega_B / lat.t_r)
        try:
            m = an.extract_masses(fast, F)
            an.write_json(m, pdir / "masses.json")
            result.update(m_eff=m.m_eff, m_eff_err=m.m_eff_err, m_dyn=m.m_dyn,
                          m_dyn_err=m.m_dyn_err, t0_us=lat.to_si(m.t0, "time") * 1e6)
        except (an.UnstableEstimateError, ValueError) as exc:
            flags.append("mass_unstable")
            result["error"] = str(exc)
        guide = None
        if an_cfg["lowpass"]:
            guide = an.lowpass_guide(trace.t, trace.velocity, omega_B=bloch.omega_B,
                                     omega_d=fast.omega_d)
    except an.FitError as exc:
        result["error"] = str(exc)
        guide = None
    cols = {"t/t_r": trace.t, "t_us": lat.to_si(trace.t, "time") * 1e6,
            "v/v_r": trace.velocity, "v_um_per_ms": lat.to_si(trace.velocity, "velocity") * 1e3,
            "v_direct/v_r": direct.velocity, "a_direct/(v_r/t_r)": direct.acceleration}
    if guide is not None:
        cols["v_guide/v_r"] = guide
    if peaks is not None:
        for j in range(peaks.shape[1]):
            cols[f"A_{j}"] = peaks[:, j]
            cols[f"v_{j}/v_r"] = trace.peak_velocities[:, j]
    else:
        for j, n in enumerate(np.arange(-(direct.peaks.shape[1] // 2), direct.peaks.shape[1] // 2 + 1)):
            cols[f"pop_{2 * n:+d}hbar_k"] = direct.peaks[:, j]
    _write_csv(pdir / "trace.csv", list(cols), zip(*cols.values()))
    bands = bs.solve_bands(s, n_bands=2, k_grid=np.array([-1.0, 0.0, 1.0]))
    gap0, gap1 = bands.gaps[1, 1, 0], bands.gaps[2, 1, 0]
    result.update(
        omega_B_theory=lat.bloch_angular_frequency(a),
        bloch_period_ms=2 * np.pi / lat.bloch_angular_frequency(a) * 1e3 if a else np.inf,
        gap0=gap0 / lat.t_r, gap_edge=gap1 / lat.t_r,
        h_over_gap0_us=2 * np.pi * lat.t_r / gap0 * 1e6,
        m_star=float(bands.eff_mass[1, 0]), flags=";".join(sorted(set(flags))))
    return result


SUMMARY_COLUMNS = ["label", "s", "acceleration", "F", "omega_B_theory", "omega_B", "omega_B_err",
                   "omega_B_window", "omega_d", "omega_d_err", "gap0", "gap_edge", "h_over_gap0_us",
                   "bloch_period_ms", "m_star", "m_eff", "m_eff_err", "m_dyn", "m_dyn_err",
                   "t0_us", "flags", "error"]


def prepare(source, out_dir=None, seed=None) -> dict:
    rep = validate(source, out_dir)
    if not rep.ok:
        raise ConfigError(rep.errors)
    cfg, _ = normalise(load_config(source))
    if seed is not None:
        cfg["seed"] = int(seed)
    if out_dir is not None:
        cfg["output"]["dir"] = str(out_dir)
    if cfg["output"]["dir"] is None:
        cfg["output"]["dir"] = f"out/{cfg['name']}"
    return cfg


def run_scenario(source, out_dir=None, threads=1, seed=None) -> tuple[Path, list[dict]]:
    """Run every sweep point and write the bundle; returns (bundle dir, summary rows)."""
    cfg = prepare(source, out_dir, seed)
    out = Path(cfg["output"]["dir"])
    out.mkdir(parents=True, exist_ok=True)
    echo = copy.deepcopy(cfg)
    work = dict(cfg, _mass=_mass(cfg, []))
    points = sweep_points(cfg)
    bdir = out / "bands"
    bdir.mkdir(exist_ok=True)
    for s in sorted({s for s, _ in points}):
        bd = bs.solve_bands(s, bs.symmetric_k_grid(cfg["bands"]["nk"]), cfg["bands"]["n_bands"],
                            cfg["bands"]["cutoff"])
        bd.to_csv(bdir / f"bands_{_label(s, 0).split('_')[0]}.csv")
    jobs = [(work, i, s, a, str(out)) for i, (s, a) in enumerate(points)]
    if threads and threads > 1 and len(jobs) > 1:
        with ProcessPoolExecutor(max_workers=threads) as pool:
            rows = list(pool.map(_run_point_args, jobs))
    else:
        rows = [_run_point(*job) for job in jobs]
    _write_csv(out / "summary.csv", SUMMARY_COLUMNS, ([r.get(c, np.nan) for c in SUMMARY_COLUMNS] for r in rows))
    lat = LatticeConfig(s=points[0][0], wavelength=cfg["lattice"]["wavelength"], bare_mass=work["_mass"])
    timescales = {"rows": [{"label": r["label"], "s": r["s"], "acceleration_m_s2": r["acceleration"],
                            "omega_B_rad_s": r["omega_B_theory"],
                            "bloch_period_ms": r["bloch_period_ms"],
                            "h_over_gap0_us": r["h_over_gap0_us"]} for r in rows],
                  "units": {"recoil_time_s": lat.t_r, "recoil_velocity_m_s": lat.v_r}}
    with open(out / "timescales.json", "w") as fh:
        json.dump(timescales, fh, indent=2, sort_keys=True)
    files = sorted(p for p in out.rglob("*") if p.is_file() and p.name != "manifest.json")
    manifest = {"name": cfg["name"], "schema_version": SCHEMA_VERSION, "config": echo,
                "config_hash": hashlib.sha256(_canonical(echo).encode()).hexdigest(),
                "seed": cfg["seed"],
                "versions": {"effmass": __version__, "numpy": np.__version__,
                             "scipy": scipy.__version__, "pyyaml": yaml.__version__,
                             "python": platform.python_version()},
                "files": {str(p.relative_to(out)): _sha(p) for p in files}}
    with open(out / "manifest.json", "w") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)
    return out, rows


def _run_point_args(args):
    return _run_point(*args)
