import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from effmass import analytic as an
from effmass import bandstructure as bs
from effmass import propagator as pr
from effmass.units import LatticeConfig

SMALL = pr.GridSpec(256, 16)


def band_weights(psi, n_bands=8):
    """Weight of psi in each band, projecting grid momenta onto exact Bloch states."""
    a = psi.momentum_amplitudes()
    q = psi.grid.p
    k = np.round(q - 2 * np.round(q / 2), 12)
    k[k >= 1] -= 2
    out = np.zeros(n_bands)
    cut = bs.DEFAULT_CUTOFF
    for kk in np.unique(k):
        sel = np.isclose(k, kk, atol=1e-9)
        ell = np.round((q[sel] - kk) / 2).astype(int)
        ok = np.abs(ell) <= cut
        _, c = bs.eigensystem(psi.depth, kk, n_bands)
        proj = c[:, ell[ok] + cut] @ a[sel][ok]
        out += np.abs(proj) ** 2
    return out / psi.norm()


@pytest.fixture(scope="module")
def ground94(rb):
    return pr.prepare_ground_state(rb, sigma_k=0.02)


@pytest.fixture(scope="module")
def rb():
    return LatticeConfig(s=9.4)


# --- grid and schedule ---------------------------------------------------------

def test_grid_layout():
    g = pr.GridSpec(64, 16)
    assert g.n_points == 1024 and g.length == pytest.approx(64 * np.pi)
    assert g.z[g.n_points // 2] == 0.0
    assert np.allclose(np.diff(g.z), g.dz)
    with pytest.raises(ValueError):
        pr.GridSpec(60, 16)
    with pytest.raises(ValueError):
        pr.GridSpec(64, 4)


@given(st.floats(0, 5), st.floats(0, 2), st.floats(-1, 1))
def test_schedule_is_monotone_ramp(delay, rise, F):
    sch = pr.ForceSchedule(F, delay, rise)
    t = np.linspace(0, delay + rise + 1, 50)
    f = sch(t)
    assert np.all(f[t < delay] == 0)
    assert np.all(f[t >= delay + rise] == F)
    assert np.all(np.diff(f) * np.sign(F) >= -1e-15)


def test_schedule_rejects_negative_times():
    with pytest.raises(ValueError):
        pr.ForceSchedule(1.0, -1.0)


def test_schedule_from_acceleration(rb):
    sch = pr.ForceSchedule.from_acceleration(rb, 11.7)
    assert sch.force == pytest.approx(0.2128, abs=1e-4)
    assert sch.delay == pytest.approx(20e-6 / rb.t_r)


# --- initial state -----------------------------------------------------------

def test_free_packet_has_one_peak():
    psi = pr.prepare_ground_state(0.0, sigma_k=0.02)
    ob = pr.observables(psi)
    assert ob["peak_populations"][2] == pytest.approx(1.0, abs=1e-12)
    assert ob["mean_velocity"] == pytest.approx(0.0, abs=1e-12)


def test_ground_state_sidebands(ground94):
    pops = pr.observables(ground94)["peak_populations"]
    _, c = bs.eigensystem(9.4, 0.0, 1)
    cut = bs.DEFAULT_CUTOFF
    oracle = c[0, cut + 1] ** 2 / c[0, cut] ** 2
    assert pops[3] / pops[2] == pytest.approx(oracle, rel=1e-3)
    assert pops[1] / pops[2] == pytest.approx(0.17324, abs=2e-4)


def test_ground_state_is_lowest_band(ground94):
    w = band_weights(ground94)
    assert w[0] > 1 - 1e-10
    assert w[1:].sum() < 1e-3


def test_narrow_envelope_leaks():
    with pytest.raises(pr.LeakageError):
        pr.prepare_ground_state(9.4, sigma_k=0.5)


def test_ramp_preparation_is_adiabatic():
    cfg = LatticeConfig(s=5.0)
    grid = pr.GridSpec(256, 16)
    psi = pr.prepare_ground_state(cfg, grid, sigma_k=0.05, mode="ramp", ramp_time=20.0)
    assert psi.depth == pytest.approx(5.0) and psi.time == 0.0
    assert band_weights(psi)[0] > 0.999
    with pytest.raises(ValueError):
        pr.prepare_ground_state(cfg, SMALL, sigma_k=0.05, mode="ramp")


# --- dynamics ----------------------------------------------------------------

def test_free_particle_accelerates_exactly():
    F = 0.3
    psi = pr.prepare_ground_state(0.0, SMALL, sigma_k=0.05)
    snaps = pr.evolve(psi, 0.0, pr.ForceSchedule(F), t_final=2.0, cadence=0.5)
    for s in snaps:
        ob = pr.observables(s)
        assert ob["mean_velocity"] == pytest.approx(F * s.time, abs=1e-10)
        assert ob["mean_acceleration"] == pytest.approx(F, abs=1e-12)


def test_moving_free_packet_keeps_velocity():
    k0 = 0.3
    psi = pr.Wavefunction(pr.bloch_wavepacket(0.0, SMALL, 0.05, k0=k0), SMALL, 0.0, 0.0, 0.0)
    snaps = pr.evolve(psi, 0.0, None, t_final=1.0, cadence=0.25)
    v = [pr.observables(s)["mean_velocity"] for s in snaps]
    assert np.allclose(v, k0, atol=1e-10)  # v/v_r equals p/(hbar k_r)


def test_static_lattice_is_stationary(ground94, rb):
    snaps = pr.evolve(ground94, rb, None, t_final=2.0, cadence=0.5)
    a = [pr.observables(s)["mean_acceleration"] for s in snaps]
    e = [pr.energy(s) for s in snaps]
    assert np.max(np.abs(a)) < 1e-6
    assert np.ptp(e) < 1e-8
    assert abs(snaps[-1].norm() - 1) < 1e-12


def test_force_onset_acceleration(ground94, rb):
    F = 0.2128
    snaps = pr.evolve(ground94, rb, pr.ForceSchedule(F), t_final=0.002)
    a0 = pr.observables(snaps[0])["mean_acceleration"]
    a1 = pr.observables(snaps[1])["mean_acceleration"]
    assert a0 == pytest.approx(F, rel=1e-3)
    assert a1 == pytest.approx(F, rel=1e-3)


def test_time_step_convergence_is_second_order(rb):
    psi = pr.prepare_ground_state(rb, SMALL, sigma_k=0.05)
    F = 0.2128
    v = {}
    for dt in (4e-3, 2e-3, 1e-3, 2.5e-4, 1.25e-4):
        snaps = pr.evolve(psi, rb, pr.ForceSchedule(F), dt=dt, t_final=1.0)
        v[dt] = pr.observables(snaps[-1])["mean_velocity"]
    ratio = (v[4e-3] - v[2e-3]) / (v[2e-3] - v[1e-3])
    assert ratio == pytest.approx(4.0, rel=0.02)
    # Richardson estimate of the error left at t_r/8000
    assert abs(v[1.25e-4] - v[2.5e-4]) / 3 < 1e-8


def test_norm_after_many_steps(rb):
    grid = pr.GridSpec(512, 8)
    psi = pr.prepare_ground_state(rb, grid, sigma_k=0.1)
    # 1e5 steps
    it = pr.iter_evolve(psi, rb, pr.ForceSchedule(0.2128), dt=1e-3, t_final=100.0, cadence=25.0)
    last = list(it)[-1]
    assert abs(last.norm() - 1) < 1e-10


def test_orders_capture_shallow_lattice():
    cfg = LatticeConfig(s=5.0)
    run = pr.run_protocol(cfg, pr.ForceSchedule(0.2128), 2.0, 0.2, grid=SMALL, sigma_k=0.05)
    assert np.all(run.trace.peaks.sum(1) > 0.999)
    assert np.array_equal(run.trace.peak_velocities[0], [-4, -2, 0, 2, 4])


def test_bloch_frequency(rb):
    from effmass import analysis as ana

    F = rb.force_from_acceleration(11.7)
    run = pr.run_protocol(rb, pr.ForceSchedule(F), 2 * 2 / F, 0.05, sigma_k=0.02)
    fit = ana.fit_two_sine(run.trace.t, run.trace.velocity, force=F)
    assert fit.omega_B / rb.t_r == pytest.approx(8518, rel=0.01)


# --- guards ------------------------------------------------------------------

def test_time_step_limits(ground94, rb):
    with pytest.raises(pr.StabilityError):
        pr.evolve(ground94, rb, None, dt=0.01, t_final=0.1)
    with pytest.raises(pr.StabilityError, match="s\\*dt"):
        pr.evolve(ground94, 200.0, None, dt=0.004, t_final=0.1)
    with pytest.raises(ValueError):
        pr.evolve(ground94, rb, None, t_final=0.1, g=-1.0)


def test_box_guard():
    with pytest.raises(pr.BoxTooSmallError):
        pr.prepare_ground_state(9.4, pr.GridSpec(128, 16), sigma_k=0.01)


# --- time of flight ----------------------------------------------------------

def test_tof_orders_are_resolved(ground94, rb):
    prof = pr.tof_expand(ground94, 20e-3, rb)
    assert 2 * prof.um_per_vr == pytest.approx(172.6, abs=0.1)
    assert np.trapezoid(prof.density, prof.x) == pytest.approx(1.0, abs=1e-9)
    d = prof.density
    peaks = prof.x[1:-1][(d[1:-1] > d[:-2]) & (d[1:-1] > d[2:]) & (d[1:-1] > 1e-4 * d.max())]
    assert np.allclose(np.diff(peaks), 172.6, atol=1.0)


def test_tof_free_packet_is_single_gaussian():
    cfg = LatticeConfig(s=0.0)
    psi = pr.prepare_ground_state(cfg, sigma_k=0.02)
    prof = pr.tof_expand(psi, 20e-3, cfg)
    d = prof.density
    n_max = np.sum((d[1:-1] > d[:-2]) & (d[1:-1] > d[2:]))
    assert n_max == 1
    assert np.trapezoid(d, prof.x) == pytest.approx(1.0, abs=1e-9)


def test_tof_csv(tmp_path, ground94, rb):
    path = pr.tof_expand(ground94, 20e-3, rb).to_csv(tmp_path / "tof.csv")
    assert open(path).readline().startswith("x")


# --- snapshots ---------------------------------------------------------------

@pytest.mark.parametrize("binary", [False, True])
def test_snapshot_round_trip(tmp_path, binary):
    psi = pr.prepare_ground_state(9.4, SMALL, sigma_k=0.05)
    path = pr.save_snapshot(psi, tmp_path / ("s.npz" if binary else "s.csv"), binary=binary)
    back = pr.load_snapshot(path)
    assert back.grid == psi.grid
    assert np.allclose(back.values, psi.values, atol=1e-15, rtol=0)


# --- first-order oracle ------------------------------------------------------

def _compare(force_scale):
    cfg = LatticeConfig(s=9.4)
    F = cfg.force_from_acceleration(11.7) * force_scale
    span = 300e-6 / cfg.t_r
    run = pr.run_protocol(cfg, pr.ForceSchedule(F), span, 0.01, sigma_k=0.02).trace
    bd = bs.solve_bands(9.4)
    ref = an.perturbative_velocity_trace(bd, an.WavepacketSpec.gaussian(0, 0.02), F, run.t)
    v_rms = np.sqrt(np.mean((run.velocity - ref.velocity) ** 2)) / np.ptp(ref.velocity)
    a_rms = np.sqrt(np.mean((run.acceleration - ref.acceleration) ** 2)) / F
    return v_rms, a_rms


@pytest.fixture(scope="module")
def full_force():
    return _compare(1.0)


def test_velocity_matches_first_order(full_force):
    assert full_force[0] < 0.03


@pytest.mark.xfail(strict=True, reason="second-order correction in F is about 4% at 11.7 m/s^2")
def test_acceleration_matches_first_order_full_force(full_force):
    assert full_force[1] < 0.03


def test_acceleration_matches_first_order_half_force():
    assert _compare(0.5)[1] < 0.03


@pytest.mark.parametrize("s, n_orders", [(2.0, 2), (5.0, 2), (10.0, 3)])
def test_order_populations_are_complete(s, n_orders):
    psi = pr.prepare_ground_state(s, sigma_k=0.02)
    assert abs(pr.observables(psi, n_orders)["peak_populations"].sum() - 1) < 1e-6
