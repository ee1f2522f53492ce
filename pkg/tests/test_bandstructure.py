import numpy as np
import pytest
from scipy.linalg import LinAlgError

from effmass import bandstructure as bs
from effmass.units import LatticeConfig

from conftest import dense_oracle


# --- Hamiltonian ---------------------------------------------------------------

def test_free_particle_hamiltonian():
    diag, off = bs.build_hamiltonian(0.0, 0.0, cutoff=4)
    assert np.array_equal(diag[2:7], [16, 4, 0, 4, 16])
    assert np.all(off == 0)


def test_small_cutoff_matches_hand_matrix():
    with pytest.raises(bs.TruncationError):
        bs.build_hamiltonian(0.0, 0.0, cutoff=2)
    h = bs.dense_hamiltonian(LatticeConfig(s=0.0), 0.0, cutoff=4)
    assert np.array_equal(np.diag(h)[2:7], [16.0, 4.0, 0.0, 4.0, 16.0])


def test_coupling_equals_fourier_component_of_potential():
    s = 9.4
    z = np.linspace(0, np.pi, 4096, endpoint=False)
    coeff = np.fft.fft(s * np.cos(z) ** 2) / z.size  # harmonics of exp(2 i z)
    _, off = bs.build_hamiltonian(LatticeConfig(s=s), 0.37)
    assert coeff[1].real == pytest.approx(s / 4, abs=1e-12)
    assert np.allclose(off, coeff[1].real, atol=1e-12)
    assert np.all(off == 2.35)


def test_cutoff_eight_matches_dense_oracle():
    w = bs.band_energies(9.4, 0.5, 5, cutoff=8)
    ref = dense_oracle(9.4, 0.5, 64)[0][:5]
    assert np.allclose(w, ref, atol=1e-10, rtol=0)


def test_out_of_zone_k_rejected():
    with pytest.raises(ValueError):
        bs.build_hamiltonian(1.0, 1.5)


def test_too_many_bands_is_truncation_error():
    with pytest.raises(bs.TruncationError):
        bs.solve_bands(1.0, [0.0], n_bands=10, cutoff=4)


def test_failed_eigensolve_reports_k_and_band(monkeypatch):
    def broken(*a, **k):
        raise LinAlgError("no convergence")

    monkeypatch.setattr(bs, "eigh_tridiagonal", broken)
    with pytest.raises(bs.EigensolveError) as info:
        bs.eigensystem(5.0, 0.25, 3)
    assert info.value.k == 0.25 and info.value.band == 3
    assert "k=0.25" in str(info.value)


# --- band quantities ---------------------------------------------------------

def test_free_particle_bands(coarse_bands):
    bd = coarse_bands[0.0]
    assert np.array_equal(bd.energies[:, 0], bd.k_grid**2)
    inner = np.abs(bd.k_grid) < 0.9
    assert np.allclose(bd.eff_mass[inner, 0], 1.0, atol=1e-9)


def test_weak_lattice_gap_two_level_oracle():
    s = 1.0
    e = bs.band_energies(s, 1.0, 2)
    # degenerate plane waves k=1 and k=-1 coupled by s/4
    two_level = np.linalg.eigvalsh(np.array([[1 + s / 2, s / 4], [s / 4, 1 + s / 2]]))
    assert e[1] - e[0] == pytest.approx(two_level[1] - two_level[0], rel=0.03)
    assert e[1] - e[0] == pytest.approx(0.5, rel=0.03)


def test_gap_period_order_hundred_microseconds(bands94, rb):
    gap = bands94.gaps[bands94.index_of(0.0), 1, 0]
    period_us = 2 * np.pi * rb.t_r / gap * 1e6
    assert 50 < period_us < 200
    assert period_us == pytest.approx(89.56, abs=0.05)


def test_free_momentum_element(coarse_bands):
    bd = bs.solve_bands(0.0, [-0.3, 0.0, 0.3], n_bands=3)
    assert bs.momentum_matrix(bd, 1, 1, 0.3) == pytest.approx(0.3, abs=1e-14)


@pytest.mark.parametrize("s", [0.5, 5.0, 18.0])
def test_diagonal_momentum_is_half_band_slope(s):
    # group velocity oracle from eigenvalues only
    k, h = 0.3, 1e-4
    bd = bs.solve_bands(s, [k], n_bands=4)
    ep = bs.band_energies(s, k + h, 4)
    em = bs.band_energies(s, k - h, 4)
    slope = (ep - em) / (2 * h)
    assert np.allclose(2 * bd.p_matrix[0].diagonal().real, slope, atol=1e-6)


def test_sum_rule_at_zone_centre(bands94):
    bd = bs.solve_bands(9.4, [-0.5, 0.0, 0.5], n_bands=10, cutoff=32)
    assert bs.sum_rule_residual(bd, 1, 0.0, 10) < 1e-8


def test_sum_rule_deep_lattice_near_edge():
    bd = bs.solve_bands(18.0, [0.8, 0.9, 1.0], n_bands=15)
    assert bs.sum_rule_residual(bd, 1, 0.9, 15) < 1e-6


def test_sum_rule_free_particle(coarse_bands):
    bd = coarse_bands[0.0]
    for k in (-0.6, 0.2, 0.4):
        assert bs.sum_rule_residual(bd, 1, k, 8) < 1e-6


def test_sum_rule_needs_enough_bands(coarse_bands):
    with pytest.raises(bs.TruncationError):
        bs.sum_rule_residual(coarse_bands[5.0], 1, 0.0, 20)


# --- Lax connection ----------------------------------------------------------

def test_diagonal_connection_vanishes_at_centre(bands94):
    for n in range(1, 9):
        assert bs.lax_connection(bands94, n, n, 0.0) == 0


def test_offdiagonal_connection_against_overlap_oracle():
    s, k, h = 5.0, 0.2, 1e-5
    bd = bs.solve_bands(s, np.linspace(-1, 1, 11), n_bands=4)
    ref = bd.coeffs[bd.index_of(k)]

    def aligned(kk):
        _, vec = dense_oracle(s, kk, 32)
        vec = vec[:, :2].T
        return vec * np.sign(np.einsum("nl,nl->n", vec, ref[:2]))[:, None]

    du2 = (aligned(k + h)[1] - aligned(k - h)[1]) / (2 * h)
    oracle = 1j * np.dot(aligned(k)[0], du2)
    assert abs(bs.lax_connection(bd, 1, 2, k) - oracle) < 1e-6


def test_connection_magnitude_identity(bands94):
    ik = bands94.index_of(0.25)
    p12 = bs.momentum_matrix(bands94, 1, 2, 0.25)
    e12 = bands94.gaps[ik, 0, 1]
    xi = bs.lax_connection(bands94, 1, 2, 0.25)
    assert abs(2 * abs(p12) / abs(e12) - abs(xi)) < 1e-12


def test_degenerate_pair_is_flagged(coarse_bands):
    bd = coarse_bands[0.0]
    # free bands 2 and 3 meet at k = 0 (plane waves +-2)
    with pytest.raises(bs.DegeneracyError):
        bs.lax_connection(bd, 2, 3, 0.0)


def test_off_grid_k_rejected(bands94):
    with pytest.raises(KeyError):
        bs.momentum_matrix(bands94, 1, 2, 0.123456)


# --- invariants --------------------------------------------------------------

def test_normalisation_and_order(bands94):
    norms = np.sum(bands94.coeffs**2, axis=-1)
    assert np.allclose(norms, 1, atol=1e-12)
    assert np.all(np.diff(bands94.energies, axis=1) >= 0)


def test_hermitian_momentum(bands94):
    p = bands94.p_matrix
    assert np.allclose(p, np.conj(np.swapaxes(p, 1, 2)), atol=1e-10)


def test_parity_is_exact(bands94):
    e, m = bands94.energies, bands94.eff_mass
    assert np.array_equal(e, e[::-1])
    assert np.array_equal(m, m[::-1])


@pytest.mark.parametrize("s", [1.0, 9.4, 20.0])
def test_doubling_cutoff_converges(s):
    for k in (0.0, 0.5, 1.0):
        a = bs.band_energies(s, k, 5, cutoff=32)
        b = bs.band_energies(s, k, 5, cutoff=64)
        assert np.max(np.abs(a - b)) < 1e-10


def test_gauge_fixing_removes_random_phases():
    s, grid = 9.4, np.linspace(-1, 1, 21)
    raw = [bs.eigensystem(s, k, 6) for k in grid]
    energies = np.array([r[0] for r in raw])
    coeffs = np.array([r[1] for r in raw])
    inv = np.array([0.5 * bs.curvature(s, k, 6) for k in grid])
    rng = np.random.default_rng(7)
    phases = np.exp(2j * np.pi * rng.random(coeffs.shape[:2]))[..., None]
    a = bs.BandData.from_eigensystem(s, grid, energies, coeffs, inv, 32)
    b = bs.BandData.from_eigensystem(s, grid, energies, coeffs * phases, inv, 32)
    assert np.array_equal(a.energies, b.energies)
    assert np.array_equal(a.eff_mass, b.eff_mass)
    assert np.allclose(np.abs(a.p_matrix), np.abs(b.p_matrix), rtol=1e-12, atol=1e-15)
    off = ~np.eye(6, dtype=bool)
    assert np.allclose(np.abs(a.lax[:, off]), np.abs(b.lax[:, off]), rtol=1e-12, atol=1e-15)
    n = np.arange(6)
    assert np.allclose(a.lax[:, n, n], b.lax[:, n, n], atol=1e-9)


def test_band_table_csv(tmp_path, bands94):
    path = bands94.to_csv(tmp_path / "b.csv")
    data = np.genfromtxt(path, delimiter=",", names=True, deletechars="")
    assert data.dtype.names[0] == "k/k_r"
    assert "Delta_21/E_r" in data.dtype.names and "|p_21|/hbar_k_r" in data.dtype.names
    assert np.allclose(data["E_1/E_r"], bands94.energies[:, 0])


def test_band_data_is_read_only(bands94):
    with pytest.raises(ValueError):
        bands94.energies[0, 0] = 1.0
