import numpy as np
import pytest
from hypothesis import given, strategies as st

from effmass.units import HBAR, LatticeConfig


def test_rubidium_scales_match_hand_values():
    cfg = LatticeConfig(s=9.4)
    assert cfg.d == pytest.approx(532e-9)
    assert cfg.v_r * 1e3 == pytest.approx(4.3152, rel=1e-4)  # um/ms
    assert cfg.t_r == pytest.approx(78.486e-6, rel=1e-4)
    assert cfg.E_r == pytest.approx(HBAR**2 * cfg.k_r**2 / (2 * cfg.bare_mass))


def test_bloch_frequency_for_reference_force():
    cfg = LatticeConfig(s=9.4)
    w = cfg.bloch_angular_frequency(11.7)
    assert w == pytest.approx(8518, rel=1e-3)
    # pi F in recoil units is the same frequency
    assert np.pi * cfg.force_from_acceleration(11.7) / cfg.t_r == pytest.approx(w, rel=1e-12)


@pytest.mark.parametrize("kw", [{"s": -1}, {"wavelength": 0}, {"bare_mass": -2.0}])
def test_invalid_parameters_rejected(kw):
    with pytest.raises(ValueError):
        LatticeConfig(**kw)


@given(st.floats(1e-12, 1e3), st.sampled_from(["energy", "time", "length", "velocity",
                                                  "acceleration", "force", "momentum"]))
def test_round_trip_twelve_digits(value, kind):
    cfg = LatticeConfig()
    back = cfg.to_si(cfg.to_recoil(value, kind), kind)
    assert back == pytest.approx(value, rel=1e-12)
