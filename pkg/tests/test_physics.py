import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from nvscope.physics import (
    MagneticField,
    NvParameters,
    ResonancePair,
    hamiltonian,
    hamiltonian_resonances,
    invert_splitting,
    lorentzian,
    odmr_signal,
    resonance_pair,
    spin_operators,
    synthesize_spectrum,
)
from nvscope.spectrum import SweepPlan


def brute_force_levels(d, e, gamma, b):
    """Independent spin-1 construction from ladder operators, |m> = +1, 0, -1."""
    m = np.array([1.0, 0.0, -1.0])
    sz = np.diag(m)
    sp = np.zeros((3, 3), dtype=complex)
    for i in range(1, 3):
        # S+ |m> = sqrt(s(s+1) - m(m+1)) |m+1>
        mm = m[i]
        sp[i - 1, i] = math.sqrt(2 - mm * (mm + 1))
    sm = sp.conj().T
    sx = (sp + sm) / 2
    sy = (sp - sm) / 2j
    h = d * sz @ sz + e * (sy @ sy - sx @ sx) + gamma * (b[0] * sx + b[1] * sy + b[2] * sz)
    return np.sort(np.linalg.eigvalsh(h))


def test_spin_commutation():
    s = spin_operators()
    assert np.allclose(s.sx @ s.sy - s.sy @ s.sx, 1j * s.sz)
    assert np.allclose(s.sx @ s.sx + s.sy @ s.sy + s.sz @ s.sz, 2 * np.eye(3))


def test_zero_field_lines_at_d():
    pair = resonance_pair(NvParameters(), 0.0)
    assert pair == (2870.0, 2870.0)


def test_closed_form_value():
    # 7.5 mT * 28 MHz/mT = 210 MHz on each side of D
    pair = resonance_pair(NvParameters(), 7.5)
    assert pair.nu_minus_mhz == pytest.approx(2660.0, abs=1e-9)
    assert pair.nu_plus_mhz == pytest.approx(3080.0, abs=1e-9)
    assert pair.splitting_mhz == pytest.approx(420.0, abs=1e-9)


@pytest.mark.parametrize("e", [0.0, 3.0])
@pytest.mark.parametrize("b", [0.0, 0.3, 5.0])
def test_hamiltonian_matches_brute_force(b, e):
    params = NvParameters(e_mhz=e)
    levels = brute_force_levels(2870.0, e, 28.0, (0.0, 0.0, b))
    got = hamiltonian_resonances(params, MagneticField.axial(b))
    assert got.nu_minus_mhz == pytest.approx(levels[1] - levels[0], abs=1e-9)
    assert got.nu_plus_mhz == pytest.approx(levels[2] - levels[0], abs=1e-9)


def test_hamiltonian_hermitian_with_transverse_field():
    h = hamiltonian(NvParameters(e_mhz=2.0), MagneticField(1.0, -0.5, 2.0))
    assert np.allclose(h, h.conj().T)
    levels = brute_force_levels(2870.0, 2.0, 28.0, (1.0, -0.5, 2.0))
    assert np.allclose(np.sort(np.linalg.eigvalsh(h)), levels)


@settings(max_examples=200, deadline=None)
@given(
    b=st.floats(0.0, 20.0),
    e=st.floats(0.0, 20.0),
)
def test_inversion_round_trip(b, e):
    params = NvParameters(e_mhz=e)
    pair = resonance_pair(params, b)
    inv = invert_splitting(params, pair)
    assert inv.d_est_mhz == pytest.approx(2870.0, abs=1e-9)
    if 28.0 * b > 1e-6 * max(e, 1.0):
        assert inv.b_parallel_mt == pytest.approx(b, rel=1e-6, abs=1e-6)


@settings(max_examples=200, deadline=None)
@given(b=st.floats(0.0, 50.0), e=st.floats(0.0, 50.0))
def test_resonances_ordered_and_symmetric(b, e):
    pair = resonance_pair(NvParameters(e_mhz=e), b)
    assert pair.nu_minus_mhz <= 2870.0 <= pair.nu_plus_mhz
    assert pair.nu_minus_mhz + pair.nu_plus_mhz == pytest.approx(2 * 2870.0)
    assert pair.splitting_mhz >= 2 * e - 1e-9


def test_inversion_clamps_below_strain():
    params = NvParameters(e_mhz=5.0)
    inv = invert_splitting(params, ResonancePair(2866.0, 2874.0))
    assert inv.clamped
    assert inv.b_parallel_mt == 0.0


def test_field_bounds():
    with pytest.raises(ValueError):
        MagneticField(0.0, 0.0, 150.0)
    with pytest.raises(ValueError):
        MagneticField(float("nan"), 0.0, 0.0)


def test_lorentzian_half_width():
    assert lorentzian(10.0, 10.0, 2.0) == pytest.approx(1.0)
    assert lorentzian(12.0, 10.0, 2.0) == pytest.approx(0.5)


def test_odmr_signal_dips():
    params = NvParameters()
    f = np.array([2660.0, 2870.0, 3080.0])
    s = odmr_signal(params, MagneticField.axial(7.5), f)
    assert s[0] < s[1] and s[2] < s[1]
    assert s[0] == pytest.approx(params.baseline_mv * (1 - params.contrast), rel=1e-3)


def test_synthesis_deterministic():
    plan = SweepPlan()
    a = synthesize_spectrum(NvParameters(), MagneticField.axial(2.0), plan, noise_sigma_mv=1.0, seed=7)
    b = synthesize_spectrum(NvParameters(), MagneticField.axial(2.0), plan, noise_sigma_mv=1.0, seed=7)
    c = synthesize_spectrum(NvParameters(), MagneticField.axial(2.0), plan, noise_sigma_mv=1.0, seed=8)
    assert np.array_equal(a.signals, b.signals)
    assert not np.array_equal(a.signals, c.signals)


@pytest.mark.parametrize(
    "e, b, expected",
    [(0.0, 1.0, (2842.0, 2898.0)), (5.0, 0.0, (2865.0, 2875.0)), (0.0, 7.5, (2660.0, 3080.0))],
)
def test_resonance_examples(e, b, expected):
    pair = resonance_pair(NvParameters(e_mhz=e), b)
    assert pair == pytest.approx(expected, abs=1e-9)
    assert hamiltonian_resonances(NvParameters(e_mhz=e), MagneticField.axial(b)) == pytest.approx(expected, abs=1e-6)


def test_resonance_pair_even_in_field():
    assert resonance_pair(NvParameters(e_mhz=2.0), -3.0) == resonance_pair(NvParameters(e_mhz=2.0), 3.0)


def test_far_tail_near_baseline():
    params = NvParameters()
    plan = SweepPlan(start_mhz=100.0, stop_mhz=120.0, step_mhz=1.0)
    spec = synthesize_spectrum(params, MagneticField.axial(0.0), plan)
    assert np.all(np.abs(spec.signals - params.baseline_mv) < 0.01 * params.baseline_mv)
