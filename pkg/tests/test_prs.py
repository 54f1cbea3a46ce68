import json

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from nbiot_otdoa.prs import (FS_HIGH, FS_LOW, N_PRS, PRS_SYMBOLS, UPSAMPLE, PrsConfig,
                             build_plan, c_init_prs, gold_sequence, modulate, plan_for,
                             prs_acf, prs_qpsk, signal_power, subcarrier_offset)


def lfsr_oracle(c_init, length, nc=1600):
    """Bit-serial Gold generator on integer shift registers (bit 0 = oldest)."""
    x1, x2 = 1, c_init
    out = []
    for n in range(nc + length):
        if n >= nc:
            out.append((x1 ^ x2) & 1)
        f1 = ((x1 >> 3) ^ x1) & 1
        f2 = ((x2 >> 3) ^ (x2 >> 2) ^ (x2 >> 1) ^ x2) & 1
        x1 = (x1 >> 1) | (f1 << 30)
        x2 = (x2 >> 1) | (f2 << 30)
    return np.array(out, dtype=np.uint8)


def test_c_init_hand_value():
    # 2^10 * (7*1 + 3 + 1) * 1 + 0 + 1
    assert c_init_prs(0, 0, 3) == 11265


def test_gold_matches_independent_lfsr():
    bits = gold_sequence(0, 0, 3, length=100)
    np.testing.assert_array_equal(bits, lfsr_oracle(11265, 100))


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 503), st.integers(0, 19), st.integers(0, 13))
def test_gold_matches_oracle_any_cell(pci, ns, ell):
    np.testing.assert_array_equal(gold_sequence(pci, ns, ell, length=40),
                                  lfsr_oracle(c_init_prs(pci, ns, ell), 40))


def test_gold_deterministic():
    a = gold_sequence(7, 1, 5, length=64)
    b = gold_sequence(7, 1, 5, length=64)
    np.testing.assert_array_equal(a, b)


@pytest.mark.parametrize("kw", [dict(n_s=20, ell=0), dict(n_s=-1, ell=0),
                                dict(n_s=0, ell=14), dict(n_s=0, ell=0, length=0)])
def test_gold_rejects_bad_indices(kw):
    with pytest.raises(ValueError):
        gold_sequence(0, **kw)


def test_qpsk_values():
    assert prs_qpsk([0, 0], 0) == pytest.approx((1 + 1j) / np.sqrt(2))
    assert prs_qpsk([1, 1], 0) == pytest.approx((-1 - 1j) / np.sqrt(2))
    assert prs_qpsk([0, 0, 1, 0], 1) == pytest.approx((-1 + 1j) / np.sqrt(2))
    with pytest.raises(ValueError):
        prs_qpsk([0, 1, 1], 1)


@given(st.lists(st.integers(0, 1), min_size=2, max_size=2))
def test_qpsk_unit_modulus(bits):
    assert abs(prs_qpsk(bits, 0)) == pytest.approx(1.0)


def test_config_validation():
    for kw in (dict(pci=-1), dict(pci=0, fft_size=100), dict(pci=0, cp_type="extended"),
               dict(pci=0, prs_symbols=(3, 5)), dict(pci=0, slot_numbers=(0, 20)),
               dict(pci=0, prs_symbols=(3, 3, 5, 6, 8, 9, 10, 12))):
        with pytest.raises(ValueError):
            PrsConfig(**kw)


def test_pattern_pci0(plan0):
    # lower PRB subcarrier per PRS symbol: (6 - l + shift) mod 6 with slot-local l
    expected = [3, 1, 0, 5, 4, 3, 1, 0]
    np.testing.assert_array_equal(plan0.prb_subcarriers[:, 0], expected)
    np.testing.assert_array_equal(plan0.prb_subcarriers[:, 1], np.add(expected, 6))
    np.testing.assert_array_equal(plan0.freq_index, plan0.prb_subcarriers - 6)
    assert subcarrier_offset(3, 0) == 3


def test_pattern_shift_mod6(plan0):
    p6 = plan_for(6)
    np.testing.assert_array_equal(p6.prb_subcarriers, plan0.prb_subcarriers)
    assert not np.allclose(p6.freq_symbols, plan0.freq_symbols)
    p1 = plan_for(1)
    for a, b in zip(plan0.prb_subcarriers, p1.prb_subcarriers):
        assert sorted((a + 1) % 12) == sorted(b)


def test_plan_invariants(plan0):
    assert plan0.prs_symbol_indices == PRS_SYMBOLS
    assert max(PRS_SYMBOLS) - min(PRS_SYMBOLS) == 10
    assert plan0.freq_symbols.shape == (N_PRS, 2)
    np.testing.assert_allclose(np.abs(plan0.freq_symbols), 1.0)
    assert np.all(np.diff(plan0.freq_index, axis=1) == 6)
    assert plan0.time_waveforms.shape == (N_PRS, 137)
    assert FS_HIGH / FS_LOW == UPSAMPLE


def test_plan_is_deterministic_and_cached():
    a = build_plan(PrsConfig(pci=5))
    b = build_plan(PrsConfig(pci=5))
    assert a is b
    assert a.dumps() == plan_for(5).dumps()


def test_plan_dump_golden(plan0):
    d = json.loads(plan0.dumps())
    assert d["pci"] == 0 and d["fft_size"] == 128 and d["cp_len"] == 9
    assert d["k"][0] == [-3, 3]
    assert d["prs_symbols"] == list(PRS_SYMBOLS)


@pytest.mark.parametrize("pci", [0, 1, 8, 13, 17, 300])
def test_ifft_equals_closed_form(pci):
    plan = plan_for(pci)
    n = np.arange(plan.symbol_len)
    for s in range(N_PRS):
        closed = plan.waveform_at(s, n)
        # termwise two-exponential form, CP as cyclic extension
        core = np.arange(128)
        two_term = sum(plan.freq_symbols[s, i] * np.exp(2j * np.pi * core * plan.freq_index[s, i] / 128)
                       for i in range(2)) / np.sqrt(128)
        expected = np.concatenate([two_term[-9:], two_term])
        rel = np.linalg.norm(plan.time_waveforms[s] - expected) / np.linalg.norm(expected)
        assert rel < 1e-12
        assert np.linalg.norm(closed - expected) / np.linalg.norm(expected) < 1e-12


def test_single_delta_and_energy(plan0):
    grid = np.zeros(128, complex)
    grid[5] = 1.0
    core = np.fft.ifft(grid) * 128 / np.sqrt(128)
    np.testing.assert_allclose(core, np.exp(2j * np.pi * np.arange(128) * 5 / 128) / np.sqrt(128))
    core_energy = np.sum(np.abs(plan0.time_waveforms[:, 9:]) ** 2, axis=1)
    np.testing.assert_allclose(core_energy, 2.0)
    # CP samples repeat part of a non-constant envelope, so only close to 2/N
    assert signal_power(plan0) == pytest.approx(np.mean(np.abs(plan0.time_waveforms) ** 2))
    assert signal_power(plan0) == pytest.approx(2.0 / 128, rel=0.02)


def test_oversampled_modulation_decimates(plan0):
    hi = modulate(plan0, 16)
    np.testing.assert_allclose(hi[:, ::16], plan0.time_waveforms, atol=1e-12)
    with pytest.raises(ValueError):
        modulate(plan0, 0)


def test_acf_properties(plan0):
    acf = prs_acf(plan0, 200, 16)
    assert acf.size == 401
    assert acf[200] == pytest.approx(1.0)
    # spill from the neighbouring PRS symbol lets a shifted window collect
    # marginally more energy than the template (a few 1e-6 at most)
    assert np.all(np.abs(acf) <= 1.0 + 1e-5)
    # wide main lobe at 1.92 MHz: still above 0.5 two samples away
    assert abs(acf[200 + 32]) > 0.5
    with pytest.raises(ValueError):
        prs_acf(plan0, 0)


def test_cross_correlation_below_autocorrelation():
    a, b = plan_for(0), plan_for(4)
    auto = abs(np.vdot(a.time_waveforms.ravel(), a.time_waveforms.ravel()))
    cross = max(abs(np.vdot(np.roll(b.time_waveforms.ravel(), k), a.time_waveforms.ravel()))
                for k in range(-20, 21))
    assert cross / auto < 1.0
    print(f"peak cross/auto ratio {cross / auto:.3f}")
