import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from nbiot_otdoa import kernels
from nbiot_otdoa.emsic import BLUE_WEIGHTS
from nbiot_otdoa.prs import PRS_SYMBOLS

IMPLS = kernels.implementations()


def cplx(rng, *shape):
    return rng.standard_normal(shape) + 1j * rng.standard_normal(shape)


def test_backend_reported():
    assert kernels.BACKEND in IMPLS
    assert "python" in IMPLS


def test_length_check():
    with pytest.raises(ValueError):
        kernels.correlate_symbols(np.zeros(100, complex), np.zeros((1, 50), complex), [60], 2)


@pytest.mark.skipif("cython" not in IMPLS, reason="compiled kernels not built")
class TestBackendsAgree:
    @settings(max_examples=25, deadline=None)
    @given(st.integers(0, 2**31 - 1), st.integers(1, 40))
    def test_correlate(self, seed, n_lags):
        rng = np.random.default_rng(seed)
        y = cplx(rng, 600)
        tmpl = cplx(rng, 3, 137)
        starts = np.array([0, 150, 400], dtype=np.int64)
        a = IMPLS["python"].correlate_symbols(y, tmpl, starts, n_lags)
        b = IMPLS["cython"].correlate_symbols(y, tmpl, starts, n_lags)
        np.testing.assert_allclose(a, b, rtol=1e-12, atol=1e-12)

    @settings(max_examples=25, deadline=None)
    @given(st.integers(0, 2**31 - 1))
    def test_blue(self, seed):
        rng = np.random.default_rng(seed)
        prof = cplx(rng, 8, 16)
        sym = np.asarray(PRS_SYMBOLS, dtype=np.int64)
        a = IMPLS["python"].blue_fo_lags(prof, sym, BLUE_WEIGHTS, 128.0, 137.0)
        b = IMPLS["cython"].blue_fo_lags(prof, sym, BLUE_WEIGHTS, 128.0, 137.0)
        np.testing.assert_allclose(a, b, rtol=1e-12, atol=1e-14)

    @settings(max_examples=25, deadline=None)
    @given(st.integers(0, 2**31 - 1), st.sampled_from([0.0, 0.5]), st.floats(1.0, 3.0))
    def test_mpd(self, seed, ref, gamma):
        rng = np.random.default_rng(seed)
        win = cplx(rng, 64)
        win[20] += 12.0
        acf = cplx(rng, 127) * 0.1
        acf[63] = 1.0
        pa, ra = IMPLS["python"].mpd_paths(win, acf, gamma, 5, ref)
        pb, rb = IMPLS["cython"].mpd_paths(win, acf, gamma, 5, ref)
        np.testing.assert_array_equal(pa, pb)
        np.testing.assert_allclose(ra, rb, rtol=1e-12, atol=1e-12)
