"""Kernel dispatch: compiled extension when importable, numpy otherwise.

Set ``NBIOT_OTDOA_PURE_PYTHON=1`` to force the numpy path.
"""

import os

import numpy as np

from . import _pykernels

BACKEND = "python"
_impl = _pykernels

if not os.environ.get("NBIOT_OTDOA_PURE_PYTHON"):
    try:
        from . import _ckernels as _impl  # type: ignore[no-redef]
        BACKEND = "cython"
    except ImportError:
        _impl = _pykernels


def correlate_symbols(y, templates, starts, n_lags):
    """R[s, n] = sum_j y[starts[s] + n + j] * conj(templates[s, j]), n < n_lags."""
    starts = np.ascontiguousarray(starts, dtype=np.int64)
    m = np.shape(templates)[1]
    if n_lags < 1 or starts.min() < 0 or starts.max() + n_lags + m - 1 > len(y):
        raise ValueError("received buffer too short for the requested lag range")
    return _impl.correlate_symbols(np.ascontiguousarray(y, dtype=complex),
                                   np.ascontiguousarray(templates, dtype=complex),
                                   starts, int(n_lags))


def blue_fo_lags(profiles, symbols, weights, fft_size, symbol_len):
    """Per-lag BLUE residual-FO estimate from per-symbol correlation profiles."""
    return _impl.blue_fo_lags(np.ascontiguousarray(profiles, dtype=complex),
                              np.ascontiguousarray(symbols, dtype=np.int64),
                              np.ascontiguousarray(weights, dtype=float),
                              float(fft_size), float(symbol_len))


def mpd_paths(window, acf, gamma, max_paths, ref_mean=0.0):
    """Greedy peak-pick / ACF-subtract loop. Returns (path indices, residual).

    A peak is accepted while it exceeds ``gamma`` times ``ref_mean``, or the
    current profile's mean magnitude when ``ref_mean <= 0``.
    """
    return _impl.mpd_paths(window, acf, float(gamma), int(max_paths), float(ref_mean))


def implementations():
    """Both backends keyed by name (the compiled one only if built)."""
    out = {"python": _pykernels}
    try:
        from . import _ckernels
        out["cython"] = _ckernels
    except ImportError:
        pass
    return out
