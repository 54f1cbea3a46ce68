"""Pure-numpy kernels. Same signatures and semantics as ``_ckernels``."""

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view


def correlate_symbols(y, templates, starts, n_lags):
    y = np.ascontiguousarray(y, dtype=complex)
    templates = np.ascontiguousarray(templates, dtype=complex)
    n_sym, m = templates.shape
    out = np.empty((n_sym, n_lags), dtype=complex)
    for s in range(n_sym):
        seg = y[starts[s]:starts[s] + n_lags + m - 1]
        out[s] = sliding_window_view(seg, m) @ templates[s].conj()
    return out


def blue_fo_lags(profiles, symbols, weights, fft_size, symbol_len):
    profiles = np.asarray(profiles, dtype=complex)
    symbols = np.asarray(symbols)
    n_sym = profiles.shape[0]
    eps = np.zeros(profiles.shape[1])
    for m, w in enumerate(weights, start=1):
        prod = profiles[:-m].conj() * profiles[m:]
        gaps = (symbols[m:] - symbols[:-m])[:, None]
        phi = (np.angle(prod) / gaps).sum(axis=0)
        eps += w * fft_size / (2 * np.pi * symbol_len * (n_sym - m)) * phi
    return eps


def mpd_paths(window, acf, gamma, max_paths, ref_mean=0.0):
    prof = np.array(window, dtype=complex)
    acf = np.asarray(acf, dtype=complex)
    n = prof.size
    center = (acf.size - 1) // 2
    paths = []
    idx = np.arange(n)
    for _ in range(max_paths):
        mag = np.abs(prof)
        peak = int(np.argmax(mag))
        level = ref_mean if ref_mean > 0 else mag.mean()
        if not mag[peak] > gamma * level:
            break
        paths.append(peak)
        prof = prof - prof[peak] * acf[center + idx - peak]
    return np.asarray(paths, dtype=np.int64), prof
