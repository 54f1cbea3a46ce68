# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled hot loops: sliding PRS correlation, per-lag FO estimate, MPD."""

import numpy as np
from libc.math cimport atan2, sqrt, M_PI


def correlate_symbols(const double complex[::1] y, const double complex[:, ::1] templates,
                      const long long[::1] starts, Py_ssize_t n_lags):
    cdef Py_ssize_t n_sym = templates.shape[0], m = templates.shape[1]
    cdef Py_ssize_t s, n, j, base
    cdef double re, im, yr, yi, tr, ti
    out = np.empty((n_sym, n_lags), dtype=np.complex128)
    cdef double complex[:, ::1] o = out
    for s in range(n_sym):
        if starts[s] < 0 or starts[s] + n_lags + m - 1 > y.shape[0]:
            raise ValueError("received buffer too short for the lag range")
    for s in range(n_sym):
        for n in range(n_lags):
            base = starts[s] + n
            re = 0.0
            im = 0.0
            for j in range(m):
                yr = y[base + j].real
                yi = y[base + j].imag
                tr = templates[s, j].real
                ti = templates[s, j].imag
                re += yr * tr + yi * ti
                im += yi * tr - yr * ti
            o[s, n] = re + 1j * im
    return out


def blue_fo_lags(const double complex[:, ::1] profiles, const long long[::1] symbols,
                 const double[::1] weights, double fft_size, double symbol_len):
    cdef Py_ssize_t n_sym = profiles.shape[0], n_lags = profiles.shape[1]
    cdef Py_ssize_t n_w = weights.shape[0]
    cdef Py_ssize_t n, m, s
    cdef double acc, total, ar, ai, br, bi
    out = np.zeros(n_lags, dtype=np.float64)
    cdef double[::1] o = out
    for n in range(n_lags):
        total = 0.0
        for m in range(1, n_w + 1):
            acc = 0.0
            for s in range(n_sym - m):
                ar = profiles[s, n].real
                ai = profiles[s, n].imag
                br = profiles[s + m, n].real
                bi = profiles[s + m, n].imag
                # arg(conj(a) * b)
                acc += atan2(ar * bi - ai * br, ar * br + ai * bi) / (symbols[s + m] - symbols[s])
            total += weights[m - 1] * fft_size / (2.0 * M_PI * symbol_len * (n_sym - m)) * acc
        o[n] = total
    return out


def mpd_paths(window, acf, double gamma, Py_ssize_t max_paths, double ref_mean=0.0):
    prof_arr = np.array(window, dtype=np.complex128)
    cdef double complex[::1] prof = prof_arr
    cdef const double complex[::1] a = np.ascontiguousarray(acf, dtype=np.complex128)
    cdef Py_ssize_t n = prof.shape[0], center = (a.shape[0] - 1) // 2
    cdef Py_ssize_t it, i, peak
    cdef double mag, best, total
    cdef double complex pv
    paths = []
    for it in range(max_paths):
        best = -1.0
        peak = 0
        total = 0.0
        for i in range(n):
            mag = sqrt(prof[i].real * prof[i].real + prof[i].imag * prof[i].imag)
            total += mag
            if mag > best:
                best = mag
                peak = i
        if not best > gamma * (ref_mean if ref_mean > 0 else total / n):
            break
        paths.append(peak)
        pv = prof[peak]
        for i in range(n):
            prof[i] = prof[i] - pv * a[center + i - peak]
    return np.asarray(paths, dtype=np.int64), prof_arr
