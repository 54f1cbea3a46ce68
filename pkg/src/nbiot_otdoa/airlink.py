"""Multi-cell received-signal synthesis: delays, fading taps, residual FO, AWGN.

Two synthesis paths produce the superimposed base-rate stream:

``fast``
    Integer delays ``floor(tau * Fs_low)`` applied directly at 1.92 MHz.
``reference``
    Delays rounded to the Ts grid, synthesis at 30.72 MHz, then decimation
    by 16. Because the PRS is band-limited to one PRB this is the same as
    evaluating the waveform at fractional base-rate delays.

The FO phase ramp ``exp(j 2 pi eps t / N)`` is indexed by absolute subframe
time ``t`` (``n + l M`` in per-symbol coordinates), not by time since the
delayed symbol started.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .prs import FS_HIGH, FS_LOW, N_SYM, UPSAMPLE, PrsPlan, modulate, signal_power

# Extended Typical Urban power-delay profile
ETU_DELAYS_NS = np.array([0, 50, 120, 200, 230, 500, 1600, 2300, 5000], dtype=float)
ETU_POWERS_DB = np.array([-1, -1, -1, 0, 0, 0, -3, -5, -7], dtype=float)

# guards floor() against tau * rate landing just below an integer
_FLOOR_EPS = 1e-7


def delay_samples(tau_s, rate_hz: float = FS_LOW) -> np.ndarray:
    """Integer sample delay ``floor(tau * rate)``."""
    return np.floor(np.asarray(tau_s, dtype=float) * rate_hz + _FLOOR_EPS).astype(np.int64)


@dataclass
class ComplexSignal:
    samples: np.ndarray
    rate_hz: float = FS_LOW
    origin: int = 0
    seed: int | None = None

    def __post_init__(self):
        self.samples = np.asarray(self.samples, dtype=complex)
        if not np.all(np.isfinite(self.samples)):
            raise ValueError("signal contains non-finite samples")

    def __len__(self):
        return self.samples.size


@dataclass
class CellLink:
    plan: PrsPlan
    toa_seconds: np.ndarray
    taps: np.ndarray = field(default_factory=lambda: np.ones(1, dtype=complex))
    residual_fo: float = 0.0
    tx_power_db: float = 0.0

    def __post_init__(self):
        self.toa_seconds = np.atleast_1d(np.asarray(self.toa_seconds, dtype=float))
        self.taps = np.atleast_1d(np.asarray(self.taps, dtype=complex))
        if self.toa_seconds.shape != self.taps.shape:
            raise ValueError("one delay per tap required")
        if np.any(np.diff(self.toa_seconds) < 0):
            raise ValueError("taps must be ordered by non-decreasing delay")
        if abs(self.residual_fo) > 0.5:
            raise ValueError(f"|residual_fo| must be <= 0.5, got {self.residual_fo}")

    @classmethod
    def from_ts(cls, plan, toa_ts, taps=None, **kwargs):
        """Build from delays given in Ts units (1 / 30.72 MHz)."""
        toa_ts = np.atleast_1d(np.asarray(toa_ts, dtype=float))
        if taps is None:
            taps = np.ones(toa_ts.size, dtype=complex)
        return cls(plan, toa_ts / FS_HIGH, taps, **kwargs)

    @property
    def amplitude(self) -> float:
        return 10.0 ** (self.tx_power_db / 20.0)

    def toa_samples(self, rate_hz: float = FS_LOW) -> np.ndarray:
        return delay_samples(self.toa_seconds, rate_hz)

    @property
    def first_toa_ts(self) -> float:
        return float(self.toa_seconds[0] * FS_HIGH)


def subframe_length(plan: PrsPlan, n_lags: int) -> int:
    """Samples in a received subframe: ``13 M + M~`` with ``M~ = M + n_lags``."""
    return N_SYM * plan.symbol_len + n_lags


def apply_channel(link: CellLink, ell: int, m_tilde: int) -> np.ndarray:
    """Received contribution of one PRS symbol of one cell (integer-delay path).

    Returns ``y_p[n + ell M]`` for ``n = 0..m_tilde-1``: every path delayed by
    ``floor(tau F~s)``, scaled by its tap and the cell amplitude, and
    phase-ramped by the residual FO.
    """
    plan = link.plan
    if ell not in plan.prs_symbol_indices:
        raise ValueError(f"symbol {ell} carries no PRS")
    s = plan.prs_symbol_indices.index(ell)
    m = plan.symbol_len
    wave = plan.time_waveforms[s]
    out = np.zeros(m_tilde, dtype=complex)
    for d, h in zip(link.toa_samples(), link.taps):
        if d < 0 or d + m > m_tilde:
            raise ValueError(f"delay {d} exceeds the lag range M~ - M = {m_tilde - m}")
        out[d:d + m] += h * wave
    n = np.arange(m_tilde)
    ramp = np.exp(2j * np.pi * link.residual_fo * (n + ell * m) / plan.fft_size)
    return link.amplitude * out * ramp


def cell_signal(link: CellLink, n_lags: int, method: str = "fast") -> np.ndarray:
    """Whole-subframe noiseless contribution of one cell at the base rate."""
    plan = link.plan
    m = plan.symbol_len
    total = subframe_length(plan, n_lags)
    if method == "fast":
        y = np.zeros(total, dtype=complex)
        for ell in plan.prs_symbol_indices:
            chunk = apply_channel(link, ell, m + n_lags)
            y[ell * m:ell * m + m + n_lags] += chunk
        return y
    if method != "reference":
        raise ValueError(f"unknown synthesis method {method!r}")
    v = UPSAMPLE
    waves = modulate(plan, v)
    mh = m * v
    y_hi = np.zeros(total * v, dtype=complex)
    delays = np.round(link.toa_seconds * FS_HIGH).astype(np.int64)
    if delays.max() > n_lags * v:
        raise ValueError("delay exceeds the lag range")
    for d, h in zip(delays, link.taps):
        for s, ell in enumerate(plan.prs_symbol_indices):
            start = ell * mh + d
            y_hi[start:start + mh] += h * waves[s]
    t = np.arange(y_hi.size)
    y_hi *= np.exp(2j * np.pi * link.residual_fo * t / (plan.fft_size * v))
    return link.amplitude * y_hi[::v]


def awgn(n: int, noise_variance: float, rng: np.random.Generator) -> np.ndarray:
    """Circularly-symmetric complex Gaussian noise with the given variance."""
    scale = np.sqrt(noise_variance / 2.0)
    return scale * (rng.standard_normal(n) + 1j * rng.standard_normal(n))


def superpose(links, noise_variance: float, seed=None, n_lags: int = 128,
              method: str = "fast") -> ComplexSignal:
    """Sum of all cells' received PRS plus AWGN (deterministic given ``seed``)."""
    if not links:
        raise ValueError("need at least one cell")
    plan0 = links[0].plan
    for link in links[1:]:
        if link.plan.symbol_len != plan0.symbol_len or link.plan.fft_size != plan0.fft_size:
            raise ValueError("all links must share the subframe structure")
    y = np.zeros(subframe_length(plan0, n_lags), dtype=complex)
    for link in links:
        y += cell_signal(link, n_lags, method)
    if noise_variance > 0:
        rng = np.random.default_rng(seed)
        y += awgn(y.size, noise_variance, rng)
    return ComplexSignal(y, FS_LOW, 0, seed if isinstance(seed, int) else None)


def noise_variance_for_snr(plan: PrsPlan, snr_db: float) -> float:
    """sigma^2 such that sigma_s^2 / sigma^2 equals the requested SNR."""
    return signal_power(plan) / 10.0 ** (snr_db / 10.0)


def merge_taps(delays, gains):
    """Combine taps that share a quantised delay bin by complex addition."""
    delays = np.asarray(delays, dtype=np.int64)
    uniq, inv = np.unique(delays, return_inverse=True)
    merged = np.zeros(uniq.size, dtype=complex)
    np.add.at(merged, inv, gains)
    return uniq, merged


def etu_taps(doppler_hz: float = 3.0, seed=None, rate_hz: float = FS_LOW, rng=None):
    """One block-fading ETU realisation quantised to ``rate_hz``.

    Taps are independent Rayleigh gains with the ETU power profile normalised
    to unit total power. The realisation is held constant over the subframe,
    so ``doppler_hz`` only labels the channel; time evolution is not modelled.
    Returns ``(delays_in_samples, complex_gains)`` after merging taps that fall
    into the same sample bin.
    """
    del doppler_hz
    rng = rng if rng is not None else np.random.default_rng(seed)
    power = 10.0 ** (ETU_POWERS_DB / 10.0)
    power /= power.sum()
    g = np.sqrt(power / 2.0) * (rng.standard_normal(power.size)
                                + 1j * rng.standard_normal(power.size))
    return merge_taps(delay_samples(ETU_DELAYS_NS * 1e-9, rate_hz), g)


def etu_link(plan: PrsPlan, toa_s: float, rng, residual_fo=0.0, tx_power_db=0.0) -> CellLink:
    """Cell link with an ETU channel on the Ts grid starting at ``toa_s``."""
    d_ts, g = etu_taps(rng=rng, rate_hz=FS_HIGH)
    first = np.round(toa_s * FS_HIGH)
    return CellLink(plan, (first + d_ts) / FS_HIGH, g, residual_fo, tx_power_db)


def write_iq(path, signal: ComplexSignal, meta=None):
    """IQ dump: one JSON header line, then little-endian float32 I/Q pairs."""
    import json

    header = {"rate_hz": signal.rate_hz, "length": len(signal), "seed": signal.seed,
              "format": "cf32le"}
    header.update(meta or {})
    iq = np.empty(2 * len(signal), dtype="<f4")
    iq[0::2] = signal.samples.real
    iq[1::2] = signal.samples.imag
    with open(path, "wb") as fh:
        fh.write(json.dumps(header, sort_keys=True).encode() + b"\n")
        fh.write(iq.tobytes())


def read_iq(path):
    import json

    with open(path, "rb") as fh:
        header = json.loads(fh.readline().decode())
        raw = np.frombuffer(fh.read(), dtype="<f4")
    if raw.size != 2 * header["length"]:
        raise ValueError(f"IQ payload has {raw.size // 2} samples, header says {header['length']}")
    samples = raw[0::2].astype(float) + 1j * raw[1::2].astype(float)
    return ComplexSignal(samples, header["rate_hz"], 0, header.get("seed")), header
