"""Positioning reference signal (PRS) synthesis for a single-PRB NB-IoT carrier.

The PRS occupies 8 of the 14 OFDM symbols of a normal-CP subframe. In each
PRS symbol exactly two resource elements of the PRB are used, six
subcarriers apart, carrying unit-modulus QPSK values drawn from the LTE
length-31 Gold sequence.

Conventions
-----------
* Subcarriers of the PRB are numbered ``j = 0..11`` and placed on the signed
  frequency index ``k = j - 6`` (DC at bin 0, PRB on bins -6..5 mod N).
* All symbols use the same length ``M = N + cp``. Real LTE normal CP makes
  the first symbol of each slot longer; the uniform length is kept so that
  ``symbol * M`` indexing holds everywhere in the receiver.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from functools import lru_cache

import numpy as np

N_SYM = 14
N_PRS = 8
SUBCARRIERS_PER_PRB = 12
PRS_SYMBOLS = (3, 5, 6, 8, 9, 10, 12, 13)

FS_HIGH = 30.72e6  # LTE base rate, Ts = 1 / FS_HIGH
FS_LOW = 1.92e6
UPSAMPLE = 16

_GOLD_NC = 1600
_GOLD_DEGREE = 31


@dataclass(frozen=True)
class PrsConfig:
    pci: int
    n_subcarriers: int = SUBCARRIERS_PER_PRB
    fft_size: int = 128
    cp_len: int = 9
    slot_numbers: tuple[int, int] = (0, 1)
    cp_type: str = "normal"
    prs_symbols: tuple[int, ...] = PRS_SYMBOLS

    def __post_init__(self):
        if self.pci < 0:
            raise ValueError(f"pci must be >= 0, got {self.pci}")
        if self.fft_size & (self.fft_size - 1) or self.fft_size <= 0:
            raise ValueError(f"fft_size must be a power of two, got {self.fft_size}")
        if self.fft_size < self.n_subcarriers:
            raise ValueError("fft_size must be >= n_subcarriers")
        if self.n_subcarriers != SUBCARRIERS_PER_PRB:
            raise ValueError("only a single PRB (12 subcarriers) is supported")
        if self.cp_type != "normal":
            raise ValueError("only normal CP is supported")
        if len(self.prs_symbols) != N_PRS:
            raise ValueError(f"expected {N_PRS} PRS symbols, got {len(self.prs_symbols)}")
        if any(not 0 <= sym < N_SYM for sym in self.prs_symbols):
            raise ValueError("PRS symbol indices must lie in [0, 14)")
        if list(self.prs_symbols) != sorted(set(self.prs_symbols)):
            raise ValueError("PRS symbol indices must be strictly increasing")
        for ns in self.slot_numbers:
            if not 0 <= ns < 20:
                raise ValueError(f"slot number out of range: {ns}")

    @property
    def frequency_shift(self) -> int:
        return self.pci % 6

    @property
    def symbol_len(self) -> int:
        """Samples per OFDM symbol including CP (``M``)."""
        return self.fft_size + self.cp_len

    @property
    def cp_lengths(self) -> tuple[int, ...]:
        return (self.cp_len,) * N_SYM

    def slot_and_symbol(self, ell: int) -> tuple[int, int]:
        """Map a subframe-wide symbol index to (slot number, symbol in slot)."""
        half = N_SYM // 2
        return self.slot_numbers[ell // half], ell % half


def c_init_prs(pci: int, n_s: int, ell: int, cp_type: str = "normal") -> int:
    n_cp = 1 if cp_type == "normal" else 0
    value = (1 << 10) * (7 * (n_s + 1) + ell + 1) * (2 * pci + 1) + 2 * pci + n_cp
    return value % (1 << 31)


def _gold_from_cinit(c_init: int, length: int) -> np.ndarray:
    total = length + _GOLD_NC + _GOLD_DEGREE
    x1 = np.zeros(total, dtype=np.uint8)
    x2 = np.zeros(total, dtype=np.uint8)
    x1[0] = 1
    x2[:_GOLD_DEGREE] = [(c_init >> i) & 1 for i in range(_GOLD_DEGREE)]
    for n in range(total - _GOLD_DEGREE):
        x1[n + 31] = x1[n + 3] ^ x1[n]
        x2[n + 31] = x2[n + 3] ^ x2[n + 2] ^ x2[n + 1] ^ x2[n]
    return x1[_GOLD_NC:_GOLD_NC + length] ^ x2[_GOLD_NC:_GOLD_NC + length]


def gold_sequence(pci: int, n_s: int, ell: int, cp_type: str = "normal",
                  length: int = 4) -> np.ndarray:
    """First ``length`` bits of the PRS pseudo-random sequence c[n].

    ``n_s`` is the slot number in the radio frame and ``ell`` the symbol
    number inside the slot.
    """
    if length < 1:
        raise ValueError("length must be >= 1")
    if pci < 0:
        raise ValueError("pci must be >= 0")
    if not 0 <= n_s < 20:
        raise ValueError(f"slot index n_s must be in [0, 20), got {n_s}")
    if not 0 <= ell < N_SYM:
        raise ValueError(f"symbol index must be in [0, 14), got {ell}")
    return _gold_from_cinit(c_init_prs(pci, n_s, ell, cp_type), length)


def prs_qpsk(bits, m: int) -> complex:
    bits = np.asarray(bits)
    if m < 0 or 2 * m + 2 > bits.size:
        raise ValueError(f"need at least {2 * m + 2} bits for symbol {m}, got {bits.size}")
    b0, b1 = int(bits[2 * m]), int(bits[2 * m + 1])
    return complex(1 - 2 * b0, 1 - 2 * b1) / np.sqrt(2.0)


def subcarrier_offset(ell_in_slot: int, v_shift: int) -> int:
    """Lower PRB subcarrier used by the PRS on antenna port 6 (1 or 2 PBCH ports)."""
    return (6 - ell_in_slot + v_shift) % 6


@dataclass(frozen=True, eq=False)
class PrsPlan:
    config: PrsConfig
    prs_symbol_indices: tuple[int, ...]
    prb_subcarriers: np.ndarray    # (8, 2) PRB subcarrier j of each occupied RE
    freq_index: np.ndarray         # (8, 2) signed k = j - 6
    freq_symbols: np.ndarray       # (8, 2) QPSK values
    time_waveforms: np.ndarray = field(repr=False)  # (8, M) with CP

    @property
    def pci(self) -> int:
        return self.config.pci

    @property
    def fft_size(self) -> int:
        return self.config.fft_size

    @property
    def symbol_len(self) -> int:
        return self.config.symbol_len

    @property
    def lower_k(self) -> np.ndarray:
        """k_{p,l}: lower signed frequency index of each PRS symbol."""
        return self.freq_index[:, 0]

    def frequency_grid(self, s: int) -> np.ndarray:
        """Length-N grid for PRS symbol ``s`` with DC at bin 0."""
        n = self.fft_size
        grid = np.zeros(n, dtype=complex)
        grid[self.freq_index[s] % n] = self.freq_symbols[s]
        return grid

    def waveform_at(self, s: int, t) -> np.ndarray:
        """Band-limited waveform of PRS symbol ``s`` at fractional sample times.

        ``t`` is measured from the first CP sample; values outside ``[0, M)``
        are zero.
        """
        t = np.asarray(t, dtype=float)
        cfg = self.config
        phase = 2j * np.pi * (t[..., None] - cfg.cp_len) * self.freq_index[s] / cfg.fft_size
        out = (np.exp(phase) @ self.freq_symbols[s]) / np.sqrt(cfg.fft_size)
        inside = (t >= 0) & (t < cfg.symbol_len)
        return np.where(inside, out, 0)

    def to_dict(self) -> dict:
        cfg = self.config
        return {
            "pci": cfg.pci,
            "fft_size": cfg.fft_size,
            "cp_len": cfg.cp_len,
            "slot_numbers": list(cfg.slot_numbers),
            "prs_symbols": list(self.prs_symbol_indices),
            "subcarriers": self.prb_subcarriers.tolist(),
            "k": self.freq_index.tolist(),
            "symbols": [[[round(z.real, 12), round(z.imag, 12)] for z in row]
                        for row in self.freq_symbols],
        }

    def dumps(self) -> str:
        return json.dumps(self.to_dict(), indent=1, sort_keys=True)


@lru_cache(maxsize=256)
def build_plan(config: PrsConfig) -> PrsPlan:
    v = config.frequency_shift
    prb_sc = np.zeros((N_PRS, 2), dtype=int)
    symbols = np.zeros((N_PRS, 2), dtype=complex)
    for s, ell in enumerate(config.prs_symbols):
        n_s, ell_slot = config.slot_and_symbol(ell)
        lo = subcarrier_offset(ell_slot, v)
        prb_sc[s] = (lo, lo + 6)
        bits = gold_sequence(config.pci, n_s, ell_slot, config.cp_type, length=4)
        symbols[s] = (prs_qpsk(bits, 0), prs_qpsk(bits, 1))
    k = prb_sc - config.n_subcarriers // 2
    for arr in (prb_sc, k, symbols):
        arr.setflags(write=False)
    plan = PrsPlan(config, tuple(config.prs_symbols), prb_sc, k, symbols,
                   np.empty((N_PRS, 0), dtype=complex))
    waves = _ifft_waveforms(plan)
    waves.setflags(write=False)
    object.__setattr__(plan, "time_waveforms", waves)
    return plan


def plan_for(pci: int, **kwargs) -> PrsPlan:
    return build_plan(PrsConfig(pci=pci, **kwargs))


def _ifft_waveforms(plan: PrsPlan, oversample: int = 1) -> np.ndarray:
    n = plan.fft_size * oversample
    cp = plan.config.cp_len * oversample
    out = np.empty((N_PRS, n + cp), dtype=complex)
    for s in range(N_PRS):
        grid = np.zeros(n, dtype=complex)
        grid[plan.freq_index[s] % n] = plan.freq_symbols[s]
        # unitary scaling of the base-rate transform: 1/sqrt(N), not 1/sqrt(V N)
        core = np.fft.ifft(grid) * n / np.sqrt(plan.fft_size)
        out[s, :cp] = core[n - cp:]
        out[s, cp:] = core
    return out


def modulate(plan: PrsPlan, oversample: int = 1) -> np.ndarray:
    """Time-domain PRS symbols with CP, shape ``(8, oversample * M)``.

    ``oversample = 16`` yields the 30.72 MHz version of the same band-limited
    waveform (sample ``16 n`` equals base-rate sample ``n``).
    """
    if oversample == 1:
        return plan.time_waveforms
    if oversample < 1:
        raise ValueError("oversample must be >= 1")
    return _ifft_waveforms(plan, oversample)


def signal_power(plan: PrsPlan) -> float:
    """Average per-sample power of s_{p,l}[n] over the PRS symbols."""
    return float(np.mean(np.abs(plan.time_waveforms) ** 2))


@lru_cache(maxsize=64)
def _acf_cached(config: PrsConfig, max_lag: int, rate_multiplier: int) -> np.ndarray:
    plan = build_plan(config)
    m = config.symbol_len
    v = rate_multiplier
    lags = np.arange(-max_lag, max_lag + 1) / v
    templates = plan.time_waveforms
    j = np.arange(m)
    acc = np.zeros(lags.size, dtype=complex)
    for s, ell in enumerate(plan.prs_symbol_indices):
        # received span of symbol ell at fractional lag tau, in subframe time
        t = ell * m + j[None, :] + lags[:, None]
        x = np.zeros_like(t, dtype=complex)
        for s2, ell2 in enumerate(plan.prs_symbol_indices):
            if abs(ell2 - ell) > 1 + max_lag // (v * m) + 1:
                continue
            x += plan.waveform_at(s2, t - ell2 * m)
        acc += x @ templates[s].conj()
    acc /= acc[max_lag].real
    acc.setflags(write=False)
    return acc


def prs_acf(plan: PrsPlan, max_lag: int, rate_multiplier: int = UPSAMPLE) -> np.ndarray:
    """Normalised autocorrelation of the PRS subframe on a fine lag grid.

    Returns ``2 * max_lag + 1`` complex values for lags ``-max_lag..max_lag``
    in units of ``1 / rate_multiplier`` base-rate samples; index ``max_lag``
    is lag zero and equals 1. The profile is the noiseless coherent sum of the
    8 per-symbol correlations, including spill-over from neighbouring PRS
    symbols, so it has the same shape the detector observes.
    """
    if max_lag < 1 or rate_multiplier < 1:
        raise ValueError("max_lag and rate_multiplier must be >= 1")
    return _acf_cached(plan.config, int(max_lag), int(rate_multiplier))
