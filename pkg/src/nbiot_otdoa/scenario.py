"""Experiment worlds: the 3-cell controlled test, the single-cell ToA test and
the 6-site hexagonal deployment with path loss and correlated shadowing.

Site coordinates are a fixed preset (the serving site at the origin with five
neighbours on the first hexagonal ring). Each site has three sectors with PCI
``3 * site + sector``; one sector per site transmits PRS, chosen so that the
six active cells use six different frequency shifts.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .airlink import CellLink, etu_link
from .prs import FS_HIGH, PrsPlan, plan_for

# system parameters
N_SITES = 6
SECTORS_PER_SITE = 3
INTER_SITE_DISTANCE_M = 1732.0
CARRIER_HZ = 900e6
TX_POWER_DBM = 46.0
NOISE_DENSITY_DBM_HZ = {"awgn": -174.0, "etu": -184.0}
BANDWIDTH_HZ = 1.92e6
PATH_LOSS_A = 120.9
PATH_LOSS_B = 37.6
SHADOWING_SIGMA_DB = 8.0
SHADOWING_CORR_SITES = 0.5
SHADOWING_CORR_SECTORS = 1.0
FO_RANGE = 0.03
ETU_DOPPLER_HZ = 3.0

SERVING_PCI = 8
# one PRS-transmitting sector per site; frequency shifts 0, 4, 2, 3, 1, 5
ACTIVE_PCIS = (0, 4, 8, 9, 13, 17)
# sector boresights in degrees, counter-clockwise from +x
SECTOR_AZIMUTHS_DEG = (30.0, 150.0, 270.0)
# ring angle of every site except the serving one (site 2 at the origin)
_RING_ANGLES_DEG = {0: 150.0, 1: 90.0, 3: 210.0, 4: 270.0, 5: 330.0}
MIN_DISTANCE_M = 35.0
# the receiver search window opens this many Ts before a zero-distance arrival,
# so every upsampling window lies inside the computed lag range
TIMING_ADVANCE_TS = 320.0

SPEED_OF_LIGHT = 299_792_458.0


def path_loss_db(d_km) -> np.ndarray | float:
    """Macro path loss ``120.9 + 37.6 log10(d)`` with ``d`` in km."""
    d = np.asarray(d_km, dtype=float)
    if np.any(d <= 0):
        raise ValueError("distance must be positive")
    out = PATH_LOSS_A + PATH_LOSS_B * np.log10(d)
    return float(out) if out.ndim == 0 else out


def noise_power_dbm(channel: str = "awgn", bandwidth_hz: float = BANDWIDTH_HZ) -> float:
    try:
        density = NOISE_DENSITY_DBM_HZ[channel]
    except KeyError:
        raise ValueError(f"unknown channel {channel!r}") from None
    return density + 10.0 * np.log10(bandwidth_hz)


def shadowing(seed, n_sites: int = N_SITES, n_sectors: int = SECTORS_PER_SITE,
              sigma_db: float = SHADOWING_SIGMA_DB, site_corr: float = SHADOWING_CORR_SITES,
              size=None) -> np.ndarray:
    """Correlated log-normal shadowing in dB, shape ``(n_sites, n_sectors)``.

    ``sqrt(rho) * common + sqrt(1 - rho) * per_site``; the sectors of a site
    share the same value. With ``size`` a leading axis of independent draws is
    added.
    """
    if n_sites < 1 or n_sectors < 1:
        raise ValueError("need at least one site and one sector")
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    lead = () if size is None else (int(size),)
    common = rng.standard_normal(lead + (1,))
    own = rng.standard_normal(lead + (n_sites,))
    per_site = sigma_db * (np.sqrt(site_corr) * common + np.sqrt(1.0 - site_corr) * own)
    return np.repeat(per_site[..., None], n_sectors, axis=-1)


@dataclass(frozen=True)
class Deployment:
    site_xy: tuple = None
    inter_site_distance_m: float = INTER_SITE_DISTANCE_M
    tx_power_dbm: float = TX_POWER_DBM
    bandwidth_hz: float = BANDWIDTH_HZ
    shadowing_sigma_db: float = SHADOWING_SIGMA_DB
    shadowing_corr_sites: float = SHADOWING_CORR_SITES
    shadowing_corr_sectors: float = SHADOWING_CORR_SECTORS
    active_pcis: tuple = ACTIVE_PCIS
    serving_pci: int = SERVING_PCI
    association: str = "power"

    def __post_init__(self):
        if self.site_xy is None:
            object.__setattr__(self, "site_xy", hex_sites(self.inter_site_distance_m))
        if len(self.site_xy) != N_SITES:
            raise ValueError(f"expected {N_SITES} sites")
        if self.shadowing_corr_sectors != 1.0:
            raise ValueError("sectors of a site must share shadowing (correlation 1.0)")
        if self.association not in ("power", "geometric"):
            raise ValueError(f"unknown association {self.association!r}")
        for pci in self.active_pcis:
            if not 0 <= pci < N_SITES * SECTORS_PER_SITE:
                raise ValueError(f"pci {pci} not in the deployment")
        if self.serving_pci not in self.active_pcis:
            raise ValueError("serving cell must transmit PRS")

    @property
    def sites(self) -> list:
        """(x, y, [sector pcis]) per site."""
        return [(x, y, [SECTORS_PER_SITE * i + k for k in range(SECTORS_PER_SITE)])
                for i, (x, y) in enumerate(self.site_xy)]

    @staticmethod
    def site_of(pci: int) -> int:
        return pci // SECTORS_PER_SITE

    @staticmethod
    def sector_of(pci: int) -> int:
        return pci % SECTORS_PER_SITE

    def cell_xy(self, pci: int) -> tuple:
        return tuple(self.site_xy[self.site_of(pci)])

    def cell_coords(self) -> dict:
        return {pci: self.cell_xy(pci) for pci in self.active_pcis}

    def bounds(self, pad: float | None = None):
        pad = self.inter_site_distance_m if pad is None else pad
        xy = np.asarray(self.site_xy, dtype=float)
        return xy.min(axis=0) - pad, xy.max(axis=0) + pad


def hex_sites(isd: float = INTER_SITE_DISTANCE_M) -> tuple:
    out = []
    for i in range(N_SITES):
        if i == Deployment.site_of(SERVING_PCI):
            out.append((0.0, 0.0))
            continue
        a = np.deg2rad(_RING_ANGLES_DEG[i])
        out.append((float(round(isd * np.cos(a), 6)) + 0.0, float(round(isd * np.sin(a), 6)) + 0.0))
    return tuple(out)


def _sector_by_bearing(dx, dy) -> np.ndarray:
    bearing = np.rad2deg(np.arctan2(dy, dx))
    az = np.asarray(SECTOR_AZIMUTHS_DEG)
    diff = np.abs((bearing[..., None] - az + 180.0) % 360.0 - 180.0)
    return np.argmin(diff, axis=-1)


def distances_m(dep: Deployment, xy) -> np.ndarray:
    """Device-to-site distances, shape ``(..., n_sites)``, clamped below."""
    xy = np.asarray(xy, dtype=float)
    sites = np.asarray(dep.site_xy, dtype=float)
    d = np.hypot(xy[..., None, 0] - sites[:, 0], xy[..., None, 1] - sites[:, 1])
    return np.maximum(d, MIN_DISTANCE_M)


def serving_cell(dep: Deployment, xy, shadow_db=None) -> np.ndarray:
    """PCI of the serving sector for each device position.

    ``"power"`` picks the site with the strongest received power including
    shadowing; ``"geometric"`` picks the nearest site. Sectors carry no
    antenna pattern, so the sector is the one whose boresight is closest to
    the bearing from the site.
    """
    xy = np.asarray(xy, dtype=float)
    d = distances_m(dep, xy)
    rx = -path_loss_db(d / 1000.0)
    if dep.association == "power" and shadow_db is not None:
        rx = rx - np.asarray(shadow_db)[..., 0]
    site = np.argmax(rx, axis=-1)
    sxy = np.asarray(dep.site_xy, dtype=float)[site]
    sector = _sector_by_bearing(xy[..., 0] - sxy[..., 0], xy[..., 1] - sxy[..., 1])
    return SECTORS_PER_SITE * site + sector


@dataclass
class DeviceDrop:
    xy: np.ndarray
    shadowing_db: np.ndarray
    serving_pci: np.ndarray
    attempts: int = 0

    def __len__(self):
        return self.xy.shape[0]


def drop_devices(dep: Deployment, n: int, seed, max_attempts: int = 1000) -> DeviceDrop:
    """Uniform device positions whose serving cell is ``dep.serving_pci``.

    Candidates are drawn uniformly in the disc of radius ISD around the
    serving site together with a shadowing realisation, and kept when they
    associate to the serving cell.
    """
    if n < 1:
        raise ValueError("n must be >= 1")
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    centre = np.asarray(dep.cell_xy(dep.serving_pci), dtype=float)
    r_max = dep.inter_site_distance_m
    kept_xy, kept_sh = [], []
    attempts = 0
    while len(kept_xy) < n:
        if attempts >= max_attempts:
            raise RuntimeError("device drop did not converge; check the deployment")
        attempts += 1
        m = 4 * (n - len(kept_xy)) + 16
        r = r_max * np.sqrt(rng.uniform(size=m))
        a = rng.uniform(0.0, 2.0 * np.pi, size=m)
        xy = centre + np.stack([r * np.cos(a), r * np.sin(a)], axis=1)
        sh = shadowing(rng, sigma_db=dep.shadowing_sigma_db,
                       site_corr=dep.shadowing_corr_sites, size=m)
        ok = serving_cell(dep, xy, sh) == dep.serving_pci
        kept_xy.extend(xy[ok])
        kept_sh.extend(sh[ok])
    xy = np.asarray(kept_xy[:n])
    sh = np.asarray(kept_sh[:n])
    return DeviceDrop(xy, sh, serving_cell(dep, xy, sh), attempts)


def link_budget(dep: Deployment, device_xy, shadowing_db=None, channel: str = "awgn") -> dict:
    """Per active cell SNR in dB at the device: ``P_tx - L - shadowing - N``."""
    d = distances_m(dep, device_xy)
    noise = noise_power_dbm(channel, dep.bandwidth_hz)
    out = {}
    for pci in dep.active_pcis:
        site = dep.site_of(pci)
        sh = 0.0 if shadowing_db is None else float(np.asarray(shadowing_db)[site, dep.sector_of(pci)])
        out[pci] = dep.tx_power_dbm - path_loss_db(d[site] / 1000.0) - sh - noise
    return out


def geometric_toas_s(dep: Deployment, device_xy, advance_ts: float = TIMING_ADVANCE_TS) -> dict:
    """Line-of-sight propagation delay per active cell plus the common
    search-window advance (which cancels in every TDOA)."""
    d = np.hypot(*(np.asarray(device_xy, float)[None, :] - np.asarray(dep.site_xy, float)).T)
    return {pci: float(d[dep.site_of(pci)] / SPEED_OF_LIGHT + advance_ts / FS_HIGH)
            for pci in dep.active_pcis}


def device_links(dep: Deployment, device_xy, shadowing_db, channel: str, rng,
                 fo_range: float = FO_RANGE, pcis=None) -> list[CellLink]:
    """Cell links for one device: geometric ToA, power from the link budget,
    uniform residual FO and, for ``etu``, one block-fading realisation."""
    snr = link_budget(dep, device_xy, shadowing_db, channel)
    toa = geometric_toas_s(dep, device_xy)
    links = []
    for pci in (dep.active_pcis if pcis is None else pcis):
        plan = plan_for(pci)
        eps = float(rng.uniform(-fo_range, fo_range))
        if channel == "etu":
            links.append(etu_link(plan, toa[pci], rng, eps, snr[pci]))
        else:
            links.append(CellLink(plan, toa[pci], 1.0, eps, snr[pci]))
    return links


@dataclass(frozen=True)
class ThreeCellPreset:
    pcis: tuple = (0, 1, 2)
    toas_ts: tuple = (320.0, 480.0, 640.0)
    powers_db: tuple = (0.0, -4.0, -8.0)
    fos: tuple = (0.02, 0.01, 0.01)

    def plans(self) -> list[PrsPlan]:
        return [plan_for(p) for p in self.pcis]

    def links(self) -> list[CellLink]:
        return [CellLink.from_ts(plan, t, residual_fo=fo, tx_power_db=pw)
                for plan, t, pw, fo in zip(self.plans(), self.toas_ts, self.powers_db, self.fos)]

    @property
    def weakest(self) -> int:
        return int(np.argmin(self.powers_db))


@dataclass(frozen=True)
class SingleCellPreset:
    """One active cell; ToA drawn uniformly in ``toa_range_ts`` (fixed when
    both ends are equal), FO uniform in ``[-fo_range, fo_range]``."""
    pci: int = SERVING_PCI
    toa_range_ts: tuple = (320.0, 960.0)
    fo_range: float = FO_RANGE
    integer_ts: bool = True

    def draw(self, rng) -> CellLink:
        lo, hi = self.toa_range_ts
        t = lo if hi == lo else float(rng.uniform(lo, hi))
        if self.integer_ts:
            t = float(np.floor(t))
        eps = float(rng.uniform(-self.fo_range, self.fo_range)) if self.fo_range else 0.0
        return CellLink.from_ts(plan_for(self.pci), t, residual_fo=eps)


def ts_to_m(ts) -> float:
    return float(np.asarray(ts) * SPEED_OF_LIGHT / FS_HIGH)


@dataclass
class Scenario:
    """Resolved scenario: which world and its parameters."""
    kind: str = "three-cell"
    three_cell: ThreeCellPreset = field(default_factory=ThreeCellPreset)
    single_cell: SingleCellPreset = field(default_factory=SingleCellPreset)
    deployment: Deployment = field(default_factory=Deployment)
