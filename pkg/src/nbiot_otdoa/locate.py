"""TDOA formation, 2-D hyperbolic multilateration and the ToA Cramer-Rao bound.

ToAs are handled in Ts units (1 / 30.72 MHz) after refinement and converted
to seconds here. The position solver is a damped Gauss-Newton iteration on
range-difference residuals, started both from the site centroid and from
the optimum of a coarse grid search.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .prs import FS_HIGH, UPSAMPLE, PrsPlan

SPEED_OF_LIGHT = 299_792_458.0
MIN_CELLS = 3
SUCCESS_RADIUS_M = 500.0

STEP_TOL_M = 0.1
MAX_ITER = 50
GRID_STEP_M = 100.0


@dataclass
class PositionFix:
    xy_m: np.ndarray | None
    reference_cell: int | None
    tdoas_s: dict = field(default_factory=dict)
    residual_norm: float = float("nan")
    iterations_used: int = 0
    localized: bool = False
    used_grid: bool = False
    diagnostic: str = ""
    error_m: float = float("nan")

    @property
    def n_cells(self) -> int:
        return len(self.tdoas_s)

    def score(self, truth_xy) -> "PositionFix":
        """Set ``error_m`` against the true position and return self."""
        if self.xy_m is not None:
            self.error_m = float(np.hypot(*(np.asarray(self.xy_m) - np.asarray(truth_xy))))
        return self

    def success(self, radius_m: float = SUCCESS_RADIUS_M) -> bool:
        """Localized with at least three cells and an error below ``radius_m``."""
        return bool(self.localized and self.n_cells >= MIN_CELLS and self.error_m < radius_m)


def _report_toa_ts(rep) -> float | None:
    if rep.refined_toa_ts is not None and not rep.refinement_failed:
        return float(rep.refined_toa_ts)
    if rep.coarse_toa is None:
        return None
    return float(rep.coarse_toa) * UPSAMPLE


def _strength(rep) -> float:
    h = rep.lmmse_channel
    return abs(h) if h is not None else float(rep.peak)


def tdoas(reports, rate: float = FS_HIGH):
    """Per-cell TDOAs in seconds relative to the strongest detected cell.

    Each report contributes its refined ToA when available, else the coarse
    one. Returns ``(reference_cell_id, {cell_id: tdoa_s})``; the dict is empty
    when fewer than three cells were detected.
    """
    toas = {}
    strength = {}
    for rep in reports:
        if not rep.detected:
            continue
        t = _report_toa_ts(rep)
        if t is None:
            continue
        toas[rep.cell_id] = t * (FS_HIGH / rate)
        strength[rep.cell_id] = _strength(rep)
    if len(toas) < MIN_CELLS:
        return None, {}
    ref = max(strength, key=lambda c: (strength[c], -c))
    return ref, {c: (t - toas[ref]) / FS_HIGH for c, t in toas.items()}


def _residuals(x, sites, ref_xy, ranges):
    d = np.hypot(*(x - sites).T)
    d0 = np.hypot(*(x - ref_xy))
    return ranges - (d - d0), d, d0


def _gauss_newton(x0, sites, ref_xy, ranges, max_iter=MAX_ITER, tol=STEP_TOL_M):
    x = np.asarray(x0, dtype=float).copy()
    r, d, d0 = _residuals(x, sites, ref_xy, ranges)
    cost = float(r @ r)
    for it in range(1, max_iter + 1):
        d = np.maximum(d, 1e-9)
        d0 = max(d0, 1e-9)
        jac = (x - sites) / d[:, None] - (x - ref_xy) / d0
        # r = ranges - f(x), so the GN step solves J dx = r
        step, *_ = np.linalg.lstsq(jac, r, rcond=None)
        lam = 1.0
        while lam > 1e-4:
            xn = x + lam * step
            rn, dn, d0n = _residuals(xn, sites, ref_xy, ranges)
            cn = float(rn @ rn)
            if cn <= cost:
                break
            lam *= 0.5
        else:
            return x, cost, it, False
        moved = float(np.hypot(*(xn - x)))
        x, r, d, d0, cost = xn, rn, dn, d0n, cn
        if moved < tol:
            return x, cost, it, True
    return x, cost, max_iter, False


def _grid_search(sites, ref_xy, ranges, bounds, step=GRID_STEP_M):
    (xmin, ymin), (xmax, ymax) = bounds
    gx = np.arange(xmin, xmax + step, step)
    gy = np.arange(ymin, ymax + step, step)
    px, py = np.meshgrid(gx, gy, indexing="ij")
    pts = np.stack([px.ravel(), py.ravel()], axis=1)
    d = np.hypot(pts[:, None, 0] - sites[None, :, 0], pts[:, None, 1] - sites[None, :, 1])
    d0 = np.hypot(pts[:, 0] - ref_xy[0], pts[:, 1] - ref_xy[1])
    cost = ((ranges[None, :] - (d - d0[:, None])) ** 2).sum(axis=1)
    return pts[int(np.argmin(cost))]


def multilaterate(tdoas_s: dict, site_coords: dict, reference_cell: int,
                  initial_guess=None, bounds=None) -> PositionFix:
    """Solve the 2-D position from TDOAs (seconds) against ``reference_cell``.

    ``site_coords`` maps cell id to transmitter (x, y) in metres. ``bounds``
    is ``((xmin, ymin), (xmax, ymax))`` for the fallback grid and the sanity
    check; by default the site bounding box padded by 2 km.
    """
    fix = PositionFix(None, reference_cell, dict(tdoas_s))
    cells = [c for c in sorted(tdoas_s) if c != reference_cell]
    if reference_cell not in tdoas_s or len(cells) < MIN_CELLS - 1:
        fix.diagnostic = "fewer than three cells"
        return fix
    sites = np.array([site_coords[c] for c in cells], dtype=float)
    ref_xy = np.asarray(site_coords[reference_cell], dtype=float)
    ranges = SPEED_OF_LIGHT * np.array([tdoas_s[c] for c in cells])
    all_xy = np.vstack([sites, ref_xy])
    if bounds is None:
        pad = 2000.0
        bounds = (all_xy.min(axis=0) - pad, all_xy.max(axis=0) + pad)
    lo, hi = np.asarray(bounds[0], float), np.asarray(bounds[1], float)

    centred = all_xy - all_xy.mean(axis=0)
    sv = np.linalg.svd(centred, compute_uv=False)
    if sv[0] == 0 or sv[-1] / sv[0] < 1e-6:
        fix.diagnostic = "collinear or coincident sites"
        return fix

    x0 = all_xy.mean(axis=0) if initial_guess is None else np.asarray(initial_guess, float)
    x, cost, iters, ok = _gauss_newton(x0, sites, ref_xy, ranges)
    inside = bool(np.all(x >= lo) and np.all(x <= hi))
    # range-difference surfaces have local minima; a second start from the
    # coarse grid optimum guards against converging to one
    g = _grid_search(sites, ref_xy, ranges, (lo, hi))
    x2, cost2, it2, ok2 = _gauss_newton(g, sites, ref_xy, ranges)
    iters += it2
    if np.all(np.isfinite(x2)) and (not (ok and inside) or cost2 < cost - 1e-9):
        fix.used_grid = True
        x, cost, ok = x2, cost2, ok2
        fix.diagnostic = "grid start" + ("" if ok2 else ", not converged")
    if not np.all(np.isfinite(x)):
        fix.diagnostic = "solver failed"
        return fix
    fix.xy_m = x
    fix.residual_norm = float(np.sqrt(cost))
    fix.iterations_used = iters
    fix.localized = bool(np.all(np.isfinite(x)))
    return fix


def locate_reports(reports, site_coords: dict, bounds=None) -> PositionFix:
    """TDOAs from detector reports followed by multilateration."""
    ref, td = tdoas(reports)
    if ref is None:
        n = sum(1 for r in reports if r.detected)
        return PositionFix(None, None, {}, diagnostic=f"{n} cells detected")
    return multilaterate(td, site_coords, ref, bounds=bounds)


def crlb_denominator_sum(plan: PrsPlan, variant: str = "corrected") -> float:
    """Sum over PRS symbols of the squared signed subcarrier indices.

    ``"corrected"`` uses ``k^2 + (k + 6)^2`` for the occupied pair ``(k, k+6)``;
    ``"printed"`` evaluates the alternative ``k^2 + (k^2 + 6)^2``.
    """
    k = np.asarray(plan.lower_k, dtype=float)
    if variant == "corrected":
        return float(np.sum(k ** 2 + (k + 6) ** 2))
    if variant == "printed":
        return float(np.sum(k ** 2 + (k ** 2 + 6) ** 2))
    raise ValueError(f"unknown CRLB variant {variant!r}")


def crlb_toa(plan: PrsPlan, sigma2: float, variant: str = "corrected") -> float:
    """Lower bound on the ToA variance in base-rate samples squared."""
    if sigma2 < 0:
        raise ValueError("noise variance must be non-negative")
    n = plan.fft_size
    return sigma2 * n * n / (8.0 * np.pi ** 2 * crlb_denominator_sum(plan, variant))


FIX_COLUMNS = ["trial", "x", "y", "error_m", "n_cells", "localized"]


def fix_row(trial, fix: PositionFix) -> list:
    x, y = (fix.xy_m if fix.xy_m is not None else (float("nan"), float("nan")))
    return [trial, f"{x:.6f}", f"{y:.6f}", f"{fix.error_m:.6f}", fix.n_cells,
            int(fix.localized)]


def write_fixes_csv(path, fixes, header_lines=()):
    """Fix records, one row per trial; ``fixes`` is an iterable of (trial, fix)."""
    import csv

    with open(path, "w", newline="") as fh:
        for line in header_lines:
            fh.write(f"# {line}\n")
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(FIX_COLUMNS)
        for trial, fix in fixes:
            w.writerow(fix_row(trial, fix))
