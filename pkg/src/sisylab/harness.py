"""Sweep pipeline: transport, cooling and spectral widths per lattice point.

For every ``(Delta0', Gamma0')`` point an undriven ensemble gives the
diffusion coefficients and the temperature relaxation rates, a probe scan
gives the spectrum, and the spectral fits give the Rayleigh width and the
broad wing width.  :class:`ComparisonReport` collects the points and
regresses the Rayleigh width on the z cooling rate.  All rates are in
omega_r.
"""

from dataclasses import dataclass, field
import math
import time

import numpy as np

from .engine import OMEGA_R, run_ensemble
from .exceptions import NoRelaxation, SisylabError
from .lattice import grating_wavevector, harmonic_frequencies
from .observables import (fit_diffusion, fit_relaxation, gamma_d_lattice, msd_series,
                          quench_relaxation, temperature_relaxation)
from .rng import derive_seed
from .specfit import fit_central, fit_wings
from .spectroscopy import spectrum_scan, thermalized_snapshot

__all__ = [
    "PointResult",
    "Regression",
    "ComparisonReport",
    "spectrum_grid",
    "run_point",
    "compare",
    "linear_regression",
    "REFERENCE_INTERCEPT",
    "REFERENCE_SLOPE",
]

# published empirical relation between Rayleigh width and z cooling rate
REFERENCE_INTERCEPT = 0.13
REFERENCE_SLOPE = 0.25


def spectrum_grid(cfg, params, gamma_tz):
    """Detuning grid (omega_r) for a lattice point.

    Uses ``spectrum.grid`` if set.  Otherwise: ``central_points`` points
    spread over ``+-central_span * Gamma_Tz`` with zero left out (a static
    drive cannot be told apart from frozen density fluctuations by the
    lock-in), wing points at ``+-wing_factors * Gamma_Tz`` and sideband
    points at ``+-sideband_factors`` times each vibration frequency.
    """
    if cfg["spectrum.grid"] is not None:
        return np.unique(np.asarray(cfg["spectrum.grid"], dtype=float))
    if not gamma_tz > 0:
        raise ValueError(f"automatic grid needs Gamma_Tz > 0, got {gamma_tz}")
    n = cfg["spectrum.central_points"]
    span = cfg["spectrum.central_span"] * gamma_tz
    central = np.linspace(-span, span, n + 1 - n % 2)
    central = central[central != 0]
    pos = [gamma_tz * f for f in cfg["spectrum.wing_factors"]]
    for w in harmonic_frequencies(params):
        pos += [w * f for f in cfg["spectrum.sideband_factors"]]
    pos = np.array([d for d in pos if d > span])
    grid = np.concatenate([central, pos, -pos])
    return np.unique(np.round(grid, 12))


@dataclass
class PointResult:
    """Everything measured at one sweep point; NaN marks what failed."""

    delta0p: float
    gamma0p: float
    seed: int
    d_x: float = math.nan
    d_x_err: float = math.nan
    d_z: float = math.nan
    d_z_err: float = math.nan
    gamma_d: float = math.nan
    gamma_d_err: float = math.nan
    gamma_tx: float = math.nan
    gamma_tx_err: float = math.nan
    gamma_tz: float = math.nan
    gamma_tz_err: float = math.nan
    kt_x: float = math.nan
    kt_z: float = math.nan
    gamma_r: float = math.nan
    gamma_r_err: float = math.nan
    gamma_b: float = math.nan
    gamma_b_err: float = math.nan
    runtime: float = 0.0
    errors: dict = field(default_factory=dict)
    notes: dict = field(default_factory=dict)
    spectrum: object = None
    fit: object = None
    wings: object = None

    @property
    def ratio(self):
        return self.gamma_d / self.gamma_r

    @property
    def ratio_err(self):
        r = self.ratio
        return abs(r) * math.hypot(self.gamma_d_err / self.gamma_d, self.gamma_r_err / self.gamma_r)

    @property
    def ok(self):
        return not self.errors


def _gamma_d_err(params, d_x_err, d_z_err):
    kx, kz = grating_wavevector(params)
    return math.hypot(kx * kx * d_x_err, kz * kz * d_z_err) / OMEGA_R


def _temperatures_with_quench(res, ens, params, sim, t_min):
    """Fallback when the main run shows no relaxation on some axis.

    The z rate is taken from the main run alone.  The x rate is measured
    by heating x threefold from the steady state (see
    :func:`quench_relaxation`).
    """
    sel = ens.times >= t_min
    ok = ens.ok
    t = ens.times[sel]
    p2z = ens.pz[sel][:, ok] ** 2
    fz = fit_relaxation(t, p2z.mean(axis=1), p2z.std(axis=1, ddof=1) / math.sqrt(p2z.shape[1]))
    res.gamma_tz, res.gamma_tz_err, res.kt_z = fz.rate, fz.rate_err, 2.0 * fz.offset
    late = ens.px[sel][:, ok][t >= 0.5 * t[-1]]
    res.kt_x = 2.0 * float(np.mean(late**2))
    start = thermalized_snapshot(ens, res.kt_x, res.kt_z)
    fx = quench_relaxation(params, start, sim.dt, sim.t_total, "x", seed=sim.seed,
                           record_stride=sim.record_stride)
    res.gamma_tx, res.gamma_tx_err = fx.rate, fx.rate_err
    res.notes["gamma_tx"] = "x quench from steady state (no x relaxation in the main run)"


def run_point(cfg, delta0p, gamma0p, seed, progress=None):
    """Measure one sweep point.  Failures are recorded, not raised."""
    t0 = time.perf_counter()
    params = cfg.lattice(delta0p=delta0p, gamma0p=gamma0p)
    res = PointResult(delta0p=float(delta0p), gamma0p=float(gamma0p), seed=int(seed))
    try:
        sim = cfg.sim(params, seed=seed)
        ens = run_ensemble(params, sim)
    except SisylabError as exc:
        res.errors["ensemble"] = f"{type(exc).__name__}: {exc}"
        res.runtime = time.perf_counter() - t0
        return res

    msd = msd_series(ens)
    t_end = msd.times[-1]
    try:
        dr = fit_diffusion(msd, window=(cfg["msd.window_start"] * t_end, t_end))
        res.d_x, res.d_x_err, res.d_z, res.d_z_err = dr.d_x, dr.d_x_err, dr.d_z, dr.d_z_err
        res.gamma_d = gamma_d_lattice(dr, params)
        res.gamma_d_err = _gamma_d_err(params, dr.d_x_err, dr.d_z_err)
    except (SisylabError, ValueError) as exc:
        res.errors["diffusion"] = f"{type(exc).__name__}: {exc}"

    try:
        tr = temperature_relaxation(ens, t_min=cfg["temps.t_min"])
        res.gamma_tx, res.gamma_tx_err = tr.gamma_tx, tr.gamma_tx_err
        res.gamma_tz, res.gamma_tz_err = tr.gamma_tz, tr.gamma_tz_err
        res.kt_x, res.kt_z = tr.kt_x, tr.kt_z
    except NoRelaxation:
        try:
            _temperatures_with_quench(res, ens, params, sim, cfg["temps.t_min"])
        except (SisylabError, ValueError) as exc:
            res.errors["temperature"] = f"{type(exc).__name__}: {exc}"
    except (SisylabError, ValueError) as exc:
        res.errors["temperature"] = f"{type(exc).__name__}: {exc}"
    if "temperature" in res.errors:
        res.runtime = time.perf_counter() - t0
        return res

    try:
        grid = spectrum_grid(cfg, params, res.gamma_tz)
        start = thermalized_snapshot(ens, res.kt_x, res.kt_z)
        spec = spectrum_scan(params, grid, cfg.probe(), sim, initial=start, progress=progress)
        res.spectrum = spec
    except (SisylabError, ValueError) as exc:
        res.errors["spectrum"] = f"{type(exc).__name__}: {exc}"
        res.runtime = time.perf_counter() - t0
        return res
    if spec.errors:
        res.errors["spectrum_points"] = f"{len(spec.errors)} of {len(spec)} points failed"

    valid = spec.valid()
    dmax = cfg["fit.delta_max"]
    if dmax is None:
        dmax = cfg["spectrum.central_span"] * res.gamma_tz
    try:
        res.fit = fit_central(valid, delta_max=dmax)
        res.gamma_r, res.gamma_r_err = res.fit.gamma_r, res.fit.gamma_r_err
    except (SisylabError, ValueError) as exc:
        res.errors["central_fit"] = f"{type(exc).__name__}: {exc}"
        res.runtime = time.perf_counter() - t0
        return res
    try:
        res.wings = fit_wings(valid, delta_cut=cfg["fit.delta_cut"], gamma_r=res.gamma_r)
        res.gamma_b, res.gamma_b_err = res.wings.gamma_b, res.wings.gamma_b_err
    except (SisylabError, ValueError) as exc:
        res.errors["wing_fit"] = f"{type(exc).__name__}: {exc}"
    res.runtime = time.perf_counter() - t0
    return res


@dataclass
class Regression:
    """Weighted straight line ``y = intercept + slope * x``."""

    intercept: float
    slope: float
    intercept_err: float
    slope_err: float
    r2: float
    n: int

    def predict(self, x):
        return self.intercept + self.slope * np.asarray(x, dtype=float)


def linear_regression(x, y, yerr=None):
    """Weighted least-squares line with parameter errors and R^2.

    Parameter errors are scaled by the reduced chi^2 when it exceeds one,
    so scattered data are not over-trusted.
    """
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    w = np.ones_like(y) if yerr is None else 1.0 / np.asarray(yerr, dtype=float) ** 2
    keep = np.isfinite(x) & np.isfinite(y) & np.isfinite(w) & (w > 0)
    x, y, w = x[keep], y[keep], w[keep]
    n = x.size
    if n < 3:
        raise ValueError(f"regression needs >= 3 points, got {n}")
    A = np.column_stack([np.ones(n), x])
    cov = np.linalg.inv(A.T @ (w[:, None] * A))
    b = cov @ (A.T @ (w * y))
    resid = y - A @ b
    chi2 = float(w @ resid**2)
    if chi2 / (n - 2) > 1:
        cov = cov * (chi2 / (n - 2))
    ym = float(w @ y / w.sum())
    ss_tot = float(w @ (y - ym) ** 2)
    r2 = 1.0 - chi2 / ss_tot if ss_tot > 0 else 1.0
    return Regression(float(b[0]), float(b[1]), float(math.sqrt(cov[0, 0])),
                      float(math.sqrt(cov[1, 1])), r2, n)


REPORT_COLUMNS = [
    "delta0p", "gamma0p", "seed",
    "d_x", "d_x_err", "d_z", "d_z_err",
    "gamma_d", "gamma_d_err", "gamma_tx", "gamma_tx_err", "gamma_tz", "gamma_tz_err",
    "gamma_r", "gamma_r_err", "gamma_b", "gamma_b_err", "ratio_d_r", "ratio_d_r_err",
    "kt_x", "kt_z", "ok",
]


@dataclass
class ComparisonReport:
    """Per-point table plus regressions, grouped by Delta0'.

    ``rate_fits[delta0p]`` regresses gamma_R on Gamma_Tz and
    ``pumping_fits[delta0p]`` regresses Gamma_Tz on Gamma0'.
    """

    points: list
    rate_fits: dict
    pumping_fits: dict
    regression_errors: dict
    runtime: float
    units: dict = field(default_factory=lambda: {
        "gamma_d": "omega_r", "gamma_r": "omega_r", "gamma_b": "omega_r",
        "gamma_tx": "omega_r", "gamma_tz": "omega_r", "d_x": "hbar/M", "d_z": "hbar/M",
        "kt_x": "hbar*omega_r", "kt_z": "hbar*omega_r",
    })

    def rows(self):
        out = []
        for p in self.points:
            out.append([
                p.delta0p, p.gamma0p, p.seed, p.d_x, p.d_x_err, p.d_z, p.d_z_err,
                p.gamma_d, p.gamma_d_err, p.gamma_tx, p.gamma_tx_err, p.gamma_tz, p.gamma_tz_err,
                p.gamma_r, p.gamma_r_err, p.gamma_b, p.gamma_b_err, p.ratio, p.ratio_err,
                p.kt_x, p.kt_z, p.ok,
            ])
        return out

    def units_consistent(self):
        return self.units["gamma_d"] == self.units["gamma_r"] == "omega_r"

    def consistency_gap(self, params_for):
        """Largest relative gap between the gamma_D column and a recomputation
        from the D columns (``params_for(point)`` returns its LatticeParams)."""
        gap = 0.0
        for p in self.points:
            if math.isfinite(p.gamma_d):
                again = gamma_d_lattice((p.d_x, p.d_z), params_for(p))
                gap = max(gap, abs(again - p.gamma_d) / abs(p.gamma_d))
        return gap

    def summary(self):
        """``key: value`` lines: regressions, ratio range, unit audit."""
        lines = [f"n_points: {len(self.points)}",
                 f"unit_audit: gamma_d[{self.units['gamma_d']}] gamma_r[{self.units['gamma_r']}] "
                 f"{'ok' if self.units_consistent() else 'MISMATCH'}"]
        ratios = [p.ratio for p in self.points if math.isfinite(p.ratio)]
        if ratios:
            lines.append(f"ratio_d_r_min: {min(ratios)!r}")
            lines.append(f"ratio_d_r_max: {max(ratios)!r}")
        for d0 in sorted(self.rate_fits):
            r = self.rate_fits[d0]
            lines += [
                f"rate_fit[{d0!r}].intercept: {r.intercept!r} +- {r.intercept_err!r}",
                f"rate_fit[{d0!r}].slope: {r.slope!r} +- {r.slope_err!r}",
                f"rate_fit[{d0!r}].r2: {r.r2!r}",
                f"rate_fit[{d0!r}].reference: {REFERENCE_INTERCEPT!r} + {REFERENCE_SLOPE!r} * Gamma_Tz",
            ]
        for d0 in sorted(self.pumping_fits):
            r = self.pumping_fits[d0]
            lines += [
                f"pumping_fit[{d0!r}].slope: {r.slope!r} +- {r.slope_err!r}",
                f"pumping_fit[{d0!r}].r2: {r.r2!r}",
            ]
        for k in sorted(self.regression_errors):
            lines.append(f"regression_error[{k}]: {self.regression_errors[k]}")
        for i, p in enumerate(self.points):
            for stage, msg in sorted(p.errors.items()):
                lines.append(f"point[{i}].{stage}: {msg}")
            for key, msg in sorted(p.notes.items()):
                lines.append(f"point[{i}].note.{key}: {msg}")
        return "\n".join(lines) + "\n"


def _regress(points):
    fits, pfits, errs = {}, {}, {}
    for d0 in sorted({p.delta0p for p in points}):
        pts = [p for p in points if p.delta0p == d0]
        try:
            fits[d0] = linear_regression([p.gamma_tz for p in pts], [p.gamma_r for p in pts],
                                         [p.gamma_r_err for p in pts])
        except (ValueError, np.linalg.LinAlgError) as exc:
            errs[f"rate_fit[{d0!r}]"] = str(exc)
        try:
            pfits[d0] = linear_regression([p.gamma0p for p in pts], [p.gamma_tz for p in pts],
                                          [p.gamma_tz_err for p in pts])
        except (ValueError, np.linalg.LinAlgError) as exc:
            errs[f"pumping_fit[{d0!r}]"] = str(exc)
    return fits, pfits, errs


def compare(cfg, progress=None, on_point=None):
    """Run the full sweep ``sweep.delta0p x sweep.gamma0p``.

    Point ``i`` (row-major over the two lists) uses seed
    ``derive_seed(run.seed, i)``.  ``on_point(i, result)`` is called as
    each point finishes.
    """
    d_list, g_list = cfg["sweep.delta0p"], cfg["sweep.gamma0p"]
    if not d_list or not g_list:
        raise ValueError("sweep lists must be non-empty")
    t0 = time.perf_counter()
    points = []
    i = 0
    for d0 in d_list:
        for g0 in g_list:
            res = run_point(cfg, d0, g0, derive_seed(cfg["run.seed"], i), progress=progress)
            points.append(res)
            if on_point is not None:
                on_point(i, res)
            i += 1
    fits, pfits, errs = _regress(points)
    return ComparisonReport(points, fits, pfits, errs, time.perf_counter() - t0)
