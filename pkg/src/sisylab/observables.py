"""Transport and thermal observables extracted from ensembles.

Conventions: spatial diffusion uses the natural time unit M/(hbar k^2),
which is 1/(2 omega_r), so that ``<dx^2> = 2 D t`` gives D directly in
hbar/M.  Rates (temperature relaxation, density-grating decay) are returned
in omega_r.
"""

from dataclasses import dataclass
import math

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_is_fitted

from ._validation import check_positions, check_series, check_window
from .engine import OMEGA_R, Ensemble, Integrator
from .exceptions import InsufficientData, NonlinearRegime, NoRelaxation, StabilityViolation
from .lattice import grating_wavevector
from .rng import TAG_QUENCH, atom_streams
from .specfit import least_squares_fit

__all__ = [
    "MsdSeries",
    "DiffusionResult",
    "RelaxationFit",
    "TemperatureRelaxation",
    "msd_series",
    "msd_from_positions",
    "fit_diffusion",
    "fit_relaxation",
    "temperature_relaxation",
    "quench_relaxation",
    "gamma_d_general",
    "gamma_d_lattice",
    "pde_relaxation_oracle",
    "DiffusionEstimator",
    "TemperatureRelaxationEstimator",
]

MIN_ATOMS = 16
R2_MIN = 0.95


@dataclass
class MsdSeries:
    """Mean-square displacements per axis.

    ``times`` are in M/(hbar k^2); displacements in 1/k^2.  ``sq_x`` and
    ``sq_z`` optionally keep the per-atom squared displacements (shape
    ``(n_times, n_atoms)``) so that fitted slopes get honest errors.
    """

    times: np.ndarray
    msd_x: np.ndarray
    msd_z: np.ndarray
    err_x: np.ndarray
    err_z: np.ndarray
    n_atoms: int
    sq_x: np.ndarray = None
    sq_z: np.ndarray = None


@dataclass
class DiffusionResult:
    d_x: float
    d_z: float
    d_x_err: float
    d_z_err: float
    window: tuple
    r2_x: float
    r2_z: float
    n_points: int

    @property
    def d(self):
        return np.array([self.d_x, self.d_z])


@dataclass
class RelaxationFit:
    """``y(t) = amplitude * exp(-rate * t) + offset``."""

    rate: float
    rate_err: float
    amplitude: float
    offset: float
    offset_err: float
    chi2: float
    dof: int

    def predict(self, t):
        return self.amplitude * np.exp(-self.rate * np.asarray(t, dtype=float)) + self.offset


@dataclass
class TemperatureRelaxation:
    """Relaxation of the kinetic temperature per axis.

    Rates are in omega_r, asymptotic temperatures kT in hbar*omega_r
    (kT = <p^2>/M, which is 2 <p^2> in recoil units).
    """

    gamma_tx: float
    gamma_tz: float
    gamma_tx_err: float
    gamma_tz_err: float
    kt_x: float
    kt_z: float
    kt_x_err: float
    kt_z_err: float
    fit_x: RelaxationFit
    fit_z: RelaxationFit


def msd_from_positions(times, x, z, keep_atoms=True):
    """:class:`MsdSeries` from position arrays of shape ``(n_times, n_atoms)``."""
    x, z = check_positions(x, z)
    if x.shape[1] < MIN_ATOMS:
        raise InsufficientData(f"msd needs >= {MIN_ATOMS} atoms, got {x.shape[1]}")
    if x.shape[0] < 2:
        raise InsufficientData("msd needs at least two snapshots")
    sq_x = (x - x[0]) ** 2
    sq_z = (z - z[0]) ** 2
    n = x.shape[1]
    return MsdSeries(
        times=np.asarray(times, dtype=float),
        msd_x=sq_x.mean(axis=1),
        msd_z=sq_z.mean(axis=1),
        err_x=sq_x.std(axis=1, ddof=1) / math.sqrt(n),
        err_z=sq_z.std(axis=1, ddof=1) / math.sqrt(n),
        n_atoms=n,
        sq_x=sq_x if keep_atoms else None,
        sq_z=sq_z if keep_atoms else None,
    )


def msd_series(ensemble, keep_atoms=True):
    """Mean-square displacement of every surviving atom from its start."""
    ok = ensemble.ok
    return msd_from_positions(
        ensemble.times / OMEGA_R, ensemble.x[:, ok], ensemble.z[:, ok], keep_atoms
    )


def _weighted_line(t, y, w):
    """Affine weighted least squares; returns slope operator and fit stats."""
    W = w.sum()
    tm = (w * t).sum() / W
    dt = t - tm
    sxx = (w * dt * dt).sum()
    # slope = sum(c * y)
    c = w * dt / sxx
    slope = float(c @ y)
    icpt = float(((w * y).sum() - slope * (w * t).sum()) / W)
    resid = y - (icpt + slope * t)
    ym = (w * y).sum() / W
    ss_tot = float((w * (y - ym) ** 2).sum())
    r2 = 1.0 - float((w * resid**2).sum()) / ss_tot if ss_tot > 0 else 1.0
    return slope, c, r2


def fit_diffusion(msd, window=None):
    """Diffusion coefficients (hbar/M) from the late-time MSD slope.

    A weighted straight line is fitted through the points inside
    ``window`` (default: the second half of the series) and D = slope / 2.

    Raises
    ------
    NonlinearRegime
        If R^2 < 0.95 on either axis.
    """
    t = np.asarray(msd.times, dtype=float)
    if window is None:
        window = (0.5 * t[-1], t[-1])
    lo, hi = check_window(window, t)
    sel = (t >= lo - 1e-12) & (t <= hi + 1e-12)
    if sel.sum() < 10:
        raise InsufficientData(f"need >= 10 points in the fit window, got {sel.sum()}")
    out = {}
    for axis in ("x", "z"):
        y = getattr(msd, "msd_" + axis)[sel]
        err = getattr(msd, "err_" + axis)[sel]
        if np.all(err > 0):
            w = 1.0 / err**2
        else:
            w = np.ones_like(y)
        slope, c, r2 = _weighted_line(t[sel], y, w)
        sq = getattr(msd, "sq_" + axis)
        if sq is not None:
            per_atom = c @ sq[sel]
            slope_err = float(per_atom.std(ddof=1) / math.sqrt(per_atom.size))
        else:
            slope_err = float(math.sqrt((c * c * err * err).sum()))
        out[axis] = (0.5 * slope, 0.5 * slope_err, r2)
    bad = [a for a in ("x", "z") if out[a][2] < R2_MIN]
    if bad:
        raise NonlinearRegime(
            "msd not linear in window "
            + ", ".join(f"{a}: R^2={out[a][2]:.3f}" for a in bad)
        )
    return DiffusionResult(
        d_x=max(out["x"][0], 0.0),
        d_z=max(out["z"][0], 0.0),
        d_x_err=out["x"][1],
        d_z_err=out["z"][1],
        window=(lo, hi),
        r2_x=out["x"][2],
        r2_z=out["z"][2],
        n_points=int(sel.sum()),
    )


def _exp_model(t, amplitude, rate, offset):
    return amplitude * np.exp(-rate * t) + offset


def _exp_jacobian(t, amplitude, rate, offset):
    e = np.exp(-rate * t)
    return np.column_stack([e, -amplitude * t * e, np.ones_like(t)])


def fit_relaxation(t, y, err=None, scale_errors=True):
    """Fit ``A exp(-rate t) + B`` and return a :class:`RelaxationFit`.

    ``rate`` is in inverse units of ``t``.  With ``scale_errors`` the
    covariance is inflated by the reduced chi^2 when that exceeds one
    (consecutive Monte Carlo samples are correlated).

    Raises
    ------
    NoRelaxation
        If the fitted rate is consistent with zero within 2 sigma.
    """
    t, y, err = check_series(t, y, err)
    n_tail = max(2, t.size // 5)
    offset0 = float(np.mean(y[-n_tail:]))
    amp0 = float(y[0] - offset0)
    span = float(t[-1] - t[0])
    if span <= 0:
        raise ValueError("relaxation fit needs a time span")
    rate0 = 5.0 / span
    if amp0 != 0:
        target = abs(amp0) / math.e
        below = np.nonzero(np.abs(y - offset0) <= target)[0]
        if below.size and t[below[0]] > t[0]:
            rate0 = 1.0 / (t[below[0]] - t[0])
    # the sqrt-parameterised rate has a stationary point at zero, so start
    # from several rates and keep the best fit
    res = None
    for r0 in rate0 * np.array([1.0, 0.3, 3.0, 0.1, 10.0]):
        trial = least_squares_fit(
            lambda tt, a, r, b: _exp_model(tt - t[0], a, r, b),
            lambda tt, a, r, b: _exp_jacobian(tt - t[0], a, r, b),
            t, y, err, (amp0, r0, offset0), positive=[1],
        )
        if res is None or trial.chi2 < res.chi2 * (1 - 1e-9):
            res = trial
    cov = res.covariance
    if scale_errors and res.dof > 0 and res.chi2 / res.dof > 1:
        cov = cov * (res.chi2 / res.dof)
    errs = np.sqrt(np.clip(np.diag(cov), 0, None))
    amp, rate, offset = res.params
    # refer the amplitude back to t = 0
    amp = amp * math.exp(rate * t[0]) if rate * t[0] < 700 else amp
    rate_err = float(errs[1])
    if not np.isfinite(rate_err) or rate <= 2.0 * rate_err:
        raise NoRelaxation(f"relaxation rate {rate:.4g} +- {rate_err:.3g} is consistent with zero")
    return RelaxationFit(float(rate), rate_err, float(amp), float(offset), float(errs[2]),
                         res.chi2, res.dof)


def temperature_relaxation(ensemble, t_min=0.0):
    """Per-axis relaxation rates of ``<p_i^2>`` (omega_r).

    Records before ``t_min`` (1/omega_r) are skipped.
    """
    ok = ensemble.ok
    if ok.sum() < MIN_ATOMS:
        raise InsufficientData(f"need >= {MIN_ATOMS} atoms")
    sel = ensemble.times >= t_min
    t = ensemble.times[sel]
    fits = []
    for p in (ensemble.px, ensemble.pz):
        p2 = p[sel][:, ok] ** 2
        y = p2.mean(axis=1)
        err = p2.std(axis=1, ddof=1) / math.sqrt(p2.shape[1])
        fits.append(fit_relaxation(t, y, err))
    fx, fz = fits
    return TemperatureRelaxation(
        gamma_tx=fx.rate, gamma_tz=fz.rate,
        gamma_tx_err=fx.rate_err, gamma_tz_err=fz.rate_err,
        kt_x=2.0 * fx.offset, kt_z=2.0 * fz.offset,
        kt_x_err=2.0 * fx.offset_err, kt_z_err=2.0 * fz.offset_err,
        fit_x=fx, fit_z=fz,
    )


def quench_relaxation(params, state, dt, t_total, axis, factor=3.0, seed=0, record_stride=10):
    """Relaxation of one momentum axis after heating it from steady state.

    ``state`` is a steady-state snapshot ``(x, z, px, pz, m)``.  The chosen
    axis (``"x"`` or ``"z"``) has its momenta scaled so that its kinetic
    temperature is ``factor`` times the snapshot value; the other axis is
    left in equilibrium.  The ensemble is then evolved for ``t_total``
    (1/omega_r) and ``<p_axis^2>`` is fitted as in
    :func:`fit_relaxation`.  Returns a :class:`RelaxationFit` (rate in
    omega_r).
    """
    if axis not in ("x", "z"):
        raise ValueError(f"axis must be 'x' or 'z', got {axis!r}")
    x, z, px, pz, m = (np.array(a, dtype=float) for a in state)
    k = 2 if axis == "x" else 3
    if axis == "x":
        px = px * math.sqrt(factor)
    else:
        pz = pz * math.sqrt(factor)
    streams = atom_streams(seed, range(x.size), (TAG_QUENCH, k - 2))
    integ = Integrator(params, dt, x, z, px, pz, m, streams)
    n_steps = max(record_stride, int(round(t_total / dt)))
    rec = integ.advance(n_steps, record_every=record_stride)["records"]
    ok = integ.failed < 0
    if ok.sum() < MIN_ATOMS:
        raise InsufficientData(f"need >= {MIN_ATOMS} atoms")
    p2 = rec[k][ok] ** 2
    p0 = (px if axis == "x" else pz)[ok] ** 2
    t = dt * record_stride * np.arange(0, p2.shape[1] + 1)
    y = np.concatenate([[p0.mean()], p2.mean(axis=0)])
    err = np.concatenate([[p0.std(ddof=1)], p2.std(axis=0, ddof=1)]) / math.sqrt(p2.shape[0])
    return fit_relaxation(t, y, err)


def gamma_d_general(d, dk):
    """Density-grating decay rate ``sum_i D_i dk_i^2`` in omega_r.

    ``d`` in hbar/M and ``dk`` in units of k, any matching length.  The
    product is in hbar k^2 / M, i.e. twice omega_r.
    """
    d = np.asarray(d, dtype=float)
    dk = np.asarray(dk, dtype=float)
    if d.shape != dk.shape:
        raise ValueError("d and dk must have the same number of components")
    if np.any(d < 0):
        raise ValueError("diffusion coefficients must be >= 0")
    return float(np.sum(d * dk * dk)) / OMEGA_R


def gamma_d_lattice(result, params):
    """Decay rate of the probe-written grating, wavevector (k sin t, k (1 - cos t))."""
    if isinstance(result, DiffusionResult):
        d = (result.d_x, result.d_z)
    else:
        d = tuple(result)
    return gamma_d_general(d, grating_wavevector(params))


def pde_relaxation_oracle(d, dk, points_per_period=32, t_end=None, dt=None, max_steps=2_000_000):
    """Decay rate (omega_r) of a density grating evolved under Fick's law.

    Evolves ``n = 1 + eps cos(dk . r)`` with an explicit FTCS scheme on a
    periodic box spanning exactly one grating period along every axis
    with a nonzero wavevector component, and reads the decay rate off the
    Fourier amplitude of the grating mode.  Without ``t_end`` the run stops
    once the amplitude has fallen by 1/e.

    Raises
    ------
    StabilityViolation
        If ``dt`` (in M/(hbar k^2)) exceeds the explicit stability bound.
    """
    d = np.asarray(d, dtype=float)
    dk = np.asarray(dk, dtype=float)
    if d.shape != dk.shape:
        raise ValueError("d and dk must have the same number of components")
    if points_per_period < 16:
        raise ValueError("need >= 16 grid points per grating period")
    axes = [i for i in range(dk.size) if dk[i] != 0]
    if not axes:
        return 0.0
    n = int(points_per_period)
    h = np.array([2 * math.pi / abs(dk[i]) / n for i in axes])
    dd = d[axes]
    coef = float(np.sum(2.0 * dd / h**2))
    bound = 1.0 / coef if coef > 0 else math.inf
    if dt is None:
        dt = 0.1 * bound if coef > 0 else 1.0
    elif dt > bound:
        raise StabilityViolation(f"dt={dt:g} exceeds the explicit bound {bound:g}")

    grids = np.meshgrid(*[np.arange(n) * h_i for h_i in h], indexing="ij")
    phase = sum(dk[i] * g for i, g in zip(axes, grids))
    eps = 0.1
    field = 1.0 + eps * np.cos(phase)
    mode = np.exp(-1j * phase)

    def amplitude(f):
        return abs(np.sum(f * mode)) / f.size

    a0 = amplitude(field)
    t = 0.0
    steps = 0
    stop = (lambda: t >= t_end - 1e-12) if t_end is not None else (lambda: amplitude(field) <= a0 / math.e)
    if coef == 0 and t_end is None:
        max_steps = 100
    while not stop() and steps < max_steps:
        lap = np.zeros_like(field)
        for ax, (i, h_i) in enumerate(zip(axes, h)):
            lap += d[i] * (np.roll(field, 1, ax) - 2 * field + np.roll(field, -1, ax)) / h_i**2
        field = field + dt * lap
        t += dt
        steps += 1
    a1 = amplitude(field)
    rate = -math.log(a1 / a0) / t if t > 0 else 0.0
    return max(rate, 0.0) / OMEGA_R


class DiffusionEstimator(BaseEstimator):
    """Fit spatial diffusion coefficients to an ensemble or MSD series.

    Parameters
    ----------
    window : tuple, optional
        Fit window in M/(hbar k^2); default is the second half of the run.

    Attributes
    ----------
    msd_ : MsdSeries
    result_ : DiffusionResult
    d_x_, d_z_ : float
        Diffusion coefficients in hbar/M.
    """

    def __init__(self, window=None):
        self.window = window

    def fit(self, X, y=None):
        self.msd_ = msd_series(X) if isinstance(X, Ensemble) else X
        self.result_ = fit_diffusion(self.msd_, self.window)
        self.d_x_ = self.result_.d_x
        self.d_z_ = self.result_.d_z
        return self

    def transform(self, X):
        """MSD series of ``X``."""
        return msd_series(X) if isinstance(X, Ensemble) else X

    def gamma_d(self, params):
        check_is_fitted(self, "result_")
        return gamma_d_lattice(self.result_, params)


class TemperatureRelaxationEstimator(BaseEstimator):
    """Fit exponential relaxation of the kinetic temperature per axis."""

    def __init__(self, t_min=0.0):
        self.t_min = t_min

    def fit(self, X, y=None):
        self.result_ = temperature_relaxation(X, t_min=self.t_min)
        self.gamma_tx_ = self.result_.gamma_tx
        self.gamma_tz_ = self.result_.gamma_tz
        return self
