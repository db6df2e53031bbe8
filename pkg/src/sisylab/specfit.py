"""Weighted nonlinear least squares for probe spectra and relaxation curves.

The central Rayleigh line is fitted with::

    f(delta) = a1 + a2*delta + a3/(delta^2 + g^2) + a4*delta/(delta^2 + g^2)

The linear part absorbs the tails of the vibrational sidebands, the
Lorentzian carries any absorptive component and the dispersive term gives
the half peak-to-peak width g (its extrema sit at delta = +-g).  Widths and
rates are kept positive by fitting their square root.
"""

from dataclasses import dataclass, field

import numpy as np
from scipy.optimize import least_squares
from sklearn.base import BaseEstimator, RegressorMixin
from sklearn.utils.validation import check_is_fitted

from ._validation import check_series
from .exceptions import DegenerateFit, NoConvergence

__all__ = [
    "FitResult",
    "WingResult",
    "LeastSquaresResult",
    "least_squares_fit",
    "model_eq6",
    "model_eq6_jacobian",
    "dispersive",
    "fit_central",
    "fit_wings",
    "initial_guess",
    "window_sensitivity",
    "sensitivity_lines",
    "RayleighLineFit",
    "DispersiveWingFit",
]

MAX_ITER = 200
XTOL = 1e-8


@dataclass
class LeastSquaresResult:
    params: np.ndarray
    covariance: np.ndarray
    residual_norm: float
    chi2: float
    dof: int
    converged: bool
    n_iter: int

    @property
    def errors(self):
        return np.sqrt(np.clip(np.diag(self.covariance), 0, None))


def least_squares_fit(model, jacobian, x, y, sigma, p0, positive=(), max_iter=MAX_ITER,
                      xtol=XTOL):
    """Minimise ``sum(((model(x, *p) - y) / sigma)**2)``.

    Parameters listed in ``positive`` (indices) are fitted through their
    square root and therefore stay >= 0.  ``jacobian(x, *p)`` returns the
    ``(n, n_params)`` matrix of analytic partial derivatives.

    Returns a :class:`LeastSquaresResult` whose covariance is
    ``(J^T W J)^-1`` evaluated at the optimum, with W = 1/sigma^2.
    """
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    sigma = np.broadcast_to(np.asarray(sigma, dtype=float), y.shape)
    positive = list(positive)
    p0 = np.array(p0, dtype=float)

    def to_params(q):
        p = q.copy()
        p[positive] = q[positive] ** 2
        return p

    q0 = p0.copy()
    q0[positive] = np.sqrt(np.abs(p0[positive]))

    def residuals(q):
        return (model(x, *to_params(q)) - y) / sigma

    def jac(q):
        J = jacobian(x, *to_params(q)) / sigma[:, None]
        J[:, positive] *= 2.0 * q[positive]
        return J

    sol = least_squares(
        residuals, q0, jac=jac, method="lm", x_scale="jac",
        xtol=xtol, ftol=1e-14, gtol=1e-14, max_nfev=max_iter,
    )
    params = to_params(sol.x)
    J = jacobian(x, *params) / sigma[:, None]
    with np.errstate(all="ignore"):
        try:
            cov = np.linalg.inv(J.T @ J)
        except np.linalg.LinAlgError:
            cov = np.full((params.size, params.size), np.inf)
    cov = 0.5 * (cov + cov.T)
    r = residuals(sol.x)
    chi2 = float(r @ r)
    return LeastSquaresResult(
        params=params,
        covariance=cov,
        residual_norm=float(np.sqrt(chi2)),
        chi2=chi2,
        dof=int(y.size - params.size),
        converged=bool(sol.status > 0),
        n_iter=int(sol.nfev),
    )


def dispersive(delta, a, gamma):
    return a * delta / (delta**2 + gamma**2)


def model_eq6(delta, a1, a2, a3, a4, gamma):
    delta = np.asarray(delta, dtype=float)
    den = delta**2 + gamma**2
    return a1 + a2 * delta + a3 / den + a4 * delta / den


def model_eq6_jacobian(delta, a1, a2, a3, a4, gamma):
    """Partial derivatives of :func:`model_eq6` w.r.t. (a1, a2, a3, a4, gamma)."""
    delta = np.asarray(delta, dtype=float)
    den = delta**2 + gamma**2
    d_gamma = -2.0 * gamma * (a3 + a4 * delta) / den**2
    return np.column_stack([np.ones_like(delta), delta, 1.0 / den, delta / den, d_gamma])


def _wing_model(delta, a1, a4, gamma):
    return a1 + dispersive(delta, a4, gamma)


def _wing_jacobian(delta, a1, a4, gamma):
    den = delta**2 + gamma**2
    return np.column_stack([np.ones_like(delta), delta / den, -2.0 * gamma * a4 * delta / den**2])


@dataclass
class FitResult:
    """Fitted line-shape coefficients with 1-sigma covariance."""

    a1: float
    a2: float
    a3: float
    a4: float
    gamma_r: float
    covariance: np.ndarray
    residual_norm: float
    chi2: float
    dof: int
    converged: bool
    n_iter: int
    delta_max: float
    n_points: int
    initial: tuple = field(default=())

    @property
    def params(self):
        return np.array([self.a1, self.a2, self.a3, self.a4, self.gamma_r])

    @property
    def errors(self):
        return np.sqrt(np.clip(np.diag(self.covariance), 0, None))

    @property
    def gamma_r_err(self):
        return float(self.errors[4])

    def predict(self, delta):
        return model_eq6(delta, *self.params)

    def report(self):
        """Key/value lines of the fit report."""
        e = self.errors
        rows = [
            ("model", "a1 + a2*d + a3/(d^2+g^2) + a4*d/(d^2+g^2)"),
            ("converged", str(self.converged).lower()),
            ("iterations", self.n_iter),
            ("n_points", self.n_points),
            ("delta_max", repr(self.delta_max)),
        ]
        for name, v, err in zip(("a1", "a2", "a3", "a4", "gamma_r"), self.params, e):
            rows.append((name, repr(float(v))))
            rows.append((name + "_err", repr(float(err))))
        rows += [
            ("chi2", repr(self.chi2)),
            ("dof", self.dof),
            ("residual_norm", repr(self.residual_norm)),
        ]
        return "\n".join(f"{k}: {v}" for k, v in rows) + "\n"


@dataclass
class WingResult:
    gamma_b: float
    gamma_b_err: float
    a1: float
    a4: float
    covariance: np.ndarray
    chi2: float
    dof: int
    converged: bool
    n_iter: int
    delta_cut: float
    n_points: int

    def predict(self, delta):
        return _wing_model(np.asarray(delta, dtype=float), self.a1, self.a4, self.gamma_b)


def _unpack(spectrum, gain=None, gain_err=None):
    if gain is None:
        delta, gain, gain_err = spectrum.delta, spectrum.gain, spectrum.gain_err
    else:
        delta = spectrum
    delta, gain, gain_err = check_series(delta, gain, gain_err)
    return delta, gain, gain_err


def initial_guess(delta, gain):
    """Starting point ``(a1, a2, a3, a4, gamma)`` for the central fit.

    gamma is half the distance between the locations of the gain minimum
    and maximum; a4 reproduces the peak-to-peak amplitude; a1, a2 come from
    a straight line through the outer 20% of the points; a3 = 0.
    """
    i_min, i_max = int(np.argmin(gain)), int(np.argmax(gain))
    gamma0 = 0.5 * abs(delta[i_max] - delta[i_min])
    if gamma0 == 0:
        gamma0 = float(np.ptp(delta)) / 10 or 1.0
    sign = 1.0 if delta[i_max] > delta[i_min] else -1.0
    # dispersive peak-to-peak is a4 / gamma
    a4 = sign * (gain[i_max] - gain[i_min]) * gamma0
    order = np.argsort(np.abs(delta))
    outer = order[int(np.floor(0.8 * delta.size)):]
    if outer.size >= 2 and np.ptp(delta[outer]) > 0:
        a2, a1 = np.polyfit(delta[outer], gain[outer], 1)
    else:
        a1, a2 = float(np.mean(gain)), 0.0
    return float(a1), float(a2), 0.0, float(a4), float(gamma0)


def fit_central(spectrum, gain=None, gain_err=None, delta_max=None, min_points=15):
    """Fit the central line shape and return a :class:`FitResult`.

    Accepts a :class:`~sisylab.spectroscopy.Spectrum` or three arrays
    ``(delta, gain, gain_err)``.  Points with ``|delta| > delta_max`` are
    dropped; by default ``delta_max`` is five times the initial width.

    Raises
    ------
    NoConvergence
        The solver reached its iteration limit with a well-determined width.
    DegenerateFit
        The width ran into the window boundary or is unidentifiable.
    """
    delta, gain, gain_err = _unpack(spectrum, gain, gain_err)
    if delta_max is None:
        delta_max = 5.0 * initial_guess(delta, gain)[4]
    sel = np.abs(delta) <= delta_max
    if sel.sum() < min_points:
        raise ValueError(f"need >= {min_points} points with |delta| <= {delta_max:g}, got {sel.sum()}")
    d, g, s = delta[sel], gain[sel], gain_err[sel]
    p0 = initial_guess(d, g)
    res = least_squares_fit(model_eq6, model_eq6_jacobian, d, g, s, p0, positive=[4])
    if not res.converged:
        # a solver wandering along a flat valley means the width is not in the data
        e_gamma = res.errors[4]
        if not np.isfinite(e_gamma) or e_gamma > res.params[4]:
            raise DegenerateFit(f"gamma_r={res.params[4]:.4g} is unidentifiable (sigma={e_gamma:.3g})")
        raise NoConvergence(f"central fit did not converge in {res.n_iter} evaluations")
    a1, a2, a3, a4, gamma = res.params
    out = FitResult(
        a1, a2, a3, a4, gamma, res.covariance, res.residual_norm, res.chi2, res.dof,
        res.converged, res.n_iter, float(delta_max), int(sel.sum()), initial=p0,
    )
    spacing = np.min(np.diff(np.unique(d))) if d.size > 1 else 0.0
    err = out.gamma_r_err
    if gamma >= delta_max or gamma < 0.5 * spacing:
        raise DegenerateFit(f"gamma_r={gamma:.4g} at the edge of the window [{0.5 * spacing:.3g}, {delta_max:.3g}]")
    if not np.isfinite(err) or err > gamma:
        raise DegenerateFit(f"gamma_r={gamma:.4g} is unidentifiable (sigma={err:.3g})")
    return out


def fit_wings(spectrum, gain=None, gain_err=None, delta_cut=None, gamma_r=None, min_points=6):
    """Fit ``a1 + a4*delta/(delta^2 + g_b^2)`` to points with ``|delta| > delta_cut``.

    ``delta_cut`` defaults to ten times ``gamma_r``.  Returns a
    :class:`WingResult`; raises :class:`DegenerateFit` when g_b falls inside
    the excluded region, beyond the data or is unidentifiable.
    """
    delta, gain, gain_err = _unpack(spectrum, gain, gain_err)
    if delta_cut is None:
        if gamma_r is None:
            raise ValueError("give delta_cut or gamma_r")
        delta_cut = 10.0 * gamma_r
    sel = np.abs(delta) > delta_cut
    d, g, s = delta[sel], gain[sel], gain_err[sel]
    if d.size < min_points or not (np.any(d > 0) and np.any(d < 0)):
        raise ValueError("need wing points on both sides of the central region")
    a1_0 = float(np.average(g, weights=1 / s**2)) if np.all(s > 0) else float(np.mean(g))
    odd = (g - a1_0) * np.sign(d)
    k = int(np.argmax(np.abs(odd)))
    gamma0 = float(abs(d[k]))
    a4_0 = float(odd[k]) * 2.0 * gamma0
    res = least_squares_fit(_wing_model, _wing_jacobian, d, g, s, (a1_0, a4_0, gamma0), positive=[2])
    if not res.converged:
        raise NoConvergence(f"wing fit did not converge in {res.n_iter} evaluations")
    a1, a4, gb = res.params
    err = float(res.errors[2])
    out = WingResult(gb, err, a1, a4, res.covariance, res.chi2, res.dof, res.converged,
                     res.n_iter, float(delta_cut), int(d.size))
    if gb <= delta_cut or gb >= np.max(np.abs(d)):
        raise DegenerateFit(f"wing width {gb:.4g} outside the wing range ({delta_cut:.3g}, {np.max(np.abs(d)):.3g})")
    if not np.isfinite(err) or err > gb:
        raise DegenerateFit(f"wing width {gb:.4g} is unidentifiable (sigma={err:.3g})")
    return out


def window_sensitivity(spectrum, delta_max, factors=(0.5, 2.0)):
    """gamma_R refitted with the window scaled by each factor.

    Returns ``{factor: gamma_r}``; a window that cannot be fitted maps to
    the error text instead.
    """
    out = {}
    for f in factors:
        try:
            out[f] = fit_central(spectrum, delta_max=f * delta_max).gamma_r
        except (DegenerateFit, NoConvergence, ValueError) as exc:
            out[f] = f"{type(exc).__name__}: {exc}"
    return out


def sensitivity_lines(sens):
    """``key: value`` report lines for :func:`window_sensitivity`."""
    return "".join(f"gamma_r_window_x{f:g}: {v!r}\n" if isinstance(v, float) else
                   f"gamma_r_window_x{f:g}: {v}\n" for f, v in sens.items())


class RayleighLineFit(RegressorMixin, BaseEstimator):
    """Estimator wrapper around :func:`fit_central`.

    Parameters
    ----------
    delta_max : float, optional
        Half-width of the fit window; defaults to five times the initial
        width estimate.

    Attributes
    ----------
    result_ : FitResult
    gamma_r_ : float
    coef_ : ndarray of shape (5,)
        ``(a1, a2, a3, a4, gamma_r)``.
    """

    def __init__(self, delta_max=None):
        self.delta_max = delta_max

    def fit(self, X, y, sample_weight=None):
        delta = np.asarray(X, dtype=float).reshape(-1)
        err = None if sample_weight is None else 1.0 / np.sqrt(np.asarray(sample_weight, float))
        self.result_ = fit_central(delta, y, err, delta_max=self.delta_max)
        self.coef_ = self.result_.params
        self.gamma_r_ = self.result_.gamma_r
        return self

    def predict(self, X):
        check_is_fitted(self, "result_")
        return self.result_.predict(np.asarray(X, dtype=float).reshape(-1))


class DispersiveWingFit(BaseEstimator):
    """Estimator wrapper around :func:`fit_wings`."""

    def __init__(self, delta_cut=None):
        self.delta_cut = delta_cut

    def fit(self, X, y, sample_weight=None):
        delta = np.asarray(X, dtype=float).reshape(-1)
        err = None if sample_weight is None else 1.0 / np.sqrt(np.asarray(sample_weight, float))
        self.result_ = fit_wings(delta, y, err, delta_cut=self.delta_cut)
        self.gamma_b_ = self.result_.gamma_b
        return self

    def predict(self, X):
        check_is_fitted(self, "result_")
        return self.result_.predict(X)
