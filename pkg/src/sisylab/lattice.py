"""Closed-form physics of the 2D (xOz) lin-perp-lin lattice.

Units here are recoil units: positions in 1/k, energies in hbar*omega_r,
rates and frequencies in omega_r, times in 1/omega_r, forces in
hbar*k*omega_r.  The integrator converts to its internal hbar = k = M = 1
system (where omega_r = 1/2) at its own boundary.

Field conventions
-----------------
The four-beam field at y = 0 splits into sigma+ and sigma- components with
dimensionless intensities::

    s_pm(x, z) = [1 + cos^2(Kx) +- 2 cos(Kx) sin(2 K_+ z)] / 2

with K = k sin(theta) and K_+ = k cos(theta).  For a J_g = 1/2 -> J_e = 3/2
transition the ground sublevel m = +-1/2 couples to sigma+- light with
Clebsch-Gordan weight 1 and to sigma-+ light with weight 1/3, giving::

    U_pm = (2 Delta0' / 3) * (3 s_pm + s_mp) / 2
         = (2 Delta0' / 3) * [1 + cos^2(Kx) +- cos(Kx) sin(2 K_+ z)]

The absolute normalisation of Delta0' relative to the well depth is a
convention: the deepest point of U_+ sits at 2 Delta0'.
"""

from dataclasses import dataclass
import math
import warnings

import numpy as np

from .exceptions import ProbeAmplitudeWarning

__all__ = [
    "LatticeParams",
    "SublevelField",
    "sigma_intensities",
    "sublevel_potentials",
    "pumping_rates",
    "probe_modulation",
    "probe_force",
    "grating_wavevector",
    "harmonic_frequencies",
    "well_depth",
]

#: Branching weight of an optical-pumping cycle for J_g = 1/2 -> J_e = 3/2.
PUMPING_WEIGHT = 2.0 / 9.0


@dataclass(frozen=True)
class LatticeParams:
    """Physical and geometric knobs of the lattice, in recoil units.

    Parameters
    ----------
    delta0p : float
        Light shift per beam (omega_r).  Negative for red detuning.
    gamma0p : float
        Optical pumping rate per beam (omega_r).  Zero gives the
        conservative limit.
    theta : float
        Lattice half-angle in radians, ``0 < theta < pi/2``.
    recoil_kick_count : int
        Photon-recoil kicks of one hbar*k per scattering event.
    extra_scatter_scale : float
        Multiplier for the rate of scattering events that leave the
        sublevel unchanged.
    """

    delta0p: float = -50.0
    gamma0p: float = 4.0
    theta: float = math.pi / 6
    recoil_kick_count: int = 2
    extra_scatter_scale: float = 1.0

    def __post_init__(self):
        if not (0.0 < self.theta < math.pi / 2):
            raise ValueError(f"theta must lie in (0, pi/2), got {self.theta!r}")
        if not self.gamma0p >= 0.0:
            raise ValueError(f"gamma0p must be >= 0, got {self.gamma0p!r}")
        if self.delta0p == 0 or not math.isfinite(self.delta0p):
            raise ValueError(f"delta0p must be finite and nonzero, got {self.delta0p!r}")
        if int(self.recoil_kick_count) != self.recoil_kick_count or self.recoil_kick_count < 0:
            raise ValueError("recoil_kick_count must be a non-negative integer")
        if self.extra_scatter_scale < 0:
            raise ValueError("extra_scatter_scale must be >= 0")
        object.__setattr__(self, "recoil_kick_count", int(self.recoil_kick_count))

    @property
    def K(self):
        return math.sin(self.theta)

    @property
    def K_plus(self):
        return math.cos(self.theta)

    @property
    def cell(self):
        """Unit-cell lengths ``(2 pi / K, pi / K_+)`` along x and z."""
        return 2 * math.pi / self.K, math.pi / self.K_plus


@dataclass(frozen=True)
class SublevelField:
    s_plus: np.ndarray
    s_minus: np.ndarray
    u_plus: np.ndarray
    u_minus: np.ndarray
    f_plus: tuple
    f_minus: tuple


def sigma_intensities(x, z, params):
    """Local sigma+ and sigma- intensities, each in [0, 2]."""
    c = np.cos(params.K * np.asarray(x, dtype=float))
    s2 = np.sin(2 * params.K_plus * np.asarray(z, dtype=float))
    base = 0.5 * (1.0 + c * c)
    cross = c * s2
    return base + cross, base - cross


def sublevel_potentials(x, z, params):
    """Light-shift potentials of m = +-1/2 and their forces."""
    x = np.asarray(x, dtype=float)
    z = np.asarray(z, dtype=float)
    K, Kp = params.K, params.K_plus
    c, sx = np.cos(K * x), np.sin(K * x)
    s2, c2 = np.sin(2 * Kp * z), np.cos(2 * Kp * z)
    amp = 2.0 * params.delta0p / 3.0

    base = 0.5 * (1.0 + c * c)
    s_plus, s_minus = base + c * s2, base - c * s2
    u_plus = amp * (1.0 + c * c + c * s2)
    u_minus = amp * (1.0 + c * c - c * s2)

    # F = -grad U
    fx_plus = amp * K * sx * (2 * c + s2)
    fx_minus = amp * K * sx * (2 * c - s2)
    fz_plus = -amp * 2 * Kp * c * c2
    fz_minus = amp * 2 * Kp * c * c2
    return SublevelField(
        s_plus, s_minus, u_plus, u_minus, (fx_plus, fz_plus), (fx_minus, fz_minus)
    )


def pumping_rates(x, z, params):
    """Optical-pumping rates ``(gamma_{+->-}, gamma_{-->+})`` in omega_r."""
    s_plus, s_minus = sigma_intensities(x, z, params)
    g = PUMPING_WEIGHT * params.gamma0p
    return g * s_minus, g * s_plus


def grating_wavevector(params):
    """Probe/lattice interference wavevector ``(K, k - K_+)`` in units of k."""
    return params.K, 1.0 - params.K_plus


def probe_modulation(x, z, t, delta, epsilon, params):
    """Potential perturbation from the probe interference pattern.

    Returns ``eps * |Delta0'| * cos(Kx) * cos((K_+ - k) z + delta t)`` in
    hbar*omega_r.  The same perturbation is applied to both sublevels.
    """
    if abs(epsilon) > 0.2:
        warnings.warn(
            f"probe amplitude {epsilon} is outside the linear-response range",
            ProbeAmplitudeWarning,
            stacklevel=2,
        )
    x = np.asarray(x, dtype=float)
    z = np.asarray(z, dtype=float)
    phase = (params.K_plus - 1.0) * z + delta * np.asarray(t, dtype=float)
    return epsilon * abs(params.delta0p) * np.cos(params.K * x) * np.cos(phase)


def probe_force(x, z, t, delta, epsilon, params):
    """Force ``-grad`` of :func:`probe_modulation`."""
    x = np.asarray(x, dtype=float)
    z = np.asarray(z, dtype=float)
    q = params.K_plus - 1.0
    phase = q * z + delta * np.asarray(t, dtype=float)
    a = epsilon * abs(params.delta0p)
    fx = a * params.K * np.sin(params.K * x) * np.cos(phase)
    fz = a * q * np.cos(params.K * x) * np.sin(phase)
    return fx, fz


def well_depth(params):
    """Depth of the sublevel well, from its bottom to the lowest saddle.

    The bottom of U_+ is 2*Delta0' at a pure sigma+ site; the lowest
    escape route crosses sin(2 K_+ z) = 0 where U = 4*Delta0'/3.
    """
    return 2.0 * abs(params.delta0p) / 3.0


def harmonic_frequencies(params):
    """Small-oscillation frequencies ``(omega_x, omega_z)`` in omega_r.

    Expanding U_+ about its minimum gives
    ``U ~ 2 Delta0' + |Delta0'| K^2 x^2 + (4/3) |Delta0'| K_+^2 z^2`` and
    H = p^2 + U in recoil units, so omega_i = 2 sqrt(stiffness_i).
    """
    d = abs(params.delta0p)
    return 2.0 * params.K * math.sqrt(d), 2.0 * params.K_plus * math.sqrt(4.0 * d / 3.0)
