"""Pump-probe gain spectra from driven ensembles.

The probe writes the moving intensity grating
``eps |Delta0'| cos(Kx) cos((K_+ - k) z + delta t)`` onto both sublevel
potentials.  The material response is read from the drive-conjugate
Fourier amplitude of the density,

    O(t) = <cos(K x) exp(-i (K_+ - k) z)>,

which oscillates as ``chi(delta) exp(i delta t)`` in linear response.  A
lock-in over whole drive periods gives ``A = (2/T) int O(t) exp(-i delta t)
dt``; the gain is the quadrature part ``-Im A / eps`` and the in-phase part
``Re A / eps`` is kept as the absorptive companion.  For one relaxing mode
with rate gamma the quadrature part is proportional to
``delta / (gamma^2 + delta^2)``.
"""

from dataclasses import dataclass, field, replace
import math
import warnings

import numba
import numpy as np

from .engine import OMEGA_R, Drive, Ensemble, Integrator, SimConfig, initial_states
from .exceptions import LinearityWarning, NotConverged, SisylabError
from .lattice import LatticeParams, grating_wavevector
from .rng import TAG_SPECTRUM, TAG_TOY, atom_streams

__all__ = [
    "ProbeSpec",
    "ProbeResult",
    "Spectrum",
    "grating_observable",
    "lockin",
    "probe_gain",
    "spectrum_scan",
    "thermalized_snapshot",
    "BrownianGratingToy",
]

MIN_SAMPLES_PER_PERIOD = 32
# allowed relative change of <p^2> between the end of settling and the
# measurement window
STEADY_TOL = 0.2


@dataclass(frozen=True)
class ProbeSpec:
    """Probe settings.

    ``epsilon`` is the drive amplitude relative to ``|Delta0'|``; ``delta``
    the probe-pump detuning in omega_r.  ``settle_time`` and
    ``measure_time`` (1/omega_r) default to ``20/Gamma0'`` and
    ``max(10 drive periods, 50/Gamma0')``.  The measurement window is
    split into at least ``n_blocks`` blocks of whole drive periods; the
    gain error comes from the block-to-block scatter.

    With ``antithetic`` every point is run twice from the same state with
    the same random streams, once at ``+epsilon`` and once at
    ``-epsilon``, and the two amplitudes are differenced.  Thermal density
    fluctuations common to both runs cancel, which removes the static
    offset that otherwise dominates near ``delta = 0``.
    """

    epsilon: float = 0.1
    delta: float = 0.0
    settle_time: float = None
    measure_time: float = None
    n_blocks: int = 8
    antithetic: bool = False

    def __post_init__(self):
        if not 0 < self.epsilon <= 0.2:
            raise ValueError(f"epsilon must lie in (0, 0.2], got {self.epsilon}")
        if self.n_blocks < 2:
            raise ValueError("need at least two lock-in blocks")

    def resolve(self, rate):
        """Return ``(settle, block_len, n_blocks)`` for a relaxation scale ``rate``."""
        settle = self.settle_time if self.settle_time is not None else 20.0 / rate
        base = 50.0 / rate
        if self.delta == 0:
            measure = self.measure_time if self.measure_time is not None else base
            return settle, measure / self.n_blocks, self.n_blocks
        period = 2 * math.pi / abs(self.delta)
        measure = self.measure_time if self.measure_time is not None else max(10 * period, base)
        n_periods = max(self.n_blocks, math.ceil(measure / period - 1e-9))
        per_block = max(1, n_periods // self.n_blocks)
        n_blocks = math.ceil(n_periods / per_block)
        return settle, per_block * period, n_blocks


@dataclass
class ProbeResult:
    delta: float
    gain: float
    gain_err: float
    absorptive: float
    absorptive_err: float
    amplitude: complex
    n_atoms: int
    settle: float
    measure: float
    dt: float


@dataclass
class Spectrum:
    """Probe-gain spectrum with per-point error bars and provenance.

    Failed points keep their detuning, carry NaN gain and ``ok = False``.
    """

    delta: np.ndarray
    gain: np.ndarray
    gain_err: np.ndarray
    absorptive: np.ndarray = None
    n_atoms: np.ndarray = None
    settle: np.ndarray = None
    measure: np.ndarray = None
    ok: np.ndarray = None
    errors: dict = field(default_factory=dict)
    params: LatticeParams = None
    probe: ProbeSpec = None

    def __post_init__(self):
        self.delta = np.asarray(self.delta, dtype=float)
        n = self.delta.size
        if n > 1 and np.any(np.diff(self.delta) <= 0):
            raise ValueError("spectrum detunings must be strictly increasing")
        self.gain = np.asarray(self.gain, dtype=float)
        self.gain_err = np.asarray(self.gain_err, dtype=float)
        for name in ("absorptive", "settle", "measure"):
            v = getattr(self, name)
            setattr(self, name, np.full(n, np.nan) if v is None else np.asarray(v, dtype=float))
        if self.n_atoms is None:
            self.n_atoms = np.zeros(n, dtype=np.int64)
        self.n_atoms = np.asarray(self.n_atoms, dtype=np.int64)
        self.ok = np.isfinite(self.gain) if self.ok is None else np.asarray(self.ok, dtype=bool)

    def __len__(self):
        return self.delta.size

    def valid(self):
        """Copy restricted to the points that succeeded."""
        k = self.ok
        return Spectrum(self.delta[k], self.gain[k], self.gain_err[k], self.absorptive[k],
                        self.n_atoms[k], self.settle[k], self.measure[k], self.ok[k],
                        {}, self.params, self.probe)

    @classmethod
    def from_results(cls, results, params=None, probe=None):
        results = sorted(results, key=lambda r: r.delta)
        return cls(
            delta=[r.delta for r in results],
            gain=[r.gain for r in results],
            gain_err=[r.gain_err for r in results],
            absorptive=[r.absorptive for r in results],
            n_atoms=np.array([r.n_atoms for r in results], dtype=np.int64),
            settle=[r.settle for r in results],
            measure=[r.measure for r in results],
            params=params,
            probe=probe,
        )


def grating_observable(x, z, params):
    """``(1/N) sum cos(K x_i) exp(-i (K_+ - k) z_i)`` over a snapshot."""
    x = np.asarray(x, dtype=float)
    z = np.asarray(z, dtype=float)
    if x.size == 0:
        raise ValueError("empty snapshot")
    K, q = params.K, params.K_plus - 1.0
    return complex(np.mean(np.cos(K * x) * np.exp(-1j * q * z)))


def lockin(t, signal, delta, n_blocks=1):
    """Complex lock-in amplitude ``(2/T) int s(t) exp(-i delta t) dt``.

    ``t`` must be uniformly spaced samples covering whole drive periods
    (rectangle rule, exact for band-limited periodic signals).  Returns the
    amplitude over the full record and the per-block amplitudes.
    """
    t = np.asarray(t, dtype=float)
    s = np.asarray(signal)
    if t.size % n_blocks:
        raise ValueError("record length must be a multiple of n_blocks")
    prod = s * np.exp(-1j * delta * t)
    blocks = 2.0 * prod.reshape(n_blocks, -1).mean(axis=1)
    return complex(2.0 * prod.mean()), blocks


def _steps(duration, dt_max):
    n = max(1, math.ceil(duration / dt_max - 1e-9))
    return n, duration / n


def _measure(integ, probe, settle, block_len, n_blocks, dt_max, delta):
    """Settle, check the steady state, then record the grating amplitude."""
    n_block, dt = _steps(block_len, dt_max)
    n_settle = math.ceil(settle / dt - 1e-9)
    integ.dt = dt
    n_atoms = integ.x.size
    quarter = max(1, n_settle // 4)
    head = integ.advance(n_settle - quarter)
    tail = integ.advance(quarter, record_every=max(1, quarter // 8))
    p2_settle = _mean_p2(tail["records"])
    t_start = integ.time
    n_total = n_block * n_blocks
    out = integ.advance(n_total, grating=True, record_every=max(1, n_total // 32))
    p2_measure = _mean_p2(out["records"])
    if np.isfinite(p2_settle) and abs(p2_settle - p2_measure) > STEADY_TOL * p2_measure:
        raise NotConverged(
            f"<p^2> moved from {p2_settle:.4g} to {p2_measure:.4g} after settling"
        )
    n_ok = int((integ.failed < 0).sum())
    t = t_start + dt * np.arange(1, n_total + 1)
    signal = out["grating_sum"] / n_ok
    return lockin(t, signal, delta, n_blocks), dt, n_ok


def _mean_p2(records):
    px, pz = records[2], records[3]
    if px.size == 0:
        return math.nan
    return float(np.nanmean(px**2 + pz**2))


def probe_gain(params, probe, config, initial=None, point_key=0, check_linearity=False,
               system=None):
    """Measure the probe gain at one detuning.

    Parameters
    ----------
    params : LatticeParams
    probe : ProbeSpec
    config : SimConfig
        Supplies dt (upper bound), the seed and, without ``initial``, the
        atom count and initial distribution.
    initial : Ensemble or tuple of arrays, optional
        Starting states (the last snapshot of an ensemble).  Defaults to
        fresh draws from ``config.init``.
    point_key : int
        Distinguishes the random streams of different spectrum points.
    system : object, optional
        Alternative driven dynamics (see :class:`BrownianGratingToy`).

    Returns
    -------
    ProbeResult
    """
    result = _probe_gain(params, probe, config, initial, point_key, system)
    if check_linearity:
        doubled = _probe_gain(params, replace(probe, epsilon=2 * probe.epsilon), config,
                              initial, point_key, system)
        scale = max(abs(result.gain), 3 * result.gain_err)
        if abs(doubled.gain - result.gain) > 0.1 * scale:
            warnings.warn(
                f"gain/eps changed from {result.gain:.4g} to {doubled.gain:.4g} when doubling eps",
                LinearityWarning,
                stacklevel=2,
            )
    return result


def _probe_gain(params, probe, config, initial, point_key, system):
    signs = (1.0, -1.0) if probe.antithetic else (1.0,)
    runs = []
    for sign in signs:
        drive = Drive(sign * probe.epsilon, probe.delta)
        if system is None:
            rate = params.gamma0p
            state = _initial_arrays(params, config, initial, point_key)
            streams = atom_streams(config.seed, np.arange(state[0].size),
                                   (TAG_SPECTRUM, point_key))
            integ = Integrator(params, config.dt, *state, streams, drive=drive)
            dt_max = config.dt
        else:
            rate = system.rate
            integ = system.integrator(drive, (TAG_TOY, point_key))
            dt_max = system.dt
        settle, block_len, n_blocks = probe.resolve(rate)
        if probe.delta != 0:
            dt_max = min(dt_max, 2 * math.pi / abs(probe.delta) / MIN_SAMPLES_PER_PERIOD)
        (amp, blocks), dt, n_ok = _measure(integ, probe, settle, block_len, n_blocks,
                                           dt_max, probe.delta)
        runs.append((sign * amp, sign * blocks, n_ok))
    amp = sum(r[0] for r in runs) / len(runs)
    blocks = sum(r[1] for r in runs) / len(runs)
    n_ok = min(r[2] for r in runs)
    eps = probe.epsilon
    gain_b = -blocks.imag / eps
    absb = blocks.real / eps
    nb = blocks.size
    return ProbeResult(
        delta=float(probe.delta),
        gain=float(-amp.imag / eps),
        gain_err=float(gain_b.std(ddof=1) / math.sqrt(nb)),
        absorptive=float(amp.real / eps),
        absorptive_err=float(absb.std(ddof=1) / math.sqrt(nb)),
        amplitude=amp,
        n_atoms=n_ok,
        settle=float(settle),
        measure=float(block_len * n_blocks),
        dt=float(dt),
    )


def _initial_arrays(params, config, initial, point_key):
    if initial is None:
        state, _ = initial_states(params, config, np.arange(config.n_atoms),
                                  (TAG_SPECTRUM, point_key, 0))
        return state
    if isinstance(initial, Ensemble):
        ok = initial.ok
        return tuple(getattr(initial, a)[-1, ok].copy() for a in ("x", "z", "px", "pz", "m"))
    return tuple(np.array(a, dtype=float) for a in initial)


def thermalized_snapshot(ensemble, kt_x, kt_z):
    """Last snapshot of ``ensemble`` with momenta rescaled to given temperatures.

    Positions and sublevels are kept; each momentum axis is scaled so that
    its mean square matches ``kT/2`` (kT in hbar*omega_r).  Used to start
    spectrum runs at the fitted asymptotic temperatures when the slow axis
    has not finished relaxing.
    """
    x, z, px, pz, m = _initial_arrays(None, None, ensemble, 0)
    out = []
    for p, kt in ((px, kt_x), (pz, kt_z)):
        if not kt > 0:
            raise ValueError(f"temperatures must be positive, got {kt}")
        out.append(p * math.sqrt(0.5 * kt / np.mean(p * p)))
    return x, z, out[0], out[1], m


def spectrum_scan(params, delta_grid, probe, config, initial=None, check_linearity=False,
                  system=None, progress=None):
    """Probe gain on every detuning of ``delta_grid`` (strictly increasing).

    Every point runs an independent driven simulation with streams keyed by
    its grid index.  Points that fail are kept with NaN gain and the
    error text in ``Spectrum.errors``.
    """
    grid = np.asarray(delta_grid, dtype=float).reshape(-1)
    if grid.size > 1 and np.any(np.diff(grid) <= 0):
        raise ValueError("delta grid must be strictly increasing")
    rows, errors = [], {}
    for k, d in enumerate(grid):
        spec = replace(probe, delta=float(d))
        try:
            r = probe_gain(params, spec, config, initial=initial, point_key=k,
                           check_linearity=check_linearity, system=system)
        except SisylabError as exc:
            errors[float(d)] = f"{type(exc).__name__}: {exc}"
            r = ProbeResult(float(d), math.nan, math.nan, math.nan, math.nan, complex(math.nan),
                            0, math.nan, math.nan, math.nan)
        rows.append(r)
        if progress is not None:
            progress(k, r)
    spec = Spectrum.from_results(rows, params=params, probe=probe)
    spec.errors = errors
    spec.ok = np.isfinite(spec.gain)
    return spec


class _ToyIntegrator:
    def __init__(self, toy, drive, rng):
        self.toy = toy
        self.drive = drive
        self.rng = rng
        self.dt = toy.dt
        n = toy.n_particles
        lx = 2 * math.pi / toy.params.K
        lz = 2 * math.pi / abs(toy.params.K_plus - 1.0)
        self.x = rng.uniform(0, lx, n)
        self.z = rng.uniform(0, lz, n)
        self.failed = np.full(n, -1)
        self.step_index = 0
        self._t = 0.0

    @property
    def time(self):
        return self._t

    def advance(self, n_steps, record_every=0, grating=False):
        toy, p = self.toy, self.toy.params
        dti = self.dt / OMEGA_R
        xi = self.rng.standard_normal((n_steps, 2, self.x.size))
        g = np.zeros(n_steps, dtype=complex)
        _toy_advance(self.x, self.z, xi, p.K, p.K_plus - 1.0, toy.diffusion / toy.kt,
                     math.sqrt(2.0 * toy.diffusion * dti), self.drive.epsilon * toy.kt,
                     self.drive.delta * OMEGA_R, self._t / OMEGA_R, dti, g)
        self._t += n_steps * self.dt
        self.step_index += n_steps
        n_rec = n_steps // record_every if record_every else 0
        out = {"records": [np.zeros((self.x.size, n_rec)) for _ in range(5)]}
        if grating:
            out["grating_sum"] = g
        return out


@numba.njit(cache=True)
def _toy_advance(x, z, xi, K, q, mu, noise, a, w, t0, dt, g):
    # overdamped Langevin, internal units: dr = -mu grad U dt + sqrt(2 D dt) xi
    for j in range(xi.shape[0]):
        t = t0 + j * dt
        re = 0.0
        im = 0.0
        for i in range(x.shape[0]):
            ph = q * z[i] + w * t
            cx = math.cos(K * x[i])
            fx = a * K * math.sin(K * x[i]) * math.cos(ph)
            fz = a * q * cx * math.sin(ph)
            x[i] += mu * fx * dt + noise * xi[j, 0, i]
            z[i] += mu * fz * dt + noise * xi[j, 1, i]
            c = math.cos(K * x[i])
            re += c * math.cos(q * z[i])
            im -= c * math.sin(q * z[i])
        g[j] = complex(re, im)


@dataclass
class BrownianGratingToy:
    """Free overdamped Brownian particles driven by the probe grating.

    The drive-conjugate density mode of wavevector ``(K, K_+ - k)`` decays
    by Fick's law at ``rate = D (K^2 + (K_+ - k)^2)`` (returned in
    omega_r), which makes its gain spectrum a dispersive line of exactly
    that half width.  The drive amplitude is ``epsilon * kt`` so that the
    response stays linear.  ``diffusion`` is in hbar/M, ``kt`` in internal
    energy units (hbar^2 k^2 / M), ``dt`` in 1/omega_r.
    """

    params: LatticeParams
    diffusion: float = 1.0
    kt: float = 1.0
    n_particles: int = 20000
    dt: float = None
    seed: int = 0

    def __post_init__(self):
        if self.dt is None:
            self.dt = 0.05 / self.rate

    @property
    def rate(self):
        K, q = grating_wavevector(self.params)
        return self.diffusion * (K * K + q * q) / OMEGA_R

    def integrator(self, drive, key):
        rng = atom_streams(self.seed, [0], key)[0]
        return _ToyIntegrator(self, drive, rng)
