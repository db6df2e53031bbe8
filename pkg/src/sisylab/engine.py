"""Semiclassical Monte Carlo integrator for the Sisyphus lattice.

Internally the integrator works with hbar = k = M = 1, so the recoil
frequency is ``OMEGA_R = 1/2`` and one internal time unit is M / (hbar k^2)
= 1 / (2 omega_r).  Everything a caller hands in (dt, t_total, rates,
detunings, temperatures) is in recoil units and converted here.

One step of an atom is

1. velocity-Verlet on U_m (plus the probe perturbation when driven),
2. a sublevel flip with probability ``1 - exp(-gamma_{m->-m} dt)``,
   followed by ``recoil_kick_count`` kicks of one hbar*k in uniformly random
   planar directions,
3. a sublevel-preserving scattering event with probability
   ``1 - exp(-extra * (2/9) Gamma0' s_m dt)`` carrying the same kicks.

Random numbers are drawn from per-atom Philox streams in fixed-size slots
per step, so every atom's trajectory is independent of batching and of the
number of threads.
"""

from dataclasses import dataclass, field, replace
import math
import os

import numba
import numpy as np

from .exceptions import EnsembleFailure, NumericalBlowup
from .lattice import LatticeParams, PUMPING_WEIGHT, harmonic_frequencies
from .rng import TAG_ENSEMBLE, atom_streams

__all__ = [
    "OMEGA_R",
    "BLOWUP_MOMENTUM",
    "InitSpec",
    "SimConfig",
    "Drive",
    "AtomState",
    "Ensemble",
    "Integrator",
    "expected_temperature",
    "default_initial_temperatures",
    "max_event_rate",
    "step",
    "run_trajectory",
    "run_ensemble",
    "set_threads",
]

OMEGA_R = 0.5
BLOWUP_MOMENTUM = 1.0e3
MAX_FAILED_FRACTION = 1.0e-3

# Fixed so that cross-chunk reductions are reproducible bit for bit.
ATOM_CHUNK = 1024
STEP_BLOCK = 512


def set_threads(n=None):
    """Set the worker thread count (``SISYLAB_THREADS`` if ``n`` is None)."""
    if n is None:
        n = os.environ.get("SISYLAB_THREADS")
        if n is None:
            return numba.get_num_threads()
    n = max(1, min(int(n), numba.config.NUMBA_NUM_THREADS))
    numba.set_num_threads(n)
    return n


def expected_temperature(params):
    """A-priori Sisyphus temperature estimate kT ~ |Delta0'|/4 (hbar*omega_r)."""
    return 0.25 * abs(params.delta0p)


def default_initial_temperatures(params):
    """Default initial ``(kT_x, kT_z)``: three times :func:`expected_temperature`.

    The simulated steady state sits near 0.45-0.6 |Delta0'| along z and
    60-80 hbar*omega_r along x, so this start is hot along z.  Along x it
    is cold for small |Delta0'| and can be close to the steady state near
    |Delta0'| = 100, where the x relaxation may not be measurable.  A start
    that is hot along x is avoided: the slow x cooling then feeds energy
    into z and masks the fast z relaxation.
    """
    kt = 3.0 * expected_temperature(params)
    return kt, kt


def max_event_rate(params):
    """Upper bound of the per-atom scattering rate (omega_r)."""
    # s_m + s_-m <= 2, each s <= 2
    return 2.0 * PUMPING_WEIGHT * params.gamma0p * max(1.0, params.extra_scatter_scale) * 2.0


@dataclass(frozen=True)
class InitSpec:
    """Initial phase-space distribution.

    ``position`` is ``"cell"`` (uniform over one unit cell) or ``"point"``
    (every atom at ``point``).  ``temperature`` is kT per axis in
    hbar*omega_r, either one value for both axes or an ``(x, z)`` pair;
    None means :func:`default_initial_temperatures`.
    ``sublevel`` is ``"uniform"``, ``"+"`` or ``"-"``.
    """

    position: str = "cell"
    point: tuple = (0.0, 0.0)
    temperature: float = None
    sublevel: str = "uniform"

    def __post_init__(self):
        if self.position not in ("cell", "point"):
            raise ValueError(f"unknown init position mode {self.position!r}")
        if self.sublevel not in ("uniform", "+", "-"):
            raise ValueError(f"unknown init sublevel mode {self.sublevel!r}")
        if self.temperature is not None and min(self.temperatures()) < 0:
            raise ValueError("init temperature must be >= 0")

    def temperatures(self, params=None):
        """``(kT_x, kT_z)``; ``params`` supplies the default."""
        t = self.temperature
        if t is None:
            return default_initial_temperatures(params)
        if np.ndim(t) == 0:
            return float(t), float(t)
        if len(t) != 2:
            raise ValueError("init temperature must be one value or an (x, z) pair")
        return float(t[0]), float(t[1])


@dataclass(frozen=True)
class SimConfig:
    """Integration settings.  Times are in 1/omega_r."""

    dt: float = 0.01
    t_total: float = 50.0
    n_atoms: int = 2000
    seed: int = 0
    record_stride: int = 10
    init: InitSpec = field(default_factory=InitSpec)

    def __post_init__(self):
        if not self.dt > 0:
            raise ValueError("dt must be positive")
        if self.t_total < 0:
            raise ValueError("t_total must be >= 0")
        if int(self.n_atoms) < 1:
            raise ValueError("n_atoms must be >= 1")
        if int(self.record_stride) < 1:
            raise ValueError("record_stride must be >= 1")
        if not 0 <= int(self.seed) < 2**64:
            raise ValueError("seed must be an unsigned 64-bit integer")

    @property
    def n_steps(self):
        return int(math.floor(self.t_total / self.dt + 1e-9))

    @property
    def n_records(self):
        return self.n_steps // self.record_stride + 1

    def check(self, params):
        """Raise ValueError if dt is too coarse for ``params``."""
        rate = max_event_rate(params)
        if self.dt * rate > 0.1:
            raise ValueError(
                f"dt={self.dt} too large: dt * max jump rate = {self.dt * rate:.3g} > 0.1"
            )
        period = 2 * math.pi / max(harmonic_frequencies(params))
        if self.dt > period / 20:
            raise ValueError(
                f"dt={self.dt} exceeds 1/20 of the oscillation period {period:.4g}"
            )
        return self

    @classmethod
    def auto_dt(cls, params, safety=1.0):
        """Largest dt allowed by :meth:`check`, divided by ``safety``."""
        period = 2 * math.pi / max(harmonic_frequencies(params))
        bound = period / 20
        rate = max_event_rate(params)
        if rate > 0:
            bound = min(bound, 0.1 / rate)
        return bound / safety


@dataclass(frozen=True)
class Drive:
    """Probe drive: amplitude relative to |Delta0'| and detuning in omega_r."""

    epsilon: float
    delta: float


@dataclass(frozen=True)
class AtomState:
    """One atom: position (1/k), momentum (hbar k), sublevel +-1/2."""

    x: float
    z: float
    px: float
    pz: float
    m: float

    def __post_init__(self):
        if self.m not in (0.5, -0.5):
            raise ValueError("m must be +1/2 or -1/2")


@numba.njit(parallel=True, cache=True)
def _advance(x, z, px, pz, m, uniforms, t0, dt,
             K, Kp, amp, g_pump, extra, n_kick,
             d_amp, d_q, d_delta,
             out_every, out_x, out_z, out_px, out_pz, out_m,
             want_grating, g_re, g_im, failed, step0):
    n_atoms = x.shape[0]
    n_steps = uniforms.shape[1]
    limit2 = 1.0e6
    two_pi = 2.0 * math.pi
    for i in numba.prange(n_atoms):
        if failed[i] >= 0:
            continue
        xi = x[i]
        zi = z[i]
        pxi = px[i]
        pzi = pz[i]
        sg = 1.0 if m[i] > 0 else -1.0

        # force at the start of the block
        c = math.cos(K * xi)
        sx = math.sin(K * xi)
        s2 = math.sin(2.0 * Kp * zi)
        c2 = math.cos(2.0 * Kp * zi)
        fx = amp * K * sx * (2.0 * c + sg * s2)
        fz = -sg * amp * 2.0 * Kp * c * c2
        if d_amp != 0.0:
            ph = d_q * zi + d_delta * t0
            fx += d_amp * K * sx * math.cos(ph)
            fz += d_amp * d_q * c * math.sin(ph)

        for j in range(n_steps):
            t1 = t0 + (j + 1) * dt
            pxi += 0.5 * dt * fx
            pzi += 0.5 * dt * fz
            xi += dt * pxi
            zi += dt * pzi
            c = math.cos(K * xi)
            sx = math.sin(K * xi)
            s2 = math.sin(2.0 * Kp * zi)
            c2 = math.cos(2.0 * Kp * zi)
            fx = amp * K * sx * (2.0 * c + sg * s2)
            fz = -sg * amp * 2.0 * Kp * c * c2
            if d_amp != 0.0:
                ph = d_q * zi + d_delta * t1
                fx += d_amp * K * sx * math.cos(ph)
                fz += d_amp * d_q * c * math.sin(ph)
            pxi += 0.5 * dt * fx
            pzi += 0.5 * dt * fz

            # optical pumping: leaving m needs light of the opposite helicity
            base = 0.5 * (1.0 + c * c)
            s_same = base + sg * c * s2
            s_other = base - sg * c * s2
            flipped = False
            if uniforms[i, j, 0] < -math.expm1(-g_pump * s_other * dt):
                sg = -sg
                for q in range(n_kick):
                    phi = two_pi * uniforms[i, j, 2 + q]
                    pxi += math.cos(phi)
                    pzi += math.sin(phi)
                flipped = True
            if extra > 0.0 and uniforms[i, j, 1] < -math.expm1(-extra * g_pump * s_same * dt):
                for q in range(n_kick):
                    phi = two_pi * uniforms[i, j, 2 + n_kick + q]
                    pxi += math.cos(phi)
                    pzi += math.sin(phi)
            if flipped:
                # next half-kick uses the new sublevel's force
                fx = amp * K * sx * (2.0 * c + sg * s2)
                fz = -sg * amp * 2.0 * Kp * c * c2
                if d_amp != 0.0:
                    ph = d_q * zi + d_delta * t1
                    fx += d_amp * K * sx * math.cos(ph)
                    fz += d_amp * d_q * c * math.sin(ph)

            if not (pxi * pxi + pzi * pzi <= limit2):
                failed[i] = step0 + j + 1
                break
            if want_grating:
                cq = math.cos(d_q * zi)
                sq = math.sin(d_q * zi)
                g_re[i, j] = c * cq
                g_im[i, j] = -c * sq
            if (step0 + j + 1) % out_every == 0:
                k = (step0 + j + 1) // out_every - (step0 // out_every) - 1
                if k >= 0 and k < out_x.shape[1]:
                    out_x[i, k] = xi
                    out_z[i, k] = zi
                    out_px[i, k] = pxi
                    out_pz[i, k] = pzi
                    out_m[i, k] = 0.5 * sg
        x[i] = xi
        z[i] = zi
        px[i] = pxi
        pz[i] = pzi
        m[i] = 0.5 * sg


class Integrator:
    """Advances a batch of atoms, each with its own random stream.

    Parameters
    ----------
    params : LatticeParams
    dt : float
        Time step in 1/omega_r.
    x, z, px, pz, m : array_like
        Initial states (recoil units, m = +-1/2).
    streams : list of numpy.random.Generator
        One per atom; consumed in fixed slots per step.
    drive : Drive, optional
    t0 : float
        Start time in 1/omega_r.
    """

    def __init__(self, params, dt, x, z, px, pz, m, streams, drive=None, t0=0.0):
        self.params = params
        self.dt = float(dt)
        self.x = np.array(x, dtype=float)
        self.z = np.array(z, dtype=float)
        self.px = np.array(px, dtype=float)
        self.pz = np.array(pz, dtype=float)
        self.m = np.array(m, dtype=float)
        self.streams = list(streams)
        if len(self.streams) != self.x.size:
            raise ValueError("need exactly one stream per atom")
        self.drive = drive
        self.step_index = 0
        self.t0 = float(t0)
        self.failed = np.full(self.x.size, -1, dtype=np.int64)
        self.n_draw = 2 + 2 * params.recoil_kick_count

    @property
    def time(self):
        return self.t0 + self.step_index * self.dt

    def _uniforms(self, n_steps):
        u = np.empty((self.x.size, n_steps, self.n_draw))
        for i, gen in enumerate(self.streams):
            u[i] = gen.random((n_steps, self.n_draw))
        return u

    def advance(self, n_steps, record_every=0, grating=False):
        """Integrate ``n_steps`` steps.

        Returns a dict with ``records`` (state arrays of shape
        ``(n_atoms, n_rec)`` sampled every ``record_every`` global steps,
        counted from the integrator's creation) and, if ``grating`` is set,
        per-step atom sums of the drive-conjugate grating amplitude.
        """
        p = self.params
        dt_i = self.dt / OMEGA_R
        amp = 2.0 * p.delta0p / 3.0 * OMEGA_R
        g_pump = PUMPING_WEIGHT * p.gamma0p * OMEGA_R
        if self.drive is not None and self.drive.epsilon != 0.0:
            d_amp = self.drive.epsilon * abs(p.delta0p) * OMEGA_R
            d_delta = self.drive.delta * OMEGA_R
        else:
            d_amp, d_delta = 0.0, 0.0
        d_q = p.K_plus - 1.0
        n = self.x.size
        every = record_every if record_every > 0 else n_steps + self.step_index + 1
        records = []
        g_sum = np.zeros(n_steps, dtype=complex) if grating else None
        done = 0
        while done < n_steps:
            nb = min(STEP_BLOCK, n_steps - done)
            s0 = self.step_index
            n_out = (s0 + nb) // every - s0 // every
            out = [np.full((n, n_out), np.nan) for _ in range(5)]
            if grating:
                g_re = np.zeros((n, nb))
                g_im = np.zeros((n, nb))
            else:
                g_re = g_im = np.zeros((0, 0))
            u = self._uniforms(nb)
            _advance(
                self.x, self.z, self.px, self.pz, self.m, u,
                self.t0 / OMEGA_R + s0 * dt_i, dt_i,
                p.K, p.K_plus, amp, g_pump, float(p.extra_scatter_scale), p.recoil_kick_count,
                d_amp, d_q, d_delta,
                every, *out, grating, g_re, g_im, self.failed, s0,
            )
            if grating:
                ok = self.failed < 0
                g_sum[done:done + nb] = g_re[ok].sum(axis=0) + 1j * g_im[ok].sum(axis=0)
            if n_out:
                records.append(out)
            self.step_index += nb
            done += nb
        result = {}
        if records:
            result["records"] = [np.concatenate([r[k] for r in records], axis=1) for k in range(5)]
        else:
            result["records"] = [np.empty((n, 0)) for _ in range(5)]
        if grating:
            result["grating_sum"] = g_sum
        return result


def initial_states(params, config, atom_indices, key=(TAG_ENSEMBLE,)):
    """Draw initial states and return them with the (advanced) streams."""
    streams = atom_streams(config.seed, atom_indices, key)
    init = config.init
    kt_x, kt_z = init.temperatures(params)
    sx, sz = math.sqrt(kt_x / 2.0), math.sqrt(kt_z / 2.0)
    n = len(streams)
    x, z, px, pz, m = (np.empty(n) for _ in range(5))
    lx, lz = params.cell
    for i, gen in enumerate(streams):
        u = gen.random(3)
        g = gen.standard_normal(2)
        if init.position == "cell":
            x[i], z[i] = lx * u[0], lz * u[1]
        else:
            x[i], z[i] = init.point
        px[i], pz[i] = sx * g[0], sz * g[1]
        if init.sublevel == "uniform":
            m[i] = 0.5 if u[2] < 0.5 else -0.5
        else:
            m[i] = 0.5 if init.sublevel == "+" else -0.5
    return (x, z, px, pz, m), streams


def step(state, params, dt, rng, t=0.0, drive=None):
    """Advance a single :class:`AtomState` by one step of ``dt``.

    ``rng`` is a numpy Generator; the step consumes
    ``2 + 2 * recoil_kick_count`` uniforms from it.
    """
    integ = Integrator(
        params, dt, [state.x], [state.z], [state.px], [state.pz], [state.m], [rng],
        drive=drive, t0=t,
    )
    integ.advance(1)
    if integ.failed[0] >= 0:
        raise NumericalBlowup(f"|p| exceeded {BLOWUP_MOMENTUM:g} hbar k", step=1)
    return AtomState(float(integ.x[0]), float(integ.z[0]), float(integ.px[0]),
                     float(integ.pz[0]), float(integ.m[0]))


@dataclass
class Ensemble:
    """Recorded snapshots of an ensemble run.

    State arrays have shape ``(n_records, n_atoms)``.  ``times`` are in
    1/omega_r.  ``failed`` lists atoms that blew up; their rows are NaN
    after the failure and they are excluded by :attr:`ok`.
    """

    params: LatticeParams
    config: SimConfig
    times: np.ndarray
    x: np.ndarray
    z: np.ndarray
    px: np.ndarray
    pz: np.ndarray
    m: np.ndarray
    atom_indices: np.ndarray
    failed: np.ndarray = field(default_factory=lambda: np.empty(0, dtype=np.int64))
    stream_key: tuple = (TAG_ENSEMBLE,)

    @property
    def n_atoms(self):
        return self.x.shape[1]

    @property
    def ok(self):
        mask = np.ones(self.n_atoms, dtype=bool)
        mask[np.isin(self.atom_indices, self.failed)] = False
        return mask

    def snapshot(self, k):
        """AtomStates at record ``k``."""
        return [
            AtomState(float(a), float(b), float(c), float(d), float(e))
            for a, b, c, d, e in zip(self.x[k], self.z[k], self.px[k], self.pz[k], self.m[k])
        ]

    def trajectory(self, atom):
        return [
            AtomState(float(a), float(b), float(c), float(d), float(e))
            for a, b, c, d, e in zip(
                self.x[:, atom], self.z[:, atom], self.px[:, atom], self.pz[:, atom], self.m[:, atom]
            )
        ]

    def mean_p2(self):
        """Ensemble averages ``(<p_x^2>, <p_z^2>)`` per record, in (hbar k)^2."""
        ok = self.ok
        return (self.px[:, ok] ** 2).mean(axis=1), (self.pz[:, ok] ** 2).mean(axis=1)

    def equals(self, other):
        """Bit-exact comparison of all recorded arrays."""
        names = ("times", "x", "z", "px", "pz", "m", "atom_indices", "failed")
        return all(
            np.array_equal(getattr(self, n), getattr(other, n), equal_nan=True) for n in names
        )


def _simulate_chunk(params, config, indices, key):
    state, streams = initial_states(params, config, indices, key)
    integ = Integrator(params, config.dt, *state, streams)
    n_rec = config.n_records
    out = [np.empty((len(indices), n_rec)) for _ in range(5)]
    for arr, v in zip(out, state):
        arr[:, 0] = v
    if config.n_steps:
        rec = integ.advance(config.n_steps, record_every=config.record_stride)["records"]
        for arr, r in zip(out, rec):
            arr[:, 1:] = r[:, : n_rec - 1]
    return out, integ.failed


def run_ensemble(params, config, atom_indices=None, key=(TAG_ENSEMBLE,), check=True,
                 max_failed_fraction=MAX_FAILED_FRACTION):
    """Integrate ``config.n_atoms`` independent atoms.

    Raises
    ------
    EnsembleFailure
        If more than ``max_failed_fraction`` of the atoms blew up.  The
        exception carries the failed indices.
    """
    if check:
        config.check(params)
    if atom_indices is None:
        atom_indices = np.arange(config.n_atoms)
    atom_indices = np.asarray(atom_indices, dtype=np.int64)
    parts = []
    failed = []
    for lo in range(0, atom_indices.size, ATOM_CHUNK):
        idx = atom_indices[lo:lo + ATOM_CHUNK]
        out, f = _simulate_chunk(params, config, idx, key)
        parts.append(out)
        failed.extend(idx[f >= 0].tolist())
    arrays = [np.concatenate([p[k] for p in parts], axis=0).T.copy() for k in range(5)]
    times = np.arange(config.n_records) * config.dt * config.record_stride
    ens = Ensemble(params, config, times, *arrays, atom_indices=atom_indices,
                   failed=np.asarray(failed, dtype=np.int64), stream_key=tuple(key))
    if len(failed) > max_failed_fraction * atom_indices.size:
        raise EnsembleFailure(
            f"{len(failed)} of {atom_indices.size} atoms blew up", failed_indices=failed
        )
    return ens


def run_trajectory(params, config, atom_index, key=(TAG_ENSEMBLE,), check=True):
    """Trajectory of a single atom as a list of :class:`AtomState`."""
    try:
        ens = run_ensemble(params, config, [atom_index], key=key, check=check,
                           max_failed_fraction=0.0)
    except EnsembleFailure as exc:
        raise NumericalBlowup(
            f"atom {atom_index} exceeded |p| = {BLOWUP_MOMENTUM:g} hbar k", atom_index=atom_index
        ) from exc
    return ens.trajectory(0)
