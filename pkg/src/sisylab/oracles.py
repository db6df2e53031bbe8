"""Independent reference problems with known answers.

Each generator produces data whose true parameter is known in closed form;
:func:`run_oracles` feeds them through the production estimators and
tabulates the relative errors.  The test suite and the ``oracle`` CLI
command share these generators.
"""

import math

import numpy as np

from .lattice import LatticeParams, grating_wavevector
from .observables import (fit_diffusion, fit_relaxation, gamma_d_general, gamma_d_lattice,
                          msd_from_positions, pde_relaxation_oracle)
from .specfit import fit_central, model_eq6
from .spectroscopy import BrownianGratingToy, ProbeSpec, spectrum_scan

__all__ = [
    "brownian_msd",
    "noisy_relaxation",
    "synthetic_spectrum",
    "random_fick_cases",
    "toy_spectrum",
    "run_oracles",
    "SYNTHETIC_LINE",
    "SYNTHETIC_GRID",
]

# (a1, a2, a3, a4, gamma) of the reference line shape
SYNTHETIC_LINE = (0.01, 0.002, 0.05, 1.0, 0.8)
SYNTHETIC_GRID = np.union1d(np.linspace(-4, 4, 81), np.linspace(-40, 40, 81))


def brownian_msd(d, n_atoms=10_000, n_times=200, t_end=100.0, seed=0):
    """MSD series of free Brownian walkers with diffusion coefficient ``d``.

    Times in M/(hbar k^2), so the fitted D comes out in hbar/M.
    """
    rng = np.random.default_rng(seed)
    dt = t_end / n_times
    steps = rng.standard_normal((2, n_times, n_atoms)) * math.sqrt(2 * d * dt)
    pos = np.concatenate([np.zeros((2, 1, n_atoms)), np.cumsum(steps, axis=1)], axis=1)
    times = dt * np.arange(n_times + 1)
    return msd_from_positions(times, pos[0], pos[1])


def noisy_relaxation(rate=0.4, amplitude=1.0, offset=0.5, noise=0.01, n=200, t_end=None, seed=0):
    """``A exp(-rate t) + B`` with multiplicative Gaussian noise; returns (t, y, err)."""
    rng = np.random.default_rng(seed)
    t_end = 10.0 / rate if t_end is None else t_end
    t = np.linspace(0, t_end, n)
    clean = amplitude * np.exp(-rate * t) + offset
    y = clean * (1 + noise * rng.standard_normal(n))
    return t, y, noise * np.abs(clean)


def synthetic_spectrum(params=SYNTHETIC_LINE, grid=SYNTHETIC_GRID, noise=0.01, seed=0):
    """Line-shape samples with multiplicative 1% noise; returns (delta, gain, err)."""
    rng = np.random.default_rng(seed)
    clean = model_eq6(grid, *params)
    gain = clean * (1 + noise * rng.standard_normal(grid.size))
    err = noise * np.maximum(np.abs(clean), 1e-3 * np.max(np.abs(clean)))
    return np.asarray(grid, dtype=float), gain, err


def random_fick_cases(n=5, seed=0):
    """``n`` random (D_x, D_z, theta) sets with their lattice grating wavevectors."""
    rng = np.random.default_rng(seed)
    cases = []
    for _ in range(n):
        dx, dz = rng.uniform(0.2, 20.0, 2)
        theta = rng.uniform(math.radians(10), math.radians(80))
        cases.append((dx, dz, theta))
    return cases


def toy_spectrum(diffusion=1.0, n_particles=10_000, span=4.0, n_points=17, seed=0):
    """Probe spectrum of the driven Brownian toy; returns (spectrum, true rate)."""
    params = LatticeParams(theta=math.pi / 6)
    toy = BrownianGratingToy(params, diffusion=diffusion, n_particles=n_particles, seed=seed)
    rate = toy.rate
    grid = rate * np.linspace(-span, span, n_points)
    grid = grid[grid != 0]
    probe = ProbeSpec(epsilon=0.1, settle_time=5.0 / rate, measure_time=None)
    spec = spectrum_scan(params, grid, probe, None, system=toy)
    return spec, rate


def _row(name, expected, measured, tol):
    rel = abs(measured - expected) / abs(expected)
    return [name, float(expected), float(measured), float(rel), float(tol), bool(rel <= tol)]


def run_oracles(seed=0, log=None, toy=True):
    """Run every oracle; returns rows ``[name, expected, measured, rel_error, tol, passed]``."""
    rows = []

    def add(row):
        rows.append(row)
        if log is not None:
            log(f"{row[0]}: expected {row[1]:.6g} measured {row[2]:.6g} "
                f"rel {row[3]:.2e} {'ok' if row[5] else 'FAIL'}")

    for i, (dx, dz, theta) in enumerate(random_fick_cases(5, seed)):
        params = LatticeParams(theta=theta)
        dk = grating_wavevector(params)
        pde = pde_relaxation_oracle((dx, dz), dk)
        add(_row(f"fick_general[{i}]", pde, gamma_d_general((dx, dz), dk), 0.01))
        add(_row(f"fick_lattice[{i}]", pde, gamma_d_lattice((dx, dz), params), 0.01))
    for d in (0.5, 1.0, 5.0):
        msd = brownian_msd(d, seed=seed)
        # free Brownian motion has no ballistic transient, so fit the whole series
        res = fit_diffusion(msd, window=(0.0, msd.times[-1]))
        add(_row(f"brownian_dx[D={d}]", d, res.d_x, 0.05))
        add(_row(f"brownian_dz[D={d}]", d, res.d_z, 0.05))
    fit = fit_relaxation(*noisy_relaxation(seed=seed))
    add(_row("relaxation_rate", 0.4, fit.rate, 0.03))
    line = fit_central(*synthetic_spectrum(seed=seed), delta_max=40.0)
    add(_row("rayleigh_width", SYNTHETIC_LINE[4], line.gamma_r, 0.02))
    if toy:
        spec, rate = toy_spectrum(seed=seed)
        toy_fit = fit_central(spec, delta_max=spec.delta.max())
        add(_row("toy_lockin_width", rate, toy_fit.gamma_r, 0.10))
    return rows


