"""Semiclassical Monte Carlo of Sisyphus-cooled atoms in a lin-perp-lin
lattice, with pump-probe spectra, diffusion and cooling-rate analysis."""

__version__ = "0.1.0"

import numba as _numba

# TBB in this image is too old for numba; prefer OpenMP, then the builtin pool.
_numba.config.THREADING_LAYER_PRIORITY = ["omp", "workqueue", "tbb"]

from .lattice import LatticeParams  # noqa: E402
from .engine import AtomState, Drive, Ensemble, InitSpec, SimConfig, run_ensemble, run_trajectory, step  # noqa: E402
from .observables import (  # noqa: E402
    DiffusionEstimator,
    TemperatureRelaxationEstimator,
    fit_diffusion,
    gamma_d_general,
    gamma_d_lattice,
    msd_series,
    pde_relaxation_oracle,
    temperature_relaxation,
)
from .spectroscopy import ProbeSpec, Spectrum, probe_gain, spectrum_scan  # noqa: E402
from .specfit import DispersiveWingFit, RayleighLineFit, fit_central, fit_wings  # noqa: E402
