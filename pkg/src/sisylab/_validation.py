"""Input validation helpers shared by the estimators."""

import numpy as np

from .exceptions import InsufficientData


def check_series(x, y, err=None, name="y"):
    """Return float copies of ``(x, y, err)`` with matching 1-d shapes.

    ``err`` defaults to ones.  Non-finite values and non-positive errors
    are rejected.
    """
    x = np.asarray(x, dtype=float).reshape(-1)
    y = np.asarray(y, dtype=float).reshape(-1)
    if x.shape != y.shape:
        raise ValueError(f"x and {name} have different lengths: {x.size} != {y.size}")
    if err is None:
        err = np.ones_like(y)
    else:
        err = np.broadcast_to(np.asarray(err, dtype=float), y.shape).copy()
    if not (np.all(np.isfinite(x)) and np.all(np.isfinite(y)) and np.all(np.isfinite(err))):
        raise ValueError("input contains NaN or infinity")
    if np.any(err <= 0):
        raise ValueError("uncertainties must be positive")
    return x, y, err


def check_positions(x, z=None, min_atoms=1):
    """Validate position arrays of shape ``(n_times, n_atoms)``."""
    x = np.asarray(x, dtype=float)
    if x.ndim != 2:
        raise ValueError(f"expected (n_times, n_atoms) positions, got shape {x.shape}")
    if x.shape[1] < min_atoms:
        raise InsufficientData(f"need at least {min_atoms} atoms, got {x.shape[1]}")
    if z is not None:
        z = np.asarray(z, dtype=float)
        if z.shape != x.shape:
            raise ValueError("x and z positions have different shapes")
    return x, z


def check_window(window, times):
    lo, hi = float(window[0]), float(window[1])
    if not lo < hi:
        raise ValueError(f"empty window {window!r}")
    if lo < times[0] - 1e-12 or hi > times[-1] + 1e-12:
        raise ValueError(f"window {window!r} outside the series [{times[0]}, {times[-1]}]")
    return lo, hi
