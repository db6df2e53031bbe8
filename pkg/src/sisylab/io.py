"""Run configuration, CSV emitters and the binary trajectory store.

Config files are flat ``key = value`` lines with dotted section prefixes::

    # comments start with '#'
    lattice.delta0p = -50
    lattice.theta_deg = 30
    sim.n_atoms = 2000
    sweep.gamma0p = 2, 4, 6, 8

Every CSV written here starts with ``#``-prefixed provenance lines (the
package version and the full resolved config, one ``# key = value`` per
line) followed by a column-name row.  A CSV header can be fed back to
:func:`load_config` to reproduce the run.
"""

from dataclasses import dataclass, field, fields, replace
import json
import math
import os
import struct

import numpy as np

from . import __version__
from .engine import InitSpec, SimConfig
from .exceptions import ConfigError
from .lattice import LatticeParams
from .spectroscopy import ProbeSpec

__all__ = [
    "RunConfig",
    "parse_config",
    "load_config",
    "write_csv",
    "read_csv",
    "write_trajectory_store",
    "read_trajectory_store",
    "write_error",
    "MAGIC",
]

MAGIC = b"SISYLAB1"
STORE_VERSION = 1


def _float(v):
    return float(v)


def _int(v):
    f = float(v)
    if f != int(f):
        raise ValueError(f"not an integer: {v!r}")
    return int(f)


def _auto_float(v):
    return None if str(v).strip().lower() in ("auto", "none", "") else float(v)


def _bool(v):
    s = str(v).strip().lower()
    if s in ("1", "true", "yes", "on"):
        return True
    if s in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {v!r}")


def _float_list(v):
    if isinstance(v, (list, tuple)):
        return [float(x) for x in v]
    items = [s for s in str(v).replace(";", ",").split(",") if s.strip()]
    return [float(s) for s in items]


def _auto_float_list(v):
    if str(v).strip().lower() in ("auto", "none", ""):
        return None
    return _float_list(v)


def _temperature(v):
    vals = _auto_float_list(v)
    if vals is None:
        return None
    if len(vals) == 1:
        return vals[0]
    if len(vals) == 2:
        return tuple(vals)
    raise ValueError("expected one value or an x, z pair")


def _str(v):
    return str(v).strip()


# key -> (parser, default)
KEYS = {
    "lattice.delta0p": (_float, -50.0),
    "lattice.gamma0p": (_float, 4.0),
    "lattice.theta_deg": (_float, 30.0),
    "lattice.recoil_kick_count": (_int, 2),
    "lattice.extra_scatter_scale": (_float, 1.0),
    "sim.dt": (_auto_float, None),
    "sim.t_total": (_auto_float, None),
    "sim.t_total_gamma": (_float, 200.0),
    "sim.n_atoms": (_int, 2000),
    "sim.record_stride": (_int, 10),
    "sim.init_position": (_str, "cell"),
    "sim.init_x": (_float, 0.0),
    "sim.init_z": (_float, 0.0),
    "sim.init_temperature": (_temperature, None),
    "sim.init_sublevel": (_str, "uniform"),
    "sim.store_trajectories": (_bool, False),
    "probe.epsilon": (_float, 0.1),
    "probe.settle_time": (_auto_float, None),
    "probe.measure_time": (_auto_float, None),
    "probe.n_blocks": (_int, 8),
    "spectrum.grid": (_auto_float_list, None),
    "spectrum.central_span": (_float, 5.0),
    "spectrum.central_points": (_int, 21),
    "spectrum.wing_factors": (_float_list, [8.0, 12.0, 20.0, 40.0, 80.0]),
    "spectrum.sideband_factors": (_float_list, [0.5, 0.75, 1.0, 1.25, 1.5]),
    "fit.delta_max": (_auto_float, None),
    "fit.delta_cut": (_auto_float, None),
    "msd.window_start": (_float, 0.5),
    "temps.t_min": (_float, 0.0),
    "sweep.gamma0p": (_float_list, [2.0, 4.0, 6.0, 8.0]),
    "sweep.delta0p": (_float_list, [-50.0, -100.0]),
    "run.seed": (_int, 0),
    "run.out": (_str, "out"),
    "run.threads": (_int, 0),
}


def _format(v):
    if v is None:
        return "auto"
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, float):
        return repr(v)
    if isinstance(v, (list, tuple)):
        return ", ".join(_format(x) for x in v)
    return str(v)


@dataclass
class RunConfig:
    """Fully resolved settings of one CLI invocation.

    ``values`` maps every known dotted key to its parsed value; accessors
    build the typed objects used by the library.
    """

    values: dict = field(default_factory=lambda: {k: d for k, (_, d) in KEYS.items()})

    def __getitem__(self, key):
        return self.values[key]

    def with_overrides(self, **kv):
        v = dict(self.values)
        for k, val in kv.items():
            key = k.replace("__", ".")
            if key not in KEYS:
                raise ConfigError(f"unknown config key {key!r}")
            v[key] = val
        return RunConfig(v)

    def lattice(self, delta0p=None, gamma0p=None):
        v = self.values
        return LatticeParams(
            delta0p=v["lattice.delta0p"] if delta0p is None else delta0p,
            gamma0p=v["lattice.gamma0p"] if gamma0p is None else gamma0p,
            theta=math.radians(v["lattice.theta_deg"]),
            recoil_kick_count=v["lattice.recoil_kick_count"],
            extra_scatter_scale=v["lattice.extra_scatter_scale"],
        )

    def sim(self, params, seed=None):
        v = self.values
        dt = v["sim.dt"] if v["sim.dt"] is not None else SimConfig.auto_dt(params)
        if v["sim.t_total"] is not None:
            t_total = v["sim.t_total"]
        elif params.gamma0p > 0:
            t_total = v["sim.t_total_gamma"] / params.gamma0p
        else:
            raise ConfigError("sim.t_total = auto needs gamma0p > 0")
        init = InitSpec(
            position=v["sim.init_position"],
            point=(v["sim.init_x"], v["sim.init_z"]),
            temperature=v["sim.init_temperature"],
            sublevel=v["sim.init_sublevel"],
        )
        return SimConfig(
            dt=dt, t_total=t_total, n_atoms=v["sim.n_atoms"],
            seed=v["run.seed"] if seed is None else seed,
            record_stride=v["sim.record_stride"], init=init,
        )

    def probe(self):
        v = self.values
        return ProbeSpec(
            epsilon=v["probe.epsilon"], settle_time=v["probe.settle_time"],
            measure_time=v["probe.measure_time"], n_blocks=v["probe.n_blocks"],
        )

    def lines(self, exclude=("run.out", "run.threads")):
        """``key = value`` lines of the resolved config, sorted by key.

        The output directory and thread count do not change any result and
        are left out, so identical runs produce identical files.
        """
        return [f"{k} = {_format(self.values[k])}" for k in sorted(self.values)
                if k not in exclude]

    def dumps(self):
        return "\n".join(self.lines()) + "\n"


def parse_config(text, base=None):
    """Parse config text; unknown keys and malformed lines are errors.

    Lines of a CSV provenance header (``# key = value``) are accepted too.
    """
    cfg = RunConfig() if base is None else RunConfig(dict(base.values))
    for n, raw in enumerate(text.splitlines(), 1):
        line = raw.strip()
        if line.startswith("#"):
            body = line.lstrip("#").strip()
            # provenance header lines carry config entries behind '#'
            if "=" in body and body.split("=", 1)[0].strip() in KEYS:
                line = body
            else:
                continue
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {n}: expected 'key = value', got {raw!r}")
        key, value = (s.strip() for s in line.split("=", 1))
        if key not in KEYS:
            raise ConfigError(f"line {n}: unknown config key {key!r}")
        parser = KEYS[key][0]
        try:
            cfg.values[key] = parser(value)
        except ValueError as exc:
            raise ConfigError(f"line {n}: bad value for {key}: {exc}") from exc
    return cfg


def load_config(path):
    """Read a config file, or the provenance header of a sisylab CSV."""
    with open(path, encoding="utf-8") as fh:
        text = fh.read()
    if path.endswith(".csv"):
        text = "\n".join(l for l in text.splitlines() if l.startswith("#"))
    return parse_config(text)


def _cell(v):
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    if isinstance(v, (bool, np.bool_)):
        return "true" if v else "false"
    return str(v)


def write_csv(path, columns, rows, config=None, extra=None):
    """Write ``rows`` under a provenance header.

    ``extra`` holds additional ``key: value`` provenance (not config keys).
    """
    head = [f"# sisylab_version = {__version__}"]
    if extra:
        head += [f"# {k}: {_cell(v)}" for k, v in extra.items()]
    if config is not None:
        head += ["# " + l for l in config.lines()]
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write("\n".join(head) + "\n")
        fh.write(",".join(columns) + "\n")
        for row in rows:
            fh.write(",".join(_cell(v) for v in row) + "\n")


def read_csv(path):
    """Return ``(columns, data)`` with data as a float array."""
    with open(path, encoding="utf-8") as fh:
        lines = [l.rstrip("\n") for l in fh if not l.startswith("#")]
    columns = lines[0].split(",")
    data = np.array([[float(c) for c in l.split(",")] for l in lines[1:] if l], dtype=float)
    return columns, data.reshape(-1, len(columns))


def write_trajectory_store(path, ensemble, config_text):
    """Binary trajectory store.

    Layout: 8-byte magic ``SISYLAB1``, u32 version, u32 config length, the
    UTF-8 config blob, u32 atom count, then for every atom a u32 record
    count followed by that many little-endian float64 records
    ``(t, x, z, px, pz, m)``.  Records of atoms that blew up stop at the
    failure.
    """
    blob = config_text.encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<II", STORE_VERSION, len(blob)))
        fh.write(blob)
        fh.write(struct.pack("<I", ensemble.n_atoms))
        for a in range(ensemble.n_atoms):
            rec = np.column_stack([
                ensemble.times, ensemble.x[:, a], ensemble.z[:, a],
                ensemble.px[:, a], ensemble.pz[:, a], ensemble.m[:, a],
            ])
            rec = rec[np.all(np.isfinite(rec), axis=1)]
            fh.write(struct.pack("<I", rec.shape[0]))
            fh.write(rec.astype("<f8").tobytes())


def read_trajectory_store(path):
    """Return ``(config_text, [records per atom])``; records are (n, 6) arrays."""
    with open(path, "rb") as fh:
        data = fh.read()
    if data[:8] != MAGIC:
        raise ValueError("not a sisylab trajectory store")
    version, n_blob = struct.unpack_from("<II", data, 8)
    if version != STORE_VERSION:
        raise ValueError(f"unsupported store version {version}")
    off = 16
    text = data[off:off + n_blob].decode("utf-8")
    off += n_blob
    (n_atoms,) = struct.unpack_from("<I", data, off)
    off += 4
    atoms = []
    for _ in range(n_atoms):
        (n,) = struct.unpack_from("<I", data, off)
        off += 4
        atoms.append(np.frombuffer(data, dtype="<f8", count=6 * n, offset=off).reshape(n, 6))
        off += 48 * n
    return text, atoms


def write_error(path, command, exc, **details):
    """Machine-readable error record (JSON)."""
    rec = {"command": command, "error": type(exc).__name__, "message": str(exc)}
    for k, v in details.items():
        rec[k] = v
    failed = getattr(exc, "failed_indices", None)
    if failed:
        rec["failed_indices"] = list(failed)
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(rec, fh, indent=2, sort_keys=True)
        fh.write("\n")
    return rec
