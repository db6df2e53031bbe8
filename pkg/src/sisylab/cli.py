"""Command-line batch tool.

    sisylab <command> [--config PATH] [--seed N] [--out DIR] [--threads N]

Commands: simulate, msd, temps, spectrum, fit, compare, oracle.  Every
output file carries the package version and the resolved config in its
header.  On failure a JSON error record is written to ``<out>/error.json``
and the exit status is 2.  The default thread count comes from the
``SISYLAB_THREADS`` environment variable.
"""

import argparse
import math
import os
import sys
import time

import numpy as np

from . import __version__
from .engine import run_ensemble, set_threads
from .exceptions import SisylabError
from .harness import REPORT_COLUMNS, compare, spectrum_grid
from .io import (RunConfig, load_config, read_csv, write_csv, write_error,
                 write_trajectory_store)
from .observables import fit_diffusion, gamma_d_lattice, msd_series, temperature_relaxation
from .specfit import fit_central, fit_wings, sensitivity_lines, window_sensitivity
from .spectroscopy import Spectrum, spectrum_scan, thermalized_snapshot

__all__ = ["main", "build_parser"]

SPECTRUM_COLUMNS = ["delta_omega_r", "gain", "gain_err", "n_atoms", "settle", "measure"]


def _log(msg):
    print(msg, file=sys.stderr, flush=True)


def _ensemble(cfg):
    params = cfg.lattice()
    sim = cfg.sim(params)
    return params, sim, run_ensemble(params, sim)


def cmd_simulate(cfg, out, args):
    params, sim, ens = _ensemble(cfg)
    ok = ens.ok
    rows = []
    for k, t in enumerate(ens.times):
        px, pz, m = ens.px[k, ok], ens.pz[k, ok], ens.m[k, ok]
        n = px.size
        rows.append([t, float(np.mean(px * px)), float(np.std(px * px, ddof=1) / math.sqrt(n)),
                     float(np.mean(pz * pz)), float(np.std(pz * pz, ddof=1) / math.sqrt(n)),
                     float(np.mean(m > 0)), n])
    write_csv(os.path.join(out, "summary.csv"),
              ["time", "px2", "px2_err", "pz2", "pz2_err", "pop_plus", "n_atoms"], rows, cfg)
    if cfg["sim.store_trajectories"]:
        write_trajectory_store(os.path.join(out, "trajectories.bin"), ens, cfg.dumps())
    return 0


def cmd_msd(cfg, out, args):
    params, sim, ens = _ensemble(cfg)
    msd = msd_series(ens)
    rows = [list(r) for r in zip(msd.times, msd.msd_x, msd.err_x, msd.msd_z, msd.err_z)]
    write_csv(os.path.join(out, "msd.csv"),
              ["time_M_over_hbar_k2", "msd_x", "msd_x_err", "msd_z", "msd_z_err"], rows, cfg)
    t_end = msd.times[-1]
    dr = fit_diffusion(msd, window=(cfg["msd.window_start"] * t_end, t_end))
    gd = gamma_d_lattice(dr, params)
    write_csv(os.path.join(out, "diffusion.csv"),
              ["d_x", "d_x_err", "d_z", "d_z_err", "r2_x", "r2_z", "gamma_d"],
              [[dr.d_x, dr.d_x_err, dr.d_z, dr.d_z_err, dr.r2_x, dr.r2_z, gd]], cfg)
    return 0


def cmd_temps(cfg, out, args):
    params, sim, ens = _ensemble(cfg)
    ok = ens.ok
    p2x = (ens.px[:, ok] ** 2).mean(axis=1)
    p2z = (ens.pz[:, ok] ** 2).mean(axis=1)
    write_csv(os.path.join(out, "temps.csv"), ["time", "kt_x", "kt_z"],
              [[t, 2 * a, 2 * b] for t, a, b in zip(ens.times, p2x, p2z)], cfg)
    tr = temperature_relaxation(ens, t_min=cfg["temps.t_min"])
    write_csv(os.path.join(out, "temps_fit.csv"),
              ["gamma_tx", "gamma_tx_err", "gamma_tz", "gamma_tz_err", "kt_x", "kt_x_err",
               "kt_z", "kt_z_err"],
              [[tr.gamma_tx, tr.gamma_tx_err, tr.gamma_tz, tr.gamma_tz_err, tr.kt_x, tr.kt_x_err,
                tr.kt_z, tr.kt_z_err]], cfg)
    return 0


def _write_spectrum(path, spec, cfg, gamma_tz=None):
    rows = [[d, g, e, int(n), s, m] for d, g, e, n, s, m in
            zip(spec.delta, spec.gain, spec.gain_err, spec.n_atoms, spec.settle, spec.measure)]
    extra = None if gamma_tz is None else {"gamma_tz": float(gamma_tz)}
    write_csv(path, SPECTRUM_COLUMNS, rows, cfg, extra=extra)


def _header_value(path, key):
    if not path.endswith(".csv"):
        return None
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            if not line.startswith("#"):
                break
            body = line[1:].strip()
            if body.startswith(key + ":"):
                return float(body.split(":", 1)[1])
    return None


def cmd_spectrum(cfg, out, args):
    params, sim, ens = _ensemble(cfg)
    tr = temperature_relaxation(ens, t_min=cfg["temps.t_min"])
    grid = spectrum_grid(cfg, params, tr.gamma_tz)
    start = thermalized_snapshot(ens, tr.kt_x, tr.kt_z)

    def progress(k, r):
        _log(f"  delta={r.delta:.5g} gain={r.gain:.4g} +- {r.gain_err:.2g}")

    spec = spectrum_scan(params, grid, cfg.probe(), sim, initial=start, progress=progress)
    _write_spectrum(os.path.join(out, "spectrum.csv"), spec, cfg, tr.gamma_tz)
    if spec.errors:
        for d, msg in sorted(spec.errors.items()):
            _log(f"  point delta={d:.5g} failed: {msg}")
    return 0


def _read_spectrum(path):
    cols, data = read_csv(path)
    idx = {c: i for i, c in enumerate(cols)}
    missing = [c for c in SPECTRUM_COLUMNS[:3] if c not in idx]
    if missing:
        raise ValueError(f"{path}: missing columns {missing}")
    spec = Spectrum(data[:, idx["delta_omega_r"]], data[:, idx["gain"]], data[:, idx["gain_err"]])
    return spec.valid()


def cmd_fit(cfg, out, args):
    path = args.input or os.path.join(out, "spectrum.csv")
    if args.config is None and path.endswith(".csv"):
        cfg = load_config(path)
    spec = _read_spectrum(path)
    dmax = cfg["fit.delta_max"]
    gamma_tz = _header_value(path, "gamma_tz")
    if dmax is None and gamma_tz is not None and cfg["spectrum.grid"] is None:
        dmax = cfg["spectrum.central_span"] * gamma_tz
    fit = fit_central(spec, delta_max=dmax)
    lines = fit.report() + sensitivity_lines(window_sensitivity(spec, fit.delta_max))
    try:
        w = fit_wings(spec, delta_cut=cfg["fit.delta_cut"], gamma_r=fit.gamma_r)
        lines += (f"gamma_b: {w.gamma_b!r}\ngamma_b_err: {w.gamma_b_err!r}\n"
                  f"delta_cut: {w.delta_cut!r}\nwing_points: {w.n_points}\n")
    except (SisylabError, ValueError) as exc:
        lines += f"wing_fit_error: {type(exc).__name__}: {exc}\n"
    with open(os.path.join(out, "fit_report.txt"), "w", encoding="utf-8") as fh:
        fh.write(f"sisylab_version: {__version__}\n")
        fh.write(f"input: {os.path.basename(path)}\n")
        fh.write(lines)
    sel = np.abs(spec.delta) <= fit.delta_max
    d = spec.delta[sel]
    model = fit.predict(d)
    rows = [[a, b, c, m, (b - m) / c] for a, b, c, m in zip(d, spec.gain[sel], spec.gain_err[sel], model)]
    write_csv(os.path.join(out, "fit_residuals.csv"),
              ["delta_omega_r", "gain", "gain_err", "model", "normalized_residual"], rows, cfg)
    return 0


def cmd_compare(cfg, out, args):
    t0 = time.perf_counter()

    def on_point(i, res):
        _log(f"point {i}: delta0p={res.delta0p:g} gamma0p={res.gamma0p:g} gamma_r={res.gamma_r:.4g} "
             f"gamma_d={res.gamma_d:.4g} gamma_tz={res.gamma_tz:.4g} ({res.runtime:.0f} s)")
        if res.spectrum is not None:
            _write_spectrum(os.path.join(out, f"point{i:02d}_spectrum.csv"), res.spectrum, cfg,
                            res.gamma_tz)
        if res.fit is not None:
            with open(os.path.join(out, f"point{i:02d}_fit.txt"), "w", encoding="utf-8") as fh:
                fh.write(res.fit.report())
                fh.write(sensitivity_lines(window_sensitivity(res.spectrum.valid(),
                                                              res.fit.delta_max)))

    report = compare(cfg, on_point=on_point)
    write_csv(os.path.join(out, "report.csv"), REPORT_COLUMNS, report.rows(), cfg)
    with open(os.path.join(out, "report.txt"), "w", encoding="utf-8") as fh:
        fh.write(f"sisylab_version: {__version__}\n")
        fh.write(report.summary())
    _log(report.summary() + f"wall time {time.perf_counter() - t0:.0f} s")
    return 0


def cmd_oracle(cfg, out, args):
    from .oracles import run_oracles

    rows = run_oracles(seed=cfg["run.seed"], log=_log)
    write_csv(os.path.join(out, "oracle.csv"),
              ["name", "expected", "measured", "rel_error", "tolerance", "passed"], rows, cfg)
    return 0 if all(r[-1] for r in rows) else 1


COMMANDS = {
    "simulate": cmd_simulate,
    "msd": cmd_msd,
    "temps": cmd_temps,
    "spectrum": cmd_spectrum,
    "fit": cmd_fit,
    "compare": cmd_compare,
    "oracle": cmd_oracle,
}


def build_parser():
    ap = argparse.ArgumentParser(prog="sisylab", description=__doc__.split("\n\n")[0])
    ap.add_argument("--version", action="version", version=f"sisylab {__version__}")
    sub = ap.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--config", help="key = value config file (or a sisylab CSV)")
        p.add_argument("--seed", type=int, help="master seed (unsigned 64-bit)")
        p.add_argument("--out", help="output directory")
        p.add_argument("--threads", type=int, help="worker threads (default: $SISYLAB_THREADS)")
        if name == "fit":
            p.add_argument("--input", help="spectrum CSV (default: <out>/spectrum.csv)")
    return ap


def resolve_config(args):
    cfg = load_config(args.config) if args.config else RunConfig()
    over = {}
    if args.seed is not None:
        if not 0 <= args.seed < 2**64:
            raise SystemExit("--seed must be an unsigned 64-bit integer")
        over["run.seed"] = args.seed
    if args.out is not None:
        over["run.out"] = args.out
    if args.threads is not None:
        over["run.threads"] = args.threads
    return cfg.with_overrides(**{k.replace(".", "__"): v for k, v in over.items()})


def main(argv=None):
    args = build_parser().parse_args(argv)
    out = args.out or "out"
    try:
        cfg = resolve_config(args)
        out = cfg["run.out"]
        os.makedirs(out, exist_ok=True)
        set_threads(cfg["run.threads"] or None)
        return COMMANDS[args.command](cfg, out, args)
    except (SisylabError, ValueError, OSError) as exc:
        os.makedirs(out, exist_ok=True)
        rec = write_error(os.path.join(out, "error.json"), args.command, exc)
        _log(f"error: {rec['error']}: {rec['message']}")
        return 2


if __name__ == "__main__":
    sys.exit(main())
