"""Command-line entry point.

    weakcoupling SUBCOMMAND [CONFIG] [--threads N] [--output-dir DIR] [--seed S]

Each run stages its files in a hidden directory inside the output
directory, then moves them into place together with ``manifest.json``.
Exit codes: 0 success, 2 configuration error, 3 numerical failure,
4 I/O failure.
"""

import argparse
import hashlib
import json
import os
from pathlib import Path
import shutil
import sys
import tempfile
import time

import numpy as np
import numba as nb

from . import __version__
from .config import SUBCOMMANDS, ConfigError, defaults, parse_config, render

SCHEMA_VERSION = 1
EXIT_OK, EXIT_CONFIG, EXIT_NUMERIC, EXIT_IO = 0, 2, 3, 4


def _fmt(x):
    r = repr(float(x))
    return r[:-2] if r.endswith(".0") else r


def _write_csv(path, header, rows):
    with open(path, "w") as fh:
        fh.write(",".join(header) + "\n")
        for row in rows:
            fh.write(",".join(v if isinstance(v, str) else _fmt(v) for v in row) + "\n")


def _potential(cfg):
    from .model import PotentialPair
    s = cfg["potential"]
    return PotentialPair(s["ubar"], s["v"], lam=s["lam"], kappa=s["kappa"])


def _lattice(cfg):
    from .model import Lattice
    return Lattice(tuple(cfg["lattice"]["extents"]))


def _source(sec, cfg):
    from .coefficients import CoefficientTable
    from .mesosim import HarmonicSource, TableSource
    if sec["source"] == "table":
        if not sec["table"]:
            raise ConfigError("source = table needs a table path")
        return TableSource(CoefficientTable.load(sec["table"]))
    return HarmonicSource(sec["sigma"], cfg["potential"]["kappa"])


def _gk_params(sec, threads):
    from .coefficients import GKParams
    return GKParams(n_traj=sec["n_traj"], T_max=sec["t_max"], h=sec["h"],
                    record_stride=sec["record_stride"],
                    tail_extrapolation=sec["tail_extrapolation"], threads=threads)


def _simulate_micro(cfg, out, threads):
    from .microsim import SimParams, run_ensemble, save_checkpoint
    from .model import PhaseState
    from .shell import sample_product_shells
    sec, pp, lat = cfg["simulate-micro"], _potential(cfg), _lattice(cfg)
    if len(sec["energies"]) != lat.N:
        raise ConfigError("energies must list one value per lattice site")
    ids = np.arange(sec["n_traj"])
    q, p = sample_product_shells(sec["energies"], pp, cfg.seed, ids)
    params = SimParams(sec["eps"], sec["sigma"], sec["h"], sec["t"], cfg.seed,
                       sec["record_stride"])
    final, t, vals = run_ensemble(PhaseState(q, p), params, pp, lat, sec["observers"],
                                  ids, threads)
    names = sec["observers"]
    header = ["t"] + [f"{n}#{b}" if len(ids) > 1 else n for b in ids for n in names]
    rows = ([tk] + list(vals[:, r, :].ravel()) for r, tk in enumerate(t))
    _write_csv(out / "observables.csv", header, rows)
    files = ["observables.csv"]
    if sec["checkpoint"]:
        for b in ids:
            name = f"final_{b}.chk"
            save_checkpoint(out / name, PhaseState(final.q[b], final.p[b]), lat)
            files.append(name)
    return files


def _sample_shell(cfg, out, threads):
    from .shell import sample_product_shells
    sec, pp = cfg["sample-shell"], _potential(cfg)
    n = sec["n"]
    q, p = sample_product_shells([sec["a"]], pp, cfg.seed, np.arange(n))
    p2 = np.sum(p[:, 0] ** 2, -1)
    p1 = p[:, 0, 0]
    rows = [["mean_p_squared", p2.mean(), p2.std(ddof=1) / np.sqrt(n)],
            ["mean_p1", p1.mean(), p1.std(ddof=1) / np.sqrt(n)]]
    _write_csv(out / "shell_moments.csv", ["quantity", "estimate", "stderr"], rows)
    return ["shell_moments.csv"]


def _tabulate_z(cfg, out, threads):
    from .shell import log_z_derivative, partition_z
    sec, pp = cfg["tabulate-z"], _potential(cfg)
    rows = []
    for m, a in enumerate(sec["grid"]):
        z, se = partition_z(a, pp, n=sec["n"], method=sec["method"], seed=cfg.seed + m)
        dlog = log_z_derivative(a, pp) if a > 0 else float("inf")
        rows.append([a, z, se, dlog])
    _write_csv(out / "z.csv", ["a", "Z", "Z_stderr", "dlogZ"], rows)
    return ["z.csv"]


def _estimate_gk(cfg, out, threads):
    from .coefficients import green_kubo_gamma2
    sec, pp = cfg["estimate-gk"], _potential(cfg)
    est = green_kubo_gamma2(sec["a1"], sec["a2"], sec["sigma"], pp,
                            _gk_params(sec, threads), cfg.seed, direct=sec["direct"])
    _write_csv(out / "gk.csv",
               ["a1", "a2", "sigma", "gamma2", "gamma2_stderr", "t_star", "n_traj"],
               [[sec["a1"], sec["a2"], sec["sigma"], est.gamma2, est.stderr,
                 est.t_star, est.n_traj]])
    (out / "gk.json").write_text(json.dumps(est.__dict__, indent=2, sort_keys=True))
    return ["gk.csv", "gk.json"]


def _tabulate_coefficients(cfg, out, threads):
    from .coefficients import tabulate
    sec, pp = cfg["tabulate-coefficients"], _potential(cfg)
    tbl = tabulate(sorted(sec["grid"]), sec["sigma"], pp, _gk_params(sec, threads),
                   cfg.seed)
    tbl.save(out / "coefficients.csv")
    return ["coefficients.csv", "coefficients.json"]


def _simulate_meso(cfg, out, threads):
    from .mesosim import MesoParams, meso_simulate
    sec, lat = cfg["simulate-meso"], _lattice(cfg)
    if len(sec["e0"]) != lat.N:
        raise ConfigError("e0 must list one value per lattice site")
    params = MesoParams(sec["h"], sec["t"], cfg.seed, sec["record_stride"])
    e0 = np.tile(sec["e0"], (sec["n_paths"], 1))
    path = meso_simulate(e0, params, _source(sec, cfg), lat, threads=threads)
    files = []
    for b in range(sec["n_paths"]):
        name = "meso_path.csv" if sec["n_paths"] == 1 else f"meso_path_{b}.csv"
        path.to_csv(out / name, member=b)
        files.append(name)
    summary = {"clamp_frequency": path.clamp_frequency, "n_updates": path.n_updates}
    (out / "meso_summary.json").write_text(json.dumps(summary, indent=2, sort_keys=True))
    return files + ["meso_summary.json"]


def _stationarity(cfg, out, threads):
    from .mesosim import stationarity_check
    sec, lat, pp = cfg["stationarity"], _lattice(cfg), _potential(cfg)
    rep = stationarity_check(lat, _source(sec, cfg), pp, beta=sec["beta"],
                             total=sec["total"], n_samples=sec["n_samples"],
                             n_paths=sec["n_paths"], h=sec["h"], seed=cfg.seed,
                             threads=threads)
    rows = [[k, float(v)] for k, v in rep.__dict__.items()]
    _write_csv(out / "stationarity.csv", ["quantity", "value"], rows)
    (out / "stationarity.json").write_text(rep.to_json())
    return ["stationarity.csv", "stationarity.json"]


def _decay_rate(cfg, out, threads):
    from .analysis import current_decay_rate
    sec, pp = cfg["decay-rate"], _potential(cfg)
    rows, fits = [], []
    for m, s in enumerate(sec["sigmas"]):
        fit, _, _ = current_decay_rate(s, pp, a=sec["a"], n_traj=sec["n_traj"],
                                       h=sec["h"], seed=cfg.seed + m, threads=threads)
        rows.append([s, fit.rate, fit.stderr, fit.r2, fit.t_lo, fit.t_hi,
                     "true" if fit.accepted else "false"])
        fits.append(json.loads(fit.to_json()))
    _write_csv(out / "decay_rates.csv",
               ["sigma", "rate", "rate_stderr", "r2", "t_lo", "t_hi", "accepted"], rows)
    (out / "decay_rates.json").write_text(json.dumps(fits, indent=2, sort_keys=True))
    return ["decay_rates.csv", "decay_rates.json"]


def _converge(cfg, out, threads):
    from .analysis import convergence_study
    sec, pp = cfg["converge"], _potential(cfg)
    rep = convergence_study(sec["eps_list"], sec["t_macro"], sec["n_paths"], pp,
                            sec["sigma"], _source(sec, cfg), start=tuple(sec["start"]),
                            h=sec["h"], meso_h=sec["meso_h"], seed=cfg.seed,
                            threads=threads)
    rep.to_csv(out / "convergence.csv")
    (out / "convergence.json").write_text(rep.to_json())
    return ["convergence.csv", "convergence.json"]


_RUNNERS = {
    "simulate-micro": _simulate_micro, "sample-shell": _sample_shell,
    "tabulate-z": _tabulate_z, "estimate-gk": _estimate_gk,
    "tabulate-coefficients": _tabulate_coefficients, "simulate-meso": _simulate_meso,
    "stationarity": _stationarity, "decay-rate": _decay_rate, "converge": _converge,
}


def _sha256(path):
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def run(cfg, threads=None, stream=sys.stderr):
    """Execute ``cfg``; returns an exit status. Outputs land in ``output_dir``."""
    from .model import CURRENT_CONVENTION
    from .microsim import NumericalError
    from .shell import RootFindingError
    command = cfg.command
    if command not in _RUNNERS:
        print(f"error: unknown subcommand {command!r}", file=stream)
        return EXIT_CONFIG
    out_dir = Path(cfg["run"]["output_dir"])
    try:
        out_dir.mkdir(parents=True, exist_ok=True)
        stage = Path(tempfile.mkdtemp(prefix=".staging-", dir=out_dir))
    except OSError as exc:
        print(f"error: cannot write to {out_dir}: {exc}", file=stream)
        return EXIT_IO
    if threads is not None:
        nb.set_num_threads(int(threads))
    t0 = time.perf_counter()
    status, error, files = EXIT_OK, None, []
    try:
        files = _RUNNERS[command](cfg, stage, threads)
    except ConfigError as exc:
        status, error = EXIT_CONFIG, str(exc)
    except OSError as exc:
        status, error = EXIT_IO, str(exc)
    except (NumericalError, RootFindingError, ValueError, RuntimeError,
            FloatingPointError) as exc:
        status, error = EXIT_NUMERIC, f"{type(exc).__name__}: {exc}"
    if status != EXIT_OK:
        files = sorted(p.name for p in stage.iterdir())
    manifest = {
        "schema_version": SCHEMA_VERSION,
        "command": command,
        "code_version": __version__,
        "seed": cfg.seed,
        "threads": threads if threads is not None else nb.get_num_threads(),
        "config": cfg.sections,
        "config_text": render(cfg),
        "sign_convention": CURRENT_CONVENTION,
        "wall_time_s": time.perf_counter() - t0,
        "complete": status == EXIT_OK,
        "error": error,
        "outputs": [{"file": f, "sha256": _sha256(stage / f)} for f in files],
    }
    try:
        (stage / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True))
        for f in files + ["manifest.json"]:
            os.replace(stage / f, out_dir / f)
        shutil.rmtree(stage, ignore_errors=True)
    except OSError as exc:
        print(f"error: cannot finalize outputs in {out_dir}: {exc}", file=stream)
        return EXIT_IO
    if error:
        print(f"error: {error}", file=stream)
    return status


def build_parser():
    ap = argparse.ArgumentParser(prog="weakcoupling", description=__doc__.split("\n")[0])
    ap.add_argument("command", choices=SUBCOMMANDS + ("show-config",))
    ap.add_argument("config", nargs="?", help="configuration file (defaults if omitted)")
    ap.add_argument("--threads", type=int, default=None,
                    help="worker threads (default: all logical cores)")
    ap.add_argument("--output-dir", default=None)
    ap.add_argument("--seed", type=int, default=None)
    ap.add_argument("--version", action="version", version=__version__)
    return ap


def main(argv=None):
    args = build_parser().parse_args(argv)
    try:
        if args.config:
            text = Path(args.config).read_text(encoding="utf-8")
            cfg = parse_config(text)
        else:
            cfg = defaults()
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (OSError, UnicodeDecodeError) as exc:
        print(f"error: cannot read config: {exc}", file=sys.stderr)
        return EXIT_IO
    if args.threads is not None and args.threads < 1:
        print("config error: --threads must be >= 1", file=sys.stderr)
        return EXIT_CONFIG
    if args.output_dir is not None:
        cfg.sections["run"]["output_dir"] = args.output_dir
    if args.seed is not None:
        if args.seed < 0:
            print("config error: --seed must be >= 0", file=sys.stderr)
            return EXIT_CONFIG
        cfg.sections["run"]["seed"] = args.seed
    if args.command == "show-config":
        print(render(cfg))
        return EXIT_OK
    cfg.sections["run"]["command"] = args.command
    return run(cfg, threads=args.threads)


if __name__ == "__main__":
    sys.exit(main())
