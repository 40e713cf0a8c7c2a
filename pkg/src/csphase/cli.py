"""Command-line entry points producing CSV data plus a JSON run manifest.

Every command writes into ``--out`` (a directory) and exits with

    0  success
    2  invalid arguments
    3  numerical failure (quadrature, root finding, blow-up)
    4  tolerance failure in ``laplace-check``

Options can also come from ``--config FILE`` (``key = value`` lines, keys
spelled like the long flags) and, for ``simulate``, from ``--preset``.
Explicit flags override the config file, which overrides the preset.
"""
from __future__ import annotations

import argparse
import configparser
import csv
import hashlib
import json
import logging
import math
import sys
import time
from dataclasses import asdict
from importlib import metadata
from pathlib import Path

import numpy as np

from . import asymptotics, consistency, particle
from .errors import (AmbiguousBracketError, BlowUpError, NoSignChangeError, QuadratureError,
                     SupportMismatchError)
from .model import ModelParams
from .quadrature import QuadratureConfig

log = logging.getLogger("csphase")

EXIT_OK, EXIT_ARGS, EXIT_NUMERIC, EXIT_TOLERANCE = 0, 2, 3, 4
NUMERIC_ERRORS = (QuadratureError, AmbiguousBracketError, NoSignChangeError, BlowUpError,
                  SupportMismatchError, FloatingPointError, OverflowError)


def _version() -> str:
    try:
        return metadata.version("artifact")
    except metadata.PackageNotFoundError:
        return "0+unknown"


def fmt(x) -> str:
    """17 significant digits; round-trips doubles."""
    if isinstance(x, (int, np.integer)) and not isinstance(x, bool):
        return str(int(x))
    return "%.17g" % float(x)


class Outputs:
    """Collects written files for the manifest."""

    def __init__(self, out_dir: Path):
        self.dir = Path(out_dir)
        self.dir.mkdir(parents=True, exist_ok=True)
        self.files: list[Path] = []

    def csv(self, name: str, header, rows) -> Path:
        path = self.dir / name
        with open(path, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(header)
            for row in rows:
                w.writerow([v if isinstance(v, str) else fmt(v) for v in row])
        self.files.append(path)
        return path

    def text(self, name: str, body: str) -> Path:
        path = self.dir / name
        path.write_text(body, encoding="utf-8")
        self.files.append(path)
        return path

    def manifest(self, command: str, params: dict, seed, started: float, extra=None) -> Path:
        entries = [{"path": p.name, "sha256": hashlib.sha256(p.read_bytes()).hexdigest()} for p in self.files]
        body = {
            "command": command,
            "params": params,
            "seed": seed,
            "version": _version(),
            "duration_s": time.perf_counter() - started,
            "outputs": entries,
        }
        if extra:
            body.update(extra)
        path = self.dir / f"{command}.json"
        path.write_text(json.dumps(body, indent=2, sort_keys=True, default=_json_default) + "\n", encoding="utf-8")
        return path


def _json_default(obj):
    if isinstance(obj, (np.floating, np.integer)):
        return obj.item()
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    if isinstance(obj, (tuple, set)):
        return list(obj)
    return str(obj)


def _floats(text) -> list[float]:
    if isinstance(text, (list, tuple)):
        return [float(t) for t in text]
    return [float(t) for t in str(text).replace(",", " ").split()]


def _gnuplot(out: Outputs, name: str, csv_name: str, xcol: int, ycols: list[int], xlabel: str, ylabel: str):
    plots = ", ".join(f"'{csv_name}' using {xcol}:{c} with linespoints title columnhead({c})" for c in ycols)
    body = (
        "set datafile separator ','\n"
        "set key autotitle columnhead\n"
        f"set xlabel '{xlabel}'\nset ylabel '{ylabel}'\n"
        f"plot {plots}\n"
    )
    out.text(name, body)


# ---------------------------------------------------------------------------
# commands


def cmd_h_curve(a, out: Outputs):
    cfg = QuadratureConfig()
    us = np.linspace(a.u_min, a.u_max, a.u_steps)
    rows = []
    for D in _floats(a.d_list):
        p = ModelParams(a.dim, a.alpha, D)
        for u in us:
            u = float(u)
            rows.append((u, D, consistency.evaluate_H(p, u, cfg), consistency.evaluate_dH_du(p, u, cfg)))
    out.csv("h_curve.csv", ["u", "D", "H", "dH_du"], rows)
    if a.gnuplot:
        _gnuplot(out, "h_curve.gp", "h_curve.csv", 1, [3], "u", "H(u, D)")
    return {}, EXIT_OK


def cmd_bifurcation(a, out: Outputs):
    rows, summary = [], []
    for alpha in _floats(a.alpha_list):
        curve = consistency.trace_bifurcation(alpha, a.dim, d_min=a.d_min, d_max=a.d_max)
        for (D, u), g in zip(curve.samples, curve.dH_du):
            rows.append((alpha, D, u, g))
        summary.append({"alpha": alpha, "D_c": curve.d_critical, "slope_at_zero": curve.slope_at_zero,
                        "slope_closed_form": asymptotics.coefficients(alpha, a.dim).bif_slope})
    out.csv("bifurcation.csv", ["alpha", "D", "u", "dH_du_at_root"], rows)
    if a.gnuplot:
        _gnuplot(out, "bifurcation.gp", "bifurcation.csv", 2, [3, 4], "D", "u(D)")
    return {"critical_noise": summary}, EXIT_OK


def cmd_phase_diagram(a, out: Outputs):
    alphas = np.linspace(a.alpha_min, a.alpha_max, a.alpha_steps)
    Ds = np.linspace(a.d_min, a.d_max, a.d_steps)
    diagram = consistency.phase_scan(alphas, Ds, a.dim, threads=a.threads)
    out.csv("phase_diagram.csv", ["alpha", "D", "n_states"], diagram.grid)
    out.csv("phase_boundary.csv", ["alpha", "D_c"], diagram.boundary)
    if a.gnuplot:
        _gnuplot(out, "phase_diagram.gp", "phase_boundary.csv", 1, [2], "alpha", "D_c")
    extra = {"failed_points": [list(e) for e in diagram.errors]}
    return extra, EXIT_NUMERIC if diagram.errors else EXIT_OK


def cmd_dc(a, out: Outputs):
    rows, guess = [], None
    for alpha in _floats(a.alpha_list):
        dc = consistency.critical_noise(alpha, a.dim, guess=guess)
        rows.append((alpha, dc))
        guess = dc
    out.csv("dc.csv", ["alpha", "D_c"], rows)
    return {}, EXIT_OK


def _sim_config(a) -> particle.SimConfig:
    over = {
        "alpha": a.alpha, "dim": a.dim, "noise": a.noise, "n_particles": a.n_particles, "dt": a.dt,
        "t_end": a.t_end, "n_runs": a.n_runs, "record_every": a.record_every,
        "seed": a.seed,
    }
    if a.init_mean is not None or a.init_std is not None:
        base = particle.PRESETS.get(a.preset, {}).get("init", particle.InitialLaw())
        mean = _floats(a.init_mean) if a.init_mean is not None else base.mean
        std = float(a.init_std) if a.init_std is not None else base.std
        over["init"] = particle.InitialLaw.gaussian(mean, std)
    if a.noise_over_dc is not None:
        alpha = a.alpha if a.alpha is not None else particle.PRESETS[a.preset]["alpha"]
        dim = a.dim if a.dim is not None else particle.PRESETS[a.preset]["dim"]
        over["noise"] = a.noise_over_dc * consistency.critical_noise(alpha, dim)
    return particle.preset_config(a.preset, **over)


def cmd_simulate(a, out: Outputs):
    sim = _sim_config(a)
    trace = particle.run_ensemble(sim, threads=a.threads)
    N = sim.params.dim
    mean_cols = ["mean_v"] if N == 1 else [f"mean_v{i + 1}" for i in range(N)]
    rows = [(t, *m, fe) for t, m, fe in zip(trace.times, trace.mean_velocity, trace.free_energy)]
    out.csv("trace.csv", ["t", *mean_cols, "free_energy"], rows)
    masses = trace.bin_masses()
    e = trace.edges[0]
    if N == 1:
        out.csv("histogram.csv", ["bin_lo", "bin_hi", "mass"], zip(e[:-1], e[1:], masses))
    else:
        idx = np.indices(masses.shape).reshape(N, -1).T
        hist_rows = []
        for ix in idx:
            lo_hi = [x for i in ix for x in (e[i], e[i + 1])]
            hist_rows.append((*lo_hi, masses[tuple(ix)]))
        header = [f"{k}{d + 1}" for d in range(N) for k in ("bin_lo_", "bin_hi_")]
        out.csv("histogram.csv", header + ["mass"], hist_rows)
    if a.gnuplot:
        _gnuplot(out, "trace.gp", "trace.csv", 1, [2], "t", "mean velocity")
    mean, se = trace.terminal_summary()
    params = {k: v for k, v in asdict(sim).items() if k != "params"}
    params.update(asdict(sim.params))
    extra = {
        "sim_params": params,
        "terminal_mean_velocity": mean,
        "terminal_standard_error": se,
        "failed_runs": trace.failed_runs,
        "outside_fraction": trace.outside_fraction,
    }
    return extra, EXIT_OK


def cmd_laplace_check(a, out: Outputs):
    alpha, N = a.alpha, a.dim
    co = asymptotics.coefficients(alpha, N)
    rows, ok = [], True

    def add(name, closed, numeric, order, tol):
        nonlocal ok
        diff = abs(closed - numeric)
        good = diff <= tol and (math.isnan(order) or abs(order - 1.0) <= 0.1)
        ok &= good
        rows.append((name, closed, numeric, diff, order, tol, "pass" if good else "fail"))

    # derivatives at (u, D) = (1, 0): Richardson extrapolation of two small-noise values
    p1, p2 = ModelParams(N, alpha, 2e-3), ModelParams(N, alpha, 1e-3)
    pts = [consistency.evaluate_point(p, 1.0, with_dD=True) for p in (p1, p2)]
    du = 2 * pts[1].dH_du - pts[0].dH_du
    dD = 2 * pts[1].dH_dD - pts[0].dH_dD
    add("dH_du(1,0)", co.dH_du_limit, du, math.nan, 1e-3)
    add("dH_dD(1,0)", co.dH_dD_limit, dD, math.nan, 1e-3)
    add("bifurcation_slope", co.bif_slope, -dD / du, math.nan, 1e-3)
    add("k1(1)", co.k1, asymptotics.k1_from_moments(alpha, N), math.nan, 1e-12 * abs(co.k1))
    table = asymptotics.moment_table(alpha, N)
    gauss = asymptotics.moment_table_from_gaussian(alpha, N)
    for name, v in table.items():
        add(name, v, gauss[name], math.nan, 1e-12 * abs(v))
    rep = asymptotics.expansion_check(ModelParams(N, alpha), 1.0)
    for name in ("c0", "c1", "c2"):
        s = rep.scaled[name]
        extrap = 2 * s[-1] - s[-2]
        add(name, rep.leading[name], extrap, rep.slope[name], 1e-3 * max(1.0, abs(rep.leading[name])))
    out.csv("laplace_check.csv", ["name", "closed_form", "numerical", "abs_diff", "order", "tolerance", "status"],
            rows)
    return {"all_passed": ok}, EXIT_OK if ok else EXIT_TOLERANCE


COMMANDS = {
    "h-curve": cmd_h_curve,
    "bifurcation": cmd_bifurcation,
    "phase-diagram": cmd_phase_diagram,
    "dc": cmd_dc,
    "simulate": cmd_simulate,
    "laplace-check": cmd_laplace_check,
}

# built-in defaults (lowest precedence after presets)
DEFAULTS = {
    "h-curve": dict(alpha=2.0, dim=1, d_list="0.1 0.3 0.5 0.7 1.0 1.5 2.0", u_min=0.0, u_max=2.0, u_steps=81),
    "bifurcation": dict(alpha_list="2 4 6 8 10 12 14", dim=1, d_min=1e-3, d_max=None),
    "phase-diagram": dict(alpha_min=0.5, alpha_max=14.0, alpha_steps=28, d_min=0.05, d_max=1.0, d_steps=20, dim=1),
    "dc": dict(alpha_list="2", dim=1),
    "simulate": dict(preset="stability"),
    "laplace-check": dict(alpha=2.0, dim=1),
}
TYPES = {
    "alpha": float, "dim": int, "u_min": float, "u_max": float, "u_steps": int, "d_min": float, "d_max": float,
    "alpha_min": float, "alpha_max": float, "alpha_steps": int, "d_steps": int, "noise": float,
    "noise_over_dc": float, "n_particles": int, "dt": float, "t_end": float, "n_runs": int,
    "record_every": int, "seed": int, "threads": int, "init_std": float,
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="csphase", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--out", default="out", help="output directory")
        p.add_argument("--config", help="key = value file (flags override it)")
        p.add_argument("--threads", type=int, default=None)
        p.add_argument("--gnuplot", action="store_true", default=None, help="also write a gnuplot script")
        p.add_argument("--dim", type=int, default=None, choices=(1, 2, 3))
        return p

    p = common(sub.add_parser("h-curve", help="H(u, D) and dH/du on a u grid"))
    p.add_argument("--alpha", type=float)
    p.add_argument("--d-list", help="noise values, comma or space separated")
    p.add_argument("--u-min", type=float)
    p.add_argument("--u-max", type=float)
    p.add_argument("--u-steps", type=int)

    p = common(sub.add_parser("bifurcation", help="positive branch u(D) for several alpha"))
    p.add_argument("--alpha-list")
    p.add_argument("--d-min", type=float)
    p.add_argument("--d-max", type=float)

    p = common(sub.add_parser("phase-diagram", help="alpha-D classification and D_c(alpha)"))
    for name, typ in (("alpha-min", float), ("alpha-max", float), ("alpha-steps", int),
                      ("d-min", float), ("d-max", float), ("d-steps", int)):
        p.add_argument(f"--{name}", type=typ)

    p = common(sub.add_parser("dc", help="critical noise for a list of alpha"))
    p.add_argument("--alpha-list")

    p = common(sub.add_parser("simulate", help="particle ensemble"))
    p.add_argument("--preset", choices=sorted(particle.PRESETS))
    p.add_argument("--alpha", type=float)
    p.add_argument("--noise", type=float)
    p.add_argument("--noise-over-dc", type=float, help="noise as a multiple of the critical noise")
    p.add_argument("--n-particles", type=int)
    p.add_argument("--dt", type=float)
    p.add_argument("--t-end", type=float)
    p.add_argument("--n-runs", type=int)
    p.add_argument("--record-every", type=int)
    p.add_argument("--seed", type=int)
    p.add_argument("--init-mean")
    p.add_argument("--init-std", type=float)

    p = common(sub.add_parser("laplace-check", help="closed-form small-noise quantities against quadrature"))
    p.add_argument("--alpha", type=float)
    return parser


def _read_config(path: str) -> dict:
    text = Path(path).read_text(encoding="utf-8")
    cp = configparser.ConfigParser()
    cp.read_string("[run]\n" + text)
    return {k.replace("-", "_"): v for k, v in cp["run"].items()}


def resolve(args: argparse.Namespace) -> argparse.Namespace:
    """Fill unset options from the config file, then from the defaults."""
    merged = {"threads": 1, "gnuplot": False, "dim": None}
    merged.update(DEFAULTS[args.command])
    if args.config:
        for k, v in _read_config(args.config).items():
            if k not in vars(args):
                raise ValueError(f"unknown config key {k!r} for {args.command}")
            if k == "gnuplot":
                v = v.strip().lower() in ("1", "true", "yes", "on")
            elif k in TYPES:
                v = TYPES[k](v)
            merged[k] = v
    for k, v in vars(args).items():
        if v is not None:
            merged[k] = v
        elif k not in merged:
            merged[k] = None
    if merged["command"] != "simulate" and merged["dim"] is None:
        merged["dim"] = 1
    return argparse.Namespace(**merged)


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    started = time.perf_counter()
    try:
        a = resolve(args)
        out = Outputs(Path(a.out))
        extra, code = COMMANDS[a.command](a, out)
    except (ValueError, KeyError, OSError, configparser.Error) as exc:
        print(f"csphase: error: {exc}", file=sys.stderr)
        return EXIT_ARGS
    except NUMERIC_ERRORS as exc:
        print(f"csphase: numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    params = {k: v for k, v in vars(a).items() if k not in ("command", "verbose", "out")}
    seed = getattr(a, "seed", None)
    if a.command == "simulate":
        seed = extra["sim_params"]["seed"]
    out.manifest(a.command, params, seed, started, extra)
    return code


if __name__ == "__main__":
    sys.exit(main())
