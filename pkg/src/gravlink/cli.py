"""Batch front door: parse INI-style configs, dispatch experiments, emit CSV.

Commands
--------
  simulate           SSE ensemble -> trajectories.csv, ensemble_summary.csv
  master             deterministic ME -> moments.csv, rho_snapshots.csv
  kernels eta        radial eta integrals -> eta.csv
  kernels invert     profile and inverse on a log grid -> invert.csv
  kernels classify   divergence verdicts, one line per contribution
  compare            position- vs density-measurement dephasing matrices
  report earth-atom  minimized coefficients and suppression exponent
  validate           static config validation (incl. divergence preflight)

Exit codes: 0 ok, 2 config error, 3 numerical abort.  Identical config and
seed give byte-identical CSVs; thread count never changes results (fixed
block decomposition).  GRAVLINK_THREADS is the fallback for --threads.
"""

from __future__ import annotations

import argparse
import configparser
import os
import sys
import time
from dataclasses import dataclass

import numpy as np

from . import __version__
from .hilbert import trace_distance
from .kernels import (
    DivergentIntegralError,
    classify_eta_integrand,
    decoherence_profile,
    delta_kernel,
    divergence_classify,
    dp_kernel,
    eta_radial,
    gaussian_kernel,
    gaussian_smearing,
    invert_kernel,
    k_power_gaussian_smearing,
    CONVERGES,
    TWO_PI,
)
from .master import PositivityError, dump_moments_csv, dump_rho_csv, integrate
from .models import (
    ModelParams,
    ktm2_lattice_protocol,
    ktm_protocol,
    linearized_td_protocol,
    pairwise_protocol,
    universal_protocol,
)
from .analysis import Scenario, compare_ktm_td, decoherence_report
from .stochastic import NormCollapseError, dump_trajectories_csv, ensemble_density, simulate_ensemble

DEFAULT_SEED = 42

NUMERICAL_ABORTS = (NormCollapseError, PositivityError, DivergentIntegralError,
                    ArithmeticError, np.linalg.LinAlgError)


class ConfigError(ValueError):
    pass


# ---------------------------------------------------------------------------
# config parsing
# ---------------------------------------------------------------------------

def _parse_floats(text: str):
    items = [t for t in text.replace("[", " ").replace("]", " ").replace(",", " ").split() if t]
    return [float(t) for t in items]


def _parse_positions(text: str) -> np.ndarray:
    if ";" in text:
        rows = [_parse_floats(r) for r in text.split(";") if r.strip()]
        if any(len(r) != 3 for r in rows):
            raise ConfigError("positions rows must have three components")
        return np.array(rows)
    return np.array(_parse_floats(text))


def parse_kernel(text: str, hbar: float = 1.0, G: float = 1.0):
    name, _, arg = text.partition(":")
    name = name.strip().lower()
    if name == "dp":
        return dp_kernel(hbar, G)
    if name == "delta":
        return delta_kernel(float(arg) if arg else 1.0, hbar)
    if name == "gauss":
        if not arg:
            raise ConfigError("gauss kernel needs a width, e.g. gauss:0.5")
        return gaussian_kernel(float(arg), hbar)
    raise ConfigError(f"unknown kernel '{text}' (expected dp|delta:A|gauss:sigma)")


def parse_smearing(text: str, hbar: float = 1.0):
    name, _, arg = text.partition(":")
    name = name.strip().lower()
    if name in ("none", ""):
        return None
    if name == "k2gauss":
        return k_power_gaussian_smearing(float(arg) if arg else 1.0, 2.0, hbar)
    if name == "gauss":
        if not arg:
            raise ConfigError("gauss smearing needs a width, e.g. gauss:0.5")
        return gaussian_smearing(float(arg), hbar)
    raise ConfigError(f"unknown smearing '{text}' (expected k2gauss:alpha|gauss:sigma|none)")


@dataclass
class RunConfig:
    model: dict
    numerics: dict
    output_dir: str
    raw_text: str

    @classmethod
    def load(cls, path: str) -> "RunConfig":
        parser = configparser.ConfigParser()
        read = parser.read(path)
        if not read:
            raise ConfigError(f"cannot read config file {path}")
        with open(path) as fh:
            raw = fh.read()
        model = dict(parser["model"]) if parser.has_section("model") else {}
        numerics = dict(parser["numerics"]) if parser.has_section("numerics") else {}
        outdir = (parser["output"].get("directory", "out")
                  if parser.has_section("output") else "out")
        return cls(model, numerics, outdir, raw)


_MODEL_KEYS = {
    "ktm": ("masses", "positions", "omegas"),
    "pairwise": ("masses", "positions", "omegas"),
    "universal": ("masses", "positions", "omegas"),
    "ktm2": ("masses", "positions", "cutoff_a"),
    "td-linear": ("masses", "positions", "omegas", "kernel", "smearing"),
}


def validate_config(cfg: RunConfig) -> list:
    """Static diagnostics; empty list means the config is usable."""
    diags = []
    mtype = cfg.model.get("type", "").strip().lower()
    if mtype not in _MODEL_KEYS:
        diags.append(f"model.type must be one of {sorted(_MODEL_KEYS)}, got '{mtype}'")
        return diags
    for key in _MODEL_KEYS[mtype]:
        if key not in cfg.model:
            diags.append(f"model.{key} is required for type '{mtype}'")
    for key in ("dt", "t_final"):
        if key in cfg.numerics:
            try:
                v = float(cfg.numerics[key])
                if v <= 0:
                    diags.append(f"numerics.{key} must be positive")
            except ValueError:
                diags.append(f"numerics.{key} is not a number")
    if "n_traj" in cfg.numerics:
        try:
            if int(cfg.numerics["n_traj"]) < 1:
                diags.append("numerics.n_traj must be >= 1")
        except ValueError:
            diags.append("numerics.n_traj is not an integer")
    if diags:
        return diags
    if mtype == "td-linear":
        try:
            hbar = float(cfg.model.get("hbar", 1.0))
            kern = parse_kernel(cfg.model["kernel"], hbar,
                                float(cfg.model.get("g", 1.0)))
            smear = parse_smearing(cfg.model["smearing"], hbar)
        except (ConfigError, ValueError) as exc:
            diags.append(str(exc))
            return diags
        if smear is None:
            diags.append("td-linear needs a smearing function (eta4 diverges without one)")
            return diags
        for n_idx, p, name in ((0, 1, "eta0"), (2, 0, "eta2"), (4, -1, "eta4")):
            verdict = classify_eta_integrand(n_idx, smear,
                                             kern if p != 0 else None, p)
            if verdict != CONVERGES:
                diags.append(f"divergent coefficient {name}: {verdict} "
                             f"(kernel {kern.label}, smearing {smear.label})")
    try:
        _build_model(cfg, dry_run=True)
    except NUMERICAL_ABORTS:
        pass  # numerical issues are runtime, not config, concerns
    except (ConfigError, ValueError, KeyError) as exc:
        diags.append(str(exc))
    return diags


def _model_params(cfg: RunConfig) -> ModelParams:
    m = cfg.model
    cutoff = int(cfg.numerics.get("cutoff", 8))
    return ModelParams(
        masses=tuple(_parse_floats(m["masses"])),
        positions=_parse_positions(m["positions"]),
        omegas=tuple(_parse_floats(m.get("omegas", ""))or ()),
        G=float(m.get("g", 1.0)),
        hbar=float(m.get("hbar", 1.0)),
        cutoff=cutoff,
    )


def _parse_gamma(text, n):
    text = (text or "min").strip().lower()
    if text == "min":
        return None
    vals = _parse_floats(text)
    if len(vals) == 1:
        return vals[0]
    if len(vals) != n:
        raise ConfigError(f"gamma needs 1 or {n} values (or 'min')")
    return tuple(vals)


def _build_model(cfg: RunConfig, dry_run: bool = False):
    mtype = cfg.model.get("type", "").strip().lower()
    if mtype not in _MODEL_KEYS:
        raise ConfigError(f"unknown model type '{mtype}'")
    for key in _MODEL_KEYS[mtype]:
        if key not in cfg.model:
            raise ConfigError(f"model.{key} is required for type '{mtype}'")
    if mtype == "ktm2":
        m = cfg.model
        masses = _parse_floats(m["masses"])
        positions = _parse_positions(m["positions"])
        if len(set(masses)) != 1:
            raise ConfigError("the lattice model uses one particle mass")
        if dry_run:
            return None
        return ktm2_lattice_protocol(
            len(positions), masses[0], float(m["cutoff_a"]), positions,
            int(cfg.numerics.get("cutoff", 3)),
            hbar=float(m.get("hbar", 1.0)), G=float(m.get("g", 1.0)),
            include_self=m.get("include_self", "no").lower() in ("yes", "true", "1"))
    params = _model_params(cfg)
    if dry_run:
        return None
    if mtype == "ktm":
        gamma = _parse_gamma(cfg.model.get("gamma"), 2)
        return ktm_protocol(params, gamma)
    if mtype == "pairwise":
        gamma = _parse_gamma(cfg.model.get("gamma"), params.n_particles)
        rates = None if gamma is None else gamma
        return pairwise_protocol(params, rates, ndim=int(cfg.model.get("ndim", 1)))
    if mtype == "universal":
        gamma = _parse_gamma(cfg.model.get("gamma"), params.n_particles)
        return universal_protocol(params, gamma, ndim=int(cfg.model.get("ndim", 1)))
    if mtype == "td-linear":
        hbar = params.hbar
        kern = parse_kernel(cfg.model["kernel"], hbar, params.G)
        smear = parse_smearing(cfg.model["smearing"], hbar)
        if smear is None:
            raise ConfigError("td-linear needs a smearing function")
        return linearized_td_protocol(params, kern, smear)
    raise ConfigError(f"unhandled model type '{mtype}'")


# ---------------------------------------------------------------------------
# artifacts
# ---------------------------------------------------------------------------

def _write_manifest(outdir, cfg_text, command, seed, wall, extra=None):
    path = os.path.join(outdir, "run_manifest.txt")
    with open(path, "w") as fh:
        fh.write(f"command: {command}\n")
        fh.write(f"gravlink_version: {__version__}\n")
        fh.write(f"seed: {seed}\n")
        fh.write(f"wall_time_s: {wall:.3f}\n")
        for k, v in (extra or {}).items():
            fh.write(f"{k}: {v}\n")
        fh.write("config:\n")
        for line in cfg_text.splitlines():
            fh.write(f"  {line}\n")
    return path


def _numerics(cfg: RunConfig):
    num = cfg.numerics
    try:
        dt = float(num["dt"])
        t_final = float(num["t_final"])
    except KeyError as exc:
        raise ConfigError(f"numerics.{exc.args[0]} is required") from None
    seed = int(num.get("seed", DEFAULT_SEED))
    n_traj = int(num.get("n_traj", 1))
    snaps = _parse_floats(num["snapshots"]) if "snapshots" in num else [t_final]
    return dt, t_final, seed, n_traj, snaps


def cmd_simulate(args) -> int:
    cfg = RunConfig.load(args.config)
    diags = validate_config(cfg)
    if diags:
        raise ConfigError("; ".join(diags))
    protocol = _build_model(cfg)
    if not hasattr(protocol, "channels"):
        raise ConfigError("simulate needs a channel-based model (not td-linear)")
    dt, t_final, seed, n_traj, snaps = _numerics(cfg)
    if args.n_traj:
        n_traj = args.n_traj
    if args.seed is not None:
        seed = args.seed
    threads = args.threads or int(os.environ.get("GRAVLINK_THREADS", "1"))
    outdir = args.out or cfg.output_dir
    os.makedirs(outdir, exist_ok=True)
    start = time.monotonic()
    psi0 = _ground(protocol)
    ens = simulate_ensemble(protocol, psi0, dt, t_final, n_traj, seed,
                            snapshot_times=snaps, store_records=False,
                            threads=threads)
    me = integrate(psi0.density().entries, protocol, dt, t_final,
                   snapshot_times=snaps)
    summary = os.path.join(outdir, "ensemble_summary.csv")
    with open(summary, "w") as fh:
        fh.write("t,n_traj,trace_distance_to_me,max_leakage\n")
        for t in ens.times:
            td = trace_distance(ensemble_density(ens, t), me.at(t))
            leak = float(ens.leakage.max()) if ens.leakage.size else 0.0
            fh.write(f"{t:.17g},{n_traj},{td:.17g},{leak:.17g}\n")
    dump_trajectories_csv(ens, os.path.join(outdir, "trajectories.csv"),
                          include_amplitudes=args.amplitudes)
    _write_manifest(outdir, cfg.raw_text, "simulate", seed,
                    time.monotonic() - start,
                    {"n_traj": n_traj, "threads": threads, "label": protocol.label})
    print(f"wrote {summary}")
    return 0


def _ground(protocol):
    from .hilbert import ground_state
    if protocol.space is None:
        raise ConfigError("protocol carries no Hilbert space")
    return ground_state(protocol.space)


def cmd_master(args) -> int:
    cfg = RunConfig.load(args.config)
    diags = validate_config(cfg)
    if diags:
        raise ConfigError("; ".join(diags))
    protocol = _build_model(cfg)
    if not hasattr(protocol, "channels"):
        raise ConfigError("master needs a channel-based model (not td-linear)")
    dt, t_final, seed, _n, snaps = _numerics(cfg)
    outdir = args.out or cfg.output_dir
    os.makedirs(outdir, exist_ok=True)
    start = time.monotonic()
    psi0 = _ground(protocol)
    traj = integrate(psi0.density().entries, protocol, dt, t_final,
                     snapshot_times=snaps)
    dump_moments_csv(traj, protocol.space, os.path.join(outdir, "moments.csv"))
    dump_rho_csv(traj, os.path.join(outdir, "rho_snapshots.csv"))
    _write_manifest(outdir, cfg.raw_text, "master", seed,
                    time.monotonic() - start, {"label": protocol.label})
    print(f"wrote {os.path.join(outdir, 'moments.csv')}")
    return 0


def cmd_kernels_eta(args) -> int:
    smear = parse_smearing(args.smearing, args.hbar)
    if smear is None:
        raise ConfigError("eta integrals need a smearing function")
    gamma = parse_kernel(args.gamma, args.hbar, args.G) if args.gamma else None
    radii = _parse_floats(args.radii)
    outdir = args.out
    os.makedirs(outdir, exist_ok=True)
    path = os.path.join(outdir, "eta.csv")
    with open(path, "w") as fh:
        fh.write("r,eta0,eta2,eta4\n")
        for r in radii:
            vals = []
            for n_idx, p in ((0, 1 if gamma else 0), (2, 0),
                             (4, -1 if gamma else 0)):
                vals.append(eta_radial(n_idx, smear, r,
                                       gamma if p != 0 else None, p, args.hbar))
            fh.write(f"{r:.17g}," + ",".join(f"{v:.17g}" for v in vals) + "\n")
    print(f"wrote {path}")
    return 0


def cmd_kernels_invert(args) -> int:
    kern = parse_kernel(args.kernel, args.hbar, args.G)
    inv = invert_kernel(kern)
    ks = np.geomspace(args.k_min, args.k_max, args.points)
    outdir = args.out
    os.makedirs(outdir, exist_ok=True)
    path = os.path.join(outdir, "invert.csv")
    scale = (TWO_PI * args.hbar) ** 3
    with open(path, "w") as fh:
        fh.write("k,profile,inverse,product_check\n")
        for k in ks:
            g = float(kern(np.array([k]))[0])
            gi = float(inv(np.array([k]))[0])
            fh.write(f"{k:.17g},{g:.17g},{gi:.17g},{g * gi * scale:.17g}\n")
    print(f"wrote {path}")
    return 0


def cmd_kernels_classify(args) -> int:
    kern = parse_kernel(args.kernel, args.hbar, args.G)
    smear = parse_smearing(args.smearing, args.hbar)
    prof = decoherence_profile(kern, args.hbar, args.G, smearing=smear)
    for name, term in (("measurement", prof.measurement),
                       ("feedback", prof.feedback), ("total", prof.total)):
        print(f"{kern.label} smearing={smear.label if smear else 'none'} "
              f"{name}: {divergence_classify(term)}")
    return 0


def cmd_compare(args) -> int:
    kern = parse_kernel(args.kernel, args.hbar, args.G)
    smear = parse_smearing(args.smearing, args.hbar)
    if smear is None:
        raise ConfigError("compare needs a smearing function")
    params = ModelParams(masses=(args.mass, args.mass),
                         positions=[0.0, args.separation],
                         omegas=(1.0, 1.0), G=args.G, hbar=args.hbar)
    cmp = compare_ktm_td(params, kern, smear)
    print(cmp.to_text())
    if args.out:
        os.makedirs(args.out, exist_ok=True)
        path = os.path.join(args.out, "compare.csv")
        with open(path, "w") as fh:
            for row in cmp.csv_rows():
                fh.write(row + "\n")
        print(f"wrote {path}")
    return 0


def cmd_report_earth_atom(args) -> int:
    scenario = Scenario(geometry_factor=args.geometry_factor, m_atom=args.m_atom,
                        M_earth=args.m_earth, R_earth=args.r_earth,
                        dz=args.dz, duration=args.duration)
    couplings = {"pair": args.coupling} if args.coupling else {}
    rep = decoherence_report(couplings, scenario)
    print(rep.to_text())
    if args.out:
        os.makedirs(args.out, exist_ok=True)
        path = os.path.join(args.out, "earth_atom.csv")
        with open(path, "w") as fh:
            for row in rep.csv_rows():
                fh.write(row + "\n")
        print(f"wrote {path}")
    return 0


def cmd_validate(args) -> int:
    cfg = RunConfig.load(args.config)
    diags = validate_config(cfg)
    if diags:
        for d in diags:
            print(f"config error: {d}", file=sys.stderr)
        return 2
    print("config ok")
    return 0


# ---------------------------------------------------------------------------
# argument wiring
# ---------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    top = argparse.ArgumentParser(prog="gravlink", description=__doc__,
                                  formatter_class=argparse.RawDescriptionHelpFormatter)
    sub = top.add_subparsers(dest="command", required=True)

    def add_common(p):
        p.add_argument("--out", default=None, help="output directory")

    p = sub.add_parser("simulate", help="SSE trajectory ensemble")
    p.add_argument("--config", required=True)
    p.add_argument("--n-traj", type=int, default=None)
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--threads", type=int, default=None)
    p.add_argument("--amplitudes", action="store_true")
    add_common(p)
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("master", help="deterministic master equation")
    p.add_argument("--config", required=True)
    add_common(p)
    p.set_defaults(func=cmd_master)

    pk = sub.add_parser("kernels", help="kernel/regularization utilities")
    ksub = pk.add_subparsers(dest="kernels_command", required=True)

    p = ksub.add_parser("eta", help="radial eta integrals")
    p.add_argument("--smearing", required=True)
    p.add_argument("--gamma", default=None, help="correlator insertions (dp|delta:A|gauss:s)")
    p.add_argument("--radii", default="0,1,3")
    p.add_argument("--hbar", type=float, default=1.0)
    p.add_argument("--G", type=float, default=1.0)
    p.add_argument("--out", default="out")
    p.set_defaults(func=cmd_kernels_eta)

    p = ksub.add_parser("invert", help="profile and convolution inverse")
    p.add_argument("--kernel", required=True)
    p.add_argument("--k-min", type=float, default=1e-3)
    p.add_argument("--k-max", type=float, default=1e3)
    p.add_argument("--points", type=int, default=100)
    p.add_argument("--hbar", type=float, default=1.0)
    p.add_argument("--G", type=float, default=1.0)
    p.add_argument("--out", default="out")
    p.set_defaults(func=cmd_kernels_invert)

    p = ksub.add_parser("classify", help="divergence verdicts")
    p.add_argument("--kernel", required=True)
    p.add_argument("--smearing", default="none")
    p.add_argument("--hbar", type=float, default=1.0)
    p.add_argument("--G", type=float, default=1.0)
    p.set_defaults(func=cmd_kernels_classify)

    p = sub.add_parser("compare", help="position- vs density-measurement dephasing")
    p.add_argument("--kernel", default="dp")
    p.add_argument("--smearing", required=True)
    p.add_argument("--separation", type=float, required=True)
    p.add_argument("--mass", type=float, default=1.0)
    p.add_argument("--hbar", type=float, default=1.0)
    p.add_argument("--G", type=float, default=1.0)
    add_common(p)
    p.set_defaults(func=cmd_compare)

    pr = sub.add_parser("report", help="summary reports")
    rsub = pr.add_subparsers(dest="report_command", required=True)
    p = rsub.add_parser("earth-atom", help="planet-sourced dephasing of one atom")
    p.add_argument("--geometry-factor", type=float, default=0.47)
    p.add_argument("--m-atom", type=float, default=1.4e-25)
    p.add_argument("--m-earth", type=float, default=6e24)
    p.add_argument("--r-earth", type=float, default=6e6)
    p.add_argument("--dz", type=float, default=0.0)
    p.add_argument("--duration", type=float, default=0.0)
    p.add_argument("--coupling", type=float, default=None,
                   help="optional pair coupling for the minimized table")
    add_common(p)
    p.set_defaults(func=cmd_report_earth_atom)

    p = sub.add_parser("validate", help="static config validation")
    p.add_argument("--config", required=True)
    p.set_defaults(func=cmd_validate)
    return top


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except NUMERICAL_ABORTS as exc:
        print(f"numerical abort: {exc}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
