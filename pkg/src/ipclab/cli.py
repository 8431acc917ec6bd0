"""Command-line interface.

Exit codes: 0 success, 2 configuration error, 3 numerical failure, 4 precondition failure.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import coercivity as co
from . import density as de
from . import learn as le
from . import pdkernels as pk
from . import pipeline as pl
from .config import load_config, load_json, space_from_dict
from .dynamics import LAYOUTS, InitialCondition, simulate
from .errors import ConfigError, PreconditionError
from .io import dump_json, write_json
from .potentials import from_dict

log = logging.getLogger("ipclab")


def _json_arg(text: str, what: str):
    """Inline JSON, or @path to read it from a file."""
    if text.startswith("@"):
        return load_json(text[1:])
    try:
        return json.loads(text)
    except json.JSONDecodeError as e:
        raise ConfigError(f"{what}: JSON parse error at line {e.lineno}, column {e.colno}: {e.msg}") from None


def _out(args) -> Path:
    p = Path(args.out or ".")
    p.mkdir(parents=True, exist_ok=True)
    return p


def _emit(obj) -> None:
    sys.stdout.write(dump_json(obj))


def cmd_simulate(args) -> int:
    cfg = load_config(args.config)
    if args.seed is not None:
        cfg = cfg.replace(seed=args.seed)
    spec = pl.system_spec(cfg)
    layout = args.layout or cfg.system.layout
    ens = simulate(spec, layout, threads=args.threads)
    out = _out(args)
    side = pl.save_ensemble(out / "ensemble", ens, spec)
    if args.csv:
        P, K, D = ens.states.shape
        rows = np.column_stack([np.repeat(np.arange(P), K), np.tile(ens.times, P),
                                ens.states.reshape(P * K, D)])
        header = "path,t," + ",".join(f"x{i}" for i in range(D))
        np.savetxt(out / "ensemble.csv", rows, delimiter=",", header=header, comments="", fmt="%.17g")
    _emit({"ensemble": str(out / "ensemble.json"), "shape": side["shape"], "n_diverged": ens.n_diverged})
    return 0


def cmd_density(args) -> int:
    a, b = pl.load_density(args.a), pl.load_density(args.b)
    _emit({"l1_distance": de.l1_distance(a, b)})
    return 0


def _manifest_ensemble(manifest):
    man = load_json(manifest)
    arts = man.get("artifacts", {}) if isinstance(man, dict) else {}
    if "ensemble_sidecar" not in arts:
        raise PreconditionError(f"{manifest}: no ensemble artifact")
    return pl.load_ensemble(Path(manifest).parent / arts["ensemble_sidecar"]["path"])


def cmd_coercivity(args) -> int:
    sc = space_from_dict(_json_arg(args.space, "--space"))
    if args.source == "stationary":
        if not args.config:
            raise ConfigError("coercivity --source stationary requires --config")
        cfg = load_config(args.config)
        if args.seed is not None:
            cfg = cfg.replace(seed=args.seed)
        spec = pl.system_spec(cfg)
        if spec.initial.kind != "stationary":
            spec = dataclasses.replace(spec, initial=InitialCondition("stationary", burn_in=spec.initial.burn_in))
        ens = simulate(spec, threads=args.threads)
        T = float(ens.times[-1])
        u, v = pl.stationary_samples(ens, [0.0, T])
        hs = pl.make_space(sc, np.linalg.norm(u, axis=1))
        rep = co.estimate_I_infty(hs, u, v, seed=spec.seed)
    else:
        if not args.manifest:
            raise ConfigError("coercivity --source ensemble requires --manifest")
        if args.T is None:
            raise ConfigError("coercivity --source ensemble requires --T")
        ens = _manifest_ensemble(args.manifest)
        r12 = np.linalg.norm(ens.relative()[ens.alive][..., :ens.frame.d], axis=-1).ravel()
        hs = pl.make_space(sc, r12)
        rep = co.estimate_I_bar_T(hs, ens, args.T)
    result = {"space": hs.to_dict(), **rep.to_dict()}
    write_json(_out(args) / "coercivity_cli.json", result)
    _emit({"c_hat": rep.c_hat, "c_hat_se": rep.c_hat_se, "n_samples": rep.n_samples,
           "source": rep.source, "low_sample": rep.low_sample})
    return 0


def cmd_pdtest(args) -> int:
    k = pl.kernel_from_dict(_json_arg(args.kernel, "--kernel"))
    fn = pk.test_pd if args.mode == "pd" else pk.test_nd
    rep = fn(k, d=args.d, n=args.n, trials=args.trials, seed=args.seed or 0)
    _emit(rep.to_dict())
    return 0


def cmd_learn(args) -> int:
    ens = _manifest_ensemble(args.manifest)
    sc = space_from_dict(_json_arg(args.space, "--space"))
    window = tuple(args.window) if args.window else (float(ens.times[0]), float(ens.times[-1]))
    t = ens.times
    sel = (t >= window[0] - 1e-9) & (t <= window[1] + 1e-9)
    r12 = np.linalg.norm(ens.relative()[ens.alive][:, sel, :ens.frame.d], axis=-1).ravel()
    hs = pl.make_space(sc, r12, "max")
    prob = le.assemble(ens, hs, window)
    phi_true = None
    if args.config:
        p = from_dict(load_config(args.config).system.potential)
        phi_true = p.phi
    res = le.solve_and_report(prob, r12[r12 > 0], phi_true, args.reg)
    result = {"space": hs.to_dict(), "window": list(window), **res.to_dict()}
    write_json(_out(args) / "learn_cli.json", result)
    _emit(result)
    return 0


def cmd_run(args) -> int:
    cfg = load_config(args.config)
    if args.seed is not None:
        cfg = cfg.replace(seed=args.seed)
    return pl.run(cfg, args.out, threads=args.threads)


def cmd_report(args) -> int:
    paths, warnings = pl.report(args.manifest, args.out)
    _emit({"tables": paths, "warnings": warnings})
    return 0


def _common(p: argparse.ArgumentParser, suppress: bool) -> None:
    d = (lambda v: argparse.SUPPRESS) if suppress else (lambda v: v)
    p.add_argument("--seed", type=int, default=d(None), help="override the master seed")
    p.add_argument("--threads", type=int, default=d(1), help="worker threads (results do not depend on it)")
    p.add_argument("--out", default=d(None), help="output directory")
    p.add_argument("-v", "--verbose", action="store_true", default=d(False))


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="ipclab", description=__doc__.splitlines()[0])
    _common(ap, False)
    sub = ap.add_subparsers(dest="command", required=True)

    def add(name, fn, help):
        p = sub.add_parser(name, help=help)
        _common(p, True)
        p.set_defaults(func=fn)
        return p

    p = add("simulate", cmd_simulate, "simulate an ensemble from a config")
    p.add_argument("config")
    p.add_argument("--layout", choices=LAYOUTS)
    p.add_argument("--csv", action="store_true", help="also write ensemble.csv")

    p = add("density", cmd_density, "L1 distance between two density grids")
    p.add_argument("a")
    p.add_argument("b")

    p = add("coercivity", cmd_coercivity, "estimate the coercivity constant on a basis")
    p.add_argument("--space", required=True, help='JSON or @file, e.g. {"kind": "hats", "n": 8}')
    p.add_argument("--source", choices=("stationary", "ensemble"), default="stationary")
    p.add_argument("--config")
    p.add_argument("--manifest")
    p.add_argument("--T", type=float)

    p = add("pdtest", cmd_pdtest, "randomized positive-definiteness test of a kernel")
    p.add_argument("--kernel", required=True, help="kernel expression tree as JSON or @file")
    p.add_argument("--mode", choices=("pd", "nd"), default="pd")
    p.add_argument("--d", type=int, default=1)
    p.add_argument("--n", type=int, default=30)
    p.add_argument("--trials", type=int, default=20)

    p = add("learn", cmd_learn, "least-squares estimate of phi from an ensemble")
    p.add_argument("--manifest", required=True)
    p.add_argument("--space", required=True)
    p.add_argument("--config", help="config holding the true potential, for the error report")
    p.add_argument("--window", type=float, nargs=2)
    p.add_argument("--reg", type=float)

    p = add("run", cmd_run, "run the full pipeline from a config")
    p.add_argument("config")

    p = add("report", cmd_report, "write plot-ready CSV tables from a run manifest")
    p.add_argument("manifest")
    return ap


def main(argv=None) -> int:
    ap = build_parser()
    args = ap.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(message)s", stream=sys.stderr)
    try:
        return args.func(args)
    except Exception as e:
        code = pl.exit_code(e)
        print(f"error: {e}", file=sys.stderr)
        return code


if __name__ == "__main__":
    sys.exit(main())
