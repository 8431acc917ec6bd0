"""Experiment stages: potentials -> simulate -> density -> coercivity -> learn."""

from __future__ import annotations

import logging
import math
from pathlib import Path

import numpy as np

from . import coercivity as co
from . import density as de
from . import learn as le
from . import pdkernels as pk
from .config import ExperimentConfig, SpaceConfig, load_json
from .dynamics import Ensemble, InitialCondition, SystemSpec, build_frame, simulate
from .errors import ConfigError, DomainError, NumericError, PreconditionError
from .io import Manifest, atomic_write_text, read_array, write_array, write_json
from .potentials import PowerShifted, RadialPotential, certify, from_dict

log = logging.getLogger("ipclab")

EXIT_OK, EXIT_CONFIG, EXIT_NUMERIC, EXIT_PRECONDITION = 0, 2, 3, 4


def exit_code(exc: BaseException) -> int:
    if isinstance(exc, ConfigError):
        return EXIT_CONFIG
    if isinstance(exc, (PreconditionError, DomainError)):
        return EXIT_PRECONDITION
    if isinstance(exc, NumericError):
        return EXIT_NUMERIC
    raise exc


# ---------------------------------------------------------------------------
# builders


def system_spec(cfg: ExperimentConfig, potential: RadialPotential | None = None) -> SystemSpec:
    s = cfg.system
    p = potential or from_dict(s.potential)
    ic = s.initial
    tup = lambda x: None if x is None else tuple(map(tuple, x)) if np.ndim(x) == 2 else tuple(x)
    init = InitialCondition(kind=ic.kind, x0=tup(ic.x0), mean=tup(ic.mean), cov=tup(ic.cov),
                            burn_in=float(ic.burn_in), r_min=float(ic.r_min), r_max=float(ic.r_max),
                            tail=float(ic.tail))
    return SystemSpec(N=s.N, d=s.d, potential=p, dt=float(s.dt), T=float(s.T), n_paths=s.n_paths,
                      initial=init, seed=cfg.seed, moment_s=float(s.moment_s),
                      snapshot_every=None if s.snapshot_every is None else float(s.snapshot_every))


def make_space(sc: SpaceConfig, distances=None, rule: str = "p99.5") -> co.HypothesisSpace:
    """Hypothesis space; R_max defaults to the 99.5th percentile ('p99.5') or maximum ('max') of the data."""
    if sc.kind == "constant":
        return co.constant_space(np.inf if sc.R_max is None else sc.R_max)
    R = sc.R_max
    if R is None:
        if distances is None or len(distances) == 0:
            raise ConfigError("space.R_max is not set and no data are available to choose it")
        R = float(np.percentile(distances, 99.5) if rule == "p99.5" else np.max(distances))
    if sc.kind == "hats":
        hs = co.hat_space(sc.n, R)
    else:
        hs = co.bspline_space(sc.n, R, sc.degree)
    hs.check_independent()
    return hs


def kernel_from_dict(spec) -> pk.Kernel:
    """Kernel expression tree, e.g. {"op": "exp", "arg": {"op": "inner"}}."""
    if not isinstance(spec, dict) or "op" not in spec:
        raise ConfigError("kernel spec: expected an object with an 'op' field")
    op = spec["op"]
    fields = {
        "inner": set(), "shifted_sqdist": {"a"}, "halfline_sum": set(), "power_gap": {"gamma"},
        "radial": {"potential"}, "exp": {"arg"}, "sum": {"args"}, "product": {"args"},
        "scale": {"c", "arg"}, "triangle": {"arg", "x0"}, "box": {"arg", "x0"},
        "power": {"alpha", "arg"}, "log1p": {"arg"},
    }
    if op not in fields:
        raise ConfigError(f"kernel spec: unknown op {op!r}")
    extra = set(spec) - fields[op] - {"op"}
    if extra:
        raise ConfigError(f"kernel spec {op}: unknown field(s) {sorted(extra)}")
    sub = lambda: kernel_from_dict(spec["arg"])
    try:
        if op == "inner":
            return pk.inner_product()
        if op == "shifted_sqdist":
            return pk.shifted_sqdist(float(spec.get("a", 0.0)))
        if op == "halfline_sum":
            return pk.halfline_sum()
        if op == "power_gap":
            return pk.halfline_power_gap(float(spec["gamma"]))
        if op == "radial":
            return pk.radial(from_dict(spec["potential"]))
        if op == "exp":
            return sub().exp()
        if op in ("sum", "product"):
            ks = [kernel_from_dict(a) for a in spec["args"]]
            out = ks[0]
            for k in ks[1:]:
                out = out + k if op == "sum" else out * k
            return out
        if op == "scale":
            return float(spec["c"]) * sub()
        if op == "triangle":
            return pk.transform_triangle(sub(), spec["x0"])
        if op == "box":
            return pk.transform_box(sub(), spec["x0"])
        if op == "power":
            return pk.power_and_log(sub(), float(spec["alpha"]))[0]
        return pk.power_and_log(sub(), 0.5)[1]
    except KeyError as e:
        raise ConfigError(f"kernel spec {op}: missing field {e}") from None


def load_ensemble(sidecar) -> Ensemble:
    states, side = read_array(sidecar)
    frame = build_frame(side["N"], side["d"])
    div = np.full(states.shape[0], -1, dtype=np.int64)
    for i, step in side.get("diverged", []):
        div[i] = step
    return Ensemble(layout=side["layout"], frame=frame, times=np.asarray(side["times"], float),
                    states=states, seed=side["seed"], path_start=side.get("path_start", 0),
                    diverged_step=div)


def save_ensemble(stem, ens: Ensemble, spec: SystemSpec | None = None) -> dict:
    meta = {"kind": "ensemble", "layout": ens.layout, "N": ens.frame.N, "d": ens.frame.d,
            "times": ens.times.tolist(), "seed": ens.seed, "path_start": ens.path_start,
            "n_diverged": ens.n_diverged,
            "diverged": [[int(i), int(s)] for i, s in enumerate(ens.diverged_step) if s >= 0]}
    if spec is not None:
        meta["dt"] = spec.dt
        meta["potential"] = spec.potential.to_dict()
    return write_array(stem, ens.states, meta)


def save_density(stem, g: de.DensityGrid) -> dict:
    return write_array(stem, g.values, g.to_dict())


def load_density(sidecar) -> de.DensityGrid:
    values, side = read_array(sidecar)
    kind = side.get("kind")
    if kind not in de.KINDS:
        raise ConfigError(f"{sidecar}: not a density sidecar")
    return de.DensityGrid(d=side["d"], half_width=side["half_width"], resolution=side["resolution"],
                          values=values, normalization=side["normalization"], deficit=side["deficit"],
                          kind=kind, n_samples=side.get("n_samples"))


# ---------------------------------------------------------------------------
# stage implementations


def stationary_samples(ens: Ensemble, window):
    """(u, v) pooled over snapshots in the window, path-major so batches group paths."""
    t = ens.times
    sel = np.flatnonzero((t >= window[0] - 1e-9) & (t <= window[1] + 1e-9))
    if sel.size == 0:
        raise PreconditionError(f"no snapshots in the stationary window {window}")
    rel = ens.relative()[ens.alive][:, sel]
    d = ens.frame.d
    return rel[..., :d].reshape(-1, d), rel[..., d:2 * d].reshape(-1, d)


def generalized_spectrum(G, M) -> np.ndarray:
    L = np.linalg.cholesky((M + M.T) / 2)
    Li = np.linalg.inv(L)
    C = Li @ ((G + G.T) / 2) @ Li.T
    return np.linalg.eigvalsh((C + C.T) / 2)


def stage_density(cfg, frame, p, ens, out: Path) -> dict:
    dc = cfg.density
    ref = de.stationary_density(frame, p, de.GridSpec(frame.d, dc.resolution, dc.half_width), certified=True)
    save_density(out / "stationary_density", ref)
    times = [float(t) for t in dc.times] or [float(t) for t in ens.times[1:]]
    dists = []
    for t in times:
        g = de.empirical_density(ens, t, ref, dc.method)
        dists.append(de.l1_distance(g, ref))
    floor = de.histogram_noise_floor(ref, int(ens.alive.sum()))
    result = {"times": times, "l1_distance": dists, "noise_floor": floor,
              "stationary_normalization": ref.normalization, "stationary_deficit": ref.deficit,
              "fit": None}
    if len(times) >= 5 and min(times) > 0:
        try:
            result["fit"] = de.fit_decay(times, dists, dc.fit_kind, noise_floor=floor).to_dict()
        except (NumericError, ConfigError) as e:
            result["fit_error"] = str(e)
    if isinstance(p, PowerShifted) and p.theta * p.gamma < 2:
        result["kappa"] = (cfg.system.moment_s - 2) / (2 - p.theta * p.gamma)
    return result


def stage_coercivity(cfg, p, ens) -> dict:
    cc = cfg.coercivity
    T = float(ens.times[-1])
    window = cc.stationary_window or [2 * T / 3, T]
    u, v = stationary_samples(ens, window)
    hs = make_space(cc.space, np.linalg.norm(u, axis=1), "p99.5")
    rep = co.estimate_I_infty(hs, u, v, cc.n_batches, seed=ens.seed)
    out = {"space": hs.to_dict(), "stationary_window": list(map(float, window)),
           "I_infty": rep.to_dict(), "I_infty_spectrum": generalized_spectrum(rep.G, rep.M).tolist(),
           "I_bar_T": [], "S_H": None, "time_threshold": None}
    if rep.c_hat > 0:
        sh = co.estimate_S_H(hs, rep, cc.restarts, seed=cfg.seed)
        out["S_H"] = sh.to_dict()
        if isinstance(p, PowerShifted) and p.theta * p.gamma < 2:
            kappa = (cfg.system.moment_s - 2) / (2 - p.theta * p.gamma)
            if kappa > 0:
                Tc, Tmin = co.time_threshold(sh.value, cc.C, cfg.system.N, kappa)
                out["time_threshold"] = {"T_c": Tc, "T_min": Tmin, "kappa": kappa, "C": cc.C}
    else:
        out["S_H_note"] = "c_hat is not positive; S_H not estimated"
    for Tk in cc.T_list:
        r = co.estimate_I_bar_T(hs, ens, float(Tk), cc.n_batches)
        spec = generalized_spectrum(r.G, r.M).tolist() if np.isfinite(r.c_hat) else []
        out["I_bar_T"].append({**r.to_dict(), "spectrum": spec})
    return out


def stage_learn(cfg, p, ens) -> dict:
    lc = cfg.learn
    window = lc.window or [float(ens.times[0]), float(ens.times[-1])]
    t = ens.times
    sel = (t >= window[0] - 1e-9) & (t <= window[1] + 1e-9)
    r12 = np.linalg.norm(ens.relative()[ens.alive][:, sel, :ens.frame.d], axis=-1).ravel()
    hs = make_space(lc.space, r12, "max")
    prob = le.assemble(ens, hs, tuple(window))
    c_hat = None
    try:
        u, v = stationary_samples(ens, [2 * window[1] / 3, window[1]])
        c_hat = co.estimate_I_infty(hs, u, v).c_hat
    except (PreconditionError, NumericError):
        pass
    res = le.solve_and_report(prob, r12[r12 > 0], lambda r: p.phi(r), lc.reg, c_hat)
    return {"space": hs.to_dict(), "window": window, **res.to_dict()}


def run(cfg: ExperimentConfig, out_dir=None, threads: int = 1) -> int:
    """Run every enabled stage, writing artifacts and a manifest; returns the exit code."""
    out = Path(out_dir or cfg.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    write_json(out / "config.json", cfg.to_dict())
    man = Manifest(out / "manifest.json", cfg.sha256(), cfg.seed)
    man.add_artifact("config", out / "config.json")
    current = "potentials"
    try:
        p = from_dict(cfg.system.potential)
        cert = certify(p)
        write_json(out / "potential.json", {"potential": p.to_dict(), "certificate": cert.to_dict()})
        man.add_artifact("potential", out / "potential.json")
        if not cert.passed:
            raise PreconditionError(f"{p.name}: admissibility certificate failed ({cert.note})")
        man.stage("potentials", "ok")

        current = "simulate"
        spec = system_spec(cfg, p)
        ens = simulate(spec, cfg.system.layout, threads=threads)
        save_ensemble(out / "ensemble", ens, spec)
        man.add_artifact("ensemble", out / "ensemble.bin")
        man.add_artifact("ensemble_sidecar", out / "ensemble.json")
        man.stage("simulate", "ok", n_diverged=ens.n_diverged)
        frame = ens.frame

        for name, enabled, fn in (
            ("density", cfg.density.enabled, lambda: stage_density(cfg, frame, p, ens, out)),
            ("coercivity", cfg.coercivity.enabled, lambda: stage_coercivity(cfg, p, ens)),
            ("learn", cfg.learn.enabled, lambda: stage_learn(cfg, p, ens)),
        ):
            current = name
            if not enabled:
                man.stage(name, "skipped")
                continue
            result = fn()
            write_json(out / f"{name}.json", result)
            man.add_artifact(name, out / f"{name}.json")
            if name == "density":
                man.add_artifact("stationary_density", out / "stationary_density.bin")
            man.stage(name, "ok")
    except (ConfigError, NumericError, PreconditionError, DomainError) as e:
        man.stage(current, "FAILED", f"{type(e).__name__}: {e}")
        man.finish("FAILED")
        log.error("stage %s failed: %s", current, e)
        return exit_code(e)
    man.finish("ok")
    return EXIT_OK


# ---------------------------------------------------------------------------
# report tables

TABLES = {
    "l1_decay.csv": ["t", "l1_distance"],
    "coercivity_T.csv": ["T", "c_hat_T", "stderr"],
    "coefficients.csv": ["basis_index", "coefficient"],
    "spectra.csv": ["source", "index", "eigenvalue"],
}


def _fmt(x) -> str:
    return repr(float(x)) if not isinstance(x, str) else x


def report(manifest_path, out_dir=None) -> tuple[dict, list]:
    """Write the four plot-ready CSV tables; returns (paths, warnings)."""
    manifest_path = Path(manifest_path)
    man = load_json(manifest_path)
    if not isinstance(man, dict):
        raise ConfigError(f"{manifest_path}: not a manifest")
    base = manifest_path.parent
    out = Path(out_dir) if out_dir else base / "report"
    arts = man.get("artifacts", {}) or {}
    warnings = []
    rows = {k: [] for k in TABLES}

    def artifact(name):
        if name not in arts:
            warnings.append(f"missing artifact: {name}")
            return None
        path = base / arts[name]["path"]
        if not path.exists():
            warnings.append(f"missing artifact file: {path}")
            return None
        return load_json(path)

    dens = artifact("density")
    if dens:
        rows["l1_decay.csv"] = [(t, d) for t, d in zip(dens["times"], dens["l1_distance"])]
    coer = artifact("coercivity")
    if coer:
        rows["coercivity_T.csv"] = [(r["T"], r["c_hat"], r["c_hat_se"]) for r in coer["I_bar_T"]]
        rows["spectra.csv"] = [("I_infty", i, e) for i, e in enumerate(coer["I_infty_spectrum"])]
        for r in coer["I_bar_T"]:
            rows["spectra.csv"] += [(f"I_bar_T={r['T']!r}", i, e) for i, e in enumerate(r["spectrum"])]
    lrn = artifact("learn")
    if lrn:
        rows["coefficients.csv"] = [(i, c) for i, c in enumerate(lrn["coefficients"])]
    out.mkdir(parents=True, exist_ok=True)
    paths = {}
    for name, header in TABLES.items():
        lines = [",".join(header)]
        for row in rows[name]:
            lines.append(",".join(str(x) if isinstance(x, (int, str)) and not isinstance(x, bool) else _fmt(x)
                                  for x in row))
        atomic_write_text(out / name, "\n".join(lines) + "\n")
        paths[name] = str(out / name)
    for w in warnings:
        log.warning(w)
    return paths, warnings
