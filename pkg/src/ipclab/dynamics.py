"""Particle dynamics in full, relative and whitened (Y) coordinates.

Relative coordinates are r = (r_12, ..., r_1N) with r_1j = X_1 - X_j.  They
satisfy dr = -b(r) dt + S dW with S S^T = A, and Y = S^{-1} r solves the
gradient system dY = -grad_Y H(S Y) dt + dW.  Noise has unit intensity
throughout.
"""

from __future__ import annotations

import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np
from scipy.linalg import solve_triangular

from .errors import ConfigError, NumericError
from .potentials import RadialPotential

LAYOUTS = ("full", "relative", "Y")
PATH_BLOCK = 1024  # paths sharing one RNG stream; fixed so path p depends only on (seed, p)
GROUP_BLOCKS = 16  # blocks integrated together as one vectorised unit of work
NOISE_CHUNK = 32  # steps of noise drawn per stream at once


# ---------------------------------------------------------------------------
# relative frame


@dataclass(frozen=True)
class RelativeFrame:
    N: int
    d: int
    A: np.ndarray = field(repr=False)
    S: np.ndarray = field(repr=False)
    S_inv: np.ndarray = field(repr=False)

    @property
    def dim(self) -> int:
        return (self.N - 1) * self.d

    def full_to_relative(self, X):
        X = np.asarray(X, float)
        P = X.reshape(X.shape[:-1] + (self.N, self.d))
        return (P[..., :1, :] - P[..., 1:, :]).reshape(X.shape[:-1] + (self.dim,))

    def relative_to_full(self, r, center=None):
        """Positions with the given centroid (default 0) and relative coordinates r."""
        r = np.asarray(r, float)
        R = r.reshape(r.shape[:-1] + (self.N - 1, self.d))
        x1 = R.sum(axis=-2, keepdims=True) / self.N
        if center is not None:
            x1 = x1 + np.asarray(center, float)
        X = np.concatenate([x1, x1 - R], axis=-2)
        return X.reshape(r.shape[:-1] + (self.N * self.d,))

    def relative_to_Y(self, r):
        return np.asarray(r, float) @ self.S_inv.T

    def Y_to_relative(self, Y):
        return np.asarray(Y, float) @ self.S.T


def build_frame(N: int, d: int) -> RelativeFrame:
    """Lower block-triangular S with S S^T = A = I_{N-1} (x) I_d + 1 1^T (x) I_d.

    Row k (k = 1..N-1) of the block pattern has sqrt(1/(j(j+1))) in column
    j < k and sqrt((k+1)/k) on the diagonal.
    """
    if N < 2 or d < 1:
        raise ConfigError("build_frame: need N >= 2 and d >= 1")
    n = N - 1
    s = np.zeros((n, n))
    for k in range(1, n + 1):
        for j in range(1, k):
            s[k - 1, j - 1] = math.sqrt(1.0 / (j * (j + 1)))
        s[k - 1, k - 1] = math.sqrt((k + 1) / k)
    I = np.eye(d)
    S = np.kron(s, I)
    A = np.kron(np.eye(n) + np.ones((n, n)), I)
    err = np.max(np.abs(S @ S.T - A))
    if err > 1e-12:
        raise NumericError(f"build_frame: |S S^T - A|_max = {err:.3e}")
    S_inv = solve_triangular(S, np.eye(n * d), lower=True)
    return RelativeFrame(N, d, A, S, S_inv)


# ---------------------------------------------------------------------------
# forces and energies


def pair_force(p: RadialPotential) -> Callable:
    """x -> phi(|x|) x on arrays with the coordinates on the last axis.

    At x = 0 the force is extended by its limit 0 when Phi'(0+) = 0 and is
    an error otherwise.
    """
    vanishes = p.force_vanishes_at_zero()

    def force(x):
        r = np.sqrt(np.sum(x * x, axis=-1))
        if r.min(initial=1.0) > 0:
            return p.phi(r)[..., None] * x
        out = np.zeros_like(x)
        pos = r > 0
        zero = (r == 0)
        if np.any(zero) and not vanishes:
            idx = np.argwhere(zero)[0]
            raise NumericError(f"pair force of {p.name} has no limit at coincident pair (index {tuple(idx)})")
        out[pos] = p.phi(r[pos])[:, None] * x[pos]
        return out

    return force


def kernel_force(phi: Callable) -> Callable:
    """x -> phi(|x|) x for a kernel function finite at 0 (hypothesis-space elements)."""

    def force(x):
        r = np.sqrt(np.sum(x * x, axis=-1))
        return np.asarray(phi(r), float)[..., None] * x

    return force


def _upper_pairs(n):
    i, j = np.triu_indices(n, k=1)
    return i, j


def energy_full(p: RadialPotential, X, N: int, d: int):
    """J_Phi(X) = (1/2N) sum_{i,j} Phi(|X_i - X_j|)."""
    X = np.asarray(X, float)
    P = X.reshape(X.shape[:-1] + (N, d))
    i, j = _upper_pairs(N)
    dist = np.linalg.norm(P[..., i, :] - P[..., j, :], axis=-1)
    # diagonal terms contribute Phi(0) each
    return (2 * np.sum(p(dist), axis=-1) + N * p(0.0)) / (2 * N)


def hamiltonian(frame: RelativeFrame, p: RadialPotential, r):
    """H(r) = (1/N)[sum_j Phi(|r_1j|) + sum_{2<=i<j} Phi(|r_1i - r_1j|)]."""
    r = np.asarray(r, float)
    R = r.reshape(r.shape[:-1] + (frame.N - 1, frame.d))
    i, j = _upper_pairs(frame.N - 1)
    t1 = np.sum(p(np.linalg.norm(R, axis=-1)), axis=-1)
    t2 = np.sum(p(np.linalg.norm(R[..., i, :] - R[..., j, :], axis=-1)), axis=-1) if len(i) else 0.0
    return (t1 + t2) / frame.N


def _drift_full_from_force(force, X, N, d):
    P = X.reshape(X.shape[:-1] + (N, d))
    D = P[..., None, :, :] - P[..., :, None, :]  # D[i, j] = X_j - X_i
    iu, ju = _upper_pairs(N)
    F = force(D[..., iu, ju, :])  # force on i from j; on j from i is -F
    out = np.zeros_like(P)
    for k in range(len(iu)):
        out[..., iu[k], :] += F[..., k, :]
        out[..., ju[k], :] -= F[..., k, :]
    return (out / N).reshape(X.shape)


def drift_full(p: RadialPotential, X, N: int, d: int):
    """Component i: (1/N) sum_{j != i} phi(|X_j - X_i|)(X_j - X_i)."""
    X = np.asarray(X, float)
    return _drift_full_from_force(pair_force(p), X, N, d)


def _b_from_force(force, r, N, d):
    R = r.reshape(r.shape[:-1] + (N - 1, d))
    F1 = force(R)  # phi(r_1j) r_1j
    total = F1.sum(axis=-2, keepdims=True)
    out = F1 + total  # 2 F(r_1i) + sum_{j != i} F(r_1j)
    if N > 2:
        iu, ju = _upper_pairs(N - 1)
        Fp = force(R[..., iu, :] - R[..., ju, :])  # F(r_1i - r_1j) = F(r_ji) for i<j
        for k in range(len(iu)):
            out[..., iu[k], :] += Fp[..., k, :]
            out[..., ju[k], :] -= Fp[..., k, :]
    return (out / N).reshape(r.shape)


def drift_relative(frame: RelativeFrame, p: RadialPotential, r):
    """-b(r): b_i = (1/N)[2 phi(r_1i) r_1i + sum_{j != i}(phi(r_1j) r_1j + phi(r_ji) r_ji)]."""
    r = np.asarray(r, float)
    return -_b_from_force(pair_force(p), r, frame.N, frame.d)


def grad_hamiltonian(frame: RelativeFrame, p: RadialPotential, r):
    """grad_{r_1j} H = (1/N)[F(r_1j) + sum_{k != j} F(r_1j - r_1k)], F(x) = phi(|x|) x."""
    r = np.asarray(r, float)
    N, d = frame.N, frame.d
    force = pair_force(p)
    R = r.reshape(r.shape[:-1] + (N - 1, d))
    out = force(R).copy()
    if N > 2:
        iu, ju = _upper_pairs(N - 1)
        Fp = force(R[..., iu, :] - R[..., ju, :])
        for k in range(len(iu)):
            out[..., iu[k], :] += Fp[..., k, :]
            out[..., ju[k], :] -= Fp[..., k, :]
    return (out / N).reshape(r.shape)


def drift_Y(frame: RelativeFrame, p: RadialPotential, Y):
    """-grad_Y H(S Y) = -S^T grad_r H(r)."""
    r = frame.Y_to_relative(Y)
    return -grad_hamiltonian(frame, p, r) @ frame.S


def layout_drift(layout: str, frame: RelativeFrame, force: Callable) -> Callable:
    """Drift in the given layout for an arbitrary pair force x -> phi(|x|) x."""
    N, d = frame.N, frame.d
    if layout == "full":
        return lambda X: _drift_full_from_force(force, X, N, d)
    if layout == "relative":
        return lambda r: -_b_from_force(force, r, N, d)
    if layout == "Y":
        return lambda Y: -_b_from_force(force, Y @ frame.S.T, N, d) @ frame.S_inv.T
    raise ConfigError(f"unknown layout {layout!r}")


# ---------------------------------------------------------------------------
# simulation


@dataclass(frozen=True)
class InitialCondition:
    """Initial law, expressed in relative coordinates r in R^{d(N-1)}.

    kind: "point" (x0), "gaussian" (mean, cov), "stationary" (each path
    starts from the end of its own burn-in run of length ``burn_in`` from
    ``x0``, an independent draw from the long-run law) or "radial_power"
    (uniform direction, radius on [r_min, r_max] with density proportional
    to r^(-tail - 1); compact support, so every moment is finite, while the
    far mass keeps arriving over a long time window).
    """

    kind: str = "point"
    x0: tuple | None = None
    mean: tuple | None = None
    cov: tuple | None = None
    burn_in: float = 20.0
    r_min: float = 1.0
    r_max: float = 100.0
    tail: float = 1.0

    def __post_init__(self):
        if self.kind not in ("point", "gaussian", "stationary", "radial_power"):
            raise ConfigError(f"unknown initial condition kind {self.kind!r}")
        if self.kind == "radial_power" and not (0 < self.r_min < self.r_max and self.tail > 0):
            raise ConfigError("radial_power needs 0 < r_min < r_max and tail > 0")
        if self.burn_in <= 0:
            raise ConfigError("burn_in must be > 0")


@dataclass(frozen=True)
class SystemSpec:
    N: int
    d: int
    potential: RadialPotential
    dt: float
    T: float
    n_paths: int
    initial: InitialCondition = InitialCondition()
    seed: int = 0
    moment_s: float = 4.0
    snapshot_every: float | None = None

    def __post_init__(self):
        if self.N < 2:
            raise ConfigError("N must be >= 2")
        if self.d not in (1, 2, 3):
            raise ConfigError("d must be 1, 2 or 3")
        if not self.dt > 0:
            raise ConfigError("dt must be > 0")
        if not self.T >= self.dt:
            raise ConfigError("T must be >= dt")
        if self.n_paths < 1:
            raise ConfigError("n_paths must be >= 1")
        if not self.moment_s >= 2:
            raise ConfigError("moment_s must be >= 2")

    @property
    def n_steps(self) -> int:
        return int(round(self.T / self.dt))

    def snapshot_steps(self) -> np.ndarray:
        n = self.n_steps
        every = n if self.snapshot_every is None else max(1, int(round(self.snapshot_every / self.dt)))
        steps = list(range(0, n + 1, every))
        if steps[-1] != n:
            steps.append(n)
        return np.array(steps)

    @property
    def kappa(self) -> float:
        """Polynomial ergodicity exponent (s - 2)/(2 - theta gamma) for power_shifted potentials."""
        p = self.potential
        tg = getattr(p, "theta", None)
        if tg is None:
            raise ConfigError("kappa is defined for power_shifted potentials only")
        return (self.moment_s - 2) / (2 - p.theta * p.gamma)


@dataclass
class Ensemble:
    layout: str
    frame: RelativeFrame
    times: np.ndarray
    states: np.ndarray  # (paths, times, dim)
    seed: int
    path_start: int
    diverged_step: np.ndarray  # -1 for paths that stayed finite
    spec: SystemSpec | None = None

    @property
    def n_paths(self) -> int:
        return self.states.shape[0]

    @property
    def n_diverged(self) -> int:
        return int(np.sum(self.diverged_step >= 0))

    @property
    def alive(self) -> np.ndarray:
        return self.diverged_step < 0

    def relative(self) -> np.ndarray:
        """Snapshots in relative coordinates (full-space center dropped)."""
        if self.layout == "relative":
            return self.states
        if self.layout == "Y":
            return self.frame.Y_to_relative(self.states)
        return self.frame.full_to_relative(self.states)

    def pair_samples(self, k: int | None = None, t: float | None = None):
        """(r_12, r_13) at snapshot index k (or nearest time t) over the finite paths."""
        if k is None:
            k = int(np.argmin(np.abs(self.times - t)))
        if self.frame.N < 3:
            raise ValueError("pair samples (r_12, r_13) need N >= 3")
        rel = self.relative()[self.alive, k]
        d = self.frame.d
        return rel[:, :d], rel[:, d:2 * d]


def _noise_gen(seed, block):
    return np.random.Generator(np.random.Philox(np.random.SeedSequence([seed, 0, block])))


def _init_gen(seed, block):
    return np.random.Generator(np.random.Philox(np.random.SeedSequence([seed, 1, block])))


def _initial_relative(spec: SystemSpec, frame, blocks, lo, hi, threads):
    ic = spec.initial
    dim = frame.dim
    n = hi - lo
    x0 = np.zeros(dim) if ic.x0 is None else np.asarray(ic.x0, float)
    if x0.shape != (dim,):
        raise ConfigError(f"initial x0 must have length {dim}")
    if ic.kind == "point":
        return np.tile(x0, (n, 1))
    if ic.kind in ("gaussian", "radial_power"):
        out = np.empty((n, dim))
        for b in blocks:
            g = _init_gen(spec.seed, b)
            z = g.standard_normal((PATH_BLOCK, dim))
            if ic.kind == "gaussian":
                mean = np.zeros(dim) if ic.mean is None else np.asarray(ic.mean, float)
                cov = np.eye(dim) if ic.cov is None else np.asarray(ic.cov, float)
                x = mean + z @ np.linalg.cholesky(cov).T
            else:
                # inverse CDF of the truncated power law on [r_min, r_max]
                w = g.random(PATH_BLOCK)
                lo_t, hi_t = ic.r_min ** -ic.tail, ic.r_max ** -ic.tail
                rad = (lo_t - w * (lo_t - hi_t)) ** (-1.0 / ic.tail)
                x = x0 + z / np.linalg.norm(z, axis=1, keepdims=True) * rad[:, None]
            a, c = max(lo, b * PATH_BLOCK), min(hi, (b + 1) * PATH_BLOCK)
            out[a - lo:c - lo] = x[a - b * PATH_BLOCK:c - b * PATH_BLOCK]
        return out
    # stationary start: independent burn-in per path on a separate stream
    burn = SystemSpec(N=spec.N, d=spec.d, potential=spec.potential, dt=spec.dt, T=ic.burn_in,
                      n_paths=spec.n_paths, initial=InitialCondition("point", x0=tuple(x0)),
                      seed=_derived_seed(spec.seed, 2), moment_s=spec.moment_s)
    ens = simulate(burn, "relative", paths=(lo, hi), threads=threads)
    if ens.n_diverged:
        raise NumericError(f"burn-in diverged on {ens.n_diverged} paths")
    return ens.states[:, -1]


def _derived_seed(seed, tag):
    return int(np.random.SeedSequence([seed, tag]).generate_state(1, dtype=np.uint64)[0] >> np.uint64(1))


def _integrate_group(spec, layout, frame, drift, noise_mat, x_init, blocks, lo, hi, snaps, noise_scale):
    n, dim = x_init.shape
    gens = [_noise_gen(spec.seed, b) for b in blocks]
    slices = []
    for b in blocks:
        a, c = max(lo, b * PATH_BLOCK), min(hi, (b + 1) * PATH_BLOCK)
        slices.append((a - b * PATH_BLOCK, c - b * PATH_BLOCK))
    out = np.empty((n, len(snaps), dim))
    x = x_init.copy()
    diverged = np.full(n, -1, dtype=np.int64)
    alive = np.ones(n, dtype=bool)
    sq = math.sqrt(spec.dt) * noise_scale
    noise_dim = noise_mat.shape[1]
    snap_pos = {int(s): i for i, s in enumerate(snaps)}
    if 0 in snap_pos:
        out[:, snap_pos[0]] = x
    n_total = int(snaps[-1])
    buf, buf_pos = None, NOISE_CHUNK
    for step in range(1, n_total + 1):
        if buf_pos == NOISE_CHUNK:
            # batched draws consume each stream exactly as per-step draws would
            k = min(NOISE_CHUNK, n_total - step + 1)
            buf = np.concatenate([g.standard_normal((k, PATH_BLOCK, noise_dim))[:, a:c]
                                  for g, (a, c) in zip(gens, slices)], axis=1)
            buf_pos = 0
        xi = buf[buf_pos]
        buf_pos += 1
        with np.errstate(all="ignore"):
            if alive.all():
                x = x + drift(x) * spec.dt + sq * (xi @ noise_mat.T)
            else:
                x[alive] = x[alive] + drift(x[alive]) * spec.dt + sq * (xi[alive] @ noise_mat.T)
            finite = np.isfinite(x.sum())
        if finite:
            pass
        elif (bad := alive & ~np.all(np.isfinite(x), axis=1)).any():
            diverged[bad] = step
            alive &= ~bad
            x[bad] = np.nan
        if step in snap_pos:
            out[:, snap_pos[step]] = x
    return out, diverged


def simulate(spec: SystemSpec, layout: str = "relative", paths: tuple | None = None,
             threads: int = 1, noise_scale: float = 1.0,
             initial_states: np.ndarray | None = None) -> Ensemble:
    """Euler-Maruyama ensemble.

    full:      dX = drift_full(X) dt + dB,         B standard on R^{dN}
    relative:  dr = -b(r) dt + S dW,               W standard on R^{d(N-1)}
    Y:         dY = -grad_Y H(S Y) dt + dW

    Paths are grouped in blocks of PATH_BLOCK sharing one Philox stream keyed
    by (seed, block); a path's trajectory is therefore fixed by (seed, path
    index) whatever ``paths`` range or thread count is used.  ``noise_scale``
    is a test hook (0 gives the deterministic gradient flow).
    ``initial_states`` (in relative coordinates) overrides ``spec.initial``.
    """
    if layout not in LAYOUTS:
        raise ConfigError(f"unknown layout {layout!r}")
    frame = build_frame(spec.N, spec.d)
    lo, hi = (0, spec.n_paths) if paths is None else paths
    if not 0 <= lo < hi <= spec.n_paths:
        raise ValueError("invalid path range")
    blocks = list(range(lo // PATH_BLOCK, (hi - 1) // PATH_BLOCK + 1))
    if initial_states is not None:
        r0 = np.asarray(initial_states, float)[lo:hi] if len(initial_states) == spec.n_paths else \
            np.asarray(initial_states, float)
        if r0.shape != (hi - lo, frame.dim):
            raise ConfigError("initial_states has the wrong shape")
    else:
        r0 = _initial_relative(spec, frame, blocks, lo, hi, threads)
    force = pair_force(spec.potential)
    drift = layout_drift(layout, frame, force)
    if layout == "full":
        x0 = frame.relative_to_full(r0)
        noise_mat = np.eye(spec.N * spec.d)
    elif layout == "relative":
        x0 = r0
        noise_mat = frame.S
    else:
        x0 = frame.relative_to_Y(r0)
        noise_mat = np.eye(frame.dim)
    snaps = spec.snapshot_steps()

    groups = [blocks[i:i + GROUP_BLOCKS] for i in range(0, len(blocks), GROUP_BLOCKS)]
    jobs = []
    for g in groups:
        a, c = max(lo, g[0] * PATH_BLOCK), min(hi, (g[-1] + 1) * PATH_BLOCK)
        jobs.append((g, a, c))

    def run(job):
        g, a, c = job
        return _integrate_group(spec, layout, frame, drift, noise_mat, x0[a - lo:c - lo], g, a, c, snaps,
                                noise_scale)

    if threads > 1 and len(jobs) > 1:
        with ThreadPoolExecutor(max_workers=threads) as ex:
            results = list(ex.map(run, jobs))
    else:
        results = [run(j) for j in jobs]
    states = np.concatenate([r[0] for r in results])
    diverged = np.concatenate([r[1] for r in results])
    return Ensemble(layout=layout, frame=frame, times=snaps * spec.dt, states=states, seed=spec.seed,
                    path_start=lo, diverged_step=diverged, spec=spec)


def step_halving(spec: SystemSpec, observable: Callable, levels: int = 3, layout: str = "relative"):
    """Estimates of E[observable(state_T)] at dt, dt/2, ..., with MC standard errors.

    Returns a list of (dt, mean, stderr); successive differences estimate the
    time-discretisation bias.
    """
    out = []
    for lev in range(levels):
        s = SystemSpec(**{**spec.__dict__, "dt": spec.dt / 2**lev, "snapshot_every": None})
        ens = simulate(s, layout)
        vals = observable(ens.states[ens.alive, -1])
        out.append((s.dt, float(np.mean(vals)), float(np.std(vals, ddof=1) / math.sqrt(len(vals)))))
    return out
