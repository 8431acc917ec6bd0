"""Densities of the pair (r_12, r_13) on a box grid, L1 distances and decay fits.

All grids live on a box [-L, L]^{2d} split into equal cells; ``values`` are
cell averages of the density, so that sum(values) * cell_volume is the mass
inside the box.  The mass outside the box is kept as ``deficit``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy import integrate
from scipy.special import log_ndtr, ndtr

from .dynamics import Ensemble, RelativeFrame
from .errors import ConfigError, NumericError, PreconditionError
from .potentials import RadialPotential

KINDS = ("analytic-stationary", "empirical-histogram", "kde")


@dataclass(frozen=True)
class GridSpec:
    """Box [-half_width, half_width]^{2d} with ``resolution`` cells per axis.

    half_width None means 6 standard deviations of the single-pair factor
    exp(-(2/N) Phi(|r|)).
    """

    d: int = 1
    resolution: int = 40
    half_width: float | None = None

    def __post_init__(self):
        if self.d not in (1, 2, 3):
            raise ConfigError("grid dimension d must be 1, 2 or 3")
        if self.resolution < 2:
            raise ConfigError("grid resolution must be >= 2")
        if self.half_width is not None and not self.half_width > 0:
            raise ConfigError("half_width must be > 0")


@dataclass(frozen=True)
class DensityGrid:
    d: int
    half_width: float
    resolution: int
    values: np.ndarray = field(repr=False)
    normalization: float
    deficit: float
    kind: str
    stderr: np.ndarray | None = field(default=None, repr=False)
    n_samples: int | None = None

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ConfigError(f"unknown density kind {self.kind!r}")
        if np.any(self.values < 0):
            raise NumericError("density values must be nonnegative")

    @property
    def ndim(self) -> int:
        return 2 * self.d

    @property
    def h(self) -> float:
        return 2 * self.half_width / self.resolution

    @property
    def cell_volume(self) -> float:
        return self.h ** self.ndim

    @property
    def bounds(self) -> np.ndarray:
        return np.tile([-self.half_width, self.half_width], (self.ndim, 1))

    def edges(self) -> np.ndarray:
        return np.linspace(-self.half_width, self.half_width, self.resolution + 1)

    def centers(self) -> np.ndarray:
        e = self.edges()
        return (e[:-1] + e[1:]) / 2

    def mass(self) -> float:
        return float(self.values.sum() * self.cell_volume)

    def same_grid(self, other: "DensityGrid") -> bool:
        return (self.d == other.d and self.resolution == other.resolution
                and math.isclose(self.half_width, other.half_width, rel_tol=1e-12))

    def swapped(self) -> "DensityGrid":
        """The density of (v, u)."""
        axes = list(range(self.d, 2 * self.d)) + list(range(self.d))
        se = None if self.stderr is None else np.transpose(self.stderr, axes)
        return DensityGrid(self.d, self.half_width, self.resolution, np.transpose(self.values, axes),
                           self.normalization, self.deficit, self.kind, se, self.n_samples)

    def marginal_u(self) -> np.ndarray:
        """Cell averages of the u-marginal, integrated over the v box."""
        axes = tuple(range(self.d, 2 * self.d))
        return self.values.sum(axis=axes) * self.h ** self.d

    def to_dict(self) -> dict:
        return {"d": self.d, "half_width": self.half_width, "resolution": self.resolution,
                "normalization": self.normalization, "deficit": self.deficit, "kind": self.kind,
                "n_samples": self.n_samples, "bounds": self.bounds.tolist()}


# ---------------------------------------------------------------------------
# stationary density


def single_factor_scale(p: RadialPotential, N: int, d: int) -> float:
    """Per-coordinate standard deviation of the density on R^d proportional to exp(-(2/N) Phi(|r|))."""
    w = lambda r: math.exp(-(2.0 / N) * (float(p(r)) - float(p(0.0))))
    m0 = integrate.quad(lambda r: r ** (d - 1) * w(r), 0, np.inf, limit=200)[0]
    m2 = integrate.quad(lambda r: r ** (d + 1) * w(r), 0, np.inf, limit=200)[0]
    return math.sqrt(m2 / m0 / d)


def default_half_width(p: RadialPotential, N: int, d: int) -> float:
    return 6.0 * single_factor_scale(p, N, d)


def _pair_exponent(p, N, u, v):
    """(2/N)[Phi(|u|) + Phi(|v|) + Phi(|u - v|)] for stacked points (..., d)."""
    nu = np.linalg.norm(u, axis=-1)
    nv = np.linalg.norm(v, axis=-1)
    nw = np.linalg.norm(u - v, axis=-1)
    return (2.0 / N) * (p(nu) + p(nv) + p(nw))


def _tensor_points(axes_pts, d):
    """All combinations of per-axis coordinates as (..., 2d) arrays."""
    mesh = np.meshgrid(*axes_pts, indexing="ij")
    return np.stack(mesh, axis=-1)


@dataclass(frozen=True)
class MCSpec:
    """Importance-sampling budget for the marginalisation factor f(u, v) when N > 3."""

    batch: int = 4000
    max_samples: int = 64000
    rel_se_cap: float = 0.05
    seed: int = 0


def _f_sampler(p, N, d, mc: MCSpec):
    """Returns a function mapping node arrays (m, d) x (m, d) -> (f, se) estimates.

    Proposal: independent N(m, sigma^2 I_d) for r_14..r_1N with sigma matched
    to the second moment of exp(-(2/N) Phi(|r|)) and m = (u + v)/3, the
    centre of the three attracting points 0, u, v; common random numbers
    across nodes.  The standard-error cap is enforced on ``check`` nodes only
    (nodes carrying non-negligible mass).
    """
    k = N - 3
    sigma = single_factor_scale(p, N, d)
    rng = np.random.default_rng([mc.seed, 7])
    phi0 = float(p(0.0))

    iu, ju = np.triu_indices(k, 1)
    n_terms = 3 * k + len(iu)  # Phi terms in the exponent, each shifted by Phi(0)
    log_norm = k * d * (math.log(sigma) + 0.5 * math.log(2 * math.pi))

    def estimate(u, v, check=None):
        m = u.shape[0]
        check = np.ones(m, bool) if check is None else check
        s1 = np.zeros(m)
        s2 = np.zeros(m)
        n = 0
        while True:
            xi = rng.standard_normal((mc.batch, k, d))
            logq = -0.5 * (xi ** 2).sum(axis=(-1, -2)) - log_norm
            for i in range(m):
                R = (u[i] + v[i]) / 3 + sigma * xi
                expo = (p(np.linalg.norm(R, axis=-1)) + p(np.linalg.norm(u[i] - R, axis=-1))
                        + p(np.linalg.norm(v[i] - R, axis=-1))).sum(axis=-1)
                if len(iu):
                    expo = expo + p(np.linalg.norm(R[:, iu] - R[:, ju], axis=-1)).sum(axis=-1)
                w = np.exp(-(2.0 / N) * (expo - n_terms * phi0) - logq)
                s1[i] += w.sum()
                s2[i] += (w * w).sum()
            n += mc.batch
            mean = s1 / n
            var = np.maximum(s2 / n - mean**2, 0.0)
            se = np.sqrt(var / n)
            rel = np.where(mean > 0, se / np.where(mean > 0, mean, 1.0), np.inf)
            rel = np.where(check, rel, 0.0)
            if rel.max() <= mc.rel_se_cap:
                break
            if n >= mc.max_samples:
                worst = int(np.argmax(rel))
                raise NumericError(
                    f"f(u, v) importance sampling: relative standard error {rel[worst]:.3g} > cap "
                    f"{mc.rel_se_cap} at node u={u[worst].tolist()}, v={v[worst].tolist()}")
        return mean, se

    return estimate


def stationary_density(frame: RelativeFrame, p: RadialPotential, grid: GridSpec | None = None,
                       mc: MCSpec | None = None, sub_order: int | None = None,
                       certified: bool | None = None) -> DensityGrid:
    """Cell averages of p_inf(u, v) = f(u, v) exp(-(2/N)[Phi(|u|)+Phi(|v|)+Phi(|u-v|)]) / Z.

    Z and the truncation deficit come from the same cell rule on a box of
    twice the half width.  For N = 3, f = 1; for N > 3 f is estimated by
    importance sampling at cell centres (per-node standard errors kept).
    """
    if certified is None:
        from .potentials import certify
        certified = certify(p).passed
    if not certified:
        raise PreconditionError(f"{p.name}: integrability of exp(-2H) not certified (pass certified=True to override)")
    N, d = frame.N, frame.d
    if N < 3:
        raise PreconditionError("the pair (r_12, r_13) needs N >= 3")
    grid = grid or GridSpec(d=d)
    if grid.d != d:
        raise ConfigError("grid dimension differs from the frame dimension")
    L = grid.half_width or default_half_width(p, N, d)
    R = grid.resolution
    h = 2 * L / R
    nd = 2 * d
    if sub_order is None:
        sub_order = {1: 4, 2: 2, 3: 1}[d] if N == 3 else 1
    # enlarged box: 2R cells per axis, the inner R are the reported box
    e = np.linspace(-2 * L, 2 * L, 2 * R + 1)
    if sub_order == 1:
        nodes, weights = np.zeros(1), np.ones(1)
    else:
        x, w = np.polynomial.legendre.leggauss(sub_order)
        nodes, weights = x / 2, w / 2
    pts_1d = (e[:-1, None] + h / 2 + h * nodes[None, :]).ravel()  # (2R*q,)
    pts = _tensor_points([pts_1d] * nd, d)
    u, v = pts[..., :d], pts[..., d:]
    logw = -(_pair_exponent(p, N, u, v) - (2.0 / N) * 3 * float(p(0.0)))
    vals = np.exp(logw)
    se = None
    if N > 3:
        flat_u = u.reshape(-1, d)
        flat_v = v.reshape(-1, d)
        flat_w = vals.ravel()
        fmean, fse = _f_sampler(p, N, d, mc or MCSpec())(flat_u, flat_v, flat_w >= 1e-8 * flat_w.max())
        se = (vals.ravel() * fse).reshape(vals.shape)
        vals = vals * fmean.reshape(vals.shape)
    # average over sub-nodes of each cell
    q = len(nodes)
    shape = []
    for _ in range(nd):
        shape += [2 * R, q]
    vals = vals.reshape(shape)
    wt = weights
    for ax in range(nd):
        vals = np.tensordot(vals, wt, axes=([ax + 1], [0]))
    if se is not None:
        se = se.reshape(shape)
        for ax in range(nd):
            se = np.tensordot(se, wt, axes=([ax + 1], [0]))
    Z = vals.sum() * h**nd
    if not (np.isfinite(Z) and Z > 0):
        raise NumericError("normalising constant is not finite and positive")
    inner = tuple([slice(R // 2, R // 2 + R)] * nd)
    box = vals[inner] / Z
    mass = float(box.sum() * h**nd)
    outer_edge = np.concatenate([vals.take([0, -1], axis=ax).ravel() for ax in range(nd)])
    if outer_edge.max(initial=0.0) / vals.max() > 1e-10:
        raise NumericError("enlarged box does not capture the density tail; increase half_width")
    return DensityGrid(d=d, half_width=L, resolution=R, values=box, normalization=mass,
                       deficit=max(0.0, 1.0 - mass), kind="analytic-stationary",
                       stderr=None if se is None else se[inner] / Z)


# ---------------------------------------------------------------------------
# empirical densities


def _grid_from(like):
    if isinstance(like, DensityGrid):
        return like.d, like.half_width, like.resolution
    if like.half_width is None:
        raise ConfigError("empirical densities need an explicit half_width (or a template grid)")
    return like.d, like.half_width, like.resolution


def density_from_samples(u, v, like, method: str = "histogram", bandwidth=None,
                         min_in_box: int = 100) -> DensityGrid:
    """Histogram (default) or product-Gaussian KDE of samples (u, v) in R^d x R^d."""
    u = np.asarray(u, float).reshape(len(u), -1)
    v = np.asarray(v, float).reshape(len(v), -1)
    d, L, R = _grid_from(like)
    if u.shape[1] != d or v.shape[1] != d:
        raise ConfigError("sample dimension differs from the grid dimension")
    X = np.concatenate([u, v], axis=1)
    n = len(X)
    h = 2 * L / R
    vol = h ** (2 * d)
    inbox = np.all(np.abs(X) <= L, axis=1)
    n_in = int(inbox.sum())
    if n_in < min_in_box:
        raise PreconditionError(f"only {n_in} samples fall inside the grid box (need >= {min_in_box})")
    edges = np.linspace(-L, L, R + 1)
    if method == "histogram":
        counts, _ = np.histogramdd(X[inbox], bins=[edges] * (2 * d))
        values = counts / (n * vol)
        mass = n_in / n
        kind = "empirical-histogram"
    elif method == "kde":
        if bandwidth is None:
            bw = X.std(axis=0, ddof=1) * n ** (-1.0 / (2 * d + 4))  # Scott's rule
        else:
            bw = np.broadcast_to(np.asarray(bandwidth, float), (2 * d,))
        # exact cell averages of each Gaussian bump: products of per-axis CDF differences
        per_axis = [np.diff(ndtr((edges[None, :] - X[:, k:k + 1]) / bw[k]), axis=1) for k in range(2 * d)]
        values = np.zeros((R,) * (2 * d))
        letters = "abcdef"[:2 * d]
        spec = ",".join("n" + c for c in letters) + "->" + letters
        for s in range(0, n, 2000):
            values += np.einsum(spec, *[P[s:s + 2000] for P in per_axis])
        values /= n * vol
        mass = float(values.sum() * vol)
        kind = "kde"
    else:
        raise ConfigError(f"unknown density method {method!r}")
    return DensityGrid(d=d, half_width=L, resolution=R, values=values, normalization=mass,
                       deficit=max(0.0, 1.0 - mass), kind=kind, n_samples=n)


def empirical_density(ens: Ensemble, t: float, like, method: str = "histogram", bandwidth=None) -> DensityGrid:
    """Density of (r_12^t, r_13^t) across the finite paths of an ensemble."""
    k = int(np.argmin(np.abs(ens.times - t)))
    if abs(ens.times[k] - t) > 1e-9 * max(1.0, abs(t)):
        raise PreconditionError(f"ensemble has no snapshot at t={t}")
    u, v = ens.pair_samples(k)
    return density_from_samples(u, v, like, method, bandwidth)


# ---------------------------------------------------------------------------
# distances and rates


def l1_distance(p: DensityGrid, q: DensityGrid) -> float:
    """In-box L1 distance plus both truncation deficits (an upper bound on the full L1 distance)."""
    if not p.same_grid(q):
        raise PreconditionError("l1_distance: grids differ")
    return float(np.abs(p.values - q.values).sum() * p.cell_volume + p.deficit + q.deficit)


def histogram_noise_floor(reference: DensityGrid, n_samples: int) -> float:
    """Expected L1 distance of an n-sample histogram from its own mean.

    Per cell, E|count/n - p| ~ sqrt(2 p (1 - p) / (pi n)) for cell mass p.
    """
    m = np.clip(reference.values * reference.cell_volume, 0, 1)
    return float(np.sum(np.sqrt(2 * m * (1 - m) / (math.pi * n_samples))))


@dataclass(frozen=True)
class RateFit:
    times: np.ndarray
    distances: np.ndarray
    fitted_rate: float
    fit_kind: str
    residual: float
    prefactor: float

    @property
    def exponent(self) -> float:
        """Decay exponent of the distance: kappa_hat / 2 (polynomial) or the rate (exponential)."""
        return self.fitted_rate / 2 if self.fit_kind == "polynomial" else self.fitted_rate

    def to_dict(self) -> dict:
        return {"times": self.times.tolist(), "distances": self.distances.tolist(),
                "fitted_rate": self.fitted_rate, "fit_kind": self.fit_kind,
                "residual": self.residual, "prefactor": self.prefactor}


def fit_decay(times, distances, kind: str = "polynomial", noise_floor: float = 0.0) -> RateFit:
    """Least-squares fit of log distance against log t (polynomial) or t (exponential).

    Polynomial: distance ~ c t^(-kappa_hat / 2), fitted_rate = kappa_hat.
    Exponential: distance ~ c exp(-lambda t), fitted_rate = lambda.
    residual is the root-mean-square error in log distance.
    """
    t = np.asarray(times, float)
    y = np.asarray(distances, float)
    if t.shape != y.shape or t.ndim != 1:
        raise ConfigError("times and distances must be 1-d arrays of equal length")
    if len(t) < 5:
        raise ConfigError("fit_decay needs at least 5 (t, distance) points")
    if np.any(y <= 0) or np.any(t <= 0):
        raise ConfigError("times and distances must be positive")
    if np.any(y <= noise_floor):
        raise NumericError(f"distances reach the Monte Carlo noise floor {noise_floor:.3g}; use a larger ensemble")
    if kind == "polynomial":
        x = np.log(t)
    elif kind == "exponential":
        x = t
    else:
        raise ConfigError(f"unknown fit kind {kind!r}")
    ly = np.log(y)
    slope, icpt = np.polyfit(x, ly, 1)
    resid = float(np.sqrt(np.mean((ly - (slope * x + icpt)) ** 2)))
    rate = -2 * slope if kind == "polynomial" else -slope
    return RateFit(t, y, float(rate), kind, resid, float(math.exp(icpt)))
