"""Coercivity functionals on finite-dimensional spaces of radial functions.

For h = sum_i c_i psi_i the bilinear form is

    I(h) = E[h(|u|) h(|v|) <u, v> / (|u| |v|)],    (u, v) = (r_12, r_13),

taken under the stationary law (I_infty) or averaged over [0, T] along a
trajectory ensemble (I_bar_T).  Both are estimated as matrices G with
c^T G c = I(h), next to the Gram matrix M of L^2(rho), rho the law of |u|.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np
from scipy import integrate
from scipy.interpolate import BSpline
from scipy.special import gammaln

from .dynamics import Ensemble
from .errors import ConfigError, NumericError, PreconditionError

SUP_GRID = 10_000
N_BATCHES = 20


# ---------------------------------------------------------------------------
# hypothesis spaces


@dataclass(frozen=True)
class HypothesisSpace:
    """Radial basis functions on [0, R_max], zero outside."""

    kind: str
    R_max: float
    functions: tuple = field(repr=False)
    params: dict = field(default_factory=dict)

    def __post_init__(self):
        if not self.R_max > 0:
            raise ConfigError("R_max must be > 0")
        if not self.functions:
            raise ConfigError("hypothesis space needs at least one basis function")

    @property
    def n(self) -> int:
        return len(self.functions)

    def evaluate(self, r) -> np.ndarray:
        """Basis values, shape r.shape + (n,)."""
        r = np.asarray(r, float)
        out = np.stack([np.asarray(f(r), float) * np.ones_like(r) for f in self.functions], axis=-1)
        out[(r < 0) | (r > self.R_max)] = 0.0
        return out

    def combine(self, coef) -> Callable:
        coef = np.asarray(coef, float)
        return lambda r: self.evaluate(r) @ coef

    def sup_grid(self) -> np.ndarray:
        top = self.R_max if np.isfinite(self.R_max) else 1.0
        return np.linspace(0.0, top, SUP_GRID)

    def sup_norms(self) -> np.ndarray:
        return np.abs(self.evaluate(self.sup_grid())).max(axis=0)

    def l2_gram(self, n_nodes: int = 4000) -> np.ndarray:
        """Gram matrix in L^2([0, R_max]) by composite midpoint quadrature."""
        top = self.R_max if np.isfinite(self.R_max) else 1.0
        r = (np.arange(n_nodes) + 0.5) * top / n_nodes
        B = self.evaluate(r)
        return B.T @ B * (top / n_nodes)

    def check_independent(self, max_cond: float = 1e10) -> float:
        """Condition number of the normalised L^2 Gram; raises when the basis is dependent."""
        G = self.l2_gram()
        dg = np.sqrt(np.diag(G))
        if np.any(dg <= 0):
            bad = np.flatnonzero(dg <= 0).tolist()
            raise ConfigError(f"basis functions {bad} vanish on [0, R_max]")
        cond = float(np.linalg.cond(G / np.outer(dg, dg)))
        if not cond < max_cond:
            raise ConfigError(f"basis is numerically dependent (L2 Gram condition {cond:.3g})")
        return cond

    def to_dict(self) -> dict:
        return {"kind": self.kind, "R_max": self.R_max, "n": self.n, **self.params}


def hat_space(n: int, R_max: float) -> HypothesisSpace:
    """n piecewise-linear hats on the uniform knots k R_max/(n-1); the first is a half hat at 0."""
    if n < 2:
        raise ConfigError("hat space needs n >= 2")
    knots = np.linspace(0.0, R_max, n)
    h = knots[1] - knots[0]

    def hat(c):
        return lambda r: np.maximum(0.0, 1.0 - np.abs(np.asarray(r, float) - c) / h)

    return HypothesisSpace("hats", float(R_max), tuple(hat(c) for c in knots), {"n": n})


def bspline_space(n: int, R_max: float, degree: int = 3) -> HypothesisSpace:
    """n clamped B-splines of the given degree on a uniform knot grid over [0, R_max]."""
    if n < degree + 1:
        raise ConfigError("B-spline space needs n >= degree + 1")
    inner = np.linspace(0.0, R_max, n - degree + 1)
    t = np.concatenate([[0.0] * degree, inner, [R_max] * degree])
    funcs = []
    for i in range(n):
        c = np.zeros(n)
        c[i] = 1.0
        spl = BSpline(t, c, degree, extrapolate=False)
        funcs.append(lambda r, spl=spl: np.nan_to_num(spl(np.asarray(r, float))))
    return HypothesisSpace("bsplines", float(R_max), tuple(funcs), {"n": n, "degree": degree})


def constant_space(R_max: float = np.inf) -> HypothesisSpace:
    return HypothesisSpace("constant", float(R_max), (lambda r: np.ones_like(np.asarray(r, float)),))


def custom_space(functions: Sequence[Callable], R_max: float) -> HypothesisSpace:
    return HypothesisSpace("custom", float(R_max), tuple(functions))


# ---------------------------------------------------------------------------
# reports


@dataclass(frozen=True)
class CoercivityReport:
    G: np.ndarray = field(repr=False)
    M: np.ndarray = field(repr=False)
    c_hat: float
    G_se: np.ndarray = field(repr=False)
    M_se: np.ndarray = field(repr=False)
    c_hat_se: float
    n_samples: int
    seed: int | None = None
    source: str = "stationary"
    T: float | None = None
    low_sample: bool = False
    eigvec: np.ndarray | None = field(default=None, repr=False)

    def to_dict(self) -> dict:
        return {"G": self.G.tolist(), "M": self.M.tolist(), "c_hat": self.c_hat,
                "G_se": self.G_se.tolist(), "M_se": self.M_se.tolist(), "c_hat_se": self.c_hat_se,
                "n_samples": self.n_samples, "seed": self.seed, "source": self.source, "T": self.T,
                "low_sample": self.low_sample,
                "eigvec": None if self.eigvec is None else self.eigvec.tolist()}


def _whiten(M: np.ndarray):
    try:
        return np.linalg.cholesky(M)
    except np.linalg.LinAlgError:
        raise PreconditionError("M is not positive definite") from None


def pencil_min(G, M):
    """Smallest eigenvalue of M^{-1/2} G M^{-1/2} and its M-normalised eigenvector."""
    G = np.asarray(G, float)
    M = np.asarray(M, float)
    L = _whiten((M + M.T) / 2)
    Li = np.linalg.solve(L, np.eye(len(L)))
    C = Li @ ((G + G.T) / 2) @ Li.T
    w, V = np.linalg.eigh((C + C.T) / 2)
    return float(w[0]), Li.T @ V[:, 0]


def coercivity_constant(report_or_G, M=None) -> float:
    """min over the M-unit sphere of c^T G c (symmetric generalised eigenvalue)."""
    if M is None:
        G, M = report_or_G.G, report_or_G.M
    else:
        G = report_or_G
    return pencil_min(G, M)[0]


def _check_M(M, low_sample):
    n = len(M)
    dg = np.diag(M)
    scale = dg.max() if dg.size else 0.0
    tiny = np.flatnonzero(dg <= 1e-12 * max(scale, 1e-300))
    if tiny.size:
        raise PreconditionError(f"L2(rho) Gram is singular: basis functions {tiny.tolist()} "
                                "carry no data (basis unsupported by the sample range)")
    s = np.sqrt(dg)
    w, V = np.linalg.eigh(M / np.outer(s, s))
    if w[0] <= 1e-12 * n:
        idx = np.flatnonzero(np.abs(V[:, 0]) > 0.1).tolist()
        raise PreconditionError(f"L2(rho) Gram is near-singular (min normalised eigenvalue {w[0]:.3g}); "
                                f"offending basis functions {idx}")


def _cos_angle(u, v):
    nu = np.linalg.norm(u, axis=-1)
    nv = np.linalg.norm(v, axis=-1)
    den = nu * nv
    dot = np.sum(u * v, axis=-1)
    return np.where(den > 0, dot / np.where(den > 0, den, 1.0), 0.0), nu, nv


def _sample_forms(hs, u, v):
    """Per-sample contributions summed: G sum and M sum for arrays (n, d)."""
    cos, nu, nv = _cos_angle(u, v)
    Pu = hs.evaluate(nu)
    Pv = hs.evaluate(nv)
    G = Pu.T @ (cos[:, None] * Pv)
    M = (Pu.T @ Pu + Pv.T @ Pv) / 2
    return (G + G.T) / 2, M


def _finish(hs, Gb, Mb, weights, n_samples, seed, source, T, low_sample):
    """Combine batch estimates (each already a mean) into a report with batch-means errors."""
    weights = np.asarray(weights, float) / np.sum(weights)
    G = np.einsum("b,bij->ij", weights, Gb)
    M = np.einsum("b,bij->ij", weights, Mb)
    nb = len(Gb)
    G_se = np.sqrt(np.einsum("b,bij->ij", weights, (Gb - G) ** 2) / max(nb - 1, 1)) if nb > 1 else np.full_like(G, np.nan)
    M_se = np.sqrt(np.einsum("b,bij->ij", weights, (Mb - M) ** 2) / max(nb - 1, 1)) if nb > 1 else np.full_like(M, np.nan)
    try:
        _check_M(M, low_sample)
        c_hat, vec = pencil_min(G, M)
    except PreconditionError:
        if not low_sample:
            raise
        c_hat, vec = float("nan"), None
    if vec is not None and nb > 1:
        # delta method: d c_hat = v^T (dG - c_hat dM) v for the M-normalised eigenvector v
        batch_c = np.einsum("i,bij,j->b", vec, Gb - c_hat * Mb, vec)
        c_se = float(np.sqrt(np.sum(weights * (batch_c - np.sum(weights * batch_c)) ** 2) / (nb - 1)))
    else:
        c_se = float("nan")
    if vec is not None and not np.isfinite(c_hat):
        raise NumericError("coercivity estimate is not finite")
    return CoercivityReport(G=G, M=M, c_hat=c_hat, G_se=G_se, M_se=M_se, c_hat_se=c_se,
                            n_samples=int(n_samples), seed=seed, source=source, T=T,
                            low_sample=low_sample, eigvec=vec)


def estimate_I_infty(hs: HypothesisSpace, u, v, n_batches: int = N_BATCHES,
                     seed: int | None = None) -> CoercivityReport:
    """Monte Carlo G and M from stationary samples (u, v) = (r_12, r_13).

    Standard errors use ``n_batches`` contiguous batch means, so the samples
    should be ordered independently of their values (paths are).
    """
    u = np.asarray(u, float).reshape(len(u), -1)
    v = np.asarray(v, float).reshape(len(v), -1)
    n = len(u)
    if n < n_batches:
        raise PreconditionError(f"need at least {n_batches} samples, got {n}")
    bounds = np.linspace(0, n, n_batches + 1).astype(int)
    Gb, Mb, w = [], [], []
    for a, b in zip(bounds[:-1], bounds[1:]):
        G, M = _sample_forms(hs, u[a:b], v[a:b])
        Gb.append(G / (b - a))
        Mb.append(M / (b - a))
        w.append(b - a)
    return _finish(hs, np.array(Gb), np.array(Mb), w, n, seed, "stationary", None, False)


def trapezoid_weights(times: np.ndarray) -> np.ndarray:
    t = np.asarray(times, float)
    if len(t) == 1:
        return np.ones(1)
    w = np.zeros(len(t))
    dt = np.diff(t)
    w[:-1] += dt / 2
    w[1:] += dt / 2
    return w


def estimate_I_bar_T(hs: HypothesisSpace, ens: Ensemble, T: float, n_batches: int = N_BATCHES,
                     t0: float = 0.0) -> CoercivityReport:
    """Time average over the snapshots in [t0, T] (trapezoid rule) of the coercivity form.

    M is the Gram against the time-averaged law of |r_12| (pooling paths and
    snapshots with the same weights).  Batches are groups of paths.
    """
    tol = 1e-9 * max(1.0, T)
    sel = np.flatnonzero((ens.times >= t0 - tol) & (ens.times <= T + tol))
    if sel.size == 0:
        raise PreconditionError(f"ensemble has no snapshots in [{t0}, {T}]")
    if abs(ens.times[sel[-1]] - T) > tol:
        raise PreconditionError(f"ensemble does not reach T={T}")
    times = ens.times[sel]
    tw = trapezoid_weights(times)
    rel = ens.relative()[ens.alive]
    d = ens.frame.d
    n_paths = len(rel)
    nb = min(n_batches, n_paths)
    if nb < 1:
        raise PreconditionError("ensemble has no finite paths")
    low = len(sel) < 3 or n_paths < 10 * hs.n
    bounds = np.linspace(0, n_paths, nb + 1).astype(int)
    Gb, Mb, w = [], [], []
    for a, b in zip(bounds[:-1], bounds[1:]):
        G = np.zeros((hs.n, hs.n))
        M = np.zeros((hs.n, hs.n))
        for k, wk in zip(sel, tw):
            g, m = _sample_forms(hs, rel[a:b, k, :d], rel[a:b, k, d:2 * d])
            G += wk * g
            M += wk * m
        Gb.append(G / ((b - a) * tw.sum()))
        Mb.append(M / ((b - a) * tw.sum()))
        w.append(b - a)
    if len(np.unique(rel[:, sel, :2 * d].reshape(-1, 2 * d), axis=0)) < 10 * hs.n:
        low = True
    return _finish(hs, np.array(Gb), np.array(Mb), w, n_paths * len(sel), ens.seed, "ensemble", float(T), low)


# ---------------------------------------------------------------------------
# S_H and time thresholds


@dataclass(frozen=True)
class SHEstimate:
    value: float
    coefficients: np.ndarray = field(repr=False)
    argmax_r: float
    lower_bound: bool = True  # multistart search: the true supremum may be larger
    restarts: int = 32
    seed: int = 0

    def to_dict(self) -> dict:
        return {"value": self.value, "coefficients": self.coefficients.tolist(),
                "argmax_r": self.argmax_r, "lower_bound": self.lower_bound,
                "restarts": self.restarts, "seed": self.seed}


def estimate_S_H(hs: HypothesisSpace, report: CoercivityReport, restarts: int = 32, seed: int = 0,
                 iters: int = 300) -> SHEstimate:
    """Multistart projected (sub)gradient ascent of ||h||_inf^2 / I(h) on the M-unit sphere.

    ||h||_inf is taken on a 10^4-point grid over [0, R_max].  Each run ends
    with a polish step at its active grid point r*: for fixed r* the ratio
    h(r*)^2 / c^T G c is maximised exactly by c proportional to G^{-1} psi(r*).
    """
    if not report.c_hat > 0:
        raise PreconditionError("S_H needs c_hat > 0")
    G, M = (report.G + report.G.T) / 2, (report.M + report.M.T) / 2
    B = hs.evaluate(hs.sup_grid())
    rng = np.random.default_rng(seed)
    L = np.linalg.cholesky(M)

    def ratio(c):
        q = c @ G @ c
        hv = B @ c
        k = int(np.argmax(np.abs(hv)))
        return hv[k] ** 2 / q, k, q, hv[k]

    def project(c):
        return c / math.sqrt(c @ M @ c)

    best = (-np.inf, None, 0)
    for _ in range(restarts):
        c = project(np.linalg.solve(L.T, rng.standard_normal(hs.n)))
        f, k, q, hk = ratio(c)
        step = 0.1
        for _ in range(iters):
            grad = 2 * hk * B[k] / q - f * 2 * (G @ c) / q
            grad -= (c @ M @ grad) * c  # tangent to the sphere
            cand = project(c + step * grad / max(np.linalg.norm(grad), 1e-300))
            fc, kc, qc, hc = ratio(cand)
            if fc > f:
                c, f, k, q, hk = cand, fc, kc, qc, hc
                step *= 1.2
            else:
                step *= 0.5
                if step < 1e-10:
                    break
        cp = project(np.linalg.solve(G, B[k]))
        fp, kp, _, _ = ratio(cp)
        if fp > f:
            c, f, k = cp, fp, kp
        if f > best[0]:
            best = (f, c, k)
    f, c, k = best
    if not np.isfinite(f):
        raise NumericError("S_H search returned a non-finite value (direction with c_hat near 0)")
    return SHEstimate(float(f), c, float(hs.sup_grid()[k]), True, restarts, seed)


def time_threshold(S_H: float, C: float, N: int, kappa: float):
    """T_c = (8 C N S_H^2)^(1/kappa) and T_min = (1 + 4 S_H) T_c."""
    if not kappa > 0:
        raise PreconditionError("time threshold needs kappa > 0")
    if not C > 0:
        raise ConfigError("C must be > 0")
    if not S_H > 0:
        raise ConfigError("S_H must be > 0")
    Tc = (8.0 * C * N * S_H**2) ** (1.0 / kappa)
    return Tc, (1.0 + 4.0 * S_H) * Tc


# ---------------------------------------------------------------------------
# the ||h||_* series (d = 1)


@dataclass(frozen=True)
class NormStar:
    value: float  # truncated sum plus the extrapolated tail
    truncated: float
    tail_estimate: float
    tail_exponent: float
    terms: np.ndarray = field(repr=False)
    k_max: int

    def to_dict(self) -> dict:
        return {"value": self.value, "truncated": self.truncated, "tail_estimate": self.tail_estimate,
                "tail_exponent": self.tail_exponent, "terms": self.terms.tolist(), "k_max": self.k_max}


def _support_bound(h: Callable) -> float:
    """Radius beyond which h is negligible (|h| < 1e-17 max) on a geometric scan."""
    r = np.geomspace(1e-6, 1e6, 2401)
    vals = np.maximum(np.abs(np.asarray(h(r), float)), np.abs(np.asarray(h(-r), float)))
    big = np.flatnonzero(vals > 1e-17 * vals.max(initial=0.0))
    if big.size == 0:
        return 1.0
    if big[-1] == len(r) - 1:
        raise PreconditionError("norm_star needs h to decay (or vanish) at infinity")
    return float(r[big[-1] + 1])


def norm_star(h: Callable, a: float, gamma: float, k_max: int = 120, support: float | None = None,
              epsrel: float = 1e-9) -> NormStar:
    """sum_k int_0^inf e^{-lambda a} (2 lambda)^{k-1} k/k! |J_k(lambda)|^2 lambda^{-gamma-1} dlambda.

    J_k(lambda) = int_R h(u) e^{-lambda u^2} u^k/|u| du
                = int_0^inf [h(u) + (-1)^k h(-u)] e^{-lambda u^2} u^{k-1} du,
    so for symmetric h only even k contribute.  The inner integral uses a
    composite Gauss-Legendre rule on geometric segments of (0, support]
    with every factor formed in log space; the lambda integral runs over
    s = log(lambda).  The tail beyond k_max is extrapolated from a power law
    fitted to the last terms.
    """
    if not 0 < gamma < 1:
        raise PreconditionError("norm_star needs gamma in (0, 1)")
    if a < 0:
        raise ConfigError("a must be >= 0")
    U = support if support is not None else _support_bound(h)
    ks = np.arange(1, k_max + 1)
    x, w = np.polynomial.legendre.leggauss(16)
    edges = np.geomspace(U * 1e-16, U, 61)
    lo_e, hi_e = edges[:-1, None], edges[1:, None]
    u = ((hi_e - lo_e) * (x + 1) / 2 + lo_e).ravel()
    wu = ((hi_e - lo_e) / 2 * w).ravel()
    hu = np.asarray(h(u), float)
    hm = np.asarray(h(-u), float)
    sign = np.where(ks % 2 == 0, 1.0, -1.0)
    H = hu[None, :] + sign[:, None] * hm[None, :]  # (k, nodes)
    logu = np.log(u)
    half_logc = 0.5 * ((ks - 1) * math.log(2) + np.log(ks) - gammaln(ks + 1))

    def integrand(s):
        lam = math.exp(s)
        # sqrt of (2 lambda)^{k-1} k/k! lambda-power folded into each node weight
        expo = (ks[:, None] - 1) * (logu[None, :] + 0.5 * s) - lam * u[None, :] ** 2 + half_logc[:, None]
        A = np.sum(H * wu[None, :] * np.exp(expo), axis=1)
        return A * A * math.exp(-a * lam - gamma * s)

    terms = np.zeros(k_max)
    if not np.any(H):
        return NormStar(0.0, 0.0, 0.0, float("inf"), terms, k_max)
    # in s = log(lambda) a convergent lambda -> 0 end has an integrand decaying as s -> -inf
    f60, f40 = integrand(-60.0), integrand(-40.0)
    divergent = (f60 > 0) & (f60 >= f40)
    for lo, hi in [(-60.0, -20.0), (-20.0, -5.0), (-5.0, 5.0), (5.0, 20.0), (20.0, 60.0)]:
        val, _ = integrate.quad_vec(integrand, lo, hi, epsrel=epsrel, epsabs=1e-300, limit=400)
        terms += val
    if not np.all(np.isfinite(terms)) or np.any(divergent):
        raise NumericError("norm_star: a series term diverges at lambda -> 0 (J_k does not vanish there)")
    total = float(terms.sum())
    scale = max(total, 1e-300)
    # power-law tail fitted on the last terms of the parity classes that carry mass
    small = terms <= 1e-14 * scale
    if np.all(small[ks % 2 == 1]):
        cls = ks % 2 == 0
    elif np.all(small[ks % 2 == 0]):
        cls = ks % 2 == 1
    else:
        cls = np.ones(k_max, bool)
    step = 1 if cls.all() else 2
    last = np.flatnonzero(cls & ~small)[-6:]
    tail, p = 0.0, float("inf")
    if len(last) >= 3 and last[-1] >= k_max - 2:
        kk = ks[last]
        p = float(np.polyfit(np.log(kk), -np.log(terms[last]), 1)[0])
        ratio = terms[last[-1]] / terms[last[-2]]
        if ratio >= 1.0 or p <= 1.0:
            raise NumericError(f"norm_star: terms do not decay at k_max={k_max} "
                               f"(ratio {ratio:.3g}); increase k_max")
        K = float(ks[last[-1]])
        # sum_{j >= 1} T_K (K / (K + step j))^p, by Euler-Maclaurin
        tail = float(terms[last[-1]] * (K / (step * (p - 1)) - 0.5))
    return NormStar(total + tail, total, tail, p, terms, k_max)
