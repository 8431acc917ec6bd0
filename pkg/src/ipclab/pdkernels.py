"""Positive and negative definite kernels with randomized Gram-matrix tests.

A :class:`Kernel` wraps a vectorised symmetric function ``fn(x, y)`` where
``x`` and ``y`` are broadcastable arrays of points with the point coordinates
on the last axis.  Kernels on ``[0, inf)`` use points of shape ``(..., 1)``.

The testers are refutation tests: a verdict of ``pd`` or ``nd`` means
that no counterexample was found among the sampled point sets, and carries
``(n, trials, seed)`` so that any failure can be reproduced.
"""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass, field
from typing import Callable

import numpy as np
from scipy import integrate, special

from .errors import DomainError, NumericError, PreconditionError

REAL = "R^d"
HALFLINE = "[0,inf)"


class KernelEvaluationError(NumericError):
    def __init__(self, i, j, xi, xj, cause):
        super().__init__(f"kernel evaluation failed at pair ({i}, {j}): x={xi!r}, y={xj!r}: {cause}")
        self.pair = (i, j)


@dataclass(frozen=True)
class Kernel:
    fn: Callable
    provenance: tuple = ("leaf",)
    domain: str = REAL

    def __call__(self, x, y):
        return self.fn(np.asarray(x, float), np.asarray(y, float))

    # constructor algebra
    def __add__(self, other):
        return Kernel(lambda x, y: self.fn(x, y) + other.fn(x, y), ("sum", self.provenance, other.provenance),
                      _join(self, other))

    def __mul__(self, other):
        if isinstance(other, Kernel):
            return Kernel(lambda x, y: self.fn(x, y) * other.fn(x, y),
                          ("product", self.provenance, other.provenance), _join(self, other))
        c = float(other)
        return Kernel(lambda x, y: c * self.fn(x, y), ("scale", c, self.provenance), self.domain)

    __rmul__ = __mul__

    def exp(self):
        return Kernel(lambda x, y: np.exp(self.fn(x, y)), ("exp", self.provenance), self.domain)

    def pullback(self, f: Callable, domain: str = REAL):
        """k(f(x), f(y)) for a vectorised point map ``f``."""
        return Kernel(lambda x, y: self.fn(f(x), f(y)), ("pullback", self.provenance), domain)


def _join(k1, k2):
    if k1.domain != k2.domain:
        raise ValueError(f"cannot combine kernels on {k1.domain} and {k2.domain}")
    return k1.domain


def _norm(x):
    return np.sqrt(np.sum(x * x, axis=-1))


def inner_product() -> Kernel:
    return Kernel(lambda x, y: np.sum(x * y, axis=-1), ("inner",))


def rank_one(f: Callable, domain: str = REAL) -> Kernel:
    """f(x) f(y) for a scalar function of a point."""
    return Kernel(lambda x, y: f(x) * f(y), ("rank-one",), domain)


def radial(Phi: Callable) -> Kernel:
    """psi(u, v) = Phi(|u - v|)."""
    return Kernel(lambda x, y: np.asarray(Phi(_norm(x - y)), float), ("radial",))


def shifted_sqdist(a: float = 0.0) -> Kernel:
    """a + |u - v|^2, negative definite for every a."""
    return Kernel(lambda x, y: a + np.sum((x - y) ** 2, axis=-1), ("shifted-sqdist", a))


def halfline_sum() -> Kernel:
    """x + y on [0, inf)."""
    return Kernel(lambda x, y: x[..., 0] + y[..., 0], ("halfline-sum",), HALFLINE)


def halfline_power_gap(gamma: float) -> Kernel:
    """x^gamma + y^gamma - (x + y)^gamma on [0, inf)."""

    def fn(x, y):
        x, y = x[..., 0], y[..., 0]
        return x**gamma + y**gamma - (x + y) ** gamma

    return Kernel(fn, ("power-gap", gamma), HALFLINE)


def transform_triangle(psi: Kernel, x0) -> Kernel:
    """psi(x, x0) + psi(y, x0) - psi(x, y)."""
    x0 = np.asarray(x0, float)

    def fn(x, y):
        return psi.fn(x, np.broadcast_to(x0, x.shape)) + psi.fn(y, np.broadcast_to(x0, y.shape)) - psi.fn(x, y)

    return Kernel(fn, ("triangle", psi.provenance), psi.domain)


def transform_box(psi: Kernel, x0) -> Kernel:
    """psi(x, x0) + psi(y, x0) - psi(x, y) - psi(x0, x0)."""
    x0 = np.asarray(x0, float)
    c = float(psi.fn(x0, x0))
    tri = transform_triangle(psi, x0)
    return Kernel(lambda x, y: tri.fn(x, y) - c, ("box", psi.provenance), psi.domain)


def power_and_log(psi: Kernel, alpha: float) -> tuple[Kernel, Kernel]:
    """(psi**alpha, log(1 + psi)) for a negative definite psi with psi(x, x) >= 0.

    Negative values of psi are rejected when evaluating the fractional power.
    """
    if not 0 < alpha < 1:
        raise ValueError("alpha must lie in (0, 1)")

    def power(x, y):
        v = psi.fn(x, y)
        if np.any(v < 0):
            raise DomainError(f"psi^alpha: negative kernel value {np.min(v):.3e}")
        return v**alpha

    def log1p(x, y):
        v = psi.fn(x, y)
        if np.any(v <= -1):
            raise DomainError("log(1 + psi): kernel value <= -1")
        return np.log1p(v)

    return (Kernel(power, ("power-alpha", alpha, psi.provenance), psi.domain),
            Kernel(log1p, ("log1p", psi.provenance), psi.domain))


# ---------------------------------------------------------------------------
# Gram matrices and definiteness tests


def gram(k: Kernel, points) -> np.ndarray:
    """Symmetric Gram matrix G[i, j] = k(x_i, x_j)."""
    P = np.asarray(points, float)
    if P.ndim == 1:
        P = P[:, None]
    n = P.shape[0]
    if n < 1:
        raise ValueError("gram: need at least one point")
    try:
        with np.errstate(divide="raise", invalid="raise", over="raise"):
            G = np.asarray(k.fn(P[:, None, :], P[None, :, :]), float)
        if not np.all(np.isfinite(G)):
            raise FloatingPointError("non-finite value")
    except (ArithmeticError, ValueError) as exc:
        _locate_failure(k, P, exc)
        raise
    G = np.broadcast_to(G, (n, n))
    asym = float(np.max(np.abs(G - G.T)))
    if asym > 1e-10 * max(1.0, float(np.max(np.abs(G)))):
        raise ValueError(f"gram: kernel is not symmetric (max asymmetry {asym:.3e})")
    return (G + G.T) / 2


def _locate_failure(k, P, exc):
    n = P.shape[0]
    for i, j in itertools.product(range(n), repeat=2):
        try:
            with np.errstate(divide="raise", invalid="raise", over="raise"):
                v = float(k.fn(P[i], P[j]))
            if not math.isfinite(v):
                raise FloatingPointError("non-finite value")
        except (ArithmeticError, ValueError) as e:
            raise KernelEvaluationError(i, j, P[i].tolist(), P[j].tolist(), e) from exc


def helmert_basis(n: int) -> np.ndarray:
    """(n-1) x n matrix with orthonormal rows spanning {c : sum(c) = 0}."""
    Q = np.zeros((n - 1, n))
    for k in range(1, n):
        Q[k - 1, :k] = 1.0
        Q[k - 1, k] = -k
        Q[k - 1] /= math.sqrt(k * (k + 1))
    return Q


@dataclass
class GramReport:
    n: int
    trials: int
    seed: int
    min_eigenvalue: float
    min_zero_sum_eigenvalue: float
    max_zero_sum_eigenvalue: float
    tol: float
    verdict: str
    points: np.ndarray = field(repr=False)
    mode: str = "pd"

    @property
    def ok(self) -> bool:
        """No counterexample found for the tested property."""
        return self.verdict == self.mode

    @property
    def strict(self) -> bool:
        """Smallest eigenvalue clears the tolerance from above."""
        return self.min_eigenvalue > self.tol

    def to_dict(self) -> dict:
        return {
            "mode": self.mode,
            "n": self.n,
            "trials": self.trials,
            "seed": self.seed,
            "min_eigenvalue": self.min_eigenvalue,
            "min_zero_sum_eigenvalue": self.min_zero_sum_eigenvalue,
            "max_zero_sum_eigenvalue": self.max_zero_sum_eigenvalue,
            "tol": self.tol,
            "verdict": self.verdict,
            "strict": self.strict,
            "points": np.asarray(self.points).tolist(),
        }


def trial_rng(seed: int, trial: int) -> np.random.Generator:
    return np.random.default_rng([int(seed), int(trial)])


def sample_points(k: Kernel, d: int, n: int, rng: np.random.Generator) -> np.ndarray:
    if k.domain == HALFLINE:
        return np.abs(rng.standard_normal((n, 1)))
    return rng.standard_normal((n, d))


def _spectra(G):
    Q = helmert_basis(G.shape[0])
    lam = np.linalg.eigvalsh(G)
    mu = np.linalg.eigvalsh(Q @ G @ Q.T)
    return lam[0], mu[0], mu[-1]


def _run(k, d, n, trials, seed, mode):
    if n < 2:
        raise ValueError("need n >= 2 points")
    if trials < 1:
        raise ValueError("need trials >= 1")
    worst = None
    for t in range(trials):
        P = sample_points(k, d, n, trial_rng(seed, t))
        G = gram(k, P)
        tol = 1e-9 * n * max(float(np.max(np.abs(G))), np.finfo(float).tiny)
        lmin, mmin, mmax = _spectra(G)
        # badness relative to tolerance for the property under test
        score = (-lmin / tol) if mode == "pd" else (mmax / tol)
        if worst is None or score > worst[0]:
            worst = (score, lmin, mmin, mmax, tol, P)
    _, lmin, mmin, mmax, tol, P = worst
    if mode == "pd":
        verdict = "pd" if lmin > -tol else "indefinite"
    else:
        verdict = "nd" if mmax <= tol else "indefinite"
    return GramReport(n=n, trials=trials, seed=seed, min_eigenvalue=float(lmin),
                      min_zero_sum_eigenvalue=float(mmin), max_zero_sum_eigenvalue=float(mmax),
                      tol=float(tol), verdict=verdict, points=P, mode=mode)


def test_pd(k: Kernel, d: int = 1, n: int = 30, trials: int = 20, seed: int = 0) -> GramReport:
    """Smallest Gram eigenvalue over random Gaussian point sets.

    Verdict ``pd`` when it exceeds ``-tol`` with ``tol = 1e-9 n max|G|``,
    ``indefinite`` otherwise; ``report.strict`` additionally tells whether
    it exceeds ``+tol``.  The reported points are those of the worst trial.
    """
    return _run(k, d, n, trials, seed, "pd")


def test_nd(k: Kernel, d: int = 1, n: int = 30, trials: int = 20, seed: int = 0) -> GramReport:
    """Largest eigenvalue of the Gram form restricted to zero-sum coefficients."""
    return _run(k, d, n, trials, seed, "nd")


# keep pytest from collecting the testers when imported into test modules
test_pd.__test__ = False
test_nd.__test__ = False


def zero_sum_form(k: Kernel, points, c) -> float:
    """c^T G c for a coefficient vector with sum(c) = 0."""
    c = np.asarray(c, float)
    if abs(c.sum()) > 1e-9 * max(1.0, np.abs(c).sum()):
        raise ValueError("coefficients must sum to zero")
    return float(c @ gram(k, points) @ c)


def leading_minors(G: np.ndarray) -> np.ndarray:
    """Determinants of the leading principal submatrices G[:k, :k], k = 1..n."""
    return np.array([np.linalg.det(G[:k, :k]) for k in range(1, G.shape[0] + 1)])


def gaussian_weighted_integral(k: Kernel, d: int = 1, order: int = 24) -> float:
    """Tensor Gauss-Hermite value of the double integral of k(u, v) w(u) w(v),
    w the standard Gaussian density on R^d."""
    x, w = np.polynomial.hermite_e.hermegauss(order)
    w = w / math.sqrt(2 * math.pi)
    nodes = np.array(list(itertools.product(x, repeat=d)))
    weights = np.prod(np.array(list(itertools.product(w, repeat=d))), axis=1)
    if k.domain == HALFLINE:
        raise ValueError("Gaussian weight is defined on R^d kernels only")
    G = np.asarray(k.fn(nodes[:, None, :], nodes[None, :, :]), float)
    return float(weights @ G @ weights)


# ---------------------------------------------------------------------------


@dataclass
class SchoenbergReport:
    t_list: list
    reports: list
    ok: bool


def schoenberg_check(psi: Kernel, t_list, d: int = 1, n: int = 30, trials: int = 20,
                     seed: int = 0) -> SchoenbergReport:
    """Run :func:`test_pd` on exp(-t psi) for each t."""
    reps = []
    for t in t_list:
        kt = Kernel(lambda x, y, t=float(t): np.exp(-t * psi.fn(x, y)), ("exp", ("scale", -t, psi.provenance)),
                    psi.domain)
        reps.append(test_pd(kt, d=d, n=n, trials=trials, seed=seed))
    return SchoenbergReport(list(t_list), reps, all(r.ok for r in reps))


@dataclass
class MetricReport:
    ok: bool
    precondition_ok: bool
    max_violation: float
    n_triples: int
    message: str = ""


def metric_check(psi: Kernel, points, slack: float = 1e-12) -> MetricReport:
    """Triangle inequality of sqrt(psi) over all ordered triples of points."""
    P = np.asarray(points, float)
    if P.ndim == 1:
        P = P[:, None]
    G = gram(psi, P)
    n = len(P)
    off = ~np.eye(n, dtype=bool)
    distinct = np.any(P[:, None, :] != P[None, :, :], axis=-1)
    if np.any(np.abs(np.diag(G)) > 1e-14) or np.any((G[off] == 0) & distinct[off]):
        return MetricReport(False, False, float("nan"), 0,
                            "zero set of psi differs from the diagonal on the sample")
    if np.any(G < 0):
        return MetricReport(False, False, float("nan"), 0, "psi takes negative values")
    D = np.sqrt(G)
    # D[i,k] <= D[i,j] + D[j,k]
    viol = D[:, None, :] - (D[:, :, None] + D[None, :, :])
    m = float(np.max(viol))
    return MetricReport(m <= slack, True, m, n**3)


# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class GammaQuadrature:
    value: float
    abserr: float


def gamma_representation(z: float, gamma: float, epsabs: float = 1e-12, epsrel: float = 1e-11,
                         limit: int = 200, max_abserr: float = 1e-9) -> GammaQuadrature:
    """Quadrature value of (gamma / Gamma(1-gamma)) int_0^inf (1 - e^{-lam z}) lam^{-gamma-1} dlam.

    The range is split at lam = 1.  On [0, 1] the algebraic singularity is
    handled by QUADPACK's ``alg`` weight; on [1, inf) the integral of
    lam^{-gamma-1} is exact and the remaining e^{-lam z} part is integrated
    in s = log(lam).
    """
    if not z > 0:
        raise DomainError("gamma_representation: z must be > 0")
    if not 0 < gamma < 1:
        raise DomainError("gamma_representation: gamma must lie in (0, 1)")
    def head_fn(lam):
        return -math.expm1(-lam * z) / lam if lam > 0 else z

    head, e1 = integrate.quad(head_fn, 0.0, 1.0, weight="alg", wvar=(-gamma, 0.0),
                              epsabs=epsabs, epsrel=epsrel, limit=limit)
    # beyond s_max the integrand is below e^-700
    s_max = max(math.log(700.0 / z), 0.0) + 1.0
    tail_exp, e2 = integrate.quad(lambda s: math.exp(-z * math.exp(s) - gamma * s), 0.0, s_max,
                                  epsabs=epsabs, epsrel=epsrel, limit=limit)
    total = head + 1.0 / gamma - tail_exp
    c = gamma / special.gamma(1 - gamma)
    err = c * (e1 + e2)
    if err > max_abserr:
        raise NumericError(f"gamma_representation: estimate {c * total!r} with error bound {err:.3e} "
                           f"exceeds {max_abserr:.1e}")
    return GammaQuadrature(c * total, err)


# ---------------------------------------------------------------------------
# property suite


def minors_nonnegative(G: np.ndarray, rel_tol: float = 1e-9) -> bool:
    """All leading principal minors are >= 0 up to a perturbation of the smallest eigenvalue.

    A minor counts as nonnegative when det(G_k) >= -tol_k with tol_k the
    change in det(G_k) caused by moving its smallest eigenvalue by
    rel_tol * k * max|G|.
    """
    scale = float(np.max(np.abs(G)))
    dets = leading_minors(G)
    for k in range(1, G.shape[0] + 1):
        lam = np.linalg.eigvalsh(G[:k, :k])
        others = np.prod(np.abs(lam[1:])) if k > 1 else 1.0
        if dets[k - 1] < -rel_tol * k * scale * others:
            return False
    return True


@dataclass
class SuiteEntry:
    name: str
    passed: bool
    checks: int
    failures: list


def _pd_bases(d: int) -> list:
    """Kernels on R^d that are positive definite, with short labels."""
    gauss = radial(lambda r: np.exp(-(r**2)))
    laplace = radial(lambda r: np.exp(-r))
    tri = transform_triangle(power_and_log(shifted_sqdist(), 0.75)[0], np.zeros(d))
    return [
        ("inner", inner_product()),
        ("gaussian", gauss),
        ("laplace", laplace),
        ("triangle_power", tri),
        ("rank_one_cos", rank_one(lambda x: np.cos(np.sum(x, axis=-1)) + 0.5)),
        ("poly2", (inner_product() + 1.0 * rank_one(lambda x: np.ones(x.shape[:-1]))) *
         (inner_product() + 1.0 * rank_one(lambda x: np.ones(x.shape[:-1])))),
    ]


def _nd_bases() -> list:
    """Kernels on R^d that are negative definite with psi(x, x) >= 0 and zero set on the diagonal."""
    from .potentials import PowerShifted

    phi0 = PowerShifted(1.0, 1.5, 0.9)
    a0 = phi0(0.0)
    return [
        ("sqdist", shifted_sqdist(0.0)),
        ("power_1.5", radial(lambda r: r**1.5)),
        ("power_0.7", radial(lambda r: r**0.7)),
        ("phi0_minus_phi0(0)", radial(lambda r: phi0(r) - a0)),
    ]


def property_suite(seed: int, d: int = 2, n: int = 30, trials: int = 20, constructions: int = 20) -> list:
    """Randomized Gram tests of the closure and transform properties of (negative) definite kernels.

    Every entry records how many kernels were tested and which failed.
    """
    rng = np.random.default_rng([int(seed), 7919])
    bases = _pd_bases(d)
    nd = _nd_bases()
    out = []

    def run(name, items, check):
        fails = [label for label, obj in items if not check(obj)]
        out.append(SuiteEntry(name, not fails, len(items), fails))

    pd_ok = lambda k: test_pd(k, d=d, n=n, trials=trials, seed=seed).ok
    nd_ok = lambda k: test_nd(k, d=d, n=n, trials=trials, seed=seed).ok

    def pick():
        i, j = rng.integers(len(bases), size=2)
        return bases[i], bases[j]

    items = []
    for _ in range(constructions):
        (l1, k1), (l2, k2) = pick()
        c1, c2 = rng.uniform(0, 3, size=2)
        items.append((f"{c1:.2f}*{l1}+{c2:.2f}*{l2}", c1 * k1 + c2 * k2))
    run("sum", items, pd_ok)

    items = []
    for _ in range(constructions):
        (l1, k1), (l2, k2) = pick()
        items.append((f"{l1}*{l2}", k1 * k2))
    run("product", items, pd_ok)

    items = []
    for _ in range(constructions):
        (l1, k1), _ = pick()
        c = rng.uniform(0.05, 0.5)
        items.append((f"exp({c:.2f}*{l1})", (c * k1).exp()))
    run("exp", items, pd_ok)

    items = []
    for _ in range(constructions):
        (l1, k1), _ = pick()
        W = rng.standard_normal((d, d))
        b = rng.standard_normal(d)
        items.append((f"{l1} o tanh(Wx+b)", k1.pullback(lambda x, W=W, b=b: np.tanh(x @ W.T + b))))
    run("pullback", items, pd_ok)

    run("inner_product", [("inner", inner_product())], pd_ok)

    items = []
    for _ in range(constructions):
        w = rng.standard_normal(d)
        c = rng.uniform(-1, 1)
        items.append((f"f=sin(w.x)+{c:.2f}", rank_one(lambda x, w=w, c=c: np.sin(x @ w) + c)))
    run("rank_one", items, pd_ok)

    run("gaussian_integral", bases, lambda k: gaussian_weighted_integral(k, d=d, order=12) >= -1e-8)

    def minors(k):
        for t in range(trials):
            P = sample_points(k, d, n, trial_rng(seed, t))
            if not minors_nonnegative(gram(k, P)):
                return False
        return True

    run("leading_minors", bases, minors)

    x0s = [np.zeros(d), rng.standard_normal(d)]
    run("negative_definite_bases", nd, nd_ok)
    run("transform_triangle", [(f"{l} x0={i}", transform_triangle(k, x0)) for l, k in nd
                               for i, x0 in enumerate(x0s)], pd_ok)
    run("transform_box", [(f"{l} x0={i}", transform_box(k, x0)) for l, k in nd
                          for i, x0 in enumerate(x0s)], pd_ok)
    run("schoenberg", nd, lambda k: schoenberg_check(k, [0.1, 1.0, 10.0], d=d, n=n, trials=trials,
                                                     seed=seed).ok)
    items = []
    for label, k in nd:
        alpha = float(rng.uniform(0.05, 0.95))
        pw, lg = power_and_log(k, alpha)
        items += [(f"{label}^{alpha:.2f}", pw), (f"log1p({label})", lg)]
    run("power_and_log", items, nd_ok)

    def metric(k):
        P = sample_points(k, d, 12, trial_rng(seed, 0))
        return metric_check(k, P).ok

    run("metric", nd, metric)

    gammas = [0.3, 0.5, 0.9, float(rng.uniform(0.05, 0.95))]
    hk = lambda g: halfline_power_gap(g)
    half_pd = lambda k: test_pd(k, d=1, n=n, trials=trials, seed=seed).ok
    run("halfline_sum_power", [(f"(x+y)^{g:.2f}", power_and_log(halfline_sum(), g)[0]) for g in gammas],
        lambda k: test_nd(k, d=1, n=n, trials=trials, seed=seed).ok)
    run("halfline_power_gap", [(f"gamma={g:.2f}", hk(g)) for g in gammas], half_pd)
    maps = [("|u|", lambda x: _norm(x)[..., None]), ("|u|^2", lambda x: np.sum(x * x, -1)[..., None]),
            ("|u|^1.5", lambda x: (_norm(x) ** 1.5)[..., None])]
    run("halfline_pullback", [(f"gamma={g:.2f} g={lbl}", hk(g).pullback(f)) for g in gammas
                              for lbl, f in maps], pd_ok)
    return out
