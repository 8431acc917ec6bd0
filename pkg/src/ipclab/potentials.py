"""Radial interaction potentials, their kernels and admissibility certificates.

A potential is a function ``Phi: [0, inf) -> R``; the particles interact
through the kernel ``phi(r) = Phi'(r) / r``.  Every family below supplies
closed-form ``Phi``, ``Phi'``, ``phi`` and ``phi'`` so that no quantity used
by the dynamics is obtained by numerical differentiation.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable

import numpy as np
from scipy.optimize import minimize_scalar

from .errors import ConfigError, DomainError, PreconditionError

SCAN_RMIN = 1e-6
SCAN_RMAX = 1e6
SCAN_POINTS = 10_000


def _as_array(r):
    r = np.asarray(r, dtype=float)
    if np.any(r < 0):
        raise DomainError("radial argument must be nonnegative")
    return r


class RadialPotential:
    """Base class.  Subclasses implement the ``_*_pos`` methods for r > 0 and
    the limits at r = 0 (``None`` when the limit does not exist)."""

    name = "radial"

    # limits at r -> 0+
    def _phi_at_zero(self) -> float | None:
        raise NotImplementedError

    def _dPhi_at_zero(self) -> float | None:
        raise NotImplementedError

    def _value_pos(self, r):
        raise NotImplementedError

    def _dPhi_pos(self, r):
        raise NotImplementedError

    def _phi_pos(self, r):
        raise NotImplementedError

    def _dphi_pos(self, r):
        raise NotImplementedError

    def _value_at_zero(self) -> float:
        raise NotImplementedError

    # public, vectorised -------------------------------------------------
    def __call__(self, r):
        r = _as_array(r)
        out = np.empty_like(r)
        pos = r > 0
        out[pos] = self._value_pos(r[pos])
        out[~pos] = self._value_at_zero()
        return out if out.ndim else float(out)

    def dPhi(self, r):
        """Phi'(r); at r = 0 the one-sided limit, or DomainError."""
        r = _as_array(r)
        out = np.empty_like(r)
        pos = r > 0
        out[pos] = self._dPhi_pos(r[pos])
        if np.any(~pos):
            lim = self._dPhi_at_zero()
            if lim is None:
                raise DomainError(f"{self.name}: Phi'(r) has no finite limit at r=0")
            out[~pos] = lim
        return out if out.ndim else float(out)

    def phi(self, r):
        """Interaction kernel Phi'(r)/r."""
        r = _as_array(r)
        if r.ndim and r.min(initial=1.0) > 0:
            return self._phi_pos(r)
        out = np.empty_like(r)
        pos = r > 0
        out[pos] = self._phi_pos(r[pos])
        if np.any(~pos):
            lim = self._phi_at_zero()
            if lim is None:
                raise DomainError(f"{self.name}: phi(r) = Phi'(r)/r is singular at r=0")
            out[~pos] = lim
        return out if out.ndim else float(out)

    def dphi(self, r):
        """Derivative of the interaction kernel, r > 0 only."""
        r = _as_array(r)
        if np.any(r == 0):
            raise DomainError(f"{self.name}: phi'(r) is only evaluated for r > 0")
        out = self._dphi_pos(r)
        return out if np.ndim(out) else float(out)

    def force_vanishes_at_zero(self) -> bool:
        """True when phi(r) * r -> 0 as r -> 0, so the pair force extends by 0."""
        lim = self._dPhi_at_zero()
        return lim is not None and lim == 0.0

    @property
    def ergodic_admissible(self) -> bool:
        return False

    def to_dict(self) -> dict:
        raise NotImplementedError


@dataclass(frozen=True)
class PowerShifted(RadialPotential):
    """Phi(r) = (a + r**theta)**gamma.

    ``gamma > 1`` is accepted only together with ``theta == 2`` (the
    ``(a + r^2)^gamma`` family, which is uniformly convex for a > 0).
    """

    a: float = 0.0
    theta: float = 2.0
    gamma: float = 1.0
    name: str = field(default="power_shifted", init=False, repr=False, compare=False)

    def __post_init__(self):
        if not self.a >= 0:
            raise ConfigError(f"power_shifted: a must be >= 0, got {self.a}")
        if not 0 < self.theta <= 2:
            raise ConfigError(f"power_shifted: theta must lie in (0, 2], got {self.theta}")
        if not self.gamma > 0:
            raise ConfigError(f"power_shifted: gamma must be > 0, got {self.gamma}")
        if self.gamma > 1 and self.theta != 2:
            raise ConfigError("power_shifted: gamma > 1 is only supported with theta = 2")

    def _value_pos(self, r):
        return (self.a + r**self.theta) ** self.gamma

    def _value_at_zero(self):
        return self.a**self.gamma

    def _dPhi_pos(self, r):
        a, th, g = self.a, self.theta, self.gamma
        return th * g * (a + r**th) ** (g - 1) * r ** (th - 1)

    def _phi_pos(self, r):
        a, th, g = self.a, self.theta, self.gamma
        return th * g * (a + r**th) ** (g - 1) * r ** (th - 2)

    def _dphi_pos(self, r):
        a, th, g = self.a, self.theta, self.gamma
        s = a + r**th
        return th * g * s ** (g - 2) * r ** (th - 3) * ((th - 2) * s + th * (g - 1) * r**th)

    def _phi_at_zero(self):
        a, th, g = self.a, self.theta, self.gamma
        if th != 2:
            return None
        if a > 0:
            return 2 * g * a ** (g - 1)
        if g == 1:
            return 2.0
        return 0.0 if g > 1 else None

    def _dPhi_at_zero(self):
        a, th, g = self.a, self.theta, self.gamma
        if a > 0:
            return 0.0 if th > 1 else None
        return 0.0 if th * g > 1 else None

    @property
    def ergodic_admissible(self) -> bool:
        th, g = self.theta, self.gamma
        if th == 2 and g >= 1:
            return self.a > 0 or g == 1
        return 1 < th <= 2 and th * g > 1

    def to_dict(self):
        return {"family": "power_shifted", "a": self.a, "theta": self.theta, "gamma": self.gamma}


@dataclass(frozen=True)
class PurePower(RadialPotential):
    """Phi(r) = r**gamma."""

    gamma: float = 2.0
    name: str = field(default="pure_power", init=False, repr=False, compare=False)

    def __post_init__(self):
        if not self.gamma > 0:
            raise ConfigError(f"pure_power: gamma must be > 0, got {self.gamma}")

    def _value_pos(self, r):
        return r**self.gamma

    def _value_at_zero(self):
        return 0.0

    def _dPhi_pos(self, r):
        return self.gamma * r ** (self.gamma - 1)

    def _phi_pos(self, r):
        return self.gamma * r ** (self.gamma - 2)

    def _dphi_pos(self, r):
        g = self.gamma
        return g * (g - 2) * r ** (g - 3)

    def _phi_at_zero(self):
        if self.gamma == 2:
            return 2.0
        return 0.0 if self.gamma > 2 else None

    def _dPhi_at_zero(self):
        return 0.0 if self.gamma > 1 else None

    @property
    def ergodic_admissible(self) -> bool:
        return 1 < self.gamma <= 2

    def to_dict(self):
        return {"family": "pure_power", "gamma": self.gamma}


@dataclass(frozen=True)
class Composite(RadialPotential):
    """Phi = c1 * base + c2 * Psi with Psi(|u - v|) negative definite.

    ``psi``, ``dpsi`` and ``d2psi`` are vectorised callables on r >= 0.  The
    negative definiteness of Psi is checked by sampling at construction
    unless ``verify_nd=False``.
    """

    c1: float
    base: PowerShifted
    c2: float
    psi: Callable
    dpsi: Callable
    d2psi: Callable
    psi_spec: dict | None = None
    verify_nd: bool = True
    name: str = field(default="composite", init=False, repr=False, compare=False)

    def __post_init__(self):
        if not self.c1 > 0:
            raise ConfigError("composite: c1 must be > 0")
        if not self.c2 >= 0:
            raise ConfigError("composite: c2 must be >= 0")
        if self.verify_nd and self.c2 > 0:
            from . import pdkernels

            rep = pdkernels.test_nd(pdkernels.radial(self.psi), d=3, n=30, trials=10, seed=0)
            if rep.verdict != "nd":
                raise PreconditionError(
                    "composite: Psi(|u-v|) failed the sampled negative-definiteness test "
                    f"(max zero-sum eigenvalue {rep.max_zero_sum_eigenvalue:.3e} > tol {rep.tol:.3e})"
                )

    def _value_pos(self, r):
        return self.c1 * self.base._value_pos(r) + self.c2 * np.asarray(self.psi(r), float)

    def _value_at_zero(self):
        return self.c1 * self.base._value_at_zero() + self.c2 * float(self.psi(np.array(0.0)))

    def _dPhi_pos(self, r):
        return self.c1 * self.base._dPhi_pos(r) + self.c2 * np.asarray(self.dpsi(r), float)

    def _phi_pos(self, r):
        return self.c1 * self.base._phi_pos(r) + self.c2 * np.asarray(self.dpsi(r), float) / r

    def _dphi_pos(self, r):
        dp = np.asarray(self.dpsi(r), float)
        d2p = np.asarray(self.d2psi(r), float)
        return self.c1 * self.base._dphi_pos(r) + self.c2 * (d2p / r - dp / r**2)

    def _psi_limits(self):
        try:
            d1 = float(self.dpsi(np.array(0.0)))
            d2 = float(self.d2psi(np.array(0.0)))
        except (ArithmeticError, ValueError):
            return None, None
        if not (math.isfinite(d1) and math.isfinite(d2)):
            return None, None
        return d1, d2

    def _phi_at_zero(self):
        b = self.base._phi_at_zero()
        if self.c2 == 0:
            return None if b is None else self.c1 * b
        d1, d2 = self._psi_limits()
        if b is None or d1 is None or d1 != 0.0:
            return None
        return self.c1 * b + self.c2 * d2

    def _dPhi_at_zero(self):
        b = self.base._dPhi_at_zero()
        if self.c2 == 0:
            return None if b is None else self.c1 * b
        d1, _ = self._psi_limits()
        if b is None or d1 is None:
            return None
        return self.c1 * b + self.c2 * d1

    @property
    def ergodic_admissible(self) -> bool:
        return self.base.ergodic_admissible

    def to_dict(self):
        return {
            "family": "composite",
            "c1": self.c1,
            "base": self.base.to_dict(),
            "c2": self.c2,
            "psi": self.psi_spec,
        }


def from_dict(spec: dict) -> RadialPotential:
    """Build a potential from its config form, e.g.
    ``{"family": "power_shifted", "a": 1.0, "theta": 1.5, "gamma": 0.8}``.

    A composite's ``psi`` must itself be a closed-form family spec.
    """
    spec = dict(spec)
    family = spec.pop("family", None)
    allowed = {
        "power_shifted": {"a", "theta", "gamma"},
        "pure_power": {"gamma"},
        "composite": {"c1", "base", "c2", "psi"},
    }
    if family not in allowed:
        raise ConfigError(f"unknown potential family {family!r}")
    extra = set(spec) - allowed[family]
    if extra:
        raise ConfigError(f"unknown fields for {family}: {sorted(extra)}")
    if family == "power_shifted":
        return PowerShifted(**{k: float(v) for k, v in spec.items()})
    if family == "pure_power":
        return PurePower(**{k: float(v) for k, v in spec.items()})
    base = from_dict(spec["base"])
    if not isinstance(base, PowerShifted):
        raise ConfigError("composite: base must be a power_shifted potential")
    psi = from_dict(spec["psi"])
    if isinstance(psi, Composite):
        raise ConfigError("composite: psi must be a closed-form family")
    return Composite(
        c1=float(spec["c1"]),
        base=base,
        c2=float(spec["c2"]),
        psi=psi,
        dpsi=psi.dPhi,
        d2psi=lambda r, p=psi: _second_derivative(p, r),
        psi_spec=psi.to_dict(),
    )


def _second_derivative(p: RadialPotential, r):
    # Phi'' = (phi * r)' = phi + phi' * r
    r = _as_array(r)
    out = np.empty_like(r)
    pos = r > 0
    out[pos] = p._phi_pos(r[pos]) + p._dphi_pos(r[pos]) * r[pos]
    if np.any(~pos):
        lim = p._phi_at_zero()
        out[~pos] = np.nan if lim is None else lim
    return out if out.ndim else float(out)


# ---------------------------------------------------------------------------
# operations


def eval_phi(p: RadialPotential, r):
    """phi(r) = Phi'(r)/r from the analytic derivative."""
    return p.phi(r)


def hessian_radial(p: RadialPotential, x) -> np.ndarray:
    """Hessian of x -> Phi(|x|): phi'(|x|) x x^T / |x| + phi(|x|) I."""
    x = np.asarray(x, dtype=float)
    r = float(np.linalg.norm(x))
    if r == 0:
        raise DomainError("hessian_radial: x = 0 is excluded")
    return p.dphi(r) * np.outer(x, x) / r + p.phi(r) * np.eye(x.size)


@dataclass(frozen=True)
class AdmissibilityCertificate:
    """Constants witnessing the growth and Hessian conditions for ergodicity.

    Growth: phi(r) >= 0 and phi(r) r^2 >= c1_growth r^beta - c0_growth.
    Hessian: smallest eigenvalue of Hess Phi(|x|) >= c3 (1 + |x|)^(alpha - 2).
    """

    beta: float
    c1_growth: float
    c0_growth: float
    alpha: float
    c3: float
    method: str
    growth_pass: bool
    hessian_pass: bool
    witness_r: float | None = None
    note: str = ""

    @property
    def passed(self) -> bool:
        return self.growth_pass and self.hessian_pass

    def to_dict(self) -> dict:
        return {
            "beta": self.beta,
            "c1_growth": self.c1_growth,
            "c0_growth": self.c0_growth,
            "alpha": self.alpha,
            "c3": self.c3,
            "method": self.method,
            "growth_pass": self.growth_pass,
            "hessian_pass": self.hessian_pass,
            "pass": self.passed,
            "witness_r": self.witness_r,
            "note": self.note,
        }


def _min_on_log_axis(f, lo, hi, n=2000):
    """Minimum of a smooth positive-axis function: grid search in log r, then Brent."""
    s = np.linspace(math.log(lo), math.log(hi), n)
    vals = f(np.exp(s))
    k = int(np.argmin(vals))
    a, b = s[max(k - 1, 0)], s[min(k + 1, n - 1)]
    if a == b:
        return float(vals[k])
    res = minimize_scalar(lambda t: float(f(np.exp(t))), bounds=(a, b), method="bounded",
                          options={"xatol": 1e-12})
    return float(min(res.fun, vals[k]))


def _certify_power_shifted(p: PowerShifted) -> AdmissibilityCertificate:
    a, th, g = p.a, p.theta, p.gamma
    if th == 2 and g >= 1 and (a > 0 or g == 1):
        c = 2 * g * a ** (g - 1) if a > 0 else 2.0
        return AdmissibilityCertificate(beta=2.0, c1_growth=c, c0_growth=0.0, alpha=1.0, c3=c,
                                        method="analytic", growth_pass=True, hessian_pass=True,
                                        note="phi >= 2 gamma a^(gamma-1) and phi' >= 0")
    if th == 2 and g > 1:
        # a = 0: Phi = r^(2 gamma) behaves as a pure power with exponent > 2
        return AdmissibilityCertificate(beta=2 * g, c1_growth=2 * g, c0_growth=0.0, alpha=float("nan"),
                                        c3=0.0, method="analytic", growth_pass=True, hessian_pass=False,
                                        note="r^(2 gamma) with 2 gamma > 2 has a degenerate Hessian at 0")
    beta = th * g
    c1 = th * g / 2
    if g < 1 and a > 0:
        # phi r^2 - c1 r^beta = th g r^beta [(r^th/(a+r^th))^(1-g) - 1/2] is negative below r0
        q = 2 ** (-1 / (1 - g))
        r0 = (a * q / (1 - q)) ** (1 / th)

        def gap(r):
            return th * g * r**beta * ((r**th / (a + r**th)) ** (1 - g) - 0.5)

        c0 = max(0.0, -_min_on_log_axis(gap, r0 * 1e-12, r0))
    else:
        c0 = 0.0
    growth_ok = True
    if th * g > 1 and th > 1:
        alpha = th * g
        kk = th * g * (th * g - 1)
        if a > 0:
            def ratio(r):
                return kk * (r**th / (a + r**th)) ** (1 - g) * (r / (1 + r)) ** (th * g - 2)

            c3 = min(_min_on_log_axis(ratio, 1e-8, 1e8), kk)
        else:
            c3 = kk
        return AdmissibilityCertificate(beta=beta, c1_growth=c1, c0_growth=c0, alpha=alpha, c3=c3,
                                        method="analytic", growth_pass=growth_ok, hessian_pass=True,
                                        note="phi' <= 0 and phi + phi' r >= c3 (1+r)^(theta gamma - 2)")
    return AdmissibilityCertificate(beta=beta, c1_growth=c1, c0_growth=c0, alpha=float("nan"), c3=0.0,
                                    method="analytic", growth_pass=growth_ok, hessian_pass=False,
                                    note="theta*gamma <= 1: phi + phi' r is not bounded below by a "
                                         "positive multiple of (1+r)^(alpha-2)")


def _certify_pure_power(p: PurePower) -> AdmissibilityCertificate:
    g = p.gamma
    if 1 < g < 2:
        alpha, c3, ok = g, g * (g - 1), True
    elif g == 2:
        alpha, c3, ok = 1.0, 2.0, True
    else:
        alpha, c3, ok = float("nan"), 0.0, False
    note = "" if ok else "Hessian condition holds only for gamma in (1, 2]"
    return AdmissibilityCertificate(beta=g, c1_growth=g, c0_growth=0.0, alpha=alpha, c3=c3,
                                    method="analytic", growth_pass=True, hessian_pass=ok, note=note)


def _loglog_slope(r, y):
    return float(np.polyfit(np.log(r), np.log(y), 1)[0])


def _certify_numeric(p: RadialPotential, rmin=SCAN_RMIN, rmax=SCAN_RMAX,
                     npts=SCAN_POINTS) -> AdmissibilityCertificate:
    """Grid scan of the sufficient conditions.  Sound on the grid only."""
    r = np.logspace(math.log10(rmin), math.log10(rmax), npts)
    with np.errstate(all="ignore"):
        phi = np.asarray(p.phi(r), float)
        dphi = np.asarray(p.dphi(r), float)
    growth = phi * r**2
    # eigenvalues of Hess Phi(|x|): phi (tangential) and phi + phi' r (radial)
    hmin = np.minimum(phi, phi + dphi * r)
    decade = max(npts // 12, 10)
    top, bottom = slice(npts - decade, npts), slice(0, decade)

    def fail(which, witness, note):
        return AdmissibilityCertificate(beta=float("nan"), c1_growth=0.0, c0_growth=0.0,
                                        alpha=float("nan"), c3=0.0, method="numeric-scan",
                                        growth_pass=which != "growth", hessian_pass=which == "growth",
                                        witness_r=float(witness), note=note)

    bad = ~np.isfinite(phi) | ~np.isfinite(dphi)
    if bad.any():
        return fail("growth", r[np.argmax(bad)], "non-finite kernel value")
    if np.any(phi < 0):
        return fail("growth", r[np.argmax(phi < 0)], "phi(r) < 0")
    if np.any(growth[top] <= 0):
        return fail("growth", r[top][np.argmax(growth[top] <= 0)], "phi r^2 vanishes at large r")
    beta = _loglog_slope(r[top], growth[top])
    if not beta > 1e-3:
        return fail("growth", r[-1], f"phi r^2 does not grow (fitted exponent {beta:.3g})")
    c1 = 0.5 * float(np.min(growth[top] / r[top] ** beta))
    c0 = max(0.0, float(np.max(c1 * r**beta - growth)))

    growth_fields = dict(beta=beta, c1_growth=c1, c0_growth=c0)
    if np.any(hmin <= 0):
        w = r[np.argmax(hmin <= 0)]
        return AdmissibilityCertificate(**growth_fields, alpha=float("nan"), c3=0.0,
                                        method="numeric-scan", growth_pass=True, hessian_pass=False,
                                        witness_r=float(w), note="Hessian not positive definite")
    small_slope = _loglog_slope(r[bottom], hmin[bottom])
    if small_slope > 0.05:
        return AdmissibilityCertificate(**growth_fields, alpha=float("nan"), c3=0.0,
                                        method="numeric-scan", growth_pass=True, hessian_pass=False,
                                        witness_r=float(r[0]),
                                        note=f"Hessian degenerates at r -> 0 (slope {small_slope:.3g})")
    alpha = _loglog_slope(r[top], hmin[top]) + 2
    if not alpha > 1e-3:
        return AdmissibilityCertificate(**growth_fields, alpha=alpha, c3=0.0, method="numeric-scan",
                                        growth_pass=True, hessian_pass=False, witness_r=float(r[-1]),
                                        note="Hessian decays faster than (1+r)^-2")
    alpha = min(max(alpha - 0.01, 1e-3), 1.999)
    c3 = float(np.min(hmin / (1 + r) ** (alpha - 2)))
    return AdmissibilityCertificate(**growth_fields, alpha=alpha, c3=c3, method="numeric-scan",
                                    growth_pass=True, hessian_pass=c3 > 0)


def certify(p: RadialPotential, method: str = "auto") -> AdmissibilityCertificate:
    """Admissibility certificate for the ergodicity conditions.

    ``method="auto"`` uses the closed-form constants for the power families
    and a log-grid scan over [1e-6, 1e6] for composites.  A failing
    condition yields a certificate with ``passed == False`` (and a witness
    radius on the numeric path), never an exception.
    """
    if method not in ("auto", "analytic", "numeric"):
        raise ValueError(f"unknown certification method {method!r}")
    if method == "numeric" or (method == "auto" and isinstance(p, Composite)):
        return _certify_numeric(p)
    if isinstance(p, PowerShifted):
        return _certify_power_shifted(p)
    if isinstance(p, PurePower):
        return _certify_pure_power(p)
    raise PreconditionError(f"no analytic certificate for {type(p).__name__}; use method='numeric'")
