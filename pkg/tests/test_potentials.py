import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from ipclab.errors import ConfigError, DomainError, PreconditionError
from ipclab.potentials import (
    Composite,
    PowerShifted,
    PurePower,
    certify,
    eval_phi,
    from_dict,
    hessian_radial,
)

FAMILIES = [
    PowerShifted(a=0.0, theta=2.0, gamma=1.0),
    PowerShifted(a=1.0, theta=1.5, gamma=0.9),
    PowerShifted(a=0.5, theta=2.0, gamma=1.5),
    PowerShifted(a=2.0, theta=1.2, gamma=0.95),
    PurePower(gamma=1.5),
    PurePower(gamma=3.0),
]


def composite():
    return from_dict({"family": "composite", "c1": 1.0, "c2": 0.5,
                      "base": {"family": "power_shifted", "a": 1.0, "theta": 1.5, "gamma": 0.9},
                      "psi": {"family": "pure_power", "gamma": 1.5}})


def test_phi_harmonic_is_constant():
    assert eval_phi(PowerShifted(0.0, 2.0, 1.0), 3.7) == pytest.approx(2.0, abs=1e-14)


@pytest.mark.parametrize("g", [0.5, 1.5, 2.0, 3.0])
def test_phi_pure_power(g):
    r = np.array([0.3, 1.0, 4.2])
    np.testing.assert_allclose(eval_phi(PurePower(g), r), g * r ** (g - 2), rtol=1e-14)


def test_phi_power_shifted_closed_form():
    a, th, g = 1.3, 1.5, 0.8
    r = np.array([0.01, 0.7, 5.0])
    np.testing.assert_allclose(eval_phi(PowerShifted(a, th, g), r),
                               th * g * (a + r**th) ** (g - 1) * r ** (th - 2), rtol=1e-14)


def test_values_at_zero():
    assert PowerShifted(2.0, 1.5, 0.5)(0.0) == pytest.approx(math.sqrt(2.0))
    assert PurePower(1.5)(0.0) == 0.0


def test_phi_singular_at_zero_raises():
    with pytest.raises(DomainError, match="singular"):
        PurePower(1.5).phi(0.0)
    with pytest.raises(DomainError):
        PowerShifted(1.0, 1.5, 0.9).phi(np.array([0.0, 1.0]))


def test_phi_limit_at_zero_theta_two():
    assert PowerShifted(1.0, 2.0, 0.5).phi(0.0) == pytest.approx(1.0)  # 2 gamma a^(gamma-1)


@pytest.mark.parametrize("p", FAMILIES + [composite()], ids=lambda p: p.name)
def test_derivative_matches_finite_difference(p):
    r = np.logspace(-3, 3, 1000)
    h = 1e-4 * r
    fd = (p(r + h) - p(r - h)) / (2 * h)
    rel = np.abs(fd - r * p.phi(r)) / np.maximum(np.abs(r * p.phi(r)), 1e-300)
    assert rel.max() < 1e-6


@pytest.mark.parametrize("p", FAMILIES + [composite()], ids=lambda p: p.name)
def test_hessian_matches_finite_difference(p):
    rng = np.random.default_rng(0)
    for _ in range(100):
        d = int(rng.integers(1, 4))
        x = rng.standard_normal(d)
        x *= rng.uniform(0.1, 10) / np.linalg.norm(x)
        H = hessian_radial(p, x)
        h = 1e-4
        F = np.zeros((d, d))
        f = lambda y: float(p(np.linalg.norm(y)))
        for i in range(d):
            for j in range(d):
                ei, ej = np.eye(d)[i] * h, np.eye(d)[j] * h
                F[i, j] = (f(x + ei + ej) - f(x + ei - ej) - f(x - ei + ej) + f(x - ei - ej)) / (4 * h * h)
        assert np.max(np.abs(H - F)) < 1e-5 * max(1.0, np.max(np.abs(H)))


def test_hessian_quadratic_is_2I():
    np.testing.assert_allclose(hessian_radial(PurePower(2.0), [0.3, -1.2, 2.0]), 2 * np.eye(3), atol=1e-14)


def test_hessian_pure_power_unit_vector():
    g = 1.5
    x = np.array([0.6, 0.8])
    np.testing.assert_allclose(hessian_radial(PurePower(g), x),
                               g * (g - 2) * np.outer(x, x) + g * np.eye(2), atol=1e-14)


def test_hessian_at_zero_raises():
    with pytest.raises(DomainError):
        hessian_radial(PurePower(2.0), [0.0, 0.0])


@pytest.mark.parametrize("p", [PowerShifted(1.0, 1.5, 0.9), PowerShifted(0.5, 2.0, 1.5), PurePower(1.5),
                               PurePower(2.0), composite()], ids=lambda p: p.name)
def test_hessian_lower_bound_when_certified(p):
    cert = certify(p)
    assert cert.passed
    rng = np.random.default_rng(1)
    for r in np.logspace(-3, 3, 200):
        x = rng.standard_normal(2)
        x *= r / np.linalg.norm(x)
        H = hessian_radial(p, x)
        assert np.max(np.abs(H - H.T)) <= 1e-14 * max(1.0, np.max(np.abs(H)))
        lam = np.linalg.eigvalsh(H)[0]
        assert lam >= cert.c3 * (1 + r) ** (cert.alpha - 2) * (1 - 1e-9)


def test_certify_theta_two_gamma_at_least_one():
    c = certify(PowerShifted(0.5, 2.0, 1.5))
    assert c.passed and c.method == "analytic"
    assert c.beta == 2.0 and c.c0_growth == 0.0
    assert c.c1_growth == pytest.approx(2 * 1.5 * 0.5**0.5)


def test_certify_power_shifted_example():
    a, th, g = 1.0, 1.5, 0.9
    c = certify(PowerShifted(a, th, g))
    assert c.passed
    assert c.beta == pytest.approx(th * g)
    assert c.c1_growth == pytest.approx(th * g / 2)
    assert c.alpha == pytest.approx(th * g)
    assert c.c3 > 0 and 0 < c.alpha < 2


def test_certify_cubic_fails_hessian():
    c = certify(PurePower(3.0))
    assert not c.passed and not c.hessian_pass


@pytest.mark.parametrize("p", [PowerShifted(0.5, 2.0, 1.5), PowerShifted(1.0, 1.5, 0.9), PurePower(3.0),
                               PurePower(1.5), PowerShifted(1.0, 1.5, 0.5)], ids=str)
def test_certify_analytic_and_numeric_agree(p):
    assert certify(p, "analytic").passed == certify(p, "numeric").passed


def test_numeric_certificate_attaches_witness():
    c = certify(PurePower(3.0), "numeric")
    assert not c.passed and c.witness_r is not None and c.method == "numeric-scan"


def test_certificate_invariants_on_pass():
    for p in [PowerShifted(1.0, 1.5, 0.9), composite(), PurePower(1.5)]:
        c = certify(p)
        assert c.passed and c.c1_growth > 0 and c.c3 > 0 and 0 < c.alpha < 2 and c.beta > 0


def test_ergodic_admissible_flag():
    assert PowerShifted(1.0, 1.5, 0.9).ergodic_admissible
    assert not PowerShifted(1.0, 1.5, 0.5).ergodic_admissible
    assert not PowerShifted(1.0, 1.0, 1.0).ergodic_admissible
    assert PowerShifted(0.0, 2.0, 1.0).ergodic_admissible


def test_parameter_validation():
    with pytest.raises(ConfigError):
        PowerShifted(-1.0, 1.5, 0.5)
    with pytest.raises(ConfigError):
        PowerShifted(1.0, 2.5, 0.5)
    with pytest.raises(ConfigError):
        PurePower(0.0)
    with pytest.raises(ConfigError):
        from_dict({"family": "power_shifted", "a": 1, "theta": 1.5, "gamma": 0.5, "extra": 1})
    with pytest.raises(ConfigError):
        from_dict({"family": "lennard_jones"})


def test_composite_rejects_non_nd_psi():
    # Psi(r) = -r^2 gives a positive definite, not negative definite, kernel
    with pytest.raises(PreconditionError):
        Composite(c1=1.0, base=PowerShifted(1.0, 1.5, 0.9), c2=1.0, psi=lambda r: -(r**2),
                  dpsi=lambda r: -2 * r, d2psi=lambda r: -2.0 + 0 * r)


def test_round_trip_dict():
    for p in [PowerShifted(1.0, 1.5, 0.9), PurePower(1.5), composite()]:
        q = from_dict(p.to_dict())
        r = np.logspace(-2, 2, 20)
        np.testing.assert_array_equal(p(r), q(r))


@settings(max_examples=60, deadline=None)
@given(a=st.floats(0.0, 5.0), th=st.floats(1.05, 2.0), g=st.floats(0.55, 1.0), r=st.floats(1e-3, 1e3))
def test_power_shifted_phi_positive_and_consistent(a, th, g, r):
    p = PowerShifted(a, th, g)
    assert p.phi(r) > 0
    assert p.dPhi(r) == pytest.approx(r * p.phi(r), rel=1e-12)
