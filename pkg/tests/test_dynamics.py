import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.linalg import expm

from ipclab import dynamics as dy
from ipclab.errors import ConfigError, NumericError
from ipclab.potentials import PowerShifted, PurePower

QUAD = PurePower(2.0)
EXAMPLES = [PowerShifted(0.5, 2.0, 1.5), PowerShifted(1.0, 1.5, 0.9), PurePower(1.5)]


def central_grad(f, x, h=1e-6):
    g = np.zeros_like(x)
    for i in range(x.size):
        e = np.zeros_like(x)
        e[i] = h
        g[i] = (f(x + e) - f(x - e)) / (2 * h)
    return g


# ---------------------------------------------------------------------------
# frame


def test_frame_n3():
    f = dy.build_frame(3, 1)
    np.testing.assert_allclose(f.A, [[2, 1], [1, 2]], atol=0)
    np.testing.assert_allclose(f.S, [[math.sqrt(2), 0], [math.sqrt(2) / 2, math.sqrt(6) / 2]], atol=1e-15)


def test_frame_n2():
    f = dy.build_frame(2, 1)
    np.testing.assert_allclose(f.A, [[2.0]])
    np.testing.assert_allclose(f.S, [[math.sqrt(2)]])


def test_frame_n4_d2_spectrum():
    f = dy.build_frame(4, 2)
    np.testing.assert_allclose(np.sort(np.linalg.eigvalsh(f.A)), [1, 1, 1, 1, 4, 4], atol=1e-12)


@pytest.mark.parametrize("N", range(2, 11))
@pytest.mark.parametrize("d", [1, 2, 3])
def test_frame_invariants(N, d):
    f = dy.build_frame(N, d)
    assert np.max(np.abs(f.S @ f.S.T - f.A)) <= 1e-12
    lam = np.sort(np.linalg.eigvalsh(f.A))
    expect = np.sort([1.0] * ((N - 2) * d) + [float(N)] * d)
    np.testing.assert_allclose(lam, expect, atol=1e-10)
    assert np.allclose(f.S, np.tril(f.S))
    diag = np.sort(np.diag(f.S))
    np.testing.assert_allclose(diag, np.sort(np.repeat([math.sqrt(k / (k - 1)) for k in range(2, N + 1)], d)),
                               atol=1e-14)
    np.testing.assert_allclose(f.S_inv @ f.S, np.eye(f.dim), atol=1e-12)


@settings(max_examples=40, deadline=None)
@given(N=st.integers(2, 8), d=st.integers(1, 3), seed=st.integers(0, 2**31))
def test_coordinate_round_trips(N, d, seed):
    f = dy.build_frame(N, d)
    rng = np.random.default_rng(seed)
    r = rng.standard_normal((5, f.dim)) * 10
    np.testing.assert_allclose(f.Y_to_relative(f.relative_to_Y(r)), r, atol=1e-12 * 10)
    X = f.relative_to_full(r, center=rng.standard_normal(d))
    np.testing.assert_allclose(f.full_to_relative(X), r, atol=1e-12 * 10)
    c = f.relative_to_full(r).reshape(5, N, d).mean(axis=1)
    np.testing.assert_allclose(c, 0, atol=1e-12 * 10)


# ---------------------------------------------------------------------------
# energies and drifts


def test_hamiltonian_examples():
    f2, f3 = dy.build_frame(2, 1), dy.build_frame(3, 1)
    assert dy.hamiltonian(f2, QUAD, np.array([1.7])) == pytest.approx(1.7**2 / 2)
    u, v = 0.4, -1.1
    assert dy.hamiltonian(f3, QUAD, np.array([u, v])) == pytest.approx((u * u + v * v + (u - v) ** 2) / 3)
    p = PowerShifted(1.5, 1.5, 0.9)
    f5 = dy.build_frame(5, 2)
    assert dy.hamiltonian(f5, p, np.zeros(f5.dim)) == pytest.approx(10 * 1.5**0.9 / 5)


def test_hamiltonian_equals_energy_up_to_self_terms():
    rng = np.random.default_rng(0)
    f = dy.build_frame(4, 2)
    p = EXAMPLES[1]
    X = rng.standard_normal(8)
    J = dy.energy_full(p, X, 4, 2)
    H = dy.hamiltonian(f, p, f.full_to_relative(X))
    # J includes the N self terms Phi(0)/(2N) each and counts each pair once
    assert J == pytest.approx(H + p(0.0) / 2)


def test_drift_full_two_particles():
    X = np.array([0.3, 1.9])
    np.testing.assert_allclose(dy.drift_full(QUAD, X, 2, 1), [1.6, -1.6], atol=1e-14)


@pytest.mark.parametrize("p", EXAMPLES, ids=str)
def test_drift_full_is_minus_energy_gradient(p):
    rng = np.random.default_rng(1)
    for _ in range(50):
        N, d = rng.integers(2, 6), rng.integers(1, 4)
        X = rng.standard_normal(N * d) * 2
        drift = dy.drift_full(p, X, N, d)
        fd = -central_grad(lambda y: dy.energy_full(p, y, N, d), X)
        assert np.max(np.abs(drift - fd)) < 1e-5 * max(1.0, np.max(np.abs(fd)))
        np.testing.assert_allclose(drift.reshape(N, d).sum(axis=0), 0, atol=1e-12)


@pytest.mark.parametrize("p", EXAMPLES, ids=str)
def test_drift_relative_is_A_grad_H(p):
    rng = np.random.default_rng(2)
    for _ in range(50):
        N, d = int(rng.integers(2, 6)), int(rng.integers(1, 4))
        f = dy.build_frame(N, d)
        r = rng.standard_normal(f.dim) * 2
        b = -dy.drift_relative(f, p, r)
        fd = f.A @ central_grad(lambda y: dy.hamiltonian(f, p, y), r)
        assert np.max(np.abs(b - fd)) < 1e-5 * max(1.0, np.max(np.abs(fd)))
        np.testing.assert_allclose(dy.grad_hamiltonian(f, p, r), central_grad(lambda y: dy.hamiltonian(f, p, y), r),
                                   atol=1e-5 * max(1.0, np.max(np.abs(fd))))


@pytest.mark.parametrize("p", EXAMPLES, ids=str)
def test_drift_Y_is_minus_grad(p):
    rng = np.random.default_rng(3)
    for _ in range(20):
        f = dy.build_frame(4, 2)
        Y = rng.standard_normal(f.dim)
        fd = -central_grad(lambda y: dy.hamiltonian(f, p, f.Y_to_relative(y)), Y)
        np.testing.assert_allclose(dy.drift_Y(f, p, Y), fd, atol=1e-5 * max(1.0, np.max(np.abs(fd))))


def test_relative_drift_matches_full_drift():
    rng = np.random.default_rng(4)
    p = EXAMPLES[1]
    f = dy.build_frame(5, 2)
    X = rng.standard_normal(10)
    dX = dy.drift_full(p, X, 5, 2)
    np.testing.assert_allclose(f.full_to_relative(dX), dy.drift_relative(f, p, f.full_to_relative(X)), atol=1e-12)


def test_quadratic_two_particle_drift():
    f = dy.build_frame(2, 1)
    np.testing.assert_allclose(dy.drift_relative(f, QUAD, np.array([0.7])), [-1.4])


def test_drift_vanishes_at_origin():
    f = dy.build_frame(4, 3)
    np.testing.assert_array_equal(dy.drift_relative(f, PowerShifted(1.0, 2.0, 0.8), np.zeros(f.dim)), 0)


def test_coincident_pair_without_limit_is_error():
    X = np.array([0.0, 0.0, 1.0])
    with pytest.raises(NumericError, match="coincident"):
        dy.drift_full(PurePower(0.8), X, 3, 1)
    # the admissible families extend the force by 0
    np.testing.assert_allclose(dy.drift_full(EXAMPLES[1], X, 3, 1).sum(), 0, atol=1e-14)


# ---------------------------------------------------------------------------
# simulation


def ou_spec(**kw):
    base = dict(N=3, d=1, potential=QUAD, dt=0.01, T=1.0, n_paths=2000, seed=1)
    base.update(kw)
    return dy.SystemSpec(**base)


def test_zero_noise_fixed_point():
    spec = ou_spec(n_paths=3, T=0.5, snapshot_every=0.1)
    ens = dy.simulate(spec, noise_scale=0.0)
    np.testing.assert_array_equal(ens.states, 0.0)
    spec = dy.SystemSpec(N=3, d=2, potential=EXAMPLES[1], dt=0.01, T=0.5, n_paths=2, snapshot_every=0.1)
    ens = dy.simulate(spec, "full", noise_scale=0.0)
    assert np.all(ens.states == 0.0)


def test_snapshot_grid():
    spec = ou_spec(T=1.0, dt=0.01, snapshot_every=0.25, n_paths=5)
    ens = dy.simulate(spec)
    np.testing.assert_allclose(ens.times, [0, 0.25, 0.5, 0.75, 1.0])
    assert ens.states.shape == (5, 5, 2)


def test_reproducible_by_seed_and_path():
    spec = ou_spec(n_paths=2500, T=0.2, snapshot_every=0.1, initial=dy.InitialCondition("gaussian"))
    full = dy.simulate(spec)
    part = dy.simulate(spec, paths=(1000, 2300))
    np.testing.assert_array_equal(full.states[1000:2300], part.states)
    threaded = dy.simulate(spec, threads=3)
    np.testing.assert_array_equal(full.states, threaded.states)
    other = dy.simulate(dy.SystemSpec(**{**spec.__dict__, "seed": 2}))
    assert not np.array_equal(full.states, other.states)


def test_divergence_is_recorded():
    spec = ou_spec(dt=2.0, T=2000.0, n_paths=4, initial=dy.InitialCondition("point", x0=(1.0, 0.5)))
    ens = dy.simulate(spec)
    assert ens.n_diverged == 4
    assert np.all(ens.diverged_step > 0)
    assert not np.any(ens.alive)


def test_two_particle_stationary_variance():
    dt = 0.01
    spec = dy.SystemSpec(N=2, d=1, potential=QUAD, dt=dt, T=5.0, n_paths=20000, seed=3)
    x = dy.simulate(spec).states[:, -1, 0]
    # Euler-Maruyama stationary variance of r' = (1 - 2 dt) r + sqrt(2 dt) xi
    var_em = 1 / (2 * (1 - dt))
    se = var_em * math.sqrt(2 / x.size)
    assert abs(x.var() - var_em) < 4 * se
    assert abs(x.mean()) < 4 * math.sqrt(var_em / x.size)


def linear_em_cov(frame, p, dt, T, C0):
    """Exact covariance recursion of Euler-Maruyama for a drift that is linear in r."""
    B = -np.column_stack([dy.drift_relative(frame, p, e) for e in np.eye(frame.dim)])
    M = np.eye(frame.dim) - dt * B
    C = C0.copy()
    for _ in range(int(round(T / dt))):
        C = M @ C @ M.T + dt * frame.A
    return C, B


def exact_ou_cov(frame, B, T, C0, n=4000):
    E = expm(-B * T)
    s = np.linspace(0, T, n + 1)
    vals = np.array([expm(-B * t) @ frame.A @ expm(-B * t).T for t in s])
    w = np.full(n + 1, T / n)
    w[[0, -1]] /= 2
    return E @ C0 @ E.T + np.tensordot(w, vals, axes=1)


def test_em_weak_order_one():
    f = dy.build_frame(3, 1)
    C0 = np.array([[1.0, 0.3], [0.3, 0.8]])
    dts = [1e-1, 5e-2, 2e-2, 1e-2, 5e-3, 2e-3, 1e-3]
    errs = []
    for dt in dts:
        C, B = linear_em_cov(f, QUAD, dt, 1.0, C0)
        errs.append(abs(np.trace(C) - np.trace(exact_ou_cov(f, B, 1.0, C0))))
    slope = np.polyfit(np.log(dts), np.log(errs), 1)[0]
    assert 0.7 <= slope <= 1.3


def test_simulation_matches_em_recursion():
    f = dy.build_frame(3, 1)
    C0 = np.array([[1.0, 0.3], [0.3, 0.8]])
    dt = 0.1
    C, _ = linear_em_cov(f, QUAD, dt, 1.0, C0)
    spec = ou_spec(dt=dt, T=1.0, n_paths=40000, initial=dy.InitialCondition("gaussian", cov=tuple(map(tuple, C0))))
    x = dy.simulate(spec).states[:, -1]
    q = np.sum(x * x, axis=1)
    assert abs(q.mean() - np.trace(C)) < 4 * q.std() / math.sqrt(q.size)


def _moments(r):
    n = len(r)
    m = r.mean(axis=0)
    c = np.cov(r.T)
    return m, c, n


@pytest.mark.parametrize("layout", ["full", "Y"])
def test_layouts_agree_in_distribution(layout):
    init = dy.InitialCondition("point", x0=(1.0, -0.5))
    spec = ou_spec(N=3, T=0.5, dt=0.01, n_paths=20000, initial=init)
    a = dy.simulate(spec, "relative").relative()[:, -1]
    b = dy.simulate(dy.SystemSpec(**{**spec.__dict__, "seed": 11}), layout).relative()[:, -1]
    ma, ca, n = _moments(a)
    mb, cb, _ = _moments(b)
    se_m = np.sqrt((np.diag(ca) + np.diag(cb)) / n)
    assert np.all(np.abs(ma - mb) < 4 * se_m)
    # var of a sample covariance entry (Gaussian): (c_ii c_jj + c_ij^2)/n
    se_c = np.sqrt(2 * (np.outer(np.diag(ca), np.diag(ca)) + ca**2) / n)
    assert np.all(np.abs(ca - cb) < 4 * se_c)


def test_initial_conditions():
    spec = ou_spec(n_paths=3000, T=0.01, initial=dy.InitialCondition("radial_power", r_min=2, r_max=50, tail=1.2))
    r0 = dy.simulate(spec).states[:, 0]
    rad = np.linalg.norm(r0, axis=1)
    assert rad.min() >= 2 and rad.max() <= 50
    # truncated power law: P(R > 4) = (4^-t - 50^-t) / (2^-t - 50^-t)
    t = 1.2
    expect = (4**-t - 50**-t) / (2**-t - 50**-t)
    assert abs(np.mean(rad > 4) - expect) < 4 * math.sqrt(expect * (1 - expect) / rad.size)
    st_spec = ou_spec(n_paths=20000, T=0.01, initial=dy.InitialCondition("stationary", burn_in=5.0))
    r0 = dy.simulate(st_spec).states[:, 0]
    # Euler-Maruyama stationary covariance for B = 2I is A / (4 (1 - dt))
    C = np.array([[0.5, 0.25], [0.25, 0.5]]) / (1 - 0.01)
    c = np.cov(r0.T)
    se = np.sqrt((np.outer(np.diag(C), np.diag(C)) + C**2) / r0.shape[0])
    assert np.all(np.abs(c - C) < 4 * se)


def test_step_halving_reports_levels():
    spec = ou_spec(N=2, T=1.0, dt=0.1, n_paths=2000)
    res = dy.step_halving(spec, lambda x: x[:, 0] ** 2, levels=3)
    assert [r[0] for r in res] == [0.1, 0.05, 0.025]
    assert all(r[2] > 0 for r in res)


def test_spec_validation():
    with pytest.raises(ConfigError):
        ou_spec(dt=0.0)
    with pytest.raises(ConfigError):
        ou_spec(T=0.001)
    with pytest.raises(ConfigError):
        ou_spec(moment_s=1.0)
    with pytest.raises(ConfigError):
        dy.simulate(ou_spec(n_paths=2), "polar")


def test_kappa():
    s = dy.SystemSpec(N=3, d=1, potential=PowerShifted(1.0, 1.5, 0.9), dt=0.01, T=1, n_paths=1, moment_s=4)
    assert s.kappa == pytest.approx(2 / 0.65)
