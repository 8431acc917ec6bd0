"""Least-squares recovery of the interaction kernel phi from trajectory increments.

With phi_hat = sum_k c_k psi_k the Euler transform of the dynamics reads
dx ~ dt * sum_k c_k f_k(x) + noise, where f_k is the drift built from the
pair force psi_k(|x|) x.  Whitening by the noise covariance (S S^T in
relative coordinates, identity otherwise) gives the normal system
A_ls c = b_ls with A_ls = sum dt F^T F and b_ls = sum F^T dx over all
increments, F the whitened feature matrix.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .coercivity import HypothesisSpace
from .dynamics import Ensemble, RelativeFrame, kernel_force, layout_drift
from .errors import ConfigError, NumericError, PreconditionError


@dataclass(frozen=True)
class RegressionProblem:
    hs: HypothesisSpace = field(repr=False)
    layout: str
    N: int
    d: int
    A_ls: np.ndarray = field(repr=False)
    b_ls: np.ndarray = field(repr=False)
    n_increments: int
    regularization: float | None = None
    source: dict = field(default_factory=dict)

    def __add__(self, other: "RegressionProblem") -> "RegressionProblem":
        if (other.hs is not self.hs or other.layout != self.layout
                or (other.N, other.d) != (self.N, self.d)):
            raise ConfigError("can only merge problems over the same space, layout and system size")
        return RegressionProblem(self.hs, self.layout, self.N, self.d, self.A_ls + other.A_ls,
                                 self.b_ls + other.b_ls, self.n_increments + other.n_increments,
                                 self.regularization, {"merged": [self.source, other.source]})

    def default_regularization(self) -> float:
        return 1e-10 * float(np.trace(self.A_ls)) / self.hs.n


def _whitener(frame: RelativeFrame, layout: str):
    return frame.S_inv if layout == "relative" else None


def _restricted(hs: HypothesisSpace):
    """The basis callables with the space's support cut-off applied."""
    def cut(f):
        def g(r):
            r = np.asarray(r, float)
            return np.where((r >= 0) & (r <= hs.R_max), np.asarray(f(r), float) * np.ones_like(r), 0.0)
        return g

    return [cut(f) for f in hs.functions]


def assemble_arrays(frame: RelativeFrame, layout: str, hs: HypothesisSpace, X: np.ndarray,
                    dX: np.ndarray, dt, source: dict | None = None) -> RegressionProblem:
    """Normal system from states X (m, dim), increments dX (m, dim) and step(s) dt."""
    X = np.asarray(X, float)
    dX = np.asarray(dX, float)
    m = len(X)
    if m == 0:
        raise PreconditionError("no increments in the window")
    dt = np.broadcast_to(np.asarray(dt, float), (m,))
    W = _whitener(frame, layout)
    basis = _restricted(hs)
    A = np.zeros((hs.n, hs.n))
    b = np.zeros(hs.n)
    for s in range(0, m, 8192):
        sl = slice(s, s + 8192)
        cols = []
        for k in range(hs.n):
            f = layout_drift(layout, frame, kernel_force(basis[k]))(X[sl])
            cols.append(f if W is None else f @ W.T)
        F = np.stack(cols, axis=-1)  # (chunk, dim, n)
        y = dX[sl] if W is None else dX[sl] @ W.T
        A += np.einsum("m,mik,mil->kl", dt[sl], F, F)
        b += np.einsum("mik,mi->k", F, y)
    return RegressionProblem(hs, layout, frame.N, frame.d, (A + A.T) / 2, b, m, None, source or {})


def assemble(ens: Ensemble, hs: HypothesisSpace, window: tuple | None = None) -> RegressionProblem:
    """Normal system from consecutive snapshot pairs with both times inside the window."""
    t = ens.times
    lo, hi = (t[0], t[-1]) if window is None else window
    tol = 1e-9 * max(1.0, abs(hi))
    if not hi > lo:
        raise PreconditionError("empty time window")
    idx = np.flatnonzero((t >= lo - tol) & (t <= hi + tol))
    if len(idx) < 2:
        raise PreconditionError("window holds fewer than two snapshots")
    states = ens.states[ens.alive]
    X = states[:, idx[:-1]].reshape(-1, states.shape[-1])
    dX = (states[:, idx[1:]] - states[:, idx[:-1]]).reshape(-1, states.shape[-1])
    dts = np.tile(np.diff(t[idx]), len(states))
    if len(X) * X.shape[1] < hs.n:
        raise PreconditionError(f"window has {len(X) * X.shape[1]} scalar observations for {hs.n} unknowns")
    src = {"seed": ens.seed, "path_start": ens.path_start, "n_paths": int(len(states)),
           "window": [float(lo), float(hi)]}
    return assemble_arrays(ens.frame, ens.layout, hs, X, dX, dts, src)


@dataclass(frozen=True)
class LearnResult:
    coefficients: np.ndarray
    regularization: float
    l2_rho_error: float | None = None
    l2_rho_norm_true: float | None = None
    c_hat: float | None = None
    n_increments: int = 0

    def to_dict(self) -> dict:
        return {"coefficients": self.coefficients.tolist(), "regularization": self.regularization,
                "l2_rho_error": self.l2_rho_error, "l2_rho_norm_true": self.l2_rho_norm_true,
                "c_hat": self.c_hat, "n_increments": self.n_increments}


def solve(prob: RegressionProblem, reg: float | None = None) -> tuple[np.ndarray, float]:
    """Coefficients of the (ridge-)regularised normal system."""
    reg = prob.default_regularization() if reg is None else float(reg)
    if reg < 0:
        raise ConfigError("regularisation must be >= 0")
    K = prob.A_ls + reg * np.eye(prob.hs.n)
    try:
        c = np.linalg.solve(K, prob.b_ls)
    except np.linalg.LinAlgError:
        raise NumericError("normal system is singular; use a regularisation > 0") from None
    if not np.all(np.isfinite(c)) or np.linalg.cond(K) > 1e15:
        raise NumericError("normal system is numerically singular; use a regularisation > 0")
    return c, reg


def l2_rho_error(hs: HypothesisSpace, coef, phi_true: Callable, r_samples) -> float:
    """sqrt(mean over samples of (phi_hat(r) - phi(r))^2)."""
    r = np.asarray(r_samples, float).ravel()
    diff = hs.evaluate(r) @ np.asarray(coef, float) - np.asarray(phi_true(r), float)
    return float(math.sqrt(np.mean(diff**2)))


def solve_and_report(prob: RegressionProblem, rho_samples=None, phi_true: Callable | None = None,
                     reg: float | None = None, c_hat: float | None = None) -> LearnResult:
    c, reg = solve(prob, reg)
    err = norm = None
    if phi_true is not None:
        if rho_samples is None:
            raise ConfigError("the L2(rho) error needs samples of |r_12|")
        err = l2_rho_error(hs=prob.hs, coef=c, phi_true=phi_true, r_samples=rho_samples)
        r = np.asarray(rho_samples, float).ravel()
        norm = float(math.sqrt(np.mean(np.asarray(phi_true(r), float) ** 2)))
    return LearnResult(c, reg, err, norm, c_hat, prob.n_increments)
