"""Contraction-mapping certificate for linear TD.

The projected Bellman operator is a contraction in the mu-weighted norm
when the 2k x 2k matrix

    E_mu[F] = [[Phi' D Phi,     Phi' D P Phi],
               [Phi' P' D Phi,  Phi' D Phi ]]

is positive semidefinite. Everything here works on the chain induced by a
fixed policy, so MRPs and MDPs share one code path.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass

import numpy as np

from .features import FeatureMap
from .models import (
    FiniteMRP,
    NonErgodicError,
    exact_value,
    induced_chain,
    stationary_distribution,
    weights_of,
)

DEFAULT_TOL = 0.005
SUPPORT_EPS = 1e-12


class DegenerateWeightingError(ArithmeticError):
    """Phi' D_mu Phi is singular, so the Schur form is undefined."""


class UnboundedDeltaError(ValueError):
    """mu and nu disagree on support, so the mismatch factor is infinite."""


def successor_features(fmap: FeatureMap, chain: FiniteMRP) -> np.ndarray:
    """Rows E[phi(s', a') | s, a] under the chain."""
    if chain.n != fmap.count:
        raise ValueError(f"feature map has {fmap.count} rows, chain has {chain.n} states")
    return chain.P @ fmap.Phi


def _pair_index(fmap: FeatureMap, s: int, a: int) -> int:
    if not 0 <= a < fmap.m:
        raise IndexError(f"action {a} out of range")
    idx = s * fmap.m + a
    if s < 0 or idx >= fmap.count:
        raise IndexError(f"state {s} out of range")
    return idx


def f_matrix(fmap: FeatureMap, model, policy=None, s: int = 0, a: int = 0) -> np.ndarray:
    """F at a single pair; both diagonal blocks are phi phi'."""
    chain = induced_chain(model, policy)
    x = _pair_index(fmap, s, a)
    phi = fmap.Phi[x]
    psi = chain.P[x] @ fmap.Phi
    top = np.outer(phi, phi)
    cross = np.outer(phi, psi)
    return np.block([[top, cross], [cross.T, top]])


def expected_f(fmap: FeatureMap, model, policy=None, dist=None) -> np.ndarray:
    chain = induced_chain(model, policy)
    mu = weights_of(dist)
    if mu.shape != (fmap.count,):
        raise ValueError(f"distribution has {mu.size} entries, expected {fmap.count}")
    return _assemble(fmap.Phi, successor_features(fmap, chain), mu)


def _assemble(Phi: np.ndarray, Psi: np.ndarray, mu: np.ndarray) -> np.ndarray:
    M = Phi.T @ (mu[:, None] * Phi)
    N = Phi.T @ (mu[:, None] * Psi)
    F = np.block([[M, N], [N.T, M]])
    return 0.5 * (F + F.T)


def min_eig(F: np.ndarray) -> float:
    return float(np.linalg.eigvalsh(F)[0])


@dataclass(frozen=True)
class CertificateReport:
    expected_F: np.ndarray
    lambda_min: float
    tol: float
    satisfied: bool
    delta: float | None
    bound_factor: float | None
    gamma: float

    def to_dict(self) -> dict:
        d = asdict(self)
        d.pop("expected_F")
        return d


def distribution_mismatch(nu, mu) -> float:
    """max_{x, y} (nu(x) / mu(x)) * (mu(y) / nu(y)) over the common support."""
    nu, mu = weights_of(nu), weights_of(mu)
    in_nu, in_mu = nu > SUPPORT_EPS, mu > SUPPORT_EPS
    if np.any(in_nu != in_mu):
        raise UnboundedDeltaError("mu and nu have different supports")
    ratio = nu[in_mu] / mu[in_mu]
    return float(ratio.max() / ratio.min())


def bound_factor(gamma: float, delta: float) -> float:
    return (1.0 + gamma * math.sqrt(delta)) / (1.0 - gamma)


def certify(fmap: FeatureMap, model, policy=None, dist=None, tol: float = DEFAULT_TOL, nu=None) -> CertificateReport:
    if tol < 0:
        raise ValueError("tol must be nonnegative")
    chain = induced_chain(model, policy)
    F = expected_f(fmap, chain, None, dist)
    try:
        lam = min_eig(F)
    except np.linalg.LinAlgError as exc:
        raise ArithmeticError(f"eigen-solve failed: {exc}") from exc
    delta = factor = None
    try:
        if nu is None:
            nu = stationary_distribution(chain.P)
        delta = distribution_mismatch(nu, dist)
        factor = bound_factor(chain.gamma, delta)
    except (NonErgodicError, UnboundedDeltaError):
        pass
    return CertificateReport(F, lam, tol, lam >= -tol, delta, factor, chain.gamma)


@dataclass(frozen=True)
class SchurCheck:
    lmi_min_eig: float
    schur_max_eig: float
    lmi_satisfied: bool
    schur_satisfied: bool

    @property
    def agree(self) -> bool:
        return self.lmi_satisfied == self.schur_satisfied


def schur_equivalence_check(fmap: FeatureMap, model, policy=None, dist=None, tol: float = 1e-12, cond_max: float = 1e10) -> SchurCheck:
    """Evaluate the contraction condition in Schur form and in LMI form.

    Schur form: N' M^{-1} N - M <= 0 with M = Phi' D Phi, N = Phi' D P Phi.
    """
    chain = induced_chain(model, policy)
    mu = weights_of(dist)
    Phi = fmap.Phi
    Psi = successor_features(fmap, chain)
    M = Phi.T @ (mu[:, None] * Phi)
    N = Phi.T @ (mu[:, None] * Psi)
    eig_M = np.linalg.eigvalsh(M)
    if eig_M[0] <= eig_M[-1] / cond_max:
        raise DegenerateWeightingError(f"Phi' D Phi is singular (eigenvalues {eig_M[0]:.3e} .. {eig_M[-1]:.3e})")
    S = N.T @ np.linalg.solve(M, N) - M
    schur = float(np.linalg.eigvalsh(0.5 * (S + S.T))[-1])
    lmi = min_eig(_assemble(Phi, Psi, mu))
    return SchurCheck(lmi, schur, lmi >= -tol, schur <= tol)


@dataclass(frozen=True)
class ErrorBoundResult:
    delta: float
    bound_factor: float
    td_error: float  # E_mu[(phi' w* - Q)^2] at the TD fixed point
    best_error: float  # min_w E_mu[(phi' w - Q)^2]
    lambda_min: float
    holds: bool

    @property
    def norm_holds(self) -> bool:
        """The unsquared form ||Phi w* - Q||_mu <= factor * min_w ||Phi w - Q||_mu."""
        return math.sqrt(self.td_error) <= self.bound_factor * math.sqrt(self.best_error) + 1e-12

    @property
    def ratio(self) -> float:
        return self.td_error / self.best_error if self.best_error > 0 else (0.0 if self.td_error == 0 else math.inf)


def td_error_bound(fmap: FeatureMap, model, policy=None, mu=None, nu=None, slack: float = 1e-12) -> ErrorBoundResult:
    """Check the squared-error bound for the TD fixed point under mu."""
    from .td import lstd_fixed_point

    chain = induced_chain(model, policy)
    mu_w = weights_of(mu)
    if nu is None:
        nu = stationary_distribution(chain.P)
    delta = distribution_mismatch(nu, mu_w)
    factor = bound_factor(chain.gamma, delta)
    Q = exact_value(chain)
    Phi = fmap.Phi
    w_td = lstd_fixed_point(fmap, chain, None, mu_w).w
    td_err = float(mu_w @ (Phi @ w_td - Q) ** 2)
    sw = np.sqrt(mu_w)
    w_ls, *_ = np.linalg.lstsq(sw[:, None] * Phi, sw * Q, rcond=None)
    best = float(mu_w @ (Phi @ w_ls - Q) ** 2)
    lam = min_eig(expected_f(fmap, chain, None, mu_w))
    return ErrorBoundResult(delta, factor, td_err, best, lam, td_err <= factor * best + slack)
