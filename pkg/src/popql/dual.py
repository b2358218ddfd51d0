"""Low-rank Lagrange dual of the minimal-KL reweighting problem.

The dual variable is Z = [A; B][A; B]' with A, B of shape (k, r). For a
sample x with successor features psi_x = E[phi(x')] the exponent is

    e_x = |A' phi_x|^2 + |B' phi_x|^2 + 2 <B' phi_x, A' psi_x>,

the dual minimizes E_mu[exp(e)], and the optimal reweighting is
u = exp(e) / E_mu[exp(e)], q = u * mu.
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field, replace
from functools import cached_property

import numpy as np

from .certificate import expected_f, min_eig, successor_features
from .features import FeatureMap
from .models import induced_chain, weights_of
from .td import TransitionBatch

EXP_CLAMP = 50.0


@dataclass(frozen=True)
class DualState:
    """Lagrange factors plus the g table (normalized successor inner product)."""

    A: np.ndarray
    B: np.ndarray
    g: np.ndarray | None = None
    normalize: bool = True
    lr_ab: float = 1e-3
    lr_g: float = 1e-2

    def __post_init__(self):
        A = np.array(self.A, dtype=float)
        B = np.array(self.B, dtype=float)
        if A.ndim != 2 or A.shape != B.shape:
            raise ValueError(f"A and B must be matrices of equal shape, got {A.shape} and {B.shape}")
        if A.shape[1] > A.shape[0]:
            raise ValueError("rank may not exceed the feature dimension")
        object.__setattr__(self, "A", A)
        object.__setattr__(self, "B", B)
        if self.g is not None:
            object.__setattr__(self, "g", np.array(self.g, dtype=float))

    @classmethod
    def zeros(cls, k: int, rank: int, n_pairs: int | None = None, **kw) -> "DualState":
        g = None if n_pairs is None else np.zeros(n_pairs)
        return cls(np.zeros((k, rank)), np.zeros((k, rank)), g, **kw)

    @classmethod
    def random(cls, seed, k: int, rank: int, scale: float = 1e-3, n_pairs: int | None = None, **kw) -> "DualState":
        rng = np.random.default_rng(seed)
        A = rng.uniform(-scale, scale, size=(k, rank))
        B = rng.uniform(-scale, scale, size=(k, rank))
        g = None if n_pairs is None else np.zeros(n_pairs)
        return cls(A, B, g, **kw)

    @property
    def k(self) -> int:
        return self.A.shape[0]

    @property
    def rank(self) -> int:
        return self.A.shape[1]

    @property
    def Z(self) -> np.ndarray:
        L = np.vstack([self.A, self.B])
        return L @ L.T

    @cached_property
    def norm_a(self) -> float:
        return float(np.linalg.norm(self.A, 2))

    @cached_property
    def norm_b(self) -> float:
        return float(np.linalg.norm(self.B, 2))

    @cached_property
    def g_scale(self) -> float:
        """Factor that turns a stored g value back into the raw inner product."""
        return self.norm_a * self.norm_b if self.normalize else 1.0


@dataclass(frozen=True)
class ReweightingResult:
    u: np.ndarray
    q: np.ndarray
    kl: float
    saturated: bool = False

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["index", "u", "q"])
            for i, (u, q) in enumerate(zip(self.u, self.q)):
                writer.writerow([i, repr(float(u)), repr(float(q))])


@dataclass(frozen=True)
class DualObjective:
    value: float
    saturated: bool


def dual_terms(fmap: FeatureMap, dual: DualState, s: int, a: int, s_next: int, a_next: int):
    """(y_A, y_B, y_A') at (s, a) -> (s', a')."""
    from .features import features

    phi = features(fmap, s, a)
    phi_next = features(fmap, s_next, a_next)
    return dual.A.T @ phi, dual.B.T @ phi, dual.A.T @ phi_next


def _raw_inner(Phi, Psi, dual):
    return np.einsum("ir,ir->i", Phi @ dual.B, Psi @ dual.A)


def exact_g_table(fmap: FeatureMap, model, policy, dual: DualState) -> np.ndarray:
    """E[<y_B, y_A'>] for every pair, divided by |A||B| when normalizing."""
    Psi = successor_features(fmap, induced_chain(model, policy))
    raw = _raw_inner(fmap.Phi, Psi, dual)
    if not dual.normalize:
        return raw
    scale = dual.norm_a * dual.norm_b
    return raw / scale if scale > 0 else np.zeros_like(raw)


def exact_g(fmap: FeatureMap, model, policy, dual: DualState, s: int, a: int = 0) -> float:
    return float(exact_g_table(fmap, model, policy, dual)[s * fmap.m + a])


def exponents(fmap: FeatureMap, model, policy, dual: DualState, g_mode: str = "exact"):
    """Per-pair exponent e_x. ``g_mode='table'`` reads the inner term from dual.g."""
    Phi = fmap.Phi
    YA, YB = Phi @ dual.A, Phi @ dual.B
    quad = np.einsum("ir,ir->i", YA, YA) + np.einsum("ir,ir->i", YB, YB)
    if g_mode == "exact":
        Psi = successor_features(fmap, induced_chain(model, policy))
        inner = np.einsum("ir,ir->i", YB, Psi @ dual.A)
    elif g_mode == "table":
        if dual.g is None:
            raise ValueError("dual has no g table")
        inner = dual.g * dual.g_scale
    else:
        raise ValueError(f"unknown g_mode {g_mode!r}")
    return quad + 2.0 * inner


def _clamped_exp(e: np.ndarray):
    saturated = bool(np.any(e > EXP_CLAMP))
    return np.exp(np.minimum(e, EXP_CLAMP)), saturated


def dual_objective(fmap: FeatureMap, model, policy, dual: DualState, mu, log: bool = False, g_mode: str = "exact") -> DualObjective:
    """E_mu[exp(e)], or its logarithm."""
    mu = weights_of(mu)
    ex, sat = _clamped_exp(exponents(fmap, model, policy, dual, g_mode))
    value = float(mu @ ex)
    return DualObjective(float(np.log(value)) if log else value, sat)


def dual_gradient(fmap: FeatureMap, model, policy, dual: DualState, mu, log: bool = False, g_mode: str = "exact"):
    """Gradient of dual_objective in (A, B); returns (dA, dB, saturated).

    With g_mode='table' the weights come from the g table, which is the
    expectation of the per-sample update in the training loop.
    """
    mu = weights_of(mu)
    Phi = fmap.Phi
    Psi = successor_features(fmap, induced_chain(model, policy))
    ex, sat = _clamped_exp(exponents(fmap, model, policy, dual, g_mode))
    w = mu * ex
    if log:
        w = w / w.sum()
    WPhi = w[:, None] * Phi
    dA = 2.0 * (WPhi.T @ Phi @ dual.A + Psi.T @ WPhi @ dual.B)
    dB = 2.0 * (WPhi.T @ Phi @ dual.B + WPhi.T @ Psi @ dual.A)
    return dA, dB, sat


def reweighting(fmap: FeatureMap, model, policy, dual: DualState, mu, g_mode: str = "exact") -> ReweightingResult:
    mu = weights_of(mu)
    e = exponents(fmap, model, policy, dual, g_mode)
    sat = bool(np.any(e > EXP_CLAMP))
    e = np.minimum(e, EXP_CLAMP)
    # shift by the max over the support for stability; u is scale free
    support = mu > 0
    shift = e[support].max() if support.any() else 0.0
    ex = np.exp(e - shift)
    # dividing by mu @ 1 as well keeps u exactly 1 for a zero dual
    u = ex / ((mu @ ex) / (mu @ np.ones_like(mu)))
    q = u * mu
    q = q / q.sum()
    with np.errstate(divide="ignore", invalid="ignore"):
        kl = float(np.sum(np.where(q > 0, q * np.log(np.where(q > 0, u, 1.0)), 0.0)))
    return ReweightingResult(u, q, max(kl, 0.0), sat)


@dataclass
class DualConfig:
    rank: int = 4
    lr: float = 0.1
    iterations: int = 50_000
    tol: float = 1e-7
    seed: int = 0
    init_scale: float = 1e-3
    objective: str = "exp"  # or "log"
    normalize: bool = True


@dataclass
class DualSolution:
    dual: DualState
    result: ReweightingResult
    lambda_min: float
    grad_norm: float
    converged: bool
    iterations: int
    objective: float
    saturated: bool
    history: list[float] = field(default_factory=list)


def solve_dual(fmap: FeatureMap, model, policy, mu, config: DualConfig | None = None) -> DualSolution:
    """Gradient descent on the dual from a small seeded random start.

    A step that would raise the objective or make it non-finite is halved
    until it descends; after an accepted step the rate grows back toward
    ``config.lr``. Where plain descent at ``config.lr`` is already monotone
    the iterates are unchanged. Non-convergence is reported through
    ``converged`` and ``grad_norm``.
    """
    cfg = config or DualConfig()
    if cfg.objective not in ("exp", "log"):
        raise ValueError(f"unknown objective {cfg.objective!r}")
    mu = weights_of(mu)
    log = cfg.objective == "log"
    rank = min(cfg.rank, fmap.k)
    dual = DualState.random(cfg.seed, fmap.k, rank, cfg.init_scale, normalize=cfg.normalize)
    chain = induced_chain(model, policy)
    history = []
    grad_norm = np.inf
    saturated = False
    step = cfg.lr
    obj = dual_objective(fmap, chain, None, dual, mu, log).value
    it = 0
    for it in range(1, cfg.iterations + 1):
        dA, dB, sat = dual_gradient(fmap, chain, None, dual, mu, log)
        saturated |= sat
        with np.errstate(over="ignore", invalid="ignore"):
            grad_norm = float(np.sqrt(np.sum(dA**2) + np.sum(dB**2)))
        if not np.isfinite(grad_norm) or grad_norm <= cfg.tol:
            break
        slack = 1e-12 * max(1.0, abs(obj))
        while True:
            cand = replace(dual, A=dual.A - step * dA, B=dual.B - step * dB)
            with np.errstate(over="ignore", invalid="ignore"):
                new = dual_objective(fmap, chain, None, cand, mu, log).value
            if np.isfinite(new) and new <= obj + slack:
                break
            step *= 0.5
            if step < 1e-14 * cfg.lr:
                cand = None
                break
        if cand is None:
            break
        dual, obj = cand, new
        step = min(2.0 * step, cfg.lr)
        if it % 100 == 0:
            history.append(obj)
    dual = replace(dual, g=exact_g_table(fmap, chain, None, dual))
    result = reweighting(fmap, chain, None, dual, mu)
    lam = min_eig(expected_f(fmap, chain, None, result.q))
    final = dual_objective(fmap, chain, None, dual, mu, log)
    return DualSolution(dual, result, lam, grad_norm, grad_norm <= cfg.tol, it, final.value, saturated or final.saturated, history)


def full_support_batch(model, policy, mu) -> TransitionBatch:
    """Every (x, x') with mu(x) P(x, x') > 0, weighted by that mass."""
    chain = induced_chain(model, policy)
    mu = weights_of(mu)
    mass = mu[:, None] * chain.P
    idx, nxt = np.nonzero(mass)
    return TransitionBatch(idx, chain.R[idx], nxt, mass[idx, nxt])


def stochastic_dual_step(dual: DualState, batch: TransitionBatch, fmap: FeatureMap, lr_ab: float | None = None, lr_g: float | None = None) -> DualState:
    """One minibatch update of (A, B) and the g table.

    ``batch.next_idx`` must already carry a' drawn from the policy. The
    weight u uses the stored g, rescaled by |A||B|, and is normalized by
    its minibatch mean.
    """
    if len(batch) == 0:
        raise ValueError("empty minibatch")
    if dual.g is None:
        raise ValueError("dual has no g table")
    lr_ab = dual.lr_ab if lr_ab is None else lr_ab
    lr_g = dual.lr_g if lr_g is None else lr_g
    c = np.full(len(batch), 1.0 / len(batch)) if batch.weights is None else batch.weights / batch.weights.sum()

    phi = fmap.Phi[batch.idx]
    phi_next = fmap.Phi[batch.next_idx]
    yA, yB, yA_next = phi @ dual.A, phi @ dual.B, phi_next @ dual.A
    scale = dual.g_scale
    e = np.einsum("ir,ir->i", yA, yA) + np.einsum("ir,ir->i", yB, yB) + 2.0 * dual.g[batch.idx] * scale
    ex, _ = _clamped_exp(e)
    u = ex / (c @ ex)

    cu = (c * u)[:, None]
    dA = 2.0 * ((cu * phi).T @ yA + (cu * phi_next).T @ yB)
    dB = 2.0 * ((cu * phi).T @ yB + (cu * phi).T @ yA_next)

    inner = np.einsum("ir,ir->i", yB, yA_next)
    if dual.normalize:
        target = inner / scale if scale > 0 else np.zeros_like(inner)
    else:
        target = inner
    # exact per-index averaging of the targets present in the batch
    tot = np.bincount(batch.idx, weights=c * target, minlength=dual.g.size)
    wt = np.bincount(batch.idx, weights=c, minlength=dual.g.size)
    hit = wt > 0
    g = dual.g.copy()
    g[hit] += lr_g * (tot[hit] / wt[hit] - g[hit])

    return replace(dual, A=dual.A - lr_ab * dA, B=dual.B - lr_ab * dB, g=g)


def dual_to_dict(dual: DualState) -> dict:
    return {
        "A": dual.A.tolist(),
        "B": dual.B.tolist(),
        "rank": dual.rank,
        "g": None if dual.g is None else dual.g.tolist(),
        "norm_a": dual.norm_a,
        "norm_b": dual.norm_b,
        "normalize": dual.normalize,
        "lr_ab": dual.lr_ab,
        "lr_g": dual.lr_g,
    }


def dual_from_dict(doc: dict) -> DualState:
    return DualState(doc["A"], doc["B"], doc.get("g"), doc.get("normalize", True), doc.get("lr_ab", 1e-3), doc.get("lr_g", 1e-2))


def dual_to_json(dual: DualState) -> str:
    return json.dumps(dual_to_dict(dual))
