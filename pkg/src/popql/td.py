"""Linear TD / Q-evaluation: closed-form fixed point and iterative updates."""

from __future__ import annotations

import csv
import json
from dataclasses import asdict, dataclass, field

import numpy as np

from .certificate import successor_features
from .features import FeatureMap
from .models import induced_chain, weights_of

DIVERGENCE_CEILING = 1e6
COND_MAX = 1e12


class IllConditionedError(ArithmeticError):
    def __init__(self, cond: float):
        super().__init__(f"TD system is ill-conditioned (condition number {cond:.3e})")
        self.cond = cond


class DivergenceError(ArithmeticError):
    pass


@dataclass(frozen=True)
class LinearValue:
    w: np.ndarray

    def __post_init__(self):
        w = np.array(self.w, dtype=float)
        if not np.all(np.isfinite(w)):
            raise DivergenceError("non-finite weights")
        object.__setattr__(self, "w", w)

    def values(self, fmap: FeatureMap) -> np.ndarray:
        return fmap.Phi @ self.w


@dataclass(frozen=True)
class ExpectedTransitions:
    """Full enumeration of the TD expectation: rows are weighted by ``weights``.

    ``weights`` is mu * u; with u = 1 this is plain TD under mu.
    """

    Phi: np.ndarray
    Psi: np.ndarray  # E[phi(s', a')] per row
    rewards: np.ndarray
    weights: np.ndarray
    gamma: float


@dataclass(frozen=True)
class TransitionBatch:
    """Sampled transitions as flat pair indices; next_idx already carries a' ~ pi(s')."""

    idx: np.ndarray
    rewards: np.ndarray
    next_idx: np.ndarray
    weights: np.ndarray | None = None

    def __len__(self):
        return len(self.idx)


def expected_transitions(fmap: FeatureMap, model, policy=None, dist=None, u=None) -> ExpectedTransitions:
    chain = induced_chain(model, policy)
    mu = weights_of(dist)
    weights = mu if u is None else mu * np.asarray(u, dtype=float)
    return ExpectedTransitions(fmap.Phi, successor_features(fmap, chain), chain.R, weights, chain.gamma)


def sample_batch(rng: np.random.Generator, chain, dist, size: int) -> TransitionBatch:
    """Draw x ~ mu and x' ~ P(x, .) on the induced chain."""
    mu = weights_of(dist)
    idx = rng.choice(mu.size, size=size, p=mu)
    cdf = np.cumsum(chain.P[idx], axis=1)
    nxt = (cdf < rng.random(size)[:, None]).sum(axis=1)
    nxt = np.minimum(nxt, chain.n - 1)
    return TransitionBatch(idx, chain.R[idx], nxt)


def td_step(w: np.ndarray, source, lr: float, u=None, fmap: FeatureMap | None = None, gamma: float | None = None) -> np.ndarray:
    """One semi-gradient TD update.

    ``source`` is either an ExpectedTransitions (exact mode) or a
    TransitionBatch (minibatch mode, which also needs ``fmap`` and ``gamma``).
    In exact mode the weights already include u; pass ``u`` only for batches.
    """
    if isinstance(source, ExpectedTransitions):
        Phi = source.Phi
        delta = Phi @ w - source.rewards - source.gamma * (source.Psi @ w)
        step = Phi.T @ (source.weights * delta)
    else:
        if fmap is None or gamma is None:
            raise ValueError("minibatch mode needs fmap and gamma")
        phi = fmap.Phi[source.idx]
        phi_next = fmap.Phi[source.next_idx]
        delta = phi @ w - source.rewards - gamma * (phi_next @ w)
        c = np.ones(len(source)) if u is None else np.asarray(u, dtype=float)
        if source.weights is not None:
            c = c * source.weights / source.weights.sum()
        else:
            c = c / len(source)
        step = phi.T @ (c * delta)
    w_new = w - lr * step
    if not np.all(np.isfinite(w_new)):
        raise DivergenceError("TD update produced non-finite weights")
    return w_new


def lstd_fixed_point(fmap: FeatureMap, model, policy=None, dist=None, u=None, cond_max: float = COND_MAX) -> LinearValue:
    """Solve Phi' D (Phi - gamma P Phi) w = Phi' D R."""
    src = expected_transitions(fmap, model, policy, dist, u)
    A, b = td_system(src)
    cond = np.linalg.cond(A)
    if not np.isfinite(cond) or cond > cond_max:
        raise IllConditionedError(cond)
    return LinearValue(np.linalg.solve(A, b))


def td_system(src: ExpectedTransitions):
    D = src.weights[:, None]
    A = src.Phi.T @ (D * (src.Phi - src.gamma * src.Psi))
    b = src.Phi.T @ (src.weights * src.rewards)
    return A, b


def approx_error(fmap: FeatureMap, w, reference, dist=None) -> float:
    """Weighted RMSE between Phi w and reference; uniform weights if dist is None."""
    err = fmap.Phi @ np.asarray(w) - np.asarray(reference)
    if dist is None:
        return float(np.sqrt(np.mean(err**2)))
    mu = weights_of(dist)
    if mu.shape != err.shape:
        raise ValueError("distribution and reference shapes differ")
    return float(np.sqrt(mu @ err**2))


@dataclass
class TDConfig:
    lr: float = 1e-3
    steps: int = 100_000
    ceiling: float = DIVERGENCE_CEILING
    record_every: int = 100
    mode: str = "exact"  # or "sampled"
    batch_size: int = 256
    seed: int = 0
    w0: list | None = None


@dataclass
class TDRecord:
    step: int
    error: float
    error_uniform: float
    residual: float
    w_norm: float
    diverged: bool


@dataclass
class TDTrace:
    records: list[TDRecord]
    w: np.ndarray
    diverged: bool
    diverged_at: int | None
    config: dict = field(default_factory=dict)

    @property
    def final_error(self) -> float:
        return self.records[-1].error

    def errors(self) -> np.ndarray:
        return np.array([r.error for r in self.records])

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["step", "error", "error_uniform", "residual", "w_norm", "diverged"])
            for r in self.records:
                writer.writerow([r.step, repr(r.error), repr(r.error_uniform), repr(r.residual), repr(r.w_norm), int(r.diverged)])

    def summary(self) -> dict:
        return {
            "final_error": self.final_error,
            "diverged": self.diverged,
            "diverged_at": self.diverged_at,
            "steps": self.records[-1].step,
            "config": self.config,
        }

    def to_json(self) -> str:
        return json.dumps(self.summary())


def run_td(fmap: FeatureMap, model, policy=None, dist=None, u=None, config: TDConfig | None = None, reference=None) -> TDTrace:
    """Iterate td_step from w0 (zeros by default), stopping early on divergence.

    ``reference`` defaults to the exact value of the induced chain; errors are
    reported mu-weighted and uniform.
    """
    from .models import exact_value

    cfg = config or TDConfig()
    chain = induced_chain(model, policy)
    mu = weights_of(dist)
    ref = exact_value(chain) if reference is None else np.asarray(reference)
    src = expected_transitions(fmap, chain, None, mu, u)
    rng = np.random.default_rng(cfg.seed)
    u_arr = None if u is None else np.asarray(u, dtype=float)
    w = np.zeros(fmap.k) if cfg.w0 is None else np.array(cfg.w0, dtype=float)

    def record(step, w, diverged):
        values = fmap.Phi @ w
        err = float(np.sqrt(mu @ (values - ref) ** 2))
        err_u = float(np.sqrt(np.mean((values - ref) ** 2)))
        bell = values - chain.R - chain.gamma * (src.Psi @ w)
        resid = float(np.sqrt(mu @ bell**2))
        return TDRecord(step, err, err_u, resid, float(np.linalg.norm(w)), diverged)

    records = [record(0, w, False)]
    diverged_at = None
    for t in range(1, cfg.steps + 1):
        try:
            if cfg.mode == "exact":
                w = td_step(w, src, cfg.lr)
            else:
                batch = sample_batch(rng, chain, mu, cfg.batch_size)
                w = td_step(w, batch, cfg.lr, None if u_arr is None else u_arr[batch.idx], fmap, chain.gamma)
        except DivergenceError:
            diverged_at = t
            records.append(TDRecord(t, np.inf, np.inf, np.inf, np.inf, True))
            break
        w_norm = np.linalg.norm(w)
        check = t % cfg.record_every == 0 or t == cfg.steps or w_norm > cfg.ceiling
        if check:
            rec = record(t, w, False)
            if w_norm > cfg.ceiling or rec.error > cfg.ceiling:
                rec.diverged = True
                records.append(rec)
                diverged_at = t
                break
            records.append(rec)
    return TDTrace(records, w, diverged_at is not None, diverged_at, asdict(cfg))
