"""Softmax actor, joint policy/sampling projection, and the training loop."""

from __future__ import annotations

import csv
import json
from dataclasses import asdict, dataclass, field, replace

import numpy as np

from .certificate import expected_f, min_eig
from .dual import (
    DualState,
    _clamped_exp,
    dual_gradient,
    dual_objective,
    exact_g_table,
    reweighting,
    stochastic_dual_step,
)
from .features import FeatureMap
from .models import (
    DiscretePolicy,
    FiniteMDP,
    SampleDistribution,
    exact_q,
    greedy_policy,
    mdp_to_mrp,
    value_iteration,
    weights_of,
)
from .td import DivergenceError, ExpectedTransitions, TransitionBatch, td_step

DIVERGENCE_CEILING = 1e6


def softmax(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=1, keepdims=True)
    ez = np.exp(z)
    return ez / ez.sum(axis=1, keepdims=True)


def row_entropy(pi: np.ndarray) -> np.ndarray:
    with np.errstate(divide="ignore", invalid="ignore"):
        return -np.sum(np.where(pi > 0, pi * np.log(pi), 0.0), axis=1)


@dataclass(frozen=True)
class SoftmaxPolicy:
    logits: np.ndarray
    alpha: float = 0.0
    target_entropy: float | None = None

    def __post_init__(self):
        object.__setattr__(self, "logits", np.array(self.logits, dtype=float))

    @classmethod
    def uniform(cls, n: int, m: int, **kw) -> "SoftmaxPolicy":
        return cls(np.zeros((n, m)), **kw)

    @classmethod
    def from_policy(cls, policy: DiscretePolicy, floor: float = 1e-6, **kw) -> "SoftmaxPolicy":
        return cls(np.log(np.maximum(policy.pi, floor)), **kw)

    @property
    def probs(self) -> np.ndarray:
        return softmax(self.logits)

    def as_policy(self) -> DiscretePolicy:
        return DiscretePolicy(self.probs)

    def entropy(self) -> np.ndarray:
        return row_entropy(self.probs)


def state_marginal(mu, n: int, m: int) -> np.ndarray:
    return weights_of(mu).reshape(n, m).sum(axis=1)


def policy_objective(fmap: FeatureMap, mdp: FiniteMDP, policy: SoftmaxPolicy, dual: DualState, mu, w, beta: float, alpha: float | None = None) -> float:
    """E_{s~mu, a~pi}[Q_w] + alpha E_s[H(pi_s)] + beta log E_mu[exp(e)]."""
    alpha = policy.alpha if alpha is None else alpha
    pi = policy.probs
    rho = state_marginal(mu, mdp.n, mdp.m)
    Q = (fmap.Phi @ np.asarray(w)).reshape(mdp.n, mdp.m)
    value = rho @ (np.sum(pi * Q, axis=1) + alpha * row_entropy(pi))
    if beta:
        value += beta * dual_objective(fmap, mdp, policy.as_policy(), dual, mu, log=True).value
    return float(value)


def policy_gradient(fmap: FeatureMap, mdp: FiniteMDP, policy: SoftmaxPolicy, dual: DualState, mu, w, beta: float, alpha: float | None = None) -> np.ndarray:
    """Gradient of policy_objective with respect to the logits (ascent direction).

    The coupling term is 2 beta E_q[grad_pi E_pi <y_B, y_A'>] with q the
    reweighting under the current policy; the actor loss is its negation.
    """
    alpha = policy.alpha if alpha is None else alpha
    n, m = mdp.n, mdp.m
    pi = policy.probs
    rho = state_marginal(mu, n, m)
    Q = (fmap.Phi @ np.asarray(w)).reshape(n, m)

    grad = pi * (Q - np.sum(pi * Q, axis=1, keepdims=True))
    if alpha:
        logpi = np.log(np.maximum(pi, 1e-300))
        H = row_entropy(pi)
        grad += alpha * (-pi * (logpi + H[:, None]))
    grad *= rho[:, None]

    if beta:
        q = reweighting(fmap, mdp, policy.as_policy(), dual, mu).q
        YB = fmap.Phi @ dual.B
        # H[s'] = sum_x q_x p(s'|x) y_B(x)
        Hs = mdp.P.reshape(n * m, n).T @ (q[:, None] * YB)
        YA = (fmap.Phi @ dual.A).reshape(n, m, -1)
        G = np.einsum("sr,sar->sa", Hs, YA)
        grad += 2.0 * beta * pi * (G - np.sum(pi * G, axis=1, keepdims=True))
    return grad


class Adam:
    def __init__(self, shape, lr: float, b1: float = 0.9, b2: float = 0.999, eps: float = 1e-8):
        self.lr, self.b1, self.b2, self.eps = lr, b1, b2, eps
        self.m = np.zeros(shape)
        self.v = np.zeros(shape)
        self.t = 0

    def ascent(self, grad: np.ndarray) -> np.ndarray:
        self.t += 1
        self.m = self.b1 * self.m + (1 - self.b1) * grad
        self.v = self.b2 * self.v + (1 - self.b2) * grad**2
        mh = self.m / (1 - self.b1**self.t)
        vh = self.v / (1 - self.b2**self.t)
        return self.lr * mh / (np.sqrt(vh) + self.eps)


@dataclass
class TrainConfig:
    beta: float = 0.5
    lr_q: float = 1e-3
    lr_pi: float = 1e-4
    lr_ab: float = 1e-2
    lr_g: float | None = None  # defaults to 10 * lr_ab
    lr_alpha: float = 1e-3
    alpha: float = 0.0
    target_entropy: float | None = 0.5
    steps: int = 10_000
    batch_size: int = 256
    seed: int = 0
    mode: str = "exact"  # or "sampled"
    dual_frozen: bool = False
    dual_rank: int = 4
    dual_init: float = 1e-3
    log_every: int = 100
    ceiling: float = DIVERGENCE_CEILING

    def __post_init__(self):
        if self.beta < 0:
            raise ValueError("beta must be nonnegative")
        for name in ("lr_q", "lr_pi", "lr_ab", "lr_alpha"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")
        if self.lr_g is None:
            self.lr_g = 10.0 * self.lr_ab
        if self.mode not in ("exact", "sampled"):
            raise ValueError(f"unknown mode {self.mode!r}")


LOG_COLUMNS = ("step", "q_loss", "dual_objective", "lambda_min", "kl", "entropy", "alpha", "return_normalized", "u_mean", "q_sum", "u_max_dev")


@dataclass
class TrainResult:
    policy: SoftmaxPolicy
    w: np.ndarray
    dual: DualState
    log: list[dict]
    diverged: bool
    diverged_at: int | None
    config: dict = field(default_factory=dict)

    @property
    def final_return(self) -> float:
        return self.log[-1]["return_normalized"]

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            writer = csv.DictWriter(fh, fieldnames=LOG_COLUMNS)
            writer.writeheader()
            for row in self.log:
                writer.writerow({k: repr(v) if isinstance(v, float) else v for k, v in row.items()})

    def to_json(self) -> str:
        return json.dumps(
            {
                "logits": self.policy.logits.tolist(),
                "alpha": self.policy.alpha,
                "w": self.w.tolist(),
                "A": self.dual.A.tolist(),
                "B": self.dual.B.tolist(),
                "g": None if self.dual.g is None else self.dual.g.tolist(),
                "diverged": self.diverged,
                "diverged_at": self.diverged_at,
                "config": self.config,
            }
        )


class ReturnNormalizer:
    """Maps exact returns to [0, 1] between the uniform and optimal policies."""

    def __init__(self, mdp: FiniteMDP):
        self.mdp = mdp
        self.optimal = greedy_policy(value_iteration(mdp))
        self.uniform = DiscretePolicy.uniform(mdp.n, mdp.m)
        self.j_opt = policy_return(mdp, self.optimal)
        self.j_unif = policy_return(mdp, self.uniform)

    def __call__(self, policy: DiscretePolicy) -> float:
        span = self.j_opt - self.j_unif
        if span <= 0:
            raise ArithmeticError("optimal and uniform returns coincide; normalization undefined")
        return (policy_return(self.mdp, policy) - self.j_unif) / span


def policy_return(mdp: FiniteMDP, policy: DiscretePolicy) -> float:
    """Expected discounted return from the start distribution."""
    Q = exact_q(mdp, policy).reshape(mdp.n, mdp.m)
    return float(mdp.start @ np.sum(policy.pi * Q, axis=1))


def evaluate_policy(mdp: FiniteMDP, policy: DiscretePolicy, normalizer: ReturnNormalizer | None = None) -> float:
    """Normalized return: 1 for the optimal policy, 0 for uniform random."""
    return (normalizer or ReturnNormalizer(mdp))(policy)


def behavior_cloning(dataset, n: int, m: int) -> DiscretePolicy:
    """Empirical action frequencies per state; unvisited states get uniform rows.

    ``dataset`` is a SampleDistribution, a weight vector over pairs, or an
    iterable of Transition records.
    """
    if isinstance(dataset, SampleDistribution) or isinstance(dataset, np.ndarray):
        counts = weights_of(dataset).reshape(n, m).copy()
    else:
        counts = np.zeros((n, m))
        for t in dataset:
            counts[t.s, t.a] += t.count
    totals = counts.sum(axis=1, keepdims=True)
    pi = np.where(totals > 0, counts / np.where(totals > 0, totals, 1.0), 1.0 / m)
    return DiscretePolicy(pi)


def _sample_pairs(rng, mdp: FiniteMDP, pi: np.ndarray, mu: np.ndarray, size: int) -> TransitionBatch:
    idx = rng.choice(mu.size, size=size, p=mu)
    P = mdp.P.reshape(mdp.n * mdp.m, mdp.n)[idx]
    s_next = (np.cumsum(P, axis=1) < rng.random(size)[:, None]).sum(axis=1).clip(max=mdp.n - 1)
    a_next = (np.cumsum(pi[s_next], axis=1) < rng.random(size)[:, None]).sum(axis=1).clip(max=mdp.m - 1)
    R = mdp.R.reshape(-1)
    return TransitionBatch(idx, R[idx], s_next * mdp.m + a_next)


def _batch_u(dual: DualState, batch: TransitionBatch, fmap: FeatureMap) -> np.ndarray:
    phi = fmap.Phi[batch.idx]
    yA, yB = phi @ dual.A, phi @ dual.B
    e = np.einsum("ir,ir->i", yA, yA) + np.einsum("ir,ir->i", yB, yB) + 2.0 * dual.g[batch.idx] * dual.g_scale
    ex, _ = _clamped_exp(e)
    return ex / ex.mean()


def train_popql(fmap: FeatureMap, mdp: FiniteMDP, data, config: TrainConfig | None = None, init_policy: SoftmaxPolicy | None = None, normalizer: ReturnNormalizer | None = None) -> TrainResult:
    """Joint policy / sampling projection with a linear critic.

    Per step, in order: Lagrange factors, g table, critic, actor, alpha.
    ``data`` is the sampling distribution over pairs (or a dataset-backed
    SampleDistribution). In exact mode every expectation is enumerated;
    sampled mode draws minibatches from ``data`` with fresh next actions.
    """
    cfg = config or TrainConfig()
    mu = weights_of(data)
    n, m = mdp.n, mdp.m
    Phi = fmap.Phi
    rng = np.random.default_rng(cfg.seed)
    normalizer = normalizer or ReturnNormalizer(mdp)

    policy = init_policy or SoftmaxPolicy.uniform(n, m)
    policy = replace(policy, alpha=cfg.alpha, target_entropy=cfg.target_entropy)
    rank = min(cfg.dual_rank, fmap.k)
    if cfg.dual_frozen:
        dual = DualState.zeros(fmap.k, rank, n * m, lr_ab=cfg.lr_ab, lr_g=cfg.lr_g)
    else:
        dual = DualState.random(cfg.seed, fmap.k, rank, cfg.dual_init, lr_ab=cfg.lr_ab, lr_g=cfg.lr_g)
        dual = replace(dual, g=exact_g_table(fmap, mdp, policy.as_policy(), dual))
    adam = Adam(policy.logits.shape, cfg.lr_pi)
    w = np.zeros(fmap.k)
    alpha = cfg.alpha
    log: list[dict] = []
    diverged_at = None

    def snapshot(t, q_loss, pol, u_res):
        lam = min_eig(expected_f(fmap, mdp, pol, u_res.q))
        H = float(state_marginal(mu, n, m) @ row_entropy(pol.pi))
        return {
            "step": t,
            "q_loss": float(q_loss),
            "dual_objective": dual_objective(fmap, mdp, pol, dual, mu).value,
            "lambda_min": lam,
            "kl": u_res.kl,
            "entropy": H,
            "alpha": float(alpha),
            "return_normalized": normalizer(pol),
            "u_mean": float(mu @ u_res.u),
            "q_sum": float(u_res.q.sum()),
            "u_max_dev": float(np.max(np.abs(u_res.u - 1.0))),
        }

    for t in range(1, cfg.steps + 1):
        pol = policy.as_policy()
        try:
            if cfg.mode == "exact":
                chain = mdp_to_mrp(mdp, pol)
                Psi = chain.P @ Phi
                if not cfg.dual_frozen:
                    dA, dB, _ = dual_gradient(fmap, chain, None, dual, mu, log=True, g_mode="table")
                    dual = replace(dual, A=dual.A - cfg.lr_ab * dA, B=dual.B - cfg.lr_ab * dB)
                    g_exact = exact_g_table(fmap, chain, None, dual)
                    dual = replace(dual, g=dual.g + cfg.lr_g * (g_exact - dual.g))
                    weights = mu * reweighting(fmap, chain, None, dual, mu, g_mode="table").u
                else:
                    weights = mu
                src = ExpectedTransitions(Phi, Psi, chain.R, weights, chain.gamma)
                delta = Phi @ w - chain.R - chain.gamma * (Psi @ w)
                q_loss = weights @ delta**2
                w = td_step(w, src, cfg.lr_q)
            else:
                batch = _sample_pairs(rng, mdp, pol.pi, mu, cfg.batch_size)
                if not cfg.dual_frozen:
                    dual = stochastic_dual_step(dual, batch, fmap, cfg.lr_ab, cfg.lr_g)
                    u = _batch_u(dual, batch, fmap)
                else:
                    u = None
                delta = Phi[batch.idx] @ w - batch.rewards - mdp.gamma * (Phi[batch.next_idx] @ w)
                q_loss = np.mean((1.0 if u is None else u) * delta**2)
                w = td_step(w, batch, cfg.lr_q, u, fmap, mdp.gamma)
        except DivergenceError:
            diverged_at = t
            break
        if not np.isfinite(q_loss) or np.linalg.norm(w) > cfg.ceiling:
            diverged_at = t
            break

        grad = policy_gradient(fmap, mdp, policy, dual, mu, w, cfg.beta, alpha)
        logits = policy.logits + adam.ascent(grad)
        if not np.all(np.isfinite(logits)):
            diverged_at = t
            break
        policy = replace(policy, logits=logits)
        if cfg.target_entropy is not None:
            H = float(state_marginal(mu, n, m) @ policy.entropy())
            alpha = max(0.0, alpha + cfg.lr_alpha * (cfg.target_entropy - H))
            policy = replace(policy, alpha=alpha)

        if t % cfg.log_every == 0 or t == cfg.steps:
            pol = policy.as_policy()
            u_res = reweighting(fmap, mdp, pol, dual, mu, g_mode="exact")
            log.append(snapshot(t, q_loss, pol, u_res))

    if diverged_at is not None:
        pol = policy.as_policy()
        row = dict.fromkeys(LOG_COLUMNS, float("nan"))
        row.update(step=diverged_at, return_normalized=normalizer(pol), alpha=float(alpha))
        log.append(row)
    return TrainResult(policy, w, dual, log, diverged_at is not None, diverged_at, asdict(cfg))
