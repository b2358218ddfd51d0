"""Finite Markov reward/decision processes and exact solvers.

State-action pairs are always addressed by the flat index ``s * m + a``.
An MRP is treated as a one-action MDP wherever the two need to meet, so
downstream code can work with the induced chain over pairs uniformly.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.sparse.csgraph import connected_components

ROW_TOL = 1e-12

FROZEN_LAKE_4x4 = ("SFFF", "FHFH", "FFFH", "HFFG")
# left, down, right, up
_MOVES = ((0, -1), (1, 0), (0, 1), (-1, 0))


class ModelError(ValueError):
    """Raised when a model violates its structural invariants."""


class SingularSystemError(ArithmeticError):
    pass


class NonErgodicError(ValueError):
    """The chain has more than one closed communicating class."""


def _frozen(x) -> np.ndarray:
    arr = np.array(x, dtype=float)
    arr.setflags(write=False)
    return arr


def _check_stochastic(P: np.ndarray, what: str) -> None:
    if np.any(P < 0):
        raise ModelError(f"{what} has negative entries")
    sums = P.sum(axis=-1)
    if np.any(np.abs(sums - 1.0) > ROW_TOL):
        worst = float(np.max(np.abs(sums - 1.0)))
        raise ModelError(f"{what} rows do not sum to 1 (max deviation {worst:.3e})")


def _check_gamma(gamma: float) -> None:
    if not (0.0 <= gamma < 1.0):
        raise ModelError(f"gamma must lie in [0, 1), got {gamma}")


@dataclass(frozen=True)
class FiniteMRP:
    P: np.ndarray
    R: np.ndarray
    gamma: float

    def __post_init__(self):
        P, R = _frozen(self.P), _frozen(self.R)
        if P.ndim != 2 or P.shape[0] != P.shape[1]:
            raise ModelError(f"P must be square, got shape {P.shape}")
        if R.shape != (P.shape[0],):
            raise ModelError(f"R must have shape ({P.shape[0]},), got {R.shape}")
        _check_stochastic(P, "P")
        _check_gamma(self.gamma)
        object.__setattr__(self, "P", P)
        object.__setattr__(self, "R", R)
        object.__setattr__(self, "gamma", float(self.gamma))

    @property
    def n(self) -> int:
        return self.P.shape[0]

    def as_mdp(self, start=None) -> "FiniteMDP":
        """Lift to a one-action MDP with the same dynamics."""
        start = np.full(self.n, 1.0 / self.n) if start is None else start
        return FiniteMDP(self.P[:, None, :], self.R[:, None], self.gamma, start)


@dataclass(frozen=True)
class FiniteMDP:
    P: np.ndarray  # (n, m, n)
    R: np.ndarray  # (n, m)
    gamma: float
    start: np.ndarray
    layout: tuple[str, ...] | None = None

    def __post_init__(self):
        P, R, start = _frozen(self.P), _frozen(self.R), _frozen(self.start)
        if P.ndim != 3 or P.shape[0] != P.shape[2]:
            raise ModelError(f"P must have shape (n, m, n), got {P.shape}")
        if R.shape != P.shape[:2]:
            raise ModelError(f"R must have shape {P.shape[:2]}, got {R.shape}")
        if start.shape != (P.shape[0],):
            raise ModelError("start must be a distribution over states")
        _check_stochastic(P, "P")
        _check_stochastic(start, "start")
        _check_gamma(self.gamma)
        object.__setattr__(self, "P", P)
        object.__setattr__(self, "R", R)
        object.__setattr__(self, "start", start)
        object.__setattr__(self, "gamma", float(self.gamma))
        if self.layout is not None:
            object.__setattr__(self, "layout", tuple(self.layout))

    @property
    def n(self) -> int:
        return self.P.shape[0]

    @property
    def m(self) -> int:
        return self.P.shape[1]

    @property
    def n_pairs(self) -> int:
        return self.n * self.m

    def index(self, s: int, a: int) -> int:
        return s * self.m + a


@dataclass(frozen=True)
class DiscretePolicy:
    pi: np.ndarray  # (n, m)

    def __post_init__(self):
        pi = _frozen(self.pi)
        if pi.ndim != 2:
            raise ModelError(f"policy must be an (n, m) matrix, got shape {pi.shape}")
        _check_stochastic(pi, "policy")
        object.__setattr__(self, "pi", pi)

    @property
    def n(self) -> int:
        return self.pi.shape[0]

    @property
    def m(self) -> int:
        return self.pi.shape[1]

    @classmethod
    def uniform(cls, n: int, m: int) -> "DiscretePolicy":
        return cls(np.full((n, m), 1.0 / m))

    @classmethod
    def deterministic(cls, actions, m: int) -> "DiscretePolicy":
        return cls(np.eye(m)[np.asarray(actions, dtype=int)])


@dataclass(frozen=True)
class Transition:
    s: int
    a: int
    r: float
    s_next: int
    count: int = 1


@dataclass(frozen=True)
class SampleDistribution:
    """Probability vector over flat state-action indices (or states for an MRP).

    ``m`` is the action count used to flatten dataset records.
    """

    weights: np.ndarray
    dataset: tuple[Transition, ...] | None = field(default=None, compare=False)
    m: int = field(default=1, compare=False)

    def __post_init__(self):
        w = _frozen(self.weights)
        if w.ndim != 1:
            raise ModelError("weights must be a vector")
        if np.any(w < 0) or abs(w.sum() - 1.0) > 1e-10:
            raise ModelError("weights must be a probability vector")
        object.__setattr__(self, "weights", w)
        if self.dataset is not None:
            object.__setattr__(self, "dataset", tuple(self.dataset))
            emp = _empirical(self.dataset, w.size, self.m)
            if np.max(np.abs(emp - w)) > 1e-10:
                raise ModelError("dataset frequencies disagree with weights")

    @classmethod
    def from_dataset(cls, records, n_pairs: int, m: int = 1) -> "SampleDistribution":
        records = tuple(records)
        return cls(_empirical(records, n_pairs, m), records, m)

    def __len__(self):
        return self.weights.size


def _empirical(records, n_pairs: int, m: int) -> np.ndarray:
    counts = np.zeros(n_pairs)
    for t in records:
        counts[t.s * m + t.a] += t.count
    total = counts.sum()
    if total <= 0:
        raise ModelError("dataset is empty")
    return counts / total


def weights_of(dist) -> np.ndarray:
    """Accept a SampleDistribution or a plain array."""
    if isinstance(dist, SampleDistribution):
        return dist.weights
    return np.asarray(dist, dtype=float)


# ---------------------------------------------------------------------------
# Canonical instances


def three_state_transition() -> np.ndarray:
    row = [0.25, 0.25, 0.5]
    return np.array([row, row, row])


def build_three_state(eps: float = 1e-4):
    """The three-state MRP with target values [1, 1, 1.05] and its 3x2 basis."""
    from .features import three_state_basis

    gamma = 0.99
    P = three_state_transition()
    V = np.array([1.0, 1.0, 1.05])
    R = (np.eye(3) - gamma * P) @ V
    return FiniteMRP(P, R, gamma), three_state_basis(eps)


def three_state_mu(p: float) -> np.ndarray:
    """Sampling family (p/2, p/2, 1 - p); p = 0.5 is on-policy."""
    if not 0.0 <= p <= 1.0:
        raise ValueError(f"p must lie in [0, 1], got {p}")
    return np.array([p / 2, p / 2, 1.0 - p])


def build_frozen_lake(
    slip: bool = False,
    goal_reward: float = 1.0,
    gamma: float = 0.95,
    layout=FROZEN_LAKE_4x4,
) -> FiniteMDP:
    """Continuing Frozen Lake.

    Hole and goal cells are occupiable; any action taken there returns the
    agent to the start cell, and acting at the goal pays ``goal_reward``.
    Moves off the grid leave the agent in place. With ``slip`` the intended
    move and its two perpendicular moves each happen with probability 1/3.
    """
    _check_gamma(gamma)
    layout = tuple(layout)
    rows, cols = len(layout), len(layout[0])
    n, m = rows * cols, 4
    start = next(i for i in range(n) if layout[i // cols][i % cols] == "S")
    P = np.zeros((n, m, n))
    R = np.zeros((n, m))
    for s in range(n):
        r, c = divmod(s, cols)
        cell = layout[r][c]
        for a in range(m):
            if cell in "HG":
                P[s, a, start] = 1.0
                if cell == "G":
                    R[s, a] = goal_reward
                continue
            moves = (a, (a - 1) % 4, (a + 1) % 4) if slip else (a,)
            for move in moves:
                dr, dc = _MOVES[move]
                rr, cc = r + dr, c + dc
                if not (0 <= rr < rows and 0 <= cc < cols):
                    rr, cc = r, c
                P[s, a, rr * cols + cc] += 1.0 / len(moves)
    start_dist = np.zeros(n)
    start_dist[start] = 1.0
    return FiniteMDP(P, R, gamma, start_dist, layout)


def random_mdp(seed, n: int, m: int, sparsity: float = 1.0, gamma: float = 0.9) -> FiniteMDP:
    """Seeded random MDP; each (s, a) row has ceil(sparsity * n) successors."""
    if n < 1 or m < 1:
        raise ValueError("n and m must be positive")
    if not 0.0 < sparsity <= 1.0:
        raise ValueError("sparsity must lie in (0, 1]")
    rng = np.random.default_rng(seed)
    support = max(1, math.ceil(sparsity * n))
    P = np.zeros((n, m, n))
    for s in range(n):
        for a in range(m):
            succ = rng.choice(n, size=support, replace=False)
            P[s, a, succ] = rng.dirichlet(np.ones(support))
    P /= P.sum(axis=-1, keepdims=True)
    R = rng.uniform(0.0, 1.0, size=(n, m))
    return FiniteMDP(P, R, gamma, np.full(n, 1.0 / n))


def random_policy(seed, n: int, m: int) -> DiscretePolicy:
    rng = np.random.default_rng(seed)
    return DiscretePolicy(rng.dirichlet(np.ones(m), size=n))


# ---------------------------------------------------------------------------
# Solvers


def mdp_to_mrp(mdp: FiniteMDP, policy: DiscretePolicy) -> FiniteMRP:
    """Chain over pairs with kernel p(s'|s,a) * pi(a'|s')."""
    return FiniteMRP(pair_kernel(mdp.P, policy.pi), mdp.R.reshape(-1), mdp.gamma)


def pair_kernel(P: np.ndarray, pi: np.ndarray) -> np.ndarray:
    n, m, _ = P.shape
    K = (P[:, :, :, None] * pi[None, None, :, :]).reshape(n * m, n * m)
    # renormalize away rounding so rows pass the 1e-12 stochasticity check
    return K / K.sum(axis=1, keepdims=True)


def induced_chain(model, policy: DiscretePolicy | None = None) -> FiniteMRP:
    """The chain TD operates on: the MRP itself, or the MDP reduced under policy."""
    if isinstance(model, FiniteMRP):
        return model
    if policy is None:
        raise ValueError("an MDP needs a policy to induce a chain")
    if policy.pi.shape != (model.n, model.m):
        raise ModelError(f"policy shape {policy.pi.shape} does not match MDP ({model.n}, {model.m})")
    return mdp_to_mrp(model, policy)


def exact_value(mrp: FiniteMRP) -> np.ndarray:
    """Solve V = R + gamma P V directly."""
    A = np.eye(mrp.n) - mrp.gamma * mrp.P
    try:
        V = np.linalg.solve(A, mrp.R)
    except np.linalg.LinAlgError as exc:
        raise SingularSystemError(str(exc)) from exc
    resid = np.max(np.abs(V - mrp.R - mrp.gamma * mrp.P @ V))
    if not np.isfinite(resid) or resid > 1e-9 * max(1.0, np.max(np.abs(V))):
        raise SingularSystemError(f"Bellman residual {resid:.3e} after solve")
    return V


def exact_q(mdp: FiniteMDP, policy: DiscretePolicy) -> np.ndarray:
    """Q over flat pairs for a fixed policy."""
    return exact_value(mdp_to_mrp(mdp, policy))


def value_iteration(mdp: FiniteMDP, tol: float = 1e-12, max_iter: int = 100_000) -> np.ndarray:
    """Optimal Q as an (n, m) table."""
    Q = np.zeros((mdp.n, mdp.m))
    for _ in range(max_iter):
        Q_new = mdp.R + mdp.gamma * mdp.P @ Q.max(axis=1)
        if np.max(np.abs(Q_new - Q)) < tol:
            return Q_new
        Q = Q_new
    return Q


def greedy_policy(Q: np.ndarray) -> DiscretePolicy:
    # argmax breaks ties toward the lowest action index
    return DiscretePolicy.deterministic(np.argmax(Q, axis=1), Q.shape[1])


def closed_classes(P: np.ndarray) -> list[np.ndarray]:
    """Closed communicating classes of a stochastic matrix."""
    adj = P > 0
    _, labels = connected_components(adj, directed=True, connection="strong")
    out = []
    for lab in np.unique(labels):
        members = np.flatnonzero(labels == lab)
        outside = np.ones(P.shape[0], dtype=bool)
        outside[members] = False
        if not adj[np.ix_(members, outside)].any():
            out.append(members)
    return out


def stationary_distribution(P, tol: float = 1e-12, max_iter: int = 1_000_000) -> SampleDistribution:
    """Unique stationary distribution of an irreducible-on-recurrent-class chain."""
    P = np.asarray(P, dtype=float)
    _check_stochastic(P, "P")
    classes = closed_classes(P)
    if len(classes) != 1:
        raise NonErgodicError(f"chain has {len(classes)} closed communicating classes")
    n = P.shape[0]
    # nu (P - I) = 0 with sum(nu) = 1, solved in least squares
    A = np.vstack([P.T - np.eye(n), np.ones((1, n))])
    b = np.zeros(n + 1)
    b[-1] = 1.0
    nu, *_ = np.linalg.lstsq(A, b, rcond=None)
    nu = np.clip(nu, 0.0, None)
    nu /= nu.sum()
    if np.abs(nu @ P - nu).sum() > 1e-10:
        nu = _power_stationary(P, tol, max_iter)
    return SampleDistribution(nu)


def _power_stationary(P: np.ndarray, tol: float, max_iter: int) -> np.ndarray:
    # lazy chain (I + P) / 2 has the same stationary law and is aperiodic
    lazy = 0.5 * (np.eye(P.shape[0]) + P)
    nu = np.full(P.shape[0], 1.0 / P.shape[0])
    for _ in range(max_iter):
        nxt = nu @ lazy
        if np.abs(nxt - nu).sum() < tol:
            return nxt / nxt.sum()
        nu = nxt
    return nu / nu.sum()


def occupancy(mdp: FiniteMDP, policy: DiscretePolicy) -> SampleDistribution:
    """Stationary state-action distribution of the policy."""
    return stationary_distribution(mdp_to_mrp(mdp, policy).P)


# ---------------------------------------------------------------------------
# JSON


def model_to_dict(model) -> dict:
    if isinstance(model, FiniteMRP):
        mdp = model.as_mdp()
    else:
        mdp = model
    doc = {
        "n": mdp.n,
        "m": mdp.m,
        "gamma": mdp.gamma,
        "P": mdp.P.tolist(),
        "R": mdp.R.tolist(),
        "start": mdp.start.tolist(),
        "layout": "\n".join(mdp.layout) if mdp.layout else None,
    }
    if isinstance(model, FiniteMRP):
        doc["kind"] = "mrp"
    return doc


def model_from_dict(doc: dict):
    P = np.asarray(doc["P"], dtype=float)
    R = np.asarray(doc["R"], dtype=float)
    n, m = int(doc["n"]), int(doc["m"])
    if P.shape != (n, m, n) or R.shape != (n, m):
        raise ModelError("P/R shapes disagree with n and m")
    if doc.get("kind") == "mrp":
        if m != 1:
            raise ModelError("an MRP document must have m = 1")
        return FiniteMRP(P[:, 0, :], R[:, 0], doc["gamma"])
    layout = doc.get("layout")
    return FiniteMDP(P, R, doc["gamma"], doc["start"], tuple(layout.split("\n")) if layout else None)


def save_model(model, path) -> None:
    Path(path).write_text(json.dumps(model_to_dict(model)))


def load_model(path):
    return model_from_dict(json.loads(Path(path).read_text()))
