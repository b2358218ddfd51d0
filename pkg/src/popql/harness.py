"""Experiment configuration, dataset construction, sweeps and result tables."""

from __future__ import annotations

import csv
import hashlib
import json
import math
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import yaml
from scipy.optimize import bisect

from .certificate import DEFAULT_TOL, certify, expected_f, min_eig
from .dual import DualConfig, solve_dual
from .features import FeatureMap, random_unit_features
from .models import (
    DiscretePolicy,
    FiniteMDP,
    SampleDistribution,
    Transition,
    build_frozen_lake,
    build_three_state,
    exact_q,
    exact_value,
    greedy_policy,
    occupancy,
    three_state_mu,
    value_iteration,
    weights_of,
)
from .policy import ReturnNormalizer, TrainConfig, behavior_cloning, train_popql
from .td import IllConditionedError, TDConfig, approx_error, lstd_fixed_point, run_td

KINDS = ("three-state-sweep", "eval-sweep", "density", "train-sweep", "certify", "solve-dual")
ACTIONS = {"left": 0, "down": 1, "right": 2, "up": 3}

# Non-canonical data-collection route: a detour down the left-centre column
# that reaches the goal along the bottom row; unlisted cells move up.
DEFAULT_DATA_ROUTE = {0: "right", 1: "right", 2: "down", 6: "down", 10: "left", 9: "down", 13: "right", 14: "right"}


class ConfigError(ValueError):
    pass


def dither_policy(policy: DiscretePolicy, eps: float) -> DiscretePolicy:
    """(1 - eps) pi + eps / m."""
    if not 0.0 <= eps <= 1.0:
        raise ValueError("eps must lie in [0, 1]")
    pi = policy.pi
    return DiscretePolicy((1.0 - eps) * pi + eps / pi.shape[1])


def mix_distributions(mu_data, mu_eval, eta: float) -> SampleDistribution:
    """(1 - eta) mu_data + eta mu_eval."""
    if not 0.0 <= eta <= 1.0:
        raise ValueError("eta must lie in [0, 1]")
    a, b = weights_of(mu_data), weights_of(mu_eval)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch: {a.shape} vs {b.shape}")
    if eta == 0.0:
        return SampleDistribution(a)
    if eta == 1.0:
        return SampleDistribution(b)
    return SampleDistribution((1.0 - eta) * a + eta * b)


def sample_dataset(rng: np.random.Generator, mdp: FiniteMDP, mu, size: int) -> SampleDistribution:
    """Draw ``size`` i.i.d. transitions (s, a, r, s') with (s, a) ~ mu."""
    mu = weights_of(mu)
    idx = rng.choice(mu.size, size=size, p=mu)
    P = mdp.P.reshape(mdp.n_pairs, mdp.n)
    R = mdp.R.reshape(-1)
    counts: dict = {}
    for i in idx:
        s_next = int(rng.choice(mdp.n, p=P[i]))
        counts[int(i), s_next] = counts.get((int(i), s_next), 0) + 1
    records = [Transition(i // mdp.m, i % mdp.m, float(R[i]), s_next, count=c) for (i, s_next), c in sorted(counts.items())]
    return SampleDistribution.from_dataset(records, mdp.n_pairs, m=mdp.m)


def route_policy(mdp: FiniteMDP, route: dict, default: str = "up") -> DiscretePolicy:
    actions = [ACTIONS[route.get(s, default)] for s in range(mdp.n)]
    return DiscretePolicy.deterministic(actions, mdp.m)


# ---------------------------------------------------------------------------
# Configuration


@dataclass
class ExperimentConfig:
    kind: str = "three-state-sweep"
    env: dict = field(default_factory=lambda: {"slip": False, "goal_reward": 1.0, "gamma": 0.95})
    grid: list = field(default_factory=list)
    seeds: list = field(default_factory=lambda: [0, 1, 2, 3, 4])
    eps: float = 0.2
    k: int = 63
    feature_seed: int = 0
    out: str = "results"
    tol: float = DEFAULT_TOL
    samples: int | None = None
    data_route: dict = field(default_factory=lambda: dict(DEFAULT_DATA_ROUTE))
    td: dict = field(default_factory=dict)
    dual: dict = field(default_factory=dict)
    train: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ConfigError(f"unknown experiment kind {self.kind!r}; expected one of {', '.join(KINDS)}")
        if not self.grid:
            self.grid = list(DEFAULT_GRIDS[self.kind])
        self.grid = [float(x) for x in self.grid]
        if any(not 0.0 <= x <= 1.0 for x in self.grid):
            raise ConfigError("grid values must lie in [0, 1]")
        if not self.seeds:
            raise ConfigError("at least one seed is required")
        self.seeds = [int(s) for s in self.seeds]
        if not 0.0 <= self.eps <= 1.0:
            raise ConfigError("eps must lie in [0, 1]")
        if self.k < 1:
            raise ConfigError("k must be at least 1")
        if self.samples is not None and self.samples < 1:
            raise ConfigError("samples must be a positive count")
        self.data_route = {int(s): a for s, a in self.data_route.items()}
        for a in self.data_route.values():
            if a not in ACTIONS:
                raise ConfigError(f"unknown action {a!r} in data_route")
        self.td = {**DEFAULT_TD[self.kind], **self.td}
        self.dual = {**DEFAULT_DUAL[self.kind], **self.dual}
        self.train = {**DEFAULT_TRAIN, **self.train}
        for section, cls in (("td", TDConfig), ("dual", DualConfig), ("train", TrainConfig)):
            try:
                cls(**getattr(self, section))
            except TypeError as exc:
                raise ConfigError(f"bad key in {section}: {exc}") from exc
            except ValueError as exc:
                raise ConfigError(f"bad value in {section}: {exc}") from exc

    @classmethod
    def from_dict(cls, doc: dict) -> "ExperimentConfig":
        known = set(cls.__dataclass_fields__)
        extra = set(doc) - known
        if extra:
            raise ConfigError(f"unknown config keys: {', '.join(sorted(extra))}")
        try:
            return cls(**doc)
        except TypeError as exc:
            raise ConfigError(str(exc)) from exc

    @classmethod
    def load(cls, path) -> "ExperimentConfig":
        path = Path(path)
        if not path.is_file():
            raise ConfigError(f"config file not found: {path}")
        try:
            doc = yaml.safe_load(path.read_text()) or {}
        except yaml.YAMLError as exc:
            raise ConfigError(f"cannot parse {path}: {exc}") from exc
        if not isinstance(doc, dict):
            raise ConfigError(f"{path} must hold a mapping")
        return cls.from_dict(doc)

    def to_dict(self) -> dict:
        return asdict(self)

    def content_hash(self) -> str:
        doc = self.to_dict()
        doc.pop("out")
        return hashlib.sha256(json.dumps(doc, sort_keys=True).encode()).hexdigest()[:16]

    def td_config(self, seed: int = 0) -> TDConfig:
        return TDConfig(**{**self.td, "seed": seed})

    def dual_config(self) -> DualConfig:
        return DualConfig(**self.dual)

    def train_config(self, seed: int, **overrides) -> TrainConfig:
        return TrainConfig(**{**self.train, "seed": seed, **overrides})


DEFAULT_GRIDS = {
    "three-state-sweep": [round(0.05 * i, 2) for i in range(21)],
    "eval-sweep": [0.0, 0.25, 0.5, 0.75, 1.0],
    "density": [0.0],
    "train-sweep": [0.0, 0.25, 0.5, 0.75, 1.0],
    "certify": [0.5],
    "solve-dual": [0.8],
}
_THREE_TD = {"lr": 1.0, "steps": 100_000, "record_every": 500}
_LAKE_TD = {"lr": 1.0, "steps": 100_000, "record_every": 1000}
DEFAULT_TD = {
    "three-state-sweep": _THREE_TD,
    "eval-sweep": _LAKE_TD,
    "density": _LAKE_TD,
    "train-sweep": _LAKE_TD,
    "certify": _THREE_TD,
    "solve-dual": _THREE_TD,
}
_THREE_DUAL = {"lr": 0.1, "iterations": 50_000}
_LAKE_DUAL = {"lr": 0.3, "iterations": 20_000}
DEFAULT_DUAL = {
    "three-state-sweep": _THREE_DUAL,
    "eval-sweep": _LAKE_DUAL,
    "density": _LAKE_DUAL,
    "train-sweep": _LAKE_DUAL,
    "certify": _THREE_DUAL,
    "solve-dual": _THREE_DUAL,
}
DEFAULT_TRAIN = {"beta": 0.5, "lr_q": 1.0, "lr_pi": 1e-3, "lr_ab": 1e-2, "steps": 20_000, "log_every": 1000}


# ---------------------------------------------------------------------------
# Results


class ResultTable:
    """Rows keyed by (grid, seed, method) plus a config hash."""

    def __init__(self, config: ExperimentConfig):
        self.config = config
        self.config_hash = config.content_hash()
        self.rows: list[dict] = []
        self._keys: set = set()
        self.summary: dict = {}
        self.grids: dict = {}
        self.created = time.strftime("%Y-%m-%dT%H:%M:%S")

    def add(self, grid: float, seed: int, method: str, **metrics) -> dict:
        key = (float(grid), int(seed), method)
        if key in self._keys:
            raise ValueError(f"duplicate row {key}")
        self._keys.add(key)
        row = {"grid": float(grid), "seed": int(seed), "method": method, "config_hash": self.config_hash, **metrics}
        self.rows.append(row)
        return row

    def get(self, grid: float, seed: int, method: str) -> dict:
        for row in self.rows:
            if row["grid"] == float(grid) and row["seed"] == seed and row["method"] == method:
                return row
        raise KeyError((grid, seed, method))

    def select(self, **match) -> list[dict]:
        return [r for r in self.rows if all(r.get(k) == v for k, v in match.items())]

    def columns(self) -> list[str]:
        cols: list[str] = []
        for row in self.rows:
            cols += [c for c in row if c not in cols]
        return cols

    def to_csv(self, path) -> None:
        cols = self.columns()
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(cols)
            for row in self.rows:
                writer.writerow([_fmt(row.get(c, "")) for c in cols])

    def to_json(self, path) -> None:
        Path(path).write_text(json.dumps({"rows": self.rows, "config_hash": self.config_hash}, default=_json_default, indent=1))

    def write_summary(self, path) -> None:
        doc = {
            "kind": self.config.kind,
            "config_hash": self.config_hash,
            "config": self.config.to_dict(),
            "created": self.created,
            **self.summary,
        }
        Path(path).write_text(json.dumps(doc, default=_json_default, indent=1))


def _fmt(v):
    if isinstance(v, bool):
        return int(v)
    if isinstance(v, float):
        return repr(v)
    return "" if v is None else v


def _json_default(o):
    if isinstance(o, np.generic):
        return o.item()
    if isinstance(o, np.ndarray):
        return o.tolist()
    raise TypeError(type(o))


def _finite_or_none(x):
    return None if x is None or not math.isfinite(x) else x


# ---------------------------------------------------------------------------
# Three-state study


def three_state_lambda(p: float, eps_basis: float = 1e-4) -> float:
    mrp, fmap = build_three_state(eps_basis)
    return min_eig(expected_f(fmap, mrp, None, three_state_mu(p)))


def find_crossing(grid, lambdas, f, xtol: float = 1e-4) -> float | None:
    """Bisect f on the first grid bracket where lambda goes from >= 0 to < 0."""
    pts = sorted(zip(grid, lambdas))
    for (p0, l0), (p1, l1) in zip(pts, pts[1:]):
        if l0 >= -1e-12 and l1 < -1e-12:
            return float(bisect(f, p0, p1, xtol=xtol))
    return None


def run_three_state_sweep(config: ExperimentConfig) -> ResultTable:
    """Certificate, vanilla TD, POP-QL TD and LSTD error along (p/2, p/2, 1-p)."""
    mrp, fmap = build_three_state()
    V = exact_value(mrp)
    table = ResultTable(config)
    seed = config.seeds[0]
    on_policy_err = approx_error(fmap, lstd_fixed_point(fmap, mrp, None, three_state_mu(0.5)).w, V, three_state_mu(0.5))
    lambdas = []
    for p in config.grid:
        mu = three_state_mu(p)
        report = certify(fmap, mrp, None, mu, config.tol)
        lambdas.append(report.lambda_min)
        try:
            lstd_err = approx_error(fmap, lstd_fixed_point(fmap, mrp, None, mu).w, V, mu)
        except IllConditionedError:
            lstd_err = float("nan")
        sol = solve_dual(fmap, mrp, None, mu, config.dual_config())
        common = {"lambda_min": report.lambda_min, "satisfied": report.satisfied, "lstd_error": lstd_err}
        for method, u in (("vanilla", None), ("popql", sol.result.u)):
            trace = run_td(fmap, mrp, None, mu, u, config.td_config(seed), V)
            table.add(
                p,
                seed,
                method,
                **common,
                final_error=trace.final_error,
                diverged=trace.diverged,
                diverged_at=trace.diverged_at,
                kl=0.0 if u is None else sol.result.kl,
                u_max_dev=0.0 if u is None else float(np.max(np.abs(u[mu > 0] - 1.0))),
                lambda_min_q=report.lambda_min if u is None else sol.lambda_min,
            )
    p_star = find_crossing(config.grid, lambdas, three_state_lambda)
    table.summary = {"p_star": p_star, "on_policy_lstd_error": on_policy_err, "tol": config.tol}
    return table


# ---------------------------------------------------------------------------
# Frozen Lake


@dataclass
class LakeSetup:
    mdp: FiniteMDP
    data_policy: DiscretePolicy
    eval_policy: DiscretePolicy
    mu_data: np.ndarray
    mu_eval: np.ndarray
    q_eval: np.ndarray


def lake_setup(config: ExperimentConfig) -> LakeSetup:
    env = config.env
    mdp = build_frozen_lake(env.get("slip", False), env.get("goal_reward", 1.0), env.get("gamma", 0.95))
    data = dither_policy(route_policy(mdp, config.data_route), config.eps)
    optimal = greedy_policy(value_iteration(mdp))
    target = dither_policy(optimal, config.eps)
    return LakeSetup(
        mdp,
        data,
        target,
        occupancy(mdp, data).weights,
        occupancy(mdp, target).weights,
        exact_q(mdp, target),
    )


def lake_features(config: ExperimentConfig, seed: int, mdp: FiniteMDP) -> FeatureMap:
    return random_unit_features(config.feature_seed + seed, mdp.n_pairs, config.k, m=mdp.m)


def cell_distribution(config: ExperimentConfig, lake: LakeSetup, eta: float, seed: int) -> np.ndarray:
    """Exact mixture occupancy, or its empirical version when ``samples`` is set.

    Each cell draws from its own generator keyed by (seed, grid value).
    """
    mu = mix_distributions(lake.mu_data, lake.mu_eval, eta).weights
    if config.samples is None:
        return mu
    rng = np.random.default_rng([seed, int(round(eta * 1_000_000))])
    return sample_dataset(rng, lake.mdp, mu, config.samples).weights


def run_eval_sweep(config: ExperimentConfig) -> ResultTable:
    """Off-policy evaluation of the dithered optimal policy across mixtures."""
    lake = lake_setup(config)
    table = ResultTable(config)
    for eta in config.grid:
        for seed in config.seeds:
            mu = cell_distribution(config, lake, eta, seed)
            fmap = lake_features(config, seed, lake.mdp)
            report = certify(fmap, lake.mdp, lake.eval_policy, mu, config.tol)
            shaded = report.lambda_min > -config.tol
            sol = solve_dual(fmap, lake.mdp, lake.eval_policy, mu, config.dual_config())
            for method, u in (("vanilla", None), ("popql", sol.result.u)):
                trace = run_td(fmap, lake.mdp, lake.eval_policy, mu, u, config.td_config(seed), lake.q_eval)
                errs = trace.errors()
                table.add(
                    eta,
                    seed,
                    method,
                    lambda_min=report.lambda_min,
                    shaded=shaded,
                    satisfied=report.satisfied,
                    final_error=trace.final_error,
                    max_error=float(np.max(errs)),
                    diverged=trace.diverged,
                    diverged_at=trace.diverged_at,
                    kl=0.0 if u is None else sol.result.kl,
                    lambda_min_q=report.lambda_min if u is None else sol.lambda_min,
                    dual_converged=None if u is None else sol.converged,
                )
    return table


def state_grid(weights, mdp: FiniteMDP) -> np.ndarray:
    w = weights_of(weights).reshape(mdp.n, mdp.m).sum(axis=1)
    rows = len(mdp.layout) if mdp.layout else int(round(math.sqrt(mdp.n)))
    return w.reshape(rows, -1)


def kl_divergence(p, q) -> float:
    p, q = weights_of(p), weights_of(q)
    mask = p > 0
    if np.any(q[mask] <= 0):
        return math.inf
    return float(np.sum(p[mask] * np.log(p[mask] / q[mask])))


def run_density_export(config: ExperimentConfig, out: Path | None = None, plots: bool = True) -> ResultTable:
    """State-occupancy grids for the data, POP-QL and on-policy distributions."""
    lake = lake_setup(config)
    table = ResultTable(config)
    eta = config.grid[0]
    seed = config.seeds[0]
    mu = cell_distribution(config, lake, eta, seed)
    fmap = lake_features(config, seed, lake.mdp)
    sol = solve_dual(fmap, lake.mdp, lake.eval_policy, mu, config.dual_config())
    q = sol.result.q
    report = certify(fmap, lake.mdp, lake.eval_policy, q, config.tol)
    grids = {
        "off_policy": state_grid(mu, lake.mdp),
        "popql": state_grid(q, lake.mdp),
        "on_policy": state_grid(lake.mu_eval, lake.mdp),
    }
    for name, grid in grids.items():
        table.add(eta, seed, name, mass=float(grid.sum()), cells=grid.reshape(-1).tolist())
    table.summary = {
        "kl_q_mu": sol.result.kl,
        "kl_nu_mu": kl_divergence(lake.mu_eval, mu),
        "lambda_min_q": report.lambda_min,
        "q_satisfied": report.satisfied,
        "lambda_min_mu": certify(fmap, lake.mdp, lake.eval_policy, mu, config.tol).lambda_min,
        "dual_converged": sol.converged,
        "dual_grad_norm": sol.grad_norm,
    }
    table.grids = grids
    if out is not None:
        out = Path(out)
        out.mkdir(parents=True, exist_ok=True)
        for name, grid in grids.items():
            np.savetxt(out / f"density_{name}.csv", grid, delimiter=",", fmt="%.17g")
        if plots:
            _heatmaps(grids, out / "density.svg")
    return table


def run_train_sweep(config: ExperimentConfig) -> ResultTable:
    """POP-QL vs behavior cloning vs the frozen-dual, beta = 0 ablation."""
    lake = lake_setup(config)
    normalizer = ReturnNormalizer(lake.mdp)
    table = ResultTable(config)
    for eta in config.grid:
        for seed in config.seeds:
            mu = cell_distribution(config, lake, eta, seed)
            bc_return = normalizer(behavior_cloning(mu, lake.mdp.n, lake.mdp.m))
            fmap = lake_features(config, seed, lake.mdp)
            table.add(eta, seed, "bc", return_normalized=bc_return, diverged=False)
            runs = (
                ("popql", config.train_config(seed)),
                ("fqi", config.train_config(seed, beta=0.0, dual_frozen=True)),
            )
            for method, cfg in runs:
                result = train_popql(fmap, lake.mdp, mu, cfg, normalizer=normalizer)
                last = result.log[-1]
                table.add(
                    eta,
                    seed,
                    method,
                    return_normalized=result.final_return,
                    diverged=result.diverged,
                    diverged_at=result.diverged_at,
                    kl=_finite_or_none(last["kl"]),
                    entropy=_finite_or_none(last["entropy"]),
                    lambda_min=_finite_or_none(last["lambda_min"]),
                    u_mean_dev=_log_max(result.log, "u_mean", 1.0),
                    q_sum_dev=_log_max(result.log, "q_sum", 1.0),
                    u_max_dev=_log_max(result.log, "u_max_dev", 0.0),
                    logged_steps=sum(math.isfinite(r["u_mean"]) for r in result.log),
                )
    table.summary = {"aggregates": aggregate(table, "return_normalized")}
    return table


def _log_max(log: list[dict], key: str, center: float) -> float | None:
    """Largest |value - center| over the finite entries of a training log."""
    vals = [abs(r[key] - center) for r in log if math.isfinite(r[key])]
    return max(vals) if vals else None


def aggregate(table: ResultTable, metric: str) -> list[dict]:
    """Mean and standard error of a metric per (grid, method)."""
    out = []
    keys = sorted({(r["grid"], r["method"]) for r in table.rows})
    for grid, method in keys:
        vals = np.array([r[metric] for r in table.select(grid=grid, method=method)], dtype=float)
        se = float(vals.std(ddof=1) / math.sqrt(vals.size)) if vals.size > 1 else 0.0
        out.append({"grid": grid, "method": method, "mean": float(vals.mean()), "se": se, "n": int(vals.size)})
    return out


# ---------------------------------------------------------------------------
# Charts


def _heatmaps(grids: dict, path) -> None:
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    fig, axes = plt.subplots(1, len(grids), figsize=(4 * len(grids), 3.6))
    vmax = max(g.max() for g in grids.values())
    for ax, (name, grid) in zip(axes, grids.items()):
        im = ax.imshow(grid, cmap="viridis", vmin=0.0, vmax=vmax)
        ax.set_title(name.replace("_", " "))
        ax.set_xticks([])
        ax.set_yticks([])
    fig.colorbar(im, ax=list(axes), shrink=0.8)
    fig.savefig(path, format="svg", metadata={"Date": None})
    plt.close(fig)


def plot_error_vs_p(table: ResultTable, path) -> None:
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    fig, ax = plt.subplots(figsize=(5, 3.5))
    for method in ("vanilla", "popql"):
        rows = sorted(table.select(method=method), key=lambda r: r["grid"])
        ps = [r["grid"] for r in rows]
        errs = [min(r["final_error"], 1e6) if math.isfinite(r["final_error"]) else 1e6 for r in rows]
        ax.semilogy(ps, errs, marker="o", label=method)
    lstd = sorted(table.select(method="vanilla"), key=lambda r: r["grid"])
    ax.semilogy([r["grid"] for r in lstd], [r["lstd_error"] for r in lstd], "k--", label="LSTD")
    if table.summary.get("p_star") is not None:
        ax.axvline(table.summary["p_star"], color="grey", lw=0.8)
    ax.set_xlabel("p")
    ax.set_ylabel("weighted RMS error")
    ax.legend()
    fig.tight_layout()
    fig.savefig(path, format="svg", metadata={"Date": None})
    plt.close(fig)


def plot_sweep(table: ResultTable, metric: str, path, ylabel: str, log: bool = False) -> None:
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    fig, ax = plt.subplots(figsize=(5, 3.5))
    methods = sorted({r["method"] for r in table.rows})
    for method in methods:
        agg = [a for a in aggregate_finite(table, metric) if a["method"] == method]
        xs = [a["grid"] for a in agg]
        ys = np.array([a["mean"] for a in agg])
        se = np.array([a["se"] for a in agg])
        ax.plot(xs, ys, marker="o", label=method)
        ax.fill_between(xs, ys - se, ys + se, alpha=0.2)
    if log:
        ax.set_yscale("log")
    ax.set_xlabel("eta")
    ax.set_ylabel(ylabel)
    ax.legend()
    fig.tight_layout()
    fig.savefig(path, format="svg", metadata={"Date": None})
    plt.close(fig)


def aggregate_finite(table: ResultTable, metric: str) -> list[dict]:
    out = []
    keys = sorted({(r["grid"], r["method"]) for r in table.rows})
    for grid, method in keys:
        vals = np.array([min(r[metric], 1e6) for r in table.select(grid=grid, method=method)], dtype=float)
        vals = np.where(np.isfinite(vals), vals, 1e6)
        se = float(vals.std(ddof=1) / math.sqrt(vals.size)) if vals.size > 1 else 0.0
        out.append({"grid": grid, "method": method, "mean": float(vals.mean()), "se": se})
    return out
