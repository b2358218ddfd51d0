"""Command-line entry point: ``popql <subcommand> [--config PATH] [--out DIR] ...``."""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import numpy as np

from . import harness
from .certificate import certify
from .dual import dual_to_dict, solve_dual
from .harness import ConfigError, ExperimentConfig
from .models import ModelError, build_three_state, three_state_mu

EXIT_OK, EXIT_CONFIG, EXIT_NUMERIC = 0, 2, 3

SUBCOMMANDS = {
    "certify": "certify",
    "three-state": "three-state-sweep",
    "eval-sweep": "eval-sweep",
    "density": "density",
    "train-sweep": "train-sweep",
    "solve-dual": "solve-dual",
}


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        print(f"{self.prog}: error: {message}", file=sys.stderr)
        raise SystemExit(EXIT_CONFIG)


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="popql", description="Projected off-policy Q-learning experiments")
    parser.add_argument("command", choices=sorted(SUBCOMMANDS), help="experiment to run")
    parser.add_argument("--config", type=Path, help="YAML experiment config")
    parser.add_argument("--out", type=Path, help="output directory (overrides config)")
    parser.add_argument("--seed", type=int, help="run a single seed")
    parser.add_argument("--format", choices=("csv", "json"), default="csv")
    parser.add_argument("--plots", choices=("on", "off"), default="on")
    return parser


def load_config(args) -> ExperimentConfig:
    kind = SUBCOMMANDS[args.command]
    if args.config is not None:
        cfg = ExperimentConfig.load(args.config)
        if cfg.kind != kind:
            raise ConfigError(f"{args.config} describes a {cfg.kind!r} experiment, not {kind!r}")
    else:
        cfg = ExperimentConfig(kind=kind)
    if args.seed is not None:
        cfg.seeds = [args.seed]
    if args.out is not None:
        cfg.out = str(args.out)
    return cfg


def _instance(cfg: ExperimentConfig, value: float, seed: int):
    """(fmap, model, policy, mu) for a single-distribution subcommand."""
    if cfg.env.get("name", "three-state") == "three-state":
        mrp, fmap = build_three_state(cfg.env.get("eps_basis", 1e-4))
        return fmap, mrp, None, three_state_mu(value)
    lake = harness.lake_setup(cfg)
    fmap = harness.lake_features(cfg, seed, lake.mdp)
    mu = harness.cell_distribution(cfg, lake, value, seed)
    return fmap, lake.mdp, lake.eval_policy, mu


def _write_table(table, out: Path, fmt: str) -> Path:
    path = out / f"sweep.{fmt}"
    if fmt == "csv":
        table.to_csv(path)
    else:
        table.to_json(path)
    table.write_summary(out / "summary.json")
    return path


def run(cfg: ExperimentConfig, fmt: str = "csv", plots: bool = True) -> str:
    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    kind = cfg.kind
    seed = cfg.seeds[0]

    if kind == "certify":
        rows = []
        for value in cfg.grid:
            fmap, model, policy, mu = _instance(cfg, value, seed)
            rep = certify(fmap, model, policy, mu, cfg.tol)
            rows.append({"grid": value, **rep.to_dict()})
        (out / "certificate.json").write_text(json.dumps(rows, indent=1))
        bad = sum(not r["satisfied"] for r in rows)
        return f"certify: {len(rows) - bad}/{len(rows)} distributions satisfied (tol {cfg.tol})"

    if kind == "solve-dual":
        value = cfg.grid[0]
        fmap, model, policy, mu = _instance(cfg, value, seed)
        sol = solve_dual(fmap, model, policy, mu, cfg.dual_config())
        (out / "dual.json").write_text(json.dumps(dual_to_dict(sol.dual)))
        sol.result.to_csv(out / "reweighting.csv")
        summary = {
            "grid": value,
            "kl": sol.result.kl,
            "lambda_min_q": sol.lambda_min,
            "grad_norm": sol.grad_norm,
            "converged": sol.converged,
            "iterations": sol.iterations,
            "objective": sol.objective,
            "saturated": sol.saturated,
        }
        (out / "summary.json").write_text(json.dumps(summary, indent=1))
        return f"solve-dual: KL {sol.result.kl:.6g}, lambda_min(q) {sol.lambda_min:.3g}, converged {sol.converged}"

    if kind == "three-state-sweep":
        table = harness.run_three_state_sweep(cfg)
        _write_table(table, out, fmt)
        if plots:
            harness.plot_error_vs_p(table, out / "error_vs_p.svg")
        p_star = table.summary["p_star"]
        return f"three-state: {len(table.rows)} rows, p* = {p_star:.4f}" if p_star is not None else "three-state: no crossing found"

    if kind == "eval-sweep":
        table = harness.run_eval_sweep(cfg)
        _write_table(table, out, fmt)
        if plots:
            harness.plot_sweep(table, "final_error", out / "eval_error.svg", "final error", log=True)
        n_div = sum(r["diverged"] for r in table.select(method="vanilla"))
        return f"eval-sweep: {len(table.rows)} rows, vanilla diverged in {n_div} cells"

    if kind == "density":
        table = harness.run_density_export(cfg, out, plots)
        _write_table(table, out, fmt)
        s = table.summary
        return f"density: KL(q*|mu) {s['kl_q_mu']:.4g}, KL(nu|mu) {s['kl_nu_mu']:.4g}"

    if kind == "train-sweep":
        table = harness.run_train_sweep(cfg)
        _write_table(table, out, fmt)
        if plots:
            harness.plot_sweep(table, "return_normalized", out / "returns.svg", "normalized return")
        n_div = sum(r["diverged"] for r in table.select(method="popql"))
        return f"train-sweep: {len(table.rows)} rows, POP-QL diverged in {n_div} runs"

    raise ConfigError(f"unhandled experiment kind {kind!r}")


def cli_dispatch(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    try:
        cfg = load_config(args)
        message = run(cfg, args.format, args.plots == "on")
    except (ConfigError, ModelError, OSError) as exc:
        print(f"popql: config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (ArithmeticError, np.linalg.LinAlgError) as exc:
        print(f"popql: numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    print(message)
    return EXIT_OK


def main() -> None:
    raise SystemExit(cli_dispatch())


if __name__ == "__main__":
    main()
