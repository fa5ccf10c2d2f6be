"""Command-line front end: reduce -> baseline -> optimize -> report.

Every artifact is written with round-trip float formatting and sorted JSON
keys, so a fixed (config, seed) pair reproduces byte-identical files; the
worker count never enters any artifact.

Exit codes: 0 success, 2 configuration error, 3 numerical failure.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import numpy as np

from .config import ConfigError, ExperimentConfig, load_config
from .optimizer import DivergenceError, OptimizerSchedule, run_optimization
from .reduction import AssemblyError, ReducedModel, assemble_reduced
from .riccati import RiccatiError, baseline_policy, save_solution, solve_stochastic_are
from .risk import RiskSpec, cvar_estimate
from .sde import (
    EVAL_BRANCH,
    FeedbackPolicy,
    NoiseBank,
    SimulationError,
    TimeGrid,
    derive_seed,
    simulate_costs,
)
from .spectral import CONTROL_SIDE, STATE_SIDE, SpectralError, solve_eigenpairs, solve_lifter, trace_representer

FINAL_EVAL_BRANCH = 1  # bank used for the reported cost CSVs, distinct from the in-run tracker


def _write_costs_csv(path: Path, costs: np.ndarray):
    with open(path, "w") as fh:
        fh.write("sample,cost\n")
        for i, c in enumerate(costs):
            fh.write(f"{i},{float(c)!r}\n")


def _read_costs_csv(path: Path) -> np.ndarray:
    with open(path) as fh:
        header = fh.readline().strip()
        if header != "sample,cost":
            raise ConfigError(f"{path}: expected header 'sample,cost'")
        vals = [float(line.split(",")[1]) for line in fh if line.strip()]
    if not vals:
        raise ConfigError(f"{path}: no cost rows")
    return np.asarray(vals)


def _eval_grid_and_bank(config: ExperimentConfig) -> tuple[TimeGrid, NoiseBank]:
    grid = TimeGrid(config.system.T, config.simulation.steps)
    seed = derive_seed(config.simulation.seed, EVAL_BRANCH, FINAL_EVAL_BRANCH)
    return grid, NoiseBank(seed, config.simulation.S_eval, grid)


def cmd_reduce(config: ExperimentConfig, out: Path) -> int:
    basis = solve_eigenpairs(config.system.robin, config.N)
    lifters = (
        solve_lifter(config.system.robin, CONTROL_SIDE, basis),
        solve_lifter(config.system.robin, STATE_SIDE, basis),
    )
    representer = trace_representer(basis)
    model = assemble_reduced(
        config.system, basis, lifters, representer, config.N, Q=config.Q, G=config.G, r_ctrl=config.r_ctrl
    )
    out.mkdir(parents=True, exist_ok=True)
    model.save(out / "model.json")
    with open(out / "model_summary.txt", "w") as fh:
        fh.write("reduced model summary\n")
        fh.write(f"d: {model.d}\nN: {model.N}\nn_aug: {model.n_aug}\n")
        fh.write(f"mu: {model.mu!r}\nT: {model.T!r}\n")
        fh.write(f"eigenvalues: {[float(v) for v in model.eigenvalues]!r}\n")
        fh.write(f"control lifter traces (x=0, x=1): ({lifters[0].value_at_0!r}, {lifters[0].value_at_1!r})\n")
        fh.write(f"state lifter traces (x=0, x=1): ({lifters[1].value_at_0!r}, {lifters[1].value_at_1!r})\n")
        for name, mat in (("A_N", model.A_N), ("C_N", model.C_N), ("Q_N", model.Q_N), ("G_N", model.G_N)):
            fh.write(f"|{name}|_F: {float(np.linalg.norm(mat))!r}\n")
        fh.write(f"|B_N|: {float(np.linalg.norm(model.B_N))!r}\n")
        fh.write(f"Z0: {[float(v) for v in model.Z0]!r}\n")
    print(f"wrote {out / 'model.json'}")
    return 0


def cmd_baseline(config: ExperimentConfig, out: Path, model_path: Path) -> int:
    model = ReducedModel.load(model_path)
    sol = solve_stochastic_are(model)
    out.mkdir(parents=True, exist_ok=True)
    save_solution(sol, out / "riccati.json")
    grid, bank = _eval_grid_and_bank(config)
    n = model.n_aug
    box_gain = np.tile(np.array(config.optimizer.box_gain), (n, 1))
    policy = baseline_policy(sol, grid, box_control=config.optimizer.box_control, box_gain=box_gain)
    policy.save(
        out / "policy_baseline.json",
        provenance={"config_seed": config.simulation.seed, "eval_bank": bank.meta(), "kind": "lq_baseline"},
    )
    costs = simulate_costs(model, policy, bank, grid, workers=config.simulation.workers)
    _write_costs_csv(out / "baseline_costs.csv", costs)
    print(
        f"baseline: ARE residual {sol.residual:.3e}, mean cost {costs.mean():.6g}, "
        f"CVaR_{config.risk.alpha:g} {cvar_estimate(costs, config.risk.alpha):.6g}"
    )
    return 0


def cmd_optimize(config: ExperimentConfig, out: Path, model_path: Path, init_path: Path) -> int:
    model = ReducedModel.load(model_path)
    init = FeedbackPolicy.load(init_path)
    risk = RiskSpec(config.risk.kind, config.risk.alpha, config.risk.gamma)
    schedule = OptimizerSchedule(
        iterations=config.optimizer.iterations,
        eta=config.optimizer.eta,
        beta_step=config.optimizer.beta_step,
        samples=config.simulation.S_train,
        steps=config.simulation.steps,
        seed=config.simulation.seed,
        eval_every=config.optimizer.eval_every,
        eval_samples=config.optimizer.eval_samples,
        frozen_bank=config.optimizer.frozen_bank,
        adaptive=config.optimizer.adaptive,
    )
    out.mkdir(parents=True, exist_ok=True)
    diverged = None
    try:
        state = run_optimization(model, risk, init, schedule, workers=config.simulation.workers)
    except DivergenceError as exc:
        if exc.state is None:
            raise
        state = exc.state
        diverged = str(exc)

    provenance = {
        "config_seed": config.simulation.seed,
        "iterations": state.iteration,
        "risk": {"kind": risk.kind, "alpha": risk.alpha, "gamma": risk.gamma},
        "kind": "risk_averse_gda",
    }
    state.policy.save(out / "policy_optimized.json", provenance=provenance)
    with open(out / "history.csv", "w") as fh:
        fh.write("iteration,risk,mean_cost,grad_v_norm,grad_K_norm\n")
        for row in state.history:
            fh.write(
                f"{row['iteration']},{row['risk']!r},{row['mean_cost']!r},"
                f"{row['grad_v_norm']!r},{row['grad_K_norm']!r}\n"
            )
    with open(out / "eval_history.csv", "w") as fh:
        fh.write("iteration,risk,mean_cost\n")
        for row in state.eval_history:
            fh.write(f"{row['iteration']},{row['risk']!r},{row['mean_cost']!r}\n")

    grid, bank = _eval_grid_and_bank(config)
    costs = simulate_costs(model, state.policy, bank, grid, workers=config.simulation.workers)
    _write_costs_csv(out / "optimized_costs.csv", costs)
    if diverged is not None:
        print(f"optimization aborted ({diverged}); last good policy saved", file=sys.stderr)
        return 3
    print(
        f"optimized: mean cost {costs.mean():.6g}, "
        f"CVaR_{config.risk.alpha:g} {cvar_estimate(costs, config.risk.alpha):.6g} after {state.iteration} iterations"
    )
    return 0


def cmd_report(baseline_csv: Path, optimized_csv: Path, out: Path, levels, bins: int) -> int:
    cost1 = _read_costs_csv(baseline_csv)
    cost2 = _read_costs_csv(optimized_csv)
    levels = np.asarray(levels, dtype=float)
    q1 = np.quantile(cost1, levels)
    q2 = np.quantile(cost2, levels)
    out.mkdir(parents=True, exist_ok=True)
    with open(out / "report.csv", "w") as fh:
        fh.write("quantile,cost1,cost2,difference\n")
        for l, a, b in zip(levels, q1, q2):
            fh.write(f"{float(l)!r},{float(a)!r},{float(b)!r},{float(a - b)!r}\n")
    lo = min(cost1.min(), cost2.min())
    hi = max(cost1.max(), cost2.max())
    edges = np.linspace(lo, hi, bins + 1)
    h1, _ = np.histogram(cost1, bins=edges)
    h2, _ = np.histogram(cost2, bins=edges)
    with open(out / "histogram.json", "w") as fh:
        json.dump(
            {
                "bin_edges": [float(e) for e in edges],
                "counts_baseline": [int(v) for v in h1],
                "counts_optimized": [int(v) for v in h2],
                "samples": [int(cost1.size), int(cost2.size)],
            },
            fh,
            sort_keys=True,
            indent=1,
        )
        fh.write("\n")
    print(f"wrote {out / 'report.csv'} and {out / 'histogram.json'}")
    return 0


def _apply_overrides(config: ExperimentConfig, args) -> ExperimentConfig:
    if getattr(args, "seed", None) is not None:
        config.simulation.seed = args.seed
    if getattr(args, "workers", None) is not None:
        config.simulation.workers = args.workers
    return config


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="riskpde", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, needs_config=True):
        if needs_config:
            p.add_argument("--config", required=True, help="experiment TOML file")
        p.add_argument("--out", default=None, help="output directory (overrides config)")
        p.add_argument("--seed", type=int, default=None, help="seed override")
        p.add_argument("--workers", type=int, default=None, help="worker count override")

    common(sub.add_parser("reduce", help="assemble and store the reduced model"))
    p = sub.add_parser("baseline", help="solve the stochastic ARE and evaluate the LQ baseline")
    common(p)
    p.add_argument("--model", default=None, help="reduced-model JSON (default <out>/model.json)")
    p = sub.add_parser("optimize", help="run the risk-averse descent-ascent from an initial policy")
    common(p)
    p.add_argument("--model", default=None)
    p.add_argument("--init", default=None, help="initial policy JSON (default <out>/policy_baseline.json)")
    p = sub.add_parser("report", help="quantile table and histogram bins from two cost CSVs")
    common(p)
    p.add_argument("--baseline-costs", default=None)
    p.add_argument("--optimized-costs", default=None)
    common(sub.add_parser("all", help="run reduce, baseline, optimize and report in sequence"))
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        config = load_config(args.config)
        config = _apply_overrides(config, args)
        out = Path(args.out) if args.out else Path(config.output.directory)
        if args.command == "reduce":
            return cmd_reduce(config, out)
        if args.command == "baseline":
            model = Path(args.model) if args.model else out / "model.json"
            return cmd_baseline(config, out, model)
        if args.command == "optimize":
            model = Path(args.model) if args.model else out / "model.json"
            init = Path(args.init) if args.init else out / "policy_baseline.json"
            return cmd_optimize(config, out, model, init)
        if args.command == "report":
            base = Path(args.baseline_costs) if args.baseline_costs else out / "baseline_costs.csv"
            opt = Path(args.optimized_costs) if args.optimized_costs else out / "optimized_costs.csv"
            return cmd_report(base, opt, out, config.output.quantile_levels, config.output.histogram_bins)
        if args.command == "all":
            rc = cmd_reduce(config, out)
            if rc:
                return rc
            rc = cmd_baseline(config, out, out / "model.json")
            if rc:
                return rc
            rc = cmd_optimize(config, out, out / "model.json", out / "policy_baseline.json")
            if rc:
                return rc
            return cmd_report(
                out / "baseline_costs.csv", out / "optimized_costs.csv", out,
                config.output.quantile_levels, config.output.histogram_bins,
            )
        raise AssertionError(f"unhandled command {args.command}")
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except (OSError, json.JSONDecodeError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except (RiccatiError, SimulationError, SpectralError, AssemblyError, DivergenceError) as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
