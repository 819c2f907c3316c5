"""Command-line experiment runner.

    ppbfl run --config grid.json --out results/ [--dry-run] [--seed N] [--parallel K]
    ppbfl verify-chain results/ppbfl_potw_iid_eps1.0/chain.log
    ppbfl dp-selftest [--epsilon E] [--draws N]

Exit codes: 0 success, 1 runtime or check failure, 2 bad input.
"""

from __future__ import annotations

import argparse
import itertools
import json
import math
import os
import sys
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, fields
from pathlib import Path
from typing import Any, Sequence

import numpy as np

from . import dp, orchestrator
from .errors import ConfigError, PPBFLError
from .ledger import validate_export
from .orchestrator import DataConfig, SimConfig

SEED_ENV = "PPBFL_SEED"

# grid axes; every other key maps onto SimConfig
GRID_KEYS = {
    "epsilons": [1.0],
    "mechanisms": ["ppbfl"],
    "consensus": ["potw"],
    "partitions": ["iid"],
}
# "same" ties the global budget to the grid epsilon, null switches it off
GLOBAL_KEY = "epsilon_global"
SCALAR_KEYS = {
    "n_trainers",
    "n_blockchain_only",
    "rounds",
    "shards_per_client",
    "hidden",
    "lr",
    "batch_size",
    "local_epochs",
    "mix_k",
    "ring_size",
    "capacities",
    "packaging_reward",
    "participation_reward",
    "seed",
    "wall_clock",
    "threads",
}
DATA_KEYS = {f.name for f in fields(DataConfig)}

STAKE_COLUMNS = ["consensus", "epsilon", "round", "node_id", "stake", "role"]
SUMMARY_COLUMNS = ["point", "mechanism", "consensus", "partition", "epsilon_local", "epsilon_global", "final_accuracy", "best_accuracy", "chain"]


@dataclass(frozen=True)
class ExperimentSpec:
    config_path: Path
    out_dir: Path
    overrides: dict[str, Any]


@dataclass(frozen=True)
class GridPoint:
    name: str
    config: SimConfig


def _as_list(value, key):
    if not isinstance(value, list) or not value:
        raise ConfigError(f"{key} must be a non-empty list")
    return value


def parse_config(raw: dict, overrides: dict | None = None) -> list[GridPoint]:
    """Expand a JSON config into grid points. Unknown keys are errors."""
    if not isinstance(raw, dict):
        raise ConfigError("config must be a JSON object")
    unknown = set(raw) - set(GRID_KEYS) - SCALAR_KEYS - {GLOBAL_KEY, "data"}
    if unknown:
        raise ConfigError(f"unknown config keys: {', '.join(sorted(unknown))}")
    raw = {**raw, **(overrides or {})}

    data = raw.get("data", {})
    if not isinstance(data, dict):
        raise ConfigError("data must be an object")
    bad = set(data) - DATA_KEYS
    if bad:
        raise ConfigError(f"unknown data keys: {', '.join(sorted(bad))}")
    try:
        data_cfg = DataConfig(**data)
    except TypeError as exc:
        raise ConfigError(str(exc)) from exc

    axes = {k: _as_list(raw.get(k, default), k) for k, default in GRID_KEYS.items()}
    for eps in axes["epsilons"]:
        if not isinstance(eps, (int, float)) or isinstance(eps, bool) or not eps > 0:
            raise ConfigError(f"epsilons must be positive numbers, got {eps!r}")
    global_eps = raw.get(GLOBAL_KEY, "same")
    if global_eps != "same" and global_eps is not None and not isinstance(global_eps, (int, float)):
        raise ConfigError(f'{GLOBAL_KEY} must be "same", null, or a number')

    base = {k: raw[k] for k in SCALAR_KEYS if k in raw}
    if "seed" in base:
        base["master_seed"] = base.pop("seed")
    if "threads" in base:
        base["parallel"] = base.pop("threads")
    if "capacities" in base and base["capacities"] is not None:
        base["capacities"] = tuple(base["capacities"])

    points: list[GridPoint] = []
    seen: set[str] = set()
    for mech, cons, part, eps in itertools.product(axes["mechanisms"], axes["consensus"], axes["partitions"], axes["epsilons"]):
        if mech == "none":
            eps_local = eps_global = None
        else:
            eps_local = float(eps)
            eps_global = eps_local if global_eps == "same" else (None if global_eps is None else float(global_eps))
        try:
            cfg = SimConfig(
                mechanism=mech,
                consensus=cons,
                partition_mode=part,
                epsilon_local=eps_local,
                epsilon_global=eps_global,
                data=data_cfg,
                **base,
            )
        except TypeError as exc:
            raise ConfigError(str(exc)) from exc
        name = f"{mech}_{cons}_{part}_eps{orchestrator.fmt_eps(eps_local)}"
        if name in seen:  # mechanism "none" ignores epsilon
            continue
        seen.add(name)
        points.append(GridPoint(name, cfg))
    return points


def resolve_seed(cli_seed: int | None) -> dict:
    """The --seed flag beats the environment, which beats the config file."""
    if cli_seed is not None:
        return {"seed": cli_seed}
    env = os.environ.get(SEED_ENV)
    if env is not None:
        try:
            return {"seed": int(env)}
        except ValueError:
            raise ConfigError(f"{SEED_ENV} must be an integer, got {env!r}") from None
    return {}


def _run_point(point: GridPoint, out_dir: Path) -> tuple[list[dict], list[dict], dict]:
    result = orchestrator.run_experiment(point.config)
    orchestrator.write_outputs(result, out_dir / point.name)
    c = point.config
    eps, eps_global = orchestrator.applied_epsilons(c)
    roles = {p.node_id: p.role for p in result.state.profiles}
    stake = [
        {
            "consensus": c.consensus,
            "epsilon": eps,
            "round": row["round"],
            "node_id": row["node_id"],
            "stake": repr(float(row["stake"])),
            "role": roles[row["node_id"]],
        }
        for row in result.state.stake_log
    ]
    summary = {
        "point": point.name,
        "mechanism": c.mechanism,
        "consensus": c.consensus,
        "partition": c.partition_mode,
        "epsilon_local": eps,
        "epsilon_global": eps_global,
        "final_accuracy": f"{result.final_accuracy:.4f}",
        "best_accuracy": f"{max(result.accuracies):.4f}",
        "chain": len(result.state.chain),
    }
    return orchestrator.accuracy_rows(result), stake, summary


def format_table(rows: Sequence[dict], columns: Sequence[str]) -> str:
    cells = [[str(c) for c in columns]] + [[str(r[c]) for c in columns] for r in rows]
    widths = [max(len(row[i]) for row in cells) for i in range(len(columns))]
    return "\n".join("  ".join(v.ljust(w) for v, w in zip(row, widths)).rstrip() for row in cells)


def cmd_run(spec: ExperimentSpec, dry_run: bool = False, parallel: int = 1) -> int:
    try:
        raw = json.loads(spec.config_path.read_text())
    except OSError as exc:
        print(f"error: cannot read config: {exc}", file=sys.stderr)
        return 2
    except json.JSONDecodeError as exc:
        print(f"error: config is not valid JSON: {exc}", file=sys.stderr)
        return 2
    try:
        points = parse_config(raw, spec.overrides)
    except (ConfigError, PPBFLError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2

    if dry_run:
        rows = [
            {
                "point": p.name,
                "rounds": p.config.rounds,
                "trainers": p.config.n_trainers,
                "seed": p.config.master_seed,
                "epsilon_global": orchestrator.applied_epsilons(p.config)[1],
            }
            for p in points
        ]
        print(format_table(rows, ["point", "rounds", "trainers", "seed", "epsilon_global"]))
        print(f"{len(points)} grid points (dry run, nothing executed)")
        return 0

    try:
        spec.out_dir.mkdir(parents=True, exist_ok=True)
        if parallel > 1:
            with ProcessPoolExecutor(max_workers=parallel) as pool:
                outputs = list(pool.map(_run_point, points, itertools.repeat(spec.out_dir)))
        else:
            outputs = [_run_point(p, spec.out_dir) for p in points]
    except Exception as exc:  # runtime failures of any kind map to exit 1
        print(f"error: run failed: {exc}", file=sys.stderr)
        return 1

    accuracy = [row for acc, _, _ in outputs for row in acc]
    stake = [row for _, st, _ in outputs for row in st]
    summary = [s for _, _, s in outputs]
    (spec.out_dir / "accuracy.csv").write_text(orchestrator.to_csv(accuracy, orchestrator.ACCURACY_COLUMNS))
    (spec.out_dir / "stake.csv").write_text(orchestrator.to_csv(stake, STAKE_COLUMNS))
    table = format_table(summary, SUMMARY_COLUMNS)
    (spec.out_dir / "summary.txt").write_text(table + "\n")
    print(table)
    return 0


def cmd_verify_chain(path: str | Path) -> int:
    try:
        data = Path(path).read_bytes()
    except OSError as exc:
        print(f"error: cannot read {path}: {exc}", file=sys.stderr)
        return 2
    if not data:
        print(f"error: {path} is empty", file=sys.stderr)
        return 2
    result = validate_export(data)
    if result:
        print(f"ok: {result.length} blocks")
        return 0
    print(f"FAIL at height {result.height}: {result.reason}")
    return 1


@dataclass(frozen=True)
class Check:
    name: str
    measured: float
    expected: float
    tolerance: float
    passed: bool


def _mc_checks(budget: dp.PrivacyBudget, draws: int, rng: np.random.Generator) -> list[Check]:
    eps = budget.epsilon
    checks = []
    geom = dp.LayerGeometry(0.3, 1.0)
    weight = geom.center + 0.5
    var = dp.closed_form_variance(0.5, budget)
    for mech in ("local", "global"):
        out = dp.perturb_array(np.full(draws, weight), geom, budget, mech, rng)
        se = math.sqrt(var / draws)
        mean = float(out.mean())
        checks.append(Check(f"{mech} mean (eps={eps})", mean, weight, 4 * se, abs(mean - weight) <= 4 * se))
        if draws > 1:
            measured = float(out.var(ddof=1))
            # 1% relative, widened to 4 standard errors of the sample variance when draws are few
            kurt = float(((out - weight) ** 4).mean()) / var**2 if var else 0.0
            tol = max(0.01 * var, 4 * var * math.sqrt(max(kurt - 1, 0.0) / draws))
            checks.append(Check(f"{mech} variance (eps={eps})", measured, var, tol, abs(measured - var) <= tol))
    # local then global around a fixed geometry
    once = dp.perturb_array(np.full(draws, weight), geom, budget, "local", rng)
    twice = dp.perturb_array(once, geom, budget, "global", rng)
    se = float(twice.std(ddof=1)) / math.sqrt(draws) if draws > 1 else math.inf
    mean = float(twice.mean())
    checks.append(Check(f"composed mean (eps={eps})", mean, weight, 4 * se, abs(mean - weight) <= 4 * se))
    return checks


def _exact_checks(budget: dp.PrivacyBudget) -> list[Check]:
    eps = budget.epsilon
    checks = []
    worst = 0.0
    for mech in ("local", "global", "cafl"):
        for delta, center in itertools.product((0.1, 0.5, 1.0), (0.0, 0.3)):
            w = center + delta
            got = dp.expected_output(w, dp.LayerGeometry(center, delta), budget, mech)
            worst = max(worst, abs(got - w) / math.ulp(w))
    checks.append(Check(f"exact expectation, ulps (eps={eps})", worst, 0.0, 4.0, worst <= 4))
    e = math.exp(eps)
    ratio = dp.probability_ratio(budget)
    checks.append(Check(f"p_one/p_zero (eps={eps})", ratio, e / (e + 1), 1e-12, abs(ratio - e / (e + 1)) <= 1e-12 and ratio < e))
    composed = dp.compose_budgets([budget, budget]).epsilon
    checks.append(Check(f"composition (eps={eps})", composed, 2 * eps, 0.0, composed == 2 * eps))
    return checks


def run_selftest(epsilons: Sequence[float], draws: int, seed: int = 0) -> list[Check]:
    rng = np.random.default_rng(seed)
    checks: list[Check] = []
    for eps in epsilons:
        budget = dp.PrivacyBudget(eps)
        checks += _exact_checks(budget)
        checks += _mc_checks(budget, draws, rng)
    return checks


def cmd_dp_selftest(epsilon: float | None = None, draws: int = 10**6, seed: int = 0) -> int:
    if draws < 1:
        print("error: --draws must be >= 1", file=sys.stderr)
        return 2
    if epsilon is not None and not (epsilon > 0 and math.isfinite(epsilon)):
        print("error: --epsilon must be positive and finite", file=sys.stderr)
        return 2
    epsilons = [epsilon] if epsilon is not None else [0.5, 1.0, 2.0, 5.0]
    checks = run_selftest(epsilons, draws, seed)
    rows = [
        {
            "check": c.name,
            "measured": f"{c.measured:.6g}",
            "expected": f"{c.expected:.6g}",
            "tolerance": f"{c.tolerance:.3g}",
            "result": "PASS" if c.passed else "FAIL",
        }
        for c in checks
    ]
    print(format_table(rows, ["check", "measured", "expected", "tolerance", "result"]))
    failed = sum(not c.passed for c in checks)
    print(f"{len(checks) - failed}/{len(checks)} checks passed")
    return 1 if failed else 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="ppbfl", description="Blockchain federated learning simulator")
    sub = parser.add_subparsers(dest="command", required=True)

    run = sub.add_parser("run", help="run an experiment grid from a JSON config")
    run.add_argument("--config", required=True, type=Path)
    run.add_argument("--out", required=True, type=Path)
    run.add_argument("--dry-run", action="store_true", help="print the resolved grid and exit")
    run.add_argument("--seed", type=int, help=f"master seed (overrides {SEED_ENV} and the config)")
    run.add_argument("--parallel", type=int, default=1, help="grid points run in this many processes")

    verify = sub.add_parser("verify-chain", help="validate an exported chain.log")
    verify.add_argument("path", type=Path)

    selftest = sub.add_parser("dp-selftest", help="check the perturbation mechanisms numerically")
    selftest.add_argument("--epsilon", type=float)
    selftest.add_argument("--draws", type=int, default=10**6)
    selftest.add_argument("--seed", type=int, default=0)
    return parser


def main(argv: Sequence[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    if args.command == "run":
        if args.parallel < 1:
            print("error: --parallel must be >= 1", file=sys.stderr)
            return 2
        try:
            overrides = resolve_seed(args.seed)
        except ConfigError as exc:
            print(f"error: {exc}", file=sys.stderr)
            return 2
        return cmd_run(ExperimentSpec(args.config, args.out, overrides), args.dry_run, args.parallel)
    if args.command == "verify-chain":
        return cmd_verify_chain(args.path)
    return cmd_dp_selftest(args.epsilon, args.draws, args.seed)


if __name__ == "__main__":
    sys.exit(main())
