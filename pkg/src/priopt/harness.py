"""Experiment execution: runs a config end to end and writes all outputs.

Every run gets a private directory named by the config hash and seed.
Outputs are byte-reproducible from config + seed: no timestamps, sorted
JSON keys, floats via repr.
"""

from __future__ import annotations

import csv
import json
import math
import os
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .analysis import (
    ThetaGrid,
    build_perturbation_grid,
    check_midpoint_convexity,
    default_lambda_axis,
    duality_gap,
)
from .baselines import FrontierPoint, WeightGrid, grid_search, task_metric
from .config import ExperimentConfig, build_dataset, build_problem, build_theta0, config_hash, to_toml_str
from .errors import ConfigurationError
from .metrics import RunTrace, trace_summarize
from .optimizer import OptimizerConfig, PriorityProblem, StageResult, nmt_optimize, optimize_primary

OUT_ROOT_ENV = "PRIOPT_OUT_ROOT"


def _json_safe(obj):
    if isinstance(obj, dict):
        return {k: _json_safe(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_json_safe(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return [_json_safe(float(v)) for v in obj.ravel()]
    if isinstance(obj, (np.floating, float)):
        v = float(obj)
        return v if math.isfinite(v) else repr(v)
    if isinstance(obj, np.integer):
        return int(obj)
    return obj


def write_json(path: Path, payload: dict) -> None:
    path.write_text(json.dumps(_json_safe(payload), sort_keys=True, indent=2) + "\n")


def run_dir_for(config: ExperimentConfig, out_root: str | None = None) -> Path:
    root = out_root or os.environ.get(OUT_ROOT_ENV) or config.out
    return Path(root) / f"{config.job}-{config_hash(config)}-s{config.seed}"


@dataclass(frozen=True)
class CompareReport:
    """Grid sweep and staged run over the identical problem/seed/theta0."""

    frontier: tuple[FrontierPoint, ...]
    nmt_results: tuple[StageResult, ...]
    nmt_losses: tuple[float, ...]
    nmt_metrics: tuple[float, ...]
    best_grid_primary_loss: float
    verdict: bool
    grid_runs: int
    nmt_stages: int
    trace: RunTrace


def compare_sweep(problem: PriorityProblem, grid: WeightGrid, theta0: np.ndarray,
                  config: OptimizerConfig, tolerance: float = 1e-2) -> CompareReport:
    """Run the weight sweep and the staged optimizer under identical seeds.

    The verdict is true when the staged run's primary-task loss is within
    ``tolerance`` of the best primary loss any grid point attained, and
    its lowest-priority loss does not exceed the frontier's attained range
    by more than ``tolerance``.
    """
    if problem.n_tasks != 2:
        raise ConfigurationError("compare_sweep expects a two-task problem")
    frontier = tuple(grid_search(problem, grid, theta0, config))
    trace = RunTrace(n_tasks=problem.n_tasks, metadata={"conv_tol": config.conv_tol})
    results = tuple(nmt_optimize(problem, theta0, config, trace))
    theta = results[-1].theta_star
    nmt_losses = tuple(t.evaluate(theta, None) for t in problem.tasks)
    nmt_metrics = tuple(task_metric(t, theta) for t in problem.tasks)

    alive = [p for p in frontier if not p.diverged]
    best_primary = min((p.final_losses[0] for p in alive), default=float("inf"))
    worst_secondary = max((p.final_losses[-1] for p in alive), default=float("-inf"))
    verdict = (nmt_losses[0] <= best_primary + tolerance
               and nmt_losses[-1] <= worst_secondary + tolerance)
    return CompareReport(
        frontier=frontier, nmt_results=results, nmt_losses=nmt_losses,
        nmt_metrics=nmt_metrics, best_grid_primary_loss=best_primary,
        verdict=verdict, grid_runs=len(frontier), nmt_stages=len(results),
        trace=trace,
    )


# ---------------------------------------------------------------------------
# output writers


def _write_frontier_csv(path: Path, points: list[FrontierPoint], n_tasks: int,
                        nmt_row: tuple[tuple[float, ...], tuple[float, ...]] | None = None) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        header = ["method"] if nmt_row is not None else []
        header += [f"weight_{i + 1}" for i in range(n_tasks)]
        header += [f"loss_task_{i + 1}" for i in range(n_tasks)]
        header += [f"metric_task_{i + 1}" for i in range(n_tasks)]
        header += ["diverged"]
        writer.writerow(header)
        for p in points:
            row = ["grid"] if nmt_row is not None else []
            row += [repr(w) for w in p.weights]
            row += [repr(v) for v in p.final_losses]
            row += [repr(v) for v in p.final_metrics]
            row += ["true" if p.diverged else "false"]
            writer.writerow(row)
        if nmt_row is not None:
            losses, metrics = nmt_row
            writer.writerow(["nmt"] + [""] * n_tasks + [repr(v) for v in losses]
                            + [repr(v) for v in metrics] + ["false"])


def _stage_payload(results: list[StageResult] | tuple[StageResult, ...]) -> list[dict]:
    return [
        {
            "stage": r.stage,
            "iterations_used": r.iterations_used,
            "converged": r.converged,
            "final_losses": list(r.final_losses),
            "final_lambdas": list(r.final_lambdas),
            "theta_star": [float(v) for v in r.theta_star],
        }
        for r in results
    ]


def _base_summary(config: ExperimentConfig) -> dict:
    return {
        "job": config.job,
        "seed": config.seed,
        "config_hash": config_hash(config),
        "config": to_toml_str(config),
    }


def _run_nmt(config: ExperimentConfig, out: Path) -> dict:
    dataset = build_dataset(config)
    problem = build_problem(config, dataset)
    theta0 = build_theta0(config, problem)
    trace = RunTrace(n_tasks=problem.n_tasks,
                     metadata={"conv_tol": config.optimizer.conv_tol, "seed": config.seed})
    results = nmt_optimize(problem, theta0, config.optimizer, trace)
    trace.to_csv(out / "trace.csv")
    if dataset is not None:
        dataset.to_csv(out / "dataset.csv")
    summary = _base_summary(config)
    summary.update({
        "stages": _stage_payload(results),
        "trace_summary": trace_summarize(trace, config.optimizer.conv_tol),
        "run_counts": {"nmt_stages": problem.n_tasks},
    })
    write_json(out / "summary.json", summary)
    return summary


def _run_grid(config: ExperimentConfig, out: Path) -> dict:
    dataset = build_dataset(config)
    problem = build_problem(config, dataset)
    theta0 = build_theta0(config, problem)
    grid = WeightGrid(weights_per_task=config.grid.weights,
                      normalization=config.grid.normalization)
    points = grid_search(problem, grid, theta0, config.optimizer)
    _write_frontier_csv(out / "frontier.csv", points, problem.n_tasks)
    # a pure sweep has no staged run; trace.csv still exists, header only
    RunTrace(n_tasks=problem.n_tasks).to_csv(out / "trace.csv")
    if dataset is not None:
        dataset.to_csv(out / "dataset.csv")
    best = {
        f"task_{i + 1}": min((p.final_losses[i] for p in points if not p.diverged),
                             default=float("inf"))
        for i in range(problem.n_tasks)
    }
    summary = _base_summary(config)
    summary.update({
        "run_counts": {"grid_runs": len(points)},
        "n_diverged": sum(p.diverged for p in points),
        "best_loss_per_task": best,
    })
    write_json(out / "summary.json", summary)
    return summary


def _run_sweep_compare(config: ExperimentConfig, out: Path) -> dict:
    dataset = build_dataset(config)
    problem = build_problem(config, dataset)
    theta0 = build_theta0(config, problem)
    grid = WeightGrid(weights_per_task=config.grid.weights,
                      normalization=config.grid.normalization)
    report = compare_sweep(problem, grid, theta0, config.optimizer)
    _write_frontier_csv(out / "frontier.csv", list(report.frontier), problem.n_tasks,
                        nmt_row=(report.nmt_losses, report.nmt_metrics))
    report.trace.to_csv(out / "trace.csv")
    if dataset is not None:
        dataset.to_csv(out / "dataset.csv")

    summary = _base_summary(config)
    alive = [p for p in report.frontier if not p.diverged]
    metric_deltas = {}
    for i in range(problem.n_tasks):
        grid_metrics = [p.final_metrics[i] for p in alive]
        if not grid_metrics or any(math.isnan(m) for m in grid_metrics) \
                or math.isnan(report.nmt_metrics[i]):
            continue
        best_grid = max(grid_metrics)
        delta = report.nmt_metrics[i] - best_grid
        metric_deltas[f"task_{i + 1}"] = {
            "nmt": report.nmt_metrics[i],
            "best_grid": best_grid,
            # AUC delta units are ambiguous in the wild; report both
            "delta_abs": delta,
            "delta_rel_pct": 100.0 * delta / best_grid if best_grid else float("nan"),
        }
    summary.update({
        "stages": _stage_payload(report.nmt_results),
        "trace_summary": trace_summarize(report.trace, config.optimizer.conv_tol),
        "verdict": report.verdict,
        "nmt_losses": list(report.nmt_losses),
        "best_grid_primary_loss": report.best_grid_primary_loss,
        "metric_deltas": metric_deltas,
        "run_counts": {"grid_runs": report.grid_runs, "nmt_stages": report.nmt_stages},
    })
    write_json(out / "summary.json", summary)
    return summary


def _run_duality(config: ExperimentConfig, out: Path) -> dict:
    dataset = build_dataset(config)
    problem = build_problem(config, dataset)
    theta0 = build_theta0(config, problem)
    trace = RunTrace(n_tasks=problem.n_tasks,
                     metadata={"conv_tol": config.optimizer.conv_tol, "seed": config.seed})
    stage1 = optimize_primary(problem.tasks[0], theta0, config.optimizer, trace)
    trace.to_csv(out / "trace.csv")
    if dataset is not None:
        dataset.to_csv(out / "dataset.csv")

    du = config.duality
    box = du.box or ((-3.0, 3.0),) * problem.dim
    grid = ThetaGrid(bounds=box, resolution=du.resolution)
    lam_axis = default_lambda_axis(du.lambda_min, du.lambda_max, du.lambda_points)
    report = duality_gap(problem, stage1.theta_star, grid,
                         lambda_axes=[lam_axis] * (problem.n_tasks - 1),
                         xi_points=du.xi_points)
    xi_axes = [np.linspace(-r / 2.0, r / 2.0, du.xi_points) for r in problem.tolerances]
    pgrid = build_perturbation_grid(problem, stage1.theta_star, xi_axes, grid)
    tol = du.convexity_tolerance
    if tol is None:
        # grid-resolution error bound: both sides of the midpoint test move
        # by at most the max slope times one refined cell diagonal
        tol = 1e-6 + 2.0 * report.lipschitz_estimate * grid.resolution / grid.refine_factor \
            * math.sqrt(problem.dim)
    convexity = check_midpoint_convexity(pgrid, tol)
    pgrid.to_csv(out / "perturbation.csv")

    payload = {
        "duality": report.to_dict(),
        "midpoint_convexity": {
            "tolerance": tol,
            "n_pairs": convexity.n_pairs,
            "n_violations": len(convexity.violations),
            "max_violation": convexity.max_violation,
            "violations": [list(v) for v in convexity.violations],
        },
        "perturbation_monotone": pgrid.is_monotone_nondecreasing(),
    }
    write_json(out / "duality_report.json", payload)
    summary = _base_summary(config)
    summary.update({
        "stages": _stage_payload([stage1]),
        "duality": payload["duality"],
        "midpoint_convexity_ok": convexity.ok,
        "perturbation_monotone": payload["perturbation_monotone"],
    })
    write_json(out / "summary.json", summary)
    return summary


_RUNNERS = {
    "nmt": _run_nmt,
    "grid": _run_grid,
    "sweep-compare": _run_sweep_compare,
    "duality": _run_duality,
}


def run_experiment(config: ExperimentConfig, out_root: str | None = None) -> Path:
    """Execute one config and write its artifacts; returns the run directory.

    Raises ConfigurationError for invalid configs and DivergenceError when
    a staged run blows up; callers map these to exit codes. Never mutates
    inputs.
    """
    out = run_dir_for(config, out_root)
    out.mkdir(parents=True, exist_ok=True)
    _RUNNERS[config.job](config, out)
    return out
