"""Weighted-sum scalarization with grid search over the weights.

This is the tuning-based baseline the staged optimizer replaces: every
weight combination trains a fresh model from the same starting point, and
the collected endpoints trace the loss/metric trade-off frontier.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .errors import ConfigurationError, DivergenceError, UndefinedMetricError
from .metrics import auc
from .objectives import ParameterVector, TaskObjective
from .optimizer import OptimizerConfig, PriorityProblem, optimize_primary


@dataclass(frozen=True)
class WeightGrid:
    """Grid of per-task loss weights.

    In ``simplex`` mode the lists cover tasks 1..m-1 and the last task's
    weight is implied as 1 - sum(others); every combination must stay
    strictly positive and sums to 1 within 1e-12. In ``raw`` mode one list
    per task is taken as a full product grid.
    """

    weights_per_task: tuple[tuple[float, ...], ...]
    normalization: str = "simplex"

    def __post_init__(self):
        if self.normalization not in ("simplex", "raw"):
            raise ConfigurationError(f"unknown normalization {self.normalization!r}")
        if not self.weights_per_task or any(not ws for ws in self.weights_per_task):
            raise ConfigurationError("weight grid must be non-empty")
        for ws in self.weights_per_task:
            if any(not 0.0 < w <= 1.0 for w in ws):
                raise ConfigurationError("weights must lie in (0, 1]")

    def combinations(self, n_tasks: int) -> list[tuple[float, ...]]:
        if self.normalization == "simplex":
            if len(self.weights_per_task) != n_tasks - 1:
                raise ConfigurationError(
                    f"simplex grid needs {n_tasks - 1} weight lists for {n_tasks} tasks, "
                    f"got {len(self.weights_per_task)}")
            combos = []
            for free in itertools.product(*self.weights_per_task):
                last = 1.0 - sum(free)
                if last <= 0.0:
                    raise ConfigurationError(f"simplex weights {free} leave no mass for the last task")
                alphas = (*free, last)
                if abs(sum(alphas) - 1.0) > 1e-12:
                    raise ConfigurationError(f"simplex combination {alphas} does not sum to 1")
                combos.append(alphas)
            return combos
        if len(self.weights_per_task) != n_tasks:
            raise ConfigurationError(
                f"raw grid needs {n_tasks} weight lists, got {len(self.weights_per_task)}")
        return [tuple(c) for c in itertools.product(*self.weights_per_task)]


def default_two_task_grid(p: int = 5) -> WeightGrid:
    """Primary weight 0.5..0.9 (p points), secondary implied."""
    return WeightGrid(weights_per_task=(tuple(np.linspace(0.5, 0.9, p)),), normalization="simplex")


@dataclass(frozen=True)
class FrontierPoint:
    weights: tuple[float, ...]
    final_losses: tuple[float, ...]
    final_metrics: tuple[float, ...]
    theta_final: ParameterVector | None
    diverged: bool = False


def weighted_sum_objective(tasks: Sequence[TaskObjective], alphas: Sequence[float],
                           id: str = "weighted-sum") -> TaskObjective:
    """Composite with value sum(a_i * f_i) and gradient sum(a_i * grad f_i)."""
    tasks = tuple(tasks)
    alphas = tuple(float(a) for a in alphas)
    if len(tasks) != len(alphas):
        raise ConfigurationError(f"{len(tasks)} tasks but {len(alphas)} weights")
    if any(a <= 0 for a in alphas):
        raise ConfigurationError("weights must be > 0")
    dims = {t.dim for t in tasks}
    if len(dims) != 1:
        raise ConfigurationError("tasks must share one parameter dimension")

    def value(theta, batch=None):
        return sum(a * t.evaluate(theta, batch) for a, t in zip(alphas, tasks))

    def grad(theta, batch=None):
        g = alphas[0] * tasks[0].gradient(theta, batch)
        for a, t in zip(alphas[1:], tasks[1:]):
            g = g + a * t.gradient(theta, batch)
        return g

    def value_many(thetas):
        out = alphas[0] * tasks[0].evaluate_many(thetas)
        for a, t in zip(alphas[1:], tasks[1:]):
            out = out + a * t.evaluate_many(thetas)
        return out

    n = max((t.n_examples or 0) for t in tasks)
    return TaskObjective(
        id=id, kind="weighted-sum", dim=tasks[0].dim,
        n_examples=n or None,
        _value=value, _grad=grad, _value_many=value_many,
    )


def task_metric(task: TaskObjective, theta: ParameterVector) -> float:
    """AUC of the task's scores where defined, NaN otherwise."""
    if task.labels is None:
        return float("nan")
    try:
        return auc(task.scores(theta), task.labels)
    except UndefinedMetricError:
        return float("nan")


def grid_search(problem: PriorityProblem, grid: WeightGrid, theta0: ParameterVector,
                config: OptimizerConfig) -> list[FrontierPoint]:
    """Train one weighted-sum model per grid combination.

    Every run starts from the same theta0 with the same batch seed, so the
    weights are the only varying factor. Diverged runs are kept in the
    output with the flag set rather than dropped. The number of entries
    always equals the number of grid combinations.
    """
    combos = grid.combinations(problem.n_tasks)
    points: list[FrontierPoint] = []
    for alphas in combos:
        composite = weighted_sum_objective(problem.tasks, alphas)
        try:
            result = optimize_primary(composite, theta0, config)
        except DivergenceError:
            points.append(FrontierPoint(
                weights=alphas,
                final_losses=(float("nan"),) * problem.n_tasks,
                final_metrics=(float("nan"),) * problem.n_tasks,
                theta_final=None, diverged=True,
            ))
            continue
        theta = result.theta_star
        losses = tuple(t.evaluate(theta, None) for t in problem.tasks)
        metrics = tuple(task_metric(t, theta) for t in problem.tasks)
        points.append(FrontierPoint(
            weights=alphas, final_losses=losses, final_metrics=metrics,
            theta_final=theta, diverged=False,
        ))
    return points
