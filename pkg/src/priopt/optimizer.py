"""Staged constrained optimization of a priority-ordered task list.

Stage 1 minimizes the highest-priority task with plain gradient descent.
Every later stage k re-starts from the previous stage's parameters and
solves

    min_theta  f_k(theta)
    s.t.       f_j(theta) <= f_j(theta_star) + r_j   for all j < k

by alternating a descent step on theta with an ascent step on the
constraint multipliers. The theta step uses the re-scaled loss

    (f_k + sum_j lambda_j * (f_j - f_j(theta_star) - r_j)) / (1 + sum_j lambda_j)

whose weights form a normalized convex combination, keeping step sizes
bounded as multipliers grow; lambda and the normalization factor are
constants with respect to theta. Reference values f_j(theta_star) are
evaluated full-batch at each stage boundary and frozen for the stage.
"""

from __future__ import annotations

from collections import deque
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .errors import ConfigurationError, ContractViolationError, DivergenceError
from .metrics import RunTrace
from .objectives import ParameterVector, TaskObjective, parameter_vector


@dataclass(frozen=True)
class OptimizerConfig:
    """Step sizes, stopping rules, and batch mode for one run.

    ``batch_size=None`` means full-batch; otherwise each iteration draws
    that many row indices from a generator seeded per stage with
    (batch_seed, stage), so a single-task run and stage 1 of a staged run
    share an identical stream. ``full_eval_every`` controls how often
    minibatch-mode trace rows carry full-batch losses.
    """

    eta: float
    tau: float
    lambda_init: float = 0.0
    max_iters: int = 1000
    conv_tol: float = 1e-6
    conv_window: int = 20
    batch_size: int | None = None
    batch_seed: int = 0
    clamp_lambdas: bool = True
    full_eval_every: int = 10

    def __post_init__(self):
        if self.eta <= 0:
            raise ConfigurationError("eta must be > 0")
        if self.tau <= 0:
            raise ConfigurationError("tau must be > 0")
        if self.lambda_init < 0:
            raise ConfigurationError("lambda_init must be >= 0")
        if self.max_iters < 1:
            raise ConfigurationError("max_iters must be >= 1")
        if self.conv_tol <= 0:
            raise ConfigurationError("conv_tol must be > 0")
        if self.conv_window < 1:
            raise ConfigurationError("conv_window must be >= 1")
        if self.batch_size is not None and self.batch_size < 1:
            raise ConfigurationError("batch_size must be >= 1 when set")
        if self.full_eval_every < 1:
            raise ConfigurationError("full_eval_every must be >= 1")


@dataclass(frozen=True)
class PriorityProblem:
    """Ordered task list, highest priority first.

    ``tolerances`` holds r_j for tasks 1..m-1 (how much each may degrade
    once it becomes a constraint); defaults to zeros.
    """

    tasks: tuple[TaskObjective, ...]
    tolerances: tuple[float, ...] = ()

    def __init__(self, tasks: Sequence[TaskObjective], tolerances: Sequence[float] | None = None):
        tasks = tuple(tasks)
        if not tasks:
            raise ConfigurationError("problem needs at least one task")
        dims = {t.dim for t in tasks}
        if len(dims) != 1:
            raise ConfigurationError(f"tasks must share one parameter dimension, got {sorted(dims)}")
        if tolerances is None:
            tolerances = (0.0,) * (len(tasks) - 1)
        tolerances = tuple(float(r) for r in tolerances)
        if len(tolerances) != len(tasks) - 1:
            raise ConfigurationError(f"expected {len(tasks) - 1} tolerances, got {len(tolerances)}")
        if any(r < 0 for r in tolerances):
            raise ConfigurationError("tolerances must be >= 0")
        object.__setattr__(self, "tasks", tasks)
        object.__setattr__(self, "tolerances", tolerances)

    @property
    def n_tasks(self) -> int:
        return len(self.tasks)

    @property
    def dim(self) -> int:
        return self.tasks[0].dim


@dataclass(frozen=True)
class StageResult:
    theta_star: ParameterVector
    final_losses: tuple[float, ...]
    final_lambdas: tuple[float, ...]
    iterations_used: int
    converged: bool
    stage: int = 1


def rescaled_loss(task_loss: float, violations: Sequence[float], lambdas: Sequence[float]) -> float:
    """Normalized convex combination (f_k + sum lambda_j*v_j) / (1 + sum lambda_j)."""
    if len(violations) != len(lambdas):
        raise ContractViolationError("violations and lambdas must have equal length")
    if any(l < 0 for l in lambdas):
        raise ContractViolationError("multipliers must be >= 0")
    total = 1.0 + sum(lambdas)
    return (task_loss + sum(l * v for l, v in zip(lambdas, violations))) / total


def multiplier_step(lambda_j: float, tau: float, violation: float) -> float:
    """Projected ascent: max(0, lambda_j + tau * violation)."""
    if lambda_j < 0:
        raise ContractViolationError("multiplier must be >= 0")
    if tau <= 0:
        raise ContractViolationError("tau must be > 0")
    return max(0.0, lambda_j + tau * violation)


class MultiplierState:
    """Multipliers for one stage plus the frozen reference losses."""

    def __init__(self, n: int, lambda_init: float, references: Sequence[float],
                 tolerances: Sequence[float], clamp: bool = True):
        self.lambdas = [float(lambda_init)] * n
        self.references = tuple(float(v) for v in references)
        self.tolerances = tuple(float(r) for r in tolerances)
        self.clamp = clamp

    def violations(self, losses: Sequence[float]) -> list[float]:
        return [losses[j] - self.references[j] - self.tolerances[j]
                for j in range(len(self.lambdas))]

    def ascend(self, tau: float, violations: Sequence[float]) -> None:
        if self.clamp:
            self.lambdas = [multiplier_step(l, tau, v) for l, v in zip(self.lambdas, violations)]
        else:
            self.lambdas = [l + tau * v for l, v in zip(self.lambdas, violations)]


class _Window:
    """Sliding-window relative-change convergence test."""

    def __init__(self, size: int, tol: float):
        self.buf: deque[float] = deque(maxlen=size + 1)
        self.tol = tol

    def push(self, value: float) -> None:
        self.buf.append(value)

    def settled(self) -> bool:
        if len(self.buf) < self.buf.maxlen:
            return False
        spread = max(self.buf) - min(self.buf)
        return spread <= self.tol * max(1.0, abs(self.buf[-1]))


def _run_stage(problem: PriorityProblem, stage_k: int, theta0: ParameterVector,
               references: Sequence[float], config: OptimizerConfig,
               trace: RunTrace | None) -> StageResult:
    """Shared engine for stage 1 (no constraints) and stages >= 2."""
    tasks = problem.tasks
    own = tasks[stage_k - 1]
    state = MultiplierState(
        n=stage_k - 1, lambda_init=config.lambda_init,
        references=references, tolerances=problem.tolerances[: stage_k - 1],
        clamp=config.clamp_lambdas,
    )
    theta = theta0.copy()

    batch_n = max((t.n_examples or 0) for t in tasks)
    use_batches = config.batch_size is not None and batch_n > 0
    rng = np.random.default_rng([config.batch_seed, stage_k]) if use_batches else None

    def losses_at(th, batch):
        return [t.evaluate(th, batch) for t in tasks]

    if trace is not None:
        trace.start_stage(stage_k, state.references, state.tolerances)
    full0 = losses_at(theta, None)
    v0 = state.violations(full0)
    window = _Window(config.conv_window, config.conv_tol)
    window.push(rescaled_loss(full0[stage_k - 1], v0, state.lambdas))
    if trace is not None:
        trace.record(stage_k, 0, full0, state.lambdas, v0)

    converged = False
    iterations = 0
    for it in range(1, config.max_iters + 1):
        iterations = it
        batch = rng.integers(0, batch_n, size=config.batch_size) if use_batches else None

        grad = own.gradient(theta, batch)
        for j, lam in enumerate(state.lambdas):
            if lam != 0.0:
                grad = grad + lam * tasks[j].gradient(theta, batch)
        grad = grad / (1.0 + sum(state.lambdas))
        if not np.all(np.isfinite(grad)):
            raise DivergenceError(stage_k, it, "gradient")
        theta = theta - config.eta * grad

        full_row = not use_batches or it % config.full_eval_every == 0
        losses = losses_at(theta, None if full_row else batch)
        if not all(np.isfinite(losses)):
            raise DivergenceError(stage_k, it, "loss")
        violations = state.violations(losses)
        state.ascend(config.tau, violations)

        stage_obj = rescaled_loss(losses[stage_k - 1], violations, state.lambdas) \
            if config.clamp_lambdas else \
            (losses[stage_k - 1] + sum(l * v for l, v in zip(state.lambdas, violations))) / (1.0 + sum(state.lambdas))
        window.push(stage_obj)
        if trace is not None:
            trace.record(stage_k, it, losses, state.lambdas, violations)

        feasible = all(
            v <= config.conv_tol * max(1.0, abs(ref))
            for v, ref in zip(violations, state.references)
        )
        if window.settled() and feasible:
            converged = True
            break

    final_losses = tuple(losses_at(theta, None))
    return StageResult(
        theta_star=theta, final_losses=final_losses,
        final_lambdas=tuple(state.lambdas), iterations_used=iterations,
        converged=converged, stage=stage_k,
    )


def optimize_primary(objective: TaskObjective, theta0: ParameterVector,
                     config: OptimizerConfig, trace: RunTrace | None = None) -> StageResult:
    """Plain gradient descent on the highest-priority task."""
    theta0 = parameter_vector(theta0)
    if theta0.size != objective.dim:
        raise ConfigurationError(f"theta0 has dim {theta0.size}, objective expects {objective.dim}")
    if trace is not None:
        trace.metadata.setdefault("conv_tol", config.conv_tol)
    problem = PriorityProblem([objective])
    return _run_stage(problem, 1, theta0, (), config, trace)


def nmt_stage(problem: PriorityProblem, stage_k: int, theta_star: ParameterVector,
              config: OptimizerConfig, trace: RunTrace | None = None) -> StageResult:
    """One constrained stage: optimize task k preserving tasks j < k.

    ``theta_star`` is the previous stage's final parameter vector; the
    constraint references f_j(theta_star) are evaluated full-batch here
    and frozen for the whole stage.
    """
    if not 2 <= stage_k <= problem.n_tasks:
        raise ConfigurationError(f"stage_k must be in [2, {problem.n_tasks}], got {stage_k}")
    theta_star = parameter_vector(theta_star)
    if theta_star.size != problem.dim:
        raise ConfigurationError(f"theta_star has dim {theta_star.size}, problem expects {problem.dim}")
    references = [problem.tasks[j].evaluate(theta_star, None) for j in range(stage_k - 1)]
    return _run_stage(problem, stage_k, theta_star, references, config, trace)


def nmt_optimize(problem: PriorityProblem, theta0: ParameterVector,
                 config: OptimizerConfig, trace: RunTrace | None = None) -> list[StageResult]:
    """Full staged run: stage 1 unconstrained, then one stage per task.

    Returns exactly one StageResult per task, threading each stage's final
    parameters into the next stage's start point and constraint references.
    """
    theta0 = parameter_vector(theta0)
    if theta0.size != problem.dim:
        raise ConfigurationError(f"theta0 has dim {theta0.size}, problem expects {problem.dim}")
    if trace is not None:
        trace.metadata.setdefault("conv_tol", config.conv_tol)
    results = [_run_stage(problem, 1, theta0, (), config, trace)]
    for k in range(2, problem.n_tasks + 1):
        results.append(nmt_stage(problem, k, results[-1].theta_star, config, trace))
    return results
