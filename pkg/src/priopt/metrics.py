"""Evaluation metrics and the per-iteration run trace."""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .errors import UndefinedMetricError


def auc(scores: Sequence[float], labels: Sequence[int]) -> float:
    """Probability a random positive outscores a random negative, ties 1/2.

    Exact rank-sum formulation (tie groups get their average rank), not a
    trapezoidal approximation.
    """
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels)
    if scores.shape != labels.shape or scores.ndim != 1:
        raise UndefinedMetricError("scores and labels must be equal-length 1-D sequences")
    if not np.all((labels == 0) | (labels == 1)):
        raise UndefinedMetricError("labels must be in {0, 1}")
    n_pos = int(np.sum(labels == 1))
    n_neg = labels.size - n_pos
    if n_pos == 0 or n_neg == 0:
        raise UndefinedMetricError("AUC needs at least one positive and one negative label")
    # average rank per tied group, computed in exact integer/half-integer
    # arithmetic so the rank-sum is bit-reproducible
    uniq, inverse, counts = np.unique(scores, return_inverse=True, return_counts=True)
    starts = np.cumsum(counts) - counts  # 0-based start index of each group
    avg_rank = starts + (counts + 1) / 2.0  # 1-based average rank
    rank_sum_pos = float(np.sum(avg_rank[inverse[labels == 1]]))
    num = rank_sum_pos - n_pos * (n_pos + 1) / 2.0
    return num / (n_pos * n_neg)


# ---------------------------------------------------------------------------
# run traces


@dataclass(frozen=True)
class TraceRow:
    stage: int
    iteration: int
    losses: tuple[float, ...]
    lambdas: tuple[float, ...]
    violations: tuple[float, ...]


@dataclass
class StageInfo:
    stage: int
    first_row: int
    references: tuple[float, ...]
    tolerances: tuple[float, ...]


@dataclass
class RunTrace:
    """Append-only per-iteration record of a staged optimization run.

    Rows carry all task losses, the active multipliers, and the constraint
    residuals; ``stage_boundaries`` marks the row index where each stage
    begins. Immutable once the run finishes.
    """

    n_tasks: int
    metadata: dict = field(default_factory=dict)
    rows: list[TraceRow] = field(default_factory=list)
    stage_infos: list[StageInfo] = field(default_factory=list)

    @property
    def stage_boundaries(self) -> list[int]:
        return [info.first_row for info in self.stage_infos]

    def start_stage(self, stage: int, references: Sequence[float], tolerances: Sequence[float]) -> None:
        self.stage_infos.append(
            StageInfo(stage=stage, first_row=len(self.rows),
                      references=tuple(references), tolerances=tuple(tolerances))
        )

    def record(self, stage: int, iteration: int, losses: Sequence[float],
               lambdas: Sequence[float], violations: Sequence[float]) -> None:
        row = TraceRow(stage, iteration, tuple(losses), tuple(lambdas), tuple(violations))
        if len(row.losses) != self.n_tasks:
            raise ValueError(f"expected {self.n_tasks} losses, got {len(row.losses)}")
        if len(row.lambdas) != stage - 1 or len(row.violations) != stage - 1:
            raise ValueError("stage k rows carry exactly k-1 multipliers and violations")
        if self.rows and self.rows[-1].stage == stage and iteration <= self.rows[-1].iteration:
            raise ValueError("iteration indices must strictly increase within a stage")
        self.rows.append(row)

    def stage_rows(self, stage: int) -> list[TraceRow]:
        return [r for r in self.rows if r.stage == stage]

    def to_csv(self, path_or_buf) -> None:
        """Columns: stage, iter, loss_task_*, lambda_*, violation_*."""
        close = False
        if isinstance(path_or_buf, (str, bytes)) or hasattr(path_or_buf, "__fspath__"):
            buf = open(path_or_buf, "w", newline="")
            close = True
        else:
            buf = path_or_buf
        try:
            writer = csv.writer(buf)
            m = self.n_tasks
            header = (["stage", "iter"]
                      + [f"loss_task_{i + 1}" for i in range(m)]
                      + [f"lambda_{j + 1}" for j in range(m - 1)]
                      + [f"violation_{j + 1}" for j in range(m - 1)])
            writer.writerow(header)
            for r in self.rows:
                lam = [repr(v) for v in r.lambdas] + [""] * (m - 1 - len(r.lambdas))
                vio = [repr(v) for v in r.violations] + [""] * (m - 1 - len(r.violations))
                writer.writerow([r.stage, r.iteration] + [repr(v) for v in r.losses] + lam + vio)
        finally:
            if close:
                buf.close()


@dataclass(frozen=True)
class StageSummary:
    stage: int
    iterations: int
    final_losses: tuple[float, ...]
    final_lambdas: tuple[float, ...]
    final_violations: tuple[float, ...]
    pattern_holds: bool | None  # None for the unconstrained stage
    lambda_rose: bool | None
    primary_within_band: bool | None
    secondary_decreased: bool | None


def trace_summarize(trace: RunTrace, conv_tol: float | None = None) -> dict:
    """Per-stage finals plus the qualitative trajectory pattern.

    For each constrained stage the pattern holds when (a) some multiplier
    value over the stage reaches at least its starting value, (b) the mean
    constraint residual over the last 10% of rows stays within the
    conv_tol-scaled band of each frozen reference, and (c) the stage's own
    task loss ends no higher than it started (strictly lower in the
    non-degenerate case; equality tolerated at 1e-9).
    """
    if not trace.rows:
        raise ValueError("trace is empty")
    if conv_tol is None:
        conv_tol = float(trace.metadata.get("conv_tol", 1e-6))
    summaries = []
    for info in trace.stage_infos:
        rows = trace.stage_rows(info.stage)
        last = rows[-1]
        if info.stage == 1:
            summaries.append(StageSummary(
                stage=1, iterations=last.iteration, final_losses=last.losses,
                final_lambdas=(), final_violations=(),
                pattern_holds=None, lambda_rose=None,
                primary_within_band=None, secondary_decreased=None,
            ))
            continue
        k = info.stage
        start = rows[0]
        lam_rose = all(
            max(r.lambdas[j] for r in rows) >= start.lambdas[j]
            for j in range(k - 1)
        )
        tail = rows[-max(1, len(rows) // 10):]
        within = all(
            float(np.mean([r.violations[j] for r in tail]))
            <= conv_tol * max(1.0, abs(info.references[j]))
            for j in range(k - 1)
        )
        own = k - 1  # 0-based index of the stage's own task loss
        decreased = last.losses[own] <= start.losses[own] + 1e-9
        summaries.append(StageSummary(
            stage=k, iterations=last.iteration, final_losses=last.losses,
            final_lambdas=last.lambdas, final_violations=last.violations,
            pattern_holds=lam_rose and within and decreased,
            lambda_rose=lam_rose, primary_within_band=within,
            secondary_decreased=decreased,
        ))
    out = {
        "n_tasks": trace.n_tasks,
        "n_stages": len(trace.stage_infos),
        "stages": [s.__dict__ for s in summaries],
        "pattern_holds": all(s.pattern_holds for s in summaries if s.pattern_holds is not None),
    }
    if len(trace.stage_infos) == 1:
        out["pattern_holds"] = None  # no constrained stage, nothing to check
    return out
