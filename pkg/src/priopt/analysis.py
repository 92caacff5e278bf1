"""Brute-force verification of the duality theory on small instances.

Everything here deliberately avoids gradient descent: constrained optima,
the perturbation function, and the dual value are all computed by
exhaustive minimization over a bounded parameter grid (dimension <= 3),
so they can serve as independent oracles for the staged optimizer.

The primal and dual are evaluated over the *same* finite point set
(coarse grid plus a 10x refinement around the primal incumbent). On a
shared point set the dual value never exceeds the primal for any
multiplier choice, so weak duality holds exactly by construction and any
reported gap measures strong-duality quality plus grid resolution only.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .errors import ConfigurationError, UnsupportedScaleError
from .objectives import ParameterVector
from .optimizer import PriorityProblem

_MAX_BRUTE_DIM = 3


@dataclass(frozen=True)
class ThetaGrid:
    """Bounded box with a uniform resolution per dimension."""

    bounds: tuple[tuple[float, float], ...]
    resolution: float
    refine_factor: int = 10

    def __post_init__(self):
        if self.resolution <= 0:
            raise ConfigurationError("resolution must be > 0")
        for lo, hi in self.bounds:
            if not lo < hi:
                raise ConfigurationError(f"invalid bounds ({lo}, {hi})")
        if self.refine_factor < 1:
            raise ConfigurationError("refine_factor must be >= 1")

    @property
    def dim(self) -> int:
        return len(self.bounds)

    def axes(self) -> list[np.ndarray]:
        out = []
        for lo, hi in self.bounds:
            n = max(1, int(round((hi - lo) / self.resolution)))
            out.append(np.linspace(lo, hi, n + 1))
        return out


def default_theta_grid(dim: int, half_width: float = 3.0, resolution: float = 1e-2) -> ThetaGrid:
    return ThetaGrid(bounds=((-half_width, half_width),) * dim, resolution=resolution)


def _mesh(axes: Sequence[np.ndarray]) -> np.ndarray:
    grids = np.meshgrid(*axes, indexing="ij")
    return np.stack([g.ravel() for g in grids], axis=1)


@dataclass
class _PointSet:
    """Grid points with precomputed per-task values (tasks x points)."""

    points: np.ndarray
    values: np.ndarray
    coarse_shape: tuple[int, ...]
    resolution: float


def _check_scale(problem: PriorityProblem, grid: ThetaGrid) -> None:
    if problem.dim > _MAX_BRUTE_DIM:
        raise UnsupportedScaleError(
            f"brute-force verification supports <= {_MAX_BRUTE_DIM} parameters, problem has {problem.dim}")
    if grid.dim != problem.dim:
        raise ConfigurationError(f"grid dim {grid.dim} != problem dim {problem.dim}")


def _coarse_point_set(problem: PriorityProblem, grid: ThetaGrid) -> _PointSet:
    axes = grid.axes()
    points = _mesh(axes)
    values = np.stack([t.evaluate_many(points) for t in problem.tasks])
    return _PointSet(points=points, values=values,
                     coarse_shape=tuple(len(a) for a in axes),
                     resolution=grid.resolution)


def _refine_point_set(problem: PriorityProblem, grid: ThetaGrid, ps: _PointSet,
                      caps_list: Sequence[np.ndarray]) -> _PointSet:
    """Extend the set with a fine lattice around each caps' incumbent.

    One shared point set serves every perturbation, so later minima over
    it are exactly monotone in the constraint caps; refining around every
    incumbent keeps each minimum accurate at resolution/refine_factor.
    """
    if grid.refine_factor <= 1:
        return ps
    n_coarse = int(np.prod(ps.coarse_shape))
    centers: list[tuple[float, ...]] = []
    seen = set()
    for caps in caps_list:
        feasible = np.all(ps.values[:-1, :n_coarse] <= caps[:, None], axis=0) if caps.size \
            else np.ones(n_coarse, dtype=bool)
        if not np.any(feasible):
            continue
        objective = np.where(feasible, ps.values[-1, :n_coarse], np.inf)
        center = tuple(ps.points[int(np.argmin(objective))])
        if center not in seen:
            seen.add(center)
            centers.append(center)
    if not centers:
        return ps
    h = grid.resolution
    blocks = []
    for center in centers:
        fine_axes = []
        for d, (lo, hi) in enumerate(grid.bounds):
            a = max(lo, center[d] - h)
            b = min(hi, center[d] + h)
            n = max(1, int(round((b - a) * grid.refine_factor / h)))
            fine_axes.append(np.linspace(a, b, n + 1))
        blocks.append(_mesh(fine_axes))
    fine = np.concatenate(blocks)
    fine_values = np.stack([t.evaluate_many(fine) for t in problem.tasks])
    return _PointSet(points=np.concatenate([ps.points, fine]),
                     values=np.concatenate([ps.values, fine_values], axis=1),
                     coarse_shape=ps.coarse_shape, resolution=ps.resolution)


def _constrained_min(ps: _PointSet, caps: np.ndarray) -> tuple[float, int]:
    """(min of f_m over the feasible points, argmin index); (inf, -1) if empty."""
    feasible = np.all(ps.values[:-1] <= caps[:, None], axis=0) if caps.size else \
        np.ones(ps.points.shape[0], dtype=bool)
    if not np.any(feasible):
        return float("inf"), -1
    objective = np.where(feasible, ps.values[-1], np.inf)
    idx = int(np.argmin(objective))
    return float(objective[idx]), idx


def _references(problem: PriorityProblem, theta_star: ParameterVector) -> np.ndarray:
    return np.array([problem.tasks[j].evaluate(theta_star, None)
                     for j in range(problem.n_tasks - 1)])


def check_slater(problem: PriorityProblem, theta_star: ParameterVector) -> bool | None:
    """Strict feasibility of the relaxed constraints at theta_star.

    True when every tolerance is strictly positive and every reference
    loss is finite (theta_star then satisfies f_i < f_i(theta_star) + r_i
    trivially). Returns None — not applicable — when any tolerance is
    zero, since strict inequality is impossible there.
    """
    if any(r == 0.0 for r in problem.tolerances):
        return None
    refs = _references(problem, theta_star)
    return bool(np.all(np.isfinite(refs)))


def perturbation_function(problem: PriorityProblem, theta_star: ParameterVector,
                          xi: Sequence[float], theta_grid: ThetaGrid) -> float:
    """Constrained optimum of the last task under tightened constraints.

    Exhaustively minimizes f_m(theta) over the grid subject to
    f_i(theta) <= f_i(theta_star) + r_i - xi_i for all i < m. Returns
    +inf when no grid point is feasible.
    """
    _check_scale(problem, theta_grid)
    xi = np.asarray(xi, dtype=np.float64)
    if xi.shape != (problem.n_tasks - 1,):
        raise ConfigurationError(f"xi must have {problem.n_tasks - 1} entries")
    refs = _references(problem, theta_star)
    caps = refs + np.asarray(problem.tolerances) - xi
    ps = _refine_point_set(problem, theta_grid, _coarse_point_set(problem, theta_grid), [caps])
    value, _ = _constrained_min(ps, caps)
    return value


@dataclass
class PerturbationGrid:
    """P(xi) tabulated over a uniform product grid of perturbations."""

    xi_axes: tuple[np.ndarray, ...]
    theta_grid: ThetaGrid
    P_values: np.ndarray  # shape: per-axis lengths
    argmins: np.ndarray   # same shape + (dim,); NaN rows where infeasible

    @property
    def xi_values(self) -> np.ndarray:
        return _mesh(self.xi_axes)

    def is_monotone_nondecreasing(self) -> bool:
        """P cannot decrease as any constraint tightens."""
        for axis in range(self.P_values.ndim):
            lead = np.moveaxis(self.P_values, axis, 0)
            if not np.all(lead[1:] >= lead[:-1]):
                return False
        return True

    def epsilon_estimate(self) -> float:
        """Max argmin displacement between adjacent perturbations."""
        best = 0.0
        for axis in range(self.P_values.ndim):
            p = np.moveaxis(self.P_values, axis, 0)
            a = np.moveaxis(self.argmins, axis, 0)
            ok = np.isfinite(p[1:]) & np.isfinite(p[:-1])
            if np.any(ok):
                dist = np.linalg.norm(a[1:] - a[:-1], axis=-1)
                best = max(best, float(np.max(dist[ok])))
        return best

    def to_csv(self, path_or_buf) -> None:
        import csv
        close = False
        if isinstance(path_or_buf, (str, bytes)) or hasattr(path_or_buf, "__fspath__"):
            buf = open(path_or_buf, "w", newline="")
            close = True
        else:
            buf = path_or_buf
        try:
            writer = csv.writer(buf)
            c = len(self.xi_axes)
            writer.writerow([f"xi_{i + 1}" for i in range(c)] + ["P"])
            flat = self.P_values.ravel()
            for row, p in zip(self.xi_values, flat):
                writer.writerow([repr(float(v)) for v in row] + [repr(float(p))])
        finally:
            if close:
                buf.close()


def build_perturbation_grid(problem: PriorityProblem, theta_star: ParameterVector,
                            xi_axes: Sequence[Sequence[float]], theta_grid: ThetaGrid,
                            _point_set: _PointSet | None = None) -> PerturbationGrid:
    """Tabulate P over a product of uniform per-constraint xi axes.

    All perturbations share one point set, refined around every xi node's
    incumbent, which keeps each value accurate while making P exactly
    nondecreasing in each coordinate on the grid. ``_point_set`` lets a
    caller reuse an existing coarse evaluation.
    """
    _check_scale(problem, theta_grid)
    axes = tuple(np.asarray(a, dtype=np.float64) for a in xi_axes)
    if len(axes) != problem.n_tasks - 1:
        raise ConfigurationError(f"need {problem.n_tasks - 1} xi axes")
    for a in axes:
        if a.size >= 2:
            steps = np.diff(a)
            if not np.allclose(steps, steps[0], rtol=0, atol=1e-12):
                raise ConfigurationError("xi axes must be uniformly spaced")
    refs = _references(problem, theta_star)
    base_caps = refs + np.asarray(problem.tolerances)
    shape = tuple(a.size for a in axes)
    all_idx = list(itertools.product(*(range(n) for n in shape)))
    caps_list = [base_caps - np.array([axes[i][idx[i]] for i in range(len(axes))])
                 for idx in all_idx]
    ps = _point_set or _coarse_point_set(problem, theta_grid)
    ps = _refine_point_set(problem, theta_grid, ps, caps_list)
    P = np.empty(shape)
    arg = np.full(shape + (problem.dim,), np.nan)
    for idx, caps in zip(all_idx, caps_list):
        value, where = _constrained_min(ps, caps)
        P[idx] = value
        if where >= 0:
            arg[idx] = ps.points[where]
    return PerturbationGrid(xi_axes=axes, theta_grid=theta_grid, P_values=P, argmins=arg)


@dataclass(frozen=True)
class ConvexityReport:
    n_pairs: int
    violations: tuple[tuple[int, int, float], ...]  # (flat index a, flat index b, magnitude)
    max_violation: float

    @property
    def ok(self) -> bool:
        return not self.violations


def check_midpoint_convexity(p_grid: PerturbationGrid, tolerance: float) -> ConvexityReport:
    """Midpoint convexity of P over all grid pairs with a grid midpoint.

    For every pair of perturbation indices whose componentwise midpoint is
    itself a grid node and whose P values are finite, checks
    P(mid) <= (P(a) + P(b)) / 2 + tolerance. Pairs with an infinite
    endpoint are trivially convex and skipped; a finite pair with an
    infeasible midpoint is an infinite violation.
    """
    P = p_grid.P_values
    shape = P.shape
    idxs = list(itertools.product(*(range(n) for n in shape)))
    flat = {idx: k for k, idx in enumerate(idxs)}
    violations: list[tuple[int, int, float]] = []
    n_pairs = 0
    max_violation = 0.0
    for a_pos, a in enumerate(idxs):
        if not np.isfinite(P[a]):
            continue
        for b in idxs[a_pos:]:
            if not np.isfinite(P[b]):
                continue
            if any((ia + ib) % 2 for ia, ib in zip(a, b)):
                continue
            mid = tuple((ia + ib) // 2 for ia, ib in zip(a, b))
            n_pairs += 1
            excess = P[mid] - 0.5 * (P[a] + P[b])
            if excess > tolerance:
                violations.append((flat[a], flat[b], float(excess)))
                max_violation = max(max_violation, float(excess))
    return ConvexityReport(n_pairs=n_pairs, violations=tuple(violations),
                           max_violation=max_violation)


def default_lambda_axis(low: float = 0.01, high: float = 100.0, n: int = 25) -> np.ndarray:
    """Zero plus n-1 geometrically spaced multiplier values."""
    return np.concatenate([[0.0], np.geomspace(low, high, n - 1)])


@dataclass(frozen=True)
class DualityReport:
    primal_value: float
    dual_value: float
    gap: float
    slater_ok: bool
    epsilon_estimate: float
    lipschitz_estimate: float
    best_lambdas: tuple[float, ...]
    n_points: int
    resolution: float

    def to_dict(self) -> dict:
        def safe(v):
            if isinstance(v, float) and not np.isfinite(v):
                return repr(v)
            return v
        return {k: safe(v) if not isinstance(v, tuple) else [safe(x) for x in v]
                for k, v in self.__dict__.items()}


def lipschitz_estimate(ps: _PointSet) -> float:
    """Max finite-difference slope of any task along any coarse-grid axis."""
    shape = ps.coarse_shape
    n_coarse = int(np.prod(shape))
    best = 0.0
    for values in ps.values:
        v = values[:n_coarse].reshape(shape)
        for axis in range(len(shape)):
            if shape[axis] < 2:
                continue
            d = np.abs(np.diff(v, axis=axis)) / ps.resolution
            best = max(best, float(np.max(d)))
    return best


def duality_gap(problem: PriorityProblem, theta_star: ParameterVector,
                theta_grid: ThetaGrid, lambda_axes: Sequence[Sequence[float]] | None = None,
                xi_points: int = 3) -> DualityReport:
    """Primal constrained optimum vs. dual max-min value, both brute force.

    primal = min f_m(theta) s.t. f_i(theta) <= f_i(theta_star) + r_i
    dual   = max over the multiplier grid of
             min over theta of f_m + sum_i lambda_i (f_i - f_i(theta_star) - r_i)

    Requires strictly positive tolerances (the relaxed problem) and at
    most 3 parameters.
    """
    _check_scale(problem, theta_grid)
    if problem.n_tasks < 2:
        raise ConfigurationError("duality analysis needs at least two tasks")
    if any(r <= 0 for r in problem.tolerances):
        raise ConfigurationError("duality analysis requires tolerances > 0")
    n_con = problem.n_tasks - 1
    if lambda_axes is None:
        lambda_axes = [default_lambda_axis()] * n_con
    lambda_axes = [np.asarray(a, dtype=np.float64) for a in lambda_axes]
    if len(lambda_axes) != n_con or any(np.any(a < 0) for a in lambda_axes):
        raise ConfigurationError("need one nonnegative lambda axis per constraint")

    refs = _references(problem, theta_star)
    tol = np.asarray(problem.tolerances)
    caps = refs + tol
    coarse = _coarse_point_set(problem, theta_grid)
    ps = _refine_point_set(problem, theta_grid, coarse, [caps])

    primal, _ = _constrained_min(ps, caps)

    margins = ps.values[:-1] - (refs + tol)[:, None]  # f_i - ref_i - r_i per point
    f_last = ps.values[-1]
    dual = -np.inf
    best = (0.0,) * n_con
    for combo in itertools.product(*lambda_axes):
        lagrangian = f_last.copy()
        for i, lam in enumerate(combo):
            if lam != 0.0:
                lagrangian += lam * margins[i]
        value = float(np.min(lagrangian))
        if value > dual:
            dual, best = value, tuple(float(l) for l in combo)

    xi_axes = [np.linspace(-r / 2.0, r / 2.0, xi_points) for r in problem.tolerances]
    pgrid = build_perturbation_grid(problem, theta_star, xi_axes, theta_grid, _point_set=ps)

    return DualityReport(
        primal_value=primal, dual_value=dual, gap=primal - dual,
        slater_ok=check_slater(problem, theta_star) is True,
        epsilon_estimate=pgrid.epsilon_estimate(),
        lipschitz_estimate=lipschitz_estimate(ps),
        best_lambdas=best, n_points=ps.points.shape[0],
        resolution=theta_grid.resolution,
    )
