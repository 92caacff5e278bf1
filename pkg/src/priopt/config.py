"""Experiment configuration: strict TOML schema, parsing, serialization.

Config files are plain TOML. Unknown keys anywhere in the file are
rejected with an error naming every offender, and parse -> serialize ->
parse is an identity on the typed config, so experiment definitions are
diff-able and reproducible.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field
from typing import Any

try:
    import tomllib  # py >= 3.11
except ModuleNotFoundError:  # pragma: no cover
    import tomli as tomllib

import numpy as np

from .errors import ConfigurationError
from .objectives import (
    Dataset,
    GenerationConfig,
    PairSpec,
    QuadraticSpec,
    generate_synthetic,
    make_logistic,
    make_pairwise_ranking,
    make_quadratic,
    make_shared_trunk_model,
)
from .optimizer import OptimizerConfig, PriorityProblem

JOB_KINDS = ("nmt", "grid", "duality", "sweep-compare")
DATASET_TASK_KINDS = ("logistic", "pairwise-ranking", "trunk-head")


@dataclass(frozen=True)
class TaskSpec:
    kind: str
    center: tuple[float, ...] | None = None
    scale: tuple[float, ...] | None = None
    label: str | None = None
    l2: float | None = None
    max_pairs: int | None = None
    pair_seed: int | None = None


@dataclass(frozen=True)
class TrunkSpec:
    width: int
    bias: bool = True


@dataclass(frozen=True)
class DatasetSpec:
    n_examples: int
    n_features: int
    seed: int | None = None  # falls back to the experiment seed
    correlations: tuple[float, ...] = ()
    noise: float = 0.5


@dataclass(frozen=True)
class InitSpec:
    mode: str = "default"  # default | zeros | random | explicit
    theta0: tuple[float, ...] | None = None
    scale: float = 0.1


@dataclass(frozen=True)
class GridSpec:
    weights: tuple[tuple[float, ...], ...]
    normalization: str = "simplex"


@dataclass(frozen=True)
class DualitySpec:
    box: tuple[tuple[float, float], ...] | None = None  # default [-3, 3]^dim
    resolution: float = 1e-2
    lambda_min: float = 0.01
    lambda_max: float = 100.0
    lambda_points: int = 25
    xi_points: int = 5
    convexity_tolerance: float | None = None  # default derived from the Lipschitz estimate


@dataclass(frozen=True)
class ExperimentConfig:
    job: str
    seed: int
    tasks: tuple[TaskSpec, ...]
    optimizer: OptimizerConfig
    out: str = "runs"
    tolerances: tuple[float, ...] | None = None
    trunk: TrunkSpec | None = None
    dataset: DatasetSpec | None = None
    init: InitSpec = field(default_factory=InitSpec)
    grid: GridSpec | None = None
    duality: DualitySpec | None = None


# ---------------------------------------------------------------------------
# parsing with strict key checking

_TASK_KEYS = {
    "quadratic": {"kind", "center", "scale"},
    "logistic": {"kind", "label", "l2"},
    "pairwise-ranking": {"kind", "label", "max_pairs", "pair_seed"},
    "trunk-head": {"kind", "label"},
}
_TOP_KEYS = {"job", "seed", "out", "problem", "dataset", "optimizer", "init", "grid", "duality"}
_PROBLEM_KEYS = {"tasks", "tolerances", "trunk"}
_TRUNK_KEYS = {"width", "bias"}
_DATASET_KEYS = {"seed", "n_examples", "n_features", "correlations", "noise"}
_OPTIMIZER_KEYS = {"eta", "tau", "lambda_init", "max_iters", "conv_tol", "conv_window",
                   "batch_size", "batch_seed", "clamp_lambdas", "full_eval_every"}
_INIT_KEYS = {"mode", "theta0", "scale"}
_GRID_KEYS = {"weights", "normalization"}
_DUALITY_KEYS = {"box", "resolution", "lambda_min", "lambda_max", "lambda_points",
                 "xi_points", "convexity_tolerance"}


def _collect_unknown(mapping: dict, allowed: set[str], prefix: str, sink: list[str]) -> None:
    for key in mapping:
        if key not in allowed:
            sink.append(f"{prefix}{key}")


def _float_tuple(values, where: str) -> tuple[float, ...]:
    try:
        return tuple(float(v) for v in values)
    except (TypeError, ValueError):
        raise ConfigurationError(f"{where} must be a list of numbers") from None


def parse_config(data: dict[str, Any], source: str = "<config>") -> ExperimentConfig:
    """Build a typed config from a parsed TOML mapping, rejecting unknown keys."""
    unknown: list[str] = []
    _collect_unknown(data, _TOP_KEYS, "", unknown)

    problem = data.get("problem", {})
    if isinstance(problem, dict):
        _collect_unknown(problem, _PROBLEM_KEYS, "problem.", unknown)
        raw_tasks = problem.get("tasks", [])
        for i, t in enumerate(raw_tasks):
            kind = t.get("kind")
            allowed = _TASK_KEYS.get(kind, set().union(*_TASK_KEYS.values()))
            _collect_unknown(t, allowed, f"problem.tasks[{i}].", unknown)
        if isinstance(problem.get("trunk"), dict):
            _collect_unknown(problem["trunk"], _TRUNK_KEYS, "problem.trunk.", unknown)
    for section, keys in (("dataset", _DATASET_KEYS), ("optimizer", _OPTIMIZER_KEYS),
                          ("init", _INIT_KEYS), ("grid", _GRID_KEYS), ("duality", _DUALITY_KEYS)):
        if isinstance(data.get(section), dict):
            _collect_unknown(data[section], keys, f"{section}.", unknown)
    if unknown:
        raise ConfigurationError(f"unknown config keys in {source}: {', '.join(sorted(unknown))}")

    job = data.get("job")
    if job not in JOB_KINDS:
        raise ConfigurationError(f"job must be one of {JOB_KINDS}, got {job!r}")
    if "seed" not in data or not isinstance(data["seed"], int) or isinstance(data["seed"], bool):
        raise ConfigurationError("seed must be an integer")

    raw_tasks = problem.get("tasks", []) if isinstance(problem, dict) else []
    if not raw_tasks:
        raise ConfigurationError("problem.tasks must define at least one task")
    tasks = []
    for i, t in enumerate(raw_tasks):
        kind = t.get("kind")
        if kind not in _TASK_KEYS:
            raise ConfigurationError(
                f"problem.tasks[{i}].kind must be one of {sorted(_TASK_KEYS)}, got {kind!r}")
        if kind == "quadratic":
            if "center" not in t or "scale" not in t:
                raise ConfigurationError(f"problem.tasks[{i}] (quadratic) needs center and scale")
            tasks.append(TaskSpec(kind=kind,
                                  center=_float_tuple(t["center"], f"problem.tasks[{i}].center"),
                                  scale=_float_tuple(t["scale"], f"problem.tasks[{i}].scale")))
        else:
            if "label" not in t:
                raise ConfigurationError(f"problem.tasks[{i}] ({kind}) needs a label")
            tasks.append(TaskSpec(
                kind=kind, label=str(t["label"]),
                l2=float(t["l2"]) if "l2" in t else (0.0 if kind == "logistic" else None),
                max_pairs=int(t["max_pairs"]) if "max_pairs" in t else None,
                pair_seed=int(t["pair_seed"]) if "pair_seed" in t else None,
            ))
    tasks = tuple(tasks)

    tolerances = None
    if isinstance(problem, dict) and "tolerances" in problem:
        tolerances = _float_tuple(problem["tolerances"], "problem.tolerances")
        if len(tolerances) != len(tasks) - 1:
            raise ConfigurationError(
                f"problem.tolerances needs {len(tasks) - 1} entries for {len(tasks)} tasks")

    trunk = None
    if isinstance(problem, dict) and "trunk" in problem:
        tr = problem["trunk"]
        if "width" not in tr:
            raise ConfigurationError("problem.trunk.width is required")
        trunk = TrunkSpec(width=int(tr["width"]), bias=bool(tr.get("bias", True)))
    needs_trunk = any(t.kind == "trunk-head" for t in tasks)
    if needs_trunk and trunk is None:
        raise ConfigurationError("trunk-head tasks require a [problem.trunk] section")

    dataset = None
    if "dataset" in data:
        ds = data["dataset"]
        for req in ("n_examples", "n_features"):
            if req not in ds:
                raise ConfigurationError(f"dataset.{req} is required")
        dataset = DatasetSpec(
            n_examples=int(ds["n_examples"]), n_features=int(ds["n_features"]),
            seed=int(ds["seed"]) if "seed" in ds else None,
            correlations=_float_tuple(ds.get("correlations", ()), "dataset.correlations"),
            noise=float(ds.get("noise", 0.5)),
        )
    if any(t.kind in DATASET_TASK_KINDS for t in tasks) and dataset is None:
        raise ConfigurationError("dataset-backed tasks require a [dataset] section")

    opt = data.get("optimizer")
    if not isinstance(opt, dict) or "eta" not in opt or "tau" not in opt:
        raise ConfigurationError("[optimizer] with eta and tau is required")
    optimizer = OptimizerConfig(
        eta=float(opt["eta"]), tau=float(opt["tau"]),
        lambda_init=float(opt.get("lambda_init", 0.0)),
        max_iters=int(opt.get("max_iters", 1000)),
        conv_tol=float(opt.get("conv_tol", 1e-6)),
        conv_window=int(opt.get("conv_window", 20)),
        batch_size=int(opt["batch_size"]) if "batch_size" in opt else None,
        batch_seed=int(opt.get("batch_seed", 0)),
        clamp_lambdas=bool(opt.get("clamp_lambdas", True)),
        full_eval_every=int(opt.get("full_eval_every", 10)),
    )

    init = InitSpec()
    if "init" in data:
        ini = data["init"]
        mode = str(ini.get("mode", "default"))
        if mode not in ("default", "zeros", "random", "explicit"):
            raise ConfigurationError(f"init.mode must be default/zeros/random/explicit, got {mode!r}")
        theta0 = _float_tuple(ini["theta0"], "init.theta0") if "theta0" in ini else None
        if mode == "explicit" and theta0 is None:
            raise ConfigurationError("init.mode = 'explicit' requires init.theta0")
        init = InitSpec(mode=mode, theta0=theta0, scale=float(ini.get("scale", 0.1)))

    grid = None
    if "grid" in data:
        g = data["grid"]
        if "weights" not in g:
            raise ConfigurationError("grid.weights is required")
        grid = GridSpec(
            weights=tuple(_float_tuple(ws, "grid.weights") for ws in g["weights"]),
            normalization=str(g.get("normalization", "simplex")),
        )
    if job in ("grid", "sweep-compare") and grid is None:
        raise ConfigurationError(f"job {job!r} requires a [grid] section")
    if job == "sweep-compare" and len(tasks) != 2:
        raise ConfigurationError("sweep-compare requires exactly two tasks")

    duality = None
    if "duality" in data:
        du = data["duality"]
        box = None
        if "box" in du:
            box = tuple((float(b[0]), float(b[1])) for b in du["box"])
        duality = DualitySpec(
            box=box, resolution=float(du.get("resolution", 1e-2)),
            lambda_min=float(du.get("lambda_min", 0.01)),
            lambda_max=float(du.get("lambda_max", 100.0)),
            lambda_points=int(du.get("lambda_points", 25)),
            xi_points=int(du.get("xi_points", 5)),
            convexity_tolerance=float(du["convexity_tolerance"]) if "convexity_tolerance" in du else None,
        )
    if job == "duality":
        if duality is None:
            duality = DualitySpec()
        if len(tasks) < 2:
            raise ConfigurationError("duality jobs need at least two tasks")

    return ExperimentConfig(
        job=job, seed=int(data["seed"]), out=str(data.get("out", "runs")),
        tasks=tasks, tolerances=tolerances, trunk=trunk, dataset=dataset,
        optimizer=optimizer, init=init, grid=grid, duality=duality,
    )


def load_config(path) -> ExperimentConfig:
    with open(path, "rb") as fh:
        data = tomllib.load(fh)
    return parse_config(data, source=str(path))


def loads_config(text: str) -> ExperimentConfig:
    return parse_config(tomllib.loads(text))


# ---------------------------------------------------------------------------
# serialization (minimal TOML emitter for the schema's value types)


def _fmt(value) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, int):
        return str(value)
    if isinstance(value, float):
        if value != value or value in (float("inf"), float("-inf")):
            raise ConfigurationError("non-finite values are not allowed in configs")
        text = repr(value)
        return text if ("." in text or "e" in text or "E" in text) else text + ".0"
    if isinstance(value, str):
        escaped = value.replace("\\", "\\\\").replace('"', '\\"')
        return f'"{escaped}"'
    if isinstance(value, (list, tuple)):
        return "[" + ", ".join(_fmt(v) for v in value) + "]"
    raise ConfigurationError(f"cannot serialize {type(value).__name__} to TOML")


def to_toml_str(config: ExperimentConfig, include_run_fields: bool = True) -> str:
    """Canonical TOML text; parse(to_toml_str(c)) == c.

    ``include_run_fields=False`` drops seed and output root, giving the
    text that identifies the experiment definition for hashing.
    """
    lines: list[str] = [f"job = {_fmt(config.job)}"]
    if include_run_fields:
        lines.append(f"seed = {_fmt(config.seed)}")
        lines.append(f"out = {_fmt(config.out)}")

    lines.append("")
    lines.append("[problem]")
    if config.tolerances is not None:
        lines.append(f"tolerances = {_fmt(config.tolerances)}")
    if config.trunk is not None:
        lines.append("")
        lines.append("[problem.trunk]")
        lines.append(f"width = {_fmt(config.trunk.width)}")
        lines.append(f"bias = {_fmt(config.trunk.bias)}")
    for t in config.tasks:
        lines.append("")
        lines.append("[[problem.tasks]]")
        lines.append(f"kind = {_fmt(t.kind)}")
        if t.center is not None:
            lines.append(f"center = {_fmt(t.center)}")
        if t.scale is not None:
            lines.append(f"scale = {_fmt(t.scale)}")
        if t.label is not None:
            lines.append(f"label = {_fmt(t.label)}")
        if t.l2 is not None and t.kind == "logistic":
            lines.append(f"l2 = {_fmt(t.l2)}")
        if t.max_pairs is not None:
            lines.append(f"max_pairs = {_fmt(t.max_pairs)}")
        if t.pair_seed is not None:
            lines.append(f"pair_seed = {_fmt(t.pair_seed)}")

    if config.dataset is not None:
        ds = config.dataset
        lines.append("")
        lines.append("[dataset]")
        if ds.seed is not None:
            lines.append(f"seed = {_fmt(ds.seed)}")
        lines.append(f"n_examples = {_fmt(ds.n_examples)}")
        lines.append(f"n_features = {_fmt(ds.n_features)}")
        lines.append(f"correlations = {_fmt(ds.correlations)}")
        lines.append(f"noise = {_fmt(ds.noise)}")

    opt = config.optimizer
    lines.append("")
    lines.append("[optimizer]")
    lines.append(f"eta = {_fmt(opt.eta)}")
    lines.append(f"tau = {_fmt(opt.tau)}")
    lines.append(f"lambda_init = {_fmt(opt.lambda_init)}")
    lines.append(f"max_iters = {_fmt(opt.max_iters)}")
    lines.append(f"conv_tol = {_fmt(opt.conv_tol)}")
    lines.append(f"conv_window = {_fmt(opt.conv_window)}")
    if opt.batch_size is not None:
        lines.append(f"batch_size = {_fmt(opt.batch_size)}")
        lines.append(f"batch_seed = {_fmt(opt.batch_seed)}")
    lines.append(f"clamp_lambdas = {_fmt(opt.clamp_lambdas)}")
    lines.append(f"full_eval_every = {_fmt(opt.full_eval_every)}")

    lines.append("")
    lines.append("[init]")
    lines.append(f"mode = {_fmt(config.init.mode)}")
    if config.init.theta0 is not None:
        lines.append(f"theta0 = {_fmt(config.init.theta0)}")
    lines.append(f"scale = {_fmt(config.init.scale)}")

    if config.grid is not None:
        lines.append("")
        lines.append("[grid]")
        lines.append(f"weights = {_fmt(config.grid.weights)}")
        lines.append(f"normalization = {_fmt(config.grid.normalization)}")

    if config.duality is not None:
        du = config.duality
        lines.append("")
        lines.append("[duality]")
        if du.box is not None:
            lines.append(f"box = {_fmt(du.box)}")
        lines.append(f"resolution = {_fmt(du.resolution)}")
        lines.append(f"lambda_min = {_fmt(du.lambda_min)}")
        lines.append(f"lambda_max = {_fmt(du.lambda_max)}")
        lines.append(f"lambda_points = {_fmt(du.lambda_points)}")
        lines.append(f"xi_points = {_fmt(du.xi_points)}")
        if du.convexity_tolerance is not None:
            lines.append(f"convexity_tolerance = {_fmt(du.convexity_tolerance)}")

    return "\n".join(lines) + "\n"


def config_hash(config: ExperimentConfig) -> str:
    text = to_toml_str(config, include_run_fields=False)
    return hashlib.sha256(text.encode()).hexdigest()[:12]


# ---------------------------------------------------------------------------
# builders


def build_dataset(config: ExperimentConfig) -> Dataset | None:
    if config.dataset is None:
        return None
    ds = config.dataset
    gen = GenerationConfig(
        seed=ds.seed if ds.seed is not None else config.seed,
        n_examples=ds.n_examples, n_features=ds.n_features,
        task_correlations=ds.correlations, noise=ds.noise,
    )
    return generate_synthetic(gen)


def build_problem(config: ExperimentConfig, dataset: Dataset | None = None) -> PriorityProblem:
    if dataset is None:
        dataset = build_dataset(config)
    trunk_heads = [t.label for t in config.tasks if t.kind == "trunk-head"]
    trunk_objectives = {}
    if trunk_heads:
        built = make_shared_trunk_model(dataset, config.trunk.width, trunk_heads,
                                        bias=config.trunk.bias)
        trunk_objectives = dict(zip(trunk_heads, built))
    objectives = []
    for t in config.tasks:
        if t.kind == "quadratic":
            objectives.append(make_quadratic(QuadraticSpec(center=t.center, scale=t.scale)))
        elif t.kind == "logistic":
            objectives.append(make_logistic(dataset, t.label, l2=t.l2))
        elif t.kind == "pairwise-ranking":
            objectives.append(make_pairwise_ranking(
                dataset, PairSpec(label_column=t.label, max_pairs=t.max_pairs,
                                  seed=t.pair_seed or 0)))
        else:
            objectives.append(trunk_objectives[t.label])
    return PriorityProblem(objectives, config.tolerances)


def build_theta0(config: ExperimentConfig, problem: PriorityProblem) -> np.ndarray:
    init = config.init
    mode = init.mode
    if mode == "default":
        mode = "random" if any(t.kind == "trunk-head" for t in config.tasks) else "zeros"
    if mode == "explicit":
        theta0 = np.asarray(init.theta0, dtype=np.float64)
        if theta0.size != problem.dim:
            raise ConfigurationError(
                f"init.theta0 has {theta0.size} entries, problem dimension is {problem.dim}")
        return theta0
    if mode == "random":
        rng = np.random.default_rng([config.seed, 101])
        return init.scale * rng.normal(size=problem.dim)
    return np.zeros(problem.dim)
