"""Differentiable task families over a shared parameter vector.

Every task exposes the same contract: ``evaluate(theta)`` returns a finite
scalar loss, ``gradient(theta)`` returns its exact analytic gradient with
the same dimension as ``theta``. Dataset-backed tasks additionally accept a
row-index batch for stochastic estimates, and all families support
vectorized evaluation over many parameter points (used by the brute-force
verification code).

Families:

* quadratic        — sum_d scale_d * (theta_d - center_d)^2, analytic optimum
* logistic         — mean binary cross-entropy of a linear model + l2 on w
* pairwise-ranking — mean -log sigmoid(z_pos - z_neg) of a linear scorer
* shared-trunk     — one-hidden-layer tanh trunk shared by per-task heads
"""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .errors import ConfigurationError

ParameterVector = np.ndarray

# chunk size for vectorized grid evaluation; bounds transient memory
_CHUNK = 65536


def parameter_vector(values: Sequence[float]) -> ParameterVector:
    """Validate and return a parameter vector as a float64 1-D array."""
    theta = np.asarray(values, dtype=np.float64).reshape(-1).copy()
    if theta.size == 0:
        raise ConfigurationError("parameter vector must be non-empty")
    if not np.all(np.isfinite(theta)):
        raise ConfigurationError("parameter vector entries must be finite")
    return theta


@dataclass(frozen=True)
class TaskObjective:
    """A differentiable scalar objective f(theta).

    ``batch`` is an optional array of dataset row indices; analytic
    families ignore it. ``scores`` (when the task is dataset-backed and
    binary-labelled) returns per-example model scores for metric
    computation, and ``labels`` the matching label column.
    """

    id: str
    kind: str
    dim: int
    n_examples: int | None = None
    labels: np.ndarray | None = None
    _value: Callable = field(repr=False, default=None)
    _grad: Callable = field(repr=False, default=None)
    _value_many: Callable | None = field(repr=False, default=None)
    _scores: Callable | None = field(repr=False, default=None)

    def evaluate(self, theta: ParameterVector, batch: np.ndarray | None = None) -> float:
        return float(self._value(theta, batch))

    def gradient(self, theta: ParameterVector, batch: np.ndarray | None = None) -> np.ndarray:
        return self._grad(theta, batch)

    def evaluate_many(self, thetas: np.ndarray) -> np.ndarray:
        """Full-batch loss at each row of ``thetas`` (shape (N, dim))."""
        thetas = np.atleast_2d(np.asarray(thetas, dtype=np.float64))
        if self._value_many is not None:
            out = np.empty(thetas.shape[0])
            for lo in range(0, thetas.shape[0], _CHUNK):
                block = thetas[lo:lo + _CHUNK]
                out[lo:lo + block.shape[0]] = self._value_many(block)
            return out
        return np.array([self._value(t, None) for t in thetas])

    def scores(self, theta: ParameterVector) -> np.ndarray:
        if self._scores is None:
            raise ConfigurationError(f"task {self.id!r} has no per-example scores")
        return self._scores(theta)


# ---------------------------------------------------------------------------
# synthetic data


@dataclass(frozen=True)
class Dataset:
    """Feature matrix plus named per-task label columns."""

    features: np.ndarray
    labels: dict[str, np.ndarray]
    seed: int

    def __post_init__(self):
        n = self.features.shape[0]
        for name, col in self.labels.items():
            if col.shape[0] != n:
                raise ConfigurationError(f"label column {name!r} has {col.shape[0]} rows, features have {n}")

    @property
    def n_examples(self) -> int:
        return self.features.shape[0]

    @property
    def n_features(self) -> int:
        return self.features.shape[1]

    def to_csv(self, path_or_buf) -> None:
        """Write header (feature names then label columns) and rows."""
        close = False
        if isinstance(path_or_buf, (str, bytes)) or hasattr(path_or_buf, "__fspath__"):
            buf = open(path_or_buf, "w", newline="")
            close = True
        else:
            buf = path_or_buf
        try:
            writer = csv.writer(buf)
            names = [f"x{j}" for j in range(self.n_features)] + list(self.labels)
            writer.writerow(names)
            cols = [self.features[:, j] for j in range(self.n_features)]
            cols += [self.labels[name] for name in self.labels]
            for i in range(self.n_examples):
                writer.writerow([repr(float(c[i])) for c in cols])
        finally:
            if close:
                buf.close()

    @classmethod
    def from_csv(cls, path_or_buf, n_features: int | None = None, seed: int = 0) -> "Dataset":
        """Read a dataset written by :meth:`to_csv`.

        Columns named ``x*`` are features unless ``n_features`` overrides
        the split point.
        """
        if isinstance(path_or_buf, (str, bytes)) or hasattr(path_or_buf, "__fspath__"):
            with open(path_or_buf, newline="") as fh:
                text = fh.read()
        else:
            text = path_or_buf.read()
        rows = list(csv.reader(io.StringIO(text)))
        header, body = rows[0], rows[1:]
        if n_features is None:
            n_features = sum(1 for name in header if name.startswith("x"))
        data = np.array([[float(v) for v in row] for row in body])
        features = data[:, :n_features]
        labels = {name: data[:, n_features + k] for k, name in enumerate(header[n_features:])}
        return cls(features=features, labels=labels, seed=seed)


@dataclass(frozen=True)
class GenerationConfig:
    """Knobs for the synthetic generator.

    ``task_correlations`` gives, for each label column after the first,
    the agreement knob c in [0, 1] against the first column: agreement
    rate is (1 + c) / 2, so c = 1 copies the column and c = 0 makes the
    columns independent coin-flips of each other.
    """

    seed: int
    n_examples: int
    n_features: int
    task_correlations: tuple[float, ...] = ()
    noise: float = 0.5

    def __post_init__(self):
        if self.n_examples < 2:
            raise ConfigurationError("n_examples must be >= 2")
        if self.n_features < 1:
            raise ConfigurationError("n_features must be >= 1")
        for c in self.task_correlations:
            if not 0.0 <= c <= 1.0:
                raise ConfigurationError("task correlations must lie in [0, 1]")
        if self.noise < 0:
            raise ConfigurationError("noise must be >= 0")

    @property
    def label_names(self) -> tuple[str, ...]:
        return tuple(f"task{k + 1}" for k in range(1 + len(self.task_correlations)))


def generate_synthetic(config: GenerationConfig) -> Dataset:
    """Draw a dataset from a latent linear score plus noise.

    The first label column thresholds the latent score; each further
    column copies it and flips entries with probability (1 - c) / 2.
    Deterministic for a given config.
    """
    rng = np.random.default_rng(config.seed)
    direction = rng.normal(size=config.n_features)
    direction /= np.linalg.norm(direction)
    features = rng.normal(size=(config.n_examples, config.n_features))
    score = features @ direction + config.noise * rng.normal(size=config.n_examples)
    base = (score > 0).astype(np.float64)
    labels = {"task1": base}
    for k, c in enumerate(config.task_correlations):
        flips = rng.random(config.n_examples) < (1.0 - c) / 2.0
        labels[f"task{k + 2}"] = np.where(flips, 1.0 - base, base)
    return Dataset(features=features, labels=labels, seed=config.seed)


# ---------------------------------------------------------------------------
# quadratic family


@dataclass(frozen=True)
class QuadraticSpec:
    center: tuple[float, ...]
    scale: tuple[float, ...]

    def __post_init__(self):
        if len(self.center) != len(self.scale):
            raise ConfigurationError("center and scale must have equal length")
        if any(s <= 0 for s in self.scale):
            raise ConfigurationError("scale entries must be > 0")


def make_quadratic(spec: QuadraticSpec, id: str = "quadratic") -> TaskObjective:
    """Axis-aligned quadratic bowl: zero exactly at ``spec.center``."""
    center = parameter_vector(spec.center)
    scale = parameter_vector(spec.scale)

    def value(theta, batch=None):
        return np.sum(scale * (theta - center) ** 2)

    def grad(theta, batch=None):
        return 2.0 * scale * (theta - center)

    def value_many(thetas):
        return np.sum(scale * (thetas - center) ** 2, axis=1)

    return TaskObjective(
        id=id, kind="quadratic", dim=center.size,
        _value=value, _grad=grad, _value_many=value_many,
    )


# ---------------------------------------------------------------------------
# logistic family


def _bce_with_logits(z: np.ndarray, y: np.ndarray) -> np.ndarray:
    # log(1 + e^z) - y*z, stable for large |z|
    return np.logaddexp(0.0, z) - y * z


def _sigmoid(z: np.ndarray) -> np.ndarray:
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


def make_logistic(dataset: Dataset, task_column: str, l2: float, id: str | None = None) -> TaskObjective:
    """Mean binary cross-entropy of logits x.w + b, plus l2*||w||^2.

    theta layout is (w_1..w_d, b); the ridge term excludes the bias.
    """
    if dataset.n_examples == 0:
        raise ConfigurationError("dataset is empty")
    if task_column not in dataset.labels:
        raise ConfigurationError(f"unknown task column {task_column!r}")
    if l2 < 0:
        raise ConfigurationError("l2 must be >= 0")
    x = dataset.features
    y = dataset.labels[task_column]
    if not np.all((y == 0) | (y == 1)):
        raise ConfigurationError(f"column {task_column!r} labels must be in {{0, 1}}")
    d = dataset.n_features

    def split(theta):
        return theta[:d], theta[d]

    def rows(batch):
        # shared batch indices may come from a larger task's row space
        idx = batch % x.shape[0]
        return x[idx], y[idx]

    def value(theta, batch=None):
        w, b = split(theta)
        xb, yb = (x, y) if batch is None else rows(batch)
        z = xb @ w + b
        return np.mean(_bce_with_logits(z, yb)) + l2 * np.dot(w, w)

    def grad(theta, batch=None):
        w, b = split(theta)
        xb, yb = (x, y) if batch is None else rows(batch)
        resid = _sigmoid(xb @ w + b) - yb
        g = np.empty(d + 1)
        g[:d] = xb.T @ resid / xb.shape[0] + 2.0 * l2 * w
        g[d] = np.mean(resid)
        return g

    def value_many(thetas):
        w, b = thetas[:, :d], thetas[:, d]
        z = x @ w.T + b  # (n, N)
        return np.mean(_bce_with_logits(z, y[:, None]), axis=0) + l2 * np.sum(w * w, axis=1)

    def scores(theta):
        w, b = split(theta)
        return x @ w + b

    return TaskObjective(
        id=id or f"logistic:{task_column}", kind="logistic", dim=d + 1,
        n_examples=dataset.n_examples, labels=y.copy(),
        _value=value, _grad=grad, _value_many=value_many, _scores=scores,
    )


# ---------------------------------------------------------------------------
# pairwise ranking family


@dataclass(frozen=True)
class PairSpec:
    """Rule for forming (positive, negative) example pairs.

    All cross pairs of the binary ``label_column`` are used unless
    ``max_pairs`` caps them, in which case a seeded subsample is drawn.
    """

    label_column: str
    max_pairs: int | None = None
    seed: int = 0


def make_pairwise_ranking(dataset: Dataset, pair_spec: PairSpec, id: str | None = None) -> TaskObjective:
    """Mean -log sigmoid(z_pos - z_neg) of a linear scorer z = x.w + b.

    Score differences cancel the bias, so its gradient entry is exactly
    zero; the bias stays in theta so ranking tasks share the logistic
    family's parameter layout.
    """
    if pair_spec.label_column not in dataset.labels:
        raise ConfigurationError(f"unknown task column {pair_spec.label_column!r}")
    y = dataset.labels[pair_spec.label_column]
    if not np.all((y == 0) | (y == 1)):
        raise ConfigurationError(f"column {pair_spec.label_column!r} labels must be in {{0, 1}}")
    pos = np.flatnonzero(y == 1)
    neg = np.flatnonzero(y == 0)
    if pos.size == 0 or neg.size == 0:
        raise ConfigurationError("pairing rule yields zero (positive, negative) pairs")
    pi, ni = np.meshgrid(pos, neg, indexing="ij")
    pi, ni = pi.ravel(), ni.ravel()
    if pair_spec.max_pairs is not None and pi.size > pair_spec.max_pairs:
        keep = np.random.default_rng(pair_spec.seed).choice(pi.size, pair_spec.max_pairs, replace=False)
        keep.sort()
        pi, ni = pi[keep], ni[keep]
    # only the feature difference enters the loss
    dx = dataset.features[pi] - dataset.features[ni]
    d = dataset.n_features

    def value(theta, batch=None):
        dxb = dx if batch is None else dx[batch % dx.shape[0]]
        t = dxb @ theta[:d]
        return np.mean(np.logaddexp(0.0, -t))

    def grad(theta, batch=None):
        dxb = dx if batch is None else dx[batch % dx.shape[0]]
        t = dxb @ theta[:d]
        g = np.zeros(d + 1)
        g[:d] = dxb.T @ (_sigmoid(t) - 1.0) / dxb.shape[0]
        return g

    def value_many(thetas):
        t = dx @ thetas[:, :d].T  # (pairs, N)
        return np.mean(np.logaddexp(0.0, -t), axis=0)

    def scores(theta):
        return dataset.features @ theta[:d] + theta[d]

    return TaskObjective(
        id=id or f"ranking:{pair_spec.label_column}", kind="pairwise-ranking", dim=d + 1,
        n_examples=dx.shape[0], labels=y.copy(),
        _value=value, _grad=grad, _value_many=value_many, _scores=scores,
    )


# ---------------------------------------------------------------------------
# shared-trunk multi-head family


def trunk_dim(n_features: int, trunk_width: int, n_heads: int, bias: bool = True) -> int:
    base = n_features * trunk_width + (trunk_width if bias else 0)
    return base + n_heads * (trunk_width + (1 if bias else 0))


def make_shared_trunk_model(
    dataset: Dataset,
    trunk_width: int,
    heads: Sequence[str],
    bias: bool = True,
) -> list[TaskObjective]:
    """One binary cross-entropy objective per head over a shared trunk.

    The trunk is a single tanh layer; each head owns a private linear
    readout. theta layout: [W1 (d*H), b1 (H)?, then per head: w2 (H), b2?].
    Gradients are hand-written backpropagation; a head's loss has exactly
    zero gradient on other heads' private slices.
    """
    if trunk_width < 1:
        raise ConfigurationError("trunk_width must be >= 1")
    for name in heads:
        if name not in dataset.labels:
            raise ConfigurationError(f"unknown task column {name!r}")
    x = dataset.features
    d, h, n_heads = dataset.n_features, trunk_width, len(heads)
    head_size = h + (1 if bias else 0)
    trunk_size = d * h + (h if bias else 0)
    dim = trunk_size + n_heads * head_size

    def unpack(theta, k):
        w1 = theta[: d * h].reshape(d, h)
        b1 = theta[d * h: d * h + h] if bias else 0.0
        off = trunk_size + k * head_size
        w2 = theta[off: off + h]
        b2 = theta[off + h] if bias else 0.0
        return w1, b1, w2, b2, off

    def make_head(k: int, name: str) -> TaskObjective:
        y = dataset.labels[name]
        if not np.all((y == 0) | (y == 1)):
            raise ConfigurationError(f"column {name!r} labels must be in {{0, 1}}")

        def forward(theta, xb):
            w1, b1, w2, b2, _ = unpack(theta, k)
            hidden = np.tanh(xb @ w1 + b1)
            return hidden, hidden @ w2 + b2

        def rows(batch):
            idx = batch % x.shape[0]
            return x[idx], y[idx]

        def value(theta, batch=None):
            xb, yb = (x, y) if batch is None else rows(batch)
            _, z = forward(theta, xb)
            return np.mean(_bce_with_logits(z, yb))

        def grad(theta, batch=None):
            xb, yb = (x, y) if batch is None else rows(batch)
            w1, b1, w2, b2, off = unpack(theta, k)
            hidden = np.tanh(xb @ w1 + b1)
            dz = (_sigmoid(hidden @ w2 + b2) - yb) / xb.shape[0]  # (n,)
            g = np.zeros(dim)
            g[off: off + h] = hidden.T @ dz
            if bias:
                g[off + h] = np.sum(dz)
            dhidden = np.outer(dz, w2) * (1.0 - hidden ** 2)  # (n, h)
            g[: d * h] = (xb.T @ dhidden).reshape(-1)
            if bias:
                g[d * h: d * h + h] = np.sum(dhidden, axis=0)
            return g

        def value_many(thetas):
            w1 = thetas[:, : d * h].reshape(-1, d, h)
            b1 = thetas[:, d * h: d * h + h] if bias else 0.0
            off = trunk_size + k * head_size
            w2 = thetas[:, off: off + h]
            b2 = thetas[:, off + h] if bias else 0.0
            pre = np.einsum("nd,tdh->tnh", x, w1)
            if bias:
                pre = pre + b1[:, None, :]
            z = np.einsum("tnh,th->tn", np.tanh(pre), w2)
            if bias:
                z = z + np.asarray(b2)[:, None]
            return np.mean(_bce_with_logits(z, y[None, :]), axis=1)

        def scores(theta):
            _, z = forward(theta, x)
            return z

        return TaskObjective(
            id=f"trunk-head:{name}", kind="shared-trunk-head", dim=dim,
            n_examples=dataset.n_examples, labels=y.copy(),
            _value=value, _grad=grad, _value_many=value_many, _scores=scores,
        )

    return [make_head(k, name) for k, name in enumerate(heads)]
