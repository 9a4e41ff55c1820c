"""Tabular baselines: a featurizer, logistic regression and a small MLP."""

from __future__ import annotations

import csv
import io
import math
from dataclasses import asdict, dataclass, field
from typing import Iterable, Sequence

import numpy as np

from .cohort import Cohort, Label, Record
from .schema import Schema

MISSING_SUFFIX = "__missing"


class BaselineError(ValueError):
    pass


class NotFittedError(BaselineError):
    pass


@dataclass
class Featurizer:
    """Standardized numerics, one-hot categoricals, one missing indicator per feature.

    Statistics come from the records passed to ``fit`` only.  A missing
    numeric becomes 0 in its standardized slot; a missing categorical leaves
    its one-hot block all zero.  Either way the indicator is 1.
    """

    schema: Schema
    stats: dict[str, tuple[float, float]] = field(default_factory=dict)
    columns: tuple[str, ...] = ()

    @property
    def fitted(self) -> bool:
        return bool(self.columns)

    def fit(self, records: Sequence[Record]) -> "Featurizer":
        if not records:
            raise BaselineError("cannot fit a featurizer on zero records")
        stats, cols = {}, []
        for feat in self.schema:
            if feat.is_numeric:
                vals = np.array([float(r.values[feat.name]) for r in records if feat.name in r.values])
                mean = float(vals.mean()) if vals.size else 0.0
                sd = float(vals.std()) if vals.size else 0.0
                stats[feat.name] = (mean, sd if sd > 0 else 1.0)
                cols.append(feat.name)
            else:
                cols.extend(f"{feat.name}={c}" for c in feat.categories)
            cols.append(feat.name + MISSING_SUFFIX)
        self.stats, self.columns = stats, tuple(cols)
        return self

    @property
    def dim(self) -> int:
        return len(self.columns)

    def apply(self, record: Record) -> np.ndarray:
        if not self.fitted:
            raise NotFittedError("featurizer must be fit before apply")
        out = []
        for feat in self.schema:
            present = feat.name in record.values
            if feat.is_numeric:
                mean, sd = self.stats[feat.name]
                out.append((float(record.values[feat.name]) - mean) / sd if present else 0.0)
            else:
                value = record.values.get(feat.name)
                out.extend(1.0 if value == c else 0.0 for c in feat.categories)
            out.append(0.0 if present else 1.0)
        return np.array(out, dtype=np.float64)

    def transform(self, records: Iterable[Record]) -> np.ndarray:
        rows = [self.apply(r) for r in records]
        return np.vstack(rows) if rows else np.zeros((0, self.dim))


def fit_featurizer(cohort: Cohort, train_ids: Iterable[str]) -> Featurizer:
    return Featurizer(cohort.schema).fit(cohort.subset(train_ids))


def labels_of(records: Sequence[Record]) -> np.ndarray:
    if any(r.label is None for r in records):
        raise BaselineError("unlabeled record in training data")
    return np.array([1.0 if r.label is Label.MDD else 0.0 for r in records])


def feature_matrix_csv(featurizer: Featurizer, records: Sequence[Record], include_ids: bool = False) -> str:
    """Numeric matrix with a column-name header and a trailing ``label`` column (blank if unlabeled)."""
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow((["patient_id"] if include_ids else []) + list(featurizer.columns) + ["label"])
    for r in records:
        label = "" if r.label is None else ("1" if r.label is Label.MDD else "0")
        w.writerow(([r.patient_id] if include_ids else []) + [repr(float(v)) for v in featurizer.apply(r)] + [label])
    return buf.getvalue()


def _sigmoid(z: np.ndarray) -> np.ndarray:
    out = np.empty_like(z, dtype=np.float64)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


# ---------------------------------------------------------- logistic regression

@dataclass(frozen=True)
class LogregConfig:
    l2: float = 1e-3
    max_iter: int = 5000
    tol: float = 1e-6

    def __post_init__(self):
        if self.l2 < 0:
            raise BaselineError(f"l2 must be non-negative, got {self.l2}")


@dataclass(frozen=True)
class LinearModel:
    weights: np.ndarray
    bias: float
    config: LogregConfig
    iterations: int
    converged: bool

    def predict_proba(self, x: np.ndarray) -> np.ndarray:
        return _sigmoid(np.asarray(x, dtype=np.float64) @ self.weights + self.bias)


def logreg_objective(w: np.ndarray, b: float, x: np.ndarray, y: np.ndarray, l2: float):
    """Mean log-loss plus ``l2/2 * |w|^2`` (bias unpenalized) and its gradient."""
    z = x @ w + b
    loss = float(np.mean(np.logaddexp(0.0, z) - y * z) + 0.5 * l2 * w @ w)
    r = (_sigmoid(z) - y) / y.size
    return loss, x.T @ r + l2 * w, float(r.sum())


def train_logreg(x: np.ndarray, y: np.ndarray, l2: float = 1e-3, seed: int = 0,
                 config: LogregConfig | None = None) -> LinearModel:
    """Full-batch Nesterov-accelerated gradient descent from zero.

    Step size ``1/L`` with ``L = sigma_max([X 1])^2 / (4 n) + l2``.  Stops
    when the gradient norm drops below ``tol`` or after ``max_iter`` steps.
    The seed is accepted for interface symmetry; the procedure is
    deterministic without it.
    """
    config = config or LogregConfig(l2=l2)
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if x.ndim != 2 or x.shape[0] != y.size or y.size == 0:
        raise BaselineError(f"bad shapes: x {x.shape}, y {y.shape}")
    n, d = x.shape
    xb = np.hstack([x, np.ones((n, 1))])
    lipschitz = np.linalg.norm(xb, 2) ** 2 / (4 * n) + config.l2
    step = 1.0 / lipschitz
    theta = np.zeros(d + 1)
    prev = theta.copy()
    t = 1.0
    converged, it = False, 0
    for it in range(1, config.max_iter + 1):
        t_next = (1 + math.sqrt(1 + 4 * t * t)) / 2
        look = theta + ((t - 1) / t_next) * (theta - prev)
        _, gw, gb = logreg_objective(look[:d], look[d], x, y, config.l2)
        prev, theta, t = theta, look - step * np.r_[gw, gb], t_next
        _, gw, gb = logreg_objective(theta[:d], theta[d], x, y, config.l2)
        if math.sqrt(gw @ gw + gb * gb) < config.tol:
            converged = True
            break
    return LinearModel(theta[:d].copy(), float(theta[d]), config, it, converged)


# --------------------------------------------------------------------- MLP

@dataclass(frozen=True)
class MlpConfig:
    hidden: tuple[int, ...] = (64, 64)
    lr: float = 1e-3
    epochs: int = 30
    batch_size: int = 64
    weight_decay: float = 1e-4
    betas: tuple[float, float] = (0.9, 0.95)
    eps: float = 1e-8

    def __post_init__(self):
        if len(self.hidden) == 0:
            raise BaselineError("an MLP needs at least one hidden layer; use train_logreg instead")
        if any(h <= 0 for h in self.hidden):
            raise BaselineError("hidden layer sizes must be positive")

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass(frozen=True)
class MlpModel:
    """ReLU hidden layers, sigmoid output."""

    weights: tuple[np.ndarray, ...]
    biases: tuple[np.ndarray, ...]
    config: MlpConfig
    seed: int
    losses: tuple[float, ...] = ()

    def logits(self, x: np.ndarray) -> np.ndarray:
        h = np.asarray(x, dtype=np.float64)
        for w, b in zip(self.weights[:-1], self.biases[:-1]):
            h = np.maximum(h @ w + b, 0.0)
        return (h @ self.weights[-1] + self.biases[-1])[:, 0]

    def predict_proba(self, x: np.ndarray) -> np.ndarray:
        return _sigmoid(self.logits(x))


def _mlp_grads(ws, bs, x, y):
    acts = [x]
    for w, b in zip(ws[:-1], bs[:-1]):
        acts.append(np.maximum(acts[-1] @ w + b, 0.0))
    z = (acts[-1] @ ws[-1] + bs[-1])[:, 0]
    loss = float(np.mean(np.logaddexp(0.0, z) - y * z))
    delta = ((_sigmoid(z) - y) / y.size)[:, None]
    gws, gbs = [None] * len(ws), [None] * len(ws)
    for i in range(len(ws) - 1, -1, -1):
        gws[i] = acts[i].T @ delta
        gbs[i] = delta.sum(axis=0)
        if i:
            delta = (delta @ ws[i].T) * (acts[i] > 0)
    return loss, gws, gbs


def train_mlp(x: np.ndarray, y: np.ndarray, config: MlpConfig | None = None, seed: int = 0) -> MlpModel:
    """Mini-batch AdamW on binary cross-entropy; He-initialized weights, zero biases."""
    config = config or MlpConfig()
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if x.ndim != 2 or x.shape[0] != y.size or y.size == 0:
        raise BaselineError(f"bad shapes: x {x.shape}, y {y.shape}")
    rng = np.random.default_rng(seed)
    sizes = [x.shape[1], *config.hidden, 1]
    ws = [rng.normal(0.0, math.sqrt(2.0 / a), (a, b)) for a, b in zip(sizes[:-1], sizes[1:])]
    bs = [np.zeros(b) for b in sizes[1:]]
    params = ws + bs
    m = [np.zeros_like(p) for p in params]
    v = [np.zeros_like(p) for p in params]
    b1, b2 = config.betas
    step, losses = 0, []
    for epoch in range(config.epochs):
        order = np.random.default_rng([seed, epoch]).permutation(y.size)
        total = 0.0
        for start in range(0, y.size, config.batch_size):
            idx = order[start:start + config.batch_size]
            loss, gws, gbs = _mlp_grads(ws, bs, x[idx], y[idx])
            if not math.isfinite(loss):
                raise BaselineError(f"non-finite MLP loss at epoch {epoch}, step {step}")
            total += loss * idx.size
            step += 1
            for i, (p, g) in enumerate(zip(params, gws + gbs)):
                m[i] = b1 * m[i] + (1 - b1) * g
                v[i] = b2 * v[i] + (1 - b2) * g * g
                mhat = m[i] / (1 - b1 ** step)
                vhat = v[i] / (1 - b2 ** step)
                decay = config.weight_decay if i < len(ws) else 0.0
                p -= config.lr * (mhat / (np.sqrt(vhat) + config.eps) + decay * p)
        losses.append(total / y.size)
    return MlpModel(tuple(w.copy() for w in ws), tuple(b.copy() for b in bs), config, seed, tuple(losses))
