"""Binary-classification metrics: confusion summaries, ROC/AUC, bootstrap CIs, CV aggregation."""

from __future__ import annotations

import csv
import io
import json
import math
from dataclasses import asdict, dataclass, field
from typing import Callable, Sequence

import numpy as np

METRIC_KEYS = ("acc", "f1", "auc", "spe", "sens", "ppv", "npv")
METRIC_HEADERS = {"acc": "ACC", "f1": "F1", "auc": "AUC", "spe": "SPE",
                  "sens": "SENS", "ppv": "PPV", "npv": "NPV"}


class MetricError(ValueError):
    pass


def _arrays(scores, labels) -> tuple[np.ndarray, np.ndarray]:
    s = np.asarray(scores, dtype=np.float64).reshape(-1)
    y = np.asarray(labels).reshape(-1)
    if s.size != y.size:
        raise MetricError(f"{s.size} scores but {y.size} labels")
    if s.size == 0:
        raise MetricError("empty scored set")
    if not np.isin(y, (0, 1)).all():
        raise MetricError("labels must be 0 or 1")
    return s, y.astype(np.int64)


@dataclass(frozen=True)
class ScoredSet:
    scores: np.ndarray
    labels: np.ndarray
    patient_ids: tuple[str, ...] = ()

    def __post_init__(self):
        s, y = _arrays(self.scores, self.labels)
        object.__setattr__(self, "scores", s)
        object.__setattr__(self, "labels", y)
        if self.patient_ids and len(self.patient_ids) != s.size:
            raise MetricError("patient_ids length differs from scores")

    def __len__(self) -> int:
        return self.scores.size

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["patient_id", "score", "label"])
        ids = self.patient_ids or tuple(str(i) for i in range(len(self)))
        for pid, s, y in zip(ids, self.scores, self.labels):
            w.writerow([pid, repr(float(s)), int(y)])
        return buf.getvalue()

    @classmethod
    def from_csv(cls, text: str) -> "ScoredSet":
        rows = list(csv.DictReader(io.StringIO(text)))
        return cls(np.array([float(r["score"]) for r in rows]),
                   np.array([int(r["label"]) for r in rows]),
                   tuple(r.get("patient_id", str(i)) for i, r in enumerate(rows)))


# ------------------------------------------------------------- confusion

@dataclass(frozen=True)
class ConfusionCounts:
    tp: int
    fp: int
    tn: int
    fn: int

    @property
    def n(self) -> int:
        return self.tp + self.fp + self.tn + self.fn


def confusion(scores, labels, threshold: float = 0.5) -> ConfusionCounts:
    """Scores ``>= threshold`` count as predicted positive."""
    s, y = _arrays(scores, labels)
    pred = s >= threshold
    return ConfusionCounts(
        tp=int(np.sum(pred & (y == 1))),
        fp=int(np.sum(pred & (y == 0))),
        tn=int(np.sum(~pred & (y == 0))),
        fn=int(np.sum(~pred & (y == 1))),
    )


@dataclass(frozen=True)
class Summary:
    acc: float
    f1: float
    spe: float
    sens: float
    ppv: float
    npv: float
    degenerate: tuple[str, ...] = ()


def _ratio(num: int, den: int, name: str, flags: list[str]) -> float:
    if den == 0:
        flags.append(name)
        return 0.0
    return num / den


def summarize(counts: ConfusionCounts) -> Summary:
    """Threshold metrics; a zero denominator yields 0 and names the metric in ``degenerate``."""
    flags: list[str] = []
    acc = _ratio(counts.tp + counts.tn, counts.n, "acc", flags)
    sens = _ratio(counts.tp, counts.tp + counts.fn, "sens", flags)
    spe = _ratio(counts.tn, counts.tn + counts.fp, "spe", flags)
    ppv = _ratio(counts.tp, counts.tp + counts.fp, "ppv", flags)
    npv = _ratio(counts.tn, counts.tn + counts.fn, "npv", flags)
    if ppv + sens == 0:
        flags.append("f1")
        f1 = 0.0
    else:
        f1 = 2 * ppv * sens / (ppv + sens)
    return Summary(acc, f1, spe, sens, ppv, npv, tuple(flags))


# ------------------------------------------------------------------- ROC

@dataclass(frozen=True)
class RocCurve:
    fpr: np.ndarray
    tpr: np.ndarray
    thresholds: np.ndarray

    def to_csv(self) -> str:
        lines = ["fpr,tpr"] + [f"{f!r},{t!r}" for f, t in zip(self.fpr.tolist(), self.tpr.tolist())]
        return "\n".join(lines) + "\n"


def _check_both_classes(y: np.ndarray) -> tuple[int, int]:
    n_pos = int(y.sum())
    n_neg = int(y.size - n_pos)
    if n_pos == 0 or n_neg == 0:
        raise MetricError("AUC needs at least one positive and one negative")
    return n_pos, n_neg


def roc_auc(scores, labels) -> tuple[RocCurve, float]:
    """ROC over distinct score thresholds and its trapezoidal area.

    Equal scores form one sweep step, so the area equals the Mann-Whitney
    statistic with half credit for ties.
    """
    s, y = _arrays(scores, labels)
    n_pos, n_neg = _check_both_classes(y)
    order = np.argsort(-s, kind="mergesort")
    s, y = s[order], y[order]
    last_of_group = np.r_[np.nonzero(np.diff(s))[0], s.size - 1]
    tps = np.cumsum(y)[last_of_group]
    fps = (last_of_group + 1) - tps
    tpr = np.r_[0.0, tps / n_pos]
    fpr = np.r_[0.0, fps / n_neg]
    thresholds = np.r_[np.inf, s[last_of_group]]
    auc = float(np.sum((fpr[1:] - fpr[:-1]) * (tpr[1:] + tpr[:-1]) / 2.0))
    return RocCurve(fpr, tpr, thresholds), auc


def auc(scores, labels) -> float:
    return roc_auc(scores, labels)[1]


def auc_oracle(scores, labels) -> float:
    """Mean over all (positive, negative) pairs of [s+ > s-] + 0.5 [s+ == s-]."""
    s, y = _arrays(scores, labels)
    _check_both_classes(y)
    pos, neg = s[y == 1][:, None], s[y == 0][None, :]
    return float(((pos > neg).sum() + 0.5 * (pos == neg).sum()) / (pos.size * neg.size))


def youden_threshold(scores, labels) -> float:
    """Threshold maximizing sensitivity + specificity - 1."""
    curve, _ = roc_auc(scores, labels)
    j = curve.tpr - curve.fpr
    best = int(np.argmax(j[1:])) + 1
    return float(curve.thresholds[best])


# ------------------------------------------------------------- bootstrap

@dataclass(frozen=True)
class BootstrapCI:
    lo: float
    hi: float
    level: float
    n_resamples: int
    redrawn: int = 0


def bootstrap_ci(scores, labels, statistic: Callable[[np.ndarray, np.ndarray], float] = auc,
                 n_resamples: int = 1000, level: float = 0.95, seed: int = 0,
                 max_redraws: int = 100) -> BootstrapCI:
    """Label-stratified percentile bootstrap.

    Resample ``r`` draws from ``np.random.default_rng([seed, r])``.  A
    resample on which the statistic is undefined is redrawn (up to
    ``max_redraws`` times); the number of redraws is reported.
    """
    s, y = _arrays(scores, labels)
    if not 0 < level < 1:
        raise MetricError("level must lie in (0, 1)")
    strata = [np.flatnonzero(y == c) for c in (0, 1) if np.any(y == c)]
    values = np.empty(n_resamples)
    redrawn = 0
    for r in range(n_resamples):
        rng = np.random.default_rng([seed, r])
        for attempt in range(max_redraws + 1):
            idx = np.concatenate([st[rng.integers(0, st.size, st.size)] for st in strata])
            try:
                v = float(statistic(s[idx], y[idx]))
            except MetricError:
                v = math.nan
            if math.isfinite(v):
                break
            redrawn += 1
        else:
            raise MetricError(f"statistic undefined after {max_redraws} redraws of resample {r}")
        values[r] = v
    alpha = (1.0 - level) / 2.0
    lo, hi = np.quantile(values, [alpha, 1.0 - alpha], method="linear")
    return BootstrapCI(float(lo), float(hi), level, n_resamples, redrawn)


# ---------------------------------------------------------------- reports

@dataclass(frozen=True)
class MetricReport:
    acc: float
    f1: float
    auc: float
    spe: float
    sens: float
    ppv: float
    npv: float
    auc_ci: tuple[float, float, float]
    threshold: float
    n: int
    n_pos: int
    degenerate: tuple[str, ...] = ()

    def values(self) -> dict[str, float]:
        return {k: getattr(self, k) for k in METRIC_KEYS}

    def to_dict(self) -> dict:
        d = asdict(self)
        d["auc_ci"] = list(self.auc_ci)
        d["degenerate"] = list(self.degenerate)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "MetricReport":
        d = dict(d)
        d["auc_ci"] = tuple(d["auc_ci"])
        d["degenerate"] = tuple(d.get("degenerate", ()))
        return cls(**d)

    def to_text(self) -> str:
        lines = [f"{METRIC_HEADERS[k]:<5}{v:.4f}" for k, v in self.values().items()]
        lo, hi, level = self.auc_ci
        lines.insert(3, f"AUC {int(round(level * 100))}% CI: {lo:.4f} - {hi:.4f}")
        lines += [f"threshold {self.threshold:.4f}", f"n {self.n} (positives {self.n_pos})"]
        return "\n".join(lines) + "\n"


def evaluate(scores, labels, threshold: float = 0.5, n_resamples: int = 1000,
             level: float = 0.95, seed: int = 0) -> MetricReport:
    s, y = _arrays(scores, labels)
    summary = summarize(confusion(s, y, threshold))
    _, point = roc_auc(s, y)
    ci = bootstrap_ci(s, y, auc, n_resamples, level, seed)
    return MetricReport(summary.acc, summary.f1, point, summary.spe, summary.sens, summary.ppv,
                        summary.npv, (ci.lo, ci.hi, level), float(threshold), int(s.size),
                        int(y.sum()), summary.degenerate)


@dataclass(frozen=True)
class CrossvalSummary:
    mean: dict[str, float]
    sd: dict[str, float | None]
    folds: tuple[MetricReport, ...] = field(default=())

    def to_dict(self) -> dict:
        return {"mean": self.mean, "sd": self.sd, "folds": [f.to_dict() for f in self.folds]}


def crossval_aggregate(reports: Sequence[MetricReport]) -> CrossvalSummary:
    """Per-metric mean and sample standard deviation across folds (sd is None for one fold)."""
    if not reports:
        raise MetricError("no fold reports")
    mean, sd = {}, {}
    for k in METRIC_KEYS:
        v = np.array([getattr(r, k) for r in reports], dtype=np.float64)
        mean[k] = float(v.mean())
        sd[k] = float(v.std(ddof=1)) if v.size > 1 else None
    return CrossvalSummary(mean, sd, tuple(reports))


def format_table(rows: Sequence[tuple[str, MetricReport]], extra: dict[str, dict[str, str]] | None = None) -> str:
    """Aligned text table in the layout of a method-comparison table."""
    extra = extra or {}
    extra_cols = sorted({c for d in extra.values() for c in d})
    header = ["Method", *(METRIC_HEADERS[k] for k in METRIC_KEYS), "AUC 95% CI", *extra_cols]
    body = []
    for name, rep in rows:
        lo, hi, _ = rep.auc_ci
        body.append([name, *(f"{v:.4f}" for v in rep.values().values()), f"{lo:.4f} - {hi:.4f}",
                     *(extra.get(name, {}).get(c, "") for c in extra_cols)])
    widths = [max(len(r[i]) for r in [header, *body]) for i in range(len(header))]
    fmt = lambda r: "  ".join(c.ljust(w) if i == 0 else c.rjust(w) for i, (c, w) in enumerate(zip(r, widths)))
    return "\n".join([fmt(header), "  ".join("-" * w for w in widths), *map(fmt, body)]) + "\n"


def report_json(report: MetricReport) -> str:
    return json.dumps(report.to_dict(), indent=2, sort_keys=True)
