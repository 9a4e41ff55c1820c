"""Baseline-characteristics table: medians (IQR) and counts (%) by diagnosis group."""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass, field

import numpy as np
from scipy import stats

from .cohort import Cohort, Label

GROUPS = (Label.HC, Label.MDD)
MISSING_ROW = "Missing Value"


@dataclass(frozen=True)
class NumericSummary:
    n: int
    median: float
    q1: float
    q3: float

    def __str__(self) -> str:
        return f"{_fmt(self.median)} ({_fmt(self.q1)} - {_fmt(self.q3)})"


@dataclass(frozen=True)
class BaselineRow:
    feature: str
    kind: str
    p_value: float
    degenerate: bool = False
    statistic: float | None = None
    numeric: dict = field(default_factory=dict)      # group -> NumericSummary
    counts: dict = field(default_factory=dict)       # category -> {group: count}
    percents: dict = field(default_factory=dict)     # category -> {group: percent}


@dataclass(frozen=True)
class BaselineTable:
    group_sizes: dict
    rows: tuple[BaselineRow, ...]

    def row(self, feature: str) -> BaselineRow:
        return next(r for r in self.rows if r.feature == feature)

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["Characteristics",
                    *(f"{g.value} (n = {self.group_sizes[g]:,})" for g in GROUPS), "P value"])
        for row in self.rows:
            if row.kind == "numeric":
                w.writerow([row.feature, *(str(row.numeric[g]) if g in row.numeric else "" for g in GROUPS),
                            format_p(row.p_value)])
                continue
            w.writerow([f"{row.feature} (%)", "", "", format_p(row.p_value)])
            for cat, by_group in row.counts.items():
                w.writerow([cat, *(f"{by_group[g]:,} ({row.percents[cat][g]:.2f})" for g in GROUPS), ""])
        return buf.getvalue()


def _fmt(x: float) -> str:
    return f"{x:.2f}".rstrip("0").rstrip(".")


def format_p(p: float) -> str:
    return "< 0.001" if p < 0.001 else f"{p:.3f}"


def quantiles(values) -> tuple[float, float, float]:
    """Median and quartiles with linear interpolation between order statistics."""
    q1, med, q3 = np.quantile(np.asarray(values, dtype=np.float64), [0.25, 0.5, 0.75], method="linear")
    return float(med), float(q1), float(q3)


def rank_sum_test(x, y) -> tuple[float, float]:
    """Two-sided Wilcoxon rank-sum test, normal approximation with continuity and tie correction."""
    res = stats.mannwhitneyu(x, y, alternative="two-sided", method="asymptotic", use_continuity=True)
    return float(res.statistic), float(res.pvalue)


def chi_square_test(table) -> tuple[float, int, float]:
    """Pearson chi-square of independence (no continuity correction)."""
    res = stats.chi2_contingency(np.asarray(table, dtype=np.float64), correction=False)
    return float(res.statistic), int(res.dof), float(res.pvalue)


def baseline_table(cohort: Cohort) -> BaselineTable:
    groups = {g: [r for r in cohort.records if r.label is g] for g in GROUPS}
    for g, members in groups.items():
        if not members:
            raise ValueError(f"baseline table needs at least one {g.value} record")
    rows = []
    for feat in cohort.schema:
        present = {g: [r.values[feat.name] for r in groups[g] if feat.name in r.values] for g in GROUPS}
        if feat.is_numeric:
            summaries = {g: NumericSummary(len(v), *quantiles(v)) for g, v in present.items() if v}
            pooled = present[Label.HC] + present[Label.MDD]
            if len(set(pooled)) <= 1 or not all(present.values()):
                rows.append(BaselineRow(feat.name, "numeric", 1.0, True, None, summaries))
                continue
            u, p = rank_sum_test(present[Label.HC], present[Label.MDD])
            rows.append(BaselineRow(feat.name, "numeric", p, False, u, summaries))
            continue

        counts = {c: {g: present[g].count(c) for g in GROUPS} for c in feat.categories}
        n_missing = {g: len(groups[g]) - len(present[g]) for g in GROUPS}
        if any(n_missing.values()):
            counts[MISSING_ROW] = n_missing
        percents = {c: {g: 100.0 * n / len(groups[g]) for g, n in by_g.items()} for c, by_g in counts.items()}
        observed = np.array([[counts[c][g] for c in feat.categories] for g in GROUPS])
        observed = observed[:, observed.sum(axis=0) > 0]
        if observed.shape[1] < 2 or (observed.sum(axis=1) == 0).any():
            rows.append(BaselineRow(feat.name, feat.kind, 1.0, True, None, {}, counts, percents))
            continue
        chi2, _, p = chi_square_test(observed)
        rows.append(BaselineRow(feat.name, feat.kind, p, False, chi2, {}, counts, percents))
    return BaselineTable({g: len(groups[g]) for g in GROUPS}, tuple(rows))
