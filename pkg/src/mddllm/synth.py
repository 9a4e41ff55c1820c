"""Synthetic cohorts with a planted logistic risk model.

Each feature gets an independent marginal.  The label is drawn as
``Bernoulli(sigmoid(b + sum_j beta_j * x_j))`` where ``x_j`` is the
standardized value of a numeric feature or the indicator of a category;
missing features contribute nothing.  The true risk is kept as the Bayes
oracle score of every record.
"""

from __future__ import annotations

import hashlib
import json
import math
from dataclasses import asdict, dataclass, field, replace
from typing import Mapping

import numpy as np
from scipy.optimize import brentq

from .cohort import Cohort, Label, Record
from .metrics import auc
from .schema import Schema, default_schema


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class NumericMarginal:
    """Normal (or log-normal when ``log``) draw, clipped and rounded.

    ``coef`` is the log-odds change per ``sd`` away from ``mean`` (on the
    log scale when ``log``, where ``mean`` is then the median).  ``step``
    rounds draws to a grid before ``decimals`` formatting.
    """

    mean: float
    sd: float
    lo: float
    hi: float
    decimals: int = 0
    coef: float = 0.0
    missing: float = 0.0
    log: bool = False
    step: float | None = None

    def standardize(self, value: float) -> float:
        if self.log:
            return (math.log(value) - math.log(self.mean)) / self.sd
        return (value - self.mean) / self.sd


@dataclass(frozen=True)
class CategoricalMarginal:
    probs: Mapping[str, float]
    coefs: Mapping[str, float] = field(default_factory=dict)
    missing: float = 0.0


@dataclass(frozen=True)
class GeneratorConfig:
    name: str
    n: int
    marginals: Mapping[str, NumericMarginal | CategoricalMarginal]
    prevalence: float | None = 0.0464
    intercept: float | None = None

    def __post_init__(self):
        if self.n <= 0:
            raise ConfigError("n must be positive")
        if self.prevalence is None and self.intercept is None:
            raise ConfigError("give a target prevalence or an explicit intercept")
        if self.prevalence is not None and not 0 < self.prevalence < 1:
            raise ConfigError("prevalence must lie in (0, 1)")
        for name, m in self.marginals.items():
            coefs = [m.coef] if isinstance(m, NumericMarginal) else list(m.coefs.values())
            if not all(math.isfinite(c) for c in coefs):
                raise ConfigError(f"{name}: non-finite coefficient")
            if isinstance(m, CategoricalMarginal):
                if abs(sum(m.probs.values()) - 1.0) > 1e-9:
                    raise ConfigError(f"{name}: category probabilities must sum to 1")
                if set(m.coefs) - set(m.probs):
                    raise ConfigError(f"{name}: coefficient for an undeclared category")
        if self.intercept is not None and not math.isfinite(self.intercept):
            raise ConfigError("non-finite intercept")

    def with_n(self, n: int) -> "GeneratorConfig":
        return replace(self, n=n)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["marginals"] = {
            k: {"type": type(m).__name__, **asdict(m)} for k, m in self.marginals.items()
        }
        return d

    def content_hash(self) -> str:
        return hashlib.sha256(json.dumps(self.to_dict(), sort_keys=True).encode()).hexdigest()


def sigmoid(z: float) -> float:
    if z >= 0:
        return 1.0 / (1.0 + math.exp(-z))
    e = math.exp(z)
    return e / (1.0 + e)


def log_odds_terms(record: Record, config: GeneratorConfig, schema: Schema) -> list[float]:
    terms = []
    for feat in schema:
        m = config.marginals.get(feat.name)
        if m is None or feat.name not in record.values:
            continue
        value = record.values[feat.name]
        if isinstance(m, NumericMarginal):
            terms.append(m.coef * m.standardize(float(value)))
        else:
            terms.append(m.coefs.get(value, 0.0))
    return terms


def linear_predictor(record: Record, config: GeneratorConfig, schema: Schema) -> float:
    """``beta . x`` for one record, summed in schema order."""
    total = 0.0
    for t in log_odds_terms(record, config, schema):
        total += t
    return total


def oracle_risk(record: Record, config: GeneratorConfig, schema: Schema, intercept: float) -> float:
    return sigmoid(linear_predictor(record, config, schema) + intercept)


def _fit_intercept(eta: np.ndarray, prevalence: float) -> float:
    def gap(b):
        return float(np.mean(1.0 / (1.0 + np.exp(-(eta + b))))) - prevalence
    return brentq(gap, -60.0, 60.0, xtol=1e-12, maxiter=500)


def synth_cohort(config: GeneratorConfig, seed: int, schema: Schema | None = None) -> Cohort:
    """Draw ``config.n`` independent records; identical (config, seed) give identical cohorts."""
    schema = schema or default_schema()
    unknown = set(config.marginals) - set(schema.names)
    if unknown:
        raise ConfigError(f"marginals for unknown features {sorted(unknown)}")
    rng = np.random.default_rng(seed)
    n = config.n
    columns: dict[str, list] = {}
    literals: dict[str, list] = {}
    for feat in schema:
        m = config.marginals.get(feat.name)
        if m is None:
            columns[feat.name] = [None] * n
            continue
        absent = rng.random(n) < m.missing
        if isinstance(m, NumericMarginal):
            if feat.kind != "numeric":
                raise ConfigError(f"{feat.name}: numeric marginal for a {feat.kind} feature")
            draw = rng.normal(m.mean, m.sd, n) if not m.log else np.exp(rng.normal(math.log(m.mean), m.sd, n))
            if m.step:
                draw = np.round(draw / m.step) * m.step
            draw = np.clip(draw, m.lo, m.hi)
            lits = [f"{v:.{m.decimals}f}" for v in draw]
            columns[feat.name] = [None if a else float(s) for a, s in zip(absent, lits)]
            literals[feat.name] = lits
        else:
            codes = list(m.probs)
            if set(codes) - set(feat.categories):
                raise ConfigError(f"{feat.name}: undeclared categories {sorted(set(codes) - set(feat.categories))}")
            idx = rng.choice(len(codes), size=n, p=[m.probs[c] for c in codes])
            columns[feat.name] = [None if a else codes[i] for a, i in zip(absent, idx)]

    records = []
    for i in range(n):
        values, lits = {}, {}
        for name, col in columns.items():
            if col[i] is None:
                continue
            values[name] = col[i]
            if name in literals:
                lits[name] = literals[name][i]
        records.append(Record(f"P{i:06d}", values, None, lits))

    eta = np.array([linear_predictor(r, config, schema) for r in records])
    intercept = config.intercept if config.intercept is not None else _fit_intercept(eta, config.prevalence)
    risk = [sigmoid(e + intercept) for e in eta]
    draws = rng.random(n)
    labelled = tuple(
        Record(r.patient_id, r.values, Label.MDD if u < p else Label.HC, r.literals)
        for r, u, p in zip(records, draws, risk)
    )
    provenance = {
        "source": "synthetic",
        "seed": seed,
        "generator": config.name,
        "config_hash": config.content_hash(),
        "intercept": intercept,
        "oracle_auc": _oracle_auc(risk, labelled),
    }
    return Cohort(schema, labelled, provenance, {r.patient_id: p for r, p in zip(labelled, risk)})


def _oracle_auc(risk: list[float], records) -> float | None:
    """AUC of the true risk against the drawn labels: the Monte Carlo Bayes ceiling."""
    labels = [r.label is Label.MDD for r in records]
    if all(labels) or not any(labels):
        return None
    return auc(risk, labels)


# ------------------------------------------------------------------- presets

def _base_marginals() -> dict:
    return {
        "age": NumericMarginal(58.0, 8.0, 40, 70, 0),
        "sex": CategoricalMarginal({"female": 0.54, "male": 0.46}),
        "bmi": NumericMarginal(27.4, 4.6, 15, 60, 4, missing=0.005),
        "sleeplessness": CategoricalMarginal({"usually": 0.28, "sometimes": 0.475, "never": 0.245}, missing=0.003),
        "sleep_duration": NumericMarginal(7.1, 1.1, 3, 12, 0, missing=0.005),
        "alcohol": CategoricalMarginal({"daily": 0.20, "4 / week": 0.12, "3 / week": 0.11, "2 / week": 0.12,
                                        "1 / week": 0.12, "monthly": 0.11, "occasionally": 0.12, "never": 0.10},
                                       missing=0.003),
        "self_harm": CategoricalMarginal({"never": 0.945, "yes": 0.05, "no answer": 0.005}, missing=0.65),
        "employment": CategoricalMarginal({"paid": 0.57, "not employed": 0.415, "other": 0.015}, missing=0.006),
        "income": NumericMarginal(30000.0, 0.6, 5000, 200000, 0, missing=0.15, log=True, step=1000.0),
        "work_hours": NumericMarginal(34.0, 11.0, 1, 80, 0, missing=0.43),
        "education": CategoricalMarginal({"none": 0.17, "CSE": 0.05, "O level": 0.2, "A level": 0.12,
                                          "NVQ": 0.07, "professional": 0.05, "degree": 0.34}, missing=0.02),
        "illness": CategoricalMarginal({"yes": 0.33, "no": 0.67}, missing=0.01),
        "hdl": NumericMarginal(1.45, 0.38, 0.3, 4.0, 3, missing=0.08),
        "ldl": NumericMarginal(3.55, 0.85, 0.5, 8.0, 4, missing=0.08),
        "tg": NumericMarginal(1.5, 0.5, 0.2, 10.0, 3, missing=0.08, log=True),
        "tc": NumericMarginal(5.7, 1.1, 2.0, 12.0, 4, missing=0.08),
    }


def _with_coefs(marginals: dict, **coefs) -> dict:
    out = dict(marginals)
    for name, c in coefs.items():
        m = out[name]
        out[name] = replace(m, coef=c) if isinstance(m, NumericMarginal) else replace(m, coefs=c)
    return out


def preset(name: str, n: int = 5000) -> GeneratorConfig:
    """Named generator configurations: ``ukb``, ``strong-signal``, ``null``."""
    base = _base_marginals()
    if name == "ukb":
        marginals = _with_coefs(
            base,
            age=-0.35, sex={"female": 0.4}, sleeplessness={"usually": 0.45, "sometimes": 0.15},
            self_harm={"yes": 1.4, "no answer": 0.6}, employment={"not employed": 0.2, "other": 0.3},
            illness={"yes": 0.5}, bmi=0.05, sleep_duration=-0.1,
        )
        return GeneratorConfig("ukb", n, marginals, prevalence=12_715 / 274_348)
    if name == "strong-signal":
        base["self_harm"] = CategoricalMarginal({"never": 0.8, "yes": 0.17, "no answer": 0.03}, missing=0.1)
        marginals = _with_coefs(
            base,
            sex={"female": 2.8},
            sleeplessness={"usually": 5.2, "sometimes": 2.0},
            self_harm={"yes": 6.4, "no answer": 2.4},
            employment={"not employed": 3.6, "other": 2.0},
            illness={"yes": 4.4},
            alcohol={"daily": 2.4, "never": 2.0},
            education={"none": 2.0},
            age=-1.0,
        )
        return GeneratorConfig("strong-signal", n, marginals, prevalence=0.3)
    if name == "null":
        return GeneratorConfig("null", n, base, prevalence=0.3)
    raise ConfigError(f"unknown preset {name!r}; choose ukb, strong-signal or null")


PRESETS = ("ukb", "strong-signal", "null")
