"""Patient records, cohort ingest/re-emission and train/test/fold splitting."""

from __future__ import annotations

import csv
import hashlib
import io
import math
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np

from .schema import FeatureSpec, Schema, SchemaError


class Label(str, Enum):
    MDD = "MDD"
    HC = "HC"


LABEL_CODES = {"1": Label.MDD, "0": Label.HC}


class CohortError(ValueError):
    pass


class RowError(CohortError):
    def __init__(self, row: int, message: str):
        super().__init__(f"row {row}: {message}")
        self.row = row


def format_number(value: float) -> str:
    """Shortest round-trip decimal, without a trailing ".0" for integers."""
    return np.format_float_positional(float(value), trim="-")


@dataclass(frozen=True)
class Record:
    """One patient row.  Missing features are simply absent from ``values``.

    Numeric values are floats; ``literals`` keeps the ingested text of numeric
    cells so prompts can echo it exactly (``"24.5018"``, ``"2.30"``).
    """

    patient_id: str
    values: Mapping[str, object]
    label: Label | None = None
    literals: Mapping[str, str] = field(default_factory=dict)

    def get(self, name: str):
        return self.values.get(name)

    def is_missing(self, name: str) -> bool:
        return name not in self.values

    def value_text(self, name: str) -> str:
        """Canonical string of a present value (ingested literal when known)."""
        value = self.values[name]
        if isinstance(value, str):
            return value
        return self.literals.get(name) or format_number(value)

    def with_values(self, values: Mapping[str, object]) -> "Record":
        literals = {k: v for k, v in self.literals.items() if k in values}
        return Record(self.patient_id, dict(values), self.label, literals)

    def canonical(self, schema: Schema) -> str:
        """Schema-ordered text form used for hashing and cache keys."""
        parts = [f"id={self.patient_id}", f"label={self.label.value if self.label else ''}"]
        for feat in schema:
            parts.append(f"{feat.name}={self.value_text(feat.name) if feat.name in self.values else ''}")
        return "\x1f".join(parts)


def parse_value(feature: FeatureSpec, cell: str):
    """Parse one non-missing cell; returns (value, literal-or-None)."""
    text = cell.strip()
    if feature.is_numeric:
        try:
            value = float(text)
        except ValueError:
            raise ValueError(f"{feature.name}: {cell!r} is not a number") from None
        if not math.isfinite(value):
            raise ValueError(f"{feature.name}: non-finite value {cell!r}")
        return value, text
    if text in feature.categories:
        return text, None
    folded = {c.casefold(): c for c in feature.categories}
    if text.casefold() in folded:
        return folded[text.casefold()], None
    raise ValueError(
        f"{feature.name}: {cell!r} is not one of {{{', '.join(feature.categories)}}}"
    )


def make_record(schema: Schema, patient_id: str, cells: Mapping[str, str],
                label: Label | None = None, missing_codes: Iterable[str] = ("",)) -> Record:
    """Build a validated record from raw string cells."""
    missing = set(missing_codes)
    values, literals = {}, {}
    for name, cell in cells.items():
        feature = schema[name]
        if cell is None or cell.strip() in missing:
            continue
        value, literal = parse_value(feature, cell)
        values[name] = value
        if literal is not None:
            literals[name] = literal
    return Record(str(patient_id), values, label, literals)


def validate_record(record: Record, schema: Schema) -> None:
    for name, value in record.values.items():
        if name not in schema:
            raise SchemaError(f"record {record.patient_id}: unknown feature {name!r}")
        feature = schema[name]
        if feature.is_numeric:
            if isinstance(value, str) or not math.isfinite(float(value)):
                raise CohortError(f"record {record.patient_id}: {name} must be a finite number")
        elif value not in feature.categories:
            raise CohortError(f"record {record.patient_id}: {name}={value!r} not a declared category")


@dataclass(frozen=True)
class Cohort:
    schema: Schema
    records: tuple[Record, ...]
    provenance: Mapping[str, object] = field(default_factory=lambda: {"source": "ingested"})
    oracle: Mapping[str, float] | None = None

    def __post_init__(self):
        ids = [r.patient_id for r in self.records]
        if len(set(ids)) != len(ids):
            seen = set()
            dup = next(i for i in ids if i in seen or seen.add(i))
            raise CohortError(f"duplicate patient_id {dup!r}")
        for record in self.records:
            validate_record(record, self.schema)

    def __len__(self) -> int:
        return len(self.records)

    @property
    def by_id(self) -> dict[str, Record]:
        return {r.patient_id: r for r in self.records}

    def subset(self, ids: Iterable[str]) -> list[Record]:
        index = self.by_id
        return [index[i] for i in ids]

    def labels(self, ids: Iterable[str] | None = None) -> np.ndarray:
        records = self.records if ids is None else self.subset(ids)
        return np.array([1 if r.label is Label.MDD else 0 for r in records], dtype=np.int64)

    def to_csv(self, label_column: str = "mdd", id_column: str = "patient_id") -> str:
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow([id_column, *self.schema.names, label_column])
        for r in self.records:
            label = {Label.MDD: "1", Label.HC: "0", None: ""}[r.label]
            writer.writerow([r.patient_id,
                             *(r.value_text(n) if n in r.values else "" for n in self.schema.names),
                             label])
        return buf.getvalue()

    def content_hash(self) -> str:
        return hashlib.sha256(self.to_csv().encode("utf-8")).hexdigest()


def read_cohort(text: str, schema: Schema, label_column: str = "mdd",
                id_column: str = "patient_id", missing_codes: Iterable[str] = ("",)) -> Cohort:
    reader = csv.reader(io.StringIO(text))
    try:
        header = [h.strip() for h in next(reader)]
    except StopIteration:
        raise CohortError("empty table: header row required") from None
    if id_column not in header:
        raise SchemaError(f"missing id column {id_column!r}")
    for column in header:
        if column not in (id_column, label_column) and column not in schema:
            raise SchemaError(f"unknown column {column!r}")
    records, seen = [], set()
    for row_no, row in enumerate(reader, start=1):
        if not row:
            continue
        if len(row) != len(header):
            raise RowError(row_no, f"expected {len(header)} cells, found {len(row)}")
        cells = dict(zip(header, row))
        pid = cells.pop(id_column).strip()
        if pid in seen:
            raise RowError(row_no, f"duplicate patient_id {pid!r}")
        seen.add(pid)
        raw_label = cells.pop(label_column, "").strip()
        if raw_label and raw_label not in LABEL_CODES:
            raise RowError(row_no, f"label must be 1, 0 or empty, got {raw_label!r}")
        try:
            records.append(make_record(schema, pid, cells, LABEL_CODES.get(raw_label), missing_codes))
        except ValueError as exc:
            raise RowError(row_no, str(exc)) from None
    return Cohort(schema, tuple(records), {"source": "ingested"})


def load_cohort(path: str | Path, schema: Schema, label_column: str = "mdd",
                id_column: str = "patient_id", missing_codes: Iterable[str] = ("",)) -> Cohort:
    """Read a comma-separated cohort table (UTF-8, header row)."""
    text = Path(path).read_text(encoding="utf-8")
    cohort = read_cohort(text, schema, label_column, id_column, missing_codes)
    return Cohort(cohort.schema, cohort.records, {"source": "ingested", "path": str(path)})


def write_cohort(cohort: Cohort, path: str | Path, label_column: str = "mdd") -> None:
    Path(path).write_text(cohort.to_csv(label_column), encoding="utf-8")


# ----------------------------------------------------------------- splitting

@dataclass(frozen=True)
class SplitPlan:
    train_ids: tuple[str, ...]
    test_ids: tuple[str, ...]
    folds: tuple[tuple[str, ...], ...]
    seed: int

    def fold_split(self, k: int) -> tuple[tuple[str, ...], tuple[str, ...]]:
        """(fit ids, validation ids) for cross-validation fold ``k``."""
        held = set(self.folds[k])
        return tuple(i for i in self.train_ids if i not in held), self.folds[k]

    def to_dict(self) -> dict:
        return {"seed": self.seed, "train_ids": list(self.train_ids),
                "test_ids": list(self.test_ids), "folds": [list(f) for f in self.folds]}

    def content_hash(self) -> str:
        import json
        return hashlib.sha256(json.dumps(self.to_dict()).encode()).hexdigest()


def _largest_remainder(total: int, weights: Sequence[int]) -> list[int]:
    n = sum(weights)
    exact = [total * w / n for w in weights]
    alloc = [math.floor(e) for e in exact]
    order = sorted(range(len(weights)), key=lambda i: (-(exact[i] - alloc[i]), i))
    for i in order[: total - sum(alloc)]:
        alloc[i] += 1
    return alloc


def make_splits(cohort: Cohort, seed: int, test_fraction: float = 0.2, n_folds: int = 5) -> SplitPlan:
    """Label-stratified 80/20 split plus stratified folds over the train side."""
    labeled = [r for r in cohort.records if r.label is not None]
    if len(labeled) < 10:
        raise CohortError(f"need at least 10 labeled records, got {len(labeled)}")
    rng = np.random.default_rng(seed)
    classes = [Label.HC, Label.MDD]
    members = {c: [r.patient_id for r in labeled if r.label is c] for c in classes}
    classes = [c for c in classes if members[c]]
    n_test = _largest_remainder(round(test_fraction * len(labeled)), [len(members[c]) for c in classes])

    test, train_by_class = set(), {}
    for c, k in zip(classes, n_test):
        perm = [members[c][i] for i in rng.permutation(len(members[c]))]
        test.update(perm[:k])
        train_by_class[c] = perm[k:]
        if len(perm) - k < n_folds:
            raise CohortError(
                f"class {c.value} has {len(perm) - k} training members; need {n_folds} to stratify folds"
            )

    folds: list[set[str]] = [set() for _ in range(n_folds)]
    slot = 0
    for c in classes:
        for pid in train_by_class[c]:
            folds[slot % n_folds].add(pid)
            slot += 1

    order = [r.patient_id for r in labeled]
    return SplitPlan(
        train_ids=tuple(i for i in order if i not in test),
        test_ids=tuple(i for i in order if i in test),
        folds=tuple(tuple(i for i in order if i in f) for f in folds),
        seed=seed,
    )
