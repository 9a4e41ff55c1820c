"""Tabular record -> instruction prompt serialization.

Three templates turn a record into the ``input`` of a fine-tuning triple:

* list: ``"Age: 47, Sex: male, ..."`` using each feature's list label;
* text: one short phrase per feature (``"body mass index (BMI) is 24.5 kg/m²"``);
* narrative: a multi-sentence paraphrase, either produced by a remote chat
  model or by a frozen built-in template that needs no network.

Missing features are left out of every template.
"""

from __future__ import annotations

import hashlib
import json
import math
import os
import threading
import warnings
from dataclasses import asdict, dataclass
from enum import Enum
from pathlib import Path
from typing import Iterable, Protocol, Sequence

import numpy as np

from .cohort import Cohort, Label, Record, validate_record
from .schema import PLACEHOLDER, Schema

INSTRUCTION = (
    "Predict if a patient has the major depressive disorder? Yes or no? "
    "Please answer with only yes or no and do not give any extra information."
)
ANSWERS = {Label.MDD: "Yes", Label.HC: "No"}

NARRATIVE_VERSION = "1"
NARRATIVE_META_PROMPT = (
    "Rewrite the following description of a patient as one fluent paragraph of "
    "plain English. Keep every number exactly as written, mention every fact, and "
    "do not add any information or any judgement about diagnosis.\n\n{text}"
)


class TemplateKind(str, Enum):
    LIST = "list"
    TEXT = "text"
    NARRATIVE = "narrative"


class EmptyPromptWarning(UserWarning):
    pass


class PromptError(ValueError):
    pass


# ------------------------------------------------------------------ renderers

def _fill(template: str, value: str) -> str:
    return template.replace(PLACEHOLDER, value)


def render_list(record: Record, schema: Schema) -> str:
    validate_record(record, schema)
    parts = []
    for feat in schema.list_features():
        if feat.name not in record.values:
            continue
        value = record.value_text(feat.name)
        if not feat.is_numeric:
            value = feat.list_value(value)
        parts.append(f"{feat.list_label}: {_fill(feat.list_format, value)}")
    if not parts:
        warnings.warn(f"record {record.patient_id}: every feature is missing", EmptyPromptWarning)
        return ""
    return schema.list_separator.join(parts) + schema.list_terminator


def render_text(record: Record, schema: Schema) -> str:
    validate_record(record, schema)
    fragments = []
    for feat in schema:
        if feat.name not in record.values:
            continue
        value = record.value_text(feat.name)
        if not feat.is_numeric:
            value = feat.text_value(value)
        fragments.append((_fill(feat.phrase, value), feat.separator_after))
    if not fragments:
        warnings.warn(f"record {record.patient_id}: every feature is missing", EmptyPromptWarning)
        return ""
    out = []
    for i, (fragment, sep) in enumerate(fragments):
        out.append(fragment)
        if i < len(fragments) - 1:
            out.append(sep if sep is not None else schema.text_separator)
    return "".join(out) + schema.text_terminator


_SUBJECTS = ("The individual in question", "This person", "The individual")
_GROUP_LEADS = {"lipids": "Their blood tests show "}


def _join_clauses(clauses: Sequence[str]) -> str:
    if len(clauses) == 1:
        return clauses[0]
    return ", ".join(clauses[:-1]) + " and " + clauses[-1]


def narrative_fallback(record: Record, schema: Schema) -> str:
    """Frozen built-in paraphrase (version ``NARRATIVE_VERSION``)."""
    validate_record(record, schema)
    groups: dict[str, list[str]] = {}
    for feat in schema:
        if feat.name not in record.values:
            continue
        value = record.value_text(feat.name)
        if not feat.is_numeric:
            value = feat.narrative_value(value)
        groups.setdefault(feat.group, []).append(_fill(feat.narrative_phrase, value))
    if not groups:
        warnings.warn(f"record {record.patient_id}: every feature is missing", EmptyPromptWarning)
        return ""
    sentences, k = [], 0
    for group, clauses in groups.items():
        if group in _GROUP_LEADS:
            sentences.append(_GROUP_LEADS[group] + _join_clauses(clauses) + ".")
        else:
            sentences.append(f"{_SUBJECTS[k % len(_SUBJECTS)]} {_join_clauses(clauses)}.")
            k += 1
    return " ".join(sentences)


def coverage_warnings(text: str, record: Record, schema: Schema) -> list[str]:
    """Numeric values that a paraphrase failed to reproduce verbatim."""
    missing = [schema[name].list_label for name in schema.names
               if name in record.values and schema[name].is_numeric
               and record.value_text(name) not in text]
    return [f"paraphrase omits the value of {label}" for label in missing]


class ChatClient(Protocol):
    model: str

    def chat(self, messages: list[dict]) -> str: ...


@dataclass(frozen=True)
class Narrative:
    text: str
    source: str
    warnings: tuple[str, ...] = ()

    def __str__(self) -> str:
        return self.text


class NarrativeCache:
    """Content-addressed store of remote paraphrases, one JSON file per key."""

    def __init__(self, directory: str | Path):
        self.directory = Path(directory)
        self._lock = threading.Lock()

    @staticmethod
    def key(record: Record, schema: Schema, meta_prompt: str, model: str) -> str:
        h = hashlib.sha256()
        for part in (record.canonical(schema), meta_prompt, model):
            h.update(part.encode("utf-8"))
            h.update(b"\x00")
        return h.hexdigest()

    def get(self, key: str) -> str | None:
        path = self.directory / f"{key}.json"
        if not path.exists():
            return None
        return json.loads(path.read_text(encoding="utf-8"))["text"]

    def put(self, key: str, text: str, meta: dict) -> None:
        with self._lock:
            self.directory.mkdir(parents=True, exist_ok=True)
            tmp = self.directory / f".{key}.tmp"
            tmp.write_text(json.dumps({"text": text, **meta}, ensure_ascii=False), encoding="utf-8")
            os.replace(tmp, self.directory / f"{key}.json")


def render_narrative(record: Record, schema: Schema, client: ChatClient | None = None,
                     cache: NarrativeCache | None = None,
                     meta_prompt: str = NARRATIVE_META_PROMPT) -> Narrative:
    """Narrative paraphrase; remote when ``client`` is given, else the built-in template."""
    if client is None:
        return Narrative(narrative_fallback(record, schema), f"builtin-v{NARRATIVE_VERSION}")
    key = NarrativeCache.key(record, schema, meta_prompt, client.model)
    text = cache.get(key) if cache is not None else None
    if text is None:
        prompt = meta_prompt.replace("{text}", render_text(record, schema))
        text = client.chat([{"role": "user", "content": prompt}])
        if cache is not None:
            cache.put(key, text, {"model": client.model, "patient_id": record.patient_id})
    return Narrative(text, f"remote:{client.model}", tuple(coverage_warnings(text, record, schema)))


def render(record: Record, schema: Schema, template: TemplateKind | str,
           client: ChatClient | None = None, cache: NarrativeCache | None = None) -> str:
    template = TemplateKind(template)
    if template is TemplateKind.LIST:
        return render_list(record, schema)
    if template is TemplateKind.TEXT:
        return render_text(record, schema)
    return render_narrative(record, schema, client, cache).text


# ------------------------------------------------------------ SFT corpus

@dataclass(frozen=True)
class SftRecord:
    instruction: str
    input: str
    output: str | None
    patient_id: str
    template: TemplateKind

    def to_json(self) -> str:
        d = asdict(self)
        d["template"] = self.template.value
        return json.dumps(d, ensure_ascii=False)

    @classmethod
    def from_json(cls, line: str) -> "SftRecord":
        d = json.loads(line)
        return cls(d["instruction"], d["input"], d.get("output"), d["patient_id"],
                   TemplateKind(d["template"]))


def build_sft(record: Record, schema: Schema, template: TemplateKind | str,
              client: ChatClient | None = None, cache: NarrativeCache | None = None,
              require_label: bool = True) -> SftRecord:
    if record.label is None and require_label:
        raise PromptError(f"record {record.patient_id} is unlabeled")
    template = TemplateKind(template)
    text = render(record, schema, template, client, cache)
    return SftRecord(INSTRUCTION, text, ANSWERS.get(record.label), record.patient_id, template)


def _id_seed(patient_id: str) -> int:
    return int.from_bytes(hashlib.sha256(patient_id.encode("utf-8")).digest()[:8], "little")


def retained_count(retain_ratio: float, k: int) -> int:
    # round first so 0.6 * 10 does not become 7 through 6.000000000000001
    return math.ceil(round(retain_ratio * k, 9))


def mask_features(record: Record, schema: Schema, retain_ratio: float, seed: int) -> Record:
    """Keep a uniformly drawn ``ceil(retain_ratio * k)`` subset of the schema's features."""
    if not 0 < retain_ratio <= 1:
        raise ValueError(f"retain_ratio must lie in (0, 1], got {retain_ratio}")
    if retain_ratio == 1:
        return record
    names = schema.names
    rng = np.random.default_rng([seed, _id_seed(record.patient_id)])
    kept = {names[i] for i in rng.choice(len(names), size=retained_count(retain_ratio, len(names)),
                                         replace=False)}
    return record.with_values({k: v for k, v in record.values.items() if k in kept})


def oversample(records: Sequence[SftRecord], ratio: float = 1.0, seed: int = 0) -> list[SftRecord]:
    """Duplicate minority-class examples until minority/majority reaches ``ratio``.

    Output order is a seeded shuffle of the enlarged list.
    """
    yes = [r for r in records if r.output == "Yes"]
    no = [r for r in records if r.output == "No"]
    minority, majority = (yes, no) if len(yes) < len(no) else (no, yes)
    out = list(records)
    if minority:
        target = int(round(ratio * len(majority)))
        rng = np.random.default_rng(seed)
        extra = target - len(minority)
        if extra > 0:
            out += [minority[i] for i in rng.integers(0, len(minority), size=extra)]
    order = np.random.default_rng(seed + 1).permutation(len(out))
    return [out[i] for i in order]


def build_corpus(cohort: Cohort, ids: Iterable[str], template: TemplateKind | str,
                 client: ChatClient | None = None, cache: NarrativeCache | None = None,
                 require_label: bool = True) -> list[SftRecord]:
    return [build_sft(r, cohort.schema, template, client, cache, require_label)
            for r in cohort.subset(ids)]


def write_corpus(records: Iterable[SftRecord], path: str | Path) -> int:
    n = 0
    with open(path, "w", encoding="utf-8") as fh:
        for rec in records:
            fh.write(rec.to_json() + "\n")
            n += 1
    return n


def read_corpus(path: str | Path) -> list[SftRecord]:
    with open(path, encoding="utf-8") as fh:
        return [SftRecord.from_json(line) for line in fh if line.strip()]


def emit_corpus(cohort: Cohort, ids: Iterable[str], template: TemplateKind | str,
                path: str | Path, client: ChatClient | None = None,
                cache: NarrativeCache | None = None) -> int:
    """Write one JSON line per id; returns the number written."""
    ids = list(ids)
    unknown = set(ids) - set(cohort.by_id)
    if unknown:
        raise PromptError(f"ids not in cohort: {sorted(unknown)[:5]}")
    return write_corpus(build_corpus(cohort, ids, template, client, cache), path)


def corpus_hash(records: Iterable[SftRecord]) -> str:
    h = hashlib.sha256()
    for rec in records:
        h.update(rec.to_json().encode("utf-8"))
        h.update(b"\n")
    return h.hexdigest()
