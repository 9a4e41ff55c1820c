"""Feature schema: typed feature declarations and their prompt verbalizations.

Schemas are declared in INI files (see ``schemas/ukb16.cfg`` for the
grammar).  Variant files only list the keys they override and are layered
on top of the base file.
"""

from __future__ import annotations

import configparser
import json
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path
from typing import Iterable, Mapping

NUMERIC = "numeric"
CATEGORICAL = "categorical"
ORDINAL = "ordinal"
KINDS = (NUMERIC, CATEGORICAL, ORDINAL)

PLACEHOLDER = "{v}"


class SchemaError(ValueError):
    pass


@dataclass(frozen=True)
class FeatureSpec:
    name: str
    kind: str
    phrase: str
    list_label: str
    unit: str | None = None
    categories: tuple[str, ...] = ()
    list_format: str = PLACEHOLDER
    text_values: Mapping[str, str] = field(default_factory=dict)
    list_values: Mapping[str, str] = field(default_factory=dict)
    narrative: str | None = None
    narrative_values: Mapping[str, str] = field(default_factory=dict)
    group: str = "other"
    separator_after: str | None = None

    def __post_init__(self):
        if self.kind not in KINDS:
            raise SchemaError(f"feature {self.name!r}: unknown kind {self.kind!r}")
        if (self.kind == NUMERIC) == bool(self.categories):
            raise SchemaError(
                f"feature {self.name!r}: categories must be given iff kind is not numeric"
            )
        if len(set(self.categories)) != len(self.categories):
            raise SchemaError(f"feature {self.name!r}: duplicate category codes")
        for label, template in (("phrase", self.phrase), ("list_format", self.list_format),
                                ("narrative", self.narrative_phrase)):
            if template.count(PLACEHOLDER) != 1:
                raise SchemaError(
                    f"feature {self.name!r}: {label} must contain exactly one {PLACEHOLDER}"
                )
        for mapping in (self.text_values, self.list_values, self.narrative_values):
            unknown = set(mapping) - set(self.categories)
            if unknown:
                raise SchemaError(
                    f"feature {self.name!r}: verbalizations for unknown categories {sorted(unknown)}"
                )

    @property
    def is_numeric(self) -> bool:
        return self.kind == NUMERIC

    @property
    def narrative_phrase(self) -> str:
        return self.narrative if self.narrative is not None else self.phrase

    def text_value(self, code: str) -> str:
        return self.text_values.get(code, code)

    def list_value(self, code: str) -> str:
        return self.list_values.get(code, code)

    def narrative_value(self, code: str) -> str:
        return self.narrative_values.get(code, self.text_value(code))


@dataclass(frozen=True)
class Schema:
    """Ordered feature list plus template-level punctuation.

    ``features`` are in text-template order; ``list_order`` gives the order
    used by the list template (the published examples use different orders
    for the two templates).
    """

    features: tuple[FeatureSpec, ...]
    name: str = "custom"
    list_order: tuple[str, ...] = ()
    text_separator: str = ", "
    text_terminator: str = ""
    list_separator: str = ", "
    list_terminator: str = "."

    def __post_init__(self):
        names = [f.name for f in self.features]
        if len(set(names)) != len(names):
            raise SchemaError("feature names must be unique within a schema")
        if not self.list_order:
            object.__setattr__(self, "list_order", tuple(names))
        elif sorted(self.list_order) != sorted(names):
            raise SchemaError("list_order must be a permutation of the feature names")

    def __len__(self) -> int:
        return len(self.features)

    def __iter__(self):
        return iter(self.features)

    def __contains__(self, name: str) -> bool:
        return name in self.by_name

    def __getitem__(self, name: str) -> FeatureSpec:
        try:
            return self.by_name[name]
        except KeyError:
            raise SchemaError(f"unknown feature {name!r}") from None

    @property
    def by_name(self) -> dict[str, FeatureSpec]:
        return {f.name: f for f in self.features}

    @property
    def names(self) -> tuple[str, ...]:
        return tuple(f.name for f in self.features)

    def list_features(self) -> list[FeatureSpec]:
        return [self[name] for name in self.list_order]


def _value(raw: str) -> str:
    raw = raw.strip()
    if len(raw) >= 2 and raw[0] == raw[-1] == '"':
        return json.loads(raw)
    return raw


def _split(raw: str, sep: str) -> tuple[str, ...]:
    return tuple(part.strip() for part in raw.split(sep) if part.strip())


def _parser() -> configparser.ConfigParser:
    parser = configparser.ConfigParser(interpolation=None, delimiters=("=",))
    parser.optionxform = str
    return parser


def parse_schema(texts: Iterable[str]) -> Schema:
    """Build a schema from one base config text followed by override texts."""
    parser = _parser()
    for text in texts:
        parser.read_string(text)
    options = {k: _value(v) for k, v in parser["schema"].items()} if parser.has_section("schema") else {}
    features = []
    for section in parser.sections():
        if section == "schema":
            continue
        sec = parser[section]
        mappings: dict[str, dict[str, str]] = {"text": {}, "list": {}, "narrative": {}}
        plain = {}
        for key, raw in sec.items():
            prefix, dot, code = key.partition(".")
            if dot and prefix in mappings:
                mappings[prefix][code.strip()] = _value(raw)
            else:
                plain[key] = _value(raw)
        known = {"kind", "unit", "categories", "phrase", "list_label", "list_format",
                 "narrative", "group", "separator_after"}
        unknown = set(plain) - known
        if unknown:
            raise SchemaError(f"feature {section!r}: unknown keys {sorted(unknown)}")
        for required in ("kind", "phrase", "list_label"):
            if required not in plain:
                raise SchemaError(f"feature {section!r}: missing {required!r}")
        kind = plain["kind"]
        categories = _split(plain.get("categories", ""), "|") if kind != NUMERIC else ()
        # a variant may turn a numeric feature categorical and vice versa
        features.append(FeatureSpec(
            name=section,
            kind=kind,
            phrase=plain["phrase"],
            list_label=plain["list_label"],
            unit=plain.get("unit") or None,
            categories=categories,
            list_format=plain.get("list_format", PLACEHOLDER),
            text_values={k: v for k, v in mappings["text"].items() if k in categories},
            list_values={k: v for k, v in mappings["list"].items() if k in categories},
            narrative=plain.get("narrative"),
            narrative_values={k: v for k, v in mappings["narrative"].items() if k in categories},
            group=plain.get("group", "other"),
            separator_after=plain.get("separator_after"),
        ))
    kwargs = {}
    for key in ("text_separator", "text_terminator", "list_separator", "list_terminator", "name"):
        if key in options:
            kwargs[key] = options[key]
    if "list_order" in options:
        kwargs["list_order"] = _split(options["list_order"], ",")
    return Schema(features=tuple(features), **kwargs)


def load_schema(path: str | Path, *overrides: str | Path) -> Schema:
    """Read a schema config file, layering any override files on top."""
    return parse_schema(Path(p).read_text(encoding="utf-8") for p in (path, *overrides))


def _builtin(*names: str) -> Schema:
    pkg = resources.files("mddllm") / "schemas"
    return parse_schema((pkg / f"{n}.cfg").read_text(encoding="utf-8") for n in names)


def default_schema() -> Schema:
    """The 16-feature schema whose text phrasing matches the worked SFT example."""
    return _builtin("ukb16")


def figure3_schema() -> Schema:
    """Variant reproducing the template-comparison figure's text phrasing."""
    return _builtin("ukb16", "figure3")


def corrected_schema() -> Schema:
    """Default schema with the typographical slips ("Dring", "sometime") fixed."""
    return _builtin("ukb16", "corrected")


BUILTIN_SCHEMAS = {
    "ukb16": default_schema,
    "figure3": figure3_schema,
    "corrected": corrected_schema,
}


def resolve_schema(spec: str | Path | None) -> Schema:
    """Look up a built-in schema by name or read one from a config path."""
    if spec is None:
        return default_schema()
    if str(spec) in BUILTIN_SCHEMAS:
        return BUILTIN_SCHEMAS[str(spec)]()
    return load_schema(spec)
