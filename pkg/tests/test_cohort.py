import itertools
import math

import numpy as np
import pytest
from hypothesis import given, strategies as st
from scipy import special

from mddllm.baseline import baseline_table, chi_square_test, quantiles, rank_sum_test
from mddllm.cohort import (Cohort, CohortError, Label, Record, RowError, load_cohort, make_record,
                           make_splits, read_cohort, write_cohort)
from mddllm.schema import FeatureSpec, SchemaError, corrected_schema, default_schema, parse_schema
from mddllm.synth import linear_predictor, preset, sigmoid, synth_cohort


def _csv(rows, header="patient_id,age,bmi,sleeplessness,mdd"):
    return header + "\n" + "\n".join(rows) + "\n"


# ------------------------------------------------------------------ schema

def test_default_schema_has_sixteen_features(schema):
    assert len(schema) == 16
    assert len(set(schema.names)) == 16


def test_categories_required_iff_not_numeric():
    with pytest.raises(SchemaError):
        FeatureSpec(name="x", kind="categorical", phrase="x is {v}", list_label="X")
    with pytest.raises(SchemaError):
        FeatureSpec(name="x", kind="numeric", categories=("a",), phrase="x is {v}", list_label="X")


def test_phrase_needs_exactly_one_placeholder():
    with pytest.raises(SchemaError):
        FeatureSpec(name="x", kind="numeric", phrase="x is {v} or {v}", list_label="X")


def test_schema_parser_rejects_duplicate_names():
    text = "[schema]\n[a]\nkind=numeric\nphrase=\"a is {v}\"\nlist_label=A\n[a]\nkind=numeric\n"
    with pytest.raises(Exception):
        parse_schema([text])


def test_corrected_variant_fixes_typos():
    s = corrected_schema()
    assert s["alcohol"].list_label == "Drink"
    assert s["sleeplessness"].list_value("sometimes") == "sometimes"


# ------------------------------------------------------------------ ingest

def test_three_row_file(schema):
    text = _csv(["a,60,24.5,never,1", "b,51,30.1,usually,0", "c,44,22.0,sometimes,"])
    cohort = read_cohort(text, schema)
    assert len(cohort) == 3
    assert [r.label for r in cohort.records] == [Label.MDD, Label.HC, None]


def test_empty_cell_is_missing(schema):
    cohort = read_cohort(_csv(["a,60,,never,1"]), schema)
    assert cohort.records[0].is_missing("bmi")


def test_out_of_vocabulary_category_cites_row(schema):
    with pytest.raises(RowError) as err:
        read_cohort(_csv(["a,60,24.5,never,1", "b,60,24.5,often,0"]), schema)
    assert err.value.row == 2
    assert "often" in str(err.value)


def test_unknown_column_named(schema):
    with pytest.raises(SchemaError, match="shoe_size"):
        read_cohort("patient_id,shoe_size,mdd\na,42,1\n", schema)


def test_duplicate_patient_id(schema):
    with pytest.raises(CohortError, match="duplicate"):
        read_cohort(_csv(["a,60,24.5,never,1", "a,61,24.5,never,0"]), schema)


def test_declared_missing_codes(schema):
    cohort = read_cohort(_csv(["a,-999,24.5,never,1"]), schema, missing_codes=("", "-999"))
    assert cohort.records[0].is_missing("age")


def test_round_trip_preserves_literals(tmp_path, schema):
    cohort = synth_cohort(preset("ukb", 200), 4, schema)
    path = tmp_path / "c.csv"
    write_cohort(cohort, path)
    again = load_cohort(path, schema)
    for a, b in zip(cohort.records, again.records):
        assert a.values == b.values
        for name in a.values:
            assert a.value_text(name) == b.value_text(name)
    assert again.to_csv() == cohort.to_csv()


def test_trailing_zero_literal_survives(schema):
    cohort = read_cohort(_csv(["a,60,2.30,never,1"]), schema)
    assert cohort.records[0].value_text("bmi") == "2.30"


# --------------------------------------------------------------- baseline

def test_quantiles_one_to_nine():
    assert quantiles(range(1, 10)) == (5.0, 3.0, 7.0)


def test_chi_square_hand_case():
    stat, df, p = chi_square_test([[10, 20], [20, 10]])
    obs = np.array([[10, 20], [20, 10]], float)
    exp = obs.sum(1, keepdims=True) * obs.sum(0, keepdims=True) / obs.sum()
    hand = float(((obs - exp) ** 2 / exp).sum())
    assert stat == pytest.approx(hand, abs=1e-12)
    assert round(stat, 3) == 6.667 and df == 1
    # independent survival function: regularized upper incomplete gamma Q(df/2, x/2)
    assert p == pytest.approx(special.gammaincc(0.5, hand / 2), rel=1e-12)
    assert round(p, 4) == 0.0098


def test_rank_sum_exact_enumeration_versus_approximation():
    x, y = [1, 2], [3, 4]
    ranks = [1, 2, 3, 4]
    observed = sum(ranks[:2])
    sums = [sum(c) for c in itertools.combinations(ranks, 2)]
    mean = np.mean(sums)
    exact = sum(abs(s - mean) >= abs(observed - mean) for s in sums) / len(sums)
    assert exact == pytest.approx(1 / 3)
    _, p_approx = rank_sum_test(x, y)
    # the normal approximation with continuity is coarse at n = 2 + 2 but in the same region
    assert 0.1 < p_approx < 0.5


def test_baseline_table_layout(schema):
    cohort = synth_cohort(preset("strong-signal", 600), 1, schema)
    table = baseline_table(cohort)
    assert set(table.group_sizes) == {"HC", "MDD"}
    age = table.row("age")
    assert age.kind == "numeric" and 0 <= age.p_value <= 1
    text = str(age.numeric["HC"])
    assert " (" in text and " - " in text
    for row in table.rows:
        if row.kind != "numeric":
            for group in ("HC", "MDD"):
                total = sum(pcts[group] for pcts in row.percents.values())
                assert total == pytest.approx(100.0, abs=0.05)
    csv_text = table.to_csv()
    assert csv_text.splitlines()[0].startswith("Characteristics")


def test_baseline_single_value_is_degenerate(schema):
    rows = [f"p{i},60,24.5,never,{i % 2}" for i in range(10)]
    table = baseline_table(read_cohort(_csv(rows), schema))
    assert table.row("age").p_value == 1.0
    assert table.row("age").degenerate


# ------------------------------------------------------------------ synth

def test_null_preset_oracle_auc_near_half(schema):
    from mddllm.metrics import auc
    cohort = synth_cohort(preset("null", 10_000), 0, schema)
    assert 0.47 <= cohort.provenance["oracle_auc"] <= 0.53
    ids = [r.patient_id for r in cohort.records]
    assert auc([cohort.oracle[i] for i in ids], cohort.labels(ids)) == cohort.provenance["oracle_auc"]


def test_ukb_prevalence(schema):
    cohort = synth_cohort(preset("ukb", 10_000), 0, schema)
    frac = np.mean([r.label is Label.MDD for r in cohort.records])
    assert abs(frac - 12715 / 274348) <= 0.01


def test_strong_signal_oracle_auc(schema):
    from mddllm.metrics import auc_oracle
    cohort = synth_cohort(preset("strong-signal", 3000), 0, schema)
    ids = [r.patient_id for r in cohort.records]
    assert auc_oracle([cohort.oracle[i] for i in ids], cohort.labels(ids)) >= 0.95


def test_synth_is_byte_identical_under_seed(schema):
    a = synth_cohort(preset("ukb", 300), 9, schema)
    b = synth_cohort(preset("ukb", 300), 9, schema)
    assert a.to_csv() == b.to_csv()
    assert synth_cohort(preset("ukb", 300), 10, schema).to_csv() != a.to_csv()


def test_oracle_matches_recomputed_risk(schema):
    config = preset("strong-signal", 400)
    cohort = synth_cohort(config, 2, schema)
    b = cohort.provenance["intercept"]
    for r in cohort.records:
        assert cohort.oracle[r.patient_id] == sigmoid(linear_predictor(r, config, schema) + b)


def test_non_finite_coefficient_rejected():
    from dataclasses import replace
    from mddllm.synth import ConfigError, NumericMarginal
    config = preset("ukb", 100)
    bad = dict(config.marginals)
    bad["age"] = replace(bad["age"], coef=math.inf)
    with pytest.raises(ConfigError):
        replace(config, marginals=bad)


# ----------------------------------------------------------------- splits

def _cohort_of(n, n_pos, schema):
    recs = tuple(Record(f"r{i:03d}", {"age": 50.0}, Label.MDD if i < n_pos else Label.HC) for i in range(n))
    return Cohort(schema, recs)


def test_split_sizes_n100(schema):
    plan = make_splits(_cohort_of(100, 30, schema), 7)
    assert len(plan.test_ids) == 20
    assert sorted(len(f) for f in plan.folds) == [16] * 5


def test_split_deterministic(schema):
    c = _cohort_of(100, 30, schema)
    assert make_splits(c, 7) == make_splits(c, 7)
    assert make_splits(c, 7) != make_splits(c, 8)


def test_too_few_for_folds(schema):
    with pytest.raises(CohortError):
        make_splits(_cohort_of(40, 5, schema), 0)


@given(n=st.integers(20, 300), frac=st.floats(0.1, 0.9), seed=st.integers(0, 10_000))
def test_split_invariants(n, frac, seed):
    schema = default_schema()
    n_pos = max(7, min(n - 7, round(frac * n)))
    cohort = _cohort_of(n, n_pos, schema)
    plan = make_splits(cohort, seed)
    train, test = set(plan.train_ids), set(plan.test_ids)
    assert not train & test
    assert train | test == {r.patient_id for r in cohort.records}
    assert abs(len(test) - round(0.2 * n)) <= 1
    assert set().union(*map(set, plan.folds)) == train
    assert sum(len(f) for f in plan.folds) == len(train)
    sizes = [len(f) for f in plan.folds]
    assert max(sizes) - min(sizes) <= 1
    labels = {r.patient_id: r.label for r in cohort.records}
    pos = [sum(labels[i] is Label.MDD for i in f) for f in plan.folds]
    assert max(pos) - min(pos) <= 1
