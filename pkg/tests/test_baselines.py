import numpy as np
import pytest

from mddllm.baselines import (BaselineError, Featurizer, LogregConfig, MlpConfig, NotFittedError, feature_matrix_csv,
                              fit_featurizer, labels_of, logreg_objective, train_logreg, train_mlp)
from mddllm.cohort import Label, Record, make_splits
from mddllm.metrics import auc
from mddllm.synth import preset, synth_cohort


@pytest.fixture
def cohort(schema):
    return synth_cohort(preset("strong-signal", 600), 3, schema)


def test_featurizer_layout(schema):
    feat = Featurizer(schema).fit([Record("a", {"age": 50.0, "bmi": 20.0, "sleeplessness": "never"}),
                                   Record("b", {"age": 60.0, "bmi": 30.0, "sleeplessness": "usually"})])
    cols = feat.columns
    sleep = [c for c in cols if c.startswith("sleeplessness")]
    assert len(sleep) == len(schema["sleeplessness"].categories) + 1
    assert len(schema["sleeplessness"].categories) == 3
    row = feat.apply(Record("c", {"age": 55.0}))
    assert row[cols.index("bmi")] == 0.0 and row[cols.index("bmi__missing")] == 1.0
    assert row[cols.index("age")] == 0.0 and row[cols.index("age__missing")] == 0.0


def test_apply_before_fit(schema):
    with pytest.raises(NotFittedError):
        Featurizer(schema).apply(Record("a", {}))


def test_train_columns_standardized(cohort):
    plan = make_splits(cohort, 0)
    feat = fit_featurizer(cohort, plan.train_ids)
    train = cohort.subset(plan.train_ids)
    x = feat.transform(train)
    for name, _ in feat.stats.items():
        j = feat.columns.index(name)
        present = np.array([name in r.values for r in train])
        col = x[present, j]
        if col.size > 1 and np.ptp(col) > 0:
            assert abs(col.mean()) <= 1e-9
            assert abs(col.std() - 1) <= 1e-9


def test_leakage_guard(cohort):
    plan = make_splits(cohort, 0)
    on_train = fit_featurizer(cohort, plan.train_ids)
    on_all = fit_featurizer(cohort, [r.patient_id for r in cohort.records])
    assert on_train.stats != on_all.stats


def test_feature_matrix_csv(cohort):
    recs = cohort.records[:3]
    feat = Featurizer(cohort.schema).fit(cohort.records)
    lines = feature_matrix_csv(feat, recs, include_ids=True).splitlines()
    assert lines[0].split(",")[0] == "patient_id" and lines[0].endswith(",label")
    assert len(lines) == 4
    assert len(lines[1].split(",")) == feat.dim + 2


def test_labels_of_rejects_unlabeled():
    with pytest.raises(BaselineError):
        labels_of([Record("a", {}, None)])


# --------------------------------------------------------------- logreg

def test_logreg_negative_l2():
    with pytest.raises(BaselineError):
        LogregConfig(l2=-1)


def test_logreg_separable():
    rng = np.random.default_rng(0)
    x = rng.normal(size=(80, 3))
    y = (x[:, 0] + 0.5 * x[:, 1] > 0).astype(float)
    model = train_logreg(x, y, l2=1e-4)
    assert auc(model.predict_proba(x), y) == 1.0


def test_logreg_identical_labels_gives_base_rate():
    rng = np.random.default_rng(1)
    x = rng.normal(size=(50, 4))
    p = train_logreg(x, np.ones(50), l2=1.0).predict_proba(rng.normal(size=(10, 4)))
    assert np.all(p > 0.9) and np.ptp(p) < 0.05


def test_logreg_gradient_finite_difference():
    rng = np.random.default_rng(2)
    x, y = rng.normal(size=(30, 5)), rng.integers(0, 2, 30).astype(float)
    w, b = rng.normal(size=5), 0.3
    _, gw, gb = logreg_objective(w, b, x, y, 0.1)
    h = 1e-6
    for j in range(5):
        e = np.zeros(5)
        e[j] = h
        num = (logreg_objective(w + e, b, x, y, 0.1)[0] - logreg_objective(w - e, b, x, y, 0.1)[0]) / (2 * h)
        assert abs(num - gw[j]) / max(abs(num), abs(gw[j]), 1e-8) < 1e-6
    num_b = (logreg_objective(w, b + h, x, y, 0.1)[0] - logreg_objective(w, b - h, x, y, 0.1)[0]) / (2 * h)
    assert abs(num_b - gb) / max(abs(num_b), abs(gb)) < 1e-6


# ------------------------------------------------------------------ MLP

XOR_X = np.array([[0, 0], [0, 1], [1, 0], [1, 1]], float)
XOR_Y = np.array([0, 1, 1, 0], float)


def test_mlp_xor():
    model = train_mlp(XOR_X, XOR_Y, MlpConfig(hidden=(8,), lr=1e-2, epochs=500, batch_size=4, weight_decay=0.0))
    assert np.all((model.predict_proba(XOR_X) >= 0.5) == XOR_Y.astype(bool))


def test_mlp_no_hidden_layers():
    with pytest.raises(BaselineError):
        MlpConfig(hidden=())


def test_mlp_deterministic(cohort):
    feat = Featurizer(cohort.schema).fit(cohort.records)
    x, y = feat.transform(cohort.records), labels_of(cohort.records)
    cfg = MlpConfig(hidden=(16,), epochs=3)
    a, b = train_mlp(x, y, cfg, seed=4), train_mlp(x, y, cfg, seed=4)
    assert all(np.array_equal(u, v) for u, v in zip(a.weights, b.weights))
    p = a.predict_proba(x)
    assert np.all((p >= 0) & (p <= 1))


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_mlp_non_finite_aborts():
    with pytest.raises(BaselineError):
        train_mlp(np.array([[np.inf, 0.0], [1.0, 2.0]]), np.array([0.0, 1.0]), MlpConfig(hidden=(2,), epochs=1))


def test_baselines_learn_strong_signal(cohort):
    plan = make_splits(cohort, 0)
    feat = fit_featurizer(cohort, plan.train_ids)
    tr, te = cohort.subset(plan.train_ids), cohort.subset(plan.test_ids)
    xtr, ytr, xte, yte = feat.transform(tr), labels_of(tr), feat.transform(te), labels_of(te)
    assert auc(train_logreg(xtr, ytr).predict_proba(xte), yte) > 0.85
    assert auc(train_mlp(xtr, ytr, MlpConfig(epochs=30), seed=0).predict_proba(xte), yte) > 0.8
    assert Label.MDD in {r.label for r in tr}
