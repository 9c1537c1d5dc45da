import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from weevilwatch.classifier import (
    ClassificationMetrics,
    SplitSpec,
    TrainParams,
    bce_loss,
    classify,
    classify_many,
    evaluate,
    evaluate_scores,
    load_model,
    load_scores,
    logistic_loss_and_grad,
    metrics_from_predictions,
    pool_features,
    save_model,
    split_dataset,
    train,
)
from weevilwatch.errors import DegenerateDataError, DomainError, FormatError, ValidationError
from weevilwatch.ingest import DatasetManifest, ManifestRecord


def manifest(n_pos, n_neg):
    recs = [ManifestRecord(f"p{i}.wav", "infested") for i in range(n_pos)]
    recs += [ManifestRecord(f"n{i}.wav", "not_infested") for i in range(n_neg)]
    return DatasetManifest(recs)


def blobs(rng, n=60, d=4, sep=3.0):
    X = np.vstack([rng.normal(sep, 1, (n, d)), rng.normal(-sep, 1, (n, d))])
    y = np.array([1] * n + [0] * n)
    return X, y


def test_pool_features():
    F = np.array([[1.0, 2.0], [3.0, 6.0]])
    np.testing.assert_array_equal(pool_features(F), [2.0, 4.0, 1.0, 2.0])
    with pytest.raises(DomainError):
        pool_features(np.zeros((0, 3)))


# ---------------------------------------------------------------- splitting

def test_split_ten_records():
    train_m, val_m, test_m = split_dataset(manifest(5, 5), SplitSpec(seed=3))
    assert (len(train_m), len(val_m), len(test_m)) == (8, 1, 1)


def test_split_two_hundred_stratified():
    parts = split_dataset(manifest(100, 100), SplitSpec(seed=1))
    assert [len(p) for p in parts] == [160, 20, 20]
    for p in parts:
        assert p.counts["infested"] == p.counts["not_infested"]


@settings(max_examples=60, deadline=None)
@given(st.integers(0, 60), st.integers(0, 60), st.integers(0, 2**31), st.booleans(),
       st.sampled_from([(0.8, 0.1, 0.1), (0.6, 0.2, 0.2), (1.0, 0.0, 0.0), (0.5, 0.5, 0.0)]))
def test_split_partitions(n_pos, n_neg, seed, stratify, ratios):
    m = manifest(n_pos, n_neg)
    parts = split_dataset(m, SplitSpec(ratios, seed, stratify))
    paths = [r.path for p in parts for r in p.records]
    assert sorted(paths) == sorted(r.path for r in m.records)
    n = n_pos + n_neg
    assert len(parts[1]) == math.floor(n * ratios[1] + 1e-9)
    assert len(parts[2]) == math.floor(n * ratios[2] + 1e-9)
    assert split_dataset(m, SplitSpec(ratios, seed, stratify)) == parts


@pytest.mark.parametrize("ratios", [(0.8, 0.1), (0.5, 0.5, 0.5), (1.1, -0.05, -0.05)])
def test_split_bad_ratios(ratios):
    with pytest.raises(ValidationError):
        SplitSpec(ratios)


def test_split_rejects_unlabeled():
    with pytest.raises(ValidationError):
        split_dataset(DatasetManifest([ManifestRecord("a.wav", "unlabeled")]))


# ---------------------------------------------------------------- training

def test_gradient_matches_finite_differences(rng):
    X = rng.standard_normal((12, 5))
    y = rng.integers(0, 2, 12)
    w, b = rng.standard_normal(5), 0.3
    _, gw, gb = logistic_loss_and_grad(w, b, X, y)
    h = 1e-6
    for j in range(5):
        e = np.zeros(5)
        e[j] = h
        num = (logistic_loss_and_grad(w + e, b, X, y)[0] - logistic_loss_and_grad(w - e, b, X, y)[0]) / (2 * h)
        assert gw[j] == pytest.approx(num, abs=1e-7)
    num_b = (logistic_loss_and_grad(w, b + h, X, y)[0] - logistic_loss_and_grad(w, b - h, X, y)[0]) / (2 * h)
    assert gb == pytest.approx(num_b, abs=1e-7)


def test_loss_matches_bce(rng):
    X = rng.standard_normal((6, 3))
    y = np.array([1, 0, 1, 1, 0, 0])
    w, b = rng.standard_normal(3), -0.2
    p = 1 / (1 + np.exp(-(X @ w + b)))
    expected = np.mean([bce_loss(pi, yi) for pi, yi in zip(p, y)])
    assert logistic_loss_and_grad(w, b, X, y)[0] == pytest.approx(expected, rel=1e-12)


def test_bce_clamps():
    assert bce_loss(1.0, 1) == pytest.approx(0.0, abs=1e-11)
    assert math.isfinite(bce_loss(0.0, 1))
    assert bce_loss(0.5, 0) == pytest.approx(math.log(2))


@pytest.mark.parametrize("optimizer,lr", [("adam", 1e-2), ("sgd", 0.5)])
def test_logistic_separates_blobs(rng, optimizer, lr):
    X, y = blobs(rng)
    model = train("logistic", X, y, TrainParams(learning_rate=lr, epochs=30, optimizer=optimizer))
    assert evaluate(model, X, y).accuracy == 1.0
    assert model.history[-1] < model.history[0]


def test_default_params_reduce_loss(rng):
    X, y = blobs(rng, sep=1.0)
    model = train("logistic", X, y, TrainParams(epochs=20))
    assert model.history[-1] < model.history[0] < math.log(2) + 1e-12


def test_nearest_centroid(rng):
    X, y = blobs(rng)
    model = train("nearest_centroid", X, y)
    assert evaluate(model, X, y).accuracy == 1.0
    label, score = classify(model, X[0])
    assert label == "infested" and 0.5 <= score <= 1.0


def test_training_is_deterministic(rng):
    X, y = blobs(rng, sep=0.5)
    a = train("logistic", X, y, TrainParams(epochs=5, seed=7))
    b = train("logistic", X, y, TrainParams(epochs=5, seed=7))
    np.testing.assert_array_equal(a.weights, b.weights)


def test_constant_feature_does_not_blow_up(rng):
    X, y = blobs(rng)
    X[:, 1] = 1e-15
    model = train("logistic", X, y, TrainParams(learning_rate=1e-2, epochs=10))
    assert model.feature_scale[1] == 1.0
    assert np.all(np.isfinite(model.weights))


def test_single_class_rejected(rng):
    with pytest.raises(DegenerateDataError):
        train("logistic", rng.standard_normal((5, 2)), [1] * 5)


def test_unknown_kind(rng):
    X, y = blobs(rng, n=3)
    with pytest.raises(DomainError):
        train("svm", X, y)


def test_dimension_mismatch(rng):
    X, y = blobs(rng, n=3)
    model = train("nearest_centroid", X, y)
    with pytest.raises(DomainError):
        classify(model, np.zeros(7))


@pytest.mark.parametrize("kind", ["logistic", "nearest_centroid"])
def test_model_roundtrip(tmp_path, rng, kind):
    X, y = blobs(rng, n=10)
    model = train(kind, X, y, TrainParams(epochs=3))
    save_model(model, tmp_path / "m.json")
    back = load_model(tmp_path / "m.json")
    np.testing.assert_array_equal(classify_many(back, X)[1], classify_many(model, X)[1])


def test_model_bad_format(tmp_path):
    (tmp_path / "m.json").write_text('{"format": "other"}')
    with pytest.raises(FormatError):
        load_model(tmp_path / "m.json")


# ---------------------------------------------------------------- metrics

def test_metrics_from_counts():
    m = ClassificationMetrics.from_counts(tp=8, fp=2, tn=9, fn=1)
    assert m.accuracy == pytest.approx(17 / 20)
    assert m.precision == pytest.approx(0.8)
    assert m.recall == pytest.approx(8 / 9)
    assert m.f1 == pytest.approx(2 * 0.8 * (8 / 9) / (0.8 + 8 / 9))


def test_metrics_degenerate_flags():
    m = metrics_from_predictions([0, 0, 0], [0, 0, 0])
    assert m.precision_degenerate and m.recall_degenerate
    assert m.precision == 0.0 and m.accuracy == 1.0
    with pytest.raises(DomainError):
        ClassificationMetrics.from_counts(0, 0, 0, 0)


@settings(max_examples=100, deadline=None)
@given(st.lists(st.tuples(st.booleans(), st.booleans()), min_size=1, max_size=80))
def test_metric_identities(pairs):
    t, p = zip(*pairs)
    m = metrics_from_predictions(t, p)
    n = len(pairs)
    assert m.tp + m.fp + m.tn + m.fn == n
    assert m.accuracy == pytest.approx((m.tp + m.tn) / n, abs=1e-12)
    assert 0 <= m.precision <= 1 and 0 <= m.recall <= 1 and 0 <= m.f1 <= 1
    if not m.precision_degenerate:
        assert m.precision == pytest.approx(m.tp / (m.tp + m.fp), abs=1e-12)
    if not m.recall_degenerate:
        assert m.recall == pytest.approx(m.tp / (m.tp + m.fn), abs=1e-12)


def test_external_scores(tmp_path):
    p = tmp_path / "s.csv"
    p.write_text("record_id,score\na,0.9\nb,0.2\nc,0.5\n")
    scores = load_scores(p)
    m = evaluate_scores(scores, {"a": "infested", "b": "not_infested", "c": "not_infested"})
    assert (m.tp, m.fp, m.tn, m.fn) == (1, 1, 1, 0)
    with pytest.raises(ValidationError):
        evaluate_scores(scores, {"zz": 1})


@pytest.mark.parametrize("body", ["record_id,score\na,1.5\n", "record_id,score\na,x\n",
                                  "record_id,score\na,0.1\na,0.2\n"])
def test_external_scores_rejects(tmp_path, body):
    p = tmp_path / "s.csv"
    p.write_text(body)
    with pytest.raises(ValidationError):
        load_scores(p)
