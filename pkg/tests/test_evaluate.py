import math

import numpy as np
import pytest

from conftest import boost_head, tiny_config
from oracles import bilinear_half_pixel
from pattlite.data import Dataset, SubsetList, preprocess_scale
from pattlite.evaluate import (ConfusionMatrix, EvalReport, EvaluationError, argmax_lowest, cross_validate, evaluate,
                               export_report, gradcam, read_metrics, read_pgm, read_report, report_from_predictions,
                               write_pgm)
from pattlite.model import Activation, Dense, GlobalAveragePool, Model, ParameterStore, Softmax, build_model
from pattlite.tensor import Rng

NAMES = ["a", "b", "c"]


def test_perfect_and_always_wrong():
    r = report_from_predictions([0, 1, 2, 2], [0, 1, 2, 2], NAMES)
    assert r.overall_accuracy == 1.0 and np.count_nonzero(r.confusion.counts - np.diag(np.diag(r.confusion.counts))) == 0
    r = report_from_predictions([1, 1, 1], [0, 2, 0], NAMES)
    assert r.overall_accuracy == 0.0 and r.confusion.counts[1].tolist() == [2, 0, 1]
    assert r.per_class_accuracy == [None, 0.0, None] and r.mean_class_accuracy == 0.0


def test_hand_tally_ten_samples():
    labels = [0, 0, 0, 1, 1, 1, 1, 2, 2, 2]
    preds = [0, 1, 0, 1, 1, 2, 1, 2, 0, 2]
    expect = [[2, 1, 0],
              [0, 3, 1],
              [1, 0, 2]]
    r = report_from_predictions(labels, preds, NAMES)
    assert r.confusion.counts.tolist() == expect
    assert r.overall_accuracy == 0.7
    assert r.per_class_accuracy == [2 / 3, 3 / 4, 2 / 3]
    assert math.isclose(r.mean_class_accuracy, (2 / 3 + 3 / 4 + 2 / 3) / 3)


def test_trace_identity_randomized():
    g = np.random.default_rng(0)
    for _ in range(50):
        k = int(g.integers(2, 8))
        n = int(g.integers(1, 100))
        labels, preds = g.integers(0, k, n), g.integers(0, k, n)
        r = report_from_predictions(labels, preds, [str(i) for i in range(k)])
        c = r.confusion.counts
        assert r.overall_accuracy == np.trace(c) / c.sum() == np.mean(labels == preds)


def test_mean_class_invariant_to_duplication():
    labels, preds = [0, 0, 1, 1, 2], [0, 1, 1, 1, 0]
    a = report_from_predictions(labels, preds, NAMES)
    b = report_from_predictions(labels + [0, 0] * 5, preds + [0, 1] * 5, NAMES)
    assert a.per_class_accuracy[1:] == b.per_class_accuracy[1:]


def test_argmax_ties_lowest():
    assert argmax_lowest(np.array([[0.4, 0.4, 0.2], [0.1, 0.45, 0.45]])).tolist() == [0, 1]


def _toy_eval(n=7):
    g = np.random.default_rng(3)
    imgs = [g.uniform(0, 255, (8, 8, 3)) for _ in range(n)]
    ds = Dataset.from_arrays(imgs, [i % 3 for i in range(n)], NAMES, "test")
    return build_model(tiny_config(), Rng(1)), ds


def test_subset_full_equals_plain():
    model, ds = _toy_eval()
    plain = evaluate(model, ds)
    sub = evaluate(model, ds, SubsetList("all", list(range(len(ds)))))
    assert np.array_equal(plain.confusion.counts, sub.confusion.counts)
    assert plain.overall_accuracy == sub.overall_accuracy and sub.subset == "all"
    with pytest.raises(EvaluationError):
        evaluate(model, ds, SubsetList("none", []))


def test_cross_validate_aggregation():
    model, ds = _toy_eval(12)
    folds = [(ds.select(range(0, 6)), ds.select(range(6, 12))), (ds.select(range(6, 12)), ds.select(range(0, 6))),
             (ds.select(range(3, 9)), ds.select([0, 1, 2, 9, 10, 11]))]
    cv = cross_validate(folds, lambda tr, te: model)
    accs = [evaluate(model, te).overall_accuracy for _, te in folds]
    assert cv.fold_accuracies == accs
    assert abs(cv.mean_accuracy - math.fsum(accs) / len(accs)) < 1e-12
    with pytest.raises(ValueError):
        cross_validate(folds[:1], lambda tr, te: model)


def test_cross_validate_all_perfect():
    from pattlite.evaluate import CrossValidationReport
    assert CrossValidationReport([1.0] * 10).mean_accuracy == 1.0


# -- Grad-CAM ---------------------------------------------------------------

def toy_network(c=4, classes=3, size=6, seed=0):
    """input -> relu -> global average pool -> dense -> softmax."""
    store = ParameterStore()
    dense = Dense("classifier", c, classes)
    dense.init_params(store, Rng(seed), np.float64)
    g = np.random.default_rng(seed)
    store.tensor("classifier/kernel")[...] = g.normal(size=(c, classes))
    store.tensor("classifier/bias")[...] = g.normal(size=classes)
    records = [Activation("act", "relu"), GlobalAveragePool("gap"), dense, Softmax("softmax")]
    return Model(records, store, (size, size, c), num_backbone=1)


def test_gradcam_closed_form():
    model = toy_network()
    x = np.random.default_rng(5).normal(size=(6, 6, 4))
    target = 1
    w = model.store.tensor("classifier/kernel")[:, target]
    a = np.maximum(x, 0)
    raw = np.maximum(a @ (w / 36.0), 0)
    ref = bilinear_half_pixel(raw[:, :, None], 224, 224)[:, :, 0]
    ref = (ref - ref.min()) / (ref.max() - ref.min())
    got = gradcam(model, x, target, "act")
    assert got.shape == (224, 224)
    assert np.abs(got - ref).max() < 1e-6


def test_gradcam_zero_weights():
    model = build_model(tiny_config(), Rng(0))
    model.store.tensor("classifier/kernel")[...] = 0
    x = np.random.default_rng(0).uniform(-1, 1, (8, 8, 3))
    hm = gradcam(model, x, 0)
    assert hm.shape == (224, 224) and not hm.any()


def test_gradcam_range_and_bias_invariance():
    model = build_model(tiny_config(), Rng(3))
    boost_head(model, seed=3)
    x = preprocess_scale(np.random.default_rng(1).uniform(0, 255, (8, 8, 3)))
    peaks = []
    for cls in range(3):
        hm = gradcam(model, x, cls, "conv_dw_2_relu", out_size=32)
        assert hm.shape == (32, 32) and hm.min() >= 0 and hm.max() <= 1
        peaks.append(hm.max())
    assert peaks == [1.0, 1.0, 1.0]
    before = gradcam(model, x, 0)
    model.store.tensor("classifier/bias")[2] += 5.0
    assert np.array_equal(gradcam(model, x, 0), before)


def test_gradcam_errors():
    model = build_model(tiny_config(), Rng(0))
    x = np.zeros((8, 8, 3))
    with pytest.raises(EvaluationError):
        gradcam(model, x, 0, "nope")
    with pytest.raises(EvaluationError):
        gradcam(model, x, 0, "gap")
    with pytest.raises(EvaluationError):
        gradcam(model, x, 7)


# -- export -----------------------------------------------------------------

def test_export_round_trip(tmp_path):
    r = report_from_predictions([0, 0, 1, 2, 2, 2], [0, 1, 1, 2, 0, 2], NAMES, subset="hard")
    hm = np.linspace(0, 1, 224 * 224).reshape(224, 224)
    files = export_report(r, tmp_path, {"map": hm})
    assert [f.name for f in files] == ["metrics.csv", "confusion.csv", "map.pgm"]
    back = read_report(tmp_path)
    assert back.class_names == r.class_names and back.subset == "hard"
    assert np.array_equal(back.confusion.counts, r.confusion.counts)
    m = read_metrics(tmp_path)
    assert m["overall"] == r.overall_accuracy and m["mean_class"] == r.mean_class_accuracy
    assert list(m["per_class"].values()) == r.per_class_accuracy
    rows = (tmp_path / "confusion.csv").read_text().splitlines()[1:]
    assert [sum(int(v) for v in row.split(",")[1:]) for row in rows] == r.class_counts.tolist()
    data = (tmp_path / "map.pgm").read_bytes()
    assert data.startswith(b"P5\n224 224\n255\n")
    assert read_pgm(tmp_path / "map.pgm").shape == (224, 224)


def test_pgm_values(tmp_path):
    write_pgm(np.array([[0.0, 0.5], [1.0, 0.25]]), tmp_path / "x.pgm")
    assert read_pgm(tmp_path / "x.pgm").tolist() == [[0, 128], [255, 64]]


def test_empty_report():
    r = EvalReport(NAMES, ConfusionMatrix(np.zeros((3, 3), np.int64)))
    assert r.overall_accuracy == 0.0 and r.mean_class_accuracy == 0.0
