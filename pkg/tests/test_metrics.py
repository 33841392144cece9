import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from miaudit.attacks import MembershipRecords
from miaudit.metrics import (AttackReport, ConfusionCounts, accuracy_at_ratio, aggregate_mean_std,
                             confusion, evaluate, precision_at_ratio, ratio_counts,
                             report_from_confusion, resample_eval_ratio, resample_indices,
                             threshold_sweep)


def constructed(tp, fn, fp, tn):
    labels = np.array([1] * (tp + fn) + [0] * (fp + tn), bool)
    preds = np.array([1] * tp + [0] * fn + [1] * fp + [0] * tn, bool)
    return preds, labels


def toy_records(n_pos, n_neg):
    n = n_pos + n_neg
    return MembershipRecords(np.arange(n, dtype=float)[:, None], ["x"], np.arange(n) < n_pos,
                             np.zeros(n, int), np.zeros(n, int), np.arange(n).astype(str))


def test_confusion_basic_cases():
    labels = np.array([1, 1, 0, 0, 1], bool)
    c = confusion(labels, labels)
    assert c.fp == 0 and c.fn == 0
    c = confusion(~labels, labels)
    assert c.tp == 0 and c.tn == 0
    assert confusion(*constructed(90, 10, 60, 40)) == ConfusionCounts(tp=90, fp=60, tn=40, fn=10)


def test_confusion_errors():
    with pytest.raises(ValueError):
        confusion([1, 0], [1])
    with pytest.raises(ValueError):
        confusion([], [])


def test_report_arithmetic():
    r = report_from_confusion(ConfusionCounts(tp=90, fp=60, tn=40, fn=10))
    assert r.recall_pos == pytest.approx(0.90)
    assert r.far == pytest.approx(0.60)
    assert r.balanced_accuracy == pytest.approx(0.65)
    assert r.precision_pos == pytest.approx(0.60)
    assert r.accuracy == pytest.approx(130 / 200)
    assert r.precision_neg == pytest.approx(0.8)
    assert r.f1_pos == pytest.approx(0.72)


def test_zero_r_report_at_5_to_1():
    r = report_from_confusion(ConfusionCounts(tp=5000, fp=1000, tn=0, fn=0))
    assert round(100 * r.precision_pos, 2) == 83.33
    assert r.recall_pos == 1.0 and r.far == 1.0 and r.balanced_accuracy == 0.5
    assert r.precision_neg is None


def test_undefined_far_marker():
    r = report_from_confusion(ConfusionCounts(tp=3, fp=0, tn=0, fn=1))
    assert r.far is None and r.recall_neg is None and r.balanced_accuracy is None
    assert r.support_neg == 0


@pytest.mark.parametrize("r,paper", [(5, 0.8730), (1, 0.5768), (0.2, 0.2141)])
def test_precision_at_ratio_table_values(r, paper):
    assert abs(precision_at_ratio(0.8785, 0.6445, r) - paper) <= 0.001


def test_precision_at_ratio_formula_values():
    assert precision_at_ratio(0.8785, 0.6445, 5) == pytest.approx(4.3925 / 5.037)
    with pytest.raises(ZeroDivisionError):
        precision_at_ratio(0.0, 0.0, 1)
    with pytest.raises(ValueError):
        precision_at_ratio(0.5, 0.5, 0)


@settings(max_examples=100, deadline=None)
@given(st.floats(0.01, 1), st.floats(0.01, 1), st.floats(0.01, 100), st.floats(1.01, 10))
def test_precision_at_ratio_monotone(tpr, fpr, r, factor):
    assert precision_at_ratio(tpr, fpr, r * factor) >= precision_at_ratio(tpr, fpr, r)
    assert precision_at_ratio(tpr, fpr, 1) == pytest.approx(tpr / (tpr + fpr))


@settings(max_examples=100, deadline=None)
@given(st.integers(0, 50), st.integers(0, 50), st.integers(0, 50), st.integers(0, 50))
def test_report_identities(tp, fn, fp, tn):
    if tp + fn + fp + tn == 0:
        return
    r = report_from_confusion(ConfusionCounts(tp=tp, fp=fp, tn=tn, fn=fn))
    if r.far is not None:
        assert r.far + r.recall_neg == 1
    if r.balanced_accuracy is not None:
        assert r.balanced_accuracy == pytest.approx((r.recall_pos + r.recall_neg) / 2)
    for name in ("accuracy", "far", "precision_pos", "recall_pos", "precision_neg", "recall_neg", "f1_pos"):
        v = getattr(r, name)
        assert v is None or 0 <= v <= 1


def test_accuracy_at_ratio_matches_resampling():
    rng = np.random.default_rng(0)
    labels = np.r_[np.ones(5000, bool), np.zeros(5000, bool)]
    preds = np.where(labels, rng.random(10000) < 0.8, rng.random(10000) < 0.3)
    base = evaluate(preds, labels)
    for r in (5, 1, 0.2):
        accs = [evaluate(preds[i], labels[i]).accuracy
                for i in (resample_indices(labels, r, s) for s in range(20))]
        assert np.mean(accs) == pytest.approx(accuracy_at_ratio(base.recall_pos, base.far, r), abs=0.01)


def test_ratio_counts():
    assert ratio_counts(5000, 1000, 1) == (1000, 1000)
    assert ratio_counts(5000, 1000, 0.2) == (200, 1000)
    assert ratio_counts(5000, 1000, 5) == (5000, 1000)
    assert ratio_counts(100, 1000, 5) == (100, 20)
    with pytest.raises(ValueError):
        ratio_counts(1, 1000, 0.0001)
    with pytest.raises(ValueError):
        ratio_counts(0, 10, 1)


def test_resample_eval_ratio_keeps_records():
    recs = toy_records(5000, 1000)
    sub = resample_eval_ratio(recs, 0.2, seed=3)
    assert sub.counts() == (200, 1000)
    assert set(sub.sample_id) <= set(recs.sample_id)
    np.testing.assert_array_equal(sub.features[:, 0], sub.sample_id.astype(float))


def test_balanced_accuracy_invariant_under_resampling():
    rng = np.random.default_rng(1)
    labels = np.r_[np.ones(5000, bool), np.zeros(1000, bool)]
    preds = np.where(labels, rng.random(6000) < 0.75, rng.random(6000) < 0.4)
    full = evaluate(preds, labels).balanced_accuracy
    for r in (1, 0.2):
        vals = [evaluate(preds[i], labels[i]).balanced_accuracy
                for i in (resample_indices(labels, r, s) for s in range(50))]
        assert abs(np.mean(vals) - full) < 0.01


def test_aggregate_mean_std():
    def rep(ba):
        return AttackReport(ba, ba, 0.5, 0.5, 0.5, 0.5, 0.5, 0.5, 10, 10)

    agg = aggregate_mean_std([rep(0.5), rep(0.7)])
    assert agg["balanced_accuracy"]["mean"] == pytest.approx(0.6)
    assert agg["balanced_accuracy"]["std"] == pytest.approx(0.1)
    single = aggregate_mean_std([rep(0.55)])
    assert single["accuracy"] == {"mean": 0.55, "std": 0.0}
    assert aggregate_mean_std([rep(0.6)] * 10)["balanced_accuracy"]["std"] == pytest.approx(0.0, abs=1e-12)
    assert agg["support_pos"] == 20
    undefined = AttackReport(None, None, None, 1.0, 1.0, None, None, 1.0, 3, 0)
    assert aggregate_mean_std([undefined])["far"] is None


def test_threshold_sweep_trades_far_for_recall():
    rng = np.random.default_rng(2)
    labels = rng.random(2000) < 0.5
    scores = np.clip(labels * 0.2 + rng.random(2000) * 0.8, 0, 1)
    rows = threshold_sweep(scores, labels)
    fars = [r["far"] for r in rows]
    assert fars == sorted(fars, reverse=True)
