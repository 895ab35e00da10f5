import warnings

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from dcswin.metrics import (ConfusionMatrix, f1_scores, format_table, format_tsv, mean_iou,
                            overall_accuracy, per_class_iou, pixel_accuracy)

T, P = [0, 0, 1, 1], [0, 1, 1, 1]


def cm_of(t, p, K=2, **kw):
    return ConfusionMatrix(K, **kw).accumulate(t, p)


def test_hand_example():
    cm = cm_of(T, P)
    np.testing.assert_array_equal(cm.counts, [[1, 1], [0, 2]])
    assert overall_accuracy(cm) == 0.75
    np.testing.assert_allclose(per_class_iou(cm), [1 / 2, 2 / 3])
    assert mean_iou(cm) == pytest.approx(7 / 12)
    s = f1_scores(cm)
    np.testing.assert_allclose(s.f1, [2 / 3, 4 / 5])
    assert s.mean_f1 == pytest.approx(11 / 15)


def test_counts_identities():
    cm = cm_of([0, 1, 2, 2, 1], [0, 2, 2, 1, 1], K=3)
    np.testing.assert_array_equal(cm.tp + cm.fp + cm.fn + cm.tn, cm.total)
    np.testing.assert_array_equal(cm.tp, np.diag(cm.counts))


def test_perfect_and_disjoint():
    y = np.array([0, 1, 2, 2])
    cm = cm_of(y, y, K=3)
    assert overall_accuracy(cm) == mean_iou(cm) == f1_scores(cm).mean_f1 == 1.0
    assert not (cm.counts - np.diag(np.diag(cm.counts))).any()
    assert mean_iou(cm_of([0, 0], [1, 1])) == 0.0


def test_absent_class_f1_is_zero_with_warning():
    with pytest.warns(RuntimeWarning, match="precision"):
        s = f1_scores(cm_of([0, 1, 0, 1], [0, 0, 0, 0]))
    assert s.f1[1] == 0


def test_empty_map_and_errors():
    cm = ConfusionMatrix(3)
    cm.accumulate([], [])
    assert cm.total == 0
    with pytest.raises(ValueError):
        overall_accuracy(cm)
    with pytest.raises(ValueError, match="outside"):
        cm.accumulate([0, 3], [0, 0])
    with pytest.raises(ValueError, match="differ"):
        cm.accumulate([0, 1], [0])


def test_ignore_label():
    cm = cm_of([0, 255, 1], [0, 1, 0], ignore_label=255)
    assert cm.total == 2


def test_uniform_random_oa(rng):
    cm = cm_of(rng.integers(0, 2, 100_000), rng.integers(0, 2, 100_000))
    assert abs(overall_accuracy(cm) - 0.5) <= 0.05


def test_report_order():
    cm = cm_of(T, P, class_names=["road", "car"])
    names = [line.split("\t")[0] for line in format_tsv(cm).splitlines()]
    assert names == ["F1_road", "F1_car", "mean_f1", "oa", "miou"]
    assert format_tsv(cm).splitlines()[3] == "oa\t0.7500"
    assert "75.00" in format_table(cm, title="t")


def test_pixel_accuracy_ignores():
    assert pixel_accuracy([0, 1, 255], [0, 0, 0], ignore_label=255) == 0.5


labels = st.integers(2, 6).flatmap(
    lambda K: st.tuples(st.just(K), st.integers(1, 60)).flatmap(
        lambda kn: st.tuples(st.just(kn[0]),
                             st.lists(st.integers(0, kn[0] - 1), min_size=kn[1], max_size=kn[1]),
                             st.lists(st.integers(0, kn[0] - 1), min_size=kn[1], max_size=kn[1]))))


@settings(max_examples=200, deadline=None)
@given(labels)
def test_f1_iou_identity(case):
    K, t, p = case
    cm = cm_of(t, p, K)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", RuntimeWarning)
        f1 = f1_scores(cm).f1
    iou = per_class_iou(cm)
    ok = ~np.isnan(iou)
    np.testing.assert_allclose(f1[ok], 2 * iou[ok] / (1 + iou[ok]), atol=1e-9)
    assert (iou[ok] <= f1[ok] + 1e-12).all()
    assert overall_accuracy(cm) == np.trace(cm.counts) / cm.total


@settings(max_examples=100, deadline=None)
@given(labels, st.randoms(use_true_random=False))
def test_class_permutation_invariance(case, rnd):
    K, t, p = case
    perm = list(range(K))
    rnd.shuffle(perm)
    perm = np.array(perm)
    a, b = cm_of(t, p, K), cm_of(perm[t], perm[p], K)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", RuntimeWarning)
        fa, fb = f1_scores(a), f1_scores(b)
    assert overall_accuracy(a) == overall_accuracy(b)
    assert mean_iou(a) == pytest.approx(mean_iou(b), abs=1e-12)
    assert fa.mean_f1 == pytest.approx(fb.mean_f1, abs=1e-12)
    np.testing.assert_allclose(fb.f1[perm], fa.f1)


@settings(max_examples=100, deadline=None)
@given(labels, st.integers(0, 2**32 - 1))
def test_tiling_additivity(case, seed):
    K, t, p = case
    t, p = np.array(t), np.array(p)
    cuts = np.sort(np.random.default_rng(seed).integers(0, len(t) + 1, 3))
    parts = ConfusionMatrix(K)
    for lo, hi in zip(np.r_[0, cuts], np.r_[cuts, len(t)]):
        parts = parts + cm_of(t[lo:hi], p[lo:hi], K)
    np.testing.assert_array_equal(parts.counts, cm_of(t, p, K).counts)
