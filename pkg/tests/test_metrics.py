"""Confusion-matrix accounting and the two accuracy summaries."""

import numpy as np
import pytest

from segdistill.errors import DataError, DimensionError
from segdistill.metrics import ConfusionMatrix, metrics


def test_update_counts_pairs():
    cm = ConfusionMatrix(2)
    truth = np.array([[0, 0, 1], [1, 1, 0]], dtype=np.uint8)
    pred = np.array([[0, 1, 1], [1, 0, 0]], dtype=np.uint8)
    cm.update(pred, truth)
    np.testing.assert_array_equal(cm.counts, [[2, 1], [1, 2]])


def test_void_truth_excluded():
    cm = ConfusionMatrix(2)
    truth = np.array([[255, 0]], dtype=np.uint8)
    pred = np.array([[1, 1]], dtype=np.uint8)
    cm.update(pred, truth)
    np.testing.assert_array_equal(cm.counts, [[0, 1], [0, 0]])


def test_update_rejects_out_of_range_prediction():
    cm = ConfusionMatrix(2)
    with pytest.raises(DataError):
        cm.update(np.array([[5]], np.uint8), np.array([[0]], np.uint8))


def test_update_rejects_shape_mismatch():
    cm = ConfusionMatrix(2)
    with pytest.raises(DimensionError):
        cm.update(np.zeros((2, 2), np.uint8), np.zeros((2, 3), np.uint8))


def test_handbook_example_is_exact():
    cm = ConfusionMatrix(2)
    cm.counts[:] = [[8, 2], [1, 9]]
    assert cm.per_class_accuracy() == 85.0          # mean of 80% and 90%
    assert cm.global_accuracy() == 85.0             # 17 of 20


def test_per_class_is_mean_of_recall_percentages():
    cm = ConfusionMatrix(2)
    cm.counts[:] = [[1, 3], [0, 4]]                 # recalls 25% and 100%
    assert cm.per_class_accuracy() == pytest.approx(62.5)
    assert cm.global_accuracy() == pytest.approx(62.5)


def test_absent_class_excluded_from_mean():
    cm = ConfusionMatrix(3)
    cm.counts[:] = [[4, 0, 0], [0, 0, 0], [0, 0, 2]]    # class 1 never occurs
    assert cm.per_class_accuracy() == 100.0


def test_merge_is_additive(gen):
    for _ in range(20):
        a = gen.integers(0, 50, size=(3, 3))
        b = gen.integers(0, 50, size=(3, 3))
        cm_a, cm_b, cm_ab = (ConfusionMatrix(3) for _ in range(3))
        cm_a.counts[:] = a
        cm_b.counts[:] = b
        cm_ab.counts[:] = a + b
        merged = ConfusionMatrix(3)
        merged.merge(cm_a)
        merged.merge(cm_b)
        np.testing.assert_array_equal(merged.counts, cm_ab.counts)
        assert merged.global_accuracy() == pytest.approx(cm_ab.global_accuracy())


def test_permutation_equivariance(gen):
    for _ in range(20):
        m = gen.integers(0, 30, size=(4, 4))
        m[np.diag_indices(4)] += 1                  # keep every class present
        perm = gen.permutation(4)
        cm = ConfusionMatrix(4)
        cm.counts[:] = m
        cm_p = ConfusionMatrix(4)
        cm_p.counts[:] = m[np.ix_(perm, perm)]
        assert cm_p.per_class_accuracy() == pytest.approx(cm.per_class_accuracy())
        assert cm_p.global_accuracy() == pytest.approx(cm.global_accuracy())


def test_class_recalls_nan_for_absent():
    cm = ConfusionMatrix(2)
    cm.counts[:] = [[3, 1], [0, 0]]
    r = cm.class_recalls()
    assert r[0] == pytest.approx(75.0)
    assert np.isnan(r[1])


def test_metrics_dict():
    cm = ConfusionMatrix(2)
    cm.counts[:] = [[8, 2], [1, 9]]
    m = metrics(cm)
    assert m == {"per_class": 85.0, "global": 85.0}
