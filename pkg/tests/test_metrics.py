import logging

import numpy as np
import pytest

from errors import EmptyInputError, ShapeError, ValidationError
from metrics import accuracy, confusion_counts, confusion_matrix


def test_accuracy_extremes():
    assert accuracy([0, 1, 2, 1], [0, 1, 2, 1]) == 1.0
    assert accuracy([1, 2, 0], [0, 1, 2]) == 0.0
    assert accuracy([0, 0, 1, 1], [0, 1, 1, 1]) == 0.75


def test_accuracy_rejects_bad_input():
    with pytest.raises(EmptyInputError):
        accuracy([], [])
    with pytest.raises(ShapeError):
        accuracy([0, 1], [0])


def test_perfect_predictions_give_identity():
    truths = [0, 1, 2, 2, 1, 0]
    np.testing.assert_array_equal(confusion_matrix(truths, truths), np.eye(3))


def test_constant_predictor_fills_one_column():
    matrix = confusion_matrix([2] * 6, [0, 1, 2, 0, 1, 2])
    expected = np.zeros((3, 3))
    expected[:, 2] = 1.0
    np.testing.assert_array_equal(matrix, expected)


def test_rows_sum_to_one():
    gen = np.random.default_rng(0)
    matrix = confusion_matrix(gen.integers(0, 3, 200), gen.integers(0, 3, 200))
    np.testing.assert_allclose(matrix.sum(axis=1), 1.0)


def test_absent_class_row_is_undefined(caplog):
    with caplog.at_level(logging.WARNING, logger="metrics"):
        matrix = confusion_matrix([0, 1, 1], [0, 1, 0])
    assert np.all(np.isnan(matrix[2]))
    assert not np.any(np.isnan(matrix[:2]))
    assert "absent" in caplog.text


def test_confusion_counts():
    counts = confusion_counts([0, 2, 2, 1], [0, 2, 1, 1])
    assert counts[1, 2] == 1 and counts[1, 1] == 1 and counts.sum() == 4


@pytest.mark.parametrize("bad", [-1, 3])
def test_confusion_rejects_truths_outside_classes(bad):
    with pytest.raises(ValidationError):
        confusion_counts([0, 0, 0], [0, bad, 1])
