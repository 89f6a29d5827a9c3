import logging
from typing import Sequence

import numpy as np
from sklearn.metrics import accuracy_score
from sklearn.metrics import confusion_matrix as sk_confusion_matrix

from errors import EmptyInputError, ShapeError, ValidationError

logger = logging.getLogger(__name__)


def _as_labels(values: Sequence[int]) -> np.ndarray:
    return np.asarray(values, dtype=np.int64).reshape(-1)


def _checked(predictions: Sequence[int], truths: Sequence[int], what: str):
    p, t = _as_labels(predictions), _as_labels(truths)
    if p.shape != t.shape:
        raise ShapeError(f"{p.size} predictions for {t.size} labels")
    if p.size == 0:
        raise EmptyInputError(f"{what} of an empty prediction set")
    return p, t


def accuracy(predictions: Sequence[int], truths: Sequence[int]) -> float:
    p, t = _checked(predictions, truths, "accuracy")
    return float(accuracy_score(t, p))


def confusion_counts(predictions: Sequence[int], truths: Sequence[int], n_classes: int = 3) -> np.ndarray:
    p, t = _checked(predictions, truths, "confusion matrix")
    outside = (t < 0) | (t >= n_classes)
    if np.any(outside):
        raise ValidationError(f"true label {int(t[outside][0])} outside [0, {n_classes})")
    return sk_confusion_matrix(t, p, labels=list(range(n_classes))).astype(np.float64)


def confusion_matrix(predictions: Sequence[int], truths: Sequence[int], n_classes: int = 3) -> np.ndarray:
    """Rows are true labels, columns predictions, each row normalized to 1.

    A class missing from ``truths`` gets a row of NaN.
    """
    counts = confusion_counts(predictions, truths, n_classes)
    totals = counts.sum(axis=1, keepdims=True)
    absent = np.flatnonzero(totals[:, 0] == 0)
    if absent.size:
        logger.warning("classes %s absent from the evaluation labels; rows left undefined", absent.tolist())
    with np.errstate(invalid="ignore", divide="ignore"):
        return np.where(totals > 0, counts / np.where(totals > 0, totals, 1.0), np.nan)
