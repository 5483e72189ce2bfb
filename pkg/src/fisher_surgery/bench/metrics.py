import logging
import math
from enum import Enum
from typing import Sequence, Tuple, Union

import numpy as np
from scipy import stats

from ..models.data_classes import TaskKind
from ..utils.errors import DegenerateMetricError, InputError

logger = logging.getLogger(__name__)


class MetricKind(str, Enum):
    accuracy = "accuracy"
    matthews = "matthews"
    pearson = "pearson"


METRIC_RANGES = {
    MetricKind.accuracy: (0.0, 1.0),
    MetricKind.matthews: (-1.0, 1.0),
    MetricKind.pearson: (-1.0, 1.0),
}


def metric_range(kind: Union[MetricKind, str]) -> Tuple[float, float]:
    return METRIC_RANGES[MetricKind(kind)]


def metric_fits_task(kind: Union[MetricKind, str], task_kind: Union[TaskKind, str]) -> bool:
    if TaskKind(task_kind) == TaskKind.regression:
        return MetricKind(kind) == MetricKind.pearson
    return MetricKind(kind) in (MetricKind.accuracy, MetricKind.matthews)


def _check(predictions: Sequence, labels: Sequence) -> None:
    if len(predictions) != len(labels):
        raise InputError(
            f"predictions and labels differ in length ({len(predictions)} vs {len(labels)})"
        )
    if not predictions:
        raise InputError("cannot score an empty prediction list")


def accuracy(predictions: Sequence[int], labels: Sequence[int]) -> float:
    _check(predictions, labels)
    return float(np.mean(np.asarray(predictions) == np.asarray(labels)))


def matthews(predictions: Sequence[int], labels: Sequence[int]) -> float:
    """Matthews correlation from the confusion matrix; 0 when the denominator vanishes."""
    _check(predictions, labels)
    classes = sorted(set(predictions) | set(labels))
    index = {c: i for i, c in enumerate(classes)}
    confusion = np.zeros((len(classes), len(classes)), dtype=np.int64)
    for p, y in zip(predictions, labels):
        confusion[index[y], index[p]] += 1

    # multiclass form; reduces to (TP*TN - FP*FN)/sqrt(...) for two classes
    total = confusion.sum()
    correct = np.trace(confusion)
    true_counts = confusion.sum(axis=1)
    pred_counts = confusion.sum(axis=0)
    numerator = float(correct * total - true_counts @ pred_counts)
    denominator = math.sqrt(float(total**2 - pred_counts @ pred_counts)) * math.sqrt(
        float(total**2 - true_counts @ true_counts)
    )
    if denominator == 0.0:
        return 0.0
    return numerator / denominator


def _is_constant(values: np.ndarray) -> bool:
    return bool(np.ptp(values) <= 1e-12 * (1.0 + np.abs(values).max()))


def pearson(predictions: Sequence[float], labels: Sequence[float]) -> float:
    _check(predictions, labels)
    x = np.asarray(predictions, dtype=np.float64)
    y = np.asarray(labels, dtype=np.float64)
    if len(x) < 2:
        raise InputError("pearson needs at least two points")
    if _is_constant(x) or _is_constant(y):
        raise DegenerateMetricError("pearson is undefined when either side has zero variance")
    r, _ = stats.pearsonr(x, y)
    return float(np.clip(r, -1.0, 1.0))


_METRICS = {
    MetricKind.accuracy: accuracy,
    MetricKind.matthews: matthews,
    MetricKind.pearson: pearson,
}


def compute_metric(
    kind: Union[MetricKind, str], predictions: Sequence, labels: Sequence
) -> float:
    return _METRICS[MetricKind(kind)](list(predictions), list(labels))


def relative_performance(surgical: float, full: float) -> float:
    """Difference in percentage points: (surgical - full) * 100."""
    return round((surgical - full) * 100.0, 10)
