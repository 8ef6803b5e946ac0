"""Attack and utility metrics.

confusion_metrics does its arithmetic in exact rationals and converts to
float once at the end, so reported ASR values are reproducible from the
stored counts to the last bit.
"""

from fractions import Fraction
from typing import Optional, Tuple

import numpy as np

from .data import SampleSet
from .errors import MetricError, ShapeError
from .nn import Network, predict_labels


def _flag_array(x, name: str) -> np.ndarray:
    arr = np.asarray(x)
    if arr.ndim != 1:
        raise MetricError(f"{name} must be 1-D, got shape {arr.shape}")
    if not np.isin(arr, (0, 1)).all():
        raise MetricError(f"{name} must contain only 0/1 flags")
    return arr.astype(np.int64)


def confusion_counts(predictions, truths) -> Tuple[int, int, int, int]:
    """(tp, fn, tn, fp) with truth=1 meaning member."""
    p = _flag_array(predictions, "predictions")
    t = _flag_array(truths, "truths")
    if len(p) != len(t):
        raise MetricError(f"length mismatch: {len(p)} predictions, {len(t)} truths")
    tp = int(((p == 1) & (t == 1)).sum())
    fn = int(((p == 0) & (t == 1)).sum())
    tn = int(((p == 0) & (t == 0)).sum())
    fp = int(((p == 1) & (t == 0)).sum())
    return tp, fn, tn, fp


def rates_from_counts(tp: int, fn: int, tn: int, fp: int):
    """Exact (TPR, TNR, ASR) as Fractions; both classes must be present."""
    if tp + fn == 0 or tn + fp == 0:
        raise MetricError("both member and nonmember truths are required")
    tpr = Fraction(tp, tp + fn)
    tnr = Fraction(tn, tn + fp)
    asr = Fraction(1, 2) * (tpr + tnr)
    return tpr, tnr, asr


def confusion_metrics(predictions, truths) -> Tuple[float, float, float]:
    tpr, tnr, asr = rates_from_counts(*confusion_counts(predictions, truths))
    return float(tpr), float(tnr), float(asr)


def classification_accuracy(model, samples: SampleSet, keys=None) -> float:
    """Fraction of argmax-correct predictions.

    model is either a bare Network or anything exposing
    predict_batch(features, keys); keys default to row indices so smoothed
    predictions here match the ones the attack loop saw.
    """
    if len(samples) == 0:
        raise ShapeError("cannot score an empty sample set")
    if isinstance(model, Network):
        labels = predict_labels(model, samples.features)
    elif hasattr(model, "predict_batch"):
        if keys is None:
            keys = np.arange(len(samples))
        labels = model.predict_batch(samples.features, keys)
    else:
        raise MetricError(f"cannot classify with {type(model).__name__}")
    return float(np.mean(labels == samples.labels))
