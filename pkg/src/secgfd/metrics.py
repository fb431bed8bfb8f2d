"""Imbalanced binary classification metrics."""
import numpy as np
from scipy.stats import rankdata

from .errors import InvalidInput


def confusion(pred, true):
    pred = np.asarray(pred).astype(bool)
    true = np.asarray(true).astype(bool)
    if pred.shape != true.shape:
        raise InvalidInput("prediction and label arrays differ in length")
    tp = int(np.sum(pred & true))
    fp = int(np.sum(pred & ~true))
    fn = int(np.sum(~pred & true))
    tn = int(np.sum(~pred & ~true))
    return tp, fp, fn, tn


def _f1(tp, fp, fn):
    denom = 2 * tp + fp + fn
    return 2 * tp / denom if denom else 0.0


def f1_macro(pred, true) -> float:
    """Unweighted mean of the F1 scores of class 0 and class 1."""
    tp, fp, fn, tn = confusion(pred, true)
    # class 0 swaps the roles of positives and negatives
    return (_f1(tp, fp, fn) + _f1(tn, fn, fp)) / 2


def auc(scores, true) -> float:
    """ROC AUC from average ranks (Mann-Whitney U); ties count one half."""
    scores = np.asarray(scores, dtype=np.float64)
    true = np.asarray(true).astype(bool)
    if scores.shape != true.shape:
        raise InvalidInput("score and label arrays differ in length")
    n_pos = int(true.sum())
    n_neg = len(true) - n_pos
    if n_pos == 0 or n_neg == 0:
        raise InvalidInput("AUC needs both classes")
    ranks = rankdata(scores, method="average")
    u = ranks[true].sum() - n_pos * (n_pos + 1) / 2
    return float(u / (n_pos * n_neg))
