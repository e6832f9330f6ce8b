"""Classification metrics: balanced accuracy, per-class F1 and rank-based ROC-AUC."""

from __future__ import annotations

import numpy as np
from scipy.stats import rankdata

from .hetero import CLASSES


def auc(scores, positive) -> float | None:
    """Mann-Whitney ROC-AUC with midranks for ties; None when a class is missing."""
    scores = np.asarray(scores, dtype=float)
    positive = np.asarray(positive, dtype=bool)
    n_pos = int(positive.sum())
    n_neg = len(positive) - n_pos
    if n_pos == 0 or n_neg == 0:
        return None
    ranks = rankdata(scores)
    return float((ranks[positive].sum() - n_pos * (n_pos + 1) / 2) / (n_pos * n_neg))


def confusion(labels, predicted, num_classes: int = len(CLASSES)) -> np.ndarray:
    m = np.zeros((num_classes, num_classes), dtype=np.int64)
    np.add.at(m, (np.asarray(labels, int), np.asarray(predicted, int)), 1)
    return m


def balanced_accuracy(labels, predicted, num_classes: int = len(CLASSES)) -> float:
    """Unweighted mean of per-class recall over classes present in ``labels``."""
    m = confusion(labels, predicted, num_classes)
    support = m.sum(axis=1)
    present = support > 0
    if not present.any():
        return float("nan")
    return float(np.mean(np.diag(m)[present] / support[present]))


def f1_per_class(labels, predicted, num_classes: int = len(CLASSES)) -> list[float | None]:
    m = confusion(labels, predicted, num_classes)
    out = []
    for c in range(num_classes):
        tp = m[c, c]
        denom = m[c, :].sum() + m[:, c].sum()
        out.append(None if denom == 0 else float(2 * tp / denom))
    return out


def evaluate(probabilities, labels) -> dict:
    """All metrics for (n, 3) class probabilities and integer labels."""
    probs = np.asarray(probabilities, dtype=float)
    labels = np.asarray(labels, dtype=np.int64)
    if probs.ndim != 2 or len(probs) != len(labels):
        raise ValueError("probabilities and labels differ in length")
    if len(labels) == 0:
        raise ValueError("no predictions to evaluate")
    k = probs.shape[1]
    predicted = probs.argmax(axis=1)
    per_class = [auc(probs[:, c], labels == c) for c in range(k)]
    defined = [a for a in per_class if a is not None]
    warnings = [f"class {CLASSES[c]} absent: AUC undefined" for c, a in enumerate(per_class) if a is None]
    dr = auc(probs[:, 1:].sum(axis=1), labels > 0)
    if dr is None:
        warnings.append("binary DR AUC undefined: only one of DR / no DR present")
    return {
        "n": int(len(labels)),
        "balanced_accuracy": balanced_accuracy(labels, predicted, k),
        "accuracy": float(np.mean(predicted == labels)),
        "f1_per_class": dict(zip(CLASSES, f1_per_class(labels, predicted, k))),
        "roc_auc_per_class": dict(zip(CLASSES, per_class)),
        "roc_auc_macro": float(np.mean(defined)) if defined else None,
        "roc_auc_binary_dr": dr,
        "balanced_accuracy_binary_dr": balanced_accuracy(labels > 0, predicted > 0, 2),
        "confusion": confusion(labels, predicted, k).tolist(),
        "warnings": warnings,
    }
