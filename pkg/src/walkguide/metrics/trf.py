"""Trigger-level F1 between predicted and ground-truth danger levels."""

from __future__ import annotations

import numpy as np

from ..domain import TriggerState

N_LEVELS = 3


def confusion_matrix(predictions, ground_truth) -> np.ndarray:
    """Rows are ground truth, columns predictions."""
    if len(predictions) != len(ground_truth):
        raise ValueError(f"length mismatch: {len(predictions)} predictions vs {len(ground_truth)} labels")
    if not predictions:
        raise ValueError("need at least one prediction")
    cm = np.zeros((N_LEVELS, N_LEVELS), dtype=np.int64)
    for p, t in zip(predictions, ground_truth):
        cm[int(TriggerState(t)), int(TriggerState(p))] += 1
    return cm


def per_class_f1(cm: np.ndarray) -> list[float]:
    """F1 per level; a level absent from both predictions and truth scores 1.0."""
    out = []
    for k in range(N_LEVELS):
        tp = cm[k, k]
        fp = cm[:, k].sum() - tp
        fn = cm[k, :].sum() - tp
        if tp + fp + fn == 0:
            out.append(1.0)
            continue
        p = tp / (tp + fp) if tp + fp else 0.0
        r = tp / (tp + fn) if tp + fn else 0.0
        out.append(0.0 if p + r == 0 else float(2 * p * r / (p + r)))
    return out


def trf_macro_f1(predictions, ground_truth, micro: bool = False) -> float:
    """Unweighted mean of the three per-level F1 scores (or micro-F1 with ``micro``)."""
    cm = confusion_matrix(list(predictions), list(ground_truth))
    if micro:
        # single-label multiclass: micro precision = micro recall = accuracy
        return float(np.trace(cm) / cm.sum())
    return sum(per_class_f1(cm)) / N_LEVELS
