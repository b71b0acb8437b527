"""Patient-level aggregation and CHD-class metrics.

Undefined quantities (precision with no predicted positives, recall with no
true positives, AUC on single-class ground truth) are reported as ``None``.
"""

from __future__ import annotations

import math
from typing import Sequence

import numpy as np
from scipy.stats import rankdata

METRICS = ("f1", "precision", "recall", "auc")


def aggregate_patient(image_probs: Sequence[float], use_logits: bool = False) -> float:
    """Mean of a patient's image-level probabilities.

    With ``use_logits`` the probabilities are averaged on the logit scale
    and mapped back through the sigmoid.
    """
    p = np.asarray(image_probs, dtype=np.float64)
    if p.size == 0:
        raise ValueError("patient has no image predictions")
    if np.any(p < 0) or np.any(p > 1):
        raise ValueError("probabilities must lie in [0, 1]")
    if use_logits:
        q = np.clip(p, 1e-12, 1 - 1e-12)
        return float(1.0 / (1.0 + math.exp(-np.mean(np.log(q / (1 - q))))))
    # sorting makes the float sum independent of image order
    return math.fsum(np.sort(p)) / p.size


def auc_score(scores: Sequence[float], labels: Sequence[int]) -> float | None:
    """Mann-Whitney rank statistic: P(random positive outranks random negative), ties 1/2."""
    s = np.asarray(scores, dtype=np.float64)
    y = np.asarray(labels)
    n_pos = int(np.sum(y == 1))
    n_neg = int(np.sum(y == 0))
    if n_pos == 0 or n_neg == 0:
        return None
    ranks = rankdata(s)  # average ranks for ties
    u = float(np.sum(ranks[y == 1])) - n_pos * (n_pos + 1) / 2.0
    return u / (n_pos * n_neg)


def compute_metrics(patient_probs: Sequence[float], labels: Sequence[int], threshold: float = 0.5) -> dict:
    p = np.asarray(patient_probs, dtype=np.float64)
    y = np.asarray(labels)
    if p.shape != y.shape:
        raise ValueError("probabilities and labels must align")
    pred = p >= threshold
    tp = int(np.sum(pred & (y == 1)))
    fp = int(np.sum(pred & (y == 0)))
    fn = int(np.sum(~pred & (y == 1)))
    precision = tp / (tp + fp) if tp + fp else None
    recall = tp / (tp + fn) if tp + fn else None
    if precision is not None and recall is not None:
        f1 = 2 * precision * recall / (precision + recall) if precision + recall else 0.0
    else:
        f1 = 0.0 if (tp + fn) else None
    return {
        "f1": f1,
        "precision": precision,
        "recall": recall,
        "auc": auc_score(p, y),
        "n_patients": int(y.size),
        "n_positive": int(np.sum(y == 1)),
        "tp": tp,
        "fp": fp,
        "fn": fn,
    }


def mean_std(values: Sequence[float | None]) -> dict:
    """Mean and population std over the defined entries."""
    vals = [v for v in values if v is not None]
    if not vals:
        return {"mean": None, "std": None, "n": 0}
    arr = np.asarray(vals, dtype=np.float64)
    return {"mean": float(arr.mean()), "std": float(arr.std()), "n": len(vals)}
