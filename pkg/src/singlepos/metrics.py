"""Multi-label evaluation: AP/mAP, top-1 variants and score distributions.

Ranking ties are broken towards the lower index everywhere so that reports
are reproducible bit for bit.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

LABEL_COUNT_BUCKETS = ("1", "2", "3", "4+")


def average_precision(scores, labels, eleven_point: bool = False) -> float:
    """Mean of the precision values at the ranks of the positives.

    With ``eleven_point`` the interpolated precision is averaged at recall
    levels 0, 0.1, ..., 1 instead.
    """
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels).astype(bool)
    npos = int(labels.sum())
    if npos == 0:
        raise ValueError("average precision needs at least one positive")
    order = np.argsort(-scores, kind="stable")
    hits = labels[order]
    tp = np.cumsum(hits)
    precision = tp / np.arange(1, len(hits) + 1)
    if not eleven_point:
        return float(precision[hits].mean())
    recall = tp / npos
    ap = 0.0
    for r in np.linspace(0, 1, 11):
        mask = recall >= r - 1e-12
        ap += precision[mask].max() if mask.any() else 0.0
    return float(ap / 11)


def per_class_ap(predictions, y, eleven_point: bool = False) -> np.ndarray:
    """AP of every class; NaN for classes without positives."""
    predictions = np.asarray(predictions)
    y = np.asarray(y)
    out = np.full(predictions.shape[1], np.nan)
    for i in range(predictions.shape[1]):
        if y[:, i].any():
            out[i] = average_precision(predictions[:, i], y[:, i], eleven_point)
    return out


def mean_average_precision(predictions, y, eleven_point: bool = False) -> float:
    ap = per_class_ap(predictions, y, eleven_point)
    if np.all(np.isnan(ap)):
        raise ValueError("no class has a positive label")
    return float(np.nanmean(ap))


def top1(predictions, target) -> float:
    """Fraction of rows whose argmax equals the single target class."""
    return float(np.mean(np.argmax(predictions, axis=1) == np.asarray(target)))


def real_top1(predictions, y) -> float:
    """Fraction of rows whose argmax is any of the row's positive classes."""
    predictions = np.asarray(predictions)
    y = np.asarray(y)
    best = np.argmax(predictions, axis=1)
    return float(np.mean(y[np.arange(len(y)), best] == 1))


def topk_scores(predictions, k_max: int = 4) -> np.ndarray:
    """``(N, k_max)`` array of the highest, 2nd highest, ... score of every row."""
    predictions = np.asarray(predictions)
    if predictions.shape[1] < k_max:
        raise ValueError(f"need at least {k_max} classes")
    return -np.sort(-predictions, axis=1)[:, :k_max]


def topk_score_distribution(predictions, k_max: int = 4, bins: int = 20) -> np.ndarray:
    """Histogram counts ``(k_max, bins)`` of the rank-r scores on ``[0, 1]``."""
    top = topk_scores(predictions, k_max)
    return np.stack([np.histogram(top[:, r], bins=bins, range=(0.0, 1.0))[0]
                     for r in range(k_max)])


def breakdown_by_label_count(predictions, y, eleven_point: bool = False) -> dict[str, float]:
    """mAP over images grouped by their number of positives (1, 2, 3, 4+).

    Empty groups are left out. ``"all"`` holds the mAP over every image.
    """
    predictions = np.asarray(predictions)
    y = np.asarray(y)
    counts = y.sum(axis=1)
    groups = {"1": counts == 1, "2": counts == 2, "3": counts == 3, "4+": counts >= 4}
    out = {}
    for name, rows in groups.items():
        if rows.any():
            out[name] = mean_average_precision(predictions[rows], y[rows], eleven_point)
    out["all"] = mean_average_precision(predictions, y, eleven_point)
    return out


@dataclass
class EvaluationReport:
    per_class_ap: np.ndarray
    map: float
    top1: float
    real_top1: float
    map_by_count: dict[str, float]
    score_histogram: np.ndarray
    topk_medians: np.ndarray = field(default_factory=lambda: np.zeros(0))

    def rows(self) -> list[tuple[str, float]]:
        """``(metric, value)`` pairs for the metrics CSV."""
        rows = [("mAP", self.map), ("top1", self.top1), ("real_top1", self.real_top1)]
        rows += [(f"mAP_k{k}", v) for k, v in self.map_by_count.items() if k != "all"]
        rows += [(f"AP_class{i}", v) for i, v in enumerate(self.per_class_ap) if not np.isnan(v)]
        rows += [(f"median_score_rank{r + 1}", v) for r, v in enumerate(self.topk_medians)]
        return [(k, float(v)) for k, v in rows]


def evaluate(predictions, y, target=None, eleven_point: bool = False) -> EvaluationReport:
    """Full report for probabilities ``(N, L)`` against full labels ``y``.

    ``target`` is an optional single label per image used for plain top-1;
    without it the first positive of each row is used.
    """
    predictions = np.asarray(predictions, dtype=np.float64)
    y = np.asarray(y)
    if target is None:
        target = np.argmax(y, axis=1)
    k_max = min(4, predictions.shape[1])
    return EvaluationReport(
        per_class_ap=per_class_ap(predictions, y, eleven_point),
        map=mean_average_precision(predictions, y, eleven_point),
        top1=top1(predictions, target),
        real_top1=real_top1(predictions, y),
        map_by_count=breakdown_by_label_count(predictions, y, eleven_point),
        score_histogram=topk_score_distribution(predictions, k_max),
        topk_medians=np.median(topk_scores(predictions, k_max), axis=0),
    )
