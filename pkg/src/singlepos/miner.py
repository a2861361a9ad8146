"""Expected-positive mining from running-average scores."""

from __future__ import annotations

import csv
from decimal import ROUND_HALF_UP, Decimal
from pathlib import Path

import numpy as np

from .losses import POS


def class_budgets(z: np.ndarray, k: float) -> np.ndarray:
    """Number of expected positives per class, ``round(k * annotated_count)``.

    Rounding is half-up on the decimal value of ``k`` so that e.g.
    ``1.5 * 3`` gives 5. Budgets never fall below the annotated count.
    """
    if k <= 0:
        raise ValueError("k must be positive")
    counts = (np.asarray(z) == POS).sum(axis=0)
    kd = Decimal(repr(float(k)))
    budgets = [int((kd * int(c)).to_integral_value(rounding=ROUND_HALF_UP)) for c in counts]
    return np.maximum(np.array(budgets, dtype=np.int64), counts)


def initial_masks(z: np.ndarray) -> np.ndarray:
    return (np.asarray(z) == POS).astype(np.int8)


def mine(scores: np.ndarray, z: np.ndarray, budgets: np.ndarray) -> np.ndarray:
    """Select the expected positives of every class.

    Annotated positives come first; each class's remaining budget goes to the
    highest-scoring unannotated samples, ties to the lower sample index.
    Budgets above ``N`` are clamped.
    """
    scores = np.asarray(scores)
    z = np.asarray(z)
    N, L = scores.shape
    masks = np.zeros((N, L), dtype=np.int8)
    for i in range(L):
        annotated = z[:, i] == POS
        masks[annotated, i] = 1
        room = min(int(budgets[i]), N) - int(annotated.sum())
        if room <= 0:
            continue
        candidates = np.flatnonzero(~annotated)
        order = candidates[np.argsort(-scores[candidates, i], kind="stable")]
        masks[order[:room], i] = 1
    return masks


def write_mask_dump(path, epoch: int, masks: np.ndarray, z: np.ndarray, sample_ids) -> None:
    """Append ``(epoch, sample, class)`` rows for mined, non-annotated positives."""
    path = Path(path)
    new = not path.exists()
    rows = np.argwhere((masks == 1) & (np.asarray(z) != POS))
    with open(path, "a", newline="") as fh:
        w = csv.writer(fh)
        if new:
            w.writerow(["epoch", "sample", "class"])
        for n, i in rows:
            w.writerow([epoch, sample_ids[n], int(i)])
