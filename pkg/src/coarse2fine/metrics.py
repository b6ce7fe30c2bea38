"""Clustering evaluation: Hungarian-matched accuracy, ARI, macro accuracy, GED."""

from __future__ import annotations

import json
import logging
from dataclasses import asdict, dataclass, field

import numpy as np
from scipy.optimize import linear_sum_assignment
from scipy.special import comb

from .relations import RelationMatrix, graph_edit_distance

log = logging.getLogger(__name__)


def _labels(pred, true) -> tuple[np.ndarray, np.ndarray]:
    pred = np.asarray(pred, dtype=np.int64)
    true = np.asarray(true, dtype=np.int64)
    if pred.shape != true.shape or pred.ndim != 1:
        raise ValueError(f"label vectors differ in shape: {pred.shape} vs {true.shape}")
    if pred.size and min(pred.min(), true.min()) < 0:
        raise ValueError("labels must be nonnegative")
    return pred, true


def contingency(pred, true, size: int | None = None) -> np.ndarray:
    """Square count matrix, rows indexed by predicted label and columns by true label."""
    pred, true = _labels(pred, true)
    k = max(size or 0, int(pred.max(initial=-1)) + 1, int(true.max(initial=-1)) + 1)
    table = np.zeros((k, k), dtype=np.int64)
    np.add.at(table, (pred, true), 1)
    return table


def clustering_accuracy(pred, true, num_classes: int | None = None) -> tuple[float, np.ndarray]:
    """Best accuracy over relabellings of the predictions.

    Returns the accuracy and ``perm`` with ``perm[k]`` the true class matched to
    predicted cluster k. Unused labels are padded with zero counts.
    """
    pred, true = _labels(pred, true)
    table = contingency(pred, true, num_classes)
    rows, cols = linear_sum_assignment(-table)
    perm = np.empty(table.shape[0], dtype=np.int64)
    perm[rows] = cols
    if pred.size == 0:
        return 1.0, perm
    return float(table[rows, cols].sum() / pred.size), perm


def adjusted_rand_index(pred, true) -> float:
    pred, true = _labels(pred, true)
    n = pred.size
    table = contingency(pred, true)
    index = comb(table, 2).sum()
    a = comb(table.sum(axis=1), 2).sum()
    b = comb(table.sum(axis=0), 2).sum()
    total = comb(n, 2)
    if total == 0:
        return 1.0
    expected = a * b / total
    best = 0.5 * (a + b)
    if best == expected:
        # both partitions trivial (single cluster or all singletons)
        return 1.0
    return float((index - expected) / (best - expected))


def macro_accuracy(pred, true, perm: np.ndarray) -> float:
    """Mean per-true-class recall after mapping predictions through ``perm``."""
    pred, true = _labels(pred, true)
    mapped = np.asarray(perm)[pred]
    k = max(len(perm), int(true.max(initial=-1)) + 1)
    hits = np.bincount(true[mapped == true], minlength=k)
    sizes = np.bincount(true, minlength=k)
    present = sizes > 0
    if not present.all():
        log.warning("macro accuracy: true classes %s have no samples and are excluded",
                    np.flatnonzero(~present).tolist())
    if not present.any():
        return 1.0
    return float(np.mean(hits[present] / sizes[present]))


@dataclass
class MetricsReport:
    accuracy: float
    ari: float
    macro_accuracy: float
    ged: int | None
    matched_permutation: list[int] = field(default_factory=list)

    def to_dict(self) -> dict:
        return asdict(self)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)


def evaluate(pred, true, num_fine: int, learned: RelationMatrix | None = None,
             reference: RelationMatrix | None = None) -> MetricsReport:
    """All metrics; GED compares ``learned`` with fine rows relabelled by the accuracy matching."""
    acc, perm = clustering_accuracy(pred, true, num_fine)
    ged = None
    if learned is not None and reference is not None:
        if perm.size != learned.num_fine:
            raise ValueError(f"predictions use {perm.size} labels, relation has {learned.num_fine} fine classes")
        ged = graph_edit_distance(learned.permute_fine(perm), reference)
    return MetricsReport(accuracy=acc, ari=adjusted_rand_index(pred, true),
                         macro_accuracy=macro_accuracy(pred, true, perm), ged=ged,
                         matched_permutation=[int(p) for p in perm])
