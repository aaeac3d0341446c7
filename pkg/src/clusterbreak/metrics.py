"""Clustering evaluation: NMI, ARI, unsupervised accuracy and confusion tables.

Labels may be arbitrary integers; they are compacted to ``0..k-1`` in sorted
order before building the contingency table. Entropies use natural logs and
NMI is normalized by the arithmetic mean of the two entropies.
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass

import numpy as np
from scipy.optimize import linear_sum_assignment

from .errors import InvalidParameterError, LengthMismatchError

MAX_ACC_CLUSTERS = 64


@dataclass(frozen=True)
class ContingencyTable:
    counts: np.ndarray  # (rows = predicted clusters, cols = true classes)

    @property
    def n(self) -> int:
        return int(self.counts.sum())

    def to_list(self):
        return self.counts.tolist()


@dataclass(frozen=True)
class ClusterMapping:
    """Injective map from predicted cluster values to class values.

    ``assignment[i]`` is the class column for predicted row ``i``; rows left
    unmatched (more clusters than classes) get virtual columns ``k_true, ...``.
    """
    pred_values: np.ndarray
    true_values: np.ndarray
    assignment: np.ndarray

    def __call__(self, pred) -> np.ndarray:
        rows = np.searchsorted(self.pred_values, np.asarray(pred))
        return self.assignment[rows]

    def as_dict(self) -> dict[int, int]:
        return {int(p): int(a) for p, a in zip(self.pred_values, self.assignment)}


@dataclass(frozen=True)
class MetricsReport:
    nmi: float
    ari: float
    acc: float
    confusion: ContingencyTable
    mapping: ClusterMapping

    def to_dict(self) -> dict:
        return {"nmi": self.nmi, "ari": self.ari, "acc": self.acc,
                "confusion": self.confusion.to_list(),
                "mapping": {str(k): v for k, v in self.mapping.as_dict().items()}}

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True)


def _check(pred, truth, min_len=1):
    pred = np.asarray(pred).astype(np.int64, copy=False).ravel()
    truth = np.asarray(truth).astype(np.int64, copy=False).ravel()
    if pred.shape != truth.shape:
        raise LengthMismatchError(f"label vectors differ in length: {len(pred)} vs {len(truth)}")
    if len(pred) < min_len:
        raise InvalidParameterError(f"need at least {min_len} labels")
    return pred, truth


def contingency(pred, truth) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Return (counts, pred_values, true_values) for compacted labels."""
    pred, truth = _check(pred, truth)
    pv, pi = np.unique(pred, return_inverse=True)
    tv, ti = np.unique(truth, return_inverse=True)
    counts = np.zeros((len(pv), len(tv)), dtype=np.int64)
    np.add.at(counts, (pi, ti), 1)
    return counts, pv, tv


def _entropy(counts: np.ndarray, n: int) -> float:
    p = counts[counts > 0] / n
    return float(-(p * np.log(p)).sum())


def nmi(pred, truth) -> float:
    counts, _, _ = contingency(pred, truth)
    n = counts.sum()
    h_pred = _entropy(counts.sum(1), n)
    h_true = _entropy(counts.sum(0), n)
    if h_pred == 0.0 or h_true == 0.0:
        return 1.0 if h_pred == h_true else 0.0
    nz = counts > 0
    outer = np.outer(counts.sum(1), counts.sum(0))
    mi = float((counts[nz] / n * np.log(counts[nz] * n / outer[nz])).sum())
    return float(np.clip(mi / (0.5 * (h_pred + h_true)), 0.0, 1.0))


def _comb2(x):
    x = np.asarray(x, dtype=np.float64)
    return x * (x - 1) / 2


def ari(pred, truth) -> float:
    pred, truth = _check(pred, truth, min_len=2)
    counts, _, _ = contingency(pred, truth)
    index = _comb2(counts).sum()
    a = _comb2(counts.sum(1)).sum()
    b = _comb2(counts.sum(0)).sum()
    expected = a * b / _comb2(len(pred))
    max_index = 0.5 * (a + b)
    if max_index == expected:
        # both partitions trivial in the same way (all singletons or one block)
        return 1.0
    return float((index - expected) / (max_index - expected))


def acc(pred, truth) -> tuple[float, ClusterMapping]:
    """Best agreement fraction over injective cluster-to-class maps, and that map."""
    counts, pv, tv = contingency(pred, truth)
    if max(counts.shape) > MAX_ACC_CLUSTERS:
        raise InvalidParameterError(f"acc supports at most {MAX_ACC_CLUSTERS} clusters/classes")
    rows, cols = linear_sum_assignment(counts, maximize=True)
    assignment = np.empty(len(pv), dtype=np.int64)
    assignment[rows] = cols
    unmatched = np.setdiff1d(np.arange(len(pv)), rows)
    assignment[unmatched] = len(tv) + np.arange(len(unmatched))
    score = counts[rows, cols].sum() / counts.sum()
    return float(score), ClusterMapping(pv, tv, assignment)


def confusion(pred, truth, mapping: ClusterMapping) -> ContingencyTable:
    """Contingency table with row ``j`` holding the cluster mapped to class ``j``.

    Rows past the number of classes hold surplus clusters; classes that no
    cluster maps to get an all-zero row, so agreements sit on the diagonal.
    """
    counts, pv, tv = contingency(pred, truth)
    if not (np.array_equal(pv, mapping.pred_values) and np.array_equal(tv, mapping.true_values)):
        raise InvalidParameterError("mapping was computed for different label sets")
    n_rows = max(len(tv), len(pv))
    table = np.zeros((n_rows, len(tv)), dtype=np.int64)
    table[mapping.assignment] = counts
    return ContingencyTable(table)


def report(pred, truth) -> MetricsReport:
    score, mapping = acc(pred, truth)
    return MetricsReport(nmi(pred, truth), ari(pred, truth), score,
                         confusion(pred, truth, mapping), mapping)


def largest_cluster_share(pred) -> float:
    _, counts = np.unique(np.asarray(pred), return_counts=True)
    return float(counts.max() / counts.sum())


def write_confusion_csv(table: ContingencyTable, path, class_names=None) -> None:
    k_true = table.counts.shape[1]
    names = list(class_names) if class_names else [str(j) for j in range(k_true)]
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["cluster", *names])
        for i, row in enumerate(table.counts):
            label = names[i] if i < k_true else f"extra_{i - k_true}"
            writer.writerow([label, *row.tolist()])
