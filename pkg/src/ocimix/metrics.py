"""Average accuracy/forgetting, old/new misclassification ratios, and the
output-variance indicator of augmentation strength."""
from __future__ import annotations

import csv
from dataclasses import dataclass

import numpy as np

from . import nn


class AccuracyMatrix:
    """Lower-triangular ``a[i][j]``: accuracy on task j after training task i.

    Rows are appended in training order; ``a[i]`` has ``i + 1`` entries.
    """

    def __init__(self, rows=()):
        self.rows: list[list[float]] = []
        for row in rows:
            self.append(row)

    def append(self, row) -> None:
        row = [float(v) for v in row]
        if len(row) != len(self.rows) + 1:
            raise ValueError(f"row {len(self.rows) + 1} must have {len(self.rows) + 1} entries")
        if any(not 0.0 <= v <= 1.0 for v in row):
            raise ValueError("accuracies must lie in [0, 1]")
        self.rows.append(row)

    def __len__(self):
        return len(self.rows)

    def __getitem__(self, i):
        return self.rows[i]

    def to_array(self) -> np.ndarray:
        n = len(self.rows)
        out = np.full((n, n), np.nan)
        for i, row in enumerate(self.rows):
            out[i, :len(row)] = row
        return out


def average_accuracy(acc: AccuracyMatrix, i: int) -> float:
    """Mean of row ``i`` (1-based task count)."""
    if not 1 <= i <= len(acc):
        raise IndexError(f"task count {i} outside 1..{len(acc)}")
    return float(np.mean(acc[i - 1]))


def average_forgetting(acc: AccuracyMatrix, i: int) -> float:
    """Mean drop from each earlier task's best accuracy to its accuracy after task ``i``.

    The best is taken over rows j..i-1, where task j's accuracy exists.
    Negative values (improvement) are kept.
    """
    if i < 2:
        raise ValueError("forgetting needs at least two tasks")
    if i > len(acc):
        raise IndexError(f"task count {i} outside 1..{len(acc)}")
    drops = []
    for j in range(i - 1):
        best = max(acc[l][j] for l in range(j, i - 1))
        drops.append(best - acc[i - 1][j])
    return float(np.mean(drops))


@dataclass(frozen=True)
class MisclassReport:
    er_new_as_old: float | None
    er_old_as_new: float | None
    new_errors: int
    new_as_old: int
    old_errors: int
    old_as_new: int


def misclass_ratios(confusion, old_classes, new_classes) -> MisclassReport:
    """Cross-group share of each group's errors.

    ``confusion[t, p]`` counts test samples of true class t predicted as p.
    A ratio is ``None`` when its group made no errors.
    """
    cm = np.asarray(confusion)
    old = sorted(set(old_classes))
    new = sorted(set(new_classes))
    if set(old) & set(new):
        raise ValueError("old and new class sets overlap")

    def cross(src, dst):
        block = cm[np.ix_(src, src)]
        errors = int(cm[src].sum() - np.trace(block))
        hits = int(cm[np.ix_(src, dst)].sum()) if dst else 0
        return errors, hits

    new_err, new_as_old = cross(new, old) if new else (0, 0)
    old_err, old_as_new = cross(old, new) if old else (0, 0)
    return MisclassReport(
        new_as_old / new_err if new_err else None,
        old_as_new / old_err if old_err else None,
        new_err, new_as_old, old_err, old_as_new,
    )


def variance_indicator(model_old: nn.Model, augmented_memory, old_class_count: int,
                       old_classes=None) -> float:
    """Mean per-class standard deviation of the old model's output probabilities.

    ``augmented_memory`` is a list of examples or a feature array.  The
    variance is the population variance across the given augmented set,
    taken for each of the old classes, then square-rooted and averaged.
    """
    if isinstance(augmented_memory, np.ndarray):
        x = augmented_memory
    else:
        examples = list(augmented_memory)
        x = np.stack([e.features for e in examples]) if examples else np.zeros((0,))
    if len(x) == 0:
        raise ValueError("augmented memory is empty")
    if old_classes is None:
        old_classes = range(old_class_count)
    old_classes = list(old_classes)
    if len(old_classes) != old_class_count:
        raise ValueError("old_classes does not match old_class_count")
    probs = nn.forward(model_old, x)[1][:, old_classes]
    return float(np.sqrt(probs.var(axis=0)).mean())


METRIC_COLUMNS = ("task_index", "average_accuracy", "average_forgetting",
                  "er_new_as_old", "er_old_as_new", "m_bar")


def write_metric_csv(path, rows) -> None:
    """``rows`` are dicts keyed by METRIC_COLUMNS; missing values are left blank."""
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(METRIC_COLUMNS)
        for row in rows:
            w.writerow(["" if row.get(k) is None else _fmt(row[k]) for k in METRIC_COLUMNS])


def _fmt(v):
    return repr(float(v)) if isinstance(v, (float, np.floating)) else v
