"""Reservoir replay buffer with uniform (ER) and loss-increase (MIR) retrieval."""
from __future__ import annotations

import csv
from collections import Counter

import numpy as np

from . import nn


class ReplayBuffer:
    def __init__(self, capacity: int):
        if capacity < 1:
            raise ValueError("capacity must be positive")
        self.capacity = capacity
        self.items = []
        self.seen_count = 0
        # analysis setting: keep the buffer fixed while a task trains
        self.frozen = False

    def __len__(self):
        return len(self.items)

    def add(self, example, rng) -> None:
        """Reservoir update with a single example."""
        if self.frozen:
            return
        if self.seen_count < self.capacity:
            self.items.append(example)
        else:
            j = int(rng.integers(0, self.seen_count + 1))
            if j < self.capacity:
                self.items[j] = example
        self.seen_count += 1

    def extend(self, examples, rng) -> None:
        """Reservoir update with many examples, drawing all slot indices at once.

        Same distribution as repeated ``add``; one vectorised draw.
        """
        if self.frozen:
            return
        examples = list(examples)
        n0 = self.seen_count
        free = max(0, min(len(examples), self.capacity - n0))
        self.items.extend(examples[:free])
        rest = examples[free:]
        if rest:
            highs = np.arange(n0 + free, n0 + len(examples)) + 1
            slots = rng.integers(0, highs)
            for example, j in zip(rest, slots):
                if j < self.capacity:
                    self.items[j] = example
        self.seen_count += len(examples)

    def label_histogram(self) -> Counter:
        return Counter(e.label for e in self.items)

    def export_csv(self, path, class_to_task=None) -> None:
        """Write ``task_id,label,count`` rows for the current buffer content."""
        hist = self.label_histogram()
        with open(path, "w", newline="") as f:
            w = csv.writer(f)
            w.writerow(["task_id", "label", "count"])
            for label in sorted(hist):
                task = class_to_task.get(label, "") if class_to_task else ""
                w.writerow([task, label, hist[label]])


def reservoir_update(buffer: ReplayBuffer, example, rng) -> ReplayBuffer:
    buffer.add(example, rng)
    return buffer


def _uniform_indices(buffer: ReplayBuffer, k: int, rng) -> np.ndarray:
    if k <= 0 or not buffer.items:
        return np.zeros(0, dtype=int)
    if k >= len(buffer):
        return np.arange(len(buffer))
    return rng.choice(len(buffer), size=k, replace=False)


def random_retrieve(buffer: ReplayBuffer, k: int, rng) -> list:
    return [buffer.items[i] for i in _uniform_indices(buffer, k, rng)]


def item_losses(model: nn.Model, examples) -> np.ndarray:
    x = np.stack([e.features for e in examples])
    y = nn.one_hot([e.label for e in examples], model.class_count)
    return nn.per_sample_ce(nn.forward(model, x)[1], y)


def mir_retrieve(buffer: ReplayBuffer, k: int, candidates: int, model: nn.Model,
                 current_batch, lr: float, rng) -> list:
    """Pick the ``k`` candidates whose loss rises most after a virtual SGD step.

    The virtual step is taken on ``current_batch`` alone and never touches
    ``model``.  Equal increases are ordered by ascending buffer index.
    """
    if candidates < k:
        raise ValueError("candidates must be >= k")
    if current_batch is None or len(current_batch) == 0:
        return random_retrieve(buffer, k, rng)
    idx = _uniform_indices(buffer, candidates, rng)
    if idx.size == 0 or k <= 0:
        return []
    pool = [buffer.items[i] for i in idx]
    labels = nn.one_hot(current_batch.labels, model.class_count)
    virtual = nn.sgd_step(model, nn.backward(model, current_batch.features, labels), lr)
    increase = item_losses(virtual, pool) - item_losses(model, pool)
    order = np.lexsort((idx, -increase))
    return [buffer.items[idx[i]] for i in order[:k]]
