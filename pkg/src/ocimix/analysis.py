"""Offline estimators for the memory risk, forgetting gap and loss covariance.

These keep every seen training example around, which the online learner is
not allowed to do; they exist to check how augmentation strength relates to
forgetting.
"""
from __future__ import annotations

import csv
from dataclasses import dataclass, replace

import numpy as np
from scipy.stats import spearmanr

from . import nn
from .augment import MixConfig, apply_pipeline, enmix_batch, parse_pipeline
from .metrics import average_accuracy, variance_indicator
from .stream import Example
from .trainer import TrainerConfig, train_stream


@dataclass(frozen=True)
class RiskWeights:
    lam: float
    beta: float

    @classmethod
    def from_counts(cls, current: int, memory: int, seen: int) -> "RiskWeights":
        """``current`` = |D_t|, ``memory`` = |D^M|, ``seen`` = |D_[1,t]|."""
        if current <= 0 or memory <= 0 or seen < current:
            raise ValueError("need positive current/memory counts and seen >= current")
        return cls(current / memory, 1.0 / (1.0 + 2.0 * current / seen))


def _arrays(data, class_count):
    """Features and soft labels from Examples, MixedExamples or an (x, y) pair."""
    if isinstance(data, tuple) and len(data) == 2 and isinstance(data[0], np.ndarray):
        return data
    data = list(data)
    x = np.stack([d.features for d in data])
    if isinstance(data[0], Example):
        y = nn.one_hot([d.label for d in data], class_count)
    else:
        y = np.stack([d.label for d in data])
    return x, y


def sample_losses(model: nn.Model, data) -> np.ndarray:
    x, y = _arrays(data, model.class_count)
    return nn.per_sample_ce(nn.forward(model, x)[1], y)


def memory_risk(model: nn.Model, augmented_memory, weights: RiskWeights) -> float:
    losses = sample_losses(model, augmented_memory)
    if losses.size == 0:
        raise ValueError("augmented memory is empty")
    return weights.beta * weights.lam * float(losses.mean())


def objective_risk(model: nn.Model, all_seen_data) -> float:
    losses = sample_losses(model, all_seen_data)
    if losses.size == 0:
        raise ValueError("no data")
    return float(losses.mean())


class MemoryTransform:
    """A random transform of the whole memory set: a pipeline, optionally EnMix'd.

    Calling it returns ``(features, soft_labels)`` with one row per memory item;
    with EnMix, row i is item i mixed with a random partner.
    """

    def __init__(self, pipeline="", enmix=False, class_count=None, mix: MixConfig | None = None):
        self.ops = parse_pipeline(pipeline) if isinstance(pipeline, str) else list(pipeline)
        self.enmix = enmix
        self.class_count = class_count
        self.mix = mix or MixConfig()

    @property
    def deterministic(self) -> bool:
        return not self.enmix and all(op.kind == "identity" for op in self.ops)

    def __call__(self, memory, rng):
        memory = list(memory)
        C = self.class_count or (max(e.label for e in memory) + 1)
        views = [apply_pipeline(self.ops, e, rng) for e in memory]
        if not self.enmix:
            return _arrays(views, C)
        return _arrays(enmix_batch(views, C, self.mix, rng), C)


def forgetting_gap(model, transform, memory, all_seen_data, weights: RiskWeights,
                   mc_samples: int, rng) -> float:
    """Monte-Carlo mean of (memory risk under g - objective risk)^2."""
    if mc_samples < 1:
        raise ValueError("mc_samples must be >= 1")
    target = objective_risk(model, all_seen_data)
    gaps = [(memory_risk(model, transform(memory, rng), weights) - target) ** 2
            for _ in range(mc_samples)]
    return float(np.mean(gaps))


def mean_pairwise_covariance(q: np.ndarray) -> float:
    """Mean over item pairs i != j of the sample covariance of columns i and j.

    ``q`` has one row per realization and one column per item.  Uses the
    identity sum_{i!=j} C_ij = sum(C) - trace(C), so every pair is counted
    exactly without forming the covariance matrix.
    """
    r, n = q.shape
    if r < 2:
        raise ValueError("covariance needs at least two realizations")
    if n < 2:
        raise ValueError("need at least two items")
    # shift by the first realization so identical rows give exact zeros
    shifted = q - q[0]
    centred = shifted - shifted.mean(axis=0)
    total = centred.sum(axis=1)
    sum_all = float(total @ total) / (r - 1)
    trace = float((centred ** 2).sum()) / (r - 1)
    return (sum_all - trace) / (n * (n - 1))


def ce_covariance(model, transform, memory, mc_samples: int, rng) -> float:
    memory = list(memory)
    if len(memory) < 2:
        raise ValueError("need at least two memory items")
    if mc_samples < 2:
        raise ValueError("mc_samples must be >= 2")
    q = np.stack([sample_losses(model, transform(memory, rng)) for _ in range(mc_samples)])
    return mean_pairwise_covariance(q)


# ------------------------------------------------------------------- scan

@dataclass(frozen=True)
class DAConfigPoint:
    config: str
    strength: float
    co: float
    fg: float
    m_bar: float
    final_aa: float


def parse_da_config(text: str):
    """``"crop:0.6,0.6+enmix"`` -> (pipeline string, enmix flag)."""
    base, plus, tail = text.partition("+")
    if plus and tail.strip() != "enmix":
        raise ValueError(f"unknown DA config suffix {tail!r}")
    return base.strip(), bool(plus)


def config_strength(text: str) -> float:
    pipeline, enmix = parse_da_config(text)
    return sum(op.strength for op in parse_pipeline(pipeline)) + (1.0 if enmix else 0.0)


def _spearman(a, b) -> float:
    if np.ptp(a) == 0 or np.ptp(b) == 0:
        return float("nan")
    return float(spearmanr(a, b).statistic)


def proposition1_scan(configs, tasks, base: TrainerConfig, seeds, mc_samples=64,
                      class_count=None):
    """Per DA config: CO, FG and m-bar on a fixed pre-final-task model, plus final AA.

    For each seed the reference model and buffer come from an ER run over all
    tasks but the last; the last task supplies |D_t| for the risk weights.
    Final AA comes from a full run with the config (er_da, or er_enmix when
    the config ends in ``+enmix``).  Values are averaged over seeds.
    Returns ``(points, stats)`` where stats holds the Spearman correlations.
    """
    configs = list(configs)
    if len(configs) < 3:
        raise ValueError("need at least three DA configs")
    tasks = list(tasks)
    if len(tasks) < 2:
        raise ValueError("need at least two tasks")
    C = class_count or (max(c for t in tasks for c in t.class_ids) + 1)
    rows = {c: [] for c in configs}
    for seed in seeds:
        ref_cfg = replace(base, method="er_plain", seed=seed, pipeline=())
        model, buffer, _ = train_stream(ref_cfg, tasks[:-1], class_count=C)
        memory = list(buffer.items)
        seen = [e for t in tasks[:-1] for e in t.train_examples]
        old_classes = [c for t in tasks[:-1] for c in t.class_ids]
        weights = RiskWeights.from_counts(len(tasks[-1].train_examples), len(memory),
                                          len(seen) + len(tasks[-1].train_examples))
        for ci, text in enumerate(configs):
            pipeline, enmix = parse_da_config(text)
            g = MemoryTransform(pipeline, enmix, C, base.mix)
            seq = np.random.SeedSequence([seed, ci])
            rng_co, rng_fg, rng_m = (np.random.default_rng(s) for s in seq.spawn(3))
            co = ce_covariance(model, g, memory, mc_samples, rng_co)
            fg = forgetting_gap(model, g, memory, seen, weights, mc_samples, rng_fg)
            x, _ = g(memory, rng_m)
            m_bar = variance_indicator(model, x, len(old_classes), old_classes)
            run_cfg = replace(base, method="er_enmix" if enmix else "er_da", seed=seed,
                               pipeline=pipeline)
            _, _, log = train_stream(run_cfg, tasks, class_count=C)
            aa = average_accuracy(log.accuracy_matrix, len(tasks))
            rows[text].append((co, fg, m_bar, aa))
    points = []
    for text in configs:
        co, fg, m_bar, aa = np.mean(rows[text], axis=0)
        points.append(DAConfigPoint(text, config_strength(text), float(co), float(fg),
                                    float(m_bar), float(aa)))
    stats = {
        "spearman_co_fg": _spearman([p.co for p in points], [p.fg for p in points]),
        "spearman_mbar_aa": _spearman([p.m_bar for p in points], [p.final_aa for p in points]),
    }
    return points, stats


SCATTER_COLUMNS = ("pipeline", "strength", "CO", "FG", "m_bar", "final_AA")


def write_scatter_csv(path, points) -> None:
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(SCATTER_COLUMNS)
        for p in points:
            w.writerow([p.config, repr(p.strength), repr(p.co), repr(p.fg),
                        repr(p.m_bar), repr(p.final_aa)])
