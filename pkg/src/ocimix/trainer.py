"""Single-pass online class-incremental training with replay and mixing."""
from __future__ import annotations

import csv
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import __version__, nn
from .augment import (MixConfig, adpmix_batch, apply_pipeline, enmix_batch,
                      format_pipeline, lift, parse_pipeline)
from .memory import ReplayBuffer, mir_retrieve, random_retrieve
from .metrics import AccuracyMatrix, misclass_ratios
from .stream import StreamBatch, TaskSpec, stream_batches

METHODS = ("finetune", "er_plain", "er_da", "er_enmix", "er_adpmix", "er_dualmix")
RETRIEVALS = ("er", "mir")
RNG_STREAMS = ("init", "stream", "buffer", "augment", "mix")


@dataclass(frozen=True)
class TrainerConfig:
    lr: float = 0.1
    batch_size: int = 10
    memory_batch_size: int | None = None  # defaults to batch_size
    memory_capacity: int = 500
    retrieval: str = "er"
    method: str = "er_plain"
    mix: MixConfig = field(default_factory=MixConfig)
    pipeline: tuple = ()
    seed: int = 0
    hidden: tuple[int, ...] = (256, 128)
    mir_candidates: int | None = None  # defaults to 2 * memory batch
    augment_current: bool = False
    dualmix_keep_augmented: bool = False
    freeze_buffer_during_task: bool = False
    trace_every: int = 0  # 0: boundary checkpoints only at task ends

    def __post_init__(self):
        if self.method not in METHODS:
            raise ValueError(f"unknown method {self.method!r}; expected one of {METHODS}")
        if self.retrieval not in RETRIEVALS:
            raise ValueError(f"unknown retrieval {self.retrieval!r}")
        if self.lr <= 0 or self.batch_size < 1 or self.memory_capacity < 1:
            raise ValueError("lr, batch_size and memory_capacity must be positive")
        if isinstance(self.pipeline, str):
            object.__setattr__(self, "pipeline", tuple(parse_pipeline(self.pipeline)))
        else:
            object.__setattr__(self, "pipeline", tuple(self.pipeline))

    @property
    def k(self) -> int:
        return self.batch_size if self.memory_batch_size is None else self.memory_batch_size

    @property
    def candidates(self) -> int:
        return 2 * self.k if self.mir_candidates is None else self.mir_candidates

    def to_dict(self) -> dict:
        d = asdict(self)
        d["pipeline"] = format_pipeline(self.pipeline)
        d["hidden"] = list(self.hidden)
        return d


def derive_rngs(seed) -> dict[str, np.random.Generator]:
    """One independent generator per randomness consumer, all from ``seed``.

    Children are spawned from ``SeedSequence(seed)`` in RNG_STREAMS order, so
    e.g. changing augmentation draws leaves the stream order untouched.
    """
    children = np.random.SeedSequence(seed).spawn(len(RNG_STREAMS))
    return {name: np.random.default_rng(s) for name, s in zip(RNG_STREAMS, children)}


@dataclass
class RunLog:
    accuracy_matrix: AccuracyMatrix = field(default_factory=AccuracyMatrix)
    loss_trace: list = field(default_factory=list)  # (task, batch, loss)
    norm_trace: list = field(default_factory=list)  # (task, new_norm, old_norm)
    confusions: list = field(default_factory=list)  # one C x C matrix per task end
    boundary_trace: list = field(default_factory=list)  # (task, batch, er_no, er_on)
    current_updates: int = 0

    def write(self, out_dir, manifest: dict | None = None) -> list[Path]:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        written = []

        def table(name, header, rows):
            path = out / name
            with open(path, "w", newline="") as f:
                w = csv.writer(f)
                w.writerow(header)
                w.writerows([[_cell(v) for v in row] for row in rows])
            written.append(path)

        n = len(self.accuracy_matrix)
        table("accuracy_matrix.csv", ["after_task"] + [f"task{j}" for j in range(n)],
              [[i] + row + [""] * (n - len(row)) for i, row in enumerate(self.accuracy_matrix.rows)])
        table("loss_trace.csv", ["task", "batch", "loss"], self.loss_trace)
        table("norm_trace.csv", ["task", "new_norm", "old_norm", "ratio"],
              [(t, a, b, a / b if b else None) for t, a, b in self.norm_trace])
        for i, cm in enumerate(self.confusions):
            table(f"confusion_task{i}.csv", [f"pred{c}" for c in range(cm.shape[1])], cm.tolist())
        table("boundary_trace.csv", ["task", "batch", "er_new_as_old", "er_old_as_new"],
              self.boundary_trace)
        if manifest is not None:
            path = out / "manifest.json"
            path.write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
            written.append(path)
        return written


def _cell(v):
    if v is None:
        return ""
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    return v


def manifest(config: TrainerConfig, extra=None) -> dict:
    doc = {"version": f"ocimix-{__version__}", "seed": config.seed, "config": config.to_dict()}
    if extra:
        doc.update(extra)
    return doc


# ------------------------------------------------------------ composition

def _stack(mixed):
    return np.stack([m.features for m in mixed]), np.stack([m.label for m in mixed])


def _mean_norm(model, classes):
    classes = list(classes)
    return float(nn.classifier_weight_norms(model, classes).mean()) if classes else 0.0


def compose_training_batch(current: StreamBatch, memory_batch, model: nn.Model,
                           config: TrainerConfig, *, current_classes=(), old_classes=(),
                           aug_rng=None, mix_rng=None) -> list:
    """Assemble the single combined training batch for one stream step.

    Returns MixedExamples (hard labels lifted to one-hot).  The current batch
    always comes first, then the memory-derived samples for the method.
    """
    C = model.class_count
    aug_rng = aug_rng if aug_rng is not None else np.random.default_rng(0)
    mix_rng = mix_rng if mix_rng is not None else np.random.default_rng(0)
    cur = list(current.examples)
    if config.augment_current and config.pipeline:
        cur = [apply_pipeline(config.pipeline, e, aug_rng) for e in cur]
    out = [lift(e, C) for e in cur]
    memory_batch = list(memory_batch)
    if not memory_batch or config.method == "finetune":
        return out

    method = config.method

    def augmented():
        return [apply_pipeline(config.pipeline, e, aug_rng) for e in memory_batch]

    def cross_pairs():
        return adpmix_batch(memory_batch, current.examples, current_classes,
                            _mean_norm(model, current_classes), _mean_norm(model, old_classes),
                            C, config.mix, mix_rng)

    if method == "er_plain":
        out += [lift(e, C) for e in memory_batch]
    elif method == "er_da":
        out += [lift(e, C) for e in augmented()]
    elif method == "er_enmix":
        out += enmix_batch(augmented(), C, config.mix, mix_rng)
    elif method == "er_adpmix":
        out += [lift(e, C) for e in memory_batch]
        out += cross_pairs()
    elif method == "er_dualmix":
        views = augmented()
        if config.dualmix_keep_augmented:
            out += [lift(e, C) for e in views]
        out += enmix_batch(views, C, config.mix, mix_rng)
        out += cross_pairs()
    return out


# ------------------------------------------------------------- evaluation

def evaluate(model: nn.Model, tasks_seen, class_count: int | None = None):
    """Per-task top-1 test accuracy and the confusion matrix over all classes."""
    tasks_seen = list(tasks_seen)
    if not tasks_seen:
        raise ValueError("no tasks to evaluate")
    C = class_count or model.class_count
    confusion = np.zeros((C, C), dtype=int)
    accuracies = []
    for task in tasks_seen:
        if not task.test_examples:
            accuracies.append(0.0)
            continue
        x = np.stack([e.features for e in task.test_examples])
        y = np.array([e.label for e in task.test_examples])
        pred = nn.predict(model, x)
        np.add.at(confusion, (y, pred), 1)
        accuracies.append(float((pred == y).mean()))
    return np.array(accuracies), confusion


def _boundary_point(model, tasks_seen, C):
    _, cm = evaluate(model, tasks_seen, C)
    old = [c for t in tasks_seen[:-1] for c in t.class_ids]
    new = list(tasks_seen[-1].class_ids)
    report = misclass_ratios(cm, old, new)
    return report.er_new_as_old, report.er_old_as_new


# ---------------------------------------------------------------- training

def train_stream(config: TrainerConfig, tasks, class_count: int | None = None):
    """Run the whole stream once.  Returns ``(model, buffer, runlog)``."""
    tasks = list(tasks)
    if not tasks:
        raise ValueError("no tasks given")
    seen: set[int] = set()
    for t in tasks:
        if seen & set(t.class_ids):
            raise ValueError("task class sets overlap")
        seen |= set(t.class_ids)
    C = class_count or (max(seen) + 1)
    sample = tasks[0].train_examples[0].features
    rngs = derive_rngs(config.seed)
    model = nn.init_model(sample.size, config.hidden, C, rngs["init"])
    buffer = ReplayBuffer(config.memory_capacity)
    log = RunLog()
    use_memory = config.method != "finetune"

    for ti, task in enumerate(tasks):
        old_classes = [c for t in tasks[:ti] for c in t.class_ids]
        buffer.frozen = config.freeze_buffer_during_task and ti > 0
        stream_seed = int(rngs["stream"].integers(2**63))
        for batch in stream_batches(task, config.batch_size, stream_seed):
            memory_batch = []
            if use_memory and buffer.items:
                if config.retrieval == "mir":
                    memory_batch = mir_retrieve(buffer, config.k, config.candidates, model,
                                                batch, config.lr, rngs["buffer"])
                else:
                    memory_batch = random_retrieve(buffer, config.k, rngs["buffer"])
            mixed = compose_training_batch(
                batch, memory_batch, model, config, current_classes=task.class_ids,
                old_classes=old_classes, aug_rng=rngs["augment"], mix_rng=rngs["mix"])
            x, y = _stack(mixed)
            model, loss = nn.train_step(model, x, y, config.lr)
            log.current_updates += 1
            log.loss_trace.append((ti, batch.batch_index, loss))
            if use_memory:
                buffer.extend(batch.examples, rngs["buffer"])
            if config.trace_every and (batch.batch_index + 1) % config.trace_every == 0:
                log.boundary_trace.append(
                    (ti, batch.batch_index, *_boundary_point(model, tasks[:ti + 1], C)))
        if buffer.frozen:
            # analysis setting: the task's data enters memory once it is done
            buffer.frozen = False
            buffer.extend(task.train_examples, rngs["buffer"])
        accuracies, confusion = evaluate(model, tasks[:ti + 1], C)
        log.accuracy_matrix.append(accuracies)
        log.confusions.append(confusion)
        log.norm_trace.append(
            (ti, _mean_norm(model, task.class_ids), _mean_norm(model, old_classes)))
        if not config.trace_every:
            log.boundary_trace.append((ti, -1, *_boundary_point(model, tasks[:ti + 1], C)))
    return model, buffer, log
