"""Command-line experiment runner.

Config files are JSON::

    {
      "dataset": {"kind": "blobs", "class_count": 10, "dim": 16, "separation": 3.0,
                  "per_class_train": 500, "per_class_test": 100, "std": 1.0, "seed": 0},
      "classes_per_task": 2,
      "trainer": {"method": "er_dualmix", "memory_capacity": 500,
                  "pipeline": "crop:0.8,1.0|jitter:0.4"},
      "seeds": [0, 1, 2, 3, 4],
      "out": "runs/dualmix",
      "analysis": {"configs": ["identity", "flip", "crop:0.8,0.8"], "mc_samples": 64},
      "trace_every": 10
    }

``dataset.kind`` is ``blobs``, ``idx`` (``train_images``, ``train_labels``,
``test_images``, ``test_labels``) or ``csv`` (``train``, ``test``, optional
``feature_shape``).  Relative paths resolve against the config file.
The task split for a run uses the run seed unless ``split_seed`` is given.
"""
from __future__ import annotations

import argparse
import json
import os
import shutil
import sys
from concurrent.futures import ProcessPoolExecutor
from dataclasses import fields, replace
from pathlib import Path

import numpy as np

from . import nn
from .analysis import DAConfigPoint, _spearman, proposition1_scan, write_scatter_csv
from .augment import MixConfig
from .metrics import average_accuracy, average_forgetting, misclass_ratios, write_metric_csv
from .stream import gen_gaussian_blobs, import_csv, load_idx, split_into_tasks
from .trainer import METHODS, TrainerConfig, evaluate, manifest, train_stream


class ConfigError(Exception):
    pass


# ------------------------------------------------------------------ config

def load_config(path, overrides=None) -> dict:
    path = Path(path)
    if not path.is_file():
        raise ConfigError(f"config file not found: {path}")
    try:
        cfg = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON ({exc})") from None
    cfg["_base"] = str(path.resolve().parent)
    if cfg.get("out"):
        cfg["out"] = str(_resolve(cfg, cfg["out"]))
    for key, value in (overrides or {}).items():
        if value is not None:
            if key == "method":
                cfg.setdefault("trainer", {})["method"] = value
            else:
                cfg[key] = value
    _validate(cfg)
    return cfg


def _resolve(cfg, p) -> Path:
    p = Path(p)
    return p if p.is_absolute() else Path(cfg["_base"]) / p


def _validate(cfg) -> None:
    ds = cfg.get("dataset")
    if not isinstance(ds, dict) or "kind" not in ds:
        raise ConfigError("config needs a 'dataset' object with a 'kind'")
    paths = {"idx": ("train_images", "train_labels", "test_images", "test_labels"),
             "csv": ("train", "test")}.get(ds["kind"])
    if ds["kind"] not in ("blobs", "idx", "csv"):
        raise ConfigError(f"unknown dataset kind {ds['kind']!r}")
    for key in paths or ():
        if key not in ds:
            raise ConfigError(f"dataset.{key} is required for kind {ds['kind']!r}")
        if not _resolve(cfg, ds[key]).is_file():
            raise ConfigError(f"dataset file not found: {ds[key]}")
    seeds = cfg.get("seeds", [0])
    if not seeds or not all(isinstance(s, int) for s in seeds):
        raise ConfigError("'seeds' must be a non-empty list of integers")
    cfg["seeds"] = seeds
    if not cfg.get("out"):
        raise ConfigError("no output directory given (config 'out' or --out)")
    try:
        trainer_config(cfg, seeds[0])
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"invalid trainer section: {exc}") from None


def trainer_config(cfg, seed) -> TrainerConfig:
    section = dict(cfg.get("trainer", {}))
    known = {f.name for f in fields(TrainerConfig)}
    unknown = set(section) - known
    if unknown:
        raise ValueError(f"unknown trainer keys {sorted(unknown)}")
    if "mix" in section:
        section["mix"] = MixConfig(**section["mix"])
    if "hidden" in section:
        section["hidden"] = tuple(section["hidden"])
    section.pop("seed", None)
    return TrainerConfig(**section, seed=seed)


def build_dataset(cfg):
    ds = cfg["dataset"]
    kind = ds["kind"]
    if kind == "blobs":
        args = {k: v for k, v in ds.items() if k != "kind"}
        if "image_shape" in args and args["image_shape"] is not None:
            args["image_shape"] = tuple(args["image_shape"])
        return gen_gaussian_blobs(**args)
    if kind == "idx":
        train = load_idx(_resolve(cfg, ds["train_images"]), _resolve(cfg, ds["train_labels"]))
        test = load_idx(_resolve(cfg, ds["test_images"]), _resolve(cfg, ds["test_labels"]),
                        split="test", uid_offset=len(train))
        return train + test
    shape = tuple(ds["feature_shape"]) if ds.get("feature_shape") else None
    train = import_csv(_resolve(cfg, ds["train"]), "train", shape)
    test = import_csv(_resolve(cfg, ds["test"]), "test", shape, uid_offset=len(train))
    return train + test


def tasks_for(cfg, dataset, seed):
    split_seed = cfg.get("split_seed", seed)
    return split_into_tasks(dataset, cfg.get("classes_per_task", 2), split_seed)


# --------------------------------------------------------------- execution

def _workers() -> int:
    try:
        return max(1, int(os.environ.get("OCIMIX_THREADS", "1")))
    except ValueError:
        return 1


def _map(fn, items):
    items = list(items)
    workers = min(_workers(), len(items))
    if workers <= 1:
        return [fn(i) for i in items]
    with ProcessPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(fn, items))


def _final_report(log, tasks):
    n = len(tasks)
    cm = log.confusions[-1]
    old = [c for t in tasks[:-1] for c in t.class_ids]
    report = misclass_ratios(cm, old, tasks[-1].class_ids)
    return {
        "average_accuracy": average_accuracy(log.accuracy_matrix, n),
        "average_forgetting": average_forgetting(log.accuracy_matrix, n) if n > 1 else None,
        "er_new_as_old": report.er_new_as_old,
        "er_old_as_new": report.er_old_as_new,
    }


def _metric_rows(log, tasks):
    rows = []
    for i in range(1, len(tasks) + 1):
        old = [c for t in tasks[:i - 1] for c in t.class_ids]
        report = misclass_ratios(log.confusions[i - 1], old, tasks[i - 1].class_ids)
        rows.append({
            "task_index": i,
            "average_accuracy": average_accuracy(log.accuracy_matrix, i),
            "average_forgetting": average_forgetting(log.accuracy_matrix, i) if i > 1 else None,
            "er_new_as_old": report.er_new_as_old,
            "er_old_as_new": report.er_old_as_new,
        })
    return rows


def _train_one(args):
    cfg, seed, run_dir, trace_every = args
    dataset = build_dataset(cfg)
    tasks = tasks_for(cfg, dataset, seed)
    tcfg = trainer_config(cfg, seed)
    if trace_every:
        tcfg = replace(tcfg, trace_every=trace_every)
    model, _, log = train_stream(tcfg, tasks)
    log.write(run_dir, manifest(tcfg, {"task_classes": [list(t.class_ids) for t in tasks]}))
    write_metric_csv(Path(run_dir) / "metrics.csv", _metric_rows(log, tasks))
    nn.save_model(model, Path(run_dir) / "model.json")
    return seed, _final_report(log, tasks), log.boundary_trace


def _mean_std(values):
    values = [v for v in values if v is not None]
    if not values:
        return None
    return {"mean": float(np.mean(values)), "std": float(np.std(values)), "n": len(values)}


class _Staging:
    """Write into ``<out>.partial`` and move into place only on success."""

    def __init__(self, out):
        self.out = Path(out)
        self.tmp = self.out.with_name(self.out.name + ".partial")

    def __enter__(self) -> Path:
        shutil.rmtree(self.tmp, ignore_errors=True)
        self.tmp.mkdir(parents=True)
        return self.tmp

    def __exit__(self, exc_type, exc, tb):
        if exc_type is not None:
            shutil.rmtree(self.tmp, ignore_errors=True)
            return False
        shutil.rmtree(self.out, ignore_errors=True)
        self.tmp.rename(self.out)
        return False


def _run_seeds(cfg, out: Path, trace_every=0):
    jobs = [(cfg, s, out / f"seed_{s}", trace_every) for s in cfg["seeds"]]
    return _map(_train_one, jobs)


def cmd_train(cfg) -> int:
    with _Staging(cfg["out"]) as out:
        results = _run_seeds(cfg, out)
        per_seed = {str(seed): report for seed, report, _ in results}
        summary = {
            "method": trainer_config(cfg, 0).method,
            "seeds": cfg["seeds"],
            "per_seed": per_seed,
        }
        for key in ("average_accuracy", "average_forgetting", "er_new_as_old", "er_old_as_new"):
            summary[key] = _mean_std([r[key] for _, r, _ in results])
        (out / "summary.json").write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n")
    aa = summary["average_accuracy"]
    af = summary["average_forgetting"]
    print(f"{summary['method']}: average accuracy {aa['mean']:.4f} ± {aa['std']:.4f}"
          + (f", average forgetting {af['mean']:.4f} ± {af['std']:.4f}" if af else ""))
    return 0


def cmd_boundary_trace(cfg) -> int:
    trace_every = int(cfg.get("trace_every", 0))
    with _Staging(cfg["out"]) as out:
        results = _run_seeds(cfg, out, trace_every)
        points = {}
        for _, _, trace in results:
            for task, batch, no, on in trace:
                points.setdefault((task, batch), []).append((no, on))
        rows = []
        for (task, batch), vals in sorted(points.items()):
            no = [v for v, _ in vals if v is not None]
            on = [v for _, v in vals if v is not None]
            rows.append([task, batch, repr(float(np.mean(no))) if no else "",
                         repr(float(np.mean(on))) if on else "", len(vals)])
        with open(out / "boundary_trace.csv", "w") as f:
            f.write("task,batch,er_new_as_old,er_old_as_new,runs\n")
            for row in rows:
                f.write(",".join(str(v) for v in row) + "\n")
    last = rows[-1] if rows else None
    if last:
        print(f"final checkpoint: er(n,o)={last[2] or 'absent'} er(o,n)={last[3] or 'absent'}")
    return 0


def cmd_analyze_da(cfg) -> int:
    section = cfg.get("analysis", {})
    configs = section.get("configs", [])
    if len(configs) < 3:
        raise ConfigError("analysis.configs must list at least 3 DA pipelines")
    dataset = build_dataset(cfg)
    base = trainer_config(cfg, 0)
    mc = int(section.get("mc_samples", 64))
    per_seed = _map(_scan_one, [(cfg, dataset, configs, base, s, mc) for s in cfg["seeds"]])
    points = [
        DAConfigPoint(p.config, p.strength,
                      *(float(np.mean([getattr(run[i], k) for run in per_seed]))
                        for k in ("co", "fg", "m_bar", "final_aa")))
        for i, p in enumerate(per_seed[0])
    ]
    stats = {
        "spearman_co_fg": _spearman([p.co for p in points], [p.fg for p in points]),
        "spearman_mbar_aa": _spearman([p.m_bar for p in points], [p.final_aa for p in points]),
    }
    with _Staging(cfg["out"]) as out:
        write_scatter_csv(out / "scatter.csv", points)
        (out / "stats.json").write_text(json.dumps(stats, indent=2, sort_keys=True) + "\n")
    print(f"Spearman CO~FG: {stats['spearman_co_fg']:.4f}")
    print(f"Spearman m_bar~AA: {stats['spearman_mbar_aa']:.4f}")
    return 0


def _scan_one(args):
    cfg, dataset, configs, base, seed, mc = args
    tasks = tasks_for(cfg, dataset, seed)
    points, _ = proposition1_scan(configs, tasks, base, [seed], mc_samples=mc)
    return points


def cmd_eval(cfg, checkpoint) -> int:
    path = Path(checkpoint)
    if not path.is_file():
        raise ConfigError(f"checkpoint not found: {checkpoint}")
    model = nn.load_model(path)
    dataset = build_dataset(cfg)
    seed = cfg["seeds"][0]
    tasks = tasks_for(cfg, dataset, seed)
    accuracies, confusion = evaluate(model, tasks, model.class_count)
    with _Staging(cfg["out"]) as out:
        with open(out / "eval.csv", "w") as f:
            f.write("task,classes,accuracy\n")
            for t, a in zip(tasks, accuracies):
                f.write(f"{t.task_id},{' '.join(map(str, t.class_ids))},{float(a)!r}\n")
        np.savetxt(out / "confusion.csv", confusion, fmt="%d", delimiter=",")
    print(f"mean accuracy over {len(tasks)} tasks: {float(np.mean(accuracies)):.4f}")
    return 0


# -------------------------------------------------------------------- main

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="ocimix", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)
    for name, help_text in [("train", "train every seed and summarise"),
                            ("analyze-da", "scan DA configs for CO/FG/m_bar/AA"),
                            ("boundary-trace", "old/new misclassification ratios over training"),
                            ("eval", "re-evaluate a saved checkpoint")]:
        p = sub.add_parser(name, help=help_text)
        p.add_argument("--config", required=True, help="JSON experiment config")
        p.add_argument("--out", help="output directory (overrides config)")
        p.add_argument("--seeds", help="comma-separated seeds, e.g. 1,2,3")
        p.add_argument("--method", choices=METHODS, help="override trainer.method")
        if name == "eval":
            p.add_argument("--checkpoint", required=True, help="model.json from a train run")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        seeds = [int(s) for s in args.seeds.split(",")] if args.seeds else None
    except ValueError:
        print(f"error: bad --seeds value {args.seeds!r}", file=sys.stderr)
        return 2
    try:
        cfg = load_config(args.config, {"out": args.out, "seeds": seeds, "method": args.method})
        if args.command == "train":
            return cmd_train(cfg)
        if args.command == "analyze-da":
            return cmd_analyze_da(cfg)
        if args.command == "boundary-trace":
            return cmd_boundary_trace(cfg)
        return cmd_eval(cfg, args.checkpoint)
    except (ConfigError, ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
