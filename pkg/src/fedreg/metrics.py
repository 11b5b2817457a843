"""Evaluation and run reporting."""

import csv
import json
import os

import numpy as np

from fedreg.data import Dataset, Partition, normalize, partition_class_counts
from fedreg.errors import ConfigError
from fedreg.nn.model import ModelSpec, ModelState, forward


def evaluate(spec: ModelSpec, state: ModelState, dataset: Dataset,
             batch_size: int = 1024) -> float:
    """Top-1 accuracy on the dataset. Ties take the lowest class index."""
    if len(dataset) == 0:
        raise ConfigError("cannot evaluate on an empty dataset")
    hits = 0
    for start in range(0, len(dataset), batch_size):
        x = normalize(dataset.images[start:start + batch_size])
        y = dataset.labels[start:start + batch_size]
        logits, _, _ = forward(spec, state, x, need_trace=False)
        hits += int((np.argmax(logits, axis=1) == y).sum())
    return hits / len(dataset)


def median_last_k(values, k: int = 10) -> float:
    """Median of the trailing min(k, len) entries; the headline metric of
    a run, less noisy than the final-round value alone."""
    arr = np.asarray(values, dtype=np.float64)
    if arr.size == 0:
        raise ConfigError("no values to summarize")
    if k < 1:
        raise ConfigError("k must be >= 1")
    return float(np.median(arr[-min(k, arr.size):]))


def write_rounds_csv(path: str, history) -> None:
    """Per-round log: round, accuracy, mean local loss, participants.

    Participant ids are ';'-joined so the file stays one row per round.
    """
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["round", "accuracy", "mean_local_loss", "participants"])
        for r in history.records:
            w.writerow([
                r.round,
                f"{r.accuracy:.6f}",
                f"{r.mean_local_loss:.6f}",
                ";".join(str(c) for c in r.participants),
            ])


def write_heatmap_csv(path: str, partition: Partition, labels, n_classes: int) -> None:
    """Long-form client x class sample counts, for heterogeneity plots."""
    counts = partition_class_counts(partition, labels, n_classes)
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["client", "class", "count"])
        for i in range(counts.shape[0]):
            for c in range(counts.shape[1]):
                w.writerow([i, c, int(counts[i, c])])


def _jsonable(obj):
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    if isinstance(obj, (np.floating, np.integer)):
        return obj.item()
    if isinstance(obj, dict):
        return {k: _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    return obj


def write_report(out_dir: str, config: dict, history, headline_k: int = 10) -> dict:
    """rounds.csv plus report.json under out_dir; returns the report dict.

    The config section echoes the parsed experiment config verbatim, so a
    report can be fed back in as a config file to reproduce the run.
    """
    os.makedirs(out_dir, exist_ok=True)
    write_rounds_csv(os.path.join(out_dir, "rounds.csv"), history)
    accs = history.accuracies()
    last = history.records[-1]
    report = {
        "config": _jsonable(config),
        "rounds_completed": len(history),
        "headline_accuracy": median_last_k(accs, headline_k),
        "final_accuracy": float(accs[-1]),
        "best_accuracy": float(accs.max()),
        "final_round_alpha": _jsonable(last.alpha) if last.alpha is not None else None,
    }
    with open(os.path.join(out_dir, "report.json"), "w") as f:
        json.dump(report, f, indent=2, sort_keys=True)
        f.write("\n")
    return report
