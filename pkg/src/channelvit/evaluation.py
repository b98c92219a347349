"""Exhaustive channel-combination evaluation and model-vs-model gain analysis."""

import concurrent.futures
import csv
from dataclasses import dataclass

import numpy as np

from . import models
from .errors import InputError
from .sampling import all_combinations

MAX_EVAL_CHANNELS = 12


@dataclass
class GroupStats:
    mean: float
    std: float
    count: int


@dataclass
class CombinationReport:
    """Accuracy for every nonempty channel subset, plus per-size summaries."""

    per_combination: dict   # ChannelCombination -> accuracy
    grouped: dict           # m -> GroupStats
    n_eval: int


def _grouped_stats(values_by_m):
    grouped = {}
    for m, vals in sorted(values_by_m.items()):
        arr = np.asarray(vals)
        # population std: descriptive statistic over the full group
        grouped[m] = GroupStats(float(arr.mean()), float(arr.std()), len(arr))
    return grouped


def accuracy_for_combination(params, patches, labels, comb, batch_size=256):
    """Fraction of argmax-logit predictions matching labels; ties break to the
    lowest class index."""
    n = patches.shape[0]
    correct = 0
    for start in range(0, n, batch_size):
        chunk = patches[start:start + batch_size]
        res = models.logits_for_patches(params, chunk, comb)
        pred = np.argmax(res.logits.value, axis=1)
        correct += int((pred == labels[start:start + batch_size]).sum())
    return correct / n


def evaluate_all_combinations(params, dataset, batch_size=256, threads=1):
    """Accuracy of the model under every nonempty channel subset.

    Refuses more than 12 channels (2^C - 1 sweeps). The model is read-only, so
    combinations may be evaluated on a thread pool; results are reduced in
    lexicographic combination order either way.
    """
    cfg = params.config
    c = cfg.channels
    if c > MAX_EVAL_CHANNELS:
        raise InputError(
            f"refusing to evaluate {2 ** c - 1} channel combinations "
            f"(C={c} > {MAX_EVAL_CHANNELS})")
    if dataset.images.shape[1] != c:
        raise InputError(
            f"dataset has {dataset.images.shape[1]} channels, model expects {c}")
    patches = models.patchify_batch(dataset.images, cfg.patch_size)
    labels = np.asarray(dataset.labels)
    combos = all_combinations(c)

    def job(comb):
        return accuracy_for_combination(params, patches, labels, comb, batch_size)

    if threads > 1:
        with concurrent.futures.ThreadPoolExecutor(max_workers=threads) as pool:
            accs = list(pool.map(job, combos))
    else:
        accs = [job(comb) for comb in combos]

    per_combination = dict(zip(combos, accs))
    by_m = {}
    for comb, acc in per_combination.items():
        by_m.setdefault(len(comb), []).append(acc)
    return CombinationReport(per_combination, _grouped_stats(by_m), len(labels))


@dataclass
class GainReport:
    """Elementwise accuracy differences between two combination reports."""

    per_combination: dict
    grouped: dict


def gain_report(report_a, report_b):
    """report_a minus report_b, per combination and grouped per size."""
    keys_a = set(report_a.per_combination)
    keys_b = set(report_b.per_combination)
    if keys_a != keys_b:
        raise InputError("reports cover different combination sets")
    diffs = {comb: report_a.per_combination[comb] - report_b.per_combination[comb]
             for comb in report_a.per_combination}
    by_m = {}
    for comb, d in diffs.items():
        by_m.setdefault(len(comb), []).append(d)
    return GainReport(diffs, _grouped_stats(by_m))


def _comb_key(comb):
    return "-".join(str(i) for i in comb.indices)


def write_report_csv(report, path):
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["combination", "m", "accuracy"])
        for comb in sorted(report.per_combination, key=lambda c: (len(c), c.indices)):
            w.writerow([_comb_key(comb), len(comb),
                        f"{report.per_combination[comb]:.6f}"])


def write_grouped_csv(report, path):
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["m", "mean", "std", "count"])
        for m, stats in sorted(report.grouped.items()):
            w.writerow([m, f"{stats.mean:.6f}", f"{stats.std:.6f}", stats.count])


def write_gain_csv(gain, path):
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["combination", "m", "gain"])
        for comb in sorted(gain.per_combination, key=lambda c: (len(c), c.indices)):
            w.writerow([_comb_key(comb), len(comb),
                        f"{gain.per_combination[comb]:.6f}"])


def per_class_accuracy(params, dataset, comb=None, batch_size=256):
    """Accuracy split by true class, as a [num_classes] array (NaN-free: classes
    with no examples get 0 count)."""
    cfg = params.config
    patches = models.patchify_batch(dataset.images, cfg.patch_size)
    labels = np.asarray(dataset.labels)
    correct = np.zeros(dataset.num_classes, dtype=np.int64)
    totals = np.zeros(dataset.num_classes, dtype=np.int64)
    for start in range(0, len(labels), batch_size):
        chunk = patches[start:start + batch_size]
        y = labels[start:start + batch_size]
        res = models.logits_for_patches(params, chunk, comb)
        pred = np.argmax(res.logits.value, axis=1)
        for label, ok in zip(y, pred == y):
            totals[label] += 1
            correct[label] += int(ok)
    with np.errstate(invalid="ignore"):
        acc = np.where(totals > 0, correct / np.maximum(totals, 1), 0.0)
    return acc, totals
