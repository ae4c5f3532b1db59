"""Accuracy and interpretability-drift measurements."""

from __future__ import annotations

import io
import csv
from dataclasses import dataclass, field

import numpy as np

from . import numerics as nx
from . import protonet as pn


class MetricsError(ValueError):
    pass


# ---------------------------------------------------------------- accuracy

def predictions(logits: np.ndarray, classes: list[int], slices, mode: str, task_index: int | None = None) -> np.ndarray:
    """Predicted class ids from concatenated logits.

    ``task_aware`` restricts the argmax to the head ``task_index``;
    ``task_agnostic`` takes it over every head.
    """
    classes = np.asarray(classes)
    if mode == "task_aware":
        if task_index is None:
            raise MetricsError("task_aware prediction needs the task index")
        cs = slices[task_index][1]
        return classes[cs][np.argmax(logits[:, cs], axis=1)]
    if mode == "task_agnostic":
        return classes[np.argmax(logits, axis=1)]
    raise MetricsError(f"unknown mode {mode!r}")


def task_accuracies(model, tasks, mode: str, compensation=None, batch_size: int = 64) -> list[float]:
    """Test accuracy per task; ``tasks`` are TaskSpecs covered by the model's heads."""
    from .continual import apply_compensation

    m = pn._as_model(model)
    slices = m.head_slices()
    out = []
    for t in tasks:
        if t.task_id > len(m.heads):
            raise MetricsError(f"task {t.task_id} has not been learned")
        logits = pn.predict_logits(m, t.test.images, batch_size)
        if compensation is not None and mode == "task_agnostic":
            logits = apply_compensation(logits, compensation, slices)
        pred = predictions(logits, m.classes, slices, mode, t.task_id - 1)
        out.append(float(np.mean(pred == t.test.labels)))
    return out


def average_incremental_accuracy(per_task_acc) -> float:
    acc = np.asarray(per_task_acc, dtype=np.float64)
    if acc.size == 0:
        raise MetricsError("no accuracies to average")
    return float(acc.mean())


@dataclass
class EvalReport:
    episode: int
    task_aware: list[float]
    task_agnostic: list[float]
    task_agnostic_comp: list[float]

    @property
    def averages(self) -> dict[str, float]:
        return {
            "task_aware": average_incremental_accuracy(self.task_aware),
            "task_agnostic": average_incremental_accuracy(self.task_agnostic),
            "task_agnostic_comp": average_incremental_accuracy(self.task_agnostic_comp),
        }


# ---------------------------------------------------------------- drift

def similarity_maps(model, images, batch_size: int = 64) -> np.ndarray:
    """(N, H, W, M) similarity maps of every prototype on every image."""
    images = np.asarray(images)
    out = []
    with nx.no_grad():
        for start in range(0, len(images), batch_size):
            fp = pn.run(model, images[start:start + batch_size])
            n, h, w, _ = fp.features.shape
            out.append(fp.similarities.data.reshape(n, h, w, -1))
    return np.concatenate(out, axis=0)


def icd_values(maps_before: np.ndarray, maps_after: np.ndarray) -> np.ndarray:
    """Mean absolute similarity change per (image, prototype) for (N, H, W, M) maps."""
    if maps_before.shape[1:3] != maps_after.shape[1:3]:
        raise MetricsError("similarity maps differ in spatial shape")
    m = maps_before.shape[3]
    return np.abs(maps_before - maps_after[..., :m]).mean(axis=(1, 2))


def icd(snap, model, image, prototype_id: int) -> float:
    """Mean over cells of |sim before - sim after| for one prototype on one image."""
    image = np.asarray(image)
    if image.ndim == 3:
        image = image[None]
    before = similarity_maps(snap, image)
    if prototype_id >= before.shape[3]:
        raise MetricsError(f"prototype {prototype_id} does not exist in the snapshot")
    after = similarity_maps(model, image)
    return float(icd_values(before[..., prototype_id:prototype_id + 1], after[..., prototype_id:prototype_id + 1])[0, 0])


def binarize(sim_map: np.ndarray, percentile: float) -> np.ndarray:
    if not 0.0 < percentile < 100.0:
        raise MetricsError("percentile must lie in (0, 100)")
    return sim_map > np.percentile(sim_map, percentile)


def iou_drift(map_a: np.ndarray, map_b: np.ndarray, percentile: float = 95.0) -> float:
    map_a, map_b = np.asarray(map_a), np.asarray(map_b)
    if map_a.shape != map_b.shape:
        raise MetricsError("maps must share a shape")
    a, b = binarize(map_a, percentile), binarize(map_b, percentile)
    return iou_of_masks(a, b)


def iou_of_masks(a: np.ndarray, b: np.ndarray) -> float:
    union = np.logical_or(a, b).sum()
    if union == 0:
        return 1.0
    return float(np.logical_and(a, b).sum() / union)


def iou_values(maps_before: np.ndarray, maps_after: np.ndarray, percentile: float) -> np.ndarray:
    """IoU per (image, prototype) of binarized (N, H, W, M) maps."""
    n, h, w, m = maps_before.shape
    a = maps_before.reshape(n, h * w, m)
    b = maps_after[..., :m].reshape(n, h * w, m)
    ta = np.percentile(a, percentile, axis=1, keepdims=True)
    tb = np.percentile(b, percentile, axis=1, keepdims=True)
    ba, bb = a > ta, b > tb
    inter = np.logical_and(ba, bb).sum(axis=1)
    union = np.logical_or(ba, bb).sum(axis=1)
    return np.where(union == 0, 1.0, inter / np.maximum(union, 1))


@dataclass
class DriftReport:
    """Drift of old prototypes between the pre-task snapshot and the trained model."""

    episode: int
    percentile: float
    icd: np.ndarray  # (probe images, old prototypes)
    iou: np.ndarray  # (probe images, old prototypes)
    prototype_task: np.ndarray  # task id of every old prototype

    def per_task(self) -> dict[int, dict[str, float]]:
        out = {}
        for t in np.unique(self.prototype_task):
            cols = self.prototype_task == t
            out[int(t)] = {"icd": float(self.icd[:, cols].mean()), "iou": float(self.iou[:, cols].mean())}
        return out


def drift_report(snap, model, probes: np.ndarray, episode: int, percentile: float = 95.0) -> DriftReport:
    old = pn._as_model(snap)
    task_of = np.concatenate([np.full(h.num_prototypes, h.task_id) for h in old.heads]) if old.heads else np.zeros(0, int)
    if not old.heads or len(probes) == 0:
        return DriftReport(episode, percentile, np.zeros((len(probes), 0)), np.zeros((len(probes), 0)), task_of)
    before = similarity_maps(snap, probes)
    after = similarity_maps(model, probes)
    return DriftReport(episode, percentile, icd_values(before, after), iou_values(before, after, percentile), task_of)


@dataclass
class DriftTable:
    """Rows are evaluation episodes, columns the task whose prototypes are tracked."""

    percentile: float
    iou: np.ndarray  # (episodes, tasks), NaN where the task is not yet learned
    icd: np.ndarray
    prototype_counts: list[int]
    columns: dict[str, list[float]] = field(default_factory=dict)

    def summary(self) -> dict[str, float]:
        """Column means over later episodes plus weighted / unweighted means across columns."""
        episodes, tasks = self.iou.shape
        cols = [k for k in range(tasks) if k + 1 < episodes] or [0]
        out = {}
        for name, table in (("iou", self.iou), ("icd", self.icd)):
            values = []
            for k in cols:
                later = table[k + 1:, k] if k + 1 < episodes else table[k:k + 1, k]
                values.append(float(np.mean(later)))
            weights = np.array([self.prototype_counts[k] for k in cols], dtype=float)
            for k, v in zip(cols, values):
                out[f"{name}_task{k + 1}"] = v
            out[f"{name}_mean"] = float(np.dot(weights, values) / weights.sum())
            out[f"{name}_mean_unweighted"] = float(np.mean(values))
        return out


def drift_table(history, probes: dict[int, np.ndarray], percentile: float = 95.0) -> DriftTable:
    """Compare each task's prototypes right after their task against every later episode.

    ``history`` holds one snapshot per episode; ``probes`` maps task id to the
    fixed probe images of that task.
    """
    if not history:
        raise MetricsError("no snapshots in the run history")
    episodes = len(history)
    tasks = len(pn._as_model(history[-1]).heads)
    iou = np.full((episodes, tasks), np.nan)
    icd_t = np.full((episodes, tasks), np.nan)
    counts = []
    for k in range(tasks):
        origin = history[k]
        if origin is None:
            raise MetricsError(f"missing snapshot for episode {k + 1}")
        heads = pn._as_model(origin).heads
        start = sum(h.num_prototypes for h in heads[:k])
        stop = start + heads[k].num_prototypes
        counts.append(stop - start)
        ref = similarity_maps(origin, probes[k + 1])[..., start:stop]
        for e in range(k, episodes):
            later = similarity_maps(history[e], probes[k + 1])[..., start:stop]
            iou[e, k] = iou_values(ref, later, percentile).mean()
            icd_t[e, k] = icd_values(ref, later).mean()
    return DriftTable(percentile, iou, icd_t, counts)


# ---------------------------------------------------------------- CSV

def matrix_csv(matrix, row_label: str = "after_episode") -> str:
    """Episode-by-task table; missing cells are written as NA."""
    matrix = np.asarray(matrix, dtype=float)
    if matrix.size == 0:
        matrix = matrix.reshape(0, 0)
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow([row_label] + [f"task{k + 1}" for k in range(matrix.shape[1])] + ["avg"])
    for e, row in enumerate(matrix):
        present = row[~np.isnan(row)]
        cells = ["NA" if np.isnan(v) else f"{v:.6f}" for v in row]
        writer.writerow([e + 1] + cells + [f"{present.mean():.6f}" if present.size else "NA"])
    return buf.getvalue()
