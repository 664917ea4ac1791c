"""Mask average precision over IoU thresholds, per class and averaged."""

from __future__ import annotations

import csv
from dataclasses import dataclass

import numpy as np

from .pseudo import mask_iou

DEFAULT_THRESHOLDS = tuple(np.round(np.arange(0.50, 0.951, 0.05), 2).tolist())


@dataclass
class APResult:
    per_class_ap: dict  # class id -> AP averaged over thresholds
    mean_ap: float
    thresholds: tuple
    per_threshold: dict  # threshold -> AP averaged over classes

    def summary(self) -> str:
        lines = [f"mean_ap = {self.mean_ap:.6f}"]
        for t in self.thresholds:
            lines.append(f"ap@{t:.2f} = {self.per_threshold[t]:.6f}")
        for c in sorted(self.per_class_ap):
            lines.append(f"class.{c}.ap = {self.per_class_ap[c]:.6f}")
        return "\n".join(lines) + "\n"


def average_precision(tp_flags, n_gt: int) -> float:
    """All-points interpolated area under the PR curve for ranked TP flags."""
    if n_gt == 0:
        raise ValueError("AP undefined without ground truth")
    tp_flags = np.asarray(tp_flags, dtype=bool)
    if tp_flags.size == 0:
        return 0.0
    tp = np.cumsum(tp_flags)
    fp = np.cumsum(~tp_flags)
    recall = tp / n_gt
    precision = tp / (tp + fp)
    mpre = np.maximum.accumulate(precision[::-1])[::-1]
    prev = np.concatenate([[0.0], recall[:-1]])
    return float(np.sum((recall - prev) * mpre))


def match_ranked(preds, gts, ious, threshold: float) -> list:
    """TP flag per prediction in ``preds`` order.

    ``preds``: (scene index, pred index) in descending score order;
    ``gts``: scene index -> list of GT indices of this class;
    ``ious``: scene index -> full IoU matrix for that scene.
    """
    used = {s: set() for s in gts}
    flags = []
    for s, p in preds:
        best, best_iou = None, threshold
        for g in gts.get(s, ()):
            if g in used[s]:
                continue
            v = ious[s][p, g]
            if v >= best_iou and (best is None or v > best_iou):
                best, best_iou = g, v
        if best is not None:
            used[s].add(best)
        flags.append(best is not None)
    return flags


def evaluate_ap(predictions, ground_truth, thresholds=DEFAULT_THRESHOLDS) -> APResult:
    """``predictions``/``ground_truth``: per scene, lists of InstanceLabel;
    prediction ``confidence`` is the ranking score. Ties keep input order."""
    if len(predictions) != len(ground_truth):
        raise ValueError(f"{len(predictions)} prediction lists for {len(ground_truth)} scenes")
    thresholds = tuple(float(t) for t in thresholds)
    ious = []
    for preds, gts in zip(predictions, ground_truth):
        if preds and gts:
            ious.append(mask_iou(np.stack([p.mask for p in preds]), np.stack([g.mask for g in gts])))
        else:
            ious.append(np.zeros((len(preds), len(gts))))
    classes = sorted({g.class_id for gts in ground_truth for g in gts})
    per_class, per_cell = {}, {}
    for c in classes:
        ranked = [(s, i, p.confidence) for s, preds in enumerate(predictions)
                  for i, p in enumerate(preds) if p.class_id == c]
        order = sorted(range(len(ranked)), key=lambda k: -ranked[k][2])  # sorted() is stable
        ranked = [ranked[k][:2] for k in order]
        gts = {s: [j for j, g in enumerate(g_list) if g.class_id == c] for s, g_list in enumerate(ground_truth)}
        n_gt = sum(len(v) for v in gts.values())
        for t in thresholds:
            per_cell[c, t] = average_precision(match_ranked(ranked, gts, ious, t), n_gt)
        per_class[c] = float(np.mean([per_cell[c, t] for t in thresholds]))
    per_threshold = {t: float(np.mean([per_cell[c, t] for c in classes])) if classes else 0.0 for t in thresholds}
    mean_ap = float(np.mean(list(per_class.values()))) if classes else 0.0
    return APResult(per_class, mean_ap, thresholds, per_threshold)


def write_ap_csv(path, result: APResult) -> None:
    with open(path, "w", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(["class", "threshold", "ap"])
        for c in sorted(result.per_class_ap):
            w.writerow([c, "mean", f"{result.per_class_ap[c]:.6f}"])
        for t in result.thresholds:
            w.writerow(["all", f"{t:.2f}", f"{result.per_threshold[t]:.6f}"])
        w.writerow(["all", "mean", f"{result.mean_ap:.6f}"])
