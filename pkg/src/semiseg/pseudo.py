"""Pseudo-label filtering, prompt-based refinement and label-quality metrics."""

from __future__ import annotations

import csv
from dataclasses import dataclass

import numpy as np

from .rng import stream
from .synthdata import InstanceLabel

PROMPT_TYPES = ("points", "single", "center", "box", "mask")


@dataclass(frozen=True)
class RefinementConfig:
    points: int = 5
    fallback_min_size: int = 5
    replace: bool = True
    prompt: str = "points"

    def __post_init__(self):
        if self.points < 1:
            raise ValueError("points must be >= 1")
        if self.prompt not in PROMPT_TYPES:
            raise ValueError(f"prompt must be one of {PROMPT_TYPES}, got {self.prompt!r}")


@dataclass(frozen=True)
class QualityReport:
    ca: float
    ca_total: float
    sq: float
    tp: int
    matched: int
    total: int


def sampling_distribution(label: InstanceLabel) -> np.ndarray:
    """Soft mask restricted to the binary mask, normalized to sum to one."""
    if label.soft_mask is None:
        raise ValueError("label has no soft mask")
    if not label.mask.any():
        raise ValueError("label mask is empty")
    p = np.where(label.mask, label.soft_mask.astype(np.float64), 0.0)
    total = p.sum()
    if total <= 0:
        raise ValueError("soft mask carries zero probability inside the binary mask")
    return p / total


def sample_points(dist: np.ndarray, count: int, rng: np.random.Generator, replace: bool = True) -> np.ndarray:
    """(count, 2) integer (row, col) points drawn from a normalized 2-D distribution."""
    flat = dist.ravel()
    if not replace:
        count = min(count, int((flat > 0).sum()))
    idx = rng.choice(flat.size, size=count, replace=replace, p=flat)
    return np.stack(np.unravel_index(idx, dist.shape), axis=1)


def _center_point(mask: np.ndarray) -> np.ndarray:
    rr, cc = np.nonzero(mask)
    cy, cx = rr.mean(), cc.mean()
    k = np.argmin((rr - cy) ** 2 + (cc - cx) ** 2)
    return np.array([[rr[k], cc[k]]])


def refine_label(label: InstanceLabel, scene, oracle, cfg: RefinementConfig, rng: np.random.Generator) -> InstanceLabel:
    """Re-segment one pseudo-label with the oracle, keeping class and confidence.

    Falls back to the input label when the oracle returns an empty or tiny mask.
    """
    if cfg.prompt == "box":
        rr, cc = np.nonzero(label.mask)
        refined = oracle.box_segment(scene, (rr.min(), cc.min(), rr.max(), cc.max()))
    elif cfg.prompt == "mask":
        refined = oracle.mask_segment(scene, label.mask)
    else:
        if cfg.prompt == "center":
            pts = _center_point(label.mask)
        else:
            k = 1 if cfg.prompt == "single" else cfg.points
            pts = sample_points(sampling_distribution(label), k, rng, cfg.replace)
        refined = oracle.prompt_segment(scene, pts, rng)
    if refined.sum() < max(cfg.fallback_min_size, 1):
        return label
    return InstanceLabel(label.class_id, refined, label.confidence, refined.astype(np.float32))


def refine_labels(labels, scene, oracle, cfg: RefinementConfig, seed, *names) -> list:
    """Refine every label with its own substream ``(seed, *names, k)``."""
    return [refine_label(lab, scene, oracle, cfg, stream(seed, *names, k)) for k, lab in enumerate(labels)]


def filter_pseudo_labels(labels, tau_c: float = 0.7, min_size: int = 5) -> list:
    return [l for l in labels if l.confidence > tau_c and l.area >= min_size]


# ---------------------------------------------------------------------------
# quality


def mask_iou(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """(n, H, W) x (m, H, W) -> (n, m) IoU matrix."""
    a = np.asarray(a, dtype=bool).reshape(len(a), -1).astype(np.float64)
    b = np.asarray(b, dtype=bool).reshape(len(b), -1).astype(np.float64)
    if len(a) == 0 or len(b) == 0:
        return np.zeros((len(a), len(b)))
    inter = a @ b.T
    union = a.sum(1)[:, None] + b.sum(1)[None, :] - inter
    return np.where(union > 0, inter / np.maximum(union, 1), 0.0)


def _greedy_pairs(iou: np.ndarray):
    pairs = []
    if iou.size == 0:
        return pairs
    order = np.argsort(-iou, axis=None, kind="stable")
    used_p, used_g = set(), set()
    for flat in order:
        p, g = np.unravel_index(flat, iou.shape)
        if p in used_p or g in used_g:
            continue
        used_p.add(p)
        used_g.add(g)
        pairs.append((int(p), int(g), float(iou[p, g])))
    return pairs


def quality_counts(predictions, ground_truth) -> tuple[int, int, int, float]:
    """(tp, matched, total, sum of TP IoUs) for one image."""
    if not predictions:
        return 0, 0, 0, 0.0
    if not ground_truth:
        return 0, 0, len(predictions), 0.0
    iou = mask_iou(np.stack([p.mask for p in predictions]), np.stack([g.mask for g in ground_truth]))
    tp = matched = 0
    iou_sum = 0.0
    for p, g, v in _greedy_pairs(iou):
        if v <= 0.5:
            continue
        matched += 1
        if predictions[p].class_id == ground_truth[g].class_id:
            tp += 1
            iou_sum += v
    return tp, matched, len(predictions), iou_sum


def quality_report(predictions, ground_truth) -> QualityReport:
    """Class accuracy and segmentation quality of predicted instances.

    ``predictions``/``ground_truth`` are label lists for one image, or lists
    of such lists for several images (counts are pooled).
    """
    if predictions and isinstance(predictions[0], InstanceLabel) or ground_truth and isinstance(ground_truth[0], InstanceLabel):
        predictions, ground_truth = [predictions], [ground_truth]
    tp = matched = total = 0
    iou_sum = 0.0
    for preds, gts in zip(predictions, ground_truth):
        a, b, c, s = quality_counts(preds, gts)
        tp, matched, total, iou_sum = tp + a, matched + b, total + c, iou_sum + s
    return QualityReport(
        ca=tp / matched if matched else 0.0,
        ca_total=tp / total if total else 0.0,
        sq=iou_sum / tp if tp else 0.0,
        tp=tp, matched=matched, total=total,
    )


def write_quality_csv(path, rows) -> None:
    """``rows`` is an iterable of (scene_id, QualityReport)."""
    with open(path, "w", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(["scene_id", "CA", "CA_total", "SQ", "TP", "matched", "total"])
        for sid, r in rows:
            w.writerow([sid, f"{r.ca:.6f}", f"{r.ca_total:.6f}", f"{r.sq:.6f}", r.tp, r.matched, r.total])
