"""Set-prediction matching and the classification + mask losses.

Mask terms are evaluated on the feature grid: with nearest-neighbour
upsampling every pixel inside a grid cell shares that cell's logit, so sums
over pixels collapse to sums over cells weighted by how many target pixels
each cell covers. ``dice_loss``/``bce_loss`` are the plain full-resolution
definitions; ``cell_targets`` + the ``*_cells`` variants are the exact
grid-level equivalents used in training.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.optimize import linear_sum_assignment

from . import autodiff as ad
from .autodiff import EPS, Tensor


@dataclass(frozen=True)
class LossWeights:
    mask: float = 5.0
    unlabeled: float = 2.0
    no_object: float = 0.1

    def __post_init__(self):
        if self.mask < 0 or self.unlabeled < 0 or self.no_object < 0:
            raise ValueError("loss weights must be nonnegative")


@dataclass
class MatchResult:
    pairs: list  # (query index, label index)
    unmatched_queries: list = field(default_factory=list)


# ---------------------------------------------------------------------------
# plain losses (any shape)


def dice_loss(soft, target) -> Tensor:
    soft, target = ad.as_tensor(soft), ad.as_tensor(target)
    if soft.shape != target.shape:
        raise ad.ShapeError(f"dice_loss: shapes {soft.shape} and {target.shape} differ")
    inter = (soft * target).sum()
    return 1.0 - (2.0 * inter + EPS) / (soft.sum() + target.sum() + EPS)


def bce_loss(logits, target) -> Tensor:
    """Mean binary cross-entropy of sigmoid(logits) against binary targets."""
    logits, target = ad.as_tensor(logits), ad.as_tensor(target)
    if logits.shape != target.shape:
        raise ad.ShapeError(f"bce_loss: shapes {logits.shape} and {target.shape} differ")
    return (ad.softplus(logits) - logits * target).mean()


def cross_entropy(logits, target_index: int) -> Tensor:
    logits = ad.as_tensor(logits)
    return -ad.log_softmax(logits, axis=-1)[..., int(target_index)]


# ---------------------------------------------------------------------------
# grid-level equivalents


def cell_targets(masks: np.ndarray, patch: int) -> np.ndarray:
    """(M, H, W) binary -> (M, H'*W') count of target pixels in each cell."""
    masks = np.asarray(masks, dtype=np.float32)
    m, h, w = masks.shape
    c = masks.reshape(m, h // patch, patch, w // patch, patch).sum(axis=(2, 4))
    return c.reshape(m, -1)


def dice_cells(logits: Tensor, counts: np.ndarray, cell_area: int) -> Tensor:
    """Row-wise dice loss for (M, L) cell logits vs (M, L) target counts."""
    p = ad.sigmoid(logits)
    inter = (p * counts).sum(axis=-1)
    denom = p.sum(axis=-1) * float(cell_area) + counts.sum(axis=-1) + EPS
    return 1.0 - (2.0 * inter + EPS) / denom


def bce_cells(logits: Tensor, counts: np.ndarray, cell_area: int) -> Tensor:
    """Row-wise mean BCE over the full-resolution pixels of each row."""
    n_pix = logits.shape[-1] * cell_area
    per = ad.softplus(logits) * float(cell_area) - logits * counts
    return per.sum(axis=-1) * (1.0 / n_pix)


def pairwise_cost(class_logits: np.ndarray, mask_logits: np.ndarray, label_classes,
                  counts: np.ndarray, cell_area: int, mask_weight: float) -> np.ndarray:
    """(N, M) matching cost: -log p(class) + mask_weight * (dice + BCE)."""
    z = class_logits - class_logits.max(-1, keepdims=True)
    logp = z - np.log(np.exp(z).sum(-1, keepdims=True))
    cost = -logp[:, np.asarray(label_classes, dtype=np.int64)]
    if mask_weight:
        x = mask_logits.astype(np.float64)
        p = 0.5 * (1.0 + np.tanh(0.5 * x))
        c = counts.astype(np.float64)
        inter = p @ c.T
        dice = 1.0 - (2.0 * inter + EPS) / (p.sum(-1)[:, None] * cell_area + c.sum(-1)[None, :] + EPS)
        sp = np.maximum(x, 0) + np.log1p(np.exp(-np.abs(x)))
        bce = (sp.sum(-1)[:, None] * cell_area - x @ c.T) / (x.shape[-1] * cell_area)
        cost = cost + mask_weight * (dice + bce)
    return cost


def assign(cost: np.ndarray) -> MatchResult:
    n, m = cost.shape
    if m > n:
        raise ValueError(f"{m} labels exceed {n} queries; raise num_queries")
    if m == 0:
        return MatchResult([], list(range(n)))
    rows, cols = linear_sum_assignment(cost)
    pairs = sorted(zip(rows.tolist(), cols.tolist()))
    used = {r for r, _ in pairs}
    return MatchResult(pairs, [q for q in range(n) if q not in used])


def hungarian_match(pred, labels, weights: LossWeights, index: int = 0) -> MatchResult:
    """Optimal assignment of image ``index`` of ``pred`` to ``labels``."""
    if len(labels) > pred.cfg.num_queries:
        raise ValueError(f"{len(labels)} labels exceed {pred.cfg.num_queries} queries")
    if not labels:
        return MatchResult([], list(range(pred.cfg.num_queries)))
    counts = cell_targets(np.stack([l.mask for l in labels]), pred.cfg.patch)
    cost = pairwise_cost(pred.class_logits.data[index], pred.mask_logits_lowres.data[index],
                         [l.class_id - 1 for l in labels], counts, pred.cfg.patch**2, weights.mask)
    return assign(cost)


# ---------------------------------------------------------------------------
# set loss


def set_loss(pred, batch_labels: list, weights: LossWeights, return_parts: bool = False):
    """Mean over images of: (sum over matched pairs of CE + mask_weight * (dice + BCE)
    + no_object_weight * sum over unmatched queries of CE toward "no object"),
    divided by the image's label count (1 when it has none)."""
    cfg = pred.cfg
    B, N, K1 = pred.class_logits.shape
    if len(batch_labels) != B:
        raise ValueError(f"{len(batch_labels)} label lists for a batch of {B}")
    area = cfg.patch**2
    cls_target = np.zeros((B, N, K1), dtype=np.float64)
    cls_weight = np.zeros((B, N), dtype=np.float64)
    rows_b, rows_q, row_w, row_counts = [], [], [], []
    for b, labels in enumerate(batch_labels):
        norm = 1.0 / max(len(labels), 1)
        match = hungarian_match(pred, labels, weights, b) if labels else MatchResult([], list(range(N)))
        counts = cell_targets(np.stack([l.mask for l in labels]), cfg.patch) if labels else None
        for q, j in match.pairs:
            cls_target[b, q, labels[j].class_id - 1] = 1.0
            cls_weight[b, q] = norm
            rows_b.append(b)
            rows_q.append(q)
            row_w.append(norm)
            row_counts.append(counts[j])
        for q in match.unmatched_queries:
            cls_target[b, q, K1 - 1] = 1.0
            cls_weight[b, q] = weights.no_object * norm
    logp = ad.log_softmax(pred.class_logits, axis=-1)
    ce = -(logp * (cls_target * cls_weight[..., None])).sum() * (1.0 / B)
    total = ce
    mask_term = None
    if rows_b and weights.mask > 0:
        sel = pred.mask_logits_lowres[np.asarray(rows_b), np.asarray(rows_q)]
        counts = np.stack(row_counts)
        per = dice_cells(sel, counts, area) + bce_cells(sel, counts, area)
        mask_term = (per * np.asarray(row_w)).sum() * (weights.mask / B)
        total = total + mask_term
    if return_parts:
        return total, {"ce": float(ce.data), "mask": 0.0 if mask_term is None else float(mask_term.data)}
    return total


def labeled_loss(pred, ground_truth: list, weights: LossWeights) -> Tensor:
    return set_loss(pred, ground_truth, weights)


def unlabeled_loss(pred, pseudo_labels: list, weights: LossWeights) -> Tensor:
    return set_loss(pred, pseudo_labels, weights)


def student_objective(l_lb: Tensor, l_ulb: Tensor | None, weights: LossWeights) -> Tensor:
    if l_ulb is None:
        return l_lb
    return l_lb + weights.unlabeled * l_ulb
