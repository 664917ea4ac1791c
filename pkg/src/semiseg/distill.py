"""Self-similarity matrices and structural / feature distillation losses."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import EPS, Tensor
from .matching import LossWeights, set_loss


@dataclass(frozen=True)
class HuberParams:
    delta: float = 1.0

    def __post_init__(self):
        if self.delta <= 0:
            raise ValueError("Huber delta must be > 0")


@dataclass(frozen=True)
class DistillConfig:
    mode: str = "decoder"  # decoder | encoder
    loss: str = "structural"  # structural | feature
    points: int = 32
    huber_delta: float = 1.0
    weight: float = 1.0

    def __post_init__(self):
        if self.mode not in ("decoder", "encoder"):
            raise ValueError(f"unknown distillation mode {self.mode!r}")
        if self.loss not in ("structural", "feature"):
            raise ValueError(f"unknown distillation loss {self.loss!r}")
        if self.points < 1:
            raise ValueError("points must be >= 1")
        if self.loss == "feature" and self.mode == "decoder":
            raise ValueError("feature distillation is defined against encoder features only")


def huber(x, delta: float = 1.0):
    """Elementwise Huber penalty; numpy in, numpy out; Tensor in, Tensor out."""
    if isinstance(x, Tensor):
        return ad.huber(x, delta)
    x = np.asarray(x, dtype=np.float64)
    ax = np.abs(x)
    return np.where(ax <= delta, 0.5 * x * x, delta * (ax - 0.5 * delta))


def _locations(feats):
    """Accept (d, H', W') / (d, L) maps; return a (L, d) tensor of location vectors."""
    t = ad.as_tensor(feats)
    if t.ndim == 3:
        d = t.shape[0]
        t = ad.reshape(t, (d, -1))
    if t.ndim != 2:
        raise ad.ShapeError(f"feature map must be (d, H', W') or (d, L), got {t.shape}")
    return ad.transpose(t, (1, 0))


def self_similarity(feats, query_rows=None, eps: float = EPS):
    """Cosine similarity between locations of a (d, H', W') map.

    ``query_rows`` restricts the rows to the given flat location indices;
    the result is (Q, H'W').
    """
    locs = _locations(feats)
    unit = ad.normalize(locs, axis=-1, eps=eps)
    if query_rows is None:
        rows = unit
    else:
        idx = np.asarray(query_rows, dtype=np.int64)
        if idx.size and (idx.min() < 0 or idx.max() >= locs.shape[0]):
            raise IndexError(f"query row outside [0, {locs.shape[0]})")
        rows = unit[idx]
    return rows @ ad.transpose(unit, (1, 0))


def similarity_rows_batched(feats: Tensor, rows: np.ndarray | None, eps: float = EPS) -> Tensor:
    """(B, L, d) features -> (B, Q, L) cosine similarities; ``rows`` is (B, Q) or None."""
    unit = ad.normalize(feats, axis=-1, eps=eps)
    if rows is None:
        q = unit
    else:
        b = np.arange(unit.shape[0])[:, None]
        q = unit[b, rows]
    return q @ ad.transpose(unit, (0, 2, 1))


def structural_distill_loss(c_meta, c_student, huber_params: HuberParams = HuberParams()) -> Tensor:
    """Sum of elementwise Huber penalties of (C_meta - C) over each row,
    averaged over rows (and over a leading batch axis when present)."""
    c_student = ad.as_tensor(c_student)
    c_meta = np.asarray(c_meta.data if isinstance(c_meta, Tensor) else c_meta)
    if c_meta.shape != c_student.shape:
        raise ad.ShapeError(f"similarity shapes differ: {c_meta.shape} vs {c_student.shape}")
    rho = ad.huber(ad.sub(c_meta, c_student), huber_params.delta)
    n_rows = int(np.prod(c_student.shape[:-1]))
    return rho.sum() * (1.0 / n_rows)


def bilinear_matrix(n_in: int, n_out: int) -> np.ndarray:
    """(n_out, n_in) 1-D linear interpolation weights, half-pixel centers
    (align_corners=False), edge-clamped."""
    m = np.zeros((n_out, n_in), dtype=np.float64)
    scale = n_in / n_out
    for i in range(n_out):
        src = (i + 0.5) * scale - 0.5
        src = min(max(src, 0.0), n_in - 1)
        lo = int(np.floor(src))
        hi = min(lo + 1, n_in - 1)
        w = src - lo
        m[i, lo] += 1.0 - w
        m[i, hi] += w
    return m


def resize_bilinear(feats, out_hw: tuple[int, int], in_hw: tuple[int, int] | None = None):
    """Resize (B, L, d) or (d, H, W) features to ``out_hw``; differentiable.

    For (B, L, d) inputs ``in_hw`` gives the grid; the output is (B, L', d).
    """
    t = ad.as_tensor(feats)
    if t.ndim == 3 and in_hw is None:
        d, h, w = t.shape
        if (h, w) == tuple(out_hw):
            return t
        op = np.kron(bilinear_matrix(h, out_hw[0]), bilinear_matrix(w, out_hw[1]))
        flat = ad.reshape(t, (d, h * w))
        return ad.reshape(flat @ op.T, (d,) + tuple(out_hw))
    h, w = in_hw
    if (h, w) == tuple(out_hw):
        return t
    op = np.kron(bilinear_matrix(h, out_hw[0]), bilinear_matrix(w, out_hw[1]))
    return ad.as_tensor(op) @ t


def feature_distill_loss(f_meta, f_student) -> Tensor:
    """Mean over locations of the squared Euclidean distance between (…, L, d) maps."""
    f_student = ad.as_tensor(f_student)
    f_meta = np.asarray(f_meta.data if isinstance(f_meta, Tensor) else f_meta)
    if f_meta.shape != f_student.shape:
        raise ad.ShapeError(f"feature shapes differ: {f_meta.shape} vs {f_student.shape}")
    diff = ad.sub(f_student, f_meta)
    n_loc = int(np.prod(f_student.shape[:-1]))
    return (diff * diff).sum() * (1.0 / n_loc)


# ---------------------------------------------------------------------------
# teacher objective


def sample_grid_points(rng: np.random.Generator, n_cells: int, count: int) -> np.ndarray:
    return rng.integers(0, n_cells, size=count)


def meta_targets(scenes, oracle, dcfg: DistillConfig, grid: tuple[int, int], rngs) -> tuple:
    """Per batch, the detached meta target and (for decoder mode) the query rows.

    Returns (target, rows): structural loss -> target (B, Q, L) similarities;
    feature loss -> target (B, L, d) meta features. ``rows`` is (B, P) or None.
    """
    gh, gw = grid
    L = gh * gw
    targets, rows_all = [], []
    for scene, rng in zip(scenes, rngs):
        rr, cc = oracle.grid_coords(scene)
        if len(rr) != gh or len(cc) != gw:
            raise ValueError("oracle grid does not match the requested grid")
        if dcfg.mode == "decoder":
            rows = sample_grid_points(rng, L, dcfg.points)
            pts = np.stack([rr[rows // gw], cc[rows % gw]], axis=1)
            maps = oracle.meta_features(scene, "decoder", pts, rng)  # (P, d, gh, gw)
            locs = maps.reshape(maps.shape[0], maps.shape[1], L).transpose(0, 2, 1)  # (P, L, d)
            rows_all.append(rows)
            unit = locs / np.maximum(np.linalg.norm(locs, axis=-1, keepdims=True), EPS)
            targets.append(np.einsum("pd,pld->pl", unit[np.arange(len(rows)), rows], unit))
        else:
            fmap = oracle.meta_features(scene, "encoder", None, rng)  # (d, gh, gw)
            locs = fmap.reshape(fmap.shape[0], L).T
            if dcfg.loss == "structural":
                unit = locs / np.maximum(np.linalg.norm(locs, axis=-1, keepdims=True), EPS)
                targets.append(unit @ unit.T)
            else:
                targets.append(locs)
    rows = np.stack(rows_all) if rows_all else None
    return np.stack(targets).astype(np.float32), rows


def distill_term(feats: Tensor, target: np.ndarray, rows, dcfg: DistillConfig,
                 in_grid=None, meta_grid=None) -> Tensor:
    """L_SD (structural) or the feature-distance baseline for (B, L, d) features."""
    if in_grid is not None and meta_grid is not None and tuple(in_grid) != tuple(meta_grid):
        feats = resize_bilinear(feats, meta_grid, in_grid)
    if dcfg.loss == "structural":
        c = similarity_rows_batched(feats, rows if dcfg.mode == "decoder" else None)
        return structural_distill_loss(target, c, HuberParams(dcfg.huber_delta)) * dcfg.weight
    return feature_distill_loss(target, feats) * dcfg.weight


def sd_teacher_objective(pred, ground_truth, target, rows, dcfg: DistillConfig | None,
                         weights: LossWeights = LossWeights()):
    """L_lb plus the distillation term on ``pred.pixel_features``.

    ``dcfg=None`` disables distillation. Returns (total, L_lb, L_SD or None).
    """
    l_lb = set_loss(pred, ground_truth, weights)
    if dcfg is None:
        return l_lb, l_lb, None
    l_sd = distill_term(pred.pixel_features, target, rows, dcfg)
    return l_lb + l_sd, l_lb, l_sd
