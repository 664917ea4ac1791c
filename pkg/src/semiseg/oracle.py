"""A promptable segmenter standing in for a foundation model.

The oracle answers point prompts with whole-instance masks (with a tunable
chance of answering a lone point with just the sub-part under it) and
produces two kinds of dense "meta" features:

* ``encoder``: one-hot part identity per location, so self-similarity rows
  light up single parts (over-segmented structure);
* ``decoder``: per prompt point, a map that is one code on the prompted
  instance and another everywhere else, so the prompt's similarity row is
  exactly that instance.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .synthdata import Scene


@dataclass(frozen=True)
class OracleConfig:
    noise_std: float = 0.1
    part_bias: float = 0.5
    feature_dim: int = 32
    stride: int = 4
    return_visible: bool = False
    # how per-pixel codes reach the feature grid: "area" averages each
    # stride x stride cell, "center" reads the cell's center pixel
    pooling: str = "area"

    def __post_init__(self):
        if not 0.0 <= self.part_bias <= 1.0:
            raise ValueError(f"part_bias must be in [0, 1], got {self.part_bias}")
        if self.noise_std < 0:
            raise ValueError("noise_std must be >= 0")
        if self.feature_dim < 2 or self.stride < 1:
            raise ValueError("feature_dim >= 2 and stride >= 1 required")
        if self.pooling not in ("area", "center"):
            raise ValueError(f"unknown pooling {self.pooling!r}")


def _check_points(scene: Scene, points) -> np.ndarray:
    pts = np.asarray(points, dtype=np.int64).reshape(-1, 2)
    if len(pts) == 0:
        raise ValueError("prompt set is empty")
    h, w = scene.shape
    bad = (pts[:, 0] < 0) | (pts[:, 0] >= h) | (pts[:, 1] < 0) | (pts[:, 1] >= w)
    if bad.any():
        raise IndexError(f"prompt point {tuple(pts[np.argmax(bad)])} outside {h}x{w} image")
    return pts


def _plurality(ids: np.ndarray) -> int:
    vals, counts = np.unique(ids, return_counts=True)
    # np.unique sorts ascending, argmax takes the first max: ties go to the smaller id
    return int(vals[np.argmax(counts)])


class Oracle:
    def __init__(self, cfg: OracleConfig = OracleConfig()):
        self.cfg = cfg

    # -- segmentation --------------------------------------------------------
    def _instance_mask(self, scene: Scene, idx: int) -> np.ndarray:
        if self.cfg.return_visible or not scene.full_masks:
            return scene.instances[idx].mask.copy()
        return scene.full_masks[idx].copy()

    def prompt_segment(self, scene: Scene, points, rng: np.random.Generator) -> np.ndarray:
        pts = _check_points(scene, points)
        imap = scene.instance_map()
        votes = imap[pts[:, 0], pts[:, 1]]
        winner = _plurality(votes)
        if winner == 0:
            return np.zeros(scene.shape, dtype=bool)
        fg = {tuple(p) for p, v in zip(pts.tolist(), votes) if v != 0}
        if len(fg) == 1 and self.cfg.part_bias > 0 and rng.uniform() < self.cfg.part_bias:
            r, c = next(iter(fg))
            parts = scene.part_maps[winner - 1]
            part = parts[r, c]
            sel = parts == part
            if self.cfg.return_visible:
                sel &= scene.instances[winner - 1].mask
            return sel
        return self._instance_mask(scene, winner - 1)

    def box_segment(self, scene: Scene, box) -> np.ndarray:
        """Ablation stub: the instance covering most of the box (r0, c0, r1, c1), inclusive."""
        r0, c0, r1, c1 = (int(v) for v in box)
        region = scene.instance_map()[r0 : r1 + 1, c0 : c1 + 1].ravel()
        region = region[region > 0]
        if region.size == 0:
            return np.zeros(scene.shape, dtype=bool)
        return self._instance_mask(scene, _plurality(region) - 1)

    def mask_segment(self, scene: Scene, mask: np.ndarray) -> np.ndarray:
        """Ablation stub: clips the prompt mask to its best-overlapping instance,
        without filling in what the prompt missed."""
        mask = np.asarray(mask, dtype=bool)
        ids = scene.instance_map()[mask]
        ids = ids[ids > 0]
        if ids.size == 0:
            return np.zeros(scene.shape, dtype=bool)
        return mask & self._instance_mask(scene, _plurality(ids) - 1)

    # -- meta features -------------------------------------------------------
    def grid_coords(self, scene: Scene) -> tuple[np.ndarray, np.ndarray]:
        """Pixel rows/cols sampled for each feature-grid cell (cell centers)."""
        return self.grid_coords_for(scene.shape)

    def _cells(self, ids: np.ndarray, d: int) -> np.ndarray:
        """Per-pixel integer codes (..., H, W) -> (..., d, H', W') one-hot cell codes."""
        if self.cfg.pooling == "center":
            rows, cols = self.grid_coords_for(ids.shape[-2:])
            return _one_hot(ids[..., rows[:, None], cols[None, :]], d)
        s = self.cfg.stride
        h, w = ids.shape[-2:]
        gh, gw = h // s, w // s
        ids = ids[..., : gh * s, : gw * s]
        blocks = ids.reshape(ids.shape[:-2] + (gh, s, gw, s))
        out = np.zeros(ids.shape[:-2] + (d, gh, gw), dtype=np.float32)
        for code in np.unique(ids):
            frac = (blocks == code).mean(axis=(-3, -1), dtype=np.float32)
            out[..., code, :, :] = frac
        return out

    def grid_coords_for(self, shape) -> tuple[np.ndarray, np.ndarray]:
        h, w = shape
        s = self.cfg.stride
        return np.arange(h // s) * s + s // 2, np.arange(w // s) * s + s // 2

    def meta_features(self, scene: Scene, mode: str, prompts=None, rng: np.random.Generator | None = None):
        """Encoder mode -> (d, H', W'); decoder mode -> (P, d, H', W'), one map per prompt."""
        d = self.cfg.feature_dim
        if mode == "encoder":
            ids = scene.visible_part_map()
            if ids.max() >= d:
                raise ValueError(f"{ids.max() + 1} part codes do not fit in feature_dim={d}")
            feats = self._cells(ids, d)
        elif mode == "decoder":
            if prompts is None or len(prompts) == 0:
                raise ValueError("decoder-mode meta features need prompt points")
            pts = _check_points(scene, prompts)
            imap = scene.instance_map()
            if imap.max() + 2 > d:
                raise ValueError(f"{imap.max() + 2} instance codes do not fit in feature_dim={d}")
            sel = imap[pts[:, 0], pts[:, 1]]
            # code 0 marks "not the prompted region"; region k uses code k + 1
            per_region = self._cells(imap[None], imap.max() + 1)[0]  # (regions, H', W') area fractions
            gh, gw = per_region.shape[-2:]
            feats = np.zeros((len(pts), d, gh, gw), dtype=np.float32)
            idx = np.arange(len(pts))
            feats[idx, sel + 1] = per_region[sel]
            feats[idx, 0] = 1.0 - per_region[sel]
        else:
            raise ValueError(f"unknown meta feature mode {mode!r}")
        if self.cfg.noise_std > 0:
            if rng is None:
                raise ValueError("noisy meta features need an rng")
            # one noise field per image, shared by every prompt's map
            noise = rng.standard_normal(size=feats.shape[-3:], dtype=np.float32)
            feats = feats + np.float32(self.cfg.noise_std) * noise
        return feats


def _one_hot(ids: np.ndarray, d: int) -> np.ndarray:
    """ids (..., H', W') -> (..., d, H', W') float32."""
    return np.moveaxis(np.eye(d, dtype=np.float32)[ids], -1, -3)
