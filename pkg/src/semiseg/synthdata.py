"""Procedural multi-instance scenes with exact ground truth.

Each instance is one of four shape classes, tiled into angular "parts" with
their own colors. Later instances occlude earlier ones; the visible masks are
what ground truth records, while the full (pre-occlusion) masks and per-part
maps are kept for the promptable oracle.
"""

from __future__ import annotations

import colorsys
from dataclasses import dataclass, field, fields
from typing import Optional

import numpy as np

from .rng import derive_seed, stream

SHAPES = ("disc", "rectangle", "triangle", "ring")


@dataclass(frozen=True)
class SceneConfig:
    height: int = 64
    width: int = 64
    num_classes: int = 4
    min_instances: int = 2
    max_instances: int = 6
    min_parts: int = 2
    max_parts: int = 4
    min_radius: float = 7.0
    max_radius: float = 12.0
    allow_occlusion: bool = True
    # chance that a new instance is placed touching an earlier one of the same class
    cluster_prob: float = 0.6
    # hue spread of instances around their class hue, as a fraction of the class spacing
    hue_jitter: float = 0.35
    part_contrast: float = 0.18
    pixel_noise: float = 0.03
    min_visible_fraction: float = 0.35

    def validate(self) -> None:
        if not (32 <= self.height <= 256 and 32 <= self.width <= 256):
            raise ValueError(f"scene size must be within [32, 256], got {self.height}x{self.width}")
        if self.min_instances < 1 or self.max_instances < self.min_instances:
            raise ValueError("instance count range must satisfy 1 <= min <= max")
        if self.min_parts < 1 or self.max_parts < self.min_parts:
            raise ValueError("part count range must satisfy 1 <= min <= max")
        if not 1 <= self.num_classes <= len(SHAPES):
            raise ValueError(f"num_classes must be in [1, {len(SHAPES)}]")
        if self.min_radius < 2 or self.max_radius < self.min_radius:
            raise ValueError("degenerate radius range")
        if 2 * self.max_radius >= min(self.height, self.width):
            raise ValueError("instances larger than the canvas")

    def to_dict(self) -> dict:
        return {f.name: getattr(self, f.name) for f in fields(self)}

    @classmethod
    def from_dict(cls, d: dict) -> "SceneConfig":
        kw = {}
        for f in fields(cls):
            if f.name in d:
                kw[f.name] = _coerce(d[f.name], f.type)
        return cls(**kw)


def _coerce(value, typ):
    if not isinstance(value, str):
        return value
    if typ in ("bool", bool):
        return value.strip().lower() in ("1", "true", "yes", "on")
    if typ in ("int", int):
        return int(value)
    if typ in ("float", float):
        return float(value)
    return value


@dataclass
class InstanceLabel:
    class_id: int
    mask: np.ndarray
    confidence: float = 1.0
    soft_mask: Optional[np.ndarray] = None

    def __post_init__(self):
        self.mask = np.asarray(self.mask, dtype=bool)
        self.class_id = int(self.class_id)
        self.confidence = float(self.confidence)
        if not 0.0 <= self.confidence <= 1.0:
            raise ValueError(f"confidence {self.confidence} outside [0, 1]")
        if self.soft_mask is not None:
            self.soft_mask = np.asarray(self.soft_mask, dtype=np.float32)
            if self.soft_mask.shape != self.mask.shape:
                raise ValueError("soft_mask and mask shapes differ")

    @property
    def area(self) -> int:
        return int(self.mask.sum())

    def with_mask(self, mask: np.ndarray, soft_mask=None) -> "InstanceLabel":
        return InstanceLabel(self.class_id, mask, self.confidence, soft_mask)


@dataclass
class Scene:
    image: np.ndarray  # (H, W, 3) float32 in [0, 1], multiples of 1/255
    instances: list
    seed: int
    full_masks: list = field(default_factory=list)  # pre-occlusion masks, aligned with instances
    part_maps: list = field(default_factory=list)  # int8 (H, W): 0 outside, 1..p = part inside full mask
    scene_id: str = ""

    @property
    def shape(self) -> tuple:
        return self.image.shape[:2]

    def instance_map(self) -> np.ndarray:
        """(H, W) int32: 0 for background, i+1 for pixels visible in instance i."""
        out = np.zeros(self.shape, dtype=np.int32)
        for i, inst in enumerate(self.instances):
            out[inst.mask] = i + 1
        return out

    def visible_part_map(self) -> np.ndarray:
        """(H, W) int32 of globally numbered visible parts (0 = background)."""
        out = np.zeros(self.shape, dtype=np.int32)
        offset = 0
        for inst, parts in zip(self.instances, self.part_maps):
            sel = inst.mask
            out[sel] = parts[sel].astype(np.int32) + offset
            offset += int(parts.max())
        return out

    def num_parts(self) -> int:
        return int(sum(int(p.max()) for p in self.part_maps))


@dataclass(frozen=True)
class DatasetSplit:
    labeled_ids: tuple
    unlabeled_ids: tuple
    ratio: float


@dataclass
class Dataset:
    config: SceneConfig
    scenes: list
    base_seed: int = 0


# ---------------------------------------------------------------------------
# geometry


def _shape_mask(kind: str, yy, xx, cy, cx, r, theta, aspect):
    dy, dx = yy - cy, xx - cx
    if kind == "disc":
        return dy * dy + dx * dx <= r * r
    if kind == "ring":
        d2 = dy * dy + dx * dx
        return (d2 <= r * r) & (d2 >= (0.5 * r) ** 2)
    c, s = np.cos(theta), np.sin(theta)
    u = c * dx + s * dy
    v = -s * dx + c * dy
    if kind == "rectangle":
        return (np.abs(u) <= r * 0.95) & (np.abs(v) <= r * aspect)
    if kind == "triangle":
        R = 1.25 * r
        inside = np.ones_like(u, dtype=bool)
        for k in range(3):
            a = np.pi / 2 + 2 * np.pi * k / 3
            # half-plane with outward normal at angle a + pi, distance R/2 from center
            nx, ny = np.cos(a + np.pi), np.sin(a + np.pi)
            inside &= (u * nx + v * ny) <= R / 2
        return inside
    raise ValueError(kind)


def _hsv(h, s, v):
    return np.array(colorsys.hsv_to_rgb(h % 1.0, min(max(s, 0), 1), min(max(v, 0), 1)))


def generate_scene(cfg: SceneConfig, seed: int, scene_id: str = "") -> Scene:
    """Deterministic scene for (cfg, seed)."""
    cfg.validate()
    rng = stream(seed, "scene")
    H, W = cfg.height, cfg.width
    yy, xx = np.mgrid[0:H, 0:W].astype(np.float64)

    bg_h = rng.uniform()
    bg = np.empty((H, W, 3))
    c0 = _hsv(bg_h, rng.uniform(0.0, 0.25), rng.uniform(0.15, 0.35))
    c1 = _hsv(bg_h + 0.1, rng.uniform(0.0, 0.25), rng.uniform(0.15, 0.35))
    ramp = (xx / W) if rng.uniform() < 0.5 else (yy / H)
    bg[:] = c0 * (1 - ramp[..., None]) + c1 * ramp[..., None]

    n = int(rng.integers(cfg.min_instances, cfg.max_instances + 1))
    classes, full_masks, part_maps, colors = [], [], [], []
    centers = []
    for _ in range(n):
        cls = int(rng.integers(1, cfg.num_classes + 1))
        placed = None
        for _attempt in range(60):
            r = rng.uniform(cfg.min_radius, cfg.max_radius)
            same = [j for j, c in enumerate(classes) if c == cls]
            if same and rng.uniform() < cfg.cluster_prob:
                j = same[int(rng.integers(len(same)))]
                pcy, pcx, pr = centers[j]
                ang = rng.uniform(0, 2 * np.pi)
                dist = (pr + r) * rng.uniform(0.75, 1.0)
                cy, cx = pcy + dist * np.sin(ang), pcx + dist * np.cos(ang)
            else:
                cy, cx = rng.uniform(r, H - r), rng.uniform(r, W - r)
            cy, cx = float(np.clip(cy, r, H - 1 - r)), float(np.clip(cx, r, W - 1 - r))
            theta = rng.uniform(0, np.pi)
            aspect = rng.uniform(0.5, 0.9)
            m = _shape_mask(SHAPES[cls - 1], yy, xx, cy, cx, r, theta, aspect)
            if m.sum() < 12:
                continue
            if not _placement_ok(m, full_masks, cfg):
                continue
            placed = (r, cy, cx, theta, m)
            break
        if placed is None:
            continue
        r, cy, cx, theta, m = placed
        p = int(rng.integers(cfg.min_parts, cfg.max_parts + 1))
        off = rng.uniform(0, 2 * np.pi)
        ang = (np.arctan2(yy - cy, xx - cx) - off) % (2 * np.pi)
        part = (np.floor(ang / (2 * np.pi / p)).astype(np.int64) % p) + 1
        pm = np.where(m, part, 0).astype(np.int8)

        spacing = 1.0 / cfg.num_classes
        hue = (cls - 1) * spacing + rng.uniform(-cfg.hue_jitter, cfg.hue_jitter) * spacing
        sat = rng.uniform(0.55, 0.95)
        val = rng.uniform(0.6, 0.9)
        pcols = []
        for _k in range(p):
            dv = rng.uniform(-cfg.part_contrast, cfg.part_contrast)
            dh = rng.uniform(-0.02, 0.02)
            pcols.append(_hsv(hue + dh, sat, val + dv))
        classes.append(cls)
        full_masks.append(m)
        part_maps.append(pm)
        colors.append(pcols)
        centers.append((cy, cx, r))

    img = bg
    for m, pm, pcols in zip(full_masks, part_maps, colors):
        for k, col in enumerate(pcols, start=1):
            img[pm == k] = col
    img = img + rng.normal(0.0, cfg.pixel_noise, size=img.shape)
    img8 = np.clip(np.rint(img * 255.0), 0, 255).astype(np.uint8)

    instances, kept_full, kept_parts = [], [], []
    for i, (cls, m, pm) in enumerate(zip(classes, full_masks, part_maps)):
        vis = m.copy()
        for later in full_masks[i + 1 :]:
            vis &= ~later
        if vis.sum() < 1:
            continue  # fully occluded instances are not annotated
        instances.append(InstanceLabel(cls, vis, 1.0))
        kept_full.append(m)
        kept_parts.append(pm)
    if not instances:
        raise ValueError(f"degenerate scene for seed {seed}: no instance could be placed")
    return Scene(image=image_from_u8(img8), instances=instances, seed=int(seed),
                 full_masks=kept_full, part_maps=kept_parts, scene_id=scene_id)


def _placement_ok(m, earlier, cfg: SceneConfig) -> bool:
    if not earlier:
        return True
    union = np.zeros_like(m)
    for e in earlier:
        union |= e
    if not cfg.allow_occlusion:
        return not (m & union).any()
    # every earlier instance must keep enough visible area after m is drawn on top
    for e in earlier:
        if (e & ~m).sum() < cfg.min_visible_fraction * e.sum():
            return False
    return True


def image_from_u8(img8: np.ndarray) -> np.ndarray:
    return (img8.astype(np.float32) / np.float32(255.0)).astype(np.float32)


def image_to_u8(img: np.ndarray) -> np.ndarray:
    return np.clip(np.rint(np.asarray(img, dtype=np.float64) * 255.0), 0, 255).astype(np.uint8)


def scene_seed(base_seed: int, index: int) -> int:
    """Independent per-scene seed derived from (base_seed, index)."""
    return derive_seed(base_seed, int(index))


def generate_dataset(cfg: SceneConfig, count: int, base_seed: int = 0, workers: int = 1,
                     prefix: str = "scene") -> Dataset:
    seeds = [scene_seed(base_seed, i) for i in range(count)]
    ids = [f"{prefix}_{i:05d}" for i in range(count)]
    if workers > 1:
        from concurrent.futures import ThreadPoolExecutor

        with ThreadPoolExecutor(workers) as pool:
            scenes = list(pool.map(lambda a: generate_scene(cfg, *a), zip(seeds, ids)))
    else:
        scenes = [generate_scene(cfg, s, i) for s, i in zip(seeds, ids)]
    return Dataset(cfg, scenes, base_seed)


def make_split(dataset_or_count, ratio: float, seed: int) -> DatasetSplit:
    if isinstance(dataset_or_count, Dataset):
        ids = [s.scene_id for s in dataset_or_count.scenes]
    elif isinstance(dataset_or_count, int):
        ids = list(range(dataset_or_count))
    else:
        ids = list(dataset_or_count)
    if not 0.0 < ratio <= 1.0:
        raise ValueError(f"ratio must be in (0, 1], got {ratio}")
    n_lab = int(np.floor(ratio * len(ids) + 0.5))
    if n_lab == 0:
        raise ValueError(f"ratio {ratio} of {len(ids)} scenes yields no labeled scene")
    order = stream(seed, "split").permutation(len(ids))
    lab = sorted(int(i) for i in order[:n_lab])
    unl = sorted(int(i) for i in order[n_lab:])
    return DatasetSplit(tuple(ids[i] for i in lab), tuple(ids[i] for i in unl), float(ratio))
