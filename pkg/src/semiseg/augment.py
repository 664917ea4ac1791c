"""Weak/strong views and bidirectional instance pasting with refined labels."""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from .synthdata import InstanceLabel, Scene


# ---------------------------------------------------------------------------
# geometric part (applied identically to images and masks)


@dataclass(frozen=True)
class Geometry:
    flip: bool = False
    scale: float = 1.0

    def source_index(self, h: int, w: int):
        """Nearest source rows/cols for every output pixel; -1 where outside."""
        r = np.arange(h)
        c = np.arange(w)
        if self.flip:
            c = w - 1 - c
        if self.scale != 1.0:
            r = np.floor((r + 0.5 - h / 2) / self.scale + h / 2).astype(np.int64)
            c = np.floor((c + 0.5 - w / 2) / self.scale + w / 2).astype(np.int64)
        r = np.where((r >= 0) & (r < h), r, -1)
        c = np.where((c >= 0) & (c < w), c, -1)
        return r, c

    def apply(self, arr: np.ndarray, fill=0) -> np.ndarray:
        h, w = arr.shape[:2]
        if not self.flip and self.scale == 1.0:
            return arr.copy()
        r, c = self.source_index(h, w)
        out = arr[np.clip(r, 0, None)][:, np.clip(c, 0, None)]
        outside = (r < 0)[:, None] | (c < 0)[None, :]
        if outside.any():
            out = out.copy()
            out[outside] = fill
        return out


def sample_geometry(rng: np.random.Generator, flip_p: float = 0.5, scale_jitter: float = 0.1) -> Geometry:
    flip = bool(rng.uniform() < flip_p)
    scale = float(1.0 + rng.uniform(-scale_jitter, scale_jitter)) if scale_jitter > 0 else 1.0
    return Geometry(flip, scale)


def transform_labels(labels, geom: Geometry, min_area: int = 1) -> list:
    out = []
    for lab in labels:
        m = geom.apply(lab.mask, False)
        if m.sum() < min_area:
            continue
        soft = None if lab.soft_mask is None else geom.apply(lab.soft_mask, 0.0)
        out.append(InstanceLabel(lab.class_id, m, lab.confidence, soft))
    return out


def transform_scene(scene: Scene, geom: Geometry) -> Scene:
    """Apply ``geom`` to the image and every mask, dropping instances pushed off-canvas."""
    insts, fulls, parts = [], [], []
    for i, lab in enumerate(scene.instances):
        m = geom.apply(lab.mask, False)
        if not m.any():
            continue
        insts.append(InstanceLabel(lab.class_id, m, lab.confidence))
        if scene.full_masks:
            fulls.append(geom.apply(scene.full_masks[i], False))
            parts.append(geom.apply(scene.part_maps[i], 0))
    return Scene(geom.apply(scene.image, 0.0), insts, scene.seed, fulls, parts, scene.scene_id)


# ---------------------------------------------------------------------------
# photometric part


@dataclass(frozen=True)
class Photometric:
    brightness: float = 1.0
    contrast: float = 1.0
    saturation: float = 1.0
    grayscale: bool = False
    blur_sigma: float = 0.0

    @property
    def is_identity(self) -> bool:
        return (self.brightness == 1.0 and self.contrast == 1.0 and self.saturation == 1.0
                and not self.grayscale and self.blur_sigma == 0.0)


def sample_photometric(rng: np.random.Generator, jitter: float = 0.4, gray_p: float = 0.2,
                       blur_p: float = 0.5, blur_range=(0.1, 1.0)) -> Photometric:
    b, c, s = (float(1.0 + rng.uniform(-jitter, jitter)) for _ in range(3))
    gray = bool(rng.uniform() < gray_p)
    sigma = float(rng.uniform(*blur_range)) if rng.uniform() < blur_p else 0.0
    return Photometric(b, c, s, gray, sigma)


def _gray(img: np.ndarray) -> np.ndarray:
    return img @ np.array([0.299, 0.587, 0.114], dtype=img.dtype)


def _blur(img: np.ndarray, sigma: float) -> np.ndarray:
    rad = max(1, int(np.ceil(3 * sigma)))
    x = np.arange(-rad, rad + 1)
    k = np.exp(-0.5 * (x / sigma) ** 2)
    k = (k / k.sum()).astype(img.dtype)
    pad = np.pad(img, ((rad, rad), (0, 0), (0, 0)), mode="reflect")
    out = sum(k[i] * pad[i : i + img.shape[0]] for i in range(len(k)))
    pad = np.pad(out, ((0, 0), (rad, rad), (0, 0)), mode="reflect")
    return sum(k[i] * pad[:, i : i + img.shape[1]] for i in range(len(k)))


def apply_photometric(image: np.ndarray, p: Photometric) -> np.ndarray:
    if p.is_identity:
        return image.copy()
    img = image.astype(np.float32)
    img = img * np.float32(p.brightness)
    mean = img.mean()
    img = (img - mean) * np.float32(p.contrast) + mean
    g = _gray(img)[..., None]
    img = (img - g) * np.float32(p.saturation) + g
    if p.grayscale:
        img = np.repeat(_gray(img)[..., None], 3, axis=-1)
    if p.blur_sigma > 0:
        img = _blur(img, p.blur_sigma)
    return np.clip(img, 0.0, 1.0).astype(np.float32)


# ---------------------------------------------------------------------------
# views


def weak_view(image: np.ndarray, rng: np.random.Generator):
    """Random flip + scale jitter. Returns (image, geometry) so labels can follow."""
    geom = sample_geometry(rng)
    return geom.apply(image, 0.0), geom


def strong_view(image: np.ndarray, rng: np.random.Generator):
    """Weak view followed by color jitter, random grayscale and blur."""
    img, geom = weak_view(image, rng)
    return apply_photometric(img, sample_photometric(rng)), geom


def weak_scene(scene: Scene, rng: np.random.Generator) -> Scene:
    return transform_scene(scene, sample_geometry(rng))


# ---------------------------------------------------------------------------
# pasting


@dataclass
class AugmentedPair:
    x_ab: np.ndarray
    x_ba: np.ndarray
    z_ab: list
    z_ba: list
    provenance: tuple = field(default=())


def union_mask(labels, shape) -> np.ndarray:
    m = np.zeros(shape, dtype=bool)
    for lab in labels:
        m |= lab.mask
    return m


def _paste(x_base, z_base, x_top, z_top, min_size):
    shape = x_base.shape[:2]
    m_top = union_mask(z_top, shape)
    x = np.where(m_top[..., None], x_top, x_base)
    keep = ~m_top
    z = [replace(l) for l in z_top]
    for lab in z_base:
        m = lab.mask & keep
        if m.sum() < min_size:
            continue
        soft = None if lab.soft_mask is None else lab.soft_mask * keep
        z.append(InstanceLabel(lab.class_id, m, lab.confidence, soft))
    return x, z


def arp_composite(x_a, z_a, x_b, z_b, min_size: int = 5, provenance: tuple = ()) -> AugmentedPair:
    """x_ab shows B's labeled instances pasted over A; x_ba the reverse.

    Labels of the image underneath lose their occluded pixels; remnants smaller
    than ``min_size`` are dropped.
    """
    x_a, x_b = np.asarray(x_a), np.asarray(x_b)
    if x_a.shape != x_b.shape:
        raise ValueError(f"image shapes differ: {x_a.shape} vs {x_b.shape}")
    x_ab, z_ab = _paste(x_a, z_a, x_b, z_b, min_size)
    x_ba, z_ba = _paste(x_b, z_b, x_a, z_a, min_size)
    return AugmentedPair(x_ab, x_ba, z_ab, z_ba, provenance)


def pair_batch(n: int, rng: np.random.Generator) -> list:
    """Disjoint random pairs covering the batch (a fixed-point-free involution);
    an odd leftover index is returned as a 1-tuple."""
    order = rng.permutation(n).tolist()
    pairs = [(order[i], order[i + 1]) for i in range(0, n - 1, 2)]
    if n % 2:
        pairs.append((order[-1],))
    return pairs
