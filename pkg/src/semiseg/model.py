"""Toy query-based instance segmenter.

Pixel embeddings come from a perceptron over non-overlapping patches (plus
fixed Fourier position features) followed by residual 3x3 convolutions on
the patch grid. ``N`` learned queries gather
pixel evidence by cross-attention pooling, then emit class logits and a mask
embedding whose dot product with every pixel embedding gives the mask logits.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .formats import read_checkpoint, write_checkpoint
from .synthdata import InstanceLabel


@dataclass(frozen=True)
class ModelConfig:
    height: int = 64
    width: int = 64
    patch: int = 4
    num_classes: int = 4
    num_queries: int = 10
    dim: int = 32
    hidden: int = 64
    pos_freqs: int = 4
    attn_rounds: int = 3
    conv_layers: int = 2
    slot_attention: bool = False
    masked_attention: bool = True
    unit_features: bool = True

    @property
    def grid(self) -> tuple[int, int]:
        return self.height // self.patch, self.width // self.patch

    @property
    def patch_dim(self) -> int:
        return self.patch * self.patch * 3 + 4 * self.pos_freqs


def param_shapes(cfg: ModelConfig) -> dict:
    d, k, hid = cfg.dim, cfg.num_classes + 1, cfg.hidden
    convs = {}
    for i in range(cfg.conv_layers):
        convs[f"conv{i}_w"] = (9 * hid, hid)
        convs[f"conv{i}_b"] = (hid,)
    return {
        "pe_w1": (cfg.patch_dim, hid),
        "pe_b1": (hid,),
        **convs,
        "pe_w2": (hid, d),
        "pe_b2": (d,),
        "queries": (cfg.num_queries, d),
        "attn_q": (d, d),
        "attn_k": (d, d),
        "attn_v": (d, d),
        "cls_w": (d, k),
        "cls_b": (k,),
        "mask_w": (d, d),
        "mask_bias_w": (d, 1),
        "mask_bias": (1,),
    }


def init_params(cfg: ModelConfig, rng: np.random.Generator) -> dict:
    params = {}
    for name, shape in param_shapes(cfg).items():
        if name.endswith(("_b", "_b1", "_b2", "mask_bias")):
            arr = np.zeros(shape)
        elif name == "queries":
            arr = rng.normal(0.0, 1.0, shape)
        else:
            arr = rng.normal(0.0, 1.0 / np.sqrt(shape[0]), shape)
            if name.startswith("conv"):
                arr *= 0.5  # residual branches start small
        params[name] = arr.astype(np.float32)
    return params


def zero_params(cfg: ModelConfig) -> dict:
    return {n: np.zeros(s, dtype=np.float32) for n, s in param_shapes(cfg).items()}


@dataclass
class Prediction:
    class_logits: Tensor  # (B, N, K+1)
    mask_logits_lowres: Tensor  # (B, N, H'*W')
    pixel_features: Tensor  # (B, H'*W', d), the map dotted with mask embeddings
    cfg: ModelConfig
    trunk_features: Tensor | None = None  # (B, H'*W', hidden), pre-projection map used for distillation

    @property
    def batch(self) -> int:
        return self.class_logits.shape[0]

    def mask_logits(self) -> np.ndarray:
        """(B, N, H, W) logits, nearest-neighbour upsampled from the feature grid."""
        gh, gw = self.cfg.grid
        b, n, _ = self.mask_logits_lowres.shape
        low = self.mask_logits_lowres.data.reshape(b, n, gh, gw)
        p = self.cfg.patch
        return np.repeat(np.repeat(low, p, axis=2), p, axis=3)

    def feature_map(self) -> np.ndarray:
        """(B, d, H', W') view of the pixel features."""
        gh, gw = self.cfg.grid
        f = self.pixel_features.data
        return f.transpose(0, 2, 1).reshape(f.shape[0], f.shape[2], gh, gw)


def position_features(cfg: ModelConfig) -> np.ndarray:
    gh, gw = cfg.grid
    yy, xx = np.meshgrid((np.arange(gh) + 0.5) / gh, (np.arange(gw) + 0.5) / gw, indexing="ij")
    feats = []
    for k in range(cfg.pos_freqs):
        f = np.pi * (2**k)
        feats += [np.sin(f * yy), np.cos(f * yy), np.sin(f * xx), np.cos(f * xx)]
    if not feats:
        return np.zeros((gh * gw, 0), dtype=np.float32)
    return np.stack(feats, -1).reshape(gh * gw, -1).astype(np.float32)


def patchify(images: np.ndarray, patch: int) -> np.ndarray:
    """(B, H, W, 3) -> (B, H'*W', patch*patch*3)."""
    b, h, w, c = images.shape
    if h % patch or w % patch:
        raise ValueError(f"image {h}x{w} not divisible by patch size {patch}")
    x = images.reshape(b, h // patch, patch, w // patch, patch, c).transpose(0, 1, 3, 2, 4, 5)
    return x.reshape(b, (h // patch) * (w // patch), patch * patch * c)


def forward(params: dict, images, cfg: ModelConfig) -> Prediction:
    """``params`` maps names to Tensors (or arrays for inference)."""
    images = np.asarray(images, dtype=np.float32)
    if images.ndim == 3:
        images = images[None]
    if images.shape[1:] != (cfg.height, cfg.width, 3):
        raise ValueError(f"expected images of shape (B, {cfg.height}, {cfg.width}, 3), got {images.shape}")
    P = {k: ad.as_tensor(v) for k, v in params.items()}
    x = patchify(images - 0.5, cfg.patch)
    pos = np.broadcast_to(position_features(cfg), (x.shape[0],) + position_features(cfg).shape)
    x = Tensor(np.concatenate([x, pos], axis=-1))

    b = x.shape[0]
    gh, gw = cfg.grid
    h = ad.relu(x @ P["pe_w1"] + P["pe_b1"])
    for i in range(cfg.conv_layers):
        # residual 3x3 convolution over the patch grid, dilation doubling per layer
        nb = ad.neighborhoods(ad.reshape(h, (b, gh, gw, cfg.hidden)), 3, 2**i)
        h = h + ad.relu(ad.reshape(nb, (b, gh * gw, 9 * cfg.hidden)) @ P[f"conv{i}_w"] + P[f"conv{i}_b"])
    feats = h @ P["pe_w2"] + P["pe_b2"]  # (B, L, d)
    if cfg.unit_features:
        # mask scores become scaled cosines, the quantity distillation shapes
        feats = ad.normalize(feats, axis=-1)

    d = cfg.dim
    keys = feats @ P["attn_k"]
    values = feats @ P["attn_v"]
    q = P["queries"]
    feats_t = ad.transpose(feats, (0, 2, 1))
    keys_t = ad.transpose(keys, (0, 2, 1))
    for r in range(cfg.attn_rounds):
        scores = (q @ P["attn_q"]) @ keys_t * (1.0 / np.sqrt(d))
        if cfg.masked_attention and r > 0:
            # attend inside the previous round's soft mask: + log sigmoid(mask logit)
            prev = (q @ P["mask_w"]) @ feats_t + (q @ P["mask_bias_w"] + P["mask_bias"])
            scores = scores - ad.softplus(-prev)
        if cfg.slot_attention:
            # queries compete for each location, then average what they won
            attn = ad.softmax(scores, axis=1)
            attn = attn / (attn.sum(axis=-1, keepdims=True) + 1e-3)
        else:
            attn = ad.softmax(scores, axis=-1)  # (B, N, L)
        q = P["queries"] + attn @ values

    class_logits = q @ P["cls_w"] + P["cls_b"]
    # per-query offset: locations orthogonal to the mask embedding fall below zero
    mask_logits = (q @ P["mask_w"]) @ feats_t + (q @ P["mask_bias_w"] + P["mask_bias"])  # (B, N, L)
    return Prediction(class_logits, mask_logits, feats, cfg, h)


# ---------------------------------------------------------------------------
# decoding


def _softmax(x: np.ndarray) -> np.ndarray:
    z = x - x.max(-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(-1, keepdims=True)


def _sigmoid(x: np.ndarray) -> np.ndarray:
    return 0.5 * (1.0 + np.tanh(0.5 * x))


def decode_predictions(pred: Prediction, tau_c: float = 0.7, min_size: int = 5) -> list:
    """Per image, the queries whose best real-class probability exceeds ``tau_c``
    and whose binarized mask has at least ``min_size`` pixels."""
    if not 0.0 < tau_c < 1.0:
        raise ValueError(f"tau_c must be in (0, 1), got {tau_c}")
    probs = _softmax(pred.class_logits.data.astype(np.float64))
    logits = pred.mask_logits()
    out = []
    for b in range(pred.batch):
        labels = []
        for n in range(probs.shape[1]):
            cls = int(np.argmax(probs[b, n, :-1]))
            conf = float(probs[b, n, cls])
            if conf <= tau_c:
                continue
            mask = logits[b, n] > 0
            if mask.sum() < min_size:
                continue
            labels.append(InstanceLabel(cls + 1, mask, conf, _sigmoid(logits[b, n]).astype(np.float32)))
        out.append(labels)
    return out


def scored_instances(pred: Prediction) -> list:
    """Every query with a non-empty mask, scored as class probability times
    mean foreground mask probability; used for AP evaluation."""
    probs = _softmax(pred.class_logits.data.astype(np.float64))
    low = pred.mask_logits_lowres.data
    logits = pred.mask_logits()
    out = []
    for b in range(pred.batch):
        labels = []
        for n in range(probs.shape[1]):
            fg = low[b, n] > 0
            if not fg.any():
                continue
            cls = int(np.argmax(probs[b, n, :-1]))
            mscore = float(_sigmoid(low[b, n][fg].astype(np.float64)).mean())
            labels.append(InstanceLabel(cls + 1, logits[b, n] > 0, float(probs[b, n, cls]) * mscore))
        out.append(labels)
    return out


# ---------------------------------------------------------------------------
# EMA and checkpoints


def ema_update(teacher: dict, student: dict, alpha: float) -> dict:
    """Return alpha * teacher + (1 - alpha) * student, parameter by parameter."""
    if teacher.keys() != student.keys():
        raise ValueError("teacher and student have different parameter sets")
    out = {}
    for k, t in teacher.items():
        s = student[k]
        t = t.data if isinstance(t, Tensor) else t
        s = s.data if isinstance(s, Tensor) else s
        if t.shape != s.shape:
            raise ValueError(f"EMA shape mismatch for {k}: {t.shape} vs {s.shape}")
        out[k] = (np.float32(alpha) * t + np.float32(1.0 - alpha) * s).astype(np.float32)
    return out


def save_params(path, params: dict, iteration: int = 0, rng_state=None, extra: dict | None = None,
                meta: dict | None = None) -> None:
    tensors = {k: (v.data if isinstance(v, Tensor) else v) for k, v in params.items()}
    for k, v in (extra or {}).items():
        tensors[k] = v
    write_checkpoint(path, tensors, iteration, rng_state, meta)


def load_params(path):
    """Returns (params, extra_tensors, iteration, rng_state, meta)."""
    tensors, it, rng_state, meta = read_checkpoint(path)
    names = set(param_shapes(config_from_meta(meta))) if any(k.startswith("model.") for k in meta) else None
    params = {k: v for k, v in tensors.items() if (k in names if names else "." not in k)}
    extra = {k: v for k, v in tensors.items() if k not in params}
    return params, extra, it, rng_state, meta


def config_from_meta(meta: dict) -> ModelConfig:
    from dataclasses import fields

    types = {f.name: f.type for f in fields(ModelConfig)}
    kw = {}
    for k, v in meta.items():
        if k.startswith("model."):
            name = k[6:]
            kw[name] = bool(v) if types[name] in ("bool", bool) else int(v)
    return ModelConfig(**kw)


def config_meta(cfg: ModelConfig) -> dict:
    from dataclasses import asdict

    return {f"model.{k}": v for k, v in asdict(cfg).items()}
