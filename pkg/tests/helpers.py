"""Small shared builders for the test suite."""

import numpy as np

from semiseg.autodiff import Tensor
from semiseg.model import ModelConfig, Prediction
from semiseg.synthdata import InstanceLabel

TINY = ModelConfig(height=32, width=32, patch=8, num_classes=3, num_queries=4, dim=6, hidden=8,
                   pos_freqs=1, attn_rounds=2, conv_layers=1)


def random_labels(rng, cfg: ModelConfig, count: int, block: bool = False):
    """``count`` random instance labels; ``block`` snaps masks to whole grid cells."""
    out = []
    for _ in range(count):
        if block:
            gh, gw = cfg.grid
            cells = rng.uniform(size=(gh, gw)) < 0.4
            cells[rng.integers(gh), rng.integers(gw)] = True
            m = np.kron(cells, np.ones((cfg.patch, cfg.patch), dtype=bool))
        else:
            m = rng.uniform(size=(cfg.height, cfg.width)) < 0.3
            m[rng.integers(cfg.height), rng.integers(cfg.width)] = True
        out.append(InstanceLabel(int(rng.integers(1, cfg.num_classes + 1)), m, 1.0))
    return out


def random_prediction(rng, cfg: ModelConfig, batch: int = 1, scale: float = 2.0) -> Prediction:
    gh, gw = cfg.grid
    cls = Tensor(rng.normal(0, scale, (batch, cfg.num_queries, cfg.num_classes + 1)))
    masks = Tensor(rng.normal(0, scale, (batch, cfg.num_queries, gh * gw)))
    feats = Tensor(rng.normal(0, 1, (batch, gh * gw, cfg.dim)))
    return Prediction(cls, masks, feats, cfg)


def prediction_from(cls, masks, feats, cfg) -> Prediction:
    return Prediction(cls, masks, feats, cfg)
