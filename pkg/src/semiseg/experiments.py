"""Experiment cells shared by the ablation command and the acceptance suite.

A cell is a list of config overrides applied on top of a base RunConfig.
Every cell owns its data, teacher and student; nothing mutable is shared.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from . import autodiff as ad
from .config import RunConfig
from .evaluate import evaluate_ap
from .model import decode_predictions, forward
from .oracle import Oracle
from .pseudo import quality_report, refine_labels
from .rng import derive_seed
from .synthdata import generate_dataset, make_split
from .train import predict, pretrain_teacher, train_student

TABLE3 = {
    "none": ["train.sd=false"],
    "encoder-feature": ["train.sd=true", "train.sd_mode=encoder", "train.sd_loss=feature"],
    "encoder-structural": ["train.sd=true", "train.sd_mode=encoder", "train.sd_loss=structural"],
    "decoder-structural": ["train.sd=true", "train.sd_mode=decoder", "train.sd_loss=structural"],
}

TABLE4 = {
    "I": ["train.sd=false", "train.pr=false", "train.arp=false"],
    "II": ["train.sd=true", "train.pr=false", "train.arp=false"],
    "III": ["train.sd=false", "train.pr=false", "train.arp=true"],
    "IV": ["train.sd=true", "train.pr=true", "train.arp=false"],
    "V": ["train.sd=true", "train.pr=false", "train.arp=true"],
    "VI": ["train.sd=true", "train.pr=true", "train.arp=true"],
}

TABLEA2 = {
    "box": ["train.prompt=box"],
    "mask": ["train.prompt=mask"],
    "single": ["train.prompt=single", "train.k_pts=1"],
    "points": ["train.prompt=points"],
}

RATIOS = {f"ratio-{r}": [f"data.ratio={r}"] for r in ("0.05", "0.1", "0.2", "0.3")}

GRIDS = {"table3": TABLE3, "table4": TABLE4, "tableA2": TABLEA2, "ratios": RATIOS}
# grids whose cells train only the teacher
TEACHER_ONLY = {"table3"}


@dataclass
class Bench:
    labeled: list
    unlabeled: list
    eval_scenes: list


def with_seed(cfg: RunConfig, seed: int) -> RunConfig:
    """One replicate: training seed, training scenes and split all follow ``seed``;
    the evaluation scenes stay fixed."""
    return replace(cfg, train=replace(cfg.train, seed=int(seed)),
                   data=replace(cfg.data, base_seed=int(seed), split_seed=int(seed)))


def cell_seed(seed: int, grid: str, cell: str) -> int:
    return derive_seed(seed, "ablate", grid, cell) % (2**31)


def build_bench(cfg: RunConfig) -> Bench:
    d = cfg.data
    ds = generate_dataset(cfg.scene, d.count, d.base_seed, workers=cfg.train.workers)
    ev = generate_dataset(cfg.scene, d.eval_count, d.eval_seed, workers=cfg.train.workers, prefix="eval")
    split = make_split(ds, d.ratio, d.split_seed)
    byid = {s.scene_id: s for s in ds.scenes}
    return Bench([byid[i] for i in split.labeled_ids], [byid[i] for i in split.unlabeled_ids], ev.scenes)


def model_metrics(params: dict, scenes, cfg: RunConfig) -> dict:
    """Mask AP on ``scenes`` plus CA/SQ of the thresholded predictions."""
    mcfg = cfg.model
    images = np.stack([s.image for s in scenes])
    gts = [s.instances for s in scenes]
    res = evaluate_ap(predict(params, images, mcfg), gts)
    decoded = []
    with ad.no_grad():
        for i in range(0, len(images), 64):
            decoded += decode_predictions(forward(params, images[i : i + 64], mcfg), cfg.train.tau_c,
                                          cfg.train.min_size)
    q = quality_report(decoded, gts)
    return {"AP": 100 * res.mean_ap, "AP50": 100 * res.per_threshold[0.5], "AP75": 100 * res.per_threshold[0.75],
            "CA": q.ca, "CA_total": q.ca_total, "SQ": q.sq, "TP": q.tp, "matched": q.matched, "total": q.total}


def run_teacher(cfg: RunConfig, bench: Bench | None = None, log=None):
    bench = bench or build_bench(cfg)
    state = pretrain_teacher(cfg.train, bench.labeled, cfg.model, Oracle(cfg.oracle), log=log)
    return state, model_metrics(state.student, bench.eval_scenes, cfg)


def run_student(cfg: RunConfig, teacher_params: dict, bench: Bench | None = None, log=None):
    bench = bench or build_bench(cfg)
    state = train_student(cfg.train, teacher_params, bench.labeled, bench.unlabeled, cfg.model,
                          Oracle(cfg.oracle), log=log)
    return state, model_metrics(state.student, bench.eval_scenes, cfg)


def refinement_quality(cfg: RunConfig, teacher_params: dict, scenes, k_pts: int, prompt: str = "points",
                       seed: int = 0) -> dict:
    """SQ/CA of teacher pseudo-labels on ``scenes`` before and after refinement with ``k_pts`` points."""
    tcfg = replace(cfg.train, k_pts=k_pts, prompt=prompt)
    oracle = Oracle(cfg.oracle)
    with ad.no_grad():
        raw = []
        for i in range(0, len(scenes), 64):
            chunk = scenes[i : i + 64]
            raw += decode_predictions(forward(teacher_params, np.stack([s.image for s in chunk]), cfg.model),
                                      tcfg.tau_c, tcfg.min_size)
    refined = [refine_labels(labs, s, oracle, tcfg.refine_config(), seed, "quality", s.scene_id)
               for labs, s in zip(raw, scenes)]
    gts = [s.instances for s in scenes]
    before, after = quality_report(raw, gts), quality_report(refined, gts)
    return {"SQ_before": before.sq, "SQ": after.sq, "CA_before": before.ca, "CA": after.ca,
            "TP_before": before.tp, "TP": after.tp}
