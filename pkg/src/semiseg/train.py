"""Teacher pre-training and teacher-student training with pseudo-labels.

Every random draw comes from a substream named after (seed, stage,
iteration, item), so results do not depend on how many workers prepare data.
"""

from __future__ import annotations

import collections
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field, fields

import numpy as np

from . import autodiff as ad
from .augment import apply_photometric, arp_composite, pair_batch, sample_photometric, weak_scene
from .distill import DistillConfig, distill_term, meta_targets, sd_teacher_objective
from .evaluate import evaluate_ap
from .formats import read_checkpoint, write_checkpoint
from .matching import LossWeights, set_loss, student_objective
from .model import (ModelConfig, config_from_meta, config_meta, decode_predictions,
                    ema_update, forward, init_params, param_shapes, scored_instances)
from .oracle import Oracle
from .pseudo import RefinementConfig, filter_pseudo_labels, refine_label
from .rng import stream


class TrainingDiverged(RuntimeError):
    pass


@dataclass(frozen=True)
class TrainConfig:
    teacher_iters: int = 2000
    student_iters: int = 4000
    batch_labeled: int = 8
    batch_unlabeled: int = 8
    lr: float = 1e-3
    weight_decay: float = 0.05
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    mask_weight: float = 5.0
    unlabeled_weight: float = 2.0
    no_object_weight: float = 0.1
    tau_c: float = 0.7
    min_size: int = 5
    ema_alpha: float = 0.9996
    burn_in: int = -1  # -1: 10% of student_iters
    sd: bool = True
    sd_mode: str = "decoder"
    sd_loss: str = "structural"
    sd_points: int = 32
    sd_weight: float = 1.0
    huber_delta: float = 1.0
    student_sd: bool = False
    pr: bool = True
    arp: bool = True
    k_pts: int = 5
    prompt: str = "points"
    sample_replace: bool = True
    supervised_only: bool = False
    eval_every: int = 0
    seed: int = 0
    workers: int = 1

    def __post_init__(self):
        for name in ("lr", "batch_labeled", "batch_unlabeled", "ema_alpha", "huber_delta", "k_pts", "workers"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be > 0")
        if self.weight_decay < 0 or self.teacher_iters < 0 or self.student_iters < 0:
            raise ValueError("weight_decay and iteration counts must be >= 0")
        if not 0.0 < self.ema_alpha <= 1.0:
            raise ValueError("ema_alpha must be in (0, 1]")
        if not 0.0 < self.tau_c < 1.0:
            raise ValueError("tau_c must be in (0, 1)")
        self.distill_config()
        self.refine_config()

    @property
    def burn_in_iters(self) -> int:
        return self.student_iters // 10 if self.burn_in < 0 else self.burn_in

    def loss_weights(self) -> LossWeights:
        return LossWeights(self.mask_weight, self.unlabeled_weight, self.no_object_weight)

    def distill_config(self) -> DistillConfig:
        return DistillConfig(self.sd_mode, self.sd_loss, self.sd_points, self.huber_delta, self.sd_weight)

    def refine_config(self) -> RefinementConfig:
        return RefinementConfig(self.k_pts, self.min_size, self.sample_replace, self.prompt)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        types = {f.name: f.type for f in fields(cls)}
        unknown = set(d) - set(types)
        if unknown:
            raise KeyError(f"unknown train keys: {sorted(unknown)}")
        kw = {}
        for k, v in d.items():
            t = types[k]
            if t in ("bool", bool):
                kw[k] = v if isinstance(v, bool) else str(v).lower() in ("1", "true", "yes", "on")
            elif t in ("int", int):
                kw[k] = int(v)
            elif t in ("float", float):
                kw[k] = float(v)
            else:
                kw[k] = str(v)
        return cls(**kw)


# ---------------------------------------------------------------------------
# optimizer


class AdamW:
    """Adam with decoupled weight decay on float32 parameter arrays."""

    def __init__(self, shapes: dict, lr: float, weight_decay: float, betas=(0.9, 0.999), eps: float = 1e-8):
        self.lr, self.weight_decay, self.betas, self.eps = lr, weight_decay, betas, eps
        self.m = {k: np.zeros(s, dtype=np.float32) for k, s in shapes.items()}
        self.v = {k: np.zeros(s, dtype=np.float32) for k, s in shapes.items()}
        self.t = 0

    def reset(self) -> None:
        for k in self.m:
            self.m[k][...] = 0
            self.v[k][...] = 0
        self.t = 0

    def step(self, params: dict, grads: dict) -> None:
        """In-place update of ``params``; a missing gradient counts as zero."""
        self.t += 1
        b1, b2 = self.betas
        c1 = np.float32(1.0 - b1**self.t)
        c2 = np.float32(1.0 - b2**self.t)
        lr = np.float32(self.lr)
        for k, p in params.items():
            g = grads.get(k)
            if g is None:
                g = np.zeros_like(p)
            self.m[k] = np.float32(b1) * self.m[k] + np.float32(1 - b1) * g
            self.v[k] = np.float32(b2) * self.v[k] + np.float32(1 - b2) * g * g
            update = (self.m[k] / c1) / (np.sqrt(self.v[k] / c2) + np.float32(self.eps))
            p -= lr * (update + np.float32(self.weight_decay) * p)

    def state_tensors(self) -> dict:
        out = {f"adam.m.{k}": v for k, v in self.m.items()}
        out.update({f"adam.v.{k}": v for k, v in self.v.items()})
        return out

    def load_state(self, tensors: dict, t: int) -> None:
        for k in self.m:
            self.m[k] = tensors[f"adam.m.{k}"].astype(np.float32).copy()
            self.v[k] = tensors[f"adam.v.{k}"].astype(np.float32).copy()
        self.t = int(t)


# ---------------------------------------------------------------------------
# state, logging, checkpoints


METRIC_COLUMNS = ("iteration", "L_lb", "L_ulb", "L_SD", "AP_eval")


def _fmt(x) -> str:
    return "" if x is None else repr(float(x))


@dataclass
class TrainState:
    stage: str
    student: dict
    teacher: dict | None
    optimizer: AdamW
    iteration: int = 0
    metrics: list = field(default_factory=list)

    def metric_lines(self) -> list:
        return [",".join(METRIC_COLUMNS)] + [",".join(_fmt(r.get(c)) if c != "iteration" else str(r[c])
                                                      for c in METRIC_COLUMNS) for r in self.metrics]

    def write_metrics(self, path) -> None:
        with open(path, "w") as f:
            f.write("\n".join(self.metric_lines()) + "\n")


def save_state(path, state: TrainState, tcfg: TrainConfig, mcfg: ModelConfig) -> None:
    tensors = dict(state.student)
    if state.teacher is not None:
        tensors.update({f"teacher.{k}": v for k, v in state.teacher.items()})
    tensors.update(state.optimizer.state_tensors())
    meta = {"stage": state.stage, "adam_t": state.optimizer.t, "train": tcfg.to_dict(), **config_meta(mcfg),
            "metrics": state.metrics}
    rng_state = {"seed": tcfg.seed, "scheme": "named-substreams", "next_iteration": state.iteration}
    write_checkpoint(path, tensors, state.iteration, rng_state, meta)


def load_state(path, tcfg: TrainConfig | None = None):
    """Returns (TrainState, ModelConfig, TrainConfig stored in the file)."""
    tensors, it, _rng, meta = read_checkpoint(path)
    mcfg = config_from_meta(meta)
    stored = TrainConfig.from_dict(meta["train"]) if "train" in meta else TrainConfig()
    tcfg = tcfg or stored
    names = list(param_shapes(mcfg))
    student = {k: tensors[k].copy() for k in names}
    teacher = None
    if f"teacher.{names[0]}" in tensors:
        teacher = {k: tensors[f"teacher.{k}"].copy() for k in names}
    opt = AdamW({k: v.shape for k, v in student.items()}, tcfg.lr, tcfg.weight_decay,
                (tcfg.beta1, tcfg.beta2), tcfg.adam_eps)
    if "adam.m." + names[0] in tensors:
        opt.load_state(tensors, meta.get("adam_t", 0))
    state = TrainState(meta.get("stage", "teacher"), student, teacher, opt, it, list(meta.get("metrics", [])))
    return state, mcfg, stored


def load_model(path):
    """(params, ModelConfig) from any checkpoint written by this module."""
    tensors, _it, _rng, meta = read_checkpoint(path)
    mcfg = config_from_meta(meta)
    return {k: tensors[k].copy() for k in param_shapes(mcfg)}, mcfg


# ---------------------------------------------------------------------------
# shared helpers


def worker_count(requested: int) -> int:
    cap = os.environ.get("S4M_THREADS")
    if cap:
        return max(1, min(requested, int(cap)))
    return max(1, requested)


class _Pool:
    """Ordered map over a thread pool, or inline when one worker is asked for."""

    def __init__(self, workers: int):
        self.workers = worker_count(workers)
        self.pool = ThreadPoolExecutor(self.workers) if self.workers > 1 else None

    def submit(self, fn, *args):
        if self.pool is None:
            return _Done(fn(*args))
        return self.pool.submit(fn, *args)

    def map(self, fn, items):
        items = list(items)
        if self.pool is None:
            return [fn(x) for x in items]
        return list(self.pool.map(fn, items))

    def close(self):
        if self.pool is not None:
            self.pool.shutdown()


class _Done:
    def __init__(self, value):
        self.value = value

    def result(self):
        return self.value


def _leaves(params: dict) -> dict:
    return {k: ad.Tensor(v, requires_grad=True, name=k) for k, v in params.items()}


def _grads(leaves: dict) -> dict:
    return {k: t.grad for k, t in leaves.items() if t.grad is not None}


def _batch_indices(n: int, size: int, seed: int, *names) -> np.ndarray:
    return stream(seed, *names).choice(n, size=size, replace=n < size)


def predict(params: dict, images: np.ndarray, mcfg: ModelConfig, batch: int = 64):
    """Inference in chunks; returns per-image scored instance lists."""
    out = []
    with ad.no_grad():
        for i in range(0, len(images), batch):
            out += scored_instances(forward(params, images[i : i + batch], mcfg))
    return out


def evaluate_params(params: dict, scenes, mcfg: ModelConfig) -> float:
    if not scenes:
        return float("nan")
    preds = predict(params, np.stack([s.image for s in scenes]), mcfg)
    return evaluate_ap(preds, [s.instances for s in scenes]).mean_ap


def _check_finite(value: float, it: int, what: str) -> None:
    if not np.isfinite(value):
        raise TrainingDiverged(f"{what} became non-finite at iteration {it}")


# ---------------------------------------------------------------------------
# stage 1


def _teacher_item(scene, oracle, tcfg: TrainConfig, dcfg, grid, it: int, j: int):
    view = weak_scene(scene, stream(tcfg.seed, "teacher", it, j, "view"))
    target = rows = None
    if tcfg.sd:
        t, r = meta_targets([view], oracle, dcfg, grid, [stream(tcfg.seed, "teacher", it, j, "meta")])
        target, rows = t[0], None if r is None else r[0]
    return view, target, rows


def pretrain_teacher(tcfg: TrainConfig, labeled, mcfg: ModelConfig = ModelConfig(), oracle: Oracle | None = None,
                     eval_scenes=(), state: TrainState | None = None, log=None, checkpoint=None) -> TrainState:
    """Optimize the labeled set loss (plus distillation when ``tcfg.sd``).

    ``state`` resumes from a previous checkpoint; ``checkpoint(state)`` is
    called at evaluation points; ``log(row)`` after every iteration.
    """
    if not labeled:
        raise ValueError("teacher pre-training needs at least one labeled scene")
    oracle = oracle or Oracle()
    dcfg = tcfg.distill_config()
    weights = tcfg.loss_weights()
    if state is None:
        params = init_params(mcfg, stream(tcfg.seed, "teacher", "init"))
        opt = AdamW({k: v.shape for k, v in params.items()}, tcfg.lr, tcfg.weight_decay,
                    (tcfg.beta1, tcfg.beta2), tcfg.adam_eps)
        state = TrainState("teacher", params, None, opt)
    pool = _Pool(tcfg.workers)
    B = tcfg.batch_labeled

    def prep(it):
        idx = _batch_indices(len(labeled), B, tcfg.seed, "teacher", it, "batch")
        return [pool.submit(_teacher_item, labeled[i], oracle, tcfg, dcfg, mcfg.grid, it, j)
                for j, i in enumerate(idx)]

    ahead = collections.deque()
    try:
        for it in range(state.iteration, tcfg.teacher_iters):
            while len(ahead) < 2 and it + len(ahead) < tcfg.teacher_iters:
                ahead.append(prep(it + len(ahead)))
            items = [f.result() for f in ahead.popleft()]
            views = [v for v, _, _ in items]
            images = np.stack([v.image for v in views])
            leaves = _leaves(state.student)
            try:
                with ad.Tape() as tape:
                    pred = forward(leaves, images, mcfg)
                    target = rows = None
                    if tcfg.sd:
                        target = np.stack([t for _, t, _ in items])
                        rows = None if items[0][2] is None else np.stack([r for _, _, r in items])
                    total, l_lb, l_sd = sd_teacher_objective(pred, [v.instances for v in views], target, rows,
                                                             dcfg if tcfg.sd else None, weights)
                tape.backward(total)
            except ad.NonFiniteError as e:
                raise TrainingDiverged(f"teacher iteration {it}: {e}") from e
            _check_finite(float(total.data), it, "teacher loss")
            state.optimizer.step(state.student, _grads(leaves))
            state.iteration = it + 1
            row = {"iteration": it, "L_lb": float(l_lb.data), "L_ulb": None,
                   "L_SD": None if l_sd is None else float(l_sd.data), "AP_eval": None}
            if tcfg.eval_every and state.iteration % tcfg.eval_every == 0 and eval_scenes:
                row["AP_eval"] = evaluate_params(state.student, eval_scenes, mcfg)
                if checkpoint is not None:
                    checkpoint(state)
            state.metrics.append(row)
            if log is not None:
                log(row)
    finally:
        pool.close()
    return state


# ---------------------------------------------------------------------------
# stage 2


def _views(scene, seed, *names):
    return weak_scene(scene, stream(seed, *names))


def _pseudo_batch(tcfg: TrainConfig, teacher: dict, u_views, oracle, mcfg, pool, it: int):
    """Teacher pseudo-labels on weak views, refined, pasted and photometrically augmented."""
    with ad.no_grad():
        pred = forward(teacher, np.stack([v.image for v in u_views]), mcfg)
    labels = [filter_pseudo_labels(l, tcfg.tau_c, tcfg.min_size)
              for l in decode_predictions(pred, tcfg.tau_c, tcfg.min_size)]
    if tcfg.pr:
        rcfg = tcfg.refine_config()
        jobs = [(j, k) for j, labs in enumerate(labels) for k in range(len(labs))]
        refined = pool.map(lambda jk: refine_label(labels[jk[0]][jk[1]], u_views[jk[0]], oracle, rcfg,
                                                   stream(tcfg.seed, "student", it, "refine", jk[0], jk[1])), jobs)
        out = [[] for _ in labels]
        for (j, _), lab in zip(jobs, refined):
            out[j].append(lab)
        labels = out
    images = [v.image for v in u_views]
    if tcfg.arp:
        images, labels = list(images), list(labels)
        for pair in pair_batch(len(u_views), stream(tcfg.seed, "student", it, "pairs")):
            if len(pair) < 2:
                continue
            a, b = pair
            comp = arp_composite(images[a], labels[a], images[b], labels[b], tcfg.min_size,
                                 (u_views[a].scene_id, u_views[b].scene_id, tcfg.seed))
            images[a], labels[a] = comp.x_ab, comp.z_ab
            images[b], labels[b] = comp.x_ba, comp.z_ba
    strong = pool.map(lambda j: apply_photometric(images[j], sample_photometric(
        stream(tcfg.seed, "student", it, "strong", j))), range(len(images)))
    # the set loss needs no more labels than queries; keep the most confident
    labels = [sorted(l, key=lambda x: -x.confidence)[: mcfg.num_queries] for l in labels]
    return np.stack(strong), labels


def train_student(tcfg: TrainConfig, teacher_params: dict, labeled, unlabeled, mcfg: ModelConfig = ModelConfig(),
                  oracle: Oracle | None = None, eval_scenes=(), state: TrainState | None = None,
                  log=None, checkpoint=None) -> TrainState:
    """Student training against a frozen-then-EMA teacher.

    The student starts as a copy of the teacher. For the first
    ``burn_in_iters`` iterations the teacher is frozen; at that point it
    becomes a copy of the student (optimizer moments are reset) and then
    tracks it by EMA every iteration.
    """
    if not labeled:
        raise ValueError("student training needs at least one labeled scene")
    use_unlabeled = not tcfg.supervised_only and len(unlabeled) > 0
    oracle = oracle or Oracle()
    weights = tcfg.loss_weights()
    dcfg = tcfg.distill_config()
    if state is None:
        student = {k: np.array(v, dtype=np.float32) for k, v in teacher_params.items()}
        teacher = {k: np.array(v, dtype=np.float32) for k, v in teacher_params.items()}
        opt = AdamW({k: v.shape for k, v in student.items()}, tcfg.lr, tcfg.weight_decay,
                    (tcfg.beta1, tcfg.beta2), tcfg.adam_eps)
        state = TrainState("student", student, teacher, opt)
    burn_in = tcfg.burn_in_iters
    pool = _Pool(tcfg.workers)
    s = tcfg.seed

    def prep(it):
        li = _batch_indices(len(labeled), tcfg.batch_labeled, s, "student", it, "labeled")
        lab = [pool.submit(_views, labeled[i], s, "student", it, "lview", j) for j, i in enumerate(li)]
        unl = []
        if use_unlabeled:
            ui = _batch_indices(len(unlabeled), tcfg.batch_unlabeled, s, "student", it, "unlabeled")
            unl = [pool.submit(_views, unlabeled[i], s, "student", it, "uview", j) for j, i in enumerate(ui)]
        return lab, unl

    ahead = collections.deque()
    try:
        for it in range(state.iteration, tcfg.student_iters):
            while len(ahead) < 2 and it + len(ahead) < tcfg.student_iters:
                ahead.append(prep(it + len(ahead)))
            lab_f, unl_f = ahead.popleft()
            l_views = [f.result() for f in lab_f]
            u_views = [f.result() for f in unl_f]
            if u_views:
                u_images, pseudo = _pseudo_batch(tcfg, state.teacher, u_views, oracle, mcfg, pool, it)
            sd_target = None
            if tcfg.student_sd:
                t, r = meta_targets(l_views, oracle, dcfg, mcfg.grid,
                                    [stream(s, "student", it, "meta", j) for j in range(len(l_views))])
                sd_target = (t, r)
            leaves = _leaves(state.student)
            try:
                with ad.Tape() as tape:
                    pred_l = forward(leaves, np.stack([v.image for v in l_views]), mcfg)
                    l_lb = set_loss(pred_l, [v.instances for v in l_views], weights)
                    total = l_lb
                    l_ulb = l_sd = None
                    if u_views:
                        pred_u = forward(leaves, u_images, mcfg)
                        l_ulb = set_loss(pred_u, pseudo, weights)
                        total = student_objective(l_lb, l_ulb, weights)
                    if sd_target is not None:
                        l_sd = distill_term(pred_l.pixel_features, sd_target[0], sd_target[1], dcfg)
                        total = total + l_sd
                tape.backward(total)
            except ad.NonFiniteError as e:
                raise TrainingDiverged(f"student iteration {it}: {e}") from e
            _check_finite(float(total.data), it, "student loss")
            state.optimizer.step(state.student, _grads(leaves))
            state.iteration = it + 1
            if state.iteration == burn_in and burn_in < tcfg.student_iters:
                state.teacher = {k: v.copy() for k, v in state.student.items()}
                state.optimizer.reset()
            elif state.iteration > burn_in:
                state.teacher = ema_update(state.teacher, state.student, tcfg.ema_alpha)
            row = {"iteration": it, "L_lb": float(l_lb.data), "L_ulb": None if l_ulb is None else float(l_ulb.data),
                   "L_SD": None if l_sd is None else float(l_sd.data), "AP_eval": None}
            if tcfg.eval_every and state.iteration % tcfg.eval_every == 0 and eval_scenes:
                row["AP_eval"] = evaluate_params(state.student, eval_scenes, mcfg)
                if checkpoint is not None:
                    checkpoint(state)
            state.metrics.append(row)
            if log is not None:
                log(row)
    finally:
        pool.close()
    return state
