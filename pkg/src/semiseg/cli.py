"""Command-line entry point: data generation, training, refinement, evaluation and ablation grids."""

from __future__ import annotations

import argparse
import csv
import datetime
import sys
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path

import numpy as np

from .augment import arp_composite, union_mask
from .config import ConfigError, RunConfig, load_config
from .evaluate import evaluate_ap, write_ap_csv
from .experiments import GRIDS, TEACHER_ONLY, Bench, build_bench, cell_seed, model_metrics, with_seed
from .formats import (FormatError, read_dataset, read_labels, read_split, write_dataset, write_labels, write_ppm,
                      write_split)
from .model import decode_predictions, forward
from .oracle import Oracle
from .pseudo import quality_report, refine_labels, write_quality_csv
from .synthdata import InstanceLabel, generate_dataset, make_split
from .train import TrainingDiverged, load_model, load_state, predict, pretrain_teacher, save_state, train_student
from . import autodiff as ad

EXIT_USAGE = 1
EXIT_DIVERGED = 2


# ---------------------------------------------------------------------------
# run directories


def make_run_dir(root, name: str) -> Path:
    """runs/<name>/<timestamp>/ with ckpt/ and labels/; a suffix keeps same-second runs apart."""
    stamp = datetime.datetime.now().strftime("%Y%m%d-%H%M%S")
    base = Path(root) / name
    run = base / stamp
    k = 1
    while run.exists():
        run = base / f"{stamp}-{k}"
        k += 1
    (run / "ckpt").mkdir(parents=True)
    (run / "labels").mkdir()
    return run


def _prepare_cell_dir(path: Path) -> Path:
    (path / "ckpt").mkdir(parents=True, exist_ok=True)
    (path / "labels").mkdir(exist_ok=True)
    return path


def write_summary(path, items: dict) -> None:
    lines = []
    for k, v in items.items():
        lines.append(f"{k} = {v:.6f}" if isinstance(v, float) else f"{k} = {v}")
    Path(path).write_text("\n".join(lines) + "\n")


# ---------------------------------------------------------------------------
# data access


def _load_bench(args, cfg: RunConfig) -> Bench:
    if not args.data:
        return build_bench(cfg)
    root = Path(args.data)
    train = read_dataset(root / "train") if (root / "train").exists() else read_dataset(root)
    ev = read_dataset(root / "eval").scenes if (root / "eval").exists() else []
    split_path = Path(args.split) if getattr(args, "split", None) else root / "split.txt"
    if split_path.exists():
        split = read_split(split_path)
    else:
        split = make_split(train, cfg.data.ratio, cfg.data.split_seed)
    byid = {s.scene_id: s for s in train.scenes}
    missing = [i for i in split.labeled_ids + split.unlabeled_ids if i not in byid]
    if missing:
        raise FormatError(f"split names {len(missing)} scenes absent from {root}, e.g. {missing[0]}")
    return Bench([byid[i] for i in split.labeled_ids], [byid[i] for i in split.unlabeled_ids], ev)


def _scenes(path) -> list:
    root = Path(path)
    return read_dataset(root / "train").scenes if (root / "train").exists() else read_dataset(root).scenes


def _read_label_dir(path, scenes) -> dict:
    root = Path(path)
    out = {}
    for s in scenes:
        f = root / f"{s.scene_id}.s4ml"
        if f.exists():
            out[s.scene_id] = read_labels(f, s.shape)
    if not out:
        raise FormatError(f"no label files for these scenes in {root}")
    return out


def _with_soft(labels) -> list:
    # label files carry hard masks only; sample uniformly over them
    return [lab if lab.soft_mask is not None else InstanceLabel(lab.class_id, lab.mask, lab.confidence,
                                                                 lab.mask.astype(np.float32)) for lab in labels]


def _write_pseudo_labels(run: Path, params, scenes, cfg: RunConfig) -> None:
    with ad.no_grad():
        for i in range(0, len(scenes), 64):
            chunk = scenes[i : i + 64]
            pred = forward(params, np.stack([s.image for s in chunk]), cfg.model)
            for s, labs in zip(chunk, decode_predictions(pred, cfg.train.tau_c, cfg.train.min_size)):
                write_labels(run / "labels" / f"{s.scene_id}.s4ml", labs)


# ---------------------------------------------------------------------------
# commands


def cmd_gen_data(args, cfg: RunConfig) -> int:
    out = Path(args.out)
    ds = generate_dataset(cfg.scene, cfg.data.count, cfg.data.base_seed, workers=cfg.train.workers)
    ev = generate_dataset(cfg.scene, cfg.data.eval_count, cfg.data.eval_seed, workers=cfg.train.workers,
                          prefix="eval")
    write_dataset(out / "train", ds)
    write_dataset(out / "eval", ev)
    cfg.write_snapshot(out / "config.snapshot")
    print(f"wrote {len(ds.scenes)} training and {len(ev.scenes)} eval scenes to {out}")
    return 0


def cmd_split(args, cfg: RunConfig) -> int:
    if not args.data:
        raise ConfigError("split needs --data")
    scenes = _scenes(args.data)
    split = make_split([s.scene_id for s in scenes], cfg.data.ratio, cfg.data.split_seed)
    path = Path(args.split) if args.split else Path(args.data) / "split.txt"
    write_split(path, split)
    print(f"{len(split.labeled_ids)} labeled / {len(split.unlabeled_ids)} unlabeled -> {path}")
    return 0


def _train_common(args, cfg: RunConfig, stage: str) -> int:
    bench = _load_bench(args, cfg)
    run = make_run_dir(args.out, cfg.run.name)
    cfg.write_snapshot(run / "config.snapshot")
    tcfg = cfg.train
    state = None
    if args.resume:
        state, mcfg, _ = load_state(args.resume, tcfg)
        if mcfg != cfg.model:
            raise ConfigError("resume checkpoint was written with a different model config")

    def checkpoint(st):
        save_state(run / "ckpt" / f"{stage}_{st.iteration:07d}.s4mc", st, tcfg, cfg.model)

    oracle = Oracle(cfg.oracle)
    if stage == "teacher":
        state = pretrain_teacher(tcfg, bench.labeled, cfg.model, oracle, bench.eval_scenes, state,
                                 checkpoint=checkpoint)
    else:
        teacher, mcfg = load_model(args.teacher)
        if mcfg != cfg.model:
            raise ConfigError("teacher checkpoint was written with a different model config")
        state = train_student(tcfg, teacher, bench.labeled, bench.unlabeled, cfg.model, oracle, bench.eval_scenes,
                              state, checkpoint=checkpoint)
    save_state(run / "ckpt" / f"{stage}.s4mc", state, tcfg, cfg.model)
    state.write_metrics(run / "metrics.csv")
    summary = {"stage": stage, "iterations": state.iteration}
    if bench.eval_scenes:
        summary.update(model_metrics(state.student, bench.eval_scenes, cfg))
    if stage == "student" and bench.unlabeled:
        _write_pseudo_labels(run, state.teacher, bench.unlabeled, cfg)
    write_summary(run / "summary.txt", summary)
    print(f"{stage} run -> {run}")
    print((run / "summary.txt").read_text(), end="")
    return 0


def cmd_pretrain_teacher(args, cfg: RunConfig) -> int:
    return _train_common(args, cfg, "teacher")


def cmd_train_student(args, cfg: RunConfig) -> int:
    if not args.teacher:
        raise ConfigError("train-student needs --teacher")
    return _train_common(args, cfg, "student")


def cmd_refine_labels(args, cfg: RunConfig) -> int:
    if not (args.data and args.labels):
        raise ConfigError("refine-labels needs --data and --labels")
    scenes = _scenes(args.data)
    labels = _read_label_dir(args.labels, scenes)
    run = make_run_dir(args.out, cfg.run.name)
    cfg.write_snapshot(run / "config.snapshot")
    oracle = Oracle(cfg.oracle)
    rcfg = cfg.train.refine_config()
    count = 0
    for s in scenes:
        if s.scene_id not in labels:
            continue
        refined = refine_labels(_with_soft(labels[s.scene_id]), s, oracle, rcfg, cfg.train.seed, "refine", s.scene_id)
        write_labels(run / "labels" / f"{s.scene_id}.s4ml", refined)
        count += len(refined)
    print(f"refined {count} labels in {len(labels)} scenes -> {run / 'labels'}")
    return 0


def cmd_quality_report(args, cfg: RunConfig) -> int:
    if not (args.data and args.labels):
        raise ConfigError("quality-report needs --data and --labels")
    scenes = _scenes(args.data)
    labels = _read_label_dir(args.labels, scenes)
    run = make_run_dir(args.out, cfg.run.name)
    rows = [(s.scene_id, quality_report(labels[s.scene_id], s.instances)) for s in scenes if s.scene_id in labels]
    write_quality_csv(run / "quality.csv", rows)
    pooled = quality_report([labels[s.scene_id] for s in scenes if s.scene_id in labels],
                            [s.instances for s in scenes if s.scene_id in labels])
    write_summary(run / "summary.txt", {"CA": pooled.ca, "CA_total": pooled.ca_total, "SQ": pooled.sq,
                                        "TP": pooled.tp, "matched": pooled.matched, "total": pooled.total})
    print((run / "summary.txt").read_text(), end="")
    return 0


def cmd_evaluate(args, cfg: RunConfig) -> int:
    if not args.data or not (args.ckpt or args.labels):
        raise ConfigError("evaluate needs --data and one of --ckpt or --labels")
    root = Path(args.data)
    scenes = read_dataset(root / "eval").scenes if (root / "eval").exists() else _scenes(root)
    if args.ckpt:
        params, mcfg = load_model(args.ckpt)
        preds = predict(params, np.stack([s.image for s in scenes]), mcfg)
    else:
        found = _read_label_dir(args.labels, scenes)
        preds = [found.get(s.scene_id, []) for s in scenes]
    res = evaluate_ap(preds, [s.instances for s in scenes])
    run = make_run_dir(args.out, cfg.run.name)
    write_ap_csv(run / "ap.csv", res)
    (run / "summary.txt").write_text(res.summary())
    print(res.summary(), end="")
    return 0


def _overlay(image, labels) -> np.ndarray:
    out = image.copy()
    colors = np.array([[1, 0, 0], [0, 1, 0], [0, 0, 1], [1, 1, 0], [1, 0, 1], [0, 1, 1]], np.float32)
    for k, lab in enumerate(labels):
        out[lab.mask] = 0.5 * out[lab.mask] + 0.5 * colors[k % len(colors)]
    return out


def cmd_augment_preview(args, cfg: RunConfig) -> int:
    scenes = _scenes(args.data) if args.data else generate_dataset(cfg.scene, 2 * args.count,
                                                                   cfg.data.base_seed).scenes
    labels = _read_label_dir(args.labels, scenes) if args.labels else {s.scene_id: s.instances for s in scenes}
    run = make_run_dir(args.out, cfg.run.name)
    for k in range(min(args.count, len(scenes) // 2)):
        a, b = scenes[2 * k], scenes[2 * k + 1]
        pair = arp_composite(a.image, labels.get(a.scene_id, []), b.image, labels.get(b.scene_id, []),
                             cfg.train.min_size)
        write_ppm(run / f"pair{k}_ab.ppm", pair.x_ab)
        write_ppm(run / f"pair{k}_ba.ppm", pair.x_ba)
        write_ppm(run / f"pair{k}_ab_labels.ppm", _overlay(pair.x_ab, pair.z_ab))
        write_ppm(run / f"pair{k}_ba_labels.ppm", _overlay(pair.x_ba, pair.z_ba))
        write_ppm(run / f"pair{k}_mask_b.ppm", np.repeat(union_mask(labels.get(b.scene_id, []), b.shape)[..., None],
                                                         3, axis=2).astype(np.float32))
        write_labels(run / "labels" / f"pair{k}_ab.s4ml", pair.z_ab)
        write_labels(run / "labels" / f"pair{k}_ba.s4ml", pair.z_ba)
    print(f"wrote previews -> {run}")
    return 0


def run_cell(base: RunConfig, grid: str, cell: str, overrides, seed: int, out: Path) -> dict:
    """Train one grid cell into ``out``; its seed is derived from (seed, grid, cell)."""
    cfg = with_seed(base.with_overrides(overrides), cell_seed(seed, grid, cell))
    out = _prepare_cell_dir(out)
    cfg.write_snapshot(out / "config.snapshot")
    bench = build_bench(cfg)
    oracle = Oracle(cfg.oracle)
    state = pretrain_teacher(cfg.train, bench.labeled, cfg.model, oracle)
    save_state(out / "ckpt" / "teacher.s4mc", state, cfg.train, cfg.model)
    if grid not in TEACHER_ONLY:
        teacher = state.student
        state = train_student(cfg.train, teacher, bench.labeled, bench.unlabeled, cfg.model, oracle)
        save_state(out / "ckpt" / "student.s4mc", state, cfg.train, cfg.model)
    state.write_metrics(out / "metrics.csv")
    result = {"cell": cell, "seed": cfg.train.seed, **model_metrics(state.student, bench.eval_scenes, cfg)}
    write_summary(out / "summary.txt", result)
    return result


def cmd_ablate(args, cfg: RunConfig) -> int:
    grid = GRIDS[args.grid]
    run = make_run_dir(args.out, f"{cfg.run.name}-{args.grid}")
    cfg.write_snapshot(run / "config.snapshot")
    first = cfg.train.seed
    jobs = [(cell, ov, first + r) for cell, ov in grid.items() for r in range(args.replicates)]

    def one(job):
        cell, ov, seed = job
        out = run / cell if args.replicates == 1 else run / cell / f"rep{seed - first}"
        return run_cell(cfg, args.grid, cell, ov, seed, out)

    workers = max(1, args.parallel)
    if workers > 1:
        with ThreadPoolExecutor(workers) as pool:
            results = list(pool.map(one, jobs))
    else:
        results = [one(j) for j in jobs]
    keys = list(results[0])
    with open(run / "summary.csv", "w", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(keys)
        for r in results:
            w.writerow([f"{r[k]:.4f}" if isinstance(r[k], float) else r[k] for k in keys])
    for r in results:
        print(f"{r['cell']:>24s}  AP={r['AP']:.2f}  CA={r['CA']:.3f}  SQ={r['SQ']:.3f}")
    print(f"ablation {args.grid}: {len(results)} runs -> {run}")
    return 0


COMMANDS = {
    "gen-data": cmd_gen_data,
    "split": cmd_split,
    "pretrain-teacher": cmd_pretrain_teacher,
    "train-student": cmd_train_student,
    "refine-labels": cmd_refine_labels,
    "augment-preview": cmd_augment_preview,
    "evaluate": cmd_evaluate,
    "ablate": cmd_ablate,
    "quality-report": cmd_quality_report,
}


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="s4m", description="Semi-supervised instance segmentation on synthetic scenes.")
    p.add_argument("command", choices=sorted(COMMANDS))
    p.add_argument("--config", help="INI-style config file")
    p.add_argument("--seed", type=int, help="sets train.seed, data.base_seed and data.split_seed")
    p.add_argument("--out", help="output root (run commands) or dataset directory (gen-data)")
    p.add_argument("--override", "-O", action="append", default=[], metavar="SECTION.KEY=VALUE")
    p.add_argument("--parallel", type=int, default=1, help="concurrent ablation cells")
    p.add_argument("--data", help="dataset directory written by gen-data")
    p.add_argument("--split", help="split file (default: <data>/split.txt)")
    p.add_argument("--labels", help="directory of .s4ml label files")
    p.add_argument("--teacher", help="teacher checkpoint for train-student")
    p.add_argument("--ckpt", help="model checkpoint for evaluate")
    p.add_argument("--resume", help="checkpoint to continue training from")
    p.add_argument("--grid", choices=sorted(GRIDS), default="table4")
    p.add_argument("--replicates", type=int, default=1, help="seeds per ablation cell")
    p.add_argument("--count", type=int, default=4, help="pairs for augment-preview")
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    if args.out is None:
        args.out = "data" if args.command == "gen-data" else "runs"
    try:
        cfg = load_config(args.config, args.override)
        if args.seed is not None:
            cfg = with_seed(cfg, args.seed)
        return COMMANDS[args.command](args, cfg)
    except TrainingDiverged as e:
        print(f"error: training diverged: {e}", file=sys.stderr)
        return EXIT_DIVERGED
    except (ConfigError, FormatError, OSError, ValueError, KeyError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
