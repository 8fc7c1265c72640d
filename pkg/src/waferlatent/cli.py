"""Command-line experiment runner.

Subcommands share ``--config``, ``--seed`` and ``--out``. Data go to files
under the output directory; diagnostics go to stderr. Each stepwise
subcommand reads the checkpoints written by the previous one, so a run can be
resumed from any step.
"""

from __future__ import annotations

import argparse
import csv
import io
import json
import logging
import sys
from collections import OrderedDict
from dataclasses import replace
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from . import data as wd
from .classifier import (FUSION_POINTS, build_network, load_classifier, save_classifier,
                         train_supervised)
from .config import ExperimentConfig, load_config
from .metrics import evaluate, format_table
from .semisup import (PseudoLabel, build_student_set, fine_tune, pseudo_label_stats, run_pipeline,
                      score_unlabeled, select_topk, train_student)
from .vae import load_vae, pretrain_vae, save_vae

log = logging.getLogger("waferlatent")

SUMMARY_METRICS = ("accuracy", "macro_precision", "macro_recall", "macro_f1")
TABLE_COLUMNS = (("P", "macro_precision"), ("R", "macro_recall"), ("F1", "macro_f1"), ("A", "accuracy"))


class StepError(RuntimeError):
    def __init__(self, step: str, exc: BaseException):
        super().__init__(f"step '{step}' failed: {exc}")
        self.step = step


def _write_json(path: Path, obj) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(obj, indent=2) + "\n")


def _seed_dir(out: Path, seed: int) -> Path:
    return out / "checkpoints" / f"seed{seed}"


# ---------------------------------------------------------------------------
# data


def load_maps(cfg: ExperimentConfig) -> list[wd.WaferMap]:
    d = cfg.data
    if d.path:
        return wd.ingest(d.path)
    return wd.generate_dataset(d.total, d.weights(), d.image_size, d.noise_rate, d.seed)


def load_split(cfg: ExperimentConfig, seed: int) -> wd.DatasetSplit:
    """Split labeled records by the configured fractions; unlabeled records join the pool."""
    maps = load_maps(cfg)
    labeled = [m for m in maps if m.label is not None]
    extra = [m for m in maps if m.label is None]
    split = wd.split(labeled, tuple(cfg.data.split), seed)
    split.unlabeled.extend(extra)
    if cfg.data.balance_target:
        split.labeled = wd.balance(split.labeled, cfg.data.balance_target, seed)
    return split


def cmd_generate(cfg: ExperimentConfig, out: Path) -> Path:
    d = cfg.data
    maps = wd.generate_dataset(d.total, d.weights(), d.image_size, d.noise_rate, d.seed)
    out.mkdir(parents=True, exist_ok=True)
    path = out / "dataset.jsonl"
    wd.export(maps, path)
    hist = wd.class_histogram(maps)
    stats = OrderedDict([
        ("total", len(maps)),
        ("class_counts", OrderedDict((wd.CLASS_NAMES[c], hist[c]) for c in range(wd.NUM_CLASSES))),
        ("data", OrderedDict(sorted(cfg.to_dict()["data"].items()))),
    ])
    _write_json(out / "stats.json", stats)
    return path


# ---------------------------------------------------------------------------
# stepwise commands


def cmd_pretrain_vae(cfg: ExperimentConfig, seed: int, out: Path) -> Path:
    pcfg = cfg.pipeline(seed)
    split = load_split(cfg, seed)
    vae, history = pretrain_vae(split.labeled + split.unlabeled, pcfg.vae_train, pcfg.vae_model)
    d = _seed_dir(out, seed)
    d.mkdir(parents=True, exist_ok=True)
    save_vae(vae, d / "vae.json")
    _write_json(d / "vae_history.json", history)
    return d / "vae.json"


def _maybe_vae(out: Path, seed: int, needed: bool):
    if not needed:
        return None
    path = _seed_dir(out, seed) / "vae.json"
    if not path.exists():
        raise FileNotFoundError(f"{path} missing; run pretrain-vae first")
    return load_vae(path)


def cmd_train_teacher(cfg: ExperimentConfig, seed: int, out: Path) -> Path:
    pcfg = cfg.pipeline(seed)
    split = load_split(cfg, seed)
    vae = _maybe_vae(out, seed, pcfg.teacher.fusion_point != "none")
    teacher, history = train_supervised(build_network(pcfg.teacher, seed), vae, split.labeled, pcfg.train)
    d = _seed_dir(out, seed)
    d.mkdir(parents=True, exist_ok=True)
    save_classifier(teacher, d / "teacher.json")
    _write_json(d / "teacher_history.json", history)
    return d / "teacher.json"


def cmd_pseudo_label(cfg: ExperimentConfig, seed: int, out: Path) -> Path:
    pcfg = cfg.pipeline(seed)
    split = load_split(cfg, seed)
    d = _seed_dir(out, seed)
    teacher = load_classifier(d / "teacher.json")
    vae = _maybe_vae(out, seed, teacher.fused)
    scored = score_unlabeled(teacher, vae, split.unlabeled)
    selected = select_topk(scored, pcfg.top_k, pcfg.confidence_threshold)
    doc = OrderedDict([
        ("threshold", pcfg.confidence_threshold),
        ("top_k", pcfg.top_k),
        ("selected", [[p.example_id, p.predicted_class, p.confidence] for p in selected]),
        ("scored", [[p.example_id, p.predicted_class, p.confidence] for p in scored]),
    ])
    _write_json(d / "pseudo_labels.json", doc)
    return d / "pseudo_labels.json"


def cmd_train_student(cfg: ExperimentConfig, seed: int, out: Path) -> Path:
    pcfg = cfg.pipeline(seed)
    split = load_split(cfg, seed)
    d = _seed_dir(out, seed)
    doc = json.loads((d / "pseudo_labels.json").read_text())
    selected = [PseudoLabel(i, int(c), float(p)) for i, c, p in doc["selected"]]
    vae = _maybe_vae(out, seed, pcfg.student.fusion_point != "none")
    student_set = build_student_set(split.labeled, selected, split.unlabeled)
    student, history = train_student(pcfg.student, vae, student_set, pcfg.train, rng_seed=seed + 1)
    save_classifier(student, d / "student_pre_finetune.json")
    final, ft_history = fine_tune(student, vae, split.labeled, pcfg.fine_tune_epochs, pcfg.train,
                                  pcfg.fine_tune_lr_factor)
    save_classifier(final, d / "student.json")
    _write_json(d / "student_history.json", {"student": history, "fine_tune": ft_history})
    return d / "student.json"


def cmd_evaluate(cfg: ExperimentConfig, seed: int, out: Path, model: str = "student") -> Path:
    split = load_split(cfg, seed)
    d = _seed_dir(out, seed)
    path = Path(model) if model.endswith(".json") else d / f"{model}.json"
    net = load_classifier(path)
    vae = _maybe_vae(out, seed, net.fused)
    report = evaluate(net, vae, split.test)
    name = path.stem
    _write_json(d / f"metrics_{name}.json", report.to_dict())
    (d / f"metrics_{name}.txt").write_text(report.to_table())
    return d / f"metrics_{name}.json"


# ---------------------------------------------------------------------------
# full runs


def _stats(values: Sequence[float]) -> "OrderedDict[str, object]":
    arr = np.asarray(values, dtype=np.float64)
    return OrderedDict([("mean", float(arr.mean())), ("std", float(arr.std())),
                        ("min", float(arr.min())), ("max", float(arr.max())),
                        ("values", [float(v) for v in arr])])


def summarize(reports: Sequence[dict], cfg: ExperimentConfig) -> "OrderedDict[str, object]":
    summary = OrderedDict([("seeds", [r["seed"] for r in reports]), ("config", cfg.to_dict())])
    for role in ("teacher", "student"):
        summary[role] = OrderedDict((m, _stats([r[role][m] for r in reports])) for m in SUMMARY_METRICS)
    acc = [r["pseudo_labels"]["accuracy_selected"] for r in reports]
    summary["pseudo_label_accuracy"] = _stats(acc) if all(a is not None for a in acc) else None
    summary["selected"] = _stats([r["pseudo_labels"]["selected"] for r in reports])
    return summary


def summary_table(summary: dict) -> str:
    rows = [("model",) + tuple(c for c, _ in TABLE_COLUMNS)]
    for role in ("teacher", "student"):
        rows.append((role,) + tuple(
            f"{summary[role][m]['mean']:.4f} ± {summary[role][m]['std']:.4f}" for _, m in TABLE_COLUMNS))
    return format_table(rows)


def cmd_run(cfg: ExperimentConfig, out: Path, fusion_point: Optional[str] = None,
            vae_cache: Optional[dict] = None) -> "OrderedDict[str, object]":
    """Full pipeline per seed; one report per seed plus summary.json / summary.txt."""
    out.mkdir(parents=True, exist_ok=True)
    reports = []
    for seed in cfg.seeds:
        pcfg = cfg.pipeline(seed, fusion_point)
        try:
            split = load_split(cfg, seed)
        except Exception as exc:
            raise StepError("load-data", exc) from exc
        vae = None if vae_cache is None else vae_cache.get(seed)
        needs_vae = pcfg.student.fusion_point != "none" or pcfg.teacher.fusion_point != "none"
        if needs_vae and vae is None:
            try:
                vae, _ = pretrain_vae(split.labeled + split.unlabeled, pcfg.vae_train, pcfg.vae_model)
            except Exception as exc:
                raise StepError("pretrain-vae", exc) from exc
            if vae_cache is not None:
                vae_cache[seed] = vae
        try:
            result = run_pipeline(pcfg, split, vae if needs_vae else None)
        except Exception as exc:
            raise StepError("pipeline", exc) from exc
        d = _seed_dir(out, seed)
        d.mkdir(parents=True, exist_ok=True)
        if result.vae is not None:
            save_vae(result.vae, d / "vae.json")
        save_classifier(result.teacher, d / "teacher.json")
        save_classifier(result.student, d / "student.json")
        _write_json(out / f"report_seed{seed}.json", result.report)
        reports.append(result.report)
        log.info("seed %d: teacher acc %.4f, student acc %.4f, student macro-F1 %.4f", seed,
                 result.teacher_metrics.accuracy, result.student_metrics.accuracy,
                 result.student_metrics.macro_f1)
    summary = summarize(reports, cfg)
    summary["fusion_point"] = fusion_point or cfg.network.fusion_point
    _write_json(out / "summary.json", summary)
    (out / "summary.txt").write_text(summary_table(summary))
    return summary


def cmd_ablate(cfg: ExperimentConfig, out: Path, fusion_points: Sequence[str]) -> "OrderedDict[str, object]":
    if len(fusion_points) < 2:
        raise ValueError("ablate needs at least two fusion points")
    bad = [fp for fp in fusion_points if fp not in FUSION_POINTS]
    if bad:
        raise ValueError(f"unknown fusion point(s): {', '.join(bad)}")
    vae_cache: dict = {}
    rows = OrderedDict()
    for fp in fusion_points:
        summary = cmd_run(cfg, out / fp, fusion_point=fp, vae_cache=vae_cache)
        rows[fp] = OrderedDict([
            ("summary", f"{fp}/summary.json"),
            ("seeds", summary["seeds"]),
            ("data", summary["config"]["data"]),
            ("student", OrderedDict((col, summary["student"][m]["mean"]) for col, m in TABLE_COLUMNS)),
            ("student_std", OrderedDict((col, summary["student"][m]["std"]) for col, m in TABLE_COLUMNS)),
        ])
    table = [("fusion_point",) + tuple(c for c, _ in TABLE_COLUMNS)]
    for fp, row in rows.items():
        table.append((fp,) + tuple(f"{row['student'][c]:.4f}" for c, _ in TABLE_COLUMNS))
    (out / "ablation.txt").write_text(format_table(table))
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(["fusion_point"] + [c for c, _ in TABLE_COLUMNS])
    for fp, row in rows.items():
        writer.writerow([fp] + [repr(row["student"][c]) for c, _ in TABLE_COLUMNS])
    (out / "ablation.csv").write_text(buf.getvalue())
    doc = OrderedDict([("fusion_points", list(fusion_points)), ("rows", rows)])
    _write_json(out / "ablation.json", doc)
    return doc


# ---------------------------------------------------------------------------
# entry point


def _common_options(suppress: bool) -> argparse.ArgumentParser:
    # subcommand copies must not reset values given before the subcommand name
    kw = {"default": argparse.SUPPRESS} if suppress else {}
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", type=Path, help="JSON experiment config (defaults when omitted)", **kw)
    common.add_argument("--seed", type=int, help="run only this seed (overrides config seeds)", **kw)
    common.add_argument("--out", type=Path, help="output directory (overrides config output_dir)", **kw)
    common.add_argument("-v", "--verbose", action="store_true", **kw)
    return common


def build_parser() -> argparse.ArgumentParser:
    common = _common_options(suppress=True)
    parser = argparse.ArgumentParser(prog="waferlatent", description=__doc__.splitlines()[0],
                                     parents=[_common_options(suppress=False)])
    sub = parser.add_subparsers(dest="command", required=True)
    for name in ("generate", "pretrain-vae", "train-teacher", "pseudo-label", "train-student", "run"):
        sub.add_parser(name, parents=[common])
    ev = sub.add_parser("evaluate", parents=[common])
    ev.add_argument("--model", default="student", help="teacher, student, or a checkpoint path")
    ab = sub.add_parser("ablate", parents=[common])
    ab.add_argument("--fusion-points", default=",".join(FUSION_POINTS),
                    help="comma-separated fusion points")
    return parser


STEPS = {
    "pretrain-vae": cmd_pretrain_vae,
    "train-teacher": cmd_train_teacher,
    "pseudo-label": cmd_pseudo_label,
    "train-student": cmd_train_student,
}


def main(argv: Optional[Sequence[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO, stream=sys.stderr,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = load_config(args.config) if args.config else ExperimentConfig()
        if args.seed is not None:
            cfg = _with_seeds(cfg, (args.seed,))
        out = args.out or Path(cfg.output_dir)
        if args.command == "generate":
            cmd_generate(cfg, out)
        elif args.command in STEPS:
            for seed in cfg.seeds:
                STEPS[args.command](cfg, seed, out)
        elif args.command == "evaluate":
            for seed in cfg.seeds:
                cmd_evaluate(cfg, seed, out, args.model)
        elif args.command == "run":
            cmd_run(cfg, out)
        elif args.command == "ablate":
            cmd_ablate(cfg, out, [p.strip() for p in args.fusion_points.split(",") if p.strip()])
    except StepError as exc:
        print(f"waferlatent {args.command}: {exc}", file=sys.stderr)
        return 1
    except Exception as exc:  # every failure becomes a step-named message and exit status 1
        print(f"waferlatent {args.command}: step '{args.command}' failed: {exc}", file=sys.stderr)
        return 1
    return 0


def _with_seeds(cfg: ExperimentConfig, seeds: tuple[int, ...]) -> ExperimentConfig:
    return replace(cfg, seeds=seeds)


if __name__ == "__main__":
    sys.exit(main())
