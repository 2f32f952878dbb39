"""Command-line experiment driver.

Exit codes: 0 success, 2 configuration error, 3 runtime error.
"""

from __future__ import annotations

import argparse
import csv
import dataclasses
import logging
import os
import statistics
import sys
import time

from . import analysis
from .anchors import generate_anchors
from .config import ConfigError, ExperimentConfig, dump_config, load_config
from .evaluation import EvalResult, format_table
from .inference import write_detections_csv
from .synthdata import dump_split
from .trainer import evaluate_model, load_model, load_split, train

log = logging.getLogger("consdet")

EXIT_CONFIG = 2
EXIT_RUNTIME = 3

# (label, num_cls_stages, num_reg_stages, apply_second_regression at inference)
STAGE_ROWS = [
    ("1/1", 1, 1, False),
    ("2/1", 2, 1, False),
    ("2/2*", 2, 2, False),
    ("2/2", 2, 2, True),
    ("3/2", 3, 2, True),
]


def _config(args) -> ExperimentConfig:
    cfg = load_config(args.config)
    overrides = {}
    for item in args.set or []:
        if "=" not in item:
            raise ConfigError(f"--set expects key=value, got {item!r}")
        k, v = item.split("=", 1)
        overrides[k.strip()] = v.strip()
    return cfg.with_overrides(overrides) if overrides else cfg


def _with_seed(cfg: ExperimentConfig, seed: int) -> ExperimentConfig:
    return dataclasses.replace(cfg, trainer=dataclasses.replace(cfg.trainer, seed=seed))


def _progress(every: int = 100):
    t0 = time.time()

    def cb(step, report):
        if step % every == 0:
            log.info("step %5d  loss %.4f  (%.0fs)", step, report.total, time.time() - t0)

    return cb


def _stem(path: str) -> str:
    base = os.path.basename(path)
    return base[: -len(".ckpt")] if base.endswith(".ckpt") else base


def _write(path: str, text: str):
    with open(path, "w", encoding="utf-8", newline="") as fh:
        fh.write(text)


# ---------------------------------------------------------------------------


def cmd_generate_data(args) -> int:
    cfg = _config(args)
    os.makedirs(args.out, exist_ok=True)
    for split in ("train", "val", "test"):
        n = dump_split(cfg.data, cfg.splits.count(split), split, args.out)
        print(f"{split}: {n} images")
    return 0


def cmd_train(args) -> int:
    cfg = _config(args)
    if args.baseline:
        cfg = cfg.as_baseline()
    model, history = train(cfg, progress=_progress())
    os.makedirs(os.path.dirname(os.path.abspath(args.out)), exist_ok=True)
    model.save(args.out)
    history.write_csv(args.out + ".losses.csv")
    _write(args.out + ".config.txt", dump_config(cfg))
    print(f"wrote {args.out} ({model.num_parameters()} parameters, final loss {history.totals[-1]:.4f})")
    return 0


def _inference_cfg(cfg: ExperimentConfig, args):
    inf = cfg.inference
    if getattr(args, "single_regression", False):
        inf = dataclasses.replace(inf, apply_second_regression=False)
    return inf


def cmd_evaluate(args) -> int:
    cfg = _config(args)
    model = load_model(cfg, args.ckpt)
    scenes = load_split(cfg, args.split)
    result, dets = evaluate_model(model, cfg, scenes, _inference_cfg(cfg, args))
    out_dir = args.out or os.path.dirname(os.path.abspath(args.ckpt))
    os.makedirs(out_dir, exist_ok=True)
    prefix = os.path.join(out_dir, f"{_stem(args.ckpt)}.{args.split}")
    _write(prefix + ".metrics.csv", result.to_csv())
    table = format_table([(_stem(args.ckpt), result)])
    _write(prefix + ".table.txt", table + "\n")
    write_detections_csv(prefix + ".detections.csv", dets)
    print(table)
    return 0


def cmd_analyze(args) -> int:
    cfg = _config(args)
    model = load_model(cfg, args.ckpt)
    scenes = load_split(cfg, args.split)
    anchor_set = generate_anchors(cfg.anchor_config, cfg.data.image_side, cfg.data.image_side)
    inf = _inference_cfg(cfg, args)
    if model.num_reg_stages == 1:
        inf = dataclasses.replace(inf, apply_second_regression=False)
    out_dir = args.out or os.path.join(os.path.dirname(os.path.abspath(args.ckpt)), _stem(args.ckpt) + ".analysis")
    os.makedirs(out_dir, exist_ok=True)

    shift = analysis.iou_shift(model, scenes, anchor_set)
    analysis.write_pairs_csv(os.path.join(out_dir, "iou_shift.csv"), shift)
    _write(os.path.join(out_dir, "iou_shift.svg"),
           analysis.scatter_svg(shift, "IoU before vs after regression", "anchor IoU", "regressed IoU"))

    records = analysis.detection_records(model, scenes, anchor_set, inf)
    analysis.write_records_csv(os.path.join(out_dir, "detections_scored.csv"), records)
    score = analysis.score_stats(records)
    score.to_csv(os.path.join(out_dir, "score_by_output_iou.csv"), "score")
    _write(os.path.join(out_dir, "score_mean.svg"),
           analysis.bins_svg(score, "score by output IoU", "output IoU", "score mean", "mean"))
    _write(os.path.join(out_dir, "score_std.svg"),
           analysis.bins_svg(score, "score spread by output IoU", "output IoU", "score std", "std"))

    loc = analysis.bin_stats(*zip(*analysis.localization_pairs(model, scenes, anchor_set, inf)))
    loc.to_csv(os.path.join(out_dir, "output_iou_by_input_iou.csv"), "output_iou")
    _write(os.path.join(out_dir, "output_iou_mean.svg"),
           analysis.bins_svg(loc, "localization by input IoU", "input IoU", "output IoU mean", "mean"))
    _write(os.path.join(out_dir, "output_iou_std.svg"),
           analysis.bins_svg(loc, "localization spread by input IoU", "input IoU", "output IoU std", "std"))

    lifted = sum(1 for b, a in shift if b < 0.5 <= a)
    low = sum(1 for b, _ in shift if b < 0.5)
    print(f"anchors overlapping a gt: {len(shift)}; below 0.5 before regression: {low}; "
          f"of those at >= 0.5 after: {lifted}")
    print(f"high-IoU (>=0.7) score std: {analysis.high_iou_std(score):.4f}")
    print(f"wrote analysis to {out_dir}")
    return 0


def _train_eval(cfg, train_scenes, val_scenes, label, inference_variants=None):
    t0 = time.time()
    model, history = train(cfg, train_scenes, progress=_progress(500))
    results = {}
    for name, inf in (inference_variants or {label: cfg.inference}).items():
        results[name], _ = evaluate_model(model, cfg, val_scenes, inf)
    log.info("%s trained and evaluated in %.0fs", label, time.time() - t0)
    return model, results


def cmd_ab(args) -> int:
    cfg = _config(args)
    train_scenes = load_split(cfg, "train")
    val_scenes = load_split(cfg, args.split)
    anchor_set = generate_anchors(cfg.anchor_config, cfg.data.image_side, cfg.data.image_side)
    out_dir = args.out or "ab_out"
    os.makedirs(out_dir, exist_ok=True)
    rows: list[tuple[str, EvalResult]] = []
    per_seed = []
    for i in range(args.seeds):
        seed = cfg.trainer.seed + i
        scfg = _with_seed(cfg, seed)
        res = {}
        stds = {}
        for kind, kcfg in (("baseline", scfg.as_baseline()), ("consistent", scfg)):
            model, r = _train_eval(kcfg, train_scenes, val_scenes, f"{kind} seed {seed}")
            res[kind] = r[f"{kind} seed {seed}"]
            rows.append((f"{kind} s{seed}", res[kind]))
            records = analysis.detection_records(model, val_scenes, anchor_set,
                                                 kcfg.inference)
            stds[kind] = analysis.high_iou_std(analysis.score_stats(records))
        per_seed.append((seed, res, stds))

    def med(kind, key):
        vals = [r[kind].ap if key == "AP" else r[kind].ap_at[key] for _, r, _ in per_seed]
        return statistics.median(vals)

    lines = [format_table(rows), ""]
    summary = []
    for key in ("AP", 0.5, 0.7, 0.8, 0.9):
        name = key if key == "AP" else f"AP{int(key * 100)}"
        b, c = med("baseline", key), med("consistent", key)
        summary.append((name, b, c, c - b))
        lines.append(f"median {name:>5}: baseline {100 * b:5.1f}  consistent {100 * c:5.1f}  delta {100 * (c - b):+5.1f}")
    wins = sum(1 for _, _, s in per_seed if s["consistent"] <= s["baseline"])
    lines.append(f"high-IoU score std (consistent <= baseline): {wins}/{len(per_seed)} seeds")
    text = "\n".join(lines)
    _write(os.path.join(out_dir, "ab_table.txt"), text + "\n")
    with open(os.path.join(out_dir, "ab.csv"), "w", newline="") as fh:
        out = csv.writer(fh, lineterminator="\n")
        out.writerow(["seed", "model", "AP", "AP50", "AP60", "AP70", "AP80", "AP90", "high_iou_score_std"])
        for seed, res, stds in per_seed:
            for kind in ("baseline", "consistent"):
                out.writerow([seed, kind, *(f"{v:.6f}" for v in res[kind].table_row()), f"{stds[kind]:.6f}"])
        for name, b, c, d in summary:
            out.writerow(["median", name, f"{b:.6f}", f"{c:.6f}", f"{d:.6f}"])
    print(text)
    return 0


def stage_configs(cfg: ExperimentConfig):
    """Configs for the stage-count rows; ``2/2*`` reuses the ``2/2`` model."""
    out = []
    for label, n_cls, n_reg, second in STAGE_ROWS:
        loss = dataclasses.replace(cfg.loss, num_cls_stages=n_cls, num_reg_stages=n_reg,
                                   alpha=cfg.loss.alpha if n_cls > 1 else 0.0)
        inf = dataclasses.replace(cfg.inference, apply_second_regression=second)
        out.append((label, dataclasses.replace(cfg, loss=loss, inference=inf)))
    return out


def run_stage_ablation(cfg: ExperimentConfig, split: str = "val") -> list[tuple[str, EvalResult]]:
    train_scenes = load_split(cfg, "train")
    val_scenes = load_split(cfg, split)
    trained = {}
    rows = []
    for label, scfg in stage_configs(cfg):
        key = (scfg.loss.num_cls_stages, scfg.loss.num_reg_stages)
        if key not in trained:
            trained[key], _ = train(scfg, train_scenes, progress=_progress(500))
        result, _ = evaluate_model(trained[key], scfg, val_scenes, scfg.inference)
        rows.append((label, result))
    return rows


def cmd_ablate_stages(args) -> int:
    cfg = _config(args)
    rows = run_stage_ablation(cfg, args.split)
    table = format_table(rows, label="#cls/#reg")
    out_dir = args.out or "ablation_out"
    os.makedirs(out_dir, exist_ok=True)
    _write(os.path.join(out_dir, "stages_table.txt"), table + "\n")
    print(table)
    return 0


def cmd_ablate_thresholds(args) -> int:
    cfg = _config(args)
    train_scenes = load_split(cfg, "train")
    val_scenes = load_split(cfg, args.split)
    rows = []
    for mu_pos, mu_neg in ((0.5, 0.5), (0.6, 0.5), (0.7, 0.6)):
        tcfg = cfg.with_overrides({"stage2.mu_pos": str(mu_pos), "stage2.mu_neg": str(mu_neg)})
        model, _ = train(tcfg, train_scenes, progress=_progress(500))
        result, _ = evaluate_model(model, tcfg, val_scenes)
        rows.append((f"{mu_pos}/{mu_neg}", result))
    table = format_table(rows, label="mu_pos/mu_neg")
    out_dir = args.out or "ablation_out"
    os.makedirs(out_dir, exist_ok=True)
    _write(os.path.join(out_dir, "thresholds_table.txt"), table + "\n")
    print(table)
    return 0


def cmd_show_config(args) -> int:
    cfg = _config(args) if args.config else ExperimentConfig()
    print(dump_config(cfg), end="")
    return 0


# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="consdet", description="Consistent-optimization single-shot detector experiments.")
    p.add_argument("-v", "--verbose", action="store_true", help="log training progress to stderr")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, config_required=True):
        sp.add_argument("--config", required=config_required, help="experiment config file (section.key = value)")
        sp.add_argument("--set", action="append", metavar="KEY=VALUE", help="override one config key (repeatable)")

    sp = sub.add_parser("generate-data", help="write train/val/test splits as PGM images + CSV annotations")
    common(sp)
    sp.add_argument("--out", required=True, help="output directory")
    sp.set_defaults(func=cmd_generate_data)

    sp = sub.add_parser("train", help="train a model and write a checkpoint plus loss-curve CSV")
    common(sp)
    sp.add_argument("--out", required=True, help="checkpoint path")
    sp.add_argument("--baseline", action="store_true", help="train the plain detector (alpha = 0, one regression stage)")
    sp.set_defaults(func=cmd_train)

    sp = sub.add_parser("evaluate", help="run inference and COCO-style AP on a split")
    common(sp)
    sp.add_argument("--ckpt", required=True, help="checkpoint path")
    sp.add_argument("--split", default="val", choices=["train", "val", "test"])
    sp.add_argument("--out", help="output directory (default: next to the checkpoint)")
    sp.add_argument("--single-regression", action="store_true", help="apply only the stage-1 regression at inference")
    sp.set_defaults(func=cmd_evaluate)

    sp = sub.add_parser("analyze", help="IoU-shift and score/IoU diagnostics as CSV + SVG")
    common(sp)
    sp.add_argument("--ckpt", required=True, help="checkpoint path")
    sp.add_argument("--split", default="val", choices=["train", "val", "test"])
    sp.add_argument("--out", help="output directory")
    sp.add_argument("--single-regression", action="store_true", help="apply only the stage-1 regression")
    sp.set_defaults(func=cmd_analyze)

    sp = sub.add_parser("ab", help="baseline vs consistent over several seeds")
    common(sp)
    sp.add_argument("--seeds", type=int, default=3, help="number of training seeds (default 3)")
    sp.add_argument("--split", default="val", choices=["val", "test"])
    sp.add_argument("--out", help="output directory (default ab_out)")
    sp.set_defaults(func=cmd_ab)

    sp = sub.add_parser("ablate-stages", help="compare classification/regression stage counts")
    common(sp)
    sp.add_argument("--split", default="val", choices=["val", "test"])
    sp.add_argument("--out", help="output directory (default ablation_out)")
    sp.set_defaults(func=cmd_ablate_stages)

    sp = sub.add_parser("ablate-thresholds", help="compare stage-2 IoU thresholds")
    common(sp)
    sp.add_argument("--split", default="val", choices=["val", "test"])
    sp.add_argument("--out", help="output directory (default ablation_out)")
    sp.set_defaults(func=cmd_ablate_thresholds)

    sp = sub.add_parser("show-config", help="print every config key with its value")
    common(sp, config_required=False)
    sp.set_defaults(func=cmd_show_config)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(message)s", stream=sys.stderr)
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except OSError as exc:
        if getattr(args, "config", None) and exc.filename == args.config:
            print(f"config error: {exc}", file=sys.stderr)
            return EXIT_CONFIG
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    except Exception as exc:  # noqa: BLE001
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
