"""Command-line entry points.

Subcommands: list-archs, train, eval, stage-grid, ablate, report.  Desk-scale
synthetic data is the default everywhere; pass --data-root (or set the
environment override) to use a pickled 32x32 archive, and --paper-schedule to
run the full 240-epoch recipe.
"""

from __future__ import annotations

import argparse
import dataclasses
import sys
from pathlib import Path

from .core import ConfigError, DistillConfig, load_config_file
from .data import DataBundle, load_cifar_bundle, synthetic_dataset
from .experiments import (
    DEFAULT_LAMBDA,
    EXPERIMENT_SCHEDULE,
    ExperimentSettings,
    run_ablation,
    run_stage_grid,
    load_summary,
)
from .nets import ARCHITECTURES, build_net, list_archs
from .report import REPORT_FORMATS, emit_report
from .training import (
    DESK_SCHEDULE,
    PAPER_SCHEDULE,
    evaluate,
    load_checkpoint,
    train_distill,
    train_plain,
)


def _add_data_args(parser: argparse.ArgumentParser) -> None:
    parser.add_argument(
        "--data-root",
        default=None,
        help="directory with pickled 32x32 archives; default is synthetic data",
    )
    parser.add_argument("--classes", type=int, default=8, help="synthetic classes")
    parser.add_argument(
        "--per-class", type=int, default=64, help="synthetic train images per class"
    )
    parser.add_argument("--size", type=int, default=16, help="synthetic image size")
    parser.add_argument("--data-seed", type=int, default=0, help="synthetic data seed")
    parser.add_argument(
        "--noise-scale", type=float, default=2.5, help="synthetic noise level"
    )
    parser.add_argument(
        "--prototype-cells", type=int, default=8,
        help="synthetic class-prototype grid resolution",
    )


def _add_schedule_args(parser: argparse.ArgumentParser) -> None:
    parser.add_argument(
        "--paper-schedule",
        action="store_true",
        help="use the full 240-epoch schedule (hours of CPU time)",
    )
    parser.add_argument("--epochs", type=int, default=None, help="override epoch count")
    parser.add_argument("--batch-size", type=int, default=None)
    parser.add_argument("--lr", type=float, default=None, help="override base rate")


def _bundle(args) -> DataBundle:
    if args.data_root:
        return load_cifar_bundle(args.data_root)
    return synthetic_dataset(
        classes=args.classes,
        per_class=args.per_class,
        size=args.size,
        seed=args.data_seed,
        noise_scale=args.noise_scale,
        prototype_cells=args.prototype_cells,
    )


def _schedule(args, default=DESK_SCHEDULE):
    schedule = PAPER_SCHEDULE if args.paper_schedule else default
    overrides = {}
    if args.epochs is not None:
        overrides["epochs"] = args.epochs
    if args.batch_size is not None:
        overrides["batch_size"] = args.batch_size
    if args.lr is not None:
        overrides["base_lr"] = args.lr
    return dataclasses.replace(schedule, **overrides) if overrides else schedule


def _cmd_list_archs(args) -> int:
    print(f"{'name':<18} {'stages':>6} {'params':>10}")
    for name, stages, params in list_archs(classes=args.classes):
        print(f"{name:<18} {stages:>6} {params:>10,}")
    return 0


def _cmd_train(args) -> int:
    data = _bundle(args)
    schedule = _schedule(args)
    if args.config:
        config, schedule = load_config_file(args.config)
        config = dataclasses.replace(config, seed=args.seed)
    else:
        config = DistillConfig(
            mechanism=args.mechanism,
            lambda_weight=args.lambda_weight,
            stage_pair=tuple(args.stage_pair) if args.stage_pair else None,
            seed=args.seed,
        )
    student = build_net(args.arch, classes=data.classes, seed=args.seed)
    if args.teacher_checkpoint:
        teacher, _ = load_checkpoint(args.teacher_checkpoint)
        record = train_distill(
            student, teacher, config, data, schedule, checkpoint_dir=args.out
        )
    elif args.teacher:
        teacher = build_net(args.teacher, classes=data.classes, seed=args.seed + 1)
        print(f"training teacher {args.teacher} from scratch", flush=True)
        train_plain(teacher, data, schedule, seed=args.seed + 1, checkpoint_dir=None)
        record = train_distill(
            student, teacher, config, data, schedule, checkpoint_dir=args.out
        )
    else:
        record = train_plain(
            student, data, schedule, seed=args.seed, checkpoint_dir=args.out
        )
    out = Path(args.out)
    record.save(out / "run.json")
    for stats in record.per_epoch:
        print(
            f"epoch {stats.epoch:>3}  ce {stats.train_ce_loss:.4f}  "
            f"distill {stats.distill_loss:.4f}  acc {stats.eval_accuracy:.2f}"
        )
    print(f"final accuracy: {record.final_accuracy:.2f}")
    print(f"records in {out}")
    return 0


def _cmd_eval(args) -> int:
    data = _bundle(args)
    net, _ = load_checkpoint(args.checkpoint)
    split = data.train if args.split == "train" else data.test
    accuracy = evaluate(net, split)
    print(f"top-1 accuracy ({args.split}): {accuracy:.2f}")
    return 0


def _experiment_settings(args) -> ExperimentSettings:
    return ExperimentSettings(
        student_arch=args.student,
        teacher_arch=args.teacher,
        classes=args.classes,
        per_class=args.per_class,
        image_size=args.size,
        noise_scale=args.noise_scale,
        prototype_cells=args.prototype_cells,
        data_seed=args.data_seed,
        lambda_weight=args.lambda_weight,
        teacher_dir=args.teacher_dir,
    )


def _emit_all(result, out_dir: str) -> None:
    for fmt in REPORT_FORMATS:
        for path in emit_report(result, fmt, out_dir):
            print(f"wrote {path}")


def _cmd_stage_grid(args) -> int:
    result = run_stage_grid(
        pair=(args.student, args.teacher),
        schedule=_schedule(args, EXPERIMENT_SCHEDULE),
        repeats=args.repeats,
        results_dir=args.out,
        settings=_experiment_settings(args),
    )
    _emit_all(result, args.reports)
    if result.failed_cells:
        print(f"failed cells: {result.failed_cells}", file=sys.stderr)
        return 1
    return 0


def _cmd_ablate(args) -> int:
    result = run_ablation(
        pair=(args.student, args.teacher),
        schedule=_schedule(args, EXPERIMENT_SCHEDULE),
        repeats=args.repeats,
        results_dir=args.out,
        settings=_experiment_settings(args),
    )
    _emit_all(result, args.reports)
    if any(row.mean is None for row in result.rows):
        print("failed rows present", file=sys.stderr)
        return 1
    return 0


def _cmd_report(args) -> int:
    result = load_summary(args.results)
    for path in emit_report(result, args.format, args.out):
        print(f"wrote {path}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="reviewkd",
        description="cross-stage feature-distillation trainer and experiments",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("list-archs", help="show available architectures")
    p.add_argument("--classes", type=int, default=100)
    p.set_defaults(fn=_cmd_list_archs)

    p = sub.add_parser("train", help="train one student (plain or distilled)")
    p.add_argument("--arch", default="tiny-resnet-8", choices=sorted(ARCHITECTURES))
    p.add_argument(
        "--teacher", default=None, choices=sorted(ARCHITECTURES),
        help="teacher architecture (trained from scratch first)",
    )
    p.add_argument(
        "--teacher-checkpoint", default=None, help="checkpoint of a trained teacher"
    )
    p.add_argument("--mechanism", default="mkd_review_residual")
    p.add_argument(
        "--lambda", dest="lambda_weight", type=float, default=1.0,
        help="distillation weight (0 disables distillation terms)",
    )
    p.add_argument(
        "--stage-pair", type=int, nargs=2, default=None,
        metavar=("STUDENT_STAGE", "TEACHER_STAGE"),
    )
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--config", default=None, help="key-value config file")
    p.add_argument("--out", default="results/train")
    _add_data_args(p)
    _add_schedule_args(p)
    p.set_defaults(fn=_cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--split", default="test", choices=("train", "test"))
    _add_data_args(p)
    p.set_defaults(fn=_cmd_eval)

    for name, fn, default_out in (
        ("stage-grid", _cmd_stage_grid, "results/stage-grid"),
        ("ablate", _cmd_ablate, "results/ablation"),
    ):
        p = sub.add_parser(name, help=f"run the {name} experiment")
        p.add_argument("--student", default="tiny-resnet-8", choices=sorted(ARCHITECTURES))
        p.add_argument("--teacher", default="tiny-wrn-40-2", choices=sorted(ARCHITECTURES))
        p.add_argument("--repeats", type=int, default=3)
        p.add_argument("--out", default=default_out)
        p.add_argument("--reports", default="reports")
        p.add_argument(
            "--lambda", dest="lambda_weight", type=float, default=DEFAULT_LAMBDA
        )
        p.add_argument(
            "--teacher-dir", default=None,
            help="shared directory for the teacher checkpoint (reused across experiments)",
        )
        _add_data_args(p)
        _add_schedule_args(p)
        p.set_defaults(fn=fn)

    p = sub.add_parser("report", help="re-emit reports from stored results")
    p.add_argument("--results", required=True, help="experiment results directory")
    p.add_argument("--format", required=True, choices=REPORT_FORMATS)
    p.add_argument("--out", default="reports")
    p.set_defaults(fn=_cmd_report)
    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.fn(args)
    except (ConfigError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
