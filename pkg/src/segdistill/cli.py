"""Command-line interface.

Subcommands: ``gen-data``, ``train``, ``distill``, ``eval``, ``report``.
Exit codes: 0 success, 2 usage or configuration error, 3 training diverged,
4 data or file format error.  ``SEGDISTILL_THREADS`` caps BLAS and compiled-
kernel parallelism; ``SEGDISTILL_BACKEND`` pins the kernel implementation.
"""

from __future__ import annotations

import argparse
import os
import sys

_USAGE_EXIT = 2
_DIVERGED_EXIT = 3
_DATA_EXIT = 4


def _bound_threads():
    threads = os.environ.get("SEGDISTILL_THREADS", "").strip()
    if threads:
        for var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS",
                    "MKL_NUM_THREADS"):
            os.environ.setdefault(var, threads)


def _parser():
    parser = argparse.ArgumentParser(
        prog="segdistill",
        description="Train, ensemble, and distill compact segmentation "
                    "networks on synthetic street scenes.")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="generate a synthetic dataset")
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--num-dense", type=int, default=200)
    p.add_argument("--num-sparse", type=int, default=200)
    p.add_argument("--num-unlabeled", type=int, default=120)
    p.add_argument("--width", type=int, default=64)
    p.add_argument("--height", type=int, default=64)
    p.add_argument("--classes", type=int, default=8, choices=(8, 11))
    p.add_argument("--dense-objects", default="0:3", metavar="LO:HI")
    p.add_argument("--sparse-objects", default="1:6", metavar="LO:HI")

    p = sub.add_parser("train", help="train a model on a dataset")
    p.add_argument("--config")
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--strategy")
    p.add_argument("--seed", type=int)
    p.add_argument("--eval-data", help="labeled dataset for epoch metrics")
    p.add_argument("--base-dense", help="dense expert checkpoint "
                                        "(ensemble_fusion)")
    p.add_argument("--base-sparse", help="sparse expert checkpoint "
                                         "(ensemble_fusion)")
    p.add_argument("--set", action="append", default=[], metavar="SEC.KEY=VAL",
                   dest="overrides")

    p = sub.add_parser("distill", help="distill a teacher into a student")
    p.add_argument("--config")
    p.add_argument("--data", required=True, help="transfer dataset directory")
    p.add_argument("--out", required=True)
    p.add_argument("--teacher", required=True, action="append",
                   help="teacher checkpoint; give twice (dense, sparse) to "
                        "assemble an ensemble")
    p.add_argument("--method")
    p.add_argument("--seed", type=int)
    p.add_argument("--report-data", help="labeled dataset for the transfer "
                                         "report")
    p.add_argument("--set", action="append", default=[], metavar="SEC.KEY=VAL",
                   dest="overrides")

    p = sub.add_parser("eval", help="evaluate a checkpoint on a dataset")
    p.add_argument("--model", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True, help="report CSV path")
    p.add_argument("--name", default=None, help="row label in the report")

    p = sub.add_parser("report", help="merge run directories into one table")
    p.add_argument("runs", nargs="+", help="run output directories")
    p.add_argument("--out", required=True)
    p.add_argument("--baseline", help="run name used for deltas "
                                      "(default: first run)")
    return parser


def main(argv=None) -> int:
    _bound_threads()
    from .errors import (ConfigError, DataError, FormatError, ParameterError,
                         SegdistillError, UsageError)
    parser = _parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return _USAGE_EXIT if exc.code not in (0, None) else 0
    try:
        handler = {
            "gen-data": _cmd_gen_data,
            "train": _cmd_train,
            "distill": _cmd_distill,
            "eval": _cmd_eval,
            "report": _cmd_report,
        }[args.command]
        return handler(args)
    except (UsageError, ConfigError, ParameterError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return _USAGE_EXIT
    except (DataError, FormatError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return _DATA_EXIT
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return _DATA_EXIT
    except SegdistillError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return _USAGE_EXIT


def _cmd_gen_data(args) -> int:
    from .config import _range_pair
    from .dataset import generate_dataset
    from .errors import UsageError
    if args.width % 16 or args.height % 16:
        raise UsageError(f"--width/--height must be divisible by 16, "
                         f"got {args.width}x{args.height}")
    if min(args.num_dense, args.num_sparse, args.num_unlabeled) < 0:
        raise UsageError("sample counts must be non-negative")
    samples = generate_dataset(args.out, args.seed, args.num_dense,
                               args.num_sparse, args.num_unlabeled,
                               args.width, args.height,
                               num_classes=args.classes,
                               dense_objects=_range_pair(args.dense_objects),
                               sparse_objects=_range_pair(args.sparse_objects))
    print(f"wrote {len(samples)} samples to {args.out}")
    return 0


def _split_domains(samples):
    groups = {"dense": [], "sparse": [], "unlabeled": []}
    for s in samples:
        groups[s.domain].append(s)
    return groups


def _model_from_config(cfg, num_classes, palette):
    from .models import ModelConfig, build_model
    from .rng import RngState
    section = cfg["model"]
    class_space = section["class_space"]
    if class_space == "objects":
        object_ids = palette.objects
        num_classes = len(object_ids) + 1
    else:
        object_ids = ()
    model_config = ModelConfig(
        kind=section["kind"], num_blocks=section["num_blocks"],
        feature_maps=section["feature_maps"], kernel=section["kernel"],
        num_classes=num_classes, dropout_p=section["dropout_p"],
        class_space=class_space, object_class_ids=tuple(object_ids))
    return build_model(model_config, RngState(section["seed"]))


def _cmd_train(args) -> int:
    import numpy as np

    from . import checkpoint
    from .config import load_config, write_config
    from .dataset import read_dataset
    from .errors import UsageError
    from .models import build_ensemble
    from .rng import RngState
    from .scenes import get_palette
    from .training import TrainConfig, TrainData, train

    overrides = list(args.overrides)
    if args.strategy:
        overrides.append(f"train.strategy={args.strategy}")
    if args.seed is not None:
        overrides.append(f"train.seed={args.seed}")
    cfg = load_config(args.config, overrides)

    samples = read_dataset(args.data)
    groups = _split_domains(samples)
    palette = get_palette(cfg["data"]["classes"])
    section = cfg["train"]
    train_config = TrainConfig(
        strategy=section["strategy"], epochs=section["epochs"],
        steps_per_epoch=section["steps_per_epoch"],
        batch_dense=section["batch_dense"],
        batch_sparse=section["batch_sparse"], lam=section["lambda"],
        optimizer=section["optimizer"], lr=section["lr"],
        seed=section["seed"], eval_every=section["eval_every"],
        restart_every=section["restart_every"])

    if train_config.strategy == "ensemble_fusion":
        if not args.base_dense or not args.base_sparse:
            raise UsageError("ensemble_fusion needs --base-dense and "
                             "--base-sparse checkpoints")
        dense_model = checkpoint.load_model(args.base_dense)
        sparse_model = checkpoint.load_model(args.base_sparse)
        model = build_ensemble(dense_model, sparse_model,
                               fusion_maps=cfg["model"]["fusion_maps"],
                               rng=RngState(cfg["model"]["seed"]))
    else:
        model = _model_from_config(cfg, palette.num_classes, palette)

    eval_samples = None
    if args.eval_data:
        eval_samples = [s for s in read_dataset(args.eval_data)
                        if s.labels is not None]
    data = TrainData(dense=groups["dense"], sparse=groups["sparse"],
                     eval_samples=eval_samples, palette=palette)

    os.makedirs(args.out, exist_ok=True)
    result = train(model, data, train_config)
    checkpoint.save_model(os.path.join(args.out, "model.sdnc"), result.model)
    result.log.write_csv(os.path.join(args.out, "train_log.csv"))
    result.log.write_status(os.path.join(args.out, "status.txt"))
    write_config(os.path.join(args.out, "config.ini"), cfg)
    with open(os.path.join(args.out, "summary.txt"), "w",
              encoding="utf-8") as fh:
        fh.write(result.model.summary() + "\n")
    print(f"status: {result.status}")
    losses = result.log.step_losses()
    if losses.size and np.isfinite(losses).any():
        print(f"final loss: {losses[np.isfinite(losses)][-1]:.6f}")
    return 0 if result.status == "completed" else _DIVERGED_EXIT


def _cmd_distill(args) -> int:
    from . import checkpoint
    from .config import load_config, write_config
    from .dataset import read_dataset
    from .distill import (TeacherCache, TransferConfig, TransferData, distill,
                          transfer_report)
    from .errors import UsageError
    from .models import build_ensemble
    from .rng import RngState
    from .scenes import get_palette
    from .dataset import prepare

    overrides = list(args.overrides)
    if args.method:
        overrides.append(f"distill.method={args.method}")
    if args.seed is not None:
        overrides.append(f"distill.seed={args.seed}")
    cfg = load_config(args.config, overrides)

    teachers = [checkpoint.load_model(path) for path in args.teacher]
    if len(teachers) == 1:
        teacher = teachers[0]
    elif len(teachers) == 2:
        teacher = build_ensemble(teachers[0], teachers[1],
                                 fusion_maps=cfg["model"]["fusion_maps"],
                                 rng=RngState(cfg["model"]["seed"]))
    else:
        raise UsageError("--teacher accepts one checkpoint, or two to "
                         "assemble an ensemble")

    samples = read_dataset(args.data)
    groups = _split_domains(samples)
    labeled = groups["dense"] + groups["sparse"]
    if not labeled:
        raise UsageError("transfer dataset has no dense or sparse samples")

    os.makedirs(args.out, exist_ok=True)
    cache_dir = os.path.join(args.out, "cache")
    transfer = prepare(labeled + groups["unlabeled"])
    key = TeacherCache.cache_key(teacher, transfer.ids)
    cache = None
    if os.path.isdir(cache_dir):
        try:
            existing = TeacherCache(cache_dir)
            if existing.key == key:
                cache = existing
        except Exception:
            cache = None
    if cache is None:
        cache = TeacherCache.build(cache_dir, teacher, transfer,
                                   batch_size=cfg["eval"]["batch_size"])

    palette = get_palette(cfg["data"]["classes"])
    student = _model_from_config(cfg, teacher.config.num_classes, palette)
    section = cfg["distill"]
    transfer_config = TransferConfig(
        method=section["method"], epochs=section["epochs"],
        steps_per_epoch=section["steps_per_epoch"],
        batch_labeled=section["batch_labeled"],
        batch_unlabeled=section["batch_unlabeled"],
        lam_unlabeled=section["lambda_unlabeled"],
        dropout_p=section["dropout_p"], optimizer=section["optimizer"],
        lr=section["lr"], seed=section["seed"],
        eval_every=section["eval_every"])

    report_samples = None
    if args.report_data:
        report_samples = [s for s in read_dataset(args.report_data)
                          if s.labels is not None]
    data = TransferData(labeled=labeled, unlabeled=groups["unlabeled"],
                        eval_samples=report_samples)

    result = distill(student, cache, data, transfer_config)
    checkpoint.save_model(os.path.join(args.out, "student.sdnc"), result.model)
    result.log.write_csv(os.path.join(args.out, "train_log.csv"))
    result.log.write_status(os.path.join(args.out, "status.txt"))
    write_config(os.path.join(args.out, "config.ini"), cfg)
    if report_samples:
        report = transfer_report(os.path.join(args.out, "transfer_report.csv"),
                                 result.model, teacher, report_samples,
                                 palette.names)
        print(f"teacher per-class {report['teacher']['per_class']:.2f} "
              f"global {report['teacher']['global']:.2f}")
        print(f"student per-class {report['student']['per_class']:.2f} "
              f"global {report['student']['global']:.2f} "
              f"agreement {report['agreement']:.2f}")
    print(f"status: {result.status}")
    return 0 if result.status == "completed" else _DIVERGED_EXIT


def _cmd_eval(args) -> int:
    from . import checkpoint
    from .dataset import prepare, read_dataset
    from .errors import DataError
    from .metrics import write_eval_report
    from .scenes import get_palette
    from .training import evaluate

    model = checkpoint.load_model(args.model)
    samples = [s for s in read_dataset(args.data) if s.labels is not None]
    if not samples:
        raise DataError(f"{args.data}: no labeled samples to evaluate")
    test = prepare(samples)

    if getattr(model.config, "class_space", "full") == "objects":
        num_classes = len(model.config.object_class_ids) + 1
        palette = None
        for size, pal in ((8, get_palette(8)), (11, get_palette(11))):
            if set(model.config.object_class_ids) <= set(pal.objects):
                palette = pal
                break
        names = ["other"] + [palette.names[i]
                             for i in model.config.object_class_ids]
    else:
        num_classes = model.config.num_classes
        palette = get_palette(num_classes)
        names = list(palette.names)
        top = int(test.labels[test.labels != 255].max()) + 1 \
            if (test.labels != 255).any() else 0
        if top > num_classes:
            raise DataError(f"{args.data}: labels use {top} classes, model "
                            f"has {num_classes}")

    cm = evaluate(model, test)
    write_eval_report(args.out, names, [(args.name or args.model, cm)])
    print(f"per_class {cm.per_class_accuracy():.2f} "
          f"global {cm.global_accuracy():.2f}")
    return 0


def _cmd_report(args) -> int:
    import csv

    from .errors import DataError

    rows = []
    for run_dir in args.runs:
        name = os.path.basename(os.path.normpath(run_dir))
        status_path = os.path.join(run_dir, "status.txt")
        log_path = os.path.join(run_dir, "train_log.csv")
        if not os.path.exists(status_path) or not os.path.exists(log_path):
            raise DataError(f"{run_dir}: not a run directory (missing "
                            f"status.txt or train_log.csv)")
        with open(status_path, encoding="utf-8") as fh:
            status = fh.read().strip()
        per_class = global_acc = None
        with open(log_path, newline="", encoding="utf-8") as fh:
            for record in csv.DictReader(fh):
                if record.get("per_class"):
                    per_class = float(record["per_class"])
                    global_acc = float(record["global"])
        rows.append((name, status, per_class, global_acc))
    rows.sort(key=lambda r: r[0])

    baseline_name = args.baseline or rows[0][0]
    baseline = next((r for r in rows if r[0] == baseline_name), None)
    if baseline is None:
        raise DataError(f"baseline run {baseline_name!r} not among the runs")
    base_pc = baseline[2]

    with open(args.out, "w", newline="", encoding="utf-8") as fh:
        out = csv.writer(fh)
        out.writerow(["run", "status", "per_class", "global",
                      "delta_per_class_vs_baseline"])
        for name, status, per_class, global_acc in rows:
            if status == "diverged":
                out.writerow([name, status, "training diverged",
                              "training diverged", ""])
            else:
                delta = ("" if base_pc is None or per_class is None
                         else f"{per_class - base_pc:+.2f}")
                out.writerow([name, status,
                              "" if per_class is None else f"{per_class:.2f}",
                              "" if global_acc is None else f"{global_acc:.2f}",
                              delta])
    print(f"wrote {args.out}")
    return 0


if __name__ == "__main__":
    sys.exit(main())
