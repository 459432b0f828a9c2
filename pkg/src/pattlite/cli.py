"""``pattlite`` command-line entry point.

Exit codes: 0 success, 2 configuration error, 3 data or manifest error,
4 training divergence, 5 failed assertion.

Seeding: model initialisation draws from ``Rng(seed).child("init")`` and each
training stage from ``Rng(seed).child("stage/<name>")``, so ``--seed`` pins a
whole run.
"""

from __future__ import annotations

import argparse
import csv
import logging
import os
import re
import sys
from contextlib import contextmanager
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from . import data as data_mod
from .config import RunConfig, load_config
from .data import DataError, Dataset
from .evaluate import EvaluationError, cross_validate, evaluate, export_report, gradcam, write_pgm
from .model import (DEFAULT_TAP, SWEEP_KERNELS, ConfigError, ManifestMismatchError, Model, build_model,
                    load_weights, param_count, read_manifest, save_weights)
from .tensor import Rng, TensorFormatError, read_tensor, write_tensor
from .train import DivergenceError, StageReport, TrainConfig, run_stage, write_reports

EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_DIVERGED, EXIT_ASSERT = 0, 2, 3, 4, 5

log = logging.getLogger("pattlite")


@contextmanager
def thread_limit(n: Optional[int]):
    if n is None:
        env = os.environ.get("PATTLITE_THREADS")
        n = int(env) if env else None
    if n is None:
        yield
        return
    from threadpoolctl import threadpool_limits

    with threadpool_limits(limits=n):
        yield


# -- shared helpers ----------------------------------------------------------

def _run_config(args) -> RunConfig:
    rc = load_config(getattr(args, "config", None))
    overrides = {
        "seed": getattr(args, "seed", None),
        "unfreeze_top_n": getattr(args, "unfreeze", None),
        "num_classes": getattr(args, "num_classes", None),
    }
    if getattr(args, "no_patch", False):
        overrides["use_patch_extraction"] = False
    if getattr(args, "no_attention", False):
        overrides["use_attention_classifier"] = False
    if getattr(args, "batch_size", None) is not None:
        overrides["batch_size"] = args.batch_size
    for k, v in overrides.items():
        if v is not None:
            rc.set(k, v)
    return rc


def _model_for(rc: RunConfig, num_classes: Optional[int] = None, **extra) -> Model:
    if num_classes is not None:
        configured = rc.get("num_classes")
        if configured is not None and configured != num_classes:
            raise ConfigError(f"config num_classes={configured} but the dataset has {num_classes} classes")
        extra.setdefault("num_classes", num_classes)
    cfg = rc.model_config(**extra)
    seed = rc.train_config().seed
    return build_model(cfg, Rng(seed).child("init"))


def _train_and_monitor(root: Path, subject_map=None) -> tuple[Dataset, Optional[Dataset]]:
    splits = data_mod.load_splits(root, subject_map=subject_map)
    if "train" not in splits:
        raise DataError(f"{root} has no train split")
    monitor = splits.get("val") or splits.get("test")
    return splits["train"], monitor


def _echo(msg: str) -> None:
    print(msg, flush=True)


def _stages(model: Model, train_ds, monitor, tcfg: TrainConfig, stage: str, quiet: bool) -> list[StageReport]:
    sink = None if quiet else _echo
    reports = []
    if stage in ("train", "both"):
        reports.append(run_stage(model, train_ds, monitor, tcfg, "train", sink))
    if stage in ("finetune", "both"):
        reports.append(run_stage(model, train_ds, monitor, tcfg, "finetune", sink))
    return reports


def _apply_max_epochs(tcfg: TrainConfig, max_epochs: Optional[int]) -> None:
    if max_epochs is not None:
        if max_epochs < 0:
            raise ConfigError("--max-epochs must be non-negative")
        tcfg.max_epochs_stage1 = max_epochs
        tcfg.max_epochs_stage2 = max_epochs


# -- commands -------------------------------------------------------------------

def cmd_train(args) -> int:
    rc = _run_config(args)
    tcfg = rc.train_config()
    _apply_max_epochs(tcfg, args.max_epochs)
    train_ds, monitor = _train_and_monitor(Path(args.data_dir))
    model = _model_for(rc, train_ds.num_classes)
    if args.weights:
        load_weights(model, args.weights)
    reports = _stages(model, train_ds, monitor, tcfg, args.stage, args.quiet)
    save_weights(model, args.out)
    if args.report:
        write_reports(reports, args.report)
    for r in reports:
        best = "n/a" if r.best_val_acc is None else f"{r.best_val_acc:.4f} (epoch {r.best_epoch})"
        _echo(f"{r.stage}: {len(r.epochs)} epochs, stop={r.stop_reason}, best val_acc {best}")
    return EXIT_OK


def _parse_class(value: str, names: Sequence[str]) -> int:
    if value in names:
        return list(names).index(value)
    try:
        idx = int(value)
    except ValueError:
        raise ConfigError(f"unknown class {value!r}; expected one of {list(names)}") from None
    if not 0 <= idx < len(names):
        raise ConfigError(f"class index {idx} outside [0, {len(names)})")
    return idx


def cmd_eval(args) -> int:
    rc = _run_config(args)
    ds = data_mod.load_directory_dataset(args.data_dir, args.split)
    model = _model_for(rc, ds.num_classes)
    load_weights(model, args.weights)
    subset = None
    if args.subset:
        subset = data_mod.load_subset_list(args.subset, ds)
        if subset.unresolved:
            _echo(f"warning: {len(subset.unresolved)} subset entries not found in the {args.split} split")
    report = evaluate(model, ds, subset)
    heatmaps = {}
    if args.gradcam is not None:
        target = _parse_class(args.gradcam, ds.class_names)
        view = ds.select(subset.members) if subset else ds
        size = model.input_shape[0]
        for i, s in enumerate(view.samples[: args.gradcam_limit]):
            img = data_mod.preprocess_scale(view.image(i, size))
            tag = re.sub(r"[^A-Za-z0-9._-]+", "_", str(Path(s.key).with_suffix("")) if s.key else f"sample_{i}")
            heatmaps[f"gradcam_{ds.class_names[target]}_{tag}"] = gradcam(model, img, target, args.gradcam_tap)
    export_report(report, args.out, heatmaps)
    _echo(f"overall accuracy {report.overall_accuracy:.4f}  mean class accuracy {report.mean_class_accuracy:.4f}"
          f"  ({int(report.confusion.counts.sum())} samples{', subset ' + report.subset if report.subset else ''})")
    for name, acc in zip(report.class_names, report.per_class_accuracy):
        _echo(f"  {name:<16} {'n/a' if acc is None else f'{acc:.4f}'}")
    return EXIT_OK


def cmd_params(args) -> int:
    rc = _run_config(args)
    model = _model_for(rc)
    table = param_count(model)
    _echo(table.format())
    if args.assert_total_range is not None:
        lo, hi = args.assert_total_range
        if not lo <= table.total <= hi:
            _echo(f"assertion failed: total {table.total} outside [{lo}, {hi}]")
            return EXIT_ASSERT
    return EXIT_OK


def _csv_list(text: str, cast=str) -> list:
    return [cast(t.strip()) for t in text.split(",") if t.strip()]


def cmd_sweep(args) -> int:
    rc = _run_config(args)
    tcfg = rc.train_config()
    tcfg.max_epochs_stage1 = args.epochs
    train_ds, monitor = _train_and_monitor(Path(args.data_dir))
    taps = _csv_list(args.tap) if args.tap else [rc.get("backbone_tap", DEFAULT_TAP)]
    kernels = _csv_list(args.kernels, int)
    paddings = ["padded", "unpadded"] if args.padding == "both" else [args.padding]
    rows = []
    for tap in taps:
        for k in kernels:
            for pad in paddings:
                try:
                    base = rc.model_config(num_classes=train_ds.num_classes)
                    cfg = base.with_sweep(tap, k, pad)
                    model = build_model(cfg, Rng(tcfg.seed).child("init"))
                except ConfigError as exc:
                    _echo(f"skip tap={tap} kernel={k} padding={pad}: {exc}")
                    continue
                report = run_stage(model, train_ds, monitor, tcfg, "train", None if args.quiet else _echo)
                best = report.best_val_acc if report.best_val_acc is not None else 0.0
                rows.append((tap, k, pad, best))
                _echo(f"tap={tap} kernel={k} padding={pad}: best accuracy {best:.4f}")
    rows.sort(key=lambda r: -r[3])
    out = open(args.out, "w", newline="", encoding="utf-8") if args.out else sys.stdout
    try:
        w = csv.writer(out, lineterminator="\n")
        w.writerow(["rank", "tap", "kernel", "padding", "best_accuracy"])
        for rank, (tap, k, pad, best) in enumerate(rows, start=1):
            w.writerow([rank, tap, k, pad, repr(best)])
    finally:
        if args.out:
            out.close()
    return EXIT_OK


def cmd_folds(args) -> int:
    rc = _run_config(args)
    tcfg = rc.train_config()
    _apply_max_epochs(tcfg, args.max_epochs)
    root = Path(args.data_dir)
    if args.split == "all":
        ds = data_mod.merge(list(data_mod.load_splits(root, subject_map=args.subject_map).values()))
    else:
        ds = data_mod.load_directory_dataset(root, args.split, args.subject_map)
    folds = data_mod.ckplus_subject_folds(ds, args.k)

    def train_fold(train_ds, test_ds):
        model = _model_for(rc, ds.num_classes)
        _stages(model, train_ds, test_ds, tcfg, args.stage, True)
        return model

    cv = cross_validate(folds, train_fold, _echo)
    _echo(f"mean accuracy {cv.mean_accuracy:.4f} +/- {cv.std_accuracy:.4f} over {len(folds)} folds")
    if args.out:
        with open(args.out, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["fold", "accuracy"])
            for i, acc in enumerate(cv.fold_accuracies, start=1):
                w.writerow([i, repr(acc)])
            w.writerow(["mean", repr(cv.mean_accuracy)])
    return EXIT_OK


def cmd_inspect(args) -> int:
    path = Path(args.path)
    head = path.read_bytes()[:4]
    if head == b"PLW1":
        for name, shape, trainable in read_manifest(path):
            _echo(f"{name}\t{'x'.join(map(str, shape))}\t{'trainable' if trainable else 'frozen'}")
    elif head == b"PLT0":
        t = read_tensor(path)
        _echo(f"shape {list(t.shape)} dtype {t.dtype} min {t.min():.6g} max {t.max():.6g} mean {t.mean():.6g}")
    else:
        raise DataError(f"{path}: neither a PLT tensor nor a PLW weight file")
    return EXIT_OK


def cmd_explain(args) -> int:
    rc = _run_config(args)
    num_classes = rc.get("num_classes") or args.classes
    model = _model_for(rc, num_classes)
    load_weights(model, args.weights)
    size = model.input_shape[0]
    img = data_mod.resize_bilinear(data_mod.decode_image(Path(args.image)), size, size)
    names = [str(i) for i in range(num_classes)]
    target = _parse_class(args.target, names)
    hm = gradcam(model, data_mod.preprocess_scale(img), target, args.tap)
    write_pgm(hm, args.out)
    _echo(f"wrote {args.out}")
    return EXIT_OK


def cmd_tensor(args) -> int:
    if args.action == "import":
        arr = data_mod.decode_image(Path(args.src))
        write_tensor(arr.astype(np.float32), args.dest)
    else:
        from PIL import Image

        arr = read_tensor(args.src)
        if arr.ndim == 3 and arr.shape[2] == 1:
            arr = arr[:, :, 0]
        Image.fromarray(np.clip(np.rint(arr), 0, 255).astype(np.uint8)).save(args.dest)
    return EXIT_OK


# -- parser -----------------------------------------------------------------------

def _common(p: argparse.ArgumentParser, seed: bool = True) -> None:
    p.add_argument("--config", help="key = value config file (flags override it)")
    p.add_argument("--threads", type=int, help="cap worker threads (default: $PATTLITE_THREADS)")
    p.add_argument("--no-patch", action="store_true", help="disable the patch-extraction block")
    p.add_argument("--no-attention", action="store_true", help="use the plain dense classifier")
    if seed:
        p.add_argument("--seed", type=int, help="seed for every random draw")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="pattlite", description="Train, evaluate and inspect PAtt-Lite models.")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="run the train and/or finetune stage")
    _common(p)
    p.add_argument("--data-dir", required=True)
    p.add_argument("--stage", choices=("train", "finetune", "both"), default="both")
    p.add_argument("--unfreeze", type=int, help="records to unfreeze for finetuning")
    p.add_argument("--max-epochs", type=int, help="epoch cap for each stage run")
    p.add_argument("--batch-size", type=int)
    p.add_argument("--weights", help="PLW file to start from")
    p.add_argument("--out", required=True, help="output PLW weight file")
    p.add_argument("--report", help="output CSV of per-epoch telemetry")
    p.add_argument("--quiet", action="store_true")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate weights on a split, optionally a subset and Grad-CAM maps")
    _common(p)
    p.add_argument("--weights", required=True)
    p.add_argument("--data-dir", required=True)
    p.add_argument("--split", default="test")
    p.add_argument("--subset", help="file with one sample identifier per line")
    p.add_argument("--gradcam", metavar="CLASS", help="emit Grad-CAM maps for this class (name or index)")
    p.add_argument("--gradcam-tap", help="record to tap (default: last backbone activation)")
    p.add_argument("--gradcam-limit", type=int, default=8, help="maximum number of maps")
    p.add_argument("--out", required=True, help="output directory")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("params", help="print the per-parameter table and totals")
    _common(p)
    p.add_argument("--num-classes", type=int)
    p.add_argument("--assert-total-range", nargs=2, type=int, metavar=("LO", "HI"))
    p.set_defaults(func=cmd_params)

    p = sub.add_parser("sweep", help="brief training over tap / kernel / padding combinations")
    _common(p)
    p.add_argument("--data-dir", required=True)
    p.add_argument("--tap", help="comma-separated backbone records, e.g. conv_dw_7_relu,conv_dw_9_relu")
    p.add_argument("--kernels", default=",".join(map(str, SWEEP_KERNELS)))
    p.add_argument("--padding", choices=("padded", "unpadded", "both"), default="both")
    p.add_argument("--epochs", type=int, default=5)
    p.add_argument("--out", help="output CSV (default: stdout)")
    p.add_argument("--quiet", action="store_true")
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("folds", help="subject-independent k-fold cross-validation")
    _common(p)
    p.add_argument("--data-dir", required=True)
    p.add_argument("--k", type=int, default=10)
    p.add_argument("--split", default="all", help="split to fold, or 'all' to pool every split")
    p.add_argument("--subject-map", help="filename<TAB>subject_id sidecar")
    p.add_argument("--stage", choices=("train", "finetune", "both"), default="both")
    p.add_argument("--unfreeze", type=int)
    p.add_argument("--max-epochs", type=int)
    p.add_argument("--out", help="output CSV of fold accuracies")
    p.set_defaults(func=cmd_folds)

    p = sub.add_parser("inspect", help="describe a PLT tensor or PLW weight file")
    p.add_argument("path")
    p.add_argument("--threads", type=int)
    p.set_defaults(func=cmd_inspect)

    p = sub.add_parser("explain", help="Grad-CAM map for a single image")
    _common(p)
    p.add_argument("--weights", required=True)
    p.add_argument("--image", required=True)
    p.add_argument("--classes", type=int, default=7, help="class count when the config does not say")
    p.add_argument("--target", required=True, help="class index")
    p.add_argument("--tap")
    p.add_argument("--out", required=True, help="output PGM path")
    p.set_defaults(func=cmd_explain)

    p = sub.add_parser("tensor", help="convert between images and PLT tensors")
    p.add_argument("action", choices=("import", "export"))
    p.add_argument("src")
    p.add_argument("dest")
    p.add_argument("--threads", type=int)
    p.set_defaults(func=cmd_tensor)
    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        with thread_limit(getattr(args, "threads", None)):
            return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (DataError, ManifestMismatchError, TensorFormatError, EvaluationError, FileNotFoundError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except DivergenceError as exc:
        print(f"diverged: {exc}", file=sys.stderr)
        return EXIT_DIVERGED


if __name__ == "__main__":
    sys.exit(main())
