"""Accuracy metrics, confusion matrices, cross-validation and Grad-CAM."""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Optional, Sequence, Union

import numpy as np

from .data import Dataset, SubsetList, batches, resize_bilinear
from .model import Model
from .tensor import Tensor


class EvaluationError(ValueError):
    pass


@dataclass
class ConfusionMatrix:
    counts: np.ndarray  # rows: ground truth, columns: prediction

    @classmethod
    def from_predictions(cls, labels: Sequence[int], preds: Sequence[int], num_classes: int) -> "ConfusionMatrix":
        counts = np.zeros((num_classes, num_classes), dtype=np.int64)
        np.add.at(counts, (np.asarray(labels, dtype=np.int64), np.asarray(preds, dtype=np.int64)), 1)
        return cls(counts)


@dataclass
class EvalReport:
    class_names: list[str]
    confusion: ConfusionMatrix
    subset: Optional[str] = None

    @property
    def class_counts(self) -> np.ndarray:
        return self.confusion.counts.sum(axis=1)

    @property
    def overall_accuracy(self) -> float:
        c = self.confusion.counts
        total = int(c.sum())
        return float(np.trace(c)) / total if total else 0.0

    @property
    def per_class_accuracy(self) -> list[Optional[float]]:
        c = self.confusion.counts
        out = []
        for i in range(len(c)):
            n = int(c[i].sum())
            out.append(float(c[i, i]) / n if n else None)
        return out

    @property
    def mean_class_accuracy(self) -> float:
        present = [a for a in self.per_class_accuracy if a is not None]
        return sum(present) / len(present) if present else 0.0


def argmax_lowest(probs: Tensor) -> np.ndarray:
    # np.argmax already returns the first maximal index
    return np.argmax(probs, axis=-1)


def report_from_predictions(labels, preds, class_names: Sequence[str], subset: Optional[str] = None) -> EvalReport:
    return EvalReport(list(class_names), ConfusionMatrix.from_predictions(labels, preds, len(class_names)), subset)


def predict(model: Model, ds: Dataset, batch_size: int = 8) -> np.ndarray:
    size = model.input_shape[0]
    preds = [argmax_lowest(model.forward(x, "infer"))
             for x, _ in batches(ds, batch_size, augment_train=False, shuffle=False, size=size)]
    return np.concatenate(preds)


def evaluate(model: Model, ds: Dataset, subset: Optional[SubsetList] = None, batch_size: int = 8) -> EvalReport:
    """Augmentation-free evaluation; ties go to the lowest class index."""
    if subset is not None:
        if not subset.members:
            raise EvaluationError(f"subset {subset.name!r} resolved to no samples")
        ds = ds.select(subset.members, ds.split)
    if len(ds) == 0:
        raise EvaluationError("evaluation set is empty")
    preds = predict(model, ds, batch_size)
    return report_from_predictions(ds.labels, preds, ds.class_names, subset.name if subset else None)


# -- cross-validation ---------------------------------------------------------

@dataclass
class CrossValidationReport:
    fold_accuracies: list[float]

    @property
    def mean_accuracy(self) -> float:
        return float(sum(self.fold_accuracies) / len(self.fold_accuracies))

    @property
    def std_accuracy(self) -> float:
        return float(np.std(self.fold_accuracies))


def cross_validate(folds: Sequence[tuple[Dataset, Dataset]], train_fold: Callable[[Dataset, Dataset], Model],
                   log: Optional[Callable[[str], None]] = None) -> CrossValidationReport:
    """Train one model per fold with ``train_fold(train, test)`` and score it on ``test``.

    ``train_fold`` is responsible for building every fold's model from the
    same seed so folds start from identical initial weights.
    """
    if len(folds) < 2:
        raise ValueError("cross-validation needs at least two folds")
    accs = []
    for i, (train_ds, test_ds) in enumerate(folds, start=1):
        model = train_fold(train_ds, test_ds)
        acc = evaluate(model, test_ds).overall_accuracy
        accs.append(acc)
        if log is not None:
            log(f"fold {i:2d}: accuracy {acc:.4f} ({len(test_ds)} test samples)")
    return CrossValidationReport(accs)


# -- Grad-CAM ---------------------------------------------------------------

def gradcam(model: Model, image: Tensor, target_class: int, tap_layer: Optional[str] = None,
            out_size: int = 224) -> Tensor:
    """Grad-CAM heatmap in ``[0, 1]`` for one preprocessed ``(H, W, C)`` image.

    Channel weights are the spatial mean of d(target logit)/d(activation) at
    ``tap_layer``; the ReLU of the weighted channel sum is bilinearly resized
    to ``out_size`` and min-max normalised.  An all-zero map stays zero.
    """
    tap_layer = tap_layer or model.records[model.num_backbone - 1].name
    try:
        tap_index = model.record_index(tap_layer)
    except KeyError:
        raise EvaluationError(f"unknown tap layer {tap_layer!r}") from None
    if tap_layer != "input" and len(model.shapes[tap_layer]) != 3:
        raise EvaluationError(f"tap layer {tap_layer!r} is not a 4-D activation")
    if tap_index >= len(model.records) - 1:
        raise EvaluationError("tap layer must precede the logits")
    x = image[None].astype(model.dtype, copy=False)
    logits = model.forward_cached(x, tap_index + 1)
    acts = model._cache[tap_index + 1]
    if not 0 <= target_class < logits.shape[1]:
        raise EvaluationError(f"target class {target_class} outside {logits.shape[1]} classes")
    dlogits = np.zeros_like(logits)
    dlogits[0, target_class] = 1.0
    _, grad = model.backward_from_logits(dlogits, tap=tap_layer)
    model.clear_cache()
    weights = grad[0].mean(axis=(0, 1))
    cam = np.maximum((acts[0] * weights).sum(axis=-1), 0.0).astype(np.float64)
    cam = resize_bilinear(cam[:, :, None], out_size, out_size)[:, :, 0]
    lo, hi = float(cam.min()), float(cam.max())
    if hi > lo:
        cam = (cam - lo) / (hi - lo)
    elif hi > 0:
        cam = np.ones_like(cam)
    else:
        cam = np.zeros_like(cam)
    return cam


# -- export -----------------------------------------------------------------

def write_pgm(heatmap: Tensor, path: Union[str, Path]) -> None:
    """8-bit binary PGM (P5) of a ``[0, 1]`` map."""
    h, w = heatmap.shape
    pix = np.clip(np.rint(heatmap * 255.0), 0, 255).astype(np.uint8)
    Path(path).write_bytes(f"P5\n{w} {h}\n255\n".encode("ascii") + pix.tobytes())


def read_pgm(path: Union[str, Path]) -> np.ndarray:
    data = Path(path).read_bytes()
    parts = data.split(b"\n", 3)
    if parts[0] != b"P5":
        raise ValueError(f"{path}: not a binary PGM")
    w, h = map(int, parts[1].split())
    return np.frombuffer(parts[3], dtype=np.uint8).reshape(h, w)


def export_report(report: EvalReport, out_dir: Union[str, Path], heatmaps: Optional[dict[str, Tensor]] = None,
                  prefix: str = "") -> list[Path]:
    """Write ``metrics.csv``, ``confusion.csv`` and optional ``<name>.pgm`` heatmaps."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    written = []
    metrics = out / f"{prefix}metrics.csv"
    with metrics.open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["row", "class", "count", "correct", "accuracy"])
        counts = report.confusion.counts
        for i, name in enumerate(report.class_names):
            acc = report.per_class_accuracy[i]
            w.writerow(["class", name, int(counts[i].sum()), int(counts[i, i]), "" if acc is None else repr(acc)])
        w.writerow(["overall", report.subset or "", int(counts.sum()), int(np.trace(counts)), repr(report.overall_accuracy)])
        w.writerow(["mean_class", report.subset or "", int(counts.sum()), int(np.trace(counts)), repr(report.mean_class_accuracy)])
    written.append(metrics)
    conf = out / f"{prefix}confusion.csv"
    with conf.open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["true\\pred"] + report.class_names)
        for i, name in enumerate(report.class_names):
            w.writerow([name] + [int(v) for v in report.confusion.counts[i]])
    written.append(conf)
    for name, hm in (heatmaps or {}).items():
        p = out / f"{name}.pgm"
        write_pgm(hm, p)
        written.append(p)
    return written


def read_report(out_dir: Union[str, Path], prefix: str = "") -> EvalReport:
    """Rebuild an :class:`EvalReport` from the CSVs written by :func:`export_report`."""
    out = Path(out_dir)
    with (out / f"{prefix}confusion.csv").open(encoding="utf-8") as fh:
        rows = list(csv.reader(fh))
    names = rows[0][1:]
    counts = np.array([[int(v) for v in r[1:]] for r in rows[1:]], dtype=np.int64)
    subset = None
    with (out / f"{prefix}metrics.csv").open(encoding="utf-8") as fh:
        for r in csv.DictReader(fh):
            if r["row"] == "overall":
                subset = r["class"] or None
    return EvalReport(names, ConfusionMatrix(counts), subset)


def read_metrics(out_dir: Union[str, Path], prefix: str = "") -> dict:
    """Parsed metrics rows: per-class accuracies plus overall and mean-class values."""
    per_class = {}
    summary = {}
    with (Path(out_dir) / f"{prefix}metrics.csv").open(encoding="utf-8") as fh:
        for r in csv.DictReader(fh):
            if r["row"] == "class":
                per_class[r["class"]] = float(r["accuracy"]) if r["accuracy"] else None
            else:
                summary[r["row"]] = float(r["accuracy"])
    return {"per_class": per_class, **summary}
