"""Accuracy metrics, generalization-gap diagnostics and crop audits.

Evaluation always uses running BN statistics and the deterministic center
crop, one crop per image.
"""
import csv
import io
import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .data import extract_crop, sample_crop, to_batch
from .exceptions import InvalidInputError
from .nn import softmax


def predict_logits(model, dataset):
    return model.predict_logits(dataset.center_crops(model.arch.input_size))


def topk_hits(logits, labels, k):
    """Boolean hit per sample; equal logits rank the lower class index first."""
    logits = np.asarray(logits)
    num_classes = logits.shape[-1]
    if not 1 <= k <= num_classes:
        raise InvalidInputError(f"k={k} must lie in [1, {num_classes}]")
    order = np.argsort(-logits, axis=-1, kind="stable")[:, :k]
    return (order == np.asarray(labels)[:, None]).any(axis=1)


def topk_from_logits(logits, labels, k):
    hits = topk_hits(logits, labels, k)
    return 100.0 * float(hits.mean()) if len(hits) else float("nan")


def topk_accuracy(model, dataset, k, purpose="evaluation"):
    """Percentage of ``dataset`` whose label is among the model's ``k`` best classes."""
    if k > model.arch.num_classes:
        raise InvalidInputError(f"k={k} exceeds the number of classes {model.arch.num_classes}")
    return topk_from_logits(predict_logits(model, dataset), dataset.read_labels(purpose=purpose), k)


def per_category_from_logits(logits, labels, num_classes):
    """Top-1 percentage per true category; NaN marks categories with no samples."""
    labels = np.asarray(labels)
    correct = topk_hits(logits, labels, 1)
    totals = np.bincount(labels, minlength=num_classes)
    hits = np.bincount(labels, weights=correct, minlength=num_classes)
    out = np.full(num_classes, np.nan)
    seen = totals > 0
    out[seen] = 100.0 * hits[seen] / totals[seen]
    return out


def per_category_accuracy(model, dataset, purpose="evaluation"):
    return per_category_from_logits(
        predict_logits(model, dataset), dataset.read_labels(purpose=purpose), model.arch.num_classes
    )


def evaluate_split(model, dataset, ks=(1, 5), purpose="evaluation"):
    """Top-k percentages and per-category top-1 from a single forward pass."""
    logits = predict_logits(model, dataset)
    labels = dataset.read_labels(purpose=purpose)
    k_max = model.arch.num_classes
    out = {f"top{k}": topk_from_logits(logits, labels, min(k, k_max)) for k in ks}
    out["per_category"] = per_category_from_logits(logits, labels, k_max)
    return out


# --------------------------------------------------------------------------
# Generalization gap
# --------------------------------------------------------------------------


@dataclass
class GapBin:
    mean_train: float
    mean_val: float
    std_val: float
    categories: list


@dataclass
class GapReport:
    bins: list

    def rows(self):
        return [(i, b.mean_train, b.mean_val, b.std_val) for i, b in enumerate(self.bins)]


def gap_report(train_acc, val_acc, num_bins=20):
    """Sort categories by train accuracy and summarize validation accuracy per bin.

    Bins are contiguous in sorted order and differ in size by at most one.
    """
    train_acc = np.asarray(train_acc, np.float64)
    val_acc = np.asarray(val_acc, np.float64)
    if train_acc.shape != val_acc.shape or train_acc.ndim != 1:
        raise InvalidInputError("train and val accuracy vectors must be 1-D and equally long")
    k = len(train_acc)
    if not 1 <= num_bins <= k:
        raise InvalidInputError(f"num_bins={num_bins} must lie in [1, {k}]")
    if not (np.all(np.isfinite(train_acc)) and np.all(np.isfinite(val_acc))):
        raise InvalidInputError("accuracy vectors contain missing categories")
    order = np.argsort(train_acc, kind="stable")
    bins = []
    for members in np.array_split(order, num_bins):
        bins.append(GapBin(
            float(train_acc[members].mean()),
            float(val_acc[members].mean()),
            float(val_acc[members].std()),
            [int(c) for c in members],
        ))
    return GapReport(bins)


# --------------------------------------------------------------------------
# Crop audits
# --------------------------------------------------------------------------


def audit_crops(model, image, crops=5, k=3, class_names=None, rng=None):
    """Top-``k`` (class name, probability) per crop of a single ``H x W x C`` image.

    ``crops`` is either a list of :class:`~label_refinery.data.CropSpec` or a
    number of random crops to draw from ``rng``.  Returns ``(specs, rows)``.
    """
    image = np.asarray(image, np.float32)
    h, w = image.shape[:2]
    if isinstance(crops, int):
        rng = np.random.default_rng(0) if rng is None else rng
        specs = [sample_crop(rng, w, h) for _ in range(crops)]
    else:
        specs = list(crops)
    if not specs:
        return [], []
    size = model.arch.input_size
    batch = to_batch([extract_crop(image, s, size) for s in specs])
    probs = softmax(model.predict_logits(batch).astype(np.float64))
    k = min(k, probs.shape[1])
    names = class_names or [str(i) for i in range(probs.shape[1])]
    rows = []
    for p in probs:
        top = np.argsort(-p, kind="stable")[:k]
        rows.append([(names[c], float(p[c])) for c in top])
    return specs, rows


# --------------------------------------------------------------------------
# Metrics records
# --------------------------------------------------------------------------


@dataclass
class MetricsRecord:
    """Per-epoch training curves for one stage."""

    stage: str
    epochs: list = field(default_factory=list)
    train_per_category: np.ndarray = None
    val_per_category: np.ndarray = None
    wall_clock: float = 0.0

    def log(self, epoch, **values):
        entry = next((e for e in self.epochs if e["epoch"] == epoch), None)
        if entry is None:
            entry = {"epoch": epoch}
            self.epochs.append(entry)
        entry.update(values)

    def last(self, metric):
        for entry in reversed(self.epochs):
            if metric in entry:
                return entry[metric]
        return None

    def summary(self):
        out = {m: self.last(m) for m in ("train_loss", "train_top1", "val_top1", "val_top5")}
        if out["train_top1"] is not None and out["val_top1"] is not None:
            out["gap"] = out["train_top1"] - out["val_top1"]
        out["wall_clock"] = self.wall_clock
        return out

    def to_records(self):
        recs = []
        for entry in self.epochs:
            for key, value in entry.items():
                if key == "epoch":
                    continue
                split, _, metric = key.partition("_")
                recs.append({"stage": self.stage, "epoch": entry["epoch"], "split": split,
                             "metric": metric, "value": value})
        last_epoch = self.epochs[-1]["epoch"] if self.epochs else -1
        for split, arr in (("train", self.train_per_category), ("val", self.val_per_category)):
            if arr is not None:
                recs.append({"stage": self.stage, "epoch": last_epoch, "split": split,
                             "metric": "per_category_top1",
                             "value": [None if math.isnan(v) else float(v) for v in arr]})
        recs.append({"stage": self.stage, "epoch": last_epoch, "split": "summary",
                     "metric": "final", "value": self.summary()})
        return recs

    @classmethod
    def from_records(cls, records):
        records = list(records)
        if not records:
            raise InvalidInputError("no metric records")
        rec = cls(records[0]["stage"])
        for r in records:
            if r["split"] == "summary":
                rec.wall_clock = r["value"].get("wall_clock", 0.0)
            elif r["metric"] == "per_category_top1":
                arr = np.array([np.nan if v is None else v for v in r["value"]], np.float64)
                setattr(rec, f"{r['split']}_per_category", arr)
            else:
                rec.log(r["epoch"], **{f"{r['split']}_{r['metric']}": r["value"]})
        return rec


def write_metrics(record, path):
    text = "".join(json.dumps(r, sort_keys=True) + "\n" for r in record.to_records())
    Path(path).write_text(text, encoding="utf-8")


def read_metrics(path):
    lines = Path(path).read_text(encoding="utf-8").splitlines()
    return MetricsRecord.from_records(json.loads(line) for line in lines if line.strip())


# --------------------------------------------------------------------------
# CSV and SVG output
# --------------------------------------------------------------------------


def _csv_text(header, rows):
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(header)
    writer.writerows(rows)
    return buf.getvalue()


def per_category_csv(train_acc, val_acc, class_names):
    rows = [(i, class_names[i], _fmt(train_acc[i]), _fmt(val_acc[i])) for i in range(len(class_names))]
    return _csv_text(("class_index", "class_name", "train_acc", "val_acc"), rows)


def gap_csv(report):
    return _csv_text(("bin", "mean_train", "mean_val", "std_val"),
                     [(i, _fmt(a), _fmt(b), _fmt(c)) for i, a, b, c in report.rows()])


def curves_csv(record):
    cols = ("epoch", "train_loss", "train_top1", "val_top1", "val_top5")
    return _csv_text(cols, [[_fmt(e.get(c)) if c != "epoch" else e["epoch"] for c in cols] for e in record.epochs])


def _fmt(v):
    if v is None or (isinstance(v, float) and math.isnan(v)):
        return ""
    return repr(float(v))


def _svg_figure():
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    plt.rcParams["svg.hashsalt"] = "label-refinery"
    fig, ax = plt.subplots(figsize=(5, 3.5))
    return plt, fig, ax


def _save_svg(plt, fig, path):
    fig.tight_layout()
    fig.savefig(path, format="svg", metadata={"Date": None, "Creator": None})
    plt.close(fig)


def plot_curves(record, path):
    """Train and validation top-1 per epoch as a static SVG."""
    plt, fig, ax = _svg_figure()
    for key, label in (("train_top1", "train"), ("val_top1", "val")):
        pts = [(e["epoch"], e[key]) for e in record.epochs if e.get(key) is not None]
        if pts:
            ax.plot(*zip(*pts), marker="o", label=label)
    ax.set_xlabel("epoch")
    ax.set_ylabel("top-1 (%)")
    ax.set_title(record.stage)
    ax.legend()
    _save_svg(plt, fig, path)


def plot_gap(reports, path):
    """Per-bin validation accuracy against train accuracy, one series per stage."""
    plt, fig, ax = _svg_figure()
    for name, report in reports.items():
        x = [b.mean_train for b in report.bins]
        y = [b.mean_val for b in report.bins]
        e = [b.std_val for b in report.bins]
        ax.errorbar(x, y, yerr=e, marker="o", capsize=2, label=name)
    ax.plot([0, 100], [0, 100], color="grey", linestyle="--", linewidth=0.8)
    ax.set_xlabel("train accuracy (%)")
    ax.set_ylabel("val accuracy (%)")
    ax.legend()
    _save_svg(plt, fig, path)
