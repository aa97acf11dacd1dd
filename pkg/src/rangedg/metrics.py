"""Point-level confusion matrices, IoU and per-condition reports."""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field
from fractions import Fraction
from pathlib import Path

import numpy as np


@dataclass
class ConfusionMatrix:
    """Rows are ground truth, columns predictions."""

    num_classes: int
    ignore_id: int
    counts: np.ndarray = None
    ignored: int = 0

    def __post_init__(self):
        if self.counts is None:
            self.counts = np.zeros((self.num_classes, self.num_classes), dtype=np.int64)

    @property
    def total(self) -> int:
        return int(self.counts.sum()) + self.ignored

    def __add__(self, other: "ConfusionMatrix") -> "ConfusionMatrix":
        if (self.num_classes, self.ignore_id) != (other.num_classes, other.ignore_id):
            raise ValueError("cannot add confusion matrices with different class setups")
        return ConfusionMatrix(self.num_classes, self.ignore_id, self.counts + other.counts,
                               self.ignored + other.ignored)

    def accumulate(self, gt: np.ndarray, pred: np.ndarray) -> "ConfusionMatrix":
        self_delta = accumulate(gt, pred, self.num_classes, self.ignore_id)
        self.counts += self_delta.counts
        self.ignored += self_delta.ignored
        return self

    def scored_classes(self) -> list[int]:
        return [k for k in range(self.num_classes) if k != self.ignore_id]

    def iou(self) -> np.ndarray:
        """Per-class IoU; NaN where the union is empty or for the ignore class."""
        tp = np.diag(self.counts).astype(np.float64)
        union = self.counts.sum(axis=0) + self.counts.sum(axis=1) - tp
        with np.errstate(invalid="ignore", divide="ignore"):
            out = np.where(union > 0, tp / union, np.nan)
        if 0 <= self.ignore_id < self.num_classes:
            out[self.ignore_id] = np.nan
        return out

    def mean_iou(self) -> float:
        """Mean over classes with a non-empty union, computed exactly and rounded once."""
        tp = np.diag(self.counts)
        union = self.counts.sum(axis=0) + self.counts.sum(axis=1) - tp
        keep = [k for k in self.scored_classes() if union[k] > 0]
        if not keep:
            return float("nan")
        return float(sum(Fraction(int(tp[k]), int(union[k])) for k in keep) / len(keep))


def accumulate(gt: np.ndarray, pred: np.ndarray, num_classes: int, ignore_id: int) -> ConfusionMatrix:
    """Confusion-matrix delta for one scan; points with ``gt == ignore_id`` are skipped."""
    gt = np.asarray(gt, dtype=np.int64).reshape(-1)
    pred = np.asarray(pred, dtype=np.int64).reshape(-1)
    if gt.shape != pred.shape:
        raise ValueError(f"{gt.size} ground-truth labels but {pred.size} predictions")
    keep = gt != ignore_id
    g, p = gt[keep], pred[keep]
    if np.any((g < 0) | (g >= num_classes)) or np.any((p < 0) | (p >= num_classes)):
        raise ValueError(f"labels must lie in [0, {num_classes})")
    counts = np.bincount(g * num_classes + p, minlength=num_classes ** 2).reshape(num_classes, num_classes)
    return ConfusionMatrix(num_classes, ignore_id, counts.astype(np.int64), int((~keep).sum()))


@dataclass
class ConditionRow:
    condition: str
    miou: float
    per_class: dict[str, float]
    points: int


@dataclass
class Report:
    rows: list[ConditionRow] = field(default_factory=list)

    def row(self, condition: str) -> ConditionRow:
        for r in self.rows:
            if r.condition == condition:
                return r
        raise KeyError(condition)

    def corrupted_average(self) -> float:
        vals = [r.miou for r in self.rows if r.condition != "clean"]
        return float(np.mean(vals)) if vals else float("nan")

    def to_json(self) -> dict:
        return {
            "conditions": {r.condition: {"miou": r.miou, "per_class": r.per_class, "points": r.points}
                           for r in self.rows},
            "corrupted_average": self.corrupted_average(),
        }

    def write(self, out_dir: Path, stem: str = "report") -> None:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        with open(out_dir / f"{stem}.csv", "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["condition", "class", "iou"])
            for r in self.rows:
                for name, v in r.per_class.items():
                    w.writerow([r.condition, name, _fmt(v)])
                w.writerow([r.condition, "mean", _fmt(r.miou)])
        (out_dir / f"{stem}.json").write_text(json.dumps(self.to_json(), indent=1, sort_keys=True) + "\n")


def _fmt(v: float) -> str:
    return "nan" if np.isnan(v) else repr(float(v))


def evaluate_clouds(model, clouds, proj, stats, class_names, batch_size: int = 4) -> ConfusionMatrix:
    """Project, predict, back-project and score a list of labelled clouds."""
    from .data import to_batch
    from .projection import backproject_labels

    cfg = model.cfg
    cm = ConfusionMatrix(cfg.num_classes, cfg.ignore_id)
    for start in range(0, len(clouds), batch_size):
        chunk = clouds[start:start + batch_size]
        batch, images = to_batch(chunk, proj, stats)
        pred = model.predict(batch.astype(model.dtype))
        for pc, img, pix in zip(chunk, images, pred):
            cm.accumulate(pc.labels, backproject_labels(img, pix, cfg.ignore_id))
    return cm


def condition_report(model, eval_sets: dict, proj, stats, class_names, batch_size: int = 4) -> Report:
    """One row per condition (dict order preserved) with mIoU and per-class IoU."""
    report = Report()
    for cond, clouds in eval_sets.items():
        cm = evaluate_clouds(model, clouds, proj, stats, class_names, batch_size)
        ious = cm.iou()
        per = {class_names[k]: float(ious[k]) for k in cm.scored_classes()}
        report.rows.append(ConditionRow(cond, cm.mean_iou(), per, int(cm.counts.sum())))
    return report
