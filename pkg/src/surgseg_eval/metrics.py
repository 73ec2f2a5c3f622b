"""Segmentation metrics: per-class IoU and Dice, mIoU, mDice, MAE, overlap phi, mAP.

Degenerate conventions:

* empty prediction vs empty ground truth scores iou = dice = phi = 1.0;
* classes with no ground-truth pixels over the evaluated frames are left out
  of the class mean;
* mAP ranks predictions by mask area (there are no confidence scores) and
  matches at IoU >= 0.5 unless told otherwise.
"""

from __future__ import annotations

import csv
import io
import json
from collections.abc import Iterable, Mapping, Sequence
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .dataset import AnnotatedVideo
from .masks import BinaryMask

PER_CLASS_OVER_VIDEO = "per_class_over_video"
PER_FRAME_THEN_CLASS = "per_frame_then_class"
AGGREGATIONS = (PER_CLASS_OVER_VIDEO, PER_FRAME_THEN_CLASS)
MAP_NOTE = "mAP: area-ranked greedy matching (no confidence scores)"


class MetricsError(ValueError):
    pass


@dataclass(frozen=True)
class ConfusionCounts:
    tp: int = 0
    fp: int = 0
    fn: int = 0

    def __post_init__(self):
        if self.tp < 0 or self.fp < 0 or self.fn < 0:
            raise MetricsError("confusion counts must be non-negative")

    def __add__(self, other: ConfusionCounts) -> ConfusionCounts:
        return ConfusionCounts(self.tp + other.tp, self.fp + other.fp, self.fn + other.fn)


def _arrays(pred, gt) -> tuple[np.ndarray, np.ndarray]:
    a = pred.array if isinstance(pred, BinaryMask) else np.asarray(pred, dtype=bool)
    b = gt.array if isinstance(gt, BinaryMask) else np.asarray(gt, dtype=bool)
    if a.shape != b.shape:
        raise MetricsError(f"dimension mismatch: prediction {a.shape} vs ground truth {b.shape}")
    return a, b


def confusion_counts(pred, gt) -> ConfusionCounts:
    a, b = _arrays(pred, gt)
    tp = int(np.count_nonzero(a & b))
    return ConfusionCounts(tp, int(np.count_nonzero(a)) - tp, int(np.count_nonzero(b)) - tp)


def iou(counts: ConfusionCounts) -> float:
    denom = counts.tp + counts.fp + counts.fn
    return 1.0 if denom == 0 else counts.tp / denom


def dice(counts: ConfusionCounts) -> float:
    denom = 2 * counts.tp + counts.fp + counts.fn
    return 1.0 if denom == 0 else 2 * counts.tp / denom


def overlap_phi(counts: ConfusionCounts) -> float:
    """TP / (TP + FP + FN); the same quantity as ``iou``."""
    return iou(counts)


def mae(pred, gt) -> float:
    a, b = _arrays(pred, gt)
    if a.size == 0:
        raise MetricsError("cannot compute MAE over zero pixels")
    return float(np.count_nonzero(a != b)) / a.size


@dataclass
class MetricsReport:
    per_class: dict[int, dict[str, float]]
    miou: float
    mdice: float
    mae: float
    phi: float
    num_classes: int
    num_pixels: int
    aggregation: str
    map_score: float | None = None
    map_thresholds: tuple[float, ...] = ()
    class_names: dict[int, str] = field(default_factory=dict)
    pseudo_ground_truth: bool = False
    frames_evaluated: int = 0

    def summary(self) -> dict:
        return {
            "miou": self.miou,
            "mdice": self.mdice,
            "mae": self.mae,
            "phi": self.phi,
            "map": self.map_score,
            "map_thresholds": list(self.map_thresholds),
            "C": self.num_classes,
            "N": self.num_pixels,
            "aggregation": self.aggregation,
            "gt_kind": "pseudo" if self.pseudo_ground_truth else "real",
            "frames_evaluated": self.frames_evaluated,
            "per_class": {str(k): v for k, v in self.per_class.items()},
        }


# --------------------------------------------------------------------------
# aggregation


def _class_union(masks: Mapping[int, np.ndarray], classes: Mapping[int, int], cls: int, shape) -> np.ndarray:
    out = np.zeros(shape, dtype=bool)
    for obj, m in masks.items():
        if classes.get(obj) == cls:
            out |= m
    return out


def _common_frames(result, gt: AnnotatedVideo) -> list[int]:
    return [f for f in gt.annotated_frames() if f in result.masks]


def class_counts(result, gt: AnnotatedVideo) -> tuple[dict[int, dict[int, ConfusionCounts]], dict[int, tuple[int, int]]]:
    """Per-frame, per-class confusion counts plus per-frame foreground (errors, pixels)."""
    classes = gt.object_classes()
    all_classes = sorted(set(classes.values()))
    w, h = gt.size
    per_frame: dict[int, dict[int, ConfusionCounts]] = {}
    fg: dict[int, tuple[int, int]] = {}
    for f in _common_frames(result, gt):
        pred = {o: m.array for o, m in result.masks[f].items()}
        truth = {a.object_id: a.mask.array for a in gt.instances(f)}
        row = {}
        for cls in all_classes:
            row[cls] = confusion_counts(_class_union(pred, classes, cls, (h, w)), _class_union(truth, classes, cls, (h, w)))
        per_frame[f] = row
        any_pred = np.zeros((h, w), dtype=bool)
        for m in pred.values():
            any_pred |= m
        any_gt = np.zeros((h, w), dtype=bool)
        for m in truth.values():
            any_gt |= m
        fg[f] = (int(np.count_nonzero(any_pred != any_gt)), h * w)
    return per_frame, fg


def _report_from_counts(
    per_frame: Mapping[int, Mapping[int, ConfusionCounts]],
    fg: Mapping[int, tuple[int, int]],
    order: str,
    class_names: Mapping[int, str],
    pseudo: bool,
) -> MetricsReport:
    if order not in AGGREGATIONS:
        raise MetricsError(f"unknown aggregation order {order!r}")
    if not per_frame:
        raise MetricsError("prediction and ground truth share no annotated frame")
    totals: dict[int, ConfusionCounts] = {}
    for row in per_frame.values():
        for cls, c in row.items():
            totals[cls] = totals.get(cls, ConfusionCounts()) + c
    present = [cls for cls, c in sorted(totals.items()) if c.tp + c.fn > 0]

    per_class: dict[int, dict[str, float]] = {}
    for cls in present:
        if order == PER_CLASS_OVER_VIDEO:
            per_class[cls] = {"iou": iou(totals[cls]), "dice": dice(totals[cls])}
        else:
            frames = [row[cls] for row in per_frame.values() if cls in row and row[cls].tp + row[cls].fp + row[cls].fn > 0]
            per_class[cls] = {
                "iou": float(np.mean([iou(c) for c in frames])),
                "dice": float(np.mean([dice(c) for c in frames])),
            }
    miou = float(np.mean([v["iou"] for v in per_class.values()])) if per_class else 1.0
    mdice = float(np.mean([v["dice"] for v in per_class.values()])) if per_class else 1.0
    errors = sum(e for e, _ in fg.values())
    pixels = sum(n for _, n in fg.values())
    pooled = ConfusionCounts()
    for cls in present:
        pooled = pooled + totals[cls]
    return MetricsReport(
        per_class=per_class,
        miou=miou,
        mdice=mdice,
        mae=errors / pixels if pixels else 0.0,
        phi=overlap_phi(pooled),
        num_classes=len(per_class),
        num_pixels=pixels,
        aggregation=order,
        class_names={c: class_names.get(c, str(c)) for c in per_class},
        pseudo_ground_truth=pseudo,
        frames_evaluated=len(per_frame),
    )


def aggregate(result, gt: AnnotatedVideo, order: str = PER_CLASS_OVER_VIDEO) -> MetricsReport:
    """Score one video.

    ``per_class_over_video`` pools counts per class over frames before
    scoring; ``per_frame_then_class`` scores each frame where the class is in
    the prediction or the ground truth, then averages those scores. Both
    average over the classes present in ground truth. MAE compares the union
    of all objects against the union of all ground truth, pooled over frames.
    """
    per_frame, fg = class_counts(result, gt)
    return _report_from_counts(per_frame, fg, order, gt.class_names, gt.pseudo_ground_truth)


def aggregate_many(pairs: Sequence[tuple[object, AnnotatedVideo]], order: str = PER_CLASS_OVER_VIDEO,
                   video_averaging: str = "pooled") -> MetricsReport:
    """Dataset-level report.

    ``pooled`` treats all frames of all videos as one span; ``mean`` averages
    the per-video reports (used where a dataset is reported as the mean of its
    subsets).
    """
    if not pairs:
        raise MetricsError("no videos to aggregate")
    if video_averaging == "mean":
        reports = [aggregate(r, g, order) for r, g in pairs]
        classes = sorted({c for rep in reports for c in rep.per_class})
        per_class = {}
        for c in classes:
            vals = [rep.per_class[c] for rep in reports if c in rep.per_class]
            per_class[c] = {k: float(np.mean([v[k] for v in vals])) for k in ("iou", "dice")}
        names = {}
        for _, g in pairs:
            names.update(g.class_names)
        return MetricsReport(
            per_class=per_class,
            miou=float(np.mean([r.miou for r in reports])),
            mdice=float(np.mean([r.mdice for r in reports])),
            mae=float(np.mean([r.mae for r in reports])),
            phi=float(np.mean([r.phi for r in reports])),
            num_classes=len(per_class),
            num_pixels=sum(r.num_pixels for r in reports),
            aggregation=f"{order};videos=mean",
            class_names={c: names.get(c, str(c)) for c in per_class},
            pseudo_ground_truth=any(r.pseudo_ground_truth for r in reports),
            frames_evaluated=sum(r.frames_evaluated for r in reports),
        )
    if video_averaging != "pooled":
        raise MetricsError(f"unknown video averaging {video_averaging!r}")
    per_frame: dict = {}
    fg: dict = {}
    names: dict[int, str] = {}
    pseudo = False
    for i, (r, g) in enumerate(pairs):
        pf, f = class_counts(r, g)
        per_frame.update({(i, g.video_id, k): v for k, v in pf.items()})
        fg.update({(i, g.video_id, k): v for k, v in f.items()})
        names.update(g.class_names)
        pseudo = pseudo or g.pseudo_ground_truth
    rep = _report_from_counts(per_frame, fg, order, names, pseudo)
    rep.aggregation = f"{order};videos=pooled"
    return rep


# --------------------------------------------------------------------------
# mAP


def average_precision(matched: Sequence[bool], num_gt: int) -> float:
    """All-point interpolated AP from a ranked list of match flags."""
    if num_gt == 0:
        return 1.0 if not matched else 0.0
    if not matched:
        return 0.0
    flags = np.asarray(matched, dtype=float)
    tp = np.cumsum(flags)
    fp = np.cumsum(1.0 - flags)
    recall = np.concatenate(([0.0], tp / num_gt, [1.0]))
    precision = np.concatenate(([1.0], tp / (tp + fp), [0.0]))
    for i in range(len(precision) - 2, -1, -1):
        precision[i] = max(precision[i], precision[i + 1])
    steps = np.flatnonzero(recall[1:] != recall[:-1])
    return float(np.sum((recall[steps + 1] - recall[steps]) * precision[steps + 1]))


def mean_average_precision(results: object | Sequence, gt: AnnotatedVideo | Sequence[AnnotatedVideo] | None = None,
                           iou_thresholds: Iterable[float] = (0.5,)) -> float:
    """Instance-level mAP over classes with ground-truth instances.

    Accepts one (result, video) pair or a list of pairs. Predictions are the
    non-empty object masks, ranked per class by descending area and greedily
    matched to the unmatched ground-truth instance of highest IoU on the same
    frame.
    """
    pairs = [(results, gt)] if gt is not None else list(results)
    thresholds = tuple(iou_thresholds)
    preds_by_class: dict[int, list] = {}
    gts_by_class: dict[int, dict] = {}
    for pi, (r, g) in enumerate(pairs):
        classes = g.object_classes()
        for f in _common_frames(r, g):
            for inst in g.instances(f):
                gts_by_class.setdefault(inst.class_id, {}).setdefault((pi, g.video_id, f), []).append(inst.mask.array)
            for obj, m in sorted(r.masks[f].items()):
                if obj in classes and not m.is_empty():
                    preds_by_class.setdefault(classes[obj], []).append(((pi, g.video_id, f), m.array, m.area))
    if not gts_by_class:
        return 0.0
    aps = []
    for cls in sorted(gts_by_class):
        gts = gts_by_class[cls]
        num_gt = sum(len(v) for v in gts.values())
        preds = sorted(preds_by_class.get(cls, []), key=lambda p: -p[2])
        for thr in thresholds:
            used = {k: [False] * len(v) for k, v in gts.items()}
            flags = []
            for key, arr, _area in preds:
                best, best_i = -1.0, -1
                for i, g_arr in enumerate(gts.get(key, [])):
                    if used[key][i]:
                        continue
                    inter = np.count_nonzero(arr & g_arr)
                    union = np.count_nonzero(arr | g_arr)
                    score = inter / union if union else 0.0
                    if score > best:
                        best, best_i = score, i
                hit = best_i >= 0 and best >= thr
                if hit:
                    used[key][best_i] = True
                flags.append(hit)
            aps.append(average_precision(flags, num_gt))
    return float(np.mean(aps))


# --------------------------------------------------------------------------
# serialisation

CSV_FIELDS = ("scope", "class_id", "class_name", "iou", "dice", "mae", "phi", "map", "C", "N", "aggregation", "gt_kind")


def _fmt(v) -> str:
    return "" if v is None else f"{v:.6f}"


def report_rows(report: MetricsReport) -> list[dict]:
    gt_kind = "pseudo" if report.pseudo_ground_truth else "real"
    rows = []
    for cls, s in sorted(report.per_class.items()):
        rows.append({"scope": "class", "class_id": cls, "class_name": report.class_names.get(cls, str(cls)),
                     "iou": _fmt(s["iou"]), "dice": _fmt(s["dice"]), "mae": "", "phi": "", "map": "",
                     "C": "", "N": "", "aggregation": report.aggregation, "gt_kind": gt_kind})
    rows.append({"scope": "aggregate", "class_id": "", "class_name": "", "iou": _fmt(report.miou),
                 "dice": _fmt(report.mdice), "mae": _fmt(report.mae), "phi": _fmt(report.phi),
                 "map": _fmt(report.map_score), "C": report.num_classes, "N": report.num_pixels,
                 "aggregation": report.aggregation, "gt_kind": gt_kind})
    return rows


def report_to_csv(report: MetricsReport) -> str:
    """Fixed column order: see ``CSV_FIELDS``; floats at 6 decimals."""
    buf = io.StringIO()
    writer = csv.DictWriter(buf, fieldnames=CSV_FIELDS, lineterminator="\n")
    writer.writeheader()
    writer.writerows(report_rows(report))
    return buf.getvalue()


def write_report(report: MetricsReport, directory: str | Path, stem: str = "metrics") -> tuple[Path, Path]:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    csv_path = directory / f"{stem}.csv"
    csv_path.write_text(report_to_csv(report))
    summary = report.summary()
    if report.map_score is not None:
        summary["map_note"] = MAP_NOTE
    json_path = directory / f"{stem}.json"
    json_path.write_text(json.dumps(summary, indent=2, sort_keys=True))
    return csv_path, json_path
