"""
Detection metrics: pixel-level IoU/F1, target-level Pd/Fa, and ROC/AUC.

Conventions:

* A ground-truth target (8-connected component) counts as detected when a
  predicted component's centroid lies within ``dist_thresh`` pixels of the
  target's centroid. Each predicted component can claim at most one target;
  pairs are matched greedily in order of increasing centroid distance.
* False-alarm pixels are the pixels of predicted components that matched no
  target. ``fa`` is their count over all evaluated pixels.
* mIoU and F1 are computed from counts accumulated over the whole dataset
  unless ``per_image=True``.
* With no ground-truth targets in the whole set, Pd is reported as 1.0 and
  ``zero_targets`` is set.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from typing import NamedTuple

import numpy as np
from scipy import ndimage

EIGHT_CONNECTED = np.ones((3, 3), dtype=bool)


@dataclass(frozen=True)
class ConfusionCounts:
    tp: int = 0
    fp: int = 0
    fn: int = 0
    tn: int = 0

    def __add__(self, other: "ConfusionCounts") -> "ConfusionCounts":
        return ConfusionCounts(self.tp + other.tp, self.fp + other.fp, self.fn + other.fn, self.tn + other.tn)

    @property
    def total(self) -> int:
        return self.tp + self.fp + self.fn + self.tn


def _binary(x) -> np.ndarray:
    return np.asarray(x) > 0


def confusion(pred_mask, gt_mask) -> ConfusionCounts:
    pred, gt = _binary(pred_mask), _binary(gt_mask)
    if pred.shape != gt.shape:
        raise ValueError(f"prediction {pred.shape} and ground truth {gt.shape} differ in shape")
    tp = int(np.count_nonzero(pred & gt))
    fp = int(np.count_nonzero(pred & ~gt))
    fn = int(np.count_nonzero(~pred & gt))
    return ConfusionCounts(tp, fp, fn, pred.size - tp - fp - fn)


def miou(counts: ConfusionCounts) -> float:
    denom = counts.tp + counts.fp + counts.fn
    return 1.0 if denom == 0 else counts.tp / denom


def f1(counts: ConfusionCounts) -> float:
    denom = 2 * counts.tp + counts.fp + counts.fn
    return 1.0 if denom == 0 else 2 * counts.tp / denom


class TargetMatch(NamedTuple):
    detected: int
    total_gt: int
    false_alarm_pixels: int


def _components(mask: np.ndarray) -> tuple[list[np.ndarray], np.ndarray]:
    labels, n = ndimage.label(mask, structure=EIGHT_CONNECTED)
    if n == 0:
        return [], np.zeros(0, dtype=int)
    index = np.arange(1, n + 1)
    centroids = [np.asarray(c) for c in ndimage.center_of_mass(mask, labels, index)]
    sizes = ndimage.sum_labels(mask, labels, index).astype(int)
    return centroids, sizes


def target_match(pred_mask, gt_mask, dist_thresh: float = 3.0) -> TargetMatch:
    pred, gt = _binary(pred_mask), _binary(gt_mask)
    if pred.shape != gt.shape:
        raise ValueError(f"prediction {pred.shape} and ground truth {gt.shape} differ in shape")
    gt_c, _ = _components(gt)
    pr_c, pr_sizes = _components(pred)

    pairs = []
    for i, g in enumerate(gt_c):
        for j, p in enumerate(pr_c):
            d = float(np.hypot(*(g - p)))
            if d <= dist_thresh:
                # ties broken by centroid coordinates, not label order
                pairs.append((d, tuple(g), tuple(p), i, j))
    pairs.sort(key=lambda t: t[:3])
    gt_used, pr_used = set(), set()
    for _, _, _, i, j in pairs:
        if i not in gt_used and j not in pr_used:
            gt_used.add(i)
            pr_used.add(j)
    fa_pixels = int(sum(s for j, s in enumerate(pr_sizes) if j not in pr_used))
    return TargetMatch(len(gt_used), len(gt_c), fa_pixels)


@dataclass
class MetricsReport:
    miou: float
    f1: float
    pd: float
    fa: float
    threshold: float
    counts: ConfusionCounts
    detected: int
    total_targets: int
    false_alarm_pixels: int
    total_pixels: int
    zero_targets: bool = False
    roc: list[tuple[float, float]] = field(default_factory=list)
    roc_thresholds: list[float] = field(default_factory=list)
    auc: float = float("nan")

    @property
    def fa_e5(self) -> float:
        """False-alarm rate in units of 1e-5."""
        return self.fa * 1e5

    def rows(self) -> list[tuple[str, float]]:
        return [
            ("threshold", self.threshold),
            ("miou", self.miou),
            ("f1", self.f1),
            ("pd", self.pd),
            ("fa", self.fa),
            ("fa_e5", self.fa_e5),
            ("auc", self.auc),
            ("tp", self.counts.tp),
            ("fp", self.counts.fp),
            ("fn", self.counts.fn),
            ("tn", self.counts.tn),
            ("detected", self.detected),
            ("total_targets", self.total_targets),
            ("false_alarm_pixels", self.false_alarm_pixels),
            ("total_pixels", self.total_pixels),
            ("zero_targets", int(self.zero_targets)),
        ]


def _as_maps(maps) -> list[np.ndarray]:
    if isinstance(maps, np.ndarray) and maps.ndim >= 3:
        return [np.squeeze(m) if m.ndim > 2 else m for m in maps]
    return [np.squeeze(np.asarray(m)) for m in maps]


def _pd_fa(scores, gts, threshold, dist_thresh):
    detected = total = fa_pixels = pixels = 0
    for s, g in zip(scores, gts):
        tm = target_match(s > threshold, g, dist_thresh)
        detected += tm.detected
        total += tm.total_gt
        fa_pixels += tm.false_alarm_pixels
        pixels += s.size
    pd = 1.0 if total == 0 else detected / total
    return pd, fa_pixels / pixels, detected, total, fa_pixels, pixels


def roc_sweep(scores, gts, n_thresh: int = 20, dist_thresh: float = 3.0):
    """
    Pd against Fa at ``n_thresh`` evenly spaced thresholds ``i / (n_thresh + 1)``.

    Returns ``(points, thresholds, auc)``; points are the raw ``(fa, pd)``
    pairs sorted by ``fa``. The AUC integrates, with the trapezoid rule, the
    running maximum of Pd over Fa rescaled by its largest observed value,
    from (0, 0) to (max_fa, Pd at the lowest threshold). The running maximum
    matters at very low thresholds, where background merges with targets
    into large components whose centroids miss every target and Pd collapses
    even though a stricter threshold would have found them at lower Fa.
    When no threshold produces a false alarm the AUC equals the best Pd.
    """
    scores, gts = _as_maps(scores), _as_maps(gts)
    thresholds = [i / (n_thresh + 1) for i in range(1, n_thresh + 1)]
    points = []
    for t in thresholds:
        pd, fa, *_ = _pd_fa(scores, gts, t, dist_thresh)
        points.append((fa, pd, t))
    points.sort(key=lambda p: (p[0], p[1]))
    roc = [(fa, pd) for fa, pd, _ in points]
    ordered_thresholds = [t for _, _, t in points]
    max_fa = roc[-1][0]
    if max_fa == 0:
        return roc, ordered_thresholds, float(max(pd for _, pd in roc))
    pd_lowest = next(pd for fa, pd, t in points if t == thresholds[0])
    xs = np.array([0.0] + [fa / max_fa for fa, _ in roc] + [1.0])
    ys = np.maximum.accumulate(np.array([0.0] + [pd for _, pd in roc] + [pd_lowest]))
    auc = float(np.sum(np.diff(xs) * (ys[1:] + ys[:-1]) / 2.0))
    return roc, ordered_thresholds, min(max(auc, 0.0), 1.0)


def evaluate(
    scores,
    gts,
    threshold: float = 0.5,
    dist_thresh: float = 3.0,
    n_thresh: int | None = 20,
    per_image: bool = False,
) -> MetricsReport:
    """
    Binarize probability maps at ``threshold`` and aggregate all metrics.

    ``scores`` and ``gts`` are sequences of 2-D maps (or arrays shaped
    (N, H, W) / (N, 1, H, W)). ``n_thresh=None`` skips the ROC sweep.
    """
    scores, gts = _as_maps(scores), _as_maps(gts)
    if len(scores) != len(gts):
        raise ValueError(f"{len(scores)} score maps but {len(gts)} ground-truth maps")
    if not scores:
        raise ValueError("nothing to evaluate")
    per_counts = [confusion(s > threshold, g) for s, g in zip(scores, gts)]
    counts = sum(per_counts, ConfusionCounts())
    if per_image:
        iou_value = float(np.mean([miou(c) for c in per_counts]))
        f1_value = float(np.mean([f1(c) for c in per_counts]))
    else:
        iou_value, f1_value = miou(counts), f1(counts)
    pd, fa, detected, total, fa_pixels, pixels = _pd_fa(scores, gts, threshold, dist_thresh)
    report = MetricsReport(
        miou=iou_value,
        f1=f1_value,
        pd=pd,
        fa=fa,
        threshold=threshold,
        counts=counts,
        detected=detected,
        total_targets=total,
        false_alarm_pixels=fa_pixels,
        total_pixels=pixels,
        zero_targets=total == 0,
    )
    if n_thresh:
        report.roc, report.roc_thresholds, report.auc = roc_sweep(scores, gts, n_thresh, dist_thresh)
    return report


def write_metrics_csv(report: MetricsReport, path) -> None:
    with open(path, "w", newline="") as fh:
        fh.write(f"# threshold={report.threshold}\n")
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["metric", "value"])
        for name, value in report.rows():
            w.writerow([name, repr(float(value)) if isinstance(value, float) else value])


def write_roc_csv(report: MetricsReport, path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["threshold", "fa", "pd"])
        for t, (fa, pd) in zip(report.roc_thresholds, report.roc):
            w.writerow([repr(t), repr(fa), repr(pd)])
