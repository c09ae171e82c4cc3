"""Temporal IoU, per-class average precision and mAP reports."""

from __future__ import annotations

import csv
import json
import logging
from dataclasses import dataclass, field

import numpy as np

from .errors import InputError, IoError

log = logging.getLogger(__name__)

GRIDS = {
    "thumos": [round(0.1 * i, 10) for i in range(1, 8)],
    "anet": [round(0.5 + 0.05 * i, 10) for i in range(10)],
}
# named averages reported alongside the per-threshold mAP
RANGES = {
    "thumos": {"avg_0.1_0.5": (0.1, 0.5), "avg_0.3_0.7": (0.3, 0.7), "avg_0.1_0.7": (0.1, 0.7)},
    "anet": {"avg_0.5_0.95": (0.5, 0.95)},
}
AP_MODES = ("sum", "envelope", "11point")


@dataclass
class GroundTruthSegment:
    video_id: str
    class_index: int
    start_sec: float
    end_sec: float


def tiou(a, b) -> float:
    """Temporal IoU of two ``(start, end)`` segments."""
    inter = max(0.0, min(a[1], b[1]) - max(a[0], b[0]))
    union = max(a[1], b[1]) - min(a[0], b[0])
    return inter / union if union > 0 else 0.0


def sort_detections(dets):
    """Score descending, ties by earlier start then video id."""
    return sorted(dets, key=lambda d: (-d.score, d.start_sec, d.video_id))


def match_detections(dets, gts, threshold: float) -> np.ndarray:
    """Greedy one-to-one matching in score order; boolean TP flag per detection.

    ``dets`` must already be sorted with :func:`sort_detections`.
    """
    by_video: dict[str, list[int]] = {}
    for j, g in enumerate(gts):
        by_video.setdefault(g.video_id, []).append(j)
    used = np.zeros(len(gts), dtype=bool)
    tp = np.zeros(len(dets), dtype=bool)
    for i, d in enumerate(dets):
        best, best_j = -1.0, -1
        for j in by_video.get(d.video_id, []):
            if used[j]:
                continue
            ov = tiou((d.start_sec, d.end_sec), (gts[j].start_sec, gts[j].end_sec))
            if ov > best:
                best, best_j = ov, j
        if best_j >= 0 and best >= threshold:
            used[best_j] = True
            tp[i] = True
    return tp


def ap_from_flags(tp, n_gt: int, mode: str = "sum") -> float:
    """AP from the TP flags of a ranked detection list.

    ``sum``: mean over GTs of precision at each TP rank.
    ``envelope``: same after replacing precision by its running maximum from
    the right (the interpolated PR curve).
    ``11point``: mean envelope precision at recall 0, 0.1, ..., 1.
    """
    if mode not in AP_MODES:
        raise InputError(f"unknown AP mode {mode!r}")
    tp = np.asarray(tp, dtype=bool)
    if n_gt == 0 or tp.size == 0:
        return 0.0
    ctp = np.cumsum(tp)
    precision = ctp / np.arange(1, tp.size + 1)
    recall = ctp / n_gt
    if mode == "sum":
        return float(precision[tp].sum() / n_gt)
    env = np.maximum.accumulate(precision[::-1])[::-1]
    if mode == "envelope":
        return float(env[tp].sum() / n_gt)
    points = []
    for r in np.linspace(0.0, 1.0, 11):
        hit = recall >= r - 1e-12
        points.append(env[hit].max() if hit.any() else 0.0)
    return float(np.mean(points))


def average_precision(dets, gts, threshold: float, mode: str = "sum") -> float:
    """AP of one class at one tIoU threshold."""
    if not gts:
        log.warning("AP requested for a class without ground truth; reporting 0")
        return 0.0
    ranked = sort_detections(dets)
    return ap_from_flags(match_detections(ranked, gts, threshold), len(gts), mode)


@dataclass
class MapReport:
    thresholds: list[float]
    class_names: list[str]
    ap: np.ndarray  # thresholds x classes
    averages: dict[str, float] = field(default_factory=dict)

    @property
    def map(self) -> np.ndarray:
        return self.ap.mean(axis=1) if self.ap.size else np.zeros(len(self.thresholds))

    def to_json(self) -> dict:
        return {
            "thresholds": self.thresholds,
            "classes": self.class_names,
            "mAP": {f"{t:g}": float(m) for t, m in zip(self.thresholds, self.map)},
            "AP": {f"{t:g}": {c: float(v) for c, v in zip(self.class_names, row)}
                   for t, row in zip(self.thresholds, self.ap)},
            "averages": self.averages,
        }

    def write(self, json_path, csv_path=None) -> None:
        try:
            with open(json_path, "w") as f:
                json.dump(self.to_json(), f, indent=1)
                f.write("\n")
            if csv_path is not None:
                with open(csv_path, "w", newline="") as f:
                    w = csv.writer(f)
                    w.writerow(["threshold", "class", "ap"])
                    for t, row in zip(self.thresholds, self.ap):
                        for c, v in zip(self.class_names, row):
                            w.writerow([f"{t:g}", c, repr(float(v))])
        except OSError as exc:
            raise IoError(f"cannot write report: {exc}") from exc


def resolve_grid(grid) -> tuple[list[float], dict]:
    if isinstance(grid, str):
        if grid not in GRIDS:
            raise InputError(f"unknown grid {grid!r}; choose from {sorted(GRIDS)}")
        return list(GRIDS[grid]), dict(RANGES[grid])
    ths = [float(t) for t in grid]
    return ths, {"avg": (min(ths), max(ths))} if ths else {}


def map_report(dets, gts, grid="thumos", class_names=None, num_classes=None,
               mode: str = "sum") -> MapReport:
    """AP for every (threshold, class) cell plus mAP and range averages."""
    thresholds, ranges = resolve_grid(grid)
    if num_classes is None:
        num_classes = len(class_names) if class_names is not None else \
            1 + max([g.class_index for g in gts] + [d.class_index for d in dets] + [-1])
    names = list(class_names) if class_names is not None else [str(c) for c in range(num_classes)]
    dets_c = [[d for d in dets if d.class_index == c] for c in range(num_classes)]
    gts_c = [[g for g in gts if g.class_index == c] for c in range(num_classes)]
    ap = np.zeros((len(thresholds), num_classes))
    for i, t in enumerate(thresholds):
        for c in range(num_classes):
            ap[i, c] = average_precision(dets_c[c], gts_c[c], t, mode)
    report = MapReport(thresholds, names, ap)
    m = report.map
    for name, (lo, hi) in ranges.items():
        sel = [k for k, t in enumerate(thresholds) if lo - 1e-9 <= t <= hi + 1e-9]
        report.averages[name] = float(m[sel].mean()) if sel else 0.0
    return report


def ground_truth_from_dataset(dataset) -> list[GroundTruthSegment]:
    return [GroundTruthSegment(v.id, s.label, s.start_sec, s.end_sec)
            for v in dataset.videos for s in v.segments]


def roc_auc(scores, labels) -> float:
    """Area under the ROC curve of a binary snippet ranking.

    Computed as the Mann-Whitney statistic with mid-ranks for tied scores.
    """
    s = np.asarray(scores, dtype=np.float64).ravel()
    y = np.asarray(labels, dtype=bool).ravel()
    if s.shape != y.shape:
        raise InputError(f"{s.size} scores vs {y.size} labels")
    n_pos = int(y.sum())
    n_neg = y.size - n_pos
    if n_pos == 0 or n_neg == 0:
        raise InputError("AUC needs both positive and negative snippets")
    order = np.argsort(s, kind="mergesort")
    ranks = np.empty(s.size)
    sorted_s = s[order]
    start = 0
    for end in range(1, s.size + 1):
        if end == s.size or sorted_s[end] != sorted_s[start]:
            ranks[order[start:end]] = 0.5 * (start + end + 1)
            start = end
    return float((ranks[y].sum() - n_pos * (n_pos + 1) / 2) / (n_pos * n_neg))
