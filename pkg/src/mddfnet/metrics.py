"""COCO-style detection metrics: greedy matching, 101-point AP, mAP and AP by object size."""

from __future__ import annotations

from collections import defaultdict
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .boxes import Detection, GroundTruthBox, iou_xyxy
from .errors import EvaluationError

IOU_THRESHOLDS = tuple(round(0.5 + 0.05 * i, 2) for i in range(10))
RECALL_POINTS = np.linspace(0.0, 1.0, 101)
SMALL_MAX = 32.0**2
MEDIUM_MAX = 96.0**2
SIZE_RANGES = {"small": (0.0, SMALL_MAX), "medium": (SMALL_MAX, MEDIUM_MAX), "large": (MEDIUM_MAX, np.inf)}


@dataclass
class MatchResult:
    detections: list[Detection]  # score-descending, ignored detections removed
    tp: np.ndarray  # bool per entry of ``detections``
    n_gt: int  # non-ignored ground truths


def _sort_by_score(dets: Sequence[Detection]) -> list[Detection]:
    return sorted(dets, key=lambda d: -d.score)  # stable: ties keep input order


def match_detections(dets: Sequence[Detection], gts: Sequence[GroundTruthBox], iou_thr: float,
                     gt_ignore: Sequence[bool] | None = None) -> MatchResult:
    """Greedy matching in descending score order within each (image, class).

    A detection takes the unmatched ground truth of highest IoU ≥ ``iou_thr``,
    preferring non-ignored ones. A detection whose only match is an ignored
    ground truth is dropped from the result rather than counted as FP.
    """
    ignore = list(gt_ignore) if gt_ignore is not None else [False] * len(gts)
    pools: dict[tuple[str, int], list[int]] = defaultdict(list)
    for gi, g in enumerate(gts):
        pools[(g.image_id, g.class_id)].append(gi)
    used = [False] * len(gts)
    kept, flags = [], []
    for d in _sort_by_score(dets):
        best, best_iou = -1, -1.0
        best_ign, best_ign_iou = -1, -1.0
        for gi in pools.get((d.image_id, d.class_id), ()):
            if used[gi]:
                continue
            iou = iou_xyxy(d.box, gts[gi].box)
            if iou < iou_thr:
                continue
            if ignore[gi]:
                if iou > best_ign_iou:
                    best_ign, best_ign_iou = gi, iou
            elif iou > best_iou:
                best, best_iou = gi, iou
        if best >= 0:
            used[best] = True
            kept.append(d)
            flags.append(True)
        elif best_ign >= 0:
            used[best_ign] = True
        else:
            kept.append(d)
            flags.append(False)
    n_gt = sum(1 for i in ignore if not i)
    return MatchResult(kept, np.array(flags, dtype=bool), n_gt)


def average_precision(flags: Sequence[bool], n_gt: int) -> float | None:
    """101-point interpolated area under the precision envelope.

    Returns ``None`` (undefined) when there are neither ground truths nor detections.
    """
    flags = np.asarray(flags, dtype=bool)
    if n_gt == 0:
        return None if flags.size == 0 else 0.0
    if flags.size == 0:
        return 0.0
    tp = np.cumsum(flags)
    fp = np.cumsum(~flags)
    precision = tp / (tp + fp)
    envelope = np.maximum.accumulate(precision[::-1])[::-1]
    # recall >= k/100 compared in integers, so grid points land exactly
    idx = np.searchsorted(100 * tp, np.arange(101) * n_gt, side="left")
    q = np.where(idx < envelope.size, envelope[np.minimum(idx, envelope.size - 1)], 0.0)
    return float(q.mean())


def mean_ap(per_class: Sequence[float | None]) -> float:
    defined = [a for a in per_class if a is not None]
    if not defined:
        raise EvaluationError("mAP undefined: no class has ground truths or detections")
    return float(sum(defined) / len(defined))


def _class_aps(dets, gts, classes, thr, gt_ignore=None) -> dict[int, float | None]:
    by_cls_d = defaultdict(list)
    for d in dets:
        by_cls_d[d.class_id].append(d)
    by_cls_g = defaultdict(list)
    for i, g in enumerate(gts):
        by_cls_g[g.class_id].append(i)
    out = {}
    for c in classes:
        gi = by_cls_g.get(c, [])
        ign = None if gt_ignore is None else [gt_ignore[i] for i in gi]
        m = match_detections(by_cls_d.get(c, []), [gts[i] for i in gi], thr, ign)
        out[c] = average_precision(m.tp, m.n_gt)
    return out


def _all_classes(dets, gts, num_classes: int | None) -> list[int]:
    if num_classes is not None:
        return list(range(num_classes))
    return sorted({d.class_id for d in dets} | {g.class_id for g in gts})


def map_over_thresholds(dets, gts, thresholds=IOU_THRESHOLDS, num_classes=None, gt_ignore=None):
    """``(per-threshold mAPs, per_class_per_threshold)``; mAP is ``None`` when no class is defined."""
    classes = _all_classes(dets, gts, num_classes)
    table: dict[tuple[int, float], float | None] = {}
    maps = []
    for thr in thresholds:
        aps = _class_aps(dets, gts, classes, thr, gt_ignore)
        for c, ap in aps.items():
            table[(c, thr)] = ap
        defined = [a for a in aps.values() if a is not None]
        maps.append(float(sum(defined) / len(defined)) if defined else None)
    return maps, table


def ap_by_size(dets, gts, thresholds=IOU_THRESHOLDS, num_classes=None) -> dict[str, float | None]:
    """mAP@[thresholds] per area partition, ground truths outside the partition ignored."""
    out = {}
    for name, (lo, hi) in SIZE_RANGES.items():
        ignore = [not (lo <= g.area < hi) for g in gts]
        if all(ignore):
            out[name] = None
            continue
        maps, _ = map_over_thresholds(dets, gts, thresholds, num_classes, ignore)
        defined = [m for m in maps if m is not None]
        out[name] = float(np.mean(defined)) if defined else None
    return out


@dataclass
class APReport:
    per_class_per_threshold: dict[tuple[int, float], float | None]
    map_per_threshold: list[float]
    map50: float
    map75: float
    map5095: float
    ap_small: float | None
    ap_medium: float | None
    ap_large: float | None
    per_class_map50: dict[int, float | None] = field(default_factory=dict)
    thresholds: tuple[float, ...] = IOU_THRESHOLDS

    def to_dict(self) -> dict:
        return {
            "map50": self.map50, "map75": self.map75, "map5095": self.map5095,
            "ap_small": self.ap_small, "ap_medium": self.ap_medium, "ap_large": self.ap_large,
            "map_per_threshold": {f"{t:.2f}": m for t, m in zip(self.thresholds, self.map_per_threshold)},
            "per_class_map50": {str(c): a for c, a in self.per_class_map50.items()},
        }


def evaluate(dets: Sequence[Detection], gts: Sequence[GroundTruthBox], num_classes: int | None = None,
             thresholds: Sequence[float] = IOU_THRESHOLDS) -> APReport:
    thresholds = tuple(thresholds)
    if len(thresholds) != 10 or abs(thresholds[0] - 0.5) > 1e-9 or abs(thresholds[5] - 0.75) > 1e-9:
        raise EvaluationError("evaluate expects the ten thresholds 0.50:0.05:0.95")
    maps, table = map_over_thresholds(dets, gts, thresholds, num_classes)
    if any(m is None for m in maps):
        raise EvaluationError("mAP undefined: no class has ground truths or detections")
    sizes = ap_by_size(dets, gts, thresholds, num_classes)
    classes = _all_classes(dets, gts, num_classes)
    return APReport(
        per_class_per_threshold=table,
        map_per_threshold=maps,
        map50=maps[0],
        map75=maps[5],
        map5095=float(sum(maps) / len(maps)),
        ap_small=sizes["small"],
        ap_medium=sizes["medium"],
        ap_large=sizes["large"],
        per_class_map50={c: table[(c, thresholds[0])] for c in classes},
        thresholds=thresholds,
    )


def per_class_table(report: APReport, class_names: Sequence[str]) -> str:
    """Plain-text table of class name and AP@.5 in percent, one row per class."""
    width = max([len("class")] + [len(n) for n in class_names])
    lines = [f"{'class':<{width}} {'AP50':>5}"]
    for cid, name in enumerate(class_names):
        ap = report.per_class_map50.get(cid)
        cell = "-" if ap is None else f"{ap * 100:.1f}"
        lines.append(f"{name:<{width}} {cell:>5}")
    return "\n".join(lines)
