"""Evaluation of detected relationship triplets.

Matching is greedy in score order: a detection is a true positive if some
ground-truth triplet not yet matched in the same image has equal categories
and sufficient box overlap for the chosen mode. Among several eligible
ground truths the one with the highest overlap is consumed.
"""

from __future__ import annotations

import json
from collections import defaultdict
from dataclasses import dataclass, field
from typing import Iterable, Mapping, Sequence

import numpy as np

from .graph import BBox, iou

MATCH_VARIANTS = ("relationship", "phrase", "predicate", "subject-only")
CLASS_KEYS = ("triplet", "hoi")


@dataclass(frozen=True)
class Triplet:
    subject_box: BBox
    subject_class: int
    predicate: int
    object_box: BBox
    object_class: int
    score: float = 1.0

    @property
    def category(self) -> tuple[int, int, int]:
        return (self.subject_class, self.predicate, self.object_class)


@dataclass(frozen=True)
class MatchMode:
    variant: str = "relationship"
    iou_threshold: float = 0.5

    def __post_init__(self):
        if self.variant not in MATCH_VARIANTS:
            raise ValueError(f"unknown match mode {self.variant!r}; expected one of {MATCH_VARIANTS}")
        if not 0.0 < self.iou_threshold <= 1.0:
            raise ValueError(f"IoU threshold must lie in (0, 1], got {self.iou_threshold}")


def union_box(b1: BBox, b2: BBox) -> BBox:
    return BBox(min(b1.x1, b2.x1), min(b1.y1, b2.y1), max(b1.x2, b2.x2), max(b1.y2, b2.y2))


def _overlap(det: Triplet, gt: Triplet, mode: MatchMode) -> float | None:
    """Overlap used to rank eligible ground truths, or None if not eligible."""
    if det.category != gt.category:
        return None
    thr = mode.iou_threshold
    if mode.variant == "phrase":
        ov = iou(union_box(det.subject_box, det.object_box), union_box(gt.subject_box, gt.object_box))
        return ov if ov > thr else None
    s = iou(det.subject_box, gt.subject_box)
    if mode.variant == "subject-only":
        return s if s > thr else None
    o = iou(det.object_box, gt.object_box)
    return min(s, o) if s > thr and o > thr else None


def _best_match(det: Triplet, gts: Sequence[Triplet], used: list[bool], mode: MatchMode) -> int | None:
    best, best_ov = None, -1.0
    for g, gt in enumerate(gts):
        if used[g]:
            continue
        ov = _overlap(det, gt, mode)
        if ov is not None and ov > best_ov:
            best, best_ov = g, ov
    return best


def match_detections(dets: Sequence[Triplet], gts: Sequence[Triplet], mode: MatchMode) -> list[bool]:
    """True/false-positive flags for score-sorted detections of one image."""
    used = [False] * len(gts)
    flags = []
    for det in dets:
        g = _best_match(det, gts, used, mode)
        if g is not None:
            used[g] = True
        flags.append(g is not None)
    return flags


def _sorted(dets: Iterable[Triplet]) -> list[Triplet]:
    return sorted(dets, key=lambda d: -d.score)


def recall_at_x(
    dets_by_image: Mapping[str, Sequence[Triplet]],
    gts_by_image: Mapping[str, Sequence[Triplet]],
    x: int,
    mode: MatchMode,
) -> float:
    """Matched ground truths over all ground truths, keeping ``x`` detections per image."""
    if x < 1:
        raise ValueError("x must be >= 1")
    total = sum(len(g) for g in gts_by_image.values())
    if total == 0:
        raise ValueError("recall is undefined without ground-truth triplets")
    matched = 0
    for image_id, gts in gts_by_image.items():
        dets = _sorted(dets_by_image.get(image_id, ()))[:x]
        matched += sum(match_detections(dets, gts, mode))
    return matched / total


def class_of(t: Triplet, class_key: str) -> tuple[int, ...]:
    if class_key == "triplet":
        return t.category
    if class_key == "hoi":
        return (t.predicate, t.object_class)
    raise ValueError(f"unknown class key {class_key!r}; expected one of {CLASS_KEYS}")


def average_precision_11pt(flags: Sequence[bool], npos: int) -> float:
    """11-point interpolated AP of a ranked list of TP/FP flags."""
    if npos <= 0:
        raise ValueError("AP needs at least one positive")
    tp = np.cumsum(np.asarray(flags, dtype=np.int64))
    ranks = np.arange(1, len(tp) + 1)
    precision = tp / ranks if len(tp) else np.zeros(0)
    total = 0.0
    for level in range(11):
        # recall >= level/10, compared exactly in integers
        ok = 10 * tp >= level * npos
        total += float(precision[ok].max()) if ok.any() else 0.0
    return total / 11.0


@dataclass
class EvalReport:
    mode: str
    iou_threshold: float
    class_key: str
    per_class: dict[str, dict] = field(default_factory=dict)
    mean_ap: float = 0.0
    recall: dict[str, float] = field(default_factory=dict)
    num_gt: int = 0
    num_detections: int = 0

    def to_dict(self) -> dict:
        return {
            "mode": self.mode,
            "iou_threshold": self.iou_threshold,
            "class_key": self.class_key,
            "mAP": self.mean_ap,
            "recall": self.recall,
            "num_gt": self.num_gt,
            "num_detections": self.num_detections,
            "per_class": self.per_class,
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, indent=1)

    def table(self) -> str:
        lines = [
            f"mode={self.mode} iou>{self.iou_threshold} classes={self.class_key}",
            f"ground truth {self.num_gt}, detections {self.num_detections}",
            f"mAP (11-pt) {100 * self.mean_ap:6.2f}  over {len(self.per_class)} classes",
        ]
        for x, r in self.recall.items():
            lines.append(f"R@{x:<5} {100 * r:6.2f}")
        return "\n".join(lines)


def interpolated_map(
    dets_by_image: Mapping[str, Sequence[Triplet]],
    gts_by_image: Mapping[str, Sequence[Triplet]],
    mode: MatchMode,
    class_key: str = "triplet",
) -> EvalReport:
    """Per-class 11-point AP and their mean over classes with ground truth."""
    gts_cls: dict[tuple, dict[str, list[Triplet]]] = defaultdict(lambda: defaultdict(list))
    for image_id, gts in gts_by_image.items():
        for gt in gts:
            gts_cls[class_of(gt, class_key)][image_id].append(gt)
    dets_cls: dict[tuple, list[tuple[str, Triplet]]] = defaultdict(list)
    for image_id, dets in dets_by_image.items():
        for d in dets:
            dets_cls[class_of(d, class_key)].append((image_id, d))

    report = EvalReport(mode.variant, mode.iou_threshold, class_key)
    report.num_gt = sum(len(g) for g in gts_by_image.values())
    report.num_detections = sum(len(d) for d in dets_by_image.values())
    aps = []
    for cls in sorted(gts_cls):
        per_image = gts_cls[cls]
        npos = sum(len(v) for v in per_image.values())
        ranked = sorted(dets_cls.get(cls, []), key=lambda t: -t[1].score)
        used = {image_id: [False] * len(v) for image_id, v in per_image.items()}
        flags = []
        for image_id, det in ranked:
            gts = per_image.get(image_id)
            g = None if gts is None else _best_match(det, gts, used[image_id], mode)
            if g is not None:
                used[image_id][g] = True
            flags.append(g is not None)
        ap = average_precision_11pt(flags, npos)
        aps.append(ap)
        report.per_class["-".join(str(c) for c in cls)] = {"ap": ap, "npos": npos, "ndet": len(ranked)}
    report.mean_ap = float(np.mean(aps)) if aps else 0.0
    return report


def zero_shot_filter(gts: Sequence[Triplet], seen: set[tuple[int, int, int]]) -> list[Triplet]:
    """Keep ground truths whose (subject class, predicate, object class) is unseen."""
    return [g for g in gts if g.category not in seen]


def cap_per_image(dets_by_image: Mapping[str, Sequence[Triplet]], cap: int | None) -> dict[str, list[Triplet]]:
    if cap is None:
        return {k: list(v) for k, v in dets_by_image.items()}
    return {k: _sorted(v)[:cap] for k, v in dets_by_image.items()}
