"""Axis-aligned bounding-box arithmetic: IoU, NMS, and box voting."""

from __future__ import annotations

import math
from dataclasses import dataclass


@dataclass(frozen=True)
class BBox:
    """Axis-aligned box with strictly positive area (x1 < x2, y1 < y2)."""

    x1: float
    y1: float
    x2: float
    y2: float

    def __post_init__(self):
        if not all(math.isfinite(v) for v in (self.x1, self.y1, self.x2, self.y2)):
            raise ValueError(f"non-finite box coordinates: {self}")
        if self.x1 >= self.x2 or self.y1 >= self.y2:
            raise ValueError(f"degenerate box (non-positive area): {self}")

    @property
    def area(self) -> float:
        return (self.x2 - self.x1) * (self.y2 - self.y1)

    def as_tuple(self) -> tuple[float, float, float, float]:
        return (self.x1, self.y1, self.x2, self.y2)


@dataclass(frozen=True)
class Detection:
    """A scored, class-labeled box."""

    box: BBox
    class_id: int
    score: float

    def __post_init__(self):
        if not math.isfinite(self.score) or self.score < 0.0:
            raise ValueError(f"detection score must be finite and non-negative, got {self.score}")


def iou(a: BBox, b: BBox) -> float:
    """Intersection-over-union of two boxes; symmetric, 0 when disjoint."""
    ix1 = max(a.x1, b.x1)
    iy1 = max(a.y1, b.y1)
    ix2 = min(a.x2, b.x2)
    iy2 = min(a.y2, b.y2)
    iw = ix2 - ix1
    ih = iy2 - iy1
    if iw <= 0.0 or ih <= 0.0:
        return 0.0
    inter = iw * ih
    return inter / (a.area + b.area - inter)


def nms(dets: list[Detection], threshold: float) -> list[Detection]:
    """Greedy non-maximum suppression within one class.

    Detections are visited in descending score order (ties broken by input
    order); one is removed iff its IoU with an already-kept, higher-scored
    detection exceeds `threshold`. Output is sorted by descending score.
    """
    if not 0.0 < threshold <= 1.0:
        raise ValueError(f"nms threshold must be in (0, 1], got {threshold}")
    if len({d.class_id for d in dets}) > 1:
        raise ValueError("nms expects detections of a single class")
    order = sorted(range(len(dets)), key=lambda i: (-dets[i].score, i))
    kept: list[Detection] = []
    for i in order:
        if all(iou(dets[i].box, k.box) <= threshold for k in kept):
            kept.append(dets[i])
    return kept


def box_vote(kept: Detection, pool: list[Detection], vote_threshold: float) -> BBox:
    """Refine a kept detection by score-weighted averaging of overlapping boxes.

    Every pool box with iou(box, kept.box) >= vote_threshold votes with weight
    equal to its score. `pool` is expected to contain `kept`, so the voter set
    is never empty; if all voter scores are zero the kept box is returned
    unchanged.
    """
    wx1 = wy1 = wx2 = wy2 = 0.0
    total = 0.0
    for d in pool:
        if iou(d.box, kept.box) >= vote_threshold:
            w = d.score
            wx1 += w * d.box.x1
            wy1 += w * d.box.y1
            wx2 += w * d.box.x2
            wy2 += w * d.box.y2
            total += w
    if total <= 0.0:
        return kept.box
    return BBox(wx1 / total, wy1 / total, wx2 / total, wy2 / total)
