"""Inference and metrics: test-time scoring, detection post-processing, CorLoc, VOC-style AP.

Test-time region scores are v*p per class, averaged over feature views.
The importance weights v default to an unmasked softmax over all regions
(labels are unknown at test time); a label-free top-M mask by class
probability is available for ablation.
"""

from __future__ import annotations

import csv
import json
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from wsdsel.data import Dataset, ImageBag
from wsdsel.geometry import BBox, Detection, box_vote, iou, nms
from wsdsel.head import HeadParams, class_softmax, masked_softmax

MASK_MODES = ("all", "top_mpt")


@dataclass
class EvalOptions:
    mask_mode: str = "all"
    top_m: int = 128  # top-M budget when mask_mode == "top_mpt"; also the concentration k
    ap_protocol: str = "eleven_point"  # or "area"
    nms_threshold: float = 0.6
    vote_threshold: float = 0.5
    score_floor: float = 1e-4
    iou_threshold: float = 0.5


@dataclass
class EvalReport:
    per_class_ap: list[float]
    map: float
    per_class_corloc: list[float]  # NaN for classes with no positive image
    mean_corloc: float
    n_images: int
    diagnostics: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {
            "per_class_ap": self.per_class_ap,
            "map": self.map,
            "per_class_corloc": [None if math.isnan(v) else v for v in self.per_class_corloc],
            "mean_corloc": None if math.isnan(self.mean_corloc) else self.mean_corloc,
            "n_images": self.n_images,
            "diagnostics": self.diagnostics,
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=1, sort_keys=True) + "\n"


def _view_outputs(params: HeadParams, feats: np.ndarray):
    x = np.asarray(feats, dtype=np.float64)
    p = class_softmax(x @ params.w_cls.T.astype(np.float64) + params.b_cls.astype(np.float64))
    logits_imp = x @ params.w_imp.T.astype(np.float64) + params.b_imp.astype(np.float64)
    return p, logits_imp


def _test_mask(p: np.ndarray, mask_mode: str, top_m: int) -> np.ndarray:
    n, c = p.shape
    if mask_mode == "all":
        return np.ones((n, c), dtype=bool)
    if mask_mode == "top_mpt":
        h = np.zeros((n, c), dtype=bool)
        budget = min(n, top_m)
        for j in range(c):
            order = np.argsort(-p[:, j], kind="stable")
            h[order[:budget], j] = True
        return h
    raise ValueError(f"unknown mask_mode {mask_mode!r}, expected one of {MASK_MODES}")


def infer_image(params: HeadParams, bag: ImageBag, mask_mode: str = "all", top_m: int = 128) -> np.ndarray:
    """Per-region per-class confidence scores v*p, averaged over views."""
    total = np.zeros((bag.n_regions, params.num_classes))
    for feats in bag.views:
        p, logits_imp = _view_outputs(params, feats)
        h = _test_mask(p, mask_mode, top_m)
        v = np.zeros_like(p)
        for j in range(p.shape[1]):
            v[:, j] = masked_softmax(logits_imp[:, j], h[:, j])
        total += v * p
    return total / len(bag.views)


def detect(
    scores: np.ndarray,
    proposals: list[BBox],
    nms_threshold: float = 0.6,
    vote_threshold: float = 0.5,
    score_floor: float = 1e-4,
) -> list[Detection]:
    """Per-class NMS plus box voting over the pre-NMS candidate pool."""
    out: list[Detection] = []
    n, c = scores.shape
    for j in range(c):
        pool = [
            Detection(box=proposals[i], class_id=j, score=float(scores[i, j]))
            for i in range(n)
            if scores[i, j] >= score_floor
        ]
        if not pool:
            continue
        for kept in nms(pool, nms_threshold):
            voted = box_vote(kept, pool, vote_threshold)
            out.append(Detection(box=voted, class_id=j, score=kept.score))
    return out


def corloc(
    dataset: Dataset,
    params: HeadParams,
    mask_mode: str = "all",
    top_m: int = 128,
    iou_threshold: float = 0.5,
) -> tuple[list[float], float]:
    """Top-1 localization accuracy over positive images, per class and mean.

    The single highest-scoring proposal (raw scores, no NMS) is correct iff
    it overlaps a ground-truth box of the class with IoU >= the threshold.
    Classes without positive images are reported as NaN and excluded from
    the mean.
    """
    c = dataset.num_classes
    correct = np.zeros(c)
    positives = np.zeros(c)
    for bag in dataset.images:
        score = None
        for j in range(c):
            if not bag.labels[j]:
                continue
            if score is None:
                score = infer_image(params, bag, mask_mode, top_m)
            positives[j] += 1
            top = int(np.argmax(score[:, j]))
            box = bag.proposals[top]
            gt_boxes = [b for cls, b in bag.ground_truth if cls == j]
            if any(iou(box, g) >= iou_threshold for g in gt_boxes):
                correct[j] += 1
    per_class = [correct[j] / positives[j] if positives[j] else float("nan") for j in range(c)]
    defined = [v for v in per_class if not math.isnan(v)]
    mean = sum(defined) / len(defined) if defined else float("nan")
    return per_class, mean


def _pr_curve(
    dets: list[tuple[str, float, BBox]],
    gts: dict[str, list[BBox]],
    iou_threshold: float,
) -> tuple[np.ndarray, np.ndarray, int]:
    """Greedy matching -> (recall, precision) arrays in rank order.

    A detection is a true positive iff its best-IoU *unmatched* ground
    truth in the same image reaches the threshold. Ties in score keep
    input order.
    """
    npos = sum(len(v) for v in gts.values())
    order = sorted(range(len(dets)), key=lambda i: (-dets[i][1], i))
    matched: dict[str, list[bool]] = {img: [False] * len(boxes) for img, boxes in gts.items()}
    tp = np.zeros(len(dets))
    for rank, i in enumerate(order):
        image_id, _, box = dets[i]
        boxes = gts.get(image_id, [])
        flags = matched.get(image_id, [])
        best, best_j = 0.0, -1
        for j, g in enumerate(boxes):
            if flags[j]:
                continue
            ov = iou(box, g)
            if ov > best:
                best, best_j = ov, j
        if best_j >= 0 and best >= iou_threshold:
            tp[rank] = 1.0
            flags[best_j] = True
    cum_tp = np.cumsum(tp)
    cum_fp = np.cumsum(1.0 - tp)
    recall = cum_tp / npos if npos > 0 else np.zeros(len(dets))
    precision = cum_tp / np.maximum(cum_tp + cum_fp, 1.0)
    return recall, precision, npos


def _ap_eleven_point(recall: np.ndarray, precision: np.ndarray) -> float:
    ap = 0.0
    for r in np.linspace(0.0, 1.0, 11):
        mask = recall >= r
        ap += precision[mask].max() if mask.any() else 0.0
    return ap / 11.0


def _ap_area(recall: np.ndarray, precision: np.ndarray) -> float:
    r = np.concatenate(([0.0], recall, [1.0]))
    p = np.concatenate(([0.0], precision, [0.0]))
    for i in range(len(p) - 2, -1, -1):
        p[i] = max(p[i], p[i + 1])
    idx = np.where(r[1:] != r[:-1])[0]
    return float(((r[idx + 1] - r[idx]) * p[idx + 1]).sum())


def voc_ap(
    dets: list[tuple[str, float, BBox]],
    gts: dict[str, list[BBox]],
    iou_threshold: float = 0.5,
    protocol: str = "eleven_point",
) -> float:
    """Average precision for one class across images.

    `dets` are (image_id, score, box) triples; `gts` maps image id to the
    ground-truth boxes of the class. With no ground truth the AP is 0 by
    definition (flagged by the caller).
    """
    recall, precision, npos = _pr_curve(dets, gts, iou_threshold)
    if npos == 0 or len(dets) == 0:
        return 0.0
    if protocol == "eleven_point":
        return _ap_eleven_point(recall, precision)
    if protocol == "area":
        return _ap_area(recall, precision)
    raise ValueError(f"unknown AP protocol {protocol!r}")


def evaluate_map(
    dataset: Dataset,
    params: HeadParams,
    options: EvalOptions | None = None,
    threads: int = 1,
) -> EvalReport:
    """Full pipeline: inference, detection post-processing, AP/mAP plus CorLoc.

    Per-image work is pure, so `threads > 1` fans it out over a pool;
    results are folded in dataset order, identical to the sequential run.
    """
    opts = options or EvalOptions()
    c = dataset.num_classes

    def per_image(bag):
        scores = infer_image(params, bag, opts.mask_mode, opts.top_m)
        return detect(scores, bag.proposals, opts.nms_threshold, opts.vote_threshold, opts.score_floor)

    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            detections = list(pool.map(per_image, dataset.images))
    else:
        detections = [per_image(bag) for bag in dataset.images]

    dets_by_class: list[list[tuple[str, float, BBox]]] = [[] for _ in range(c)]
    gts_by_class: list[dict[str, list[BBox]]] = [{} for _ in range(c)]
    for bag, dets in zip(dataset.images, detections):
        for class_id, box in bag.ground_truth:
            gts_by_class[class_id].setdefault(bag.id, []).append(box)
        for det in dets:
            dets_by_class[det.class_id].append((bag.id, det.score, det.box))

    flagged = [j for j in range(c) if not gts_by_class[j]]
    per_class_ap = [
        voc_ap(dets_by_class[j], gts_by_class[j], opts.iou_threshold, opts.ap_protocol) for j in range(c)
    ]
    per_class_corloc, mean_corloc = corloc(dataset, params, opts.mask_mode, opts.top_m, opts.iou_threshold)
    diagnostics = {
        "weight_concentration": weight_concentration(params, dataset, opts.top_m),
        "concentration_k": opts.top_m,
        "n_detections": sum(len(d) for d in dets_by_class),
    }
    if flagged:
        diagnostics["classes_without_ground_truth"] = flagged
    return EvalReport(
        per_class_ap=per_class_ap,
        map=float(np.mean(per_class_ap)),
        per_class_corloc=per_class_corloc,
        mean_corloc=mean_corloc,
        n_images=len(dataset.images),
        diagnostics=diagnostics,
    )


def weight_concentration(params: HeadParams, dataset: Dataset, k: int) -> float:
    """Mean fraction of importance mass on the k highest-probability regions.

    Computed with the all-ones mask over positive (image, class) pairs;
    view-averaged p ranks the regions and view-averaged v carries the mass.
    """
    if k < 1:
        raise ValueError(f"k must be >= 1, got {k}")
    fractions = []
    for bag in dataset.images:
        if not bag.labels.any():
            continue
        p_sum = np.zeros((bag.n_regions, params.num_classes))
        v_sum = np.zeros_like(p_sum)
        for feats in bag.views:
            p, logits_imp = _view_outputs(params, feats)
            p_sum += p
            for j in range(params.num_classes):
                v_sum[:, j] += masked_softmax(logits_imp[:, j], np.ones(bag.n_regions, dtype=bool))
        p_mean = p_sum / len(bag.views)
        v_mean = v_sum / len(bag.views)
        for j in range(params.num_classes):
            if not bag.labels[j]:
                continue
            top = np.argsort(-p_mean[:, j], kind="stable")[: min(k, bag.n_regions)]
            fractions.append(float(v_mean[top, j].sum()))
    return float(np.mean(fractions)) if fractions else float("nan")


def dump_pr_curves(
    dataset: Dataset,
    params: HeadParams,
    options: EvalOptions,
    path: str | Path,
):
    """Write one CSV row per (class, rank) with recall/precision columns."""
    opts = options
    c = dataset.num_classes
    dets_by_class: list[list[tuple[str, float, BBox]]] = [[] for _ in range(c)]
    gts_by_class: list[dict[str, list[BBox]]] = [{} for _ in range(c)]
    for bag in dataset.images:
        for class_id, box in bag.ground_truth:
            gts_by_class[class_id].setdefault(bag.id, []).append(box)
        scores = infer_image(params, bag, opts.mask_mode, opts.top_m)
        for det in detect(scores, bag.proposals, opts.nms_threshold, opts.vote_threshold, opts.score_floor):
            dets_by_class[det.class_id].append((bag.id, det.score, det.box))
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["class", "rank", "score", "recall", "precision"])
        for j in range(c):
            dets = sorted(dets_by_class[j], key=lambda t: -t[1])
            recall, precision, _ = _pr_curve(dets_by_class[j], gts_by_class[j], opts.iou_threshold)
            for rank, (rec, prec) in enumerate(zip(recall, precision)):
                writer.writerow([dataset.class_names[j], rank, f"{dets[rank][1]:.6g}", f"{rec:.6f}", f"{prec:.6f}"])
