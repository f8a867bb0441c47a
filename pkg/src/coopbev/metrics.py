"""Detection metrics: greedy matching, average precision, late fusion.

Matching is the standard detection protocol: predictions are visited in
descending score (ties broken by input index), each claims the highest-
IoU unmatched ground truth in its scene if that IoU clears the
threshold. AP integrates the all-point-interpolated precision-recall
curve, so it is exactly computable and oracle-checkable.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field

import numpy as np

from .boxes import DetectionBox, rotated_iou, rotated_nms
from .errors import MetricError
from .geometry import Pose2D

IOU_THRESHOLDS = (0.5, 0.7)


def _match_ranked(preds_per_scene: list[list[DetectionBox]],
                  gts_per_scene: list[list[DetectionBox]],
                  iou_thresh: float) -> tuple[np.ndarray, int]:
    """Global score-ranked TP/FP labels and the total ground-truth count."""
    if len(preds_per_scene) != len(gts_per_scene):
        raise MetricError("prediction and ground-truth scene counts differ")
    n_gt = sum(len(g) for g in gts_per_scene)
    if n_gt == 0:
        raise MetricError("no ground-truth boxes: recall is undefined")

    flat = []
    for s, preds in enumerate(preds_per_scene):
        for k, p in enumerate(preds):
            score = p.score if p.score is not None else 1.0
            flat.append((-score, s, k, p))
    flat.sort(key=lambda t: (t[0], t[1], t[2]))

    used: list[set[int]] = [set() for _ in gts_per_scene]
    labels = np.zeros(len(flat), dtype=bool)
    for rank, (_, s, _, p) in enumerate(flat):
        best_iou, best_g = 0.0, -1
        for g, gt in enumerate(gts_per_scene[s]):
            if g in used[s]:
                continue
            iou = rotated_iou(p, gt)
            if iou >= iou_thresh and iou > best_iou:
                best_iou, best_g = iou, g
        if best_g >= 0:
            used[s].add(best_g)
            labels[rank] = True
    return labels, n_gt


def pr_curve(preds_per_scene: list[list[DetectionBox]],
             gts_per_scene: list[list[DetectionBox]],
             iou_thresh: float) -> tuple[np.ndarray, np.ndarray]:
    """Recall and precision after each ranked prediction."""
    labels, n_gt = _match_ranked(preds_per_scene, gts_per_scene, iou_thresh)
    tp = np.cumsum(labels)
    fp = np.cumsum(~labels)
    recall = tp / n_gt
    precision = tp / np.maximum(tp + fp, 1)
    return recall, precision


def average_precision(preds_per_scene: list[list[DetectionBox]],
                      gts_per_scene: list[list[DetectionBox]],
                      iou_thresh: float) -> float:
    """Area under the all-point-interpolated precision-recall curve."""
    recall, precision = pr_curve(preds_per_scene, gts_per_scene, iou_thresh)
    if recall.size == 0:
        return 0.0
    envelope = np.maximum.accumulate(precision[::-1])[::-1]
    r_prev = 0.0
    ap = 0.0
    for r, p in zip(recall, envelope):
        ap += (r - r_prev) * p
        r_prev = r
    return float(ap)


def match_counts(preds: list[DetectionBox], gts: list[DetectionBox],
                 iou_thresh: float) -> tuple[int, int, int]:
    """(TP, FP, FN) for one scene at the detector's operating point."""
    order = sorted(range(len(preds)),
                   key=lambda i: (-(preds[i].score if preds[i].score is not None else 1.0), i))
    used: set[int] = set()
    tp = 0
    for i in order:
        best_iou, best_g = 0.0, -1
        for g, gt in enumerate(gts):
            if g in used:
                continue
            iou = rotated_iou(preds[i], gt)
            if iou >= iou_thresh and iou > best_iou:
                best_iou, best_g = iou, g
        if best_g >= 0:
            used.add(best_g)
            tp += 1
    return tp, len(preds) - tp, len(gts) - tp


def late_fusion_baseline(ego_preds: list[DetectionBox],
                         sender_preds: list[DetectionBox],
                         rel_pose: Pose2D, nms_iou: float = 0.15) -> list[DetectionBox]:
    """Union of both vehicles' final detections, deduplicated with NMS.

    rel_pose is the sender frame expressed in the ego frame; sender
    boxes are transformed before merging.
    """
    merged = list(ego_preds) + [b.transformed(rel_pose) for b in sender_preds]
    return rotated_nms(merged, nms_iou)


@dataclass
class EvalResult:
    mode: str
    ap_50: float
    ap_70: float
    curve_50: list[list[float]] = field(default_factory=list)
    curve_70: list[list[float]] = field(default_factory=list)
    per_scene: list[dict] = field(default_factory=list)
    config_hash: str = ""
    seeds: list[int] = field(default_factory=list)

    def to_dict(self) -> dict:
        return {
            "mode": self.mode,
            "ap_50": self.ap_50,
            "ap_70": self.ap_70,
            "curve_50": self.curve_50,
            "curve_70": self.curve_70,
            "per_scene": self.per_scene,
            "config_hash": self.config_hash,
            "seeds": self.seeds,
        }

    def result_hash(self) -> str:
        payload = json.dumps(self.to_dict(), sort_keys=True).encode()
        return hashlib.sha256(payload).hexdigest()[:16]


def evaluate_detections(mode: str,
                        preds_per_scene: list[list[DetectionBox]],
                        gts_per_scene: list[list[DetectionBox]],
                        config_hash: str = "",
                        seeds: list[int] | None = None) -> EvalResult:
    curves = {}
    aps = {}
    for thr in IOU_THRESHOLDS:
        recall, precision = pr_curve(preds_per_scene, gts_per_scene, thr)
        curves[thr] = [[float(r), float(p)] for r, p in zip(recall, precision)]
        aps[thr] = average_precision(preds_per_scene, gts_per_scene, thr)
    per_scene = []
    for s, (preds, gts) in enumerate(zip(preds_per_scene, gts_per_scene)):
        row = {"scene": s}
        for thr in IOU_THRESHOLDS:
            tp, fp, fn = match_counts(preds, gts, thr)
            key = str(int(round(thr * 100)))
            row[f"tp{key}"], row[f"fp{key}"], row[f"fn{key}"] = tp, fp, fn
        per_scene.append(row)
    return EvalResult(mode=mode, ap_50=aps[0.5], ap_70=aps[0.7],
                      curve_50=curves[0.5], curve_70=curves[0.7],
                      per_scene=per_scene, config_hash=config_hash,
                      seeds=list(seeds or []))
