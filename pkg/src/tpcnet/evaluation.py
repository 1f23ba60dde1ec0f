"""Frame-level retrieval mAP and segment-level detection mAP.

Average precision is the non-interpolated form: the mean, over positives, of
the precision at each positive's rank.  Ranking is stable, so ties keep their
input order (frames) or fall back to start frame then length (segments).
"""
from __future__ import annotations

import json
import logging
from collections import defaultdict
from dataclasses import dataclass, field
from typing import Dict, Iterable, List, Optional, Sequence

import numpy as np

from .segments import Segment, iou

log = logging.getLogger(__name__)

IOU_THRESHOLDS = (0.3, 0.4, 0.5, 0.6, 0.7)


def average_precision(scores: np.ndarray, positives: np.ndarray) -> float:
    """AP of ranking ``scores`` (descending) against boolean ``positives``."""
    positives = np.asarray(positives, dtype=bool)
    n_pos = int(positives.sum())
    if n_pos == 0:
        raise ValueError("average precision is undefined without positives")
    order = np.argsort(-np.asarray(scores, dtype=np.float64), kind="stable")
    hits = positives[order]
    ranks = np.flatnonzero(hits) + 1
    return float(np.sum(np.arange(1, n_pos + 1) / ranks) / n_pos)


def ap_from_hits(hits: Sequence[bool], n_positives: int) -> float:
    """AP from an already ranked true/false-positive list and the positive count."""
    hits = np.asarray(hits, dtype=bool)
    if n_positives == 0:
        raise ValueError("average precision is undefined without positives")
    ranks = np.flatnonzero(hits) + 1
    return float(np.sum(np.arange(1, len(ranks) + 1) / ranks) / n_positives)


@dataclass
class FrameLevelResult:
    ap: Dict[int, float]
    mAP: float


@dataclass
class SegmentLevelResult:
    thresholds: tuple
    ap: Dict[float, Dict[int, float]]
    mAP: Dict[float, float]


def frame_level_map(scores: Dict[str, np.ndarray], labels: Dict[str, np.ndarray],
                    num_classes: int) -> FrameLevelResult:
    """Rank every frame of every video per class and average the per-class APs.

    Args:
        scores: video id -> (frames, K+1) score matrix.
        labels: video id -> (frames,) class ids, 0 for background.
        num_classes: K; classes 1..K are evaluated.
    """
    if set(scores) != set(labels):
        missing = sorted(set(scores) ^ set(labels))
        raise ValueError(f"scores and labels cover different videos: {missing}")
    vids = sorted(scores)
    for v in vids:
        if scores[v].shape[0] != len(labels[v]):
            raise ValueError(f"video {v}: {scores[v].shape[0]} score rows but {len(labels[v])} labels")
    S = np.concatenate([scores[v] for v in vids])
    Y = np.concatenate([np.asarray(labels[v]) for v in vids])
    ap = {}
    for c in range(1, num_classes + 1):
        pos = Y == c
        if not pos.any():
            log.warning("class %d has no positive frames; excluded from mAP", c)
            continue
        ap[c] = average_precision(S[:, c], pos)
    return FrameLevelResult(ap, float(np.mean(list(ap.values()))) if ap else float("nan"))


def _det_key(seg: Segment):
    return (-seg.confidence, seg.start, -seg.length)


def match_detections(detections: Sequence[Segment], truths: Sequence[Segment], threshold: float) -> List[bool]:
    """Greedy matching of one class's detections, in ranked order.

    Each detection takes the unmatched same-video ground truth with the
    highest IoU; it is a true positive when that IoU exceeds ``threshold``.
    """
    by_video: Dict[str, List[Segment]] = defaultdict(list)
    for gt in truths:
        by_video[gt.video_id].append(gt)
    used = set()
    hits = []
    for det in sorted(detections, key=_det_key):
        best, best_iou = None, -1.0
        for j, gt in enumerate(by_video.get(det.video_id, ())):
            if (det.video_id, j) in used:
                continue
            o = iou(det, gt)
            if o > best_iou:
                best, best_iou = j, o
        if best is not None and best_iou > threshold:
            used.add((det.video_id, best))
            hits.append(True)
        else:
            hits.append(False)
    return hits


def segment_level_map(detections: Sequence[Segment], ground_truth: Sequence[Segment],
                      iou_thresholds: Sequence[float] = IOU_THRESHOLDS, num_classes: Optional[int] = None,
                      videos: Optional[Iterable[str]] = None) -> SegmentLevelResult:
    """Detection mAP at each IoU threshold.

    Classes are 1..``num_classes`` (default: the classes present in
    ``ground_truth``); classes without ground truth are skipped with a warning.
    """
    known = set(videos) if videos is not None else {g.video_id for g in ground_truth}
    unknown = sorted({d.video_id for d in detections} - known)
    if unknown:
        raise ValueError(f"detections reference unknown videos: {', '.join(unknown)}")
    classes = range(1, num_classes + 1) if num_classes else sorted({g.class_id for g in ground_truth})
    dets_by_class = defaultdict(list)
    gts_by_class = defaultdict(list)
    for d in detections:
        dets_by_class[d.class_id].append(d)
    for g in ground_truth:
        gts_by_class[g.class_id].append(g)

    ap: Dict[float, Dict[int, float]] = {}
    for thr in iou_thresholds:
        ap[thr] = {}
        for c in classes:
            if not gts_by_class[c]:
                log.warning("class %d has no ground-truth segments; excluded from mAP", c)
                continue
            hits = match_detections(dets_by_class[c], gts_by_class[c], thr)
            ap[thr][c] = ap_from_hits(hits, len(gts_by_class[c]))
    mAP = {thr: float(np.mean(list(v.values()))) if v else float("nan") for thr, v in ap.items()}
    return SegmentLevelResult(tuple(iou_thresholds), ap, mAP)


# ----------------------------------------------------------------------------
# reports
# ----------------------------------------------------------------------------


def report_dict(frame: Optional[FrameLevelResult] = None, segment: Optional[SegmentLevelResult] = None) -> dict:
    out = {}
    if frame is not None:
        out["frame"] = {"ap": {str(c): v for c, v in frame.ap.items()}, "mAP": frame.mAP}
    if segment is not None:
        out["segment"] = {
            "iou_thresholds": list(segment.thresholds),
            "ap": {f"{t:g}": {str(c): v for c, v in segment.ap[t].items()} for t in segment.thresholds},
            "mAP": {f"{t:g}": segment.mAP[t] for t in segment.thresholds},
        }
    return out


def report_json(frame=None, segment=None) -> str:
    return json.dumps(report_dict(frame, segment), indent=2)


def report_text(frame: Optional[FrameLevelResult] = None, segment: Optional[SegmentLevelResult] = None) -> str:
    lines = []
    if frame is not None:
        lines.append("frame-level AP")
        lines.append(f"{'class':>8}  {'AP':>8}")
        for c, v in frame.ap.items():
            lines.append(f"{c:>8}  {v:8.4f}")
        lines.append(f"{'mAP':>8}  {frame.mAP:8.4f}")
    if segment is not None:
        if lines:
            lines.append("")
        lines.append("segment-level AP by IoU threshold")
        header = f"{'class':>8}" + "".join(f"  {t:>8g}" for t in segment.thresholds)
        lines.append(header)
        classes = sorted({c for t in segment.thresholds for c in segment.ap[t]})
        for c in classes:
            lines.append(f"{c:>8}" + "".join(f"  {segment.ap[t].get(c, float('nan')):8.4f}"
                                             for t in segment.thresholds))
        lines.append(f"{'mAP':>8}" + "".join(f"  {segment.mAP[t]:8.4f}" for t in segment.thresholds))
    return "\n".join(lines) + "\n"
