"""From per-frame class scores to scored temporal segments.

Two routes are provided: classifying and trimming externally supplied
proposals, and the frame grouping method (threshold the per-frame scores at
several levels and turn each run of above-threshold frames into a segment).
Both finish with per-class temporal NMS.
"""
from __future__ import annotations

from collections import defaultdict
from typing import Dict, Iterable, List, Optional, Sequence

import numpy as np

from .segments import Segment, iou

DEFAULT_FGM_THRESHOLDS = tuple(np.round(np.arange(1, 10) / 10, 1))
DEFAULT_NMS_THRESHOLD = 0.4


def check_score_matrix(scores: np.ndarray, video_id: str = "?") -> np.ndarray:
    """Validate a (frames, K+1) row-stochastic score matrix."""
    scores = np.asarray(scores, dtype=np.float64)
    if scores.ndim != 2 or scores.shape[1] < 2:
        raise ValueError(f"{video_id}: score matrix must be (frames, K+1), got {scores.shape}")
    if np.any(scores < -1e-9) or np.any(np.abs(scores.sum(axis=1) - 1) > 1e-6):
        raise ValueError(f"{video_id}: score rows must be probability vectors")
    return scores


def _check_bounds(seg: Segment, scores: np.ndarray) -> None:
    if seg.end >= scores.shape[0]:
        raise ValueError(f"segment [{seg.start}, {seg.end}] outside video {seg.video_id} "
                         f"of {scores.shape[0]} frames")


def classify_proposal(proposal: Segment, scores: np.ndarray) -> Optional[Segment]:
    """Label a proposal with the class of highest mean score over its frames.

    Returns None when that class is background (index 0).
    """
    _check_bounds(proposal, scores)
    mean = scores[proposal.start:proposal.end + 1].mean(axis=0)
    c = int(np.argmax(mean))
    if c == 0:
        return None
    return Segment(proposal.video_id, proposal.start, proposal.end, c, float(mean[c]))


def refine_boundaries(segment: Segment, scores: np.ndarray, threshold: float) -> Optional[Segment]:
    """Move both ends inward past frames whose class score is below ``threshold``.

    Each end stops at the first frame scoring at least ``threshold``; dips
    inside the segment are left alone.  The refined confidence is the mean
    class score over the remaining frames.  Returns None if no frame passes.
    """
    _check_bounds(segment, scores)
    col = scores[:, segment.class_id]
    lo, hi = segment.start, segment.end
    while lo <= hi and col[lo] < threshold:
        lo += 1
    while hi >= lo and col[hi] < threshold:
        hi -= 1
    if lo > hi:
        return None
    return Segment(segment.video_id, lo, hi, segment.class_id, float(col[lo:hi + 1].mean()))


def runs(mask: np.ndarray) -> List[tuple]:
    """Inclusive (start, end) of every maximal run of True values."""
    padded = np.concatenate([[False], np.asarray(mask, dtype=bool), [False]])
    edges = np.flatnonzero(np.diff(padded.astype(np.int8)))
    return [(int(s), int(e) - 1) for s, e in zip(edges[::2], edges[1::2])]


def fgm(scores: np.ndarray, video_id: str, thresholds: Sequence[float] = DEFAULT_FGM_THRESHOLDS,
        min_len: int = 1) -> List[Segment]:
    """Frame grouping: runs of frames scoring >= threshold, pooled over thresholds and classes.

    A run's confidence is the mean class score over its frames.  Duplicates
    across thresholds are kept; NMS is expected to follow.
    """
    if len(thresholds) == 0:
        raise ValueError("fgm needs at least one threshold")
    if any(not 0 < t < 1 for t in thresholds):
        raise ValueError(f"fgm thresholds must lie in (0, 1), got {list(thresholds)}")
    segments = []
    for c in range(1, scores.shape[1]):
        col = scores[:, c]
        for tau in thresholds:
            for s, e in runs(col >= tau):
                if e - s + 1 >= min_len:
                    segments.append(Segment(video_id, s, e, c, float(col[s:e + 1].mean())))
    return segments


def _nms_key(seg: Segment):
    return (-seg.confidence, seg.start, -seg.length, seg.end)


def nms(segments: Iterable[Segment], overlap_threshold: float = DEFAULT_NMS_THRESHOLD) -> List[Segment]:
    """Greedy per-(video, class) suppression of segments overlapping a kept one by IoU > threshold.

    Candidates are visited by confidence (descending), then start (ascending),
    so the result does not depend on input order.
    """
    groups: Dict[tuple, List[Segment]] = defaultdict(list)
    for seg in segments:
        groups[seg.video_id, seg.class_id].append(seg)
    kept = []
    for key in sorted(groups):
        survivors: List[Segment] = []
        for seg in sorted(groups[key], key=_nms_key):
            if all(iou(seg, k) <= overlap_threshold for k in survivors):
                survivors.append(seg)
        kept.extend(survivors)
    return sorted(kept, key=lambda s: (s.video_id,) + _nms_key(s))


def select_thresholds(scores: Dict[str, np.ndarray], labels: Dict[str, np.ndarray], num_classes: int,
                      grid: Sequence[float] = tuple(np.round(np.arange(0.05, 1.0, 0.05), 2))) -> Dict[int, float]:
    """Per-class refinement threshold maximising frame-level F1 on labelled data.

    Classes without positive frames fall back to 1 / (K + 1).
    """
    vids = sorted(scores)
    S = np.concatenate([scores[v] for v in vids])
    Y = np.concatenate([labels[v] for v in vids])
    out = {}
    for c in range(1, num_classes + 1):
        pos = Y == c
        if not pos.any():
            out[c] = 1.0 / (num_classes + 1)
            continue
        best, best_f1 = 1.0 / (num_classes + 1), -1.0
        for tau in grid:
            pred = S[:, c] >= tau
            tp = np.count_nonzero(pred & pos)
            f1 = 2 * tp / (np.count_nonzero(pred) + np.count_nonzero(pos))
            if f1 > best_f1:
                best, best_f1 = float(tau), f1
        out[c] = best
    return out


def localize_refine(proposals: Sequence[Segment], scores: Dict[str, np.ndarray],
                    thresholds: Dict[int, float] | float,
                    overlap_threshold: float = DEFAULT_NMS_THRESHOLD) -> List[Segment]:
    """Classify, trim and suppress externally supplied proposals."""
    out = []
    for prop in proposals:
        if prop.video_id not in scores:
            raise KeyError(f"no score matrix for video {prop.video_id}")
        seg = classify_proposal(prop, scores[prop.video_id])
        if seg is None:
            continue
        tau = thresholds[seg.class_id] if isinstance(thresholds, dict) else thresholds
        seg = refine_boundaries(seg, scores[prop.video_id], tau)
        if seg is not None:
            out.append(seg)
    return nms(out, overlap_threshold)


def localize_fgm(scores: Dict[str, np.ndarray], thresholds: Sequence[float] = DEFAULT_FGM_THRESHOLDS,
                 min_len: int = 1, overlap_threshold: float = DEFAULT_NMS_THRESHOLD) -> List[Segment]:
    out = []
    for vid in sorted(scores):
        out.extend(fgm(scores[vid], vid, thresholds, min_len))
    return nms(out, overlap_threshold)
