"""Deterministic synthetic untrimmed videos with frame-exact annotations.

Every action instance is a bright square drifting across a noisy background.
All classes share the same appearance; they differ only in the direction and
speed of motion, so a single frame does not reveal the class and the model has
to look across time.  The first two frames of each instance fade in.
"""
from __future__ import annotations

import json
from collections import Counter
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Dict, List, Sequence, Tuple

import numpy as np

from .segments import Segment, read_segments, write_segments
from .tensor_core import load_tensor, save_tensor

SPLITS = ("train", "test")

# (dy, dx) pixels per frame; classes beyond the table reuse it at double speed
_MOTIONS = [(0, 1), (0, -1), (1, 0), (-1, 0), (1, 1), (-1, -1), (1, -1), (-1, 1)]
_RAMP = (1 / 3, 2 / 3)


@dataclass(frozen=True)
class SynthConfig:
    num_classes: int = 4
    train_videos: int = 24
    test_videos: int = 8
    frames: int = 256
    height: int = 32
    width: int = 32
    channels: int = 1
    min_length: int = 16
    max_length: int = 48
    min_instances: int = 2
    max_instances: int = 4
    noise: float = 3.0
    amplitude: float = 10.0
    square: int = 6
    min_gap: int = 4
    seed: int = 7

    def validate(self) -> None:
        if self.num_classes < 2:
            raise ValueError("need at least 2 action classes")
        if not 1 <= self.min_length <= self.max_length <= self.frames:
            raise ValueError(f"instance length range [{self.min_length}, {self.max_length}] "
                             f"does not fit {self.frames} frames")
        if not 1 <= self.min_instances <= self.max_instances:
            raise ValueError("invalid instances-per-video range")
        worst = self.max_instances * self.max_length + (self.max_instances - 1) * self.min_gap
        if worst > self.frames:
            raise ValueError(f"infeasible packing: {self.max_instances} instances of up to {self.max_length} "
                             f"frames with gap {self.min_gap} need {worst} > {self.frames} frames")
        if self.square > min(self.height, self.width):
            raise ValueError("square larger than the frame")


def motion(class_id: int) -> Tuple[int, int]:
    dy, dx = _MOTIONS[(class_id - 1) % len(_MOTIONS)]
    speed = 1 + (class_id - 1) // len(_MOTIONS)
    return dy * speed, dx * speed


def _split_rng(seed: int, split: str) -> np.random.Generator:
    return np.random.default_rng([seed, SPLITS.index(split)])


def _layout(cfg: SynthConfig, rng: np.random.Generator, n: int) -> List[Tuple[int, int]]:
    """Non-overlapping (start, end) pairs separated by at least ``min_gap`` frames."""
    lengths = rng.integers(cfg.min_length, cfg.max_length + 1, size=n)
    free = cfg.frames - int(lengths.sum()) - cfg.min_gap * (n - 1)
    if free < 0:
        raise ValueError("infeasible packing")
    cuts = np.sort(rng.integers(0, free + 1, size=n))
    gaps = np.diff(np.concatenate([[0], cuts]))
    spans, t = [], 0
    for i, (gap, length) in enumerate(zip(gaps, lengths)):
        t += int(gap) + (cfg.min_gap if i else 0)
        spans.append((t, t + int(length) - 1))
        t += int(length)
    return spans


def render_instance(video: np.ndarray, seg: Segment, rng: np.random.Generator, square: int,
                    amplitude: float = 1.0) -> None:
    """Add a moving square of brightness ``amplitude`` for ``seg`` to ``video`` (C, T, H, W) in place."""
    _, _, H, W = video.shape
    dy, dx = motion(seg.class_id)
    y0, x0 = int(rng.integers(0, H)), int(rng.integers(0, W))
    for k, t in enumerate(range(seg.start, seg.end + 1)):
        amp = amplitude * (_RAMP[k] if k < len(_RAMP) else 1.0)
        rows = (y0 + dy * k + np.arange(square)) % H
        cols = (x0 + dx * k + np.arange(square)) % W
        video[:, t][:, rows[:, None], cols[None, :]] += amp


def generate(cfg: SynthConfig, split: str = "train"):
    """Videos and annotations for one split.

    Returns:
        ``(videos, annotations)``: a dict from video id to a (C, T, H, W)
        float64 array, and the list of ground-truth segments.
    """
    cfg.validate()
    rng = _split_rng(cfg.seed, split)
    count = cfg.train_videos if split == "train" else cfg.test_videos
    per_video = rng.integers(cfg.min_instances, cfg.max_instances + 1, size=count)
    layouts = [_layout(cfg, rng, int(n)) for n in per_video]

    # each instance, in random order, goes to the class with the fewest frames so far
    flat = [(v, i) for v, spans in enumerate(layouts) for i in range(len(spans))]
    frames_per_class = np.zeros(cfg.num_classes)
    classes = {}
    for j in rng.permutation(len(flat)):
        v, i = flat[j]
        start, end = layouts[v][i]
        lowest = np.flatnonzero(frames_per_class == frames_per_class.min())
        c = int(rng.choice(lowest))
        classes[v, i] = c + 1
        frames_per_class[c] += end - start + 1

    videos, annotations = {}, []
    for v, spans in enumerate(layouts):
        vid = f"{split}_{v:03d}"
        video = rng.normal(0.0, cfg.noise, size=(cfg.channels, cfg.frames, cfg.height, cfg.width)) \
            if cfg.noise > 0 else np.zeros((cfg.channels, cfg.frames, cfg.height, cfg.width))
        for i, (start, end) in enumerate(spans):
            seg = Segment(vid, start, end, classes[v, i])
            render_instance(video, seg, rng, cfg.square, cfg.amplitude)
            annotations.append(seg)
        videos[vid] = video
    return videos, annotations


def background_gaps(annotations: Sequence[Segment], frames: int) -> List[Tuple[int, int]]:
    """Maximal inclusive frame ranges not covered by any annotation."""
    covered = np.zeros(frames, dtype=bool)
    for seg in annotations:
        covered[seg.start:seg.end + 1] = True
    gaps, t = [], 0
    while t < frames:
        if covered[t]:
            t += 1
            continue
        s = t
        while t < frames and not covered[t]:
            t += 1
        gaps.append((s, t - 1))
    return gaps


def emit_proposals(annotations: Sequence[Segment], video_lengths: Dict[str, int], jitter: int,
                   seed: int = 0, decoy_length: Tuple[int, int] = (16, 48)) -> List[Segment]:
    """Imperfect class-agnostic proposals.

    Each ground-truth boundary moves by a uniform integer offset in
    ``[-jitter, jitter]`` (clipped to the video), and every video gets one decoy
    proposal placed in its longest background stretch.
    """
    if jitter < 0:
        raise ValueError("jitter must be >= 0")
    rng = np.random.default_rng([seed, 2])
    by_video: Dict[str, List[Segment]] = {vid: [] for vid in video_lengths}
    for seg in annotations:
        by_video.setdefault(seg.video_id, []).append(seg)
    proposals = []
    for vid in sorted(by_video):
        T = video_lengths[vid]
        for seg in sorted(by_video[vid]):
            ds, de = (rng.integers(-jitter, jitter + 1, size=2) if jitter else (0, 0))
            start = int(np.clip(seg.start + ds, 0, T - 1))
            end = int(np.clip(seg.end + de, start, T - 1))
            proposals.append(Segment(vid, start, end, 0, 1.0))
        gaps = background_gaps(by_video[vid], T)
        if gaps:
            gs, ge = max(gaps, key=lambda g: (g[1] - g[0], -g[0]))
            length = min(ge - gs + 1, int(rng.integers(decoy_length[0], decoy_length[1] + 1)))
            start = gs + int(rng.integers(0, ge - gs + 2 - length))
            proposals.append(Segment(vid, start, start + length - 1, 0, 1.0))
    return proposals


def class_frame_counts(annotations: Sequence[Segment]) -> Dict[int, int]:
    counts = Counter()
    for seg in annotations:
        counts[seg.class_id] += seg.length
    return dict(sorted(counts.items()))


def frame_labels(annotations: Sequence[Segment], frames: int) -> np.ndarray:
    """Per-frame class ids (0 = background); on overlap the highest class id wins."""
    labels = np.zeros(frames, dtype=np.int64)
    for seg in annotations:
        if seg.end >= frames:
            raise ValueError(f"annotation {seg} exceeds video length {frames}")
        np.maximum(labels[seg.start:seg.end + 1], seg.class_id, out=labels[seg.start:seg.end + 1])
    return labels


# ----------------------------------------------------------------------------
# on-disk layout
# ----------------------------------------------------------------------------


def write_split(root, videos: Dict[str, np.ndarray], annotations: Sequence[Segment],
                proposals: Sequence[Segment] = ()) -> None:
    root = Path(root)
    (root / "videos").mkdir(parents=True, exist_ok=True)
    for vid, video in sorted(videos.items()):
        save_tensor(root / "videos" / f"{vid}.tpct", video)
    write_segments(root / "annotations.csv", annotations, with_confidence=False)
    if proposals:
        write_segments(root / "proposals.csv", proposals)


def load_videos(root) -> Dict[str, np.ndarray]:
    return {p.stem: load_tensor(p) for p in sorted((Path(root) / "videos").glob("*.tpct"))}


def load_split(root):
    """``(videos, annotations)`` from a split directory written by :func:`write_split`."""
    root = Path(root)
    return load_videos(root), read_segments(root / "annotations.csv")


def write_dataset(root, cfg: SynthConfig, jitter: int = 8) -> dict:
    """Generate both splits under ``root`` and return a summary dict."""
    root = Path(root)
    root.mkdir(parents=True, exist_ok=True)
    summary = {"config": asdict(cfg), "jitter": jitter, "splits": {}}
    for split in SPLITS:
        videos, annotations = generate(cfg, split)
        lengths = {vid: v.shape[1] for vid, v in videos.items()}
        proposals = emit_proposals(annotations, lengths, jitter, seed=cfg.seed + SPLITS.index(split))
        write_split(root / split, videos, annotations, proposals)
        summary["splits"][split] = {
            "videos": len(videos),
            "instances": len(annotations),
            "class_frames": {str(k): v for k, v in class_frame_counts(annotations).items()},
            "background_frames": sum(lengths.values()) - sum(s.length for s in annotations),
        }
    (root / "summary.json").write_text(json.dumps(summary, indent=2) + "\n")
    return summary
