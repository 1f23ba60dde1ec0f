"""Whole-video inference: per-frame class probabilities from a trained network."""
from __future__ import annotations

import time
from pathlib import Path
from typing import Dict, List, Optional

import numpy as np

from .arch import NetworkSpec
from .model import Checkpoint, Network, frame_logits
from .tensor_core import load_tensor, save_tensor, softmax
from .training import video_frame_labels


def check_compatible(ckpt: Checkpoint, spec: NetworkSpec) -> None:
    """Refuse to run a checkpoint under a different architecture."""
    if ckpt.spec_hash != spec.spec_hash():
        raise ValueError(f"checkpoint spec {ckpt.spec.name} ({ckpt.spec_hash[:12]}) does not match "
                         f"preset {spec.name} ({spec.spec_hash()[:12]})")


def window_starts(frames: int, L: int) -> List[int]:
    """Non-overlapping window starts covering ``frames``.

    A partial tail is covered by the last full window ending at the final frame.
    """
    if frames < L:
        raise ValueError(f"video of {frames} frames is shorter than the window length {L}")
    starts = list(range(0, frames - L + 1, L))
    if starts[-1] + L < frames:
        starts.append(frames - L)
    return starts


def predict_video(net: Network, video: np.ndarray, batch_size: int = 8) -> np.ndarray:
    """(frames, K+1) probabilities for a (C, T, H, W) video.

    Windows are scored independently; frames covered twice by the tail window
    keep the earlier window's scores.
    """
    L = net.spec.input_shape[1]
    T = video.shape[1]
    starts = window_starts(T, L)
    out = np.zeros((T, net.spec.num_classes + 1))
    filled = 0
    for i in range(0, len(starts), batch_size):
        chunk = starts[i:i + batch_size]
        x = np.stack([video[:, s:s + L] for s in chunk])
        probs = softmax(frame_logits(net, x), axis=1)  # (n, K+1, L)
        for s, p in zip(chunk, probs):
            out[filled:s + L] = p.T[filled - s:]
            filled = s + L
    return out


def predict_videos(net: Network, videos: Dict[str, np.ndarray], batch_size: int = 8) -> Dict[str, np.ndarray]:
    return {vid: predict_video(net, videos[vid], batch_size) for vid in sorted(videos)}


def write_scores(root, scores: Dict[str, np.ndarray]) -> None:
    root = Path(root)
    root.mkdir(parents=True, exist_ok=True)
    for vid, s in scores.items():
        save_tensor(root / f"{vid}.tpct", s)


def read_scores(root) -> Dict[str, np.ndarray]:
    root = Path(root)
    files = sorted(root.glob("*.tpct"))
    if not files:
        raise FileNotFoundError(f"no score matrices (*.tpct) in {root}")
    return {f.stem: load_tensor(f) for f in files}


def benchmark(net: Network, videos: Dict[str, np.ndarray], runs: int = 3, batch_size: int = 8,
              clock=time.perf_counter) -> dict:
    """Frames per second of :func:`predict_videos`, one entry per run."""
    frames = sum(v.shape[1] for v in videos.values())
    times = []
    for _ in range(runs):
        t0 = clock()
        predict_videos(net, videos, batch_size)
        times.append(clock() - t0)
    fps = [frames / t for t in times]
    return {
        "preset": net.spec.name,
        "frames": frames,
        "runs": runs,
        "wall_seconds": times,
        "fps": fps,
        "fps_mean": float(np.mean(fps)),
        "fps_std": float(np.std(fps)),
    }


def frame_label_map(annotations, lengths: Dict[str, int], only: Optional[set] = None) -> Dict[str, np.ndarray]:
    """Per-frame class ids for every video in ``lengths``."""
    return {vid: video_frame_labels(annotations, vid, n) for vid, n in lengths.items()
            if only is None or vid in only}
