"""Window sampling, class balancing and the two-stage SGD schedule."""
from __future__ import annotations

import logging
import math
from collections import Counter
from dataclasses import dataclass, field, replace
from typing import Callable, Dict, List, Optional, Sequence

import numpy as np

from .arch import NetworkSpec
from .model import Checkpoint, Network, frame_logits, loss_and_grads
from .segments import Segment
from .tensor_core import one_hot, per_frame_softmax_loss

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class WindowSample:
    video_id: str
    start: int
    clip: np.ndarray  # (C, L, H, W)
    labels: np.ndarray  # (L,) class ids, 0 = background

    def frame_counts(self) -> Counter:
        return Counter(int(c) for c in self.labels if c > 0)


def check_annotations(annotations: Sequence[Segment], video_lengths: Dict[str, int]) -> None:
    bad = [seg for seg in annotations
           if seg.video_id not in video_lengths or seg.end >= video_lengths[seg.video_id]]
    if bad:
        listing = "; ".join(f"{s.video_id},{s.start},{s.end},{s.class_id}" for s in bad)
        raise ValueError(f"annotations outside their videos: {listing}")


def video_frame_labels(annotations: Sequence[Segment], video_id: str, frames: int) -> np.ndarray:
    labels = np.zeros(frames, dtype=np.int64)
    for seg in annotations:
        if seg.video_id != video_id:
            continue
        span = labels[seg.start:seg.end + 1]
        if span.any() and np.any(span != seg.class_id):
            log.warning("overlapping annotations in %s around frames %d-%d; highest class id wins",
                        video_id, seg.start, seg.end)
        np.maximum(span, seg.class_id, out=span)
    return labels


def build_windows(videos: Dict[str, np.ndarray], annotations: Sequence[Segment], L: int,
                  stride: Optional[int] = None) -> List[WindowSample]:
    """Slide a length-``L`` window over each video, keeping windows with an action frame."""
    stride = stride or L
    check_annotations(annotations, {vid: v.shape[1] for vid, v in videos.items()})
    windows = []
    for vid in sorted(videos):
        video = videos[vid]
        labels = video_frame_labels(annotations, vid, video.shape[1])
        for start in range(0, video.shape[1] - L + 1, stride):
            lab = labels[start:start + L]
            if lab.any():
                windows.append(WindowSample(vid, start, video[:, start:start + L], lab.copy()))
    return windows


def class_totals(samples: Sequence[WindowSample]) -> Counter:
    totals = Counter()
    for s in samples:
        totals.update(s.frame_counts())
    return totals


def balance_classes(samples: Sequence[WindowSample], target_frames_per_class: int, seed: int = 0,
                    num_classes: Optional[int] = None) -> List[WindowSample]:
    """Duplicate whole windows of minority classes until every class has ``target`` frames.

    Windows are drawn from those where the class is the most frequent action,
    falling back to any window containing it.  Nothing is removed; the result
    is shuffled deterministically.
    """
    if target_frames_per_class <= 0:
        raise ValueError("target_frames_per_class must be positive")
    rng = np.random.default_rng(seed)
    totals = class_totals(samples)
    classes = range(1, num_classes + 1) if num_classes else sorted(totals)
    out = list(samples)
    for c in classes:
        if totals[c] == 0:
            log.warning("class %d has no labelled frames; skipped in balancing", c)
            continue
        majority = [s for s in samples if s.frame_counts().most_common(1)[0][0] == c]
        pool = majority or [s for s in samples if s.frame_counts()[c]]
        while totals[c] < target_frames_per_class:
            s = pool[int(rng.integers(len(pool)))]
            out.append(s)
            totals.update(s.frame_counts())
    order = rng.permutation(len(out))
    return [out[i] for i in order]


# ----------------------------------------------------------------------------
# optimizer
# ----------------------------------------------------------------------------


@dataclass
class OptimizerState:
    lr: float
    momentum: float = 0.9
    weight_decay: float = 5e-4
    velocity: Dict[str, np.ndarray] = field(default_factory=dict)


def sgd_step(params: Dict[str, np.ndarray], grads: Dict[str, np.ndarray], state: OptimizerState):
    """Momentum SGD with L2 weight decay on the parameters named in ``grads``.

    ``v <- momentum * v - lr * (g + weight_decay * p)``, then ``p <- p + v``.
    Returns new ``(params, state)``; the inputs are not modified.
    """
    new_params = dict(params)
    velocity = dict(state.velocity)
    for name in sorted(grads):
        g = grads[name]
        p = params[name]
        if g.shape != p.shape:
            raise ValueError(f"gradient for {name} has shape {g.shape}, parameter {p.shape}")
        if not np.all(np.isfinite(g)):
            raise FloatingPointError(f"non-finite gradient in {name}")
        v = velocity.get(name)
        v = np.zeros_like(p) if v is None else v
        v = state.momentum * v - state.lr * (g + state.weight_decay * p)
        velocity[name] = v
        new_params[name] = p + v
    return new_params, replace(state, velocity=velocity)


# ----------------------------------------------------------------------------
# training loop
# ----------------------------------------------------------------------------


@dataclass(frozen=True)
class Schedule:
    """Stage 1 trains only the classifier; stage 2 trains every layer."""

    lr_head: float = 1e-4
    lr_all: float = 1e-5
    momentum: float = 0.9
    weight_decay: float = 5e-4
    epochs_head: int = 50
    epochs_all: int = 50
    batch_size: int = 4
    seed: int = 0

    @property
    def total_epochs(self) -> int:
        return self.epochs_head + self.epochs_all

    def stage_of(self, epoch: int) -> int:
        return 1 if epoch <= self.epochs_head else 2


class TrainingDiverged(RuntimeError):
    def __init__(self, message: str, checkpoint: Checkpoint):
        super().__init__(message)
        self.checkpoint = checkpoint


def _batches(order: np.ndarray, batch_size: int):
    for i in range(0, len(order), batch_size):
        yield [int(j) for j in order[i:i + batch_size]]


def _stack(batch: Sequence[WindowSample], num_classes: int):
    x = np.stack([s.clip for s in batch])
    y = one_hot(np.stack([s.labels for s in batch]), num_classes + 1)
    return x, y


def mean_frame_loss(net: Network, samples: Sequence[WindowSample], batch_size: int = 4) -> float:
    """Average per-frame cross-entropy over ``samples`` (no parameter update)."""
    total, frames = 0.0, 0
    for i in range(0, len(samples), batch_size):
        x, y = _stack(samples[i:i + batch_size], net.spec.num_classes)
        loss, _ = per_frame_softmax_loss(frame_logits(net, x), y)
        total += loss * x.shape[0]
        frames += x.shape[0] * x.shape[2]
    return total / frames


def trainable_layers(spec: NetworkSpec, stage: int) -> List[str]:
    if stage == 1:
        return [layer.name for layer in spec.layers if layer.kind == "classifier"]
    return [layer.name for layer in spec.layers if layer.has_params]


def train(spec: NetworkSpec, samples: Sequence[WindowSample], schedule: Schedule = Schedule(),
          resume: Optional[Checkpoint] = None, on_epoch: Optional[Callable[[Checkpoint], None]] = None,
          log_line: Optional[Callable[[str], None]] = None) -> Checkpoint:
    """Two-stage training; returns the final checkpoint.

    The logged loss is the batch loss divided by the window length, i.e. the
    mean cross-entropy per frame, averaged over the epoch's batches.
    """
    if not samples:
        raise ValueError("training set is empty")
    if resume is not None:
        if resume.spec_hash != spec.spec_hash():
            raise ValueError("checkpoint was trained with a different network spec")
        ckpt = Checkpoint(spec, dict(resume.params), resume.epoch, resume.stage, dict(resume.velocity),
                          list(resume.history))
    else:
        ckpt = Checkpoint(spec, Network(spec, seed=schedule.seed).params)
    L = samples[0].labels.shape[0]
    K = spec.num_classes
    features, features_stage = {}, None

    for epoch in range(ckpt.epoch + 1, schedule.total_epochs + 1):
        stage = schedule.stage_of(epoch)
        if stage != ckpt.stage:
            ckpt.velocity = {}
        lr = schedule.lr_head if stage == 1 else schedule.lr_all
        state = OptimizerState(lr, schedule.momentum, schedule.weight_decay, ckpt.velocity)
        trainable = trainable_layers(spec, stage)
        params = ckpt.params
        net = Network(spec, params)

        first = min(spec.layer_index(n) for n in trainable)
        if stage != features_stage:
            features, features_stage = {}, stage
        order = np.random.default_rng([schedule.seed, epoch]).permutation(len(samples))
        losses = []
        for idx in _batches(order, schedule.batch_size):
            batch = [samples[i] for i in idx]
            x, y = _stack(batch, K)
            if first:
                # frozen layers do not change within a stage, so their output is reused
                missing = [i for i in idx if i not in features]
                if missing:
                    out = net.forward(np.stack([samples[i].clip for i in missing]), stop=first)
                    features.update(zip(missing, out))
                x = np.stack([features[i] for i in idx])
            loss, grads = loss_and_grads(net, x, y, per_frame_softmax_loss, trainable, start=first)
            if not math.isfinite(loss):
                raise TrainingDiverged(f"loss became non-finite in epoch {epoch}", ckpt)
            try:
                params, state = sgd_step(params, grads, state)
            except FloatingPointError as exc:
                raise TrainingDiverged(f"epoch {epoch}: {exc}", ckpt) from exc
            net = Network(spec, params)
            losses.append(loss / L)
        epoch_loss = float(np.mean(losses))
        ckpt = Checkpoint(spec, params, epoch, stage, state.velocity, ckpt.history + [(epoch, stage, epoch_loss)])
        line = f"{epoch},{stage},{epoch_loss:.6f}"
        log.info("epoch %s", line)
        if log_line:
            log_line(line)
        if on_epoch:
            on_epoch(ckpt)
    return ckpt
