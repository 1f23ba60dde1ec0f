"""Temporal-preservation action localization on synthetic video: `tpcnet <command> [flags]`.

Every command accepts ``--config FILE`` (JSON object keyed by flag names,
dashes or underscores); flags given on the command line win over the file.
Results go to ``--out`` or stdout, diagnostics to stderr.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path
from typing import List, Optional, Sequence

import numpy as np

from . import arch
from .evaluation import IOU_THRESHOLDS, frame_level_map, report_json, report_text, segment_level_map
from .localization import DEFAULT_FGM_THRESHOLDS, DEFAULT_NMS_THRESHOLD, localize_fgm, localize_refine, select_thresholds
from .model import Network, load_checkpoint, save_checkpoint
from .pipeline import benchmark, check_compatible, frame_label_map, predict_videos, read_scores, write_scores
from .segments import read_segments, write_segments
from .synthdata import SynthConfig, load_split, load_videos, write_dataset
from .training import (Schedule, TrainingDiverged, balance_classes, build_windows, check_annotations, class_totals,
                       train)

log = logging.getLogger("tpcnet")


def _floats(text: str) -> List[float]:
    return [float(t) for t in text.split(",") if t.strip()]


def _emit(text: str, out: Optional[str]) -> None:
    if out:
        Path(out).parent.mkdir(parents=True, exist_ok=True)
        Path(out).write_text(text)
    else:
        sys.stdout.write(text)


def _spec(preset: str, num_classes: int, window: Optional[int]):
    spec = arch.build_preset(preset, num_classes)
    return spec.with_length(window) if window else spec


# ----------------------------------------------------------------------------
# commands
# ----------------------------------------------------------------------------


def cmd_synth(args) -> int:
    cfg = SynthConfig(num_classes=args.classes or 4, train_videos=args.train_videos, test_videos=args.test_videos,
                      frames=args.frames, noise=args.noise, amplitude=args.amplitude, seed=args.seed)
    summary = write_dataset(args.out, cfg, jitter=args.jitter)
    for split, info in summary["splits"].items():
        counts = ", ".join(f"{c}:{n}" for c, n in info["class_frames"].items())
        print(f"{split}: {info['videos']} videos, {info['instances']} instances, "
              f"background {info['background_frames']} frames, class frames {counts}")
    return 0


def train_from_split(data: str, preset: str, schedule: Schedule, num_classes: Optional[int] = None,
                     window: Optional[int] = None, balance: bool = True, resume=None, out: Optional[str] = None,
                     log_line=None, stride: Optional[int] = None):
    """Build windows from a split directory and run both training stages."""
    videos, annotations = load_split(data)
    K = num_classes or max(s.class_id for s in annotations)
    spec = _spec(preset, K, window)
    samples = build_windows(videos, annotations, spec.input_shape[1], stride=stride)
    if not samples:
        raise ValueError(f"{data}: no window of {spec.input_shape[1]} frames contains an action")
    if balance:
        samples = balance_classes(samples, max(class_totals(samples).values()), seed=schedule.seed,
                                  num_classes=K)
    log.info("training %s on %d windows", spec.name, len(samples))
    on_epoch = (lambda ck: save_checkpoint(out, ck)) if out else None
    return train(spec, samples, schedule, resume=resume, on_epoch=on_epoch, log_line=log_line)


def cmd_train(args) -> int:
    schedule = Schedule(lr_head=args.lr_head, lr_all=args.lr_all, momentum=args.momentum,
                        weight_decay=args.weight_decay, epochs_head=args.epochs_head, epochs_all=args.epochs_all,
                        batch_size=args.batch_size, seed=args.seed)
    resume = load_checkpoint(args.resume) if args.resume else None
    try:
        ckpt = train_from_split(args.data, args.preset, schedule, args.classes, args.window,
                                not args.no_balance, resume, args.out, log_line=print,
                                stride=args.stride)
    except TrainingDiverged as exc:
        if args.out:
            save_checkpoint(args.out, exc.checkpoint)
        raise
    save_checkpoint(args.out, ckpt)
    return 0


def cmd_predict(args) -> int:
    ckpt = load_checkpoint(args.checkpoint)
    if args.preset:
        check_compatible(ckpt, _spec(args.preset, ckpt.spec.num_classes, ckpt.spec.input_shape[1]))
    videos = load_videos(args.data)
    if not videos:
        raise FileNotFoundError(f"no videos under {args.data}")
    scores = predict_videos(Network(ckpt.spec, ckpt.params), videos)
    write_scores(args.out, scores)
    log.info("wrote %d score matrices to %s", len(scores), args.out)
    return 0


def cmd_localize(args) -> int:
    scores = read_scores(args.scores)
    if args.mode == "fgm":
        thresholds = _floats(args.thresholds) if args.thresholds else DEFAULT_FGM_THRESHOLDS
        dets = localize_fgm(scores, thresholds, args.min_len, args.nms)
    else:
        if not args.proposals:
            raise ValueError("refine mode needs --proposals")
        proposals = read_segments(args.proposals)
        if args.calibration_scores:
            if not args.calibration_annotations:
                raise ValueError("--calibration-scores needs --calibration-annotations")
            cal = read_scores(args.calibration_scores)
            labels = frame_label_map(read_segments(args.calibration_annotations),
                                     {v: s.shape[0] for v, s in cal.items()})
            taus = select_thresholds(cal, labels, next(iter(scores.values())).shape[1] - 1)
            log.info("refinement thresholds: %s", taus)
        else:
            taus = args.refine_threshold
        dets = localize_refine(proposals, scores, taus, args.nms)
    if args.out:
        write_segments(args.out, dets)
    else:
        for d in dets:
            print(f"{d.video_id},{d.start},{d.end},{d.class_id},{d.confidence!r}")
    log.info("%d detections", len(dets))
    return 0


def cmd_evaluate(args) -> int:
    annotations = read_segments(args.annotations)
    frame = segment = None
    videos = None
    if args.scores:
        scores = read_scores(args.scores)
        videos = set(scores)
        K = args.classes or next(iter(scores.values())).shape[1] - 1
        lengths = {v: s.shape[0] for v, s in scores.items()}
        # a score matrix shorter than its annotations means scores and labels disagree in length
        check_annotations([a for a in annotations if a.video_id in videos], lengths)
        labels = frame_label_map(annotations, lengths)
        frame = frame_level_map(scores, labels, K)
    if args.detections:
        dets = read_segments(args.detections)
        thresholds = _floats(args.iou) if args.iou else IOU_THRESHOLDS
        K = args.classes or max(s.class_id for s in annotations)
        gts = [a for a in annotations if videos is None or a.video_id in videos]
        segment = segment_level_map(dets, gts, thresholds, K, videos=videos)
    if frame is None and segment is None:
        raise ValueError("evaluate needs --scores and/or --detections")
    text = report_json(frame, segment) + "\n" if args.format == "json" else report_text(frame, segment)
    _emit(text, args.out)
    return 0


def cmd_bench(args) -> int:
    presets = args.preset.split(",") if args.preset else ["c3d-mini", "tpc-mini"]
    if args.data:
        videos = load_videos(args.data)
    else:
        rng = np.random.default_rng(args.seed)
        videos = {f"bench_{i}": rng.normal(size=(1, args.frames, 32, 32)) for i in range(2)}
    reports = []
    for name in presets:
        K = args.classes or 4
        net = Network(arch.build_preset(name, K), seed=args.seed)
        rep = benchmark(net, videos, runs=args.runs)
        reports.append(rep)
        log.info("%s: %.1f +/- %.1f fps", name, rep["fps_mean"], rep["fps_std"])
    if args.format == "json":
        text = json.dumps(reports, indent=2) + "\n"
    else:
        lines = [f"{'preset':<16} {'frames':>7} {'run':>4} {'seconds':>9} {'fps':>9}"]
        for rep in reports:
            for i, (t, f) in enumerate(zip(rep["wall_seconds"], rep["fps"]), 1):
                lines.append(f"{rep['preset']:<16} {rep['frames']:>7} {i:>4} {t:>9.3f} {f:>9.1f}")
            lines.append(f"{rep['preset']:<16} {'':>7} {'mean':>4} {'':>9} {rep['fps_mean']:>9.1f}"
                         f" +/- {rep['fps_std']:.1f}")
        text = "\n".join(lines) + "\n"
    _emit(text, args.out)
    return 0


def shapes_table(spec) -> str:
    shapes = arch.infer_shapes(spec)
    C, L, H, W = spec.input_shape
    lines = [f"{spec.name}  input {C}x{L}x{H}x{W}  K={spec.num_classes}",
             f"{'layer':<10} {'kind':<10} {'kernel':<9} {'stride':<9} {'TASR':>4} {'C':>4} {'L':>4} "
             f"{'HxW':>7} {'TRF':>5} {'jump':>5}"]
    for i, (layer, shape) in enumerate(zip(spec.layers, shapes)):
        rf = arch.temporal_receptive_field(spec, i)
        k = "x".join(map(str, layer.kernel)) if layer.kernel else "-"
        s = "x".join(map(str, layer.stride)) if layer.stride else "-"
        lines.append(f"{layer.name:<10} {layer.kind:<10} {k:<9} {s:<9} {layer.dilation:>4} {shape[0]:>4} "
                     f"{shape[1]:>4} {f'{shape[2]}x{shape[3]}':>7} {rf.extent_frames:>5} {rf.stride_frames:>5}")
    return "\n".join(lines) + "\n"


def cmd_shapes(args) -> int:
    spec = _spec(args.preset or "tpc-mini", args.classes or 4, args.window)
    _emit(shapes_table(spec), args.out)
    return 0


# ----------------------------------------------------------------------------
# parser
# ----------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--seed", type=int, default=0)
    common.add_argument("--preset", default=None, help=f"one of {', '.join(arch.PRESETS)}")
    common.add_argument("--config", default=None, help="JSON file of flag values; explicit flags win")
    common.add_argument("--out", default=None)
    common.add_argument("--classes", type=int, default=None, help="number of action classes K")
    common.add_argument("-v", "--verbose", action="store_true")

    parser = argparse.ArgumentParser(prog="tpcnet", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", parents=[common], help="write a synthetic dataset")
    p.set_defaults(func=cmd_synth, seed=7)
    p.add_argument("--train-videos", type=int, default=SynthConfig.train_videos)
    p.add_argument("--test-videos", type=int, default=SynthConfig.test_videos)
    p.add_argument("--frames", type=int, default=SynthConfig.frames)
    p.add_argument("--noise", type=float, default=SynthConfig.noise)
    p.add_argument("--amplitude", type=float, default=SynthConfig.amplitude)
    p.add_argument("--jitter", type=int, default=8, help="proposal boundary jitter in frames")

    d = Schedule()
    p = sub.add_parser("train", parents=[common], help="two-stage SGD training")
    p.set_defaults(func=cmd_train, preset="tpc-mini")
    p.add_argument("--data", required=False, help="split directory (videos/, annotations.csv)")
    p.add_argument("--window", type=int, default=None, help="window length L (preset default otherwise)")
    p.add_argument("--stride", type=int, default=None, help="training window stride (window length otherwise)")
    p.add_argument("--lr-head", type=float, default=d.lr_head)
    p.add_argument("--lr-all", type=float, default=d.lr_all)
    p.add_argument("--momentum", type=float, default=d.momentum)
    p.add_argument("--weight-decay", type=float, default=d.weight_decay)
    p.add_argument("--epochs-head", type=int, default=d.epochs_head)
    p.add_argument("--epochs-all", type=int, default=d.epochs_all)
    p.add_argument("--batch-size", type=int, default=d.batch_size)
    p.add_argument("--no-balance", action="store_true")
    p.add_argument("--resume", default=None, help="checkpoint directory to continue from")

    p = sub.add_parser("predict", parents=[common], help="per-frame scores for whole videos")
    p.set_defaults(func=cmd_predict)
    p.add_argument("--data", help="split directory with videos/")
    p.add_argument("--checkpoint")

    p = sub.add_parser("localize", parents=[common], help="score matrices to detections")
    p.set_defaults(func=cmd_localize)
    p.add_argument("--scores")
    p.add_argument("--mode", choices=["refine", "fgm"], default="fgm")
    p.add_argument("--proposals", default=None)
    p.add_argument("--refine-threshold", type=float, default=0.5)
    p.add_argument("--calibration-scores", default=None, help="score dir used to pick per-class thresholds")
    p.add_argument("--calibration-annotations", default=None)
    p.add_argument("--thresholds", default=None, help="comma-separated fgm thresholds")
    p.add_argument("--min-len", type=int, default=1)
    p.add_argument("--nms", type=float, default=DEFAULT_NMS_THRESHOLD)

    p = sub.add_parser("evaluate", parents=[common], help="frame- and segment-level mAP")
    p.set_defaults(func=cmd_evaluate)
    p.add_argument("--annotations")
    p.add_argument("--scores", default=None)
    p.add_argument("--detections", default=None)
    p.add_argument("--iou", default=None, help="comma-separated IoU thresholds")
    p.add_argument("--format", choices=["text", "json"], default="text")

    p = sub.add_parser("bench", parents=[common], help="inference throughput")
    p.set_defaults(func=cmd_bench)
    p.add_argument("--data", default=None, help="split directory; random videos otherwise")
    p.add_argument("--frames", type=int, default=256)
    p.add_argument("--runs", type=int, default=3)
    p.add_argument("--format", choices=["text", "json"], default="text")

    p = sub.add_parser("shapes", parents=[common], help="per-layer shape and receptive-field table")
    p.set_defaults(func=cmd_shapes)
    p.add_argument("--window", type=int, default=None)
    return parser


_REQUIRED = {
    "synth": ["out"],
    "train": ["data", "out"],
    "predict": ["data", "checkpoint", "out"],
    "localize": ["scores"],
    "evaluate": ["annotations"],
}


def parse_args(argv: Optional[Sequence[str]] = None) -> argparse.Namespace:
    parser = build_parser()
    args = parser.parse_args(argv)
    if args.config:
        config = json.loads(Path(args.config).read_text())
        if not isinstance(config, dict):
            raise ValueError(f"{args.config}: config must be a JSON object")
        config = {k.replace("-", "_"): v for k, v in config.items()}
        unknown = sorted(set(config) - set(vars(args)))
        if unknown:
            raise ValueError(f"{args.config}: unknown keys {unknown}")
        # reparse with the file as defaults so that explicit flags still win
        sub = parser._subparsers._group_actions[0].choices[args.command]
        sub.set_defaults(**config)
        args = parser.parse_args(argv)
    missing = [f"--{k.replace('_', '-')}" for k in _REQUIRED.get(args.command, []) if getattr(args, k) is None]
    if missing:
        parser.error(f"{args.command}: missing {', '.join(missing)}")
    return args


def main(argv: Optional[Sequence[str]] = None) -> int:
    try:
        args = parse_args(argv)
    except (ValueError, OSError) as exc:
        print(f"tpcnet: error: {exc}", file=sys.stderr)
        return 2
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, stream=sys.stderr,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except TrainingDiverged as exc:
        print(f"tpcnet: training diverged: {exc}", file=sys.stderr)
        return 3
    except (ValueError, KeyError, OSError) as exc:
        print(f"tpcnet: error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
