"""Acceptance criteria 1-9.

Each test carries ``@pytest.mark.criterion``; conftest prints one PASS/FAIL
line per criterion, followed by the measured values recorded with ``note``.
The comparative run (criteria 6 and 7) trains two models on the default
synthetic benchmark and takes several minutes on one core.
"""
import math
import time

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from tpcnet.arch import MiniScale, build_preset, head_layer_names, infer_shapes, temporal_footprint, \
    temporal_receptive_field
from tpcnet.cli import main
from tpcnet.evaluation import average_precision, frame_level_map, segment_level_map
from tpcnet.localization import classify_proposal, localize_fgm, localize_refine, select_thresholds
from tpcnet.model import Network, loss_and_grads
from tpcnet.pipeline import frame_label_map, predict_videos
from tpcnet.segments import Segment, iou
from tpcnet.synthdata import SynthConfig, emit_proposals, generate
from tpcnet.tensor_core import (
    ConvParams,
    PoolParams,
    conv3d_backward,
    conv3d_forward,
    maxpool3d_backward,
    maxpool3d_forward,
    one_hot,
    per_frame_softmax_loss,
    same_temporal_padding,
    spatial_gap,
    spatial_gap_backward,
)
from tpcnet.training import Schedule, balance_classes, build_windows, class_totals, mean_frame_loss, train

from oracles import numerical_gradient, rel_error
from test_cli import same_tree
from test_tensor_core import residue_check

K = 4
# stride-16 windows double the training set; 2 + 16 epochs at a common rate fit both models
ACCEPTANCE_SCHEDULE = Schedule(lr_head=3e-4, lr_all=3e-4, epochs_head=2, epochs_all=16)
WINDOW_STRIDE = 16
JITTER = 8
# half the shortest synthetic instance; single-frame runs are noise at this scale
FGM_MIN_LEN = 8
RUNTIME_BUDGET = 15 * 60
STAGES = ("conv3", "pool3", "conv4", "pool4", "conv5", "pool5")
INSTANCES = 20


# ----------------------------------------------------------------------------
# 1-2: temporal preservation and receptive fields
# ----------------------------------------------------------------------------


class TestPreservation:
    @pytest.mark.criterion(1, "temporal length preserved by tpc-mini, divided by 16 in c3d-mini")
    @pytest.mark.parametrize("L", [8, 16, 32, 64])
    def test_lengths(self, L, note):
        tpc = infer_shapes(build_preset("tpc-mini", K, MiniScale(length=L)))
        c3d = infer_shapes(build_preset("c3d-mini", K, MiniScale(length=L)))
        assert [s[1] for s in tpc] == [L] * len(tpc)
        # an odd remainder rounds up, so L=8 ends at one frame
        assert c3d[-1][1] == math.ceil(L / 16)
        note(f"L={L}: tpc-mini {L} at all {len(tpc)} layers, c3d-mini final {c3d[-1][1]}")

    @pytest.mark.criterion(2, "stage 3-5 temporal footprints of tpc-mini equal those of c3d-mini")
    @pytest.mark.parametrize("layer", STAGES)
    def test_footprints(self, layer, note):
        tpc, c3d = build_preset("tpc-mini", K), build_preset("c3d-mini", K)
        i = tpc.layer_index(layer)
        stride = temporal_receptive_field(c3d, i).stride_frames
        positions = infer_shapes(c3d)[i][1]
        for p in range(positions):
            assert temporal_footprint(c3d, i, p) == temporal_footprint(tpc, i, p * stride)
        note(f"{layer}: {positions} positions, extent {temporal_receptive_field(tpc, i).extent_frames} frames")


# ----------------------------------------------------------------------------
# 3-4: numerical oracles
# ----------------------------------------------------------------------------


class TestOracles:
    @pytest.mark.criterion(3, "dilated conv decomposes into standard conv on residue classes")
    @pytest.mark.parametrize("r", [1, 2, 4, 8])
    def test_residue(self, r, note):
        worst = max(residue_check(np.random.default_rng([r, s]), r) for s in range(5))
        assert worst <= 1e-12
        note(f"r={r}: max abs error {worst:.1e}")

    @pytest.mark.criterion(4, "gradients match central finite differences")
    def test_dilated_conv(self, note):
        worst = 0.0
        for seed in range(INSTANCES):
            rng = np.random.default_rng(seed)
            r = int(rng.choice([1, 2, 4]))
            x = rng.normal(size=(1, 2, 9, 3, 3))
            w = rng.normal(size=(2, 2, 3, 2, 3))
            b = rng.normal(size=2)
            p = ConvParams(w, b, r, (same_temporal_padding(3, r), (0, 1), 1))
            g = rng.normal(size=conv3d_forward(x, p).shape)

            def f():
                return float((conv3d_forward(x, ConvParams(w, b, r, p.padding)) * g).sum())

            gx, gw, gb = conv3d_backward(x, p, g)
            worst = max(worst, rel_error(gx, numerical_gradient(f, x)), rel_error(gw, numerical_gradient(f, w)),
                        rel_error(gb, numerical_gradient(f, b)))
        assert worst < 1e-4
        note(f"dilated conv: {INSTANCES} instances, worst rel error {worst:.1e}")

    @pytest.mark.criterion(4, "gradients match central finite differences")
    def test_max_pool(self, note):
        worst = 0.0
        for seed in range(INSTANCES):
            rng = np.random.default_rng(seed)
            r = int(rng.choice([1, 2, 4]))
            # distinct values spaced well above eps, so no window max is tied
            x = rng.permutation(np.arange(2 * 8 * 4 * 4, dtype=float)).reshape(1, 2, 8, 4, 4) * 0.01
            p = PoolParams((3, 2, 2), (int(rng.integers(1, 3)), 2, 2), (same_temporal_padding(3, r), 0, 0), r)
            out, arg = maxpool3d_forward(x, p)
            g = rng.normal(size=out.shape)
            num = numerical_gradient(lambda: float((maxpool3d_forward(x, p)[0] * g).sum()), x)
            worst = max(worst, rel_error(maxpool3d_backward(arg, g), num))
        assert worst < 1e-4
        note(f"max pool: {INSTANCES} instances, worst rel error {worst:.1e}")

    @pytest.mark.criterion(4, "gradients match central finite differences")
    def test_gap(self, note):
        worst = 0.0
        for seed in range(INSTANCES):
            rng = np.random.default_rng(seed)
            x = rng.normal(size=(2, 3, 4, *rng.integers(1, 5, size=2)))
            g = rng.normal(size=spatial_gap(x).shape)
            num = numerical_gradient(lambda: float((spatial_gap(x) * g).sum()), x)
            worst = max(worst, rel_error(spatial_gap_backward(x.shape, g), num))
        assert worst < 1e-4
        note(f"GAP: {INSTANCES} instances, worst rel error {worst:.1e}")

    @pytest.mark.criterion(4, "gradients match central finite differences")
    def test_classifier_head(self, note):
        spec = build_preset("tpc-mini", 2, MiniScale(length=8, size=16, widths=(2, 2, 3, 3, 3), head_width=4,
                                                     head_kernel=2))
        head = head_layer_names(spec)
        first = spec.layer_index(head[0])
        C, L, H, W = infer_shapes(spec)[first - 1]
        worst = 0.0
        for seed in range(INSTANCES):
            rng = np.random.default_rng(seed)
            params = Network(spec, seed=seed).params
            # zero biases put ReLU inputs exactly on the kink when a whole channel is dead
            params = {k: v + 0.1 * rng.normal(size=v.shape) if k.endswith(".b") else v.copy()
                      for k, v in params.items()}
            feats = np.abs(rng.normal(size=(2, C, L, H, W)))
            y = one_hot(rng.integers(0, 3, size=(2, L)), 3)
            _, grads = loss_and_grads(Network(spec, params), feats, y, per_frame_softmax_loss, head, start=first)

            def f():
                return loss_and_grads(Network(spec, params), feats, y, per_frame_softmax_loss, [], start=first)[0]

            for name, g in grads.items():
                worst = max(worst, rel_error(g, numerical_gradient(f, params[name], eps=1e-6)))
        assert set(grads) == {f"{n}.{k}" for n in head for k in "wb"}
        assert worst < 1e-4
        note(f"classifier head {'/'.join(head)}: {INSTANCES} instances, worst rel error {worst:.1e}")

    @pytest.mark.criterion(4, "gradients match central finite differences")
    def test_loss(self, note):
        worst = 0.0
        for seed in range(INSTANCES):
            rng = np.random.default_rng(seed)
            n, k, L = rng.integers(1, 4), rng.integers(2, 6), rng.integers(1, 8)
            O = rng.normal(size=(n, k, L)) * 3
            y = one_hot(rng.integers(0, k, size=(n, L)), int(k))
            _, grad = per_frame_softmax_loss(O, y)
            worst = max(worst, rel_error(grad, numerical_gradient(lambda: per_frame_softmax_loss(O, y)[0], O)))
        assert worst < 1e-4
        note(f"per-frame loss: {INSTANCES} instances, worst rel error {worst:.1e}")


# ----------------------------------------------------------------------------
# 5: loss sanity
# ----------------------------------------------------------------------------


class _Converged(Exception):
    pass


@pytest.fixture(scope="module")
def train_windows():
    videos, annotations = generate(SynthConfig(), "train")
    return build_windows(videos, annotations, 32)


class TestLossSanity:
    @pytest.mark.criterion(5, "initial loss is ln 5; 10 windows overfit below 0.05")
    def test_initial_loss(self, train_windows, note):
        loss = mean_frame_loss(Network(build_preset("tpc-mini", K), seed=0), train_windows)
        assert loss == pytest.approx(math.log(K + 1), rel=0.05)
        note(f"initial per-frame loss {loss:.4f} over {len(train_windows)} windows (ln 5 = {math.log(5):.4f})")

    @pytest.mark.criterion(5, "initial loss is ln 5; 10 windows overfit below 0.05")
    def test_overfit(self, train_windows, note):
        reached = []

        def stop(ckpt):
            if ckpt.history[-1][2] < 0.05:
                reached.append(ckpt.epoch)
                raise _Converged

        with pytest.raises(_Converged):
            train(build_preset("tpc-mini", K), train_windows[:10],
                  Schedule(lr_head=3e-4, lr_all=3e-4, epochs_head=0, epochs_all=200), on_epoch=stop)
        assert reached[0] <= 200
        note(f"per-frame loss < 0.05 at epoch {reached[0]}")


# ----------------------------------------------------------------------------
# 6-7: trained comparison on the default benchmark
# ----------------------------------------------------------------------------


def _lengths(videos):
    return {vid: v.shape[1] for vid, v in videos.items()}


@pytest.fixture(scope="module")
def comparison():
    t0 = time.perf_counter()
    cfg = SynthConfig()
    videos, annotations = generate(cfg, "train")
    test_videos, test_annotations = generate(cfg, "test")
    windows = build_windows(videos, annotations, 32, stride=WINDOW_STRIDE)
    windows = balance_classes(windows, max(class_totals(windows).values()), seed=0, num_classes=K)
    train_labels = frame_label_map(annotations, _lengths(videos))
    test_labels = frame_label_map(test_annotations, _lengths(test_videos))
    proposals = emit_proposals(test_annotations, _lengths(test_videos), JITTER, seed=cfg.seed + 1)
    out = {"proposals": proposals, "truth": test_annotations}
    for preset in ("tpc-mini", "interp-baseline"):
        ckpt = train(build_preset(preset, K), windows, ACCEPTANCE_SCHEDULE)
        net = Network(ckpt.spec, ckpt.params)
        scores = predict_videos(net, test_videos)
        thresholds = select_thresholds(predict_videos(net, videos), train_labels, K)
        out[preset] = {
            "scores": scores,
            "frame": frame_level_map(scores, test_labels, K).mAP,
            "refine": segment_level_map(localize_refine(proposals, scores, thresholds), test_annotations,
                                        (0.5, 0.6, 0.7), K).mAP,
            "fgm": segment_level_map(localize_fgm(scores, min_len=FGM_MIN_LEN), test_annotations,
                                     (0.5, 0.6, 0.7), K).mAP,
        }
    out["seconds"] = time.perf_counter() - t0
    return out


class TestComparison:
    @pytest.mark.criterion(6, "tpc-mini beats interp-baseline on the default benchmark")
    def test_frame_map(self, comparison, note):
        tpc, base = comparison["tpc-mini"]["frame"], comparison["interp-baseline"]["frame"]
        note(f"frame mAP: tpc-mini {tpc:.4f}, interp-baseline {base:.4f}")
        assert tpc >= 0.85
        assert tpc >= base + 0.03

    @pytest.mark.criterion(6, "tpc-mini beats interp-baseline on the default benchmark")
    @pytest.mark.parametrize("mode", ["refine", "fgm"])
    def test_segment_map(self, comparison, mode, note):
        tpc, base = comparison["tpc-mini"][mode][0.5], comparison["interp-baseline"][mode][0.5]
        note(f"segment mAP@0.5 ({mode}): tpc-mini {tpc:.4f}, interp-baseline {base:.4f}")
        assert tpc > base

    @pytest.mark.criterion(6, "tpc-mini beats interp-baseline on the default benchmark")
    def test_runtime(self, comparison, note):
        note(f"data, training and scoring of both models: {comparison['seconds']:.0f} s on one core")
        assert comparison["seconds"] <= RUNTIME_BUDGET

    @pytest.mark.criterion(7, "fgm segment mAP >= refine on the same tpc-mini model")
    @pytest.mark.parametrize("threshold", [0.5, 0.6, 0.7])
    def test_fgm_not_worse(self, comparison, threshold, note):
        fgm, refine = comparison["tpc-mini"]["fgm"][threshold], comparison["tpc-mini"]["refine"][threshold]
        note(f"IoU {threshold}: fgm {fgm:.4f}, refine {refine:.4f} (jitter {JITTER})")
        assert fgm >= refine

    def test_decoys_rejected(self, comparison, note):
        truth = comparison["truth"]
        decoys = [p for p in comparison["proposals"]
                  if not any(t.video_id == p.video_id and iou(p, t) > 0 for t in truth)]
        scores = comparison["tpc-mini"]["scores"]
        rejected = sum(classify_proposal(p, scores[p.video_id]) is None for p in decoys)
        note(f"decoy proposals rejected: {rejected}/{len(decoys)}")
        assert decoys and rejected >= 0.8 * len(decoys)


# ----------------------------------------------------------------------------
# 8: evaluation correctness
# ----------------------------------------------------------------------------


class TestEvaluationCases:
    @pytest.mark.criterion(8, "hand AP and IoU cases; segment mAP monotone in IoU")
    def test_hand_cases(self, note):
        assert abs(average_precision([0.9, 0.1], [False, True]) - 0.5) <= 1e-12
        assert abs(average_precision([0.9, 0.5, 0.1], [True, True, False]) - 1.0) <= 1e-12
        assert abs(iou(Segment("v", 0, 10), Segment("v", 5, 15)) - 0.375) <= 1e-12
        note("AP 0.5 and 1.0, IoU 0.375 exact")

    @pytest.mark.criterion(8, "hand AP and IoU cases; segment mAP monotone in IoU")
    @settings(max_examples=200, deadline=None)
    @given(st.lists(st.tuples(st.integers(0, 3), st.integers(0, 90), st.integers(0, 30), st.integers(1, 3),
                              st.floats(0.0, 1.0)), min_size=0, max_size=25),
           st.lists(st.tuples(st.integers(0, 3), st.integers(0, 90), st.integers(0, 30), st.integers(1, 3)),
                    min_size=1, max_size=8))
    def test_monotone(self, dets, gts):
        dets = [Segment(f"v{v}", s, s + n, c, conf) for v, s, n, c, conf in dets]
        gts = [Segment(f"v{v}", s, s + n, c) for v, s, n, c in gts]
        dets = [d for d in dets if d.video_id in {g.video_id for g in gts}]
        thresholds = tuple(np.round(np.arange(0.05, 1.0, 0.05), 2))
        res = segment_level_map(dets, gts, thresholds, num_classes=3).mAP
        values = [res[t] for t in thresholds]
        assert all(a >= b for a, b in zip(values, values[1:]))


# ----------------------------------------------------------------------------
# 9: determinism through the command line
# ----------------------------------------------------------------------------


class TestDeterminism:
    @pytest.mark.criterion(9, "synth, train and predict are bitwise reproducible")
    def test_pipeline_twice(self, tmp_path, note):
        for run in ("a", "b"):
            root = tmp_path / run
            assert main(["synth", "--seed", "7", "--train-videos", "2", "--test-videos", "1",
                         "--out", str(root / "data")]) == 0
            assert main(["train", "--data", str(root / "data" / "train"), "--epochs-head", "1", "--epochs-all", "1",
                         "--lr-head", "3e-4", "--lr-all", "3e-4", "--stride", "16", "--out", str(root / "ckpt")]) == 0
            assert main(["predict", "--data", str(root / "data" / "test"), "--checkpoint", str(root / "ckpt"),
                         "--out", str(root / "scores")]) == 0
        for part in ("data", "ckpt", "scores"):
            assert same_tree(tmp_path / "a" / part, tmp_path / "b" / part), part
        note("dataset, checkpoint and score files identical byte for byte")
