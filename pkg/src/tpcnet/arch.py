"""Declarative network descriptions, shape inference and architecture presets.

A :class:`NetworkSpec` is an ordered list of :class:`LayerSpec` records.  The
presets mirror the five-stage C3D layout at desk scale.  In the temporal
preservation presets a pooling stage keeps temporal stride 1, and every layer
after it samples time at a proportionally larger atrous rate, so each unit
still sees the same span of input frames as its C3D counterpart.
"""
from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, field, replace
from typing import List, Optional, Sequence, Tuple

import numpy as np

from .tensor_core import ShapeError, normalize_padding, output_length, same_temporal_padding

LAYER_KINDS = ("conv", "pool", "gap", "classifier")
ACTIVATIONS = ("relu", "none")

Pad = Tuple[Tuple[int, int], Tuple[int, int], Tuple[int, int]]


@dataclass(frozen=True)
class LayerSpec:
    name: str
    kind: str
    kernel: Tuple[int, int, int] = (1, 1, 1)
    stride: Tuple[int, int, int] = (1, 1, 1)
    padding: Pad = ((0, 0), (0, 0), (0, 0))
    dilation: int = 1
    out_channels: int = 0
    activation: str = "none"

    def __post_init__(self):
        if self.kind not in LAYER_KINDS:
            raise ValueError(f"layer {self.name!r}: unknown kind {self.kind!r}")
        if self.activation not in ACTIVATIONS:
            raise ValueError(f"layer {self.name!r}: unknown activation {self.activation!r}")
        object.__setattr__(self, "kernel", tuple(int(k) for k in self.kernel))
        object.__setattr__(self, "stride", tuple(int(s) for s in self.stride))
        object.__setattr__(self, "padding", normalize_padding(self.padding))
        if self.kind in ("conv", "classifier") and self.out_channels < 1:
            raise ValueError(f"layer {self.name!r}: conv layers need out_channels >= 1")
        if self.dilation < 1:
            raise ValueError(f"layer {self.name!r}: dilation must be >= 1")

    @property
    def has_params(self) -> bool:
        return self.kind in ("conv", "classifier")


@dataclass(frozen=True)
class NetworkSpec:
    name: str
    layers: Tuple[LayerSpec, ...]
    num_classes: int
    input_shape: Tuple[int, int, int, int]  # (C, L, H, W)

    def __post_init__(self):
        object.__setattr__(self, "layers", tuple(self.layers))
        object.__setattr__(self, "input_shape", tuple(int(s) for s in self.input_shape))
        if self.num_classes < 1:
            raise ValueError("num_classes must be positive")
        names = [layer.name for layer in self.layers]
        if len(set(names)) != len(names):
            raise ValueError(f"duplicate layer names in {names}")
        for layer in self.layers:
            if layer.kind == "classifier" and layer.out_channels != self.num_classes + 1:
                raise ValueError(
                    f"classifier {layer.name!r} has {layer.out_channels} outputs, expected K+1 = {self.num_classes + 1}"
                )

    def with_length(self, length: int) -> "NetworkSpec":
        c, _, h, w = self.input_shape
        return replace(self, input_shape=(c, int(length), h, w))

    def layer_index(self, name: str) -> int:
        for i, layer in enumerate(self.layers):
            if layer.name == name:
                return i
        raise KeyError(name)

    @property
    def temporal_factor(self) -> int:
        """How many input frames map onto one output frame (1 for temporal preservation)."""
        L = self.input_shape[1]
        out = infer_shapes(self)[-1][1]
        if L % out:
            raise ShapeError(f"{self.name}: output length {out} does not divide input length {L}")
        return L // out

    # -- text configuration -------------------------------------------------

    def to_dict(self) -> dict:
        return {
            "name": self.name,
            "num_classes": self.num_classes,
            "input_shape": list(self.input_shape),
            "layers": [
                {k: (list(map(list, v)) if k == "padding" else list(v) if isinstance(v, tuple) else v)
                 for k, v in asdict(layer).items()}
                for layer in self.layers
            ],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "NetworkSpec":
        layers = [LayerSpec(**{k: (tuple(v) if isinstance(v, list) else v) for k, v in ld.items()})
                  for ld in d["layers"]]
        return cls(d["name"], tuple(layers), int(d["num_classes"]), tuple(d["input_shape"]))

    def to_text(self) -> str:
        return json.dumps(self.to_dict(), indent=2)

    @classmethod
    def from_text(cls, text: str) -> "NetworkSpec":
        return cls.from_dict(json.loads(text))

    def spec_hash(self) -> str:
        canon = json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(canon.encode()).hexdigest()


@dataclass(frozen=True)
class ReceptiveField:
    extent_frames: int
    stride_frames: int


# ----------------------------------------------------------------------------
# shape inference
# ----------------------------------------------------------------------------


def layer_output_shape(layer: LayerSpec, shape: Sequence[int]) -> Tuple[int, int, int, int]:
    c, *spatial = shape
    if layer.kind == "gap":
        return (c, spatial[0], 1, 1)
    dims = []
    for axis, size, k, s, p, d in zip(("temporal", "height", "width"), spatial, layer.kernel, layer.stride,
                                      layer.padding, (layer.dilation, 1, 1)):
        o = output_length(size, k, s, p, d)
        if o <= 0:
            raise ShapeError(f"layer {layer.name!r}: {axis} axis would have length {o} (input {size})")
        dims.append(o)
    channels = layer.out_channels if layer.has_params else c
    return (channels, *dims)


def infer_shapes(spec: NetworkSpec) -> List[Tuple[int, int, int, int]]:
    """Output shape (C, L, H, W) of every layer, in order."""
    shapes = []
    shape = spec.input_shape
    for layer in spec.layers:
        shape = layer_output_shape(layer, shape)
        shapes.append(shape)
    return shapes


def parameter_shapes(spec: NetworkSpec) -> List[Tuple[str, Tuple[int, ...]]]:
    """``(param_name, shape)`` pairs in layer order; names are ``<layer>.w`` / ``<layer>.b``."""
    out = []
    c = spec.input_shape[0]
    for layer, shape in zip(spec.layers, infer_shapes(spec)):
        if layer.has_params:
            out.append((f"{layer.name}.w", (layer.out_channels, c) + layer.kernel))
            out.append((f"{layer.name}.b", (layer.out_channels,)))
        c = shape[0]
    return out


def count_parameters(spec: NetworkSpec, layers: Optional[Sequence[str]] = None) -> int:
    wanted = None if layers is None else {f"{n}.{s}" for n in layers for s in "wb"}
    return sum(int(np.prod(s)) for name, s in parameter_shapes(spec) if wanted is None or name in wanted)


def head_layer_names(spec: NetworkSpec) -> List[str]:
    """Parameterised layers after the last pooling / GAP stage."""
    last = max(i for i, layer in enumerate(spec.layers) if layer.kind in ("pool", "gap"))
    return [layer.name for layer in spec.layers[last + 1:] if layer.has_params]


# ----------------------------------------------------------------------------
# temporal receptive field
# ----------------------------------------------------------------------------


def temporal_receptive_field(spec: NetworkSpec, layer_index: int) -> ReceptiveField:
    """Temporal extent and cumulative stride of one unit of layer ``layer_index``, in input frames."""
    if not 0 <= layer_index < len(spec.layers):
        raise IndexError(f"layer index {layer_index} out of range for {len(spec.layers)} layers")
    extent, stride = 1, 1
    for layer in spec.layers[: layer_index + 1]:
        if layer.kind == "gap":
            continue
        extent += (layer.kernel[0] - 1) * layer.dilation * stride
        stride *= layer.stride[0]
    return ReceptiveField(extent, stride)


def temporal_footprint(spec: NetworkSpec, layer_index: int, position: int) -> List[int]:
    """Input frames read (transitively) by output unit ``position`` of a layer.

    Coordinates are not clipped to the clip, so padded positions show up as
    negative or past-the-end frame numbers.
    """
    frames = {position}
    for layer in reversed(spec.layers[: layer_index + 1]):
        if layer.kind == "gap":
            continue
        pad = layer.padding[0][0]
        frames = {t * layer.stride[0] - pad + layer.dilation * a for t in frames for a in range(layer.kernel[0])}
    return sorted(frames)


# ----------------------------------------------------------------------------
# presets
# ----------------------------------------------------------------------------


@dataclass(frozen=True)
class MiniScale:
    in_channels: int = 1
    length: int = 32
    size: int = 32
    widths: Tuple[int, ...] = (8, 16, 32, 32, 32)
    head_width: int = 64
    head_kernel: int = 4


# pooling stages (2..5) whose temporal stride is kept at 1
_PRESERVED = {
    "c3d-mini": (),
    "interp-baseline": (5,),
    "tpc-2": (2,),
    "tpc-3": (3,),
    "tpc-4": (4,),
    "tpc-23": (2, 3),
    "tpc-34": (3, 4),
    "tpc-mini": (2, 3, 4, 5),
    "tpc-gap-mini": (2, 3, 4, 5),
}

PRESETS = tuple(_PRESERVED)

# spatial downsampling per pooling stage; later stages keep the 4x4 map for the head
_SPATIAL_POOL = {1: 2, 2: 2, 3: 2, 4: 1, 5: 1}


def _conv(name, out_channels, dilation, activation="relu", kernel=(3, 3, 3)):
    pt = same_temporal_padding(kernel[0], dilation)
    spatial = ((kernel[1] - 1) // 2, (kernel[2] - 1) // 2)
    return LayerSpec(name, "conv", kernel, (1, 1, 1), (pt, spatial[0], spatial[1]), dilation, out_channels, activation)


def backbone(preserved: Sequence[int], scale: MiniScale = MiniScale()) -> List[LayerSpec]:
    """Five conv stages with interleaved max pooling.

    Temporal pooling uses a 3-frame window in stages 2-5 (stage 1 never pools
    in time).  A stage listed in ``preserved`` pools with temporal stride 1
    and doubles the atrous rate of everything downstream.
    """
    layers = []
    rate = 1
    for stage, width in enumerate(scale.widths, start=1):
        layers.append(_conv(f"conv{stage}", width, rate))
        s = _SPATIAL_POOL[stage]
        if stage == 1:
            layers.append(LayerSpec("pool1", "pool", (1, s, s), (1, s, s)))
            continue
        t_stride = 1 if stage in preserved else 2
        layers.append(LayerSpec(f"pool{stage}", "pool", (3, s, s), (t_stride, s, s), (rate, 0, 0), rate))
        if stage in preserved:
            rate *= 2
    return layers


def fc_to_conv_head(spec: NetworkSpec, width: int = 64, head_kernel: Tuple[int, int] = (4, 4)) -> NetworkSpec:
    """Append the fully-connected head as per-frame convolutions.

    conv6 spans the whole final ``head_kernel`` feature map of one frame, conv7
    is 1x1x1, and the classifier emits K+1 scores per frame.
    """
    shape = infer_shapes(spec)[-1] if spec.layers else spec.input_shape
    if tuple(shape[2:]) != tuple(head_kernel):
        raise ShapeError(f"{spec.name}: final feature map is {shape[2]}x{shape[3]}, head expects "
                         f"{head_kernel[0]}x{head_kernel[1]}")
    head = (
        LayerSpec("conv6", "conv", (1,) + tuple(head_kernel), out_channels=width, activation="relu"),
        LayerSpec("conv7", "conv", (1, 1, 1), out_channels=width, activation="relu"),
        LayerSpec("conv8", "classifier", (1, 1, 1), out_channels=spec.num_classes + 1),
    )
    return replace(spec, layers=spec.layers + head)


def gap_head(spec: NetworkSpec) -> NetworkSpec:
    head = (
        LayerSpec("gap", "gap"),
        LayerSpec("conv6_gap", "classifier", (1, 1, 1), out_channels=spec.num_classes + 1),
    )
    return replace(spec, layers=spec.layers + head)


def build_preset(name: str, num_classes: int, scale: Optional[MiniScale] = None) -> NetworkSpec:
    if name not in _PRESERVED:
        raise ValueError(f"unknown preset {name!r}; choose from {', '.join(PRESETS)}")
    scale = scale or MiniScale()
    base = NetworkSpec(name, tuple(backbone(_PRESERVED[name], scale)), num_classes,
                       (scale.in_channels, scale.length, scale.size, scale.size))
    if name == "tpc-gap-mini":
        return gap_head(base)
    return fc_to_conv_head(base, scale.head_width, (scale.head_kernel, scale.head_kernel))


def strip_preservation(spec: NetworkSpec) -> NetworkSpec:
    """Undo temporal preservation: atrous rates back to 1, pooling stride back to 2."""
    layers = []
    for layer in spec.layers:
        if layer.kind == "conv" or layer.kind == "classifier":
            layers.append(replace(layer, dilation=1, padding=(same_temporal_padding(layer.kernel[0], 1),)
                                  + layer.padding[1:]))
        elif layer.kind == "pool" and layer.kernel[0] > 1:
            layers.append(replace(layer, dilation=1, stride=(2,) + layer.stride[1:],
                                  padding=((1, 1),) + layer.padding[1:]))
        else:
            layers.append(layer)
    return replace(spec, layers=tuple(layers))


# ----------------------------------------------------------------------------
# temporal interpolation
# ----------------------------------------------------------------------------


def interpolation_matrix(n_in: int, n_out: int) -> np.ndarray:
    """Linear-interpolation operator ``M`` with ``upsampled = M @ samples``.

    Input sample ``i`` sits at output coordinate ``i * (n_out - 1) / (n_in - 1)``,
    so the first and last samples land exactly on the first and last frames.
    A single input sample is replicated.
    """
    M = np.zeros((n_out, n_in))
    if n_in == 1:
        M[:, 0] = 1.0
        return M
    pos = np.arange(n_out) * (n_in - 1) / (n_out - 1) if n_out > 1 else np.zeros(1)
    lo = np.minimum(np.floor(pos).astype(int), n_in - 2)
    frac = pos - lo
    M[np.arange(n_out), lo] = 1.0 - frac
    M[np.arange(n_out), lo + 1] += frac
    return M


def interpolate_scores(scores: np.ndarray, factor: int, target_length: Optional[int] = None) -> np.ndarray:
    """Upsample a (frames, classes) score matrix by an integer factor along frames."""
    if int(factor) != factor or factor < 1:
        raise ValueError(f"interpolation factor must be a positive integer, got {factor}")
    scores = np.asarray(scores, dtype=np.float64)
    n = scores.shape[0]
    if target_length is None:
        target_length = n * factor
    if target_length % factor or target_length // factor != n:
        raise ValueError(f"factor {factor} does not map {n} rows onto {target_length} frames")
    if factor == 1:
        return scores.copy()
    return interpolation_matrix(n, target_length) @ scores
