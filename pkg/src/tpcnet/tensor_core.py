"""Dense tensor primitives for temporally dilated 3D ConvNets.

Tensors are plain ``numpy.ndarray`` objects of dtype float64 laid out as
``(N, C, L, H, W)`` for activations and ``(C_out, C_in, kT, kH, kW)`` for
convolution weights.  Every differentiable primitive comes as a
forward/backward pair of pure functions.

Temporal dilation (the atrous sampling rate ``r``) applies to the temporal
axis only: a kernel tap ``k`` reads input frame ``t * stride + r * k - pad``.
"""
from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence, Tuple, Union

import numpy as np

AXES = ("temporal", "height", "width")

Padding = Union[int, Tuple[int, int]]


class ShapeError(ValueError):
    """Raised when tensor dimensions are inconsistent with an operation."""


def as_tensor(data, shape: Sequence[int] | None = None) -> np.ndarray:
    """Return ``data`` as a contiguous float64 array, optionally reshaped."""
    arr = np.ascontiguousarray(np.asarray(data, dtype=np.float64))
    if shape is not None:
        shape = tuple(int(s) for s in shape)
        if any(s <= 0 for s in shape):
            raise ShapeError(f"shape must be positive, got {shape}")
        if int(np.prod(shape)) != arr.size:
            raise ShapeError(f"cannot view {arr.size} values as shape {shape}")
        arr = arr.reshape(shape)
    return arr


def _triple(v, name: str) -> Tuple[int, int, int]:
    if isinstance(v, (int, np.integer)):
        return (int(v),) * 3
    v = tuple(int(x) for x in v)
    if len(v) != 3:
        raise ValueError(f"{name} needs 3 entries (T, H, W), got {v}")
    return v


def normalize_padding(padding) -> Tuple[Tuple[int, int], ...]:
    """Expand padding into ``((before, after),) * 3``.

    Accepts an int, a triple of ints (symmetric per axis) or a triple of
    ``(before, after)`` pairs.
    """
    if isinstance(padding, (int, np.integer)):
        padding = (int(padding),) * 3
    padding = tuple(padding)
    if len(padding) != 3:
        raise ValueError(f"padding needs 3 entries (T, H, W), got {padding}")
    out = []
    for p in padding:
        pair = (int(p), int(p)) if isinstance(p, (int, np.integer)) else tuple(int(q) for q in p)
        if len(pair) != 2 or min(pair) < 0:
            raise ValueError(f"invalid padding entry {p!r}")
        out.append(pair)
    return tuple(out)


def same_temporal_padding(kernel_t: int, dilation: int = 1) -> Tuple[int, int]:
    """Centred padding that keeps temporal length at unit stride.

    The total ``r * (kT - 1)`` is split with the smaller half in front, so
    output frame ``t`` lines up with input frame ``t``.
    """
    total = dilation * (kernel_t - 1)
    return total // 2, total - total // 2


def output_length(size: int, kernel: int, stride: int, pad: Tuple[int, int], dilation: int = 1) -> int:
    return (size + pad[0] + pad[1] - dilation * (kernel - 1) - 1) // stride + 1


@dataclass(frozen=True)
class ConvParams:
    """Weights and geometry of one 3D convolution."""

    weights: np.ndarray
    bias: np.ndarray
    temporal_dilation: int = 1
    padding: Padding = 0
    stride: Sequence[int] = (1, 1, 1)

    def __post_init__(self):
        w = as_tensor(self.weights)
        if w.ndim != 5:
            raise ShapeError(f"conv weights must be 5-D (C_out, C_in, kT, kH, kW), got {w.shape}")
        b = as_tensor(self.bias)
        if b.shape != (w.shape[0],):
            raise ShapeError(f"bias shape {b.shape} does not match {w.shape[0]} output channels")
        if self.temporal_dilation < 1:
            raise ValueError("temporal_dilation must be >= 1")
        stride = _triple(self.stride, "stride")
        if min(stride) < 1:
            raise ValueError(f"stride must be positive, got {stride}")
        object.__setattr__(self, "weights", w)
        object.__setattr__(self, "bias", b)
        object.__setattr__(self, "padding", normalize_padding(self.padding))
        object.__setattr__(self, "stride", stride)

    @property
    def kernel(self) -> Tuple[int, int, int]:
        return tuple(self.weights.shape[2:])

    @property
    def dilation(self) -> Tuple[int, int, int]:
        return (self.temporal_dilation, 1, 1)


@dataclass(frozen=True)
class PoolParams:
    """Max-pooling window geometry.

    ``temporal_dilation`` spaces the temporal window taps the same way a
    dilated convolution does; 1 gives ordinary pooling.
    """

    kernel: Sequence[int]
    stride: Sequence[int]
    padding: Padding = 0
    temporal_dilation: int = 1

    def __post_init__(self):
        kernel = _triple(self.kernel, "kernel")
        stride = _triple(self.stride, "stride")
        if min(kernel) < 1 or min(stride) < 1:
            raise ValueError(f"kernel and stride must be positive, got {kernel}, {stride}")
        if self.temporal_dilation < 1:
            raise ValueError("temporal_dilation must be >= 1")
        object.__setattr__(self, "kernel", kernel)
        object.__setattr__(self, "stride", stride)
        object.__setattr__(self, "padding", normalize_padding(self.padding))

    @property
    def dilation(self) -> Tuple[int, int, int]:
        return (self.temporal_dilation, 1, 1)


def _output_dims(spatial, kernel, stride, padding, dilation, what: str):
    dims = []
    for axis, size, k, s, p, d in zip(AXES, spatial, kernel, stride, padding, dilation):
        o = output_length(size, k, s, p, d)
        if o <= 0:
            raise ShapeError(
                f"{what}: {axis} axis produces empty output "
                f"(size {size}, padding {p}, kernel {k}, dilation {d}, stride {s})"
            )
        dims.append(o)
    return tuple(dims)


def _tap_slices(offsets, out_dims, stride):
    return tuple(slice(o, o + s * (n - 1) + 1, s) for o, n, s in zip(offsets, out_dims, stride))


def _check_5d(x: np.ndarray, what: str):
    if x.ndim != 5:
        raise ShapeError(f"{what} expects a 5-D (N, C, L, H, W) tensor, got shape {x.shape}")


# ----------------------------------------------------------------------------
# convolution
# ----------------------------------------------------------------------------


def _im2col(x: np.ndarray, params: ConvParams):
    n, c = x.shape[:2]
    kernel, stride, pad, dil = params.kernel, params.stride, params.padding, params.dilation
    out_dims = _output_dims(x.shape[2:], kernel, stride, pad, dil, "conv3d")
    xp = np.pad(x, ((0, 0), (0, 0)) + pad) if any(map(any, pad)) else x
    cols = np.empty((c,) + kernel + (n,) + out_dims)
    for a in range(kernel[0]):
        for b in range(kernel[1]):
            for k in range(kernel[2]):
                sl = _tap_slices((a * dil[0], b, k), out_dims, stride)
                cols[:, a, b, k] = xp[(slice(None), slice(None)) + sl].transpose(1, 0, 2, 3, 4)
    return cols, out_dims


def conv3d_forward(x: np.ndarray, params: ConvParams, return_cols: bool = False):
    """Temporally dilated 3D convolution.

    Args:
        x: input of shape (N, C_in, L, H, W).
        params: weights, bias and geometry.
        return_cols: also return the unfolded input, which
            :func:`conv3d_backward` can reuse.

    Returns:
        Output of shape (N, C_out, L', H', W'), plus the unfolded input when
        ``return_cols`` is set.
    """
    x = as_tensor(x)
    _check_5d(x, "conv3d")
    if x.shape[1] != params.weights.shape[1]:
        raise ShapeError(
            f"conv3d: input has {x.shape[1]} channels but weights expect {params.weights.shape[1]}"
        )
    cols, out_dims = _im2col(x, params)
    c_out = params.weights.shape[0]
    out = params.weights.reshape(c_out, -1) @ cols.reshape(-1, x.shape[0] * int(np.prod(out_dims)))
    out += params.bias[:, None]
    out = np.ascontiguousarray(out.reshape((c_out, x.shape[0]) + out_dims).transpose(1, 0, 2, 3, 4))
    return (out, cols) if return_cols else out


def conv3d_backward(x: np.ndarray, params: ConvParams, grad_output: np.ndarray, cols=None, need_input_grad=True):
    """Adjoint of :func:`conv3d_forward`.

    Returns ``(grad_input, grad_weights, grad_bias)``; ``grad_input`` is None
    when ``need_input_grad`` is False.
    """
    x = as_tensor(x)
    _check_5d(x, "conv3d_backward")
    kernel, stride, pad, dil = params.kernel, params.stride, params.padding, params.dilation
    out_dims = _output_dims(x.shape[2:], kernel, stride, pad, dil, "conv3d_backward")
    c_out, c_in = params.weights.shape[:2]
    n = x.shape[0]
    expected = (n, c_out) + out_dims
    if grad_output.shape != expected:
        raise ShapeError(f"conv3d_backward: grad_output shape {grad_output.shape}, expected {expected}")
    if cols is None:
        cols, _ = _im2col(x, params)
    g = grad_output.transpose(1, 0, 2, 3, 4).reshape(c_out, -1)
    cols2d = cols.reshape(-1, g.shape[1])
    grad_w = (g @ cols2d.T).reshape(params.weights.shape)
    grad_b = g.sum(axis=1)
    if not need_input_grad:
        return None, grad_w, grad_b

    dcols = (params.weights.reshape(c_out, -1).T @ g).reshape((c_in,) + kernel + (n,) + out_dims)
    padded = tuple(s + p[0] + p[1] for s, p in zip(x.shape[2:], pad))
    gxp = np.zeros((n, c_in) + padded)
    for a in range(kernel[0]):
        for b in range(kernel[1]):
            for k in range(kernel[2]):
                sl = _tap_slices((a * dil[0], b, k), out_dims, stride)
                gxp[(slice(None), slice(None)) + sl] += dcols[:, a, b, k].transpose(1, 0, 2, 3, 4)
    crop = tuple(slice(p[0], p[0] + s) for s, p in zip(x.shape[2:], pad))
    grad_x = np.ascontiguousarray(gxp[(slice(None), slice(None)) + crop])
    return grad_x, grad_w, grad_b


# ----------------------------------------------------------------------------
# max pooling
# ----------------------------------------------------------------------------


@dataclass(frozen=True)
class PoolArgmax:
    """Flat input indices of each pooled maximum, plus the input shape."""

    indices: np.ndarray
    input_shape: Tuple[int, ...]


def maxpool3d_forward(x: np.ndarray, params: PoolParams):
    """Max pooling over (T, H, W) windows.

    Padding cells hold -inf and are never selected.  Ties go to the lowest
    flat input index in the window.

    Returns:
        ``(output, argmax)`` where ``argmax`` is a :class:`PoolArgmax`.
    """
    x = as_tensor(x)
    _check_5d(x, "maxpool3d")
    n, c, L, H, W = x.shape
    kernel, stride, pad, dil = params.kernel, params.stride, params.padding, params.dilation
    out_dims = _output_dims(x.shape[2:], kernel, stride, pad, dil, "maxpool3d")
    xp = np.pad(x, ((0, 0), (0, 0)) + pad, constant_values=-np.inf) if any(map(any, pad)) else x
    taps = [(a, b, k) for a in range(kernel[0]) for b in range(kernel[1]) for k in range(kernel[2])]
    out = None
    winner = np.zeros((n, c) + out_dims, dtype=np.int16)
    # lexicographic tap order is increasing flat input index, so strict '>' keeps the lowest on ties
    for j, (a, b, k) in enumerate(taps):
        v = xp[(slice(None), slice(None)) + _tap_slices((a * dil[0], b, k), out_dims, stride)]
        if out is None:
            out = v.copy()
            continue
        better = v > out
        np.copyto(out, v, where=better)
        np.copyto(winner, j, where=better)
    if np.isneginf(out).any():
        raise ShapeError("maxpool3d: a pooling window covers only padding")

    offs = np.array(taps).T  # (3, n_taps)
    t = np.arange(out_dims[0]).reshape(-1, 1, 1) * stride[0] - pad[0][0] + (offs[0] * dil[0])[winner]
    h = np.arange(out_dims[1]).reshape(-1, 1) * stride[1] - pad[1][0] + offs[1][winner]
    w = np.arange(out_dims[2]) * stride[2] - pad[2][0] + offs[2][winner]
    base = (np.arange(n * c, dtype=np.int64) * (L * H * W)).reshape(n, c, 1, 1, 1)
    idx = base + (t * H + h) * W + w
    return out, PoolArgmax(idx, x.shape)


def maxpool3d_backward(argmax: PoolArgmax, grad_output: np.ndarray) -> np.ndarray:
    """Route each output gradient to the input cell that won the max."""
    if grad_output.shape != argmax.indices.shape:
        raise ShapeError(
            f"maxpool3d_backward: grad_output shape {grad_output.shape} does not match "
            f"recorded indices {argmax.indices.shape}"
        )
    size = int(np.prod(argmax.input_shape))
    grad = np.bincount(argmax.indices.ravel(), weights=grad_output.ravel(), minlength=size)
    return grad.reshape(argmax.input_shape)


# ----------------------------------------------------------------------------
# global average pooling, activations, loss
# ----------------------------------------------------------------------------


def spatial_gap(x: np.ndarray) -> np.ndarray:
    """Mean over H and W for every frame: (N, C, L, H, W) -> (N, C, L, 1, 1)."""
    x = as_tensor(x)
    _check_5d(x, "spatial_gap")
    return x.mean(axis=(3, 4), keepdims=True)


def spatial_gap_backward(input_shape: Sequence[int], grad_output: np.ndarray) -> np.ndarray:
    n, c, L, H, W = input_shape
    if grad_output.shape != (n, c, L, 1, 1):
        raise ShapeError(f"spatial_gap_backward: grad_output shape {grad_output.shape}")
    return np.broadcast_to(grad_output / (H * W), tuple(input_shape)).copy()


def relu(x: np.ndarray) -> np.ndarray:
    return np.maximum(x, 0.0)


def relu_backward(output: np.ndarray, grad_output: np.ndarray) -> np.ndarray:
    return grad_output * (output > 0)


def one_hot(labels: np.ndarray, num_classes: int) -> np.ndarray:
    """Per-frame labels (N, L) -> one-hot (N, num_classes, L)."""
    labels = np.asarray(labels, dtype=np.int64)
    if labels.min(initial=0) < 0 or labels.max(initial=0) >= num_classes:
        raise ValueError(f"labels must lie in [0, {num_classes}), got range "
                         f"[{labels.min()}, {labels.max()}]")
    return np.moveaxis(np.eye(num_classes)[labels], -1, 1)


def log_softmax(logits: np.ndarray, axis: int = 1) -> np.ndarray:
    m = logits.max(axis=axis, keepdims=True)
    shifted = logits - m
    return shifted - np.log(np.exp(shifted).sum(axis=axis, keepdims=True))


def softmax(logits: np.ndarray, axis: int = 1) -> np.ndarray:
    return np.exp(log_softmax(logits, axis=axis))


def per_frame_softmax_loss(outputs: np.ndarray, labels: np.ndarray):
    """Softmax cross-entropy summed over frames and classes, averaged over the batch.

    Args:
        outputs: logits of shape (N, K+1, L).
        labels: one-hot targets of the same shape.

    Returns:
        ``(loss, grad)`` with ``grad = (softmax(outputs) - labels) / N``.
    """
    outputs = as_tensor(outputs)
    labels = as_tensor(labels)
    if outputs.ndim != 3 or outputs.shape != labels.shape:
        raise ShapeError(f"loss expects matching (N, K+1, L) tensors, got {outputs.shape} and {labels.shape}")
    if not (np.all((labels == 0) | (labels == 1)) and np.all(labels.sum(axis=1) == 1)):
        raise ValueError("labels must be one-hot over the class axis for every frame")
    n = outputs.shape[0]
    logp = log_softmax(outputs, axis=1)
    loss = -float((labels * logp).sum()) / n
    grad = (np.exp(logp) - labels) / n
    return loss, grad


def glorot_uniform(shape: Sequence[int], rng: np.random.Generator) -> np.ndarray:
    """Uniform in [-b, b], b = sqrt(6 / (fan_in + fan_out)), for conv weights."""
    receptive = int(np.prod(shape[2:])) if len(shape) > 2 else 1
    fan_in, fan_out = shape[1] * receptive, shape[0] * receptive
    bound = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-bound, bound, size=tuple(shape))


# ----------------------------------------------------------------------------
# binary serialization
# ----------------------------------------------------------------------------

MAGIC = b"TPCT"
FORMAT_VERSION = 1


def tensor_to_bytes(x: np.ndarray) -> bytes:
    """Encode as magic, u32 version, u32 rank, u64 dims, float64 payload (all little-endian)."""
    x = as_tensor(x)
    header = MAGIC + struct.pack("<II", FORMAT_VERSION, x.ndim) + struct.pack(f"<{x.ndim}Q", *x.shape)
    return header + x.astype("<f8", copy=False).tobytes(order="C")


def tensor_from_bytes(blob: bytes) -> np.ndarray:
    if blob[:4] != MAGIC:
        raise ValueError("not a tensor blob (bad magic)")
    version, rank = struct.unpack_from("<II", blob, 4)
    if version != FORMAT_VERSION:
        raise ValueError(f"unsupported tensor blob version {version}")
    dims = struct.unpack_from(f"<{rank}Q", blob, 12)
    offset = 12 + 8 * rank
    count = int(np.prod(dims)) if rank else 1
    if len(blob) - offset != 8 * count:
        raise ValueError(f"tensor blob payload has {len(blob) - offset} bytes, expected {8 * count}")
    data = np.frombuffer(blob, dtype="<f8", offset=offset, count=count)
    return data.astype(np.float64).reshape(dims)


def save_tensor(path, x: np.ndarray) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(tensor_to_bytes(x))


def load_tensor(path) -> np.ndarray:
    return tensor_from_bytes(Path(path).read_bytes())
