"""Executable networks built from a :class:`~tpcnet.arch.NetworkSpec`."""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, Iterable, List, Optional

import numpy as np

from .arch import LayerSpec, NetworkSpec, interpolation_matrix, parameter_shapes
from .tensor_core import (
    ConvParams,
    PoolParams,
    ShapeError,
    conv3d_backward,
    conv3d_forward,
    glorot_uniform,
    load_tensor,
    maxpool3d_backward,
    maxpool3d_forward,
    relu,
    relu_backward,
    save_tensor,
    spatial_gap,
    spatial_gap_backward,
)

Params = Dict[str, np.ndarray]


def init_params(spec: NetworkSpec, seed: int = 0) -> Params:
    """Glorot-uniform weights and zero biases, drawn in layer order."""
    rng = np.random.default_rng(seed)
    params = {}
    for name, shape in parameter_shapes(spec):
        params[name] = glorot_uniform(shape, rng) if name.endswith(".w") else np.zeros(shape)
    return params


def _conv_params(layer: LayerSpec, params: Params) -> ConvParams:
    return ConvParams(params[f"{layer.name}.w"], params[f"{layer.name}.b"], layer.dilation, layer.padding,
                      layer.stride)


def _pool_params(layer: LayerSpec) -> PoolParams:
    return PoolParams(layer.kernel, layer.stride, layer.padding, layer.dilation)


class Network:
    """Forward/backward evaluation of a spec with a parameter dictionary.

    Activations are (N, C, L, H, W).  The network output is reshaped to
    per-frame logits of shape (N, K+1, L_out).
    """

    def __init__(self, spec: NetworkSpec, params: Optional[Params] = None, seed: int = 0):
        self.spec = spec
        self.params = init_params(spec, seed) if params is None else dict(params)
        expected = dict(parameter_shapes(spec))
        if set(expected) != set(self.params):
            raise ShapeError(f"parameter names {sorted(self.params)} do not match spec {sorted(expected)}")
        for name, shape in expected.items():
            if self.params[name].shape != shape:
                raise ShapeError(f"parameter {name} has shape {self.params[name].shape}, expected {shape}")

    @property
    def layer_names(self) -> List[str]:
        return [layer.name for layer in self.spec.layers]

    def forward(self, x: np.ndarray, start: int = 0, stop: Optional[int] = None, cache: Optional[list] = None):
        """Run layers ``start`` to ``stop`` (exclusive) on ``x``.

        When ``cache`` is a list, per-layer records for :meth:`backward` are
        appended to it.
        """
        layers = self.spec.layers[start:stop]
        for layer in layers:
            if layer.kind in ("conv", "classifier"):
                p = _conv_params(layer, self.params)
                if cache is not None:
                    y, cols = conv3d_forward(x, p, return_cols=True)
                else:
                    y, cols = conv3d_forward(x, p), None
                if layer.activation == "relu":
                    y = relu(y)
                record = (x, cols, y)
            elif layer.kind == "pool":
                y, argmax = maxpool3d_forward(x, _pool_params(layer))
                record = argmax
            else:
                y = spatial_gap(x)
                record = x.shape
            if cache is not None:
                cache.append((layer, record))
            x = y
        return x

    def logits(self, x: np.ndarray) -> np.ndarray:
        """Per-frame logits (N, K+1, L_out) at the network's native temporal resolution."""
        return _squeeze(self.forward(x))

    def backward(self, cache: list, grad: np.ndarray, trainable: Optional[Iterable[str]] = None) -> Params:
        """Back-propagate ``grad`` (w.r.t. the last cached output) through ``cache``.

        Gradients are returned only for the layers in ``trainable`` (all
        parameterised layers when None); propagation stops below the lowest
        trainable layer.
        """
        names = {layer.name for layer, _ in cache if layer.has_params}
        wanted = names if trainable is None else set(trainable) & names
        if not wanted:
            return {}
        lowest = min(i for i, (layer, _) in enumerate(cache) if layer.name in wanted)
        grads = {}
        for i in range(len(cache) - 1, lowest - 1, -1):
            layer, record = cache[i]
            if layer.kind in ("conv", "classifier"):
                x, cols, y = record
                if layer.activation == "relu":
                    grad = relu_backward(y, grad)
                gx, gw, gb = conv3d_backward(x, _conv_params(layer, self.params), grad, cols=cols,
                                             need_input_grad=i > lowest)
                if layer.name in wanted:
                    grads[f"{layer.name}.w"] = gw
                    grads[f"{layer.name}.b"] = gb
                grad = gx
            elif layer.kind == "pool":
                grad = maxpool3d_backward(record, grad)
            else:
                grad = spatial_gap_backward(record, grad)
        return grads


def _squeeze(y: np.ndarray) -> np.ndarray:
    if y.shape[3:] != (1, 1):
        raise ShapeError(f"network output must be spatially 1x1 per frame, got {y.shape}")
    return y[:, :, :, 0, 0]


def frame_logits(net: Network, x: np.ndarray) -> np.ndarray:
    """Logits with one row per input frame, linearly interpolated when the net downsamples time."""
    native = net.logits(x)
    L = x.shape[2]
    if native.shape[2] == L:
        return native
    M = interpolation_matrix(native.shape[2], L)
    return np.einsum("tl,nkl->nkt", M, native)


def loss_and_grads(net: Network, x: np.ndarray, labels_1hot: np.ndarray, loss_fn,
                   trainable: Optional[Iterable[str]] = None, start: int = 0, stop: Optional[int] = None):
    """Loss on per-frame logits (upsampled to input length) and parameter gradients.

    ``start``/``stop`` allow ``x`` to be an intermediate activation, so frozen
    lower layers need not be recomputed.
    """
    cache = []
    native = _squeeze(net.forward(x, start=start, stop=stop, cache=cache))
    L = labels_1hot.shape[2]
    if native.shape[2] == L:
        loss, g = loss_fn(native, labels_1hot)
    else:
        M = interpolation_matrix(native.shape[2], L)
        loss, g_up = loss_fn(np.einsum("tl,nkl->nkt", M, native), labels_1hot)
        g = np.einsum("tl,nkt->nkl", M, g_up)
    grads = net.backward(cache, g[:, :, :, None, None], trainable)
    return loss, grads


# ----------------------------------------------------------------------------
# checkpoints
# ----------------------------------------------------------------------------


@dataclass
class Checkpoint:
    spec: NetworkSpec
    params: Params
    epoch: int = 0
    stage: int = 1
    velocity: Params = field(default_factory=dict)
    history: List[tuple] = field(default_factory=list)

    @property
    def spec_hash(self) -> str:
        return self.spec.spec_hash()


def save_checkpoint(path, ckpt: Checkpoint) -> None:
    """Write ``spec.json``, ``meta.json`` and one tensor blob per parameter (and velocity)."""
    path = Path(path)
    (path / "params").mkdir(parents=True, exist_ok=True)
    (path / "spec.json").write_text(ckpt.spec.to_text() + "\n")
    meta = {
        "spec_hash": ckpt.spec_hash,
        "epoch": ckpt.epoch,
        "stage": ckpt.stage,
        "params": sorted(ckpt.params),
        "velocity": sorted(ckpt.velocity),
        "history": [list(h) for h in ckpt.history],
    }
    (path / "meta.json").write_text(json.dumps(meta, indent=2) + "\n")
    for name, value in ckpt.params.items():
        save_tensor(path / "params" / f"{name}.tpct", value)
    if ckpt.velocity:
        (path / "velocity").mkdir(exist_ok=True)
        for name, value in ckpt.velocity.items():
            save_tensor(path / "velocity" / f"{name}.tpct", value)


def load_checkpoint(path) -> Checkpoint:
    path = Path(path)
    spec = NetworkSpec.from_text((path / "spec.json").read_text())
    meta = json.loads((path / "meta.json").read_text())
    if meta["spec_hash"] != spec.spec_hash():
        raise ValueError(f"{path}: spec hash {meta['spec_hash'][:12]} does not match stored spec "
                         f"({spec.spec_hash()[:12]})")
    params = {name: load_tensor(path / "params" / f"{name}.tpct") for name in meta["params"]}
    velocity = {name: load_tensor(path / "velocity" / f"{name}.tpct") for name in meta["velocity"]}
    history = [tuple(h) for h in meta["history"]]
    return Checkpoint(spec, params, meta["epoch"], meta["stage"], velocity, history)
