"""Feature-map producers: a tiny trainable conv stack, or injected maps.

The encoder either runs a small stack of same-padded conv layers (TinyCNN
mode) or passes through a precomputed feature map loaded from a SCAT file
(FeatureInjection mode, for plugging in features computed elsewhere).
Feature maps are (W, H, C) tensors; convolution never changes the spatial
extent, only the optional 2x2 mean pool does.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .errors import ConfigError, DimensionError, FormatError
from .serialize import read_tensor
from .tensor import Tensor, _from_op

NONLINEARITIES = ("tanh", "relu", "linear")


@dataclass(frozen=True)
class ConvLayerSpec:
    in_channels: int
    out_channels: int
    kernel: int = 3
    nonlinearity: str = "tanh"
    pool: bool = False

    def __post_init__(self):
        if self.kernel < 1 or self.kernel % 2 == 0:
            raise ConfigError(f"kernel must be odd and positive, got {self.kernel}")
        if self.in_channels < 1 or self.out_channels < 1:
            raise ConfigError("channel counts must be positive")
        if self.nonlinearity not in NONLINEARITIES:
            raise ConfigError(f"unknown nonlinearity {self.nonlinearity!r}")


@dataclass(frozen=True)
class EncoderConfig:
    layers: tuple = ()
    mode: str = "tiny"  # "tiny" (trainable conv stack) or "inject" (maps loaded as-is)

    def __post_init__(self):
        if self.mode not in ("tiny", "inject"):
            raise ConfigError(f"unknown encoder mode {self.mode!r}")
        if self.mode == "inject" and self.layers:
            raise ConfigError("inject mode takes no conv layers")
        for prev, cur in zip(self.layers, self.layers[1:]):
            if prev.out_channels != cur.in_channels:
                raise ConfigError(
                    f"channel chain broken: {prev.out_channels} -> {cur.in_channels}"
                )

    @property
    def depth(self):
        return len(self.layers)

    @staticmethod
    def tiny_default(in_channels=3):
        return EncoderConfig(
            layers=(
                ConvLayerSpec(in_channels, 8, 3, "tanh", pool=True),
                ConvLayerSpec(8, 16, 3, "tanh", pool=False),
            ),
            mode="tiny",
        )

    @staticmethod
    def injection():
        return EncoderConfig(layers=(), mode="inject")


def init_weights(config, rng, scale=0.08):
    """Uniform(-scale, scale) kernels and biases, one dict per conv layer."""
    out = []
    for spec in config.layers:
        k = spec.kernel
        w = rng.uniform(-scale, scale, size=(spec.out_channels, spec.in_channels, k, k))
        b = rng.uniform(-scale, scale, size=spec.out_channels)
        out.append({
            "w": Tensor(w, requires_grad=True),
            "b": Tensor(b, requires_grad=True),
        })
    return out


def _conv2d_same(x, w, b):
    """Same-padded cross-correlation as one differentiable node.

    x: (W, H, Cin); w: (Cout, Cin, k, k); b: (Cout,). The kernel tap
    w[o, i, u, v] multiplies x at spatial offset (u - p, v - p), p = k // 2.
    """
    wx, hx, cin = x.shape
    cout, cin_w, k, _ = w.shape
    if cin_w != cin:
        raise DimensionError(f"conv: input has {cin} channels, kernel expects {cin_w}")
    if b.shape != (cout,):
        raise DimensionError(f"conv: bias shape {b.shape} != ({cout},)")
    p = k // 2
    xpad = np.zeros((wx + 2 * p, hx + 2 * p, cin))
    xpad[p:p + wx, p:p + hx] = x.data
    out = np.broadcast_to(b.data, (wx, hx, cout)).copy()
    for u in range(k):
        for v in range(k):
            out += xpad[u:u + wx, v:v + hx] @ w.data[:, :, u, v].T

    def vjp(g):
        gx = gw = gb = None
        if x.requires_grad:
            gxpad = np.zeros_like(xpad)
            for u in range(k):
                for v in range(k):
                    gxpad[u:u + wx, v:v + hx] += g @ w.data[:, :, u, v]
            gx = gxpad[p:p + wx, p:p + hx]
        if w.requires_grad:
            gw = np.zeros_like(w.data)
            gflat = g.reshape(-1, cout)
            for u in range(k):
                for v in range(k):
                    gw[:, :, u, v] = gflat.T @ xpad[u:u + wx, v:v + hx].reshape(-1, cin)
        if b.requires_grad:
            gb = g.sum(axis=(0, 1))
        return gx, gw, gb

    return _from_op(out, (x, w, b), vjp)


def mean_pool2(x):
    """2x2 mean pooling; spatial extents must be even."""
    wx, hx, c = x.shape
    if wx % 2 or hx % 2:
        raise DimensionError(f"mean_pool2: extents {wx}x{hx} are not even")
    blocks = x.data.reshape(wx // 2, 2, hx // 2, 2, c)
    out = blocks.mean(axis=(1, 3))

    def vjp(g):
        gx = np.repeat(np.repeat(g, 2, axis=0), 2, axis=1) * 0.25
        return (gx,)

    return _from_op(out, (x,), vjp)


def conv_forward(x, spec, weights):
    """One conv layer: same-padded conv, nonlinearity, optional 2x2 mean pool."""
    if x.data.ndim != 3:
        raise DimensionError(f"conv_forward: expected (W, H, C) input, got shape {x.shape}")
    if x.shape[2] != spec.in_channels:
        raise DimensionError(
            f"conv_forward: input has {x.shape[2]} channels, spec expects {spec.in_channels}"
        )
    out = _conv2d_same(x, weights["w"], weights["b"])
    if spec.nonlinearity == "tanh":
        out = T.tanh_map(out)
    elif spec.nonlinearity == "relu":
        out = T.relu(out)
    if spec.pool:
        out = mean_pool2(out)
    return out


def encode(x, config, weights):
    """Run the whole stack; returns [input, layer1 output, ..., layerL output]."""
    if len(weights) != config.depth:
        raise ConfigError(f"{config.depth} layers but {len(weights)} weight sets")
    maps = [x]
    for spec, w in zip(config.layers, weights):
        maps.append(conv_forward(maps[-1], spec, w))
    return maps


def load_feature_map(path):
    arr = read_tensor(path)
    if arr.ndim != 3:
        raise FormatError(f"feature map must be rank 3, got rank {arr.ndim}")
    return Tensor(arr)


def output_shape(config, input_shape):
    """Spatial/channel extents of every map encode() would produce."""
    w, h, c = input_shape
    shapes = [(w, h, c)]
    for spec in config.layers:
        if spec.pool:
            w, h = w // 2, h // 2
        shapes.append((w, h, spec.out_channels))
    return shapes
