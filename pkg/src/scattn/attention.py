"""Spatial and channel-wise attention over convolutional feature maps.

Two factored attention branches share one parameter bundle per layer:

* spatial: score every location of the map against the decoder's previous
  hidden state and softmax over the m = W*H locations;
* channel: mean-pool each channel, score the pooled vector against the
  hidden state, softmax over the C channels.

The branches compose in either order (channel-then-spatial or
spatial-then-channel): the first branch's weights reweight the map that
the second branch sees, and the final map is the raw input modulated by
both weight vectors. Single-branch variants exist as baselines.
"""

from __future__ import annotations

from dataclasses import dataclass
from enum import Enum

import numpy as np

from . import encoder as E
from . import tensor as T
from .errors import ConfigError, DimensionError, DomainError
from .tensor import Tensor


class AttentionOrder(Enum):
    CHANNEL_FIRST = "cs"
    SPATIAL_FIRST = "sc"
    SPATIAL_ONLY = "s"
    CHANNEL_ONLY = "c"

    @staticmethod
    def from_string(s):
        for member in AttentionOrder:
            if member.value == s:
                return member
        raise ConfigError(f"unknown attention order {s!r} (want cs, sc, s, or c)")


@dataclass(frozen=True)
class ModulationConfig:
    """rescale=True divides applied weights by their uniform value (1/m or 1/C),
    so uniform attention leaves the map's magnitude unchanged."""

    rescale: bool = True


@dataclass
class AttentionParams:
    """Weights for both branches at one layer; dims (C channels, d hidden, k mapping)."""

    feat_w: Tensor      # (k, C) projects each location fiber
    feat_b: Tensor      # (k,)
    hid_w_s: Tensor     # (k, d) projects hidden state, spatial branch
    score_w_s: Tensor   # (k,) per-location score
    score_b_s: Tensor   # scalar
    chan_w: Tensor      # (k,) spans the mapping space per pooled channel mean
    chan_b: Tensor      # (k,)
    hid_w_c: Tensor     # (k, d) projects hidden state, channel branch
    score_w_c: Tensor   # (k,) per-channel score
    score_b_c: Tensor   # scalar

    @property
    def dims(self):
        k, c = self.feat_w.shape
        d = self.hid_w_s.shape[1]
        return c, d, k

    def __post_init__(self):
        c, d, k = self.dims
        want = {
            "feat_w": (k, c), "feat_b": (k,), "hid_w_s": (k, d),
            "score_w_s": (k,), "score_b_s": (),
            "chan_w": (k,), "chan_b": (k,), "hid_w_c": (k, d),
            "score_w_c": (k,), "score_b_c": (),
        }
        for name, shape in want.items():
            got = getattr(self, name).shape
            if got != shape:
                raise DimensionError(f"AttentionParams.{name}: shape {got}, want {shape}")

    @staticmethod
    def init(rng, channels, hidden, mapping, scale=0.08):
        def u(*shape):
            return Tensor(rng.uniform(-scale, scale, size=shape), requires_grad=True)

        return AttentionParams(
            feat_w=u(mapping, channels), feat_b=u(mapping),
            hid_w_s=u(mapping, hidden), score_w_s=u(mapping), score_b_s=u(),
            chan_w=u(mapping), chan_b=u(mapping), hid_w_c=u(mapping, hidden),
            score_w_c=u(mapping), score_b_c=u(),
        )

    def named(self, prefix):
        return {f"{prefix}.{f}": getattr(self, f) for f in (
            "feat_w", "feat_b", "hid_w_s", "score_w_s", "score_b_s",
            "chan_w", "chan_b", "hid_w_c", "score_w_c", "score_b_c",
        )}

    def tensors(self):
        return list(self.named("p").values())


@dataclass
class AttentionWeights:
    alpha: Tensor  # (m,) over locations, i = h*W + w
    beta: Tensor   # (C,) over channels
    layer: int = 0
    width: int = 0   # map geometry behind alpha's flattened index
    height: int = 0


def _as_flat(v):
    """Accept a (W, H, C) map or an already-flattened (C, m) matrix."""
    if v.data.ndim == 3:
        return T.flatten_spatial(v)
    if v.data.ndim == 2:
        return v
    raise DimensionError(f"expected a feature map, got shape {v.shape}")


def spatial_attention(v, h_prev, params):
    """Location weights: scores from projected fibers plus projected hidden state."""
    flat = _as_flat(v)  # (C, m)
    proj = T.broadcast_add_col(T.matmul(params.feat_w, flat), params.feat_b)
    gated = T.tanh_map(T.broadcast_add_col(proj, T.matmul(params.hid_w_s, h_prev)))
    scores = T.add(T.matmul(params.score_w_s, gated), params.score_b_s)
    return T.softmax(scores)


def channel_attention(v, h_prev, params):
    """Channel weights: scores from pooled channel means plus projected hidden state."""
    if v.data.ndim == 3:
        pooled = T.mean_pool_spatial(v)  # (C,)
    elif v.data.ndim == 2:
        m = v.shape[1]
        pooled = T.matmul(v, Tensor(np.full(m, 1.0 / m)))
    else:
        raise DimensionError(f"expected a feature map, got shape {v.shape}")
    proj = T.broadcast_add_col(T.outer(params.chan_w, pooled), params.chan_b)
    gated = T.tanh_map(T.broadcast_add_col(proj, T.matmul(params.hid_w_c, h_prev)))
    scores = T.add(T.matmul(params.score_w_c, gated), params.score_b_c)
    return T.softmax(scores)


def modulate(v, alpha=None, beta=None, cfg=ModulationConfig()):
    """Reweight a (W, H, C) map by location and/or channel weight vectors.

    With cfg.rescale each applied vector is divided by its uniform value
    (true division, so exactly-uniform weights modulate by exactly 1).
    """
    if v.data.ndim != 3:
        raise DimensionError(f"modulate: expected (W, H, C) map, got shape {v.shape}")
    w, h, c = v.shape
    out = v
    if alpha is not None:
        if alpha.shape != (w * h,):
            raise DimensionError(f"modulate: alpha length {alpha.shape} != m={w * h}")
        factor = T.div_scalar(alpha, 1.0 / (w * h)) if cfg.rescale else alpha
        out = T.hadamard(out, factor, axis="spatial")
    if beta is not None:
        if beta.shape != (c,):
            raise DimensionError(f"modulate: beta length {beta.shape} != C={c}")
        factor = T.div_scalar(beta, 1.0 / c) if cfg.rescale else beta
        out = T.hadamard(out, factor, axis="channel")
    return out


def _uniform_weights(n):
    return T.softmax(Tensor(np.zeros(n)))


def attend(v, h_prev, params, order, cfg=ModulationConfig(), layer=0):
    """One attentive pass over a map; returns (weights, modulated map).

    Composed orders feed the first branch's reweighted map to the second
    branch, then modulate the original map by both vectors. Single-branch
    orders modulate by their one vector and report an exactly-uniform
    placeholder for the other (the placeholder is never applied, so the
    output does not depend on the rescale flag through it).
    """
    if v.data.ndim != 3:
        raise DimensionError(f"attend: expected (W, H, C) map, got shape {v.shape}")
    w, h, c = v.shape
    m = w * h
    if order is AttentionOrder.CHANNEL_FIRST:
        beta = channel_attention(v, h_prev, params)
        alpha = spatial_attention(modulate(v, beta=beta, cfg=cfg), h_prev, params)
        x = modulate(v, alpha=alpha, beta=beta, cfg=cfg)
    elif order is AttentionOrder.SPATIAL_FIRST:
        alpha = spatial_attention(v, h_prev, params)
        beta = channel_attention(modulate(v, alpha=alpha, cfg=cfg), h_prev, params)
        x = modulate(v, alpha=alpha, beta=beta, cfg=cfg)
    elif order is AttentionOrder.SPATIAL_ONLY:
        alpha = spatial_attention(v, h_prev, params)
        beta = _uniform_weights(c)
        x = modulate(v, alpha=alpha, cfg=cfg)
    elif order is AttentionOrder.CHANNEL_ONLY:
        alpha = _uniform_weights(m)
        beta = channel_attention(v, h_prev, params)
        x = modulate(v, beta=beta, cfg=cfg)
    else:
        raise ConfigError(f"unknown attention order {order!r}")
    return AttentionWeights(alpha=alpha, beta=beta, layer=layer, width=w, height=h), x


def check_attentive_layers(attentive, depth):
    """Attentive layers must be a contiguous suffix of the stack 0..depth."""
    idx = sorted(attentive)
    for i in idx:
        if not 0 <= i <= depth:
            raise ConfigError(f"attentive layer {i} out of range 0..{depth}")
    if idx and idx != list(range(depth - len(idx) + 1, depth + 1)):
        raise ConfigError(
            f"attentive layers {idx} are not a contiguous suffix of 0..{depth}"
        )
    return idx


def multi_layer_pass(x, enc_config, enc_weights, h_prev, per_layer, attentive, cfg=ModulationConfig()):
    """Interleave encoding and attention: each attended layer's reweighted map
    feeds the next conv layer; non-attentive layers pass through unchanged.

    per_layer is a list of (AttentionParams, AttentionOrder) aligned with the
    sorted attentive layer indices (index 0 = the raw input map, useful in
    injection mode; conv layers are 1..depth). Returns the final map and each
    attended layer's weights.
    """
    idx = check_attentive_layers(attentive, enc_config.depth)
    if len(per_layer) != len(idx):
        raise ConfigError(f"{len(idx)} attentive layers but {len(per_layer)} param sets")
    by_layer = dict(zip(idx, per_layer))
    all_weights = []
    cur = x
    for layer in range(enc_config.depth + 1):
        if layer > 0:
            cur = E.conv_forward(cur, enc_config.layers[layer - 1], enc_weights[layer - 1])
        if layer in by_layer:
            params, order = by_layer[layer]
            weights, cur = attend(cur, h_prev, params, order, cfg, layer=layer)
            all_weights.append(weights)
    return cur, all_weights


def attention_memory_cost(w, h, c, k):
    """Parameter counts for scoring: one weight per (location, channel) cell
    jointly, versus separate per-location and per-channel factors."""
    for name, val in (("w", w), ("h", h), ("c", c), ("k", k)):
        if val <= 0:
            raise DomainError(f"attention_memory_cost: {name} must be positive, got {val}")
    return w * h * c * k, w * h * k, c * k
