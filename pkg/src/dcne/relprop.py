"""Relevance propagation with conditional masking.

Rules: z+ (alpha=1, beta=0) for conv2d and dense, winner-take-all for
maxpool, proportional split for avgpool, identity for relu and flatten.
Positive bias takes part in the z+ denominator, so its share of relevance
is absorbed rather than passed down.

The backward pass is linear in the relevance for a fixed trace, which lets
every channel of a layer be propagated as one batch.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Iterable, Mapping, Sequence

import numpy as np

from .tensornet import (ActivationTrace, AvgPool2d, Conv2d, Dense, MaxPool2d,
                        NetworkSpec, col2im, im2col)

STABILIZER = 1e-9
PER_IMAGE_SUM = "per_image_sum"
CLASS_MEAN = "class_mean_relevance"


@dataclass(frozen=True, order=True)
class Condition:
    layer_index: int
    channel_index: int

    def tag(self) -> str:
        return f"L{self.layer_index:02d}_C{self.channel_index:04d}"


@dataclass(frozen=True)
class AttributionMap:
    condition: Condition
    values: np.ndarray  # (h, w)


@dataclass(frozen=True)
class ExplanationSet:
    image_id: str
    maps: tuple

    def __len__(self):
        return len(self.maps)

    @property
    def conditions(self) -> list[Condition]:
        return [m.condition for m in self.maps]

    def stack(self) -> np.ndarray:
        return np.stack([m.values for m in self.maps])


@dataclass(frozen=True)
class SelectionConfig:
    mode: str = CLASS_MEAN
    n: int = 300

    def __post_init__(self):
        if self.mode not in (PER_IMAGE_SUM, CLASS_MEAN):
            raise ValueError(f"unknown selection mode {self.mode!r}")
        if self.n < 1:
            raise ValueError("base size n must be >= 1")


# ------------------------------------------------------------- layer rules

def _zplus_conv(layer: Conv2d, x: np.ndarray, R: np.ndarray) -> np.ndarray:
    kh, kw = layer.kernel
    st, pad = layer.stride, layer.padding
    out_ch = layer.out_channels
    _, ho, wo = layer.out_shape(x.shape)
    Wm = layer.weight.reshape(out_ch, -1)
    Wp = np.maximum(Wm, 0.0)
    xp = np.maximum(x, 0.0)
    has_neg = bool((x < 0).any())
    z = Wp @ im2col(xp, kh, kw, st, pad) + np.maximum(layer.bias, 0.0)[:, None]
    if has_neg:
        Wn = np.minimum(Wm, 0.0)
        xn = np.minimum(x, 0.0)
        z += Wn @ im2col(xn, kh, kw, st, pad)
    s = R.reshape(R.shape[0], out_ch, ho * wo) / (z + STABILIZER)
    c = col2im(np.matmul(Wp.T, s), x.shape, kh, kw, st, pad, (ho, wo))
    out = xp * c
    if has_neg:
        out += xn * col2im(np.matmul(Wn.T, s), x.shape, kh, kw, st, pad, (ho, wo))
    return out


def _zplus_dense(layer: Dense, x: np.ndarray, R: np.ndarray) -> np.ndarray:
    Wp = np.maximum(layer.weight, 0.0)
    xp = np.maximum(x, 0.0)
    xn = np.minimum(x, 0.0)
    Wn = np.minimum(layer.weight, 0.0)
    z = Wp @ xp + Wn @ xn + np.maximum(layer.bias, 0.0)
    s = R / (z + STABILIZER)
    return xp * (s @ Wp) + xn * (s @ Wn)


def _pool_scatter(layer, x: np.ndarray, per_offset) -> np.ndarray:
    """Accumulate per-window-offset contributions back onto the input grid."""
    _, ho, wo = layer.out_shape(x.shape)
    k, st = layer.size, layer.stride
    out = None
    for o in range(k * k):
        di, dj = divmod(o, k)
        contrib = per_offset(o)
        if out is None:
            out = np.zeros(contrib.shape[:2] + x.shape[1:])
        out[:, :, di:di + st * ho:st, dj:dj + st * wo:st] += contrib
    return out


def _winner_take_all(layer: MaxPool2d, x: np.ndarray, R: np.ndarray) -> np.ndarray:
    win = layer.winners(x)
    return _pool_scatter(layer, x, lambda o: R * (win == o))


def _proportional(layer: AvgPool2d, x: np.ndarray, R: np.ndarray) -> np.ndarray:
    xp = np.maximum(x, 0.0)
    denom = layer.windows(xp).sum(axis=-1) + STABILIZER
    s = R / denom
    k = layer.size
    _, ho, wo = layer.out_shape(x.shape)
    st = layer.stride

    def part(o):
        di, dj = divmod(o, k)
        return s * xp[:, di:di + st * ho:st, dj:dj + st * wo:st]

    return _pool_scatter(layer, x, part)


def backward_layer(layer, x: np.ndarray, R: np.ndarray) -> np.ndarray:
    """Map relevance on a layer's output (leading batch axis) to its input."""
    if isinstance(layer, Conv2d):
        return _zplus_conv(layer, x, R)
    if isinstance(layer, Dense):
        return _zplus_dense(layer, x, R)
    if isinstance(layer, MaxPool2d):
        return _winner_take_all(layer, x, R)
    if isinstance(layer, AvgPool2d):
        return _proportional(layer, x, R)
    return R.reshape((R.shape[0],) + x.shape)


# ------------------------------------------------------------ propagation

def initial_relevance(trace: ActivationTrace, target_class: int) -> np.ndarray:
    n = trace.logits.shape[0]
    if not 0 <= target_class < n:
        raise ValueError(f"target class {target_class} outside [0, {n})")
    R = np.zeros(n)
    R[target_class] = trace.logits[target_class]
    return R


def propagate(net: NetworkSpec, trace: ActivationTrace, R: np.ndarray,
              start: int, stop: int = 0) -> np.ndarray:
    """Push batched relevance from the output of layer ``start - 1`` down to
    the input of layer ``stop``. ``R`` has shape (B, *shape)."""
    for k in range(start - 1, stop - 1, -1):
        R = backward_layer(net.layers[k], trace.per_layer[k], R)
    return R


def relevance_profile(net: NetworkSpec, trace: ActivationTrace, target_class: int) -> list[np.ndarray]:
    """Unconditional relevance at every layer boundary, input first."""
    R = initial_relevance(trace, target_class)[None]
    out = [R[0]]
    for k in range(len(net.layers) - 1, -1, -1):
        R = backward_layer(net.layers[k], trace.per_layer[k], R)
        out.append(R[0])
    return out[::-1]


def relevance_at_output(net: NetworkSpec, trace: ActivationTrace, target_class: int,
                        layer_index: int) -> np.ndarray:
    R = initial_relevance(trace, target_class)[None]
    return propagate(net, trace, R, len(net.layers), layer_index + 1)[0]


def unconditional_attribution(net: NetworkSpec, trace: ActivationTrace, target_class: int) -> np.ndarray:
    R = initial_relevance(trace, target_class)[None]
    return propagate(net, trace, R, len(net.layers))[0].sum(axis=0)


def _check_condition(net: NetworkSpec, cond: Condition) -> None:
    k = cond.layer_index
    if not 0 <= k < len(net.layers) or net.layers[k].kind not in ("conv2d", "dense"):
        raise ValueError(f"condition {cond} does not address a conv2d or dense layer")
    if not 0 <= cond.channel_index < net.layers[k].out_channels:
        raise ValueError(f"condition {cond}: channel out of range")


def layer_attributions(net: NetworkSpec, trace: ActivationTrace, target_class: int,
                       layer_index: int, channels: Sequence[int] | None = None,
                       chunk: int = 32) -> np.ndarray:
    """Conditional maps for several channels of one layer, shape (len, h, w)."""
    _check_condition(net, Condition(layer_index, 0))
    upper = relevance_at_output(net, trace, target_class, layer_index)
    if channels is None:
        channels = range(upper.shape[0])
    channels = list(channels)
    h, w = net.input_shape[1:]
    out = np.empty((len(channels), h, w))
    for lo in range(0, len(channels), chunk):
        sel = channels[lo:lo + chunk]
        R = np.zeros((len(sel),) + upper.shape)
        for b, ch in enumerate(sel):
            R[b, ch] = upper[ch]
        out[lo:lo + len(sel)] = propagate(net, trace, R, layer_index + 1).sum(axis=1)
    return out


def conditional_attribution(trace: ActivationTrace, net: NetworkSpec, target_class: int,
                            cond: Condition) -> AttributionMap:
    _check_condition(net, cond)
    values = layer_attributions(net, trace, target_class, cond.layer_index,
                                [cond.channel_index])[0]
    return AttributionMap(cond, values)


def all_attributions(net: NetworkSpec, trace: ActivationTrace, target_class: int,
                     conditions: Iterable[Condition] | None = None) -> tuple[list[Condition], np.ndarray]:
    """Conditional maps for the given conditions (default: every condition),
    returned in the requested order as a (N, h, w) array."""
    if conditions is None:
        conditions = [Condition(k, i) for k, i in net.conditions()]
    conditions = list(conditions)
    for c in conditions:
        _check_condition(net, c)
    h, w = net.input_shape[1:]
    out = np.empty((len(conditions), h, w))
    by_layer: dict[int, list[int]] = {}
    for pos, c in enumerate(conditions):
        by_layer.setdefault(c.layer_index, []).append(pos)
    for k, positions in sorted(by_layer.items()):
        chans = [conditions[p].channel_index for p in positions]
        out[positions] = layer_attributions(net, trace, target_class, k, chans)
    return conditions, out


# ---------------------------------------------------------------- selection

def rank_conditions(scores: Mapping[Condition, float], n: int) -> list[Condition]:
    """Top-n conditions by score, ties broken by (layer, channel) ascending."""
    if n > len(scores):
        raise ValueError(f"base size {n} exceeds the {len(scores)} available conditions")
    ordered = sorted(scores, key=lambda c: (-scores[c], c.layer_index, c.channel_index))
    return ordered[:n]


def class_relevance_table(traces: Sequence[ActivationTrace], net: NetworkSpec,
                          target_class: int) -> dict[Condition, float]:
    """Mean over images of each condition's summed conditional relevance."""
    if not traces:
        raise ValueError("class_relevance_table needs at least one trace")
    total = None
    conds = None
    for trace in traces:
        conds, maps = all_attributions(net, trace, target_class)
        sums = maps.sum(axis=(1, 2))
        total = sums if total is None else total + sums
    mean = total / len(traces)
    return {c: float(v) for c, v in zip(conds, mean)}


def explanation_set(trace: ActivationTrace, net: NetworkSpec, target_class: int,
                    sel: SelectionConfig, class_stats: Mapping[Condition, float] | None = None,
                    image_id: str = "") -> ExplanationSet:
    if sel.mode == CLASS_MEAN:
        if class_stats is None:
            raise ValueError("class_mean_relevance selection needs a class relevance table")
        chosen = rank_conditions(class_stats, sel.n)
        conds, maps = all_attributions(net, trace, target_class, chosen)
    else:
        conds, maps = all_attributions(net, trace, target_class)
        scores = dict(zip(conds, maps.sum(axis=(1, 2))))
        chosen = rank_conditions(scores, sel.n)
        index = {c: p for p, c in enumerate(conds)}
        maps = maps[[index[c] for c in chosen]]
        conds = chosen
    return ExplanationSet(image_id, tuple(AttributionMap(c, m) for c, m in zip(conds, maps)))


def select_from(conditions: Sequence[Condition], maps: np.ndarray, chosen: Sequence[Condition],
                image_id: str = "") -> ExplanationSet:
    """Build an explanation set from precomputed maps (used by the pipeline cache)."""
    index = {c: p for p, c in enumerate(conditions)}
    return ExplanationSet(image_id, tuple(AttributionMap(c, maps[index[c]]) for c in chosen))
