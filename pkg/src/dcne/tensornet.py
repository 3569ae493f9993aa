"""Dense forward engine for small sequential convolutional classifiers.

Tensors are plain float64 numpy arrays. A network is an immutable
:class:`NetworkSpec`; :func:`forward` returns an :class:`ActivationTrace`
holding the input of every layer plus the final output (the logits).

The on-disk network format is a JSON document plus a sidecar blob of
little-endian float32 values; see ``docs/formats.md``.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence, Union

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

Shape = tuple[int, ...]

LAYER_KINDS = ("conv2d", "relu", "maxpool2d", "avgpool2d", "flatten", "dense")


class NetworkError(ValueError):
    """Raised for malformed network documents and shape mismatches."""

    def __init__(self, message: str, layer_index: int | None = None, detail: str = ""):
        if layer_index is not None:
            message = f"{message} at layer {layer_index}"
        if detail:
            message = f"{message} ({detail})"
        super().__init__(message)
        self.layer_index = layer_index


def _frozen(a: np.ndarray) -> np.ndarray:
    a = np.ascontiguousarray(a, dtype=np.float64)
    a.setflags(write=False)
    return a


def _pad_hw(x: np.ndarray, p: int) -> np.ndarray:
    if p == 0:
        return x
    pad = [(0, 0)] * (x.ndim - 2) + [(p, p), (p, p)]
    return np.pad(x, pad)


def im2col(x: np.ndarray, kh: int, kw: int, stride: int, padding: int) -> np.ndarray:
    """(C, H, W) -> (C*kh*kw, Ho*Wo) patch matrix, rows ordered (c, i, j)."""
    xp = _pad_hw(x, padding)
    win = sliding_window_view(xp, (kh, kw), axis=(1, 2))[:, ::stride, ::stride]
    c, ho, wo = win.shape[:3]
    return win.transpose(0, 3, 4, 1, 2).reshape(c * kh * kw, ho * wo)


def col2im(cols: np.ndarray, in_shape: Shape, kh: int, kw: int, stride: int,
           padding: int, out_hw: tuple[int, int]) -> np.ndarray:
    """Adjoint of :func:`im2col` with a leading batch axis.

    ``cols`` has shape (B, C*kh*kw, Ho*Wo); returns (B, C, H, W).
    """
    b = cols.shape[0]
    c, h, w = in_shape
    ho, wo = out_hw
    g = cols.reshape(b, c, kh, kw, ho, wo)
    out = np.zeros((b, c, h + 2 * padding, w + 2 * padding))
    # fixed (i, j) accumulation order keeps results reproducible
    for i in range(kh):
        for j in range(kw):
            out[:, :, i:i + stride * ho:stride, j:j + stride * wo:stride] += g[:, :, i, j]
    if padding:
        out = out[:, :, padding:padding + h, padding:padding + w]
    return out


@dataclass(frozen=True)
class Conv2d:
    weight: np.ndarray  # (out_ch, in_ch, kh, kw)
    bias: np.ndarray  # (out_ch,)
    stride: int = 1
    padding: int = 0
    kind: str = field(default="conv2d", init=False)

    def __post_init__(self):
        object.__setattr__(self, "weight", _frozen(self.weight))
        object.__setattr__(self, "bias", _frozen(self.bias))
        if self.weight.ndim != 4 or self.bias.shape != (self.weight.shape[0],):
            raise NetworkError("conv2d weight must be (out, in, kh, kw) with matching bias")
        if self.stride < 1 or self.padding < 0:
            raise NetworkError("conv2d needs stride >= 1 and padding >= 0")

    @property
    def out_channels(self) -> int:
        return self.weight.shape[0]

    @property
    def kernel(self) -> tuple[int, int]:
        return self.weight.shape[2], self.weight.shape[3]

    def out_shape(self, in_shape: Shape) -> Shape:
        if len(in_shape) != 3 or in_shape[0] != self.weight.shape[1]:
            raise NetworkError(f"conv2d expects ({self.weight.shape[1]}, h, w), got {in_shape}")
        kh, kw = self.kernel
        h = (in_shape[1] + 2 * self.padding - kh) // self.stride + 1
        w = (in_shape[2] + 2 * self.padding - kw) // self.stride + 1
        if h < 1 or w < 1:
            raise NetworkError(f"conv2d kernel larger than padded input {in_shape}")
        return (self.out_channels, h, w)

    def __call__(self, x: np.ndarray) -> np.ndarray:
        kh, kw = self.kernel
        _, ho, wo = self.out_shape(x.shape)
        cols = im2col(x, kh, kw, self.stride, self.padding)
        out = self.weight.reshape(self.out_channels, -1) @ cols
        return (out + self.bias[:, None]).reshape(self.out_channels, ho, wo)


@dataclass(frozen=True)
class Dense:
    weight: np.ndarray  # (out_features, in_features)
    bias: np.ndarray
    kind: str = field(default="dense", init=False)

    def __post_init__(self):
        object.__setattr__(self, "weight", _frozen(self.weight))
        object.__setattr__(self, "bias", _frozen(self.bias))
        if self.weight.ndim != 2 or self.bias.shape != (self.weight.shape[0],):
            raise NetworkError("dense weight must be (out, in) with matching bias")

    @property
    def out_channels(self) -> int:
        return self.weight.shape[0]

    def out_shape(self, in_shape: Shape) -> Shape:
        if in_shape != (self.weight.shape[1],):
            raise NetworkError(f"dense expects ({self.weight.shape[1]},), got {in_shape}")
        return (self.out_channels,)

    def __call__(self, x: np.ndarray) -> np.ndarray:
        self.out_shape(x.shape)
        return self.weight @ x + self.bias


@dataclass(frozen=True)
class ReLU:
    kind: str = field(default="relu", init=False)

    def out_shape(self, in_shape: Shape) -> Shape:
        return in_shape

    def __call__(self, x: np.ndarray) -> np.ndarray:
        return np.maximum(x, 0.0)


@dataclass(frozen=True)
class _Pool2d:
    size: int
    stride: int | None = None

    def __post_init__(self):
        if self.stride is None:
            object.__setattr__(self, "stride", self.size)
        if self.size < 1 or self.stride < 1:
            raise NetworkError(f"{self.kind} needs size >= 1 and stride >= 1")

    def out_shape(self, in_shape: Shape) -> Shape:
        if len(in_shape) != 3:
            raise NetworkError(f"{self.kind} expects (c, h, w), got {in_shape}")
        c, h, w = in_shape
        ho = (h - self.size) // self.stride + 1
        wo = (w - self.size) // self.stride + 1
        if ho < 1 or wo < 1:
            raise NetworkError(f"{self.kind} window larger than input {in_shape}")
        return (c, ho, wo)

    def windows(self, x: np.ndarray) -> np.ndarray:
        """(C, Ho, Wo, size*size) view of the pooling windows, row-major inside."""
        _, ho, wo = self.out_shape(x.shape)
        win = sliding_window_view(x, (self.size, self.size), axis=(1, 2))
        win = win[:, ::self.stride, ::self.stride][:, :ho, :wo]
        return win.reshape(win.shape[0], ho, wo, self.size * self.size)


@dataclass(frozen=True)
class MaxPool2d(_Pool2d):
    kind: str = field(default="maxpool2d", init=False)

    def winners(self, x: np.ndarray) -> np.ndarray:
        # argmax returns the first maximal element, i.e. row-major tie-breaking
        return self.windows(x).argmax(axis=-1)

    def __call__(self, x: np.ndarray) -> np.ndarray:
        return self.windows(x).max(axis=-1)


@dataclass(frozen=True)
class AvgPool2d(_Pool2d):
    kind: str = field(default="avgpool2d", init=False)

    def __call__(self, x: np.ndarray) -> np.ndarray:
        return self.windows(x).mean(axis=-1)


@dataclass(frozen=True)
class Flatten:
    kind: str = field(default="flatten", init=False)

    def out_shape(self, in_shape: Shape) -> Shape:
        return (int(np.prod(in_shape)),)

    def __call__(self, x: np.ndarray) -> np.ndarray:
        return x.reshape(-1)


Layer = Union[Conv2d, Dense, ReLU, MaxPool2d, AvgPool2d, Flatten]


@dataclass(frozen=True)
class NetworkSpec:
    layers: tuple
    input_shape: Shape
    shapes: tuple = field(init=False, repr=False)

    def __post_init__(self):
        object.__setattr__(self, "layers", tuple(self.layers))
        object.__setattr__(self, "input_shape", tuple(int(s) for s in self.input_shape))
        if len(self.input_shape) != 3:
            raise NetworkError("input_shape must be [channels, height, width]")
        shapes = [self.input_shape]
        for k, layer in enumerate(self.layers):
            try:
                shapes.append(layer.out_shape(shapes[-1]))
            except NetworkError as exc:
                raise NetworkError("shape mismatch", k, str(exc)) from None
        if not self.layers or len(shapes[-1]) != 1:
            raise NetworkError("network must end in a 1-d class score vector")
        object.__setattr__(self, "shapes", tuple(shapes))

    @property
    def num_classes(self) -> int:
        return self.shapes[-1][0]

    def parametric_layers(self) -> list[int]:
        return [k for k, l in enumerate(self.layers) if l.kind in ("conv2d", "dense")]

    def conditions(self) -> list[tuple[int, int]]:
        """All (layer_index, channel_index) pairs a conditional map can target."""
        return [(k, i) for k in self.parametric_layers()
                for i in range(self.layers[k].out_channels)]


@dataclass(frozen=True)
class ActivationTrace:
    per_layer: tuple  # input of layer 0 .. output of the last layer
    logits: np.ndarray

    @property
    def predicted_class(self) -> int:
        return int(np.argmax(self.logits))


def forward(net: NetworkSpec, image: np.ndarray) -> ActivationTrace:
    x = np.asarray(image, dtype=np.float64)
    if x.shape != net.input_shape:
        raise NetworkError(f"shape mismatch: image {x.shape} vs network input {net.input_shape}")
    if not np.all(np.isfinite(x)):
        raise ValueError("image contains non-finite values")
    acts = [_frozen(x)]
    for layer in net.layers:
        acts.append(_frozen(layer(acts[-1])))
    return ActivationTrace(per_layer=tuple(acts), logits=acts[-1])


# ---------------------------------------------------------------- file format

def _take(blob: np.ndarray, offset, count: int, what: str, k: int) -> np.ndarray:
    if not isinstance(offset, int) or offset < 0 or offset + count > blob.size:
        raise NetworkError(f"{what} offset {offset!r} (+{count}) outside weight blob "
                           f"of {blob.size} floats", k)
    return blob[offset:offset + count].astype(np.float64)


def _parse_layer(spec: dict, blob: np.ndarray, k: int) -> Layer:
    if not isinstance(spec, dict) or "kind" not in spec:
        raise NetworkError("layer entry must be an object with a 'kind'", k)
    kind = spec["kind"]
    try:
        if kind == "conv2d":
            o, i = int(spec["out_channels"]), int(spec["in_channels"])
            kh, kw = (int(v) for v in spec["kernel_size"])
            w = _take(blob, spec["weight_offset"], o * i * kh * kw, "weight", k)
            b = _take(blob, spec["bias_offset"], o, "bias", k)
            return Conv2d(w.reshape(o, i, kh, kw), b, int(spec.get("stride", 1)),
                          int(spec.get("padding", 0)))
        if kind == "dense":
            o, i = int(spec["out_features"]), int(spec["in_features"])
            w = _take(blob, spec["weight_offset"], o * i, "weight", k)
            b = _take(blob, spec["bias_offset"], o, "bias", k)
            return Dense(w.reshape(o, i), b)
        if kind == "relu":
            return ReLU()
        if kind == "flatten":
            return Flatten()
        if kind in ("maxpool2d", "avgpool2d"):
            cls = MaxPool2d if kind == "maxpool2d" else AvgPool2d
            return cls(int(spec["kernel_size"]), int(spec.get("stride", spec["kernel_size"])))
    except NetworkError as exc:
        if exc.layer_index is None:
            raise NetworkError(str(exc), k) from None
        raise
    except (KeyError, TypeError, ValueError) as exc:
        raise NetworkError(f"malformed {kind} layer ({exc!r})", k) from None
    raise NetworkError(f"unsupported layer kind {kind!r}", k)


def load_network(document: bytes | str, weights: bytes) -> NetworkSpec:
    """Parse a network document and its float32 weight blob."""
    try:
        doc = json.loads(document)
    except json.JSONDecodeError as exc:
        raise NetworkError(f"malformed network document: {exc}") from None
    if not isinstance(doc, dict) or "layers" not in doc or "input_shape" not in doc:
        raise NetworkError("network document needs 'input_shape' and 'layers'")
    if len(weights) % 4:
        raise NetworkError("weight blob length is not a multiple of 4 bytes")
    blob = np.frombuffer(weights, dtype="<f4")
    layers = [_parse_layer(spec, blob, k) for k, spec in enumerate(doc["layers"])]
    return NetworkSpec(layers, doc["input_shape"])


def read_network(path: str | Path) -> NetworkSpec:
    path = Path(path)
    document = path.read_bytes()
    try:
        weights_name = json.loads(document).get("weights", path.with_suffix(".bin").name)
    except (json.JSONDecodeError, AttributeError):
        raise NetworkError(f"malformed network document {path}") from None
    return load_network(document, (path.parent / weights_name).read_bytes())


def dump_network(net: NetworkSpec, weights_name: str = "net.bin") -> tuple[bytes, bytes]:
    """Inverse of :func:`load_network`: returns (document, weight blob)."""
    chunks: list[np.ndarray] = []
    offset = 0

    def put(a: np.ndarray) -> int:
        nonlocal offset
        start = offset
        chunks.append(np.asarray(a, dtype="<f4").ravel())
        offset += a.size
        return start

    layers = []
    for layer in net.layers:
        if isinstance(layer, Conv2d):
            o, i, kh, kw = layer.weight.shape
            layers.append({"kind": "conv2d", "in_channels": i, "out_channels": o,
                           "kernel_size": [kh, kw], "stride": layer.stride,
                           "padding": layer.padding, "weight_offset": put(layer.weight),
                           "bias_offset": put(layer.bias)})
        elif isinstance(layer, Dense):
            o, i = layer.weight.shape
            layers.append({"kind": "dense", "in_features": i, "out_features": o,
                           "weight_offset": put(layer.weight), "bias_offset": put(layer.bias)})
        elif isinstance(layer, _Pool2d):
            layers.append({"kind": layer.kind, "kernel_size": layer.size, "stride": layer.stride})
        else:
            layers.append({"kind": layer.kind})
    doc = {"input_shape": list(net.input_shape), "weights": weights_name, "layers": layers}
    blob = np.concatenate(chunks) if chunks else np.zeros(0, "<f4")
    return json.dumps(doc, indent=1).encode("utf-8"), blob.astype("<f4").tobytes()


def write_network(net: NetworkSpec, path: str | Path) -> None:
    path = Path(path)
    document, blob = dump_network(net, path.with_suffix(".bin").name)
    path.write_bytes(document)
    path.with_suffix(".bin").write_bytes(blob)


def from_layers(input_shape: Sequence[int], layers: Sequence[Layer]) -> NetworkSpec:
    return NetworkSpec(tuple(layers), tuple(input_shape))
