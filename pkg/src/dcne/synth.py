"""Synthetic planted-feature dataset and a hand-built detector network.

Every class owns a few coloured shapes ("features") planted on a noisy grey
background. The network is constructed, not trained:

* conv1 holds colour detectors, several variants per feature colour;
* conv2 turns each colour map into blob, centre and edge detectors;
* after average pooling, dense1 units pool one feature's conv2 channels over
  the whole grid, a half or a quadrant;
* the logit of a class adds up the dense1 units of its own features and
  subtracts those of other classes.

Within a feature's channel group, ``focus`` is the share of weight put on
the first three channels. A focused feature gets a few strongly relevant
neurons; an unfocused one spreads its relevance thinly, which reproduces
the heavy-tailed neuron relevance seen in trained networks.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import imageio
from .tensornet import AvgPool2d, Conv2d, Dense, Flatten, NetworkSpec, ReLU, write_network

SHAPES = ("rect", "disk", "hbar", "vbar")
_STRONG = 3


class SynthError(RuntimeError):
    pass


@dataclass(frozen=True)
class FeatureSpec:
    name: str
    shape: str = "rect"
    color: tuple = (1, 0, 0)
    size_range: tuple = (6, 9)
    count: int = 1
    weight: float = 1.0
    focus: float = 0.0

    def __post_init__(self):
        object.__setattr__(self, "color", tuple(int(c) for c in self.color))
        object.__setattr__(self, "size_range", tuple(int(s) for s in self.size_range))
        if self.shape not in SHAPES:
            raise ValueError(f"unknown feature shape {self.shape!r}")
        if len(self.color) != 3 or set(self.color) - {0, 1} or not any(self.color) or all(self.color):
            raise ValueError("feature colour must be a 0/1 RGB triple, neither black nor white")
        lo, hi = self.size_range
        if not 2 <= lo <= hi:
            raise ValueError("size_range must satisfy 2 <= min <= max")
        if self.count < 1 or self.weight <= 0 or not 0 <= self.focus < 1:
            raise ValueError("count >= 1, weight > 0 and focus in [0, 1) required")


@dataclass(frozen=True)
class ClassSpec:
    class_id: str
    features: tuple

    def __post_init__(self):
        object.__setattr__(self, "features", tuple(
            f if isinstance(f, FeatureSpec) else FeatureSpec(**f) for f in self.features))


@dataclass(frozen=True)
class SyntheticSpec:
    classes: tuple
    image_size: int = 24
    images_per_class: int = 20
    seed: int = 0
    visibility: float = 0.9
    background: float = 0.25
    noise: float = 0.05
    conv1_per_feature: int = 6
    conv2_per_feature: int = 32
    dense_per_feature: int = 38
    pool: int = 6
    max_attempts: int = 200

    def __post_init__(self):
        object.__setattr__(self, "classes", tuple(
            c if isinstance(c, ClassSpec) else ClassSpec(**c) for c in self.classes))
        colours = [f.color for c in self.classes for f in c.features]
        if len(set(colours)) != len(colours):
            raise ValueError("every planted feature needs its own colour")
        if self.image_size % self.pool:
            raise ValueError("image_size must be a multiple of pool")
        if not 0 < self.visibility <= 1:
            raise ValueError("visibility must lie in (0, 1]")

    @property
    def features(self) -> list:
        return [f for c in self.classes for f in c.features]

    def to_json(self) -> dict:
        return asdict(self)

    @classmethod
    def from_json(cls, doc: dict) -> "SyntheticSpec":
        return cls(**doc)


def default_spec(seed: int = 0, images_per_class: int = 20) -> SyntheticSpec:
    """Two classes with a dominant patch and a secondary bar each."""
    return SyntheticSpec(classes=(
        ClassSpec("red_green", (
            FeatureSpec("red patch", "rect", (1, 0, 0), (6, 9), weight=3.0, focus=0.6),
            FeatureSpec("green bar", "hbar", (0, 1, 0), (7, 11), weight=1.0),
        )),
        ClassSpec("blue_yellow", (
            FeatureSpec("blue disk", "disk", (0, 0, 1), (7, 10), weight=3.0, focus=0.6),
            FeatureSpec("yellow bar", "vbar", (1, 1, 0), (7, 11), weight=1.0),
        )),
    ), images_per_class=images_per_class, seed=seed)


# ------------------------------------------------------------------ images

def _shape_mask(shape: str, size: int, rng: np.random.Generator) -> np.ndarray:
    if shape == "rect":
        h = int(rng.integers(max(2, size - 2), size + 1))
        return np.ones((h, size), dtype=bool)
    if shape == "disk":
        r = (size - 1) / 2
        yy, xx = np.mgrid[:size, :size]
        return (yy - r) ** 2 + (xx - r) ** 2 <= r * r + 0.5
    thick = 2 if size < 9 else 3
    return np.ones((thick, size) if shape == "hbar" else (size, thick), dtype=bool)


def plant(cls: ClassSpec, spec: SyntheticSpec, rng: np.random.Generator):
    """One image: returns (rgb uint8, {feature index: bool mask}) for the
    visible features. Shapes keep a one-pixel gap from each other."""
    S = spec.image_size
    visible = [i for i in range(len(cls.features)) if rng.random() < spec.visibility]
    if not visible:
        visible = [int(rng.integers(len(cls.features)))]
    for _ in range(spec.max_attempts):
        occupied = np.zeros((S, S), dtype=bool)
        masks: dict[int, np.ndarray] = {}
        ok = True
        for i in visible:
            f = cls.features[i]
            m = np.zeros((S, S), dtype=bool)
            for _ in range(f.count):
                blob = _shape_mask(f.shape, int(rng.integers(f.size_range[0], f.size_range[1] + 1)), rng)
                bh, bw = blob.shape
                if bh > S - 2 or bw > S - 2:
                    raise SynthError(f"feature {f.name!r} does not fit a {S}x{S} image")
                y = int(rng.integers(1, S - bh))
                x = int(rng.integers(1, S - bw))
                grown = np.zeros((S, S), dtype=bool)
                grown[y - 1:y + bh + 1, x - 1:x + bw + 1] = True
                if (grown & occupied).any():
                    ok = False
                    break
                m[y:y + bh, x:x + bw] |= blob
                occupied[y:y + bh, x:x + bw] |= blob
            if not ok:
                break
            masks[i] = m
        if ok:
            break
    else:
        raise SynthError(f"could not place non-overlapping features {visible} of class "
                         f"{cls.class_id!r} after {spec.max_attempts} attempts")
    img = spec.background + rng.uniform(-spec.noise, spec.noise, (S, S, 3))
    for i, m in masks.items():
        colour = np.asarray(cls.features[i].color, dtype=np.float64)
        tint = np.where(colour > 0, 1.0 - rng.uniform(0, 0.1, (S, S, 3)), rng.uniform(0, 0.1, (S, S, 3)))
        img[m] = tint[m]
    return np.floor(np.clip(img, 0, 1) * 255 + 0.5).astype(np.uint8), masks


# ----------------------------------------------------------------- network

def _f32(a: np.ndarray) -> np.ndarray:
    # weights are stored as float32; keep in-memory and on-disk nets identical
    return np.asarray(a, dtype=np.float32).astype(np.float64)


def _strengths(n: int, focus: float) -> np.ndarray:
    """Relative weight of each channel in a group, summing to 1."""
    if focus <= 0 or n <= _STRONG:
        return np.full(n, 1.0 / n)
    s = np.full(n, (1.0 - focus) / (n - _STRONG))
    s[:_STRONG] = focus / _STRONG
    return s


_K_CENTER = np.array([[0, 0, 0], [0, 1, 0], [0, 0, 0]], dtype=np.float64)
_K_CROSS = np.array([[0, .25, 0], [.25, 1, .25], [0, .25, 0]])
_K_BLOB = np.full((3, 3), 1 / 9)
_K_EDGES = [np.array(k, dtype=np.float64) for k in (
    [[1, 1, 1], [0, 0, 0], [-1, -1, -1]],
    [[-1, -1, -1], [0, 0, 0], [1, 1, 1]],
    [[1, 0, -1], [1, 0, -1], [1, 0, -1]],
    [[-1, 0, 1], [-1, 0, 1], [-1, 0, 1]],
)]


def build_network(spec: SyntheticSpec) -> NetworkSpec:
    feats = spec.features
    F = len(feats)
    S, P = spec.image_size, spec.pool
    n1, n2, nd = spec.conv1_per_feature, spec.conv2_per_feature, spec.dense_per_feature
    rng = np.random.default_rng(12345)

    # conv1: colour detectors, zero output on the grey background
    w1 = np.zeros((F * n1, 3, 3, 3))
    b1 = np.zeros(F * n1)
    for fi, f in enumerate(feats):
        on = np.asarray(f.color, dtype=np.float64)
        pattern = np.where(on > 0, 1.0, -2.0)
        for v in range(n1):
            kern = (_K_CENTER if v % 2 == 0 else _K_CROSS) * (0.75 + 0.125 * (v // 2))
            ch = fi * n1 + v
            w1[ch] = pattern[:, None, None] * kern[None]
            b1[ch] = -kern.sum() * (on.sum() - 0.5)

    # conv2: blob / centre / edge detectors over one feature's colour maps
    w2 = np.zeros((F * n2, F * n1, 3, 3))
    for fi in range(F):
        src = slice(fi * n1, (fi + 1) * n1)
        for j in range(n2):
            if j < _STRONG or j % 3 == 0:
                kern = _K_BLOB
            elif j % 3 == 1:
                kern = _K_CENTER
            else:
                kern = _K_EDGES[j % 4] / 3.0
            mix = rng.uniform(0.5, 1.5, n1)
            w2[fi * n2 + j, src] = mix[:, None, None] * kern[None] / mix.sum()
    b2 = np.zeros(F * n2)

    # dense1: pooled grid is (F*n2, g, g); units read one feature group
    g = S // P
    regions = [np.ones((g, g), bool)]
    half = g // 2
    for sl in ((slice(None, half), slice(None)), (slice(half, None), slice(None)),
               (slice(None), slice(None, half)), (slice(None), slice(half, None))):
        r = np.zeros((g, g), bool)
        r[sl] = True
        regions.append(r)
    for qy in (slice(None, half), slice(half, None)):
        for qx in (slice(None, half), slice(half, None)):
            r = np.zeros((g, g), bool)
            r[qy, qx] = True
            regions.append(r)
    wd = np.zeros((F * nd, F * n2, g, g))
    for fi, f in enumerate(feats):
        s2 = _strengths(n2, f.focus)
        for u in range(nd):
            region = regions[0] if u < _STRONG else regions[u % len(regions)]
            jitter = rng.uniform(0.8, 1.2, n2)
            wd[fi * nd + u, fi * n2:(fi + 1) * n2] = (s2 * jitter)[:, None, None] * region[None]
    wd = wd.reshape(F * nd, -1) * (n2 / 4.0)
    bd = np.zeros(F * nd)

    # logits: own-class units add, other classes' units subtract
    n_cls = len(spec.classes)
    wl = np.zeros((n_cls, F * nd))
    fi = 0
    for ci, c in enumerate(spec.classes):
        for f in c.features:
            sd = _strengths(nd, f.focus)
            wl[ci, fi * nd:(fi + 1) * nd] = f.weight * sd
            for cj in range(n_cls):
                if cj != ci:
                    wl[cj, fi * nd:(fi + 1) * nd] = -f.weight * sd
            fi += 1
    bl = np.zeros(n_cls)

    layers = [
        Conv2d(_f32(w1), _f32(b1), 1, 1), ReLU(),
        Conv2d(_f32(w2), _f32(b2), 1, 1), ReLU(),
        AvgPool2d(P), Flatten(),
        Dense(_f32(wd), _f32(bd)), ReLU(),
        Dense(_f32(wl), _f32(bl)),
    ]
    return NetworkSpec(tuple(layers), (3, S, S))


# ----------------------------------------------------------------- dataset

@dataclass
class SyntheticImage:
    class_index: int
    image_id: str
    rgb: np.ndarray
    masks: dict = field(default_factory=dict)


def generate(spec: SyntheticSpec) -> list[SyntheticImage]:
    rng = np.random.default_rng(spec.seed)
    out = []
    for ci, cls in enumerate(spec.classes):
        for k in range(spec.images_per_class):
            rgb, masks = plant(cls, spec, rng)
            out.append(SyntheticImage(ci, f"{cls.class_id}_{k:03d}", rgb, masks))
    return out


def write_dataset(spec: SyntheticSpec, out_dir: str | Path) -> Path:
    """Write images, masks, network and manifest; returns the manifest path."""
    out = Path(out_dir)
    (out / "images").mkdir(parents=True, exist_ok=True)
    (out / "masks").mkdir(exist_ok=True)
    write_network(build_network(spec), out / "net.json")
    classes = []
    by_class: dict[int, list] = {}
    for img in generate(spec):
        by_class.setdefault(img.class_index, []).append(img)
    for ci, cls in enumerate(spec.classes):
        entries = []
        for img in by_class.get(ci, []):
            ipath = f"images/{img.image_id}.ppm"
            imageio.write_pnm(out / ipath, img.rgb)
            masks = {}
            for fi, m in sorted(img.masks.items()):
                mpath = f"masks/{img.image_id}_f{fi}.pgm"
                imageio.write_pnm(out / mpath, np.where(m, 255, 0).astype(np.uint8))
                masks[str(fi)] = mpath
            entries.append({"image_id": img.image_id, "image": ipath, "masks": masks})
        classes.append({"class_id": cls.class_id, "label": ci,
                        "features": [f.name for f in cls.features], "images": entries})
    manifest = {"network": "net.json", "classes": classes}
    (out / "manifest.json").write_text(json.dumps(manifest, indent=1))
    (out / "synth_spec.json").write_text(json.dumps(spec.to_json(), indent=1))
    return out / "manifest.json"
