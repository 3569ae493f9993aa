"""Scoring explanations against binary feature masks.

Attribution maps are min-max normalised to uint8, binarised with a strict
``> t`` and compared to a mask by IoU. For one image and one feature the
score is the best IoU over the maps in the explanation; the threshold is
either maximised per image or fixed per (method, class) from a held-out
split, which is how benchmark numbers are produced.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Iterable, Mapping, Sequence

import numpy as np

DEFAULT_THRESHOLDS = (0, 25, 50, 100, 150, 200, 250)


@dataclass(frozen=True)
class FeatureMask:
    image_id: str
    feature: int
    grid: np.ndarray  # uint8, 0 or 255

    def __post_init__(self):
        grid = np.asarray(self.grid)
        if grid.ndim != 2:
            raise ValueError("feature mask must be a 2-d grid")
        if not np.isin(grid, (0, 255)).all():
            raise ValueError(f"feature mask {self.image_id}/{self.feature} is not binary 0/255")
        object.__setattr__(self, "grid", grid.astype(np.uint8))

    @property
    def binary(self) -> np.ndarray:
        return self.grid > 0


@dataclass(frozen=True)
class EvalConfig:
    thresholds: tuple = DEFAULT_THRESHOLDS
    holdout_fraction: float = 0.2
    seed: int = 0

    def __post_init__(self):
        t = tuple(int(v) for v in self.thresholds)
        if not t or any(b <= a for a, b in zip(t, t[1:])) or t[0] < 0 or t[-1] > 255:
            raise ValueError("thresholds must be a non-empty, strictly increasing list in [0, 255]")
        if not 0.0 < self.holdout_fraction < 1.0:
            raise ValueError("holdout_fraction must lie in (0, 1)")
        object.__setattr__(self, "thresholds", t)


def _values(m) -> np.ndarray:
    return np.asarray(getattr(m, "values", m), dtype=np.float64)


def normalize_to_uint8(values) -> np.ndarray:
    """Per-map min-max scaling to [0, 255], rounding half up; constant -> 0."""
    v = _values(values)
    lo, hi = v.min(), v.max()
    if not hi > lo:
        return np.zeros(v.shape, dtype=np.uint8)
    scaled = (v - lo) / (hi - lo) * 255.0
    return np.floor(scaled + 0.5).clip(0, 255).astype(np.uint8)


def binarize(values, t: int) -> np.ndarray:
    return normalize_to_uint8(values) > t


def iou(a: np.ndarray, b: np.ndarray) -> float:
    a = np.asarray(a, dtype=bool)
    b = np.asarray(b, dtype=bool)
    if a.shape != b.shape:
        raise ValueError(f"IoU shape mismatch: {a.shape} vs {b.shape}")
    union = np.count_nonzero(a | b)
    return np.count_nonzero(a & b) / union if union else 0.0


def as_stack(maps) -> np.ndarray:
    """Explanation set, concise set, list of maps or (N, h, w) array -> (N, h, w)."""
    if hasattr(maps, "maps"):
        maps = maps.maps
    if isinstance(maps, np.ndarray):
        stack = maps.astype(np.float64, copy=False)
        return stack[None] if stack.ndim == 2 else stack
    return np.stack([_values(m) for m in maps]) if len(maps) else np.zeros((0, 0, 0))


def normalized_stack(maps) -> np.ndarray:
    stack = as_stack(maps)
    return np.stack([normalize_to_uint8(m) for m in stack]) if len(stack) else \
        np.zeros((0,) + stack.shape[1:], dtype=np.uint8)


def _mask_bits(mask) -> np.ndarray:
    return mask.binary if isinstance(mask, FeatureMask) else np.asarray(mask) > 0


def iou_table(normalized: np.ndarray, mask, thresholds: Sequence[int]) -> np.ndarray:
    """IoU of every pre-normalised map against a mask, shape (len(thresholds), N)."""
    m = _mask_bits(mask)
    if normalized.shape[1:] != m.shape:
        raise ValueError(f"map grid {normalized.shape[1:]} does not match mask {m.shape}")
    out = np.zeros((len(thresholds), normalized.shape[0]))
    for r, t in enumerate(thresholds):
        b = normalized > t
        inter = np.count_nonzero(b & m, axis=(1, 2))
        union = np.count_nonzero(b | m, axis=(1, 2))
        out[r] = np.divide(inter, union, out=np.zeros(len(inter)), where=union > 0)
    return out


def q_f_at_threshold(ex, mask, t: int) -> float:
    """Best IoU over the maps of one explanation at a fixed threshold."""
    norm = normalized_stack(ex)
    if norm.shape[0] == 0:
        raise ValueError("empty explanation set")
    return float(iou_table(norm, mask, [t])[0].max())


def q_f_instance(ex, mask, cfg: EvalConfig) -> float:
    norm = normalized_stack(ex)
    if norm.shape[0] == 0:
        raise ValueError("empty explanation set")
    return float(iou_table(norm, mask, cfg.thresholds).max())


# ---------------------------------------------------------- class protocol

@dataclass
class ImageRecord:
    """One image's explanation (pre-normalised) and its visible feature masks."""
    image_id: str
    normalized: np.ndarray  # (N, h, w) uint8
    masks: dict = field(default_factory=dict)  # feature -> bool grid

    @classmethod
    def build(cls, image_id: str, maps, masks: Mapping[int, object]) -> "ImageRecord":
        return cls(image_id, normalized_stack(maps),
                   {int(f): _mask_bits(m) for f, m in masks.items()})

    def best(self, feature: int, thresholds: Sequence[int]) -> np.ndarray:
        """Per-threshold best IoU for one feature."""
        if self.normalized.shape[0] == 0:
            raise ValueError(f"empty explanation set for image {self.image_id}")
        return iou_table(self.normalized, self.masks[feature], thresholds).max(axis=1)


def holdout_split(image_ids: Sequence[str], cfg: EvalConfig) -> tuple[list[str], list[str]]:
    """Seeded split into (held-out, scored). At least one image on each side
    whenever there are two or more images."""
    ids = list(image_ids)
    if not ids:
        raise ValueError("no images to split")
    k = int(round(cfg.holdout_fraction * len(ids)))
    k = min(max(k, 1), max(len(ids) - 1, 1))
    rng = np.random.default_rng(cfg.seed)
    picked = set(rng.permutation(len(ids))[:k].tolist())
    held = [i for p, i in enumerate(ids) if p in picked]
    scored = [i for p, i in enumerate(ids) if p not in picked] or held
    return held, scored


def threshold_scores(records: Sequence[ImageRecord], thresholds: Sequence[int]) -> np.ndarray:
    """Mean IoU per threshold over every (image, visible feature) pair."""
    rows = [r.best(f, thresholds) for r in records for f in sorted(r.masks)]
    if not rows:
        raise ValueError("held-out subset has no visible feature masks")
    return np.mean(rows, axis=0)


def select_threshold(holdout: Sequence[ImageRecord], cfg: EvalConfig) -> int:
    if not holdout:
        raise ValueError("empty held-out subset")
    scores = threshold_scores(holdout, cfg.thresholds)
    # argmax returns the first maximum, i.e. the smaller threshold on ties
    return cfg.thresholds[int(np.argmax(scores))]


def q_f_class(records: Sequence[ImageRecord], feature: int, t: int) -> float:
    vals = [float(r.best(feature, [t])[0]) for r in records if feature in r.masks]
    if not vals:
        raise ValueError(f"no image carries a mask for feature {feature}")
    return float(np.mean(vals))


def complexity(explanations) -> int:
    """Total number of attribution maps across a collection of explanations."""
    if isinstance(explanations, Mapping):
        explanations = explanations.values()
    total = 0
    for e in explanations:
        if isinstance(e, Mapping) or (isinstance(e, (list, tuple)) and e and hasattr(e[0], "maps")):
            total += complexity(e)
        else:
            total += len(e)
    return total


@dataclass
class ClassResult:
    class_id: str
    threshold: int
    holdout: list
    scored: list
    features: dict  # feature -> Q_f or None when no scored image has the mask
    per_image: dict  # image_id -> {feature: IoU at the selected threshold}
    per_image_best: dict  # image_id -> {feature: max over thresholds}
    complexity_total: int
    complexity_per_image: float

    def mean(self) -> float | None:
        vals = [v for v in self.features.values() if v is not None]
        return float(np.mean(vals)) if vals else None


def evaluate_class(class_id: str, records: Sequence[ImageRecord], cfg: EvalConfig,
                   features: Iterable[int] | None = None) -> ClassResult:
    by_id = {r.image_id: r for r in records}
    held_ids, scored_ids = holdout_split([r.image_id for r in records], cfg)
    t = select_threshold([by_id[i] for i in held_ids], cfg)
    scored = [by_id[i] for i in scored_ids]
    if features is None:
        features = sorted({f for r in records for f in r.masks})
    q = {}
    for f in features:
        try:
            q[f] = q_f_class(scored, f, t)
        except ValueError:
            q[f] = None
    per_image = {r.image_id: {f: float(r.best(f, [t])[0]) for f in sorted(r.masks)} for r in scored}
    per_best = {r.image_id: {f: float(r.best(f, cfg.thresholds).max()) for f in sorted(r.masks)}
                for r in scored}
    total = sum(r.normalized.shape[0] for r in records)
    return ClassResult(class_id, t, held_ids, scored_ids, q, per_image, per_best,
                       total, total / len(records))


def aggregate(results: Sequence[ClassResult]) -> dict:
    """Class-weighted and image-weighted mean IoU over all features and classes."""
    class_means = [r.mean() for r in results if r.mean() is not None]
    pairs = [v for r in results for row in r.per_image.values() for v in row.values()]
    return {
        "mean_iou_class_weighted": float(np.mean(class_means)) if class_means else None,
        "mean_iou_image_weighted": float(np.mean(pairs)) if pairs else None,
    }
