"""Class-level grouping of concise maps.

Each concise map is described by its cosine similarity to every base map
of the same image. Because base maps are tied to network channels and the
class-mean selection gives every image the same channel list, these rows
live in a shared space and can be clustered across images with DBSCAN.
"""

from __future__ import annotations

from collections import deque
from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np

from .evalbench import iou, normalize_to_uint8
from .factorize import ConciseSet
from .relprop import ExplanationSet

NOISE = -1
DEFAULT_EPSILON = 1.4
DEFAULT_MIN_POINTS = 5


@dataclass(frozen=True)
class SimilarityBlock:
    image_id: str
    matrix: np.ndarray  # (|E_s|, |E|)
    conditions: tuple = ()


@dataclass(frozen=True)
class SimilarityTensor:
    blocks: tuple
    flattened: np.ndarray  # (images * |E_s|, |E|)
    rows: tuple  # row -> (image_id, concise map index)

    def row_of(self, image_id: str, map_index: int) -> int:
        for pos, b in enumerate(self.blocks):
            if b.image_id == image_id:
                if not 0 <= map_index < b.matrix.shape[0]:
                    break
                return pos * b.matrix.shape[0] + map_index
        raise KeyError((image_id, map_index))


@dataclass
class Cluster:
    cluster_id: int
    members: list  # [(image_id, map_index)], nearest to the centroid first
    feature_scores: dict = field(default_factory=dict)  # feature -> score or None


@dataclass
class ClusterReport:
    labels: np.ndarray
    clusters: list
    epsilon: float
    min_points: int
    rows: tuple = ()

    def to_json(self, feature_names: Mapping[int, str] | None = None) -> dict:
        names = feature_names or {}
        return {
            "parameters": {"epsilon": self.epsilon, "min_points": self.min_points},
            "rows": [{"image_id": i, "map_index": j, "label": int(l)}
                     for (i, j), l in zip(self.rows, self.labels)],
            "clusters": [{
                "cluster_id": c.cluster_id,
                "members": [{"image_id": i, "map_index": j} for i, j in c.members],
                "feature_scores": {names.get(f, str(f)): s for f, s in c.feature_scores.items()},
            } for c in self.clusters],
            "noise_count": int(np.count_nonzero(self.labels == NOISE)),
        }


def _unit_rows(X: np.ndarray) -> np.ndarray:
    norms = np.linalg.norm(X, axis=1, keepdims=True)
    return np.divide(X, norms, out=np.zeros_like(X), where=norms > 0)


def cosine_matrix(A: np.ndarray, B: np.ndarray) -> np.ndarray:
    """Row-wise cosine similarity; a zero row has similarity 0 with everything."""
    A = A.reshape(A.shape[0], -1).astype(np.float64)
    B = B.reshape(B.shape[0], -1).astype(np.float64)
    return np.clip(_unit_rows(A) @ _unit_rows(B).T, -1.0, 1.0)


def similarity_block(cs: ConciseSet, ex: ExplanationSet) -> SimilarityBlock:
    base = ex.stack()
    if cs.maps.shape[1:] != base.shape[1:]:
        raise ValueError(f"concise grid {cs.maps.shape[1:]} does not match base grid {base.shape[1:]}")
    if cs.image_id and ex.image_id and cs.image_id != ex.image_id:
        raise ValueError(f"concise set {cs.image_id!r} and explanation set {ex.image_id!r} differ")
    return SimilarityBlock(ex.image_id or cs.image_id, cosine_matrix(cs.maps, base),
                           tuple(ex.conditions))


def build_tensor(blocks: Sequence[SimilarityBlock]) -> SimilarityTensor:
    if not blocks:
        raise ValueError("no similarity blocks")
    shapes = {b.matrix.shape for b in blocks}
    if len({s[1] for s in shapes}) != 1:
        raise ValueError(f"inconsistent column dimensions: {sorted(shapes)}")
    if len(shapes) != 1:
        raise ValueError(f"inconsistent concise-set sizes: {sorted(shapes)}")
    conds = {b.conditions for b in blocks if b.conditions}
    if len(conds) > 1:
        raise ValueError("blocks disagree on condition ordering; use class-mean selection")
    rows = tuple((b.image_id, i) for b in blocks for i in range(b.matrix.shape[0]))
    return SimilarityTensor(tuple(blocks), np.concatenate([b.matrix for b in blocks]), rows)


def region_queries(points: np.ndarray, epsilon: float) -> list[np.ndarray]:
    """Indices within ``epsilon`` (inclusive) of each point, self included."""
    X = np.asarray(points, dtype=np.float64)
    n, m = X.shape
    eps2 = epsilon * epsilon
    out = []
    chunk = max(1, int(4_000_000 // max(1, n * m)))
    for lo in range(0, n, chunk):
        diff = X[lo:lo + chunk, None, :] - X[None, :, :]
        d2 = np.einsum("ijk,ijk->ij", diff, diff)
        out.extend(np.flatnonzero(row <= eps2) for row in d2)
    return out


def dbscan(points: np.ndarray, epsilon: float = DEFAULT_EPSILON,
           min_points: int = DEFAULT_MIN_POINTS) -> np.ndarray:
    """Density clustering with Euclidean distance.

    Clusters are numbered in scan order. A border point reachable from
    several clusters keeps the first one that reaches it.
    """
    X = np.asarray(points, dtype=np.float64)
    if X.ndim != 2 or X.shape[0] < 1:
        raise ValueError("dbscan needs an (n, m) array with n >= 1")
    if not epsilon > 0 or min_points < 1:
        raise ValueError("dbscan needs epsilon > 0 and min_points >= 1")
    neighbors = region_queries(X, epsilon)
    core = np.array([len(nb) >= min_points for nb in neighbors])
    labels = np.full(X.shape[0], NOISE, dtype=int)
    next_id = 0
    for p in range(X.shape[0]):
        if labels[p] != NOISE or not core[p]:
            continue
        labels[p] = next_id
        queue = deque([p])
        while queue:
            q = queue.popleft()
            if not core[q]:
                continue
            for r in neighbors[q]:
                if labels[r] == NOISE:
                    labels[r] = next_id
                    queue.append(r)
        next_id += 1
    return labels


def cluster_rows(tensor: SimilarityTensor, epsilon: float = DEFAULT_EPSILON,
                 min_points: int = DEFAULT_MIN_POINTS) -> ClusterReport:
    labels = dbscan(tensor.flattened, epsilon, min_points)
    clusters = []
    for cid in range(labels.max() + 1 if labels.size else 0):
        idx = np.flatnonzero(labels == cid)
        centroid = tensor.flattened[idx].mean(axis=0)
        dist = np.linalg.norm(tensor.flattened[idx] - centroid, axis=1)
        order = idx[np.lexsort((idx, dist))]
        clusters.append(Cluster(cid, [tensor.rows[i] for i in order]))
    return ClusterReport(labels, clusters, epsilon, min_points, tensor.rows)


def cluster_feature_score(report: ClusterReport, concise_sets: Mapping[str, ConciseSet],
                          masks: Mapping[str, Mapping[int, np.ndarray]], threshold: int,
                          features: Sequence[int] | None = None) -> dict:
    """Mean IoU of each cluster's member maps against each feature mask.

    Members whose image lacks the mask are skipped; a cluster with no
    scoreable member for a feature gets ``None``.
    """
    if features is None:
        features = sorted({f for per in masks.values() for f in per})
    scores = {}
    for c in report.clusters:
        per = {}
        for f in features:
            vals = []
            for image_id, j in c.members:
                mask = masks.get(image_id, {}).get(f)
                if mask is None:
                    continue
                binary = normalize_to_uint8(concise_sets[image_id].maps[j]) > threshold
                vals.append(iou(binary, np.asarray(mask) > 0))
            per[f] = float(np.mean(vals)) if vals else None
        c.feature_scores = per
        scores[c.cluster_id] = per
    return scores
