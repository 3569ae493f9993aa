"""Non-negative matrix factorization of explanation sets into concise maps.

An explanation set of ``N`` maps of size ``h x w`` is flattened into an
``N x d`` matrix ``M`` and factorized as ``M ~ W H`` with ``W`` (N x z) and
``H`` (z x d) non-negative. Rows of ``H`` reshaped to ``h x w`` are the
concise maps.

Two solvers minimise the Frobenius objective ``||M - W H||^2``:

``"hals"`` (default)
    Hierarchical alternating least squares (column-wise coordinate descent)
    with several inner sweeps per block and a safeguarded extrapolation
    step. An extrapolated point is accepted only when it lowers the
    objective, so the objective trace stays non-increasing.
``"mu"``
    Lee & Seung multiplicative updates.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import NamedTuple, Sequence

import numpy as np

from .relprop import Condition, ExplanationSet

_EPS = 1e-16


@dataclass(frozen=True)
class FactorizationConfig:
    components: int = 10
    max_iterations: int = 200
    convergence_tolerance: float = 1e-4
    seed: int = 0
    solver: str = "hals"
    inner_sweeps: int = 10
    check_window: int = 10

    def __post_init__(self):
        if self.components < 1:
            raise ValueError("components must be >= 1")
        if self.max_iterations < 1:
            raise ValueError("max_iterations must be >= 1")
        if self.check_window < 1:
            raise ValueError("check_window must be >= 1")
        if self.solver not in ("hals", "mu"):
            raise ValueError(f"unknown solver {self.solver!r}")


@dataclass(frozen=True)
class FlattenedExplanation:
    matrix: np.ndarray  # (|E|, h*w), entries >= 0
    source_conditions: tuple
    shape: tuple  # (h, w)


@dataclass(frozen=True)
class ConciseSet:
    image_id: str
    maps: np.ndarray  # (z, h, w)
    mixing: np.ndarray  # (|E|, z)

    def __len__(self):
        return self.maps.shape[0]


class NMFResult(NamedTuple):
    W: np.ndarray
    H: np.ndarray
    objective_trace: list


def flatten(ex: ExplanationSet) -> FlattenedExplanation:
    """Stack maps row-wise in pixel row-major order, clamping negatives to 0."""
    if len(ex) == 0:
        raise ValueError("cannot flatten an empty explanation set")
    shapes = {m.values.shape for m in ex.maps}
    if len(shapes) != 1:
        raise ValueError(f"inconsistent map shapes in explanation set: {sorted(shapes)}")
    (shape,) = shapes
    matrix = np.stack([np.asarray(m.values, dtype=np.float64).reshape(-1) for m in ex.maps])
    return FlattenedExplanation(np.maximum(matrix, 0.0), tuple(ex.conditions), tuple(shape))


def objective(M: np.ndarray, W: np.ndarray, H: np.ndarray) -> float:
    R = M - W @ H
    return float(np.vdot(R, R))


def random_init(M: np.ndarray, z: int, seed: int) -> tuple[np.ndarray, np.ndarray]:
    """Seeded uniform (0, 1] factors scaled so that W H has the mean of M."""
    rng = np.random.default_rng(seed)
    scale = np.sqrt(M.mean() / z) if M.size else 0.0
    W = (1.0 - rng.random((M.shape[0], z))) * scale
    H = (1.0 - rng.random((z, M.shape[1]))) * scale
    return W, H


def _hals_rows(M: np.ndarray, W: np.ndarray, H: np.ndarray, sweeps: int) -> np.ndarray:
    """Coordinate-descent update of the rows of H for fixed W."""
    H = H.copy()
    WtM = W.T @ M
    WtW = W.T @ W
    for _ in range(sweeps):
        for j in range(H.shape[0]):
            step = (WtM[j] - WtW[j] @ H) / max(WtW[j, j], _EPS)
            H[j] = np.maximum(H[j] + step, 0.0)
    return H


def _mu_rows(M: np.ndarray, W: np.ndarray, H: np.ndarray, sweeps: int) -> np.ndarray:
    WtM = W.T @ M
    WtW = W.T @ W
    for _ in range(sweeps):
        H = H * (WtM / (WtW @ H + _EPS))
    return H


def nnmf(M: np.ndarray | FlattenedExplanation, cfg: FactorizationConfig,
         init: tuple[np.ndarray, np.ndarray] | None = None) -> NMFResult:
    """Factorize ``M ~ W H``; the trace starts with the objective at init."""
    if isinstance(M, FlattenedExplanation):
        M = M.matrix
    M = np.asarray(M, dtype=np.float64)
    if M.ndim != 2:
        raise ValueError("nnmf expects a 2-d matrix")
    if (M < 0).any() or not np.isfinite(M).all():
        raise ValueError("nnmf input must be finite and non-negative")
    z = cfg.components
    if not 1 <= z <= min(M.shape):
        raise ValueError(f"components={z} outside [1, min{M.shape}]")

    W, H = random_init(M, z, cfg.seed) if init is None else (np.array(init[0], dtype=np.float64),
                                                             np.array(init[1], dtype=np.float64))
    update = _hals_rows if cfg.solver == "hals" else _mu_rows
    sweeps = cfg.inner_sweeps if cfg.solver == "hals" else 1
    f = objective(M, W, H)
    trace = [f]
    # extrapolation weight and its cap, adapted on accept/reject
    beta, beta_cap = 0.5, 1.0
    Wy, Hy = W, H
    for _ in range(cfg.max_iterations):
        if f == 0.0:
            break
        Hn = update(M, Wy, Hy, sweeps)
        Hy_next = np.maximum(Hn + beta * (Hn - H), 0.0)
        Wn = update(M.T, Hy_next.T, Wy.T, sweeps).T
        Wy_next = np.maximum(Wn + beta * (Wn - W), 0.0)
        fn = objective(M, Wn, Hn)
        if fn > f:
            # extrapolation overshot: plain step from the last accepted point
            Hn = update(M, W, H, sweeps)
            Wn = update(M.T, Hn.T, W.T, sweeps).T
            fn = objective(M, Wn, Hn)
            Wy_next, Hy_next = Wn, Hn
            beta_cap = beta
            beta = beta / 1.5
        else:
            beta = min(beta_cap, beta * 1.05)
            beta_cap = min(1.0, beta_cap * 1.01)
        W, H, f = Wn, Hn, fn
        Wy, Hy = Wy_next, Hy_next
        trace.append(f)
        # relative improvement over a window, robust to short plateaus
        if len(trace) > cfg.check_window:
            prev = trace[-1 - cfg.check_window]
            if prev > 0 and (prev - f) / prev < cfg.convergence_tolerance:
                break
    return NMFResult(W, H, trace)


def concise_set(ex: ExplanationSet, cfg: FactorizationConfig) -> ConciseSet:
    flat = flatten(ex)
    W, H, _ = nnmf(flat, cfg)
    h, w = flat.shape
    return ConciseSet(ex.image_id, H.reshape(cfg.components, h, w), W)


def relative_error(M: np.ndarray, W: np.ndarray, H: np.ndarray) -> float:
    norm = np.linalg.norm(M)
    return float(np.linalg.norm(M - W @ H) / norm) if norm else 0.0
