"""Exact bilinear pooling and the appearance-only / box baselines.

The flattened outer product uses a block-per-part-channel layout with the
appearance index running fastest: entry ``k * c_a + j`` holds ``p_k * a_j``.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence, Tuple

import numpy as np

from .core import Embedding, ExactLayout, FeatureMap, PlainLayout, Role
from .errors import CoordinateRangeError, DegenerateEmbeddingError, DimensionError


def local_part_aligned(a, p) -> np.ndarray:
    a = np.asarray(a, dtype=np.float64).ravel()
    p = np.asarray(p, dtype=np.float64).ravel()
    return np.outer(p, a).ravel()


def _check_same_grid(A: FeatureMap, P: FeatureMap):
    if A.shape[:2] != P.shape[:2]:
        raise DimensionError(f"appearance grid {A.shape[:2]} != part grid {P.shape[:2]}")


def bilinear_pool_arrays(A: np.ndarray, P: np.ndarray) -> np.ndarray:
    """Batched pooling: ``A`` is ``(..., S, c_a)``, ``P`` is ``(..., S, c_p)``.

    Returns ``(..., c_p * c_a)``.
    """
    if A.shape[:-1] != P.shape[:-1]:
        raise DimensionError(f"leading shapes differ: {A.shape[:-1]} vs {P.shape[:-1]}")
    S = A.shape[-2]
    F = np.einsum("...sp,...sa->...pa", P, A) / S
    return F.reshape(F.shape[:-2] + (-1,))


def bilinear_pool(A: FeatureMap, P: FeatureMap, nonneg_parts: bool = False) -> Embedding:
    """Spatial average of the local part-aligned outer products."""
    _check_same_grid(A, P)
    p = P.descriptors()
    if nonneg_parts:
        p = np.maximum(p, 0.0)
    f = bilinear_pool_arrays(A.descriptors(), p)
    return Embedding(f, ExactLayout(A.channels, P.channels))


def normalize_arrays(F: np.ndarray, sample_ids: Sequence[str] = None) -> np.ndarray:
    """Row-wise L2 normalization; any zero row raises."""
    F = np.asarray(F, dtype=np.float64)
    norms = np.linalg.norm(F, axis=-1, keepdims=True)
    zero = np.flatnonzero(norms.reshape(-1) == 0.0)
    if zero.size:
        i = int(zero[0])
        sid = sample_ids[i] if sample_ids is not None else None
        name = f"sample {sid!r}" if sid is not None else f"row {i}"
        raise DegenerateEmbeddingError(f"zero-norm embedding for {name}", sample_id=sid)
    return F / norms


def normalize(f: Embedding) -> Embedding:
    norm = np.linalg.norm(f.values)
    if norm == 0.0:
        raise DegenerateEmbeddingError("cannot normalize an all-zero embedding")
    return Embedding(f.values / norm, f.layout, normalized=True)


@dataclass(frozen=True)
class Box:
    """Half-open cell rectangle ``[x0, x1) x [y0, y1)``."""

    x0: int
    y0: int
    x1: int
    y1: int

    def contains(self, x: int, y: int) -> bool:
        return self.x0 <= x < self.x1 and self.y0 <= y < self.y1


@dataclass(frozen=True)
class BoxPartLayout:
    regions: Tuple[Box, ...]

    def __post_init__(self):
        object.__setattr__(self, "regions", tuple(self.regions))
        if not self.regions:
            raise ValueError("a box layout needs at least one region")

    def check(self, h: int, w: int):
        for k, r in enumerate(self.regions):
            if not (0 <= r.x0 < r.x1 <= w and 0 <= r.y0 < r.y1 <= h):
                raise CoordinateRangeError(f"region {k} {r} not inside the {w}x{h} grid")


def box_indicator_partmap(layout: BoxPartLayout, h: int, w: int) -> FeatureMap:
    layout.check(h, w)
    data = np.zeros((h, w, len(layout.regions)))
    for k, r in enumerate(layout.regions):
        data[r.y0:r.y1, r.x0:r.x1, k] = 1.0
    return FeatureMap(data, Role.PART)


def global_average_pool(A: FeatureMap) -> np.ndarray:
    return A.descriptors().mean(axis=0)


def concat_average_pool(A: FeatureMap, P: FeatureMap) -> np.ndarray:
    _check_same_grid(A, P)
    return np.concatenate([global_average_pool(A), global_average_pool(P)])


def global_average_embedding(A: FeatureMap) -> Embedding:
    return Embedding(global_average_pool(A), PlainLayout(A.channels))
