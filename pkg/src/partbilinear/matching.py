"""Similarity, the local factorization identity, and gallery ranking."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence, Tuple

import numpy as np

from .core import Embedding, FeatureMap
from .errors import DegenerateEmbeddingError, DimensionError, EmptyInputError
from .pooling import bilinear_pool, local_part_aligned, normalize


@dataclass(frozen=True)
class RankedResult:
    query_id: str
    ordering: Tuple[str, ...]
    similarities: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "ordering", tuple(self.ordering))
        sims = np.asarray(self.similarities, dtype=np.float64)
        if len(sims) != len(self.ordering):
            raise DimensionError("ordering and similarities differ in length")
        if np.any(sims[1:] > sims[:-1]):
            raise ValueError("similarities must be non-increasing along the ordering")
        object.__setattr__(self, "similarities", sims)


def similarity(e1: Embedding, e2: Embedding) -> float:
    if e1.layout != e2.layout:
        raise DimensionError(f"layout mismatch: {e1.layout} vs {e2.layout}")
    return float(np.dot(e1.values, e2.values))


def image_similarity_direct(A: FeatureMap, P: FeatureMap, A2: FeatureMap, P2: FeatureMap) -> float:
    """Image similarity as the double sum of factorized local similarities.

    Local descriptors are scaled by ``1 / sqrt(||f||)`` of their own image so
    that the local outer products average to the normalized embedding. This
    costs ``O(S^2)`` and exists to cross-check the pooled route.
    """
    norm1 = np.linalg.norm(bilinear_pool(A, P).values)
    norm2 = np.linalg.norm(bilinear_pool(A2, P2).values)
    if norm1 == 0.0 or norm2 == 0.0:
        raise DegenerateEmbeddingError("pooled embedding has zero norm")
    a1 = A.descriptors() / np.sqrt(norm1)
    p1 = P.descriptors() / np.sqrt(norm1)
    a2 = A2.descriptors() / np.sqrt(norm2)
    p2 = P2.descriptors() / np.sqrt(norm2)
    total = 0.0
    for i in range(len(a1)):
        for j in range(len(a2)):
            total += np.dot(a1[i], a2[j]) * np.dot(p1[i], p2[j])
    return total / (len(a1) * len(a2))


def pooled_similarity(A, P, A2, P2) -> float:
    return similarity(normalize(bilinear_pool(A, P)), normalize(bilinear_pool(A2, P2)))


def local_similarity_factorization(a, p, a2, p2) -> Tuple[float, float]:
    lhs = float(np.dot(local_part_aligned(a, p), local_part_aligned(a2, p2)))
    rhs = float(np.dot(a, a2) * np.dot(p, p2))
    return lhs, rhs


def similarity_matrix(Q: np.ndarray, G: np.ndarray) -> np.ndarray:
    """Inner products between rows; rows with zero norm score ``-inf`` everywhere."""
    Q = np.atleast_2d(np.asarray(Q, dtype=np.float64))
    G = np.atleast_2d(np.asarray(G, dtype=np.float64))
    if Q.shape[1] != G.shape[1]:
        raise DimensionError(f"embedding lengths differ: {Q.shape[1]} vs {G.shape[1]}")
    sims = Q @ G.T
    sims[~np.any(Q != 0, axis=1), :] = -np.inf
    sims[:, ~np.any(G != 0, axis=1)] = -np.inf
    return sims


def rank_order(sims: np.ndarray, sample_ids: Sequence[str]) -> np.ndarray:
    """Indices sorting one similarity row descending, ties by ascending sample id."""
    ids = np.asarray(sample_ids, dtype=str)
    return np.lexsort((ids, -np.asarray(sims)))


def rank_gallery(query: Embedding, gallery: Sequence[Tuple[str, Embedding]],
                 query_id: str = "") -> RankedResult:
    if len(gallery) == 0:
        raise EmptyInputError("cannot rank against an empty gallery")
    for sid, e in gallery:
        if e.layout != query.layout:
            raise DimensionError(f"gallery entry {sid!r} has layout {e.layout}, query has {query.layout}")
    ids = [sid for sid, _ in gallery]
    G = np.stack([e.values for _, e in gallery])
    sims = similarity_matrix(query.values[None, :], G)[0]
    order = rank_order(sims, ids)
    return RankedResult(query_id, [ids[i] for i in order], sims[order])


def rank_all(Q: np.ndarray, query_ids: Sequence[str], G: np.ndarray,
             gallery_ids: Sequence[str]) -> list:
    """Rank every query row against the gallery rows."""
    if len(gallery_ids) == 0:
        raise EmptyInputError("cannot rank against an empty gallery")
    sims = similarity_matrix(Q, G)
    out = []
    for qi, qid in enumerate(query_ids):
        order = rank_order(sims[qi], gallery_ids)
        out.append(RankedResult(qid, [gallery_ids[i] for i in order], sims[qi, order]))
    return out
