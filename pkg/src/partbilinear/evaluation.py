"""CMC and mAP with camera filtering, distractors and multi-trial protocols."""

from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Dict, Mapping, Sequence, Tuple

import numpy as np

from .core import DISTRACTOR_ID, Embedding
from .errors import ConfigurationError, DegenerateEmbeddingError, DimensionError, EmptyInputError
from .matching import RankedResult, rank_all

logger = logging.getLogger(__name__)

DEFAULT_RANKS = (1, 5, 10, 20)


@dataclass(frozen=True)
class LabeledEmbeddings:
    """Embeddings with per-row sample id, identity and camera."""

    features: np.ndarray
    identities: np.ndarray
    cameras: np.ndarray
    sample_ids: Tuple[str, ...] = None

    def __post_init__(self):
        feats = np.atleast_2d(np.asarray(self.features, dtype=np.float64))
        ids = np.asarray(self.identities, dtype=np.int64).ravel()
        cams = np.asarray(self.cameras, dtype=np.int64).ravel()
        n = feats.shape[0]
        if len(ids) != n or len(cams) != n:
            raise DimensionError("features, identities and cameras must have equal length")
        sids = self.sample_ids
        if sids is None:
            sids = tuple(f"{i:06d}" for i in range(n))
        sids = tuple(str(s) for s in sids)
        if len(sids) != n:
            raise DimensionError("sample_ids length differs from features")
        object.__setattr__(self, "features", feats)
        object.__setattr__(self, "identities", ids)
        object.__setattr__(self, "cameras", cams)
        object.__setattr__(self, "sample_ids", sids)

    def __len__(self):
        return self.features.shape[0]

    def take(self, idx) -> "LabeledEmbeddings":
        idx = np.asarray(idx, dtype=np.int64)
        return LabeledEmbeddings(self.features[idx], self.identities[idx], self.cameras[idx],
                                 tuple(self.sample_ids[i] for i in idx))


@dataclass(frozen=True)
class EvalReport:
    cmc: np.ndarray
    map: float
    per_query_ap: np.ndarray
    num_valid_queries: int
    num_queries: int = 0
    ranks: Tuple[int, ...] = DEFAULT_RANKS

    def rank(self, k: int) -> float:
        return float(self.cmc[k - 1])

    def as_dict(self) -> Dict[str, float]:
        out = {f"rank{k}": self.rank(k) for k in self.ranks}
        out["mAP"] = float(self.map)
        out["num_valid_queries"] = int(self.num_valid_queries)
        out["num_queries"] = int(self.num_queries)
        return out


def _match_flags(ordering_ids, ordering_cams, q_id, q_cam):
    """Correct-match flags after dropping same-identity same-camera entries."""
    keep = ~((ordering_ids == q_id) & (ordering_cams == q_cam))
    ids = ordering_ids[keep]
    return (ids == q_id) & (ids != DISTRACTOR_ID)


def average_precision(flags: np.ndarray) -> float:
    """Mean of precision at each correct hit, no interpolation."""
    hits = np.flatnonzero(flags)
    if hits.size == 0:
        return float("nan")
    return float(np.mean(np.arange(1, hits.size + 1) / (hits + 1)))


def evaluate_rankings(rankings: Sequence[RankedResult], labels: Mapping[str, Tuple[int, int]],
                      ranks: Sequence[int] = DEFAULT_RANKS) -> EvalReport:
    """Score precomputed rankings. ``labels`` maps sample id to (identity, camera)."""
    if len(rankings) == 0:
        raise EmptyInputError("no queries to evaluate")
    ranks = tuple(sorted(set(int(k) for k in ranks)))
    if ranks[0] < 1:
        raise ValueError("ranks must be >= 1")
    max_rank = ranks[-1]
    hits_at = np.zeros(max_rank)
    aps = []
    for r in rankings:
        q_id, q_cam = labels[r.query_id]
        g_ids = np.array([labels[s][0] for s in r.ordering], dtype=np.int64)
        g_cams = np.array([labels[s][1] for s in r.ordering], dtype=np.int64)
        flags = _match_flags(g_ids, g_cams, q_id, q_cam)
        if q_id == DISTRACTOR_ID or not flags.any():
            aps.append(np.nan)
            continue
        first = int(np.argmax(flags))
        if first < max_rank:
            hits_at[first:] += 1
        aps.append(average_precision(flags))
    aps = np.array(aps)
    valid = ~np.isnan(aps)
    n_valid = int(valid.sum())
    if n_valid == 0:
        logger.warning("no query has a valid ground-truth match")
        return EvalReport(np.zeros(max_rank), 0.0, aps, 0, len(rankings), ranks)
    if n_valid < len(rankings):
        logger.info("dropped %d queries without ground truth", len(rankings) - n_valid)
    return EvalReport(hits_at / n_valid, float(aps[valid].mean()), aps, n_valid, len(rankings), ranks)


def _labels(*sets: LabeledEmbeddings) -> dict:
    out = {}
    for s in sets:
        for sid, i, c in zip(s.sample_ids, s.identities, s.cameras):
            out[sid] = (int(i), int(c))
    return out


def evaluate(queries: LabeledEmbeddings, gallery: LabeledEmbeddings,
             ranks: Sequence[int] = DEFAULT_RANKS) -> EvalReport:
    if len(queries) == 0:
        raise EmptyInputError("no queries to evaluate")
    if len(set(queries.sample_ids) & set(gallery.sample_ids)):
        raise ValueError("query and gallery sample ids overlap")
    rankings = rank_all(queries.features, queries.sample_ids, gallery.features, gallery.sample_ids)
    return evaluate_rankings(rankings, _labels(queries, gallery), ranks)


def mean_report(reports: Sequence[EvalReport]) -> EvalReport:
    if not reports:
        raise EmptyInputError("no reports to average")
    return EvalReport(
        cmc=np.mean([r.cmc for r in reports], axis=0),
        map=float(np.mean([r.map for r in reports])),
        per_query_ap=np.concatenate([r.per_query_ap for r in reports]),
        num_valid_queries=int(round(np.mean([r.num_valid_queries for r in reports]))),
        num_queries=int(round(np.mean([r.num_queries for r in reports]))),
        ranks=reports[0].ranks,
    )


def sample_single_shot_split(data: LabeledEmbeddings, rng: np.random.Generator,
                             probe_camera: int = 0, gallery_camera: int = 1):
    """Pick one probe-view and one gallery-view image per identity."""
    probes, gals = [], []
    for ident in np.unique(data.identities):
        if ident == DISTRACTOR_ID:
            continue
        rows = np.flatnonzero(data.identities == ident)
        p_rows = rows[data.cameras[rows] == probe_camera]
        g_rows = rows[data.cameras[rows] == gallery_camera]
        if p_rows.size == 0 or g_rows.size == 0:
            raise ConfigurationError(
                f"identity {ident} lacks an image in camera {probe_camera} or {gallery_camera}"
            )
        probes.append(p_rows[rng.integers(p_rows.size)])
        gals.append(g_rows[rng.integers(g_rows.size)])
    return data.take(probes), data.take(gals)


def evaluate_multi_trial(data: LabeledEmbeddings, trials: int = 20, seed: int = 0,
                         ranks: Sequence[int] = DEFAULT_RANKS,
                         probe_camera: int = 0, gallery_camera: int = 1) -> EvalReport:
    """Average single-shot CMC over random probe/gallery draws."""
    if trials < 1:
        raise ConfigurationError("trials must be >= 1")
    rng = np.random.default_rng(seed)
    reports = []
    for _ in range(trials):
        q, g = sample_single_shot_split(data, rng, probe_camera, gallery_camera)
        reports.append(evaluate(q, g, ranks))
    return mean_report(reports)


def multi_query_fuse(embeddings: Sequence) -> np.ndarray:
    """Mean of several embeddings of one identity, re-normalized.

    Accepts :class:`~partbilinear.core.Embedding` objects or raw vectors and
    returns the same kind.
    """
    if len(embeddings) == 0:
        raise EmptyInputError("nothing to fuse")
    if isinstance(embeddings[0], Embedding):
        layouts = {e.layout for e in embeddings}
        if len(layouts) > 1:
            raise DimensionError(f"mixed layouts {layouts}")
        mean = np.mean([e.values for e in embeddings], axis=0)
    else:
        mean = np.mean(np.asarray(embeddings, dtype=np.float64), axis=0)
    norm = np.linalg.norm(mean)
    if norm == 0.0:
        raise DegenerateEmbeddingError("fused embedding has zero norm")
    fused = mean / norm
    if isinstance(embeddings[0], Embedding):
        return Embedding(fused, embeddings[0].layout, normalized=True)
    return fused
