"""Per-location linear heads trained with an all-triplets hinge loss.

The heads stand in for the last layers of the two feature extractors: each
maps raw per-location channels to appearance or part descriptors. Gradients
are derived by hand through similarity, L2 normalization, pooling (exact,
sketched, or the appearance-only / concat baselines) and the heads.
"""

from __future__ import annotations

import dataclasses
import json
import logging
from dataclasses import dataclass, field
from typing import Dict, Iterator, List, Optional, Sequence, Tuple

import numpy as np

from .core import DISTRACTOR_ID, FeatureMap, ImageSample, Role
from .errors import (
    ConfigurationError,
    DimensionError,
    MalformedBatchError,
    NumericFailureError,
)
from .pooling import bilinear_pool_arrays, normalize_arrays
from .sketch import SketchParams, circular_correlate, mean_circular_convolve

logger = logging.getLogger(__name__)

MODES = ("exact", "sketched", "gap", "concat")
PARAM_NAMES = ("W_a", "b_a", "W_p", "b_p")


@dataclass(frozen=True, eq=False)
class LinearHeads:
    W_a: np.ndarray
    b_a: np.ndarray
    W_p: np.ndarray
    b_p: np.ndarray
    nonneg_parts: bool = False

    def __post_init__(self):
        for name in PARAM_NAMES:
            arr = np.array(getattr(self, name), dtype=np.float64)
            if not np.all(np.isfinite(arr)):
                raise NumericFailureError(f"non-finite entries in {name}")
            arr.setflags(write=False)
            object.__setattr__(self, name, arr)
        if self.W_a.shape[0] != self.b_a.shape[0] or self.W_p.shape[0] != self.b_p.shape[0]:
            raise DimensionError("bias length must match head output channels")

    @classmethod
    def xavier(cls, raw_a: int, raw_p: int, c_a: int, c_p: int, rng: np.random.Generator,
               nonneg_parts: bool = False) -> "LinearHeads":
        """Glorot-uniform weights, zero biases."""
        lim_a = np.sqrt(6.0 / (raw_a + c_a))
        lim_p = np.sqrt(6.0 / (raw_p + c_p))
        return cls(
            rng.uniform(-lim_a, lim_a, size=(c_a, raw_a)), np.zeros(c_a),
            rng.uniform(-lim_p, lim_p, size=(c_p, raw_p)), np.zeros(c_p),
            nonneg_parts,
        )

    @property
    def c_a(self) -> int:
        return self.W_a.shape[0]

    @property
    def c_p(self) -> int:
        return self.W_p.shape[0]

    def params(self) -> Dict[str, np.ndarray]:
        return {name: getattr(self, name) for name in PARAM_NAMES}

    def replace(self, **params) -> "LinearHeads":
        return dataclasses.replace(self, **params)

    def to_dict(self) -> dict:
        out = {name: getattr(self, name).tolist() for name in PARAM_NAMES}
        out["nonneg_parts"] = self.nonneg_parts
        return out

    @classmethod
    def from_dict(cls, d: dict) -> "LinearHeads":
        return cls(*(np.asarray(d[name], dtype=np.float64) for name in PARAM_NAMES),
                   nonneg_parts=bool(d.get("nonneg_parts", False)))


@dataclass(frozen=True)
class TripletLossConfig:
    margin: float = 0.2

    def __post_init__(self):
        if self.margin < 0:
            raise ConfigurationError(f"margin must be >= 0, got {self.margin}")


@dataclass(frozen=True)
class OptimizerConfig:
    learning_rate: float = 0.01
    weight_decay: float = 2e-3
    momentum: float = 0.9
    lr_decay_factor: float = 5.0
    lr_decay_every: int = 20_000
    total_iters: int = 75_000

    def __post_init__(self):
        if not 0 <= self.momentum < 1:
            raise ConfigurationError(f"momentum must lie in [0, 1), got {self.momentum}")
        if self.learning_rate <= 0 or self.lr_decay_factor <= 0 or self.lr_decay_every < 1:
            raise ConfigurationError("learning rate, decay factor and decay period must be positive")
        if self.weight_decay < 0 or self.total_iters < 0:
            raise ConfigurationError("weight decay and total_iters must be non-negative")


def learning_rate(cfg: OptimizerConfig, iteration: int) -> float:
    return cfg.learning_rate / cfg.lr_decay_factor ** (iteration // cfg.lr_decay_every)


# -- heads -------------------------------------------------------------------


def _heads_forward(RA, RP, heads: LinearHeads):
    if RA.shape[-1] != heads.W_a.shape[1] or RP.shape[-1] != heads.W_p.shape[1]:
        raise DimensionError(
            f"raw channels ({RA.shape[-1]}, {RP.shape[-1]}) do not match head inputs "
            f"({heads.W_a.shape[1]}, {heads.W_p.shape[1]})"
        )
    A = RA @ heads.W_a.T + heads.b_a
    pre = RP @ heads.W_p.T + heads.b_p
    P = np.maximum(pre, 0.0) if heads.nonneg_parts else pre
    return A, pre, P


def apply_heads_arrays(RA: np.ndarray, RP: np.ndarray, heads: LinearHeads):
    """Map raw ``(..., S, r)`` arrays to appearance and part descriptors."""
    A, _, P = _heads_forward(np.asarray(RA, dtype=np.float64), np.asarray(RP, dtype=np.float64), heads)
    return A, P


def apply_heads(sample: ImageSample, heads: LinearHeads) -> Tuple[FeatureMap, FeatureMap]:
    h, w = sample.appearance_map.shape[:2]
    A, P = apply_heads_arrays(sample.appearance_map.descriptors(), sample.part_map.descriptors(), heads)
    return (FeatureMap(A.reshape(h, w, -1), Role.APPEARANCE),
            FeatureMap(P.reshape(h, w, -1), Role.PART))


# -- embedding forward / backward -------------------------------------------


@dataclass
class _Cache:
    RA: np.ndarray
    RP: np.ndarray
    A: np.ndarray
    pre: np.ndarray
    P: np.ndarray
    U: Optional[np.ndarray] = None
    V: Optional[np.ndarray] = None


def _embed_forward(RA, RP, heads: LinearHeads, mode: str, sketch: Optional[SketchParams]):
    A, pre, P = _heads_forward(RA, RP, heads)
    cache = _Cache(RA, RP, A, pre, P)
    if mode == "exact":
        F = bilinear_pool_arrays(A, P)
    elif mode == "sketched":
        if sketch is None:
            raise ConfigurationError("sketched mode needs SketchParams")
        cache.U = A @ sketch.matrix_a()
        cache.V = P @ sketch.matrix_p()
        F = mean_circular_convolve(cache.U, cache.V)
    elif mode == "gap":
        F = A.mean(axis=-2)
    elif mode == "concat":
        F = np.concatenate([A.mean(axis=-2), P.mean(axis=-2)], axis=-1)
    else:
        raise ConfigurationError(f"unknown pooling mode {mode!r}; expected one of {MODES}")
    return F, cache


def _embed_backward(dF, cache: _Cache, heads: LinearHeads, mode: str,
                    sketch: Optional[SketchParams]) -> Dict[str, np.ndarray]:
    A, P = cache.A, cache.P
    n, S, c_a = A.shape
    c_p = P.shape[-1]
    if mode == "exact":
        dM = dF.reshape(n, c_p, c_a)
        dA = np.einsum("nsp,npa->nsa", P, dM) / S
        dP = np.einsum("nsa,npa->nsp", A, dM) / S
    elif mode == "sketched":
        g = dF[:, None, :] / S
        dA = circular_correlate(g, cache.V) @ sketch.matrix_a().T
        dP = circular_correlate(g, cache.U) @ sketch.matrix_p().T
    elif mode == "gap":
        dA = np.broadcast_to(dF[:, None, :] / S, A.shape)
        dP = np.zeros_like(P)
    else:
        dA = np.broadcast_to(dF[:, None, :c_a] / S, A.shape)
        dP = np.broadcast_to(dF[:, None, c_a:] / S, P.shape)
    if heads.nonneg_parts:
        dP = dP * (cache.pre > 0)
    return {
        "W_a": np.einsum("nsc,nsr->cr", dA, cache.RA),
        "b_a": dA.sum(axis=(0, 1)),
        "W_p": np.einsum("nsc,nsr->cr", dP, cache.RP),
        "b_p": dP.sum(axis=(0, 1)),
    }


def embed_arrays(RA, RP, heads: LinearHeads, mode: str = "exact",
                 sketch: Optional[SketchParams] = None, normalized: bool = True,
                 sample_ids: Sequence[str] = None) -> np.ndarray:
    """Embed a batch of raw maps ``(n, S, r_a)``, ``(n, S, r_p)``."""
    F, _ = _embed_forward(np.asarray(RA, dtype=np.float64), np.asarray(RP, dtype=np.float64),
                          heads, mode, sketch)
    return normalize_arrays(F, sample_ids) if normalized else F


# -- triplets ----------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class TripletBatch:
    """Identity-labelled raw maps from which every triplet is formed.

    ``raw_a`` is ``(B, S, r_a)``, ``raw_p`` is ``(B, S, r_p)``.
    """

    raw_a: np.ndarray
    raw_p: np.ndarray
    identities: np.ndarray
    sample_ids: Tuple[str, ...] = None

    def __post_init__(self):
        ids = np.asarray(self.identities, dtype=np.int64).ravel()
        raw_a = np.asarray(self.raw_a, dtype=np.float64)
        raw_p = np.asarray(self.raw_p, dtype=np.float64)
        if raw_a.shape[0] != len(ids) or raw_p.shape[:2] != raw_a.shape[:2]:
            raise DimensionError("raw maps and identities must agree on batch size and grid")
        sids = self.sample_ids
        if sids is None:
            sids = tuple(f"b{i}" for i in range(len(ids)))
        object.__setattr__(self, "identities", ids)
        object.__setattr__(self, "raw_a", raw_a)
        object.__setattr__(self, "raw_p", raw_p)
        object.__setattr__(self, "sample_ids", tuple(sids))
        labels, counts = np.unique(ids, return_counts=True)
        if len(labels) < 2:
            raise MalformedBatchError("a batch needs at least two identities")
        if np.any(counts < 2):
            raise MalformedBatchError(
                f"identities {labels[counts < 2].tolist()} have fewer than two images"
            )

    @classmethod
    def from_samples(cls, samples: Sequence[ImageSample]) -> "TripletBatch":
        return cls(
            np.stack([s.appearance_map.descriptors() for s in samples]),
            np.stack([s.part_map.descriptors() for s in samples]),
            [s.identity for s in samples],
            tuple(s.sample_id for s in samples),
        )

    @property
    def size(self) -> int:
        return len(self.identities)

    @property
    def groups(self) -> List[Tuple[int, np.ndarray]]:
        return [(int(i), np.flatnonzero(self.identities == i)) for i in np.unique(self.identities)]


def triplet_count(group_sizes: Sequence[int]) -> int:
    sizes = np.asarray(group_sizes, dtype=np.int64)
    B = int(sizes.sum())
    return int(np.sum(sizes * (sizes - 1) * (B - sizes)))


def enumerate_triplets(batch: TripletBatch) -> Tuple[int, Iterator[Tuple[int, int, int]]]:
    """Count and lazily list every (query, positive, negative) index triple."""
    ids = batch.identities
    count = triplet_count([len(g) for _, g in batch.groups])

    def gen():
        for q in range(len(ids)):
            pos = np.flatnonzero((ids == ids[q]) & (np.arange(len(ids)) != q))
            neg = np.flatnonzero(ids != ids[q])
            for p in pos:
                for n in neg:
                    yield q, int(p), int(n)

    return count, gen()


def _triplet_index_arrays(ids: np.ndarray):
    B = len(ids)
    same = ids[:, None] == ids[None, :]
    pos = same & ~np.eye(B, dtype=bool)
    q, p, n = np.nonzero(pos[:, :, None] & ~same[:, None, :])
    return q, p, n


def triplet_loss(sim_pos: float, sim_neg: float, cfg: TripletLossConfig = TripletLossConfig()) -> float:
    return max(cfg.margin + sim_neg - sim_pos, 0.0)


def _loss_grad_gram(Fn, ids, margin):
    """Loss and d/dFn via the pairwise similarity matrix."""
    G = Fn @ Fn.T
    same = ids[:, None] == ids[None, :]
    pos = same & ~np.eye(len(ids), dtype=bool)
    neg = ~same
    hinge = margin + G[:, None, :] - G[:, :, None]  # [q, p, n]
    mask = pos[:, :, None] & neg[:, None, :]
    T = int(mask.sum())
    active = mask & (hinge > 0)
    loss = float(np.sum(hinge, where=active)) / T
    dG = (active.sum(axis=1) - active.sum(axis=2)) / T
    return loss, (dG + dG.T) @ Fn


def _loss_grad_direct(Fn, ids, margin):
    """Loss and d/dFn accumulated triplet by triplet."""
    q, p, n = _triplet_index_arrays(ids)
    T = len(q)
    hinge = margin + np.einsum("ij,ij->i", Fn[q], Fn[n]) - np.einsum("ij,ij->i", Fn[q], Fn[p])
    act = hinge > 0
    loss = float(hinge[act].sum()) / T
    q, p, n = q[act], p[act], n[act]
    dFn = np.zeros_like(Fn)
    np.add.at(dFn, q, (Fn[n] - Fn[p]) / T)
    np.add.at(dFn, n, Fn[q] / T)
    np.add.at(dFn, p, -Fn[q] / T)
    return loss, dFn


def batch_loss(batch: TripletBatch, heads: LinearHeads, mode: str = "exact",
               cfg: TripletLossConfig = TripletLossConfig(),
               sketch: Optional[SketchParams] = None,
               method: str = "gram") -> Tuple[float, Dict[str, np.ndarray]]:
    """Mean hinge loss over all triplets of the batch and its head gradients.

    ``method="direct"`` accumulates per triplet; ``"gram"`` regroups the same
    sums through the pairwise similarity matrix. Both give the same result.
    """
    F, cache = _embed_forward(batch.raw_a, batch.raw_p, heads, mode, sketch)
    norms = np.linalg.norm(F, axis=1, keepdims=True)
    Fn = normalize_arrays(F, batch.sample_ids)
    if method == "gram":
        loss, dFn = _loss_grad_gram(Fn, batch.identities, cfg.margin)
    elif method == "direct":
        loss, dFn = _loss_grad_direct(Fn, batch.identities, cfg.margin)
    else:
        raise ValueError(f"unknown method {method!r}")
    dF = (dFn - Fn * np.sum(dFn * Fn, axis=1, keepdims=True)) / norms
    return loss, _embed_backward(dF, cache, heads, mode, sketch)


# -- optimizer ---------------------------------------------------------------


def sgd_step(heads: LinearHeads, grads: Dict[str, np.ndarray], state: Optional[Dict[str, np.ndarray]],
             cfg: OptimizerConfig, iteration: int) -> Tuple[LinearHeads, Dict[str, np.ndarray]]:
    """One momentum SGD update. Weight decay touches weight matrices, not biases."""
    for name in PARAM_NAMES:
        if not np.all(np.isfinite(grads[name])):
            raise NumericFailureError(f"non-finite gradient for {name} at iteration {iteration}")
    if state is None:
        state = {name: np.zeros_like(getattr(heads, name)) for name in PARAM_NAMES}
    lr = learning_rate(cfg, iteration)
    new_state, new_params = {}, {}
    for name in PARAM_NAMES:
        w = getattr(heads, name)
        g = grads[name]
        if name.startswith("W"):
            g = g + cfg.weight_decay * w
        v = cfg.momentum * state[name] + g
        new_state[name] = v
        new_params[name] = w - lr * v
    return heads.replace(**new_params), new_state


# -- training loop -----------------------------------------------------------


@dataclass(frozen=True)
class TrainConfig:
    c_a: int = 8
    c_p: int = 4
    mode: str = "exact"
    nonneg_parts: bool = False
    ids_per_batch: int = 18
    imgs_per_id: int = 10
    sketch_dim: int = 512
    sketch_seed: int = 0
    loss: TripletLossConfig = field(default_factory=TripletLossConfig)
    optimizer: OptimizerConfig = field(default_factory=OptimizerConfig)

    def __post_init__(self):
        if self.mode not in MODES:
            raise ConfigurationError(f"unknown pooling mode {self.mode!r}; expected one of {MODES}")
        if min(self.c_a, self.c_p, self.sketch_dim) < 1:
            raise ConfigurationError("head widths and sketch dimension must be positive")
        if self.ids_per_batch < 2 or self.imgs_per_id < 2:
            raise ConfigurationError("batches need >= 2 identities with >= 2 images each")

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        d = dict(d)
        loss = TripletLossConfig(**d.pop("loss", {}))
        opt = OptimizerConfig(**d.pop("optimizer", {}))
        unknown = set(d) - {f.name for f in dataclasses.fields(cls)}
        if unknown:
            raise ConfigurationError(f"unknown config keys {sorted(unknown)}")
        return cls(loss=loss, optimizer=opt, **d)

    @classmethod
    def from_json(cls, path) -> "TrainConfig":
        with open(path) as fh:
            return cls.from_dict(json.load(fh))

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    def sketch_params(self) -> Optional[SketchParams]:
        if self.mode != "sketched":
            return None
        return SketchParams.from_seed(self.c_a, self.c_p, self.sketch_dim, self.sketch_seed)


@dataclass
class TrainResult:
    heads: LinearHeads
    history: List[Tuple[int, float, float]]
    config: TrainConfig
    sketch: Optional[SketchParams] = None


class BatchSampler:
    """Draws identity-balanced batches.

    Identities are picked uniformly without replacement; images within an
    identity without replacement, falling back to replacement when the
    identity has fewer than ``imgs_per_id`` images.
    """

    def __init__(self, identities: np.ndarray, ids_per_batch: int, imgs_per_id: int,
                 rng: np.random.Generator):
        identities = np.asarray(identities, dtype=np.int64)
        pools = {}
        for ident in np.unique(identities):
            if ident == DISTRACTOR_ID:
                continue
            rows = np.flatnonzero(identities == ident)
            if len(rows) < 2:
                logger.warning("identity %d has a single image; excluded from training", ident)
                continue
            pools[int(ident)] = rows
        if len(pools) < ids_per_batch:
            raise ConfigurationError(
                f"batch asks for {ids_per_batch} identities but only {len(pools)} are trainable"
            )
        self.pools = pools
        self.labels = np.array(sorted(pools))
        self.ids_per_batch = ids_per_batch
        self.imgs_per_id = imgs_per_id
        self.rng = rng

    def sample(self) -> np.ndarray:
        chosen = self.rng.choice(self.labels, size=self.ids_per_batch, replace=False)
        rows = []
        for ident in chosen:
            pool = self.pools[int(ident)]
            replace = len(pool) < self.imgs_per_id
            rows.append(self.rng.choice(pool, size=self.imgs_per_id, replace=replace))
        return np.concatenate(rows)


def train(raw_a: np.ndarray, raw_p: np.ndarray, identities, config: TrainConfig = TrainConfig(),
          iterations: Optional[int] = None, seed: int = 0,
          init_heads: Optional[LinearHeads] = None, callback=None) -> TrainResult:
    """Fit linear heads on ``(n, S, r_a)`` / ``(n, S, r_p)`` raw maps.

    Deterministic for a given seed. ``history`` holds ``(iteration, loss, lr)``
    with the loss measured before that iteration's update.
    """
    raw_a = np.asarray(raw_a, dtype=np.float64)
    raw_p = np.asarray(raw_p, dtype=np.float64)
    identities = np.asarray(identities, dtype=np.int64)
    if iterations is None:
        iterations = config.optimizer.total_iters
    rng = np.random.default_rng(seed)
    sampler = BatchSampler(identities, config.ids_per_batch, config.imgs_per_id, rng)
    heads = init_heads
    if heads is None:
        heads = LinearHeads.xavier(raw_a.shape[-1], raw_p.shape[-1], config.c_a, config.c_p, rng,
                                   config.nonneg_parts)
    sketch = config.sketch_params()
    state = None
    history = []
    for it in range(iterations):
        rows = sampler.sample()
        batch = TripletBatch(raw_a[rows], raw_p[rows], identities[rows], tuple(f"r{r}" for r in rows))
        loss, grads = batch_loss(batch, heads, config.mode, config.loss, sketch)
        if not np.isfinite(loss):
            raise NumericFailureError(f"non-finite loss at iteration {it}")
        history.append((it, loss, learning_rate(config.optimizer, it)))
        heads, state = sgd_step(heads, grads, state, config.optimizer, it)
        if callback is not None:
            callback(it, loss)
    return TrainResult(heads, history, config, sketch)


def train_samples(samples: Sequence[ImageSample], config: TrainConfig = TrainConfig(),
                  iterations: Optional[int] = None, seed: int = 0) -> TrainResult:
    raw_a = np.stack([s.appearance_map.descriptors() for s in samples])
    raw_p = np.stack([s.part_map.descriptors() for s in samples])
    return train(raw_a, raw_p, [s.identity for s in samples], config, iterations, seed)
