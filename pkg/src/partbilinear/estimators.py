"""scikit-learn compatible wrappers.

All estimators take ``X`` as a 4-D array ``(n_samples, h, w, channels)``
where the first ``appearance_channels`` channels belong to the appearance
map and the rest to the part map (see :func:`stack_maps`).
"""

from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.utils.validation import check_array, check_is_fitted

from .errors import DimensionError
from .pooling import bilinear_pool_arrays, normalize_arrays
from .sketch import DEFAULT_SKETCH_DIM, SketchParams, compact_bilinear_pool_arrays
from .training import (
    OptimizerConfig,
    TrainConfig,
    TripletLossConfig,
    embed_arrays,
    train,
)


def stack_maps(A, P) -> np.ndarray:
    """Concatenate appearance ``(n, h, w, c_a)`` and part ``(n, h, w, c_p)`` stacks."""
    A = np.asarray(A, dtype=np.float64)
    P = np.asarray(P, dtype=np.float64)
    if A.shape[:3] != P.shape[:3]:
        raise DimensionError(f"appearance stack {A.shape[:3]} and part stack {P.shape[:3]} differ")
    return np.concatenate([A, P], axis=-1)


def check_maps(X, appearance_channels=None):
    """Validate a map stack and split it into ``(n, S, c_a)``, ``(n, S, c_p)``."""
    X = check_array(X, allow_nd=True, dtype=np.float64, ensure_all_finite=True)
    if X.ndim != 4:
        raise DimensionError(f"expected a (n, h, w, channels) array, got {X.ndim} dims")
    n, h, w, c = X.shape
    flat = X.reshape(n, h * w, c)
    if appearance_channels is None:
        return flat, None
    if not 0 < appearance_channels < c:
        raise DimensionError(f"appearance_channels={appearance_channels} must split {c} channels")
    return flat[..., :appearance_channels], flat[..., appearance_channels:]


class _MapTransformer(TransformerMixin, BaseEstimator):
    def _validate_fit(self, X):
        X = check_array(X, allow_nd=True, dtype=np.float64)
        self.n_features_in_ = X.shape[-1]
        self.grid_shape_ = X.shape[1:3]
        return X

    def _check_input(self, X):
        check_is_fitted(self)
        X = np.asarray(X)
        if X.ndim == 4 and X.shape[-1] != self.n_features_in_:
            raise DimensionError(f"fitted on {self.n_features_in_} channels, got {X.shape[-1]}")
        return check_maps(X, getattr(self, "appearance_channels", None))


class BilinearPooler(_MapTransformer):
    """Exact part-aligned bilinear pooling (no learned parameters)."""

    def __init__(self, appearance_channels=1, normalize=True, nonneg_parts=False):
        self.appearance_channels = appearance_channels
        self.normalize = normalize
        self.nonneg_parts = nonneg_parts

    def fit(self, X, y=None):
        self._validate_fit(X)
        return self

    def transform(self, X):
        A, P = self._check_input(X)
        if self.nonneg_parts:
            P = np.maximum(P, 0.0)
        F = bilinear_pool_arrays(A, P)
        return normalize_arrays(F) if self.normalize else F


class CompactBilinearPooler(_MapTransformer):
    """Tensor-sketch approximation of :class:`BilinearPooler`."""

    def __init__(self, appearance_channels=1, sketch_dim=DEFAULT_SKETCH_DIM, random_state=0,
                 normalize=True, nonneg_parts=False):
        self.appearance_channels = appearance_channels
        self.sketch_dim = sketch_dim
        self.random_state = random_state
        self.normalize = normalize
        self.nonneg_parts = nonneg_parts

    def fit(self, X, y=None):
        X = self._validate_fit(X)
        c_a = self.appearance_channels
        self.sketch_params_ = SketchParams.from_seed(c_a, X.shape[-1] - c_a, self.sketch_dim,
                                                     self.random_state)
        return self

    def transform(self, X):
        A, P = self._check_input(X)
        if self.nonneg_parts:
            P = np.maximum(P, 0.0)
        F = compact_bilinear_pool_arrays(A, P, self.sketch_params_)
        return normalize_arrays(F) if self.normalize else F


class GlobalAveragePooler(_MapTransformer):
    """Per-channel spatial mean of the appearance channels."""

    def __init__(self, appearance_channels=None, normalize=True):
        self.appearance_channels = appearance_channels
        self.normalize = normalize

    def fit(self, X, y=None):
        self._validate_fit(X)
        return self

    def transform(self, X):
        A, _ = self._check_input(X)
        F = A.mean(axis=1)
        return normalize_arrays(F) if self.normalize else F


class PartAlignedEmbedder(_MapTransformer):
    """Learn linear appearance/part heads with the all-triplets hinge loss.

    ``pooling`` selects the aggregation: ``"exact"`` or ``"sketched"``
    bilinear pooling, or the ``"gap"`` / ``"concat"`` baselines.
    ``transform`` returns L2-normalized embeddings.
    """

    def __init__(self, appearance_channels=1, n_appearance=8, n_parts=4, pooling="exact",
                 sketch_dim=DEFAULT_SKETCH_DIM, sketch_seed=0, nonneg_parts=False, margin=0.2,
                 learning_rate=0.01, weight_decay=2e-3, momentum=0.9, lr_decay_factor=5.0,
                 lr_decay_every=20_000, n_iter=500, ids_per_batch=18, imgs_per_id=10,
                 random_state=0):
        self.appearance_channels = appearance_channels
        self.n_appearance = n_appearance
        self.n_parts = n_parts
        self.pooling = pooling
        self.sketch_dim = sketch_dim
        self.sketch_seed = sketch_seed
        self.nonneg_parts = nonneg_parts
        self.margin = margin
        self.learning_rate = learning_rate
        self.weight_decay = weight_decay
        self.momentum = momentum
        self.lr_decay_factor = lr_decay_factor
        self.lr_decay_every = lr_decay_every
        self.n_iter = n_iter
        self.ids_per_batch = ids_per_batch
        self.imgs_per_id = imgs_per_id
        self.random_state = random_state

    def _config(self) -> TrainConfig:
        return TrainConfig(
            c_a=self.n_appearance, c_p=self.n_parts, mode=self.pooling,
            nonneg_parts=self.nonneg_parts, ids_per_batch=self.ids_per_batch,
            imgs_per_id=self.imgs_per_id, sketch_dim=self.sketch_dim, sketch_seed=self.sketch_seed,
            loss=TripletLossConfig(self.margin),
            optimizer=OptimizerConfig(
                learning_rate=self.learning_rate, weight_decay=self.weight_decay,
                momentum=self.momentum, lr_decay_factor=self.lr_decay_factor,
                lr_decay_every=self.lr_decay_every, total_iters=self.n_iter,
            ),
        )

    def fit(self, X, y):
        self._validate_fit(X)
        RA, RP = check_maps(X, self.appearance_channels)
        y = np.asarray(y)
        if len(y) != len(RA):
            raise DimensionError(f"{len(RA)} samples but {len(y)} labels")
        result = train(RA, RP, y, self._config(), self.n_iter, self.random_state)
        self.heads_ = result.heads
        self.sketch_params_ = result.sketch
        self.loss_history_ = np.array([loss for _, loss, _ in result.history])
        return self

    def transform(self, X):
        RA, RP = self._check_input(X)
        return embed_arrays(RA, RP, self.heads_, self.pooling, self.sketch_params_)
