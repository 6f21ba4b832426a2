"""Synthetic identities with vertically misaligned body parts.

Every identity wears ``num_parts`` appearance signatures stacked top to
bottom (think head / torso / legs). Signatures come from a small shared
palette, so identities mostly differ in *which* part carries *which*
signature rather than in the overall mix. Each image shifts the whole body
vertically and jitters the part boundaries, leaving background clutter in
the uncovered rows. Raw part channels are smeared, noisy part indicators.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import List, Tuple

import numpy as np

from .core import DISTRACTOR_ID, FeatureMap, ImageSample, Role, Split
from .errors import ConfigurationError


@dataclass(frozen=True)
class SynthConfig:
    num_identities: int = 40
    images_per_identity: int = 8
    height: int = 8
    width: int = 4
    num_parts: int = 3
    appearance_channels: int = 8
    jitter: int = 3
    noise: float = 0.3
    distractor_fraction: float = 0.2
    cameras: int = 2
    seed: int = 0
    palette_size: int = 6
    background_scale: float = 1.0
    train_fraction: float = 0.5

    def validate(self):
        counts = (self.num_identities, self.images_per_identity, self.height, self.width,
                  self.num_parts, self.appearance_channels, self.cameras, self.palette_size)
        if min(counts) < 1:
            raise ConfigurationError("all counts must be positive")
        if not 0 <= self.jitter < min(self.height, self.width):
            raise ConfigurationError(f"jitter {self.jitter} must lie in [0, min(h, w))")
        if self.num_parts > self.height:
            raise ConfigurationError(
                f"{self.num_parts} parts cannot be stacked in {self.height} rows"
            )
        if self.noise < 0 or self.distractor_fraction < 0 or self.background_scale < 0:
            raise ConfigurationError("noise, background scale and distractor fraction must be >= 0")
        if not 0 <= self.train_fraction <= 1:
            raise ConfigurationError("train_fraction must lie in [0, 1]")


@dataclass
class SynthDataset:
    samples: List[ImageSample]
    splits: List[Split]
    config: SynthConfig

    def select(self, split) -> List[ImageSample]:
        split = Split(split)
        return [s for s, sp in zip(self.samples, self.splits) if sp == split]

    def arrays(self, split=None):
        """Raw ``(n, S, r_a)``, ``(n, S, r_p)``, identities, cameras, sample ids."""
        samples = self.samples if split is None else self.select(split)
        return (
            np.stack([s.appearance_map.descriptors() for s in samples]),
            np.stack([s.part_map.descriptors() for s in samples]),
            np.array([s.identity for s in samples]),
            np.array([s.camera for s in samples]),
            tuple(s.sample_id for s in samples),
        )


def nominal_boundaries(height: int, num_parts: int) -> np.ndarray:
    return np.round(np.linspace(0, height, num_parts + 1)).astype(int)


def _part_rows(cfg: SynthConfig, rng: np.random.Generator) -> np.ndarray:
    """Part index per row for one image (-1 for background)."""
    h, K = cfg.height, cfg.num_parts
    edges = nominal_boundaries(h, K).copy()
    if cfg.jitter:
        # Interior boundaries move independently but keep every part >= 1 row tall.
        for k in range(1, K):
            lo, hi = edges[k - 1] + 1, max(edges[k - 1] + 1, edges[k + 1] - 1)
            edges[k] = np.clip(edges[k] + rng.integers(-1, 2), lo, hi)
        # Whole-body shift, limited so each part keeps at least one visible row.
        lo = max(-cfg.jitter, 1 - edges[1])
        hi = min(cfg.jitter, h - 1 - edges[K - 1])
        edges = edges + rng.integers(lo, hi + 1)
    rows = np.full(h, -1)
    for k in range(K):
        a, b = max(edges[k], 0), min(edges[k + 1], h)
        rows[a:b] = k
    return rows


def _render(cfg: SynthConfig, signatures: np.ndarray, rng: np.random.Generator):
    h, w, K, c = cfg.height, cfg.width, cfg.num_parts, cfg.appearance_channels
    rows = _part_rows(cfg, rng)
    app = rng.normal(scale=cfg.background_scale, size=(h, w, c))
    onehot = np.zeros((h, K))
    for y, k in enumerate(rows):
        if k >= 0:
            app[y] = signatures[k]
            onehot[y, k] = 1.0
    app = app + cfg.noise * rng.normal(size=(h, w, c))
    smeared = onehot.copy()
    smeared[1:] += 0.5 * onehot[:-1]
    smeared[:-1] += 0.5 * onehot[1:]
    part = np.repeat(smeared[:, None, :], w, axis=1)
    part = part + cfg.noise * rng.normal(size=(h, w, K))
    return app, part


def generate(cfg: SynthConfig = SynthConfig()) -> SynthDataset:
    """Build the dataset in memory; deterministic for a given config."""
    cfg.validate()
    root = np.random.SeedSequence(cfg.seed)
    palette_seq, dis_seq, *id_seqs = root.spawn(2 + cfg.num_identities)
    palette = np.random.default_rng(palette_seq).normal(size=(cfg.palette_size, cfg.appearance_channels))

    n_train = int(round(cfg.train_fraction * cfg.num_identities))
    samples, splits = [], []
    for ident, seq in enumerate(id_seqs):
        rng = np.random.default_rng(seq)
        signatures = palette[rng.integers(cfg.palette_size, size=cfg.num_parts)]
        seen_cams = set()
        for i in range(cfg.images_per_identity):
            app, part = _render(cfg, signatures, rng)
            cam = i % cfg.cameras
            sid = f"id{ident:04d}_img{i:03d}"
            samples.append(ImageSample(sid, ident, cam, FeatureMap(app, Role.RAW), FeatureMap(part, Role.RAW)))
            if ident < n_train:
                splits.append(Split.TRAIN)
            elif cam not in seen_cams:
                seen_cams.add(cam)
                splits.append(Split.QUERY)
            else:
                splits.append(Split.GALLERY)

    n_dis = int(round(cfg.distractor_fraction * cfg.num_identities * cfg.images_per_identity))
    rng = np.random.default_rng(dis_seq)
    for j in range(n_dis):
        signatures = palette[rng.integers(cfg.palette_size, size=cfg.num_parts)]
        signatures = signatures + cfg.noise * rng.normal(size=signatures.shape)
        app, part = _render(cfg, signatures, rng)
        sid = f"dis{j:05d}"
        samples.append(ImageSample(sid, DISTRACTOR_ID, j % cfg.cameras,
                                   FeatureMap(app, Role.RAW), FeatureMap(part, Role.RAW)))
        splits.append(Split.GALLERY)
    return SynthDataset(samples, splits, cfg)


def split_counts(ds: SynthDataset) -> Tuple[int, int, int]:
    return tuple(sum(sp == s for sp in ds.splits) for s in (Split.TRAIN, Split.QUERY, Split.GALLERY))
