"""Render feature maps as RGB images from the top principal components."""

from __future__ import annotations

import warnings
from pathlib import Path
from typing import List, Sequence

import numpy as np

from .core import FeatureMap
from .errors import DimensionError, EmptyInputError

PAD_VALUE = 128


def normalized_descriptors(maps: Sequence[FeatureMap]) -> np.ndarray:
    """L2-normalize every local descriptor; zero descriptors stay zero."""
    X = np.concatenate([m.descriptors() for m in maps])
    norms = np.linalg.norm(X, axis=1, keepdims=True)
    return np.divide(X, norms, out=np.zeros_like(X), where=norms > 0)


def principal_projection(X: np.ndarray, n_components: int = 3, rtol: float = 1e-10):
    """Project centered rows onto the leading covariance eigenvectors.

    Returns ``(scores, components, mean, n_valid)``. ``components`` always has
    ``n_components`` rows; rows beyond the numerical rank are zero and
    ``n_valid`` counts the meaningful ones.
    """
    X = np.asarray(X, dtype=np.float64)
    mean = X.mean(axis=0)
    Xc = X - mean
    cov = Xc.T @ Xc / len(X)
    evals, evecs = np.linalg.eigh(cov)
    order = np.argsort(evals)[::-1]
    evals, evecs = evals[order], evecs[:, order]
    scale = max(evals[0], 0.0) if evals.size else 0.0
    valid = evals > rtol * scale if scale > 0 else np.zeros_like(evals, dtype=bool)
    n_valid = int(min(n_components, valid.sum()))
    components = np.zeros((n_components, X.shape[1]))
    components[:n_valid] = evecs[:, :n_valid].T
    return Xc @ components.T, components, mean, n_valid


def _to_bytes(scores: np.ndarray, n_valid: int) -> np.ndarray:
    rgb = np.full(scores.shape, PAD_VALUE, dtype=np.uint8)
    for k in range(n_valid):
        col = scores[:, k]
        lo, hi = col.min(), col.max()
        if hi > lo:
            rgb[:, k] = np.round((col - lo) / (hi - lo) * 255).astype(np.uint8)
    return rgb


def write_ppm(path, rgb: np.ndarray) -> None:
    """Binary (P6) portable pixmap from an ``(h, w, 3)`` uint8 array."""
    h, w, _ = rgb.shape
    with open(path, "wb") as fh:
        fh.write(f"P6\n{w} {h}\n255\n".encode("ascii"))
        fh.write(np.ascontiguousarray(rgb, dtype=np.uint8).tobytes())


def read_ppm(path) -> np.ndarray:
    with open(path, "rb") as fh:
        data = fh.read()
    parts = data.split(b"\n", 3)
    if parts[0] != b"P6":
        raise ValueError(f"{path}: not a P6 pixmap")
    w, h = map(int, parts[1].split())
    return np.frombuffer(parts[3], dtype=np.uint8).reshape(h, w, 3)


def render_maps(maps: Sequence[FeatureMap]) -> List[np.ndarray]:
    """RGB images for a collection of maps sharing one channel count."""
    maps = list(maps)
    if len({m.channels for m in maps}) > 1:
        raise DimensionError("all maps in a collection need the same channel count")
    total = sum(m.size for m in maps)
    if total < 3:
        raise EmptyInputError(f"need at least 3 descriptors, got {total}")
    scores, _, _, n_valid = principal_projection(normalized_descriptors(maps))
    if n_valid < 3:
        warnings.warn(f"only {n_valid} non-degenerate principal components; padding with {PAD_VALUE}")
    rgb = _to_bytes(scores, n_valid)
    out, start = [], 0
    for m in maps:
        out.append(rgb[start:start + m.size].reshape(m.height, m.width, 3))
        start += m.size
    return out


def viz_export(maps: Sequence[FeatureMap], out_dir, names: Sequence[str] = None) -> List[Path]:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    maps = list(maps)
    names = list(names) if names is not None else [f"map{i:04d}" for i in range(len(maps))]
    paths = []
    for name, img in zip(names, render_maps(maps)):
        path = out_dir / f"{name}.ppm"
        write_ppm(path, img)
        paths.append(path)
    return paths
